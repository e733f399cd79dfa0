//! End-to-end orchestration: straighten → inpaint → measure.

use std::collections::{BTreeMap, BTreeSet};

use crate::analysis::{self, LevelMeasurement, Metrics, PipelineReport, PreFracture, Psnr, ReportInputs};
use crate::atlas::{compute_scale, scale_atlas, Atlas, ScaledAtlas};
use crate::error::{Error, Result};
use crate::inpaint::{inpaint_all, InpaintOptions, InpaintResult};
use crate::labels;
use crate::straighten::{straighten_spine, StraightenOptions, StraightenOutput};
use crate::volume::{volume_of_label, warp, DisplacementField, LabelVolume, ScalarVolume, Volume, VolumeGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineOptions {
    pub straighten: StraightenOptions,
    pub inpaint: InpaintOptions,
    /// Inpaint directly on the input image, skipping straightening.
    pub ablation: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fractured: BTreeSet<u8>,
    /// `None` when straightening was skipped.
    pub straightened: Option<StraightenOutput>,
    pub scale: f64,
    pub scaled_atlas: ScaledAtlas,
    pub healthy_ct: ScalarVolume,
    pub healthy_mask: LabelVolume,
    pub inpainted: BTreeMap<u8, InpaintResult>,
    /// Measured on the input mask.
    pub fractured_volumes_ml: BTreeMap<u8, f64>,
    pub fractured_distances_mm: BTreeMap<u8, f64>,
}

impl PipelineOutput {
    /// The image the inpainting ran on.
    pub fn working_ct<'a>(&'a self, input: &'a ScalarVolume) -> &'a ScalarVolume {
        self.straightened.as_ref().map(|s| &s.ct).unwrap_or(input)
    }

    pub fn straightened_distances_mm(&self) -> Result<BTreeMap<u8, f64>> {
        let Some(s) = &self.straightened else {
            return Ok(BTreeMap::new());
        };
        let c = s.mask.centroids();
        self.fractured
            .iter()
            .map(|&f| Ok((f, analysis::fracture_distance(&c, f)?)))
            .collect()
    }

    /// Union of all inpainting ROIs.
    pub fn roi(&self) -> Volume<bool> {
        let g = *self.healthy_mask.geometry();
        let mut data = vec![false; g.len()];
        for r in self.inpainted.values() {
            for (d, &b) in data.iter_mut().zip(r.roi.region.data()) {
                *d |= b;
            }
        }
        Volume::new(g, data).expect("matching length")
    }

    pub fn report_inputs(&self) -> Result<ReportInputs> {
        let straight = self.straightened_distances_mm()?;
        let levels = self
            .fractured
            .iter()
            .map(|&c| LevelMeasurement {
                code: c,
                fractured_ml: self.fractured_volumes_ml[&c],
                inpainted_ml: self.inpainted[&c].volume_ml(),
                fractured_distance_mm: self.fractured_distances_mm[&c],
                straightened_distance_mm: straight.get(&c).copied(),
            })
            .collect();
        let (transforms, residuals_mm) = match &self.straightened {
            Some(s) => (
                s.transforms(),
                s.registrations.iter().map(|(c, r)| (*c, r.residual_mm)).collect(),
            ),
            None => Default::default(),
        };
        Ok(ReportInputs {
            ablation: self.straightened.is_none(),
            scale: self.scale,
            levels,
            pre: None,
            metrics: Metrics::default(),
            transforms,
            residuals_mm,
        })
    }

    pub fn report(&self, pre: Option<PreFracture>, metrics: Metrics) -> Result<PipelineReport> {
        let mut inputs = self.report_inputs()?;
        inputs.pre = pre;
        inputs.metrics = metrics;
        analysis::build_report(&inputs)
    }
}

fn check_fractured(mask: &LabelVolume, fractured: &BTreeSet<u8>) -> Result<()> {
    if fractured.is_empty() {
        return Err(Error::InvalidInput("no fractured vertebra given".into()));
    }
    for &c in fractured {
        if !mask.contains_code(c) {
            return Err(Error::InvalidInput(format!(
                "fractured vertebra {} is not in the mask",
                labels::display(c)
            )));
        }
    }
    Ok(())
}

/// Runs the whole pipeline on one CT/mask pair.
pub fn run_pipeline(
    ct: &ScalarVolume,
    mask: &LabelVolume,
    fractured: &BTreeSet<u8>,
    atlas: &Atlas,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    ct.geometry().ensure_same(mask.geometry(), "CT vs mask")?;
    check_fractured(mask, fractured)?;
    let centroids = mask.centroids();
    let fractured_distances_mm = fractured
        .iter()
        .map(|&f| Ok((f, analysis::fracture_distance(&centroids, f)?)))
        .collect::<Result<_>>()?;
    let fractured_volumes_ml = fractured.iter().map(|&f| (f, volume_of_label(mask, f))).collect();
    let codes: Vec<u8> = fractured.iter().copied().collect();
    let (straightened, scale, scaled_atlas, healthy_ct, healthy_mask, inpainted) = if opts.ablation {
        let scale = compute_scale(&centroids, atlas, fractured)?;
        let sa = scale_atlas(atlas, scale)?;
        let (hct, hmask, res) = inpaint_all(ct, mask, &codes, &sa, &opts.inpaint)?;
        (None, scale, sa, hct, hmask, res)
    } else {
        let s = straighten_spine(ct, mask, fractured, atlas, &opts.straighten)?;
        let (hct, hmask, res) = inpaint_all(&s.ct, &s.mask, &codes, &s.scaled_atlas, &opts.inpaint)?;
        let (scale, sa) = (s.scale, s.scaled_atlas.clone());
        (Some(s), scale, sa, hct, hmask, res)
    };
    Ok(PipelineOutput {
        fractured: fractured.clone(),
        straightened,
        scale,
        scaled_atlas,
        healthy_ct,
        healthy_mask,
        inpainted,
        fractured_volumes_ml,
        fractured_distances_mm,
    })
}

/// Resamples onto `g` through the identity map.
pub fn resample_to<V: crate::volume::Warp>(vol: &V, g: &VolumeGeometry) -> Result<V> {
    warp(vol, &DisplacementField::zeros(*g))
}

/// Pre-fracture scan of the same patient, used to evaluate a run.
#[derive(Debug, Clone)]
pub struct Reference<'a> {
    pub ct: &'a ScalarVolume,
    pub mask: &'a LabelVolume,
}

#[derive(Debug, Clone)]
pub struct ReferenceComparison {
    pub pre: PreFracture,
    pub metrics: Metrics,
    /// The reference after the same processing, on the output grid.
    pub ct: ScalarVolume,
    pub mask: LabelVolume,
}

/// Puts the reference through the same straightening (same fractured set,
/// so the same scale and grid) and compares it with the healthy estimate.
/// Pre-fracture volumes come from the unprocessed reference mask; distances
/// from the processed one.
pub fn compare_reference(
    out: &PipelineOutput,
    reference: &Reference,
    atlas: &Atlas,
    opts: &PipelineOptions,
) -> Result<ReferenceComparison> {
    reference.ct.geometry().ensure_same(reference.mask.geometry(), "reference CT vs mask")?;
    check_fractured(reference.mask, &out.fractured)?;
    let g = *out.healthy_mask.geometry();
    let (ct, mask) = if out.straightened.is_some() {
        let s = straighten_spine(reference.ct, reference.mask, &out.fractured, atlas, &opts.straighten)?;
        (s.ct, s.mask)
    } else {
        (reference.ct.clone(), reference.mask.clone())
    };
    let (ct, mask) = if ct.geometry() == &g {
        (ct, mask)
    } else {
        (resample_to(&ct, &g)?, resample_to(&mask, &g)?)
    };
    let centroids = mask.centroids();
    let mut pre = PreFracture::default();
    for &c in &out.fractured {
        pre.volumes_ml.insert(c, volume_of_label(reference.mask, c));
        pre.distances_mm.insert(c, analysis::fracture_distance(&centroids, c)?);
    }
    let pick = |m: &LabelVolume| -> Volume<bool> { m.map(|v| out.fractured.contains(&v)) };
    let roi = out.roi();
    let psnr = analysis::psnr(&out.healthy_ct, &ct, Some(&roi))?;
    let metrics = Metrics {
        dice: Some(analysis::dice(&pick(&out.healthy_mask), &pick(&mask))?),
        iou: Some(analysis::iou(&pick(&out.healthy_mask), &pick(&mask))?),
        ssim: Some(analysis::ssim(&out.healthy_ct, &ct, Some(&roi))?),
        psnr_db: psnr.db(),
        psnr_identical: psnr == Psnr::Identical,
        mre: None,
    };
    Ok(ReferenceComparison { pre, metrics, ct, mask })
}
