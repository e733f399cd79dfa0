//! Evaluation metrics, cement bound and the pipeline report.
//!
//! Sign conventions follow the published tables: volume error is
//! `pre − inpainted`, fracture-distance error is `straightened − pre`, and
//! relative errors are `error / pre × 100`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels;
use crate::registration::RigidTransform;
use crate::volume::{ScalarVolume, Vec3, Volume};

pub const REPORT_VERSION: u32 = 1;

fn counts(a: &Volume<bool>, b: &Volume<bool>) -> Result<(usize, usize, usize)> {
    a.geometry().ensure_same(b.geometry(), "masks")?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    Ok((na, nb, both))
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly.
pub fn dice(a: &Volume<bool>, b: &Volume<bool>) -> Result<f64> {
    let (na, nb, both) = counts(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    })
}

/// `|A∩B| / |A∪B|`; two empty masks agree perfectly.
pub fn iou(a: &Volume<bool>, b: &Volume<bool>) -> Result<f64> {
    let (na, nb, both) = counts(a, b)?;
    let union = na + nb - both;
    Ok(if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    })
}

fn roi_indices(x: &ScalarVolume, y: &ScalarVolume, roi: Option<&Volume<bool>>) -> Result<Vec<usize>> {
    x.geometry().ensure_same(y.geometry(), "images")?;
    let idx: Vec<usize> = match roi {
        Some(r) => {
            r.geometry().ensure_same(x.geometry(), "ROI")?;
            r.data()
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect()
        }
        None => (0..x.data().len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::InvalidInput("empty ROI".into()));
    }
    Ok(idx)
}

/// Joint dynamic range of both images over the ROI.
fn joint_range(x: &ScalarVolume, y: &ScalarVolume, idx: &[usize]) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &i in idx {
        for v in [x.data()[i] as f64, y.data()[i] as f64] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let l = hi - lo;
    if l > 0.0 {
        Ok(l)
    } else {
        Err(Error::Degenerate("images have zero dynamic range over the ROI".into()))
    }
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 3;

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *w = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

/// Separable weighted sum along one axis of a dense box.
fn blur_axis(src: &[f64], dims: [usize; 3], axis: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis] as isize;
    let mut out = vec![0.0; src.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let c = ((idx / stride) % dims[axis]) as isize;
        let mut s = 0.0;
        for t in -r..=r {
            let q = c + t;
            if q >= 0 && q < n {
                s += k[(t + r) as usize] * src[(idx as isize + t * stride as isize) as usize];
            }
        }
        *o = s;
    }
    out
}

/// Mean local SSIM over the ROI with a 7³ Gaussian window (σ = 1.5) that is
/// renormalized where it leaves the grid; `L` is the joint range of both
/// images over the ROI.
pub fn ssim(x: &ScalarVolume, y: &ScalarVolume, roi: Option<&Volume<bool>>) -> Result<f64> {
    let idx = roi_indices(x, y, roi)?;
    let l = joint_range(x, y, &idx)?;
    let g = x.geometry();
    let dims = g.dims();
    // work on the ROI box grown by the window radius
    let mut lo = dims;
    let mut hi = [0usize; 3];
    for &i in &idx {
        let c = g.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(SSIM_RADIUS);
        hi[a] = (hi[a] + SSIM_RADIUS).min(dims[a] - 1);
    }
    let bd = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let n = bd[0] * bd[1] * bd[2];
    let at = |i: usize, j: usize, k: usize| g.index(lo[0] + i, lo[1] + j, lo[2] + k);
    let mut fields = vec![vec![0.0f64; n]; 6];
    let mut b = 0;
    for k in 0..bd[2] {
        for j in 0..bd[1] {
            for i in 0..bd[0] {
                let gi = at(i, j, k);
                let (xv, yv) = (x.data()[gi] as f64, y.data()[gi] as f64);
                fields[0][b] = xv;
                fields[1][b] = yv;
                fields[2][b] = xv * xv;
                fields[3][b] = yv * yv;
                fields[4][b] = xv * yv;
                fields[5][b] = 1.0;
                b += 1;
            }
        }
    }
    // the window is clipped at the grid border, not at the working box
    let kern = gaussian_kernel();
    let blurred: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| {
            let mut v = f.clone();
            for axis in 0..3 {
                v = blur_axis(&v, bd, axis, &kern);
            }
            v
        })
        .collect();
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let mut total = 0.0;
    for &gi in &idx {
        let c = g.coords(gi);
        let bi = (c[0] - lo[0]) + bd[0] * ((c[1] - lo[1]) + bd[1] * (c[2] - lo[2]));
        let w = blurred[5][bi];
        let mx = blurred[0][bi] / w;
        let my = blurred[1][bi] / w;
        let vx = (blurred[2][bi] / w - mx * mx).max(0.0);
        let vy = (blurred[3][bi] / w - my * my).max(0.0);
        let cxy = blurred[4][bi] / w - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / idx.len() as f64)
}

/// PSNR in dB, or the identical-input sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Identical,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(*v),
            Psnr::Identical => None,
        }
    }
}

/// `20·log10(L / RMSE)` over the ROI with `L` the joint range.
pub fn psnr(x: &ScalarVolume, y: &ScalarVolume, roi: Option<&Volume<bool>>) -> Result<Psnr> {
    let idx = roi_indices(x, y, roi)?;
    let mse = idx
        .iter()
        .map(|&i| {
            let d = x.data()[i] as f64 - y.data()[i] as f64;
            d * d
        })
        .sum::<f64>()
        / idx.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    let l = joint_range(x, y, &idx)?;
    Ok(Psnr::Finite(20.0 * (l / mse.sqrt()).log10()))
}

/// Mean of `|est − truth| / truth`.
pub fn mre(estimated: &[f64], truth: &[f64]) -> Result<f64> {
    if estimated.len() != truth.len() || estimated.is_empty() {
        return Err(Error::InvalidInput(format!(
            "mre needs equal non-empty lists, got {} and {}",
            estimated.len(),
            truth.len()
        )));
    }
    if truth.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidInput("truth volumes must be > 0".into()));
    }
    Ok(estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).abs() / t)
        .sum::<f64>()
        / truth.len() as f64)
}

/// Distance between the centroids directly above and below `fractured`.
pub fn fracture_distance(centroids: &BTreeMap<u8, Vec3>, fractured: u8) -> Result<f64> {
    let get = |c: u8| {
        centroids.get(&c).ok_or_else(|| {
            Error::InvalidInput(format!(
                "fracture distance of {} needs {}",
                labels::display(fractured),
                labels::display(c)
            ))
        })
    };
    if fractured <= 1 {
        return Err(Error::InvalidInput(format!(
            "{} has no vertebra above",
            labels::display(fractured)
        )));
    }
    Ok((get(fractured - 1)? - get(fractured + 1)?).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CementBound {
    pub ml: f64,
    /// The fractured volume exceeded the healthy estimate; the bound was
    /// clamped to zero.
    pub clamped: bool,
}

/// `max(0, inpainted − fractured)` in mL.
pub fn cement_upper_bound(inpainted_ml: f64, fractured_ml: f64) -> Result<CementBound> {
    if !(inpainted_ml >= 0.0 && fractured_ml >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "volumes must be >= 0, got {inpainted_ml} and {fractured_ml}"
        )));
    }
    let d = inpainted_ml - fractured_ml;
    Ok(if d < 0.0 {
        CementBound { ml: 0.0, clamped: true }
    } else {
        CementBound { ml: d, clamped: false }
    })
}

/// `error / pre × 100`.
pub fn relative_error_pct(error: f64, pre: f64) -> f64 {
    error / pre * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub level: String,
    pub pre_ml: Option<f64>,
    pub fractured_ml: f64,
    pub inpainted_ml: f64,
    /// `pre − inpainted`.
    pub error_ml: Option<f64>,
    pub re_pct: Option<f64>,
    pub cement_ml: f64,
    pub cement_clamped: bool,
}

impl VolumeRow {
    pub fn new(code: u8, pre_ml: Option<f64>, fractured_ml: f64, inpainted_ml: f64) -> Result<Self> {
        let cement = cement_upper_bound(inpainted_ml, fractured_ml)?;
        let error = pre_ml.map(|p| p - inpainted_ml);
        Ok(VolumeRow {
            level: labels::display(code),
            pre_ml,
            fractured_ml,
            inpainted_ml,
            error_ml: error,
            re_pct: pre_ml.zip(error).map(|(p, e)| relative_error_pct(e, p)),
            cement_ml: cement.ml,
            cement_clamped: cement.clamped,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraighteningRow {
    /// e.g. `T12-L2` for a fracture at L1.
    pub vertebrae: String,
    pub fractured_level: String,
    pub pre_mm: Option<f64>,
    pub fractured_mm: f64,
    pub straightened_mm: Option<f64>,
    /// `straightened − pre`.
    pub error_mm: Option<f64>,
    pub re_pct: Option<f64>,
}

impl StraighteningRow {
    pub fn new(code: u8, pre_mm: Option<f64>, fractured_mm: f64, straightened_mm: Option<f64>) -> Self {
        let error = pre_mm.zip(straightened_mm).map(|(p, s)| s - p);
        StraighteningRow {
            vertebrae: format!(
                "{}-{}",
                labels::display(code.saturating_sub(1)),
                labels::display(code + 1)
            ),
            fractured_level: labels::display(code),
            pre_mm,
            fractured_mm,
            straightened_mm,
            error_mm: error,
            re_pct: pre_mm.zip(error).map(|(p, e)| relative_error_pct(e, p)),
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stats { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr_db: Option<f64>,
    /// PSNR is undefined because both images are identical.
    pub psnr_identical: bool,
    pub mre: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub volume_error_ml: Option<Stats>,
    pub volume_re_pct: Option<Stats>,
    pub distance_error_mm: Option<Stats>,
    pub distance_re_pct: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: u32,
    /// Straightening was skipped.
    pub ablation: bool,
    pub scale: f64,
    pub straightening: Vec<StraighteningRow>,
    pub volumes: Vec<VolumeRow>,
    /// Sum of per-vertebra cement bounds.
    pub cement_ml: f64,
    pub metrics: Metrics,
    pub summary: Summary,
    /// Scaled-atlas → patient rigid maps, row-major 3×4.
    pub transforms: BTreeMap<String, RigidTransform>,
    pub registration_residuals_mm: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Everything measured on one fractured level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelMeasurement {
    pub code: u8,
    pub fractured_ml: f64,
    pub inpainted_ml: f64,
    pub fractured_distance_mm: f64,
    pub straightened_distance_mm: Option<f64>,
}

/// Pre-fracture reference values, when known.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreFracture {
    pub volumes_ml: BTreeMap<u8, f64>,
    pub distances_mm: BTreeMap<u8, f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportInputs {
    pub ablation: bool,
    pub scale: f64,
    pub levels: Vec<LevelMeasurement>,
    pub pre: Option<PreFracture>,
    pub metrics: Metrics,
    pub transforms: BTreeMap<u8, RigidTransform>,
    pub residuals_mm: BTreeMap<u8, f64>,
}

/// Assembles the per-level tables and aggregates.
pub fn build_report(inputs: &ReportInputs) -> Result<PipelineReport> {
    let mut volumes = Vec::new();
    let mut straightening = Vec::new();
    let mut warnings = Vec::new();
    for m in &inputs.levels {
        let pre = inputs.pre.as_ref();
        let row = VolumeRow::new(
            m.code,
            pre.and_then(|p| p.volumes_ml.get(&m.code).copied()),
            m.fractured_ml,
            m.inpainted_ml,
        )?;
        if row.cement_clamped {
            warnings.push(format!(
                "{}: fractured volume {:.2} mL exceeds the inpainted estimate {:.2} mL; cement bound clamped to 0",
                row.level, m.fractured_ml, m.inpainted_ml
            ));
        }
        volumes.push(row);
        straightening.push(StraighteningRow::new(
            m.code,
            pre.and_then(|p| p.distances_mm.get(&m.code).copied()),
            m.fractured_distance_mm,
            m.straightened_distance_mm,
        ));
    }
    let mut metrics = inputs.metrics.clone();
    let pairs: Vec<(f64, f64)> = volumes
        .iter()
        .filter_map(|r| r.pre_ml.map(|p| (r.inpainted_ml, p)))
        .collect();
    if metrics.mre.is_none() && !pairs.is_empty() {
        let (e, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        metrics.mre = Some(mre(&e, &t)?);
    }
    let col = |f: &dyn Fn(&VolumeRow) -> Option<f64>| -> Vec<f64> { volumes.iter().filter_map(f).collect() };
    let scol = |f: &dyn Fn(&StraighteningRow) -> Option<f64>| -> Vec<f64> {
        straightening.iter().filter_map(f).collect()
    };
    let summary = Summary {
        volume_error_ml: Stats::of(&col(&|r| r.error_ml)),
        volume_re_pct: Stats::of(&col(&|r| r.re_pct)),
        distance_error_mm: Stats::of(&scol(&|r| r.error_mm)),
        distance_re_pct: Stats::of(&scol(&|r| r.re_pct)),
    };
    Ok(PipelineReport {
        version: REPORT_VERSION,
        ablation: inputs.ablation,
        scale: inputs.scale,
        cement_ml: volumes.iter().map(|r| r.cement_ml).sum(),
        straightening,
        volumes,
        metrics,
        summary,
        transforms: inputs
            .transforms
            .iter()
            .map(|(c, t)| (labels::display(*c), *t))
            .collect(),
        registration_residuals_mm: inputs
            .residuals_mm
            .iter()
            .map(|(c, r)| (labels::display(*c), *r))
            .collect(),
        warnings,
    })
}

impl PipelineReport {
    pub fn fractured_codes(&self) -> Result<BTreeSet<u8>> {
        self.volumes.iter().map(|r| labels::parse(&r.level)).collect()
    }

    /// Replaces the pre-fracture columns and recomputes errors and aggregates.
    pub fn with_pre(&self, pre: &PreFracture) -> Result<PipelineReport> {
        let mut levels = Vec::new();
        for (v, s) in self.volumes.iter().zip(&self.straightening) {
            levels.push(LevelMeasurement {
                code: labels::parse(&v.level)?,
                fractured_ml: v.fractured_ml,
                inpainted_ml: v.inpainted_ml,
                fractured_distance_mm: s.fractured_mm,
                straightened_distance_mm: s.straightened_mm,
            });
        }
        let mut metrics = self.metrics.clone();
        metrics.mre = None;
        build_report(&ReportInputs {
            ablation: self.ablation,
            scale: self.scale,
            levels,
            pre: Some(pre.clone()),
            metrics,
            transforms: parse_keys(&self.transforms)?,
            residuals_mm: parse_keys(&self.registration_residuals_mm)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: PipelineReport = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported report version {}", r.version)));
        }
        Ok(r)
    }

    /// Plain-text tables shaped like the published ones.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scale {:.4}{}",
            self.scale,
            if self.ablation { "  (straightening skipped)" } else { "" }
        );
        let _ = writeln!(out, "\nFracture distance");
        let mut t = Table::new(&["Vertebrae", "Pre [mm]", "Fractured [mm]", "Straightened [mm]", "Error [mm]", "RE [%]"]);
        for r in &self.straightening {
            t.row(vec![
                r.vertebrae.clone(),
                opt(r.pre_mm),
                num(r.fractured_mm),
                opt(r.straightened_mm),
                opt(r.error_mm),
                opt(r.re_pct),
            ]);
        }
        if let (Some(e), Some(p)) = (self.summary.distance_error_mm, self.summary.distance_re_pct) {
            t.row(vec!["Average".into(), "".into(), "".into(), "".into(), num(e.mean), num(p.mean)]);
            t.row(vec!["STD".into(), "".into(), "".into(), "".into(), num(e.std), num(p.std)]);
        }
        out.push_str(&t.render());
        let _ = writeln!(out, "\nVolumes");
        let mut t = Table::new(&[
            "Vertebra",
            "Pre [mL]",
            "Fractured [mL]",
            "Inpainted [mL]",
            "Error [mL]",
            "RE [%]",
            "Cement [mL]",
        ]);
        for r in &self.volumes {
            t.row(vec![
                r.level.clone(),
                opt(r.pre_ml),
                num(r.fractured_ml),
                num(r.inpainted_ml),
                opt(r.error_ml),
                opt(r.re_pct),
                format!("{}{}", num(r.cement_ml), if r.cement_clamped { "*" } else { "" }),
            ]);
        }
        if let (Some(e), Some(p)) = (self.summary.volume_error_ml, self.summary.volume_re_pct) {
            t.row(vec!["Average".into(), "".into(), "".into(), "".into(), num(e.mean), num(p.mean), "".into()]);
            t.row(vec!["STD".into(), "".into(), "".into(), "".into(), num(e.std), num(p.std), "".into()]);
        }
        out.push_str(&t.render());
        let _ = writeln!(out, "\ncement upper bound {:.2} mL", self.cement_ml);
        let m = &self.metrics;
        let metric = |name: &str, v: Option<f64>, out: &mut String| {
            if let Some(v) = v {
                let _ = writeln!(out, "{name:<6} {v:.4}");
            }
        };
        metric("dice", m.dice, &mut out);
        metric("iou", m.iou, &mut out);
        metric("ssim", m.ssim, &mut out);
        if m.psnr_identical {
            let _ = writeln!(out, "psnr   identical");
        } else {
            metric("psnr", m.psnr_db, &mut out);
        }
        metric("mre", m.mre, &mut out);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    /// `level,pre_ml,inpainted_ml` rows for correlation plots.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("level,pre_ml,inpainted_ml\n");
        for r in &self.volumes {
            let pre = r.pre_ml.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.level, pre, r.inpainted_ml);
        }
        out
    }
}

fn parse_keys<V: Copy>(m: &BTreeMap<String, V>) -> Result<BTreeMap<u8, V>> {
    m.iter().map(|(k, v)| Ok((labels::parse(k)?, *v))).collect()
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "-".into())
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn row(&mut self, r: Vec<String>) {
        self.rows.push(r);
    }

    fn render(&self) -> String {
        let mut w: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, "{:<width$}", c, width = w[i]);
                } else {
                    let _ = write!(s, "  {:>width$}", c, width = w[i]);
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&self.header);
        out.push_str(&"-".repeat(w.iter().sum::<usize>() + 2 * (w.len() - 1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

/// Side-by-side comparison of runs with and without straightening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub level: String,
    pub pre_ml: Option<f64>,
    pub straightened: AblationCell,
    pub without_straightening: AblationCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub inpainted_ml: f64,
    pub error_ml: Option<f64>,
    pub re_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: u32,
    pub rows: Vec<AblationRow>,
    pub straightened: Summary,
    pub without_straightening: Summary,
}

/// Merges a straightened and a non-straightened report level by level.
pub fn ablation_table(with: &PipelineReport, without: &PipelineReport) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for a in &with.volumes {
        let b = without
            .volumes
            .iter()
            .find(|b| b.level == a.level)
            .ok_or_else(|| Error::InvalidInput(format!("ablation run lacks {}", a.level)))?;
        let cell = |r: &VolumeRow| AblationCell {
            inpainted_ml: r.inpainted_ml,
            error_ml: r.error_ml,
            re_pct: r.re_pct,
        };
        rows.push(AblationRow {
            level: a.level.clone(),
            pre_ml: a.pre_ml.or(b.pre_ml),
            straightened: cell(a),
            without_straightening: cell(b),
        });
    }
    Ok(AblationTable {
        version: REPORT_VERSION,
        rows,
        straightened: with.summary.clone(),
        without_straightening: without.summary.clone(),
    })
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut t = Table::new(&[
            "Vertebra",
            "Pre [mL]",
            "Straightening: Inpainted [mL]",
            "Error [mL]",
            "RE [%]",
            "W/o straightening: Inpainted [mL]",
            "Error [mL]",
            "RE [%]",
        ]);
        for r in &self.rows {
            let (a, b) = (&r.straightened, &r.without_straightening);
            t.row(vec![
                r.level.clone(),
                opt(r.pre_ml),
                num(a.inpainted_ml),
                opt(a.error_ml),
                opt(a.re_pct),
                num(b.inpainted_ml),
                opt(b.error_ml),
                opt(b.re_pct),
            ]);
        }
        let stats = |s: &Summary| (s.volume_error_ml, s.volume_re_pct);
        if let ((Some(ae), Some(ar)), (Some(be), Some(br))) =
            (stats(&self.straightened), stats(&self.without_straightening))
        {
            let e = String::new;
            t.row(vec!["Average".into(), e(), e(), num(ae.mean), num(ar.mean), e(), num(be.mean), num(br.mean)]);
            t.row(vec!["STD".into(), e(), e(), num(ae.std), num(ar.std), e(), num(be.std), num(br.std)]);
        }
        t.render()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeGeometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bools(v: &[bool]) -> Volume<bool> {
        let g = VolumeGeometry::new([v.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        Volume::new(g, v.to_vec()).unwrap()
    }

    #[test]
    fn overlap_counts() {
        let a = bools(&[true, true, false, false]);
        let b = bools(&[false, true, true, false]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let c = bools(&[false, false, true, true]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        let e = bools(&[false; 4]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    fn ramp(n: usize, f: impl FnMut(usize) -> f32) -> ScalarVolume {
        let g = VolumeGeometry::new([n, n, n], [1.0; 3], [0.0; 3]).unwrap();
        Volume::new(g, (0..n * n * n).map(f).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_and_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = ramp(10, |_| rng.random_range(-500.0..500.0));
        assert!((ssim(&noisy, &noisy, None).unwrap() - 1.0).abs() < 1e-12);
        // a checkerboard has (nearly) zero local mean under the window
        let g = *noisy.geometry();
        let x = Volume::from_fn(g, |[i, j, k]| if (i + j + k) % 2 == 0 { 100.0f32 } else { -100.0 });
        let y = x.map(|v| -v);
        assert!(ssim(&x, &y, None).unwrap() < 0.0);
        let sym = (ssim(&noisy, &y, None).unwrap() - ssim(&y, &noisy, None).unwrap()).abs();
        assert!(sym < 1e-12);
        let flat = ramp(4, |_| 3.0);
        assert!(ssim(&flat, &flat, None).is_err());
    }

    fn ssim_brute(x: &ScalarVolume, y: &ScalarVolume, roi: &Volume<bool>) -> f64 {
        let g = *x.geometry();
        let d = g.dims();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, &r) in roi.data().iter().enumerate() {
            if r {
                for v in [x.data()[i], y.data()[i]] {
                    lo = lo.min(v as f64);
                    hi = hi.max(v as f64);
                }
            }
        }
        let l = hi - lo;
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let (mut total, mut n) = (0.0, 0);
        for idx in 0..g.len() {
            if !roi.data()[idx] {
                continue;
            }
            let c = g.coords(idx);
            let mut m = [0.0f64; 6];
            for dk in -3i64..=3 {
                for dj in -3i64..=3 {
                    for di in -3i64..=3 {
                        let q = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= d[a] as i64) {
                            continue;
                        }
                        let w = (-((di * di + dj * dj + dk * dk) as f64) / 4.5).exp();
                        let qi = g.index(q[0] as usize, q[1] as usize, q[2] as usize);
                        let (a, b) = (x.data()[qi] as f64, y.data()[qi] as f64);
                        for (s, v) in m.iter_mut().zip([a, b, a * a, b * b, a * b, 1.0]) {
                            *s += w * v;
                        }
                    }
                }
            }
            let (mx, my) = (m[0] / m[5], m[1] / m[5]);
            let vx = m[2] / m[5] - mx * mx;
            let vy = m[3] / m[5] - my * my;
            let cxy = m[4] / m[5] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_brute_force_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ramp(12, |_| rng.random_range(0.0..100.0));
        let y = Volume::new(
            *x.geometry(),
            x.data().iter().map(|v| v * 0.8 + 7.0 + rng.random_range(-20.0..20.0)).collect(),
        )
        .unwrap();
        let g = *x.geometry();
        // one interior box and one touching the grid corner
        for roi in [
            Volume::from_fn(g, |[i, j, k]| (4..7).contains(&i) && (5..8).contains(&j) && (3..9).contains(&k)),
            Volume::from_fn(g, |[i, j, k]| i < 3 && j < 4 && k > 8),
        ] {
            let fast = ssim(&x, &y, Some(&roi)).unwrap();
            let slow = ssim_brute(&x, &y, &roi);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn psnr_offset_case() {
        let x = ramp(10, |i| (i % 100) as f32 * 10.0);
        let y = x.map(|v| v + 10.0);
        let p = psnr(&x, &y, None).unwrap().db().unwrap();
        assert!((p - 40.0).abs() < 0.01, "{p}");
        assert_eq!(psnr(&x, &x, None).unwrap(), Psnr::Identical);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ramp(8, |_| rng.random_range(-100.0..100.0));
        let noise: Vec<f32> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [1.0f32, 2.0, 5.0, 10.0, 20.0] {
            let y = Volume::new(*x.geometry(), x.data().iter().zip(&noise).map(|(a, n)| a + amp * n).collect()).unwrap();
            let p = psnr(&x, &y, None).unwrap().db().unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn mre_definition() {
        assert_eq!(mre(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mre(&[80.0], &[100.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(mre(&[], &[]).is_err());
    }

    #[test]
    fn fracture_distance_of_collinear_chain() {
        let c: BTreeMap<u8, Vec3> = (19..=23)
            .map(|k| (k, Vec3::new(0.0, 0.0, -30.0 * k as f64)))
            .collect();
        assert!((fracture_distance(&c, 21).unwrap() - 60.0).abs() < 1e-12);
        assert!(fracture_distance(&c, 23).is_err());
    }

    #[test]
    fn cement_bounds() {
        let c = cement_upper_bound(69.30, 62.41).unwrap();
        assert!((c.ml - 6.89).abs() < 1e-9 && !c.clamped);
        assert_eq!(cement_upper_bound(5.0, 5.0).unwrap(), CementBound { ml: 0.0, clamped: false });
        assert_eq!(cement_upper_bound(4.0, 5.0).unwrap(), CementBound { ml: 0.0, clamped: true });
        assert!(cement_upper_bound(-1.0, 5.0).is_err());
    }

    #[test]
    fn published_volume_row() {
        let r = VolumeRow::new(20, Some(71.61), 62.41, 69.30).unwrap();
        assert!((r.error_ml.unwrap() - 2.31).abs() < 0.005);
        assert!((r.re_pct.unwrap() - 3.23).abs() < 0.005);
        assert!((r.cement_ml - 6.89).abs() < 1e-9);
        let bare = VolumeRow::new(20, None, 62.41, 69.30).unwrap();
        assert_eq!(bare.error_ml, None);
        assert!((bare.cement_ml - 6.89).abs() < 1e-9);
    }

    #[test]
    fn straightening_sign_convention() {
        let r = StraighteningRow::new(21, Some(71.78), 57.28, Some(68.57));
        assert!((r.error_mm.unwrap() + 3.21).abs() < 0.005);
        assert_eq!(r.vertebrae, "L1-L3");
        let up = StraighteningRow::new(9, Some(48.69), 48.48, Some(50.16));
        assert!(up.error_mm.unwrap() > 0.0);
        assert!((up.re_pct.unwrap() - 3.02).abs() < 0.005);
    }

    const PAPER_ERRORS: [f64; 15] = [
        2.31, 0.64, -4.34, -1.51, 6.43, -6.12, -1.57, 0.16, 8.32, 4.52, 6.92, 10.09, 9.56, -1.01, 4.70,
    ];
    const PAPER_RE: [f64; 15] = [
        3.23, 0.74, -5.25, -3.96, 13.05, -9.67, -2.34, 0.21, 15.05, 7.50, 9.20, 12.56, 10.64, -1.49, 8.72,
    ];

    #[test]
    fn aggregate_uses_sample_std() {
        let e = Stats::of(&PAPER_ERRORS).unwrap();
        assert!((e.mean - 2.61).abs() < 0.005 && (e.std - 5.07).abs() < 0.005);
        let r = Stats::of(&PAPER_RE).unwrap();
        assert!((r.mean - 3.88).abs() < 0.005 && (r.std - 7.63).abs() < 0.005);
    }

    #[test]
    fn distance_aggregate() {
        let e = [
            -3.21, 0.02, 0.17, 1.47, 3.74, -4.19, 0.55, 1.44, 0.94, 2.88, -1.00, -5.24, 3.53, 2.27, 0.16,
        ];
        let s = Stats::of(&e).unwrap();
        assert!((s.mean - 0.23).abs() < 0.01 && (s.std - 2.68).abs() < 0.005);
        assert_eq!(Stats::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn report_without_truth() {
        let inputs = ReportInputs {
            scale: 1.0,
            levels: vec![LevelMeasurement {
                code: 20,
                fractured_ml: 62.41,
                inpainted_ml: 69.30,
                fractured_distance_mm: 57.28,
                straightened_distance_mm: Some(68.57),
            }],
            ..Default::default()
        };
        let r = build_report(&inputs).unwrap();
        assert_eq!(r.volumes[0].pre_ml, None);
        assert!((r.cement_ml - 6.89).abs() < 1e-9);
        assert!(r.summary.volume_error_ml.is_none());
        let pre = PreFracture {
            volumes_ml: BTreeMap::from([(20, 71.61)]),
            distances_mm: BTreeMap::from([(20, 71.78)]),
        };
        let filled = r.with_pre(&pre).unwrap();
        assert!((filled.volumes[0].error_ml.unwrap() - 2.31).abs() < 0.005);
        assert!(filled.metrics.mre.is_some());
        let back = PipelineReport::from_json(&filled.to_json().unwrap()).unwrap();
        assert_eq!(back, filled);
        assert!(filled.to_text().contains("T12-L2"));
        assert!(filled.scatter_csv().starts_with("level,pre_ml,inpainted_ml\nL1,71.61,69.3"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn dice_iou_identity(a in prop::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<bool> = a.iter().map(|_| rng.random_bool(0.5)).collect();
            let (va, vb) = (bools(&a), bools(&b));
            let d = dice(&va, &vb).unwrap();
            let j = iou(&va, &vb).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert_eq!(d, dice(&vb, &va).unwrap());
            prop_assert_eq!(j, iou(&vb, &va).unwrap());
        }
    }
}
