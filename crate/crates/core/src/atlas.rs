//! Healthy-spine atlas and patient-specific scaling.
//!
//! An atlas is a set of per-vertebra mask crops with their centroids. The
//! scale between a patient and the atlas is the ratio of their centroid
//! chain lengths, each measured in the plane of its own first two principal
//! components.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels;
use crate::nifti::{read_labels, write_nifti};
use crate::volume::{LabelVolume, Vec3, Volume, VolumeGeometry};

pub const ATLAS_VERSION: u32 = 1;
pub const CROP_MARGIN_MM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasVertebra {
    pub code: u8,
    pub centroid: Vec3,
    /// Crop holding `code` on its voxels and 0 elsewhere.
    pub mask: LabelVolume,
}

impl AtlasVertebra {
    pub fn volume_ml(&self) -> f64 {
        self.mask.count(self.code) as f64 * self.mask.geometry().voxel_volume() / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    vertebrae: Vec<AtlasVertebra>,
}

impl Atlas {
    /// Vertebrae are sorted by code (cranial first).
    pub fn new(mut vertebrae: Vec<AtlasVertebra>) -> Result<Self> {
        vertebrae.sort_by_key(|v| v.code);
        if vertebrae.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "atlas needs >= 3 vertebrae, got {}",
                vertebrae.len()
            )));
        }
        for w in vertebrae.windows(2) {
            if w[0].code == w[1].code {
                return Err(Error::InvalidInput(format!(
                    "duplicate atlas vertebra {}",
                    labels::display(w[0].code)
                )));
            }
        }
        for v in &vertebrae {
            if v.mask.count(v.code) == 0 {
                return Err(Error::InvalidInput(format!(
                    "atlas mask for {} is empty",
                    labels::display(v.code)
                )));
            }
        }
        let first = vertebrae[0].centroid;
        let axis = vertebrae[vertebrae.len() - 1].centroid - first;
        let t: Vec<f64> = vertebrae.iter().map(|v| (v.centroid - first).dot(&axis)).collect();
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "atlas centroids are not ordered along the spine".into(),
            ));
        }
        Ok(Atlas { vertebrae })
    }

    pub fn vertebrae(&self) -> &[AtlasVertebra] {
        &self.vertebrae
    }

    pub fn get(&self, code: u8) -> Option<&AtlasVertebra> {
        self.vertebrae.iter().find(|v| v.code == code)
    }

    pub fn codes(&self) -> Vec<u8> {
        self.vertebrae.iter().map(|v| v.code).collect()
    }

    pub fn centroids(&self) -> BTreeMap<u8, Vec3> {
        self.vertebrae.iter().map(|v| (v.code, v.centroid)).collect()
    }

    /// Mean of the centroids; the fixed point of [`scale_atlas`].
    pub fn center(&self) -> Vec3 {
        self.vertebrae.iter().map(|v| v.centroid).sum::<Vec3>() / self.vertebrae.len() as f64
    }

    /// World box enclosing every mask crop.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        mask_bounds(&self.vertebrae)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: AtlasIndex = serde_json::from_str(&text)?;
        if index.version != ATLAS_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported atlas version {}",
                index.version
            )));
        }
        let mut out = Vec::with_capacity(index.vertebrae.len());
        for e in &index.vertebrae {
            let code = labels::parse(&e.code)?;
            let mut mask = read_labels(dir.join(&e.mask))?;
            // keep only the named vertebra
            for v in mask.data_mut() {
                if *v != code {
                    *v = 0;
                }
            }
            out.push(AtlasVertebra {
                code,
                centroid: Vec3::from(e.centroid_mm),
                mask,
            });
        }
        Atlas::new(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for v in &self.vertebrae {
            let file = format!("{}.nii.gz", v.code);
            write_nifti(&v.mask, dir.join(&file))?;
            entries.push(IndexEntry {
                code: labels::display(v.code),
                centroid_mm: v.centroid.into(),
                mask: file,
            });
        }
        let index = AtlasIndex {
            version: ATLAS_VERSION,
            vertebrae: entries,
        };
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    code: String,
    centroid_mm: [f64; 3],
    mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AtlasIndex {
    version: u32,
    vertebrae: Vec<IndexEntry>,
}

fn mask_bounds(vs: &[AtlasVertebra]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for v in vs {
        let (l, h) = v.mask.geometry().bounds();
        lo = lo.inf(&l);
        hi = hi.sup(&h);
    }
    (lo, hi)
}

/// An atlas resized about its centroid mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledAtlas {
    pub scale: f64,
    /// Fixed point of the scaling.
    pub center: Vec3,
    vertebrae: Vec<AtlasVertebra>,
}

impl ScaledAtlas {
    pub fn vertebrae(&self) -> &[AtlasVertebra] {
        &self.vertebrae
    }

    pub fn get(&self, code: u8) -> Option<&AtlasVertebra> {
        self.vertebrae.iter().find(|v| v.code == code)
    }

    pub fn codes(&self) -> Vec<u8> {
        self.vertebrae.iter().map(|v| v.code).collect()
    }

    pub fn centroids(&self) -> BTreeMap<u8, Vec3> {
        self.vertebrae.iter().map(|v| (v.code, v.centroid)).collect()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        mask_bounds(&self.vertebrae)
    }

    /// Codes immediately above and below `code` in atlas order.
    pub fn neighbors(&self, code: u8) -> Option<(u8, u8)> {
        let pos = self.vertebrae.iter().position(|v| v.code == code)?;
        if pos == 0 || pos + 1 >= self.vertebrae.len() {
            return None;
        }
        Some((self.vertebrae[pos - 1].code, self.vertebrae[pos + 1].code))
    }
}

/// Sum of consecutive centroid distances in the plane of the first two
/// principal components.
///
/// Centroids are taken in the given (cranial-to-caudal) order. The PCA uses
/// every supplied centroid, so excluding a code only ever removes terms.
/// Pairs touching an excluded code are dropped rather than bridged.
pub fn centroid_chain_length(centroids: &[(u8, Vec3)], exclude: &BTreeSet<u8>) -> Result<f64> {
    let kept = centroids.iter().filter(|(c, _)| !exclude.contains(c)).count();
    if kept < 3 {
        return Err(Error::InvalidInput(format!(
            "centroid chain needs >= 3 centroids after exclusion, got {kept}"
        )));
    }
    let n = centroids.len() as f64;
    let mean = centroids.iter().map(|(_, p)| p).sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (_, p) in centroids {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = cov.abs().max();
    if scale == 0.0 || eig.eigenvalues[order[0]] <= 1e-12 * scale {
        return Err(Error::Degenerate("centroids are all identical".into()));
    }
    let pc1: Vec3 = eig.eigenvectors.column(order[0]).into();
    let pc2: Vec3 = eig.eigenvectors.column(order[1]).into();
    let mut sum = 0.0;
    for w in centroids.windows(2) {
        if exclude.contains(&w[0].0) || exclude.contains(&w[1].0) {
            continue;
        }
        let d = w[1].1 - w[0].1;
        sum += d.dot(&pc1).hypot(d.dot(&pc2));
    }
    Ok(sum)
}

/// Ratio of patient to atlas chain length over the codes both share.
pub fn compute_scale(
    patient: &BTreeMap<u8, Vec3>,
    atlas: &Atlas,
    fractured: &BTreeSet<u8>,
) -> Result<f64> {
    let common: Vec<u8> = atlas
        .codes()
        .into_iter()
        .filter(|c| patient.contains_key(c))
        .collect();
    let healthy = common.iter().filter(|c| !fractured.contains(c)).count();
    if healthy < 3 {
        return Err(Error::InvalidInput(format!(
            "need >= 3 non-fractured vertebrae shared with the atlas, got {healthy}"
        )));
    }
    let ac = atlas.centroids();
    let p: Vec<(u8, Vec3)> = common.iter().map(|&c| (c, patient[&c])).collect();
    let a: Vec<(u8, Vec3)> = common.iter().map(|&c| (c, ac[&c])).collect();
    let lp = centroid_chain_length(&p, fractured)?;
    let la = centroid_chain_length(&a, fractured)?;
    if !(la > 0.0) {
        return Err(Error::Degenerate("atlas chain length is zero".into()));
    }
    Ok(lp / la)
}

/// Scales centroids and masks about the atlas centroid mean.
///
/// Mask data are kept and their grid spacing and origin are scaled, which is
/// an exact isotropic resize; resampling to a working grid happens where the
/// masks are used.
pub fn scale_atlas(atlas: &Atlas, scale: f64) -> Result<ScaledAtlas> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidInput(format!("scale must be > 0, got {scale}")));
    }
    let center = atlas.center();
    if scale == 1.0 {
        return Ok(ScaledAtlas {
            scale,
            center,
            vertebrae: atlas.vertebrae.clone(),
        });
    }
    let about = |p: Vec3| center + (p - center) * scale;
    let vertebrae = atlas
        .vertebrae
        .iter()
        .map(|v| {
            let g = v.mask.geometry();
            let geometry = VolumeGeometry::new(
                g.dims(),
                g.spacing().map(|s| s * scale),
                about(Vec3::from(g.origin())).into(),
            )?;
            Ok(AtlasVertebra {
                code: v.code,
                centroid: about(v.centroid),
                mask: Volume::new(geometry, v.mask.data().to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaledAtlas {
        scale,
        center,
        vertebrae,
    })
}

/// Crops every labelled vertebra with a [`CROP_MARGIN_MM`] margin.
pub fn build_atlas(mask: &LabelVolume) -> Result<Atlas> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims();
    let sp = g.spacing();
    let mut lo: BTreeMap<u8, [usize; 3]> = BTreeMap::new();
    let mut hi: BTreeMap<u8, [usize; 3]> = BTreeMap::new();
    for (idx, &c) in mask.data().iter().enumerate() {
        if c == 0 {
            continue;
        }
        let ijk = g.coords(idx);
        let l = lo.entry(c).or_insert(ijk);
        let h = hi.entry(c).or_insert(ijk);
        for a in 0..3 {
            l[a] = l[a].min(ijk[a]);
            h[a] = h[a].max(ijk[a]);
        }
    }
    let centroids = mask.centroids();
    let dims_all = [nx, ny, nz];
    let mut out = Vec::new();
    for (&code, l) in &lo {
        let h = hi[&code];
        let mut start = [0usize; 3];
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let m = (CROP_MARGIN_MM / sp[a]).ceil() as usize;
            start[a] = l[a].saturating_sub(m);
            let end = (h[a] + m).min(dims_all[a] - 1);
            dims[a] = end - start[a] + 1;
        }
        let origin = g.world(start);
        let geometry = VolumeGeometry::new(dims, sp, origin.into())?;
        let crop = Volume::from_fn(geometry, |[i, j, k]| {
            let v = mask.get([start[0] + i, start[1] + j, start[2] + k]);
            if v == code {
                code
            } else {
                0
            }
        });
        out.push(AtlasVertebra {
            code,
            centroid: centroids[&code],
            mask: crop,
        });
    }
    Atlas::new(out)
}
