//! Seeded synthetic spine CTs with ground truth.
//!
//! Each vertebra is a superellipsoid body (exponent 4 in the axial plane,
//! 2 along the spine axis) with a 1.5 mm cortical shell, plus a box-shaped
//! posterior arch. Bodies are stacked along a sinusoidal sagittal curve and
//! tilted to follow its tangent. Local vertebra frames use x = left/right,
//! y = posterior, z = superior.
//!
//! Per-vertebra size jitter is drawn from `ChaCha8Rng::seed_from_u64(seed)`
//! (crate `rand_chacha`), which is portable across platforms.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels;
use crate::volume::{LabelVolume, ScalarVolume, Vec3, Volume, VolumeGeometry};

/// Cortical shell thickness in mm.
pub const CORTICAL_SHELL_MM: f64 = 1.5;
const GRID_MARGIN_MM: f64 = 10.0;
const ENVELOPE_MARGIN_MM: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub trabecular: f32,
    pub cortical: f32,
    pub soft_tissue: f32,
    pub air: f32,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            trabecular: 180.0,
            cortical: 800.0,
            soft_tissue: 40.0,
            air: -1000.0,
        }
    }
}

/// Sagittal centroid curve `y(s) = amplitude · sin(2π s / wavelength)`, with
/// `s` the stacking distance from the top vertebra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub amplitude: f64,
    pub wavelength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Vertebra codes from cranial to caudal.
    pub levels: Vec<u8>,
    /// Body width (x), depth (y) and height (z) in mm for the first level.
    pub base_body: [f64; 3],
    pub disc_height: f64,
    pub curvature: Curvature,
    pub intensities: Intensities,
    /// Relative per-dimension size perturbation, drawn uniformly in `[-jitter, jitter]`.
    pub jitter: f64,
    /// Relative body growth per level going caudally.
    pub level_growth: f64,
    pub spacing: [f64; 3],
    /// Minimum field of view in mm; the grid is padded symmetrically to reach it.
    pub min_fov: [f64; 3],
}

impl Default for PhantomSpec {
    /// Eight levels T10..L5 at 1 mm isotropic.
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            levels: (17..=24).collect(),
            base_body: [40.0, 30.0, 25.0],
            disc_height: 8.0,
            curvature: Curvature {
                amplitude: 12.0,
                wavelength: 400.0,
            },
            intensities: Intensities::default(),
            jitter: 0.03,
            level_growth: 0.03,
            spacing: [1.0; 3],
            min_fov: [0.0; 3],
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..Default::default()
        }
    }

    /// Same anatomy with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.base_body = s.base_body.map(|v| v * factor);
        s.disc_height *= factor;
        s.curvature.amplitude *= factor;
        s.curvature.wavelength *= factor;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("phantom spec: {m}")));
        if self.levels.len() < 5 {
            return bad(format!("need >= 5 levels, got {}", self.levels.len()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1])
            || self
                .levels
                .iter()
                .any(|&c| !(1..=labels::MAX_CODE).contains(&c))
        {
            return bad(format!(
                "levels must be strictly increasing codes in 1..=24, got {:?}",
                self.levels
            ));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.base_body.iter().all(|&v| positive(v)) {
            return bad(format!("body dimensions must be > 0, got {:?}", self.base_body));
        }
        if !positive(self.disc_height) {
            return bad(format!("disc height must be > 0, got {}", self.disc_height));
        }
        if !self.spacing.iter().all(|&v| positive(v)) {
            return bad(format!("spacing must be > 0, got {:?}", self.spacing));
        }
        if !(self.curvature.amplitude.is_finite() && positive(self.curvature.wavelength)) {
            return bad(format!("invalid curvature {:?}", self.curvature));
        }
        if !(0.0..=0.1).contains(&self.jitter) {
            return bad(format!("jitter must be in [0, 0.1], got {}", self.jitter));
        }
        if !(self.level_growth.is_finite() && self.level_growth > -0.1) {
            return bad(format!("invalid level growth {}", self.level_growth));
        }
        if self.base_body.iter().any(|&v| v / 2.0 <= 2.0 * CORTICAL_SHELL_MM) {
            return bad("body too small for the cortical shell".into());
        }
        if self.min_fov.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad(format!("invalid field of view {:?}", self.min_fov));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractureSpec {
    pub level: u8,
    /// Remaining (anterior) body height as a fraction of the healthy height.
    pub height_factor: f64,
    /// Anterior-dominant collapse; the posterior wall keeps its height.
    pub wedge: bool,
    /// Kyphotic angulation applied to every vertebra above the fracture.
    pub kink_deg: f64,
}

impl FractureSpec {
    pub fn new(level: u8, height_factor: f64) -> Self {
        FractureSpec {
            level,
            height_factor,
            wedge: false,
            kink_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Compression {
    height_factor: f64,
    wedge: bool,
}

/// One rasterizable vertebra in its world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct VertebraModel {
    pub code: u8,
    /// Body semi-axes (x, y, z) in mm.
    pub half: [f64; 3],
    /// Body center in world mm.
    pub center: Vec3,
    /// Local-to-world rotation.
    pub rotation: Matrix3<f64>,
    compression: Option<Compression>,
    envelope_half_z: f64,
}

enum Hit {
    Cortical { body: bool },
    Trabecular { body: bool },
}

impl VertebraModel {
    fn local(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.center)
    }

    fn height_factor_at(&self, y: f64) -> Option<f64> {
        self.compression.map(|c| {
            if c.wedge {
                let t = ((y + self.half[1]) / (2.0 * self.half[1])).clamp(0.0, 1.0);
                c.height_factor + (1.0 - c.height_factor) * t
            } else {
                c.height_factor
            }
        })
    }

    /// Mean remaining height fraction across the body.
    fn mean_height_factor(&self) -> f64 {
        match self.compression {
            None => 1.0,
            Some(c) if c.wedge => (1.0 + c.height_factor) / 2.0,
            Some(c) => c.height_factor,
        }
    }

    fn classify(&self, p: &Vec3) -> Option<Hit> {
        let mut q = self.local(p);
        if let Some(h) = self.height_factor_at(q.y) {
            // collapse towards the inferior endplate
            q.z += (q.z + self.half[2]) * (1.0 / h - 1.0);
        }
        let [a, b, c] = self.half;
        let t = CORTICAL_SHELL_MM;
        if superellipsoid(&q, a, b, c) <= 1.0 {
            return Some(if superellipsoid(&q, a - t, b - t, c - t) <= 1.0 {
                Hit::Trabecular { body: true }
            } else {
                Hit::Cortical { body: true }
            });
        }
        let (ax, ay0, ay1, az) = arch_box(a, b, c);
        let in_box = |m: f64| {
            q.x.abs() <= ax - m && q.y >= ay0 + m && q.y <= ay1 - m && q.z.abs() <= az - m
        };
        if in_box(0.0) {
            return Some(if in_box(t) {
                Hit::Trabecular { body: false }
            } else {
                Hit::Cortical { body: false }
            });
        }
        None
    }

    fn in_envelope(&self, p: &Vec3) -> bool {
        let q = self.local(p);
        let [a, b, _] = self.half;
        let (_, _, ay1, _) = arch_box(a, b, self.half[2]);
        q.x.abs() <= a + ENVELOPE_MARGIN_MM
            && q.y >= -b - ENVELOPE_MARGIN_MM
            && q.y <= ay1 + ENVELOPE_MARGIN_MM
            && q.z.abs() <= self.envelope_half_z
    }

    fn envelope_corners(&self) -> [Vec3; 8] {
        let [a, b, c] = self.half;
        let (_, _, ay1, _) = arch_box(a, b, c);
        let xs = [-a - ENVELOPE_MARGIN_MM, a + ENVELOPE_MARGIN_MM];
        let ys = [-b - ENVELOPE_MARGIN_MM, ay1 + ENVELOPE_MARGIN_MM];
        let zs = [-self.envelope_half_z, self.envelope_half_z];
        let mut out = [Vec3::zeros(); 8];
        for (n, corner) in out.iter_mut().enumerate() {
            let q = Vec3::new(xs[n & 1], ys[(n >> 1) & 1], zs[(n >> 2) & 1]);
            *corner = self.center + self.rotation * q;
        }
        out
    }

    fn world_box(&self) -> (Vec3, Vec3) {
        let corners = self.envelope_corners();
        let mut lo = corners[0];
        let mut hi = corners[0];
        for c in &corners[1..] {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        (lo, hi)
    }
}

/// Posterior arch box (half-width x, y range, half-height z) in the local frame.
fn arch_box(a: f64, b: f64, c: f64) -> (f64, f64, f64, f64) {
    (0.6 * a, 0.7 * b, 2.2 * b, 0.6 * c)
}

/// Superellipsoid level function: ≤ 1 inside.
#[inline]
pub fn superellipsoid(q: &Vec3, a: f64, b: f64, c: f64) -> f64 {
    let u = (q.x / a).powi(4) + (q.y / b).powi(4);
    u.sqrt() + (q.z / c).powi(2)
}

/// Per-level distance between consecutive body centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidDistance {
    pub upper: u8,
    pub lower: u8,
    pub mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    /// Body centers (world mm).
    pub centroids: BTreeMap<u8, Vec3>,
    /// Whole-vertebra volumes in mL.
    pub volumes_ml: BTreeMap<u8, f64>,
    /// Vertebral-body-only volumes in mL.
    pub body_volumes_ml: BTreeMap<u8, f64>,
    pub fractured: BTreeSet<u8>,
    pub healthy_centroids: BTreeMap<u8, Vec3>,
    pub healthy_volumes_ml: BTreeMap<u8, f64>,
    pub healthy_body_volumes_ml: BTreeMap<u8, f64>,
    /// Voxel-center means of the healthy mask labels.
    pub healthy_mask_centroids: BTreeMap<u8, Vec3>,
    pub distances: Vec<CentroidDistance>,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub ct: ScalarVolume,
    pub mask: LabelVolume,
    pub truth: PhantomTruth,
    pub models: Vec<VertebraModel>,
}

fn jitter_draw(rng: &mut ChaCha8Rng, jitter: f64) -> f64 {
    if jitter == 0.0 {
        0.0
    } else {
        rng.random_range(-jitter..=jitter)
    }
}

fn build_models(spec: &PhantomSpec) -> Vec<VertebraModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let halves: Vec<[f64; 3]> = (0..spec.levels.len())
        .map(|k| {
            let g = 1.0 + spec.level_growth * k as f64;
            let mut h = [0.0; 3];
            for (a, v) in h.iter_mut().enumerate() {
                *v = spec.base_body[a] / 2.0 * g * (1.0 + jitter_draw(&mut rng, spec.jitter));
            }
            h
        })
        .collect();
    let Curvature {
        amplitude,
        wavelength,
    } = spec.curvature;
    let omega = 2.0 * std::f64::consts::PI / wavelength;
    let mut s = 0.0;
    let mut models = Vec::with_capacity(halves.len());
    for (k, &half) in halves.iter().enumerate() {
        if k > 0 {
            s += halves[k - 1][2] + spec.disc_height + half[2];
        }
        let y = amplitude * (omega * s).sin();
        let slope = amplitude * omega * (omega * s).cos();
        let rotation = *Rotation3::from_axis_angle(&Vec3::x_axis(), slope.atan()).matrix();
        models.push(VertebraModel {
            code: spec.levels[k],
            half,
            center: Vec3::new(0.0, y, -s),
            rotation,
            compression: None,
            envelope_half_z: half[2] + spec.disc_height / 2.0 + CORTICAL_SHELL_MM,
        });
    }
    models
}

fn grid_for(models: &[VertebraModel], spec: &PhantomSpec) -> Result<VolumeGeometry> {
    let (mut lo, mut hi) = models[0].world_box();
    for m in &models[1..] {
        let (l, h) = m.world_box();
        lo = lo.inf(&l);
        hi = hi.sup(&h);
    }
    let mut dims = [0usize; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let sp = spec.spacing[a];
        let start = ((lo[a] - GRID_MARGIN_MM) / sp).floor();
        let end = ((hi[a] + GRID_MARGIN_MM) / sp).ceil();
        let mut n = (end - start) as usize + 1;
        let mut start = start;
        let want = (spec.min_fov[a] / sp).ceil() as usize;
        if want > n {
            let extra = want - n;
            start -= (extra / 2) as f64;
            n = want;
        }
        dims[a] = n;
        origin[a] = start * sp;
    }
    VolumeGeometry::new(dims, spec.spacing, origin)
}

/// Grows `g` by whole voxels until it covers `models`.
fn cover(g: VolumeGeometry, models: &[VertebraModel]) -> Result<VolumeGeometry> {
    let (mut lo, mut hi) = models[0].world_box();
    for m in &models[1..] {
        let (l, h) = m.world_box();
        lo = lo.inf(&l);
        hi = hi.sup(&h);
    }
    let (glo, ghi) = g.bounds();
    let sp = g.spacing();
    let mut dims = g.dims();
    let mut origin = g.origin();
    let mut changed = false;
    for a in 0..3 {
        let below = ((glo[a] - (lo[a] - GRID_MARGIN_MM)) / sp[a]).ceil().max(0.0) as usize;
        let above = (((hi[a] + GRID_MARGIN_MM) - ghi[a]) / sp[a]).ceil().max(0.0) as usize;
        if below + above > 0 {
            changed = true;
            origin[a] -= below as f64 * sp[a];
            dims[a] += below + above;
        }
    }
    if changed {
        VolumeGeometry::new(dims, sp, origin)
    } else {
        Ok(g)
    }
}

struct Raster {
    ct: ScalarVolume,
    mask: LabelVolume,
    volumes: BTreeMap<u8, f64>,
    body_volumes: BTreeMap<u8, f64>,
}

fn rasterize(models: &[VertebraModel], g: VolumeGeometry, hu: &Intensities) -> Raster {
    let boxes: Vec<(Vec3, Vec3)> = models.iter().map(|m| m.world_box()).collect();
    let [nx, ny, _] = g.dims();
    let plane = nx * ny;
    let mut ct = vec![hu.air; g.len()];
    let mut mask = vec![0u8; g.len()];
    let counts: Vec<([usize; 256], [usize; 256])> = ct
        .par_chunks_mut(plane)
        .zip(mask.par_chunks_mut(plane))
        .enumerate()
        .map(|(k, (ct_plane, mask_plane))| {
            let mut whole = [0usize; 256];
            let mut body = [0usize; 256];
            for j in 0..ny {
                for i in 0..nx {
                    let p = g.world([i, j, k]);
                    let inside_box =
                        |b: &(Vec3, Vec3)| (0..3).all(|a| p[a] >= b.0[a] && p[a] <= b.1[a]);
                    let mut value = hu.air;
                    let mut label = 0u8;
                    let mut soft = false;
                    for (m, b) in models.iter().zip(&boxes) {
                        if !inside_box(b) {
                            continue;
                        }
                        if let Some(hit) = m.classify(&p) {
                            let (v, is_body) = match hit {
                                Hit::Cortical { body } => (hu.cortical, body),
                                Hit::Trabecular { body } => (hu.trabecular, body),
                            };
                            value = v;
                            label = m.code;
                            whole[label as usize] += 1;
                            if is_body {
                                body[label as usize] += 1;
                            }
                            break;
                        }
                        soft = soft || m.in_envelope(&p);
                    }
                    if label == 0 && soft {
                        value = hu.soft_tissue;
                    }
                    ct_plane[i + nx * j] = value;
                    mask_plane[i + nx * j] = label;
                }
            }
            (whole, body)
        })
        .collect();
    let vv = g.voxel_volume();
    let mut volumes = BTreeMap::new();
    let mut body_volumes = BTreeMap::new();
    for m in models {
        let c = m.code as usize;
        volumes.insert(m.code, counts.iter().map(|x| x.0[c]).sum::<usize>() as f64 * vv / 1000.0);
        body_volumes.insert(m.code, counts.iter().map(|x| x.1[c]).sum::<usize>() as f64 * vv / 1000.0);
    }
    Raster {
        ct: Volume::new(g, ct).expect("finite intensities"),
        mask: Volume::new(g, mask).expect("sized"),
        volumes,
        body_volumes,
    }
}

fn distances(models: &[VertebraModel]) -> Vec<CentroidDistance> {
    models
        .windows(2)
        .map(|w| CentroidDistance {
            upper: w[0].code,
            lower: w[1].code,
            mm: (w[0].center - w[1].center).norm(),
        })
        .collect()
}

pub fn generate_healthy(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let models = build_models(spec);
    let g = grid_for(&models, spec)?;
    let r = rasterize(&models, g, &spec.intensities);
    let centroids: BTreeMap<u8, Vec3> = models.iter().map(|m| (m.code, m.center)).collect();
    let truth = PhantomTruth {
        healthy_mask_centroids: r.mask.centroids(),
        healthy_centroids: centroids.clone(),
        healthy_volumes_ml: r.volumes.clone(),
        healthy_body_volumes_ml: r.body_volumes.clone(),
        centroids,
        volumes_ml: r.volumes,
        body_volumes_ml: r.body_volumes,
        fractured: BTreeSet::new(),
        distances: distances(&models),
    };
    Ok(Phantom {
        spec: spec.clone(),
        ct: r.ct,
        mask: r.mask,
        truth,
        models,
    })
}

/// Collapses one vertebral body and bends the spine above it.
///
/// The fractured vertebra keeps its inferior endplate; every vertebra above
/// moves down along its axis by the lost height and is then rotated by
/// `kink_deg` about the sagittal (x) axis through the collapsed body center.
pub fn apply_fracture(healthy: &Phantom, frac: &FractureSpec) -> Result<Phantom> {
    let levels = &healthy.spec.levels;
    let pos = levels
        .iter()
        .position(|&c| c == frac.level)
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "fracture level {} is not in the phantom",
                labels::display(frac.level)
            ))
        })?;
    if pos < 2 || pos + 2 >= levels.len() {
        return Err(Error::InvalidInput(format!(
            "fracture level {} needs two intact levels on each side",
            labels::display(frac.level)
        )));
    }
    if !(frac.height_factor > 0.0 && frac.height_factor <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "height factor must be in (0, 1], got {}",
            frac.height_factor
        )));
    }
    if !frac.kink_deg.is_finite() || frac.kink_deg.abs() >= 90.0 {
        return Err(Error::InvalidInput(format!("invalid kink {}", frac.kink_deg)));
    }

    let mut models = healthy.models.clone();
    let f = &mut models[pos];
    f.compression = Some(Compression {
        height_factor: frac.height_factor,
        wedge: frac.wedge,
    });
    let lost = 1.0 - f.mean_height_factor();
    let axis = f.rotation * Vec3::z();
    let drop = axis * (-2.0 * f.half[2] * lost);
    let pivot = f.center + axis * (-f.half[2] * lost);
    let kink = *Rotation3::from_axis_angle(&Vec3::x_axis(), frac.kink_deg.to_radians()).matrix();
    let delta = kink - Matrix3::identity();
    for m in models[..pos].iter_mut() {
        let moved = m.center + drop;
        m.center = moved + delta * (moved - pivot);
        m.rotation = kink * m.rotation;
    }

    let g = cover(*healthy.ct.geometry(), &models)?;
    let r = rasterize(&models, g, &healthy.spec.intensities);
    let mut truth = healthy.truth.clone();
    truth.fractured.insert(frac.level);
    for m in &models {
        truth.centroids.insert(m.code, m.center);
    }
    truth.centroids.insert(frac.level, pivot);
    truth
        .volumes_ml
        .insert(frac.level, r.volumes[&frac.level]);
    truth
        .body_volumes_ml
        .insert(frac.level, r.body_volumes[&frac.level]);
    let mut chain = models.clone();
    chain[pos].center = pivot;
    truth.distances = distances(&chain);
    Ok(Phantom {
        spec: healthy.spec.clone(),
        ct: r.ct,
        mask: r.mask,
        truth,
        models,
    })
}

type NamedPoints = BTreeMap<String, [f64; 3]>;
type NamedValues = BTreeMap<String, f64>;

/// On-disk `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub version: u32,
    pub levels: Vec<String>,
    pub centroids_mm: NamedPoints,
    pub volumes_ml: NamedValues,
    pub body_volumes_ml: NamedValues,
    pub fractured_levels: Vec<String>,
    pub healthy_centroids_mm: NamedPoints,
    pub healthy_volumes_ml: NamedValues,
    #[serde(default)]
    pub healthy_mask_centroids_mm: NamedPoints,
    pub inter_centroid_distances_mm: Vec<NamedDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDistance {
    pub upper: String,
    pub lower: String,
    pub mm: f64,
}

pub const TRUTH_VERSION: u32 = 1;

fn named_points(m: &BTreeMap<u8, Vec3>) -> NamedPoints {
    m.iter()
        .map(|(&c, p)| (labels::display(c), [p.x, p.y, p.z]))
        .collect()
}

fn named_values(m: &BTreeMap<u8, f64>) -> NamedValues {
    m.iter().map(|(&c, &v)| (labels::display(c), v)).collect()
}

fn parse_points(m: &NamedPoints) -> Result<BTreeMap<u8, Vec3>> {
    m.iter()
        .map(|(k, p)| Ok((labels::parse(k)?, Vec3::new(p[0], p[1], p[2]))))
        .collect()
}

impl TruthDocument {
    pub fn from_truth(levels: &[u8], t: &PhantomTruth) -> Self {
        TruthDocument {
            version: TRUTH_VERSION,
            levels: levels.iter().map(|&c| labels::display(c)).collect(),
            centroids_mm: named_points(&t.centroids),
            volumes_ml: named_values(&t.volumes_ml),
            body_volumes_ml: named_values(&t.body_volumes_ml),
            fractured_levels: t.fractured.iter().map(|&c| labels::display(c)).collect(),
            healthy_centroids_mm: named_points(&t.healthy_centroids),
            healthy_volumes_ml: named_values(&t.healthy_volumes_ml),
            healthy_mask_centroids_mm: named_points(&t.healthy_mask_centroids),
            inter_centroid_distances_mm: t
                .distances
                .iter()
                .map(|d| NamedDistance {
                    upper: labels::display(d.upper),
                    lower: labels::display(d.lower),
                    mm: d.mm,
                })
                .collect(),
        }
    }

    pub fn fractured_codes(&self) -> Result<BTreeSet<u8>> {
        self.fractured_levels.iter().map(|s| labels::parse(s)).collect()
    }

    pub fn healthy_volume(&self, code: u8) -> Option<f64> {
        self.healthy_volumes_ml.get(&labels::display(code)).copied()
    }

    pub fn healthy_centroids(&self) -> Result<BTreeMap<u8, Vec3>> {
        parse_points(&self.healthy_centroids_mm)
    }

    /// Mask-based healthy centroids, falling back to the body centers for
    /// documents that lack them.
    pub fn healthy_mask_centroids(&self) -> Result<BTreeMap<u8, Vec3>> {
        if self.healthy_mask_centroids_mm.is_empty() {
            self.healthy_centroids()
        } else {
            parse_points(&self.healthy_mask_centroids_mm)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: TruthDocument = serde_json::from_str(&text)?;
        if doc.version != TRUTH_VERSION {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported truth version {}",
                path.display(),
                doc.version
            )));
        }
        Ok(doc)
    }
}
