//! Virtual spine straightening.
//!
//! Every healthy vertebra is rigidly registered from the scaled atlas onto
//! the patient. On the output (scaled-atlas) grid, voxels inside an atlas
//! vertebra take that vertebra's backward displacement unchanged; all other
//! voxels get the inverse-distance weighted mean of the per-vertebra
//! displacements. Fractured vertebrae have no displacement of their own and
//! are carried along by the blend.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::atlas::{compute_scale, scale_atlas, Atlas, ScaledAtlas};
use crate::error::{Error, Result};
use crate::labels;
use crate::registration::{extract_surface, icp_rigid, require_code, IcpOptions, RigidTransform};
use crate::volume::{
    nearest, warp, DisplacementField, LabelVolume, ScalarVolume, Vec3, Volume, VolumeGeometry,
};

/// Distances at or below this (mm) count as "on the vertebra".
pub const BLEND_EPSILON: f64 = 1e-6;

/// Per-voxel physical distance (mm) to the nearest voxel of one vertebra.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    geometry: VolumeGeometry,
    values: Vec<f64>,
}

impl DistanceMap {
    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }
}

/// Exact Euclidean distance transform of the voxels labelled `code`.
pub fn distance_map(mask: &LabelVolume, code: u8) -> Result<DistanceMap> {
    if !mask.contains_code(code) {
        return Err(Error::MissingLabel(code));
    }
    let g = *mask.geometry();
    let f: Vec<f64> = mask
        .data()
        .iter()
        .map(|&c| if c == code { 0.0 } else { f64::INFINITY })
        .collect();
    let sq = squared_edt(&g, f);
    Ok(DistanceMap {
        geometry: g,
        values: sq.into_iter().map(f64::sqrt).collect(),
    })
}

/// Separable squared distance transform (lower envelope of parabolas, one
/// pass per axis), with physical spacing.
fn squared_edt(g: &VolumeGeometry, mut f: Vec<f64>) -> Vec<f64> {
    let [nx, ny, nz] = g.dims();
    let [sx, sy, sz] = g.spacing();
    // x: contiguous rows
    f.par_chunks_mut(nx).for_each(|row| {
        let line = row.to_vec();
        edt_1d(&line, sx, row);
    });
    // y: inside each z-plane
    f.par_chunks_mut(nx * ny).for_each(|plane| {
        let mut line = vec![0.0; ny];
        let mut out = vec![0.0; ny];
        for i in 0..nx {
            for j in 0..ny {
                line[j] = plane[i + nx * j];
            }
            edt_1d(&line, sy, &mut out);
            for j in 0..ny {
                plane[i + nx * j] = out[j];
            }
        }
    });
    // z: gather columns, transform, scatter
    if nz > 1 {
        let plane = nx * ny;
        let columns: Vec<Vec<f64>> = (0..plane)
            .into_par_iter()
            .map(|c| {
                let line: Vec<f64> = (0..nz).map(|k| f[c + plane * k]).collect();
                let mut out = vec![0.0; nz];
                edt_1d(&line, sz, &mut out);
                out
            })
            .collect();
        for (c, col) in columns.into_iter().enumerate() {
            for (k, v) in col.into_iter().enumerate() {
                f[c + plane * k] = v;
            }
        }
    }
    f
}

/// `out[q] = min_p (s·(q − p))² + f[p]`; infinite entries are not sites.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    let x = |q: usize| q as f64 * s;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let inter = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            if inter <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = inter;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < x(q) {
            j += 1;
        }
        let d = x(q) - x(v[j]);
        *o = d * d + f[v[j]];
    }
}

/// A per-voxel displacement source on a fixed output grid.
pub trait FieldSampler: Sync {
    fn geometry(&self) -> &VolumeGeometry;
    fn at(&self, idx: usize) -> [f64; 3];
}

impl FieldSampler for DisplacementField {
    fn geometry(&self) -> &VolumeGeometry {
        DisplacementField::geometry(self)
    }

    #[inline]
    fn at(&self, idx: usize) -> [f64; 3] {
        self.vectors()[idx]
    }
}

/// The backward field `F(p) = T(world(p)) − world(p)` of a rigid map,
/// evaluated on demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidField {
    pub geometry: VolumeGeometry,
    pub transform: RigidTransform,
}

impl FieldSampler for RigidField {
    fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    #[inline]
    fn at(&self, idx: usize) -> [f64; 3] {
        let p = self.geometry.world_of_index(idx);
        (self.transform.apply(&p) - p).into()
    }
}

impl RigidField {
    pub fn to_field(&self) -> DisplacementField {
        let vectors = (0..self.geometry.len()).into_par_iter().map(|i| self.at(i)).collect();
        DisplacementField::new(self.geometry, vectors).expect("finite rigid field")
    }
}

/// Normalized inverse-distance weights `D_j⁻¹ / Σ D⁻¹`.
pub fn blend_weights(distances: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|w| w / total).collect()
}

/// Combines per-vertebra fields: inside vertebra `i` of `membership` the
/// result is exactly `F_i`; elsewhere the `D⁻¹`-weighted mean over all
/// fields. A voxel with some `D_j < ε` outside the membership takes the field
/// of the closest such `j`.
pub fn combine_fields<F: FieldSampler>(
    fields: &BTreeMap<u8, F>,
    dmaps: &BTreeMap<u8, DistanceMap>,
    membership: &LabelVolume,
) -> Result<DisplacementField> {
    if fields.is_empty() {
        return Err(Error::InvalidInput("no displacement fields to combine".into()));
    }
    let g = *membership.geometry();
    if fields.keys().ne(dmaps.keys()) {
        return Err(Error::InvalidInput(format!(
            "fields {:?} and distance maps {:?} cover different vertebrae",
            fields.keys().collect::<Vec<_>>(),
            dmaps.keys().collect::<Vec<_>>()
        )));
    }
    for (c, f) in fields {
        f.geometry().ensure_same(&g, &format!("field {}", labels::display(*c)))?;
        dmaps[c]
            .geometry
            .ensure_same(&g, &format!("distance map {}", labels::display(*c)))?;
    }
    let order: Vec<(&F, &DistanceMap)> = fields.iter().map(|(c, f)| (f, &dmaps[c])).collect();
    let slot: [Option<usize>; 256] = {
        let mut s = [None; 256];
        for (k, c) in fields.keys().enumerate() {
            s[*c as usize] = Some(k);
        }
        s
    };
    let labels_in = membership.data();
    let vectors: Vec<[f64; 3]> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            if let Some(k) = slot[labels_in[idx] as usize] {
                return order[k].0.at(idx);
            }
            let mut touching: Option<(f64, usize)> = None;
            for (k, (_, d)) in order.iter().enumerate() {
                let dj = d.get(idx);
                if dj < BLEND_EPSILON && touching.is_none_or(|(b, _)| dj < b) {
                    touching = Some((dj, k));
                }
            }
            if let Some((_, k)) = touching {
                return order[k].0.at(idx);
            }
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for (f, d) in &order {
                let w = 1.0 / d.get(idx);
                let v = f.at(idx);
                for a in 0..3 {
                    acc[a] += w * v[a];
                }
                total += w;
            }
            acc.map(|a| a / total)
        })
        .collect();
    DisplacementField::new(g, vectors)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraightenOptions {
    pub icp: IcpOptions,
    /// Margin (mm) around the scaled atlas for the output grid.
    pub margin_mm: f64,
}

impl Default for StraightenOptions {
    fn default() -> Self {
        StraightenOptions {
            icp: IcpOptions::default(),
            margin_mm: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    /// Scaled-atlas world → patient world.
    pub transform: RigidTransform,
    pub residual_mm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct StraightenOutput {
    pub ct: ScalarVolume,
    pub mask: LabelVolume,
    pub field: DisplacementField,
    /// Healthy scaled-atlas vertebrae placed on the output grid.
    pub membership: LabelVolume,
    pub registrations: BTreeMap<u8, Registration>,
    pub scale: f64,
    pub scaled_atlas: ScaledAtlas,
    pub fractured: BTreeSet<u8>,
}

impl StraightenOutput {
    pub fn transforms(&self) -> BTreeMap<u8, RigidTransform> {
        self.registrations.iter().map(|(c, r)| (*c, r.transform)).collect()
    }
}

/// Output grid: box around the scaled atlas vertebrae, padded by `margin` and
/// snapped to the spacing lattice.
fn output_grid(atlas: &ScaledAtlas, codes: &BTreeSet<u8>, spacing: [f64; 3], margin: f64) -> Result<VolumeGeometry> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for v in atlas.vertebrae().iter().filter(|v| codes.contains(&v.code)) {
        let (l, h) = v.mask.geometry().bounds();
        lo = lo.inf(&l);
        hi = hi.sup(&h);
    }
    for a in 0..3 {
        lo[a] = ((lo[a] - margin) / spacing[a]).floor() * spacing[a];
        hi[a] = ((hi[a] + margin) / spacing[a]).ceil() * spacing[a];
    }
    VolumeGeometry::enclosing(lo, hi, spacing)
}

/// Places the given scaled-atlas vertebrae on `g` by nearest-neighbour
/// lookup. Lower codes win where crops overlap.
pub fn place_atlas(atlas: &ScaledAtlas, codes: &BTreeSet<u8>, g: &VolumeGeometry) -> LabelVolume {
    let parts: Vec<_> = atlas
        .vertebrae()
        .iter()
        .filter(|v| codes.contains(&v.code))
        .map(|v| {
            let (l, h) = v.mask.geometry().bounds();
            (v, l, h)
        })
        .collect();
    Volume::from_fn(*g, |ijk| {
        let p = g.world(ijk);
        for (v, l, h) in &parts {
            if (0..3).all(|a| p[a] >= l[a] - 1e-9 && p[a] <= h[a] + 1e-9)
                && nearest(v.mask.geometry(), v.mask.data(), &p) == Some(v.code)
            {
                return v.code;
            }
        }
        0
    })
}

/// Straightens `ct`/`mask` onto the scaled atlas.
pub fn straighten_spine(
    ct: &ScalarVolume,
    mask: &LabelVolume,
    fractured: &BTreeSet<u8>,
    atlas: &Atlas,
    opts: &StraightenOptions,
) -> Result<StraightenOutput> {
    ct.geometry().ensure_same(mask.geometry(), "CT vs mask")?;
    for &c in fractured {
        require_code(mask, c)?;
    }
    let present: BTreeSet<u8> = mask.codes().into_iter().collect();
    let shared: BTreeSet<u8> = atlas.codes().into_iter().filter(|c| present.contains(c)).collect();
    let healthy: BTreeSet<u8> = shared.difference(fractured).copied().collect();
    if healthy.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need >= 3 healthy vertebrae shared with the atlas, got {}",
            healthy.len()
        )));
    }
    let scale = compute_scale(&mask.centroids(), atlas, fractured)?;
    let scaled = scale_atlas(atlas, scale)?;
    let g = output_grid(&scaled, &shared, ct.geometry().spacing(), opts.margin_mm)?;

    let codes: Vec<u8> = healthy.iter().copied().collect();
    let registrations: BTreeMap<u8, Registration> = codes
        .par_iter()
        .map(|&c| {
            let av = scaled.get(c).expect("shared code");
            let source = extract_surface(&av.mask, c)?;
            let target = extract_surface(mask, c)?;
            let r = icp_rigid(&source, &target, &opts.icp)?;
            Ok((
                c,
                Registration {
                    transform: r.transform,
                    residual_mm: r.residual,
                    iterations: r.iterations,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let membership = place_atlas(&scaled, &healthy, &g);
    let dmaps: BTreeMap<u8, DistanceMap> = codes
        .par_iter()
        .map(|&c| distance_map(&membership, c).map(|d| (c, d)))
        .collect::<Result<_>>()?;
    let fields: BTreeMap<u8, RigidField> = registrations
        .iter()
        .map(|(&c, r)| {
            (
                c,
                RigidField {
                    geometry: g,
                    transform: r.transform,
                },
            )
        })
        .collect();
    let field = combine_fields(&fields, &dmaps, &membership)?;
    drop(dmaps);
    let ct_out = warp(ct, &field)?;
    let mask_out = warp(mask, &field)?;
    Ok(StraightenOutput {
        ct: ct_out,
        mask: mask_out,
        field,
        membership,
        registrations,
        scale,
        scaled_atlas: scaled,
        fractured: fractured.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactnessReport {
    /// Largest absolute component difference between `F̃` and `F_i` over
    /// membership voxels (mm).
    pub max_deviation: f64,
    pub voxels_checked: usize,
}

/// Recomputes `F_i` on every membership voxel and compares with the stored
/// combined field.
pub fn inside_field_exactness_check(out: &StraightenOutput) -> ExactnessReport {
    let g = *out.field.geometry();
    let m = out.membership.data();
    let (max_deviation, voxels_checked) = (0..g.len())
        .into_par_iter()
        .filter_map(|idx| {
            let r = out.registrations.get(&m[idx])?;
            let expected = RigidField {
                geometry: g,
                transform: r.transform,
            }
            .at(idx);
            let got = out.field.vectors()[idx];
            let dev = (0..3).map(|a| (got[a] - expected[a]).abs()).fold(0.0, f64::max);
            Some((dev, 1usize))
        })
        .reduce(|| (0.0, 0), |a, b| (a.0.max(b.0), a.1 + b.1));
    ExactnessReport {
        max_deviation,
        voxels_checked,
    }
}
