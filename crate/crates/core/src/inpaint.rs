//! Replacement of a fractured vertebra by a healthy shape estimate.
//!
//! Two deterministic estimators stand in for a learned generator: the scaled
//! atlas shape of the fractured level, and the mean of its two neighbours,
//! both placed at a pose interpolated between the neighbours. Their soft
//! masks are averaged and thresholded at 0.5, and intensities are averaged,
//! exactly as a two-view fusion would do.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::atlas::ScaledAtlas;
use crate::error::{Error, Result};
use crate::labels;
use crate::registration::{extract_surface, icp_rigid, require_code, IcpOptions, RigidTransform};
use crate::volume::{
    trilinear, LabelVolume, ScalarVolume, Vec3, Volume, VolumeGeometry,
};

/// ROI dilation along the spine axis (mm).
pub const ROI_DILATION_MM: f64 = 3.0;
pub const FUSION_THRESHOLD: f64 = 0.5;

/// Voxelwise probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    geometry: VolumeGeometry,
    probs: Vec<f32>,
}

impl SoftMask {
    pub fn new(geometry: VolumeGeometry, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != geometry.len() {
            return Err(Error::InvalidInput(format!(
                "soft mask has {} values for {} voxels",
                probs.len(),
                geometry.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
        }
        Ok(SoftMask { geometry, probs })
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn threshold(&self, t: f64) -> Volume<bool> {
        Volume::new(self.geometry, self.probs.iter().map(|&p| p as f64 >= t).collect())
            .expect("sized")
    }

    /// Volume (mL) of the thresholded mask.
    pub fn volume_ml(&self, t: f64) -> f64 {
        let n = self.probs.iter().filter(|&&p| p as f64 >= t).count();
        n as f64 * self.geometry.voxel_volume() / 1000.0
    }
}

/// Voxels that the inpainting may rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub region: Volume<bool>,
    pub superior: u8,
    pub inferior: u8,
    /// Unit vector from the superior to the inferior neighbour centroid.
    pub axis: Vec3,
    /// Free space between the neighbours' facing surfaces along `axis` (mm),
    /// before dilation.
    pub gap_mm: f64,
}

impl Roi {
    pub fn voxel_count(&self) -> usize {
        self.region.data().iter().filter(|&&b| b).count()
    }

    pub fn volume_ml(&self) -> f64 {
        self.voxel_count() as f64 * self.region.geometry().voxel_volume() / 1000.0
    }

    fn indices(&self) -> Vec<usize> {
        self.region
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

fn orthonormal(u: &Vec3) -> (Vec3, Vec3) {
    let seed = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = (seed - u * u.dot(&seed)).normalize();
    (e1, u.cross(&e1))
}

/// Slab between the superior neighbour's lower surface and the inferior
/// neighbour's upper surface, dilated by [`ROI_DILATION_MM`] along the
/// neighbour chord, bounded laterally by the neighbours' extent, plus every
/// voxel still labelled `fractured`. Voxels of other vertebrae never belong
/// to it.
pub fn region_of_interest(mask: &LabelVolume, fractured: u8, neighbors: (u8, u8)) -> Result<Roi> {
    let (sup, inf) = neighbors;
    require_code(mask, sup)?;
    require_code(mask, inf)?;
    let g = *mask.geometry();
    let centroids = mask.centroids();
    let (cs, ci) = (centroids[&sup], centroids[&inf]);
    let chord = ci - cs;
    if chord.norm() == 0.0 {
        return Err(Error::Degenerate("neighbour centroids coincide".into()));
    }
    let u = chord.normalize();
    let (e1, e2) = orthonormal(&u);
    let mut t_sup = f64::NEG_INFINITY;
    let mut t_inf = f64::INFINITY;
    let mut lat_lo = [f64::INFINITY; 2];
    let mut lat_hi = [f64::NEG_INFINITY; 2];
    for (idx, &c) in mask.data().iter().enumerate() {
        if c != sup && c != inf {
            continue;
        }
        let d = g.world_of_index(idx) - cs;
        let t = d.dot(&u);
        if c == sup {
            t_sup = t_sup.max(t);
        } else {
            t_inf = t_inf.min(t);
        }
        for (a, e) in [e1, e2].iter().enumerate() {
            let l = d.dot(e);
            lat_lo[a] = lat_lo[a].min(l);
            lat_hi[a] = lat_hi[a].max(l);
        }
    }
    let sp = g.spacing();
    // half a voxel on each facing side turns center distances into surface distances
    let voxel_along: f64 = (0..3).map(|a| u[a].abs() * sp[a]).sum();
    let gap = t_inf - t_sup - voxel_along;
    if gap <= 0.0 {
        return Err(Error::Degenerate(format!(
            "no space between {} and {}",
            labels::display(sup),
            labels::display(inf)
        )));
    }
    let m = ROI_DILATION_MM;
    let (t0, t1) = (t_sup - m, t_inf + m);
    let labels_in = mask.data();
    let region = Volume::from_fn(g, |ijk| {
        let idx = g.index(ijk[0], ijk[1], ijk[2]);
        let c = labels_in[idx];
        if c == fractured {
            return true;
        }
        if c != 0 {
            return false;
        }
        let d = g.world(ijk) - cs;
        let t = d.dot(&u);
        let l1 = d.dot(&e1);
        let l2 = d.dot(&e2);
        t >= t0
            && t <= t1
            && l1 >= lat_lo[0] - m
            && l1 <= lat_hi[0] + m
            && l2 >= lat_lo[1] - m
            && l2 <= lat_hi[1] + m
    });
    Ok(Roi {
        region,
        superior: sup,
        inferior: inf,
        axis: u,
        gap_mm: gap,
    })
}

/// A neighbour vertebra's fitted pose in the current image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborPose {
    pub code: u8,
    /// Scaled-atlas world → current world.
    pub transform: RigidTransform,
    /// Mask centroid in the current image.
    pub centroid: Vec3,
}

/// Where the estimated vertebra goes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPose {
    pub center: Vec3,
    /// Atlas orientation → current orientation.
    pub rotation: Matrix3<f64>,
    /// Current neighbour chord length over atlas chord length.
    pub axial_scale: f64,
    /// Unit atlas chord (superior to inferior neighbour).
    pub atlas_axis: Vec3,
    /// Scaled-atlas centroid of the estimated vertebra.
    pub atlas_centroid: Vec3,
    /// Atlas position of the estimate between the neighbours, in [0, 1].
    pub ratio: f64,
}

impl TargetPose {
    /// Current-image point → offset from the atlas centroid, in atlas axes.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let l = self.rotation.transpose() * (p - self.center);
        l + self.atlas_axis * (l.dot(&self.atlas_axis) * (1.0 / self.axial_scale - 1.0))
    }

    pub fn from_local(&self, l: &Vec3) -> Vec3 {
        let s = l + self.atlas_axis * (l.dot(&self.atlas_axis) * (self.axial_scale - 1.0));
        self.center + self.rotation * s
    }
}

/// Interpolates the estimate's pose from its two neighbours.
///
/// Each neighbour transform predicts where the atlas centroid should go;
/// the predictions are mixed by the atlas centroid-distance ratio. Rotation
/// is the geodesic interpolation of the two neighbour rotations at the same
/// ratio. The estimate is stretched along the chord by the ratio of current
/// to atlas neighbour distance so it fits the available space.
pub fn interpolate_pose(
    atlas: &ScaledAtlas,
    code: u8,
    sup: &NeighborPose,
    inf: &NeighborPose,
) -> Result<TargetPose> {
    let get = |c: u8| {
        atlas.get(c).map(|v| v.centroid).ok_or_else(|| {
            Error::InvalidInput(format!("atlas has no {}", labels::display(c)))
        })
    };
    let (a_f, a_s, a_i) = (get(code)?, get(sup.code)?, get(inf.code)?);
    let ds = (a_f - a_s).norm();
    let di = (a_i - a_f).norm();
    if ds + di == 0.0 {
        return Err(Error::Degenerate("atlas neighbour centroids coincide".into()));
    }
    let ratio = ds / (ds + di);
    let ps = sup.transform.apply(&a_f);
    let pi = inf.transform.apply(&a_f);
    let center = ps + (pi - ps) * ratio;
    let q = sup
        .transform
        .quaternion()
        .try_slerp(&inf.transform.quaternion(), ratio, 1e-12)
        .unwrap_or_else(|| sup.transform.quaternion());
    let atlas_chord = a_i - a_s;
    let axial_scale = (inf.centroid - sup.centroid).norm() / atlas_chord.norm();
    if !(axial_scale > 0.0) {
        return Err(Error::Degenerate("neighbour centroids coincide".into()));
    }
    Ok(TargetPose {
        center,
        rotation: *q.to_rotation_matrix().matrix(),
        axial_scale,
        atlas_axis: atlas_chord.normalize(),
        atlas_centroid: a_f,
        ratio,
    })
}

fn indicator_f32(mask: &LabelVolume, code: u8) -> Vec<f32> {
    mask.data().iter().map(|&c| if c == code { 1.0 } else { 0.0 }).collect()
}

fn render(g: VolumeGeometry, roi: &Roi, f: impl Fn(&Vec3) -> f64 + Sync) -> SoftMask {
    let idx = roi.indices();
    let vals: Vec<(usize, f32)> = idx
        .par_iter()
        .map(|&i| (i, f(&g.world_of_index(i)).clamp(0.0, 1.0) as f32))
        .collect();
    let mut probs = vec![0.0f32; g.len()];
    for (i, v) in vals {
        probs[i] = v;
    }
    SoftMask { geometry: g, probs }
}

/// The scaled-atlas shape of `code` at `pose`, with a one-voxel linear edge
/// ramp (trilinear sampling of its indicator). Zero outside the ROI.
pub fn candidate_atlas(atlas: &ScaledAtlas, code: u8, pose: &TargetPose, roi: &Roi) -> Result<SoftMask> {
    let v = atlas
        .get(code)
        .ok_or_else(|| Error::InvalidInput(format!("atlas has no {}", labels::display(code))))?;
    let ag = *v.mask.geometry();
    let ind = indicator_f32(&v.mask, code);
    Ok(render(*roi.region.geometry(), roi, |p| {
        let x = pose.atlas_centroid + pose.to_local(p);
        trilinear(&ag, &ind, &x, 0.0)
    }))
}

/// Mean of the two neighbour shapes, each taken about its own centroid and
/// orientation and placed at `pose`. Zero outside the ROI.
pub fn candidate_neighbors(
    mask: &LabelVolume,
    neighbors: (&NeighborPose, &NeighborPose),
    pose: &TargetPose,
    roi: &Roi,
) -> Result<SoftMask> {
    let g = *mask.geometry();
    roi.region.geometry().ensure_same(&g, "ROI vs mask")?;
    let mut parts = Vec::new();
    for n in [neighbors.0, neighbors.1] {
        require_code(mask, n.code)?;
        parts.push((n, indicator_f32(mask, n.code)));
    }
    Ok(render(g, roi, |p| {
        let l = pose.to_local(p);
        let s: f64 = parts
            .iter()
            .map(|(n, ind)| trilinear(&g, ind, &(n.centroid + n.transform.rotation * l), 0.0))
            .sum();
        s / parts.len() as f64
    }))
}

/// Piecewise-constant intensities used to paint the estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillStats {
    pub trabecular: f32,
    pub cortical: f32,
    pub soft_tissue: f32,
}

pub const SOFT_TISSUE_FILL_HU: f32 = 40.0;

fn is_boundary<F: Fn(usize) -> bool>(g: &VolumeGeometry, idx: usize, inside: F) -> bool {
    let [nx, ny, nz] = g.dims();
    let [i, j, k] = g.coords(idx);
    let plane = nx * ny;
    i == 0
        || j == 0
        || k == 0
        || i + 1 == nx
        || j + 1 == ny
        || k + 1 == nz
        || !inside(idx - 1)
        || !inside(idx + 1)
        || !inside(idx - nx)
        || !inside(idx + nx)
        || !inside(idx - plane)
        || !inside(idx + plane)
}

/// Interior and surface mean HU of the given vertebrae.
pub fn fill_stats(ct: &ScalarVolume, mask: &LabelVolume, codes: &[u8]) -> Result<FillStats> {
    ct.geometry().ensure_same(mask.geometry(), "CT vs mask")?;
    let g = mask.geometry();
    let d = mask.data();
    let (mut si, mut ni, mut sb, mut nb) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (idx, &c) in d.iter().enumerate() {
        if c == 0 || !codes.contains(&c) {
            continue;
        }
        let v = ct.data()[idx] as f64;
        if is_boundary(g, idx, |n| d[n] == c) {
            sb += v;
            nb += 1;
        } else {
            si += v;
            ni += 1;
        }
    }
    if nb == 0 {
        return Err(Error::InvalidInput("no vertebra voxels for fill statistics".into()));
    }
    let cortical = (sb / nb as f64) as f32;
    Ok(FillStats {
        trabecular: if ni > 0 { (si / ni as f64) as f32 } else { cortical },
        cortical,
        soft_tissue: SOFT_TISSUE_FILL_HU,
    })
}

/// Voxelwise arithmetic mean of candidate intensity volumes.
pub fn fuse_intensities(cts: &[&ScalarVolume]) -> Result<ScalarVolume> {
    let first = cts
        .first()
        .ok_or_else(|| Error::InvalidInput("no intensity candidates".into()))?;
    let g = *first.geometry();
    for c in cts {
        c.geometry().ensure_same(&g, "intensity candidates")?;
    }
    let n = cts.len() as f64;
    let data = (0..g.len())
        .into_par_iter()
        .map(|i| (cts.iter().map(|c| c.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Volume::new(g, data)
}

/// Voxelwise mean of the candidate probabilities.
pub fn fuse_probabilities(cands: &[SoftMask]) -> Result<SoftMask> {
    if cands.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "fusion needs >= 2 candidates, got {}",
            cands.len()
        )));
    }
    let g = cands[0].geometry;
    for c in cands {
        c.geometry.ensure_same(&g, "fusion candidates")?;
    }
    let n = cands.len() as f64;
    let probs = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let mean = cands.iter().map(|c| c.probs[i] as f64).sum::<f64>() / n;
            // keep the mean inside the candidates' range despite f32 rounding
            let lo = cands.iter().map(|c| c.probs[i]).fold(f32::INFINITY, f32::min);
            let hi = cands.iter().map(|c| c.probs[i]).fold(f32::NEG_INFINITY, f32::max);
            (mean as f32).clamp(lo, hi)
        })
        .collect();
    Ok(SoftMask { geometry: g, probs })
}

#[derive(Debug, Clone)]
pub struct InpaintResult {
    pub ct: ScalarVolume,
    pub mask: LabelVolume,
    pub code: u8,
    pub candidates: Vec<SoftMask>,
    pub fused: SoftMask,
    pub roi: Roi,
    pub pose: Option<TargetPose>,
}

impl InpaintResult {
    pub fn volume_ml(&self) -> f64 {
        crate::volume::volume_of_label(&self.mask, self.code)
    }
}

/// Fuses candidates and paints the result into the ROI: voxels where the
/// mean probability is ≥ 0.5 become `code` (cortical fill on their surface,
/// trabecular inside), remaining ROI voxels become soft tissue, everything
/// outside the ROI is copied unchanged.
pub fn fuse(
    cands: &[SoftMask],
    ct: &ScalarVolume,
    mask: &LabelVolume,
    roi: &Roi,
    code: u8,
    fill: &FillStats,
) -> Result<InpaintResult> {
    let fused = fuse_probabilities(cands)?;
    let g = *mask.geometry();
    fused.geometry.ensure_same(&g, "candidates vs mask")?;
    ct.geometry().ensure_same(&g, "CT vs mask")?;
    roi.region.geometry().ensure_same(&g, "ROI vs mask")?;
    let in_roi = roi.region.data();
    let inside: Vec<bool> = (0..g.len())
        .map(|i| in_roi[i] && fused.probs[i] as f64 >= FUSION_THRESHOLD)
        .collect();
    let count = inside.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::Degenerate(format!(
            "fused estimate for {} is empty",
            labels::display(code)
        )));
    }
    let mut out_ct = ct.clone();
    let mut out_mask = mask.clone();
    {
        let (c, m) = (out_ct.data_mut(), out_mask.data_mut());
        for idx in 0..g.len() {
            if !in_roi[idx] {
                continue;
            }
            if inside[idx] {
                m[idx] = code;
                c[idx] = if is_boundary(&g, idx, |n| inside[n]) {
                    fill.cortical
                } else {
                    fill.trabecular
                };
            } else {
                m[idx] = 0;
                c[idx] = fill.soft_tissue;
            }
        }
    }
    Ok(InpaintResult {
        ct: out_ct,
        mask: out_mask,
        code,
        candidates: cands.to_vec(),
        fused,
        roi: roi.clone(),
        pose: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InpaintOptions {
    pub icp: IcpOptions,
}

/// Fits the neighbour poses of `code` (scaled atlas → current image).
pub fn neighbor_poses(
    mask: &LabelVolume,
    atlas: &ScaledAtlas,
    code: u8,
    icp: &IcpOptions,
) -> Result<(NeighborPose, NeighborPose)> {
    let (sup, inf) = atlas.neighbors(code).ok_or_else(|| {
        Error::InvalidInput(format!(
            "{} needs atlas neighbours on both sides",
            labels::display(code)
        ))
    })?;
    let centroids = mask.centroids();
    let fit = |c: u8| -> Result<NeighborPose> {
        require_code(mask, c)?;
        let src = extract_surface(&atlas.get(c).expect("atlas neighbour").mask, c)?;
        let dst = extract_surface(mask, c)?;
        let r = icp_rigid(&src, &dst, icp)?;
        Ok(NeighborPose {
            code: c,
            transform: r.transform,
            centroid: centroids[&c],
        })
    };
    Ok((fit(sup)?, fit(inf)?))
}

/// ROI → both candidates → fusion, for one fractured vertebra.
///
/// Works on straightened images and, for the ablation comparison, on the
/// raw fractured image: neighbour poses are always fitted against `mask`.
pub fn inpaint_vertebra(
    ct: &ScalarVolume,
    mask: &LabelVolume,
    code: u8,
    atlas: &ScaledAtlas,
    opts: &InpaintOptions,
) -> Result<InpaintResult> {
    ct.geometry().ensure_same(mask.geometry(), "CT vs mask")?;
    let (sup, inf) = neighbor_poses(mask, atlas, code, &opts.icp)?;
    let roi = region_of_interest(mask, code, (sup.code, inf.code))?;
    let pose = interpolate_pose(atlas, code, &sup, &inf)?;
    let cands = vec![
        candidate_atlas(atlas, code, &pose, &roi)?,
        candidate_neighbors(mask, (&sup, &inf), &pose, &roi)?,
    ];
    let fill = fill_stats(ct, mask, &[sup.code, inf.code])?;
    let mut out = fuse(&cands, ct, mask, &roi, code, &fill)?;
    out.pose = Some(pose);
    Ok(out)
}

/// Inpaints several fractured vertebrae one after another (cranial first).
pub fn inpaint_all(
    ct: &ScalarVolume,
    mask: &LabelVolume,
    codes: &[u8],
    atlas: &ScaledAtlas,
    opts: &InpaintOptions,
) -> Result<(ScalarVolume, LabelVolume, BTreeMap<u8, InpaintResult>)> {
    let mut cur_ct = ct.clone();
    let mut cur_mask = mask.clone();
    let mut results = BTreeMap::new();
    for &c in codes {
        let r = inpaint_vertebra(&cur_ct, &cur_mask, c, atlas, opts)?;
        cur_ct = r.ct.clone();
        cur_mask = r.mask.clone();
        results.insert(c, r);
    }
    Ok((cur_ct, cur_mask, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{build_atlas, scale_atlas};
    use crate::phantom::{generate_healthy, Curvature, PhantomSpec};
    use crate::volume::volume_of_label;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            levels: (18..=23).collect(),
            ..PhantomSpec::with_seed(seed)
        }
    }

    #[test]
    fn slab_height_matches_disc_gap() {
        let s = PhantomSpec {
            disc_height: 15.0,
            curvature: Curvature {
                amplitude: 0.0,
                wavelength: 400.0,
            },
            ..spec(2)
        };
        let p = generate_healthy(&s).unwrap();
        let roi = region_of_interest(&p.mask, 0, (20, 21)).unwrap();
        assert!((roi.gap_mm - 15.0).abs() <= 1.0, "gap {}", roi.gap_mm);
        for (i, &b) in roi.region.data().iter().enumerate() {
            if b {
                assert_eq!(p.mask.data()[i], 0);
            }
        }
    }

    #[test]
    fn touching_neighbors_are_rejected() {
        let g = VolumeGeometry::new([4, 4, 6], [1.0; 3], [0.0; 3]).unwrap();
        let mask = Volume::from_fn(g, |[_, _, k]| if k < 3 { 1 } else { 2 });
        assert!(matches!(
            region_of_interest(&mask, 9, (1, 2)),
            Err(Error::Degenerate(_))
        ));
    }

    fn identity_pose(atlas: &ScaledAtlas, c: u8) -> NeighborPose {
        NeighborPose {
            code: c,
            transform: RigidTransform::identity(),
            centroid: atlas.get(c).unwrap().centroid,
        }
    }

    #[test]
    fn pose_interpolation_identity_and_equivariance() {
        let p = generate_healthy(&spec(3)).unwrap();
        let atlas = scale_atlas(&build_atlas(&p.mask).unwrap(), 1.0).unwrap();
        let (s, i) = (identity_pose(&atlas, 20), identity_pose(&atlas, 22));
        let pose = interpolate_pose(&atlas, 21, &s, &i).unwrap();
        assert!((pose.center - atlas.get(21).unwrap().centroid).norm() < 0.5);
        assert!((pose.axial_scale - 1.0).abs() < 1e-12);

        let shift = Vec3::new(4.0, 0.0, 0.0);
        let moved = |n: NeighborPose| NeighborPose {
            transform: RigidTransform::translation(shift),
            centroid: n.centroid + shift,
            ..n
        };
        let pose2 = interpolate_pose(&atlas, 21, &moved(s), &moved(i)).unwrap();
        assert!((pose2.center - pose.center - shift).norm() < 1e-9);
    }

    #[test]
    fn candidates_on_a_healthy_spine() {
        let p = generate_healthy(&spec(4)).unwrap();
        let atlas = scale_atlas(&build_atlas(&p.mask).unwrap(), 1.0).unwrap();
        let (s, i) = neighbor_poses(&p.mask, &atlas, 21, &IcpOptions::default()).unwrap();
        let roi = region_of_interest(&p.mask, 21, (s.code, i.code)).unwrap();
        let pose = interpolate_pose(&atlas, 21, &s, &i).unwrap();
        let truth = volume_of_label(&p.mask, 21);
        let a = candidate_atlas(&atlas, 21, &pose, &roi).unwrap();
        let rel = (a.volume_ml(0.5) - truth).abs() / truth;
        assert!(rel < 0.10, "atlas candidate {} vs {truth}", a.volume_ml(0.5));
        let n = candidate_neighbors(&p.mask, (&s, &i), &pose, &roi).unwrap();
        let (v20, v22) = (volume_of_label(&p.mask, 20), volume_of_label(&p.mask, 22));
        let v = n.volume_ml(0.5);
        assert!(v > v20.min(v22) * 0.9 && v < v20.max(v22) * 1.1, "{v} not near {v20}..{v22}");
        assert!(candidate_neighbors(&p.mask, (&s, &NeighborPose { code: 5, ..i }), &pose, &roi).is_err());
    }

    #[test]
    fn fusion_rules() {
        let g = VolumeGeometry::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let a = SoftMask::new(g, vec![0.9, 0.2, 0.6]).unwrap();
        let b = SoftMask::new(g, vec![0.3, 0.2, 0.6]).unwrap();
        let f = fuse_probabilities(&[a.clone(), b]).unwrap();
        assert!((f.probs()[0] - 0.6).abs() < 1e-6);
        assert!(f.threshold(0.5).data()[0]);
        let same = fuse_probabilities(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same.threshold(0.5), a.threshold(0.5));
        assert!(fuse_probabilities(&[a.clone()]).is_err());
        assert!(SoftMask::new(g, vec![1.5, 0.0, 0.0]).is_err());

        let c1 = Volume::filled(g, 100.0f32);
        let c2 = Volume::filled(g, 200.0f32);
        assert_eq!(fuse_intensities(&[&c1, &c2]).unwrap().data(), &[150.0; 3]);
    }

    #[test]
    fn inpainting_is_local() {
        let p = generate_healthy(&spec(6)).unwrap();
        let atlas = scale_atlas(&build_atlas(&generate_healthy(&spec(7)).unwrap().mask).unwrap(), 1.0).unwrap();
        let r = inpaint_vertebra(&p.ct, &p.mask, 21, &atlas, &InpaintOptions::default()).unwrap();
        let roi = r.roi.region.data();
        for i in 0..roi.len() {
            if !roi[i] {
                assert_eq!(r.ct.data()[i].to_bits(), p.ct.data()[i].to_bits());
                assert_eq!(r.mask.data()[i], p.mask.data()[i]);
            }
        }
        let v = r.volume_ml();
        assert!(v > 0.0 && v < r.roi.volume_ml());
        let truth = volume_of_label(&p.mask, 21);
        assert!((v - truth).abs() / truth < 0.1, "{v} vs {truth}");
        for i in 0..roi.len() {
            let lo = r.candidates.iter().map(|c| c.probs()[i]).fold(1.0f32, f32::min);
            let hi = r.candidates.iter().map(|c| c.probs()[i]).fold(0.0f32, f32::max);
            assert!(r.fused.probs()[i] >= lo && r.fused.probs()[i] <= hi);
        }
    }
}
