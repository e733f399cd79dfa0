//! Per-vertebra rigid alignment: surface clouds, Kabsch fits and ICP.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels;
use crate::volume::{LabelVolume, Vec3};

/// World-to-world map `x ↦ R·x + t` (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` (radians) about `axis` through `center`, then `t`.
    pub fn about(axis: &Vec3, angle: f64, center: &Vec3, t: Vec3) -> Self {
        let r = *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).matrix();
        RigidTransform {
            rotation: r,
            translation: center - r * center + t,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.quaternion().angle()
    }

    /// Angle (radians) of `self⁻¹ ∘ other`'s rotation.
    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        RigidTransform {
            rotation: self.rotation.transpose() * other.rotation,
            translation: Vec3::zeros(),
        }
        .angle()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn is_proper(&self) -> bool {
        let r = &self.rotation;
        let e = r.transpose() * r - Matrix3::identity();
        e.abs().max() < 1e-9 && (r.determinant() - 1.0).abs() <= 1e-9
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut m = [[0.0; 4]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for j in 0..3 {
                row[j] = self.rotation[(i, j)];
            }
            row[3] = self.translation[i];
        }
        m
    }

    pub fn from_rows(m: &[[f64; 4]; 3]) -> Self {
        RigidTransform {
            rotation: Matrix3::from_fn(|i, j| m[i][j]),
            translation: Vec3::new(m[0][3], m[1][3], m[2][3]),
        }
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        <[[f64; 4]; 3]>::deserialize(d).map(|m| RigidTransform::from_rows(&m))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceCloud {
    pub points: Vec<Vec3>,
}

impl SurfaceCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("empty point cloud".into()));
        }
        Ok(SurfaceCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    pub fn transformed(&self, t: &RigidTransform) -> SurfaceCloud {
        SurfaceCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }
}

/// Voxels of `code` with at least one face neighbour outside the label
/// (grid borders count as outside).
pub fn extract_surface(mask: &LabelVolume, code: u8) -> Result<SurfaceCloud> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims();
    let d = mask.data();
    let mut pts = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = g.index(i, j, k);
                if d[idx] != code {
                    continue;
                }
                let boundary = i == 0
                    || j == 0
                    || k == 0
                    || i + 1 == nx
                    || j + 1 == ny
                    || k + 1 == nz
                    || d[idx - 1] != code
                    || d[idx + 1] != code
                    || d[idx - nx] != code
                    || d[idx + nx] != code
                    || d[idx - nx * ny] != code
                    || d[idx + nx * ny] != code;
                if boundary {
                    pts.push(g.world([i, j, k]));
                }
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::MissingLabel(code));
    }
    Ok(SurfaceCloud { points: pts })
}

/// Static k-d tree over 3D points; ties resolve to the lowest point index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Point indices arranged as an implicit balanced tree: the median of
    /// each range is the node, split on the widest axis of that range.
    order: Vec<u32>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes, 0);
        KdTree {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point index and squared distance.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        // `<=` keeps equal-distance candidates reachable for the tie rule
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], axes: &mut [u8], depth: usize) {
    if order.is_empty() {
        return;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i as usize]);
        hi = hi.sup(&points[i as usize]);
    }
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    axes[mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (la, ra) = axes.split_at_mut(mid);
    build(points, left, la, depth + 1);
    build(points, &mut rest[1..], &mut ra[1..], depth + 1);
}

/// Least-squares rigid fit of `source` onto `target` (paired by index).
pub fn kabsch(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "kabsch needs paired clouds, got {} and {} points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Degenerate(format!(
            "kabsch needs >= 3 points, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vec3>() / n;
    let ct = target.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let sv = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if !(sv[idx[1]] > 1e-12 * sv[idx[0]].max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate(
            "point cloud covariance has rank < 2".into(),
        ));
    }
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(idx[2], idx[2])] = -1.0;
    }
    let r = v * d * u.transpose();
    Ok(RigidTransform {
        rotation: r,
        translation: ct - r * cs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpOptions {
    pub max_iterations: usize,
    /// Stop once the residual changes by less than this (mm).
    pub tolerance: f64,
    /// Clouds above this size are strided down.
    pub max_points: usize,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions {
            max_iterations: 100,
            tolerance: 1e-4,
            max_points: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// RMS closest-point distance of the returned transform (mm).
    pub residual: f64,
    /// Mean closest-point distance of the returned transform (mm).
    pub mean_distance: f64,
    pub iterations: usize,
    /// RMS residual at every evaluated iterate, starting with the centroid
    /// initialization.
    pub history: Vec<f64>,
}

const MAX_EXTRAPOLATION: usize = 6;

fn stride(points: &[Vec3], max: usize) -> Vec<Vec3> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let step = points.len().div_ceil(max);
    points.iter().step_by(step).copied().collect()
}

/// Rigid ICP aligning `source` onto `target`.
///
/// Starts from the centroid offset, then alternates closest-point matching
/// with a Kabsch fit. Both half-steps can only lower the sum of squared
/// distances, so the RMS residual is non-increasing.
pub fn icp_rigid(source: &SurfaceCloud, target: &SurfaceCloud, opts: &IcpOptions) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("icp needs non-empty clouds".into()));
    }
    let src = stride(&source.points, opts.max_points);
    let dst = stride(&target.points, opts.max_points);
    let tree = KdTree::new(&dst);
    let n = src.len() as f64;

    let mut t = RigidTransform::translation(
        dst.iter().sum::<Vec3>() / dst.len() as f64 - src.iter().sum::<Vec3>() / n,
    );
    let mut matched = vec![Vec3::zeros(); src.len()];
    let evaluate = |t: &RigidTransform, matched: &mut [Vec3]| {
        let mut ss = 0.0;
        let mut s = 0.0;
        for (p, m) in src.iter().zip(matched.iter_mut()) {
            let (i, d2) = tree.nearest(&t.apply(p)).expect("non-empty");
            *m = dst[i];
            ss += d2;
            s += d2.sqrt();
        }
        ((ss / n).sqrt(), s / n)
    };
    let (mut rms, mut mean) = evaluate(&t, &mut matched);
    let mut history = vec![rms];
    let mut iterations = 0;
    let mut scratch = vec![Vec3::zeros(); src.len()];
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut next = kabsch(&src, &matched)?;
        let (mut r, mut m) = evaluate(&next, &mut scratch);
        let mut next_matched = scratch.clone();
        // Extrapolate along the incremental motion, doubling the step while
        // the residual keeps falling. Point-to-point ICP otherwise creeps
        // along flat faces (endplates) in many tiny steps.
        let mut step = next.compose(&t.inverse());
        for _ in 0..MAX_EXTRAPOLATION {
            let trial = step.compose(&next);
            let (tr, tm) = evaluate(&trial, &mut scratch);
            if !(tr < r) {
                break;
            }
            next = trial;
            r = tr;
            m = tm;
            next_matched.copy_from_slice(&scratch);
            step = step.compose(&step);
        }
        history.push(r);
        if r > rms {
            // numerical noise only; keep the best iterate
            break;
        }
        let change = rms - r;
        t = next;
        rms = r;
        mean = m;
        matched = next_matched;
        if change < opts.tolerance {
            break;
        }
    }
    Ok(IcpResult {
        transform: t,
        residual: rms,
        mean_distance: mean,
        iterations,
        history,
    })
}

/// Rotation error (degrees) and translation error (mm) of `estimate` against
/// `truth`, measured at `at`.
pub fn transform_error(estimate: &RigidTransform, truth: &RigidTransform, at: &Vec3) -> (f64, f64) {
    let angle = estimate.rotation_distance(truth).to_degrees();
    let offset = (estimate.apply(at) - truth.apply(at)).norm();
    (angle, offset)
}

pub(crate) fn require_code(mask: &LabelVolume, code: u8) -> Result<()> {
    if mask.contains_code(code) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "label {} is not present in the mask",
            labels::display(code)
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_healthy, PhantomSpec};
    use crate::volume::{Volume, VolumeGeometry};
    use proptest::prelude::*;

    fn cube_mask(n: usize, pad: usize) -> LabelVolume {
        let size = n + 2 * pad;
        let g = VolumeGeometry::new([size; 3], [1.0; 3], [0.0; 3]).unwrap();
        Volume::from_fn(g, |[i, j, k]| {
            let inside = |v: usize| v >= pad && v < pad + n;
            u8::from(inside(i) && inside(j) && inside(k))
        })
    }

    #[test]
    fn surfaces_of_small_cubes() {
        assert_eq!(extract_surface(&cube_mask(1, 1), 1).unwrap().len(), 1);
        assert_eq!(extract_surface(&cube_mask(2, 1), 1).unwrap().len(), 8);
        let c3 = extract_surface(&cube_mask(3, 2), 1).unwrap();
        assert_eq!(c3.len(), 26);
        assert!(!c3.points.contains(&Vec3::new(3.0, 3.0, 3.0)));
        // touching the grid border counts as boundary
        assert_eq!(extract_surface(&cube_mask(3, 0), 1).unwrap().len(), 26);
        assert!(matches!(
            extract_surface(&cube_mask(3, 1), 2),
            Err(Error::MissingLabel(2))
        ));
    }

    #[test]
    fn kd_tree_matches_brute_force_with_ties() {
        // integer lattice with duplicates forces exact ties
        let mut pts = Vec::new();
        for k in 0..6 {
            for j in 0..5 {
                for i in 0..4 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        pts.extend(pts.clone());
        let tree = KdTree::new(&pts);
        for q in [
            Vec3::new(0.5, 0.5, 0.5),
            Vec3::new(1.5, 2.0, 3.5),
            Vec3::new(-3.0, 7.0, 2.5),
            Vec3::new(2.0, 2.0, 2.0),
        ] {
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .fold((usize::MAX, f64::INFINITY), |b, c| {
                    if c.1 < b.1 || (c.1 == b.1 && c.0 < b.0) {
                        c
                    } else {
                        b
                    }
                });
            assert_eq!(tree.nearest(&q).unwrap(), brute, "query {q:?}");
        }
    }

    fn cloud() -> Vec<Vec3> {
        (0..40)
            .map(|i| {
                let t = i as f64;
                Vec3::new((t * 0.7).sin() * 10.0, (t * 1.3).cos() * 6.0, t * 0.4 - 8.0)
            })
            .collect()
    }

    #[test]
    fn kabsch_closed_forms() {
        let s = cloud();
        let id = kabsch(&s, &s).unwrap();
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);

        let shift = Vec3::new(5.0, -3.0, 2.0);
        let moved: Vec<Vec3> = s.iter().map(|p| p + shift).collect();
        let t = kabsch(&s, &moved).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!((t.translation - shift).norm() < 1e-9);

        let rz = RigidTransform::about(&Vec3::z(), 10f64.to_radians(), &Vec3::zeros(), Vec3::zeros());
        let rotated: Vec<Vec3> = s.iter().map(|p| rz.apply(p)).collect();
        let t = kabsch(&s, &rotated).unwrap();
        assert!((t.angle().to_degrees() - 10.0).abs() < 1e-6);
        assert!(t.is_proper());
    }

    #[test]
    fn kabsch_rejects_degenerate() {
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(kabsch(&line, &line), Err(Error::Degenerate(_))));
        assert!(kabsch(&line[..2], &line[..2]).is_err());
        assert!(kabsch(&line[..4], &line[..3]).is_err());
    }

    #[test]
    fn icp_on_itself_is_identity() {
        let c = SurfaceCloud::new(cloud()).unwrap();
        let r = icp_rigid(&c, &c, &IcpOptions::default()).unwrap();
        assert!(r.residual < 1e-9);
        assert!(r.transform.angle() < 1e-9);
        assert!(r.transform.translation.norm() < 1e-9);
    }

    fn vertebra_clouds() -> (SurfaceCloud, SurfaceCloud) {
        let spec = PhantomSpec {
            levels: (18..=22).collect(),
            ..PhantomSpec::with_seed(9)
        };
        let p = generate_healthy(&spec).unwrap();
        (
            extract_surface(&p.mask, 20).unwrap(),
            extract_surface(&p.mask, 21).unwrap(),
        )
    }

    #[test]
    fn icp_recovers_known_motion() {
        let (a, _) = vertebra_clouds();
        let c = a.centroid();
        let truth = RigidTransform::about(&Vec3::x(), 12f64.to_radians(), &c, Vec3::new(0.0, 8.0, 0.0));
        let target = a.transformed(&truth);
        let r = icp_rigid(&a, &target, &IcpOptions::default()).unwrap();
        let (ang, off) = transform_error(&r.transform, &truth, &c);
        assert!(ang < 1.0, "rotation error {ang}");
        assert!(off < 0.5, "translation error {off}");
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn icp_between_levels_has_positive_residual() {
        let (a, b) = vertebra_clouds();
        let r = icp_rigid(&a, &b, &IcpOptions::default()).unwrap();
        assert!(r.residual > 0.0);
        assert!(r.transform.is_proper());
    }

    #[test]
    fn icp_equivariance_for_small_perturbations() {
        let (a, _) = vertebra_clouds();
        let c = a.centroid();
        let target = a.transformed(&RigidTransform::about(
            &Vec3::new(0.3, 1.0, 0.2),
            6f64.to_radians(),
            &c,
            Vec3::new(2.0, -1.0, 3.0),
        ));
        let opts = IcpOptions::default();
        let base = icp_rigid(&a, &target, &opts).unwrap();
        let pert = RigidTransform::about(&Vec3::new(1.0, 0.0, 0.5), 1.5f64.to_radians(), &c, Vec3::new(1.0, 1.2, -0.8));
        let moved = icp_rigid(&a.transformed(&pert), &target, &opts).unwrap();
        let composed = moved.transform.compose(&pert);
        let (ang, off) = transform_error(&composed, &base.transform, &c);
        assert!(ang.to_radians() < 1e-3 && off < 1e-3, "{ang} deg {off} mm");
    }

    #[test]
    fn transform_rows_round_trip() {
        let t = RigidTransform::about(&Vec3::new(1.0, 2.0, 3.0), 0.3, &Vec3::new(4.0, 5.0, 6.0), Vec3::new(-1.0, 0.0, 2.0));
        let json = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let inv = t.inverse().compose(&t);
        assert!((inv.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(inv.translation.norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn kabsch_recovers_any_rigid_motion(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 4..60),
            axis in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            angle in -3.1f64..3.1,
            t in (-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0),
        ) {
            let src: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let c = src.iter().sum::<Vec3>() / src.len() as f64;
            let spread = src.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
            prop_assume!(spread > 1.0);
            // skip nearly collinear draws, where the fit is ill-conditioned
            let mut cov = Matrix3::zeros();
            for p in &src {
                cov += (p - c) * (p - c).transpose();
            }
            let ev = cov.symmetric_eigenvalues();
            let mut ev: Vec<f64> = ev.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            prop_assume!(ev[1] > 1e-3 * ev[2]);
            let ax = Vec3::new(axis.0, axis.1, axis.2);
            prop_assume!(ax.norm() > 0.1);
            let truth = RigidTransform::about(&ax, angle, &Vec3::zeros(), Vec3::new(t.0, t.1, t.2));
            let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
            let est = kabsch(&src, &dst).unwrap();
            prop_assert!(est.is_proper());
            prop_assert!(est.rotation_distance(&truth) < 1e-6);
            prop_assert!((est.translation - truth.translation).norm() < 1e-6);
        }
    }
}
