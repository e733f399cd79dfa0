//! Voxel grids, interpolation and backward warping.
//!
//! Voxel `(i, j, k)` has its center at `origin + (i, j, k) ⊙ spacing` in world
//! millimeters. Data is stored with `i` varying fastest, which matches the
//! on-disk NIfTI order.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Fill value for scalar samples that fall outside the grid (air).
pub const AIR_HU: f32 = -1000.0;

/// Snap tolerance (in voxels) for continuous indices that land on a voxel center.
const SNAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("origin must be finite, got {origin:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Geometry(format!("dims {dims:?} overflow")))?;
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Smallest grid with the given spacing whose voxel centers cover `[min, max]`.
    pub fn enclosing(min: Vec3, max: Vec3, spacing: [f64; 3]) -> Result<Self> {
        let mut dims = [1usize; 3];
        for a in 0..3 {
            let extent = (max[a] - min[a]).max(0.0);
            dims[a] = (extent / spacing[a]).ceil() as usize + 1;
        }
        Self::new(dims, spacing, [min.x, min.y, min.z])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn world(&self, ijk: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + ijk[0] as f64 * self.spacing[0],
            self.origin[1] + ijk[1] as f64 * self.spacing[1],
            self.origin[2] + ijk[2] as f64 * self.spacing[2],
        )
    }

    #[inline]
    pub fn world_of_index(&self, idx: usize) -> Vec3 {
        self.world(self.coords(idx))
    }

    /// Continuous voxel coordinates of a world position.
    #[inline]
    pub fn to_voxel(&self, p: &Vec3) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World coordinates of the first and last voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        (
            self.world([0, 0, 0]),
            self.world([self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1]),
        )
    }

    /// Voxel index box `[lo, hi]` (inclusive) covering a world box, clamped to the grid.
    /// Returns `None` when the box misses the grid entirely.
    pub fn index_box(&self, min: &Vec3, max: &Vec3) -> Option<([usize; 3], [usize; 3])> {
        let a = self.to_voxel(min);
        let b = self.to_voxel(max);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for ax in 0..3 {
            let l = a[ax].min(b[ax]).ceil();
            let h = a[ax].max(b[ax]).floor();
            let n = self.dims[ax] as f64;
            if h < 0.0 || l > n - 1.0 || l > h {
                return None;
            }
            lo[ax] = l.max(0.0) as usize;
            hi[ax] = h.min(n - 1.0) as usize;
        }
        Some((lo, hi))
    }

    pub(crate) fn ensure_same(&self, other: &VolumeGeometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {self:?} vs {other:?}"
            )))
        }
    }
}

/// Element types that can live in a [`Volume`].
pub trait Voxel: Copy + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    fn is_valid(&self) -> bool {
        true
    }
}

impl Voxel for f32 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}
impl Voxel for u8 {}
impl Voxel for bool {}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Voxel> {
    geometry: VolumeGeometry,
    data: Vec<T>,
}

/// CT intensities in HU.
pub type ScalarVolume = Volume<f32>;
/// Vertebra label codes; 0 is background.
pub type LabelVolume = Volume<u8>;

impl<T: Voxel> Volume<T> {
    pub fn new(geometry: VolumeGeometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match geometry ({} voxels)",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::InvalidInput(format!(
                "invalid voxel value {:?} at index {bad}",
                data[bad]
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: VolumeGeometry, value: T) -> Self {
        Self {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    /// Builds a volume by evaluating `f` at every voxel (in parallel).
    pub fn from_fn<F>(geometry: VolumeGeometry, f: F) -> Self
    where
        F: Fn([usize; 3]) -> T + Sync,
    {
        let data = (0..geometry.len())
            .into_par_iter()
            .map(|idx| f(geometry.coords(idx)))
            .collect();
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, ijk: [usize; 3]) -> T {
        self.data[self.geometry.index(ijk[0], ijk[1], ijk[2])]
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U + Sync) -> Volume<U> {
        Volume {
            geometry: self.geometry,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }
}

impl LabelVolume {
    /// Sorted list of nonzero codes present.
    pub fn codes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count(&self, code: u8) -> usize {
        self.data.iter().filter(|&&v| v == code).count()
    }

    pub fn contains_code(&self, code: u8) -> bool {
        self.data.contains(&code)
    }

    /// Binary indicator of one code.
    pub fn indicator(&self, code: u8) -> Volume<bool> {
        self.map(|v| v == code)
    }

    /// Voxel-center mean of every nonzero code.
    pub fn centroids(&self) -> BTreeMap<u8, Vec3> {
        let mut acc: BTreeMap<u8, ([f64; 3], usize)> = BTreeMap::new();
        let [nx, ny, nz] = self.geometry.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = self.data[self.geometry.index(i, j, k)];
                    if v != 0 {
                        let e = acc.entry(v).or_insert(([0.0; 3], 0));
                        e.0[0] += i as f64;
                        e.0[1] += j as f64;
                        e.0[2] += k as f64;
                        e.1 += 1;
                    }
                }
            }
        }
        let g = &self.geometry;
        acc.into_iter()
            .map(|(code, (s, n))| {
                let n = n as f64;
                let c = Vec3::new(
                    g.origin[0] + s[0] / n * g.spacing[0],
                    g.origin[1] + s[1] / n * g.spacing[1],
                    g.origin[2] + s[2] / n * g.spacing[2],
                );
                (code, c)
            })
            .collect()
    }
}

/// Volume of one label in mL. Absent codes give 0.
pub fn volume_of_label(mask: &LabelVolume, code: u8) -> f64 {
    mask.count(code) as f64 * mask.geometry.voxel_volume() / 1000.0
}

fn check_finite(p: &Vec3) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite([p.x, p.y, p.z]))
    }
}

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

/// Trilinear sample with the default air fill.
pub fn sample_trilinear(vol: &ScalarVolume, p: &Vec3) -> Result<f64> {
    sample_trilinear_with_fill(vol, p, AIR_HU)
}

pub fn sample_trilinear_with_fill(vol: &ScalarVolume, p: &Vec3, fill: f32) -> Result<f64> {
    check_finite(p)?;
    Ok(trilinear(&vol.geometry, &vol.data, p, fill))
}

#[inline]
pub(crate) fn trilinear(g: &VolumeGeometry, data: &[f32], p: &Vec3, fill: f32) -> f64 {
    let c = g.to_voxel(p);
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let x = snap(c[a]);
        let n = g.dims[a];
        if !(x >= 0.0 && x <= (n - 1) as f64) {
            return fill as f64;
        }
        let f = x.floor();
        base[a] = f as usize;
        frac[a] = x - f;
    }
    let mut acc = 0.0f64;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 {
                    continue;
                }
                let v = data[g.index(base[0] + dx, base[1] + dy, base[2] + dz)];
                acc += wx * wy * wz * v as f64;
            }
        }
    }
    acc
}

/// Nearest-neighbor label lookup; outside the grid gives background.
pub fn sample_nearest(vol: &LabelVolume, p: &Vec3) -> Result<u8> {
    check_finite(p)?;
    Ok(nearest(&vol.geometry, &vol.data, p).unwrap_or(0))
}

#[inline]
pub(crate) fn nearest<T: Copy>(g: &VolumeGeometry, data: &[T], p: &Vec3) -> Option<T> {
    let c = g.to_voxel(p);
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        let r = c[a].round();
        if !(r >= 0.0 && r <= (g.dims[a] - 1) as f64) {
            return None;
        }
        ijk[a] = r as usize;
    }
    Some(data[g.index(ijk[0], ijk[1], ijk[2])])
}

/// Per-voxel backward displacement: output voxel `p` samples input world
/// position `world(p) + vectors[p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    geometry: VolumeGeometry,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(geometry: VolumeGeometry, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != geometry.len() {
            return Err(Error::InvalidInput(format!(
                "field length {} does not match geometry ({} voxels)",
                vectors.len(),
                geometry.len()
            )));
        }
        if vectors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("field has non-finite components".into()));
        }
        Ok(Self { geometry, vectors })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        Self::constant(geometry, [0.0; 3])
    }

    pub fn constant(geometry: VolumeGeometry, v: [f64; 3]) -> Self {
        Self {
            vectors: vec![v; geometry.len()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.vectors
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Vec3 {
        let v = self.vectors[idx];
        Vec3::new(v[0], v[1], v[2])
    }

    /// Input-space sample position for output voxel `idx`.
    #[inline]
    pub fn target(&self, idx: usize) -> Vec3 {
        self.geometry.world_of_index(idx) + self.get(idx)
    }
}

/// Resampling of a volume through a backward displacement field.
pub trait Warp: Sized {
    fn warp(&self, field: &DisplacementField) -> Result<Self>;
}

impl Warp for ScalarVolume {
    fn warp(&self, field: &DisplacementField) -> Result<Self> {
        warp_scalar_with_fill(self, field, AIR_HU)
    }
}

impl Warp for LabelVolume {
    fn warp(&self, field: &DisplacementField) -> Result<Self> {
        let g = self.geometry;
        let data = (0..field.geometry.len())
            .into_par_iter()
            .map(|idx| nearest(&g, &self.data, &field.target(idx)).unwrap_or(0))
            .collect();
        Ok(Volume {
            geometry: field.geometry,
            data,
        })
    }
}

/// `output(p) = sample(vol, world(p) + field(p))`, trilinear for scalars and
/// nearest for labels.
pub fn warp<V: Warp>(vol: &V, field: &DisplacementField) -> Result<V> {
    vol.warp(field)
}

pub fn warp_scalar_with_fill(
    vol: &ScalarVolume,
    field: &DisplacementField,
    fill: f32,
) -> Result<ScalarVolume> {
    let g = vol.geometry;
    let data = (0..field.geometry.len())
        .into_par_iter()
        .map(|idx| trilinear(&g, &vol.data, &field.target(idx), fill) as f32)
        .collect();
    Ok(Volume {
        geometry: field.geometry,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Projects along x; the image spans (y, z).
    Sagittal,
    /// Projects along y; the image spans (x, z).
    Coronal,
    /// Projects along z; the image spans (x, y).
    Axial,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
            Axis::Axial => "axial",
        }
    }
}

/// Row-major 2D image; `(col, row)` index the two remaining volume axes in
/// increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image2D {
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// Maximum intensity projection.
pub fn mip(vol: &ScalarVolume, axis: Axis) -> Image2D {
    let g = &vol.geometry;
    let [nx, ny, nz] = g.dims;
    let (width, height, depth) = match axis {
        Axis::Sagittal => (ny, nz, nx),
        Axis::Coronal => (nx, nz, ny),
        Axis::Axial => (nx, ny, nz),
    };
    let data = (0..width * height)
        .into_par_iter()
        .map(|px| {
            let (c, r) = (px % width, px / width);
            (0..depth)
                .map(|t| {
                    let (i, j, k) = match axis {
                        Axis::Sagittal => (t, c, r),
                        Axis::Coronal => (c, t, r),
                        Axis::Axial => (c, r, t),
                    };
                    vol.data[g.index(i, j, k)]
                })
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect();
    Image2D {
        width,
        height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> VolumeGeometry {
        VolumeGeometry::new(dims, spacing, origin).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(VolumeGeometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(VolumeGeometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(VolumeGeometry::new([1, 1, 1], [1.0, -2.0, 1.0], [0.0; 3]).is_err());
        assert!(VolumeGeometry::new([1, 1, 1], [1.0; 3], [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn world_and_voxel_are_inverse() {
        let g = geom([4, 5, 6], [0.5, 1.25, 2.0], [-10.0, 3.0, 7.5]);
        for idx in 0..g.len() {
            let c = g.to_voxel(&g.world_of_index(idx));
            let ijk = g.coords(idx);
            for a in 0..3 {
                assert!((c[a] - ijk[a] as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_at_center_and_midpoint() {
        let g = geom([2, 1, 1], [1.0; 3], [0.0; 3]);
        let v = Volume::new(g, vec![0.0f32, 100.0]).unwrap();
        assert_eq!(sample_trilinear(&v, &Vec3::new(1.0, 0.0, 0.0)).unwrap(), 100.0);
        assert_eq!(sample_trilinear(&v, &Vec3::new(0.5, 0.0, 0.0)).unwrap(), 50.0);
        assert_eq!(sample_trilinear(&v, &Vec3::new(5.0, 0.0, 0.0)).unwrap(), -1000.0);
        assert_eq!(
            sample_trilinear_with_fill(&v, &Vec3::new(-0.1, 0.0, 0.0), 7.0).unwrap(),
            7.0
        );
        assert!(sample_trilinear(&v, &Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn nearest_rule() {
        let g = geom([2, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]);
        let v = Volume::new(g, vec![3u8, 5]).unwrap();
        assert_eq!(sample_nearest(&v, &Vec3::new(2.0, 0.0, 0.0)).unwrap(), 5);
        // 0.4 spacing from voxel 0, 0.6 from voxel 1
        assert_eq!(sample_nearest(&v, &Vec3::new(0.8, 0.0, 0.0)).unwrap(), 3);
        assert_eq!(sample_nearest(&v, &Vec3::new(9.0, 0.0, 0.0)).unwrap(), 0);
        assert!(sample_nearest(&v, &Vec3::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn zero_field_is_identity() {
        let g = geom([5, 4, 3], [0.7, 1.1, 2.3], [-12.3, 4.56, 100.1]);
        let ct = Volume::from_fn(g, |[i, j, k]| (i * 7 + j * 13 + k * 29) as f32 * 1.37 - 40.0);
        let labels = Volume::from_fn(g, |[i, j, k]| ((i + j + k) % 4) as u8);
        let f = DisplacementField::zeros(g);
        assert_eq!(warp(&ct, &f).unwrap(), ct);
        assert_eq!(warp(&labels, &f).unwrap(), labels);
    }

    #[test]
    fn constant_field_shifts_by_one_voxel() {
        let g = geom([4, 4, 4], [1.5, 1.0, 1.0], [0.0; 3]);
        let ct = Volume::from_fn(g, |[i, j, k]| (i + 4 * j + 16 * k) as f32);
        let f = DisplacementField::constant(g, [1.5, 0.0, 0.0]);
        let out = warp(&ct, &f).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let expected = if i == 3 {
                        AIR_HU
                    } else {
                        ct.get([i + 1, j, k])
                    };
                    assert_eq!(out.get([i, j, k]), expected);
                }
            }
        }
    }

    #[test]
    fn mip_of_small_volume() {
        let g = geom([2, 2, 2], [1.0; 3], [0.0; 3]);
        // value = i + 2j + 4k, values 0..7
        let v = Volume::from_fn(g, |[i, j, k]| (i + 2 * j + 4 * k) as f32);
        let sag = mip(&v, Axis::Sagittal);
        assert_eq!((sag.width, sag.height), (2, 2));
        // max over i of (i + 2j + 4k) = 1 + 2j + 4k
        assert_eq!(sag.data, vec![1.0, 3.0, 5.0, 7.0]);
        let cor = mip(&v, Axis::Coronal);
        assert_eq!(cor.data, vec![2.0, 3.0, 6.0, 7.0]);
        let ax = mip(&v, Axis::Axial);
        assert_eq!(ax.data, vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn mip_constant_and_single_voxel() {
        let g = geom([3, 4, 5], [1.0; 3], [0.0; 3]);
        let c = Volume::filled(g, 12.0f32);
        assert!(mip(&c, Axis::Coronal).data.iter().all(|&v| v == 12.0));
        let mut d = Volume::filled(g, 0.0f32);
        let idx = g.index(1, 2, 3);
        d.data_mut()[idx] = 9.0;
        let img = mip(&d, Axis::Sagittal);
        for r in 0..img.height {
            for c in 0..img.width {
                let expected = if (c, r) == (2, 3) { 9.0 } else { 0.0 };
                assert_eq!(img.get(c, r), expected);
            }
        }
    }

    #[test]
    fn label_volume_units() {
        let g = geom([10, 10, 10], [1.0; 3], [0.0; 3]);
        let m = Volume::filled(g, 3u8);
        assert_eq!(volume_of_label(&m, 3), 1.0);
        assert_eq!(volume_of_label(&m, 4), 0.0);
        assert_eq!(volume_of_label(&Volume::filled(g, 0u8), 3), 0.0);
    }

    #[test]
    fn rasterized_ellipsoid_volume() {
        let g = geom([51, 41, 31], [1.0; 3], [-25.0, -20.0, -15.0]);
        let m = Volume::from_fn(g, |ijk| {
            let p = g.world(ijk);
            let r = (p.x / 20.0).powi(2) + (p.y / 15.0).powi(2) + (p.z / 10.0).powi(2);
            u8::from(r <= 1.0)
        });
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 20.0 * 15.0 * 10.0 / 1000.0;
        let measured = volume_of_label(&m, 1);
        assert!((measured / analytic - 1.0).abs() < 0.02, "{measured} vs {analytic}");
    }

    #[test]
    fn centroids_are_voxel_means() {
        let g = geom([4, 1, 1], [2.0, 1.0, 1.0], [10.0, 0.0, 0.0]);
        let m = Volume::new(g, vec![1u8, 1, 0, 2]).unwrap();
        let c = m.centroids();
        assert_eq!(c[&1], Vec3::new(11.0, 0.0, 0.0));
        assert_eq!(c[&2], Vec3::new(16.0, 0.0, 0.0));
        assert_eq!(m.codes(), vec![1, 2]);
    }

    proptest! {
        // Integer coefficients on a power-of-two lattice keep the stored f32
        // samples exact, so only the interpolation itself is under test.
        #[test]
        fn trilinear_exact_on_affine_functions(
            a in -50i32..50, b in -5i32..5, c in -5i32..5, d in -5i32..5,
            sx in 0usize..3, sz in 0usize..3,
            px in 0.0f64..1.0, py in 0.0f64..1.0, pz in 0.0f64..1.0,
        ) {
            let pow = [0.5, 1.0, 2.0];
            let g = geom([6, 5, 4], [pow[sx], 1.0, pow[sz]], [1.5, -2.0, 3.0]);
            let f = |p: Vec3| a as f64 + b as f64 * p.x + c as f64 * p.y + d as f64 * p.z;
            let data: Vec<f32> = (0..g.len()).map(|i| f(g.world_of_index(i)) as f32).collect();
            let vol = Volume::new(g, data).unwrap();
            let (lo, hi) = g.bounds();
            let p = Vec3::new(
                lo.x + px * (hi.x - lo.x),
                lo.y + py * (hi.y - lo.y),
                lo.z + pz * (hi.z - lo.z),
            );
            let got = sample_trilinear(&vol, &p).unwrap();
            let want = f(p);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
        }
    }
}
