//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only little-endian files with datatypes uint8, int16 and float32 are
//! supported, and the voxel-to-world affine must be axis aligned with positive
//! spacing. Gzip is detected from the stream magic, not the file name.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{DisplacementField, LabelVolume, ScalarVolume, Volume, VolumeGeometry};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const INTENT_VECTOR: i16 = 1007;
const XYZT_MM: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl NiftiData {
    pub fn datatype(&self) -> i16 {
        match self {
            NiftiData::U8(_) => DT_UINT8,
            NiftiData::I16(_) => DT_INT16,
            NiftiData::F32(_) => DT_FLOAT32,
        }
    }

    fn bitpix(&self) -> i16 {
        match self {
            NiftiData::U8(_) => 8,
            NiftiData::I16(_) => 16,
            NiftiData::F32(_) => 32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NiftiData::U8(v) => v.len(),
            NiftiData::I16(v) => v.len(),
            NiftiData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            NiftiData::U8(v) => v.clone(),
            NiftiData::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            NiftiData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(datatype: i16, bytes: &[u8]) -> Result<Self> {
        Ok(match datatype {
            DT_UINT8 => NiftiData::U8(bytes.to_vec()),
            DT_INT16 => NiftiData::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DT_FLOAT32 => NiftiData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            other => return Err(unsupported(other)),
        })
    }
}

fn unsupported(datatype: i16) -> Error {
    Error::Nifti(format!(
        "unsupported datatype code {datatype} (supported: 2 uint8, 4 int16, 16 float32)"
    ))
}

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    match datatype {
        DT_UINT8 => Ok(1),
        DT_INT16 => Ok(2),
        DT_FLOAT32 => Ok(4),
        other => Err(unsupported(other)),
    }
}

/// A 3D NIfTI image with its on-disk datatype preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub geometry: VolumeGeometry,
    pub data: NiftiData,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiVolume {
    pub fn new(geometry: VolumeGeometry, data: NiftiData) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match geometry ({} voxels)",
                data.len(),
                geometry.len()
            )));
        }
        Ok(Self {
            geometry,
            data,
            scl_slope: 1.0,
            scl_inter: 0.0,
        })
    }

    fn scaling(&self) -> Option<(f32, f32)> {
        let slope = if self.scl_slope == 0.0 { 1.0 } else { self.scl_slope };
        (slope != 1.0 || self.scl_inter != 0.0).then_some((slope, self.scl_inter))
    }

    /// Intensities with `scl_slope`/`scl_inter` applied.
    pub fn to_scalar(&self) -> Result<ScalarVolume> {
        let raw: Vec<f32> = match &self.data {
            NiftiData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            NiftiData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            NiftiData::F32(v) => v.clone(),
        };
        let data = match self.scaling() {
            Some((m, b)) => raw.into_iter().map(|x| x * m + b).collect(),
            None => raw,
        };
        Volume::new(self.geometry, data)
    }

    /// Integer label codes in `0..=255`.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        if self.scaling().is_some() {
            return Err(Error::Nifti("label images must not use intensity scaling".into()));
        }
        let bad = |v: f64| Error::Nifti(format!("value {v} is not a label code in 0..=255"));
        let data = match &self.data {
            NiftiData::U8(v) => v.clone(),
            NiftiData::I16(v) => v
                .iter()
                .map(|&x| u8::try_from(x).map_err(|_| bad(x as f64)))
                .collect::<Result<_>>()?,
            NiftiData::F32(v) => v
                .iter()
                .map(|&x| {
                    if x.fract() == 0.0 && (0.0..=255.0).contains(&x) {
                        Ok(x as u8)
                    } else {
                        Err(bad(x as f64))
                    }
                })
                .collect::<Result<_>>()?,
        };
        Volume::new(self.geometry, data)
    }
}

impl From<&ScalarVolume> for NiftiVolume {
    fn from(v: &ScalarVolume) -> Self {
        NiftiVolume {
            geometry: *v.geometry(),
            data: NiftiData::F32(v.data().to_vec()),
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }
}

impl From<&LabelVolume> for NiftiVolume {
    fn from(v: &LabelVolume) -> Self {
        NiftiVolume {
            geometry: *v.geometry(),
            data: NiftiData::U8(v.data().to_vec()),
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let (header, payload) = parse(&bytes)?;
    if header.dims[3..].iter().any(|&d| d > 1) {
        return Err(Error::Nifti(format!(
            "{}: only 3D volumes are supported, dim = {:?}",
            path.display(),
            header.dims
        )));
    }
    let data = NiftiData::from_le_bytes(header.datatype, payload)?;
    Ok(NiftiVolume {
        geometry: header.geometry,
        data,
        scl_slope: header.scl_slope,
        scl_inter: header.scl_inter,
    })
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    read_nifti(path)?.to_scalar()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_nifti(path)?.to_labels()
}

/// Writes a volume; a `.gz` suffix selects gzip compression.
pub fn write_nifti(vol: impl Into<NiftiVolume>, path: impl AsRef<Path>) -> Result<()> {
    let vol = vol.into();
    let header = Header {
        dims: [vol.geometry.dims()[0], vol.geometry.dims()[1], vol.geometry.dims()[2], 1, 1],
        datatype: vol.data.datatype(),
        bitpix: vol.data.bitpix(),
        geometry: vol.geometry,
        scl_slope: vol.scl_slope,
        scl_inter: vol.scl_inter,
        intent: 0,
    };
    let mut out = header.encode();
    out.extend(vol.data.to_le_bytes());
    write_maybe_gz(path.as_ref(), &out)
}

/// Writes a displacement field as a 3-component float32 vector image
/// (`dim[5] = 3`, intent VECTOR).
pub fn write_field_nifti(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let g = *field.geometry();
    let header = Header {
        dims: [g.dims()[0], g.dims()[1], g.dims()[2], 1, 3],
        datatype: DT_FLOAT32,
        bitpix: 32,
        geometry: g,
        scl_slope: 1.0,
        scl_inter: 0.0,
        intent: INTENT_VECTOR,
    };
    let mut out = header.encode();
    out.reserve(field.vectors().len() * 12);
    for c in 0..3 {
        for v in field.vectors() {
            out.extend((v[c] as f32).to_le_bytes());
        }
    }
    write_maybe_gz(path.as_ref(), &out)
}

pub fn read_field_nifti(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let bytes = read_maybe_gz(path.as_ref())?;
    let (header, payload) = parse(&bytes)?;
    if header.datatype != DT_FLOAT32 || header.dims[3] > 1 || header.dims[4] != 3 {
        return Err(Error::Nifti(
            "displacement fields must be float32 with dim[5] = 3".into(),
        ));
    }
    let n = header.geometry.len();
    let comp = |c: usize, i: usize| {
        let o = (c * n + i) * 4;
        f32::from_le_bytes([payload[o], payload[o + 1], payload[o + 2], payload[o + 3]]) as f64
    };
    let vectors = (0..n).map(|i| [comp(0, i), comp(1, i), comp(2, i)]).collect();
    DisplacementField::new(header.geometry, vectors)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Nifti(format!("{}: corrupt gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        // mtime stays 0 so output bytes are reproducible
        let mut enc = GzEncoder::new(&mut w, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Header {
    /// dim[1..=5]
    dims: [usize; 5],
    datatype: i16,
    bitpix: i16,
    geometry: VolumeGeometry,
    scl_slope: f32,
    scl_inter: f32,
    intent: i16,
}

fn put_i16(buf: &mut [u8], at: usize, v: i16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], at: usize, v: f32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([buf[at], buf[at + 1]])
}

fn get_f32(buf: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

impl Header {
    fn encode(&self) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        h[38] = b'r';
        let ndim = if self.dims[4] > 1 { 5 } else { 3 };
        put_i16(&mut h, 40, ndim);
        for (a, &d) in self.dims.iter().enumerate() {
            put_i16(&mut h, 42 + 2 * a, d as i16);
        }
        put_i16(&mut h, 52, 1);
        put_i16(&mut h, 54, 1);
        put_i16(&mut h, 68, self.intent);
        put_i16(&mut h, 70, self.datatype);
        put_i16(&mut h, 72, self.bitpix);
        let sp = self.geometry.spacing();
        let or = self.geometry.origin();
        // pixdim[0] = qfac
        put_f32(&mut h, 76, 1.0);
        for a in 0..3 {
            put_f32(&mut h, 80 + 4 * a, sp[a] as f32);
        }
        for a in 3..7 {
            put_f32(&mut h, 80 + 4 * a, 1.0);
        }
        put_f32(&mut h, 108, VOX_OFFSET as f32);
        put_f32(&mut h, 112, self.scl_slope);
        put_f32(&mut h, 116, self.scl_inter);
        h[123] = XYZT_MM;
        let descrip = b"spinewarp";
        h[148..148 + descrip.len()].copy_from_slice(descrip);
        // qform: identity rotation, offset = origin; sform: diagonal affine
        put_i16(&mut h, 252, 1);
        put_i16(&mut h, 254, 1);
        for a in 0..3 {
            put_f32(&mut h, 268 + 4 * a, or[a] as f32);
        }
        for row in 0..3 {
            let at = 280 + 16 * row;
            put_f32(&mut h, at + 4 * row, sp[row] as f32);
            put_f32(&mut h, at + 12, or[row] as f32);
        }
        h[344..348].copy_from_slice(MAGIC);
        h
    }
}

fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "truncated header: {} bytes, need {HEADER_SIZE}",
            bytes.len()
        )));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == HEADER_SIZE as i32 {
            return Err(Error::Nifti("big-endian files are not supported".into()));
        }
        return Err(Error::Nifti(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::Nifti(format!(
            "bad magic {:?}, expected single-file \"n+1\"",
            &bytes[344..348]
        )));
    }
    let ndim = get_i16(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 5];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(5) as usize) {
        let v = get_i16(bytes, 42 + 2 * a);
        if v < 1 {
            return Err(Error::Nifti(format!("dim[{}] = {v} must be >= 1", a + 1)));
        }
        *d = v as usize;
    }
    for a in 5..ndim as usize {
        if get_i16(bytes, 42 + 2 * a) > 1 {
            return Err(Error::Nifti("more than 5 dimensions are not supported".into()));
        }
    }
    let datatype = get_i16(bytes, 70);
    let bpv = bytes_per_voxel(datatype)?;
    let geometry = parse_geometry(bytes, [dims[0], dims[1], dims[2]])?;
    let vox_offset = get_f32(bytes, 108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Nifti(format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let count = dims.iter().product::<usize>();
    let end = start + count * bpv;
    if bytes.len() < end {
        return Err(Error::Nifti(format!(
            "truncated data: file has {} bytes, header requires {end}",
            bytes.len()
        )));
    }
    let header = Header {
        dims,
        datatype,
        bitpix: get_i16(bytes, 72),
        geometry,
        scl_slope: get_f32(bytes, 112),
        scl_inter: get_f32(bytes, 116),
        intent: get_i16(bytes, 68),
    };
    Ok((header, &bytes[start..end]))
}

fn parse_geometry(h: &[u8], dims: [usize; 3]) -> Result<VolumeGeometry> {
    let qform = get_i16(h, 252);
    let sform = get_i16(h, 254);
    let pixdim = [get_f32(h, 80), get_f32(h, 84), get_f32(h, 88)];
    let (spacing, origin) = if sform > 0 {
        let mut spacing = [0.0f64; 3];
        let mut origin = [0.0f64; 3];
        for row in 0..3 {
            let at = 280 + 16 * row;
            for col in 0..3 {
                let v = get_f32(h, at + 4 * col);
                if col != row && v != 0.0 {
                    return Err(Error::Nifti(
                        "sform has rotation or shear; only axis-aligned affines are supported"
                            .into(),
                    ));
                }
            }
            spacing[row] = get_f32(h, at + 4 * row) as f64;
            origin[row] = get_f32(h, at + 12) as f64;
        }
        (spacing, origin)
    } else if qform > 0 {
        let quat = [get_f32(h, 256), get_f32(h, 260), get_f32(h, 264)];
        let qfac = get_f32(h, 76);
        if quat.iter().any(|&q| q != 0.0) || qfac < 0.0 {
            return Err(Error::Nifti(
                "qform has rotation or flip; only axis-aligned affines are supported".into(),
            ));
        }
        (
            pixdim.map(|p| p as f64),
            [get_f32(h, 268) as f64, get_f32(h, 272) as f64, get_f32(h, 276) as f64],
        )
    } else {
        (pixdim.map(|p| p as f64), [0.0; 3])
    };
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Nifti(format!(
            "spacing {spacing:?} must be positive (flipped axes are not supported)"
        )));
    }
    VolumeGeometry::new(dims, spacing, origin).map_err(|e| Error::Nifti(e.to_string()))
}
