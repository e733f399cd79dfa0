//! Writes and reads back NIfTI volumes, including a displacement field.
//!
//!     cargo run --release --example nifti_io -- /tmp/nifti

use std::path::PathBuf;

use spinewarp::nifti::{read_field_nifti, read_labels, read_nifti, read_scalar, write_field_nifti, write_nifti};
use spinewarp::phantom::{generate_healthy, PhantomSpec};
use spinewarp::DisplacementField;

fn main() -> spinewarp::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "nifti_out".into()));
    std::fs::create_dir_all(&dir).map_err(|e| spinewarp::Error::InvalidInput(e.to_string()))?;
    let p = generate_healthy(&PhantomSpec::with_seed(0))?;

    write_nifti(&p.ct, dir.join("ct.nii.gz"))?;
    write_nifti(&p.mask, dir.join("mask.nii"))?;
    assert_eq!(read_scalar(dir.join("ct.nii.gz"))?, p.ct);
    assert_eq!(read_labels(dir.join("mask.nii"))?, p.mask);
    let raw = read_nifti(dir.join("mask.nii"))?;
    println!("mask datatype {} with {} voxels", raw.data.datatype(), raw.data.len());

    let field = DisplacementField::constant(*p.ct.geometry(), [0.5, -1.0, 2.0]);
    write_field_nifti(&field, dir.join("field.nii.gz"))?;
    assert_eq!(read_field_nifti(dir.join("field.nii.gz"))?, field);
    println!("round trips are exact; files in {}", dir.display());
    Ok(())
}
