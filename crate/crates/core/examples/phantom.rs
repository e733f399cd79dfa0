//! Generates a healthy spine phantom, fractures L2 and writes both to disk.
//!
//!     cargo run --release --example phantom -- /tmp/phantom

use std::path::PathBuf;

use spinewarp::labels;
use spinewarp::nifti::write_nifti;
use spinewarp::phantom::{apply_fracture, generate_healthy, FractureSpec, PhantomSpec, TruthDocument};

fn main() -> spinewarp::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "phantom_out".into()));
    std::fs::create_dir_all(&out).map_err(|e| spinewarp::Error::InvalidInput(e.to_string()))?;

    let spec = PhantomSpec::with_seed(7);
    let healthy = generate_healthy(&spec)?;
    let fracture = FractureSpec {
        level: labels::parse("L2")?,
        height_factor: 0.6,
        wedge: true,
        kink_deg: 10.0,
    };
    let fractured = apply_fracture(&healthy, &fracture)?;

    println!("grid {:?} at {:?} mm", healthy.ct.geometry().dims(), healthy.ct.geometry().spacing());
    for (code, ml) in &fractured.truth.volumes_ml {
        let before = fractured.truth.healthy_volumes_ml[code];
        println!("{:>4}  healthy {before:6.2} mL  now {ml:6.2} mL", labels::display(*code));
    }
    for d in &fractured.truth.distances {
        println!("{}-{}: {:.2} mm", labels::display(d.upper), labels::display(d.lower), d.mm);
    }

    write_nifti(&healthy.ct, out.join("healthy_ct.nii.gz"))?;
    write_nifti(&healthy.mask, out.join("healthy_mask.nii.gz"))?;
    write_nifti(&fractured.ct, out.join("fractured_ct.nii.gz"))?;
    write_nifti(&fractured.mask, out.join("fractured_mask.nii.gz"))?;
    TruthDocument::from_truth(&spec.levels, &fractured.truth).write(&out.join("truth.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}
