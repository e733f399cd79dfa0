//! Runs straightening, inpainting and reporting on a phantom and compares
//! the result with its pre-fracture twin.
//!
//!     cargo run --release --example full_pipeline

use std::collections::BTreeSet;

use spinewarp::atlas::build_atlas;
use spinewarp::phantom::{apply_fracture, generate_healthy, FractureSpec, PhantomSpec};
use spinewarp::pipeline::{compare_reference, run_pipeline, PipelineOptions, Reference};

fn main() -> spinewarp::Result<()> {
    let atlas = build_atlas(&generate_healthy(&PhantomSpec::with_seed(1000))?.mask)?;
    let spec = PhantomSpec {
        min_fov: [256.0, 128.0, 384.0],
        ..PhantomSpec::with_seed(9)
    };
    let healthy = generate_healthy(&spec)?;
    let f = apply_fracture(
        &healthy,
        &FractureSpec {
            level: 21,
            height_factor: 0.65,
            wedge: true,
            kink_deg: 8.0,
        },
    )?;
    let opts = PipelineOptions::default();
    let out = run_pipeline(&f.ct, &f.mask, &BTreeSet::from([21]), &atlas, &opts)?;
    let cmp = compare_reference(
        &out,
        &Reference {
            ct: &healthy.ct,
            mask: &healthy.mask,
        },
        &atlas,
        &opts,
    )?;
    print!("{}", out.report(Some(cmp.pre), cmp.metrics)?.to_text());
    Ok(())
}
