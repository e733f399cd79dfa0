//! Inpaints with and without straightening over a few phantoms and prints
//! the comparison table.
//!
//!     cargo run --release --example ablation

use std::collections::BTreeSet;

use spinewarp::analysis::{ablation_table, PreFracture};
use spinewarp::atlas::build_atlas;
use spinewarp::phantom::{apply_fracture, generate_healthy, FractureSpec, PhantomSpec};
use spinewarp::pipeline::{run_pipeline, PipelineOptions};

fn main() -> spinewarp::Result<()> {
    let atlas = build_atlas(&generate_healthy(&PhantomSpec::with_seed(1000))?.mask)?;
    for seed in 20..23 {
        let healthy = generate_healthy(&PhantomSpec::with_seed(seed))?;
        let code = 20 + (seed % 2) as u8;
        let f = apply_fracture(
            &healthy,
            &FractureSpec {
                level: code,
                height_factor: 0.55,
                wedge: true,
                kink_deg: 14.0,
            },
        )?;
        let fractured = BTreeSet::from([code]);
        let pre = PreFracture {
            volumes_ml: [(code, healthy.truth.volumes_ml[&code])].into(),
            ..Default::default()
        };
        let report = |ablation| -> spinewarp::Result<_> {
            let opts = PipelineOptions {
                ablation,
                ..Default::default()
            };
            run_pipeline(&f.ct, &f.mask, &fractured, &atlas, &opts)?.report(Some(pre.clone()), Default::default())
        };
        let table = ablation_table(&report(false)?, &report(true)?)?;
        println!("seed {seed}\n{}", table.to_text());
    }
    Ok(())
}
