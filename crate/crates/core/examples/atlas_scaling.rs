//! Builds an atlas from one phantom and scales it to a larger patient.
//!
//!     cargo run --release --example atlas_scaling

use std::collections::BTreeSet;

use spinewarp::atlas::{build_atlas, centroid_chain_length, compute_scale, scale_atlas};
use spinewarp::labels;
use spinewarp::phantom::{generate_healthy, PhantomSpec};

fn main() -> spinewarp::Result<()> {
    let atlas = build_atlas(&generate_healthy(&PhantomSpec::with_seed(1000))?.mask)?;
    let patient = generate_healthy(&PhantomSpec::with_seed(3).scaled(1.12))?;
    let centroids = patient.mask.centroids();

    // the fractured level is left out of the chain on both sides
    let fractured = BTreeSet::from([labels::parse("L1")?]);
    let chain: Vec<_> = centroids.iter().map(|(c, p)| (*c, *p)).collect();
    println!("patient chain {:.2} mm", centroid_chain_length(&chain, &BTreeSet::new())?);
    println!("without L1    {:.2} mm", centroid_chain_length(&chain, &fractured)?);

    let s = compute_scale(&centroids, &atlas, &fractured)?;
    let scaled = scale_atlas(&atlas, s)?;
    println!("scale {s:.4} (patient was built 1.12x larger)");
    for v in scaled.vertebrae() {
        println!(
            "{:>4}  atlas {:6.2} mL -> scaled {:6.2} mL",
            labels::display(v.code),
            atlas.get(v.code).unwrap().volume_ml(),
            v.volume_ml()
        );
    }
    Ok(())
}
