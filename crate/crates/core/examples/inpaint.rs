//! Replaces a collapsed vertebra with a healthy estimate and reports the
//! cement upper bound.
//!
//!     cargo run --release --example inpaint

use std::collections::BTreeSet;

use spinewarp::analysis::cement_upper_bound;
use spinewarp::atlas::build_atlas;
use spinewarp::inpaint::{inpaint_vertebra, InpaintOptions, FUSION_THRESHOLD};
use spinewarp::phantom::{apply_fracture, generate_healthy, FractureSpec, PhantomSpec};
use spinewarp::straighten::{straighten_spine, StraightenOptions};
use spinewarp::volume::volume_of_label;

fn main() -> spinewarp::Result<()> {
    let atlas = build_atlas(&generate_healthy(&PhantomSpec::with_seed(1000))?.mask)?;
    let healthy = generate_healthy(&PhantomSpec::with_seed(2))?;
    let code = 20;
    let f = apply_fracture(&healthy, &FractureSpec::new(code, 0.6))?;
    let s = straighten_spine(&f.ct, &f.mask, &BTreeSet::from([code]), &atlas, &StraightenOptions::default())?;
    let r = inpaint_vertebra(&s.ct, &s.mask, code, &s.scaled_atlas, &InpaintOptions::default())?;

    println!("ROI {:.2} mL, gap {:.2} mm", r.roi.volume_ml(), r.roi.gap_mm);
    for (name, c) in ["atlas", "neighbours"].iter().zip(&r.candidates) {
        println!("  {name:10} candidate {:6.2} mL", c.volume_ml(FUSION_THRESHOLD));
    }
    let fractured_ml = volume_of_label(&f.mask, code);
    let truth = f.truth.healthy_volumes_ml[&code];
    println!("healthy {truth:.2} mL, fractured {fractured_ml:.2} mL, inpainted {:.2} mL", r.volume_ml());
    let cement = cement_upper_bound(r.volume_ml(), fractured_ml)?;
    println!("cement upper bound {:.2} mL{}", cement.ml, if cement.clamped { " (clamped)" } else { "" });
    Ok(())
}
