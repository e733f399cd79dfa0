//! Recovers a known rigid motion of one vertebra surface with ICP.
//!
//!     cargo run --release --example rigid_registration

use spinewarp::phantom::{generate_healthy, PhantomSpec};
use spinewarp::registration::{extract_surface, icp_rigid, transform_error, IcpOptions, RigidTransform};
use spinewarp::Vec3;

fn main() -> spinewarp::Result<()> {
    let p = generate_healthy(&PhantomSpec::with_seed(11))?;
    let code = 21;
    let source = extract_surface(&p.mask, code)?;
    let truth = RigidTransform::about(
        &Vec3::new(0.3, 1.0, 0.2).normalize(),
        12f64.to_radians(),
        &source.centroid(),
        Vec3::new(4.0, -6.0, 3.0),
    );
    let target = source.transformed(&truth);
    let r = icp_rigid(&source, &target, &IcpOptions::default())?;
    let (deg, mm) = transform_error(&r.transform, &truth, &source.centroid());
    println!("{} surface points, {} iterations", source.len(), r.iterations);
    println!("rms residual {:.2e} mm", r.residual);
    println!("error {deg:.4} deg, {mm:.4} mm");
    Ok(())
}
