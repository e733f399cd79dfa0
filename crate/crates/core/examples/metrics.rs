//! Overlap and image-similarity metrics on small synthetic volumes.
//!
//!     cargo run --release --example metrics

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinewarp::analysis::{dice, iou, psnr, ssim, Psnr};
use spinewarp::{Volume, VolumeGeometry};

fn main() -> spinewarp::Result<()> {
    let g = VolumeGeometry::new([24, 24, 24], [1.0; 3], [0.0; 3])?;
    let ball = |r: f64, cx: f64| Volume::from_fn(g, move |[i, j, k]| {
        let (x, y, z) = (i as f64 - cx, j as f64 - 12.0, k as f64 - 12.0);
        x * x + y * y + z * z <= r * r
    });
    let (a, b) = (ball(7.0, 11.0), ball(7.0, 13.0));
    println!("shifted balls: dice {:.4}, iou {:.4}", dice(&a, &b)?, iou(&a, &b)?);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = a.map(|inside| if inside { 300.0f32 } else { 0.0 });
    let noisy = Volume::new(g, x.data().iter().map(|v| v + rng.random_range(-30.0..30.0)).collect())?;
    println!("ssim(x, x) {:.4}", ssim(&x, &x, None)?);
    println!("ssim(x, noisy) {:.4}", ssim(&x, &noisy, None)?);
    match psnr(&x, &noisy, None)? {
        Psnr::Finite(db) => println!("psnr {db:.2} dB"),
        Psnr::Identical => println!("psnr: identical"),
    }
    Ok(())
}
