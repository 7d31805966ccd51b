//! Motion-correlated noise: blends each frame's noise with the warped noise
//! of the previous frame and measures how much of it follows the motion.
//!
//! cargo run --release --example correlated_noise

use ndarray::Axis;

use flowrect::optical_flow::{estimate_flow, warp_noise};
use flowrect::rng::gaussian_noise;
use flowrect::smpi::correlated_noise;
use flowrect::train::data::{SyntheticDataset, SyntheticDatasetSpec};

fn corr(a: impl Iterator<Item = (f32, f32)>) -> (f64, f64) {
    // (variance of the first, correlation of the two)
    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in a {
        let (x, y) = (x as f64, y as f64);
        n += 1.0;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let vx = sxx / n - (sx / n).powi(2);
    let vy = syy / n - (sy / n).powi(2);
    (vx, (sxy / n - sx * sy / (n * n)) / (vx * vy).sqrt())
}

fn main() -> flowrect::Result<()> {
    let spec = SyntheticDatasetSpec {
        size: 64,
        radius: 12,
        ..SyntheticDatasetSpec::default()
    };
    let clip = &SyntheticDataset::generate(&spec, 1, 5)?.clips[0];
    let flow = estimate_flow(&clip.frames)?;
    let eps = gaussian_noise(clip.frames.shape(), 0)?;
    println!("clip velocity ({}, {})", clip.params.vx, clip.params.vy);
    println!("{:>6} {:>10} {:>22}", "alpha", "variance", "corr with warped prev");
    for alpha in [0.0, 0.5, 0.95, 1.0] {
        let m = correlated_noise(&eps, &flow, alpha, false)?;
        let (mut var, mut c) = (0.0, 0.0);
        for i in 1..m.eps.len_of(Axis(0)) {
            let warped = warp_noise(&eps.eps.index_axis(Axis(0), i - 1), &flow.pair(i - 1))?;
            let cur = m.eps.index_axis(Axis(0), i);
            let (v, r) = corr(cur.iter().copied().zip(warped.iter().copied()));
            var += v;
            c += r;
        }
        let pairs = (m.eps.len_of(Axis(0)) - 1) as f64;
        println!("{alpha:>6} {:>10.4} {:>22.4}", var / pairs, c / pairs);
    }
    Ok(())
}
