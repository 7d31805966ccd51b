//! Estimates optical flow on synthetic clips and compares it with the
//! ground truth on the moving shape.
//!
//! cargo run --release --example flow_estimation

use flowrect::optical_flow::estimate_flow;
use flowrect::train::data::{SyntheticDataset, SyntheticDatasetSpec};

fn main() -> flowrect::Result<()> {
    let spec = SyntheticDatasetSpec {
        size: 32,
        radius: 5,
        ..SyntheticDatasetSpec::default()
    };
    let ds = SyntheticDataset::generate(&spec, 6, 2)?;
    for clip in &ds.clips {
        let truth = clip.flow.as_ref().expect("multi-frame clip");
        let est = estimate_flow(&clip.frames)?;
        // endpoint error where the next frame shows the shape
        let (mut err, mut n) = (0.0f64, 0usize);
        for i in 0..est.pairs() {
            let next = clip.frames.frame(i + 1);
            let (t, e) = (truth.pair(i), est.pair(i));
            for y in 0..est.height() {
                for x in 0..est.width() {
                    if (next[[0, y, x]] - spec.background).abs() < 1e-6 {
                        continue;
                    }
                    let dx = t[[0, y, x]] - e[[0, y, x]];
                    let dy = t[[1, y, x]] - e[[1, y, x]];
                    err += ((dx * dx + dy * dy) as f64).sqrt();
                    n += 1;
                }
            }
        }
        let p = &clip.params;
        println!(
            "{:?} {:?} velocity ({:>2}, {:>2}): mean endpoint error {:.3} px over {n} shape pixels",
            p.motion,
            p.shape,
            p.vx,
            p.vy,
            err / n.max(1) as f64
        );
    }
    Ok(())
}
