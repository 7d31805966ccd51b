//! Samples a Gaussian through its exact flow-matching vector field and
//! compares the empirical moments with the target. Samples are frames, so
//! they are clamped to [-1, 1]; the target keeps its mass well inside.
//!
//! cargo run --release --example analytic_sampling

use ndarray::{Array3, Array4};

use flowrect::model::{AnalyticGaussianModel, AnalyticGaussianSpec, Condition};
use flowrect::schedule::ScheduleKind;
use flowrect::vfr_sd::{sample, SampleConfig, SolverKind};

fn main() -> flowrect::Result<()> {
    let (mean, variance) = (0.1, 0.04);
    let model = AnalyticGaussianModel::new(vec![AnalyticGaussianSpec::scalar(mean, variance)?]);
    // every element of a 1 x 1 x 200 x 200 "clip" is an independent draw
    let shape = [1, 1, 200, 200];
    let c = Condition::new(Array3::zeros((1, 200, 200)), Array4::zeros((0, 1, 200, 200)), 0)?;
    println!("target mean {mean}, variance {variance}");
    for solver in [SolverKind::Euler, SolverKind::Heun] {
        for steps in [2, 8, 32] {
            let cfg = SampleConfig {
                guidance_scale: 1.0,
                num_steps: steps,
                seed: 1,
                solver,
                schedule: ScheduleKind::Linear,
            };
            let x = sample(&model, &c, shape, &cfg)?;
            let a = x.as_array();
            let n = a.len() as f64;
            let m = a.iter().map(|&v| v as f64).sum::<f64>() / n;
            let v = a.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            println!("{solver:<6}{steps:>4} steps  mean {m:.4}  variance {v:.4}");
        }
    }
    Ok(())
}
