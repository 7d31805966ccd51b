//! Sweeps the source-cache threshold on the desk model.
//!
//! Runs a tuning suite (seed 1, disjoint from the evaluation suite) through
//! a grid of thresholds and picks the largest one whose output stays within
//! 1e-2 mean squared difference of the uncached edit. The choice is then
//! checked on the evaluation suite.
//!
//! ```text
//! cargo run --release --example cache_sweep [cases]
//! ```
//! The trained model is cached in the system temp directory.

use flowrect::d_cache::CacheDelta;
use flowrect::experiments::{cache_sweep, CacheSweepRow, DeskSetup};
use flowrect::train::data::edit_suite;
use flowrect::vfr_sd::EditConfig;

const GRID: [f32; 10] = [0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0, f32::INFINITY];
const MSE_BOUND: f64 = 1e-2;

fn print(rows: &[CacheSweepRow]) {
    println!(
        "{:>8} {:>9} {:>9} {:>12} {:>6}",
        "delta", "src", "saving", "mse", "early"
    );
    for r in rows {
        println!(
            "{:>8} {:>9.2} {:>8.1}% {:>12.3e} {:>6}",
            r.delta.to_string(),
            r.src_evals,
            100.0 * r.reduction,
            r.mse_vs_uncached,
            r.early_refresh
        );
    }
}

fn main() -> flowrect::Result<()> {
    let setup = DeskSetup::default();
    let cases = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(setup.suite);
    let model = setup.cached_model(&std::env::temp_dir().join("flowrect"))?;
    let base = EditConfig::default();

    let tuning = edit_suite(&setup.dataset, cases, 1)?;
    let grid: Vec<_> = GRID.iter().map(|&d| CacheDelta::Threshold(d)).collect();
    let rows = cache_sweep(&model.model(), &tuning, &base, &grid)?;
    println!("tuning suite");
    print(&rows);
    let best = rows
        .iter()
        .rev()
        .find(|r| r.mse_vs_uncached < MSE_BOUND)
        .map(|r| r.delta)
        .expect("delta 0 is exact");
    println!("chosen delta {best}");

    let eval = edit_suite(&setup.dataset, cases, setup.seed)?;
    let rows = cache_sweep(&model.model(), &eval, &base, &[best])?;
    println!("evaluation suite");
    print(&rows);
    Ok(())
}
