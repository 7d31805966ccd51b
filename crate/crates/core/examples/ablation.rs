//! Trains the toy model on synthetic clips and runs the six-row component
//! ablation over the editing suite.
//!
//! cargo run --release --example ablation -- [train_steps] [cases]

use std::time::Instant;

use flowrect::experiments::{run_ablation, AblationRow, DeskSetup};
use flowrect::train::TrainConfig;
use flowrect::vfr_sd::EditConfig;

fn main() -> flowrect::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut setup = DeskSetup::default();
    if let Some(steps) = args.next().and_then(|s| s.parse().ok()) {
        setup.train = TrainConfig { steps, ..setup.train };
    }
    if let Some(n) = args.next().and_then(|s| s.parse().ok()) {
        setup.suite = n;
    }

    let started = Instant::now();
    let (ckpt, losses) = setup.train_model()?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!(
        "trained {} steps in {:.1}s, loss {:.4} -> {:.4} (mean of last 100)",
        losses.len(),
        started.elapsed().as_secs_f64(),
        losses[0],
        tail.iter().sum::<f64>() / tail.len() as f64
    );

    let suite = setup.edit_suite()?;
    let results = run_ablation(&ckpt.model(), &suite, &EditConfig::default(), &AblationRow::ALL)?;
    println!(
        "{:<18}{:>9}{:>9}{:>9}{:>9}{:>10}{:>8}{:>9}",
        "row", "TC", "EFC", "OVC", "AEC", "MSE", "src", "ms/edit"
    );
    for r in &results {
        let m = &r.metrics;
        println!(
            "{:<18}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>10.5}{:>8.1}{:>9.1}",
            r.row.name(),
            m.tc,
            m.efc,
            m.ovc,
            m.aec,
            m.mse_vs_reference,
            r.src_evals,
            1e3 * r.time.as_secs_f64()
        );
    }
    Ok(())
}
