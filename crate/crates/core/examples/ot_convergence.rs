//! Editing between two Gaussians with exact vector fields.
//!
//! With equal variances the rectified edit should land on the optimal
//! transport map `x + (mu_tar - mu_src)`; without rectification it is an
//! independent sample of the target. Prints the endpoint error per solver,
//! step count and `lambda`.
//!
//! cargo run --release --example ot_convergence

use flowrect::experiments::{ot_bench, OtCase};
use flowrect::vfr_sd::SolverKind;

fn main() -> flowrect::Result<()> {
    let rows = ot_bench(
        &OtCase::standard(),
        &[SolverKind::Euler, SolverKind::Heun],
        &[0.0, 1.0],
        &[25, 100, 400],
        0,
    )?;
    println!(
        "{:<10}{:<7}{:>7}{:>7}{:>12}{:>6}{:>6}",
        "case", "solver", "lambda", "steps", "error", "src", "tar"
    );
    for r in &rows {
        println!(
            "{:<10}{:<7}{:>7}{:>7}{:>12.3e}{:>6}{:>6}",
            r.case, r.solver, r.lambda, r.steps, r.error, r.src_evals, r.tar_evals
        );
    }
    Ok(())
}
