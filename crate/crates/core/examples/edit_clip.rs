//! Edits one clip of the suite with the desk model and writes the source,
//! the edit and the ideal edit as PPM frames.
//!
//! cargo run --release --example edit_clip -- [case] [out_dir]
//!
//! The first run trains the desk model (about two minutes) and caches it in
//! the system temp directory.

use std::path::PathBuf;

use flowrect::experiments::DeskSetup;
use flowrect::io::export_frames;
use flowrect::metrics::MetricsReport;
use flowrect::vfr_sd::{edit, EditConfig};

fn main() -> flowrect::Result<()> {
    let mut args = std::env::args().skip(1);
    let index: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("flowrect-edit"));

    let setup = DeskSetup::default();
    let model = setup.cached_model(&std::env::temp_dir().join("flowrect"))?;
    let suite = setup.edit_suite()?;
    let case = &suite[index % suite.len()];
    let cfg = EditConfig::default();
    let (video, trace) = edit(
        &model.model(),
        &case.clip.frames,
        &case.edited_first.view(),
        (case.clip.token, case.target_token),
        &cfg,
    )?;

    let m = MetricsReport::compute(
        &video,
        &case.edited_first.view(),
        &case.clip.frames,
        Some(&case.reference),
    )?;
    println!(
        "class {} -> {}: TC {:.3}  EFC {:.3}  OVC {:.3}  MSE to ideal {:.4}",
        case.clip.token, case.target_token, m.tc, m.efc, m.ovc, m.mse_vs_reference
    );
    println!(
        "{} source and {} target evaluations over {} steps, {:.0} ms",
        trace.src_evals,
        trace.tar_evals,
        cfg.num_steps,
        1e3 * trace.wall_time.as_secs_f64()
    );
    for (name, seq) in [
        ("source", &case.clip.frames),
        ("edit", &video),
        ("ideal", &case.reference),
    ] {
        export_frames(seq, out.join(name))?;
    }
    println!("frames in {}", out.display());
    Ok(())
}
