use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Ix3;

use super::manifest::{Recorder, RunManifest};
use super::*;
use crate::d_cache::cache_report;
use crate::experiments::{
    ablation_csv, ablation_timing_csv, cache_sweep, cache_sweep_csv, ot_bench, ot_csv, run_ablation, OtCase,
};
use crate::io::{encode_pnm, export_frames, load_frames, load_tensor, save_frames, write_atomic, TensorBundle};
use crate::metrics::MetricsReport;
use crate::model::{Architecture, ModelCheckpoint, ToyParams};
use crate::rng::gaussian_noise;
use crate::train::data::{edit_suite, load_dataset, load_suite, save_dataset, Clip, EditCase, SyntheticDataset};
use crate::train::{train_with, TrainEvent};
use crate::vfr_sd::edit;

pub(super) fn execute(resolved: &Resolved, out: &Path) -> Result<RunManifest> {
    let mut rec = Recorder::default();
    match resolved {
        Resolved::GenData(r) => gen_data(r, out, &mut rec)?,
        Resolved::Train(r) => train(r, out, &mut rec)?,
        Resolved::Edit(r) => edit_one(r, out, &mut rec)?,
        Resolved::Eval(r) => eval(r, out, &mut rec)?,
        Resolved::Ablate(r) => ablate(r, out, &mut rec)?,
        Resolved::OtBench(r) => ot(r, out, &mut rec)?,
        Resolved::CacheBench(r) => cache_bench(r, out, &mut rec)?,
    }
    let manifest = rec.finish(resolved.name(), resolved.to_json(), out)?;
    manifest.save(out)?;
    Ok(manifest)
}

fn write_text(rec: &mut Recorder, path: PathBuf, text: &str) -> Result<()> {
    write_atomic(&path, text.as_bytes())?;
    rec.output(path);
    Ok(())
}

fn load_checkpoint(path: &Path, rec: &mut Recorder) -> Result<ModelCheckpoint> {
    let ckpt = ModelCheckpoint::load(path)
        .map_err(|e| Error::Setup(format!("cannot load checkpoint {}: {e}", path.display())))?;
    rec.input(path);
    Ok(ckpt)
}

fn gen_data(r: &GenDataRun, out: &Path, rec: &mut Recorder) -> Result<()> {
    let started = Instant::now();
    rec.seed("data", r.seed);
    let dataset = SyntheticDataset::generate(&r.dataset, r.clips, r.seed)?;
    let suite = edit_suite(&r.dataset, r.suite, r.seed)?;
    rec.outputs(save_dataset(out, &dataset, &suite)?);
    for (i, case) in suite.iter().enumerate() {
        let dir = out.join("previews");
        for (name, frame) in [("src", case.clip.frames.frame(0)), ("edit", case.edited_first.view())] {
            let path = dir.join(format!("case_{i:04}_{name}.ppm"));
            write_atomic(&path, &encode_pnm(&frame)?)?;
            rec.output(path);
        }
    }
    rec.phase("generate", started);
    println!(
        "{} training clips and {} editing cases in {}",
        dataset.len(),
        suite.len(),
        out.display()
    );
    Ok(())
}

fn dataset_inputs(dir: &Path, rec: &mut Recorder, clips: usize, cases: usize) {
    rec.input(&dir.join("dataset.json"));
    for i in 0..clips {
        rec.input(&dir.join("train").join(format!("clip_{i:04}.frct")));
    }
    for i in 0..cases {
        rec.input(&dir.join("suite").join(format!("case_{i:04}.frct")));
    }
}

fn train(r: &TrainRun, out: &Path, rec: &mut Recorder) -> Result<()> {
    let data = required(&r.data, "data")?;
    let started = Instant::now();
    let dataset = load_dataset(data)?;
    dataset_inputs(data, rec, dataset.len(), 0);
    let [l, c, h, w] = dataset.spec.video_shape();
    let arch = Architecture {
        hidden: r.hidden,
        time_features: r.time_features,
        num_tokens: dataset.spec.num_classes,
        ..Architecture::new(l, c, h, w)
    };
    rec.seed("train", r.train.seed);
    let init = ToyParams::init(arch, r.train.seed)?;
    rec.phase("load", started);

    let started = Instant::now();
    let ckpt_dir = out.join("checkpoints");
    let report = (r.train.steps / 10).max(1);
    let mut written = Vec::new();
    let outcome = train_with(init, &dataset, &r.train, |event| {
        match event {
            TrainEvent::Step { step, loss } if step % report == 0 => eprintln!("step {step:>6}  loss {loss:.6}"),
            TrainEvent::Checkpoint(ck) if (ck.step as usize) < r.train.steps => {
                let path = ckpt_dir.join(format!("step_{:06}.frct", ck.step));
                ck.save(&path)?;
                written.push(path);
            }
            _ => {}
        }
        Ok(())
    })?;
    rec.phase("train", started);
    rec.outputs(written);
    let path = out.join("model.frct");
    outcome.checkpoint.save(&path)?;
    rec.output(path);
    write_text(rec, out.join("loss.csv"), &outcome.loss_csv())?;
    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!("{} steps, loss {first:.5} -> {last:.5}", outcome.losses.len());
    Ok(())
}

/// An editing case from a case bundle, or from a clip plus the edited frame
/// and the target token.
fn load_case(r: &EditRun, rec: &mut Recorder) -> Result<EditCase> {
    let src = required(&r.src, "src")?;
    let bundle = TensorBundle::load(src)?;
    rec.input(src);
    let edited = match &r.edited {
        Some(p) => {
            let a = load_tensor(p)?;
            rec.input(p);
            let shape = a.shape().to_vec();
            Some(a.into_dimensionality::<Ix3>().map_err(|_| Error::InvalidShape {
                shape,
                reason: "edited frame must be [C, H, W]".into(),
            })?)
        }
        None => None,
    };
    let mut case = match EditCase::from_bundle(&bundle) {
        Ok(case) => case,
        Err(_) => {
            let clip = Clip::from_bundle(&bundle)?;
            let (Some(edited_first), Some(target_token)) = (edited.clone(), r.target_token) else {
                return Err(Error::Usage("a plain clip needs --edited and --target-token".into()));
            };
            EditCase {
                reference: clip.frames.clone(),
                clip,
                target_token,
                edited_first,
            }
        }
    };
    if let Some(e) = edited {
        case.edited_first = e;
    }
    if let Some(t) = r.target_token {
        case.target_token = t;
    }
    Ok(case)
}

fn edit_one(r: &EditRun, out: &Path, rec: &mut Recorder) -> Result<()> {
    let model_path = required(&r.model, "model")?;
    let started = Instant::now();
    let case = load_case(r, rec)?;
    let model = load_checkpoint(model_path, rec)?.model();
    rec.phase("load", started);

    let started = Instant::now();
    rec.seed("edit", r.edit.seed);
    let (video, trace) = edit(
        &model,
        &case.clip.frames,
        &case.edited_first.view(),
        (case.clip.token, case.target_token),
        &r.edit,
    )?;
    rec.phase("edit", started);

    let path = out.join("edited.frct");
    save_frames(&path, &video)?;
    rec.output(path);
    let eps = gaussian_noise(case.clip.frames.shape(), r.edit.seed)?;
    let path = out.join("noise.frct");
    crate::io::save_tensor(&path, &eps.eps.view().into_dyn())?;
    rec.output(path);
    write_text(rec, out.join("trace.csv"), &trace.to_csv())?;
    rec.outputs(export_frames(&video, out.join("frames"))?);
    println!("{}", cache_report(&trace));
    Ok(())
}

fn eval(r: &EvalRun, out: &Path, rec: &mut Recorder) -> Result<()> {
    let video_path = required(&r.video, "video")?;
    let src = required(&r.src, "src")?;
    let video = load_frames(video_path)?;
    rec.input(video_path);
    let case = EditCase::from_bundle(&TensorBundle::load(src)?)?;
    rec.input(src);
    let reference = match &r.reference {
        Some(p) => {
            rec.input(p);
            load_frames(p)?
        }
        None => case.reference.clone(),
    };
    let report = MetricsReport::compute(&video, &case.edited_first.view(), &case.clip.frames, Some(&reference))?;
    write_text(
        rec,
        out.join("metrics.csv"),
        &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
    )?;
    print!("{report}");
    Ok(())
}

fn suite_inputs(
    model: &Option<PathBuf>,
    data: &Option<PathBuf>,
    cases: Option<usize>,
    rec: &mut Recorder,
) -> Result<(ModelCheckpoint, Vec<EditCase>)> {
    let model = required(model, "model")?;
    let data = required(data, "data")?;
    let mut suite = load_suite(data)?;
    if let Some(n) = cases {
        suite.truncate(n);
    }
    dataset_inputs(data, rec, 0, suite.len());
    Ok((load_checkpoint(model, rec)?, suite))
}

fn ablate(r: &AblateRun, out: &Path, rec: &mut Recorder) -> Result<()> {
    let (ckpt, suite) = suite_inputs(&r.model, &r.data, r.cases, rec)?;
    rec.seed("edit", r.edit.seed);
    let started = Instant::now();
    let results = run_ablation(&ckpt.model(), &suite, &r.edit, &r.rows)?;
    rec.phase("ablate", started);
    write_text(rec, out.join("ablation.csv"), &ablation_csv(&results))?;
    let timing = out.join("timing.csv");
    write_atomic(&timing, ablation_timing_csv(&results).as_bytes())?;
    rec.volatile(timing);
    println!(
        "{:<18}{:>9}{:>9}{:>9}{:>9}{:>10}{:>8}{:>9}",
        "row", "TC", "EFC", "OVC", "AEC", "MSE", "src", "time/s"
    );
    for a in &results {
        let m = &a.metrics;
        println!(
            "{:<18}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>10.5}{:>8.1}{:>9.3}",
            a.row.name(),
            m.tc,
            m.efc,
            m.ovc,
            m.aec,
            m.mse_vs_reference,
            a.src_evals,
            a.time.as_secs_f64()
        );
    }
    Ok(())
}

fn ot(r: &OtBenchRun, out: &Path, rec: &mut Recorder) -> Result<()> {
    rec.seed("noise", r.seed);
    let started = Instant::now();
    let rows = ot_bench(&OtCase::standard(), &r.solvers, &r.lambdas, &r.steps, r.seed)?;
    rec.phase("bench", started);
    write_text(rec, out.join("ot.csv"), &ot_csv(&rows))?;
    println!(
        "{:<10}{:<7}{:>7}{:>7}{:>12}",
        "case", "solver", "lambda", "steps", "error"
    );
    for row in &rows {
        println!(
            "{:<10}{:<7}{:>7}{:>7}{:>12.3e}",
            row.case, row.solver, row.lambda, row.steps, row.error
        );
    }
    Ok(())
}

fn cache_bench(r: &CacheBenchRun, out: &Path, rec: &mut Recorder) -> Result<()> {
    let (ckpt, suite) = suite_inputs(&r.model, &r.data, r.cases, rec)?;
    rec.seed("edit", r.edit.seed);
    let started = Instant::now();
    let rows = cache_sweep(&ckpt.model(), &suite, &r.edit, &r.deltas)?;
    rec.phase("sweep", started);
    write_text(rec, out.join("cache.csv"), &cache_sweep_csv(&rows))?;
    let timing = out.join("timing.csv");
    let mut text = String::from("delta,time_s\n");
    for row in &rows {
        text.push_str(&format!("{},{:.6}\n", row.delta, row.time.as_secs_f64()));
    }
    write_atomic(&timing, text.as_bytes())?;
    rec.volatile(timing);
    println!("{:>8}{:>10}{:>11}{:>12}", "delta", "src", "reduction", "mse");
    for row in &rows {
        println!(
            "{:>8}{:>10.2}{:>10.1}%{:>12.3e}",
            row.delta.to_string(),
            row.src_evals,
            100.0 * row.reduction,
            row.mse_vs_uncached
        );
    }
    Ok(())
}
