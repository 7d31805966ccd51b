//! Sweeps shared by the command line, the examples and the tests: the
//! component ablation, the optimal-transport convergence bench and the
//! cache-threshold sweep.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::d_cache::CacheDelta;
use crate::error::{Error, Result};
use crate::metrics::{mse, MetricsReport};
use crate::model::{AnalyticGaussianSpec, GaussianMean, VectorField};
use crate::model::{Architecture, ModelCheckpoint, ToyParams};
use crate::smpi::SmpiConfig;
use crate::train::data::{edit_suite, EditCase, SyntheticDataset, SyntheticDatasetSpec};
use crate::train::{train, TrainConfig};
use crate::vfr_sd::{edit, edit_gaussian_analytic, EditConfig, SolverKind};

/// The desk-scale experiment: a synthetic dataset, an editing suite drawn
/// from the same generator and a toy model trained on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskSetup {
    pub dataset: SyntheticDatasetSpec,
    pub clips: usize,
    pub suite: usize,
    pub seed: u64,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            dataset: SyntheticDatasetSpec::default(),
            clips: 128,
            suite: 24,
            seed: 0,
            hidden: 32,
            train: TrainConfig {
                steps: 2000,
                ..TrainConfig::default()
            },
        }
    }
}

impl DeskSetup {
    pub fn architecture(&self) -> Architecture {
        let [l, c, h, w] = self.dataset.video_shape();
        Architecture {
            hidden: self.hidden,
            num_tokens: self.dataset.num_classes,
            ..Architecture::new(l, c, h, w)
        }
    }

    pub fn dataset(&self) -> Result<SyntheticDataset> {
        SyntheticDataset::generate(&self.dataset, self.clips, self.seed)
    }

    pub fn edit_suite(&self) -> Result<Vec<EditCase>> {
        edit_suite(&self.dataset, self.suite, self.seed)
    }

    /// Trains from scratch and returns the final checkpoint and loss curve.
    pub fn train_model(&self) -> Result<(ModelCheckpoint, Vec<f64>)> {
        let init = ToyParams::init(self.architecture(), self.train.seed)?;
        let out = train(init, &self.dataset()?, &self.train)?;
        Ok((out.checkpoint, out.losses))
    }

    /// Short digest of the whole setup, for naming cached checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("setup serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Loads the checkpoint cached under `dir`, training and saving it first
    /// if it is missing.
    pub fn cached_model(&self, dir: &Path) -> Result<ModelCheckpoint> {
        let path = dir.join(format!("desk-{}.frct", self.fingerprint()));
        if path.exists() {
            return ModelCheckpoint::load(&path);
        }
        let (ckpt, _) = self.train_model()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ckpt.save(&path)?;
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    /// Plain conditional generation from pure noise.
    Vanilla,
    /// Noise blended with the source at `t_max`, nothing else.
    InitOnly,
    NoRectification,
    NoSmpi,
    NoCache,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::Vanilla,
        AblationRow::InitOnly,
        AblationRow::NoRectification,
        AblationRow::NoSmpi,
        AblationRow::NoCache,
        AblationRow::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Vanilla => "vanilla",
            AblationRow::InitOnly => "init-only",
            AblationRow::NoRectification => "no-rectification",
            AblationRow::NoSmpi => "no-smpi",
            AblationRow::NoCache => "no-cache",
            AblationRow::Full => "full",
        }
    }

    /// `full` with this row's components removed.
    pub fn config(self, full: &EditConfig) -> EditConfig {
        let off = SmpiConfig::disabled();
        match self {
            AblationRow::Vanilla => EditConfig {
                lambda: 0.0,
                smpi: off,
                ..*full
            },
            AblationRow::InitOnly => EditConfig {
                lambda: 0.0,
                smpi: SmpiConfig {
                    t_max: full.smpi.t_max,
                    ..off
                },
                ..*full
            },
            AblationRow::NoRectification => EditConfig { lambda: 0.0, ..*full },
            AblationRow::NoSmpi => EditConfig { smpi: off, ..*full },
            AblationRow::NoCache => EditConfig {
                cache_delta: CacheDelta::Off,
                ..*full
            },
            AblationRow::Full => *full,
        }
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation row `{s}`")))
    }
}

/// Suite averages of one ablation row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub metrics: MetricsReport,
    /// Mean model calls per edit.
    pub src_evals: f64,
    pub tar_evals: f64,
    pub time: Duration,
}

/// Edits every case of `suite` under every row. Each case keeps its own
/// seed, `full.seed + index`, across rows.
pub fn run_ablation<M: VectorField + ?Sized>(
    model: &M,
    suite: &[EditCase],
    full: &EditConfig,
    rows: &[AblationRow],
) -> Result<Vec<AblationResult>> {
    if suite.is_empty() {
        return Err(Error::Precondition("empty editing suite".into()));
    }
    rows.iter()
        .map(|&row| {
            let cfg = row.config(full);
            let mut reports = Vec::with_capacity(suite.len());
            let (mut src, mut tar, mut time) = (0usize, 0usize, Duration::ZERO);
            for (i, case) in suite.iter().enumerate() {
                let cfg = EditConfig {
                    seed: full.seed + i as u64,
                    ..cfg
                };
                let (out, trace) = edit(
                    model,
                    &case.clip.frames,
                    &case.edited_first.view(),
                    (case.clip.token, case.target_token),
                    &cfg,
                )?;
                reports.push(MetricsReport::compute(
                    &out,
                    &case.edited_first.view(),
                    &case.clip.frames,
                    Some(&case.reference),
                )?);
                src += trace.src_evals;
                tar += trace.tar_evals;
                time += trace.wall_time;
            }
            let n = suite.len() as f64;
            Ok(AblationResult {
                row,
                metrics: MetricsReport::mean(&reports).expect("suite is not empty"),
                src_evals: src as f64 / n,
                tar_evals: tar as f64 / n,
                time: time / suite.len() as u32,
            })
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "row,tc,efc,ovc,aec,mse,src_evals,tar_evals";

/// The deterministic columns; timings go to [`ablation_timing_csv`].
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.row,
            r.metrics.csv_row(),
            r.src_evals,
            r.tar_evals
        ));
    }
    out
}

pub fn ablation_timing_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row,time_s\n");
    for r in results {
        out.push_str(&format!("{},{:.6}\n", r.row, r.time.as_secs_f64()));
    }
    out
}

/// One transport problem with a closed-form answer.
#[derive(Debug, Clone, PartialEq)]
pub struct OtCase {
    pub name: String,
    pub mu_src: Vec<f32>,
    pub mu_tar: Vec<f32>,
    pub variance: f64,
    pub x_src: Vec<f32>,
}

impl OtCase {
    pub fn new(name: &str, mu_src: &[f32], mu_tar: &[f32], variance: f64, x_src: &[f32]) -> Result<Self> {
        if mu_src.len() != x_src.len() || mu_tar.len() != x_src.len() || x_src.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "transport case",
                left: vec![x_src.len()],
                right: vec![mu_src.len(), mu_tar.len()],
            });
        }
        Ok(Self {
            name: name.into(),
            mu_src: mu_src.to_vec(),
            mu_tar: mu_tar.to_vec(),
            variance,
            x_src: x_src.to_vec(),
        })
    }

    /// `x_src + mu_tar - mu_src`.
    pub fn ot_map(&self) -> Vec<f32> {
        self.x_src
            .iter()
            .zip(&self.mu_src)
            .zip(&self.mu_tar)
            .map(|((x, s), t)| x + (t - s))
            .collect()
    }

    /// The scalar, planar and identity problems of the bench.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("scalar", &[0.0], &[2.0], 1.0, &[0.7]).expect("valid"),
            Self::new("planar", &[0.0, 1.0], &[1.5, -0.5], 1.0, &[0.7, -0.3]).expect("valid"),
            Self::new("identity", &[0.5], &[0.5], 1.0, &[0.7]).expect("valid"),
        ]
    }

    fn as_array(v: &[f32]) -> Array4<f32> {
        Array4::from_shape_vec((1, 1, 1, v.len()), v.to_vec()).expect("length matches")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OtRow {
    pub case: String,
    pub solver: SolverKind,
    pub lambda: f32,
    pub steps: usize,
    /// Largest absolute deviation from the optimal-transport map.
    pub error: f64,
    pub src_evals: usize,
    pub tar_evals: usize,
}

/// Analytic edit of one case from pure noise with caching off.
pub fn ot_edit(case: &OtCase, solver: SolverKind, lambda: f32, steps: usize, seed: u64) -> Result<(Vec<f32>, OtRow)> {
    let spec = |mu: &[f32]| AnalyticGaussianSpec::new(GaussianMean::Array(OtCase::as_array(mu)), case.variance);
    let cfg = EditConfig {
        lambda,
        smpi: SmpiConfig::disabled(),
        cache_delta: CacheDelta::Off,
        num_steps: steps,
        solver,
        seed,
        ..EditConfig::default()
    };
    let (z, trace) = edit_gaussian_analytic(
        &spec(&case.mu_src)?,
        &spec(&case.mu_tar)?,
        &OtCase::as_array(&case.x_src),
        &cfg,
    )?;
    let out: Vec<f32> = z.iter().copied().collect();
    let error = out
        .iter()
        .zip(case.ot_map())
        .map(|(a, b)| (*a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    Ok((
        out,
        OtRow {
            case: case.name.clone(),
            solver,
            lambda,
            steps,
            error,
            src_evals: trace.src_evals,
            tar_evals: trace.tar_evals,
        },
    ))
}

/// Every combination of case, solver, `lambda` and step count.
pub fn ot_bench(
    cases: &[OtCase],
    solvers: &[SolverKind],
    lambdas: &[f32],
    steps: &[usize],
    seed: u64,
) -> Result<Vec<OtRow>> {
    let mut rows = Vec::new();
    for case in cases {
        for &solver in solvers {
            for &lambda in lambdas {
                for &n in steps {
                    rows.push(ot_edit(case, solver, lambda, n, seed)?.1);
                }
            }
        }
    }
    Ok(rows)
}

pub fn ot_csv(rows: &[OtRow]) -> String {
    let mut out = String::from("case,solver,lambda,steps,error,src_evals,tar_evals\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:e},{},{}\n",
            r.case, r.solver, r.lambda, r.steps, r.error, r.src_evals, r.tar_evals
        ));
    }
    out
}

/// Cache savings and output drift at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheSweepRow {
    pub delta: CacheDelta,
    /// Mean source evaluations per edit.
    pub src_evals: f64,
    /// Mean saving against the uncached run.
    pub reduction: f64,
    /// Mean squared difference to the uncached output.
    pub mse_vs_uncached: f64,
    /// Whether the first two steps refreshed the source in every run.
    pub early_refresh: bool,
    pub time: Duration,
}

/// Runs the suite uncached, then once per threshold.
pub fn cache_sweep<M: VectorField + ?Sized>(
    model: &M,
    suite: &[EditCase],
    base: &EditConfig,
    deltas: &[CacheDelta],
) -> Result<Vec<CacheSweepRow>> {
    if suite.is_empty() {
        return Err(Error::Precondition("empty editing suite".into()));
    }
    let run = |delta: CacheDelta| -> Result<Vec<_>> {
        suite
            .iter()
            .enumerate()
            .map(|(i, case)| {
                let cfg = EditConfig {
                    cache_delta: delta,
                    seed: base.seed + i as u64,
                    ..*base
                };
                edit(
                    model,
                    &case.clip.frames,
                    &case.edited_first.view(),
                    (case.clip.token, case.target_token),
                    &cfg,
                )
            })
            .collect()
    };
    let baseline = run(CacheDelta::Off)?;
    let n = suite.len() as f64;
    deltas
        .iter()
        .map(|&delta| {
            let runs = run(delta)?;
            let (mut src, mut red, mut err, mut time) = (0.0, 0.0, 0.0, Duration::ZERO);
            let mut early_refresh = true;
            for ((out, trace), (reference, base_trace)) in runs.iter().zip(&baseline) {
                early_refresh &= trace.steps.iter().take(2).all(|s| !s.cache_hit);
                src += trace.src_evals as f64;
                red += 1.0 - trace.src_evals as f64 / base_trace.src_evals.max(1) as f64;
                err += mse(out, reference)?;
                time += trace.wall_time;
            }
            Ok(CacheSweepRow {
                delta,
                src_evals: src / n,
                reduction: red / n,
                mse_vs_uncached: err / n,
                early_refresh,
                time: time / suite.len() as u32,
            })
        })
        .collect()
}

pub fn cache_sweep_csv(rows: &[CacheSweepRow]) -> String {
    let mut out = String::from("delta,src_evals,reduction,mse_vs_uncached,early_refresh\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{}\n",
            r.delta, r.src_evals, r.reduction, r.mse_vs_uncached, r.early_refresh as u8
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnalyticGaussianModel;
    use crate::train::data::{edit_suite, SyntheticDatasetSpec};

    #[test]
    fn rows_remove_their_components() {
        let full = EditConfig::default();
        assert_eq!(AblationRow::Full.config(&full), full);
        let v = AblationRow::Vanilla.config(&full);
        assert_eq!((v.lambda, v.smpi), (0.0, SmpiConfig::disabled()));
        let i = AblationRow::InitOnly.config(&full);
        assert_eq!(
            (i.lambda, i.smpi.t_max, i.smpi.beta, i.smpi.alpha),
            (0.0, full.smpi.t_max, 0.0, 1.0)
        );
        assert_eq!(AblationRow::NoRectification.config(&full).smpi, full.smpi);
        assert_eq!(AblationRow::NoSmpi.config(&full).lambda, 1.0);
        assert_eq!(AblationRow::NoCache.config(&full).cache_delta, CacheDelta::Off);
        for r in AblationRow::ALL {
            assert_eq!(r.name().parse::<AblationRow>().unwrap(), r);
        }
        assert!("w/o".parse::<AblationRow>().is_err());
    }

    #[test]
    fn transport_errors_shrink_for_rectified_edits_only() {
        let case = &OtCase::standard()[0];
        let rows = ot_bench(
            std::slice::from_ref(case),
            &[SolverKind::Euler],
            &[0.0, 1.0],
            &[25, 400],
            3,
        )
        .unwrap();
        let (plain, rectified): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.lambda == 0.0);
        assert!(rectified.iter().all(|r| r.error < 0.05));
        // without the deviation the sample lands on the target distribution
        // but forgets where it started
        assert!(plain.iter().all(|r| r.error > 0.1));
        assert_eq!(plain[0].src_evals, 0);
        assert!(ot_csv(&rows).lines().count() == 5);
    }

    #[test]
    fn identical_means_transport_to_the_source() {
        let case = &OtCase::standard()[2];
        for n in [5, 50] {
            let (_, row) = ot_edit(case, SolverKind::Heun, 1.0, n, 0).unwrap();
            assert!(row.error < 1e-5, "{n}: {}", row.error);
        }
    }

    #[test]
    fn sweep_counts_follow_the_threshold() {
        let spec = SyntheticDatasetSpec {
            size: 8,
            frames: 3,
            radius: 2,
            ..SyntheticDatasetSpec::default()
        };
        let suite = edit_suite(&spec, 2, 0).unwrap();
        // one Gaussian per class, centered on a representative clip
        let model = AnalyticGaussianModel::new(
            (0..4)
                .map(|k| AnalyticGaussianSpec::scalar(-0.1 + 0.1 * k as f32, 0.5).unwrap())
                .collect(),
        );
        let base = EditConfig {
            guidance_scale: 1.0,
            num_steps: 6,
            ..EditConfig::default()
        };
        let rows = cache_sweep(
            &model,
            &suite,
            &base,
            &[CacheDelta::Threshold(0.0), CacheDelta::Threshold(f32::INFINITY)],
        )
        .unwrap();
        assert_eq!(rows[1].src_evals, 1.0);
        assert!(rows[0].src_evals >= rows[1].src_evals);
        assert!(rows[0].mse_vs_uncached <= rows[1].mse_vs_uncached);
        assert!(rows[0].early_refresh && !rows[1].early_refresh);
    }
}
