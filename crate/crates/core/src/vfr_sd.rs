//! Inversion-free editing by two parallel ODEs.
//!
//! Both branches start from the same boundary state. The source branch
//! follows the exact straight path of the source video, stepping with the
//! constant ground-truth vector `v_gt = eps - x_src`. The target branch
//! steps with its own prediction corrected by how far the model's source
//! prediction misses `v_gt`:
//!
//! ```text
//! v = v_tar + lambda * (v_gt - v_src)
//! ```
//!
//! Nothing is ever integrated from data back to noise.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array3, Array4, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::d_cache::{CacheDecision, CacheDelta, CacheState, DESK_DELTA, LARGE_MODEL_DELTA};
use crate::error::{ensure_same_shape, Error, Result};
use crate::model::{
    cfg_evaluate, AnalyticGaussianModel, AnalyticGaussianSpec, Branch, Condition, VectorField, VectorFieldEval,
};
use crate::optical_flow::estimate_flow;
use crate::rng::gaussian_noise;
use crate::schedule::{ScheduleKind, TimestepSchedule};
use crate::smpi::{build_source_condition, build_target_condition, correlated_noise, init_boundary, SmpiConfig};
use crate::tensor::{shape_of, FrameSequence, LatentState, NoiseTensor};

/// Latents beyond this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f32 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    Euler,
    Heun,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Euler => "euler",
            SolverKind::Heun => "heun",
        })
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverKind::Euler),
            "heun" => Ok(SolverKind::Heun),
            other => Err(Error::Usage(format!("unknown solver `{other}` (euler, heun)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Rectification scale.
    pub lambda: f32,
    /// Classifier-free guidance scale of the target branch.
    pub guidance_scale: f32,
    pub smpi: SmpiConfig,
    pub cache_delta: CacheDelta,
    pub num_steps: usize,
    pub seed: u64,
    pub solver: SolverKind,
    pub schedule: ScheduleKind,
    /// Guide the source branch with the same scale as the target.
    pub symmetric_guidance: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            guidance_scale: 1.0,
            smpi: SmpiConfig::default(),
            cache_delta: CacheDelta::Threshold(DESK_DELTA),
            num_steps: 25,
            seed: 0,
            solver: SolverKind::Euler,
            schedule: ScheduleKind::Linear,
            symmetric_guidance: false,
        }
    }
}

impl EditConfig {
    /// The large-model defaults: stronger guidance and the untuned cache
    /// threshold.
    pub fn large_model() -> Self {
        Self {
            guidance_scale: 5.0,
            cache_delta: CacheDelta::Threshold(LARGE_MODEL_DELTA),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain {
                name: "lambda",
                value: self.lambda as f64,
                expected: "[0, inf)",
            });
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Domain {
                name: "guidance_scale",
                value: self.guidance_scale as f64,
                expected: "[0, inf)",
            });
        }
        if self.num_steps == 0 {
            return Err(Error::Domain {
                name: "num_steps",
                value: 0.0,
                expected: ">= 1",
            });
        }
        self.smpi.validate()?;
        self.cache_delta.validate()
    }

    fn source_scale(&self) -> f32 {
        if self.symmetric_guidance {
            self.guidance_scale
        } else {
            1.0
        }
    }
}

/// One executed step of an edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f32,
    pub dt: f32,
    /// Root-mean-square of the target prediction.
    pub v_tar_rms: f64,
    /// Root-mean-square of the source prediction in use (fresh or cached).
    pub v_src_rms: f64,
    pub cache_hit: bool,
    /// Accumulated variation when the cache decision was made.
    pub d_cum: f64,
    /// Running totals of model calls.
    pub src_evals: usize,
    pub tar_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditTrace {
    pub steps: Vec<StepRecord>,
    pub src_evals: usize,
    pub tar_evals: usize,
    /// Model calls per fresh source prediction (2 under symmetric guidance).
    pub src_calls_per_eval: usize,
    pub lambda: f32,
    pub wall_time: Duration,
}

impl EditTrace {
    pub const CSV_HEADER: &'static str = "step,t,dt,cache_hit,d_cum,src_evals,tar_evals";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.step, s.t, s.dt, s.cache_hit as u8, s.d_cum, s.src_evals, s.tar_evals
            ));
        }
        out
    }
}

fn rms(a: &Array4<f32>) -> f64 {
    (a.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

/// `v_tar + lambda * (v_gt - v_src)`.
pub fn rectify(
    v_tar: &VectorFieldEval,
    v_gt: &Array4<f32>,
    v_src: &VectorFieldEval,
    lambda: f32,
) -> Result<VectorFieldEval> {
    ensure_same_shape("rectify v_gt", v_tar.v.shape(), v_gt.shape())?;
    ensure_same_shape("rectify v_src", v_tar.v.shape(), v_src.v.shape())?;
    let mut v = v_tar.v.clone();
    Zip::from(&mut v)
        .and(v_gt)
        .and(&v_src.v)
        .for_each(|v, &g, &s| *v += lambda * (g - s));
    Ok(VectorFieldEval {
        v,
        t: v_tar.t,
        branch: Branch::Target,
    })
}

/// Time after a step of width `dt` from `t`, snapping float residue at 0.
fn next_time(t: f32, dt: f32) -> Result<f32> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::Schedule { t, dt });
    }
    let next = t - dt;
    if next < -1e-6 {
        return Err(Error::Schedule { t, dt });
    }
    Ok(if next.abs() <= 1e-6 { 0.0 } else { next })
}

fn euler_raw(z: &Array4<f32>, v: &Array4<f32>, dt: f32) -> Array4<f32> {
    let mut out = z.clone();
    Zip::from(&mut out).and(v).for_each(|z, &v| *z -= dt * v);
    out
}

/// `z' = z - dt * v`, moving from `t` to `t - dt`.
pub fn euler_step(z: &LatentState, v: &Array4<f32>, dt: f32) -> Result<LatentState> {
    ensure_same_shape("solver step", z.z.shape(), v.shape())?;
    let t = next_time(z.t, dt)?;
    Ok(LatentState {
        z: euler_raw(&z.z, v, dt),
        t,
    })
}

/// First half of a Heun step: the Euler predictor, waiting for the field at
/// the predicted point.
#[derive(Debug, Clone)]
pub struct HeunPredictor {
    start: Array4<f32>,
    v: Array4<f32>,
    dt: f32,
    pub predicted: LatentState,
}

impl HeunPredictor {
    /// `z' = z - dt * (v + v_pred) / 2`.
    pub fn correct(self, v_pred: &Array4<f32>) -> Result<LatentState> {
        ensure_same_shape("heun corrector", self.v.shape(), v_pred.shape())?;
        let mut z = self.start;
        let half = 0.5 * self.dt;
        Zip::from(&mut z)
            .and(&self.v)
            .and(v_pred)
            .for_each(|z, &a, &b| *z -= half * (a + b));
        Ok(LatentState { z, t: self.predicted.t })
    }
}

pub enum SolverPhase {
    Done(LatentState),
    NeedsCorrector(HeunPredictor),
}

/// One solver step from `z` with the field `v` evaluated at `z`.
///
/// Heun returns its predictor and expects the caller to evaluate the field
/// there. A step that lands exactly on `t = 0` is always taken with Euler,
/// because no field is evaluated at `t = 0`.
pub fn solver_step(kind: SolverKind, z: &LatentState, v: &VectorFieldEval, dt: f32) -> Result<SolverPhase> {
    let predicted = euler_step(z, &v.v, dt)?;
    if kind == SolverKind::Euler || predicted.t == 0.0 {
        return Ok(SolverPhase::Done(predicted));
    }
    Ok(SolverPhase::NeedsCorrector(HeunPredictor {
        start: z.z.clone(),
        v: v.v.clone(),
        dt,
        predicted,
    }))
}

fn guard(z: &Array4<f32>, step: usize, lambda: f32) -> Result<()> {
    let max_abs = z
        .iter()
        .fold(0.0f32, |m, &v| if v.is_nan() { f32::INFINITY } else { m.max(v.abs()) });
    if max_abs > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, lambda, max_abs });
    }
    Ok(())
}

/// The parallel-ODE loop on raw arrays, shared by the video and analytic
/// entry points.
fn run_parallel_odes<M: VectorField + ?Sized>(
    model: &M,
    x_src: &Array4<f32>,
    eps_m: &NoiseTensor,
    c_src: &Condition,
    c_tar: &Condition,
    cfg: &EditConfig,
) -> Result<(Array4<f32>, EditTrace)> {
    let started = Instant::now();
    let schedule = TimestepSchedule::new(cfg.schedule, cfg.smpi.t_max, cfg.num_steps)?;
    let boundary = init_boundary(x_src, eps_m, cfg.smpi.t_max)?;
    let v_gt = &eps_m.eps - x_src;
    let lambda = cfg.lambda;
    let s = cfg.guidance_scale;
    let src_scale = cfg.source_scale();

    let mut z_tar = boundary.clone();
    let mut z_src = boundary;
    let mut cache = CacheState::new();
    let mut steps = Vec::with_capacity(cfg.num_steps);
    let (mut src_evals, mut tar_evals) = (0usize, 0usize);
    let mut src_calls_per_eval = 1;

    // source field at the next step's state, evaluated by a Heun corrector
    let mut prefetched: Option<VectorFieldEval> = None;

    for (k, (t, dt)) in schedule.intervals().enumerate() {
        z_tar.t = t;
        z_src.t = t;
        let z_src_next = euler_step(&z_src, &v_gt, dt)?;
        let prefetch = prefetched.take().filter(|p| p.t == t);
        let g = cfg_evaluate(model, &z_tar.z, t, c_tar, s, Branch::Target)?;
        tar_evals += g.model_calls;
        let v_tar = g.eval;

        let mut hit = false;
        let mut refreshed = false;
        let mut d_cum = 0.0;
        let mut v_src_rms = 0.0;
        let v = if lambda == 0.0 {
            v_tar.clone()
        } else {
            cache.observe_target(&v_tar.v)?;
            d_cum = cache.d_cum;
            match cache.decide(cfg.cache_delta) {
                CacheDecision::Reuse => {
                    cache.reuse()?;
                    hit = true;
                }
                CacheDecision::Refresh => {
                    let e = match prefetch {
                        Some(e) => e,
                        None => {
                            let e = cfg_evaluate(model, &z_src.z, t, c_src, src_scale, Branch::Source)?;
                            src_evals += e.model_calls;
                            src_calls_per_eval = e.model_calls;
                            e.eval
                        }
                    };
                    cache.refresh(e);
                    refreshed = true;
                }
            }
            let v_src = cache.cached_v_src.as_ref().expect("refreshed or reused above");
            v_src_rms = rms(&v_src.v);
            rectify(&v_tar, &v_gt, v_src, lambda)?
        };

        z_tar = match solver_step(cfg.solver, &z_tar, &v, dt)? {
            SolverPhase::Done(z) => z,
            SolverPhase::NeedsCorrector(p) => {
                guard(&p.predicted.z, k, lambda)?;
                let g2 = cfg_evaluate(model, &p.predicted.z, p.predicted.t, c_tar, s, Branch::Target)?;
                tar_evals += g2.model_calls;
                let v2 = if lambda == 0.0 {
                    g2.eval
                } else if refreshed {
                    // the source state at the predicted time is known
                    // exactly, and the next step can reuse its field
                    let e = cfg_evaluate(model, &z_src_next.z, z_src_next.t, c_src, src_scale, Branch::Source)?;
                    src_evals += e.model_calls;
                    let v2 = rectify(&g2.eval, &v_gt, &e.eval, lambda)?;
                    prefetched = Some(e.eval);
                    v2
                } else {
                    let v_src = cache.cached_v_src.as_ref().expect("reused above");
                    rectify(&g2.eval, &v_gt, v_src, lambda)?
                };
                p.correct(&v2.v)?
            }
        };
        z_src = z_src_next;
        guard(&z_tar.z, k, lambda)?;

        steps.push(StepRecord {
            step: k,
            t,
            dt,
            v_tar_rms: rms(&v_tar.v),
            v_src_rms,
            cache_hit: hit,
            d_cum,
            src_evals,
            tar_evals,
        });
    }

    let trace = EditTrace {
        steps,
        src_evals,
        tar_evals,
        src_calls_per_eval,
        lambda,
        wall_time: started.elapsed(),
    };
    Ok((z_tar.z, trace))
}

/// Edits `x_src` so it starts from `x_edit_1`.
///
/// `tokens` are the `(source, target)` content tokens. The result is
/// clamped to `[-1, 1]` once, after integration.
pub fn edit<M: VectorField + ?Sized>(
    model: &M,
    x_src: &FrameSequence,
    x_edit_1: &ArrayView3<'_, f32>,
    tokens: (usize, usize),
    cfg: &EditConfig,
) -> Result<(FrameSequence, EditTrace)> {
    cfg.validate()?;
    let eps = gaussian_noise(x_src.shape(), cfg.seed)?;
    let eps_m = if cfg.smpi.needs_flow() && x_src.len() >= 2 {
        let flow = estimate_flow(x_src)?;
        correlated_noise(&eps, &flow, cfg.smpi.alpha, cfg.smpi.recursive_noise)?
    } else {
        eps
    };
    let c_src = build_source_condition(x_src, tokens.0)?;
    let c_tar = build_target_condition(x_edit_1, x_src, cfg.smpi.beta, tokens.1)?;
    let (z, trace) = run_parallel_odes(model, x_src.as_array(), &eps_m, &c_src, &c_tar, cfg)?;
    Ok((FrameSequence::new(z)?, trace))
}

/// Sampling settings for plain conditional generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub guidance_scale: f32,
    pub num_steps: usize,
    pub seed: u64,
    pub solver: SolverKind,
    pub schedule: ScheduleKind,
}

impl From<&EditConfig> for SampleConfig {
    fn from(c: &EditConfig) -> Self {
        Self {
            guidance_scale: c.guidance_scale,
            num_steps: c.num_steps,
            seed: c.seed,
            solver: c.solver,
            schedule: c.schedule,
        }
    }
}

/// Generates a clip from pure noise at `t = 1` under condition `c`.
pub fn sample<M: VectorField + ?Sized>(
    model: &M,
    c: &Condition,
    shape: [usize; 4],
    cfg: &SampleConfig,
) -> Result<FrameSequence> {
    let schedule = TimestepSchedule::new(cfg.schedule, 1.0, cfg.num_steps)?;
    let mut z = LatentState {
        z: gaussian_noise(shape, cfg.seed)?.eps,
        t: 1.0,
    };
    for (k, (t, dt)) in schedule.intervals().enumerate() {
        z.t = t;
        let v = cfg_evaluate(model, &z.z, t, c, cfg.guidance_scale, Branch::Target)?.eval;
        z = match solver_step(cfg.solver, &z, &v, dt)? {
            SolverPhase::Done(z) => z,
            SolverPhase::NeedsCorrector(p) => {
                let v2 = cfg_evaluate(
                    model,
                    &p.predicted.z,
                    p.predicted.t,
                    c,
                    cfg.guidance_scale,
                    Branch::Target,
                )?;
                p.correct(&v2.eval.v)?
            }
        };
        guard(&z.z, k, 0.0)?;
    }
    FrameSequence::new(z.z)
}

/// Runs the editing ODEs with exact Gaussian fields on both branches.
///
/// Guidance is off and no flow is estimated. For equal variances and
/// `lambda = 1` the edit converges to the optimal-transport map
/// `x_src + (mu_tar - mu_src)` as the step count grows, provided the run
/// starts from pure noise (`t_max = 1`). The output is not clamped.
pub fn edit_gaussian_analytic(
    src: &AnalyticGaussianSpec,
    tar: &AnalyticGaussianSpec,
    x_src: &Array4<f32>,
    cfg: &EditConfig,
) -> Result<(Array4<f32>, EditTrace)> {
    if src.variance() != tar.variance() {
        return Err(Error::Precondition(format!(
            "source and target variances differ ({} vs {})",
            src.variance(),
            tar.variance()
        )));
    }
    let cfg = EditConfig {
        guidance_scale: 1.0,
        symmetric_guidance: false,
        ..*cfg
    };
    cfg.validate()?;
    let shape = shape_of(x_src);
    let [l, c, h, w] = shape;
    let model = AnalyticGaussianModel::new(vec![src.clone(), tar.clone()]);
    let cond = |token| Condition::new(Array3::zeros((c, h, w)), Array4::zeros((l - 1, c, h, w)), token);
    let eps = gaussian_noise(shape, cfg.seed)?;
    run_parallel_odes(&model, x_src, &eps, &cond(0)?, &cond(1)?, &cfg)
}
