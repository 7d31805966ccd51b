//! Flow-matching training of the toy network.
//!
//! Each step draws clips, drops their condition with probability `dropout`
//! so guidance has an unconditional branch to work with, draws
//! `t ~ U(0, 1]` and fresh noise, and regresses the network onto
//! `eps - x0` at `z_t = (1 - t) x0 + t eps`.

pub mod data;

use ndarray::{Array2, Array4, Zip};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::model::{Condition, ModelCheckpoint, OptimizerRecord, Real, ToyFlowNet, ToyParams};
use crate::rng::{normal_array, stream_rng, Stream};
use data::{sample_training_pair, training_condition, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Probability of training a sample unconditionally.
    pub dropout: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Emit a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 4,
            steps: 2000,
            dropout: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain {
                name: "learning_rate",
                value: self.learning_rate,
                expected: "[0, inf)",
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Domain {
                name: "dropout",
                value: self.dropout,
                expected: "[0, 1)",
            });
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Domain {
                    name,
                    value: b,
                    expected: "[0, 1)",
                });
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Domain {
                name: "batch_size",
                value: 0.0,
                expected: ">= 1",
            });
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerRecord {
        OptimizerRecord {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Adam over a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    record: OptimizerRecord,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(record: OptimizerRecord, len: usize) -> Self {
        Self {
            record,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        let r = self.record;
        if r.learning_rate == 0.0 {
            return;
        }
        self.t += 1;
        let c1 = 1.0 - r.beta1.powi(self.t);
        let c2 = 1.0 - r.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g as f64;
            *m = r.beta1 * *m + (1.0 - r.beta1) * g;
            *v = r.beta2 * *v + (1.0 - r.beta2) * g * g;
            let update = r.learning_rate * (*m / c1) / ((*v / c2).sqrt() + r.epsilon);
            *p = (*p as f64 - update) as f32;
        }
    }
}

/// `t = 1 - u` with `u ~ U[0, 1)`, so `t` lies in `(0, 1]`.
pub fn sample_timestep(rng: &mut impl Rng) -> f32 {
    let t = (1.0 - rng.random::<f64>()) as f32;
    t.max(f32::MIN_POSITIVE)
}

fn interpolate(x0: &Array4<f32>, eps: &Array4<f32>, t: f32) -> Array4<f32> {
    let mut z = Array4::zeros(x0.raw_dim());
    Zip::from(&mut z)
        .and(x0)
        .and(eps)
        .for_each(|z, &x, &e| *z = (1.0 - t) * x + t * e);
    z
}

fn check_loss_inputs(x0: &Array4<f32>, eps: &Array4<f32>, t: f32) -> Result<()> {
    ensure_same_shape("flow matching noise", x0.shape(), eps.shape())?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain {
            name: "t",
            value: t as f64,
            expected: "(0, 1]",
        });
    }
    Ok(())
}

/// Mean squared error between `v(z_t, t, c)` and `eps - x0`, plus the
/// residual used by the gradient.
fn residual<T: Real>(
    net: &ToyFlowNet<T>,
    x0: &Array4<f32>,
    c: &Condition,
    t: f32,
    eps: &Array4<f32>,
) -> Result<(f64, Array2<T>, crate::model::ForwardTape<T>)> {
    check_loss_inputs(x0, eps, t)?;
    let z = interpolate(x0, eps, t);
    let tape = net.forward(&z, t, c)?;
    let target = net.pack_video(&(eps - x0));
    let r = &tape.out - &target;
    let loss = r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / r.len() as f64;
    Ok((loss, r, tape))
}

/// Flow-matching loss of one sample.
pub fn flow_matching_loss<T: Real>(
    net: &ToyFlowNet<T>,
    x0: &Array4<f32>,
    c: &Condition,
    t: f32,
    eps: &Array4<f32>,
) -> Result<f64> {
    Ok(residual(net, x0, c, t, eps)?.0)
}

/// Flow-matching loss of one sample and its parameter gradient.
pub fn flow_matching_loss_grad<T: Real>(
    net: &ToyFlowNet<T>,
    x0: &Array4<f32>,
    c: &Condition,
    t: f32,
    eps: &Array4<f32>,
) -> Result<(f64, ToyParams<T>)> {
    let (loss, r, tape) = residual(net, x0, c, t, eps)?;
    let scale = T::of(2.0 / r.len() as f64);
    let dout = r.mapv(|v| v * scale);
    Ok((loss, net.backward(&tape, &dout.view())))
}

/// Progress reported by [`train_with`].
pub enum TrainEvent<'a> {
    Step { step: usize, loss: f64 },
    Checkpoint(&'a ModelCheckpoint),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

pub fn train(init: ToyParams<f32>, dataset: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(init, dataset, cfg, |_| Ok(()))
}

/// Trains from `init`, calling `on_event` after every step and at every
/// checkpoint interval.
///
/// Fully determined by `(init, dataset, cfg)`. A non-finite loss aborts
/// with the step index.
pub fn train_with(
    init: ToyParams<f32>,
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = init.architecture().video_shape();
    let mut net = ToyFlowNet::new(init);
    let mut adam = Adam::new(cfg.optimizer(), net.params.as_slice().len());
    let mut rng: ChaCha20Rng = stream_rng(cfg.seed, Stream::Train);
    let mut losses = Vec::with_capacity(cfg.steps);
    let snapshot = |net: &ToyFlowNet<f32>, step: usize| ModelCheckpoint {
        params: net.params.clone(),
        step: step as u64,
        seed: cfg.seed,
        optimizer: Some(cfg.optimizer()),
    };

    for step in 0..cfg.steps {
        let mut grad = vec![0.0f32; adam.m.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (x0, mut c) = sample_training_pair(dataset, &mut rng)?;
            if rng.random::<f64>() < cfg.dropout {
                c = c.unconditional();
            }
            let t = sample_timestep(&mut rng);
            let eps = normal_array(shape, &mut rng);
            let (l, g) = flow_matching_loss_grad(&net, x0.as_array(), &c, t, &eps)?;
            loss += l;
            grad.iter_mut().zip(g.as_slice()).for_each(|(a, &b)| *a += b);
        }
        let inv = 1.0 / cfg.batch_size as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);
        on_event(TrainEvent::Step { step, loss })?;
        adam.step(net.params.as_mut_slice(), &grad);
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 && step + 1 < cfg.steps {
            on_event(TrainEvent::Checkpoint(&snapshot(&net, step + 1)))?;
        }
    }
    let checkpoint = snapshot(&net, cfg.steps);
    on_event(TrainEvent::Checkpoint(&checkpoint))?;
    Ok(TrainOutcome { checkpoint, losses })
}

/// Average loss over a fixed set of `n` draws per clip, independent of the
/// training stream. Conditions are always kept.
pub fn evaluation_loss(net: &ToyFlowNet<f32>, dataset: &SyntheticDataset, n: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Suite);
    let shape = net.architecture().video_shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in &dataset.clips {
        let c = training_condition(clip)?;
        for _ in 0..n {
            let t = sample_timestep(&mut rng);
            let eps = normal_array(shape, &mut rng);
            total += flow_matching_loss(net, clip.frames.as_array(), &c, t, &eps)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
