//! Timestep schedules for the probability-flow ODE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the interval `[0, t_max]` is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScheduleKind {
    /// Uniform spacing.
    #[default]
    Linear,
    /// Uniform spacing warped by `t -> s t / (1 + (s - 1) t)`, which spends
    /// more steps near pure noise for `s > 1`.
    Shifted { shift: f32 },
}

/// Strictly decreasing timesteps `t_max = t_0 > t_1 > ... > t_N = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSchedule {
    steps: Vec<f32>,
}

impl TimestepSchedule {
    pub fn new(kind: ScheduleKind, t_max: f32, num_steps: usize) -> Result<Self> {
        let linear = linear_schedule(t_max, num_steps)?;
        match kind {
            ScheduleKind::Linear => Ok(linear),
            ScheduleKind::Shifted { shift } => {
                if !(shift.is_finite() && shift > 0.0) {
                    return Err(Error::Domain {
                        name: "shift",
                        value: shift as f64,
                        expected: "(0, inf)",
                    });
                }
                // The warp fixes 0, so the endpoints stay t_max' and exactly 0.
                let steps = linear
                    .steps
                    .iter()
                    .map(|&t| {
                        let t = t as f64;
                        let s = shift as f64;
                        (s * t / (1.0 + (s - 1.0) * t)) as f32
                    })
                    .collect();
                Ok(Self { steps })
            }
        }
    }

    /// All timesteps, including the terminal 0.
    pub fn timesteps(&self) -> &[f32] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn t_max(&self) -> f32 {
        self.steps[0]
    }

    /// `(t_k, dt_k)` for every step, where `dt_k = t_k - t_{k+1} > 0`.
    pub fn intervals(&self) -> impl Iterator<Item = (f32, f32)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[0] - w[1]))
    }
}

/// `num_steps + 1` uniformly spaced timesteps from `t_max` down to exactly 0.
pub fn linear_schedule(t_max: f32, num_steps: usize) -> Result<TimestepSchedule> {
    if !(t_max > 0.0 && t_max <= 1.0) {
        return Err(Error::Domain {
            name: "t_max",
            value: t_max as f64,
            expected: "(0, 1]",
        });
    }
    if num_steps == 0 {
        return Err(Error::Domain {
            name: "num_steps",
            value: 0.0,
            expected: "[1, inf)",
        });
    }
    let n = num_steps as f64;
    let steps = (0..=num_steps)
        .map(|k| (t_max as f64 * (num_steps - k) as f64 / n) as f32)
        .collect();
    Ok(TimestepSchedule { steps })
}
