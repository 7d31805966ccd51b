//! Deviation caching for the source branch.
//!
//! The source prediction changes slowly when the target prediction does, so
//! it is reused until the accumulated variation of the target vector since
//! the last fresh source evaluation exceeds a threshold `delta`. Variation
//! is the mean absolute difference between consecutive target vectors, one
//! term per executed step.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array4, Zip};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure_same_shape, Error, Result};
use crate::model::VectorFieldEval;

/// Threshold reported in the original large-model setting.
pub const LARGE_MODEL_DELTA: f32 = 0.5;

/// Threshold tuned once on the toy editing suite (see the `cache_sweep`
/// example).
pub const DESK_DELTA: f32 = 0.3;

/// `delta` or caching switched off. `Threshold(f32::INFINITY)` caches the
/// first source prediction for the whole run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CacheDelta {
    Off,
    Threshold(f32),
}

impl CacheDelta {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CacheDelta::Threshold(d) if d.is_nan() || d < 0.0 => Err(Error::Domain {
                name: "delta",
                value: d as f64,
                expected: "[0, inf] or off",
            }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CacheDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheDelta::Off => f.write_str("off"),
            CacheDelta::Threshold(d) if d.is_infinite() => f.write_str("inf"),
            CacheDelta::Threshold(d) => write!(f, "{d}"),
        }
    }
}

impl FromStr for CacheDelta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let d = match s.trim() {
            "off" => return Ok(CacheDelta::Off),
            "inf" => f32::INFINITY,
            v => v
                .parse::<f32>()
                .map_err(|_| Error::Usage(format!("delta must be a number, `inf` or `off`, got `{s}`")))?,
        };
        let d = CacheDelta::Threshold(d);
        d.validate()?;
        Ok(d)
    }
}

impl Serialize for CacheDelta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CacheDelta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => {
                let c = CacheDelta::Threshold(v as f32);
                c.validate().map_err(serde::de::Error::custom)?;
                Ok(c)
            }
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheDecision {
    Reuse,
    Refresh,
}

/// Mean absolute difference between two target vectors.
pub fn variation(now: &Array4<f32>, prev: &Array4<f32>) -> Result<f64> {
    ensure_same_shape("cache variation", now.shape(), prev.shape())?;
    let mut sum = 0.0f64;
    Zip::from(now).and(prev).for_each(|&a, &b| sum += (a - b).abs() as f64);
    Ok(sum / now.len().max(1) as f64)
}

#[derive(Debug, Clone, Default)]
pub struct CacheState {
    /// Time of the last fresh source evaluation.
    pub t_p: Option<f32>,
    pub cached_v_src: Option<VectorFieldEval>,
    pub prev_v_tar: Option<Array4<f32>>,
    /// Variation accumulated since `t_p`.
    pub d_cum: f64,
    pub hits: usize,
    pub misses: usize,
}

impl CacheState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the variation between two consecutive target vectors and
    /// returns the added term.
    pub fn accumulate(&mut self, v_tar_now: &Array4<f32>, v_tar_prev: &Array4<f32>) -> Result<f64> {
        let term = variation(v_tar_now, v_tar_prev)?;
        self.d_cum += term;
        Ok(term)
    }

    /// Accumulates against the previously observed target vector, if any,
    /// and remembers `v_tar` for the next step.
    pub fn observe_target(&mut self, v_tar: &Array4<f32>) -> Result<()> {
        if let Some(prev) = self.prev_v_tar.take() {
            self.accumulate(v_tar, &prev)?;
        }
        self.prev_v_tar = Some(v_tar.clone());
        Ok(())
    }

    pub fn decide(&self, delta: CacheDelta) -> CacheDecision {
        match (delta, &self.cached_v_src) {
            (CacheDelta::Threshold(d), Some(_)) if self.d_cum <= d as f64 => CacheDecision::Reuse,
            _ => CacheDecision::Refresh,
        }
    }

    /// Stores a fresh source prediction and resets the accumulator.
    pub fn refresh(&mut self, v_src: VectorFieldEval) {
        self.t_p = Some(v_src.t);
        self.cached_v_src = Some(v_src);
        self.d_cum = 0.0;
        self.misses += 1;
    }

    /// The cached prediction, counted as a hit.
    pub fn reuse(&mut self) -> Result<&VectorFieldEval> {
        self.hits += 1;
        self.cached_v_src
            .as_ref()
            .ok_or_else(|| Error::Precondition("no cached source prediction".into()))
    }
}

/// Source-evaluation savings of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CacheReport {
    pub src_evals: usize,
    pub baseline_src_evals: usize,
    pub hits: usize,
    pub hit_rate: f64,
    /// `1 - src_evals / baseline_src_evals`.
    pub reduction: f64,
}

impl fmt::Display for CacheReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "source evals {}/{} (hit rate {:.1}%, reduction {:.1}%)",
            self.src_evals,
            self.baseline_src_evals,
            100.0 * self.hit_rate,
            100.0 * self.reduction
        )
    }
}

/// Summarizes a finished edit against the cache-disabled baseline, which
/// evaluates the source branch once per step.
pub fn cache_report(trace: &crate::vfr_sd::EditTrace) -> CacheReport {
    let steps = trace.steps.len();
    let per_step = trace.src_calls_per_eval.max(1);
    let baseline = steps * per_step;
    let hits = trace.steps.iter().filter(|s| s.cache_hit).count();
    CacheReport {
        src_evals: trace.src_evals,
        baseline_src_evals: baseline,
        hits,
        hit_rate: if steps == 0 { 0.0 } else { hits as f64 / steps as f64 },
        reduction: if baseline == 0 {
            0.0
        } else {
            1.0 - trace.src_evals as f64 / baseline as f64
        },
    }
}
