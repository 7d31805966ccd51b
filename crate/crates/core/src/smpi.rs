//! Structure- and motion-preserving initialization.
//!
//! Three pieces: the boundary state both ODE branches start from, the target
//! condition with the source frames faintly embedded in the padding slots,
//! and noise whose frames are correlated along the source optical flow.

use ndarray::{Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::model::Condition;
use crate::optical_flow::{warp_noise, FlowField};
use crate::tensor::{FrameSequence, LatentState, NoiseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmpiConfig {
    pub t_max: f32,
    /// Embedding scale of the source frames in the target condition.
    pub beta: f32,
    /// Weight of fresh noise against flow-warped noise.
    pub alpha: f32,
    /// Warp the previous *modulated* noise instead of the raw one.
    #[serde(default)]
    pub recursive_noise: bool,
}

impl Default for SmpiConfig {
    fn default() -> Self {
        Self {
            t_max: 0.95,
            beta: 0.025,
            alpha: 0.95,
            recursive_noise: false,
        }
    }
}

impl SmpiConfig {
    /// Everything off: pure-noise boundary, no padding, independent noise.
    pub fn disabled() -> Self {
        Self {
            t_max: 1.0,
            beta: 0.0,
            alpha: 1.0,
            recursive_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0 && self.t_max <= 1.0) {
            return Err(Error::Domain {
                name: "t_max",
                value: self.t_max as f64,
                expected: "(0, 1]",
            });
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain {
                name: "beta",
                value: self.beta as f64,
                expected: "[0, inf)",
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Domain {
                name: "alpha",
                value: self.alpha as f64,
                expected: "[0, 1]",
            });
        }
        Ok(())
    }

    /// Whether the noise needs the source flow at all.
    pub fn needs_flow(&self) -> bool {
        self.alpha < 1.0
    }
}

/// Blends each frame's noise with the flow-warped noise of the previous
/// frame:
///
/// ```text
/// e_1^m = e_1
/// e_i^m = ((1 - a) warp(e_{i-1}, o_i) + a e_i) / sqrt((1 - a)^2 + a^2)
/// ```
///
/// `e_{i-1}` is the raw noise unless `recursive` is set, in which case the
/// already modulated `e_{i-1}^m` is warped.
pub fn correlated_noise(eps: &NoiseTensor, flow: &FlowField, alpha: f32, recursive: bool) -> Result<NoiseTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain {
            name: "alpha",
            value: alpha as f64,
            expected: "[0, 1]",
        });
    }
    let [l, _, h, w] = eps.shape();
    ensure_same_shape("correlated noise flow", &[l - 1, 2, h, w], flow.as_array().shape())?;
    if alpha == 1.0 {
        return Ok(eps.clone());
    }
    let keep = 1.0 - alpha;
    let norm = (keep * keep + alpha * alpha).sqrt();
    let mut out = eps.eps.clone();
    for i in 1..l {
        let source = if recursive { &out } else { &eps.eps };
        let warped = warp_noise(&source.index_axis(Axis(0), i - 1), &flow.pair(i - 1))?;
        Zip::from(out.index_axis_mut(Axis(0), i))
            .and(&warped)
            .and(eps.eps.index_axis(Axis(0), i))
            .for_each(|o, &wv, &e| *o = (keep * wv + alpha * e) / norm);
    }
    Ok(NoiseTensor {
        eps: out,
        seed: eps.seed,
    })
}

/// `z = (1 - t_max) x_src + t_max eps_m` at time `t_max`.
pub fn init_boundary(x_src: &Array4<f32>, eps_m: &NoiseTensor, t_max: f32) -> Result<LatentState> {
    ensure_same_shape("boundary", x_src.shape(), eps_m.eps.shape())?;
    let mut z = Array4::zeros(x_src.raw_dim());
    Zip::from(&mut z)
        .and(x_src)
        .and(&eps_m.eps)
        .for_each(|z, &x, &e| *z = (1.0 - t_max) * x + t_max * e);
    LatentState::new(z, t_max)
}

/// Target condition: the edited first frame plus `beta` times source
/// frames `2..L` in the padding slots.
pub fn build_target_condition(
    x_edit_1: &ArrayView3<'_, f32>,
    x_src: &FrameSequence,
    beta: f32,
    token: usize,
) -> Result<Condition> {
    let [l, c, h, w] = x_src.shape();
    ensure_same_shape("edited first frame", &[c, h, w], x_edit_1.shape())?;
    let padded = if beta == 0.0 {
        Array4::zeros((l - 1, c, h, w))
    } else {
        x_src.as_array().slice(ndarray::s![1.., .., .., ..]).mapv(|v| beta * v)
    };
    Condition::new(x_edit_1.to_owned(), padded, token)
}

/// Source condition: the original first frame with empty padding.
pub fn build_source_condition(x_src: &FrameSequence, token: usize) -> Result<Condition> {
    let [l, c, h, w] = x_src.shape();
    Condition::new(x_src.frame(0).to_owned(), Array4::zeros((l - 1, c, h, w)), token)
}
