//! Vector-field models `v(z_t, t, c)`.
//!
//! A model predicts the flow-matching velocity, the expected `noise - data`
//! direction at `(z_t, t)`. Two realizations live here: the closed-form
//! [`AnalyticGaussianModel`] used as an oracle, and the trainable
//! [`ToyFlowNet`].

mod analytic;
mod layers;
mod toy;

pub use analytic::{analytic_gaussian_field, AnalyticGaussianModel, AnalyticGaussianSpec, GaussianMean};
pub use toy::{Architecture, ForwardTape, ModelCheckpoint, OptimizerRecord, ParamId, Real, ToyFlowNet, ToyParams};

use ndarray::{Array3, Array4, Zip};

use crate::error::{ensure_same_shape, Error, Result};
use crate::tensor::{ensure_finite, shape_of, FrameSequence, NoiseTensor};

/// Conditioning input of an image-to-video model.
///
/// `first_frame` is the frame the video should start from, `padded_frames`
/// fill the remaining `L - 1` conditioning slots (all zero for plain
/// image-to-video), and `content_token` is a small class id standing in for
/// a text prompt. When `uncond` is set the model must ignore all three.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub first_frame: Array3<f32>,
    pub padded_frames: Array4<f32>,
    pub content_token: usize,
    pub uncond: bool,
}

impl Condition {
    pub fn new(first_frame: Array3<f32>, padded_frames: Array4<f32>, content_token: usize) -> Result<Self> {
        let f = first_frame.shape();
        let p = padded_frames.shape();
        if f[..] != p[1..] {
            return Err(Error::ShapeMismatch {
                context: "condition padding",
                left: f.to_vec(),
                right: p.to_vec(),
            });
        }
        Ok(Self {
            first_frame,
            padded_frames,
            content_token,
            uncond: false,
        })
    }

    /// Number of frames of the video this condition describes.
    pub fn frames(&self) -> usize {
        self.padded_frames.shape()[0] + 1
    }

    /// The same condition with every input dropped.
    pub fn unconditional(&self) -> Self {
        Self {
            uncond: true,
            ..self.clone()
        }
    }
}

/// Which of the two parallel ODEs a prediction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldEval {
    pub v: Array4<f32>,
    pub t: f32,
    pub branch: Branch,
}

/// A conditional vector-field model.
pub trait VectorField {
    /// Predicts `v(z, t, c)` for `t` in `(0, 1]`.
    fn predict(&self, z: &Array4<f32>, t: f32, c: &Condition) -> Result<Array4<f32>>;
}

impl<M: VectorField + ?Sized> VectorField for &M {
    fn predict(&self, z: &Array4<f32>, t: f32, c: &Condition) -> Result<Array4<f32>> {
        (**self).predict(z, t, c)
    }
}

fn check_inputs(z: &Array4<f32>, t: f32) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain {
            name: "t",
            value: t as f64,
            expected: "(0, 1]",
        });
    }
    ensure_finite(z, "model input")
}

/// One model evaluation with input validation.
pub fn evaluate<M: VectorField + ?Sized>(
    model: &M,
    z: &Array4<f32>,
    t: f32,
    c: &Condition,
    branch: Branch,
) -> Result<VectorFieldEval> {
    check_inputs(z, t)?;
    let v = model.predict(z, t, c)?;
    ensure_same_shape("model output", &shape_of(&v), &shape_of(z))?;
    ensure_finite(&v, "model output")?;
    Ok(VectorFieldEval { v, t, branch })
}

/// Result of a guided evaluation plus how many model calls it took.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedEval {
    pub eval: VectorFieldEval,
    pub model_calls: usize,
}

/// Classifier-free guidance `v_u + s (v_c - v_u)`.
///
/// `s = 1` returns the conditional prediction and `s = 0` the unconditional
/// one, each with a single model call; any other scale costs two.
pub fn cfg_evaluate<M: VectorField + ?Sized>(
    model: &M,
    z: &Array4<f32>,
    t: f32,
    c: &Condition,
    guidance_scale: f32,
    branch: Branch,
) -> Result<GuidedEval> {
    if !(guidance_scale >= 0.0 && guidance_scale.is_finite()) {
        return Err(Error::Domain {
            name: "guidance_scale",
            value: guidance_scale as f64,
            expected: "[0, inf)",
        });
    }
    if guidance_scale == 1.0 {
        let eval = evaluate(model, z, t, c, branch)?;
        return Ok(GuidedEval { eval, model_calls: 1 });
    }
    let uncond = evaluate(model, z, t, &c.unconditional(), branch)?;
    if guidance_scale == 0.0 {
        return Ok(GuidedEval {
            eval: uncond,
            model_calls: 1,
        });
    }
    let cond = evaluate(model, z, t, c, branch)?;
    let mut v = uncond.v;
    Zip::from(&mut v)
        .and(&cond.v)
        .for_each(|u, &c| *u += guidance_scale * (c - *u));
    Ok(GuidedEval {
        eval: VectorFieldEval { v, t, branch },
        model_calls: 2,
    })
}

/// The constant velocity `eps - x0` of the straight path through `x0`.
pub fn ground_truth_vector(x0: &FrameSequence, eps: &NoiseTensor) -> Result<Array4<f32>> {
    ensure_same_shape("ground truth vector", &x0.shape(), &eps.shape())?;
    Ok(&eps.eps - x0.as_array())
}
