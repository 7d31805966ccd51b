//! Dense video tensors.
//!
//! Every video-shaped value in the crate is an `[L, C, H, W]` array of `f32`
//! (frames, channels, rows, columns). The newtypes here only add the
//! invariants each role needs; the raw arrays stay accessible.

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Shape of a video tensor as `[frames, channels, height, width]`.
pub type Shape4 = [usize; 4];

pub(crate) fn check_shape(shape: Shape4) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "all dimensions must be at least 1".into(),
        });
    }
    Ok(())
}

pub(crate) fn shape_of(a: &Array4<f32>) -> Shape4 {
    let s = a.shape();
    [s[0], s[1], s[2], s[3]]
}

pub(crate) fn ensure_finite(a: &Array4<f32>, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericInput(what))
    }
}

/// A video clip with pixel values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Array4<f32>,
}

impl FrameSequence {
    /// Wraps `frames`, clamping every element into `[-1, 1]`.
    ///
    /// Rejects empty dimensions and non-finite values.
    pub fn new(mut frames: Array4<f32>) -> Result<Self> {
        check_shape(shape_of(&frames))?;
        ensure_finite(&frames, "frame sequence")?;
        frames.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Ok(Self { frames })
    }

    pub fn from_frames(frames: &[Array3<f32>]) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidShape {
                shape: vec![0],
                reason: "no frames".into(),
            });
        };
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).map_err(|_| Error::ShapeMismatch {
            context: "from_frames",
            left: first.shape().to_vec(),
            right: frames
                .iter()
                .find(|f| f.shape() != first.shape())
                .map(|f| f.shape().to_vec())
                .unwrap_or_default(),
        })?;
        Self::new(stacked)
    }

    pub fn shape(&self) -> Shape4 {
        shape_of(&self.frames)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), i)
    }

    pub fn as_array(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_array(self) -> Array4<f32> {
        self.frames
    }
}

/// The evolving ODE variable of one branch together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array4<f32>,
    pub t: f32,
}

impl LatentState {
    pub fn new(z: Array4<f32>, t: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                name: "t",
                value: t as f64,
                expected: "[0, 1]",
            });
        }
        ensure_finite(&z, "latent")?;
        Ok(Self { z, t })
    }

    pub fn shape(&self) -> Shape4 {
        shape_of(&self.z)
    }

    pub fn max_abs(&self) -> f32 {
        self.z.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Standard-normal noise together with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    pub eps: Array4<f32>,
    pub seed: u64,
}

impl NoiseTensor {
    pub fn shape(&self) -> Shape4 {
        shape_of(&self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps_into_unit_range() {
        let a = Array4::from_shape_vec((1, 1, 1, 3), vec![-3.0, 0.25, 7.0]).unwrap();
        let seq = FrameSequence::new(a).unwrap();
        assert_eq!(
            seq.as_array().iter().copied().collect::<Vec<_>>(),
            vec![-1.0, 0.25, 1.0]
        );
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let a = Array4::from_elem((1, 1, 1, 1), f32::NAN);
        assert!(matches!(FrameSequence::new(a), Err(Error::NumericInput(_))));
        let a = Array4::<f32>::zeros((0, 1, 2, 2));
        assert!(matches!(FrameSequence::new(a), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn latent_timestep_must_lie_in_unit_interval() {
        let z = Array4::<f32>::zeros((1, 1, 1, 1));
        assert!(LatentState::new(z.clone(), 1.0).is_ok());
        assert!(LatentState::new(z, 1.5).is_err());
    }

    #[test]
    fn from_frames_stacks_along_time() {
        let f = Array3::<f32>::from_elem((3, 2, 2), 0.5);
        let seq = FrameSequence::from_frames(&[f.clone(), f]).unwrap();
        assert_eq!(seq.shape(), [2, 3, 2, 2]);
        let bad = FrameSequence::from_frames(&[Array3::<f32>::zeros((3, 2, 2)), Array3::<f32>::zeros((1, 2, 2))]);
        assert!(bad.is_err());
    }
}
