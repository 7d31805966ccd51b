use ndarray::{Array4, Zip};

use super::{Condition, VectorField};
use crate::error::{Error, Result};

/// Mean of an analytic Gaussian: a scalar broadcast to every element, or a
/// full `[L, C, H, W]` array.
#[derive(Debug, Clone, PartialEq)]
pub enum GaussianMean {
    Scalar(f32),
    Array(Array4<f32>),
}

/// Data distribution `N(mean, variance * I)` with a closed-form flow field.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianSpec {
    pub mean: GaussianMean,
    variance: f64,
}

impl AnalyticGaussianSpec {
    pub fn new(mean: GaussianMean, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Domain {
                name: "variance",
                value: variance,
                expected: "(0, inf)",
            });
        }
        Ok(Self { mean, variance })
    }

    pub fn scalar(mean: f32, variance: f64) -> Result<Self> {
        Self::new(GaussianMean::Scalar(mean), variance)
    }

    /// The zero-variance limit: every sample equals `mean`, and the field is
    /// `(z - mean) / t`.
    pub fn point_mass(mean: GaussianMean) -> Self {
        Self { mean, variance: 0.0 }
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    fn mean_at(&self, idx: (usize, usize, usize, usize)) -> f64 {
        match &self.mean {
            GaussianMean::Scalar(m) => *m as f64,
            GaussianMean::Array(a) => a[idx] as f64,
        }
    }
}

/// Posterior mean `E[x0 | z_t = z]` for `x0 ~ N(mu, var)` and
/// `z_t = (1 - t) x0 + t eps`.
pub(crate) fn posterior_mean(mu: f64, var: f64, z: f64, t: f64) -> f64 {
    let s = 1.0 - t;
    (mu * t * t + var * s * z) / (t * t + var * s * s)
}

/// Exact flow-matching field `(z - E[x0 | z_t]) / t` of a Gaussian data
/// distribution, applied elementwise.
pub fn analytic_gaussian_field(spec: &AnalyticGaussianSpec, z: &Array4<f32>, t: f32) -> Result<Array4<f32>> {
    if t == 0.0 {
        return Err(Error::Singularity);
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain {
            name: "t",
            value: t as f64,
            expected: "(0, 1]",
        });
    }
    if let GaussianMean::Array(m) = &spec.mean {
        crate::error::ensure_same_shape("gaussian mean", m.shape(), z.shape())?;
    }
    let t = t as f64;
    let mut out = Array4::zeros(z.raw_dim());
    Zip::indexed(&mut out).and(z).for_each(|idx, o, &zv| {
        let zv = zv as f64;
        let e = posterior_mean(spec.mean_at(idx), spec.variance, zv, t);
        *o = ((zv - e) / t) as f32;
    });
    Ok(out)
}

/// One analytic Gaussian per content token.
///
/// There is no unconditional distribution, so only guidance scale 1 (which
/// skips the unconditional call) can be used with this model.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianModel {
    pub specs: Vec<AnalyticGaussianSpec>,
}

impl AnalyticGaussianModel {
    pub fn new(specs: Vec<AnalyticGaussianSpec>) -> Self {
        Self { specs }
    }
}

impl VectorField for AnalyticGaussianModel {
    fn predict(&self, z: &Array4<f32>, t: f32, c: &Condition) -> Result<Array4<f32>> {
        if c.uncond {
            return Err(Error::Precondition(
                "analytic Gaussian model has no unconditional branch".into(),
            ));
        }
        let spec = self.specs.get(c.content_token).ok_or_else(|| {
            Error::Precondition(format!(
                "content token {} has no analytic spec ({} defined)",
                c.content_token,
                self.specs.len()
            ))
        })?;
        analytic_gaussian_field(spec, z, t)
    }
}
