//! A small conditional video flow network with a hand-written backward pass.
//!
//! Layout, per clip of `L` frames at `H x W`:
//!
//! ```text
//! input  [z | first frame (broadcast) | conditioning slot]     3C channels
//! conv_in    3x3 spatial            + time/token/frame-position embedding, SiLU
//! temporal1  3-tap across frames,    residual SiLU
//! conv_mid   3x3 spatial            + time/token embedding, residual SiLU
//! temporal2  3-tap across frames,    residual SiLU
//! conv_out   3x3 spatial -> C       (zero-initialized)
//! ```
//!
//! The conditioning slot of frame 0 holds the first frame and frames
//! `1..L` hold the padded frames. An unconditional call zeroes both
//! conditioning inputs and swaps the content token for a learned null token.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use super::layers::Real;
use super::layers::{affine, column_sums, gather, scatter_add, silu, silu_grad, Grid, SPATIAL_3X3, TEMPORAL_3};
use super::{Condition, VectorField};
use crate::error::{Error, Result};
use crate::io::TensorBundle;
use crate::rng::{stream_rng, Stream};

/// Everything that determines the parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub num_tokens: usize,
    pub time_features: usize,
}

impl Architecture {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            hidden: 32,
            num_tokens: 8,
            time_features: 16,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.frames,
            self.channels,
            self.height,
            self.width,
            self.hidden,
            self.num_tokens,
        ];
        if dims.contains(&0) || self.time_features < 2 || !self.time_features.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: "architecture dimensions must be positive, time features even".into(),
            });
        }
        Ok(())
    }

    pub(crate) fn grid(&self) -> Grid {
        Grid {
            l: self.frames,
            h: self.height,
            w: self.width,
        }
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn num_params(&self) -> usize {
        ParamId::ALL.iter().map(|p| p.len(self)).sum()
    }
}

/// Every parameter tensor of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    ConvInW,
    ConvInB,
    TimeW,
    TimeB,
    Emb1W,
    Tok1,
    Pos1,
    Temp1W,
    Temp1B,
    MidW,
    MidB,
    Emb2W,
    Tok2,
    Temp2W,
    Temp2B,
    OutW,
    OutB,
}

impl ParamId {
    pub const ALL: [ParamId; 17] = [
        ParamId::ConvInW,
        ParamId::ConvInB,
        ParamId::TimeW,
        ParamId::TimeB,
        ParamId::Emb1W,
        ParamId::Tok1,
        ParamId::Pos1,
        ParamId::Temp1W,
        ParamId::Temp1B,
        ParamId::MidW,
        ParamId::MidB,
        ParamId::Emb2W,
        ParamId::Tok2,
        ParamId::Temp2W,
        ParamId::Temp2B,
        ParamId::OutW,
        ParamId::OutB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::ConvInW => "conv_in.weight",
            ParamId::ConvInB => "conv_in.bias",
            ParamId::TimeW => "time.weight",
            ParamId::TimeB => "time.bias",
            ParamId::Emb1W => "embed1.weight",
            ParamId::Tok1 => "embed1.token",
            ParamId::Pos1 => "embed1.position",
            ParamId::Temp1W => "temporal1.weight",
            ParamId::Temp1B => "temporal1.bias",
            ParamId::MidW => "conv_mid.weight",
            ParamId::MidB => "conv_mid.bias",
            ParamId::Emb2W => "embed2.weight",
            ParamId::Tok2 => "embed2.token",
            ParamId::Temp2W => "temporal2.weight",
            ParamId::Temp2B => "temporal2.bias",
            ParamId::OutW => "conv_out.weight",
            ParamId::OutB => "conv_out.bias",
        }
    }

    /// `[rows, cols]`; biases are `[1, n]`.
    pub fn shape(self, a: &Architecture) -> [usize; 2] {
        let (c, hd, f) = (a.channels, a.hidden, a.time_features);
        match self {
            ParamId::ConvInW => [9 * 3 * c, hd],
            ParamId::TimeW => [f, hd],
            ParamId::Emb1W | ParamId::Emb2W => [hd, hd],
            ParamId::Tok1 | ParamId::Tok2 => [a.num_tokens + 1, hd],
            ParamId::Pos1 => [a.frames, hd],
            ParamId::Temp1W | ParamId::Temp2W => [3 * hd, hd],
            ParamId::MidW => [9 * hd, hd],
            ParamId::OutW => [9 * hd, c],
            ParamId::ConvInB | ParamId::TimeB | ParamId::Temp1B | ParamId::MidB | ParamId::Temp2B => [1, hd],
            ParamId::OutB => [1, c],
        }
    }

    pub fn len(self, a: &Architecture) -> usize {
        let [r, c] = self.shape(a);
        r * c
    }

    /// Fan-in used to scale the random initialization; `None` means zeros.
    fn init_fan_in(self, a: &Architecture) -> Option<usize> {
        match self {
            ParamId::ConvInW | ParamId::TimeW | ParamId::Emb1W | ParamId::Emb2W => Some(self.shape(a)[0]),
            ParamId::Temp1W | ParamId::Temp2W | ParamId::MidW => Some(self.shape(a)[0]),
            ParamId::Tok1 | ParamId::Tok2 | ParamId::Pos1 => Some(a.hidden),
            _ => None,
        }
    }
}

/// All parameters in one flat buffer, laid out in [`ParamId::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams<T> {
    arch: Architecture,
    offsets: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> ToyParams<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut offsets = Vec::with_capacity(ParamId::ALL.len() + 1);
        let mut at = 0;
        for p in ParamId::ALL {
            offsets.push(at);
            at += p.len(&arch);
        }
        offsets.push(at);
        Ok(Self {
            arch,
            offsets,
            data: vec![T::zero(); at],
        })
    }

    /// Scaled-normal initialization from the [`Stream::Init`] stream of
    /// `seed`; biases and the output layer start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = stream_rng(seed, Stream::Init);
        for id in ParamId::ALL {
            if let Some(fan_in) = id.init_fan_in(&arch) {
                let scale = 1.0 / (fan_in as f64).sqrt();
                for v in p.slice_mut(id) {
                    *v = T::of(scale * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        Ok(p)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let i = id as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn slice(&self, id: ParamId) -> &[T] {
        &self.data[self.range(id)]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [T] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, T> {
        let [r, c] = id.shape(&self.arch);
        ArrayView2::from_shape((r, c), self.slice(id)).expect("layout")
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, T> {
        let [r, c] = id.shape(&self.arch);
        ArrayViewMut2::from_shape((r, c), self.slice_mut(id)).expect("layout")
    }

    fn row(&self, id: ParamId, r: usize) -> ArrayView1<'_, T> {
        let [_, c] = id.shape(&self.arch);
        ArrayView1::from(&self.slice(id)[r * c..(r + 1) * c])
    }

    fn row_mut(&mut self, id: ParamId, r: usize) -> ArrayViewMut1<'_, T> {
        let [_, c] = id.shape(&self.arch);
        ArrayViewMut1::from(&mut self.slice_mut(id)[r * c..(r + 1) * c])
    }

    pub fn cast<U: Real>(&self) -> ToyParams<U> {
        ToyParams {
            arch: self.arch,
            offsets: self.offsets.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_bundle(&self, meta: String) -> TensorBundle {
        let tensors = ParamId::ALL
            .iter()
            .map(|&id| {
                let data: Vec<f32> = self.slice(id).iter().map(|v| v.as_f64() as f32).collect();
                let [r, c] = id.shape(&self.arch);
                let a = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[r, c]), data).expect("layout");
                (id.name().to_owned(), a)
            })
            .collect();
        TensorBundle { meta, tensors }
    }

    pub fn from_bundle(arch: Architecture, bundle: &TensorBundle) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for id in ParamId::ALL {
            let a = bundle
                .get(id.name())
                .ok_or_else(|| Error::Setup(format!("checkpoint is missing {}", id.name())))?;
            let want = id.shape(&arch);
            if a.shape() != want {
                return Err(Error::ShapeMismatch {
                    context: id.name(),
                    left: want.to_vec(),
                    right: a.shape().to_vec(),
                });
            }
            for (d, &s) in p.slice_mut(id).iter_mut().zip(a.iter()) {
                *d = T::of(s as f64);
            }
        }
        if bundle.tensors.len() != ParamId::ALL.len() {
            return Err(Error::Setup(format!(
                "checkpoint has {} tensors, architecture expects {}",
                bundle.tensors.len(),
                ParamId::ALL.len()
            )));
        }
        Ok(p)
    }
}

/// Sinusoidal features of `t`: `[sin(1000 t f_k), cos(1000 t f_k)]` with
/// `f_k = 10000^(-k / half)`.
fn time_features<T: Real>(t: f64, n: usize) -> Array1<T> {
    let half = n / 2;
    let mut out = Array1::zeros(n);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let angle = 1000.0 * t * freq;
        out[k] = T::of(angle.sin());
        out[half + k] = T::of(angle.cos());
    }
    out
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    token: usize,
    feat: Array1<T>,
    e_pre: Array1<T>,
    e: Array1<T>,
    cols0: Array2<T>,
    a1: Array2<T>,
    cols1: Array2<T>,
    a2: Array2<T>,
    cols2: Array2<T>,
    a3: Array2<T>,
    cols3: Array2<T>,
    a4: Array2<T>,
    cols4: Array2<T>,
    /// Network output as a `[P, C]` matrix.
    pub out: Array2<T>,
}

/// The trainable conditional flow model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFlowNet<T = f32> {
    pub params: ToyParams<T>,
}

impl<T: Real> ToyFlowNet<T> {
    pub fn new(params: ToyParams<T>) -> Self {
        Self { params }
    }

    pub fn architecture(&self) -> &Architecture {
        self.params.architecture()
    }

    fn check_shapes(&self, z: &Array4<f32>, c: &Condition) -> Result<()> {
        let a = self.architecture();
        let want = a.video_shape();
        if z.shape() != want {
            return Err(Error::ShapeMismatch {
                context: "toy network input",
                left: want.to_vec(),
                right: z.shape().to_vec(),
            });
        }
        if c.first_frame.shape() != &want[1..] || c.padded_frames.shape() != [a.frames - 1, want[1], want[2], want[3]] {
            return Err(Error::ShapeMismatch {
                context: "toy network condition",
                left: want.to_vec(),
                right: c.padded_frames.shape().to_vec(),
            });
        }
        if !c.uncond && c.content_token >= a.num_tokens {
            return Err(Error::Precondition(format!(
                "content token {} out of range (model knows {})",
                c.content_token, a.num_tokens
            )));
        }
        Ok(())
    }

    /// Packs `z` and the condition into the `[P, 3C]` input matrix.
    fn pack_input(&self, z: &Array4<f32>, c: &Condition) -> Array2<T> {
        let a = self.architecture();
        let (l, ch, h, w) = (a.frames, a.channels, a.height, a.width);
        let mut x = Array2::zeros((l * h * w, 3 * ch));
        for f in 0..l {
            for y in 0..h {
                for xx in 0..w {
                    let p = (f * h + y) * w + xx;
                    for k in 0..ch {
                        x[[p, k]] = T::of(z[[f, k, y, xx]] as f64);
                        if !c.uncond {
                            let first = c.first_frame[[k, y, xx]];
                            x[[p, ch + k]] = T::of(first as f64);
                            let slot = if f == 0 {
                                first
                            } else {
                                c.padded_frames[[f - 1, k, y, xx]]
                            };
                            x[[p, 2 * ch + k]] = T::of(slot as f64);
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, z: &Array4<f32>, t: f32, c: &Condition) -> Result<ForwardTape<T>> {
        self.check_shapes(z, c)?;
        let p = &self.params;
        let a = *self.architecture();
        let g = a.grid();
        let fp = g.frame_pixels();
        let token = if c.uncond { a.num_tokens } else { c.content_token };

        let feat: Array1<T> = time_features(t as f64, a.time_features);
        let mut e_pre = feat.dot(&p.matrix(ParamId::TimeW));
        e_pre += &ArrayView1::from(p.slice(ParamId::TimeB));
        let e = e_pre.mapv(silu);

        let mut inj1 = e.dot(&p.matrix(ParamId::Emb1W));
        inj1 += &p.row(ParamId::Tok1, token);
        let mut inj2 = e.dot(&p.matrix(ParamId::Emb2W));
        inj2 += &p.row(ParamId::Tok2, token);

        let x0 = self.pack_input(z, c);
        let cols0 = gather(&x0.view(), g, &SPATIAL_3X3);
        let mut a1 = affine(&cols0.view(), &p.matrix(ParamId::ConvInW), p.slice(ParamId::ConvInB));
        for f in 0..g.l {
            let add = &inj1 + &p.row(ParamId::Pos1, f);
            for mut row in a1.slice_mut(ndarray::s![f * fp..(f + 1) * fp, ..]).rows_mut() {
                row += &add;
            }
        }
        let h1 = a1.mapv(silu);

        let cols1 = gather(&h1.view(), g, &TEMPORAL_3);
        let a2 = affine(&cols1.view(), &p.matrix(ParamId::Temp1W), p.slice(ParamId::Temp1B));
        let h2 = &h1 + &a2.mapv(silu);

        let cols2 = gather(&h2.view(), g, &SPATIAL_3X3);
        let mut a3 = affine(&cols2.view(), &p.matrix(ParamId::MidW), p.slice(ParamId::MidB));
        for mut row in a3.rows_mut() {
            row += &inj2;
        }
        let h3 = &h2 + &a3.mapv(silu);

        let cols3 = gather(&h3.view(), g, &TEMPORAL_3);
        let a4 = affine(&cols3.view(), &p.matrix(ParamId::Temp2W), p.slice(ParamId::Temp2B));
        let h4 = &h3 + &a4.mapv(silu);

        let cols4 = gather(&h4.view(), g, &SPATIAL_3X3);
        let out = affine(&cols4.view(), &p.matrix(ParamId::OutW), p.slice(ParamId::OutB));

        Ok(ForwardTape {
            token,
            feat,
            e_pre,
            e,
            cols0,
            a1,
            cols1,
            a2,
            cols2,
            a3,
            cols3,
            a4,
            cols4,
            out,
        })
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// loss gradient `dout` with respect to the `[P, C]` output.
    pub fn backward(&self, tape: &ForwardTape<T>, dout: &ArrayView2<'_, T>) -> ToyParams<T> {
        let p = &self.params;
        let a = *self.architecture();
        let g = a.grid();
        let fp = g.frame_pixels();
        let hd = a.hidden;
        let mut grad = ToyParams::zeros(a).expect("architecture validated at construction");

        // conv_out
        grad.matrix_mut(ParamId::OutW).assign(&tape.cols4.t().dot(dout));
        grad.slice_mut(ParamId::OutB)
            .iter_mut()
            .zip(column_sums(dout).iter())
            .for_each(|(g, &v)| *g = v);
        let mut dh = Array2::zeros((g.pixels(), hd));
        scatter_add(&dout.dot(&p.matrix(ParamId::OutW).t()).view(), g, &SPATIAL_3X3, &mut dh);

        // h4 = h3 + silu(a4), a4 = temporal2(h3)
        let da4 = &dh * &tape.a4.mapv(silu_grad);
        grad.matrix_mut(ParamId::Temp2W).assign(&tape.cols3.t().dot(&da4));
        grad.slice_mut(ParamId::Temp2B)
            .iter_mut()
            .zip(column_sums(&da4.view()).iter())
            .for_each(|(g, &v)| *g = v);
        scatter_add(&da4.dot(&p.matrix(ParamId::Temp2W).t()).view(), g, &TEMPORAL_3, &mut dh);

        // h3 = h2 + silu(a3), a3 = conv_mid(h2) + inj2
        let da3 = &dh * &tape.a3.mapv(silu_grad);
        grad.matrix_mut(ParamId::MidW).assign(&tape.cols2.t().dot(&da3));
        let dinj2 = column_sums(&da3.view());
        grad.slice_mut(ParamId::MidB)
            .iter_mut()
            .zip(dinj2.iter())
            .for_each(|(g, &v)| *g = v);
        scatter_add(&da3.dot(&p.matrix(ParamId::MidW).t()).view(), g, &SPATIAL_3X3, &mut dh);

        // h2 = h1 + silu(a2), a2 = temporal1(h1)
        let da2 = &dh * &tape.a2.mapv(silu_grad);
        grad.matrix_mut(ParamId::Temp1W).assign(&tape.cols1.t().dot(&da2));
        grad.slice_mut(ParamId::Temp1B)
            .iter_mut()
            .zip(column_sums(&da2.view()).iter())
            .for_each(|(g, &v)| *g = v);
        scatter_add(&da2.dot(&p.matrix(ParamId::Temp1W).t()).view(), g, &TEMPORAL_3, &mut dh);

        // h1 = silu(a1), a1 = conv_in(x0) + inj1 + pos1[frame]
        let da1 = &dh * &tape.a1.mapv(silu_grad);
        grad.matrix_mut(ParamId::ConvInW).assign(&tape.cols0.t().dot(&da1));
        let mut dinj1 = Array1::<T>::zeros(hd);
        for f in 0..g.l {
            let per_frame = column_sums(&da1.slice(ndarray::s![f * fp..(f + 1) * fp, ..]));
            grad.row_mut(ParamId::Pos1, f).assign(&per_frame);
            dinj1 += &per_frame;
        }
        grad.slice_mut(ParamId::ConvInB)
            .iter_mut()
            .zip(dinj1.iter())
            .for_each(|(g, &v)| *g = v);

        // token and time embeddings
        grad.row_mut(ParamId::Tok1, tape.token).assign(&dinj1);
        grad.row_mut(ParamId::Tok2, tape.token).assign(&dinj2);
        let outer = |u: &Array1<T>, v: &Array1<T>| Array2::from_shape_fn((u.len(), v.len()), |(i, j)| u[i] * v[j]);
        grad.matrix_mut(ParamId::Emb1W).assign(&outer(&tape.e, &dinj1));
        grad.matrix_mut(ParamId::Emb2W).assign(&outer(&tape.e, &dinj2));
        let de = p.matrix(ParamId::Emb1W).dot(&dinj1) + p.matrix(ParamId::Emb2W).dot(&dinj2);
        let de_pre = &de * &tape.e_pre.mapv(silu_grad);
        grad.matrix_mut(ParamId::TimeW).assign(&outer(&tape.feat, &de_pre));
        grad.slice_mut(ParamId::TimeB)
            .iter_mut()
            .zip(de_pre.iter())
            .for_each(|(g, &v)| *g = v);
        grad
    }

    /// Converts a `[P, C]` output matrix back to `[L, C, H, W]`.
    pub fn unpack_output(&self, out: &Array2<T>) -> Array4<f32> {
        let a = self.architecture();
        let (h, w) = (a.height, a.width);
        Array4::from_shape_fn(a.video_shape(), |(f, k, y, x)| {
            out[[(f * h + y) * w + x, k]].as_f64() as f32
        })
    }

    /// Inverse of [`unpack_output`](Self::unpack_output).
    pub fn pack_video(&self, v: &Array4<f32>) -> Array2<T> {
        let a = self.architecture();
        let (h, w, ch) = (a.height, a.width, a.channels);
        Array2::from_shape_fn((a.grid().pixels(), ch), |(p, k)| {
            let f = p / (h * w);
            let y = (p / w) % h;
            let x = p % w;
            T::of(v[[f, k, y, x]] as f64)
        })
    }
}

impl<T: Real> VectorField for ToyFlowNet<T> {
    fn predict(&self, z: &Array4<f32>, t: f32, c: &Condition) -> Result<Array4<f32>> {
        let tape = self.forward(z, t, c)?;
        Ok(self.unpack_output(&tape.out))
    }
}

/// Optimizer coefficients stored alongside trained weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    architecture: Architecture,
    step: u64,
    seed: u64,
    optimizer: Option<OptimizerRecord>,
}

/// Trained weights plus the record needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ToyParams<f32>,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Option<OptimizerRecord>,
}

impl ModelCheckpoint {
    pub fn architecture(&self) -> &Architecture {
        self.params.architecture()
    }

    pub fn model(&self) -> ToyFlowNet<f32> {
        ToyFlowNet::new(self.params.clone())
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let meta = CheckpointMeta {
            architecture: *self.architecture(),
            step: self.step,
            seed: self.seed,
            optimizer: self.optimizer,
        };
        self.params
            .to_bundle(serde_json::to_string_pretty(&meta).expect("plain data serializes"))
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&bundle.meta).map_err(|e| Error::Setup(format!("bad checkpoint descriptor: {e}")))?;
        Ok(Self {
            params: ToyParams::from_bundle(meta.architecture, bundle)?,
            step: meta.step,
            seed: meta.seed,
            optimizer: meta.optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_noise;
    use ndarray::Array3;

    fn small_arch() -> Architecture {
        Architecture {
            frames: 3,
            channels: 3,
            height: 4,
            width: 5,
            hidden: 4,
            num_tokens: 3,
            time_features: 4,
        }
    }

    fn condition(a: &Architecture, token: usize, seed: u64) -> Condition {
        let n = gaussian_noise([a.frames, a.channels, a.height, a.width], seed)
            .unwrap()
            .eps;
        let first: Array3<f32> = n.index_axis(ndarray::Axis(0), 0).mapv(|v| v.tanh());
        let padded = n.slice(ndarray::s![1.., .., .., ..]).mapv(|v| 0.1 * v);
        Condition::new(first, padded, token).unwrap()
    }

    /// Randomizes every parameter, including the zero-initialized ones.
    fn random_params(a: Architecture, seed: u64) -> ToyParams<f64> {
        let mut p = ToyParams::<f64>::init(a, seed).unwrap();
        let noise = gaussian_noise([1, 1, 1, p.as_slice().len()], seed + 1).unwrap().eps;
        for (v, n) in p.as_mut_slice().iter_mut().zip(noise.iter()) {
            *v += 0.1 * *n as f64;
        }
        p
    }

    #[test]
    fn default_architecture_is_small() {
        let a = Architecture::new(8, 3, 16, 16);
        assert!(a.num_params() <= 200_000, "{}", a.num_params());
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let a = small_arch();
        let net = ToyFlowNet::new(ToyParams::<f32>::init(a, 1).unwrap());
        let z = gaussian_noise(a.video_shape(), 2).unwrap().eps;
        let v = net.predict(&z, 0.4, &condition(&a, 1, 3)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unconditional_output_ignores_condition() {
        let a = small_arch();
        let net = ToyFlowNet::new(random_params(a, 5));
        let z = gaussian_noise(a.video_shape(), 6).unwrap().eps;
        let u0 = net.predict(&z, 0.7, &condition(&a, 0, 7).unconditional()).unwrap();
        let u2 = net.predict(&z, 0.7, &condition(&a, 2, 8).unconditional()).unwrap();
        assert_eq!(u0, u2);
        let c0 = net.predict(&z, 0.7, &condition(&a, 0, 7)).unwrap();
        let c2 = net.predict(&z, 0.7, &condition(&a, 2, 7)).unwrap();
        assert_ne!(c0, c2);
    }

    #[test]
    fn rejects_mismatched_input() {
        let a = small_arch();
        let net = ToyFlowNet::new(ToyParams::<f32>::init(a, 1).unwrap());
        let z = Array4::zeros((2, 3, 4, 5));
        assert!(net.predict(&z, 0.5, &condition(&a, 0, 1)).is_err());
        let z = Array4::zeros(a.video_shape());
        assert!(net.predict(&z, 0.5, &condition(&a, 7, 1)).is_err());
    }

    /// Every analytic gradient entry against a central difference of the
    /// loss `sum(out * r)` for a fixed random `r`.
    #[test]
    fn gradients_match_central_differences() {
        let a = small_arch();
        let params = random_params(a, 11);
        let z = gaussian_noise(a.video_shape(), 12).unwrap().eps;
        let r = gaussian_noise(a.video_shape(), 13).unwrap().eps;
        for (cond, t) in [
            (condition(&a, 1, 14), 0.35f32),
            (condition(&a, 2, 15).unconditional(), 0.8),
        ] {
            let net = ToyFlowNet::new(params.clone());
            let rr = net.pack_video(&r);
            let loss = |p: &ToyParams<f64>| -> f64 {
                let out = ToyFlowNet::new(p.clone()).forward(&z, t, &cond).unwrap().out;
                (&out * &rr).sum()
            };
            let tape = net.forward(&z, t, &cond).unwrap();
            let grad = net.backward(&tape, &rr.view());
            let h = 1e-3;
            let mut worst = 0.0f64;
            for i in 0..params.as_slice().len() {
                let mut plus = params.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = params.clone();
                minus.as_mut_slice()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grad.as_slice()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let a = small_arch();
        let ck = ModelCheckpoint {
            params: ToyParams::<f32>::init(a, 3).unwrap(),
            step: 42,
            seed: 3,
            optimizer: None,
        };
        let back =
            ModelCheckpoint::from_bundle(&TensorBundle::decode(&ck.to_bundle().encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back, ck);

        let mut other = a;
        other.hidden = 5;
        let mut bundle = ck.to_bundle();
        bundle.meta = bundle.meta.replace("\"hidden\": 4", "\"hidden\": 5");
        assert_ne!(bundle.meta, ck.to_bundle().meta);
        assert!(ModelCheckpoint::from_bundle(&bundle).is_err());
        assert!(ToyParams::<f32>::from_bundle(other, &ck.to_bundle()).is_err());
    }
}
