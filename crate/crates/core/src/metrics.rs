//! Consistency scores for edited clips.
//!
//! A frame is embedded as its 4x4 average-pooled pixels followed by an
//! 8-bin histogram per channel, each part centered on its own mean. Scores
//! are mean cosine similarities in `[-1, 1]`, not the x100 percentages of
//! learned-embedding benchmarks.

use std::fmt;

use ndarray::ArrayView3;
use serde::Serialize;

use crate::error::{ensure_same_shape, Error, Result};
use crate::tensor::FrameSequence;

pub const POOL: usize = 4;
pub const BINS: usize = 8;

fn center(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Pooled-pixel part of the embedding, `C * ceil(H/4) * ceil(W/4)` values.
/// Windows at the right and bottom edges may be partial.
pub fn pooled_features(frame: &ArrayView3<'_, f32>) -> Vec<f64> {
    let (c, h, w) = frame.dim();
    let (ph, pw) = (h.div_ceil(POOL), w.div_ceil(POOL));
    let mut out = Vec::with_capacity(c * ph * pw);
    for k in 0..c {
        for by in 0..ph {
            for bx in 0..pw {
                let (y0, x0) = (by * POOL, bx * POOL);
                let (y1, x1) = ((y0 + POOL).min(h), (x0 + POOL).min(w));
                let mut s = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += frame[[k, y, x]] as f64;
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    center(&mut out);
    out
}

/// Per-channel histograms over `[-1, 1]` as fractions of the pixel count.
pub fn histogram_features(frame: &ArrayView3<'_, f32>) -> Vec<f64> {
    let (c, h, w) = frame.dim();
    let mut out = vec![0.0f64; c * BINS];
    let inv = 1.0 / (h * w) as f64;
    for k in 0..c {
        for v in frame.index_axis(ndarray::Axis(0), k) {
            let b = (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * BINS as f32) as usize).min(BINS - 1);
            out[k * BINS + b] += inv;
        }
    }
    center(&mut out);
    out
}

pub fn frame_embed(frame: &ArrayView3<'_, f32>) -> Vec<f64> {
    let mut e = pooled_features(frame);
    e.extend(histogram_features(frame));
    e
}

/// Cosine similarity in `[-1, 1]`. Equal vectors score exactly 1; a zero
/// vector against anything else scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn embeddings(video: &FrameSequence) -> Vec<Vec<f64>> {
    (0..video.len()).map(|i| frame_embed(&video.frame(i))).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = v.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    s / n as f64
}

/// Mean cosine similarity of consecutive frames.
pub fn temporal_consistency(video: &FrameSequence) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::TooFewFrames(video.len()));
    }
    let e = embeddings(video);
    Ok(mean(e.windows(2).map(|p| cosine(&p[0], &p[1]))))
}

/// Mean cosine similarity of every frame to the edited first frame.
pub fn edited_frame_consistency(video: &FrameSequence, x_edit_1: &ArrayView3<'_, f32>) -> Result<f64> {
    let [_, c, h, w] = video.shape();
    ensure_same_shape("edited frame", &[c, h, w], x_edit_1.shape())?;
    let r = frame_embed(x_edit_1);
    Ok(mean(embeddings(video).iter().map(|e| cosine(e, &r))))
}

/// Mean cosine similarity of each frame to the matching source frame.
pub fn original_video_consistency(video: &FrameSequence, x_src: &FrameSequence) -> Result<f64> {
    ensure_same_shape("original video", &video.shape(), &x_src.shape())?;
    let a = embeddings(video);
    let b = embeddings(x_src);
    Ok(mean(a.iter().zip(&b).map(|(x, y)| cosine(x, y))))
}

pub fn aec(efc: f64, ovc: f64) -> f64 {
    (efc + ovc) / 2.0
}

pub fn mse(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    ensure_same_shape("mse", &a.shape(), &b.shape())?;
    let n = a.as_array().len() as f64;
    Ok(a.as_array()
        .iter()
        .zip(b.as_array())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub tc: f64,
    pub efc: f64,
    pub ovc: f64,
    /// Mean of `efc` and `ovc`.
    pub aec: f64,
    pub mse_vs_reference: f64,
}

impl MetricsReport {
    /// Scores `video` against the edited first frame and the source clip.
    /// The MSE is taken against `reference`, or against the source when
    /// none is given.
    pub fn compute(
        video: &FrameSequence,
        x_edit_1: &ArrayView3<'_, f32>,
        x_src: &FrameSequence,
        reference: Option<&FrameSequence>,
    ) -> Result<Self> {
        let efc = edited_frame_consistency(video, x_edit_1)?;
        let ovc = original_video_consistency(video, x_src)?;
        Ok(Self {
            tc: temporal_consistency(video)?,
            efc,
            ovc,
            aec: aec(efc, ovc),
            mse_vs_reference: mse(video, reference.unwrap_or(x_src))?,
        })
    }

    pub const CSV_HEADER: &'static str = "tc,efc,ovc,aec,mse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.tc, self.efc, self.ovc, self.aec, self.mse_vs_reference
        )
    }

    /// Column-wise mean of several reports.
    pub fn mean(reports: &[MetricsReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let m = |f: fn(&MetricsReport) -> f64| mean(reports.iter().map(f));
        let (efc, ovc) = (m(|r| r.efc), m(|r| r.ovc));
        Some(Self {
            tc: m(|r| r.tc),
            efc,
            ovc,
            aec: aec(efc, ovc),
            mse_vs_reference: m(|r| r.mse_vs_reference),
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6}{:>10}", "metric", "value")?;
        for (name, v) in [
            ("TC", self.tc),
            ("EFC", self.efc),
            ("OVC", self.ovc),
            ("AEC", self.aec),
            ("MSE", self.mse_vs_reference),
        ] {
            writeln!(f, "{name:<6}{v:>10.5}")?;
        }
        Ok(())
    }
}
