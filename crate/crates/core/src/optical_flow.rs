//! Displacement fields, a pyramidal block matcher, and backward warping.
//!
//! Flow is stored backward: entry `i` of a [`FlowField`] maps pixel `p` of
//! frame `i + 1` to `p - flow(p)` in frame `i`, so
//! `frame[i + 1](p) ~ frame[i](p - flow[i](p))`. Channel 0 is the horizontal
//! component, channel 1 the vertical one, both in pixels. A scene translated
//! by `(dx, dy)` per frame has flow `(dx, dy)` everywhere.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::error::{ensure_same_shape, Error, Result};
use crate::io::TensorBundle;
use crate::tensor::FrameSequence;

pub const FLOW_TAG: &str = "FLOW";

/// Per-frame-pair displacement fields `[L - 1, 2, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    flow: Array4<f32>,
}

impl FlowField {
    pub fn new(flow: Array4<f32>) -> Result<Self> {
        let (n, two, h, w) = flow.dim();
        if n == 0 || two != 2 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                shape: flow.shape().to_vec(),
                reason: "flow must be [pairs >= 1, 2, H, W]".into(),
            });
        }
        if !flow.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericInput("flow field"));
        }
        let limit = h.max(w) as f32;
        if flow.iter().any(|v| v.abs() > limit) {
            return Err(Error::Domain {
                name: "flow displacement",
                value: flow.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64,
                expected: "|d| <= max(H, W)",
            });
        }
        Ok(Self { flow })
    }

    pub fn zeros(pairs: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(Array4::zeros((pairs, 2, height, width)))
    }

    /// Number of frame pairs, `L - 1`.
    pub fn pairs(&self) -> usize {
        self.flow.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.flow.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.flow.shape()[3]
    }

    /// The `[2, H, W]` field mapping frame `i + 1` back to frame `i`.
    pub fn pair(&self, i: usize) -> ArrayView3<'_, f32> {
        self.flow.index_axis(Axis(0), i)
    }

    pub fn as_array(&self) -> &Array4<f32> {
        &self.flow
    }

    /// Euclidean displacement length per pixel for pair `i`.
    pub fn magnitude(&self, i: usize) -> Array2<f32> {
        let f = self.pair(i);
        let (u, v) = (f.index_axis(Axis(0), 0), f.index_axis(Axis(0), 1));
        let mut m = Array2::zeros(u.raw_dim());
        ndarray::Zip::from(&mut m)
            .and(&u)
            .and(&v)
            .for_each(|m, &u, &v| *m = u.hypot(v));
        m
    }

    pub fn to_bundle(&self) -> TensorBundle {
        TensorBundle {
            meta: String::new(),
            tensors: vec![(FLOW_TAG.to_owned(), self.flow.clone().into_dyn())],
        }
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let a = bundle
            .get(FLOW_TAG)
            .ok_or_else(|| Error::Setup(format!("no tensor tagged {FLOW_TAG}")))?;
        let shape = a.shape().to_vec();
        let a = a
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::InvalidShape {
                shape,
                reason: "flow tensor must be rank 4".into(),
            })?;
        Self::new(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

const LEVELS: usize = 3;
const BLOCK: usize = 8;
const RADIUS: i32 = 4;

/// 2x2 box downsampling; odd trailing rows/columns are dropped.
fn downsample(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let (h2, w2) = ((h / 2).max(1), (w / 2).max(1));
    Array3::from_shape_fn((c, h2, w2), |(k, y, x)| {
        let (y0, x0) = ((2 * y).min(h - 1), (2 * x).min(w - 1));
        let (y1, x1) = ((2 * y + 1).min(h - 1), (2 * x + 1).min(w - 1));
        0.25 * (img[[k, y0, x0]] + img[[k, y0, x1]] + img[[k, y1, x0]] + img[[k, y1, x1]])
    })
}

fn pyramid(frame: ArrayView3<'_, f32>, levels: usize) -> Vec<Array3<f32>> {
    let mut out = vec![frame.to_owned()];
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

/// How many pyramid levels a frame supports without collapsing below one
/// block.
fn level_count(h: usize, w: usize) -> usize {
    let mut n = 1;
    let (mut h, mut w) = (h, w);
    while n < LEVELS && h / 2 >= 2 && w / 2 >= 2 {
        h /= 2;
        w /= 2;
        n += 1;
    }
    n
}

#[inline]
fn clamp_index(v: i32, n: usize) -> usize {
    v.clamp(0, n as i32 - 1) as usize
}

/// Sum of absolute differences between the block of `next` at `(by, bx)`
/// and `prev` displaced by `-(dy, dx)`, with edge clamping.
#[allow(clippy::too_many_arguments)]
fn block_cost(
    prev: &Array3<f32>,
    next: &Array3<f32>,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    dy: i32,
    dx: i32,
) -> f64 {
    let (c, h, w) = prev.dim();
    let mut cost = 0.0f64;
    for k in 0..c {
        for y in y0..y1 {
            let sy = clamp_index(y as i32 - dy, h);
            for x in x0..x1 {
                let sx = clamp_index(x as i32 - dx, w);
                cost += (next[[k, y, x]] - prev[[k, sy, sx]]).abs() as f64;
            }
        }
    }
    cost
}

/// Lower is better: cost, then displacement length, then `(dy, dx)`.
fn better(a: (f64, i32, i32), b: (f64, i32, i32)) -> bool {
    let mag = |d: (f64, i32, i32)| d.1 * d.1 + d.2 * d.2;
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    if mag(a) != mag(b) {
        return mag(a) < mag(b);
    }
    (a.1, a.2) < (b.1, b.2)
}

/// Integer flow `(dy, dx)` per pixel for one pyramid level, refined around
/// `init`.
fn match_level(prev: &Array3<f32>, next: &Array3<f32>, init: &Array3<i32>) -> Array3<i32> {
    let (_, h, w) = prev.dim();
    let mut out = Array3::zeros((2, h, w));
    for y0 in (0..h).step_by(BLOCK) {
        let y1 = (y0 + BLOCK).min(h);
        for x0 in (0..w).step_by(BLOCK) {
            let x1 = (x0 + BLOCK).min(w);
            let (cy, cx) = ((y0 + y1) / 2, (x0 + x1) / 2);
            let (gy, gx) = (init[[0, cy, cx]], init[[1, cy, cx]]);
            let mut best: Option<(f64, i32, i32)> = None;
            for ry in -RADIUS..=RADIUS {
                for rx in -RADIUS..=RADIUS {
                    let (dy, dx) = (gy + ry, gx + rx);
                    let cand = (block_cost(prev, next, y0, y1, x0, x1, dy, dx), dy, dx);
                    if best.is_none_or(|b| better(cand, b)) {
                        best = Some(cand);
                    }
                }
            }
            let (_, dy, dx) = best.expect("search window is non-empty");
            out.slice_mut(s![0, y0..y1, x0..x1]).fill(dy);
            out.slice_mut(s![1, y0..y1, x0..x1]).fill(dx);
        }
    }
    out
}

/// Doubles a coarse integer flow onto a finer grid of size `(h, w)`.
fn upsample(coarse: &Array3<i32>, h: usize, w: usize) -> Array3<i32> {
    let (_, ch, cw) = coarse.dim();
    Array3::from_shape_fn((2, h, w), |(k, y, x)| {
        2 * coarse[[k, (y / 2).min(ch - 1), (x / 2).min(cw - 1)]]
    })
}

fn estimate_pair(prev: ArrayView3<'_, f32>, next: ArrayView3<'_, f32>) -> Array3<f32> {
    let (_, h, w) = prev.dim();
    let levels = level_count(h, w);
    let pp = pyramid(prev, levels);
    let pn = pyramid(next, levels);
    let (_, ch, cw) = pp[levels - 1].dim();
    let mut flow = Array3::<i32>::zeros((2, ch, cw));
    for lvl in (0..levels).rev() {
        let (_, lh, lw) = pp[lvl].dim();
        let init = if lvl == levels - 1 {
            flow.clone()
        } else {
            upsample(&flow, lh, lw)
        };
        flow = match_level(&pp[lvl], &pn[lvl], &init);
    }
    // (dy, dx) -> (horizontal, vertical)
    Array3::from_shape_fn((2, h, w), |(k, y, x)| flow[[1 - k, y, x]] as f32)
}

/// Coarse-to-fine block matching between every pair of consecutive frames.
///
/// Three-level 2x2-average pyramid, 8x8 blocks, a +-4 pixel search per
/// level around the upsampled coarser estimate, sum-of-absolute-differences
/// over all channels with edge clamping. Ties go to the shortest
/// displacement, then to the lexicographically smallest `(dy, dx)`, so
/// textureless regions get zero flow.
pub fn estimate_flow(seq: &FrameSequence) -> Result<FlowField> {
    let l = seq.len();
    if l < 2 {
        return Err(Error::TooFewFrames(l));
    }
    let [_, _, h, w] = seq.shape();
    let mut flow = Array4::zeros((l - 1, 2, h, w));
    for i in 0..l - 1 {
        flow.index_axis_mut(Axis(0), i)
            .assign(&estimate_pair(seq.frame(i), seq.frame(i + 1)));
    }
    FlowField::new(flow)
}

fn check_warp_shapes(frame: &ArrayView3<'_, f32>, flow: &ArrayView3<'_, f32>) -> Result<()> {
    let (_, h, w) = frame.dim();
    ensure_same_shape("warp flow", &[2, h, w], flow.shape())
}

/// Backward bilinear warp: `out(p) = frame(p - flow(p))`, sampling
/// positions clamped to the image.
pub fn warp_bilinear(frame: &ArrayView3<'_, f32>, flow: &ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    check_warp_shapes(frame, flow)?;
    let (c, h, w) = frame.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let sx = x as f32 - flow[[0, y, x]];
            let sy = y as f32 - flow[[1, y, x]];
            if sx.fract() == 0.0 && sy.fract() == 0.0 {
                let (ix, iy) = (clamp_index(sx as i32, w), clamp_index(sy as i32, h));
                for k in 0..c {
                    out[[k, y, x]] = frame[[k, iy, ix]];
                }
                continue;
            }
            let sx = sx.clamp(0.0, (w - 1) as f32);
            let sy = sy.clamp(0.0, (h - 1) as f32);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f32, sy - y0 as f32);
            for k in 0..c {
                let top = frame[[k, y0, x0]] * (1.0 - ax) + frame[[k, y0, x1]] * ax;
                let bottom = frame[[k, y1, x0]] * (1.0 - ax) + frame[[k, y1, x1]] * ax;
                out[[k, y, x]] = top * (1.0 - ay) + bottom * ay;
            }
        }
    }
    Ok(out)
}

/// Backward nearest-pixel warp for noise.
///
/// The flow is rounded half away from zero and each output pixel copies
/// exactly one input pixel (edge clamped), so i.i.d. standard normal input
/// stays marginally standard normal. Bilinear weights would shrink the
/// variance.
pub fn warp_noise(noise: &ArrayView3<'_, f32>, flow: &ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    check_warp_shapes(noise, flow)?;
    let (c, h, w) = noise.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let sx = clamp_index(x as i32 - flow[[0, y, x]].round() as i32, w);
            let sy = clamp_index(y as i32 - flow[[1, y, x]].round() as i32, h);
            for k in 0..c {
                out[[k, y, x]] = noise[[k, sy, sx]];
            }
        }
    }
    Ok(out)
}

/// PGM visualization of the flow magnitude of pair `i`, white at the
/// largest displacement in the whole field.
pub fn magnitude_pgm(flow: &FlowField, i: usize) -> Vec<u8> {
    let max = (0..flow.pairs())
        .map(|j| flow.magnitude(j).fold(0.0f32, |m, &v| m.max(v)))
        .fold(0.0f32, f32::max);
    crate::io::encode_pgm_scaled(&flow.magnitude(i).view(), max)
}

/// Median of a 2-D map over the interior left after trimming `margin`
/// pixels from every side.
pub fn interior_median(map: &ArrayView2<'_, f32>, margin: usize) -> Option<f32> {
    let (h, w) = map.dim();
    if h <= 2 * margin || w <= 2 * margin {
        return None;
    }
    let mut v: Vec<f32> = map
        .slice(s![margin..h - margin, margin..w - margin])
        .iter()
        .copied()
        .collect();
    v.sort_by(f32::total_cmp);
    Some(v[v.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_array, stream_rng, Stream};
    use rand::Rng;

    /// Smooth-ish random texture sampled on a torus so integer shifts are
    /// exact.
    fn texture(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = stream_rng(seed, Stream::Data);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0f32..1.0))
    }

    fn translated_clip(l: usize, dx: i32, dy: i32) -> FrameSequence {
        let (c, h, w) = (3, 48, 48);
        let tex = texture(c, h, w, 3);
        let mut a = Array4::zeros((l, c, h, w));
        for f in 0..l {
            for k in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as i32 - dy * f as i32).rem_euclid(h as i32) as usize;
                        let sx = (x as i32 - dx * f as i32).rem_euclid(w as i32) as usize;
                        a[[f, k, y, x]] = tex[[k, sy, sx]];
                    }
                }
            }
        }
        FrameSequence::new(a).unwrap()
    }

    #[test]
    fn recovers_integer_translation() {
        let flow = estimate_flow(&translated_clip(3, 2, 3)).unwrap();
        for i in 0..flow.pairs() {
            let f = flow.pair(i);
            assert_eq!(interior_median(&f.index_axis(Axis(0), 0), 8), Some(2.0));
            assert_eq!(interior_median(&f.index_axis(Axis(0), 1), 8), Some(3.0));
        }
    }

    #[test]
    fn large_motion_needs_the_pyramid() {
        let flow = estimate_flow(&translated_clip(2, -9, 6)).unwrap();
        let f = flow.pair(0);
        assert_eq!(interior_median(&f.index_axis(Axis(0), 0), 12), Some(-9.0));
        assert_eq!(interior_median(&f.index_axis(Axis(0), 1), 12), Some(6.0));
    }

    #[test]
    fn static_and_textureless_clips_have_zero_flow() {
        let still = translated_clip(3, 0, 0);
        assert!(estimate_flow(&still).unwrap().as_array().iter().all(|&v| v == 0.0));
        let flat = FrameSequence::new(Array4::from_elem((2, 1, 16, 16), 0.3)).unwrap();
        assert!(estimate_flow(&flat).unwrap().as_array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_frame_is_too_few() {
        let one = FrameSequence::new(Array4::zeros((1, 1, 8, 8))).unwrap();
        assert!(matches!(estimate_flow(&one), Err(Error::TooFewFrames(1))));
    }

    #[test]
    fn estimate_is_translation_equivariant() {
        // shifting the whole clip leaves the interior flow unchanged
        let a = translated_clip(2, 1, -2);
        let shifted = {
            let mut s = a.as_array().clone();
            for mut fr in s.axis_iter_mut(Axis(0)) {
                let copy = fr.to_owned();
                let (_, h, w) = copy.dim();
                for k in 0..copy.dim().0 {
                    for y in 0..h {
                        for x in 0..w {
                            fr[[k, y, x]] = copy[[k, (y + h - 3) % h, (x + w - 5) % w]];
                        }
                    }
                }
            }
            FrameSequence::new(s).unwrap()
        };
        let fa = estimate_flow(&a).unwrap();
        let fb = estimate_flow(&shifted).unwrap();
        for k in 0..2 {
            let ma = interior_median(&fa.pair(0).index_axis(Axis(0), k), 8);
            let mb = interior_median(&fb.pair(0).index_axis(Axis(0), k), 8);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn zero_flow_warps_are_bit_exact_identities() {
        let img = texture(3, 7, 9, 1);
        let zero = Array3::zeros((2, 7, 9));
        assert_eq!(warp_bilinear(&img.view(), &zero.view()).unwrap(), img);
        assert_eq!(warp_noise(&img.view(), &zero.view()).unwrap(), img);
    }

    #[test]
    fn integer_flow_shifts_a_ramp() {
        let ramp = Array3::from_shape_fn((1, 3, 6), |(_, _, x)| x as f32);
        let mut flow = Array3::zeros((2, 3, 6));
        flow.slice_mut(s![0, .., ..]).fill(1.0);
        let out = warp_bilinear(&ramp.view(), &flow.view()).unwrap();
        for x in 1..6 {
            assert_eq!(out[[0, 1, x]], (x - 1) as f32);
        }
        assert_eq!(out[[0, 1, 0]], 0.0);
    }

    #[test]
    fn half_pixel_flow_averages_neighbours() {
        let mut row = Array3::zeros((1, 1, 5));
        row[[0, 0, 1]] = 1.0;
        let mut flow = Array3::zeros((2, 1, 5));
        flow.slice_mut(s![0, .., ..]).fill(0.5);
        let out = warp_bilinear(&row.view(), &flow.view()).unwrap();
        assert_eq!(out[[0, 0, 1]], 0.5);
        assert_eq!(out[[0, 0, 2]], 0.5);
        assert_eq!(out[[0, 0, 3]], 0.0);
    }

    #[test]
    fn noise_warp_rounds_half_away_from_zero() {
        let img = Array3::from_shape_fn((1, 1, 7), |(_, _, x)| x as f32);
        let mut flow = Array3::zeros((2, 1, 7));
        flow.slice_mut(s![0, .., ..]).fill(1.5);
        assert_eq!(warp_noise(&img.view(), &flow.view()).unwrap()[[0, 0, 4]], 2.0);
        flow.slice_mut(s![0, .., ..]).fill(-0.5);
        assert_eq!(warp_noise(&img.view(), &flow.view()).unwrap()[[0, 0, 4]], 5.0);
    }

    #[test]
    fn warped_noise_keeps_unit_variance() {
        let mut rng = stream_rng(9, Stream::Noise);
        let (h, w) = (250, 250);
        let mut fr = stream_rng(10, Stream::Data);
        let flow = Array3::from_shape_fn((2, h, w), |_| fr.random_range(-6.0f32..6.0));
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        while n < 1_000_000 {
            let noise = normal_array([1, 4, h, w], &mut rng).index_axis_move(Axis(0), 0);
            for v in warp_noise(&noise.view(), &flow.view()).unwrap() {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((0.99..=1.01).contains(&var), "variance {var}");
    }

    #[test]
    fn flow_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let flow = estimate_flow(&translated_clip(3, 1, 1)).unwrap();
        let path = dir.path().join("f.frct");
        flow.save(&path).unwrap();
        assert_eq!(FlowField::load(&path).unwrap(), flow);
        assert!(FlowField::new(Array4::from_elem((1, 2, 4, 4), 5.0)).is_err());
        assert!(FlowField::new(Array4::zeros((1, 3, 4, 4))).is_err());
        let pgm = magnitude_pgm(&flow, 0);
        assert!(pgm.starts_with(b"P5\n48 48\n255\n"));
    }
}
