//! im2col building blocks for the toy network.
//!
//! Activations are `[P, channels]` matrices whose rows enumerate the pixels
//! of a clip in `(frame, row, column)` order, so every convolution becomes a
//! gather followed by one matrix product.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Floating-point element usable by the toy network (`f32` or `f64`).
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Clip geometry `(frames, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Grid {
    pub l: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn pixels(&self) -> usize {
        self.l * self.h * self.w
    }

    pub fn frame_pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Kernel taps as `(dl, dy, dx)` offsets.
pub(crate) const SPATIAL_3X3: [(isize, isize, isize); 9] = [
    (0, -1, -1),
    (0, -1, 0),
    (0, -1, 1),
    (0, 0, -1),
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, -1),
    (0, 1, 0),
    (0, 1, 1),
];

pub(crate) const TEMPORAL_3: [(isize, isize, isize); 3] = [(-1, 0, 0), (0, 0, 0), (1, 0, 0)];

fn shifted(g: Grid, l: usize, y: usize, x: usize, off: (isize, isize, isize)) -> Option<usize> {
    let sl = l as isize + off.0;
    let sy = y as isize + off.1;
    let sx = x as isize + off.2;
    if sl < 0 || sy < 0 || sx < 0 {
        return None;
    }
    let (sl, sy, sx) = (sl as usize, sy as usize, sx as usize);
    if sl >= g.l || sy >= g.h || sx >= g.w {
        return None;
    }
    Some((sl * g.h + sy) * g.w + sx)
}

/// Gathers zero-padded neighbourhoods: column block `k` of row `p` holds the
/// input row at `p + taps[k]`.
pub(crate) fn gather<T: Real>(x: &ArrayView2<'_, T>, g: Grid, taps: &[(isize, isize, isize)]) -> Array2<T> {
    let cin = x.ncols();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let width = taps.len() * cin;
    let mut cols = vec![T::zero(); g.pixels() * width];
    for l in 0..g.l {
        for y in 0..g.h {
            for xx in 0..g.w {
                let p = (l * g.h + y) * g.w + xx;
                let row = &mut cols[p * width..(p + 1) * width];
                for (k, &off) in taps.iter().enumerate() {
                    if let Some(src) = shifted(g, l, y, xx, off) {
                        row[k * cin..(k + 1) * cin].copy_from_slice(&xs[src * cin..(src + 1) * cin]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.pixels(), width), cols).expect("sized above")
}

/// Adjoint of [`gather`].
pub(crate) fn scatter_add<T: Real>(
    dcols: &ArrayView2<'_, T>,
    g: Grid,
    taps: &[(isize, isize, isize)],
    into: &mut Array2<T>,
) {
    let cin = into.ncols();
    let width = taps.len() * cin;
    debug_assert_eq!(dcols.ncols(), width);
    let dc = dcols.as_standard_layout();
    let dc = dc.as_slice().expect("standard layout");
    let out = into.as_slice_mut().expect("standard layout");
    for l in 0..g.l {
        for y in 0..g.h {
            for xx in 0..g.w {
                let p = (l * g.h + y) * g.w + xx;
                let row = &dc[p * width..(p + 1) * width];
                for (k, &off) in taps.iter().enumerate() {
                    if let Some(dst) = shifted(g, l, y, xx, off) {
                        let d = &mut out[dst * cin..(dst + 1) * cin];
                        for (o, &v) in d.iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

pub(crate) fn silu<T: Real>(a: T) -> T {
    a * sigmoid(a)
}

pub(crate) fn silu_grad<T: Real>(a: T) -> T {
    let s = sigmoid(a);
    s * (T::one() + a * (T::one() - s))
}

/// `x W + b` for `x: [P, in]`, `W: [in, out]`, `b: [out]`.
pub(crate) fn affine<T: Real>(x: &ArrayView2<'_, T>, w: &ArrayView2<'_, T>, b: &[T]) -> Array2<T> {
    let mut y = x.dot(w);
    for mut row in y.rows_mut() {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

pub(crate) fn column_sums<T: Real>(x: &ArrayView2<'_, T>) -> Array1<T> {
    x.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_adjoint_of_gather() {
        // <gather(x), y> == <x, scatter(y)> for any x, y.
        let g = Grid { l: 3, h: 4, w: 5 };
        let cin = 2;
        let x = Array2::from_shape_fn((g.pixels(), cin), |(p, c)| ((p * 7 + c * 3) % 11) as f64 - 5.0);
        for taps in [&SPATIAL_3X3[..], &TEMPORAL_3[..]] {
            let cols = gather(&x.view(), g, taps);
            let y = Array2::from_shape_fn(cols.dim(), |(p, c)| ((p * 5 + c) % 13) as f64 * 0.1);
            let lhs: f64 = (&cols * &y).sum();
            let mut back = Array2::zeros((g.pixels(), cin));
            scatter_add(&y.view(), g, taps, &mut back);
            let rhs: f64 = (&x * &back).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn centre_tap_is_identity() {
        let g = Grid { l: 2, h: 2, w: 2 };
        let x = Array2::from_shape_fn((g.pixels(), 1), |(p, _)| p as f32);
        let cols = gather(&x.view(), g, &TEMPORAL_3);
        assert_eq!(cols.column(1), x.column(0));
        // frame 0 has no predecessor
        assert_eq!(cols[[0, 0]], 0.0);
        assert_eq!(cols[[0, 2]], 4.0);
    }

    #[test]
    fn silu_derivative_matches_difference_quotient() {
        for a in [-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(a + h) - silu(a - h)) / (2.0 * h);
            assert!((fd - silu_grad(a)).abs() < 1e-8);
        }
    }
}
