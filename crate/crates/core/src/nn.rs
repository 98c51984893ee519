//! Layer kernels and their backward passes.
//!
//! Feature maps are `C × H × W` arrays for a single sample. Convolutions are
//! lowered to GEMM through an im2col buffer that the forward pass hands back
//! so the backward pass can reuse it.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the network (`f32` for training, `f64`
/// for gradient checking).
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Lowers a `C × H × W` input to a `(C·k·k) × (H·W)` matrix for a stride-1,
/// zero-padded ("same") convolution with odd kernel side `k`.
pub fn im2col<T: Real>(x: ArrayView3<T>, k: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::<T>::zeros((c * k * k, h * w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = plane.row(sy as usize);
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let sx_hi = (x_hi as isize + dx) as usize;
                    dst.slice_mut(s![y * w + x_lo..y * w + x_hi])
                        .assign(&src.slice(s![sx_lo..sx_hi]));
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto a `C × H × W` gradient.
pub fn col2im<T: Real>(cols: ArrayView2<T>, c: usize, h: usize, w: usize, k: usize) -> Array3<T> {
    let pad = (k / 2) as isize;
    let mut out = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let sx_hi = (x_hi as isize + dx) as usize;
                    let mut dst = plane.slice_mut(s![sy as usize, sx_lo..sx_hi]);
                    dst += &row.slice(s![y * w + x_lo..y * w + x_hi]);
                }
            }
        }
    }
    out
}

/// `weight` is `Cout × (Cin·k·k)`. Returns the output map and the im2col
/// buffer.
pub fn conv_forward<T: Real>(
    x: ArrayView3<T>,
    weight: ArrayView2<T>,
    bias: ArrayView1<T>,
    k: usize,
) -> (Array3<T>, Array2<T>) {
    let (_, h, w) = x.dim();
    let cols = im2col(x, k);
    let mut out = weight.dot(&cols);
    for (mut row, &b) in out.outer_iter_mut().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    let cout = weight.nrows();
    let out = out.into_shape_with_order((cout, h, w)).expect("contiguous conv output");
    (out, cols)
}

/// Gradients of a convolution. `dout` is `Cout × H × W`. The input gradient
/// is only computed when `need_input` is set.
pub fn conv_backward<T: Real>(
    dout: ArrayView3<T>,
    cols: ArrayView2<T>,
    weight: ArrayView2<T>,
    cin: usize,
    k: usize,
    need_input: bool,
) -> (Array2<T>, Array1<T>, Option<Array3<T>>) {
    let (cout, h, w) = dout.dim();
    let d2 = dout.into_shape_with_order((cout, h * w)).expect("contiguous gradient");
    let dw = d2.dot(&cols.t());
    let db = d2.sum_axis(Axis(1));
    let dx = need_input.then(|| {
        let dcols = weight.t().dot(&d2);
        col2im(dcols.view(), cin, h, w, k)
    });
    (dw, db, dx)
}

/// 1×1 convolution: `weight` is `Cout × Cin`.
pub fn pointwise_forward<T: Real>(x: ArrayView3<T>, weight: ArrayView2<T>, bias: ArrayView1<T>) -> Array3<T> {
    let (cin, h, w) = x.dim();
    let x2 = x.into_shape_with_order((cin, h * w)).expect("contiguous input");
    let mut out = weight.dot(&x2);
    for (mut row, &b) in out.outer_iter_mut().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    out.into_shape_with_order((weight.nrows(), h, w)).expect("contiguous output")
}

pub fn pointwise_backward<T: Real>(
    dout: ArrayView3<T>,
    x: ArrayView3<T>,
    weight: ArrayView2<T>,
) -> (Array2<T>, Array1<T>, Array3<T>) {
    let (cout, h, w) = dout.dim();
    let cin = x.dim().0;
    let d2 = dout.into_shape_with_order((cout, h * w)).expect("contiguous gradient");
    let x2 = x.into_shape_with_order((cin, h * w)).expect("contiguous input");
    let dw = d2.dot(&x2.t());
    let db = d2.sum_axis(Axis(1));
    let dx = weight.t().dot(&d2).into_shape_with_order((cin, h, w)).expect("contiguous");
    (dw, db, dx)
}

/// Non-affine instance normalization, in place. Returns the per-channel
/// inverse standard deviations; `x` then holds the normalized values.
pub fn instance_norm_inplace<T: Real>(x: &mut Array3<T>, eps: T) -> Vec<T> {
    let (_, h, w) = x.dim();
    let n = T::of((h * w) as f64);
    let mut inv = Vec::with_capacity(x.dim().0);
    for mut ch in x.outer_iter_mut() {
        let mean = ch.iter().copied().sum::<T>() / n;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + eps).sqrt();
        ch.mapv_inplace(|v| (v - mean) * inv_std);
        inv.push(inv_std);
    }
    inv
}

pub fn instance_normalize<T: Real>(x: ArrayView3<T>, eps: T) -> Array3<T> {
    let mut out = x.to_owned();
    instance_norm_inplace(&mut out, eps);
    out
}

/// Backward of non-affine IN given the normalized output `y`.
pub fn instance_norm_backward_inplace<T: Real>(dy: &mut Array3<T>, y: ArrayView3<T>, inv_std: &[T]) {
    let (_, h, w) = y.dim();
    let n = T::of((h * w) as f64);
    for ((mut g, yc), &s) in dy.outer_iter_mut().zip(y.outer_iter()).zip(inv_std) {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gy = g.iter().zip(yc.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
        g.zip_mut_with(&yc, |gv, &yv| *gv = s * (*gv - mean_g - yv * mean_gy));
    }
}

/// 2×2 stride-2 max pool. Returns the pooled map and the flat source index
/// of each maximum (first maximum wins on ties).
pub fn max_pool2<T: Real>(x: ArrayView3<T>) -> (Array3<T>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = x[[ci, 2 * y, 2 * xx]];
                let mut at = (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x[[ci, 2 * y + dy, 2 * xx + dx]];
                    if v > best {
                        best = v;
                        at = (2 * y + dy) * w + 2 * xx + dx;
                    }
                }
                out[[ci, y, xx]] = best;
                arg.push(at as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(dout: ArrayView3<T>, arg: &[u32], h: usize, w: usize) -> Array3<T> {
    let (c, oh, ow) = dout.dim();
    let mut dx = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = dx.index_axis_mut(Axis(0), ci);
        let flat = plane.as_slice_mut().expect("contiguous");
        for y in 0..oh {
            for xx in 0..ow {
                let i = (ci * oh + y) * ow + xx;
                flat[arg[i] as usize] = flat[arg[i] as usize] + dout[[ci, y, xx]];
            }
        }
    }
    dx
}

/// 2×2 stride-2 average pool.
pub fn avg_pool2<T: Real>(x: ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let quarter = T::of(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        (x[[ci, 2 * y, 2 * xx]] + x[[ci, 2 * y, 2 * xx + 1]] + x[[ci, 2 * y + 1, 2 * xx]] + x[[ci, 2 * y + 1, 2 * xx + 1]])
            * quarter
    })
}

pub fn avg_pool2_backward<T: Real>(dout: ArrayView3<T>) -> Array3<T> {
    let (c, oh, ow) = dout.dim();
    let quarter = T::of(0.25);
    Array3::from_shape_fn((c, oh * 2, ow * 2), |(ci, y, xx)| dout[[ci, y / 2, xx / 2]] * quarter)
}

/// Global average pooling: `C × H × W` → `C`.
pub fn gap<T: Real>(x: ArrayView3<T>) -> Array1<T> {
    let (c, h, w) = x.dim();
    let n = T::of((h * w) as f64);
    Array1::from_iter((0..c).map(|ci| x.index_axis(Axis(0), ci).iter().copied().sum::<T>() / n))
}

pub fn gap_backward<T: Real>(dout: ArrayView1<T>, h: usize, w: usize) -> Array3<T> {
    let n = T::of((h * w) as f64);
    Array3::from_shape_fn((dout.len(), h, w), |(ci, _, _)| dout[ci] / n)
}

pub fn relu_inplace<T: Real>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((c, h, w), |_| rng.random_range(-2.0..2.0))
    }

    /// Direct nested-loop convolution used as a reference for im2col+GEMM.
    fn naive_conv(x: &Array3<f64>, wt: &Array2<f64>, b: &[f64], k: usize) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let pad = (k / 2) as isize;
        Array3::from_shape_fn((wt.nrows(), h, w), |(o, y, xx)| {
            let mut acc = b[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += wt[[o, (ci * k + ky) * k + kx]] * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1usize, 3, 5] {
            let x = random_map(3, 7, 6, 1);
            let wt = random_map(4, 3 * k, k, 2).into_shape_with_order((4, 3 * k * k)).unwrap();
            let b = [0.1, -0.2, 0.3, 0.0];
            let (got, _) = conv_forward(x.view(), wt.view(), ArrayView1::from(&b[..]), k);
            let want = naive_conv(&x, &wt, &b, k);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = random_map(2, 5, 4, 3);
        let cols = im2col(x.view(), 3);
        let c = random_map(1, cols.nrows(), cols.ncols(), 4).into_shape_with_order(cols.dim()).unwrap();
        let lhs: f64 = cols.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(c.view(), 2, 5, 4, 3);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn instance_norm_two_pixel_channel() {
        let x = Array3::from_shape_vec((1, 1, 2), vec![0.0, 2.0]).unwrap();
        let y = instance_normalize(x.view(), 1e-5);
        // (±1) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[[0, 0, 0]] + expect).abs() < 1e-12);
        assert!((y[[0, 0, 1]] - expect).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let x = Array3::from_elem((2, 3, 3), 5.0f64);
        let y = instance_normalize(x.view(), 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_statistics() {
        let x = random_map(6, 9, 9, 5).mapv(|v| 3.0 * v + 7.0);
        let y = instance_normalize(x.view(), 1e-5);
        for ch in y.outer_iter() {
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_difference() {
        let x = random_map(2, 3, 4, 6);
        let proj = random_map(2, 3, 4, 7);
        let loss = |x: &Array3<f64>| -> f64 {
            let y = instance_normalize(x.view(), 1e-5);
            y.iter().zip(proj.iter()).map(|(a, b)| a * b).sum()
        };
        let mut y = x.clone();
        let inv = instance_norm_inplace(&mut y, 1e-5);
        let mut g = proj.clone();
        instance_norm_backward_inplace(&mut g, y.view(), &inv);
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 1, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "{fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn pooling_shapes_and_values() {
        let x = Array3::from_shape_vec((1, 2, 4), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0]).unwrap();
        let (m, arg) = max_pool2(x.view());
        assert_eq!(m.dim(), (1, 1, 2));
        assert_eq!(m.iter().copied().collect::<Vec<f64>>(), vec![5.0, 8.0]);
        assert_eq!(arg, vec![1, 6]);
        let a = avg_pool2(x.view());
        assert_eq!(a.iter().copied().collect::<Vec<f64>>(), vec![13.0 / 4.0, 11.0 / 4.0]);
        let back = max_pool2_backward(Array3::from_elem((1, 1, 2), 1.0).view(), &arg, 2, 4);
        assert_eq!(back.sum(), 2.0);
        assert_eq!(back[[0, 0, 1]], 1.0);
        assert_eq!(back[[0, 1, 2]], 1.0);
    }

    #[test]
    fn gap_of_constant_channels() {
        let x = Array3::from_shape_fn((3, 4, 4), |(c, _, _)| c as f64 * 1.5 - 1.0);
        let g = gap(x.view());
        assert_eq!(g.to_vec(), vec![-1.0, 0.5, 2.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_survives_large_logits() {
        let p = softmax(&[1000.0, 0.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
