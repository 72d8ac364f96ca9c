//! Dense loops behind the convolution and normalization ops.
//!
//! All loops keep a fixed accumulation order so results are bit-reproducible.

use super::Tensor;

/// Dot product with eight independent partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Output index range `[lo, hi)` for which tap offset `off` stays in bounds.
#[inline]
fn tap_range(off: isize, width: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (width as isize - off.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn tap_offset(k: usize, kernel: usize, dilation: usize) -> isize {
    (k as isize - (kernel / 2) as isize) * dilation as isize
}

pub(crate) fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Tensor {
    let (c_in, width) = (x.shape()[0], x.shape()[1]);
    let (c_out, kernel) = (w.shape()[0], w.shape()[2]);
    let mut out = vec![0.0; c_out * width];
    let wd = w.data();
    for o in 0..c_out {
        let row = &mut out[o * width..(o + 1) * width];
        row.fill(b.data()[o]);
        for c in 0..c_in {
            let src = x.row(c);
            for k in 0..kernel {
                let weight = wd[(o * c_in + c) * kernel + k];
                let off = tap_offset(k, kernel, dilation);
                let (lo, hi) = tap_range(off, width);
                if lo >= hi {
                    continue;
                }
                let s = (lo as isize + off) as usize;
                axpy(weight, &src[s..s + (hi - lo)], &mut row[lo..hi]);
            }
        }
    }
    Tensor::from_parts(vec![c_out, width], out)
}

pub(crate) fn conv1d_weight_grad(x: &Tensor, w_shape: &[usize], g: &[f64], dilation: usize, slot: &mut [f64]) {
    let (c_in, width) = (x.shape()[0], x.shape()[1]);
    let (c_out, kernel) = (w_shape[0], w_shape[2]);
    for o in 0..c_out {
        let grow = &g[o * width..(o + 1) * width];
        for c in 0..c_in {
            let src = x.row(c);
            for k in 0..kernel {
                let off = tap_offset(k, kernel, dilation);
                let (lo, hi) = tap_range(off, width);
                if lo >= hi {
                    continue;
                }
                let s = (lo as isize + off) as usize;
                slot[(o * c_in + c) * kernel + k] += dot(&grow[lo..hi], &src[s..s + (hi - lo)]);
            }
        }
    }
}

pub(crate) fn conv1d_input_grad(x_shape: &[usize], w: &Tensor, g: &[f64], dilation: usize, slot: &mut [f64]) {
    let (c_in, width) = (x_shape[0], x_shape[1]);
    let (c_out, kernel) = (w.shape()[0], w.shape()[2]);
    let wd = w.data();
    for c in 0..c_in {
        let dst = &mut slot[c * width..(c + 1) * width];
        for o in 0..c_out {
            let grow = &g[o * width..(o + 1) * width];
            for k in 0..kernel {
                let weight = wd[(o * c_in + c) * kernel + k];
                let off = tap_offset(k, kernel, dilation);
                let (lo, hi) = tap_range(off, width);
                if lo >= hi {
                    continue;
                }
                let s = (lo as isize + off) as usize;
                axpy(weight, &grow[lo..hi], &mut dst[s..s + (hi - lo)]);
            }
        }
    }
}

/// Returns `(output, normalized input, per-position 1/std)`.
pub(crate) fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (channels, width) = (x.shape()[0], x.shape()[1]);
    let inv_c = 1.0 / channels as f64;
    let mut mean = vec![0.0; width];
    for c in 0..channels {
        axpy(inv_c, x.row(c), &mut mean);
    }
    let mut var = vec![0.0; width];
    for c in 0..channels {
        for ((v, &xi), &m) in var.iter_mut().zip(x.row(c)).zip(&mean) {
            let d = xi - m;
            *v += d * d;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v * inv_c + eps).sqrt()).collect();
    let mut normalized = vec![0.0; channels * width];
    let mut out = vec![0.0; channels * width];
    for c in 0..channels {
        let (gc, bc) = (gamma.data()[c], beta.data()[c]);
        let row = c * width..(c + 1) * width;
        for (((n, o), &xi), (&m, &s)) in normalized[row.clone()]
            .iter_mut()
            .zip(&mut out[row.clone()])
            .zip(x.row(c))
            .zip(mean.iter().zip(&inv_std))
        {
            *n = (xi - m) * s;
            *o = gc * *n + bc;
        }
    }
    (Tensor::from_parts(vec![channels, width], out), normalized, inv_std)
}

pub(crate) fn layer_norm_input_grad(
    channels: usize,
    width: usize,
    gamma: &[f64],
    g: &[f64],
    normalized: &[f64],
    inv_std: &[f64],
    slot: &mut [f64],
) {
    let inv_c = 1.0 / channels as f64;
    let mut sum_d = vec![0.0; width];
    let mut sum_dn = vec![0.0; width];
    for c in 0..channels {
        let row = c * width..(c + 1) * width;
        for ((sd, sdn), (&gi, &ni)) in sum_d
            .iter_mut()
            .zip(&mut sum_dn)
            .zip(g[row.clone()].iter().zip(&normalized[row]))
        {
            let d = gi * gamma[c];
            *sd += d;
            *sdn += d * ni;
        }
    }
    for c in 0..channels {
        let row = c * width..(c + 1) * width;
        for (t, (s, (&gi, &ni))) in slot[row.clone()]
            .iter_mut()
            .zip(g[row.clone()].iter().zip(&normalized[row]))
            .enumerate()
        {
            let d = gi * gamma[c];
            *s += inv_std[t] * (d - inv_c * (sum_d[t] + ni * sum_dn[t]));
        }
    }
}
