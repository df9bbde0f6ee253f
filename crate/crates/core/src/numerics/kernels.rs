//! Plain slice kernels shared by the tape ops and the cached decoder.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`, i-k-j order so the inner loop is a
/// contiguous axpy.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], out_row);
        }
    }
}

/// `out[m×k] += a[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            axpy(aip, b_row, &mut out[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// In-place numerically stable softmax of one row. Entries equal to `-inf`
/// become exactly zero. Returns `false` when the row has no finite entry.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> bool {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() || max.is_nan() {
        return false;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    true
}

/// `ln(1 + Σ exp(a_i))` evaluated stably, plus `∂/∂a_i`.
pub fn log1p_sum_exp(args: &[f64]) -> (f64, Vec<f64>) {
    if args.is_empty() {
        return (0.0, Vec::new());
    }
    let max = args.iter().copied().fold(0.0f64, f64::max);
    let mut acc = (-max).exp();
    for &a in args {
        acc += (a - max).exp();
    }
    let value = max + acc.ln();
    let weights = args.iter().map(|&a| (a - value).exp()).collect();
    (value, weights)
}

/// Rotary angle table: `(cos, sin)` for each position in `positions` and
/// each of the `head_dim / 2` frequency pairs.
pub fn rope_table<T: Scalar>(
    positions: std::ops::Range<usize>,
    head_dim: usize,
    base: f64,
) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let n = positions.len();
    let mut cos = Vec::with_capacity(n * half);
    let mut sin = Vec::with_capacity(n * half);
    for pos in positions {
        for j in 0..half {
            let freq = base.powf(-2.0 * j as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(T::from_f64_lossy(angle.cos()));
            sin.push(T::from_f64_lossy(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs of every head in a `rows × (heads·head_dim)`
/// block. `inverse` applies the transpose rotation (used for gradients).
#[allow(clippy::too_many_arguments)]
pub fn apply_rope<T: Scalar>(
    x: &[T],
    out: &mut [T],
    rows: usize,
    heads: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = head_dim / 2;
    let width = heads * head_dim;
    for r in 0..rows {
        let c = &cos[r * half..(r + 1) * half];
        let s = &sin[r * half..(r + 1) * half];
        for h in 0..heads {
            let base = r * width + h * head_dim;
            for j in 0..half {
                let x0 = x[base + 2 * j];
                let x1 = x[base + 2 * j + 1];
                let (cj, sj) = (c[j], if inverse { -s[j] } else { s[j] });
                out[base + 2 * j] = x0 * cj - x1 * sj;
                out[base + 2 * j + 1] = x0 * sj + x1 * cj;
            }
        }
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let sig = T::one() / (T::one() + (-x).exp());
    sig * (T::one() + x * (T::one() - sig))
}

/// RMS normalisation of one row; returns the inverse RMS used.
pub fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss += v * v;
    }
    let inv = T::one() / (ss / T::from_usize_lossy(x.len()) + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}
