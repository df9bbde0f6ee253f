//! Causal multi-head attention with structured additive biases.
//!
//! The bias is never materialised as a `len × len` matrix. A mask is a list
//! of column spans, each with the first row from which it is biased, plus an
//! optional block-isolation grouping. Soft intensities (one per span) are
//! added to the scaled scores of the span's columns for every row at or
//! after the span's activation row. Hard-masked spans are removed from those
//! rows entirely.

use std::ops::Range;

use crate::numerics::kernels::{axpy, dot, softmax_in_place};
use crate::numerics::NumericsError;
use crate::scalar::Scalar;

/// Column span biased from `from_row` onward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanBias {
    pub cols: Range<usize>,
    pub from_row: usize,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionMask {
    /// Positions sharing a `Some(g)` group may not see positions of another
    /// `Some(h)` group. `None` positions see and are seen by everyone.
    pub isolation: Option<Vec<Option<u32>>>,
    pub spans: Vec<SpanBias>,
    /// Per span: true removes the span's columns (hard mask) instead of
    /// applying a soft intensity.
    pub hard: Vec<bool>,
    col_span: Vec<Option<u32>>,
}

impl AttentionMask {
    /// Plain causal mask.
    pub fn causal() -> Self {
        Self::default()
    }

    pub fn with_spans(spans: Vec<SpanBias>) -> Self {
        let hard = vec![false; spans.len()];
        let mut m = Self {
            isolation: None,
            spans,
            hard,
            col_span: Vec::new(),
        };
        m.index_columns();
        m
    }

    pub fn with_isolation(mut self, groups: Vec<Option<u32>>) -> Self {
        self.isolation = Some(groups);
        self
    }

    pub fn with_hard(mut self, hard: Vec<bool>) -> Self {
        assert_eq!(hard.len(), self.spans.len());
        self.hard = hard;
        self
    }

    pub fn n_spans(&self) -> usize {
        self.spans.len()
    }

    fn index_columns(&mut self) {
        let end = self.spans.iter().map(|s| s.cols.end).max().unwrap_or(0);
        self.col_span = vec![None; end];
        for (i, s) in self.spans.iter().enumerate() {
            for c in s.cols.clone() {
                self.col_span[c] = Some(i as u32);
            }
        }
    }

    #[inline]
    pub fn span_of_col(&self, c: usize) -> Option<usize> {
        self.col_span.get(c).copied().flatten().map(|s| s as usize)
    }

    #[inline]
    fn isolated(&self, r: usize, c: usize) -> bool {
        match &self.isolation {
            None => false,
            Some(groups) => {
                let gr = groups.get(r).copied().flatten();
                let gc = groups.get(c).copied().flatten();
                matches!((gr, gc), (Some(a), Some(b)) if a != b)
            }
        }
    }

    /// Writes the additive bias of row `r` over columns `0..=r` into `out`.
    pub fn row_bias<T: Scalar>(&self, r: usize, intensities: Option<&[T]>, out: &mut [T]) {
        debug_assert_eq!(out.len(), r + 1);
        for (c, o) in out.iter_mut().enumerate() {
            *o = T::zero();
            if self.isolated(r, c) {
                *o = T::neg_infinity();
                continue;
            }
            if let Some(i) = self.span_of_col(c) {
                if r >= self.spans[i].from_row {
                    if self.hard[i] {
                        *o = T::neg_infinity();
                    } else if let Some(int) = intensities {
                        *o = int[i];
                    }
                }
            }
        }
    }

    /// Whether row `r` receives any non-zero bias at all.
    fn row_has_bias(&self, r: usize, soft: bool) -> bool {
        self.isolation.is_some()
            || self
                .spans
                .iter()
                .enumerate()
                .any(|(i, s)| r >= s.from_row && (self.hard[i] || soft))
    }
}

/// Saved forward state for the backward pass.
pub struct AttentionCache<T> {
    /// Post-softmax probabilities, `heads × len × len` (upper triangle zero).
    pub probs: Vec<T>,
}

fn check_intensities<T: Scalar>(
    mask: &AttentionMask,
    intensities: Option<&[T]>,
) -> Result<(), NumericsError> {
    if let Some(int) = intensities {
        if int.len() != mask.n_spans() {
            return Err(NumericsError::Shape {
                op: "attention intensities",
                left: vec![int.len()],
                right: vec![mask.n_spans()],
            });
        }
        if let Some(i) = int.iter().position(|&x| x > T::zero() || x.is_nan()) {
            return Err(NumericsError::PositiveBias {
                index: i,
                value: int[i].as_f64(),
            });
        }
    }
    Ok(())
}

/// Full-sequence forward. `q`, `k`, `v` are `len × width` with
/// `width = heads · head_dim`.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    heads: usize,
    mask: &AttentionMask,
    intensities: Option<&[T]>,
) -> Result<(Vec<T>, AttentionCache<T>), NumericsError> {
    check_intensities(mask, intensities)?;
    let width = q.len() / len.max(1);
    let dh = width / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut out = vec![T::zero(); len * width];
    let mut probs = vec![T::zero(); heads * len * len];
    let mut kt = vec![T::zero(); dh * len];
    let mut bias = Vec::with_capacity(len);
    for h in 0..heads {
        let off = h * dh;
        for c in 0..len {
            for j in 0..dh {
                kt[j * len + c] = k[c * width + off + j];
            }
        }
        for r in 0..len {
            let row = &mut probs[(h * len + r) * len..(h * len + r) * len + r + 1];
            for j in 0..dh {
                let qv = q[r * width + off + j] * scale;
                axpy(qv, &kt[j * len..j * len + r + 1], row);
            }
            if mask.row_has_bias(r, intensities.is_some()) {
                bias.clear();
                bias.resize(r + 1, T::zero());
                mask.row_bias(r, intensities, &mut bias);
                for (s, &b) in row.iter_mut().zip(&bias) {
                    *s += b;
                }
            }
            if !softmax_in_place(row) {
                return Err(NumericsError::EmptyRow { row: r });
            }
            let o = &mut out[r * width + off..r * width + off + dh];
            for (c, &p) in row.iter().enumerate() {
                if p != T::zero() {
                    axpy(p, &v[c * width + off..c * width + off + dh], o);
                }
            }
        }
    }
    Ok((out, AttentionCache { probs }))
}

pub struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dintensities: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    len: usize,
    heads: usize,
    mask: &AttentionMask,
    soft: bool,
    cache: &AttentionCache<T>,
) -> AttentionGrads<T> {
    let width = q.len() / len.max(1);
    let dh = width / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = vec![T::zero(); len * width];
    let mut dkt = vec![T::zero(); dh * len];
    let mut dvt = vec![T::zero(); dh * len];
    let mut dk = vec![T::zero(); len * width];
    let mut dv = vec![T::zero(); len * width];
    let mut dint = if soft {
        Some(vec![T::zero(); mask.n_spans()])
    } else {
        None
    };
    let mut vt = vec![T::zero(); dh * len];
    let mut kt = vec![T::zero(); dh * len];
    let mut dp = vec![T::zero(); len];
    for h in 0..heads {
        let off = h * dh;
        for c in 0..len {
            for j in 0..dh {
                vt[j * len + c] = v[c * width + off + j];
                kt[j * len + c] = k[c * width + off + j];
            }
        }
        dkt.iter_mut().for_each(|x| *x = T::zero());
        dvt.iter_mut().for_each(|x| *x = T::zero());
        for r in 0..len {
            let p = &cache.probs[(h * len + r) * len..(h * len + r) * len + r + 1];
            let dor = &dout[r * width + off..r * width + off + dh];
            let dpr = &mut dp[..r + 1];
            dpr.iter_mut().for_each(|x| *x = T::zero());
            for j in 0..dh {
                axpy(dor[j], &vt[j * len..j * len + r + 1], dpr);
                axpy(dor[j], p, &mut dvt[j * len..j * len + r + 1]);
            }
            let inner = dot(p, dpr);
            // dS = P ⊙ (dP − ⟨P, dP⟩), stored back into dp
            for (d, &pc) in dpr.iter_mut().zip(p) {
                *d = pc * (*d - inner);
            }
            if let Some(di) = dint.as_mut() {
                for (c, &ds) in dpr.iter().enumerate() {
                    if let Some(i) = mask.span_of_col(c) {
                        if r >= mask.spans[i].from_row && !mask.hard[i] {
                            di[i] += ds;
                        }
                    }
                }
            }
            for j in 0..dh {
                dq[r * width + off + j] += scale * dot(dpr, &kt[j * len..j * len + r + 1]);
                let qs = q[r * width + off + j] * scale;
                axpy(qs, dpr, &mut dkt[j * len..j * len + r + 1]);
            }
        }
        for c in 0..len {
            for j in 0..dh {
                dk[c * width + off + j] = dkt[j * len + c];
                dv[c * width + off + j] = dvt[j * len + c];
            }
        }
    }
    AttentionGrads {
        dq,
        dk,
        dv,
        dintensities: dint,
    }
}

/// Single query row against cached keys/values (incremental decoding).
/// `k_cache`/`v_cache` hold `row + 1` rows of `width`. Writes the attended
/// output into `out` and, when requested, the head-wise probabilities into
/// `probs_out` (`heads × (row+1)`).
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Scalar>(
    q: &[T],
    k_cache: &[T],
    v_cache: &[T],
    row: usize,
    heads: usize,
    bias: &[T],
    out: &mut [T],
    mut probs_out: Option<&mut [T]>,
) -> Result<(), NumericsError> {
    let width = q.len();
    let dh = width / heads;
    let n = row + 1;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        let qh: Vec<T> = q[off..off + dh].iter().map(|&x| x * scale).collect();
        for (c, s) in scores.iter_mut().enumerate() {
            *s = dot(&qh, &k_cache[c * width + off..c * width + off + dh]) + bias[c];
        }
        if !softmax_in_place(&mut scores) {
            return Err(NumericsError::EmptyRow { row });
        }
        let o = &mut out[off..off + dh];
        o.iter_mut().for_each(|x| *x = T::zero());
        for (c, &p) in scores.iter().enumerate() {
            if p != T::zero() {
                axpy(p, &v_cache[c * width + off..c * width + off + dh], o);
            }
        }
        if let Some(po) = probs_out.as_deref_mut() {
            po[h * n..(h + 1) * n].copy_from_slice(&scores);
        }
    }
    Ok(())
}
