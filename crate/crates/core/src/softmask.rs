//! Soft mask: relevance scores to non-positive attention intensities, and
//! the per-document column spans they bias in blocks `N..2N`.

use serde::{Deserialize, Serialize};

use crate::input::SegmentedInput;
use crate::numerics::{AttentionMask, Graph, NumericsError, SpanBias, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMaskParams {
    pub w: f64,
    pub b: f64,
}

impl Default for SoftMaskParams {
    fn default() -> Self {
        Self { w: 1e-3, b: 0.0 }
    }
}

impl SoftMaskParams {
    /// `I = min(0, w·s + b)`.
    pub fn intensity(&self, s: f64) -> f64 {
        (self.w * s + self.b).min(0.0)
    }

    pub fn intensities(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.intensity(s)).collect()
    }
}

/// Graph form of the intensities; gradients reach the scores, `w` and `b`.
pub fn intensities<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    w: Var,
    b: Var,
) -> Result<Var, NumericsError> {
    let ws = g.mul_scalar(scores, w)?;
    let shifted = g.add_scalar(ws, b)?;
    Ok(g.min_zero(shifted))
}

/// One span per document: its masked columns, active from row `u_i`.
pub fn document_spans(seg: &SegmentedInput) -> Vec<SpanBias> {
    (0..seg.n_docs())
        .map(|i| SpanBias {
            cols: seg.masked_columns(i),
            from_row: seg.mask_start_row(i),
        })
        .collect()
}

/// Mask carrying one soft intensity per document.
pub fn build_mask(seg: &SegmentedInput) -> AttentionMask {
    AttentionMask::with_spans(document_spans(seg))
}

/// Mask hiding the listed documents outright from rows `u_i` onward.
pub fn hard_mask(seg: &SegmentedInput, docs: &[usize]) -> AttentionMask {
    let hard = (0..seg.n_docs()).map(|i| docs.contains(&i)).collect();
    build_mask(seg).with_hard(hard)
}

/// Mask isolating documents from one another (independent extraction).
pub fn isolation_mask(seg: &SegmentedInput) -> AttentionMask {
    AttentionMask::causal().with_isolation(seg.document_groups())
}

/// Dense `len × len` bias (zero above the diagonal). Inspection only; the
/// forward pass works from the span form.
pub fn build_bias<T: Scalar>(seg: &SegmentedInput, intensities: &[T]) -> Result<Tensor<T>, NumericsError> {
    if intensities.len() != seg.n_docs() {
        return Err(NumericsError::Shape {
            op: "build_bias",
            left: vec![seg.n_docs()],
            right: vec![intensities.len()],
        });
    }
    if let Some((index, &v)) = intensities.iter().enumerate().find(|(_, v)| !(**v <= T::zero())) {
        return Err(NumericsError::PositiveBias {
            index,
            value: v.as_f64(),
        });
    }
    let mask = build_mask(seg);
    let n = seg.len();
    let mut out = Tensor::zeros(&[n, n]);
    for r in 0..n {
        mask.row_bias(r, Some(intensities), &mut out.row_mut(r)[..=r]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_examples() {
        let zero = SoftMaskParams { w: 0.0, b: 0.0 };
        assert_eq!(zero.intensities(&[3.0, -2.0]), vec![0.0, 0.0]);
        let learned = SoftMaskParams { w: 0.289, b: -0.206 };
        assert_eq!(learned.intensity(2.625), 0.0);
        assert!((learned.intensity(-12.1875) - (-3.7281875)).abs() < 1e-9);
    }
}
