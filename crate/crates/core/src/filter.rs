//! Context filter: per-document embeddings from the block-`N` hidden
//! states, a linear relevance score, and the filter losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::input::SegmentedInput;
use crate::model::{embed_tokens, run_blocks, BlockMask, ModelConfig, ModelError, Weights};
use crate::numerics::kernels::log1p_sum_exp;
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::scalar::Scalar;
use crate::vocab::{Vocab, VocabError, DOCUMENT_MARK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Hidden state of `</doc_i>` in the full causal pass.
    #[default]
    Naive,
    /// Difference of consecutive sentinel states.
    Accumulative,
    /// Sentinel state with documents blocked from each other in blocks `0..N`.
    Independent,
    /// One short query+document pass per document.
    Pairwise,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Pairwise,
        Strategy::Independent,
        Strategy::Accumulative,
        Strategy::Naive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Accumulative => "accumulative",
            Strategy::Independent => "independent",
            Strategy::Pairwise => "pairwise",
        }
    }

    /// Whether blocks `0..N` of the main pass run with document isolation.
    pub fn isolates_documents(self) -> bool {
        self == Strategy::Independent
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (pairwise|independent|accumulative|naive)"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("strategy {strategy} cannot read hidden states produced {regime}")]
    Regime {
        strategy: Strategy,
        regime: &'static str,
    },
    #[error("embedding width {got} does not match the scoring head ({want})")]
    Width { got: usize, want: usize },
    #[error("positive index {index} out of range for {n} documents")]
    Positive { index: usize, n: usize },
    #[error("{labels} labels for {scores} scores")]
    Labels { labels: usize, scores: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Block-`N` hidden states tagged with the masking regime that produced
/// them.
#[derive(Clone, Copy, Debug)]
pub struct FilterHidden {
    pub states: Var,
    pub isolated: bool,
}

/// Per-document embeddings `n × d_model`.
pub fn extract_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    hidden: FilterHidden,
    seg: &SegmentedInput,
    strategy: Strategy,
) -> Result<Var, FilterError> {
    let regime_err = |regime| FilterError::Regime { strategy, regime };
    match strategy {
        Strategy::Pairwise => Err(regime_err("by the joint pass (needs per-document passes)")),
        Strategy::Independent if !hidden.isolated => Err(regime_err("without document isolation")),
        Strategy::Naive | Strategy::Accumulative if hidden.isolated => {
            Err(regime_err("with document isolation"))
        }
        Strategy::Naive | Strategy::Independent => {
            Ok(g.select_rows(hidden.states, &seg.sentinel_positions)?)
        }
        Strategy::Accumulative => {
            let cur = g.select_rows(hidden.states, &seg.sentinel_positions)?;
            let mut prev_rows = vec![seg.pre_document_position()];
            prev_rows.extend_from_slice(&seg.sentinel_positions[..seg.n_docs() - 1]);
            let prev = g.select_rows(hidden.states, &prev_rows)?;
            Ok(g.sub(cur, prev)?)
        }
    }
}

/// Tokens of the single-document scoring input `query: q document: d </doc_1>`.
pub fn pairwise_tokens(vocab: &Vocab, question: &str, document: &str) -> Result<Vec<usize>, VocabError> {
    let mut t = vec![vocab.id("query:")?];
    t.extend(vocab.tokenize(question)?);
    t.push(vocab.id(DOCUMENT_MARK)?);
    t.extend(vocab.tokenize(document)?);
    t.push(vocab.sentinel_id(1));
    Ok(t)
}

/// Embeddings from one short pass per document through blocks `0..N`; each
/// document's embedding is the last position of its pass.
pub fn pairwise_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    inputs: &[Vec<usize>],
) -> Result<Var, FilterError> {
    let mut rows = Vec::with_capacity(inputs.len());
    for tokens in inputs {
        let x = embed_tokens(g, w, cfg, tokens)?;
        let trace = run_blocks(g, w, cfg, x, cfg.lower_layers(), &BlockMask::causal())?;
        let last = trace.last().map_or(x, |t| t.output);
        rows.push(g.select_rows(last, &[tokens.len() - 1])?);
    }
    Ok(g.concat_rows(&rows)?)
}

/// Affine relevance score `s_i = ⟨w, e_i⟩ + b`, shape `[n]`.
pub fn score<T: Scalar>(
    g: &mut Graph<T>,
    head_weight: Var,
    head_bias: Var,
    embeddings: Var,
) -> Result<Var, FilterError> {
    let (got, want) = (g.value(embeddings).cols(), g.value(head_weight).rows());
    if got != want {
        return Err(FilterError::Width { got, want });
    }
    let n = g.value(embeddings).rows();
    let col = g.matmul(embeddings, head_weight)?;
    let flat = g.reshape(col, vec![n])?;
    Ok(g.add_scalar(flat, head_bias)?)
}

/// Scores with the strategy that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores {
    pub values: Vec<f64>,
    pub strategy: Strategy,
}

impl RelevanceScores {
    pub fn selected(&self) -> Vec<usize> {
        classify(&self.values)
    }
}

/// Indices with a strictly positive score.
pub fn classify(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Value and partial derivatives of a filter loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub value: f64,
    pub d_scores: Vec<f64>,
    pub d_temperature: f64,
    pub d_margin: f64,
}

/// `log(1 + Σ_neg exp((s_i − s_p)/τ))`; zero negatives give 0.
pub fn infonce_parts(scores: &[f64], positive: usize, tau: f64) -> Result<LossParts, FilterError> {
    let n = scores.len();
    if positive >= n {
        return Err(FilterError::Positive { index: positive, n });
    }
    let sp = scores[positive];
    let negs: Vec<usize> = (0..n).filter(|&i| i != positive).collect();
    let args: Vec<f64> = negs.iter().map(|&i| (scores[i] - sp) / tau).collect();
    let (value, pi) = log1p_sum_exp(&args);
    let mut d_scores = vec![0.0; n];
    let mut d_tau = 0.0;
    for ((&i, &p), &a) in negs.iter().zip(&pi).zip(&args) {
        d_scores[i] += p / tau;
        d_scores[positive] -= p / tau;
        d_tau -= p * a / tau;
    }
    Ok(LossParts {
        value,
        d_scores,
        d_temperature: d_tau,
        d_margin: 0.0,
    })
}

/// `log(1 + exp(−s_p/τ)) + log(1 + Σ_neg exp(s_i/τ))`.
pub fn infonce_star_parts(scores: &[f64], positive: usize, tau: f64) -> Result<LossParts, FilterError> {
    let n = scores.len();
    if positive >= n {
        return Err(FilterError::Positive { index: positive, n });
    }
    let labels: Vec<bool> = (0..n).map(|i| i == positive).collect();
    let mut parts = flt_parts(scores, &labels, tau, 0.0)?;
    parts.d_margin = 0.0;
    Ok(parts)
}

/// `log(1 + Σ_pos exp(−(s_i − m)/τ)) + log(1 + Σ_neg exp(s_i/τ))`.
pub fn flt_parts(scores: &[f64], labels: &[bool], tau: f64, margin: f64) -> Result<LossParts, FilterError> {
    if labels.len() != scores.len() {
        return Err(FilterError::Labels {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..scores.len()).filter(|&i| !labels[i]).collect();
    let pos_args: Vec<f64> = pos.iter().map(|&i| -(scores[i] - margin) / tau).collect();
    let neg_args: Vec<f64> = neg.iter().map(|&i| scores[i] / tau).collect();
    let (lp, pi_p) = log1p_sum_exp(&pos_args);
    let (ln, pi_n) = log1p_sum_exp(&neg_args);
    let mut d_scores = vec![0.0; scores.len()];
    let (mut d_tau, mut d_margin) = (0.0, 0.0);
    for ((&i, &p), &a) in pos.iter().zip(&pi_p).zip(&pos_args) {
        d_scores[i] = -p / tau;
        d_margin += p / tau;
        d_tau -= p * a / tau;
    }
    for ((&i, &p), &a) in neg.iter().zip(&pi_n).zip(&neg_args) {
        d_scores[i] = p / tau;
        d_tau -= p * a / tau;
    }
    Ok(LossParts {
        value: lp + ln,
        d_scores,
        d_temperature: d_tau,
        d_margin,
    })
}

pub fn loss_infonce(scores: &[f64], positive: usize, tau: f64) -> Result<f64, FilterError> {
    infonce_parts(scores, positive, tau).map(|p| p.value)
}

pub fn loss_infonce_star(scores: &[f64], positive: usize, tau: f64) -> Result<f64, FilterError> {
    infonce_star_parts(scores, positive, tau).map(|p| p.value)
}

pub fn loss_flt(scores: &[f64], labels: &[bool], tau: f64, margin: f64) -> Result<f64, FilterError> {
    flt_parts(scores, labels, tau, margin).map(|p| p.value)
}

/// Which filter loss a graph node computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterLoss<'a> {
    InfoNce { positive: usize },
    InfoNceStar { positive: usize },
    Flt { labels: &'a [bool] },
}

/// Places a filter loss on the graph. τ = exp(`log_temperature`) and
/// m = exp(`log_margin`); both receive gradients when they are parameters.
pub fn filter_loss<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    kind: FilterLoss<'_>,
    log_temperature: Var,
    log_margin: Var,
) -> Result<Var, FilterError> {
    let s: Vec<f64> = g.value(scores).data().iter().map(|v| v.as_f64()).collect();
    let tau = g.value(log_temperature).item().as_f64().exp();
    let margin = g.value(log_margin).item().as_f64().exp();
    let parts = match kind {
        FilterLoss::InfoNce { positive } => infonce_parts(&s, positive, tau)?,
        FilterLoss::InfoNceStar { positive } => infonce_star_parts(&s, positive, tau)?,
        FilterLoss::Flt { labels } => flt_parts(&s, labels, tau, margin)?,
    };
    let ds = Tensor::new(
        g.shape(scores).to_vec(),
        parts.d_scores.iter().map(|&d| T::from_f64_lossy(d)).collect(),
    )?;
    let dtheta = Tensor::scalar(T::from_f64_lossy(parts.d_temperature * tau));
    let dgamma = Tensor::scalar(T::from_f64_lossy(parts.d_margin * margin));
    Ok(g.fused_scalar(
        parts.value,
        vec![(scores, ds), (log_temperature, dtheta), (log_margin, dgamma)],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        let s = [2.625, -4.46875, -6.6875, -6.3125, -7.125, 7.84375, -12.1875, -8.9375, 3.65625, -11.3125];
        let one_based: Vec<usize> = classify(&s).iter().map(|i| i + 1).collect();
        assert_eq!(one_based, vec![1, 6, 9]);
        assert!(classify(&[-1.0, -0.5]).is_empty());
        assert!(classify(&[0.0, 1e-9]).eq(&[1]));
    }

    #[test]
    fn strategy_parsing() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("bm25".parse::<Strategy>().is_err());
    }

    #[test]
    fn empty_document_set_has_zero_loss() {
        assert_eq!(loss_flt(&[], &[], 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn infonce_without_negatives_is_zero() {
        assert_eq!(loss_infonce(&[3.0], 0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn label_count_mismatch_rejected() {
        assert!(matches!(
            loss_flt(&[1.0, 2.0], &[true], 1.0, 1.0),
            Err(FilterError::Labels { .. })
        ));
    }
}
