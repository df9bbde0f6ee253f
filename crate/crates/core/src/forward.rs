//! The integrated pass: blocks `0..N`, relevance scores, intensities, and
//! blocks `N..2N` reading under the soft mask. Also greedy decoding with a
//! key/value cache and the attention-share probe.

use std::sync::Arc;

use crate::filter::{extract_embeddings, pairwise_embeddings, pairwise_tokens, score, FilterHidden, Strategy};
use crate::input::{build_input, BuildMode, QaSample, SegmentedInput};
use crate::model::{
    embed_tokens, logits_at, run_blocks, BlockMask, BlockTrace, ModelConfig, ModelParams, Weights, NORM_EPS,
};
use crate::numerics::attention::attend_row;
use crate::numerics::kernels::{apply_rope, matmul_acc, rms_norm_row, rope_table, silu};
use crate::numerics::{AttentionMask, Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::softmask::{build_mask, hard_mask, intensities, isolation_mask};
use crate::vocab::Vocab;
use crate::Error;

/// A built input plus the single-document inputs of the pairwise strategy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedInput {
    pub seg: SegmentedInput,
    pub pairwise: Vec<Vec<usize>>,
}

impl PreparedInput {
    pub fn new(
        vocab: &Vocab,
        sample: &QaSample,
        mode: BuildMode,
        strategy: Strategy,
        max_len: usize,
    ) -> Result<Self, Error> {
        let seg = build_input(vocab, sample, mode, max_len)?;
        let pairwise = if strategy == Strategy::Pairwise {
            sample
                .documents
                .iter()
                .map(|d| pairwise_tokens(vocab, &sample.question, &d.text))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self { seg, pairwise })
    }
}

/// How blocks `N..2N` see the documents.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum ReadMask {
    /// Plain causal attention.
    #[default]
    Causal,
    /// Intensities from the filter scores through (w, b).
    Soft,
    /// Caller-supplied intensities, one per document.
    Intensities(Vec<f64>),
    /// The listed documents are removed from rows `u_i` onward.
    Hard(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassSpec {
    pub strategy: Strategy,
    /// Compute relevance scores.
    pub filter: bool,
    /// Run blocks `N..2N`.
    pub read: bool,
    pub mask: ReadMask,
}

impl PassSpec {
    pub fn lm_only() -> Self {
        Self {
            strategy: Strategy::Naive,
            filter: false,
            read: true,
            mask: ReadMask::Causal,
        }
    }

    pub fn fltlm(strategy: Strategy) -> Self {
        Self {
            strategy,
            filter: true,
            read: true,
            mask: ReadMask::Soft,
        }
    }
}

pub struct PassOutput {
    /// Output of block `N`.
    pub filter_hidden: Var,
    pub scores: Option<Var>,
    pub intensities: Option<Var>,
    pub traces: Vec<BlockTrace>,
    /// Logits at the requested rows, when blocks `N..2N` ran.
    pub logits: Option<Var>,
    pub upper_mask: Arc<AttentionMask>,
}

/// Records one integrated pass on `g`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    input: &PreparedInput,
    spec: &PassSpec,
    logit_rows: &[usize],
) -> Result<PassOutput, Error> {
    let seg = &input.seg;
    let isolated = spec.strategy.isolates_documents();
    let lower = if isolated {
        BlockMask::new(Arc::new(isolation_mask(seg)), None)
    } else {
        BlockMask::causal()
    };
    let x = embed_tokens(g, w, cfg, &seg.tokens)?;
    let mut traces = run_blocks(g, w, cfg, x, cfg.lower_layers(), &lower)?;
    let filter_hidden = traces.last().map_or(x, |t| t.output);

    let scores = if spec.filter || spec.mask == ReadMask::Soft {
        let emb = if spec.strategy == Strategy::Pairwise {
            if input.pairwise.len() != seg.n_docs() {
                return Err(Error::Config("pairwise strategy needs one mini-input per document".into()));
            }
            pairwise_embeddings(g, w, cfg, &input.pairwise)?
        } else {
            let hidden = FilterHidden {
                states: filter_hidden,
                isolated,
            };
            extract_embeddings(g, hidden, seg, spec.strategy)?
        };
        Some(score(g, w.filter_weight, w.filter_bias, emb)?)
    } else {
        None
    };

    let (upper_mask, int) = match &spec.mask {
        ReadMask::Causal => (Arc::new(AttentionMask::causal()), None),
        ReadMask::Soft => {
            let s = scores.expect("scores computed for the soft mask");
            let i = intensities(g, s, w.mask_w, w.mask_b)?;
            (Arc::new(build_mask(seg)), Some(i))
        }
        ReadMask::Intensities(values) => {
            let t = Tensor::from_f64(&[values.len()], values)?;
            (Arc::new(build_mask(seg)), Some(g.constant(t)))
        }
        ReadMask::Hard(docs) => (Arc::new(hard_mask(seg, docs)), None),
    };

    let logits = if spec.read {
        let upper = BlockMask::new(upper_mask.clone(), int);
        traces.extend(run_blocks(g, w, cfg, filter_hidden, cfg.upper_layers(), &upper)?);
        let last = traces.last().map_or(x, |t| t.output);
        Some(logits_at(g, w, last, logit_rows)?)
    } else {
        None
    };
    Ok(PassOutput {
        filter_hidden,
        scores,
        intensities: int,
        traces,
        logits,
        upper_mask,
    })
}

/// Relevance scores of one input (no gradients).
pub fn relevance_scores<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &PreparedInput,
    strategy: Strategy,
) -> Result<Vec<f64>, Error> {
    let mut g = Graph::new();
    let w = params.to_graph(&mut g, |_| false);
    let spec = PassSpec {
        strategy,
        filter: true,
        read: false,
        mask: ReadMask::Causal,
    };
    let out = forward(&mut g, &w, cfg, input, &spec, &[])?;
    let s = out.scores.expect("filter pass yields scores");
    Ok(g.value(s).data().iter().map(|v| v.as_f64()).collect())
}

/// Per-document attention mass at the position that predicts the first
/// answer token, averaged over all heads of blocks `N..2N`.
pub fn attention_share<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &PreparedInput,
    spec: &PassSpec,
) -> Result<Vec<f64>, Error> {
    let seg = &input.seg;
    let row = seg.answer_start - 1;
    let mut spec = spec.clone();
    spec.read = true;
    let mut g = Graph::new();
    let w = params.to_graph(&mut g, |_| false);
    let out = forward(&mut g, &w, cfg, input, &spec, &[row])?;
    let len = seg.len();
    let mut share = vec![0.0; seg.n_docs()];
    let mut count = 0usize;
    for trace in &out.traces[cfg.filter_layers..] {
        let probs = g
            .attention_probs(trace.attention)
            .expect("attention node keeps its probabilities");
        for h in 0..cfg.n_heads {
            let p = &probs[(h * len + row) * len..(h * len + row) * len + len];
            for (i, s) in share.iter_mut().enumerate() {
                *s += seg.masked_columns(i).map(|c| p[c].as_f64()).sum::<f64>();
            }
            count += 1;
        }
    }
    share.iter_mut().for_each(|s| *s /= count as f64);
    Ok(share)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Decoding hit the context limit before stopping.
    pub truncated: bool,
    pub scores: Option<Vec<f64>>,
    pub intensities: Option<Vec<f64>>,
}

struct LayerCache<T> {
    k: Vec<T>,
    v: Vec<T>,
    mask: Arc<AttentionMask>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from an inference-mode input. The prompt is run once
/// through the tape; each new token then attends the cached keys and
/// values, with the upper blocks applying the same per-document biases as
/// the prefill (every generated row lies past all `u_i`).
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &PreparedInput,
    spec: &PassSpec,
    max_new_tokens: usize,
    stop: usize,
) -> Result<Generation, Error> {
    let seg = &input.seg;
    let mut spec = spec.clone();
    spec.read = true;
    let mut g = Graph::new();
    let w = params.to_graph(&mut g, |_| false);
    let last = seg.len() - 1;
    let out = forward(&mut g, &w, cfg, input, &spec, &[last])?;
    let to_f64 = |v: Var, g: &Graph<T>| -> Vec<f64> { g.value(v).data().iter().map(|x| x.as_f64()).collect() };
    let scores = out.scores.map(|s| to_f64(s, &g));
    let int_values: Option<Vec<T>> = out.intensities.map(|i| g.value(i).data().to_vec());
    let mut result = Generation {
        tokens: Vec::new(),
        truncated: false,
        scores,
        intensities: int_values.as_ref().map(|v| v.iter().map(|x| x.as_f64()).collect()),
    };
    if max_new_tokens == 0 {
        return Ok(result);
    }
    let mut next = argmax(g.value(out.logits.expect("read pass")).row(0));

    let lower_mask = if spec.strategy.isolates_documents() {
        Arc::new(isolation_mask(seg))
    } else {
        Arc::new(AttentionMask::causal())
    };
    let mut caches: Vec<LayerCache<T>> = out
        .traces
        .iter()
        .enumerate()
        .map(|(li, t)| LayerCache {
            k: g.value(t.k).data().to_vec(),
            v: g.value(t.v).data().to_vec(),
            mask: if li < cfg.filter_layers {
                lower_mask.clone()
            } else {
                out.upper_mask.clone()
            },
        })
        .collect();
    drop(g);

    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let dh = cfg.head_dim();
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut pos = seg.len();
    loop {
        result.tokens.push(next);
        if next == stop || result.tokens.len() >= max_new_tokens {
            break;
        }
        if pos >= cfg.max_context {
            result.truncated = true;
            break;
        }
        let mut x = params.embed.row(next).to_vec();
        let mut h = vec![T::zero(); d];
        let mut bias = vec![T::zero(); pos + 1];
        for (li, lw) in params.layers.iter().enumerate() {
            rms_norm_row(&x, lw.attn_norm.data(), eps, &mut h);
            let project = |wt: &Tensor<T>| {
                let mut o = vec![T::zero(); d];
                matmul_acc(&h, wt.data(), &mut o, 1, d, d);
                o
            };
            let (mut q, mut k, v) = (project(&lw.wq), project(&lw.wk), project(&lw.wv));
            if cfg.rotary {
                let (cos, sin) = rope_table::<T>(pos..pos + 1, dh, cfg.rope_base);
                let (q0, k0) = (q.clone(), k.clone());
                apply_rope(&q0, &mut q, 1, cfg.n_heads, dh, &cos, &sin, false);
                apply_rope(&k0, &mut k, 1, cfg.n_heads, dh, &cos, &sin, false);
            }
            let cache = &mut caches[li];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            let int = if li < cfg.filter_layers {
                None
            } else {
                int_values.as_deref()
            };
            cache.mask.row_bias(pos, int, &mut bias);
            let mut att = vec![T::zero(); d];
            attend_row(&q, &cache.k, &cache.v, pos, cfg.n_heads, &bias, &mut att, None)?;
            let mut proj = vec![T::zero(); d];
            matmul_acc(&att, lw.wo.data(), &mut proj, 1, d, d);
            x.iter_mut().zip(&proj).for_each(|(a, &b)| *a = *a + b);
            rms_norm_row(&x, lw.mlp_norm.data(), eps, &mut h);
            let mut up = vec![T::zero(); ff];
            matmul_acc(&h, lw.w_up.data(), &mut up, 1, d, ff);
            let act: Vec<T> = up.into_iter().map(silu).collect();
            let mut down = vec![T::zero(); d];
            matmul_acc(&act, lw.w_down.data(), &mut down, 1, ff, d);
            x.iter_mut().zip(&down).for_each(|(a, &b)| *a = *a + b);
        }
        rms_norm_row(&x, params.final_norm.data(), eps, &mut h);
        let mut logits = vec![T::zero(); cfg.vocab_size];
        matmul_acc(&h, params.lm_head.data(), &mut logits, 1, d, cfg.vocab_size);
        next = argmax(&logits);
        pos += 1;
    }
    Ok(result)
}

/// Decoding by re-running the whole sequence through the tape for every
/// new token. Slow; serves as the reference for [`generate`].
pub fn generate_uncached<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &PreparedInput,
    spec: &PassSpec,
    max_new_tokens: usize,
    stop: usize,
) -> Result<Vec<usize>, Error> {
    let mut spec = spec.clone();
    spec.read = true;
    let mut ext = input.clone();
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let mut g = Graph::new();
        let w = params.to_graph(&mut g, |_| false);
        let last = ext.seg.len() - 1;
        let pass = forward(&mut g, &w, cfg, &ext, &spec, &[last])?;
        let next = argmax(g.value(pass.logits.expect("read pass")).row(0));
        out.push(next);
        if next == stop || ext.seg.len() >= cfg.max_context {
            break;
        }
        ext.seg.tokens.push(next);
        ext.seg.answer_mask.push(false);
        ext.seg.answer_start = ext.seg.tokens.len();
    }
    Ok(out)
}
