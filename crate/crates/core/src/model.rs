//! Decoder-only transformer with `2N` pre-norm blocks, split after block `N`.
//!
//! Blocks `0..N` produce the hidden states the context filter reads; blocks
//! `N..2N` read under the soft mask.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{AttentionMask, Graph, NumericsError, Tensor, Var};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Total block count (`2N` at the default proportion).
    pub n_layers: usize,
    /// Blocks feeding the context filter (`N`).
    pub filter_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub rotary: bool,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            filter_layers: 4,
            d_ff: 256,
            max_context: 512,
            rotary: true,
            rope_base: 10000.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sequence of {len} tokens exceeds the context limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("token id {0} outside the vocabulary")]
    Token(usize),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {got:?}, expected {want:?}")]
    TensorShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.rotary && (self.d_model / self.n_heads) % 2 != 0 {
            return bad("rotary encoding needs an even head dimension");
        }
        if self.filter_layers == 0 || self.filter_layers >= self.n_layers {
            return bad("filter split N must satisfy 1 <= N < total layers");
        }
        if self.vocab_size == 0 || self.max_context == 0 || self.d_ff == 0 {
            return bad("sizes must be positive");
        }
        Ok(())
    }

    /// Sets `N` from a proportion of the total depth (¼, ½, ¾).
    pub fn with_filter_proportion(mut self, proportion: f64) -> Result<Self, ModelError> {
        let n = (self.n_layers as f64 * proportion).round() as usize;
        self.filter_layers = n;
        self.validate()?;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lower_layers(&self) -> Range<usize> {
        0..self.filter_layers
    }

    pub fn upper_layers(&self) -> Range<usize> {
        self.filter_layers..self.n_layers
    }
}

/// Per-block weights, generic over the stored value (tensors, graph
/// handles, gradients, optimiser moments).
#[derive(Clone, Debug)]
pub struct LayerWeights<P> {
    pub attn_norm: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub mlp_norm: P,
    pub w_up: P,
    pub w_down: P,
}

/// Every trainable quantity of the integrated model.
#[derive(Clone, Debug)]
pub struct Weights<P> {
    pub embed: P,
    pub layers: Vec<LayerWeights<P>>,
    pub final_norm: P,
    pub lm_head: P,
    /// Scoring map `d_model → 1`.
    pub filter_weight: P,
    pub filter_bias: P,
    /// θ with τ = exp(θ).
    pub log_temperature: P,
    /// γ with m = exp(γ).
    pub log_margin: P,
    pub mask_w: P,
    pub mask_b: P,
}

/// Coarse role of a named parameter, used for learning-rate groups and
/// freezing rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Block(usize),
    Output,
    FilterHead,
    Temperature,
    Margin,
    MaskW,
    MaskB,
}

impl<P> LayerWeights<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> LayerWeights<Q> {
        let mut g = |n: &str, p: &P| f(&format!("{prefix}.{n}"), p);
        LayerWeights {
            attn_norm: g("attn_norm", &self.attn_norm),
            wq: g("wq", &self.wq),
            wk: g("wk", &self.wk),
            wv: g("wv", &self.wv),
            wo: g("wo", &self.wo),
            mlp_norm: g("mlp_norm", &self.mlp_norm),
            w_up: g("w_up", &self.w_up),
            w_down: g("w_down", &self.w_down),
        }
    }

    fn fields(&self) -> [(&'static str, &P); 8] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut P); 8] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

impl<P> Weights<P> {
    /// Maps every entry in canonical order.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Weights<Q> {
        let embed = f("embed", &self.embed);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("layers.{i}"), &mut f))
            .collect();
        Weights {
            embed,
            layers,
            final_norm: f("final_norm", &self.final_norm),
            lm_head: f("lm_head", &self.lm_head),
            filter_weight: f("filter.weight", &self.filter_weight),
            filter_bias: f("filter.bias", &self.filter_bias),
            log_temperature: f("filter.log_temperature", &self.log_temperature),
            log_margin: f("filter.log_margin", &self.log_margin),
            mask_w: f("mask.w", &self.mask_w),
            mask_b: f("mask.b", &self.mask_b),
        }
    }

    /// Mutable entries with their names, in canonical order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out: Vec<(String, &mut P)> = vec![("embed".into(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, p) in l.fields_mut() {
                out.push((format!("layers.{i}.{n}"), p));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out.push(("filter.weight".into(), &mut self.filter_weight));
        out.push(("filter.bias".into(), &mut self.filter_bias));
        out.push(("filter.log_temperature".into(), &mut self.log_temperature));
        out.push(("filter.log_margin".into(), &mut self.log_margin));
        out.push(("mask.w".into(), &mut self.mask_w));
        out.push(("mask.b".into(), &mut self.mask_b));
        out
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out: Vec<(String, &P)> = vec![("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, p) in l.fields() {
                out.push((format!("layers.{i}.{n}"), p));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out.push(("filter.weight".into(), &self.filter_weight));
        out.push(("filter.bias".into(), &self.filter_bias));
        out.push(("filter.log_temperature".into(), &self.log_temperature));
        out.push(("filter.log_margin".into(), &self.log_margin));
        out.push(("mask.w".into(), &self.mask_w));
        out.push(("mask.b".into(), &self.mask_b));
        out
    }
}

pub fn role_of(name: &str) -> ParamRole {
    if let Some(rest) = name.strip_prefix("layers.") {
        let idx = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        return ParamRole::Block(idx);
    }
    match name {
        "embed" => ParamRole::Embedding,
        "final_norm" | "lm_head" => ParamRole::Output,
        "filter.weight" | "filter.bias" => ParamRole::FilterHead,
        "filter.log_temperature" => ParamRole::Temperature,
        "filter.log_margin" => ParamRole::Margin,
        "mask.w" => ParamRole::MaskW,
        "mask.b" => ParamRole::MaskB,
        other => panic!("unknown parameter {other}"),
    }
}

/// Concrete parameter set.
pub type ModelParams<T> = Weights<Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub std: f64,
    pub head_std: f64,
    pub mask_w: f64,
    pub mask_b: f64,
    pub log_margin: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            std: 0.02,
            head_std: 0.02,
            mask_w: 1e-3,
            mask_b: 0.0,
            log_margin: 0.0,
        }
    }
}

impl<T: Scalar> Weights<Tensor<T>> {
    /// Random initialisation. `zero_rows` (the sentinel ids) start at zero.
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        init: &InitConfig,
        zero_rows: &[usize],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut embed = Tensor::randn(&[v, d], init.std, rng);
        for &r in zero_rows {
            embed.row_mut(r).iter_mut().for_each(|x| *x = T::zero());
        }
        let out_std = init.std / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::full(&[d], T::one()),
                wq: Tensor::randn(&[d, d], init.std, rng),
                wk: Tensor::randn(&[d, d], init.std, rng),
                wv: Tensor::randn(&[d, d], init.std, rng),
                wo: Tensor::randn(&[d, d], out_std, rng),
                mlp_norm: Tensor::full(&[d], T::one()),
                w_up: Tensor::randn(&[d, ff], init.std, rng),
                w_down: Tensor::randn(&[ff, d], out_std, rng),
            })
            .collect();
        Ok(Self {
            embed,
            layers,
            final_norm: Tensor::full(&[d], T::one()),
            lm_head: Tensor::randn(&[d, v], init.std, rng),
            filter_weight: Tensor::randn(&[d, 1], init.head_std, rng),
            filter_bias: Tensor::scalar(T::zero()),
            log_temperature: Tensor::scalar(T::zero()),
            log_margin: Tensor::scalar(T::from_f64_lossy(init.log_margin)),
            mask_w: Tensor::scalar(T::from_f64_lossy(init.mask_w)),
            mask_b: Tensor::scalar(T::from_f64_lossy(init.mask_b)),
        })
    }

    /// Places every tensor on `g`; `trainable(name)` selects differentiable
    /// leaves, the rest become constants.
    pub fn to_graph(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Weights<Var> {
        self.map(|name, t| {
            if trainable(name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn cast<U: Scalar>(&self) -> Weights<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Loads values by name, checking shapes against `self`.
    pub fn load_named(&mut self, named: &[(String, Tensor<f32>)]) -> Result<(), ModelError> {
        for (name, slot) in self.named_mut() {
            let src = named
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if src.shape() != slot.shape() {
                return Err(ModelError::TensorShape {
                    name,
                    got: src.shape().to_vec(),
                    want: slot.shape().to_vec(),
                });
            }
            *slot = src.cast();
        }
        Ok(())
    }
}

/// Attention regime of one group of blocks.
#[derive(Clone)]
pub struct BlockMask {
    pub mask: Arc<AttentionMask>,
    pub intensities: Option<Var>,
}

impl BlockMask {
    pub fn causal() -> Self {
        Self {
            mask: Arc::new(AttentionMask::causal()),
            intensities: None,
        }
    }

    pub fn new(mask: Arc<AttentionMask>, intensities: Option<Var>) -> Self {
        Self { mask, intensities }
    }
}

/// Per-block handles recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub output: Var,
    pub k: Var,
    pub v: Var,
    pub attention: Var,
}

pub fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<Var, ModelError> {
    if tokens.len() > cfg.max_context {
        return Err(ModelError::ContextOverflow {
            len: tokens.len(),
            limit: cfg.max_context,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::Token(t));
    }
    Ok(g.embedding(w.embed, tokens)?)
}

/// Runs blocks `layers` on `x`; returns the trace of each block.
pub fn run_blocks<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    mut x: Var,
    layers: Range<usize>,
    mask: &BlockMask,
) -> Result<Vec<BlockTrace>, ModelError> {
    let mut traces = Vec::with_capacity(layers.len());
    for li in layers {
        let lw = &w.layers[li];
        let h = g.rms_norm(x, lw.attn_norm, NORM_EPS)?;
        let mut q = g.matmul(h, lw.wq)?;
        let mut k = g.matmul(h, lw.wk)?;
        let v = g.matmul(h, lw.wv)?;
        if cfg.rotary {
            q = g.rope(q, cfg.n_heads, 0, cfg.rope_base)?;
            k = g.rope(k, cfg.n_heads, 0, cfg.rope_base)?;
        }
        let att = g.attention(q, k, v, cfg.n_heads, mask.mask.clone(), mask.intensities)?;
        let proj = g.matmul(att, lw.wo)?;
        x = g.add(x, proj)?;
        let h2 = g.rms_norm(x, lw.mlp_norm, NORM_EPS)?;
        let up = g.matmul(h2, lw.w_up)?;
        let act = g.silu(up);
        let down = g.matmul(act, lw.w_down)?;
        x = g.add(x, down)?;
        traces.push(BlockTrace {
            output: x,
            k,
            v,
            attention: att,
        });
    }
    Ok(traces)
}

/// Output logits for the selected rows of the final hidden states.
pub fn logits_at<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    hidden: Var,
    rows: &[usize],
) -> Result<Var, ModelError> {
    let sel = g.select_rows(hidden, rows)?;
    let normed = g.rms_norm(sel, w.final_norm, NORM_EPS)?;
    Ok(g.matmul(normed, w.lm_head)?)
}

/// Result of [`forward_prefix`].
pub struct PrefixOutput {
    /// Output of every block that ran, indexed from the first requested one.
    pub hidden: Vec<Var>,
    pub traces: Vec<BlockTrace>,
    /// `len × vocab` logits, present when the range ends at the last block.
    pub logits: Option<Var>,
}

/// Runs blocks `depth` (a sub-range of `0..2N`) from the token embeddings.
/// The upper mask (soft bias) applies only to blocks `N..2N`; blocks `0..N`
/// use `lower`.
pub fn forward_prefix<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    lower: &BlockMask,
    upper: &BlockMask,
    depth: Range<usize>,
) -> Result<PrefixOutput, ModelError> {
    if depth.start != 0 || depth.end > cfg.n_layers {
        return Err(ModelError::Config(format!(
            "depth range {depth:?} must start at 0 and end by {}",
            cfg.n_layers
        )));
    }
    let x = embed_tokens(g, w, cfg, tokens)?;
    let split = cfg.filter_layers.min(depth.end);
    let mut traces = run_blocks(g, w, cfg, x, 0..split, lower)?;
    if depth.end > split {
        let from = traces.last().map_or(x, |t| t.output);
        traces.extend(run_blocks(g, w, cfg, from, split..depth.end, upper)?);
    }
    let hidden: Vec<Var> = traces.iter().map(|t| t.output).collect();
    let logits = if depth.end == cfg.n_layers {
        let last = *hidden.last().unwrap_or(&x);
        let rows: Vec<usize> = (0..tokens.len()).collect();
        Some(logits_at(g, w, last, &rows)?)
    } else {
        None
    };
    Ok(PrefixOutput {
        hidden,
        traces,
        logits,
    })
}
