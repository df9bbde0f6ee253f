//! Training regimes, the learning-rate schedule, AdamW, and checkpoints.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_seed, Split};
use crate::filter::{classify, filter_loss, FilterLoss, Strategy};
use crate::forward::{forward, relevance_scores, PassSpec, PreparedInput, ReadMask};
use crate::model::{role_of, InitConfig, ModelConfig, ParamRole, Weights};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::vocab::{Vocab, VocabConfig};
use crate::{Error, Params32};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Language-model loss only, no bias.
    Sft,
    /// `L_lm + λ·L_flt` with the soft mask.
    Fltlm,
    /// Both losses, bias forced to zero, (w, b) frozen.
    FltlmNoSoftmask,
    /// `L_flt` only; blocks `0..N` and the scoring head update.
    FilterOnly,
    /// `L_flt + μ·L_lm` without the soft mask.
    FilterPlusLm,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Sft,
        Regime::Fltlm,
        Regime::FltlmNoSoftmask,
        Regime::FilterOnly,
        Regime::FilterPlusLm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Sft => "sft",
            Regime::Fltlm => "fltlm",
            Regime::FltlmNoSoftmask => "fltlm_no_softmask",
            Regime::FilterOnly => "filter_only",
            Regime::FilterPlusLm => "filter_plus_lm",
        }
    }

    pub fn uses_filter(self) -> bool {
        self != Regime::Sft
    }

    pub fn reads(self) -> bool {
        self != Regime::FilterOnly
    }

    /// The pass a trained model of this regime runs at inference.
    pub fn pass_spec(self, strategy: Strategy) -> PassSpec {
        PassSpec {
            strategy,
            filter: self.uses_filter(),
            read: self.reads(),
            mask: if self == Regime::Fltlm {
                ReadMask::Soft
            } else {
                ReadMask::Causal
            },
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == norm)
            .ok_or_else(|| {
                format!("unknown regime {s:?} (sft|fltlm|fltlm-no-softmask|filter-only|filter-plus-lm)")
            })
    }
}

/// Margin `m = exp(γ)`: learned from `γ = 0`, or held at a fixed value.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Margin {
    #[default]
    Learnable,
    Fixed(f64),
}

impl fmt::Display for Margin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Margin::Learnable => f.write_str("learnable"),
            Margin::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for Margin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "learnable" {
            return Ok(Margin::Learnable);
        }
        let v: f64 = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("margin must be `learnable` or `fixed:<value>`, got {s:?}"))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(format!("fixed margin must be positive, got {v}"));
        }
        Ok(Margin::Fixed(v))
    }
}

impl Serialize for Margin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Margin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub mu: f64,
    pub strategy: Strategy,
    pub margin: Margin,
    pub batch_size: usize,
    pub epochs: usize,
    /// Peak rate of embeddings, blocks and output layer before scaling.
    pub lr_backbone: f64,
    /// Peak rate of the scoring head, margin and (w, b) before scaling.
    pub lr_head: f64,
    /// Common factor applied to both peak rates.
    pub lr_multiplier: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Filter probe every this many steps (0 disables).
    pub probe_every: usize,
    /// Keep (w, b) at their initial values in the fltlm regime.
    pub freeze_soft_mask: bool,
    /// Fraction of the run during which (w, b) stay at their initial values
    /// while the filter learns.
    pub mask_warmup: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Fltlm,
            lambda: 0.5,
            mu: 0.5,
            strategy: Strategy::Naive,
            margin: Margin::Learnable,
            batch_size: 8,
            epochs: 1,
            lr_backbone: 1e-4,
            lr_head: 1e-2,
            lr_multiplier: 10.0,
            warmup_ratio: 0.01,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            probe_every: 100,
            freeze_soft_mask: false,
            mask_warmup: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return bad("lambda and mu must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mask_warmup) {
            return bad("mask_warmup must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(self.lr_backbone >= 0.0 && self.lr_head >= 0.0 && self.lr_multiplier >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Whether parameter `name` is updated under this configuration.
    pub fn is_trainable(&self, name: &str, model: &ModelConfig) -> bool {
        let r = self.regime;
        match role_of(name) {
            ParamRole::Temperature => false,
            ParamRole::Margin => r.uses_filter() && self.margin == Margin::Learnable,
            ParamRole::MaskW | ParamRole::MaskB => r == Regime::Fltlm && !self.freeze_soft_mask,
            ParamRole::FilterHead => r.uses_filter(),
            ParamRole::Embedding => true,
            ParamRole::Block(i) => r.reads() || i < model.filter_layers,
            ParamRole::Output => r.reads(),
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> LearningRates {
        let f = lr_at(step, total, self.warmup_ratio);
        LearningRates {
            backbone: f * self.lr_backbone * self.lr_multiplier,
            head: f * self.lr_head * self.lr_multiplier,
        }
    }
}

/// Schedule factor in `[0, 1]`: linear ramp over the first `warmup_ratio`
/// of the steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warm = ((warmup_ratio * total as f64).round() as usize).clamp(1, total);
    if step < warm {
        step as f64 / warm as f64
    } else {
        (total - step) as f64 / (total - warm).max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub backbone: f64,
    pub head: f64,
}

/// Loss values of one sample or one batch.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub lm: Option<f64>,
    pub flt: Option<f64>,
}

/// Records the regime's loss for one training input on `g`.
pub fn sample_loss<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    input: &PreparedInput,
) -> Result<(Var, LossBreakdown), Error> {
    let spec = cfg.regime.pass_spec(cfg.strategy);
    let (rows, targets) = input.seg.lm_targets();
    let out = forward(g, w, model, input, &spec, &rows)?;
    let lm = match out.logits {
        Some(logits) => {
            let all = vec![true; rows.len()];
            Some(g.cross_entropy(logits, &targets, &all)?)
        }
        None => None,
    };
    let flt = match out.scores {
        Some(s) => {
            let labels = &input.seg.relevance_labels;
            Some(filter_loss(
                g,
                s,
                FilterLoss::Flt { labels },
                w.log_temperature,
                w.log_margin,
            )?)
        }
        None => None,
    };
    let weighted = |g: &mut Graph<T>, v: Var, k: f64| g.scale(v, T::from_f64_lossy(k));
    let total = match (cfg.regime, lm, flt) {
        (Regime::Sft, Some(l), _) => l,
        (Regime::FilterOnly, _, Some(f)) => f,
        (Regime::Fltlm | Regime::FltlmNoSoftmask, Some(l), Some(f)) => {
            let wf = weighted(g, f, cfg.lambda);
            g.add(l, wf)?
        }
        (Regime::FilterPlusLm, Some(l), Some(f)) => {
            let wl = weighted(g, l, cfg.mu);
            g.add(f, wl)?
        }
        _ => unreachable!("pass spec follows the regime"),
    };
    let value = |v: Option<Var>, g: &Graph<T>| v.map(|v| g.value(v).item().as_f64());
    let breakdown = LossBreakdown {
        total: g.value(total).item().as_f64(),
        lm: value(lm, g),
        flt: value(flt, g),
    };
    Ok((total, breakdown))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub loss: f64,
    pub l_lm: Option<f64>,
    pub l_flt: Option<f64>,
    pub w: f64,
    pub b: f64,
    pub m: f64,
    pub grad_norm: f64,
    pub probe_accuracy: Option<f64>,
    pub event: Option<String>,
}

pub const LOG_HEADER: &str =
    "step,epoch,lr_backbone,lr_head,loss,l_lm,l_flt,w,b,m,grad_norm,probe_accuracy,event";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr_backbone,
            self.lr_head,
            self.loss,
            opt(self.l_lm),
            opt(self.l_flt),
            self.w,
            self.b,
            self.m,
            self.grad_norm,
            opt(self.probe_accuracy),
            self.event.as_deref().unwrap_or("")
        )
    }
}

pub fn write_log_csv(path: &Path, logs: &[StepLog]) -> Result<(), Error> {
    let io = |source| Error::Io {
        context: format!("writing {}", path.display()),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "{LOG_HEADER}").map_err(io)?;
    for l in logs {
        writeln!(out, "{}", l.csv_row()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Initial parameters for a run. Sentinel embedding rows start at zero.
pub fn init_params(model: &ModelConfig, vocab: &Vocab, init: &InitConfig, seed: u64) -> Result<Params32, Error> {
    let zero_rows: Vec<usize> = vocab.sentinel_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Weights::init(model, init, &zero_rows, &mut rng)?)
}

/// Model state plus optimiser moments.
pub struct Trainer {
    pub params: Params32,
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    zero_rows: Vec<usize>,
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
    /// Updates applied to each tensor; drives its bias correction.
    updates: Vec<i32>,
    mask_frozen: bool,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Trainer {
    pub fn new(mut params: Params32, model: ModelConfig, cfg: TrainConfig, vocab: &Vocab) -> Result<Self, Error> {
        model.validate()?;
        cfg.validate()?;
        if let Margin::Fixed(m) = cfg.margin {
            params.log_margin = Tensor::scalar(m.ln() as f32);
        }
        let zeros: Vec<Tensor<f32>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let updates = vec![0; zeros.len()];
        Ok(Self {
            params,
            model,
            cfg,
            zero_rows: vocab.sentinel_ids().collect(),
            first: zeros.clone(),
            second: zeros,
            updates,
            mask_frozen: false,
        })
    }

    /// Mean loss and gradient over `batch`, reduced in batch order.
    pub fn batch_gradients(
        &self,
        batch: &[&PreparedInput],
    ) -> Result<(Vec<Option<Tensor<f32>>>, LossBreakdown), Error> {
        let per_sample: Vec<Result<(Vec<Option<Tensor<f32>>>, LossBreakdown), Error>> = batch
            .par_iter()
            .map(|input| {
                let mut g = Graph::new();
                let w = self.params.to_graph(&mut g, |n| self.cfg.is_trainable(n, &self.model));
                let (loss, parts) = sample_loss(&mut g, &w, &self.model, &self.cfg, input)?;
                let mut grads = g.backward(loss)?;
                let handles: Vec<Var> = w.named().into_iter().map(|(_, v)| *v).collect();
                Ok((handles.into_iter().map(|v| grads.take(v)).collect(), parts))
            })
            .collect();
        let n = batch.len() as f64;
        let mut acc: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut mean = LossBreakdown::default();
        for (i, r) in per_sample.into_iter().enumerate() {
            let (grads, parts) = r?;
            mean.total += parts.total / n;
            mean.lm = parts.lm.map(|v| mean.lm.unwrap_or(0.0) + v / n);
            mean.flt = parts.flt.map(|v| mean.flt.unwrap_or(0.0) + v / n);
            if i == 0 {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
        }
        let inv = 1.0 / n as f32;
        for t in acc.iter_mut().flatten() {
            t.scale(inv);
        }
        if let Some(Some(embed)) = acc.first_mut() {
            for &r in &self.zero_rows {
                embed.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok((acc, mean))
    }

    /// One optimisation step. A non-finite loss or gradient leaves the
    /// parameters untouched and is reported in the log's event column.
    pub fn step(&mut self, batch: &[&PreparedInput], lr: LearningRates) -> Result<StepLog, Error> {
        let (mut grads, loss) = match self.batch_gradients(batch) {
            Ok(v) => v,
            Err(e) if e.is_non_finite() => {
                let nan = LossBreakdown {
                    total: f64::NAN,
                    ..LossBreakdown::default()
                };
                let mut log = self.log_row(lr, nan, f64::NAN);
                log.event = Some(format!("{e}; step skipped"));
                return Ok(log);
            }
            Err(e) => return Err(e),
        };
        if self.mask_frozen {
            for ((name, _), g) in self.params.named().iter().zip(grads.iter_mut()) {
                if matches!(role_of(name), ParamRole::MaskW | ParamRole::MaskB) {
                    *g = None;
                }
            }
        }
        let sq: f64 = grads
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        let mut log = self.log_row(lr, loss, norm);
        if !loss.total.is_finite() || !norm.is_finite() {
            log.event = Some("non-finite loss; step skipped".into());
            return Ok(log);
        }
        let clip = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let wd = self.cfg.weight_decay;
        for (i, ((name, p), g)) in self.params.named_mut().into_iter().zip(&grads).enumerate() {
            let Some(g) = g else { continue };
            let rate = match role_of(&name) {
                ParamRole::Embedding | ParamRole::Block(_) | ParamRole::Output => lr.backbone,
                _ => lr.head,
            };
            let decay = if p.rank() == 2 { wd } else { 0.0 };
            self.updates[i] += 1;
            let t = self.updates[i];
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] as f64 * clip;
                let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
                let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
                let xv = *x as f64;
                *x = (xv - rate * (upd + decay * xv)) as f32;
            }
        }
        Ok(log)
    }

    fn log_row(&self, lr: LearningRates, loss: LossBreakdown, grad_norm: f64) -> StepLog {
        StepLog {
            step: 0,
            epoch: 0,
            lr_backbone: lr.backbone,
            lr_head: lr.head,
            loss: loss.total,
            l_lm: loss.lm,
            l_flt: loss.flt,
            w: self.params.mask_w.item() as f64,
            b: self.params.mask_b.item() as f64,
            m: (self.params.log_margin.item() as f64).exp(),
            grad_norm,
            probe_accuracy: None,
            event: None,
        }
    }

    /// Fraction of probe documents whose `s_i > 0` decision matches the label.
    pub fn probe_accuracy(&self, probe: &[PreparedInput]) -> Result<f64, Error> {
        let results: Vec<Result<(usize, usize), Error>> = probe
            .par_iter()
            .map(|p| {
                let s = relevance_scores(&self.params, &self.model, p, self.cfg.strategy)?;
                let chosen = classify(&s);
                let hits = p
                    .seg
                    .relevance_labels
                    .iter()
                    .enumerate()
                    .filter(|(i, &l)| chosen.contains(i) == l)
                    .count();
                Ok((hits, s.len()))
            })
            .collect();
        let (mut hits, mut total) = (0, 0);
        for r in results {
            let (h, t) = r?;
            hits += h;
            total += t;
        }
        Ok(hits as f64 / total.max(1) as f64)
    }

    /// Runs every epoch over `data`. `on_epoch` is called after each epoch
    /// (checkpointing).
    pub fn train(
        &mut self,
        data: &[PreparedInput],
        probe: &[PreparedInput],
        mut on_epoch: impl FnMut(usize, &Trainer) -> Result<(), Error>,
    ) -> Result<Vec<StepLog>, Error> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let per_epoch = data.len().div_ceil(self.cfg.batch_size);
        let total = per_epoch * self.cfg.epochs;
        let mask_steps = (self.cfg.mask_warmup * total as f64).round() as usize;
        let mut logs = Vec::with_capacity(total);
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, Split::Train, epoch));
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&PreparedInput> = chunk.iter().map(|&i| &data[i]).collect();
                let lr = self.cfg.lr_at(step, total);
                self.mask_frozen = step < mask_steps;
                let mut log = self.step(&batch, lr)?;
                log.step = step;
                log.epoch = epoch;
                step += 1;
                let probe_due = self.cfg.probe_every > 0 && (step % self.cfg.probe_every == 0 || step == total);
                if probe_due && self.cfg.regime.uses_filter() && !probe.is_empty() {
                    log.probe_accuracy = Some(self.probe_accuracy(probe)?);
                }
                logs.push(log);
            }
            on_epoch(epoch, self)?;
        }
        Ok(logs)
    }
}

/// Everything a checkpoint records besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: VocabConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub epoch: Option<usize>,
    /// Resolved run configuration recorded by the caller.
    #[serde(default)]
    pub run: Option<serde_json::Value>,
}

pub fn save_checkpoint(path: &Path, params: &Params32, meta: &CheckpointMeta) -> Result<(), Error> {
    let io = |source| Error::Io {
        context: format!("writing checkpoint {}", path.display()),
        source,
    };
    let json = serde_json::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    let named: Vec<(String, &Tensor<f32>)> = params.named();
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    write_checkpoint(&mut out, &json, &named)?;
    out.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(Params32, CheckpointMeta), Error> {
    let file = File::open(path).map_err(|source| Error::Io {
        context: format!("opening checkpoint {}", path.display()),
        source,
    })?;
    let ck = read_checkpoint(BufReader::new(file))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&ck.meta).map_err(|e| Error::Config(format!("checkpoint meta: {e}")))?;
    let vocab = Vocab::new(&meta.vocab)?;
    let mut params = init_params(&meta.model, &vocab, &InitConfig::default(), 0)?;
    params.load_named(&ck.tensors)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0, 1000, 0.01), 0.0);
        assert_eq!(lr_at(10, 1000, 0.01), 1.0);
        assert_eq!(lr_at(1000, 1000, 0.01), 0.0);
        assert!((lr_at(505, 1000, 0.01) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn regime_names() {
        assert_eq!("fltlm-no-softmask".parse::<Regime>().unwrap(), Regime::FltlmNoSoftmask);
        assert_eq!("filter_plus_lm".parse::<Regime>().unwrap(), Regime::FilterPlusLm);
        assert!("lora".parse::<Regime>().is_err());
    }

    #[test]
    fn margin_parsing() {
        assert_eq!("learnable".parse::<Margin>().unwrap(), Margin::Learnable);
        assert_eq!("fixed:0.5".parse::<Margin>().unwrap(), Margin::Fixed(0.5));
        assert!("fixed:0".parse::<Margin>().is_err());
        assert!("fixed".parse::<Margin>().is_err());
    }
}
