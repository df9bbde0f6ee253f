//! Self-checks runnable outside the test harness: loss identities and
//! central-difference gradient checks on a micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{generate_split, GenConfig, Split};
use crate::filter::{filter_loss, loss_flt, loss_infonce, loss_infonce_star, FilterLoss, Strategy};
use crate::forward::PreparedInput;
use crate::input::BuildMode;
use crate::model::{InitConfig, ModelConfig, ModelParams};
use crate::numerics::{finite_diff_check_many, GradCheckOptions};
use crate::trainer::{init_params, sample_loss, Regime, TrainConfig};
use crate::vocab::{Vocab, VocabConfig};
use crate::{Error, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `value < threshold` when true, `value > threshold` otherwise.
    pub below: bool,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, below: true }
    }

    fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, below: false }
    }

    pub fn passed(&self) -> bool {
        if self.below {
            self.value < self.threshold
        } else {
            self.value > self.threshold
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = if self.below { "<" } else { ">" };
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{:<40} {:>12.3e} {op} {:.0e}  {verdict}", self.name, self.value, self.threshold)
    }
}

/// InfoNCE* written out term by term, without factoring.
fn star_expanded(s: &[f64], p: usize, tau: f64) -> f64 {
    let mut total = 1.0 + (-s[p] / tau).exp();
    for (i, &v) in s.iter().enumerate() {
        if i != p {
            total += (v / tau).exp() + ((v - s[p]) / tau).exp();
        }
    }
    total.ln()
}

/// Factored vs expanded InfoNCE*, shift invariance of InfoNCE, and shift
/// variance of InfoNCE* and the filter loss, on 1000 random score vectors.
pub fn loss_identities(seed: u64) -> Result<Vec<Check>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut factor_err, mut invariance_err) = (0.0f64, 0.0f64);
    let (mut star_delta, mut flt_delta) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let n = rng.gen_range(2..12);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let p = rng.gen_range(0..n);
        let tau = rng.gen_range(0.5..2.0);
        factor_err = factor_err.max((loss_infonce_star(&s, p, tau)? - star_expanded(&s, p, tau)).abs());

        let c = rng.gen_range(1.0..3.0) * if rng.gen() { 1.0 } else { -1.0 };
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let labels: Vec<bool> = (0..n).map(|i| i == p).collect();
        invariance_err = invariance_err.max((loss_infonce(&s, p, tau)? - loss_infonce(&shifted, p, tau)?).abs());
        star_delta.push((loss_infonce_star(&s, p, tau)? - loss_infonce_star(&shifted, p, tau)?).abs());
        flt_delta.push((loss_flt(&s, &labels, tau, 0.5)? - loss_flt(&shifted, &labels, tau, 0.5)?).abs());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    Ok(vec![
        Check::below("infonce* factored vs expanded", factor_err, 1e-7),
        Check::below("infonce shift invariance", invariance_err, 1e-7),
        Check::above("infonce* shift variance (median |d|)", median(&mut star_delta), 1e-3),
        Check::above("flt shift variance (median |d|)", median(&mut flt_delta), 1e-3),
    ])
}

/// Worst relative error of the graph filter losses against central
/// differences, over scores, log-temperature and log-margin.
pub fn filter_loss_gradients(seed: u64) -> Result<Vec<Check>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { eps: 1e-5, ..GradCheckOptions::default() };
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let n = rng.gen_range(2..8);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let s = Tensor::<f64>::from_f64(&[n], &s)?;
        let theta = Tensor::scalar(rng.gen_range(-0.5..0.5));
        let gamma = Tensor::scalar(rng.gen_range(-1.0..0.5));
        let labels: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.3)).collect();
        let p = rng.gen_range(0..n);
        let kinds = [
            FilterLoss::Flt { labels: &labels },
            FilterLoss::InfoNce { positive: p },
            FilterLoss::InfoNceStar { positive: p },
        ];
        for (k, kind) in kinds.into_iter().enumerate() {
            let err = finite_diff_check_many(
                |g: &mut Graph<f64>, v| filter_loss(g, v[0], kind, v[1], v[2]).map_err(Error::from),
                &[s.clone(), theta.clone(), gamma.clone()],
                &opts,
            )?;
            worst[k] = worst[k].max(err);
        }
    }
    Ok(vec![
        Check::below("grad L_flt", worst[0], 1e-3),
        Check::below("grad infonce", worst[1], 1e-3),
        Check::below("grad infonce*", worst[2], 1e-3),
    ])
}

/// Gradient checks of the regime losses through a two-block f64 model,
/// every parameter tensor sampled at a few coordinates.
pub fn model_gradients(seed: u64) -> Result<Vec<Check>, Error> {
    let vocab = Vocab::new(&VocabConfig { size: 64, relations: 4 })?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        filter_layers: 1,
        d_ff: 16,
        ..ModelConfig::default()
    };
    let gen = GenConfig { n_docs: 2, hops: 1, facts_per_doc: 2, seed, ..GenConfig::default() };
    let sample = &generate_split(&gen, &vocab, Split::Train, 1)?[0];
    let input = PreparedInput::new(&vocab, sample, BuildMode::Train, Strategy::Naive, model.max_context)?;
    let init = InitConfig { std: 0.3, head_std: 0.3, mask_w: 0.5, mask_b: -0.1, ..InitConfig::default() };
    let params: ModelParams<f64> = init_params(&model, &vocab, &init, seed)?.cast();
    let named = params.named();
    let opts = GradCheckOptions { eps: 1e-5, max_coords: Some(6), seed, ..GradCheckOptions::default() };

    let worst = |cfg: &TrainConfig, only: &dyn Fn(&str) -> bool| -> Result<f64, Error> {
        let mut worst = 0.0f64;
        for (i, (name, t)) in named.iter().enumerate().filter(|(_, (n, _))| only(n)) {
            let err = finite_diff_check_many(
                |g: &mut Graph<f64>, vars| {
                    let mut w = params.to_graph(g, |_| false);
                    *w.named_mut()[i].1 = vars[0];
                    sample_loss(g, &w, &model, cfg, &input).map(|(l, _)| l)
                },
                &[(*t).clone()],
                &opts,
            )
            .map_err(|e: Error| Error::Config(format!("{name}: {e}")))?;
            worst = worst.max(err);
        }
        Ok(worst)
    };
    let cfg = |regime| TrainConfig { regime, ..TrainConfig::default() };
    let all = |_: &str| true;
    let mask = |n: &str| n == "mask.w" || n == "mask.b";
    Ok(vec![
        Check::below("grad L_lm (full model)", worst(&cfg(Regime::Sft), &all)?, 1e-2),
        Check::below("grad L_lm + l*L_flt (full model)", worst(&cfg(Regime::Fltlm), &all)?, 1e-2),
        Check::below("grad L_flt + m*L_lm (full model)", worst(&cfg(Regime::FilterPlusLm), &all)?, 1e-2),
        Check::below("grad (w, b)", worst(&cfg(Regime::Fltlm), &mask)?, 1e-3),
    ])
}
