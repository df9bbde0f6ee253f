//! Desk-scale run configuration and the train step shared by the command
//! line and the acceptance suite.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DistractorStyle, GenConfig};
use crate::forward::PreparedInput;
use crate::input::{BuildMode, QaSample};
use crate::model::{InitConfig, ModelConfig};
use crate::trainer::{init_params, StepLog, TrainConfig, Trainer};
use crate::vocab::{Vocab, VocabConfig};
use crate::{Error, Params32};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub vocab: VocabConfig,
    /// `vocab_size` is taken from the vocabulary.
    pub model: ModelConfig,
    /// Share of blocks feeding the filter; replaces `model.filter_layers`
    /// when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter_proportion: Option<f64>,
    pub init: InitConfig,
    pub data: GenConfig,
    pub train: TrainConfig,
}

/// The configuration every reported number was produced with: a four-block
/// model of about 60k parameters on six-document near-miss samples.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            vocab: VocabConfig {
                size: 100,
                relations: 16,
            },
            model: ModelConfig {
                d_model: 32,
                n_heads: 4,
                n_layers: 4,
                filter_layers: 2,
                d_ff: 64,
                ..ModelConfig::default()
            },
            filter_proportion: None,
            init: InitConfig {
                std: 0.2,
                ..InitConfig::default()
            },
            data: GenConfig {
                n_docs: 6,
                facts_per_doc: 1,
                distractors: DistractorStyle::NearMiss,
                ..GenConfig::default()
            },
            train: TrainConfig {
                lr_head: 1e-3,
                mask_warmup: 0.5,
                epochs: 4,
                probe_every: 500,
                ..TrainConfig::default()
            },
        }
    }
}

/// `N` for a filter proportion of an `n_layers` model.
pub fn filter_layers_for(proportion: f64, n_layers: usize) -> Result<usize, Error> {
    let n = (proportion * n_layers as f64).round();
    if !(n >= 1.0 && n < n_layers as f64) {
        return Err(Error::Config(format!(
            "filter proportion {proportion} leaves no blocks on one side of a {n_layers}-block model"
        )));
    }
    Ok(n as usize)
}

impl ExperimentConfig {
    /// Builds the vocabulary and the final model shape, validating every
    /// section.
    pub fn resolve(&self) -> Result<(Vocab, ModelConfig), Error> {
        let vocab = Vocab::new(&self.vocab)?;
        let mut model = self.model.clone();
        model.vocab_size = vocab.len();
        if let Some(p) = self.filter_proportion {
            model.filter_layers = filter_layers_for(p, model.n_layers)?;
        }
        self.data.validate(&vocab)?;
        self.train.validate()?;
        Ok((vocab, model))
    }
}

pub fn prepare_all(vocab: &Vocab, samples: &[QaSample], cfg: &TrainConfig, max_len: usize) -> Result<Vec<PreparedInput>, Error> {
    samples
        .par_iter()
        .map(|s| PreparedInput::new(vocab, s, BuildMode::Train, cfg.strategy, max_len))
        .collect()
}

/// Trains a fresh model seeded with `train.seed`. `probe` samples feed the
/// periodic filter probe.
pub fn train_model(
    exp: &ExperimentConfig,
    train: &TrainConfig,
    samples: &[QaSample],
    probe: &[QaSample],
) -> Result<(Params32, Vec<StepLog>), Error> {
    let (vocab, model) = ExperimentConfig {
        train: train.clone(),
        ..exp.clone()
    }
    .resolve()?;
    let data = prepare_all(&vocab, samples, train, model.max_context)?;
    let probe = prepare_all(&vocab, probe, train, model.max_context)?;
    let params = init_params(&model, &vocab, &exp.init, train.seed)?;
    let mut trainer = Trainer::new(params, model, train.clone(), &vocab)?;
    let logs = trainer.train(&data, &probe, |_, _| Ok(()))?;
    Ok((trainer.params, logs))
}
