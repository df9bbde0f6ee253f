#![allow(dead_code)]

use fltlm::datagen::{generate_split, GenConfig, Split};
use fltlm::filter::Strategy;
use fltlm::forward::PreparedInput;
use fltlm::input::{BuildMode, QaSample};
use fltlm::model::{InitConfig, ModelConfig, ModelParams};
use fltlm::trainer::init_params;
use fltlm::vocab::{Vocab, VocabConfig};
use fltlm::Params32;

pub fn vocab() -> Vocab {
    Vocab::new(&VocabConfig { size: 96, relations: 6 }).unwrap()
}

pub fn model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 4,
        filter_layers: 2,
        d_ff: 32,
        ..ModelConfig::default()
    }
}

pub fn samples(vocab: &Vocab, n_docs: usize, hops: usize, count: usize) -> Vec<QaSample> {
    let cfg = GenConfig {
        n_docs,
        hops,
        facts_per_doc: 2,
        ..GenConfig::default()
    };
    generate_split(&cfg, vocab, Split::Train, count).unwrap()
}

/// Weights large enough that attention is far from uniform.
pub fn params(model: &ModelConfig, vocab: &Vocab, seed: u64) -> Params32 {
    let init = InitConfig {
        std: 0.3,
        head_std: 0.3,
        ..InitConfig::default()
    };
    init_params(model, vocab, &init, seed).unwrap()
}

pub fn params64(model: &ModelConfig, vocab: &Vocab, seed: u64) -> ModelParams<f64> {
    params(model, vocab, seed).cast()
}

pub fn prepare(vocab: &Vocab, sample: &QaSample, mode: BuildMode, strategy: Strategy) -> PreparedInput {
    PreparedInput::new(vocab, sample, mode, strategy, 512).unwrap()
}
