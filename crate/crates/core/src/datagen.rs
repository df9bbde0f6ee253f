//! Synthetic multi-hop, multi-document QA.
//!
//! A fact is three words `A r B` ("A's r is B"). A `k`-hop question
//! `X r_1 .. r_k` asks for the entity reached from `X` by following the
//! relations in order; each hop's fact lives in its own relevant document.
//! Every `(entity, relation)` key occurs at most once per sample, so the
//! chain is unambiguous.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::input::{Document, QaSample};
use crate::vocab::{Vocab, MAX_DOCS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorStyle {
    /// Distractors hold facts about unrelated entities.
    Random,
    /// Every distractor also states a fact about the question entity under a
    /// relation the question does not follow.
    #[default]
    NearMiss,
}

impl fmt::Display for DistractorStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistractorStyle::Random => "random",
            DistractorStyle::NearMiss => "near-miss",
        })
    }
}

impl FromStr for DistractorStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "near-miss" => Ok(Self::NearMiss),
            _ => Err(format!("unknown distractor style {s:?} (random|near-miss)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_docs: usize,
    /// Training samples draw their document count uniformly from
    /// `min_docs..=n_docs`; `0` (or `n_docs`) keeps it fixed. Eval samples
    /// always carry `n_docs`.
    pub min_docs: usize,
    pub hops: usize,
    pub facts_per_doc: usize,
    /// Entities drawn from the start of the vocabulary's entity block;
    /// `0` uses all of them.
    pub entities: usize,
    pub distractors: DistractorStyle,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    /// One question entity in this many is reserved for the eval split.
    pub eval_stride: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_docs: 10,
            min_docs: 0,
            hops: 1,
            facts_per_doc: 6,
            entities: 0,
            distractors: DistractorStyle::NearMiss,
            seed: 0,
            train_size: 20_000,
            eval_size: 1_000,
            eval_stride: 5,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("vocabulary exhausted: {0}")]
    Exhausted(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl GenConfig {
    pub fn validate(&self, vocab: &Vocab) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Config(m));
        if !(1..=3).contains(&self.hops) {
            return bad(format!("hops must be 1, 2 or 3 (got {})", self.hops));
        }
        if self.n_docs < self.hops || self.n_docs > MAX_DOCS {
            return bad(format!(
                "n_docs must lie in [hops, {MAX_DOCS}] (got {})",
                self.n_docs
            ));
        }
        if self.min_docs != 0 && (self.min_docs < self.hops || self.min_docs > self.n_docs) {
            return bad(format!(
                "min_docs must lie in [hops, n_docs] (got {})",
                self.min_docs
            ));
        }
        if self.facts_per_doc == 0 {
            return bad("facts_per_doc must be positive".into());
        }
        if self.eval_stride < 2 {
            return bad("eval_stride must be at least 2".into());
        }
        if self.entities > vocab.entity_count() {
            return bad(format!(
                "{} entities requested, vocabulary has {}",
                self.entities,
                vocab.entity_count()
            ));
        }
        let needed_relations = match self.distractors {
            DistractorStyle::NearMiss => self.n_docs - self.hops + 1,
            DistractorStyle::Random => 1,
        };
        if vocab.relation_count() < needed_relations {
            return Err(GenError::Exhausted(format!(
                "{needed_relations} relations needed for near-miss distractors, vocabulary has {}",
                vocab.relation_count()
            )));
        }
        Ok(())
    }

    fn entity_count(&self, vocab: &Vocab) -> usize {
        if self.entities == 0 {
            vocab.entity_count()
        } else {
            self.entities
        }
    }
}

/// Question entities of a split: entity `e` belongs to the eval split iff
/// `e % eval_stride == 0`.
pub fn split_of_entity(entity: usize, eval_stride: usize) -> Split {
    if entity % eval_stride == 0 {
        Split::Eval
    } else {
        Split::Train
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` of `split`, independent of generation order.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ (split.tag() << 56)) ^ index as u64)
}

struct Fact {
    head: usize,
    relation: usize,
    tail: usize,
}

struct Builder<'a> {
    vocab: &'a Vocab,
    n_entities: usize,
    keys: HashSet<(usize, usize)>,
    reserved: HashSet<usize>,
}

impl Builder<'_> {
    fn fresh_entity<R: Rng>(&self, rng: &mut R) -> Result<usize, GenError> {
        for _ in 0..10_000 {
            let e = rng.gen_range(0..self.n_entities);
            if !self.reserved.contains(&e) {
                return Ok(e);
            }
        }
        Err(GenError::Exhausted("no free entity left for filler facts".into()))
    }

    fn filler<R: Rng>(&mut self, rng: &mut R) -> Result<Fact, GenError> {
        let relations = self.vocab.relation_count();
        for _ in 0..10_000 {
            let head = self.fresh_entity(rng)?;
            let relation = rng.gen_range(0..relations);
            if self.keys.insert((head, relation)) {
                let tail = self.fresh_entity(rng)?;
                return Ok(Fact {
                    head,
                    relation,
                    tail,
                });
            }
        }
        Err(GenError::Exhausted("no unused (entity, relation) key".into()))
    }

    fn render(&self, facts: &[Fact]) -> String {
        facts
            .iter()
            .map(|f| {
                format!(
                    "{} {} {}",
                    self.vocab.entity_word(f.head),
                    self.vocab.relation_word(f.relation),
                    self.vocab.entity_word(f.tail)
                )
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One sample whose question entity comes from `split`.
pub fn generate_sample<R: Rng>(
    cfg: &GenConfig,
    vocab: &Vocab,
    split: Split,
    id: String,
    rng: &mut R,
) -> Result<QaSample, GenError> {
    cfg.validate(vocab)?;
    let n_entities = cfg.entity_count(vocab);
    let question_pool: Vec<usize> = (0..n_entities)
        .filter(|&e| split_of_entity(e, cfg.eval_stride) == split)
        .collect();
    if question_pool.is_empty() || n_entities < cfg.hops + 2 {
        return Err(GenError::Exhausted("too few entities".into()));
    }
    let relations = vocab.relation_count();
    let x = *question_pool.choose(rng).expect("non-empty pool");
    let mut chain = vec![x];
    while chain.len() < cfg.hops + 1 {
        let e = rng.gen_range(0..n_entities);
        if !chain.contains(&e) {
            chain.push(e);
        }
    }
    let chain_relations: Vec<usize> = (0..cfg.hops).map(|_| rng.gen_range(0..relations)).collect();
    let mut b = Builder {
        vocab,
        n_entities,
        keys: HashSet::new(),
        reserved: chain.iter().copied().collect(),
    };
    for (j, &r) in chain_relations.iter().enumerate() {
        b.keys.insert((chain[j], r));
    }

    let mut docs = Vec::with_capacity(cfg.n_docs);
    for j in 0..cfg.hops {
        let mut facts = Vec::with_capacity(cfg.facts_per_doc);
        for _ in 1..cfg.facts_per_doc {
            facts.push(b.filler(rng)?);
        }
        let at = rng.gen_range(0..=facts.len());
        facts.insert(
            at,
            Fact {
                head: chain[j],
                relation: chain_relations[j],
                tail: chain[j + 1],
            },
        );
        docs.push(Document {
            text: b.render(&facts),
            relevant: true,
        });
    }

    let n_docs = if split == Split::Train && cfg.min_docs != 0 {
        rng.gen_range(cfg.min_docs..=cfg.n_docs)
    } else {
        cfg.n_docs
    };
    let mut free_relations: Vec<usize> = (0..relations).filter(|&r| r != chain_relations[0]).collect();
    free_relations.shuffle(rng);
    for k in 0..n_docs - cfg.hops {
        let mut facts = Vec::with_capacity(cfg.facts_per_doc);
        let fillers = match cfg.distractors {
            DistractorStyle::Random => cfg.facts_per_doc,
            DistractorStyle::NearMiss => cfg.facts_per_doc - 1,
        };
        for _ in 0..fillers {
            facts.push(b.filler(rng)?);
        }
        if cfg.distractors == DistractorStyle::NearMiss {
            let relation = free_relations[k];
            b.keys.insert((x, relation));
            let tail = b.fresh_entity(rng)?;
            let at = rng.gen_range(0..=facts.len());
            facts.insert(
                at,
                Fact {
                    head: x,
                    relation,
                    tail,
                },
            );
        }
        docs.push(Document {
            text: b.render(&facts),
            relevant: false,
        });
    }
    docs.shuffle(rng);

    let mut question = vec![vocab.entity_word(x).to_string()];
    question.extend(chain_relations.iter().map(|&r| vocab.relation_word(r).to_string()));
    Ok(QaSample {
        id,
        question: question.join(" "),
        documents: docs,
        answer: vocab.entity_word(chain[cfg.hops]).to_string(),
    })
}

/// `count` samples of `split`, each from its own derived seed; the result
/// does not depend on the thread count.
pub fn generate_split(
    cfg: &GenConfig,
    vocab: &Vocab,
    split: Split,
    count: usize,
) -> Result<Vec<QaSample>, GenError> {
    cfg.validate(vocab)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, i));
            generate_sample(cfg, vocab, split, format!("{}-{i}", split.name()), &mut rng)
        })
        .collect()
}

/// Follows the question's relation chain through the facts of `sample`'s
/// relevant documents.
pub fn solve(sample: &QaSample) -> Option<String> {
    let mut table: HashMap<(&str, &str), &str> = HashMap::new();
    for doc in sample.documents.iter().filter(|d| d.relevant) {
        let words: Vec<&str> = doc.text.split(' ').collect();
        for f in words.chunks_exact(3) {
            table.insert((f[0], f[1]), f[2]);
        }
    }
    let mut q = sample.question.split(' ');
    let mut cur = q.next()?;
    for r in q {
        cur = table.get(&(cur, r))?;
    }
    Some(cur.to_string())
}

/// The three input combinations of the distractor study.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationInputs {
    pub pos_and_neg: QaSample,
    pub pos_only: QaSample,
    pub neg_only: QaSample,
}

pub fn make_ablation_inputs(sample: &QaSample) -> AblationInputs {
    let keep = |relevant: bool| QaSample {
        documents: sample
            .documents
            .iter()
            .filter(|d| d.relevant == relevant)
            .cloned()
            .collect(),
        ..sample.clone()
    };
    AblationInputs {
        pos_and_neg: sample.clone(),
        pos_only: keep(true),
        neg_only: keep(false),
    }
}

/// Summary figures printed by the data command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub mean_docs: f64,
    pub mean_relevant: f64,
    pub mean_words: f64,
    pub distinct_question_entities: usize,
}

pub fn corpus_stats(samples: &[QaSample]) -> CorpusStats {
    let n = samples.len().max(1) as f64;
    let docs: usize = samples.iter().map(|s| s.documents.len()).sum();
    let rel: usize = samples.iter().map(|s| s.relevant_indices().len()).sum();
    let words: usize = samples
        .iter()
        .flat_map(|s| s.documents.iter())
        .map(|d| d.text.split(' ').count())
        .sum();
    let entities: HashSet<&str> = samples
        .iter()
        .filter_map(|s| s.question.split(' ').next())
        .collect();
    CorpusStats {
        samples: samples.len(),
        mean_docs: docs as f64 / n,
        mean_relevant: rel as f64 / n,
        mean_words: words as f64 / n,
        distinct_question_entities: entities.len(),
    }
}
