//! QA and filter metrics, and the experiment drivers behind the report
//! tables.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::make_ablation_inputs;
use crate::filter::classify;
use crate::forward::{attention_share, generate, relevance_scores, PassSpec, PreparedInput};
use crate::input::{reorder_sample, BuildMode, QaSample};
use crate::model::ModelConfig;
use crate::vocab::Vocab;
use crate::{Error, Params32};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercased words with punctuation and articles removed.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .map(str::to_string)
        .collect()
}

/// Token-level F1 with multiset overlap.
pub fn qa_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize)]
pub struct SetScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision/recall/F1 of one sample. An empty prediction has
/// precision 0 unless the gold set is empty too; an empty gold set has
/// recall 1.
pub fn set_scores(predicted: &[usize], gold: &[usize]) -> SetScores {
    if predicted.is_empty() && gold.is_empty() {
        return SetScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hits = predicted.iter().filter(|p| gold.contains(p)).count() as f64;
    let precision = if predicted.is_empty() {
        0.0
    } else {
        hits / predicted.len() as f64
    };
    let recall = if gold.is_empty() {
        1.0
    } else {
        hits / gold.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SetScores {
        precision,
        recall,
        f1,
    }
}

/// Per-sample set metrics, macro-averaged.
pub fn filter_metrics(predicted: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<SetScores, Error> {
    if predicted.len() != gold.len() {
        return Err(Error::Config(format!(
            "{} predicted sets for {} gold sets",
            predicted.len(),
            gold.len()
        )));
    }
    let n = predicted.len().max(1) as f64;
    let mut acc = SetScores::default();
    for (p, g) in predicted.iter().zip(gold) {
        let s = set_scores(p, g);
        acc.precision += s.precision / n;
        acc.recall += s.recall / n;
        acc.f1 += s.f1 / n;
    }
    Ok(acc)
}

/// Indices ordered by descending score; ties keep index order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mean fraction of gold documents within the top `k` by score, for
/// `k = 1..=max_k`. Samples with an empty gold set are skipped.
pub fn recall_curve(scores: &[Vec<f64>], gold: &[Vec<usize>], max_k: usize) -> Result<Vec<f64>, Error> {
    if scores.len() != gold.len() {
        return Err(Error::Config("score and gold counts differ".into()));
    }
    let mut curve = vec![0.0; max_k];
    let mut used = 0usize;
    for (s, g) in scores.iter().zip(gold) {
        if g.is_empty() {
            continue;
        }
        if max_k > s.len() {
            return Err(Error::Config(format!("k = {max_k} exceeds {} documents", s.len())));
        }
        used += 1;
        let ranked = rank_by_score(s);
        let mut found = 0usize;
        for (k, &d) in ranked.iter().take(max_k).enumerate() {
            if g.contains(&d) {
                found += 1;
            }
            curve[k] += found as f64 / g.len() as f64;
        }
    }
    curve.iter_mut().for_each(|c| *c /= used.max(1) as f64);
    Ok(curve)
}

/// Scores ranking exactly the gold documents first.
pub fn oracle_scores(n_docs: usize, gold: &[usize]) -> Vec<f64> {
    (0..n_docs).map(|i| if gold.contains(&i) { 1.0 } else { 0.0 }).collect()
}

/// A uniformly random ranking.
pub fn random_scores<R: Rng>(n_docs: usize, rng: &mut R) -> Vec<f64> {
    let mut ranks: Vec<f64> = (0..n_docs).map(|i| i as f64).collect();
    ranks.shuffle(rng);
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    Original,
    Reordered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    PosNeg,
    Pos,
    Neg,
}

/// One evaluation input condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub order: Order,
    pub subset: Subset,
}

impl Condition {
    pub const ORIGINAL: Condition = Condition {
        order: Order::Original,
        subset: Subset::PosNeg,
    };
    pub const REORDERED: Condition = Condition {
        order: Order::Reordered,
        subset: Subset::PosNeg,
    };

    pub fn all() -> Vec<Condition> {
        let mut out = Vec::new();
        for order in [Order::Original, Order::Reordered] {
            for subset in [Subset::PosNeg, Subset::Pos, Subset::Neg] {
                out.push(Condition { order, subset });
            }
        }
        out
    }

    /// The sample as seen under this condition.
    pub fn apply(&self, sample: &QaSample) -> QaSample {
        let ordered = match self.order {
            Order::Original => sample.clone(),
            Order::Reordered => reorder_sample(sample),
        };
        let variants = make_ablation_inputs(&ordered);
        match self.subset {
            Subset::PosNeg => variants.pos_and_neg,
            Subset::Pos => variants.pos_only,
            Subset::Neg => variants.neg_only,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let order = match self.order {
            Order::Original => "original",
            Order::Reordered => "reordered",
        };
        let subset = match self.subset {
            Subset::PosNeg => "pos+neg",
            Subset::Pos => "pos",
            Subset::Neg => "neg",
        };
        write!(f, "{order}/{subset}")
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::all()
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| format!("unknown condition {s:?} (e.g. original/pos+neg, reordered/neg)"))
    }
}

/// A trained model and the pass it runs at inference.
#[derive(Clone, Copy)]
pub struct Reader<'a> {
    pub params: &'a Params32,
    pub model: &'a ModelConfig,
    pub spec: &'a PassSpec,
}

/// Decoding settings shared by every evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { max_new_tokens: 4 }
    }
}

/// Outcome of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub prediction: String,
    pub f1: f64,
    pub scores: Option<Vec<f64>>,
    pub gold: Vec<usize>,
}

fn answer_text(vocab: &Vocab, tokens: &[usize]) -> Result<String, Error> {
    let end = tokens.iter().position(|&t| t == vocab.eos_id()).unwrap_or(tokens.len());
    Ok(vocab.detokenize(&tokens[..end])?)
}

/// Greedy answers of `reader` on `samples`.
pub fn answer_samples(
    reader: Reader<'_>,
    vocab: &Vocab,
    samples: &[QaSample],
    decode: DecodeOptions,
) -> Result<Vec<SampleResult>, Error> {
    samples
        .par_iter()
        .map(|s| {
            let input = PreparedInput::new(vocab, s, BuildMode::Infer, reader.spec.strategy, reader.model.max_context)?;
            let out = generate(
                reader.params,
                reader.model,
                &input,
                reader.spec,
                decode.max_new_tokens,
                vocab.eos_id(),
            )?;
            let prediction = answer_text(vocab, &out.tokens)?;
            Ok(SampleResult {
                f1: qa_f1(&prediction, &s.answer),
                prediction,
                scores: out.scores,
                gold: s.relevant_indices(),
            })
        })
        .collect()
}

/// Filter scores of `reader` on `samples`.
pub fn score_samples(reader: Reader<'_>, vocab: &Vocab, samples: &[QaSample]) -> Result<Vec<Vec<f64>>, Error> {
    samples
        .par_iter()
        .map(|s| {
            let input = PreparedInput::new(vocab, s, BuildMode::Infer, reader.spec.strategy, reader.model.max_context)?;
            relevance_scores(reader.params, reader.model, &input, reader.spec.strategy)
        })
        .collect()
}

/// Mean attention share per positive and per negative document.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize)]
pub struct AttentionShares {
    pub positive: f64,
    pub negative: f64,
}

impl AttentionShares {
    pub fn ratio(&self) -> f64 {
        self.positive / self.negative
    }
}

pub fn attention_analysis(reader: Reader<'_>, vocab: &Vocab, samples: &[QaSample]) -> Result<AttentionShares, Error> {
    let per: Vec<Result<(f64, usize, f64, usize), Error>> = samples
        .par_iter()
        .map(|s| {
            let input = PreparedInput::new(vocab, s, BuildMode::Infer, reader.spec.strategy, reader.model.max_context)?;
            let share = attention_share(reader.params, reader.model, &input, reader.spec)?;
            let (mut p, mut np, mut n, mut nn) = (0.0, 0, 0.0, 0);
            for (v, d) in share.iter().zip(&s.documents) {
                if d.relevant {
                    p += v;
                    np += 1;
                } else {
                    n += v;
                    nn += 1;
                }
            }
            Ok((p, np, n, nn))
        })
        .collect();
    let (mut p, mut np, mut n, mut nn) = (0.0, 0, 0.0, 0);
    for r in per {
        let (a, b, c, d) = r?;
        p += a;
        np += b;
        n += c;
        nn += d;
    }
    Ok(AttentionShares {
        positive: p / np.max(1) as f64,
        negative: n / nn.max(1) as f64,
    })
}

/// Selects documents with `s_i > 0` (falling back to the single best
/// document when none qualifies) and keeps them in their original order.
pub fn select_documents(sample: &QaSample, scores: &[f64]) -> QaSample {
    let mut keep = classify(scores);
    if keep.is_empty() {
        keep = rank_by_score(scores).into_iter().take(1).collect();
    }
    QaSample {
        documents: keep.iter().map(|&i| sample.documents[i].clone()).collect(),
        ..sample.clone()
    }
}

/// Two-stage pipeline: `filter` selects documents, `reader` answers from
/// the rebuilt input.
pub fn filter_then_read(
    filter: Reader<'_>,
    reader: Reader<'_>,
    vocab: &Vocab,
    samples: &[QaSample],
    decode: DecodeOptions,
) -> Result<Vec<SampleResult>, Error> {
    let scores = score_samples(filter, vocab, samples)?;
    let reduced: Vec<QaSample> = samples
        .iter()
        .zip(&scores)
        .map(|(s, sc)| select_documents(s, sc))
        .collect();
    let mut results = answer_samples(reader, vocab, &reduced, decode)?;
    for ((r, s), sc) in results.iter_mut().zip(samples).zip(scores) {
        r.gold = s.relevant_indices();
        r.scores = Some(sc);
    }
    Ok(results)
}

/// One row of the evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub system: String,
    pub condition: String,
    pub samples: usize,
    pub qa_f1: Option<f64>,
    pub filter: Option<SetScores>,
    pub status: String,
}

impl ReportRow {
    pub fn from_results(system: &str, condition: &str, results: &[SampleResult]) -> Self {
        let n = results.len().max(1) as f64;
        let qa = results.iter().map(|r| r.f1).sum::<f64>() / n;
        let filter = if results.iter().all(|r| r.scores.is_some()) && !results.is_empty() {
            let pred: Vec<Vec<usize>> = results
                .iter()
                .map(|r| classify(r.scores.as_deref().unwrap_or(&[])))
                .collect();
            let gold: Vec<Vec<usize>> = results.iter().map(|r| r.gold.clone()).collect();
            filter_metrics(&pred, &gold).ok()
        } else {
            None
        };
        Self {
            system: system.to_string(),
            condition: condition.to_string(),
            samples: results.len(),
            qa_f1: Some(qa),
            filter,
            status: "ok".into(),
        }
    }

    pub fn missing(system: &str, condition: &str, why: &str) -> Self {
        Self {
            system: system.to_string(),
            condition: condition.to_string(),
            samples: 0,
            qa_f1: None,
            filter: None,
            status: format!("skipped: {why}"),
        }
    }
}

/// A system evaluated by [`run_matrix`].
pub enum System<'a> {
    OneStage { name: String, reader: Reader<'a> },
    TwoStage { name: String, filter: Reader<'a>, reader: Reader<'a> },
    Missing { name: String, reason: String },
}

impl System<'_> {
    pub fn name(&self) -> &str {
        match self {
            System::OneStage { name, .. } | System::TwoStage { name, .. } | System::Missing { name, .. } => name,
        }
    }
}

/// Every system under every condition.
pub fn run_matrix(
    systems: &[System<'_>],
    vocab: &Vocab,
    samples: &[QaSample],
    conditions: &[Condition],
    decode: DecodeOptions,
) -> Result<Vec<ReportRow>, Error> {
    let mut rows = Vec::new();
    for sys in systems {
        for cond in conditions {
            let inputs: Vec<QaSample> = samples.iter().map(|s| cond.apply(s)).collect();
            let row = match sys {
                System::Missing { name, reason } => ReportRow::missing(name, &cond.to_string(), reason),
                System::OneStage { name, reader } => {
                    let r = answer_samples(*reader, vocab, &inputs, decode)?;
                    ReportRow::from_results(name, &cond.to_string(), &r)
                }
                System::TwoStage { name, filter, reader } => {
                    let r = filter_then_read(*filter, *reader, vocab, &inputs, decode)?;
                    ReportRow::from_results(name, &cond.to_string(), &r)
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const REPORT_HEADER: &str = "system,condition,samples,qa_f1,filter_precision,filter_recall,filter_f1,status";

pub fn write_report_csv<W: Write>(mut out: W, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.system,
            r.condition,
            r.samples,
            opt(r.qa_f1),
            opt(r.filter.map(|f| f.precision)),
            opt(r.filter.map(|f| f.recall)),
            opt(r.filter.map(|f| f.f1)),
            r.status
        )?;
    }
    Ok(())
}

/// Fixed-width summary table.
pub fn summary_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<28} {:<20} {:>7} {:>8} {:>8}\n",
        "system", "condition", "n", "qa_f1", "filt_f1"
    );
    for r in rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        s.push_str(&format!(
            "{:<28} {:<20} {:>7} {:>8} {:>8}\n",
            r.system,
            r.condition,
            r.samples,
            f(r.qa_f1),
            f(r.filter.map(|x| x.f1))
        ));
    }
    s
}
