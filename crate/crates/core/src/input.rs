//! Document-segmented prompts with every index the filter and the soft mask
//! need.
//!
//! Layout: `prompt question: q (document: d_i </doc_i>)* prompt question: q
//! answer: a <eos>`, with the answer region empty at inference.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::vocab::{Vocab, VocabError, ANSWER_MARK, DOCUMENT_MARK, MAX_DOCS, PROMPT, QUESTION_MARK};

/// Whether the masked column range of a document includes its sentinel.
pub const MASK_INCLUDES_SENTINEL: bool = true;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    #[serde(rename = "label", with = "label_int")]
    pub relevant: bool,
}

mod label_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub question: String,
    pub documents: Vec<Document>,
    pub answer: String,
}

impl QaSample {
    pub fn relevant_indices(&self) -> Vec<usize> {
        self.documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.relevant)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.documents.iter().map(|d| d.relevant).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuildMode {
    /// Answer tokens and the delimiter are appended.
    Train,
    /// Answer region left empty.
    Infer,
}

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("input of {len} tokens exceeds the context limit of {limit}")]
    TooLong { len: usize, limit: usize },
    #[error("sample has no documents")]
    NoDocuments,
    #[error("sample has {0} documents; at most {MAX_DOCS} are supported")]
    TooManyDocuments(usize),
    #[error("document {0} is empty")]
    EmptyDocument(usize),
    #[error("dataset line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedInput {
    pub tokens: Vec<usize>,
    /// Half-open content spans `[l_i, u_i)`; the sentinel sits at `u_i`.
    pub doc_spans: Vec<(usize, usize)>,
    pub sentinel_positions: Vec<usize>,
    pub relevance_labels: Vec<bool>,
    /// True exactly on answer tokens (not on the delimiter).
    pub answer_mask: Vec<bool>,
    /// Index of the first answer token (equals `tokens.len()` at inference).
    pub answer_start: usize,
    /// Position of the delimiter closing the answer in train mode.
    pub delimiter_position: Option<usize>,
}

impl SegmentedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        self.doc_spans.len()
    }

    /// Reference position used in place of a sentinel before document 1.
    pub fn pre_document_position(&self) -> usize {
        self.doc_spans.first().map_or(0, |&(l, _)| l - 1)
    }

    /// Columns hidden by document `i`'s soft mask.
    pub fn masked_columns(&self, i: usize) -> std::ops::Range<usize> {
        let (l, u) = self.doc_spans[i];
        if MASK_INCLUDES_SENTINEL {
            l..self.sentinel_positions[i] + 1
        } else {
            l..u
        }
    }

    /// First row that sees document `i` through its soft mask.
    pub fn mask_start_row(&self, i: usize) -> usize {
        self.doc_spans[i].1
    }

    /// Positions whose next-token prediction is supervised, with the targets:
    /// every answer token plus the closing delimiter.
    pub fn lm_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for t in 1..self.tokens.len() {
            if self.answer_mask[t] || self.delimiter_position == Some(t) {
                rows.push(t - 1);
                targets.push(self.tokens[t]);
            }
        }
        (rows, targets)
    }

    /// Which region each token belongs to.
    pub fn regions(&self) -> Vec<Region> {
        let mut out = vec![Region::Prompt; self.tokens.len()];
        for (i, &(l, u)) in self.doc_spans.iter().enumerate() {
            for r in &mut out[l..u] {
                *r = Region::Document(i);
            }
            out[self.sentinel_positions[i]] = Region::Sentinel(i);
        }
        for (t, r) in out.iter_mut().enumerate() {
            if self.answer_mask[t] || self.delimiter_position == Some(t) {
                *r = Region::Answer;
            }
        }
        out
    }

    /// Document group of every position, used for block isolation between
    /// documents. A group holds the document's marker, content and
    /// sentinel, so no position before the closing prompt sees two
    /// documents.
    pub fn document_groups(&self) -> Vec<Option<u32>> {
        let mut out = vec![None; self.tokens.len()];
        for (i, &(l, _)) in self.doc_spans.iter().enumerate() {
            for g in &mut out[l - 1..=self.sentinel_positions[i]] {
                *g = Some(i as u32);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Prompt,
    Document(usize),
    Sentinel(usize),
    Answer,
}

fn push_words(vocab: &Vocab, text: &str, out: &mut Vec<usize>) -> Result<(), InputError> {
    out.extend(vocab.tokenize(text)?);
    Ok(())
}

pub fn build_input(
    vocab: &Vocab,
    sample: &QaSample,
    mode: BuildMode,
    max_len: usize,
) -> Result<SegmentedInput, InputError> {
    let n = sample.documents.len();
    if n == 0 {
        return Err(InputError::NoDocuments);
    }
    if n > MAX_DOCS {
        return Err(InputError::TooManyDocuments(n));
    }
    let question = vocab.tokenize(&sample.question)?;
    let mut tokens = Vec::new();
    push_words(vocab, PROMPT, &mut tokens)?;
    tokens.push(vocab.id(QUESTION_MARK)?);
    tokens.extend_from_slice(&question);

    let mut doc_spans = Vec::with_capacity(n);
    let mut sentinel_positions = Vec::with_capacity(n);
    for (i, doc) in sample.documents.iter().enumerate() {
        tokens.push(vocab.id(DOCUMENT_MARK)?);
        let body = vocab.tokenize(&doc.text)?;
        if body.is_empty() {
            return Err(InputError::EmptyDocument(i));
        }
        let l = tokens.len();
        tokens.extend(body);
        let u = tokens.len();
        tokens.push(vocab.sentinel_id(i + 1));
        doc_spans.push((l, u));
        sentinel_positions.push(u);
    }

    push_words(vocab, PROMPT, &mut tokens)?;
    tokens.push(vocab.id(QUESTION_MARK)?);
    tokens.extend_from_slice(&question);
    tokens.push(vocab.id(ANSWER_MARK)?);
    let answer_start = tokens.len();
    let mut delimiter_position = None;
    if mode == BuildMode::Train {
        push_words(vocab, &sample.answer, &mut tokens)?;
        delimiter_position = Some(tokens.len());
        tokens.push(vocab.eos_id());
    }
    if tokens.len() > max_len {
        return Err(InputError::TooLong {
            len: tokens.len(),
            limit: max_len,
        });
    }
    let mut answer_mask = vec![false; tokens.len()];
    if let Some(d) = delimiter_position {
        for m in &mut answer_mask[answer_start..d] {
            *m = true;
        }
    }
    Ok(SegmentedInput {
        tokens,
        doc_spans,
        sentinel_positions,
        relevance_labels: sample.labels(),
        answer_mask,
        answer_start,
        delimiter_position,
    })
}

/// Moves the first ⌈k/2⌉ relevant documents to the front and the remaining
/// relevant ones to the end; distractors keep their relative order.
pub fn reorder_sample(sample: &QaSample) -> QaSample {
    let relevant = sample.relevant_indices();
    let front = relevant.len().div_ceil(2);
    let mut docs = Vec::with_capacity(sample.documents.len());
    docs.extend(relevant[..front].iter().map(|&i| sample.documents[i].clone()));
    docs.extend(sample.documents.iter().filter(|d| !d.relevant).cloned());
    docs.extend(relevant[front..].iter().map(|&i| sample.documents[i].clone()));
    QaSample {
        documents: docs,
        ..sample.clone()
    }
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<QaSample>, InputError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample =
            serde_json::from_str(&line).map_err(|source| InputError::Parse { line: i + 1, source })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut out: W, samples: &[QaSample]) -> Result<(), InputError> {
    for s in samples {
        let line = serde_json::to_string(s).map_err(|source| InputError::Parse { line: 0, source })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::VocabConfig;

    fn vocab() -> Vocab {
        Vocab::new(&VocabConfig::default()).unwrap()
    }

    fn sample(pattern: &[bool]) -> QaSample {
        QaSample {
            id: "s".into(),
            question: "r1 e5".into(),
            documents: pattern
                .iter()
                .enumerate()
                .map(|(i, &rel)| Document {
                    text: format!("e{} r2 e{}", 10 + i, 40 + i),
                    relevant: rel,
                })
                .collect(),
            answer: "e7".into(),
        }
    }

    #[test]
    fn single_document_layout() {
        let v = vocab();
        let s = sample(&[true]);
        let seg = build_input(&v, &s, BuildMode::Train, 512).unwrap();
        assert_eq!(seg.doc_spans.len(), 1);
        let (_, u) = seg.doc_spans[0];
        assert_eq!(seg.sentinel_positions, vec![u]);
        assert_eq!(seg.tokens[u], v.sentinel_id(1));
        assert_eq!(seg.answer_mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(seg.tokens[seg.answer_start], v.id("e7").unwrap());
        assert_eq!(seg.tokens[seg.delimiter_position.unwrap()], v.eos_id());
        let (rows, targets) = seg.lm_targets();
        assert_eq!(rows, vec![seg.answer_start - 1, seg.answer_start]);
        assert_eq!(targets, vec![v.id("e7").unwrap(), v.eos_id()]);
    }

    #[test]
    fn sentinels_are_distinct_and_ordered() {
        let v = vocab();
        let seg = build_input(&v, &sample(&[false, true, false]), BuildMode::Infer, 512).unwrap();
        let ids: Vec<usize> = seg.sentinel_positions.iter().map(|&p| seg.tokens[p]).collect();
        assert_eq!(ids, vec![v.sentinel_id(1), v.sentinel_id(2), v.sentinel_id(3)]);
        assert!(seg.sentinel_positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(seg.answer_start, seg.len());
        assert!(seg.answer_mask.iter().all(|&m| !m));
    }

    #[test]
    fn question_appears_before_and_after_documents() {
        let v = vocab();
        let seg = build_input(&v, &sample(&[true, false]), BuildMode::Infer, 512).unwrap();
        let q = v.tokenize("r1 e5").unwrap();
        let first_doc = seg.doc_spans[0].0;
        let last_sentinel = *seg.sentinel_positions.last().unwrap();
        let found = |range: std::ops::Range<usize>| {
            seg.tokens[range].windows(q.len()).any(|w| w == q.as_slice())
        };
        assert!(found(0..first_doc));
        assert!(found(last_sentinel..seg.len()));
    }

    #[test]
    fn document_span_detokenizes_to_text() {
        let v = vocab();
        let s = sample(&[true, false, false]);
        let seg = build_input(&v, &s, BuildMode::Train, 512).unwrap();
        for (i, &(l, u)) in seg.doc_spans.iter().enumerate() {
            assert_eq!(v.detokenize(&seg.tokens[l..u]).unwrap(), s.documents[i].text);
        }
    }

    #[test]
    fn every_position_has_exactly_one_region() {
        let v = vocab();
        let seg = build_input(&v, &sample(&[true, false, true]), BuildMode::Train, 512).unwrap();
        let regions = seg.regions();
        let docs: usize = seg.doc_spans.iter().map(|(l, u)| u - l).sum();
        let count = |f: &dyn Fn(&Region) -> bool| regions.iter().filter(|r| f(r)).count();
        assert_eq!(count(&|r| matches!(r, Region::Document(_))), docs);
        assert_eq!(count(&|r| matches!(r, Region::Sentinel(_))), 3);
        assert_eq!(count(&|r| matches!(r, Region::Answer)), 2);
        assert_eq!(
            count(&|r| matches!(r, Region::Prompt)),
            seg.len() - docs - 3 - 2
        );
        for (t, m) in seg.answer_mask.iter().enumerate() {
            if *m {
                assert!(t > *seg.sentinel_positions.last().unwrap());
            }
        }
    }

    #[test]
    fn overlong_input_reports_length() {
        let v = vocab();
        let err = build_input(&v, &sample(&[true, false]), BuildMode::Train, 10).unwrap_err();
        match err {
            InputError::TooLong { len, limit } => {
                assert_eq!(limit, 10);
                assert!(len > 10);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn reorder_examples() {
        let pattern = |s: &QaSample| s.documents.iter().map(|d| d.relevant).collect::<Vec<_>>();
        let s = sample(&[false, true, false, true, false]);
        let r = reorder_sample(&s);
        assert_eq!(pattern(&r), vec![true, false, false, false, true]);
        assert_eq!(r.documents[0], s.documents[1]);
        assert_eq!(r.documents[4], s.documents[3]);
        assert_eq!(
            r.documents[1..4].to_vec(),
            vec![s.documents[0].clone(), s.documents[2].clone(), s.documents[4].clone()]
        );

        let all = sample(&[true, true, true]);
        assert_eq!(reorder_sample(&all), all);

        let single = sample(&[false, false, true, false]);
        let r = reorder_sample(&single);
        assert_eq!(r.documents[0], single.documents[2]);
        assert_eq!(pattern(&r), vec![true, false, false, false]);
    }

    #[test]
    fn dataset_roundtrip_uses_integer_labels() {
        let s = sample(&[true, false]);
        let mut buf = Vec::new();
        write_dataset(&mut buf, std::slice::from_ref(&s)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"label\":1") && text.contains("\"label\":0"));
        assert_eq!(read_dataset(&buf[..]).unwrap(), vec![s]);
    }

    #[test]
    fn dataset_rejects_bad_label() {
        let line = r#"{"id":"x","question":"r1 e1","documents":[{"text":"e1","label":2}],"answer":"e2"}"#;
        assert!(matches!(
            read_dataset(line.as_bytes()),
            Err(InputError::Parse { line: 1, .. })
        ));
    }
}
