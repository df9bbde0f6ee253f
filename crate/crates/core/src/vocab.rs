//! Closed word-level vocabulary.
//!
//! Layout (ids in order): padding, answer delimiter, the sentinels
//! `</doc_1>..</doc_K>`, template words, relation words `r0..`, and entity
//! words `e0..` filling the remainder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const MAX_DOCS: usize = 16;

/// Instruction template placed before the first question and again before
/// the second one.
pub const PROMPT: &str = "answer the question from the documents";
pub const QUESTION_MARK: &str = "question:";
pub const DOCUMENT_MARK: &str = "document:";
pub const ANSWER_MARK: &str = "answer:";

const TEMPLATE_WORDS: &[&str] = &[
    "answer",
    "the",
    "question",
    "from",
    "documents",
    QUESTION_MARK,
    DOCUMENT_MARK,
    ANSWER_MARK,
    "query:",
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(usize),
    #[error("vocabulary of {size} cannot hold {relations} relations and at least one entity")]
    TooSmall { size: usize, relations: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct VocabConfig {
    pub size: usize,
    pub relations: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            size: 512,
            relations: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    relations: usize,
    entity_start: usize,
}

impl Vocab {
    pub fn new(cfg: &VocabConfig) -> Result<Self, VocabError> {
        let mut words: Vec<String> = vec![PAD.into(), EOS.into()];
        words.extend((1..=MAX_DOCS).map(sentinel_word));
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        words.extend((0..cfg.relations).map(|i| format!("r{i}")));
        let entity_start = words.len();
        if cfg.size <= entity_start {
            return Err(VocabError::TooSmall {
                size: cfg.size,
                relations: cfg.relations,
            });
        }
        words.extend((0..cfg.size - entity_start).map(|i| format!("e{i}")));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Self {
            words,
            index,
            relations: cfg.relations,
            entity_start,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize, VocabError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::OutOfVocabulary(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str, VocabError> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(VocabError::UnknownId(id))
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    /// Id of `</doc_i>` for 1-based `i`.
    pub fn sentinel_id(&self, i: usize) -> usize {
        assert!((1..=MAX_DOCS).contains(&i), "sentinel index {i}");
        1 + i
    }

    pub fn is_sentinel(&self, id: usize) -> bool {
        (2..2 + MAX_DOCS).contains(&id)
    }

    pub fn sentinel_ids(&self) -> impl Iterator<Item = usize> {
        2..2 + MAX_DOCS
    }

    pub fn relation_count(&self) -> usize {
        self.relations
    }

    pub fn entity_count(&self) -> usize {
        self.words.len() - self.entity_start
    }

    pub fn relation_word(&self, i: usize) -> &str {
        &self.words[self.entity_start - self.relations + i]
    }

    pub fn entity_word(&self, i: usize) -> &str {
        &self.words[self.entity_start + i]
    }

    /// Word-level tokenisation on single spaces. `""` maps to `[]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(' ').map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, VocabError> {
        let words: Vec<&str> = ids.iter().map(|&i| self.word(i)).collect::<Result<_, _>>()?;
        Ok(words.join(" "))
    }
}

pub fn sentinel_word(i: usize) -> String {
    format!("</doc_{i}>")
}
