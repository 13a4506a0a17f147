//! Labeled-text ingestion (`text<TAB>label` per line).
//!
//! Tokenization is a word/character hybrid: whitespace-separated words that
//! occur at least `min_word_freq` times get their own token, rarer words are
//! spelled out character by character. Each distinct label becomes one
//! reserved token.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{ExamplePool, TaskSpec, Template};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct IngestOptions {
    pub min_word_freq: usize,
    /// Inputs longer than this are truncated (in tokens).
    pub max_input_tokens: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_word_freq: 2,
            max_input_tokens: 24,
        }
    }
}

const BOS: &str = "<bos>";
const END: &str = "<end>";
const PREFIX: &str = "<prefix>";
const MARKER: &str = "<marker>";
const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestedTask {
    pub spec: TaskSpec,
    pub pool: ExamplePool,
    /// Token strings, indexed by token id.
    pub vocab: Vec<String>,
    pub label_names: Vec<String>,
    index: BTreeMap<String, TokenId>,
    chars: BTreeMap<char, TokenId>,
    unk: TokenId,
    max_input_tokens: usize,
}

fn parse_line(line: &str, lineno: usize) -> Result<(&str, &str)> {
    let (text, label) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
        line: lineno,
        reason: "expected `text<TAB>label`".to_string(),
    })?;
    let (text, label) = (text.trim(), label.trim());
    if text.is_empty() || label.is_empty() {
        return Err(Error::Parse {
            line: lineno,
            reason: "empty text or label".to_string(),
        });
    }
    Ok((text, label))
}

/// Builds a task and its example pool from line-delimited labeled text.
pub fn ingest_labeled_text(input: &str, opts: IngestOptions) -> Result<IngestedTask> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_line(line, i + 1)?);
    }
    if rows.is_empty() {
        return Err(Error::data("no labeled lines in input"));
    }
    let mut label_names: Vec<String> = Vec::new();
    for (_, label) in &rows {
        if !label_names.iter().any(|l| l == label) {
            label_names.push((*label).to_string());
        }
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for (text, _) in &rows {
        for w in text.split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = freq
        .iter()
        .filter(|(_, &n)| n >= opts.min_word_freq.max(1))
        .map(|(&w, &n)| (w, n))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut chars: Vec<char> = freq
        .keys()
        .filter(|w| freq[*w] < opts.min_word_freq.max(1))
        .flat_map(|w| w.chars())
        .collect();
    chars.sort_unstable();
    chars.dedup();

    let mut vocab: Vec<String> = [BOS, END, PREFIX, MARKER].iter().map(|s| s.to_string()).collect();
    let label_tokens: Vec<TokenId> = label_names
        .iter()
        .map(|l| {
            vocab.push(format!("<label:{l}>"));
            (vocab.len() - 1) as TokenId
        })
        .collect();
    vocab.push(UNK.to_string());
    let unk = (vocab.len() - 1) as TokenId;
    let mut char_index = BTreeMap::new();
    for c in chars {
        vocab.push(format!("<ch:{c}>"));
        char_index.insert(c, (vocab.len() - 1) as TokenId);
    }
    let mut index = BTreeMap::new();
    for (w, _) in words {
        vocab.push(w.to_string());
        index.insert(w.to_string(), (vocab.len() - 1) as TokenId);
    }

    let spec = TaskSpec {
        id: String::from("ingested"),
        label_tokens,
        template: Template {
            bos: Some(0),
            prefix: Some(2),
            marker: 3,
            end: Some(1),
        },
        generator: None,
    };
    let mut task = IngestedTask {
        spec,
        pool: ExamplePool::default(),
        vocab,
        label_names,
        index,
        chars: char_index,
        unk,
        max_input_tokens: opts.max_input_tokens.max(1),
    };
    task.pool.per_class = (0..task.label_names.len()).map(|_| Vec::new()).collect();
    for (text, label) in &rows {
        let c = task.class_of(label)?;
        let ids = task.encode(text);
        task.pool.per_class[c].push(ids);
    }
    task.spec.validate()?;
    Ok(task)
}

impl IngestedTask {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Class index of a label name; labels not seen at ingestion are a data
    /// error.
    pub fn class_of(&self, label: &str) -> Result<usize> {
        self.label_names
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::data(format!("label `{label}` was not seen at ingestion")))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            match self.index.get(w) {
                Some(&t) => out.push(t),
                None => out.extend(w.chars().map(|c| self.chars.get(&c).copied().unwrap_or(self.unk))),
            }
        }
        out.truncate(self.max_input_tokens);
        if out.is_empty() {
            out.push(self.unk);
        }
        out
    }

    /// Encodes one evaluation line.
    pub fn encode_labeled(&self, line: &str, lineno: usize) -> Result<(Vec<TokenId>, usize)> {
        let (text, label) = parse_line(line, lineno)?;
        Ok((self.encode(text), self.class_of(label)?))
    }
}
