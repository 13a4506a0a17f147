//! Token-space layout for synthetic tasks and the pretraining corpus.
//!
//! The corpus mixes three kinds of sequences so that a small model picks up
//! in-context copying before any fine-tuning:
//! - Markov-chain streams over the whole vocabulary,
//! - random sequences in which one span is repeated verbatim later,
//! - `span marker label` triples whose span-class to label binding is
//!   redrawn for every sequence, so it can only be read from context.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{SpanGenerator, TaskSpec, Template};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct WorldConfig {
    pub vocab_size: usize,
    /// Reserved single-token labels.
    pub n_labels: usize,
    /// Groups of class-indicative tokens.
    pub n_groups: usize,
    pub group_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 96,
            n_labels: 12,
            n_groups: 12,
            group_size: 4,
        }
    }
}

/// Number of special tokens: bos, end, prefix and three markers.
const SPECIALS: usize = 6;
const MIN_DISTRACTORS: usize = 4;

/// Fixed token roles shared by every synthetic task and the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    pub vocab_size: usize,
    pub bos: TokenId,
    pub end: TokenId,
    pub prefix: TokenId,
    /// The first marker is the default; the others are template variants.
    pub markers: [TokenId; 3],
    pub labels: Vec<TokenId>,
    pub groups: Vec<Vec<TokenId>>,
    pub distractors: Vec<TokenId>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        let used = SPECIALS + cfg.n_labels + cfg.n_groups * cfg.group_size;
        if used + MIN_DISTRACTORS > cfg.vocab_size {
            return Err(Error::config(
                "vocab_size",
                format!("{} tokens cannot hold {used} reserved tokens plus {MIN_DISTRACTORS} distractors", cfg.vocab_size),
            ));
        }
        if cfg.n_labels < 2 || cfg.n_groups < 2 || cfg.group_size == 0 {
            return Err(Error::config("world", "need at least two labels, two groups and non-empty groups"));
        }
        let tok = |i: usize| i as TokenId;
        let label_start = SPECIALS;
        let group_start = label_start + cfg.n_labels;
        Ok(Self {
            vocab_size: cfg.vocab_size,
            bos: 0,
            end: 1,
            prefix: 2,
            markers: [3, 4, 5],
            labels: (label_start..group_start).map(tok).collect(),
            groups: (0..cfg.n_groups)
                .map(|g| {
                    let s = group_start + g * cfg.group_size;
                    (s..s + cfg.group_size).map(tok).collect()
                })
                .collect(),
            distractors: (used..cfg.vocab_size).map(tok).collect(),
        })
    }

    /// The default ICL template: `bos (x marker y end)* x marker`.
    pub fn template(&self) -> Template {
        Template {
            bos: Some(self.bos),
            prefix: None,
            marker: self.markers[0],
            end: Some(self.end),
        }
    }

    /// A synthetic task whose class `c` is indicated by tokens of group
    /// `groups[c]` and labelled with `labels[labels_idx[c]]`.
    pub fn task(&self, id: impl Into<String>, groups: &[usize], label_idx: &[usize], input_len: usize) -> Result<TaskSpec> {
        if groups.len() != label_idx.len() {
            return Err(Error::config("task", "one group and one label per class"));
        }
        let group = |g: usize| {
            self.groups.get(g).cloned().ok_or(Error::Index {
                what: "token group",
                index: g,
                bound: self.groups.len(),
            })
        };
        let label = |l: usize| {
            self.labels.get(l).copied().ok_or(Error::Index {
                what: "label",
                index: l,
                bound: self.labels.len(),
            })
        };
        let spec = TaskSpec {
            id: id.into(),
            label_tokens: label_idx.iter().map(|&l| label(l)).collect::<Result<_>>()?,
            template: self.template(),
            generator: Some(SpanGenerator {
                class_tokens: groups.iter().map(|&g| group(g)).collect::<Result<_>>()?,
                distractors: self.distractors.clone(),
                input_len,
            }),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct CorpusConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    /// Relative weights of the three sequence kinds.
    pub markov_weight: f64,
    pub repeat_weight: f64,
    pub triple_weight: f64,
    /// Successors per token in the Markov chain.
    pub markov_branching: usize,
    /// Span length range `[min, max]` inside triples.
    pub triple_span: (usize, usize),
    /// Length range `[min, max]` of the repeated segment; `max` is capped
    /// at half the sequence.
    pub repeat_len: (usize, usize),
    /// Class count range `[min, max]` per triple sequence.
    pub triple_classes: (usize, usize),
    /// Probability that a triple sequence uses the ICL separators
    /// (leading bos, end token after each label).
    pub separator_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_sequences: 50_000,
            seq_len: 48,
            markov_weight: 0.2,
            repeat_weight: 0.3,
            triple_weight: 0.5,
            markov_branching: 4,
            triple_span: (1, 3),
            repeat_len: (2, 16),
            triple_classes: (2, 6),
            separator_prob: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    Markov,
    /// `tokens[second..second + len] == tokens[first..first + len]`.
    Repeat { first: usize, second: usize, len: usize },
    Triples,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSequence {
    pub tokens: Vec<TokenId>,
    pub kind: SequenceKind,
}

struct Markov {
    successors: Vec<Vec<(TokenId, f64)>>,
}

impl Markov {
    fn new<R: Rng + ?Sized>(vocab: usize, branching: usize, rng: &mut R) -> Self {
        let successors = (0..vocab)
            .map(|_| {
                let picks = index::sample(rng, vocab, branching.min(vocab));
                let weights: Vec<f64> = (0..picks.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
                let total: f64 = weights.iter().sum();
                picks.iter().zip(weights).map(|(t, w)| (t as TokenId, w / total)).collect()
            })
            .collect();
        Self { successors }
    }

    fn walk<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        let mut cur = rng.gen_range(0..self.successors.len()) as TokenId;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(cur);
            let u: f64 = rng.gen();
            let succ = &self.successors[cur as usize];
            let mut acc = 0.0;
            cur = succ.last().unwrap().0;
            for &(t, w) in succ {
                acc += w;
                if u < acc {
                    cur = t;
                    break;
                }
            }
        }
        out
    }
}

fn repeat_sequence<R: Rng + ?Sized>(vocab: usize, seq_len: usize, span: (usize, usize), rng: &mut R) -> CorpusSequence {
    let mut tokens: Vec<TokenId> = (0..seq_len).map(|_| rng.gen_range(0..vocab) as TokenId).collect();
    let max_len = span.1.min(seq_len / 2);
    let len = rng.gen_range(span.0.min(max_len)..=max_len);
    let first = rng.gen_range(0..=seq_len - 2 * len);
    let second = rng.gen_range(first + len..=seq_len - len);
    let span: Vec<TokenId> = tokens[first..first + len].to_vec();
    tokens[second..second + len].copy_from_slice(&span);
    CorpusSequence {
        tokens,
        kind: SequenceKind::Repeat { first, second, len },
    }
}

fn triple_sequence<R: Rng + ?Sized>(world: &World, cfg: &CorpusConfig, rng: &mut R) -> CorpusSequence {
    let (cmin, cmax) = cfg.triple_classes;
    let n_classes = rng.gen_range(cmin..=cmax).min(world.groups.len()).min(world.labels.len());
    let groups = index::sample(rng, world.groups.len(), n_classes).into_vec();
    let labels = index::sample(rng, world.labels.len(), n_classes).into_vec();
    let marker = match rng.gen_range(0..5) {
        0 => world.markers[1],
        1 => world.markers[2],
        _ => world.markers[0],
    };
    let span_len = rng.gen_range(cfg.triple_span.0..=cfg.triple_span.1);
    let separators = rng.gen_bool(cfg.separator_prob);
    let generator = SpanGenerator {
        class_tokens: groups.iter().map(|&g| world.groups[g].clone()).collect(),
        distractors: world.distractors.clone(),
        input_len: span_len,
    };
    let mut tokens = Vec::with_capacity(cfg.seq_len + span_len + 3);
    if separators {
        tokens.push(world.bos);
    }
    while tokens.len() < cfg.seq_len {
        let c = rng.gen_range(0..n_classes);
        tokens.extend(generator.generate(c, rng));
        tokens.push(marker);
        tokens.push(world.labels[labels[c]]);
        if separators {
            tokens.push(world.end);
        }
    }
    tokens.truncate(cfg.seq_len);
    CorpusSequence {
        tokens,
        kind: SequenceKind::Triples,
    }
}

/// Generates the pretraining corpus.
pub fn build_pretrain_corpus<R: Rng + ?Sized>(world: &World, cfg: &CorpusConfig, rng: &mut R) -> Result<Vec<CorpusSequence>> {
    if cfg.seq_len < 8 {
        return Err(Error::config("corpus.seq_len", "must be at least 8"));
    }
    let weights = [cfg.markov_weight, cfg.repeat_weight, cfg.triple_weight];
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config("corpus weights", "must be non-negative with a positive sum"));
    }
    if cfg.triple_span.0 == 0 || cfg.triple_span.0 > cfg.triple_span.1 {
        return Err(Error::config("corpus.triple_span", "need 1 <= min <= max"));
    }
    if cfg.repeat_len.0 < 2 || cfg.repeat_len.0 > cfg.repeat_len.1 {
        return Err(Error::config("corpus.repeat_len", "need 2 <= min <= max"));
    }
    if cfg.triple_classes.0 < 2 || cfg.triple_classes.0 > cfg.triple_classes.1 {
        return Err(Error::config("corpus.triple_classes", "need 2 <= min <= max"));
    }
    if !(0.0..=1.0).contains(&cfg.separator_prob) {
        return Err(Error::config("corpus.separator_prob", "must be a probability"));
    }
    let markov = Markov::new(world.vocab_size, cfg.markov_branching.max(1), rng);
    let total: f64 = weights.iter().sum();
    let mut kinds: Vec<usize> = Vec::with_capacity(cfg.n_sequences);
    let mut acc = 0.0;
    let mut assigned = 0usize;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        let upto = if i == 2 { cfg.n_sequences } else { Float::round(acc * cfg.n_sequences as f64) as usize };
        kinds.extend(core::iter::repeat(i).take(upto.saturating_sub(assigned)));
        assigned = assigned.max(upto);
    }
    kinds.shuffle(rng);
    Ok(kinds
        .into_iter()
        .map(|k| match k {
            0 => CorpusSequence {
                tokens: markov.walk(cfg.seq_len, rng),
                kind: SequenceKind::Markov,
            },
            1 => repeat_sequence(world.vocab_size, cfg.seq_len, cfg.repeat_len, rng),
            _ => triple_sequence(world, cfg, rng),
        })
        .collect())
}

/// Sequences of the repeated-segment kind, for measuring the induction
/// signature on held-out data.
pub fn repeat_probe<R: Rng + ?Sized>(world: &World, cfg: &CorpusConfig, n: usize, rng: &mut R) -> Vec<CorpusSequence> {
    (0..n)
        .map(|_| repeat_sequence(world.vocab_size, cfg.seq_len, cfg.repeat_len, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn world_layout_is_disjoint() {
        let w = World::new(WorldConfig::default()).unwrap();
        let mut all: Vec<TokenId> = vec![w.bos, w.end, w.prefix];
        all.extend(w.markers);
        all.extend(&w.labels);
        w.groups.iter().for_each(|g| all.extend(g));
        all.extend(&w.distractors);
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, 96);
        assert_eq!(w.distractors.len(), 96 - 6 - 12 - 48);
    }

    #[test]
    fn world_too_small() {
        let cfg = WorldConfig {
            vocab_size: 40,
            ..WorldConfig::default()
        };
        assert!(matches!(World::new(cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn repeated_segments_are_identical() {
        let w = World::new(WorldConfig::default()).unwrap();
        let mut r = rng::stream(1, rng::CORPUS);
        for s in repeat_probe(&w, &CorpusConfig::default(), 200, &mut r) {
            let SequenceKind::Repeat { first, second, len } = s.kind else { panic!() };
            assert!(first + len <= second);
            assert_eq!(s.tokens[first..first + len], s.tokens[second..second + len]);
            assert_eq!(s.tokens.len(), 48);
        }
    }

    #[test]
    fn corpus_covers_vocabulary_and_mix() {
        let w = World::new(WorldConfig::default()).unwrap();
        let cfg = CorpusConfig {
            n_sequences: 2000,
            ..CorpusConfig::default()
        };
        let corpus = build_pretrain_corpus(&w, &cfg, &mut rng::stream(2, rng::CORPUS)).unwrap();
        assert_eq!(corpus.len(), 2000);
        let mut seen = vec![false; 96];
        corpus.iter().flat_map(|s| &s.tokens).for_each(|&t| seen[t as usize] = true);
        assert!(seen.iter().all(|&b| b));
        let triples = corpus.iter().filter(|s| s.kind == SequenceKind::Triples).count();
        assert_eq!(triples, 1000);
        assert!(corpus.iter().all(|s| s.tokens.len() == 48));
    }

    #[test]
    fn triples_bind_labels_per_sequence() {
        let w = World::new(WorldConfig::default()).unwrap();
        let cfg = CorpusConfig {
            n_sequences: 300,
            markov_weight: 0.0,
            repeat_weight: 0.0,
            triple_weight: 1.0,
            ..CorpusConfig::default()
        };
        let corpus = build_pretrain_corpus(&w, &cfg, &mut rng::stream(3, rng::CORPUS)).unwrap();
        // within one sequence every label follows a marker
        for s in &corpus {
            for (i, t) in s.tokens.iter().enumerate() {
                if w.labels.contains(t) {
                    assert!(w.markers.contains(&s.tokens[i - 1]));
                }
            }
        }
    }

    #[test]
    fn task_uses_world_tokens() {
        let w = World::new(WorldConfig::default()).unwrap();
        let t = w.task("main", &[0, 1, 2, 3], &[0, 1, 2, 3], 3).unwrap();
        assert_eq!(t.label_tokens, vec![6, 7, 8, 9]);
        assert!(w.task("bad", &[0, 99], &[0, 1], 3).is_err());
    }
}
