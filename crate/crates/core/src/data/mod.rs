//! ICL prompt construction.
//!
//! A prompt is `[bos] (prefix? x_i marker y_i end?)* prefix? x_q marker`.
//! Label positions are recorded while rendering, never recovered by
//! scanning, and the final position (the marker after the query) is where
//! the next-token prediction is read.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{Error, Result, TokenId};

pub mod corpus;
pub mod ingest;

pub use corpus::{build_pretrain_corpus, CorpusConfig, CorpusSequence, SequenceKind, World, WorldConfig};
pub use ingest::{ingest_labeled_text, IngestOptions, IngestedTask};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Template {
    pub bos: Option<TokenId>,
    pub prefix: Option<TokenId>,
    pub marker: TokenId,
    pub end: Option<TokenId>,
}

impl Template {
    pub fn tokens(&self) -> Vec<TokenId> {
        [self.bos, self.prefix, Some(self.marker), self.end].into_iter().flatten().collect()
    }

    /// Prompt length for `k` demonstrations with fixed-length spans:
    /// `n_t = a * k + b`.
    pub fn prompt_len(&self, k: usize, input_len: usize) -> usize {
        let per_demo = usize::from(self.prefix.is_some()) + input_len + 2 + usize::from(self.end.is_some());
        usize::from(self.bos.is_some()) + k * per_demo + usize::from(self.prefix.is_some()) + input_len + 1
    }
}

/// Synthetic input spans: one class-indicative token at a random slot,
/// distractors elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpanGenerator {
    pub class_tokens: Vec<Vec<TokenId>>,
    pub distractors: Vec<TokenId>,
    pub input_len: usize,
}

impl SpanGenerator {
    pub fn generate<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<TokenId> {
        let mut span: Vec<TokenId> = (0..self.input_len)
            .map(|_| *self.distractors.choose(rng).expect("non-empty distractors"))
            .collect();
        let slot = rng.gen_range(0..self.input_len);
        span[slot] = *self.class_tokens[class].choose(rng).expect("non-empty class tokens");
        span
    }

    fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.class_tokens.iter().flatten().chain(&self.distractors).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskSpec {
    pub id: String,
    /// One reserved token per class.
    pub label_tokens: Vec<TokenId>,
    pub template: Template,
    /// Present for synthetic tasks; ingested tasks come with a fixed pool.
    pub generator: Option<SpanGenerator>,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        self.label_tokens.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_tokens.is_empty() {
            return Err(Error::config("label_tokens", "a task needs at least one class"));
        }
        let labels: BTreeSet<TokenId> = self.label_tokens.iter().copied().collect();
        if labels.len() != self.label_tokens.len() {
            return Err(Error::config("label_tokens", "label tokens must be distinct"));
        }
        if self.template.tokens().iter().any(|t| labels.contains(t)) {
            return Err(Error::config("label_tokens", "label tokens overlap template tokens"));
        }
        if let Some(g) = &self.generator {
            if g.class_tokens.len() != self.n_classes() {
                return Err(Error::config("generator", "one indicative token set per class is required"));
            }
            if g.input_len == 0 || g.distractors.is_empty() || g.class_tokens.iter().any(Vec::is_empty) {
                return Err(Error::config("generator", "empty span, distractor or class token set"));
            }
            let template: BTreeSet<TokenId> = self.template.tokens().into_iter().collect();
            if g.tokens().any(|t| labels.contains(&t) || template.contains(&t)) {
                return Err(Error::config("generator", "span tokens overlap label or template tokens"));
            }
        }
        Ok(())
    }

    /// Same task rendered with a different marker token.
    pub fn with_marker(&self, marker: TokenId) -> Self {
        let mut t = self.clone();
        t.template.marker = marker;
        t
    }
}

/// Input spans grouped by class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExamplePool {
    pub per_class: Vec<Vec<Vec<TokenId>>>,
}

impl ExamplePool {
    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-class pool sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SplitSizes {
    pub train: usize,
    pub demo: usize,
    pub query: usize,
}

/// Disjoint example pools for training prompts, test demonstrations and test
/// queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: ExamplePool,
    pub demo: ExamplePool,
    pub query: ExamplePool,
}

impl SplitPlan {
    /// Draws distinct synthetic spans per class and partitions them.
    pub fn generate<R: Rng + ?Sized>(spec: &TaskSpec, sizes: SplitSizes, rng: &mut R) -> Result<Self> {
        let generator = spec
            .generator
            .as_ref()
            .ok_or_else(|| Error::data(format!("task `{}` has no span generator", spec.id)))?;
        let need = sizes.train + sizes.demo + sizes.query;
        let mut pools = vec![ExamplePool::default(), ExamplePool::default(), ExamplePool::default()];
        for c in 0..spec.n_classes() {
            let mut seen = BTreeSet::new();
            let mut spans = Vec::with_capacity(need);
            let mut attempts = 0usize;
            while spans.len() < need {
                attempts += 1;
                if attempts > 50 * need + 100 {
                    return Err(Error::data(format!(
                        "pool exhaustion: class {c} of task `{}` yields only {} distinct spans, {need} needed",
                        spec.id,
                        spans.len()
                    )));
                }
                let s = generator.generate(c, rng);
                if seen.insert(s.clone()) {
                    spans.push(s);
                }
            }
            let query = spans.split_off(sizes.train + sizes.demo);
            let demo = spans.split_off(sizes.train);
            pools[0].per_class.push(spans);
            pools[1].per_class.push(demo);
            pools[2].per_class.push(query);
        }
        let mut it = pools.into_iter();
        Ok(Self {
            train: it.next().unwrap(),
            demo: it.next().unwrap(),
            query: it.next().unwrap(),
        })
    }

    /// Shuffles each class of a fixed pool and splits it by fractions
    /// `(train, demo)`; the remainder becomes the query pool.
    pub fn partition<R: Rng + ?Sized>(pool: &ExamplePool, train: f64, demo: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&demo) || train + demo >= 1.0 {
            return Err(Error::config("split", "fractions must be in [0, 1] and leave room for queries"));
        }
        let mut plan = Self {
            train: ExamplePool::default(),
            demo: ExamplePool::default(),
            query: ExamplePool::default(),
        };
        for (c, examples) in pool.per_class.iter().enumerate() {
            let mut ex = examples.clone();
            ex.shuffle(rng);
            let n = ex.len();
            let nt = (n as f64 * train) as usize;
            let nd = (n as f64 * demo) as usize;
            if nt == 0 || nd == 0 || n - nt - nd == 0 {
                return Err(Error::data(format!("class {c} has too few examples ({n}) to split")));
            }
            let query = ex.split_off(nt + nd);
            let d = ex.split_off(nt);
            plan.train.per_class.push(ex);
            plan.demo.per_class.push(d);
            plan.query.per_class.push(query);
        }
        Ok(plan)
    }
}

/// A tokenized prompt with annotated label positions.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IclSample {
    pub tokens: Vec<TokenId>,
    /// All label positions, in order (`I`).
    pub label_positions: Vec<usize>,
    /// Class of the label at each entry of `label_positions`.
    pub label_classes: Vec<usize>,
    /// Label positions whose class is the query's (`I+`).
    pub positive: Vec<usize>,
    /// The remaining label positions (`I-`).
    pub negative: Vec<usize>,
    pub query_class: usize,
}

impl IclSample {
    pub fn n_t(&self) -> usize {
        self.tokens.len()
    }

    pub fn k(&self) -> usize {
        self.label_positions.len()
    }

    /// Checks the structural invariants against the task's label tokens,
    /// scanning the whole sequence.
    pub fn check(&self, label_tokens: &[TokenId]) -> Result<()> {
        let bad = |why: &str| Err(Error::contract(format!("malformed ICL sample: {why}")));
        if self.label_positions.len() != self.label_classes.len() {
            return bad("class list length");
        }
        let mut union: Vec<usize> = self.positive.iter().chain(&self.negative).copied().collect();
        union.sort_unstable();
        let mut all = self.label_positions.clone();
        all.sort_unstable();
        if union != all {
            return bad("I+ and I- do not partition I");
        }
        for (&p, &c) in self.label_positions.iter().zip(&self.label_classes) {
            if self.tokens.get(p) != label_tokens.get(c) {
                return bad("label token mismatch");
            }
            if (c == self.query_class) != self.positive.contains(&p) {
                return bad("I+ membership");
            }
        }
        for (p, t) in self.tokens.iter().enumerate() {
            if label_tokens.contains(t) != self.label_positions.contains(&p) {
                return bad("stray label token");
            }
        }
        if self.label_positions.contains(&(self.n_t() - 1)) {
            return bad("final position is a label");
        }
        Ok(())
    }
}

/// Demonstrations and query before rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub demos: Vec<(Vec<TokenId>, usize)>,
    pub query: Vec<TokenId>,
    pub query_class: usize,
}

impl Episode {
    pub fn render(&self, spec: &TaskSpec) -> IclSample {
        let t = &spec.template;
        let mut tokens = Vec::new();
        let mut label_positions = Vec::with_capacity(self.demos.len());
        let mut label_classes = Vec::with_capacity(self.demos.len());
        tokens.extend(t.bos);
        for (span, class) in &self.demos {
            tokens.extend(t.prefix);
            tokens.extend_from_slice(span);
            tokens.push(t.marker);
            label_positions.push(tokens.len());
            label_classes.push(*class);
            tokens.push(spec.label_tokens[*class]);
            tokens.extend(t.end);
        }
        tokens.extend(t.prefix);
        tokens.extend_from_slice(&self.query);
        tokens.push(t.marker);
        let (mut positive, mut negative) = (Vec::new(), Vec::new());
        for (&p, &c) in label_positions.iter().zip(&label_classes) {
            if c == self.query_class {
                positive.push(p);
            } else {
                negative.push(p);
            }
        }
        IclSample {
            tokens,
            label_positions,
            label_classes,
            positive,
            negative,
            query_class: self.query_class,
        }
    }

    /// The same query with no demonstrations.
    pub fn zero_shot(&self) -> Episode {
        Episode {
            demos: Vec::new(),
            query: self.query.clone(),
            query_class: self.query_class,
        }
    }
}

/// How demonstration classes are chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DemoClasses {
    /// Uniform over all classes.
    Uniform,
    /// Uniform over classes other than the query's.
    ExcludeQuery,
    /// Exactly these classes, in order.
    Fixed(Vec<usize>),
}

/// Draws episodes from a demonstration pool and a query pool.
#[derive(Debug, Clone, Copy)]
pub struct SampleBuilder<'a> {
    pub spec: &'a TaskSpec,
    demos: &'a ExamplePool,
    queries: &'a ExamplePool,
    max_seq_len: usize,
}

impl<'a> SampleBuilder<'a> {
    /// Training prompts: demonstrations and queries both come from the
    /// training pool (never the same example twice in one prompt).
    pub fn train(spec: &'a TaskSpec, split: &'a SplitPlan, max_seq_len: usize) -> Self {
        Self::new(spec, &split.train, &split.train, max_seq_len)
    }

    /// Test prompts: demonstration pool for demonstrations, query pool for
    /// queries.
    pub fn test(spec: &'a TaskSpec, split: &'a SplitPlan, max_seq_len: usize) -> Self {
        Self::new(spec, &split.demo, &split.query, max_seq_len)
    }

    pub fn new(spec: &'a TaskSpec, demos: &'a ExamplePool, queries: &'a ExamplePool, max_seq_len: usize) -> Self {
        Self {
            spec,
            demos,
            queries,
            max_seq_len,
        }
    }

    pub fn query_pool(&self) -> &'a ExamplePool {
        self.queries
    }

    pub fn demo_pool(&self) -> &'a ExamplePool {
        self.demos
    }

    fn shared(&self) -> bool {
        core::ptr::eq(self.demos, self.queries)
    }

    pub fn episode<R: Rng + ?Sized>(
        &self,
        k: usize,
        query_class: usize,
        classes: &DemoClasses,
        rng: &mut R,
    ) -> Result<Episode> {
        let c = self.spec.n_classes();
        if query_class >= c {
            return Err(Error::Index {
                what: "query class",
                index: query_class,
                bound: c,
            });
        }
        if self.demos.n_classes() != c || self.queries.n_classes() != c {
            return Err(Error::data("pool class count does not match the task"));
        }
        let qpool = &self.queries.per_class[query_class];
        if qpool.is_empty() {
            return Err(Error::data(format!("pool exhaustion: no queries of class {query_class}")));
        }
        let qi = rng.gen_range(0..qpool.len());
        self.episode_with_query(k, query_class, qi, classes, rng)
    }

    /// Like [`episode`](Self::episode) with the query fixed to entry
    /// `query_index` of its class in the query pool.
    pub fn episode_with_query<R: Rng + ?Sized>(
        &self,
        k: usize,
        query_class: usize,
        query_index: usize,
        classes: &DemoClasses,
        rng: &mut R,
    ) -> Result<Episode> {
        let c = self.spec.n_classes();
        if query_class >= c || self.queries.n_classes() != c || self.demos.n_classes() != c {
            return Err(Error::Index {
                what: "query class",
                index: query_class,
                bound: c,
            });
        }
        let qpool = &self.queries.per_class[query_class];
        let qi = query_index;
        if qi >= qpool.len() {
            return Err(Error::Index {
                what: "query example",
                index: qi,
                bound: qpool.len(),
            });
        }
        let demo_classes: Vec<usize> = match classes {
            DemoClasses::Uniform => (0..k).map(|_| rng.gen_range(0..c)).collect(),
            DemoClasses::ExcludeQuery => {
                if c < 2 {
                    return Err(Error::contract("unseen-label prompts need at least two classes"));
                }
                (0..k)
                    .map(|_| {
                        let r = rng.gen_range(0..c - 1);
                        if r >= query_class {
                            r + 1
                        } else {
                            r
                        }
                    })
                    .collect()
            }
            DemoClasses::Fixed(v) => {
                if v.len() != k || v.iter().any(|&x| x >= c) {
                    return Err(Error::contract("fixed demonstration classes must be k valid classes"));
                }
                v.clone()
            }
        };
        let mut used: Vec<Vec<usize>> = vec![Vec::new(); c];
        if self.shared() {
            used[query_class].push(qi);
        }
        let mut demos = Vec::with_capacity(k);
        for &dc in &demo_classes {
            let pool = &self.demos.per_class[dc];
            let free = pool.len() - used[dc].len();
            if free == 0 {
                return Err(Error::data(format!("pool exhaustion: not enough demonstrations of class {dc}")));
            }
            let mut pick = rng.gen_range(0..free);
            let mut idx = 0;
            loop {
                if !used[dc].contains(&idx) {
                    if pick == 0 {
                        break;
                    }
                    pick -= 1;
                }
                idx += 1;
            }
            used[dc].push(idx);
            demos.push((pool[idx].clone(), dc));
        }
        Ok(Episode {
            demos,
            query: qpool[qi].clone(),
            query_class,
        })
    }

    pub fn render(&self, episode: &Episode) -> Result<IclSample> {
        let s = episode.render(self.spec);
        if s.n_t() > self.max_seq_len {
            return Err(Error::Length {
                len: s.n_t(),
                max: self.max_seq_len,
            });
        }
        Ok(s)
    }

    pub fn build<R: Rng + ?Sized>(&self, k: usize, query_class: usize, rng: &mut R) -> Result<IclSample> {
        build_icl_sample(self, k, query_class, rng)
    }
}

/// One prompt with `k` uniformly drawn demonstrations.
pub fn build_icl_sample<R: Rng + ?Sized>(
    builder: &SampleBuilder<'_>,
    k: usize,
    query_class: usize,
    rng: &mut R,
) -> Result<IclSample> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let ep = builder.episode(k, query_class, &DemoClasses::Uniform, rng)?;
    builder.render(&ep)
}

/// One prompt whose demonstrations never carry the query's label, so
/// `I+` is empty.
pub fn build_unseen_label_sample<R: Rng + ?Sized>(
    builder: &SampleBuilder<'_>,
    k: usize,
    query_class: usize,
    rng: &mut R,
) -> Result<IclSample> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let ep = builder.episode(k, query_class, &DemoClasses::ExcludeQuery, rng)?;
    builder.render(&ep)
}

/// Query classes for `n` prompts, balanced to within one and shuffled.
pub fn balanced_classes<R: Rng + ?Sized>(n: usize, n_classes: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    v.shuffle(rng);
    v
}

/// `n_d` training prompts with balanced query classes.
pub fn build_training_set<R: Rng + ?Sized>(
    spec: &TaskSpec,
    split: &SplitPlan,
    n_d: usize,
    k: usize,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<Vec<IclSample>> {
    let b = SampleBuilder::train(spec, split, max_seq_len);
    balanced_classes(n_d, spec.n_classes(), rng)
        .into_iter()
        .map(|c| build_icl_sample(&b, k, c, rng))
        .collect()
}

/// `n` test prompts with balanced query classes.
pub fn build_test_set<R: Rng + ?Sized>(
    spec: &TaskSpec,
    split: &SplitPlan,
    n: usize,
    k: usize,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<Vec<IclSample>> {
    let b = SampleBuilder::test(spec, split, max_seq_len);
    balanced_classes(n, spec.n_classes(), rng)
        .into_iter()
        .map(|c| build_icl_sample(&b, k, c, rng))
        .collect()
}
