//! Measurements over frozen models: accuracy, induction-head counts,
//! attention profiles, weight interpolation, prediction consistency,
//! unseen-label behavior and parameter shift.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::abft::{sample_loss, HeadFilter};
use crate::data::corpus::{CorpusSequence, SequenceKind};
use crate::data::{balanced_classes, DemoClasses, IclSample, SampleBuilder, TaskSpec};
use crate::model::{group_by_length, AttentionCapture, Logits, ParamKind, TransformerModel};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result, TokenId};

const CHUNK: usize = 64;

/// Runs capture-enabled forwards over `samples` and hands each sample's
/// captures to `f`.
pub fn for_each_capture<T: Scalar>(
    model: &TransformerModel<T>,
    samples: &[IclSample],
    mut f: impl FnMut(usize, &[AttentionCapture<T>]) -> Result<()>,
) -> Result<()> {
    let seqs: Vec<&[TokenId]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    for group in group_by_length(&seqs) {
        for part in group.chunks(CHUNK) {
            let batch: Vec<&[TokenId]> = part.iter().map(|&i| seqs[i]).collect();
            let mut tape = Tape::inference();
            let vars = model.record(&mut tape, &batch, Logits::None, true)?;
            for (row, &i) in part.iter().enumerate() {
                f(i, &model.captures(&tape, &vars, row))?;
            }
        }
    }
    Ok(())
}

pub fn predictions<T: Scalar>(model: &TransformerModel<T>, samples: &[IclSample], label_tokens: &[TokenId]) -> Result<Vec<usize>> {
    let seqs: Vec<&[TokenId]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    model.predict_many(&seqs, label_tokens, CHUNK)
}

/// Fraction of prompts whose predicted class is the query class.
pub fn eval_accuracy<T: Scalar>(model: &TransformerModel<T>, samples: &[IclSample], label_tokens: &[TokenId]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let pred = predictions(model, samples, label_tokens)?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.query_class).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// A named evaluation set for another task.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub name: String,
    pub samples: Vec<IclSample>,
    pub label_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodRow {
    pub task: String,
    pub before: f64,
    pub after: f64,
}

impl OodRow {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

pub fn eval_ood<T: Scalar>(before: &TransformerModel<T>, after: &TransformerModel<T>, tasks: &[TaskSet]) -> Result<Vec<OodRow>> {
    tasks
        .iter()
        .map(|t| {
            Ok(OodRow {
                task: t.name.clone(),
                before: eval_accuracy(before, &t.samples, &t.label_tokens)?,
                after: eval_accuracy(after, &t.samples, &t.label_tokens)?,
            })
        })
        .collect()
}

/// Per-sample induction counts under `filter`.
pub fn induction_counts<T: Scalar>(model: &TransformerModel<T>, samples: &[IclSample], filter: HeadFilter) -> Result<Vec<usize>> {
    let mut out = vec![0; samples.len()];
    for_each_capture(model, samples, |i, caps| {
        out[i] = sample_loss(caps, &samples[i], filter, 0.0, 0.0)?.induction_count;
        Ok(())
    })?;
    Ok(out)
}

/// Mean induction-head count per prompt.
pub fn count_induction_heads<T: Scalar>(model: &TransformerModel<T>, samples: &[IclSample], filter: HeadFilter) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("empty sample set"));
    }
    let counts = induction_counts(model, samples, filter)?;
    Ok(counts.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Per-layer mean attention mass on all label positions (`s`) and on the
/// query's label positions (`s_plus`), averaged over heads and samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttentionProfile {
    pub s: Vec<f64>,
    pub s_plus: Vec<f64>,
}

impl LayerAttentionProfile {
    pub fn total_s_plus(&self) -> f64 {
        self.s_plus.iter().sum()
    }

    /// `Σ s_plus / Σ s`.
    pub fn correct_ratio(&self) -> f64 {
        let s: f64 = self.s.iter().sum();
        if s > 0.0 {
            self.total_s_plus() / s
        } else {
            0.0
        }
    }
}

pub fn layer_profile<T: Scalar>(model: &TransformerModel<T>, samples: &[IclSample]) -> Result<LayerAttentionProfile> {
    if samples.is_empty() {
        return Err(Error::data("empty validation set"));
    }
    if samples.iter().any(|s| s.label_positions.is_empty()) {
        return Err(Error::data("layer profile needs prompts with label positions"));
    }
    let layers = model.config().n_layers;
    // accumulate per sample first so the result does not depend on the
    // evaluation order of the groups
    let mut per_sample = vec![(vec![0.0; layers], vec![0.0; layers]); samples.len()];
    for_each_capture(model, samples, |i, caps| {
        let s = &samples[i];
        for c in caps {
            let mass: f64 = s.label_positions.iter().map(|&p| c.alpha[p].as_f64()).sum();
            let plus: f64 = s.positive.iter().map(|&p| c.alpha[p].as_f64()).sum();
            per_sample[i].0[c.layer] += mass;
            per_sample[i].1[c.layer] += plus;
        }
        Ok(())
    })?;
    let denom = (samples.len() * model.config().n_heads) as f64;
    let mut s = vec![0.0; layers];
    let mut s_plus = vec![0.0; layers];
    for (a, b) in &per_sample {
        for l in 0..layers {
            s[l] += a[l];
            s_plus[l] += b[l];
        }
    }
    Ok(LayerAttentionProfile {
        s: s.into_iter().map(|x| x / denom).collect(),
        s_plus: s_plus.into_iter().map(|x| x / denom).collect(),
    })
}

fn check_same_layout<T: Scalar>(a: &TransformerModel<T>, b: &TransformerModel<T>) -> Result<()> {
    if a.config().n_layers != b.config().n_layers
        || a.config().n_heads != b.config().n_heads
        || a.params().len() != b.params().len()
        || a.params().iter().zip(b.params()).any(|(x, y)| x.shape() != y.shape())
    {
        return Err(Error::contract("models do not share an architecture"));
    }
    Ok(())
}

/// `θ = θ0 + αE (θE - θ0) + αA (θA - θ0)`, evaluated as
/// `(1 - αE - αA) θ0 + αE θE + αA θA` in `f64` so the three anchor points
/// reproduce their models exactly.
pub fn interpolate_models<T: Scalar>(
    theta0: &TransformerModel<T>,
    theta_e: &TransformerModel<T>,
    theta_a: &TransformerModel<T>,
    alpha_e: f64,
    alpha_a: f64,
) -> Result<TransformerModel<T>> {
    check_same_layout(theta0, theta_e)?;
    check_same_layout(theta0, theta_a)?;
    let w0 = 1.0 - alpha_e - alpha_a;
    let params = theta0
        .params()
        .iter()
        .zip(theta_e.params())
        .zip(theta_a.params())
        .map(|((p0, pe), pa)| {
            let data = p0
                .data()
                .iter()
                .zip(pe.data())
                .zip(pa.data())
                .map(|((&x0, &xe), &xa)| T::from_f64_lossy(w0 * x0.as_f64() + alpha_e * xe.as_f64() + alpha_a * xa.as_f64()))
                .collect();
            Tensor::new(p0.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = TransformerModel::from_params(theta0.config().clone(), params)?;
    m.restrict_trainable(crate::model::Trainable::None);
    Ok(m)
}

/// Square coefficient grid `{min, min + step, ..., max}²`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min: -0.25,
            max: 1.5,
            step: 0.25,
        }
    }
}

impl GridSpec {
    /// Axis values, computed as `min + i * step` so that multiples of a
    /// dyadic step are exact.
    pub fn axis(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.max >= self.min) {
            return Err(Error::config("grid", "need step > 0 and max >= min"));
        }
        let n = Float::round((self.max - self.min) / self.step) as usize + 1;
        let axis: Vec<f64> = (0..n).map(|i| self.min + i as f64 * self.step).collect();
        if !axis.contains(&0.0) || !axis.contains(&1.0) {
            return Err(Error::config("grid", "axis must contain 0 and 1"));
        }
        Ok(axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub alpha_e: f64,
    pub alpha_a: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityGrid {
    pub points: Vec<GridPoint>,
}

impl ConnectivityGrid {
    pub fn get(&self, alpha_e: f64, alpha_a: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.alpha_e == alpha_e && p.alpha_a == alpha_a)
            .map(|p| p.accuracy)
    }

    /// Accuracies along `(1 - t, t)` for `t = 0, 1/(n-1), ..., 1` when those
    /// points lie on the grid.
    pub fn segment(&self, n: usize) -> Option<Vec<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                self.get(1.0 - t, t)
            })
            .collect()
    }
}

pub fn connectivity_grid<T: Scalar>(
    theta0: &TransformerModel<T>,
    theta_e: &TransformerModel<T>,
    theta_a: &TransformerModel<T>,
    spec: GridSpec,
    samples: &[IclSample],
    label_tokens: &[TokenId],
) -> Result<ConnectivityGrid> {
    let axis = spec.axis()?;
    let mut points = Vec::with_capacity(axis.len() * axis.len());
    for &alpha_e in &axis {
        for &alpha_a in &axis {
            let m = interpolate_models(theta0, theta_e, theta_a, alpha_e, alpha_a)?;
            points.push(GridPoint {
                alpha_e,
                alpha_a,
                accuracy: eval_accuracy(&m, samples, label_tokens)?,
            });
        }
    }
    Ok(ConnectivityGrid { points })
}

/// Mean over queries of `max class votes / m`.
pub fn consistency_metric(variants: &[Vec<usize>]) -> Result<f64> {
    if variants.is_empty() {
        return Err(Error::data("no queries"));
    }
    let mut total = 0.0;
    for v in variants {
        if v.len() < 2 {
            return Err(Error::contract("consistency needs at least two prediction variants per query"));
        }
        let top = v.iter().map(|c| v.iter().filter(|x| *x == c).count()).max().unwrap_or(0);
        total += top as f64 / v.len() as f64;
    }
    Ok(total / variants.len() as f64)
}

/// Prediction variants per query: every marker variant of the template
/// crossed with `resamplings` demonstration draws, the query held fixed.
pub fn consistency_eval<T: Scalar, R: Rng + ?Sized>(
    model: &TransformerModel<T>,
    builder: &SampleBuilder<'_>,
    markers: &[TokenId],
    resamplings: usize,
    n_queries: usize,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    let spec = builder.spec;
    let specs: Vec<TaskSpec> = markers.iter().map(|&m| spec.with_marker(m)).collect();
    let mut prompts = Vec::new();
    let mut owner = Vec::new();
    for (q, class) in balanced_classes(n_queries, spec.n_classes(), rng).into_iter().enumerate() {
        let pool = &builder.query_pool().per_class[class];
        if pool.is_empty() {
            return Err(Error::data("pool exhaustion: no queries for consistency"));
        }
        let qi = rng.gen_range(0..pool.len());
        for _ in 0..resamplings {
            let ep = builder.episode_with_query(k, class, qi, &DemoClasses::Uniform, rng)?;
            for s in &specs {
                prompts.push(SampleBuilder::new(s, builder.demo_pool(), builder.query_pool(), usize::MAX).render(&ep)?);
                owner.push(q);
            }
        }
    }
    let pred = predictions(model, &prompts, &spec.label_tokens)?;
    let mut variants = vec![Vec::new(); n_queries];
    for (p, q) in pred.into_iter().zip(owner) {
        variants[q].push(p);
    }
    consistency_metric(&variants)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnseenReport {
    pub unseen_accuracy: f64,
    pub zero_shot_accuracy: f64,
    /// Same queries with uniformly drawn demonstrations.
    pub random_accuracy: f64,
    pub n: usize,
}

/// Accuracy on prompts whose demonstrations never show the query's label,
/// next to zero-shot and random-demonstration accuracy on the same queries.
pub fn unseen_label_eval<T: Scalar, R: Rng + ?Sized>(
    model: &TransformerModel<T>,
    builder: &SampleBuilder<'_>,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<UnseenReport> {
    let spec = builder.spec;
    if spec.n_classes() < 2 {
        return Err(Error::contract("unseen-label evaluation needs at least two classes"));
    }
    if n == 0 || k == 0 {
        return Err(Error::contract("need n >= 1 and k >= 1"));
    }
    let (mut unseen, mut zero, mut random) = (Vec::new(), Vec::new(), Vec::new());
    for class in balanced_classes(n, spec.n_classes(), rng) {
        let qi = rng.gen_range(0..builder.query_pool().per_class[class].len().max(1));
        let ep = builder.episode_with_query(k, class, qi, &DemoClasses::ExcludeQuery, rng)?;
        let s = builder.render(&ep)?;
        if !s.positive.is_empty() {
            return Err(Error::contract("unseen-label prompt has a positive label position"));
        }
        unseen.push(s);
        zero.push(builder.render(&ep.zero_shot())?);
        let ep = builder.episode_with_query(k, class, qi, &DemoClasses::Uniform, rng)?;
        random.push(builder.render(&ep)?);
    }
    let labels = &spec.label_tokens;
    Ok(UnseenReport {
        unseen_accuracy: eval_accuracy(model, &unseen, labels)?,
        zero_shot_accuracy: eval_accuracy(model, &zero, labels)?,
        random_accuracy: eval_accuracy(model, &random, labels)?,
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftEntry {
    pub name: String,
    pub kind: ParamKind,
    pub layer: Option<usize>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMap {
    pub entries: Vec<ShiftEntry>,
}

impl ShiftMap {
    pub fn is_zero_outside_qk(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.kind.is_query_or_key() || e.distance == 0.0)
    }
}

/// Per-tensor Frobenius distance between two parameter sets.
pub fn shift_map<T: Scalar>(before: &TransformerModel<T>, after: &TransformerModel<T>) -> Result<ShiftMap> {
    check_same_layout(before, after)?;
    let entries = before
        .params()
        .iter()
        .zip(after.params())
        .zip(before.info())
        .map(|((a, b), info)| {
            Ok(ShiftEntry {
                name: info.name(),
                kind: info.kind,
                layer: info.layer,
                distance: a.frobenius_distance(b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShiftMap { entries })
}

/// Final-row attention of every head for one prompt, one row per head in
/// (layer, head) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn attention_heatmap<T: Scalar>(model: &TransformerModel<T>, tokens: &[TokenId]) -> Result<Heatmap> {
    let (_, caps) = model.forward(tokens, true)?;
    let values = caps.iter().flat_map(|c| c.alpha.iter().map(|a| a.as_f64())).collect();
    Ok(Heatmap {
        rows: caps.len(),
        cols: tokens.len(),
        values,
    })
}

/// Mean next-token loss on the first and second copy of repeated segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InductionSignature {
    pub first_loss: f64,
    pub second_loss: f64,
}

impl InductionSignature {
    pub fn holds(&self) -> bool {
        self.second_loss < self.first_loss
    }
}

/// Measures the repeated-segment loss drop on probe sequences. Within each
/// copy the first token is skipped, since it cannot be predicted from the
/// segment itself.
pub fn induction_signature<T: Scalar>(model: &TransformerModel<T>, probes: &[CorpusSequence]) -> Result<InductionSignature> {
    let (mut first, mut second, mut n1, mut n2) = (0.0, 0.0, 0usize, 0usize);
    for probe in probes {
        let SequenceKind::Repeat { first: a, second: b, len } = probe.kind else {
            return Err(Error::data("probe is not a repeated-segment sequence"));
        };
        let (logits, _) = model.forward(&probe.tokens, false)?;
        let v = model.config().vocab_size;
        let nll = |pos: usize| -> f64 {
            // loss of predicting token `pos` from position `pos - 1`
            let row = &logits.data()[(pos - 1) * v..pos * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = max + Float::ln(row.iter().map(|x| Float::exp(x.as_f64() - max)).sum::<f64>());
            lse - row[probe.tokens[pos] as usize].as_f64()
        };
        for i in 1..len {
            first += nll(a + i);
            second += nll(b + i);
        }
        n1 += len - 1;
        n2 += len - 1;
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::data("no repeated segments to measure"));
    }
    Ok(InductionSignature {
        first_loss: first / n1 as f64,
        second_loss: second / n2 as f64,
    })
}
