//! Training loops: ABFT on query/key projections, the end-to-end baseline,
//! and causal-LM pretraining.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use num_traits::Float;
use rand::Rng;

use crate::abft::{sample_loss, AbftConfig, HeadFilter, PidState};
use crate::data::corpus::CorpusSequence;
use crate::data::IclSample;
use crate::model::{group_by_length, Logits, Trainable, TransformerModel};
use crate::optim::{clip_grad_norm, AdamConfig, AdamState};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Scalar;
use crate::{Error, Result, TokenId};

/// Source of elapsed wall time for run logs.
pub trait Stopwatch {
    fn elapsed_ms(&mut self) -> f64;
}

/// Always reports zero, for byte-reproducible logs.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Stopwatch for NoClock {
    fn elapsed_ms(&mut self) -> f64 {
        0.0
    }
}

#[cfg(feature = "std")]
#[derive(Debug, Clone, Copy)]
pub struct WallClock(std::time::Instant);

#[cfg(feature = "std")]
impl WallClock {
    pub fn start() -> Self {
        Self(std::time::Instant::now())
    }
}

#[cfg(feature = "std")]
impl Stopwatch for WallClock {
    fn elapsed_ms(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub mean_loss: f64,
    pub mean_induction_count: f64,
    /// Loss factors used for this step (`None` for the E2E baseline).
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// Wall time spent in this step.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_induction_count).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }
}

/// Draws pseudo-batches in a shuffled order, reshuffling after each pass.
struct Epochs {
    order: Vec<usize>,
    pos: usize,
}

impl Epochs {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_trainable<T: Scalar>(model: &TransformerModel<T>, mode: Trainable) -> Result<()> {
    let ok = model.params().iter().zip(model.info()).all(|(p, info)| {
        let want = match mode {
            Trainable::QkOnly => info.kind.is_query_or_key(),
            Trainable::All => true,
            Trainable::None => false,
        };
        p.is_trainable() == want
    });
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!("model trainability must be {mode:?} before this training loop")))
    }
}

/// Records the ABFT objective for one equal-length group on `tape`.
///
/// Returns the loss variable (sum over samples and contributing heads), the
/// summed sample losses, and the summed induction counts.
fn record_abft_group<'p, T: Scalar>(
    model: &'p TransformerModel<T>,
    tape: &mut Tape<'p, T>,
    samples: &[&IclSample],
    filter: HeadFilter,
    a: f64,
    b: f64,
) -> Result<(Var, f64, usize)> {
    let seqs: Vec<&[TokenId]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let vars = model.record(tape, &seqs, Logits::None, true)?;
    let heads = model.config().n_heads;
    let seq = vars.seq;
    let mut weights: Vec<Vec<T>> = vars.last_rows.iter().map(|_| vec![T::zero(); samples.len() * heads * seq]).collect();
    let mut constant = 0.0;
    let mut loss_sum = 0.0;
    let mut count = 0;
    for (i, sample) in samples.iter().enumerate() {
        let caps = model.captures(tape, &vars, i);
        let sl = sample_loss(&caps, sample, filter, a, b)?;
        loss_sum += sl.total;
        count += sl.induction_count;
        for r in sl.reports.iter().filter(|r| r.contributes(filter)) {
            let row = &mut weights[r.layer][(i * heads + r.head) * seq..][..seq];
            for &p in &sample.negative {
                row[p] = T::from_f64_lossy(a);
            }
            for &p in &sample.positive {
                row[p] = T::from_f64_lossy(-b);
            }
            constant += b * sample.positive.len() as f64;
        }
    }
    let mut total: Option<Var> = None;
    for (rows, w) in vars.last_rows.iter().zip(weights) {
        let d = tape.dot(*rows, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    let total = total.ok_or_else(|| Error::contract("model has no attention layers"))?;
    let total = tape.add_scalar(total, T::from_f64_lossy(constant))?;
    Ok((total, loss_sum, count))
}

/// Gradient of the summed ABFT loss over equal-length prompts, with the
/// summed loss and induction count.
pub fn abft_gradients<T: Scalar>(
    model: &TransformerModel<T>,
    samples: &[&IclSample],
    filter: HeadFilter,
    a: f64,
    b: f64,
) -> Result<(Gradients<T>, f64, usize)> {
    let mut tape = Tape::new();
    let (loss, l, c) = record_abft_group(model, &mut tape, samples, filter, a, b)?;
    Ok((tape.backward(loss)?, l, c))
}

/// Mean ABFT loss and mean induction count over `samples`, without
/// touching gradients.
pub fn abft_objective<T: Scalar>(model: &TransformerModel<T>, samples: &[IclSample], filter: HeadFilter, a: f64, b: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::data("empty sample set"));
    }
    let seqs: Vec<&[TokenId]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let (mut loss, mut count) = (0.0, 0usize);
    for group in group_by_length(&seqs) {
        for part in group.chunks(64) {
            let batch: Vec<&IclSample> = part.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::inference();
            let (_, l, c) = record_abft_group(model, &mut tape, &batch, filter, a, b)?;
            loss += l;
            count += c;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, count as f64 / n))
}

/// ABFT fine-tuning.
///
/// Each step draws `n_b` prompts (wrapping around the dataset with a fresh
/// shuffle when it runs out), sums the attention loss over contributing
/// heads per prompt, averages gradients over the pseudo-batch and takes one
/// Adam step on the query/key projections. The punish factor then follows
/// the PID controller when enabled.
pub fn train_abft<T: Scalar, R: Rng + ?Sized>(
    model: &mut TransformerModel<T>,
    data: &[IclSample],
    cfg: &AbftConfig,
    rng: &mut R,
    clock: &mut dyn Stopwatch,
) -> Result<RunLog> {
    cfg.validate()?;
    check_trainable(model, Trainable::QkOnly)?;
    if data.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let filter = cfg.filter();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut epochs = Epochs::new(data.len(), rng);
    let mut pid = PidState::new(cfg.a0);
    let b = cfg.b0;
    let mut log = RunLog::default();
    let scale = T::from_f64_lossy(1.0 / cfg.n_b as f64);
    for step in 1..=cfg.n_steps {
        let start = clock.elapsed_ms();
        let a = pid.a();
        let idx = epochs.next_batch(cfg.n_b, rng);
        let batch: Vec<&IclSample> = idx.iter().map(|&i| &data[i]).collect();
        let seqs: Vec<&[TokenId]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
        let (mut loss_sum, mut count) = (0.0, 0usize);
        model.zero_grad();
        for group in group_by_length(&seqs) {
            let members: Vec<&IclSample> = group.iter().map(|&i| batch[i]).collect();
            let (grads, l, c) = abft_gradients(model, &members, filter, a, b)?;
            loss_sum += l;
            count += c;
            grads.accumulate_into(model.params_mut(), scale)?;
        }
        adam.step(model.params_mut())?;
        let n_bar = count as f64 / cfg.n_b as f64;
        if cfg.pid_enabled {
            pid.update(n_bar, cfg.gains);
        }
        log.records.push(StepRecord {
            step,
            mean_loss: loss_sum / cfg.n_b as f64,
            mean_induction_count: n_bar,
            a: Some(a),
            b: Some(b),
            wall_ms: clock.elapsed_ms() - start,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct E2eConfig {
    pub lr: f64,
    pub n_b: usize,
    pub n_steps: usize,
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            n_b: 32,
            n_steps: 32,
        }
    }
}

/// End-to-end baseline: cross-entropy on the query's label token at the
/// final position, all parameters trainable, same pseudo-batch schedule.
/// The induction count column is measured with the standard filter.
pub fn train_e2e<T: Scalar, R: Rng + ?Sized>(
    model: &mut TransformerModel<T>,
    data: &[IclSample],
    label_tokens: &[TokenId],
    cfg: &E2eConfig,
    rng: &mut R,
    clock: &mut dyn Stopwatch,
) -> Result<RunLog> {
    check_trainable(model, Trainable::All)?;
    if data.is_empty() {
        return Err(Error::data("empty training set"));
    }
    if cfg.n_b == 0 {
        return Err(Error::config("n_b", "must be positive"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config("lr", "must be positive"));
    }
    let filter = HeadFilter::standard();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut epochs = Epochs::new(data.len(), rng);
    let mut log = RunLog::default();
    for step in 1..=cfg.n_steps {
        let start = clock.elapsed_ms();
        let idx = epochs.next_batch(cfg.n_b, rng);
        let batch: Vec<&IclSample> = idx.iter().map(|&i| &data[i]).collect();
        let seqs: Vec<&[TokenId]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
        let (mut loss_sum, mut count) = (0.0, 0usize);
        model.zero_grad();
        for group in group_by_length(&seqs) {
            let members: Vec<&IclSample> = group.iter().map(|&i| batch[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let gseqs: Vec<&[TokenId]> = members.iter().map(|s| s.tokens.as_slice()).collect();
                let vars = model.record(&mut tape, &gseqs, Logits::Last, true)?;
                let targets = members
                    .iter()
                    .map(|s| {
                        label_tokens.get(s.query_class).map(|&t| Some(t as usize)).ok_or(Error::Index {
                            what: "query class",
                            index: s.query_class,
                            bound: label_tokens.len(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (i, s) in members.iter().enumerate() {
                    count += sample_loss(&model.captures(&tape, &vars, i), s, filter, 0.0, 0.0)?.induction_count;
                }
                let ce = tape.cross_entropy(vars.logits.expect("requested"), &targets)?;
                // mean over the group, reweighted to a pseudo-batch mean
                let g = members.len() as f64;
                loss_sum += tape.value(ce)[0].as_f64() * g;
                let ce = tape.scale(ce, T::from_f64_lossy(g / cfg.n_b as f64))?;
                tape.backward(ce)?
            };
            grads.accumulate_into(model.params_mut(), T::one())?;
        }
        adam.step(model.params_mut())?;
        log.records.push(StepRecord {
            step,
            mean_loss: loss_sum / cfg.n_b as f64,
            mean_induction_count: count as f64 / cfg.n_b as f64,
            a: None,
            b: None,
            wall_ms: clock.elapsed_ms() - start,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PretrainSchedule {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f64,
    /// Step budget; `None` means one pass over the corpus.
    pub max_steps: Option<usize>,
    pub eval_every: usize,
    /// Held-out evaluations without improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub clip_norm: f64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            max_steps: None,
            eval_every: 100,
            patience: 5,
            min_delta: 1e-3,
            clip_norm: 1.0,
        }
    }
}

impl PretrainSchedule {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + Float::cos(core::f64::consts::PI * progress));
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPoint {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub heldout_loss: f64,
    /// `ln V`, the loss of a uniform predictor.
    pub uniform_bound: f64,
    pub stopped_early: bool,
    pub curve: Vec<PretrainPoint>,
}

/// Mean next-token cross-entropy over `seqs`.
pub fn lm_loss<T: Scalar>(model: &TransformerModel<T>, seqs: &[&[TokenId]], chunk: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::data("empty held-out set"));
    }
    let (mut total, mut rows) = (0.0, 0usize);
    for group in group_by_length(seqs) {
        for part in group.chunks(chunk.max(1)) {
            let batch: Vec<&[TokenId]> = part.iter().map(|&i| seqs[i]).collect();
            let (inputs, targets) = shift(&batch)?;
            let mut tape = Tape::inference();
            let vars = model.record(&mut tape, &inputs, Logits::All, false)?;
            let ce = tape.cross_entropy(vars.logits.expect("requested"), &targets)?;
            total += tape.value(ce)[0].as_f64() * targets.len() as f64;
            rows += targets.len();
        }
    }
    Ok(total / rows as f64)
}

fn shift<'a>(batch: &[&'a [TokenId]]) -> Result<(Vec<&'a [TokenId]>, Vec<Option<usize>>)> {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for s in batch {
        if s.len() < 2 {
            return Err(Error::data("sequence too short for next-token training"));
        }
        inputs.push(&s[..s.len() - 1]);
        targets.extend(s[1..].iter().map(|&t| Some(t as usize)));
    }
    Ok((inputs, targets))
}

/// Next-token pretraining with linear warmup, cosine decay, gradient
/// clipping and early stopping on held-out loss. All parameters are made
/// trainable.
pub fn pretrain<T: Scalar>(
    model: &mut TransformerModel<T>,
    corpus: &[CorpusSequence],
    heldout: &[CorpusSequence],
    schedule: &PretrainSchedule,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::data("empty pretraining corpus"));
    }
    if schedule.batch_size == 0 || schedule.eval_every == 0 {
        return Err(Error::config("batch_size", "batch_size and eval_every must be positive"));
    }
    model.restrict_trainable(Trainable::All);
    let per_pass = corpus.len().div_ceil(schedule.batch_size);
    let total = schedule.max_steps.unwrap_or(per_pass);
    let held: Vec<&[TokenId]> = heldout.iter().map(|s| s.tokens.as_slice()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(schedule.lr), model.params());
    let mut curve = Vec::new();
    let (mut best, mut stale, mut stopped_early) = (f64::INFINITY, 0usize, false);
    let mut last_held = None;
    let mut steps = 0;
    for step in 0..total {
        let start = (step % per_pass) * schedule.batch_size;
        let end = (start + schedule.batch_size).min(corpus.len());
        let batch: Vec<&[TokenId]> = corpus[start..end].iter().map(|s| s.tokens.as_slice()).collect();
        model.zero_grad();
        let mut train_loss = 0.0;
        let n_rows: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
        for group in group_by_length(&batch) {
            let members: Vec<&[TokenId]> = group.iter().map(|&i| batch[i]).collect();
            let grads = {
                let (inputs, targets) = shift(&members)?;
                let mut tape = Tape::new();
                let vars = model.record(&mut tape, &inputs, Logits::All, false)?;
                let ce = tape.cross_entropy(vars.logits.expect("requested"), &targets)?;
                let w = targets.len() as f64 / n_rows as f64;
                train_loss += tape.value(ce)[0].as_f64() * w;
                let ce = tape.scale(ce, T::from_f64_lossy(w))?;
                tape.backward(ce)?
            };
            grads.accumulate_into(model.params_mut(), T::one())?;
        }
        clip_grad_norm(model.params_mut(), schedule.clip_norm);
        adam.step_with_lr(model.params_mut(), schedule.lr_at(step, total))?;
        steps = step + 1;
        let eval_now = !held.is_empty() && (steps % schedule.eval_every == 0 || steps == total);
        let heldout_loss = if eval_now { Some(lm_loss(model, &held, 64)?) } else { None };
        curve.push(PretrainPoint {
            step: steps,
            train_loss,
            heldout_loss,
        });
        if let Some(h) = heldout_loss {
            last_held = Some(h);
            if h < best - schedule.min_delta {
                best = h;
                stale = 0;
            } else {
                stale += 1;
                if stale >= schedule.patience && steps < total {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let heldout_loss = match last_held {
        Some(h) => h,
        None if held.is_empty() => f64::NAN,
        None => lm_loss(model, &held, 64)?,
    };
    Ok(PretrainReport {
        steps,
        heldout_loss,
        uniform_bound: Float::ln(model.config().vocab_size as f64),
        stopped_early,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_wrap_with_every_index_per_pass() {
        let mut r = crate::rng::stream(3, "t");
        let mut e = Epochs::new(5, &mut r);
        let first = e.next_batch(5, &mut r);
        let mut sorted = first.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let mut second = e.next_batch(3, &mut r);
        second.extend(e.next_batch(2, &mut r));
        second.sort_unstable();
        assert_eq!(second, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn warmup_then_cosine() {
        let s = PretrainSchedule {
            warmup_steps: 10,
            lr: 1.0,
            min_lr_ratio: 0.1,
            ..Default::default()
        };
        assert!((s.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(100, 100) - 0.1).abs() < 1e-12);
    }
}
