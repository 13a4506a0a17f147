//! Decoder-only transformer with per-head attention capture.
//!
//! Pre-norm blocks, learned positional embeddings, GELU MLP with a 4x
//! hidden width, no linear biases, and an output projection tied to the
//! token embedding. Linear weights are stored `[d_in, d_out]` and applied
//! as `x · W`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::rng;
use crate::tape::{HeadLayout, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 2 * d + 2 * 4 * d * d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }
}

/// Role of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParamKind {
    TokenEmbedding,
    PositionEmbedding,
    AttnNormGain,
    AttnNormBias,
    Query,
    Key,
    Value,
    Output,
    MlpNormGain,
    MlpNormBias,
    MlpIn,
    MlpOut,
    FinalNormGain,
    FinalNormBias,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::TokenEmbedding => "tok_emb",
            ParamKind::PositionEmbedding => "pos_emb",
            ParamKind::AttnNormGain => "ln1_gain",
            ParamKind::AttnNormBias => "ln1_bias",
            ParamKind::Query => "w_q",
            ParamKind::Key => "w_k",
            ParamKind::Value => "w_v",
            ParamKind::Output => "w_o",
            ParamKind::MlpNormGain => "ln2_gain",
            ParamKind::MlpNormBias => "ln2_bias",
            ParamKind::MlpIn => "mlp_in",
            ParamKind::MlpOut => "mlp_out",
            ParamKind::FinalNormGain => "lnf_gain",
            ParamKind::FinalNormBias => "lnf_bias",
        }
    }

    pub fn is_query_or_key(self) -> bool {
        matches!(self, ParamKind::Query | ParamKind::Key)
    }
}

const LAYER_KINDS: [ParamKind; 10] = [
    ParamKind::AttnNormGain,
    ParamKind::AttnNormBias,
    ParamKind::Query,
    ParamKind::Key,
    ParamKind::Value,
    ParamKind::Output,
    ParamKind::MlpNormGain,
    ParamKind::MlpNormBias,
    ParamKind::MlpIn,
    ParamKind::MlpOut,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamInfo {
    pub kind: ParamKind,
    pub layer: Option<usize>,
}

impl ParamInfo {
    pub fn name(&self) -> String {
        match self.layer {
            Some(l) => format!("layers.{l}.{}", self.kind.name()),
            None => String::from(self.kind.name()),
        }
    }
}

/// Canonical tensor order and shapes for a configuration.
pub fn param_layout(config: &ModelConfig) -> Vec<(ParamInfo, Vec<usize>)> {
    let d = config.d_model;
    let global = |kind| ParamInfo { kind, layer: None };
    let mut out = vec![
        (global(ParamKind::TokenEmbedding), vec![config.vocab_size, d]),
        (global(ParamKind::PositionEmbedding), vec![config.max_seq_len, d]),
    ];
    for l in 0..config.n_layers {
        for kind in LAYER_KINDS {
            let shape = match kind {
                ParamKind::MlpIn => vec![d, 4 * d],
                ParamKind::MlpOut => vec![4 * d, d],
                ParamKind::Query | ParamKind::Key | ParamKind::Value | ParamKind::Output => vec![d, d],
                _ => vec![d],
            };
            out.push((ParamInfo { kind, layer: Some(l) }, shape));
        }
    }
    out.push((global(ParamKind::FinalNormGain), vec![d]));
    out.push((global(ParamKind::FinalNormBias), vec![d]));
    out
}

/// Which tensors receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Trainable {
    QkOnly,
    All,
    None,
}

/// Final-row attention of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture<T = f32> {
    pub layer: usize,
    pub head: usize,
    pub alpha: Vec<T>,
}

impl<T> AttentionCapture<T> {
    pub fn n_t(&self) -> usize {
        self.alpha.len()
    }
}

/// Which logits a recorded forward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Logits {
    /// `[batch * seq, vocab]`.
    All,
    /// Final position only, `[batch, vocab]`.
    Last,
    /// Skip the output head (and everything after the last attention).
    None,
}

/// Handles produced by [`TransformerModel::record`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Option<Var>,
    /// Per layer, `[batch * n_heads, seq]` final-row attention.
    pub last_rows: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    info: Vec<ParamInfo>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Scaled-normal initialization: std 0.02, with `w_o`/`mlp_out` scaled
    /// by `1/sqrt(2 * n_layers)`; norm gains 1 and biases 0.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::INIT);
        let base = Normal::new(0.0f64, 0.02).expect("valid std");
        let resid = 1.0 / libm_sqrt(2.0 * config.n_layers as f64);
        let mut params = Vec::new();
        let mut info = Vec::new();
        for (pi, shape) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match pi.kind {
                ParamKind::AttnNormGain | ParamKind::MlpNormGain | ParamKind::FinalNormGain => vec![T::one(); n],
                ParamKind::AttnNormBias | ParamKind::MlpNormBias | ParamKind::FinalNormBias => vec![T::zero(); n],
                kind => {
                    let s = if matches!(kind, ParamKind::Output | ParamKind::MlpOut) { resid } else { 1.0 };
                    (0..n).map(|_| T::from_f64_lossy(base.sample(&mut rng) * s)).collect()
                }
            };
            params.push(Tensor::new(shape, data)?);
            info.push(pi);
        }
        Ok(Self { config, params, info })
    }

    /// Assembles a model from tensors in canonical order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((_, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "from_params",
                    lhs: shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let info = layout.into_iter().map(|(i, _)| i).collect();
        Ok(Self { config, params, info })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_index(&self, kind: ParamKind, layer: Option<usize>) -> Option<usize> {
        self.info.iter().position(|i| i.kind == kind && i.layer == layer)
    }

    pub fn restrict_trainable(&mut self, mode: Trainable) {
        for (p, info) in self.params.iter_mut().zip(&self.info) {
            let on = match mode {
                Trainable::QkOnly => info.kind.is_query_or_key(),
                Trainable::All => true,
                Trainable::None => false,
            };
            p.set_trainable(on);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.is_trainable()).count()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config,
            params: self.params.iter().map(Tensor::cast).collect(),
            info: self.info.clone(),
        }
    }

    fn check_tokens(&self, batch: &[&[TokenId]]) -> Result<usize> {
        let first = batch.first().ok_or_else(|| Error::contract("empty batch"))?;
        let seq = first.len();
        if seq == 0 {
            return Err(Error::contract("empty token sequence"));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::Length {
                len: seq,
                max: self.config.max_seq_len,
            });
        }
        for s in batch {
            if s.len() != seq {
                return Err(Error::contract(format!(
                    "batched sequences must share a length ({} vs {seq})",
                    s.len()
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Index {
                    what: "token",
                    index: bad as usize,
                    bound: self.config.vocab_size,
                });
            }
        }
        Ok(seq)
    }

    /// Records a forward pass over equal-length sequences on `tape`.
    pub fn record<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        batch: &[&[TokenId]],
        logits: Logits,
        capture: bool,
    ) -> Result<ForwardVars> {
        let seq = self.check_tokens(batch)?;
        let b = batch.len();
        let cfg = &self.config;
        let p: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t))
            .collect();
        let layer = |l: usize, kind: ParamKind| {
            let off = LAYER_KINDS.iter().position(|&k| k == kind).unwrap();
            p[2 + l * LAYER_KINDS.len() + off]
        };
        let tok = p[0];
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let pos: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let te = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(p[1], &pos)?;
        let mut h = tape.add(te, pe)?;
        let layout = HeadLayout {
            batch: b,
            seq,
            heads: cfg.n_heads,
            d_model: cfg.d_model,
        };
        let mut last_rows = Vec::new();
        for l in 0..cfg.n_layers {
            let a = tape.layer_norm(h, layer(l, ParamKind::AttnNormGain), layer(l, ParamKind::AttnNormBias))?;
            let q = tape.matmul(a, layer(l, ParamKind::Query))?;
            let k = tape.matmul(a, layer(l, ParamKind::Key))?;
            let scores = tape.head_scores(q, k, layout)?;
            let probs = tape.row_softmax_masked(scores, true)?;
            if capture {
                last_rows.push(tape.last_rows(probs)?);
            }
            if l + 1 == cfg.n_layers && logits == Logits::None {
                break;
            }
            let v = tape.matmul(a, layer(l, ParamKind::Value))?;
            let mixed = tape.head_mix(probs, v, layout)?;
            let o = tape.matmul(mixed, layer(l, ParamKind::Output))?;
            h = tape.add(h, o)?;
            let m = tape.layer_norm(h, layer(l, ParamKind::MlpNormGain), layer(l, ParamKind::MlpNormBias))?;
            let m = tape.matmul(m, layer(l, ParamKind::MlpIn))?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, layer(l, ParamKind::MlpOut))?;
            h = tape.add(h, m)?;
        }
        let n = p.len();
        let logits = match logits {
            Logits::None => None,
            Logits::All => {
                let hf = tape.layer_norm(h, p[n - 2], p[n - 1])?;
                Some(tape.matmul_nt(hf, tok)?)
            }
            Logits::Last => {
                let rows: Vec<usize> = (0..b).map(|i| i * seq + seq - 1).collect();
                let hl = tape.select_rows(h, &rows)?;
                let hf = tape.layer_norm(hl, p[n - 2], p[n - 1])?;
                Some(tape.matmul_nt(hf, tok)?)
            }
        };
        Ok(ForwardVars {
            logits,
            last_rows,
            batch: b,
            seq,
        })
    }

    /// Captures of batch element `index`, ordered by (layer, head).
    pub fn captures(&self, tape: &Tape<'_, T>, vars: &ForwardVars, index: usize) -> Vec<AttentionCapture<T>> {
        let h = self.config.n_heads;
        let seq = vars.seq;
        let mut out = Vec::with_capacity(self.config.total_heads());
        for (layer, &rows) in vars.last_rows.iter().enumerate() {
            let v = tape.value(rows);
            for head in 0..h {
                let start = (index * h + head) * seq;
                out.push(AttentionCapture {
                    layer,
                    head,
                    alpha: v[start..start + seq].to_vec(),
                });
            }
        }
        out
    }

    /// Forward evaluation of one sequence: logits `[n_t, vocab]` and, when
    /// `capture` is set, one capture per head ordered by (layer, head).
    pub fn forward(&self, tokens: &[TokenId], capture: bool) -> Result<(Tensor<T>, Vec<AttentionCapture<T>>)> {
        let mut tape = Tape::inference();
        let vars = self.record(&mut tape, &[tokens], Logits::All, capture)?;
        let logits = tape.to_tensor(vars.logits.expect("requested"));
        let caps = if capture { self.captures(&tape, &vars, 0) } else { Vec::new() };
        Ok((logits, caps))
    }

    /// Final-position logits for equal-length sequences, `[batch, vocab]`.
    pub fn final_logits(&self, batch: &[&[TokenId]]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let vars = self.record(&mut tape, batch, Logits::Last, false)?;
        Ok(tape.to_tensor(vars.logits.expect("requested")))
    }

    /// Predicted class for one ICL prompt: the label token with the largest
    /// final-position logit.
    pub fn predict_label(&self, tokens: &[TokenId], label_tokens: &[TokenId]) -> Result<usize> {
        if label_tokens.is_empty() {
            return Err(Error::contract("empty label set"));
        }
        let logits = self.final_logits(&[tokens])?;
        Ok(argmax_label(logits.data(), label_tokens))
    }

    /// Predicted classes for many prompts; prompts are grouped by length and
    /// evaluated in chunks of at most `chunk`.
    pub fn predict_many(&self, prompts: &[&[TokenId]], label_tokens: &[TokenId], chunk: usize) -> Result<Vec<usize>> {
        if label_tokens.is_empty() {
            return Err(Error::contract("empty label set"));
        }
        let mut out = vec![0usize; prompts.len()];
        for group in group_by_length(prompts) {
            for part in group.chunks(chunk.max(1)) {
                let seqs: Vec<&[TokenId]> = part.iter().map(|&i| prompts[i]).collect();
                let logits = self.final_logits(&seqs)?;
                let v = self.config.vocab_size;
                for (row, &i) in part.iter().enumerate() {
                    out[i] = argmax_label(&logits.data()[row * v..(row + 1) * v], label_tokens);
                }
            }
        }
        Ok(out)
    }
}

/// Indices of `seqs` grouped by sequence length (groups ordered by length,
/// indices ascending within a group).
pub fn group_by_length(seqs: &[&[TokenId]]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| (seqs[i].len(), i));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if seqs[g[0]].len() == seqs[i].len() => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Index into `label_tokens` of the largest logit; ties go to the lowest
/// token id.
pub fn argmax_label<T: Scalar>(logits: &[T], label_tokens: &[TokenId]) -> usize {
    let mut best = 0;
    for (c, &tok) in label_tokens.iter().enumerate().skip(1) {
        let (cur, bt) = (logits[tok as usize], logits[label_tokens[best] as usize]);
        if cur > bt || (cur == bt && tok < label_tokens[best]) {
            best = c;
        }
    }
    best
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            vocab_size: 64,
            max_seq_len: 128,
            seed: 11,
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        let m = TransformerModel::<f32>::init(small()).unwrap();
        // hand formula: V*d + S*d + L*(12 d^2 + 4 d) + 2 d
        let (v, s, l, d) = (64, 128, 2, 32);
        let hand = v * d + s * d + l * (12 * d * d + 4 * d) + 2 * d;
        assert_eq!(hand, 31_040);
        assert_eq!(m.parameter_count(), hand);
        assert_eq!(small().parameter_count(), hand);
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerModel::<f32>::init(small()).unwrap();
        let b = TransformerModel::<f32>::init(small()).unwrap();
        assert_eq!(a, b);
        let c = TransformerModel::<f32>::init(ModelConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { d_model: 30, n_heads: 4, ..small() };
        assert!(matches!(TransformerModel::<f32>::init(cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn restrict_modes() {
        let mut m = TransformerModel::<f32>::init(small()).unwrap();
        m.restrict_trainable(Trainable::QkOnly);
        assert_eq!(m.trainable_count(), 2 * 2);
        for (p, i) in m.params().iter().zip(m.info()) {
            assert_eq!(p.is_trainable(), i.kind.is_query_or_key());
        }
        m.restrict_trainable(Trainable::All);
        assert_eq!(m.trainable_count(), m.params().len());
        m.restrict_trainable(Trainable::None);
        assert_eq!(m.trainable_count(), 0);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = TransformerModel::<f32>::init(small()).unwrap();
        let (logits, caps) = m.forward(&[5], true).unwrap();
        assert_eq!(logits.shape(), &[1, 64]);
        assert_eq!(caps.len(), 4);
        for c in caps {
            assert_eq!(c.alpha, vec![1.0]);
        }
    }

    #[test]
    fn captures_sum_to_one_in_order() {
        let m = TransformerModel::<f32>::init(small()).unwrap();
        let toks: Vec<u32> = (0..20).map(|i| (i * 7 % 64) as u32).collect();
        let (_, caps) = m.forward(&toks, true).unwrap();
        let ids: Vec<(usize, usize)> = caps.iter().map(|c| (c.layer, c.head)).collect();
        assert_eq!(ids, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        for c in caps {
            assert_eq!(c.n_t(), 20);
            let s: f32 = c.alpha.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(c.alpha.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn overlong_sequence_rejected() {
        let m = TransformerModel::<f32>::init(ModelConfig { max_seq_len: 4, ..small() }).unwrap();
        assert_eq!(m.forward(&[1, 2, 3, 4, 5], false).unwrap_err(), Error::Length { len: 5, max: 4 });
    }

    #[test]
    fn argmax_and_ties() {
        let mut logits = vec![0.0f32; 10];
        logits[7] = 10.0;
        assert_eq!(argmax_label(&logits, &[3, 7, 9]), 1);
        let mut tie = vec![0.0f32; 10];
        tie[8] = 2.0;
        tie[4] = 2.0;
        // labels listed with the higher token first: tie must go to token 4
        assert_eq!(argmax_label(&tie, &[8, 4]), 1);
        assert_eq!(argmax_label(&tie, &[4, 8]), 0);
    }

    #[test]
    fn empty_label_set_is_contract_error() {
        let m = TransformerModel::<f32>::init(small()).unwrap();
        assert!(matches!(m.predict_label(&[1, 2], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn batched_last_logits_match_single() {
        let m = TransformerModel::<f64>::init(small()).unwrap();
        let a: Vec<u32> = vec![1, 2, 3, 4, 5];
        let b: Vec<u32> = vec![9, 8, 7, 6, 5];
        let both = m.final_logits(&[&a, &b]).unwrap();
        let (la, _) = m.forward(&a, false).unwrap();
        let (lb, _) = m.forward(&b, false).unwrap();
        let v = 64;
        for j in 0..v {
            assert!((both.data()[j] - la.data()[4 * v + j]).abs() < 1e-12);
            assert!((both.data()[v + j] - lb.data()[4 * v + j]).abs() < 1e-12);
        }
    }
}
