//! Induction-head filter, the punish/reward attention loss and PID balancing
//! of the punish factor.
//!
//! For a head whose final-row attention is `alpha` over a prompt of length
//! `n_t` with `k` label positions `I`:
//!
//! - score `S = Σ_{j∈I} alpha_j`
//! - threshold `T = k / (k + log n_t)`; the head counts as an induction
//!   head iff `S > T`
//! - loss `L = A Σ_{i∈I-} alpha_i + B Σ_{i∈I+} (1 - alpha_i)` for induction
//!   heads and `0` otherwise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use num_traits::Float;

use crate::data::IclSample;
use crate::model::AttentionCapture;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Logarithm used in the induction threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => Float::ln(x),
            LogBase::Ten => Float::log10(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PidGains {
    pub cp: f64,
    pub ci: f64,
    pub cd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            cp: 0.03,
            ci: 0.005,
            cd: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AbftConfig {
    pub a0: f64,
    pub b0: f64,
    pub lr: f64,
    /// Pseudo-batch size: gradients are averaged over this many prompts
    /// before each optimizer step.
    pub n_b: usize,
    pub n_steps: usize,
    pub k: usize,
    pub pid_enabled: bool,
    pub gains: PidGains,
    pub head_filter_enabled: bool,
    pub log_base: LogBase,
}

impl Default for AbftConfig {
    fn default() -> Self {
        Self {
            a0: 0.5,
            b0: 1.0,
            lr: 2e-5,
            n_b: 32,
            n_steps: 32,
            k: 4,
            pid_enabled: true,
            gains: PidGains::default(),
            head_filter_enabled: true,
            log_base: LogBase::Natural,
        }
    }
}

impl AbftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a0 >= 0.0) || !self.a0.is_finite() {
            return Err(Error::config("a0", "must be finite and >= 0"));
        }
        if !(self.b0 >= 0.0) || !self.b0.is_finite() {
            return Err(Error::config("b0", "must be finite and >= 0"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.n_b == 0 {
            return Err(Error::config("n_b", "must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        Ok(())
    }

    pub fn filter(&self) -> HeadFilter {
        HeadFilter {
            enabled: self.head_filter_enabled,
            log_base: self.log_base,
        }
    }
}

/// How heads are selected for the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadFilter {
    /// When false every head contributes (the induction count is still
    /// reported).
    pub enabled: bool,
    pub log_base: LogBase,
}

impl HeadFilter {
    pub fn standard() -> Self {
        Self {
            enabled: true,
            log_base: LogBase::Natural,
        }
    }
}

/// `S = Σ_{j∈I} alpha_j`, accumulated in `f64` in the order of `positions`.
pub fn induction_score<T: Scalar>(alpha: &[T], positions: &[usize]) -> Result<f64> {
    positions.iter().try_fold(0.0, |acc, &j| {
        alpha.get(j).map(|a| acc + a.as_f64()).ok_or(Error::Index {
            what: "label position",
            index: j,
            bound: alpha.len(),
        })
    })
}

/// `T = k / (k + log n_t)`.
pub fn induction_threshold(k: usize, n_t: usize, base: LogBase) -> f64 {
    debug_assert!(k >= 1 && n_t >= 2);
    let k = k as f64;
    k / (k + base.log(n_t as f64))
}

/// Strict `S > T`.
pub fn is_induction_head<T: Scalar>(alpha: &[T], positions: &[usize], k: usize, n_t: usize, base: LogBase) -> Result<bool> {
    Ok(induction_score(alpha, positions)? > induction_threshold(k, n_t, base))
}

fn check_loss_args(n: usize, positive: &[usize], negative: &[usize], a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0) || !(b >= 0.0) {
        return Err(Error::contract(format!("loss factors must be non-negative (A = {a}, B = {b})")));
    }
    if positive.iter().any(|p| negative.contains(p)) {
        return Err(Error::contract("I+ and I- overlap"));
    }
    if let Some(&bad) = positive.iter().chain(negative).find(|&&p| p >= n) {
        return Err(Error::Index {
            what: "label position",
            index: bad,
            bound: n,
        });
    }
    Ok(())
}

/// Value of the attention loss for one head.
pub fn abft_loss_value<T: Scalar>(alpha: &[T], positive: &[usize], negative: &[usize], a: f64, b: f64) -> Result<f64> {
    check_loss_args(alpha.len(), positive, negative, a, b)?;
    let punish: f64 = negative.iter().map(|&i| alpha[i].as_f64()).sum();
    let reward: f64 = positive.iter().map(|&i| 1.0 - alpha[i].as_f64()).sum();
    Ok(a * punish + b * reward)
}

/// Linear form of the loss over an attention row of length `n`:
/// `L = Σ w_i alpha_i + c` with `w = A` on `I-`, `-B` on `I+`, and
/// `c = B |I+|`.
pub fn abft_loss_weights<T: Scalar>(n: usize, positive: &[usize], negative: &[usize], a: f64, b: f64) -> Result<(Vec<T>, f64)> {
    check_loss_args(n, positive, negative, a, b)?;
    let mut w = vec![T::zero(); n];
    for &i in negative {
        w[i] = T::from_f64_lossy(a);
    }
    for &i in positive {
        w[i] = T::from_f64_lossy(-b);
    }
    Ok((w, b * positive.len() as f64))
}

/// Differentiable attention loss on a recorded attention row.
pub fn abft_loss<T: Scalar>(tape: &mut Tape<'_, T>, alpha: Var, positive: &[usize], negative: &[usize], a: f64, b: f64) -> Result<Var> {
    let n = tape.value(alpha).len();
    let (w, c) = abft_loss_weights::<T>(n, positive, negative, a, b)?;
    let lin = tape.dot(alpha, w)?;
    tape.add_scalar(lin, T::from_f64_lossy(c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLossReport {
    pub layer: usize,
    pub head: usize,
    pub is_induction: bool,
    pub score: f64,
    pub loss: f64,
    pub a: f64,
    pub b: f64,
}

impl HeadLossReport {
    /// Whether the head's loss enters the training objective.
    pub fn contributes(&self, filter: HeadFilter) -> bool {
        self.is_induction || !filter.enabled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub reports: Vec<HeadLossReport>,
    pub induction_count: usize,
}

/// Applies the head filter and the loss to every captured head of one
/// prompt. The total is the sum over contributing heads.
pub fn sample_loss<T: Scalar>(captures: &[AttentionCapture<T>], sample: &IclSample, filter: HeadFilter, a: f64, b: f64) -> Result<SampleLoss> {
    let k = sample.k();
    let n_t = sample.n_t();
    if k == 0 {
        return Err(Error::contract("prompt has no label positions"));
    }
    let threshold = induction_threshold(k, n_t, filter.log_base);
    let mut reports = Vec::with_capacity(captures.len());
    let mut total = 0.0;
    let mut count = 0;
    for cap in captures {
        if cap.alpha.len() != n_t {
            return Err(Error::Dimension {
                op: "sample_loss",
                lhs: vec![cap.alpha.len()],
                rhs: vec![n_t],
            });
        }
        let score = induction_score(&cap.alpha, &sample.label_positions)?;
        let is_induction = score > threshold;
        count += usize::from(is_induction);
        let loss = if is_induction || !filter.enabled {
            abft_loss_value(&cap.alpha, &sample.positive, &sample.negative, a, b)?
        } else {
            0.0
        };
        total += loss;
        reports.push(HeadLossReport {
            layer: cap.layer,
            head: cap.head,
            is_induction,
            score,
            loss,
            a,
            b,
        });
    }
    Ok(SampleLoss {
        total,
        reports,
        induction_count: count,
    })
}

/// Running state of the punish-factor controller.
///
/// `A_t = Cp (n_t - n_{t-1}) + Ci Σ_{i=2..t} (n_i - n_{i-1})
///      + Cd (n_t - 2 n_{t-1} + n_{t-2}) + A_{t-1}`, applied for `t > 2`
/// and clamped at zero. The sum telescopes to `n_t - n_1`, so the implied
/// setpoint is the first observed count.
#[derive(Debug, Clone, PartialEq)]
pub struct PidState {
    history: Vec<f64>,
    a: f64,
    integral: f64,
}

impl PidState {
    pub fn new(a0: f64) -> Self {
        Self {
            history: Vec::new(),
            a: a0,
            integral: 0.0,
        }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// The accumulated `Σ_{i=2..t} (n_i - n_{i-1})`.
    pub fn integral(&self) -> f64 {
        self.integral
    }

    /// Records `n_t` and returns the factor to use from now on.
    pub fn update(&mut self, n_bar: f64, gains: PidGains) -> f64 {
        self.history.push(n_bar);
        let t = self.history.len();
        if t >= 2 {
            self.integral += n_bar - self.history[t - 2];
        }
        if t > 2 {
            let (n1, n2) = (self.history[t - 2], self.history[t - 3]);
            let next = gains.cp * (n_bar - n1) + gains.ci * self.integral + gains.cd * (n_bar - 2.0 * n1 + n2) + self.a;
            self.a = next.max(0.0);
        }
        self.a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn threshold_worked_value() {
        let t = induction_threshold(4, 100, LogBase::Natural);
        assert!((t - 4.0 / (4.0 + 100f64.ln())).abs() < 1e-15);
        assert!((t - 0.46486).abs() < 5e-5);
        assert!((induction_threshold(4, 100, LogBase::Ten) - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_monotone_and_limit() {
        for n in [2usize, 10, 100, 1000] {
            for k in 1..20 {
                assert!(induction_threshold(k + 1, n, LogBase::Natural) > induction_threshold(k, n, LogBase::Natural));
                assert!(induction_threshold(k, n + 1, LogBase::Natural) < induction_threshold(k, n, LogBase::Natural));
            }
        }
        assert!(induction_threshold(1_000_000_000, 100, LogBase::Natural) > 1.0 - 1e-8);
    }

    #[test]
    fn uniform_score() {
        let alpha = vec![0.1f64; 10];
        assert!((induction_score(&alpha, &[2, 7]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(induction_score(&alpha, &[10]), Err(Error::Index { .. })));
    }

    #[test]
    fn one_hot_is_induction() {
        let mut alpha = vec![0.0f64; 30];
        alpha[5] = 1.0;
        assert!(is_induction_head(&alpha, &[5, 11], 2, 30, LogBase::Natural).unwrap());
    }

    #[test]
    fn boundary_is_not_induction() {
        // S == T exactly must fail the strict comparison. k = 1, n_t = e^1
        // is not an integer, so construct S to equal the computed T.
        let t = induction_threshold(1, 8, LogBase::Natural);
        let mut alpha = vec![0.0f64; 8];
        alpha[3] = t;
        alpha[0] = 1.0 - t;
        assert_eq!(induction_score(&alpha, &[3]).unwrap(), t);
        assert!(!is_induction_head(&alpha, &[3], 1, 8, LogBase::Natural).unwrap());
    }

    #[test]
    fn loss_worked_values() {
        let mut alpha = vec![0.0f64; 6];
        alpha[1] = 1.0;
        assert_eq!(abft_loss_value(&alpha, &[1], &[3], 0.5, 1.0).unwrap(), 0.0);

        let alpha = [0.2, 0.5, 0.1, 0.2];
        // A=0.5 on I- mass 0.3, B=1 on one I+ entry of 0.5
        let l = abft_loss_value(&alpha, &[1], &[2, 3], 0.5, 1.0).unwrap();
        assert!((l - 0.65).abs() < 1e-12);

        // no positives: punish term only
        let l = abft_loss_value(&alpha, &[], &[1, 2], 0.5, 1.0).unwrap();
        assert!((l - 0.5 * 0.6).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_args() {
        let alpha = [0.5f64, 0.5];
        assert!(matches!(abft_loss_value(&alpha, &[0], &[1], -0.1, 1.0), Err(Error::Contract(_))));
        assert!(matches!(abft_loss_value(&alpha, &[0], &[0], 0.5, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_gradient_signs() {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.variable(Tensor::new(vec![6], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1]).unwrap());
        let l = abft_loss(&mut tape, alpha, &[1, 4], &[2], 0.7, 1.3).unwrap();
        let expected = 0.7 * 0.3 + 1.3 * (0.8 + 0.8);
        assert!((tape.value(l)[0] - expected).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(alpha).unwrap(), &[0.0, -1.3, 0.7, 0.0, -1.3, 0.0]);
    }

    #[test]
    fn pid_constant_counts_noop() {
        let mut pid = PidState::new(0.5);
        for _ in 0..20 {
            assert_eq!(pid.update(7.25, PidGains::default()), 0.5);
        }
        assert_eq!(pid.integral(), 0.0);
    }

    #[test]
    fn pid_worked_value() {
        let mut pid = PidState::new(0.5);
        pid.update(10.0, PidGains::default());
        assert_eq!(pid.update(10.0, PidGains::default()), 0.5);
        let a3 = pid.update(12.0, PidGains::default());
        assert!((a3 - 0.58).abs() < 1e-12);
    }

    #[test]
    fn pid_clamps_at_zero() {
        let mut pid = PidState::new(0.05);
        for n in [10.0, 10.0, 0.0] {
            pid.update(n, PidGains::default());
        }
        assert_eq!(pid.a(), 0.0);
    }
}
