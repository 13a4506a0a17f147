//! Experiment stages as plain functions of a config. The CLI commands and
//! the acceptance suite both go through these.

use abft_core::analysis::{eval_accuracy, induction_signature, InductionSignature, TaskSet};
use abft_core::data::corpus::{build_pretrain_corpus, repeat_probe, CorpusConfig};
use abft_core::data::{build_test_set, build_training_set, IclSample, SplitPlan, TaskSpec};
use abft_core::model::{Trainable, TransformerModel};
use abft_core::rng;
use abft_core::train::{pretrain, train_abft, train_e2e, NoClock, PretrainReport, RunLog, Stopwatch, WallClock};

use crate::config::{ExperimentConfig, Method};
use crate::{LabError, Result};

const PROBE: &str = "probe";
const OOD: &str = "ood";

pub fn main_task(cfg: &ExperimentConfig) -> Result<TaskSpec> {
    let t = &cfg.task;
    Ok(cfg.world()?.task("main", &t.groups, &t.labels, t.input_len)?)
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub split: SplitPlan,
    pub train: Vec<IclSample>,
    pub test: Vec<IclSample>,
    /// Held-out prompts drawn like the test set, for the validation loss.
    pub val: Vec<IclSample>,
}

/// The main task's pools and prompt sets, all drawn from the data stream.
pub fn task_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    let spec = main_task(cfg)?;
    let t = &cfg.task;
    let max = cfg.model.max_seq_len;
    let mut r = rng::stream(cfg.seed, rng::DATA);
    let split = SplitPlan::generate(&spec, t.split, &mut r)?;
    let train = build_training_set(&spec, &split, t.n_train, t.k, max, &mut r)?;
    let test = build_test_set(&spec, &split, t.n_test, t.k, max, &mut r)?;
    let val = build_test_set(&spec, &split, t.n_val, t.k, max, &mut r)?;
    Ok(TaskData {
        spec,
        split,
        train,
        test,
        val,
    })
}

/// Test sets for the configured out-of-domain tasks.
pub fn ood_sets(cfg: &ExperimentConfig) -> Result<Vec<TaskSet>> {
    let world = cfg.world()?;
    let t = &cfg.task;
    let mut r = rng::stream(cfg.seed, OOD);
    t.ood
        .iter()
        .map(|o| {
            if o.groups.iter().any(|g| t.groups.contains(g)) || o.labels.iter().any(|l| t.labels.contains(l)) {
                return Err(LabError::config("task.ood", format!("task `{}` overlaps the fine-tuning task", o.name)));
            }
            let spec = world.task(o.name.clone(), &o.groups, &o.labels, t.input_len)?;
            let split = SplitPlan::generate(&spec, t.split, &mut r)?;
            let samples = build_test_set(&spec, &split, t.n_test, t.k, cfg.model.max_seq_len, &mut r)?;
            Ok(TaskSet {
                name: o.name.clone(),
                label_tokens: spec.label_tokens.clone(),
                samples,
            })
        })
        .collect()
}

/// Measurements deciding whether a pretrained model may be fine-tuned.
#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub signature: InductionSignature,
    pub icl_accuracy: f64,
    pub chance: f64,
}

impl GateReport {
    pub fn passes(&self) -> bool {
        self.signature.holds() && self.icl_accuracy > self.chance
    }

    pub fn diagnostic(&self) -> String {
        format!(
            "repeated-segment loss {:.4} -> {:.4} (must drop), ICL accuracy {:.4} (chance {:.4})",
            self.signature.first_loss, self.signature.second_loss, self.icl_accuracy, self.chance
        )
    }
}

pub fn gate(cfg: &ExperimentConfig, model: &TransformerModel<f32>) -> Result<GateReport> {
    let world = cfg.world()?;
    let mut r = rng::stream(cfg.seed, PROBE);
    let probes = repeat_probe(&world, &cfg.corpus, cfg.pretrain.probes, &mut r);
    let data = task_data(cfg)?;
    Ok(GateReport {
        signature: induction_signature(model, &probes)?,
        icl_accuracy: eval_accuracy(model, &data.test, &data.spec.label_tokens)?,
        chance: 1.0 / data.spec.n_classes() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: TransformerModel<f32>,
    pub report: PretrainReport,
    pub gate: GateReport,
}

impl PretrainOutcome {
    /// Held-out loss below the uniform bound and a passing gate.
    pub fn usable(&self) -> bool {
        self.report.heldout_loss < self.report.uniform_bound && self.gate.passes()
    }
}

pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let world = cfg.world()?;
    let mut r = rng::stream(cfg.seed, rng::CORPUS);
    let corpus = build_pretrain_corpus(&world, &cfg.corpus, &mut r)?;
    let held_cfg = CorpusConfig {
        n_sequences: cfg.pretrain.heldout,
        ..cfg.corpus.clone()
    };
    let heldout = if cfg.pretrain.heldout > 0 {
        build_pretrain_corpus(&world, &held_cfg, &mut r)?
    } else {
        Vec::new()
    };
    let mut model = TransformerModel::init(cfg.model_config())?;
    let report = pretrain(&mut model, &corpus, &heldout, &cfg.pretrain.schedule)?;
    let gate = gate(cfg, &model)?;
    Ok(PretrainOutcome { model, report, gate })
}

fn clock(cfg: &ExperimentConfig) -> Box<dyn Stopwatch> {
    if cfg.record_wall_time {
        Box::new(WallClock::start())
    } else {
        Box::new(NoClock)
    }
}

/// Fine-tunes a copy of `base` on the main task's training prompts.
pub fn run_finetune(cfg: &ExperimentConfig, base: &TransformerModel<f32>, method: Method) -> Result<(TransformerModel<f32>, RunLog)> {
    if base.config().vocab_size != cfg.world.vocab_size {
        return Err(LabError::Core(abft_core::Error::Contract(
            "base checkpoint vocabulary does not match the config".into(),
        )));
    }
    let data = task_data(cfg)?;
    let mut model = base.clone();
    let mut r = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut clock = clock(cfg);
    let log = match method {
        Method::Abft => {
            model.restrict_trainable(Trainable::QkOnly);
            train_abft(&mut model, &data.train, &cfg.abft, &mut r, clock.as_mut())?
        }
        Method::E2e => {
            model.restrict_trainable(Trainable::All);
            train_e2e(&mut model, &data.train, &data.spec.label_tokens, &cfg.e2e, &mut r, clock.as_mut())?
        }
    };
    model.restrict_trainable(Trainable::None);
    Ok((model, log))
}
