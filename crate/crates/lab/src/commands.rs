//! The `abft` subcommands. Each writes its artifacts into the output
//! directory and records them in the manifest.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use abft_core::analysis::{
    attention_heatmap, connectivity_grid, consistency_eval, count_induction_heads, eval_accuracy, eval_ood, layer_profile, shift_map,
    unseen_label_eval,
};
use abft_core::data::ingest::{ingest_labeled_text, IngestOptions};
use abft_core::data::{balanced_classes, build_icl_sample, IclSample, SampleBuilder, SplitPlan};
use abft_core::model::TransformerModel;
use abft_core::rng;
use abft_core::train::RunLog;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{Analysis, ExperimentConfig, Method};
use crate::export;
use crate::manifest::Manifest;
use crate::pipeline::{self, PretrainOutcome};
use crate::{LabError, Result};

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Common {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// An output directory plus the manifest being built for it.
struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
    hash: String,
    command: &'static str,
}

impl Outputs {
    fn open(cfg: &ExperimentConfig, command: &'static str) -> Result<Self> {
        let dir = cfg
            .out
            .clone()
            .ok_or_else(|| LabError::Usage("no output directory (use --out or `out` in the config)".into()))?;
        if !dir.exists() {
            std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
            eprintln!("created output directory {}", dir.display());
        }
        Ok(Self {
            manifest: Manifest::load(&dir)?,
            dir,
            hash: cfg.hash(),
            command,
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn record(&mut self, file: &str) {
        self.manifest.record(file, self.command, &self.hash);
    }

    fn finish(self) -> Result<Vec<PathBuf>> {
        self.manifest.save(&self.dir)?;
        Ok(self.manifest.entries.iter().map(|e| self.dir.join(&e.file)).collect())
    }
}

fn meta(cfg: &ExperimentConfig, stage: &str, model: &TransformerModel<f32>) -> CheckpointMeta {
    CheckpointMeta {
        stage: stage.to_string(),
        config_hash: cfg.hash(),
        model: *model.config(),
        // the output directory is not part of the experiment
        experiment: ExperimentConfig { out: None, ..cfg.clone() },
    }
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    stopped_early: bool,
    heldout_loss: f64,
    uniform_bound: f64,
    first_occurrence_loss: f64,
    second_occurrence_loss: f64,
    icl_accuracy: f64,
    chance: f64,
    usable: bool,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let mut out = Outputs::open(cfg, "pretrain")?;
    let outcome = pipeline::run_pretrain(cfg)?;
    save_checkpoint(&out.path("pretrain.ckpt"), &meta(cfg, "pretrain", &outcome.model), &outcome.model)?;
    out.record("pretrain.ckpt");
    export::write_pretrain_curve(&out.path("pretrain_curve.csv"), &outcome.report)?;
    out.record("pretrain_curve.csv");
    let g = &outcome.gate;
    let summary = PretrainSummary {
        steps: outcome.report.steps,
        stopped_early: outcome.report.stopped_early,
        heldout_loss: outcome.report.heldout_loss,
        uniform_bound: outcome.report.uniform_bound,
        first_occurrence_loss: g.signature.first_loss,
        second_occurrence_loss: g.signature.second_loss,
        icl_accuracy: g.icl_accuracy,
        chance: g.chance,
        usable: outcome.usable(),
    };
    export::write_rows(&out.path("pretrain_report.csv"), &[summary])?;
    out.record("pretrain_report.csv");
    out.finish()?;
    if !outcome.usable() {
        eprintln!("warning: pretrained model is flagged unusable: {}", g.diagnostic());
    }
    Ok(outcome)
}

pub fn cmd_finetune(cfg: &ExperimentConfig, method: Method, base: &Path) -> Result<(TransformerModel<f32>, RunLog)> {
    let ckpt = load_checkpoint(base)?;
    let gate = pipeline::gate(cfg, &ckpt.model)?;
    if !gate.passes() {
        return Err(LabError::Gate(gate.diagnostic()));
    }
    finetune_model(cfg, method, &ckpt.model)
}

/// The fine-tuning step of [`cmd_finetune`] on an in-memory base, without
/// the gate.
pub fn finetune_model(cfg: &ExperimentConfig, method: Method, base: &TransformerModel<f32>) -> Result<(TransformerModel<f32>, RunLog)> {
    let mut out = Outputs::open(cfg, "finetune")?;
    let (model, log) = pipeline::run_finetune(cfg, base, method)?;
    let name = method.name();
    let ckpt_file = format!("{name}.ckpt");
    save_checkpoint(&out.path(&ckpt_file), &meta(cfg, name, &model), &model)?;
    out.record(&ckpt_file);
    let log_file = format!("runlog_{name}.csv");
    export::write_runlog(&out.path(&log_file), &log)?;
    out.record(&log_file);
    out.finish()?;
    Ok((model, log))
}

fn labels(paths: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for p in paths {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
        let mut name = stem.clone();
        let mut i = 2;
        while names.contains(&name) {
            name = format!("{stem}_{i}");
            i += 1;
        }
        names.push(name);
    }
    names
}

#[derive(Serialize)]
struct AccRow<'a> {
    checkpoint: &'a str,
    task: &'a str,
    accuracy: f64,
}

#[derive(Serialize)]
struct OodCsvRow<'a> {
    before: &'a str,
    after: &'a str,
    task: &'a str,
    accuracy_before: f64,
    accuracy_after: f64,
    delta: f64,
}

#[derive(Serialize)]
struct HeadsRow<'a> {
    checkpoint: &'a str,
    mean_induction_count: f64,
    total_heads: usize,
}

#[derive(Serialize)]
struct ConsistencyRow<'a> {
    checkpoint: &'a str,
    queries: usize,
    variants: usize,
    consistency: f64,
}

#[derive(Serialize)]
struct UnseenRow<'a> {
    checkpoint: &'a str,
    n: usize,
    unseen_accuracy: f64,
    zero_shot_accuracy: f64,
    random_accuracy: f64,
}

/// Runs the selected analyses over `checkpoints` and returns the written
/// files.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf], analyses: &[Analysis]) -> Result<Vec<PathBuf>> {
    if checkpoints.is_empty() {
        return Err(LabError::Usage("eval needs at least one --checkpoint".into()));
    }
    let mut analyses = analyses.to_vec();
    analyses.sort();
    analyses.dedup();
    if analyses.contains(&Analysis::Grid) && checkpoints.len() != 3 {
        return Err(LabError::Usage(
            "the grid analysis needs exactly three checkpoints: pretrained, end-to-end, ABFT".into(),
        ));
    }
    if analyses.contains(&Analysis::Shift) && checkpoints.len() < 2 {
        return Err(LabError::Usage("the shift analysis needs a base checkpoint and at least one other".into()));
    }
    let models = checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    for m in &models {
        if m.config().vocab_size != cfg.world.vocab_size {
            return Err(LabError::Core(abft_core::Error::Contract(
                "checkpoint vocabulary does not match the config".into(),
            )));
        }
    }
    let names = labels(checkpoints);
    let data = pipeline::task_data(cfg)?;
    let label_tokens = &data.spec.label_tokens;
    let mut out = Outputs::open(cfg, "eval")?;
    for analysis in analyses {
        match analysis {
            Analysis::Acc => {
                let ood = pipeline::ood_sets(cfg)?;
                let mut rows = Vec::new();
                let mut accs = Vec::new();
                for (name, m) in names.iter().zip(&models) {
                    let a = eval_accuracy(m, &data.test, label_tokens)?;
                    accs.push(a);
                    rows.push((name.as_str(), "main".to_string(), a));
                    for t in &ood {
                        rows.push((name.as_str(), t.name.clone(), eval_accuracy(m, &t.samples, &t.label_tokens)?));
                    }
                }
                let csv_rows: Vec<AccRow> = rows
                    .iter()
                    .map(|(c, t, a)| AccRow {
                        checkpoint: c,
                        task: t,
                        accuracy: *a,
                    })
                    .collect();
                export::write_rows(&out.path("accuracy.csv"), &csv_rows)?;
                out.record("accuracy.csv");
                if models.len() > 1 && !ood.is_empty() {
                    let mut ood_rows = Vec::new();
                    for (name, m) in names.iter().zip(&models).skip(1) {
                        for r in eval_ood(&models[0], m, &ood)? {
                            ood_rows.push((name.clone(), r));
                        }
                    }
                    let csv_rows: Vec<OodCsvRow> = ood_rows
                        .iter()
                        .map(|(after, r)| OodCsvRow {
                            before: &names[0],
                            after,
                            task: &r.task,
                            accuracy_before: r.before,
                            accuracy_after: r.after,
                            delta: r.delta(),
                        })
                        .collect();
                    export::write_rows(&out.path("ood.csv"), &csv_rows)?;
                    out.record("ood.csv");
                }
            }
            Analysis::Heads => {
                let mut rows = Vec::new();
                for (name, m) in names.iter().zip(&models) {
                    rows.push(HeadsRow {
                        checkpoint: name,
                        mean_induction_count: count_induction_heads(m, &data.val, cfg.abft.filter())?,
                        total_heads: m.config().total_heads(),
                    });
                }
                export::write_rows(&out.path("heads.csv"), &rows)?;
                out.record("heads.csv");
            }
            Analysis::Profile => {
                let mut profiles = Vec::new();
                for (name, m) in names.iter().zip(&models) {
                    profiles.push((name.clone(), layer_profile(m, &data.test)?));
                    for (i, s) in data.test.iter().take(cfg.eval.heatmaps).enumerate() {
                        let file = format!("heatmap_{name}_{i}.pgm");
                        export::write_heatmap(&out.path(&file), &attention_heatmap(m, &s.tokens)?)?;
                        out.record(&file);
                    }
                }
                export::write_profiles(&out.path("profile.csv"), &profiles)?;
                out.record("profile.csv");
            }
            Analysis::Grid => {
                let grid = connectivity_grid(&models[0], &models[1], &models[2], cfg.eval.grid, &data.test, label_tokens)?;
                export::write_grid(&out.path("grid.csv"), &grid)?;
                out.record("grid.csv");
            }
            Analysis::Consistency => {
                let world = cfg.world()?;
                let builder = SampleBuilder::test(&data.spec, &data.split, cfg.model.max_seq_len);
                let mut rows = Vec::new();
                for (name, m) in names.iter().zip(&models) {
                    let mut r = rng::stream(cfg.seed, "eval.consistency");
                    let c = consistency_eval(
                        m,
                        &builder,
                        &world.markers,
                        cfg.eval.resamplings,
                        cfg.eval.consistency_queries,
                        cfg.task.k,
                        &mut r,
                    )?;
                    rows.push(ConsistencyRow {
                        checkpoint: name,
                        queries: cfg.eval.consistency_queries,
                        variants: world.markers.len() * cfg.eval.resamplings,
                        consistency: c,
                    });
                }
                export::write_rows(&out.path("consistency.csv"), &rows)?;
                out.record("consistency.csv");
            }
            Analysis::Unseen => {
                let builder = SampleBuilder::test(&data.spec, &data.split, cfg.model.max_seq_len);
                let mut rows = Vec::new();
                for (name, m) in names.iter().zip(&models) {
                    let mut r = rng::stream(cfg.seed, "eval.unseen");
                    let u = unseen_label_eval(m, &builder, cfg.eval.unseen_n, cfg.task.k, &mut r)?;
                    rows.push(UnseenRow {
                        checkpoint: name,
                        n: u.n,
                        unseen_accuracy: u.unseen_accuracy,
                        zero_shot_accuracy: u.zero_shot_accuracy,
                        random_accuracy: u.random_accuracy,
                    });
                }
                export::write_rows(&out.path("unseen.csv"), &rows)?;
                out.record("unseen.csv");
            }
            Analysis::Shift => {
                let mut maps = Vec::new();
                for (name, m) in names.iter().zip(&models).skip(1) {
                    maps.push((names[0].clone(), name.clone(), shift_map(&models[0], m)?));
                }
                export::write_shift(&out.path("shift.csv"), &maps)?;
                out.record("shift.csv");
            }
        }
    }
    out.finish()
}

/// Human-readable summary of a checkpoint file.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let ckpt = load_checkpoint(path)?;
    let m = &ckpt.model;
    let c = m.config();
    let mut s = String::new();
    let _ = writeln!(s, "file: {}", path.display());
    let _ = writeln!(s, "format: ABFTCKPT v{} (checksum ok)", crate::checkpoint::VERSION);
    let _ = writeln!(s, "stage: {}", ckpt.meta.stage);
    let _ = writeln!(s, "config hash: {}", ckpt.meta.config_hash);
    let _ = writeln!(
        s,
        "model: {} layers, {} heads, d_model {}, vocab {}, max_seq_len {}",
        c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.max_seq_len
    );
    let _ = writeln!(s, "parameters: {}", m.parameter_count());
    for (t, info) in m.params().iter().zip(m.info()) {
        let norm: f64 = t.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        let _ = writeln!(s, "  {:<22} {:?} norm {:.6}", info.name(), t.shape(), norm);
    }
    Ok(s)
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    tokens: &'a [u32],
    #[serde(rename = "I")]
    label_positions: &'a [usize],
    #[serde(rename = "I_plus")]
    positive: &'a [usize],
    #[serde(rename = "I_minus")]
    negative: &'a [usize],
    query_label: usize,
}

fn write_jsonl(path: &Path, samples: &[IclSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        let rec = SampleRecord {
            tokens: &s.tokens,
            label_positions: &s.label_positions,
            positive: &s.positive,
            negative: &s.negative,
            query_label: s.query_class,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| LabError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Exports training and test prompts as JSON lines. With `input`, the task
/// comes from a `text<TAB>label` file instead of the synthetic world.
pub fn cmd_dataset(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut out = Outputs::open(cfg, "dataset")?;
    let (train, test) = match input {
        None => {
            let d = pipeline::task_data(cfg)?;
            (d.train, d.test)
        }
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
            let task = ingest_labeled_text(&text, IngestOptions::default())?;
            let mut r = rng::stream(cfg.seed, rng::DATA);
            let split = SplitPlan::partition(&task.pool, 0.6, 0.2, &mut r)?;
            let max = usize::MAX;
            let k = cfg.task.k;
            let build = |b: SampleBuilder<'_>, n: usize, r: &mut rng::Rng| -> Result<Vec<IclSample>> {
                balanced_classes(n, task.n_classes(), r)
                    .into_iter()
                    .map(|c| Ok(build_icl_sample(&b, k, c, r)?))
                    .collect()
            };
            let train = build(SampleBuilder::train(&task.spec, &split, max), cfg.task.n_train, &mut r)?;
            let test = build(SampleBuilder::test(&task.spec, &split, max), cfg.task.n_test, &mut r)?;
            let vocab_path = out.path("vocab.txt");
            let mut vocab = task.vocab.join("\n");
            vocab.push('\n');
            std::fs::write(&vocab_path, vocab).map_err(|e| LabError::io(&vocab_path, e))?;
            out.record("vocab.txt");
            (train, test)
        }
    };
    write_jsonl(&out.path("train.jsonl"), &train)?;
    out.record("train.jsonl");
    write_jsonl(&out.path("test.jsonl"), &test)?;
    out.record("test.jsonl");
    out.finish()
}
