//! The `abft` binary end to end on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abft_core::analysis::shift_map;
use abft_core::model::TransformerModel;
use abft_lab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use abft_lab::config::{ExperimentConfig, Method};
use abft_lab::manifest::Manifest;
use abft_lab::pipeline::run_finetune;

const TINY: &str = r#"
seed = 3
record_wall_time = false

[model]
n_layers = 1
n_heads = 2
d_model = 16

[corpus]
n_sequences = 64

[pretrain]
heldout = 16
probes = 8

[pretrain.schedule]
batch_size = 8
max_steps = 4
warmup_steps = 2
eval_every = 2

[task]
n_train = 16
n_test = 32
n_val = 8
split = { train = 8, demo = 8, query = 8 }

[abft]
n_b = 4
n_steps = 3

[e2e]
n_b = 4
n_steps = 3

[eval]
consistency_queries = 8
resamplings = 2
unseen_n = 8
heatmaps = 1
grid = { min = 0.0, max = 1.0, step = 0.5 }
"#;

fn abft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abft")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

/// Checkpoint of a freshly initialized model, written without the CLI.
fn init_checkpoint(cfg: &ExperimentConfig, path: &Path, zero: bool) -> TransformerModel<f32> {
    let mut m = TransformerModel::<f32>::init(cfg.model_config()).unwrap();
    if zero {
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
    }
    let meta = CheckpointMeta {
        stage: "pretrain".into(),
        config_hash: cfg.hash(),
        model: *m.config(),
        experiment: cfg.clone(),
    };
    save_checkpoint(path, &meta, &m).unwrap();
    m
}

/// Every file in `dir` other than the manifest appears exactly once in it,
/// with the config hash.
fn assert_manifest_complete(dir: &Path, hash: &str) {
    let m = Manifest::load(dir).unwrap();
    let mut files: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|f| f != "manifest.json" && f != "config.toml")
        .collect();
    files.sort();
    let mut listed: Vec<String> = m.entries.iter().map(|e| e.file.clone()).collect();
    listed.sort();
    assert_eq!(files, listed);
    assert!(m.entries.iter().all(|e| e.config_hash == hash));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&abft(&[])), 2);
    assert_eq!(code(&abft(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\nbogus_key = 2\n");
    let o = abft(&["dataset", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), "[model]\nn_heads = 3\nd_model = 16\n");
    let o = abft(&["dataset", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("d_model"), "{}", stderr(&o));
    // no output directory anywhere
    assert_eq!(code(&abft(&["dataset"])), 2);
}

#[test]
fn bad_checkpoints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(code(&abft(&["inspect-checkpoint", s(&missing)])), 3);
    let good = dir.path().join("m.ckpt");
    init_checkpoint(&tiny(), &good, false);
    let bytes = std::fs::read(&good).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = abft(&["inspect-checkpoint", s(&cut)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
    let mut flipped = bytes.clone();
    let mid = bytes.len() - 20;
    flipped[mid] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &flipped).unwrap();
    let o = abft(&["inspect-checkpoint", s(&bad)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
    let mut foreign = bytes;
    foreign[..8].copy_from_slice(b"NOTACKPT");
    std::fs::write(&bad, &foreign).unwrap();
    let o = abft(&["inspect-checkpoint", s(&bad)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn pretrain_is_reproducible_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = abft(&["pretrain", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["pretrain.ckpt", "pretrain_curve.csv", "pretrain_report.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report = std::fs::read_to_string(a.join("pretrain_report.csv")).unwrap();
    assert!(report.starts_with("steps,stopped_early,heldout_loss,uniform_bound,first_occurrence_loss"));
    assert_manifest_complete(&a, &tiny().hash());
    let o = abft(&["inspect-checkpoint", s(&a.join("pretrain.ckpt"))]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("stage: pretrain") && text.contains("w_q"));
    // a different seed gives a different model
    let c = dir.path().join("c");
    assert_eq!(code(&abft(&["pretrain", "--config", s(&cfg), "--out", s(&c), "--seed", "4"])), 0);
    assert_ne!(std::fs::read(a.join("pretrain.ckpt")).unwrap(), std::fs::read(c.join("pretrain.ckpt")).unwrap());
}

#[test]
fn finetune_refuses_a_base_without_induction_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let base = dir.path().join("zero.ckpt");
    init_checkpoint(&tiny(), &base, true);
    let out = dir.path().join("out");
    let o = abft(&["finetune", "--config", s(&cfg), "--out", s(&out), "--method", "abft", "--base", s(&base)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("repeated-segment loss"), "{}", stderr(&o));
    assert!(!out.join("abft.ckpt").exists());
}

#[test]
fn finetune_pipeline_respects_the_method() {
    let cfg = tiny();
    let base = TransformerModel::<f32>::init(cfg.model_config()).unwrap();
    let (abft_model, log) = run_finetune(&cfg, &base, Method::Abft).unwrap();
    assert_eq!(log.len(), cfg.abft.n_steps);
    let map = shift_map(&base, &abft_model).unwrap();
    assert!(map.is_zero_outside_qk());
    assert!(log.records.iter().all(|r| r.wall_ms == 0.0 && r.a.is_some()));
    let (e2e_model, log) = run_finetune(&cfg, &base, Method::E2e).unwrap();
    assert_eq!(log.len(), cfg.e2e.n_steps);
    assert!(!shift_map(&base, &e2e_model).unwrap().is_zero_outside_qk());
}

#[test]
fn eval_writes_every_analysis_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), TINY);
    let cfg = tiny();
    let base = dir.path().join("base.ckpt");
    let m0 = init_checkpoint(&cfg, &base, false);
    let save = |name: &str, m: &TransformerModel<f32>| {
        let p = dir.path().join(name);
        let meta = CheckpointMeta {
            stage: name.into(),
            config_hash: cfg.hash(),
            model: *m.config(),
            experiment: cfg.clone(),
        };
        save_checkpoint(&p, &meta, m).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().model.params(), m.params());
        p
    };
    let e2e = save("e2e.ckpt", &run_finetune(&cfg, &m0, Method::E2e).unwrap().0);
    let abft_ckpt = save("abft.ckpt", &run_finetune(&cfg, &m0, Method::Abft).unwrap().0);
    let out = dir.path().join("eval");
    let mut args = vec!["eval", "--config", s(&cfg_path), "--out", s(&out)];
    for c in [&base, &e2e, &abft_ckpt] {
        args.extend(["--checkpoint", s(c)]);
    }
    for a in ["acc", "heads", "profile", "grid", "consistency", "unseen", "shift"] {
        args.extend(["--analysis", a]);
    }
    let o = abft(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let expected = [
        "accuracy.csv",
        "ood.csv",
        "heads.csv",
        "profile.csv",
        "heatmap_base_0.pgm",
        "heatmap_e2e_0.pgm",
        "heatmap_abft_0.pgm",
        "grid.csv",
        "consistency.csv",
        "unseen.csv",
        "shift.csv",
    ];
    for f in expected {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_manifest_complete(&out, &cfg.hash());
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 9);
    let snapshot: Vec<(String, Vec<u8>)> = expected
        .iter()
        .chain(["manifest.json"].iter())
        .map(|f| (f.to_string(), std::fs::read(out.join(f)).unwrap()))
        .collect();
    assert_eq!(code(&abft(&args)), 0);
    for (f, bytes) in snapshot {
        assert_eq!(std::fs::read(out.join(&f)).unwrap(), bytes, "{f} changed on re-run");
    }
    // the grid needs exactly three checkpoints
    let o = abft(&["eval", "--config", s(&cfg_path), "--out", s(&out), "--checkpoint", s(&base), "--analysis", "grid"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_rejects_mismatched_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let cfg_path = write_config(dir.path(), TINY);
    let a = dir.path().join("a.ckpt");
    init_checkpoint(&cfg, &a, false);
    let mut other = cfg.clone();
    other.model.n_layers = 2;
    let b = dir.path().join("b.ckpt");
    init_checkpoint(&other, &b, false);
    let out = dir.path().join("out");
    let o = abft(&[
        "eval", "--config", s(&cfg_path), "--out", s(&out), "--checkpoint", s(&a), "--checkpoint", s(&b), "--analysis", "shift",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn dataset_exports_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("data");
    let o = abft(&["dataset", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let train = std::fs::read_to_string(out.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 16);
    for line in train.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let tokens = v["tokens"].as_array().unwrap();
        let i = v["I"].as_array().unwrap();
        let plus = v["I_plus"].as_array().unwrap();
        let minus = v["I_minus"].as_array().unwrap();
        assert_eq!(i.len(), 4);
        assert_eq!(plus.len() + minus.len(), i.len());
        let q = v["query_label"].as_u64().unwrap() as usize;
        assert!(q < 4);
        assert!(i.iter().all(|p| (p.as_u64().unwrap() as usize) < tokens.len()));
    }
    assert_eq!(std::fs::read_to_string(out.join("test.jsonl")).unwrap().lines().count(), 32);
    assert_manifest_complete(&out, &tiny().hash());

    let text: String = (0..40)
        .map(|i| {
            let label = ["pos", "neg"][i % 2];
            let word = if i % 2 == 0 { "good fine great" } else { "bad awful poor" };
            format!("{word} item{i}\t{label}\n")
        })
        .collect();
    let input = dir.path().join("labeled.tsv");
    std::fs::write(&input, text).unwrap();
    let out2 = dir.path().join("ingested");
    let o = abft(&["dataset", "--config", s(&cfg), "--out", s(&out2), "--input", s(&input)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(out2.join("vocab.txt")).unwrap().lines().count() > 2);
    assert_manifest_complete(&out2, &tiny().hash());
    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let o = abft(&["dataset", "--config", s(&cfg), "--out", s(&out2), "--input", s(&empty)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
