//! Forward-pass and training-loop properties on small models.

use abft_core::abft::{AbftConfig, HeadFilter};
use abft_core::analysis::count_induction_heads;
use abft_core::data::corpus::{World, WorldConfig};
use abft_core::data::{build_training_set, IclSample, SplitPlan, SplitSizes, TaskSpec};
use abft_core::model::{Logits, ModelConfig, Trainable, TransformerModel};
use abft_core::rng;
use abft_core::tape::Tape;
use abft_core::train::{abft_objective, train_abft, train_e2e, E2eConfig, NoClock};
use abft_core::TokenId;
use proptest::prelude::*;

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 96,
        max_seq_len: 64,
        seed,
    }
}

fn task() -> (TaskSpec, SplitPlan) {
    let world = World::new(WorldConfig::default()).unwrap();
    let spec = world.task("t", &[0, 1, 2, 3], &[0, 1, 2, 3], 2).unwrap();
    let split = SplitPlan::generate(&spec, SplitSizes { train: 16, demo: 6, query: 6 }, &mut rng::stream(4, rng::DATA)).unwrap();
    (spec, split)
}

fn train_set(n: usize) -> (TaskSpec, Vec<IclSample>) {
    let (spec, split) = task();
    let s = build_training_set(&spec, &split, n, 4, 64, &mut rng::stream(5, rng::DATA)).unwrap();
    (spec, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn future_tokens_do_not_change_earlier_outputs(
        tokens in prop::collection::vec(0u32..96, 4..24),
        cut in 1usize..3,
        replacement in 0u32..96,
    ) {
        let m = TransformerModel::<f64>::init(config(1)).unwrap();
        let t = tokens.len() - cut;
        let mut changed = tokens.clone();
        changed[t] = replacement;
        let (a, ca) = m.forward(&tokens, true).unwrap();
        let (b, _) = m.forward(&changed, true).unwrap();
        let v = 96;
        for i in 0..t {
            for j in 0..v {
                prop_assert!((a.data()[i * v + j] - b.data()[i * v + j]).abs() < 1e-12);
            }
        }
        // every captured row is a causal distribution over the prefix
        for c in &ca {
            let s: f64 = c.alpha.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(c.alpha.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn batched_forward_matches_single_sequences() {
    let m = TransformerModel::<f64>::init(config(2)).unwrap();
    let mut r = rng::stream(1, "tokens");
    let seqs: Vec<Vec<TokenId>> = (0..5)
        .map(|_| (0..12).map(|_| rand::Rng::gen_range(&mut r, 0..96)).collect())
        .collect();
    let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let mut tape = Tape::inference();
    let vars = m.record(&mut tape, &refs, Logits::All, true).unwrap();
    let logits = tape.value(vars.logits.unwrap()).to_vec();
    for (i, s) in seqs.iter().enumerate() {
        let (single, caps) = m.forward(s, true).unwrap();
        let n = single.len();
        for (x, y) in single.data().iter().zip(&logits[i * n..(i + 1) * n]) {
            assert!((x - y).abs() < 1e-12);
        }
        for (c, b) in caps.iter().zip(m.captures(&tape, &vars, i)) {
            assert_eq!((c.layer, c.head), (b.layer, b.head));
            for (x, y) in c.alpha.iter().zip(&b.alpha) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn abft_cfg(n_b: usize, n_steps: usize) -> AbftConfig {
    AbftConfig {
        lr: 1e-2,
        n_b,
        n_steps,
        head_filter_enabled: false,
        ..AbftConfig::default()
    }
}

#[test]
fn abft_moves_only_query_and_key_weights() {
    let (_, data) = train_set(12);
    let base = TransformerModel::<f32>::init(config(3)).unwrap();
    let mut m = base.clone();
    m.restrict_trainable(Trainable::QkOnly);
    train_abft(&mut m, &data, &abft_cfg(4, 5), &mut rng::stream(1, rng::SHUFFLE), &mut NoClock).unwrap();
    let mut moved = 0;
    for ((p, q), info) in base.params().iter().zip(m.params()).zip(m.info()) {
        let d = p.frobenius_distance(q).unwrap();
        if info.kind.is_query_or_key() {
            moved += usize::from(d > 0.0);
        } else {
            assert_eq!(d, 0.0, "{} moved", info.name());
        }
    }
    assert_eq!(moved, 4, "every query/key matrix should move");
}

#[test]
fn abft_refuses_the_wrong_trainable_set() {
    let (_, data) = train_set(4);
    let mut m = TransformerModel::<f32>::init(config(3)).unwrap();
    m.restrict_trainable(Trainable::All);
    let err = train_abft(&mut m, &data, &abft_cfg(2, 1), &mut rng::stream(1, rng::SHUFFLE), &mut NoClock);
    assert!(matches!(err, Err(abft_core::Error::Contract(_))));
}

#[test]
fn run_log_is_deterministic_and_wraps_epochs() {
    let (_, data) = train_set(6);
    let run = || {
        let mut m = TransformerModel::<f32>::init(config(4)).unwrap();
        m.restrict_trainable(Trainable::QkOnly);
        // 5 steps of 4 over 6 prompts forces several reshuffles
        let log = train_abft(&mut m, &data, &abft_cfg(4, 5), &mut rng::stream(9, rng::SHUFFLE), &mut NoClock).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(l1.len(), 5);
    assert_eq!(l1.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    for (a, b) in m1.params().iter().zip(m2.params()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn logged_count_matches_a_direct_count() {
    let (_, data) = train_set(8);
    let mut m = TransformerModel::<f64>::init(config(5)).unwrap();
    m.restrict_trainable(Trainable::QkOnly);
    let before = m.clone();
    let cfg = AbftConfig {
        n_b: data.len(),
        n_steps: 1,
        ..AbftConfig::default()
    };
    let log = train_abft(&mut m, &data, &cfg, &mut rng::stream(1, rng::SHUFFLE), &mut NoClock).unwrap();
    let direct = count_induction_heads(&before, &data, HeadFilter::standard()).unwrap();
    assert!((log.records[0].mean_induction_count - direct).abs() < 1e-12);
    let (loss, _) = abft_objective(&before, &data, HeadFilter::standard(), cfg.a0, cfg.b0).unwrap();
    assert!((log.records[0].mean_loss - loss).abs() < 1e-9);
}

#[test]
fn untrained_model_has_no_induction_heads() {
    let (_, data) = train_set(32);
    let m = TransformerModel::<f32>::init(config(6)).unwrap();
    let n = count_induction_heads(&m, &data, HeadFilter::standard()).unwrap();
    assert!(n < 0.05, "count {n}");
}

#[test]
fn e2e_reaches_embeddings_and_lowers_its_loss() {
    let (spec, data) = train_set(16);
    let base = TransformerModel::<f32>::init(config(7)).unwrap();
    let mut m = base.clone();
    m.restrict_trainable(Trainable::All);
    let cfg = E2eConfig {
        lr: 3e-3,
        n_b: 16,
        n_steps: 30,
    };
    let log = train_e2e(&mut m, &data, &spec.label_tokens, &cfg, &mut rng::stream(2, rng::SHUFFLE), &mut NoClock).unwrap();
    let first = log.records[0].mean_loss;
    let last = log.records.last().unwrap().mean_loss;
    assert!(last < first, "loss {first} -> {last}");
    assert!(log.records.iter().all(|r| r.a.is_none() && r.b.is_none()));
    assert!(base.params()[0].frobenius_distance(&m.params()[0]).unwrap() > 0.0);
}
