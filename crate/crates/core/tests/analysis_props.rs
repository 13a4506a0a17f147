//! Analysis routines on small models.

use abft_core::abft::HeadFilter;
use abft_core::analysis::{
    attention_heatmap, connectivity_grid, consistency_eval, consistency_metric, count_induction_heads, eval_accuracy,
    interpolate_models, layer_profile, shift_map, unseen_label_eval, GridSpec,
};
use abft_core::data::corpus::{World, WorldConfig};
use abft_core::data::{build_test_set, IclSample, SampleBuilder, SplitPlan, SplitSizes, TaskSpec};
use abft_core::model::{ModelConfig, ParamKind, Trainable, TransformerModel};
use abft_core::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

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

fn setup() -> (World, TaskSpec, SplitPlan) {
    let world = World::new(WorldConfig::default()).unwrap();
    let spec = world.task("t", &[0, 1, 2, 3], &[0, 1, 2, 3], 2).unwrap();
    let split = SplitPlan::generate(&spec, SplitSizes { train: 16, demo: 6, query: 6 }, &mut rng::stream(4, rng::DATA)).unwrap();
    (world, spec, split)
}

fn test_set(n: usize) -> (TaskSpec, Vec<IclSample>) {
    let (_, spec, split) = setup();
    let s = build_test_set(&spec, &split, n, 4, 64, &mut rng::stream(6, rng::DATA)).unwrap();
    (spec, s)
}

/// Perturbs every parameter of `m` by independent noise.
fn jitter(m: &TransformerModel<f64>, seed: u64) -> TransformerModel<f64> {
    let mut out = m.clone();
    let mut r = rng::stream(seed, "jitter");
    for p in out.params_mut() {
        for v in p.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    out
}

#[test]
fn interpolation_anchors_are_exact() {
    let t0 = TransformerModel::<f32>::init(config(1)).unwrap();
    let te = TransformerModel::<f32>::init(config(2)).unwrap();
    let ta = TransformerModel::<f32>::init(config(3)).unwrap();
    for (ae, aa, want) in [(0.0, 0.0, &t0), (1.0, 0.0, &te), (0.0, 1.0, &ta)] {
        let m = interpolate_models(&t0, &te, &ta, ae, aa).unwrap();
        for (x, y) in m.params().iter().zip(want.params()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(m.trainable_count(), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn interpolation_is_affine(ae in -1.0..2.0f64, aa in -1.0..2.0f64, t in 0.0..1.0f64) {
        let t0 = TransformerModel::<f64>::init(config(1)).unwrap();
        let te = jitter(&t0, 2);
        let ta = jitter(&t0, 3);
        let m = interpolate_models(&t0, &te, &ta, ae, aa).unwrap();
        for ((x, p0), (pe, pa)) in m.params().iter().zip(t0.params()).zip(te.params().iter().zip(ta.params())) {
            for i in 0..x.len() {
                let want = p0.data()[i] + ae * (pe.data()[i] - p0.data()[i]) + aa * (pa.data()[i] - p0.data()[i]);
                prop_assert!((x.data()[i] - want).abs() < 1e-12);
            }
        }
        // points on the segment between the two fine-tuned models are
        // collinear with its ends
        let a = interpolate_models(&t0, &te, &ta, 1.0 - t, t).unwrap();
        for ((x, pe), pa) in a.params().iter().zip(te.params()).zip(ta.params()) {
            for i in 0..x.len() {
                prop_assert!((x.data()[i] - ((1.0 - t) * pe.data()[i] + t * pa.data()[i])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unit_shift_in_one_entry() {
    let before = TransformerModel::<f32>::init(config(1)).unwrap();
    let mut after = before.clone();
    let q = after.param_index(ParamKind::Query, Some(1)).unwrap();
    after.params_mut()[q].data_mut()[7] += 1.0;
    let map = shift_map(&before, &after).unwrap();
    for (i, e) in map.entries.iter().enumerate() {
        if i == q {
            assert!((e.distance - 1.0).abs() < 1e-6, "{}", e.distance);
            assert_eq!(e.layer, Some(1));
        } else {
            assert_eq!(e.distance, 0.0);
        }
    }
    assert!(map.is_zero_outside_qk());
    let v = after.param_index(ParamKind::Value, Some(0)).unwrap();
    after.params_mut()[v].data_mut()[0] += 1.0;
    assert!(!shift_map(&before, &after).unwrap().is_zero_outside_qk());
}

#[test]
fn analyses_do_not_touch_parameters() {
    let (spec, samples) = test_set(16);
    let (_, _, split) = setup();
    let mut m = TransformerModel::<f32>::init(config(8)).unwrap();
    m.restrict_trainable(Trainable::QkOnly);
    let snapshot = m.clone();
    eval_accuracy(&m, &samples, &spec.label_tokens).unwrap();
    count_induction_heads(&m, &samples, HeadFilter::standard()).unwrap();
    layer_profile(&m, &samples).unwrap();
    attention_heatmap(&m, &samples[0].tokens).unwrap();
    let builder = SampleBuilder::test(&spec, &split, 64);
    consistency_eval(&m, &builder, &[3, 4, 5], 2, 8, 4, &mut rng::stream(1, "c")).unwrap();
    unseen_label_eval(&m, &builder, 8, 4, &mut rng::stream(1, "u")).unwrap();
    for (a, b) in m.params().iter().zip(snapshot.params()) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.grad(), b.grad());
        assert_eq!(a.is_trainable(), b.is_trainable());
    }
}

#[test]
fn profile_ignores_sample_order() {
    let (_, samples) = test_set(24);
    let m = TransformerModel::<f64>::init(config(9)).unwrap();
    let p1 = layer_profile(&m, &samples).unwrap();
    let mut shuffled = samples.clone();
    shuffled.shuffle(&mut rng::stream(3, "order"));
    let p2 = layer_profile(&m, &shuffled).unwrap();
    for (a, b) in p1.s.iter().zip(&p2.s).chain(p1.s_plus.iter().zip(&p2.s_plus)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(p1.s_plus.iter().zip(&p1.s).all(|(p, s)| p <= s));
}

#[test]
fn zero_model_scores_chance() {
    let (spec, samples) = test_set(40);
    let mut m = TransformerModel::<f32>::init(config(1)).unwrap();
    for p in m.params_mut() {
        p.data_mut().fill(0.0);
    }
    let acc = eval_accuracy(&m, &samples, &spec.label_tokens).unwrap();
    assert!((acc - 1.0 / spec.n_classes() as f64).abs() < 1e-12, "{acc}");
}

#[test]
fn consistency_of_random_votes() {
    // C = 2 classes, m = 9 variants, uniform votes
    let (m, trials) = (9usize, 100_000usize);
    let mut r = rng::stream(11, "votes");
    let variants: Vec<Vec<usize>> = (0..trials).map(|_| (0..m).map(|_| r.gen_range(0..2)).collect()).collect();
    let got = consistency_metric(&variants).unwrap();
    let mut binom = 1.0f64;
    let mut expect = 0.0;
    for x in 0..=m {
        if x > 0 {
            binom = binom * (m - x + 1) as f64 / x as f64;
        }
        expect += binom * x.max(m - x) as f64;
    }
    expect /= 2f64.powi(m as i32) * m as f64;
    assert!((got - expect).abs() < 0.01, "{got} vs {expect}");
}

#[test]
fn consistency_rejects_degenerate_input() {
    assert!(consistency_metric(&[]).is_err());
    assert!(consistency_metric(&[vec![1]]).is_err());
    assert_eq!(consistency_metric(&[vec![2, 2, 2]]).unwrap(), 1.0);
}

#[test]
fn unseen_prompts_never_show_the_query_label() {
    let (_, spec, split) = setup();
    let builder = SampleBuilder::test(&spec, &split, 64);
    let mut r = rng::stream(2, "unseen");
    for _ in 0..200 {
        let class = r.gen_range(0..spec.n_classes());
        let qi = r.gen_range(0..split.query.per_class[class].len());
        let ep = builder
            .episode_with_query(4, class, qi, &abft_core::data::DemoClasses::ExcludeQuery, &mut r)
            .unwrap();
        let s = builder.render(&ep).unwrap();
        assert!(s.positive.is_empty());
        assert_eq!(s.negative.len(), 4);
        assert!(s.label_classes.iter().all(|&c| c != class));
    }
    let m = TransformerModel::<f32>::init(config(3)).unwrap();
    let rep = unseen_label_eval(&m, &builder, 16, 4, &mut r).unwrap();
    assert_eq!(rep.n, 16);
}

#[test]
fn grid_covers_the_axis_and_segment() {
    let (spec, samples) = test_set(8);
    let t0 = TransformerModel::<f32>::init(config(1)).unwrap();
    let te = TransformerModel::<f32>::init(config(2)).unwrap();
    let ta = TransformerModel::<f32>::init(config(3)).unwrap();
    let spec_grid = GridSpec {
        min: 0.0,
        max: 1.0,
        step: 0.5,
    };
    let g = connectivity_grid(&t0, &te, &ta, spec_grid, &samples, &spec.label_tokens).unwrap();
    assert_eq!(g.points.len(), 9);
    assert_eq!(g.segment(3).unwrap().len(), 3);
    assert_eq!(g.get(1.0, 0.0).unwrap(), eval_accuracy(&te, &samples, &spec.label_tokens).unwrap());
    assert!(g.segment(5).is_none());
    assert!(GridSpec { min: 0.1, max: 0.9, step: 0.2 }.axis().is_err());
}

#[test]
fn heatmap_rows_are_distributions() {
    let (_, samples) = test_set(4);
    let m = TransformerModel::<f64>::init(config(5)).unwrap();
    let h = attention_heatmap(&m, &samples[0].tokens).unwrap();
    assert_eq!(h.rows, 4);
    assert_eq!(h.values.len(), h.rows * h.cols);
    for row in h.values.chunks(h.cols) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
