use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tttlab_core::adapt::{
    adapt_episode, adapt_in_place, baseline_ptbn, run_ttt, tent_in_place, AdaptConfig, AdaptReport, TestStream,
};
use tttlab_core::data::Dataset;
use tttlab_core::nn::{BnMode, ModelBundle, ModelSpec, ProjectorSpec, Snapshot, TrainableSet};
use tttlab_core::tensor::{Tape, Tensor};
use tttlab_core::train::evaluate;
use tttlab_core::Error;

fn spec(momentum: f64) -> ModelSpec {
    ModelSpec {
        image_size: 8,
        channels: vec![3, 4, 4],
        num_classes: 3,
        bn_momentum: momentum,
        projectors: ProjectorSpec {
            layers: vec![1, 2],
            heads: 2,
            k: 3,
            lambda: vec![1.0, 0.5, 1.0],
            ..Default::default()
        },
        ..Default::default()
    }
}

fn model(seed: u64) -> ModelBundle<f64> {
    let mut m = ModelBundle::new(spec(0.1), seed).unwrap();
    m.mark_source();
    m
}

fn dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[n, 1, 8, 8], |_| rng.random_range(0.0f32..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    Dataset::new(3, images, labels).unwrap()
}

fn cfg(checkpoints: Vec<usize>) -> AdaptConfig {
    AdaptConfig {
        checkpoints,
        lr: 1e-2,
        batch_size: 8,
        j: 2,
        tent_checkpoints: vec![1, 3],
        tent_lr: 1e-2,
        ..Default::default()
    }
}

fn all_x(ds: &Dataset) -> Tensor<f64> {
    ds.batch::<f64>(&(0..ds.len()).collect::<Vec<_>>()).0
}

fn im_bits(r: &AdaptReport) -> Vec<Vec<u64>> {
    r.batches.iter().map(|b| b.im.iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn adapted_state_moves_only_blocks_up_to_j() {
    let mut m = model(3);
    let source = Snapshot::capture(&m, None);
    let ep = adapt_in_place(&mut m, &all_x(&dataset(8, 1)), &cfg(vec![3])).unwrap();
    assert!(!ep.diverged);
    for (p, v) in m.params().iter().zip(source.values()) {
        let learns = p.name.starts_with("extractor.block1.") || p.name.starts_with("extractor.block2.");
        if learns {
            assert!(!p.value.bit_eq(v), "{} did not move", p.name);
        } else {
            assert!(p.value.bit_eq(v), "{} moved", p.name);
        }
    }
}

#[test]
fn tent_moves_only_batch_norm_affine() {
    let mut m = model(4);
    let source = Snapshot::capture(&m, None);
    let ep = tent_in_place(&mut m, &all_x(&dataset(8, 2)), &[3], 1e-2).unwrap();
    assert!(!ep.diverged);
    for (p, v) in m.params().iter().zip(source.values()) {
        let affine = p.name.ends_with(".bn.weight") || p.name.ends_with(".bn.bias");
        assert_eq!(!p.value.bit_eq(v), affine, "{}", p.name);
    }
}

#[test]
fn sweep_leaves_the_model_bit_equal() {
    let m = model(5);
    let before = Snapshot::capture(&m, None);
    let streams = [TestStream::clean(dataset(24, 3))];
    run_ttt(&m, &streams, &cfg(vec![1, 4]), 0).unwrap();
    assert_eq!(Snapshot::capture(&m, None), before);

    let mut m = m;
    adapt_episode(&mut m, &all_x(&dataset(8, 4)), &cfg(vec![5])).unwrap();
    assert_eq!(Snapshot::capture(&m, None), before);
}

#[test]
fn restored_model_reproduces_source_accuracy() {
    let mut m = model(6);
    let ds = dataset(32, 5);
    let eval = evaluate(&m, &ds, BnMode::Eval, 16).unwrap();
    let batch = evaluate(&m, &ds, BnMode::BatchOnly, 16).unwrap();
    adapt_episode(&mut m, &all_x(&ds), &cfg(vec![20])).unwrap();
    assert_eq!(evaluate(&m, &ds, BnMode::Eval, 16).unwrap(), eval);
    assert_eq!(evaluate(&m, &ds, BnMode::BatchOnly, 16).unwrap(), batch);
}

#[test]
fn labels_never_reach_the_adapted_state() {
    let m = model(7);
    let ds = dataset(24, 6);
    let zeroed = Dataset::new(3, ds.images.clone(), vec![0; ds.len()]).unwrap();
    let c = cfg(vec![1, 3]);
    let a = run_ttt(&m, &[TestStream::clean(ds.clone())], &c, 0).unwrap();
    let b = run_ttt(&m, &[TestStream::clean(zeroed.clone())], &c, 0).unwrap();
    for (x, y) in a.batches.iter().zip(&b.batches) {
        assert_eq!(x.predictions, y.predictions);
    }
    assert_eq!(im_bits(&a), im_bits(&b));

    let (mut ma, mut mb) = (m.clone(), m.clone());
    let idx: Vec<usize> = (0..8).collect();
    adapt_in_place(&mut ma, &ds.batch::<f64>(&idx).0, &c).unwrap();
    adapt_in_place(&mut mb, &zeroed.batch::<f64>(&idx).0, &c).unwrap();
    assert_eq!(Snapshot::capture(&ma, None), Snapshot::capture(&mb, None));
}

#[test]
fn per_batch_results_do_not_depend_on_stream_order() {
    let m = model(8);
    let ds = dataset(40, 7);
    let c = cfg(vec![1, 4]);
    let order = [3usize, 0, 4, 2, 1];
    let idx: Vec<usize> = order.iter().flat_map(|&b| b * 8..(b + 1) * 8).collect();
    let a = run_ttt(&m, &[TestStream::clean(ds.clone())], &c, 0).unwrap();
    let b = run_ttt(&m, &[TestStream::clean(ds.subset(&idx))], &c, 0).unwrap();
    for (pos, &orig) in order.iter().enumerate() {
        assert_eq!(a.batches[orig].predictions, b.batches[pos].predictions);
        assert_eq!(a.batches[orig].correct, b.batches[pos].correct);
        assert_eq!(a.batches[orig].tent, b.batches[pos].tent);
    }
}

#[test]
fn zero_iterations_is_the_ptbn_forward() {
    let m = model(9);
    let ds = dataset(16, 8);
    let r = run_ttt(&m, &[TestStream::clean(ds.clone())], &cfg(vec![0, 2]), 0).unwrap();
    for b in &r.batches {
        assert_eq!(Some(b.correct[0]), b.ptbn);
        let idx: Vec<usize> = (b.batch * 8..(b.batch + 1) * 8).collect();
        assert_eq!(b.predictions[0], baseline_ptbn(&m, &ds.batch::<f64>(&idx).0).unwrap());
    }
}

#[test]
fn ptbn_matches_eval_mode_when_running_stats_equal_batch_stats() {
    let ds = dataset(16, 9);
    let x = all_x(&ds);
    let mut m = ModelBundle::<f64>::new(spec(1.0), 10).unwrap();
    let mut tape = Tape::new();
    m.forward(&mut tape, &x, BnMode::Train, &TrainableSet::none(&m)).unwrap();
    // running variance is stored unbiased; undo the correction
    for (l, st) in m.bn_states_mut().iter_mut().enumerate() {
        let side = 8 >> l;
        let n = (16 * side * side) as f64;
        st.running_var.iter_mut().for_each(|v| *v *= (n - 1.0) / n);
    }
    let eval = m.predict_logits(&x, BnMode::Eval).unwrap();
    let batch = m.predict_logits(&x, BnMode::BatchOnly).unwrap();
    assert!(eval.max_abs_diff(&batch) <= 1e-5, "{}", eval.max_abs_diff(&batch));
    assert_eq!(m.predict_logits(&x, BnMode::BatchOnly).unwrap(), batch);
}

#[test]
fn identical_batches_give_identical_traces() {
    let m = model(11);
    let streams = [TestStream::clean(dataset(16, 10))];
    let c = cfg(vec![1, 5]);
    let a = run_ttt(&m, &streams, &c, 3).unwrap();
    let b = run_ttt(&m, &streams, &c, 3).unwrap();
    assert_eq!(a, b);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_csv(&mut x).unwrap();
    b.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn diverging_batches_fall_back_and_are_flagged() {
    let mut m = model(12);
    let w = m.param_index("projector.layer2.head1.fc1.weight").unwrap();
    m.params_mut()[w].value.data_mut()[0] = f64::NAN;
    m.mark_source();
    let r = run_ttt(&m, &[TestStream::clean(dataset(16, 11))], &cfg(vec![1, 3]), 0).unwrap();
    for b in &r.batches {
        assert!(b.diverged);
        assert!(b.correct.iter().all(|&c| Some(c) == b.ptbn));
    }
    assert_eq!(r.summary().streams[0].diverged_batches, 2);
}

#[test]
fn model_without_projectors_cannot_adapt() {
    let mut s = spec(0.1);
    s.projectors.layers.clear();
    let mut m = ModelBundle::<f64>::new(s, 0).unwrap();
    m.mark_source();
    let err = adapt_episode(&mut m, &all_x(&dataset(4, 0)), &cfg(vec![1])).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn result_table_has_every_method_and_checkpoint() {
    let m = model(13);
    let c = cfg(vec![1, 2]);
    let r = run_ttt(&m, &[TestStream::clean(dataset(16, 12))], &c, 9).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "corruption,severity,checkpoint,method,seed,accuracy,im_before,im_after");
    // no_adapt, ptbn, clust3 × (2 + max), tent × (2 + max)
    assert_eq!(lines.len(), 1 + 2 + 3 + 3);
    assert!(lines.iter().skip(1).all(|l| l.starts_with("none,0,") && l.contains(",9,")));
    assert!(lines.iter().any(|l| l.starts_with("none,0,max,clust3,")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn episodes_are_isolated_and_heads_stay_frozen(
        model_seed in 0u64..1000,
        data_seed in 0u64..1000,
        iterations in 1usize..6,
        j in 1usize..4,
    ) {
        let m = model(model_seed);
        let ds = dataset(16, data_seed);
        let c = AdaptConfig { j, ..cfg(vec![iterations]) };
        let x = all_x(&ds);

        let mut adapted = m.clone();
        adapt_in_place(&mut adapted, &x, &c).unwrap();
        let source = m.source_snapshot().unwrap();
        for (p, v) in adapted.params().iter().zip(source.values()) {
            if p.name.starts_with("classifier.") || p.name.starts_with("projector.") {
                prop_assert!(p.value.bit_eq(v), "{} moved", p.name);
            }
        }

        // one episode first, then the same batch: same answer as fresh
        let mut warm = m.clone();
        let other = all_x(&dataset(16, data_seed + 1));
        adapt_episode(&mut warm, &other, &c).unwrap();
        let a = adapt_episode(&mut warm, &x, &c).unwrap();
        let b = adapt_episode(&mut m.clone(), &x, &c).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(Snapshot::capture(&warm, None), Snapshot::capture(&m, None));
    }
}
