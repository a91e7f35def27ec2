use super::*;
use crate::rap::plan_rap;

fn random_input(c: usize, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(c, n, |_, _| rng.random_range(-1.0..1.0))
}

/// C=3, 64 Hz, 1 s windows every 125 ms: 80-sample trials give 3 positions.
fn tiny_config(dropout: f64) -> ModelConfig {
    let plan = plan_rap(64.0, &[4], &OnlineTaskSpec::new(1.0, 8.0, None).unwrap()).unwrap();
    ModelConfig {
        temporal_filters: 2,
        temporal_kernel: 8,
        depth_multiplier: 2,
        second_block_filters: 4,
        second_kernel: 4,
        dropout_rate: dropout,
        ..ModelConfig::with_plan(3, plan)
    }
}

#[test]
fn output_rows_follow_the_plan() {
    let m = ModelState::<f32>::new(ModelConfig::default(), 1).unwrap();
    let trial = m.predict(&random_input(27, 1216, 2)).unwrap();
    assert_eq!(trial.positions(), 61);
    let window = m.predict(&random_input(27, 256, 3)).unwrap();
    assert_eq!(window.positions(), 1);
    for j in 0..61 {
        let s: f64 = trial.row(j).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(trial.row(j).iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn valid_kernel_accounts_for_shrinkage() {
    let cfg = ModelConfig::default();
    // 256 → 193 after the temporal conv → 24 after pooling by 8 → 9
    assert_eq!(cfg.effective_final_kernel().unwrap(), 9);
    let same = ModelConfig {
        padding_mode: PaddingMode::Same,
        ..cfg
    };
    assert_eq!(same.effective_final_kernel().unwrap(), 32);
}

#[test]
fn bad_length_lists_divisibilities() {
    let m = ModelState::<f32>::new(ModelConfig::default(), 1).unwrap();
    match m.predict(&random_input(27, 1000, 2)) {
        Err(ModelError::Shape(msg)) => assert!(msg.contains("256") && msg.contains("16"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(m.predict(&random_input(5, 256, 2)), Err(ModelError::Shape(_))));
}

#[test]
fn zero_input_gives_uniform_rows() {
    let m = ModelState::<f32>::new(ModelConfig::default(), 7).unwrap();
    let p = m.predict(&Matrix::zeros(27, 1216)).unwrap();
    for j in 0..p.positions() {
        assert!((p.row(j)[0] - 0.5).abs() < 1e-6);
    }
}

fn window(x: &Matrix, j: usize, plan: &RapPlan) -> Matrix {
    let start = j * plan.hop_samples();
    x.columns(start, start + plan.window_samples()).unwrap()
}

#[test]
fn joint_equals_individual_valid() {
    let mut m = ModelState::<f32>::new(ModelConfig::default(), 5).unwrap();
    // move running statistics away from the identity
    let batch: Vec<Matrix> = (0..4).map(|i| random_input(27, 1216, 100 + i)).collect();
    let refs: Vec<&Matrix> = batch.iter().collect();
    m.forward_train(&refs, 1).unwrap();
    let x = random_input(27, 1216, 9);
    let joint = m.predict(&x).unwrap();
    let plan = m.config().rap_plan.clone();
    for j in [0, 1, 30, 59, 60] {
        let single = m.predict(&window(&x, j, &plan)).unwrap();
        for k in 0..2 {
            assert!((joint.row(j)[k] - single.row(0)[k]).abs() < 1e-5);
        }
    }
}

#[test]
fn same_padding_window_sees_its_own_border() {
    let cfg = ModelConfig {
        padding_mode: PaddingMode::Same,
        ..ModelConfig::default()
    };
    let m = ModelState::<f64>::new(cfg, 3).unwrap();
    let x = random_input(27, 1216, 4);
    let joint = m.predict(&x).unwrap();
    let plan = m.config().rap_plan.clone();
    // a single window is zero-padded at its own edges, so even windows far
    // from the trial edges see different border features
    let first = m.predict(&window(&x, 0, &plan)).unwrap();
    let d_first = (joint.row(0)[0] - first.row(0)[0]).abs();
    assert!(d_first > 0.0 && d_first.is_finite());
    assert_eq!(joint.positions(), 61);
}

#[test]
fn infer_is_deterministic() {
    let m = ModelState::<f32>::new(ModelConfig::default(), 11).unwrap();
    let x = random_input(27, 1216, 12);
    assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    assert_eq!(m, ModelState::<f32>::new(ModelConfig::default(), 11).unwrap());
}

#[test]
fn batch_norm_normalizes_in_train_mode() {
    let mut m = ModelState::<f64>::new(tiny_config(0.0), 2).unwrap();
    let batch: Vec<Matrix> = (0..5).map(|i| random_input(3, 80, i).scale(3.0)).collect();
    let refs: Vec<&Matrix> = batch.iter().collect();
    let (_, cache) = m.forward_train(&refs, 0).unwrap();
    let g = m.config().spatial_maps();
    let l1 = cache.trials[0].xhat1.len() / g;
    for map in 0..g {
        let vals: Vec<f64> = cache
            .trials
            .iter()
            .flat_map(|t| t.xhat1[map * l1..(map + 1) * l1].iter().copied())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3, "map {map}: {mean} {var}");
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn gradients_match_finite_differences() {
    let base = ModelState::<f64>::new(tiny_config(0.25), 21).unwrap();
    let batch: Vec<Matrix> = (0..3).map(|i| random_input(3, 80, 40 + i)).collect();
    let refs: Vec<&Matrix> = batch.iter().collect();
    let labels = [0, 1, 1];
    let seed = 77;
    let (_, analytic) = base.clone().loss_and_gradients(&refs, &labels, seed).unwrap();
    let h = 1e-3;
    for (ti, tensor) in base.params().iter().enumerate() {
        let mut numeric = vec![0.0; tensor.data.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus.params_mut()[ti].data[i] += h;
            let mut minus = base.clone();
            minus.params_mut()[ti].data[i] -= h;
            let lp = plus.loss_and_gradients(&refs, &labels, seed).unwrap().0;
            let lm = minus.loss_and_gradients(&refs, &labels, seed).unwrap().0;
            *slot = (lp - lm) / (2.0 * h);
        }
        let err = relative_error(&analytic.tensors[ti], &numeric);
        assert!(err < 1e-4, "{}: relative error {err}", tensor.name);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut m = ModelState::<f64>::new(tiny_config(0.25), 3).unwrap();
    let x = random_input(3, 80, 1);
    let (_, cache) = m.forward_train(&[&x], 4).unwrap();
    let zeros = vec![vec![0.0; 2 * 3]];
    assert!(m.backward(&cache, &zeros).unwrap().is_zero());
}

#[test]
fn duplicated_batch_doubles_gradients() {
    let x = random_input(3, 80, 8);
    let mut a = ModelState::<f64>::new(tiny_config(0.0), 5).unwrap();
    let mut b = a.clone();
    let (l1, g1) = a.loss_and_gradients(&[&x], &[1], 0).unwrap();
    let (l2, g2) = b.loss_and_gradients(&[&x, &x], &[1, 1], 0).unwrap();
    assert_eq!(l2, 2.0 * l1);
    for (t1, t2) in g1.tensors.iter().zip(&g2.tensors) {
        for (u, v) in t1.iter().zip(t2) {
            assert_eq!(*v, 2.0 * u);
        }
    }
}

#[test]
fn stale_cache_rejected() {
    let mut m = ModelState::<f64>::new(tiny_config(0.0), 3).unwrap();
    let x = random_input(3, 80, 1);
    let (_, cache) = m.forward_train(&[&x], 0).unwrap();
    m.params_mut()[0].data[0] += 1.0;
    let d = vec![vec![0.1; 6]];
    assert!(matches!(m.backward(&cache, &d), Err(ModelError::InvalidState(_))));
}

#[test]
fn replanning_changes_only_pooling() {
    let m = ModelState::<f32>::new(ModelConfig::default(), 9).unwrap();
    let faster = plan_rap(256.0, &[8], &OnlineTaskSpec::new(1.0, 32.0, Some(4.75)).unwrap()).unwrap();
    let r = m.apply_rap(faster).unwrap();
    assert_eq!(r.params(), m.params());
    assert_eq!(r.predict(&random_input(27, 1216, 1)).unwrap().positions(), 2 * 61 - 1);
    assert_eq!(m.apply_rap(m.config().rap_plan.clone()).unwrap(), m);

    let mut broken = m.config().rap_plan.clone();
    *broken.strides.last_mut().unwrap() = 3;
    assert!(matches!(m.apply_rap(broken), Err(ModelError::IncompatiblePlan(_))));
    let other_rate = plan_rap(512.0, &[16], &OnlineTaskSpec::dreyer()).unwrap();
    assert!(matches!(m.apply_rap(other_rate), Err(ModelError::IncompatiblePlan(_))));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.rapc");
    let mut m = ModelState::<f32>::new(ModelConfig::default(), 13).unwrap();
    let x = random_input(27, 1216, 1);
    m.forward_train(&[&x], 2).unwrap();
    m.save(&p).unwrap();
    let back = ModelState::<f32>::load(&p).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.bn_stats(), m.bn_stats());
    assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
}

#[test]
fn checkpoint_shapes_validated() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.rapc");
    let m = ModelState::<f32>::new(tiny_config(0.0), 1).unwrap();
    let mut c = m.to_container();
    c.tensors[1].shape = vec![2, 6];
    checkpoint::write_container(&p, &c).unwrap();
    assert!(matches!(ModelState::<f32>::load(&p), Err(ModelError::Shape(_))));
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(ModelState::<f32>::load(&p), Err(ModelError::Checkpoint { .. })));
}

#[test]
fn zero_electrode_rows() {
    let x = random_input(4, 10, 3);
    let mut total = Matrix::zeros(4, 10);
    for ch in 0..4 {
        let z = zero_electrode(&x, ch).unwrap();
        assert!(z.row(ch).iter().all(|v| *v == 0.0));
        total = total.add(&x.sub(&z).unwrap()).unwrap();
    }
    assert_eq!(total, x);
    let once = zero_electrode(&x, 1).unwrap();
    assert_eq!(zero_electrode(&once, 1).unwrap(), once);
    assert!(matches!(zero_electrode(&x, 4), Err(ModelError::ChannelIndex { .. })));
}
