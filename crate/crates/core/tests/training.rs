mod common;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use z2p_core::datagen::{make_dataset, DatagenConfig};
use z2p_core::network::{UNetConfig, Z2pModel};
use z2p_core::projection::{PointCloud, Vec3};
use z2p_core::training::*;
use z2p_tensor::gradcheck::GradCheck;
use z2p_tensor::Tensor;

#[test]
fn composed_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let check = GradCheck::default();
    let weights = LossWeights {
        mse_rgb: 1.3,
        l1_magnitude: 0.7,
        l1_alpha: 2.0,
    };
    for case in 0..24 {
        let shape = [rng.random_range(1..3), 4, rng.random_range(1..6), rng.random_range(1..6)];
        let pred = Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95));
        let target = Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95));
        let report = check
            .run(&[pred, target], |tape, v| Ok(loss_tape(tape, v[0], v[1], &weights).expect("loss shapes").total))
            .unwrap_or_else(|e| panic!("{e}"));
        assert!(report.max_rel_error < 1e-4, "case {case}: {report:?}");
    }
}

#[test]
fn loss_is_zero_only_at_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::from_fn([4, 5, 5], |_| rng.random::<f32>());
    let w = LossWeights::default();
    assert_eq!(loss(&a, &a, &w).unwrap().total, 0.0);
    for i in [0, 30, 99] {
        let mut b = a.clone();
        b.data_mut()[i] += 0.01;
        assert!(loss(&a, &b, &w).unwrap().total > 0.0);
    }
}

fn tiny_dataset(count: usize) -> PackedDataset {
    let config = DatagenConfig {
        resolution: 16,
        points: 400,
        ..Default::default()
    };
    let samples: Vec<_> = make_dataset(&config, count, 5)
        .unwrap()
        .iter()
        .map(|s| s.training_sample())
        .collect();
    PackedDataset::new(&samples).unwrap()
}

fn tiny_model() -> Z2pModel {
    Z2pModel::new(
        UNetConfig {
            levels: 2,
            base_channels: 4,
            style_dim: 32,
            ..UNetConfig::toy()
        },
        9,
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = tiny_dataset(2);
    let mut model = tiny_model();
    let before = model.params().clone();
    let config = TrainConfig {
        adam: AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
        steps: 3,
        batch_size: 2,
        ..Default::default()
    };
    train(&mut model, &data, &config, |_, _| Ok(())).unwrap();
    for (a, b) in model.params().iter().zip(before.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn same_seed_same_curve() {
    let data = tiny_dataset(4);
    let config = TrainConfig {
        adam: AdamConfig {
            learning_rate: 1e-3,
            ..Default::default()
        },
        steps: 5,
        batch_size: 2,
        seed: 17,
        ..Default::default()
    };
    let run = || {
        let mut model = tiny_model();
        train(&mut model, &data, &config, |_, _| Ok(())).unwrap().history
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.len(), 5);
    let other = TrainConfig { seed: 18, ..config };
    let mut model = tiny_model();
    let b = train(&mut model, &data, &other, |_, _| Ok(())).unwrap().history;
    assert_ne!(a, b);
}

#[test]
fn single_example_overfits() {
    let data = tiny_dataset(1);
    let mut model = tiny_model();
    let config = TrainConfig {
        adam: AdamConfig {
            learning_rate: 3e-3,
            ..Default::default()
        },
        steps: 501,
        batch_size: 1,
        ..Default::default()
    };
    let h = train(&mut model, &data, &config, |_, _| Ok(())).unwrap().history;
    assert!(h[500].loss.total < h[0].loss.total / 10.0, "{} -> {}", h[0].loss.total, h[500].loss.total);
}

#[test]
fn checkpoint_callback_sees_every_step_and_can_abort() {
    let data = tiny_dataset(1);
    let mut model = tiny_model();
    let config = TrainConfig {
        steps: 4,
        batch_size: 1,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let err = train(&mut model, &data, &config, |r, _| {
        seen.push(r.step);
        if r.step == 2 {
            Err(z2p_core::Error::Dataset("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
    assert_eq!(seen, vec![0, 1, 2]);
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let data = tiny_dataset(1);
    let mut model = tiny_model();
    let id = model.params().find("head.bias").unwrap();
    model.params_mut().get_mut(id).value.fill(f32::NAN);
    let before = model.params().clone();
    let config = TrainConfig {
        steps: 3,
        batch_size: 1,
        ..Default::default()
    };
    match train(&mut model, &data, &config, |_, _| Ok(())) {
        Err(z2p_core::Error::NonFiniteLoss { step: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    let changed = model
        .params()
        .iter()
        .zip(before.iter())
        .any(|(a, b)| a.name != "head.bias" && a.value != b.value);
    assert!(!changed);
}

#[test]
fn noise_is_uniform_per_axis() {
    let base = PointCloud::new(vec![Vec3::new(-1.0, 2.0, 0.0), Vec3::new(3.0, 5.0, 0.5)]).unwrap();
    let mut big = base.clone();
    big.extend((0..99_998).map(|i| Vec3::new(0.0, 3.0, (i % 2) as f64 * 0.5)));
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noisy = add_uniform_noise(&big, 0.999, &mut rng).unwrap();
    let added = &noisy.points()[big.len()..];
    assert_eq!(added.len(), noise_count(0.999, big.len()));
    assert!(added.len() >= 99_000);
    let (lo, hi) = big.bounding_box();
    for axis in 0..3 {
        let v: Vec<f64> = added.iter().map(|p| p[axis]).collect();
        let d = common::ks_uniform(&v, lo[axis], hi[axis]);
        assert!(d < common::ks_critical_1pct(v.len()), "axis {axis}: D = {d}");
    }
}
