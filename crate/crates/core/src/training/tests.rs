use super::*;
use crate::network::NetworkConfig;
use crate::prior::TemplateModel;

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        scales: 2,
        channels: vec![4, 4],
        latent_channels: 2,
        vrn: true,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        network: tiny_network(),
        batch_size: 2,
        epochs: 1,
        warmup_epochs: 1,
        lambdas: vec![0.5, 4.0],
        ..TrainConfig::default()
    }
}

fn data(count: usize, precision: u8, seed: u64) -> (Vec<Sample>, TemplateModel) {
    let t = TemplateModel::toy_humanoid();
    (toy_dataset(&t, count, &[precision], seed).unwrap(), t)
}

#[test]
fn loss_is_finite_at_initialization() {
    let (d, t) = data(2, 5, 1);
    let mut tr = Trainer::new(&d, &[t], &TrainConfig::default()).unwrap();
    for i in 0..2 {
        let l = tr.evaluate(i, 1.0).unwrap();
        assert!(l.total.is_finite() && l.rate >= 0.0 && l.distortion >= 0.0, "{l:?}");
        assert!((l.total - (l.rate + l.distortion)).abs() < 1e-12);
    }
}

#[test]
fn loss_is_linear_in_lambda() {
    let (d, t) = data(1, 5, 2);
    let mut tr = Trainer::new(&d, &[t], &tiny_config()).unwrap();
    let a = tr.evaluate(0, 1.0).unwrap();
    let b = tr.evaluate(0, 1.5).unwrap();
    assert!(((b.total - a.total) / 0.5 - a.rate).abs() < 1e-9);
    assert_eq!(a.rate, b.rate);
}

#[test]
fn one_sample_overfits() {
    let (d, t) = data(1, 5, 3);
    let config = TrainConfig {
        network: NetworkConfig {
            scales: 2,
            channels: vec![8, 8],
            latent_channels: 4,
            vrn: true,
        },
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&d, &[t], &config).unwrap();
    let mut best = f64::INFINITY;
    for step in 0..500 {
        let l = tr.step(&[0], 0.01, config.learning_rate_at(step, 500)).unwrap();
        best = best.min(l.distortion);
        if best < 0.01 {
            break;
        }
    }
    assert!(best < 0.01, "distortion stalled at {best}");
}

#[test]
fn training_is_reproducible() {
    let (d, t) = data(3, 5, 4);
    let run = || {
        let mut log = Vec::new();
        let out = train(&d, std::slice::from_ref(&t), &tiny_config(), &mut log).unwrap();
        (out.iter().map(|m| m.last.total).collect::<Vec<_>>(), out[1].model.id(), log)
    };
    let (a, ida, loga) = run();
    let (b, idb, logb) = run();
    assert_eq!(a, b);
    assert_eq!(ida, idb);
    assert_eq!(loga, logb);
    let text = String::from_utf8(loga).unwrap();
    // Warm-up plus one epoch per λ, two batches each.
    assert_eq!(text.lines().count(), 6);
    let first: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(first.len(), 5);
    assert_eq!(first[0], "1");
    let total: f64 = first[4].parse().unwrap();
    assert!(total.is_finite());
}

#[test]
fn checkpoints_are_written_per_lambda() {
    let (d, t) = data(2, 5, 5);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        checkpoint_dir: Some(dir.path().join("ckpt")),
        ..tiny_config()
    };
    let out = train(&d, &[t], &config, &mut std::io::sink()).unwrap();
    for m in &out {
        let path = dir.path().join("ckpt").join(format!("lambda_{}.pgw", m.lambda));
        let loaded = crate::network::Model::load(&path).unwrap();
        assert_eq!(loaded.id(), m.model.id());
    }
}

#[test]
fn fitted_ranges_cover_the_training_residuals() {
    let (d, t) = data(2, 5, 6);
    let mut tr = Trainer::new(&d, &[t], &tiny_config()).unwrap();
    tr.step(&[0, 1], 1.0, 1e-3).unwrap();
    let model = tr.model().unwrap();
    assert!(model.entropy().ranges().iter().all(|&(lo, hi)| lo < 0 && hi > 0));
}

#[test]
fn steps_do_not_touch_frozen_optimizer_state() {
    let (d, t) = data(1, 5, 7);
    let mut tr = Trainer::new(&d, &[t], &tiny_config()).unwrap();
    let before = tr.weights().clone();
    tr.step(&[0], 1.0, 1e-3).unwrap();
    assert_ne!(&before, tr.weights());
    assert_eq!(tr.steps(), 1);
    let entropy = tr.entropy().clone();
    tr.restore(before.clone(), entropy).unwrap();
    assert_eq!(&before, tr.weights());
    assert!(tr.step(&[3], 1.0, 1e-3).is_err());
}

#[test]
fn invalid_configurations() {
    let (d, t) = data(1, 5, 8);
    let bad = [
        TrainConfig {
            lambdas: vec![],
            ..tiny_config()
        },
        TrainConfig {
            lambdas: vec![1.0, -1.0],
            ..tiny_config()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..tiny_config()
        },
        TrainConfig {
            batch_size: 0,
            ..tiny_config()
        },
    ];
    for c in &bad {
        assert!(matches!(Trainer::new(&d, std::slice::from_ref(&t), c), Err(crate::Error::Config(_))));
    }
    assert!(Trainer::new(&[], std::slice::from_ref(&t), &tiny_config()).is_err());
    assert!(Trainer::new(&d, &[], &tiny_config()).is_err());
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rate_at(0, 100), 16e-4);
    assert_eq!(c.learning_rate_at(49, 100), 16e-4);
    assert_eq!(c.learning_rate_at(50, 100), 8e-4);
    assert_eq!(c.learning_rate_at(75, 100), 4e-4);
}
