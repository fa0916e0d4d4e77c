mod common;

use std::fs;

use ocunet::data::{make_batch, synth_dataset, AugmentPolicy, SynthSpec};
use ocunet::model::{Model, ModelConfig};
use ocunet::nn::ParamStore;
use ocunet::train::{
    load_checkpoint, save_checkpoint, train, train_step, AdamConfig, AdamState, Checkpoint,
    CheckpointMeta, Dataset, EarlyStopConfig, EarlyStopPolicy, PlateauConfig, PlateauPolicy,
    ResolvedLoss, RunFiles, StopDecision, TrainConfig, EPOCH_LOG_HEADER,
};
use ocunet::Tensor;

fn tiny_data(classes: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = synth_dataset(dir.path(), &SynthSpec::new(6, 32, classes, seed)).unwrap();
    let data = Dataset::from_manifest(&m, 0.34, seed).unwrap();
    (dir, data)
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: Some(2),
        seed: 3,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn adam_matches_scalar_reference() {
    let x0 = common::uniform(5, -1.0, 1.0, 1);
    let grads: Vec<Vec<f64>> = (0..12).map(|t| common::uniform(5, -2.0, 2.0, 10 + t)).collect();
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("w", Tensor::new(&[5], x0.clone()).unwrap());
    let cfg = AdamConfig {
        lr: 0.01,
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-6,
    };
    let mut adam = AdamState::new(cfg, &store);
    let mut trace = Vec::new();
    for g in &grads {
        adam.step(&mut store, &[(id, Tensor::new(&[5], g.clone()).unwrap())]).unwrap();
        trace.push(store.get(id).data().to_vec());
    }
    for k in 0..5 {
        let seq: Vec<f64> = grads.iter().map(|g| g[k]).collect();
        let want = common::adam_trace(x0[k], &seq, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        for (t, w) in want.iter().enumerate() {
            assert!((trace[t][k] - w).abs() <= 1e-12, "step {t} elem {k}");
        }
    }
}

#[test]
fn non_finite_gradient_leaves_state_untouched() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("w", Tensor::full(&[3], 0.5));
    let mut adam = AdamState::new(AdamConfig::default(), &store);
    let bad = Tensor::new(&[3], vec![1.0, f64::NAN, 0.0]).unwrap();
    let msg = adam.step(&mut store, &[(id, bad)]).unwrap_err().to_string();
    assert!(msg.contains('w'), "{msg}");
    assert_eq!(store.get(id).data(), &[0.5; 3]);
    assert_eq!(adam.t, 0);
}

#[test]
fn default_learning_rate() {
    assert_eq!(AdamConfig::default().lr, 3e-4);
    assert_eq!(EPOCH_LOG_HEADER, "epoch,train_loss,val_dice,val_miou,lr");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (_d, data) = tiny_data(3, 1);
    let cfg = ModelConfig::tiny(2, 32, 3);
    let run = |dir: &std::path::Path| {
        let mut model = Model::<f32>::new(&cfg, 4).unwrap();
        let files = RunFiles::in_dir(dir).unwrap();
        let report = train(&mut model, &data, &quick_config(3), Some(&files)).unwrap();
        (report, files)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, fa) = run(a.path());
    let (rb, fb) = run(b.path());
    assert_eq!(ra.history, rb.history);
    let log = fs::read_to_string(&fa.epoch_log).unwrap();
    assert_eq!(log, fs::read_to_string(&fb.epoch_log).unwrap());
    assert_eq!(log.lines().next().unwrap(), EPOCH_LOG_HEADER);
    assert_eq!(log.lines().count(), 1 + ra.history.len());
    assert_eq!(
        fs::read(&fa.last_checkpoint).unwrap(),
        fs::read(&fb.last_checkpoint).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (_d, data) = tiny_data(1, 2);
    let cfg = ModelConfig::tiny(2, 32, 1);
    let mut model = Model::<f32>::new(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = RunFiles::in_dir(dir.path()).unwrap();
    let report = train(&mut model, &data, &quick_config(2), Some(&files)).unwrap();

    let ckpt = load_checkpoint(&files.last_checkpoint).unwrap();
    assert_eq!(ckpt.meta.history, report.history);
    let (restored, adam) = ckpt.restore::<f32>(Some(&cfg)).unwrap();
    assert!(adam.is_some());
    let x = make_batch(&data.val, 1).unwrap().images;
    let a = model.predict(&x).unwrap();
    let b = restored.predict(&x).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    // Saving the restored model reproduces the file byte for byte.
    let again = Checkpoint::from_model(&restored, adam.as_ref(), ckpt.meta.clone());
    assert_eq!(again.to_bytes(), fs::read(&files.last_checkpoint).unwrap());
}

#[test]
fn corrupt_or_truncated_checkpoints_are_rejected() {
    let model = Model::<f32>::new(&ModelConfig::tiny(2, 32, 3), 0).unwrap();
    let bytes = Checkpoint::from_model(&model, None, CheckpointMeta::default()).to_bytes();
    assert_eq!(&bytes[..4], b"OCUN");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ocun");

    for pos in [10, bytes.len() / 2, bytes.len() - 9] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        fs::write(&path, &bad).unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("checksum") && msg.contains("m.ocun"), "{msg}");
    }
    fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong_magic).unwrap_err().to_string().contains("magic"));
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 99;
    assert!(Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string().contains("version"));
}

#[test]
fn architecture_mismatch_is_reported() {
    let model = Model::<f32>::new(&ModelConfig::tiny(2, 32, 3), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ocun");
    save_checkpoint(&path, &Checkpoint::from_model(&model, None, CheckpointMeta::default())).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let other = ModelConfig::tiny(2, 32, 1);
    let msg = ckpt.restore::<f32>(Some(&other)).map(|_| ()).unwrap_err().to_string();
    assert!(msg.contains("architecture mismatch") && msg.contains("num_classes"), "{msg}");
    assert!(ckpt.restore::<f32>(None).is_ok());
}

#[test]
fn repeated_steps_reduce_the_loss() {
    let (_d, data) = tiny_data(1, 6);
    let mut model = Model::<f32>::new(&ModelConfig::tiny(4, 32, 1), 1).unwrap();
    let batch = make_batch(&data.train, 1).unwrap();
    let loss = ResolvedLoss::resolve(None, 1, &data.train).unwrap();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let losses: Vec<f64> = (0..25)
        .map(|_| train_step(&mut model, &mut adam, &batch, &loss).unwrap().loss)
        .collect();
    let tail = losses[20..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * losses[0], "{losses:?}");
}

#[test]
fn loss_head_mismatch_is_a_config_error() {
    let (_d, data) = tiny_data(3, 7);
    let mut model = Model::<f32>::new(&ModelConfig::tiny(2, 32, 3), 0).unwrap();
    let cfg = TrainConfig {
        loss: Some(ocunet::loss::LossConfig::Hybrid {
            config: Default::default(),
            weights: None,
        }),
        ..quick_config(1)
    };
    let msg = train(&mut model, &data, &cfg, None).unwrap_err().to_string();
    assert!(msg.contains("single-channel"), "{msg}");
}

#[test]
fn held_out_split_is_seeded_and_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = synth_dataset(dir.path(), &SynthSpec::new(10, 16, 3, 0)).unwrap();
    let a = Dataset::from_manifest(&m, 0.3, 1).unwrap();
    let b = Dataset::from_manifest(&m, 0.3, 1).unwrap();
    assert_eq!((a.train.len(), a.val.len()), (7, 3));
    assert!(!a.val_is_train);
    assert_eq!(a.val, b.val);
    for v in &a.val {
        assert!(!a.train.contains(v));
    }
    let all = Dataset::from_manifest(&m, 0.0, 1).unwrap();
    assert!(all.val_is_train && all.val.len() == 10);
}

#[test]
fn plateau_halves_and_early_stop_fires() {
    let mut p = PlateauPolicy::new(
        PlateauConfig {
            patience: 2,
            ..PlateauConfig::default()
        },
        Some(0.5),
    );
    assert_eq!(p.update(0.6, 1e-3), 1e-3);
    assert_eq!(p.update(0.6, 1e-3), 1e-3);
    assert_eq!(p.update(0.6, 1e-3), 5e-4);

    let mut s = EarlyStopPolicy::new(
        EarlyStopConfig {
            patience: 3,
            ..EarlyStopConfig::default()
        },
        Some(0.5),
    );
    assert_eq!(s.check(1, 0.7), StopDecision::Continue);
    assert_eq!(s.check(2, 0.7), StopDecision::Continue);
    assert_eq!(s.check(3, 0.69), StopDecision::Continue);
    assert_eq!(s.check(4, 0.7), StopDecision::Stop);
    assert_eq!(s.best_epoch, 1);

    let mut off = EarlyStopPolicy::new(
        EarlyStopConfig {
            enabled: false,
            ..EarlyStopConfig::default()
        },
        None,
    );
    assert!((1..100).all(|e| off.check(e, 0.0) == StopDecision::Continue));
}

#[test]
fn early_stopping_ends_a_stalled_run() {
    let (_d, data) = tiny_data(3, 8);
    let mut model = Model::<f32>::new(&ModelConfig::tiny(2, 32, 3), 0).unwrap();
    // A learning rate this small cannot move validation Dice past the threshold.
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-12,
            ..AdamConfig::default()
        },
        early_stop: EarlyStopConfig {
            patience: 2,
            threshold: 0.05,
            ..EarlyStopConfig::default()
        },
        augment: AugmentPolicy::none(),
        ..quick_config(20)
    };
    let r = train(&mut model, &data, &cfg, None).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.history.len(), 2);
}
