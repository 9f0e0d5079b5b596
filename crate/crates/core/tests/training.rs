mod common;

use common::small_config;
use deepbroadcast::checkpoint::Checkpoint;
use deepbroadcast::data::{make_batch, Dataset};
use deepbroadcast::net::Variant;
use deepbroadcast::params::ParameterStore;
use deepbroadcast::trainer::{fit, resume, sample_snrs, train, RunDir, TrainConfig, Trainer};
use deepbroadcast::{Error, Trainer32, Trainer64};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn bits_equal(a: &ParameterStore<f32>, b: &ParameterStore<f32>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((_, na, ta), (_, nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn smoke_run_lowers_the_loss_in_epoch_two() {
    let ds = Dataset::synthetic(500, 0, 2);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for seed in 1..=4 {
        let mut cfg = small_config(Variant::Deepbroadcast);
        cfg.seed = seed;
        let mut t = Trainer32::new(cfg).unwrap();
        first.push(t.run_epoch(&ds).unwrap().loss);
        second.push(t.run_epoch(&ds).unwrap().loss);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let decreased = first.iter().zip(&second).filter(|(a, b)| b < a).count();
    assert!(mean(&second) < mean(&first), "epoch 1 {first:?}, epoch 2 {second:?}");
    assert!(decreased >= 3, "epoch 1 {first:?}, epoch 2 {second:?}");
}

#[test]
fn same_seed_gives_identical_epoch_metrics() {
    let ds = Dataset::synthetic(96, 0, 4);
    let run = || {
        let mut t = Trainer32::new(small_config(Variant::Deepbroadcast)).unwrap();
        let m = t.run_epoch(&ds).unwrap();
        (m, t.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert!(a.same_outcome(&b), "{a:?}\n{b:?}");
    assert!(bits_equal(&sa, &sb));

    let mut cfg = small_config(Variant::Deepbroadcast);
    cfg.seed += 1;
    let mut t = Trainer32::new(cfg).unwrap();
    assert!(!a.same_outcome(&t.run_epoch(&ds).unwrap()));
}

#[test]
fn resume_after_one_epoch_matches_a_two_epoch_run() {
    let ds = Dataset::synthetic(96, 0, 4);
    let cfg = small_config(Variant::Deepbroadcast);
    let straight = train::<f32>(cfg.clone(), &ds, None).unwrap();

    let mut one = cfg.clone();
    one.epochs = 1;
    let half = train::<f32>(one, &ds, None).unwrap();
    let restored = Checkpoint::<f32>::from_bytes(&half.to_bytes()).unwrap();
    let resumed = resume(restored, cfg, &ds, None).unwrap();

    assert_eq!(resumed.epoch, 2);
    assert_eq!(resumed.metrics.len(), 2);
    for (a, b) in straight.metrics.iter().zip(&resumed.metrics) {
        assert!(a.same_outcome(b), "{a:?}\n{b:?}");
    }
    assert!(bits_equal(&straight.store, &resumed.store));
    assert_eq!(straight.optimizer, resumed.optimizer);
}

#[test]
fn resume_refuses_a_checkpoint_of_another_variant() {
    let ds = Dataset::synthetic(32, 0, 4);
    let mut mtoc = small_config(Variant::Mtoc);
    mtoc.epochs = 1;
    let ckpt = train::<f32>(mtoc, &ds, None).unwrap();
    let target = small_config(Variant::Deepbroadcast);
    match Trainer::resume(ckpt, target) {
        Err(Error::ConfigMismatch(diff)) => {
            assert!(diff.iter().any(|l| l.starts_with("variant:")), "{diff:?}")
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("resume accepted a mismatched variant"),
    }
}

#[test]
fn resume_allows_more_epochs_but_not_other_changes() {
    let ds = Dataset::synthetic(32, 0, 4);
    let mut cfg = small_config(Variant::Mtoc);
    cfg.epochs = 1;
    let ckpt = train::<f32>(cfg.clone(), &ds, None).unwrap();
    let mut longer = cfg.clone();
    longer.epochs = 3;
    longer.checkpoint_every = 1;
    assert!(Trainer::resume(ckpt.clone(), longer).is_ok());
    let mut other = cfg;
    other.optimizer.lr = 0.5;
    assert!(matches!(Trainer::resume(ckpt, other), Err(Error::ConfigMismatch(_))));
}

#[test]
fn corrupted_checkpoint_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::synthetic(32, 0, 4);
    let mut cfg = small_config(Variant::Mtoc);
    cfg.epochs = 1;
    let path = dir.path().join("c.ckpt");
    train::<f32>(cfg, &ds, None).unwrap().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn every_deepbroadcast_parameter_gets_a_gradient_each_epoch() {
    let ds = Dataset::synthetic(64, 0, 7);
    let mut t = Trainer32::new(small_config(Variant::Deepbroadcast)).unwrap();
    for _ in 0..2 {
        let m = t.run_epoch(&ds).unwrap();
        assert!(m.untouched_params.is_empty(), "{:?}", m.untouched_params);
    }
}

#[test]
fn noise_free_smoothed_loss_decreases_monotonically() {
    let n = 64;
    let ds = Dataset::synthetic(n, 0, 2);
    let mut cfg = small_config(Variant::Deepbroadcast);
    cfg.channel_noise = false;
    cfg.loss.beta = 0.0;
    cfg.deterministic_latent = true;
    // one conditioning SNR and one batch: every step sees the same objective
    cfg.snr_list = vec![7.0];
    cfg.batch_size = n;
    let batch = make_batch(&ds.train, &cfg.tasks, (0..n).collect()).unwrap();
    let mut t = Trainer32::new(cfg).unwrap();
    let losses: Vec<f64> = (0..200)
        .map(|step| t.train_step(&batch, 0, step).unwrap().0.breakdown.total)
        .collect();
    let smoothed: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in smoothed.windows(2).enumerate() {
        assert!(w[1] < w[0], "smoothed loss rose at step {}: {} -> {}", i + 10, w[0], w[1]);
    }
    assert!(losses[199] < 0.9 * losses[0], "{} -> {}", losses[0], losses[199]);
}

#[test]
fn snr_draws_are_independent_across_users() {
    let cfg = small_config(Variant::Deepbroadcast);
    let k = cfg.snr_list.len();
    let index = |s: f64| cfg.snr_list.iter().position(|&v| v == s).unwrap();
    let mut joint = vec![vec![0.0f64; k]; k];
    let batches = 10_000;
    for b in 0..batches {
        let s = sample_snrs(&cfg, b / 100, b % 100);
        joint[index(s[0])][index(s[1])] += 1.0;
    }
    let n = batches as f64;
    let rows: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let expected = rows[i] * cols[j] / n;
            chi2 += (joint[i][j] - expected).powi(2) / expected;
        }
    }
    let dof = ((k - 1) * (k - 1)) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2:.1} on {dof} dof, p = {p:.4}");
    // both users also cover the whole list
    assert!(rows.iter().chain(&cols).all(|&c| c > 0.0));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let ds = Dataset::synthetic(32, 0, 4);
    let mut t = Trainer32::new(small_config(Variant::Mtoc)).unwrap();
    let id = t.store.ids().next().unwrap();
    t.store.get_mut(id).data_mut()[0] = f32::NAN;
    match t.run_epoch(&ds) {
        Err(Error::NonFiniteLoss { epoch, step, snrs, breakdown }) => {
            assert_eq!((epoch, step), (1, 0));
            assert_eq!(snrs.len(), 2);
            assert!(breakdown.contains("NaN"), "{breakdown}");
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn run_directory_collects_config_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::synthetic(32, 0, 4);
    let mut cfg: TrainConfig = small_config(Variant::Mtoc);
    cfg.checkpoint_every = 1;
    let run = RunDir::create(dir.path(), &cfg).unwrap();
    let name = run.path.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with(&cfg.hash12()));
    let mut t = Trainer32::new(cfg.clone()).unwrap();
    let mut seen = 0;
    fit(&mut t, &ds, Some(&run), |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(run.read_metrics().unwrap(), t.history);
    for path in [run.checkpoint_path(1), run.checkpoint_path(2), run.latest()] {
        assert!(path.is_file(), "{}", path.display());
    }
    let latest = Checkpoint::<f32>::load(&run.latest()).unwrap();
    assert_eq!(latest.epoch, 2);
    assert_eq!(latest.train, cfg);
    let saved: TrainConfig =
        serde_json::from_str(&std::fs::read_to_string(run.path.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn double_precision_training_runs() {
    let ds = Dataset::synthetic(32, 0, 4);
    let mut cfg = small_config(Variant::Deepbroadcast);
    cfg.epochs = 1;
    let mut t = Trainer64::new(cfg).unwrap();
    let m = t.run_epoch(&ds).unwrap();
    assert!(m.loss.is_finite());
    assert_eq!(m.samples, 32);
}
