mod common;

use std::sync::OnceLock;

use common::small_config;
use deepbroadcast::chansim::ChannelSpec;
use deepbroadcast::checkpoint::Checkpoint;
use deepbroadcast::data::{Dataset, TaskSpec};
use deepbroadcast::eval::{emit_plots, narrow_grid, psnr, EvalConfig, Evaluator, SweepResult, CSV_FILE, PSNR_CAP_DB};
use deepbroadcast::net::{BroadcastModel, Variant};
use deepbroadcast::trainer::TrainConfig;
use deepbroadcast::{Checkpoint32, Trainer32};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    ds: Dataset,
    ckpt: Checkpoint32,
    model: BroadcastModel,
}

/// DeepBroadcast on AWGN + Rayleigh, trained for a few epochs on synthetic data.
fn trained() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = Dataset::synthetic(2000, 500, 2);
        let mut cfg = small_config(Variant::Deepbroadcast);
        cfg.epochs = 6;
        let mut t = Trainer32::new(cfg).unwrap();
        for _ in 0..6 {
            t.run_epoch(&ds).unwrap();
        }
        Fixture {
            ckpt: t.checkpoint(),
            model: t.model,
            ds,
        }
    })
}

fn eval_config(grid: Vec<f64>) -> EvalConfig {
    let mut c = EvalConfig::new(grid);
    c.batch_size = 250;
    c
}

#[test]
fn accuracy_falls_monotonically_as_snr_drops() {
    let f = trained();
    let ev = Evaluator::from_checkpoint(&f.ckpt, &f.model);
    let cfg = eval_config(narrow_grid());
    assert!(cfg.repeats >= 5);
    let r = ev.sweep(Variant::Deepbroadcast, &f.ds.test, &cfg).unwrap();
    for (key, points) in r.curves() {
        assert_eq!(points.len(), 13);
        // walking from high to low SNR, count rises of more than half a point
        let inversions = points.windows(2).filter(|w| w[0].value > w[1].value + 0.005).count();
        assert!(inversions <= 1, "{key:?}: {:?}", points.iter().map(|p| p.value).collect::<Vec<_>>());
        assert!(points.iter().all(|p| (0.0..=1.0).contains(&p.value)));
    }
    // the trained AWGN user is far above chance at high SNR
    let awgn = r.records.iter().find(|p| p.user == 0 && p.snr_db == 19.0).unwrap();
    assert!(awgn.value > 0.9, "{}", awgn.value);
}

#[test]
fn infinite_snr_equals_the_noiseless_channel() {
    let f = trained();
    let noiseless = Evaluator::from_checkpoint(&f.ckpt, &f.model)
        .noiseless_pass(&f.ds.test, 500, 250)
        .unwrap();
    let cfg = eval_config(vec![f64::INFINITY]);
    for channels in [
        vec![ChannelSpec::awgn(), ChannelSpec::rayleigh()],
        vec![ChannelSpec::rician(2.0), ChannelSpec::awgn()],
        vec![ChannelSpec::rayleigh(), ChannelSpec::rician(0.5)],
    ] {
        let mut ev = Evaluator::from_checkpoint(&f.ckpt, &f.model);
        ev.channels = &channels;
        let r = ev.sweep(Variant::Deepbroadcast, &f.ds.test, &cfg).unwrap();
        let values: Vec<f64> = r.records.iter().map(|x| x.value).collect();
        assert_eq!(values, noiseless, "{channels:?}");
        assert!(r.records.iter().all(|x| x.std == 0.0));
    }
}

#[test]
fn unequalized_fading_is_not_the_identity_at_infinite_snr() {
    let f = trained();
    let mut fading = ChannelSpec::rayleigh();
    fading.equalize = false;
    let channels = [ChannelSpec::awgn(), fading];
    let mut ev = Evaluator::from_checkpoint(&f.ckpt, &f.model);
    ev.channels = &channels;
    let stream = deepbroadcast::chansim::RngStream::new(1, 0, deepbroadcast::chansim::Purpose::Noise);
    let raw = ev.pass(&f.ds.test, 500, f64::INFINITY, 250, stream).unwrap();
    let clean = ev.noiseless_pass(&f.ds.test, 500, 250).unwrap();
    assert_eq!(raw[0], clean[0]);
    assert_ne!(raw[1], clean[1]);
}

#[test]
fn sweeps_repeat_exactly_and_survive_a_checkpoint_file() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    f.ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    let model = loaded.model().unwrap();
    let mut cfg = eval_config(vec![-5.0, 7.0]);
    cfg.repeats = 2;
    let a = Evaluator::from_checkpoint(&f.ckpt, &f.model)
        .sweep(Variant::Deepbroadcast, &f.ds.test, &cfg)
        .unwrap();
    let b = Evaluator::from_checkpoint(&loaded, &model)
        .sweep(Variant::Deepbroadcast, &f.ds.test, &cfg)
        .unwrap();
    assert_eq!(a, b);
    cfg.seed += 1;
    let c = Evaluator::from_checkpoint(&loaded, &model)
        .sweep(Variant::Deepbroadcast, &f.ds.test, &cfg)
        .unwrap();
    assert_ne!(a, c);
}

#[test]
fn sweep_writes_charts_and_a_readable_csv() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = eval_config(vec![-5.0, 3.0, f64::INFINITY]);
    cfg.repeats = 1;
    cfg.test_limit = Some(100);
    let ev = Evaluator::from_checkpoint(&f.ckpt, &f.model);
    let a = ev.sweep(Variant::Deepbroadcast, &f.ds.test, &cfg).unwrap();
    let mut b = a.clone();
    for r in &mut b.records {
        r.variant = Variant::Mtoc;
        r.value *= 0.5;
    }
    let both = SweepResult::merge(&[a, b]);
    let files = emit_plots(&both, dir.path()).unwrap();
    let svgs: Vec<_> = files.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).collect();
    assert_eq!(svgs.len(), 2, "{files:?}");
    assert_eq!(files.len(), 3);
    let text = std::fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
    assert!(text.starts_with("variant,user,task,snr_db,metric,value,n,seed"), "{text}");
    assert_eq!(SweepResult::read_csv(&dir.path().join(CSV_FILE)).unwrap(), both);
    let svg = std::fs::read_to_string(svgs[0]).unwrap();
    assert!(svg.contains("<svg") && svg.contains("DeepBroadcast") && svg.contains("MTOC"));
}

#[test]
fn psnr_matches_the_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.random_range(1..4000);
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|&x| (x + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0)).collect();
        let mut sq = 0.0;
        for i in 0..n {
            sq += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let oracle = 10.0 * (1.0 / (sq / n as f64)).log10();
        assert!((psnr(&a, &b) - oracle).abs() < 1e-9);
    }
    let img = vec![0.25f64; 48];
    assert_eq!(psnr(&img, &img), PSNR_CAP_DB);
    let shifted: Vec<f64> = img.iter().map(|x| x + 0.1).collect();
    assert!((psnr(&img, &shifted) - 20.0).abs() < 1e-9);
}

#[test]
fn recovery_users_report_psnr_and_reject_accuracy() {
    let ds = Dataset::synthetic(64, 64, 3);
    let tasks = vec![TaskSpec::recover(0, 1.0), TaskSpec::task3(1e-3)];
    let mut cfg = TrainConfig::new(Variant::Deepbroadcast, tasks, vec![ChannelSpec::awgn(), ChannelSpec::rayleigh()]);
    cfg.model = small_config(Variant::Deepbroadcast).model;
    cfg.model.heads = cfg.tasks.iter().map(TaskSpec::head).collect();
    cfg.batch_size = 32;
    let mut t = Trainer32::new(cfg).unwrap();
    t.run_epoch(&ds).unwrap();
    let ckpt = t.checkpoint();
    let ev = Evaluator::from_checkpoint(&ckpt, &t.model);
    let mut ec = eval_config(vec![7.0, f64::INFINITY]);
    ec.repeats = 2;
    let curve = ev.evaluate_psnr(Variant::Deepbroadcast, &ds.test, 0, &ec).unwrap();
    assert_eq!(curve.len(), 2);
    assert!(curve.iter().all(|r| r.value.is_finite() && r.value > 0.0 && r.value <= PSNR_CAP_DB));
    assert!(ev.evaluate_psnr(Variant::Deepbroadcast, &ds.test, 1, &ec).is_err());
    assert!(ev.evaluate_accuracy(Variant::Deepbroadcast, &ds.test, 0, &ec).is_err());
    assert!(ev.evaluate_accuracy(Variant::Deepbroadcast, &ds.test, 5, &ec).is_err());
    let acc = ev.evaluate_accuracy(Variant::Deepbroadcast, &ds.test, 1, &ec).unwrap();
    assert!(acc.iter().all(|r| r.user == 1));
}
