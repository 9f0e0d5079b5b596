//! Fast property suites shared by `deepbroadcast selftest` and the test targets:
//! channel statistics, the KL Monte Carlo oracle, finite-difference gradient
//! checks and structural invariants.

use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::chansim::{realize_batch, rician_params, ChannelKind, ChannelSpec, Purpose, RngStream};
use crate::checkpoint::Checkpoint;
use crate::data::{map_task_labels, normalize, Batch, Dataset, TaskKind, TaskSpec};
use crate::error::Result;
use crate::graph::Graph;
use crate::net::{BroadcastModel, ChannelMode, Gcf, Head, LatentMode, Lca, ModelConfig, SnrVector, Variant};
use crate::objective::kl_to_standard_normal;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;
use crate::trainer::{objective, TrainConfig, Trainer};

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub const SNR_TOLERANCE_DB: f64 = 0.2;
pub const GAIN_POWER_RANGE: (f64, f64) = (0.995, 1.005);

/// Empirical SNR and mean gain power per channel kind at 0, 7 and 10 dB.
pub fn channel_statistics(n_symbols: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let (mu, sigma) = rician_params(2.0)?;
    let ok = (mu - (2.0f64 / 3.0).sqrt()).abs() < 1e-9 && (sigma - (1.0f64 / 3.0).sqrt()).abs() < 1e-9;
    out.push(Check::new(
        "rician a=2 parameters",
        ok,
        format!("mu={mu:.12} sigma={sigma:.12}"),
    ));
    for (ki, kind) in [ChannelKind::Awgn, ChannelKind::Rayleigh, ChannelKind::Rician].into_iter().enumerate() {
        for (si, snr) in [0.0, 7.0, 10.0].into_iter().enumerate() {
            let spec = ChannelSpec {
                equalize: false,
                ..ChannelSpec::new(kind).with_snr(snr)
            };
            // one complex symbol per pair of reals on fading channels
            let len = if kind.is_fading() { 2 * n_symbols } else { n_symbols };
            let stream = RngStream::new(seed, (ki * 3 + si) as u32, Purpose::Noise);
            let mut rng = RngStream::new(seed, (ki * 3 + si) as u32, Purpose::Latent).rng();
            let z: Vec<f64> = (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let r = realize_batch(&spec, 1, len, &stream)?;
            let y = r.apply(&z)?;
            let hz: Vec<f64> = match r.effective_gains() {
                Some(h) => h
                    .iter()
                    .enumerate()
                    .flat_map(|(p, g)| {
                        let c = Complex64::new(z[2 * p], z[2 * p + 1]) * g;
                        [c.re, c.im]
                    })
                    .collect(),
                None => z.clone(),
            };
            let ps: f64 = hz.iter().map(|v| v * v).sum();
            let pn: f64 = hz.iter().zip(&y).map(|(a, b)| (b - a).powi(2)).sum();
            let measured = 10.0 * (ps / pn).log10();
            let name = format!("{kind:?} at {snr} dB");
            out.push(Check::new(
                format!("{name}: empirical SNR"),
                (measured - snr).abs() <= SNR_TOLERANCE_DB,
                format!("{measured:.4} dB over {n_symbols} symbols"),
            ));
            if kind.is_fading() {
                let eh2 = r.gains.iter().map(|h| h.norm_sqr()).sum::<f64>() / r.gains.len() as f64;
                out.push(Check::new(
                    format!("{name}: E|h|^2"),
                    (GAIN_POWER_RANGE.0..=GAIN_POWER_RANGE.1).contains(&eh2),
                    format!("{eh2:.5}"),
                ));
            }
        }
    }
    Ok(out)
}

/// Monte Carlo estimate of `KL(N(mu, sigma^2) || N(0, 1))` from `n` draws of q,
/// with the standard error of the estimate.
pub fn kl_monte_carlo<R: Rng>(mu: &[f64], sigma: &[f64], n: usize, rng: &mut R) -> (f64, f64) {
    let (mut acc, mut acc2) = (0.0, 0.0);
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for (&m, &s) in mu.iter().zip(sigma) {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + s * e;
            // log q(z) - log p(z); the 2*pi terms cancel
            log_ratio += -s.ln() - 0.5 * e * e + 0.5 * z * z;
        }
        acc += log_ratio;
        acc2 += log_ratio * log_ratio;
    }
    let mean = acc / n as f64;
    let var = (acc2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

pub const KL_REL_TOLERANCE: f64 = 0.01;

/// Closed-form KL against Monte Carlo on `draws` random `(mu, sigma)` of 8 to
/// 16 dimensions.
pub fn kl_oracle(draws: usize, samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = RngStream::new(seed, 0, Purpose::Latent).rng();
    let mut worst: f64 = 0.0;
    let mut worst_se: f64 = 0.0;
    let mut failures = Vec::new();
    for d in 0..draws {
        let dim = rng.random_range(8..=16);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..2.5)).collect();
        let exact = kl_to_standard_normal(&mu, &sigma)?;
        let (mc, se) = kl_monte_carlo(&mu, &sigma, samples, &mut rng);
        let rel = (mc - exact).abs() / exact;
        worst = worst.max(rel);
        worst_se = worst_se.max(se / exact);
        if rel > KL_REL_TOLERANCE {
            failures.push(format!("draw {d}: exact {exact:.5} mc {mc:.5} +- {se:.5}"));
        }
    }
    let mut out = vec![Check::new(
        "closed-form KL vs Monte Carlo",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{draws} draws x {samples} samples, worst rel err {:.3}% (MC rel std err up to {:.3}%)",
                100.0 * worst,
                100.0 * worst_se
            )
        } else {
            failures.join("; ")
        },
    )];
    let zero = kl_to_standard_normal(&[0.0; 8], &[1.0; 8])?;
    out.push(Check::new("KL at (0, 1) is exactly zero", zero == 0.0, format!("{zero}")));
    let mut min: f64 = f64::INFINITY;
    for _ in 0..10_000 {
        let m: f64 = rng.random_range(-3.0..3.0);
        let s: f64 = rng.random_range(0.05..4.0);
        min = min.min(kl_to_standard_normal(&[m], &[s])?);
    }
    out.push(Check::new("KL nonnegative", min >= 0.0, format!("min over 10^4 draws {min:.3e}")));
    Ok(out)
}

/// Tiny two-user DeepBroadcast (8x8 images, c1 = 2) used by the gradient suite.
pub fn tiny_config() -> TrainConfig {
    let tasks = vec![TaskSpec::task3(0.7), TaskSpec::recover(0, 0.3)];
    let mut cfg = TrainConfig::new(Variant::Deepbroadcast, tasks, vec![ChannelSpec::rician(2.0), ChannelSpec::awgn()]);
    cfg.model = ModelConfig {
        image_size: 8,
        c1: 2,
        c_tx: 8,
        fusion_hidden: 6,
        query_hidden: 3,
        decoder_hidden: 6,
        executor_hidden: 5,
        ..cfg.model
    };
    // a large beta keeps the KL gradients visible next to the task terms
    cfg.loss.beta = 0.05;
    cfg.seed = 11;
    cfg
}

/// Parameter group of a parameter name.
pub fn param_group(name: &str) -> &'static str {
    if name.contains(".lca") {
        "LCA"
    } else if name.contains(".pfg") {
        "PFG"
    } else if name.contains(".halve") {
        "TCE"
    } else if name.contains(".gcf") {
        "GCF"
    } else if name.contains(".rx") {
        "heads"
    } else if name.contains("fusion") {
        "fusion"
    } else if name.contains("extractor") {
        "extractor"
    } else {
        "other"
    }
}

pub const GRAD_REL_TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error between analytic and central-difference gradients
/// of the full training objective, per parameter group and overall.
pub fn gradient_suite(max_entries_per_tensor: usize, step: f64) -> Result<Vec<Check>> {
    let cfg = tiny_config();
    let (model, mut store) = BroadcastModel::build::<f64>(cfg.variant, &cfg.model, cfg.seed)?;
    let batch = tiny_batch(&cfg)?;
    let snrs = [3.0, -1.0];
    let loss_at = |store: &ParameterStore<f64>| -> Result<f64> {
        Ok(objective(&model, store, &cfg, &batch, &snrs, 7)?.breakdown.total)
    };
    let analytic = {
        let p = objective(&model, &store, &cfg, &batch, &snrs, 7)?;
        let grads = p.graph.backward(p.total);
        let mut all = vec![None; store.len()];
        for (id, g) in grads.params() {
            all[id.0] = Some(g.to_vec());
        }
        all
    };
    let mut groups: std::collections::BTreeMap<&str, (f64, f64, usize)> = Default::default();
    let mut total = (0.0, 0.0, 0usize);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.get(id).numel();
        let stride = n.div_ceil(max_entries_per_tensor).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let up = loss_at(&store)?;
            store.get_mut(id).data_mut()[k] = orig - step;
            let down = loss_at(&store)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[k]);
            let e = groups.entry(param_group(&name)).or_default();
            e.0 += (a - numeric).powi(2);
            e.1 += a.powi(2).max(numeric.powi(2));
            e.2 += 1;
            total.0 += (a - numeric).powi(2);
            total.1 += a.powi(2).max(numeric.powi(2));
            total.2 += 1;
        }
    }
    let mut out = Vec::new();
    let rel = |(d, s, _): (f64, f64, usize)| d.sqrt() / s.sqrt().max(1e-12);
    for group in ["extractor", "LCA", "TCE", "PFG", "GCF", "fusion", "heads"] {
        let Some(&g) = groups.get(group) else {
            out.push(Check::new(format!("gradients: {group}"), false, "group missing from model"));
            continue;
        };
        let r = rel(g);
        out.push(Check::new(
            format!("gradients: {group}"),
            r < GRAD_REL_TOLERANCE && g.1 > 0.0,
            format!("rel err {r:.2e} over {} entries", g.2),
        ));
    }
    let r = rel(total);
    out.push(Check::new(
        "gradients: composite objective",
        r < GRAD_REL_TOLERANCE,
        format!("rel err {r:.2e} over {} entries", total.2),
    ));
    Ok(out)
}

/// Three images cropped to the tiny model's size, with their task labels.
fn tiny_batch(cfg: &TrainConfig) -> Result<Batch<f64>> {
    let side = cfg.model.image_size;
    let ds = Dataset::synthetic(3, 0, 5);
    let mut data = Vec::with_capacity(3 * 3 * side * side);
    for i in 0..3 {
        let img = ds.train.image(i);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    data.push(normalize::<f64>(img[(c * 32 + y) * 32 + x]));
                }
            }
        }
    }
    let labels10 = ds.train.labels().to_vec();
    let task_labels = cfg
        .tasks
        .iter()
        .map(|t| match t.kind {
            TaskKind::Classify => map_task_labels(&labels10, t),
            TaskKind::Recover => Ok(Vec::new()),
        })
        .collect::<Result<_>>()?;
    Ok(Batch {
        indices: vec![0, 1, 2],
        images: Tensor::from_vec(&[3, 3, side, side], data)?,
        labels10,
        task_labels,
    })
}

/// Power normalization, LCA and GCF identities, dimension bookkeeping and
/// checkpoint round-trip.
pub fn structural_invariants() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let cfg = ModelConfig::new(vec![Head::Classify { n_label: 2 }, Head::Classify { n_label: 2 }]);
    out.push(Check::new(
        "c2 = c1*h1*w1/4",
        cfg.c2() == cfg.c1 * cfg.h1() * cfg.w1() / 4 && cfg.c2() == 512,
        format!("c1={} h1={} w1={} c2={}", cfg.c1, cfg.h1(), cfg.w1(), cfg.c2()),
    ));

    let small = ModelConfig {
        c1: 8,
        fusion_hidden: 32,
        query_hidden: 8,
        decoder_hidden: 32,
        executor_hidden: 16,
        ..cfg.clone()
    };
    let (model, store) = BroadcastModel::build::<f64>(Variant::Deepbroadcast, &small, 4)?;
    let ds = Dataset::synthetic(6, 0, 2);
    let images: Tensor<f64> = ds.train.tensor(&[0, 1, 2, 3, 4, 5]);
    let mut g = Graph::new();
    let snrs = SnrVector::new(vec![-5.0, 19.0])?;
    let pass = model.forward(&mut g, &store, &images, &snrs, LatentMode::Mean, &ChannelMode::Bypass)?;
    let z = g.value(pass.signals[0]);
    let worst = (0..z.rows())
        .map(|r| (z.row(r).iter().map(|v| v * v).sum::<f64>() / z.row_len() as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(Check::new(
        "broadcast signal has unit power",
        worst < 1e-9,
        format!("max |P-1| = {worst:.2e}"),
    ));
    out.push(Check::new(
        "broadcast length is 16 symbols",
        z.row_len() == 16 && model.symbols_per_image() == 16,
        format!("{} symbols", z.row_len()),
    ));

    let mut rng = RngStream::new(1, 0, Purpose::Init).rng();
    let mut ps = ParameterStore::<f64>::new();
    let lca = Lca::new(&mut ps, &mut rng, "lca", &small)?;
    let oc = lca.output_conv().clone();
    ps.get_mut(oc.w).data_mut().fill(0.0);
    ps.get_mut(oc.b).data_mut().fill(0.0);
    let mut g = Graph::new();
    let f = g.constant(Tensor::from_vec(
        &[2, small.c1, small.h1(), small.w1()],
        (0..2 * small.feature_len()).map(|i| (i as f64 * 0.1).sin()).collect(),
    )?);
    let t = lca.trace(&mut g, &ps, f, 4.0);
    out.push(Check::new(
        "LCA residual identity",
        g.value(t.output) == g.value(f),
        "zero output conv returns the input exactly",
    ));

    let gcf = Gcf::new(&mut ps, &mut rng, "gcf", &small)?;
    let mut g = Graph::new();
    let zr = g.constant(Tensor::from_vec(
        &[3, small.c2()],
        (0..3 * small.c2()).map(|i| (i as f64 * 0.7).cos() * 3.0).collect(),
    )?);
    let t = gcf.trace(&mut g, &ps, zr, &SnrVector::new(vec![-5.0, 31.0])?)?;
    let in_unit = |v: &Tensor<f64>| v.data().iter().all(|&x| x > 0.0 && x < 1.0);
    out.push(Check::new(
        "GCF gates in (0, 1)",
        in_unit(g.value(t.key)) && in_unit(g.value(t.query)),
        "key and query gates are sigmoids",
    ));

    let cfg = tiny_config();
    let trainer = Trainer::<f32>::new(cfg)?;
    let ck = trainer.checkpoint();
    let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes())?;
    let bits = |s: &ParameterStore<f32>| -> Vec<u32> { s.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits())).collect() };
    let same_params = bits(&ck.store) == bits(&back.store);
    let forward = |m: &BroadcastModel, s: &ParameterStore<f32>| -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let x = Tensor::<f32>::full(&[1, 3, 8, 8], 0.25);
        let p = m.forward(&mut g, s, &x, &SnrVector::new(vec![1.0, 2.0])?, LatentMode::Mean, &ChannelMode::Bypass)?;
        Ok(p.outputs.iter().flat_map(|&o| g.value(o).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect())
    };
    let same_forward = forward(&trainer.model, &ck.store)? == forward(&back.model()?, &back.store)?;
    out.push(Check::new(
        "checkpoint round-trip is bitwise",
        same_params && same_forward,
        "parameters and forward outputs identical after save/load",
    ));
    Ok(out)
}
