//! The training loop: per-batch SNR sampling, forward through encoder,
//! channels and receivers, the broadcast objective, and Adam updates.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chansim::{ChannelSpec, Purpose, RngStream};
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::{batch_count, epoch_order, make_batch, Batch, Dataset, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::net::{BroadcastModel, ChannelMode, ForwardPass, LatentMode, ModelConfig, SnrVector, Variant};
use crate::objective::{broadcast_ib_graph, LossBreakdown, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParameterStore;
use crate::scalar::Scalar;

/// `-5, -3, ..., 19` dB.
pub fn default_snr_list() -> Vec<f64> {
    (0..13).map(|k| -5.0 + 2.0 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Multiplier on the KL terms.
    pub beta: f64,
    /// Per-user KL shares; equal shares when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 1e-4, gamma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    /// One task per user, in user order.
    pub tasks: Vec<TaskSpec>,
    /// One channel per user; `snr_db` is replaced by the sampled SNR.
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub snr_list: Vec<f64>,
    /// Sample SNRs uniformly on `[min, max]` of `snr_list` instead of from the list.
    #[serde(default)]
    pub continuous_snr: bool,
    /// Use `z = mu` during training even for stochastic variants.
    #[serde(default)]
    pub deterministic_latent: bool,
    /// Simulate channel corruption; when false receivers see the clean signal.
    #[serde(default = "yes")]
    pub channel_noise: bool,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Train on the first `n` training images only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Defaults for everything except the per-user setup.
    pub fn new(variant: Variant, tasks: Vec<TaskSpec>, channels: Vec<ChannelSpec>) -> Self {
        let model = ModelConfig::new(tasks.iter().map(TaskSpec::head).collect());
        TrainConfig {
            variant,
            model,
            tasks,
            channels,
            loss: LossConfig::default(),
            epochs: 120,
            batch_size: 128,
            snr_list: default_snr_list(),
            continuous_snr: false,
            deterministic_latent: false,
            channel_noise: true,
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            train_limit: None,
        }
    }

    pub fn n_users(&self) -> usize {
        self.tasks.len()
    }

    pub fn loss_weights(&self) -> LossWeights {
        let task = self.tasks.iter().map(|t| t.weight).collect();
        let mut w = LossWeights::new(task, self.loss.beta);
        if let Some(g) = &self.loss.gamma {
            w.gamma = g.clone();
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n = self.tasks.len();
        if n == 0 {
            return Err(Error::config("trainer.tasks", "need at least one task"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate(&format!("trainer.tasks[{i}]"))?;
        }
        let heads: Vec<_> = self.tasks.iter().map(TaskSpec::head).collect();
        if heads != self.model.heads {
            return Err(Error::config(
                "model.heads",
                format!("heads {:?} do not match tasks {:?}", self.model.heads, heads),
            ));
        }
        if self.channels.len() != n {
            return Err(Error::config(
                "trainer.channels",
                format!("expected {n} channels, got {}", self.channels.len()),
            ));
        }
        for (i, c) in self.channels.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::config(format!("trainer.channels[{i}]"), e.to_string()))?;
        }
        if self.epochs == 0 {
            return Err(Error::config("trainer.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be at least 1"));
        }
        if self.snr_list.is_empty() {
            return Err(Error::config("trainer.snr_list", "must not be empty"));
        }
        if let Some(s) = self.snr_list.iter().find(|s| !s.is_finite()) {
            return Err(Error::config("trainer.snr_list", format!("entries must be finite, got {s}")));
        }
        self.optimizer.validate("trainer.optimizer")?;
        self.loss_weights().validate()
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash12(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    fn latent_mode(&self, stream: RngStream) -> LatentMode {
        if self.variant.is_stochastic() && !self.deterministic_latent {
            LatentMode::Sample(stream)
        } else {
            LatentMode::Mean
        }
    }
}

/// Fields that differ between two configs, as `path: ours -> theirs` lines.
pub fn config_diff(ours: &TrainConfig, theirs: &TrainConfig, ignore: &[&str]) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    let null = serde_json::Value::Null;
                    walk(&p, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    let a = serde_json::to_value(ours).expect("config serializes");
    let b = serde_json::to_value(theirs).expect("config serializes");
    let mut out = Vec::new();
    walk("", &a, &b, &mut out);
    out.retain(|line| !ignore.iter().any(|p| line.starts_with(&format!("{p}:"))));
    out
}

/// Per-epoch summary; one JSON line in `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based epoch number.
    pub epoch: usize,
    pub steps: usize,
    pub samples: usize,
    /// Sample-weighted mean of the total objective.
    pub loss: f64,
    pub task_losses: Vec<f64>,
    pub kls: Vec<f64>,
    /// Training accuracy of each classification user.
    pub train_accuracy: Vec<Option<f64>>,
    pub mean_grad_norm: f64,
    pub clipped_steps: usize,
    /// Parameters that received no gradient during the epoch.
    pub untouched_params: Vec<String>,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    /// Equality on everything except wall time.
    pub fn same_outcome(&self, other: &EpochMetrics) -> bool {
        EpochMetrics {
            wall_time_s: 0.0,
            ..self.clone()
        } == EpochMetrics {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub snrs: Vec<f64>,
    pub breakdown: LossBreakdown,
    /// Correct predictions per user (0 for recovery users).
    pub correct: Vec<usize>,
    pub rows: usize,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Counter shared by all per-step random streams.
fn step_counter(epoch: usize, step: usize) -> u64 {
    ((epoch as u64) << 32) | step as u64
}

/// Draws one SNR per user for a step; each user has an independent stream.
pub fn sample_snrs(cfg: &TrainConfig, epoch: usize, step: usize) -> Vec<f64> {
    (0..cfg.n_users())
        .map(|u| {
            let mut rng = RngStream::new(cfg.seed, u as u32, Purpose::Snr)
                .at(step_counter(epoch, step))
                .rng();
            if cfg.continuous_snr {
                let lo = cfg.snr_list.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = cfg.snr_list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            } else {
                cfg.snr_list[rng.random_range(0..cfg.snr_list.len())]
            }
        })
        .collect()
}

/// Task losses and KL terms for one forward pass.
pub fn task_terms<T: Scalar>(
    g: &mut Graph<T>,
    pass: &ForwardPass,
    tasks: &[TaskSpec],
    batch: &Batch<T>,
) -> Result<(Vec<Var>, Vec<Option<Var>>)> {
    let mut losses = Vec::with_capacity(tasks.len());
    let mut kls = Vec::with_capacity(tasks.len());
    for (u, task) in tasks.iter().enumerate() {
        let out = pass.outputs[u];
        losses.push(match task.kind {
            TaskKind::Classify => g.cross_entropy(out, &batch.task_labels[u])?,
            TaskKind::Recover => g.l1_loss(out, &batch.images)?,
        });
        kls.push(match pass.stats[u] {
            Some(s) => Some(g.kl_std_normal(s.mu, s.sigma)?),
            None => None,
        });
    }
    Ok((losses, kls))
}

/// Predicted class per row.
pub fn argmax_rows<T: Scalar>(logits: &[T], n_label: usize) -> Vec<usize> {
    logits
        .chunks(n_label)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Graph of the training objective for one batch.
pub struct ObjectivePass<T: Scalar> {
    pub graph: Graph<T>,
    pub total: Var,
    pub pass: ForwardPass,
    pub breakdown: LossBreakdown,
}

/// Builds the training objective at fixed SNRs; noise and latent draws come
/// from streams keyed by `counter`, so the result is a deterministic function
/// of the parameters.
pub fn objective<T: Scalar>(
    model: &BroadcastModel,
    store: &ParameterStore<T>,
    cfg: &TrainConfig,
    batch: &Batch<T>,
    snrs: &[f64],
    counter: u64,
) -> Result<ObjectivePass<T>> {
    let channel = if cfg.channel_noise {
        ChannelMode::Simulate {
            specs: cfg.channels.clone(),
            stream: RngStream::new(cfg.seed, 0, Purpose::Noise).at(counter),
        }
    } else {
        ChannelMode::Bypass
    };
    let latent = cfg.latent_mode(RngStream::new(cfg.seed, 0, Purpose::Latent).at(counter));
    let mut g = Graph::new();
    let snr_vec = SnrVector::new(snrs.to_vec())?;
    let pass = model.forward(&mut g, store, &batch.images, &snr_vec, latent, &channel)?;
    let (losses, kls) = task_terms(&mut g, &pass, &cfg.tasks, batch)?;
    let (total, breakdown) = broadcast_ib_graph(&mut g, &losses, &kls, &cfg.loss_weights())?;
    Ok(ObjectivePass {
        graph: g,
        total,
        pass,
        breakdown,
    })
}

/// A model under training together with its parameters and optimizer.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: BroadcastModel,
    pub store: ParameterStore<T>,
    pub optimizer: Adam<T>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = BroadcastModel::build::<T>(cfg.variant, &cfg.model, cfg.seed)?;
        let optimizer = Adam::new(cfg.optimizer.clone(), &store);
        Ok(Trainer {
            cfg,
            model,
            store,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continues from `ckpt`; `cfg` may only differ in `epochs` and `checkpoint_every`.
    pub fn resume(ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        let diff = config_diff(&ckpt.train, &cfg, &["epochs", "checkpoint_every"]);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        cfg.validate()?;
        let model = ckpt.model()?;
        let optimizer = match ckpt.optimizer {
            Some(s) => Adam::from_state(cfg.optimizer.clone(), s.step, s.m, s.v),
            None => Adam::new(cfg.optimizer.clone(), &ckpt.store),
        };
        Ok(Trainer {
            cfg,
            model,
            store: ckpt.store,
            optimizer,
            epoch: ckpt.epoch,
            history: ckpt.metrics,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let (step, m, v) = self.optimizer.state();
        Checkpoint {
            train: self.cfg.clone(),
            epoch: self.epoch,
            metrics: self.history.clone(),
            store: self.store.clone(),
            optimizer: Some(OptimizerState {
                step,
                m: m.to_vec(),
                v: v.to_vec(),
            }),
        }
    }

    /// Forward, backward and update on one batch.
    pub fn train_step(&mut self, batch: &Batch<T>, epoch: usize, step: usize) -> Result<(StepRecord, Vec<bool>)> {
        let cfg = &self.cfg;
        let snrs = sample_snrs(cfg, epoch, step);
        let ObjectivePass {
            graph: g,
            total,
            pass,
            breakdown,
        } = objective(&self.model, &self.store, cfg, batch, &snrs, step_counter(epoch, step))?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                step,
                snrs,
                breakdown: breakdown.to_string(),
            });
        }
        let correct = cfg
            .tasks
            .iter()
            .enumerate()
            .map(|(u, t)| match t.kind {
                TaskKind::Classify => argmax_rows(g.value(pass.outputs[u]).data(), t.n_label())
                    .iter()
                    .zip(&batch.task_labels[u])
                    .filter(|(p, l)| p == l)
                    .count(),
                TaskKind::Recover => 0,
            })
            .collect();
        let grads = g.backward(total);
        let mut touched = vec![false; self.store.len()];
        for (id, grad) in grads.params() {
            if grad.iter().any(|v| *v != T::zero()) {
                touched[id.0] = true;
            }
        }
        let stats = self.optimizer.step(&mut self.store, &grads, epoch);
        Ok((
            StepRecord {
                snrs,
                breakdown,
                correct,
                rows: batch.len(),
                grad_norm: stats.grad_norm,
                clipped: stats.clipped,
            },
            touched,
        ))
    }

    /// Runs the next epoch. Batches are assembled by a producer thread feeding a bounded queue.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.epoch;
        let n = self.cfg.train_limit.map_or(ds.train.len(), |l| l.min(ds.train.len()));
        if n == 0 {
            return Err(Error::config("trainer.train_limit", "no training images selected"));
        }
        let order = epoch_order(n, self.cfg.seed, epoch as u64);
        let batch_size = self.cfg.batch_size;
        let n_users = self.cfg.n_users();
        let tasks = self.cfg.tasks.clone();
        let mut sums = LossBreakdown {
            task_losses: vec![0.0; n_users],
            kls: vec![0.0; n_users],
            total: 0.0,
        };
        let mut correct = vec![0usize; n_users];
        let mut touched = vec![false; self.store.len()];
        let (mut samples, mut steps, mut clipped, mut grad_norm) = (0usize, 0usize, 0usize, 0.0);

        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch<T>>>(2);
            let set = &ds.train;
            let tasks = &tasks;
            scope.spawn(move || {
                for chunk in order.chunks(batch_size) {
                    if tx.send(make_batch(set, tasks, chunk.to_vec())).is_err() {
                        break;
                    }
                }
            });
            for (step, batch) in rx.into_iter().enumerate() {
                let batch = batch?;
                let (rec, t) = self.train_step(&batch, epoch, step)?;
                let w = rec.rows as f64;
                for u in 0..n_users {
                    sums.task_losses[u] += w * rec.breakdown.task_losses[u];
                    sums.kls[u] += w * rec.breakdown.kls[u];
                    correct[u] += rec.correct[u];
                }
                sums.total += w * rec.breakdown.total;
                for (acc, hit) in touched.iter_mut().zip(t) {
                    *acc |= hit;
                }
                samples += rec.rows;
                steps += 1;
                clipped += rec.clipped as usize;
                grad_norm += rec.grad_norm;
            }
            Ok(())
        })?;
        debug_assert_eq!(steps, batch_count(n, batch_size));

        let ns = samples as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            steps,
            samples,
            loss: sums.total / ns,
            task_losses: sums.task_losses.iter().map(|v| v / ns).collect(),
            kls: sums.kls.iter().map(|v| v / ns).collect(),
            train_accuracy: self
                .cfg
                .tasks
                .iter()
                .zip(&correct)
                .map(|(t, &c)| (t.kind == TaskKind::Classify).then(|| c as f64 / ns))
                .collect(),
            mean_grad_norm: grad_norm / steps as f64,
            clipped_steps: clipped,
            untouched_params: touched
                .iter()
                .enumerate()
                .filter(|(_, &t)| !t)
                .map(|(i, _)| self.store.name(crate::params::ParamId(i)).to_string())
                .collect(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        self.history.push(metrics.clone());
        Ok(metrics)
    }
}

/// Output directory of one run: `<config hash>-<unix seconds>`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "train_config.json";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

impl RunDir {
    pub fn create(parent: &Path, cfg: &TrainConfig) -> Result<Self> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut path = parent.join(format!("{}-{ts}", cfg.hash12()));
        let mut k = 1;
        while path.exists() {
            path = parent.join(format!("{}-{ts}.{k}", cfg.hash12()));
            k += 1;
        }
        fs::create_dir_all(&path)?;
        fs::write(path.join(CONFIG_FILE), serde_json::to_string_pretty(cfg).expect("serializes"))?;
        Ok(RunDir { path })
    }

    /// Wraps an existing run directory, e.g. when resuming.
    pub fn open(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::Other(format!("run directory {} does not exist", path.display())));
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn append_metrics(&self, m: &EpochMetrics) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path.join(METRICS_FILE))?;
        writeln!(f, "{}", serde_json::to_string(m).expect("serializes"))?;
        Ok(())
    }

    pub fn read_metrics(&self) -> Result<Vec<EpochMetrics>> {
        let text = fs::read_to_string(self.path.join(METRICS_FILE))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Other(format!("bad metrics line: {e}"))))
            .collect()
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.path.join(format!("epoch-{epoch:04}.ckpt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.path.join(LATEST_CHECKPOINT)
    }
}

/// Trains until `trainer.cfg.epochs`, logging and checkpointing into `run` if given.
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    ds: &Dataset,
    run: Option<&RunDir>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<()> {
    while trainer.epoch < trainer.cfg.epochs {
        let m = trainer.run_epoch(ds)?;
        on_epoch(&m);
        if let Some(run) = run {
            run.append_metrics(&m)?;
            let every = trainer.cfg.checkpoint_every;
            let last = trainer.epoch == trainer.cfg.epochs;
            if last || (every > 0 && trainer.epoch.is_multiple_of(every)) {
                let ckpt = trainer.checkpoint();
                if every > 0 && trainer.epoch.is_multiple_of(every) {
                    ckpt.save(&run.checkpoint_path(trainer.epoch))?;
                }
                ckpt.save(&run.latest())?;
            }
        }
    }
    Ok(())
}

/// Fresh training run.
pub fn train<T: Scalar>(cfg: TrainConfig, ds: &Dataset, run: Option<&RunDir>) -> Result<Checkpoint<T>> {
    let mut trainer = Trainer::new(cfg)?;
    fit(&mut trainer, ds, run, |_| {})?;
    Ok(trainer.checkpoint())
}

/// Continues `ckpt` up to `cfg.epochs`.
pub fn resume<T: Scalar>(ckpt: Checkpoint<T>, cfg: TrainConfig, ds: &Dataset, run: Option<&RunDir>) -> Result<Checkpoint<T>> {
    let mut trainer = Trainer::resume(ckpt, cfg)?;
    fit(&mut trainer, ds, run, |_| {})?;
    Ok(trainer.checkpoint())
}

/// Opens `path` for writing, creating parents.
pub(crate) fn create_file(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(File::create(path)?)
}
