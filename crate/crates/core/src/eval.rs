//! SNR sweeps, accuracy and PSNR metrics, variant comparison and charts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chansim::{ChannelSpec, Purpose, RngStream};
use crate::checkpoint::Checkpoint;
use crate::data::{make_batch, ImageSet, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::{BroadcastModel, ChannelMode, LatentMode, SnrVector, Variant};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::trainer::argmax_rows;

/// Reported PSNR for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const CSV_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Psnr,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Psnr => "psnr",
        }
    }
}

/// One point of a curve. Column order is the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: Variant,
    pub user: usize,
    pub task: u32,
    pub snr_db: f64,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of the per-repeat values.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: Vec<f64>,
    pub repeats: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate the first `n` test images only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl EvalConfig {
    pub fn new(grid: Vec<f64>) -> Self {
        EvalConfig {
            grid,
            repeats: 5,
            batch_size: 256,
            seed: 1,
            test_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("eval.grid", "must not be empty"));
        }
        if let Some(s) = self.grid.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return Err(Error::config("eval.grid", format!("invalid SNR {s}")));
        }
        if self.repeats == 0 {
            return Err(Error::config("eval.repeats", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `lo:hi:step` in dB, both ends inclusive.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::config("grid", format!("expected lo:hi:step, got `{s}`"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || hi < lo || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| lo + step * k as f64).collect())
}

/// `-5..31` dB in 2 dB steps.
pub fn wide_grid() -> Vec<f64> {
    (0..19).map(|k| -5.0 + 2.0 * k as f64).collect()
}

/// `-5..19` dB in 2 dB steps.
pub fn narrow_grid() -> Vec<f64> {
    (0..13).map(|k| -5.0 + 2.0 * k as f64).collect()
}

/// `-10 log10(MSE)` of two `[0, 1]` images, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr of images with different sizes");
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Everything needed to run a trained model.
pub struct Evaluator<'a, T: Scalar> {
    pub model: &'a BroadcastModel,
    pub store: &'a ParameterStore<T>,
    pub tasks: &'a [TaskSpec],
    pub channels: &'a [ChannelSpec],
    /// SNR fed to the encoders at a noiseless grid point.
    pub noiseless_condition_db: f64,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    /// Noiseless points condition the encoders on the top of the training SNR range.
    pub fn from_checkpoint(ckpt: &'a Checkpoint<T>, model: &'a BroadcastModel) -> Self {
        let cap = ckpt.train.snr_list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Evaluator {
            model,
            store: &ckpt.store,
            tasks: &ckpt.train.tasks,
            channels: &ckpt.train.channels,
            noiseless_condition_db: cap,
        }
    }

    /// Per-user metric values (accuracy or mean PSNR) for one pass over `set`
    /// with every user at `snr_db`.
    pub fn pass(&self, set: &ImageSet, n: usize, snr_db: f64, batch_size: usize, stream: RngStream) -> Result<Vec<f64>> {
        let (cond, specs) = if snr_db == f64::INFINITY {
            let specs: Vec<_> = self.channels.iter().map(|c| c.with_snr(f64::INFINITY)).collect();
            (self.noiseless_condition_db, specs)
        } else {
            (snr_db, self.channels.to_vec())
        };
        self.run(set, n, cond, batch_size, |b| ChannelMode::Simulate {
            specs: specs.clone(),
            stream: stream.at(stream.counter + b as u64),
        })
    }

    /// Metric values with the channel bypassed entirely.
    pub fn noiseless_pass(&self, set: &ImageSet, n: usize, batch_size: usize) -> Result<Vec<f64>> {
        self.run(set, n, self.noiseless_condition_db, batch_size, |_| ChannelMode::Bypass)
    }

    fn run(
        &self,
        set: &ImageSet,
        n: usize,
        cond_db: f64,
        batch_size: usize,
        channel: impl Fn(usize) -> ChannelMode,
    ) -> Result<Vec<f64>> {
        let n_users = self.tasks.len();
        let snrs = SnrVector::uniform(n_users, cond_db)?;
        let mut sums = vec![0.0; n_users];
        let indices: Vec<usize> = (0..n).collect();
        for (b, chunk) in indices.chunks(batch_size).enumerate() {
            let batch = make_batch::<T>(set, self.tasks, chunk.to_vec())?;
            let mut g = Graph::new();
            let pass = self.model.forward(&mut g, self.store, &batch.images, &snrs, LatentMode::Mean, &channel(b))?;
            for (u, task) in self.tasks.iter().enumerate() {
                let out = g.value(pass.outputs[u]).data();
                sums[u] += match task.kind {
                    TaskKind::Classify => argmax_rows(out, task.n_label())
                        .iter()
                        .zip(&batch.task_labels[u])
                        .filter(|(p, l)| p == l)
                        .count() as f64,
                    TaskKind::Recover => {
                        let len = out.len() / batch.len();
                        out.chunks(len)
                            .zip(batch.images.data().chunks(len))
                            .map(|(a, b)| psnr(a, b))
                            .sum()
                    }
                };
            }
        }
        Ok(sums.into_iter().map(|s| s / n as f64).collect())
    }

    /// Metrics for every user at every grid point.
    pub fn sweep(&self, variant: Variant, set: &ImageSet, cfg: &EvalConfig) -> Result<SweepResult> {
        cfg.validate()?;
        let n = cfg.test_limit.map_or(set.len(), |l| l.min(set.len()));
        if n == 0 {
            return Err(Error::config("eval.test_limit", "no test images selected"));
        }
        let mut records = Vec::new();
        for (gi, &snr) in cfg.grid.iter().enumerate() {
            // a noiseless point has nothing random to repeat
            let repeats = if snr == f64::INFINITY { 1 } else { cfg.repeats };
            let mut per_user = vec![Vec::with_capacity(repeats); self.tasks.len()];
            for r in 0..repeats {
                let stream = RngStream::new(cfg.seed, 0, Purpose::Noise).at(((gi as u64) << 40) | ((r as u64) << 24));
                for (u, v) in self.pass(set, n, snr, cfg.batch_size, stream)?.into_iter().enumerate() {
                    per_user[u].push(v);
                }
            }
            for (u, vals) in per_user.iter().enumerate() {
                let (value, std) = mean_std(vals);
                records.push(MetricsRecord {
                    variant,
                    user: u,
                    task: self.tasks[u].task_id,
                    snr_db: snr,
                    metric: match self.tasks[u].kind {
                        TaskKind::Classify => Metric::Accuracy,
                        TaskKind::Recover => Metric::Psnr,
                    },
                    value,
                    n: n * repeats,
                    seed: cfg.seed,
                    std,
                });
            }
        }
        Ok(SweepResult::new(records))
    }

    /// Accuracy curve of one classification user.
    pub fn evaluate_accuracy(&self, variant: Variant, set: &ImageSet, user: usize, cfg: &EvalConfig) -> Result<Vec<MetricsRecord>> {
        self.user_curve(variant, set, user, cfg, TaskKind::Classify)
    }

    /// PSNR curve of one recovery user.
    pub fn evaluate_psnr(&self, variant: Variant, set: &ImageSet, user: usize, cfg: &EvalConfig) -> Result<Vec<MetricsRecord>> {
        self.user_curve(variant, set, user, cfg, TaskKind::Recover)
    }

    fn user_curve(&self, variant: Variant, set: &ImageSet, user: usize, cfg: &EvalConfig, kind: TaskKind) -> Result<Vec<MetricsRecord>> {
        let task = self.tasks.get(user).ok_or(Error::UnknownUser {
            index: user,
            n_users: self.tasks.len(),
        })?;
        if task.kind != kind {
            return Err(Error::config(
                "eval.user",
                format!("user {user} runs a {:?} task, not {kind:?}", task.kind),
            ));
        }
        Ok(self
            .sweep(variant, set, cfg)?
            .records
            .into_iter()
            .filter(|r| r.user == user)
            .collect())
    }
}

/// Key of one curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CurveKey {
    pub variant: Variant,
    pub user: usize,
    pub task: u32,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    /// Sorted by (variant, user, snr).
    pub records: Vec<MetricsRecord>,
}

impl SweepResult {
    pub fn new(mut records: Vec<MetricsRecord>) -> Self {
        records.sort_by(|a, b| {
            (a.variant, a.user)
                .cmp(&(b.variant, b.user))
                .then(a.snr_db.total_cmp(&b.snr_db))
        });
        SweepResult { records }
    }

    pub fn merge(results: &[SweepResult]) -> Self {
        Self::new(results.iter().flat_map(|r| r.records.iter().cloned()).collect())
    }

    pub fn curves(&self) -> BTreeMap<CurveKey, Vec<&MetricsRecord>> {
        let mut out: BTreeMap<CurveKey, Vec<&MetricsRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(CurveKey {
                variant: r.variant,
                user: r.user,
                task: r.task,
                metric: r.metric,
            })
            .or_default()
            .push(r);
        }
        out
    }

    /// Arithmetic mean over the curve's grid points (the legend number).
    pub fn average(&self, key: &CurveKey) -> Option<f64> {
        let curves = self.curves();
        let pts = curves.get(key)?;
        Some(pts.iter().map(|r| r.value).sum::<f64>() / pts.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Other(format!("{}: {e}", path.display())))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Other(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Ingestion {
            file: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let records = rd
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
            .map_err(|e| Error::Ingestion {
                file: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(Self::new(records))
    }
}

/// Per-variant averages and gaps against a reference variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference: Variant,
    /// `(user, task, metric)` columns.
    pub columns: Vec<(usize, u32, Metric)>,
    pub grid: Vec<f64>,
    /// Legend averages, one row per variant in input order.
    pub averages: Vec<(Variant, Vec<f64>)>,
    /// `reference - other` at each grid point, per column.
    pub gaps: Vec<(Variant, Vec<Vec<f64>>)>,
}

/// The first result is the reference; all must share grid and tasks.
pub fn compare_variants(results: &[SweepResult]) -> Result<Comparison> {
    let first = results.first().ok_or_else(|| Error::Other("nothing to compare".into()))?;
    let layout = |r: &SweepResult| -> Result<(Variant, BTreeMap<(usize, u32, Metric), Vec<(f64, f64)>>)> {
        let variants: BTreeSet<Variant> = r.records.iter().map(|x| x.variant).collect();
        if variants.len() != 1 {
            return Err(Error::Other(format!(
                "each sweep must hold exactly one variant, found {}",
                variants.len()
            )));
        }
        let mut cols: BTreeMap<_, Vec<(f64, f64)>> = BTreeMap::new();
        for x in &r.records {
            cols.entry((x.user, x.task, x.metric)).or_default().push((x.snr_db, x.value));
        }
        Ok((*variants.iter().next().expect("one variant"), cols))
    };
    let (reference, ref_cols) = layout(first)?;
    let columns: Vec<_> = ref_cols.keys().copied().collect();
    let grid: Vec<f64> = ref_cols.values().next().map(|v| v.iter().map(|p| p.0).collect()).unwrap_or_default();
    let mut averages = Vec::new();
    let mut gaps = Vec::new();
    for r in results {
        let (variant, cols) = layout(r)?;
        if cols.keys().copied().collect::<Vec<_>>() != columns {
            return Err(Error::Other(format!(
                "{} evaluates different users or tasks than {}",
                variant.label(),
                reference.label()
            )));
        }
        let mut avg = Vec::new();
        let mut gap = Vec::new();
        for (key, pts) in &cols {
            let snrs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            if snrs != grid {
                return Err(Error::Other(format!(
                    "{} was swept on a different SNR grid than {}",
                    variant.label(),
                    reference.label()
                )));
            }
            avg.push(pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64);
            gap.push(ref_cols[key].iter().zip(pts).map(|(a, b)| a.1 - b.1).collect());
        }
        averages.push((variant, avg));
        gaps.push((variant, gap));
    }
    Ok(Comparison {
        reference,
        columns,
        grid,
        averages,
        gaps,
    })
}

fn fmt_value(metric: Metric, v: f64) -> String {
    match metric {
        Metric::Accuracy => format!("{:.2}%", 100.0 * v),
        Metric::Psnr => format!("{v:.2} dB"),
    }
}

impl Comparison {
    /// Markdown tables: averages, then gaps per SNR.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let head: Vec<String> = self
            .columns
            .iter()
            .map(|(u, t, m)| format!("user {u} task {t} {}", m.as_str()))
            .collect();
        let _ = writeln!(s, "| variant | {} |", head.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(head.len()));
        for (v, avg) in &self.averages {
            let cells: Vec<String> = avg.iter().zip(&self.columns).map(|(&a, c)| fmt_value(c.2, a)).collect();
            let _ = writeln!(s, "| {} | {} |", v.label(), cells.join(" | "));
        }
        for (ci, (u, t, m)) in self.columns.iter().enumerate() {
            let _ = writeln!(
                s,
                "\n{} minus other, user {u} task {t} {}:\n",
                self.reference.label(),
                m.as_str()
            );
            let snrs: Vec<String> = self.grid.iter().map(|x| format!("{x}")).collect();
            let _ = writeln!(s, "| variant | {} |", snrs.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(snrs.len()));
            for (v, gap) in self.gaps.iter().skip(1) {
                let cells: Vec<String> = gap[ci]
                    .iter()
                    .map(|&g| match m {
                        Metric::Accuracy => format!("{:+.2}", 100.0 * g),
                        Metric::Psnr => format!("{g:+.2}"),
                    })
                    .collect();
                let _ = writeln!(s, "| {} | {} |", v.label(), cells.join(" | "));
            }
        }
        s
    }
}

const PALETTE: [plotters::style::RGBColor; 7] = [
    plotters::style::RGBColor(214, 39, 40),
    plotters::style::RGBColor(31, 119, 180),
    plotters::style::RGBColor(44, 160, 44),
    plotters::style::RGBColor(255, 127, 14),
    plotters::style::RGBColor(148, 103, 189),
    plotters::style::RGBColor(140, 86, 75),
    plotters::style::RGBColor(23, 190, 207),
];

/// One SVG chart per `(user, task, metric)` with a curve per variant, plus the CSV.
pub fn emit_plots(results: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    use plotters::prelude::*;

    if results.records.is_empty() {
        return Err(Error::Other("no results to plot".into()));
    }
    fs::create_dir_all(out_dir)?;
    let curves = results.curves();
    let mut charts: BTreeMap<(usize, u32, Metric), Vec<(CurveKey, Vec<(f64, f64)>)>> = BTreeMap::new();
    for (key, pts) in &curves {
        let finite = pts.iter().filter(|r| r.snr_db.is_finite()).map(|r| (r.snr_db, r.value)).collect();
        charts.entry((key.user, key.task, key.metric)).or_default().push((*key, finite));
    }
    let mut files = Vec::new();
    for ((user, task, metric), series) in &charts {
        let path = out_dir.join(format!("user{user}_task{task}_{}.svg", metric.as_str()));
        let scale = if *metric == Metric::Accuracy { 100.0 } else { 1.0 };
        let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
        let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (mut y0, mut y1) = all
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1 * scale), a.1.max(p.1 * scale)));
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        let pad = ((y1 - y0) * 0.1).max(0.5);
        let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
            let root = SVGBackend::new(&path, (720, 480)).into_drawing_area();
            root.fill(&WHITE)?;
            let title = format!("user {user} (task {task})");
            let mut chart = ChartBuilder::on(&root)
                .caption(title, ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(40)
                .y_label_area_size(56)
                .build_cartesian_2d(x0 - 0.5..x1 + 0.5, y0 - pad..y1 + pad)?;
            chart
                .configure_mesh()
                .x_desc("SNR (dB)")
                .y_desc(match metric {
                    Metric::Accuracy => "accuracy (%)",
                    Metric::Psnr => "PSNR (dB)",
                })
                .draw()?;
            for (i, (key, pts)) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                // the noiseless point is not drawn, so it stays out of the legend
                let avg = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
                let label = format!("{}/{}", key.variant.label(), fmt_value(*metric, avg));
                let scaled: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1 * scale)).collect();
                chart
                    .draw_series(LineSeries::new(scaled.clone(), color.stroke_width(2)))?
                    .label(label)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
                chart.draw_series(scaled.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
            }
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::LowerRight)
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()?;
            root.present()?;
            Ok(())
        };
        draw().map_err(|e| Error::Other(format!("failed to draw {}: {e}", path.display())))?;
        files.push(path);
    }
    let csv_path = out_dir.join(CSV_FILE);
    results.write_csv(&csv_path)?;
    files.push(csv_path);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(variant: Variant, user: usize, task: u32, snr: f64, value: f64) -> MetricsRecord {
        MetricsRecord {
            variant,
            user,
            task,
            snr_db: snr,
            metric: Metric::Accuracy,
            value,
            n: 100,
            seed: 1,
            std: 0.0,
        }
    }

    fn sweep(variant: Variant, offset: f64) -> SweepResult {
        let mut r = Vec::new();
        for (u, t) in [(0, 1), (1, 2)] {
            for (k, snr) in [-5.0, 7.0, 19.0].into_iter().enumerate() {
                r.push(rec(variant, u, t, snr, 0.5 + 0.1 * k as f64 + offset));
            }
        }
        SweepResult::new(r)
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.3f64; 12];
        assert_eq!(psnr(&a, &a), PSNR_CAP_DB);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("-5:19:2").unwrap(), narrow_grid());
        assert_eq!(parse_grid("-5:31:2").unwrap(), wide_grid());
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("1:0:1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn legend_average_is_mean_of_points() {
        let s = sweep(Variant::Deepbroadcast, 0.0);
        let key = CurveKey {
            variant: Variant::Deepbroadcast,
            user: 1,
            task: 2,
            metric: Metric::Accuracy,
        };
        assert!((s.average(&key).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_have_zero_gaps() {
        let a = sweep(Variant::Deepbroadcast, 0.0);
        let c = compare_variants(&[a.clone(), a]).unwrap();
        assert!(c.gaps.iter().all(|(_, g)| g.iter().flatten().all(|&x| x == 0.0)));
    }

    #[test]
    fn gaps_and_mismatched_grids() {
        let a = sweep(Variant::Deepbroadcast, 0.05);
        let b = sweep(Variant::Mtoc, 0.0);
        let c = compare_variants(&[a.clone(), b]).unwrap();
        assert!(c.gaps[1].1.iter().flatten().all(|&g| (g - 0.05).abs() < 1e-12));
        assert!(c.to_markdown().contains("MTOC"));
        let mut short = sweep(Variant::Mtoc, 0.0);
        short.records.retain(|r| r.snr_db != 7.0);
        assert!(compare_variants(&[a, short]).is_err());
    }

    #[test]
    fn plots_and_csv_files() {
        let dir = tempfile::tempdir().unwrap();
        let merged = SweepResult::merge(&[sweep(Variant::Deepbroadcast, 0.0), sweep(Variant::Mtoc, -0.1)]);
        let files = emit_plots(&merged, dir.path()).unwrap();
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "svg").count(), 2);
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "csv").count(), 1);
        let text = fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
        assert!(text.starts_with("variant,user,task,snr_db,metric,value,n,seed,std\n"));
        assert_eq!(SweepResult::read_csv(&dir.path().join(CSV_FILE)).unwrap(), merged);
        let svg = fs::read_to_string(&files[0]).unwrap();
        assert!(svg.contains("DeepBroadcast/"));
    }

    #[test]
    fn empty_results_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plots");
        assert!(emit_plots(&SweepResult::default(), &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn infinite_snr_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let s = SweepResult::new(vec![rec(Variant::Mtoc, 0, 1, f64::INFINITY, 0.9)]);
        let p = dir.path().join("x.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(SweepResult::read_csv(&p).unwrap(), s);
    }
}
