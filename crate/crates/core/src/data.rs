//! CIFAR-10 ingestion, per-task label maps and seeded mini-batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chansim::{Purpose, RngStream};
use crate::error::{Error, Result};
use crate::net::Head;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const N_CLASSES: usize = 10;
pub const TRAIN_LEN: usize = 50_000;
pub const TEST_LEN: usize = 10_000;

const RECORD_LEN: usize = 1 + IMAGE_LEN;
const BATCH_RECORDS: usize = 10_000;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Default positive set for the binary "animal" task.
pub const ANIMALS: [usize; 6] = [2, 3, 4, 5, 6, 7];
/// Default positive set for the binary "small ground entity" task.
pub const SMALL_GROUND: [usize; 4] = [1, 3, 5, 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One split as raw bytes in CHW order, one `IMAGE_LEN` record per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_LEN {
            return Err(Error::shape(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                n_label: N_CLASSES,
            });
        }
        Ok(ImageSet { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// First `n` items (or all of them).
    pub fn truncated(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        ImageSet {
            pixels: self.pixels[..n * IMAGE_LEN].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// `(B, 3, 32, 32)` tensor of the given items scaled to `[0, 1]`.
    pub fn tensor<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| normalize::<T>(p)));
        }
        Tensor::from_vec(&[indices.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)
            .expect("image record length is fixed")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: ImageSet,
    pub test: ImageSet,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &ImageSet {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Keeps the first `n_train` / `n_test` items of each split.
    pub fn truncated(&self, n_train: usize, n_test: usize) -> Dataset {
        Dataset {
            train: self.train.truncated(n_train),
            test: self.test.truncated(n_test),
        }
    }

    /// Procedural CIFAR-shaped data with class-dependent colour and stripe
    /// patterns plus pixel noise; small models learn it in a few epochs.
    pub fn synthetic(n_train: usize, n_test: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, u32::MAX, Purpose::Shuffle).rng();
        let mut make = |n: usize| {
            let noise = Normal::new(0.0, 0.12).expect("valid std");
            let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let c = rng.random_range(0..N_CLASSES);
                labels.push(c as u8);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = 1.0 + (c % 5) as f64;
                let vertical = c >= 5;
                for ch in 0..IMAGE_CHANNELS {
                    let base = 0.2 + 0.6 * (((c * 7 + ch * 3) % 10) as f64 / 9.0);
                    for y in 0..IMAGE_SIDE {
                        for x in 0..IMAGE_SIDE {
                            let t = if vertical { x } else { y } as f64 / IMAGE_SIDE as f64;
                            let stripe = 0.25 * (std::f64::consts::TAU * freq * t + phase).sin();
                            let v = base + stripe + noise.sample(&mut rng);
                            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                        }
                    }
                }
            }
            ImageSet { pixels, labels }
        };
        let train = make(n_train);
        let test = make(n_test);
        Dataset { train, test }
    }
}

pub fn normalize<T: Scalar>(p: u8) -> T {
    T::lit(p as f64 / 255.0)
}

pub fn denormalize<T: Scalar>(x: T) -> u8 {
    (x.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads the binary CIFAR-10 distribution from `dir` or `dir/cifar-10-batches-bin`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if nested.join(TEST_FILE).exists() { nested } else { dir.to_path_buf() };
    let mut train = ImageSet {
        pixels: Vec::with_capacity(TRAIN_LEN * IMAGE_LEN),
        labels: Vec::with_capacity(TRAIN_LEN),
    };
    for name in TRAIN_FILES {
        read_batch_file(&root.join(name), &mut train)?;
    }
    let mut test = ImageSet {
        pixels: Vec::with_capacity(TEST_LEN * IMAGE_LEN),
        labels: Vec::with_capacity(TEST_LEN),
    };
    read_batch_file(&root.join(TEST_FILE), &mut test)?;
    Ok(Dataset { train, test })
}

fn read_batch_file(path: &PathBuf, into: &mut ImageSet) -> Result<()> {
    let fail = |message: String| Error::Ingestion {
        file: path.clone(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    if bytes.len() != BATCH_RECORDS * RECORD_LEN {
        return Err(fail(format!(
            "expected {} bytes ({} records of {}), found {}",
            BATCH_RECORDS * RECORD_LEN,
            BATCH_RECORDS,
            RECORD_LEN,
            bytes.len()
        )));
    }
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] as usize >= N_CLASSES {
            return Err(fail(format!("record {i} has label {}", rec[0])));
        }
        into.labels.push(rec[0]);
        into.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelMap {
    /// 10-class labels unchanged.
    Identity,
    /// 1 for classes in `positive`, 0 otherwise.
    Binary { positive: Vec<usize> },
    /// Explicit table indexed by class.
    Table { labels: Vec<usize> },
}

impl LabelMap {
    pub fn animals() -> Self {
        LabelMap::Binary {
            positive: ANIMALS.to_vec(),
        }
    }

    pub fn small_ground() -> Self {
        LabelMap::Binary {
            positive: SMALL_GROUND.to_vec(),
        }
    }

    pub fn n_label(&self) -> usize {
        match self {
            LabelMap::Identity => N_CLASSES,
            LabelMap::Binary { .. } => 2,
            LabelMap::Table { labels } => labels.iter().max().map_or(0, |m| m + 1),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        match self {
            LabelMap::Identity => Ok(()),
            LabelMap::Binary { positive } => {
                if let Some(c) = positive.iter().find(|&&c| c >= N_CLASSES) {
                    return Err(Error::config(path, format!("class {c} outside 0-9")));
                }
                if positive.is_empty() || positive.len() == N_CLASSES {
                    return Err(Error::config(path, "binary map needs both classes present"));
                }
                Ok(())
            }
            LabelMap::Table { labels } => {
                if labels.len() != N_CLASSES {
                    return Err(Error::config(
                        path,
                        format!("table must have 10 entries, got {}", labels.len()),
                    ));
                }
                if self.n_label() < 2 {
                    return Err(Error::config(path, "table must produce at least two labels"));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, class: usize) -> Result<usize> {
        if class >= N_CLASSES {
            return Err(Error::LabelOutOfRange {
                label: class,
                n_label: N_CLASSES,
            });
        }
        Ok(match self {
            LabelMap::Identity => class,
            LabelMap::Binary { positive } => positive.contains(&class) as usize,
            LabelMap::Table { labels } => labels[class],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    Recover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: u32,
    pub kind: TaskKind,
    #[serde(default = "identity_map")]
    pub label_map: LabelMap,
    pub weight: f64,
}

fn identity_map() -> LabelMap {
    LabelMap::Identity
}

impl TaskSpec {
    pub fn classify(task_id: u32, label_map: LabelMap, weight: f64) -> Self {
        TaskSpec {
            task_id,
            kind: TaskKind::Classify,
            label_map,
            weight,
        }
    }

    pub fn recover(task_id: u32, weight: f64) -> Self {
        TaskSpec {
            task_id,
            kind: TaskKind::Recover,
            label_map: LabelMap::Identity,
            weight,
        }
    }

    /// Binary animal vs rest.
    pub fn task1(weight: f64) -> Self {
        Self::classify(1, LabelMap::animals(), weight)
    }

    /// Binary small ground entity vs rest.
    pub fn task2(weight: f64) -> Self {
        Self::classify(2, LabelMap::small_ground(), weight)
    }

    /// 10-class classification.
    pub fn task3(weight: f64) -> Self {
        Self::classify(3, LabelMap::Identity, weight)
    }

    pub fn n_label(&self) -> usize {
        self.label_map.n_label()
    }

    pub fn head(&self) -> Head {
        match self.kind {
            TaskKind::Classify => Head::Classify {
                n_label: self.n_label(),
            },
            TaskKind::Recover => Head::Recover,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::config(
                format!("{path}.weight"),
                format!("must be nonnegative, got {}", self.weight),
            ));
        }
        if self.kind == TaskKind::Classify {
            self.label_map.validate(&format!("{path}.label_map"))?;
        }
        Ok(())
    }
}

/// Applies `spec`'s label map to every 10-class label.
pub fn map_task_labels(labels10: &[u8], spec: &TaskSpec) -> Result<Vec<usize>> {
    labels10.iter().map(|&l| spec.label_map.apply(l as usize)).collect()
}

/// Shuffled visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(seed, 0, Purpose::Shuffle).at(epoch).rng());
    order
}

pub fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels10: Vec<u8>,
    /// One label vector per task; empty for recovery tasks.
    pub task_labels: Vec<Vec<usize>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Assembles the batch for `indices`.
pub fn make_batch<T: Scalar>(set: &ImageSet, tasks: &[TaskSpec], indices: Vec<usize>) -> Result<Batch<T>> {
    let images = set.tensor(&indices);
    let labels10: Vec<u8> = indices.iter().map(|&i| set.labels[i]).collect();
    let task_labels = tasks
        .iter()
        .map(|t| match t.kind {
            TaskKind::Classify => map_task_labels(&labels10, t),
            TaskKind::Recover => Ok(Vec::new()),
        })
        .collect::<Result<_>>()?;
    Ok(Batch {
        indices,
        images,
        labels10,
        task_labels,
    })
}

/// Iterator over the mini-batches of one epoch, final partial batch included.
pub struct Batches<'a, T: Scalar> {
    set: &'a ImageSet,
    tasks: &'a [TaskSpec],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Batches<'a, T> {
    /// Seeded shuffle of `set` for `epoch`.
    pub fn shuffled(set: &'a ImageSet, tasks: &'a [TaskSpec], batch_size: usize, seed: u64, epoch: u64) -> Self {
        Self::with_order(set, tasks, batch_size, epoch_order(set.len(), seed, epoch))
    }

    /// Items in stored order.
    pub fn sequential(set: &'a ImageSet, tasks: &'a [TaskSpec], batch_size: usize) -> Self {
        Self::with_order(set, tasks, batch_size, (0..set.len()).collect())
    }

    fn with_order(set: &'a ImageSet, tasks: &'a [TaskSpec], batch_size: usize, order: Vec<usize>) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        Batches {
            set,
            tasks,
            order,
            batch_size,
            pos: 0,
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn n_batches(&self) -> usize {
        batch_count(self.order.len(), self.batch_size)
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(make_batch(self.set, self.tasks, indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_batch(path: &Path, records: usize, label: u8) {
        let mut f = fs::File::create(path).unwrap();
        for i in 0..records {
            let mut rec = vec![0u8; RECORD_LEN];
            rec[0] = label;
            rec[1] = (i % 256) as u8;
            f.write_all(&rec).unwrap();
        }
    }

    fn write_fake_cifar(dir: &Path) {
        for (k, name) in TRAIN_FILES.iter().enumerate() {
            write_batch(&dir.join(name), BATCH_RECORDS, k as u8);
        }
        write_batch(&dir.join(TEST_FILE), BATCH_RECORDS, 9);
    }

    #[test]
    fn loads_standard_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path());
        let ds = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds.train.len(), TRAIN_LEN);
        assert_eq!(ds.test.len(), TEST_LEN);
        assert_eq!(ds.train.labels()[0], 0);
        assert_eq!(ds.train.labels()[TRAIN_LEN - 1], 4);
        assert_eq!(ds.train.image(3)[0], 3);
        let t: Tensor<f32> = ds.test.tensor(&[0, 1]);
        assert_eq!(t.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn truncated_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path());
        let f = dir.path().join("data_batch_3.bin");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 10]).unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::Ingestion { file, .. }) => assert!(file.ends_with("data_batch_3.bin")),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"));
    }

    #[test]
    fn default_label_maps() {
        let t1 = TaskSpec::task1(1.0);
        let t2 = TaskSpec::task2(1.0);
        let t3 = TaskSpec::task3(1.0);
        assert_eq!(map_task_labels(&[3], &t1).unwrap(), vec![1]);
        assert_eq!(map_task_labels(&[0], &t1).unwrap(), vec![0]);
        let all: Vec<u8> = (0..10).collect();
        assert_eq!(map_task_labels(&all, &t3).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(
            map_task_labels(&all, &t2).unwrap(),
            vec![0, 1, 0, 1, 0, 1, 0, 0, 0, 1]
        );
        assert!(matches!(map_task_labels(&[10], &t1), Err(Error::LabelOutOfRange { .. })));
        assert_eq!(t1.head(), Head::Classify { n_label: 2 });
        assert_eq!(t3.head(), Head::Classify { n_label: 10 });
    }

    #[test]
    fn batch_count_includes_partial() {
        assert_eq!(batch_count(TRAIN_LEN, 128), 391);
        let ds = Dataset::synthetic(50, 0, 1);
        let tasks = [TaskSpec::task1(1.0), TaskSpec::recover(0, 1.0)];
        let b: Vec<_> = Batches::<f32>::shuffled(&ds.train, &tasks, 16, 3, 0)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[3].len(), 2);
        assert_eq!(b[0].images.shape(), &[16, 3, 32, 32]);
        assert_eq!(b[0].task_labels.len(), 2);
        assert_eq!(b[0].task_labels[0].len(), 16);
        assert!(b[0].task_labels[1].is_empty());
    }

    #[test]
    fn epoch_visits_every_item_once_and_is_seeded() {
        let a = epoch_order(1000, 5, 2);
        assert_eq!(a, epoch_order(1000, 5, 2));
        assert_ne!(a, epoch_order(1000, 5, 3));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn label_counts_survive_reshuffle() {
        let ds = Dataset::synthetic(300, 0, 2);
        let task = [TaskSpec::task2(1.0)];
        let count = |epoch| {
            let mut c = [0usize; 2];
            for b in Batches::<f32>::shuffled(&ds.train, &task, 7, 1, epoch) {
                for &l in &b.unwrap().task_labels[0] {
                    c[l] += 1;
                }
            }
            c
        };
        assert_eq!(count(0), count(1));
    }

    #[test]
    fn pixel_round_trip() {
        for p in 0..=255u8 {
            assert_eq!(denormalize(normalize::<f32>(p)), p);
            assert_eq!(denormalize(normalize::<f64>(p)), p);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = Dataset::synthetic(20, 5, 9);
        assert_eq!(a, Dataset::synthetic(20, 5, 9));
        assert_eq!(a.test.len(), 5);
        let t: Tensor<f64> = a.train.tensor(&[0, 1, 2]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn label_map_validation() {
        assert!(LabelMap::Binary { positive: vec![11] }.validate("x").is_err());
        assert!(LabelMap::Binary { positive: vec![] }.validate("x").is_err());
        assert!(LabelMap::Table { labels: vec![0; 10] }.validate("x").is_err());
        assert!(LabelMap::Table { labels: vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0] }.validate("x").is_ok());
    }
}
