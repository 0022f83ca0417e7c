//! Task-free data streams.
//!
//! A [`TaskStream`] only hands out [`Batch`]es; the hidden schedule (target
//! sign, input pair, label permutation) is never attached to a batch. The
//! harness may read [`TaskStream::task_index`] for logging.
//!
//! Each stream owns two random generators derived from its seed: one for
//! sampling data and one for the schedule. Two streams with the same seed
//! therefore draw identical inputs regardless of their schedule.

use crate::nn::{Batch, Targets};
use crate::optim::derive_seed;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;
pub const MNIST_CLASSES: usize = 10;
const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

const DATA_STREAM: u64 = 0x64617461;
const SCHEDULE_STREAM: u64 = 0x7363686564;

#[derive(Debug, thiserror::Error)]
pub enum MnistError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: images are {rows}x{cols}, expected 28x28")]
    BadDimensions { path: String, rows: u32, cols: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not a digit")]
    BadLabel { index: usize, label: u8 },
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("number of inputs must be even, got {0}")]
    OddInputs(usize),
    #[error("need at least {min} inputs, got {got}")]
    TooFewInputs { min: usize, got: usize },
    #[error("period must be positive")]
    ZeroPeriod,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("stream needs the MNIST dataset, none loaded")]
    MissingDataset,
    #[error(transparent)]
    Mnist(#[from] MnistError),
}

/// MNIST images kept as raw bytes; scaled to `[0, 1]` when batched.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistDataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl MnistDataset {
    /// `pixels` holds `labels.len()` images of 784 bytes each.
    pub fn from_raw(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self, MnistError> {
        if pixels.len() != labels.len() * MNIST_PIXELS {
            return Err(MnistError::CountMismatch {
                images: pixels.len() / MNIST_PIXELS,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= MNIST_CLASSES) {
            return Err(MnistError::BadLabel { index, label });
        }
        Ok(MnistDataset { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn image(&self, index: usize) -> &[u8] {
        &self.pixels[index * MNIST_PIXELS..(index + 1) * MNIST_PIXELS]
    }

    /// Flattened image with pixels divided by 255.
    pub fn normalized(&self, index: usize) -> Vec<f64> {
        self.image(index).iter().map(|&p| p as f64 / 255.0).collect()
    }
}

/// Reads an IDX image file and its matching label file.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<MnistDataset, MnistError> {
    let images = read(images_path)?;
    let ipath = images_path.display().to_string();
    check_len(&ipath, &images, 16)?;
    check_magic(&ipath, &images, IMAGES_MAGIC)?;
    let count = be_u32(&images, 4) as usize;
    let (rows, cols) = (be_u32(&images, 8), be_u32(&images, 12));
    if rows as usize != MNIST_SIDE || cols as usize != MNIST_SIDE {
        return Err(MnistError::BadDimensions { path: ipath, rows, cols });
    }
    check_len(&ipath, &images, 16 + count * MNIST_PIXELS)?;

    let labels = read(labels_path)?;
    let lpath = labels_path.display().to_string();
    check_len(&lpath, &labels, 8)?;
    check_magic(&lpath, &labels, LABELS_MAGIC)?;
    let label_count = be_u32(&labels, 4) as usize;
    check_len(&lpath, &labels, 8 + label_count)?;
    if count != label_count {
        return Err(MnistError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    MnistDataset::from_raw(
        images[16..16 + count * MNIST_PIXELS].to_vec(),
        labels[8..8 + count].to_vec(),
    )
}

/// Loads `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<MnistDataset, MnistError> {
    load_mnist(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
}

fn read(path: &Path) -> Result<Vec<u8>, MnistError> {
    fs::read(path).map_err(|source| MnistError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_len(path: &str, bytes: &[u8], expected: usize) -> Result<(), MnistError> {
    if bytes.len() < expected {
        return Err(MnistError::Truncated {
            path: path.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &str, bytes: &[u8], expected: u32) -> Result<(), MnistError> {
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(MnistError::BadMagic {
            path: path.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    StationaryMnist,
    LabelPermutedMnist { period: u64 },
    ChangingAdder { n_inputs: usize, period: u64 },
    PermutedAdder { n_inputs: usize, period: u64 },
    UtilityProbeAdder { n_inputs: usize },
}

impl StreamKind {
    pub fn input_dim(&self) -> usize {
        match *self {
            StreamKind::StationaryMnist | StreamKind::LabelPermutedMnist { .. } => MNIST_PIXELS,
            StreamKind::ChangingAdder { n_inputs, .. }
            | StreamKind::PermutedAdder { n_inputs, .. }
            | StreamKind::UtilityProbeAdder { n_inputs } => n_inputs,
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.is_classification() {
            MNIST_CLASSES
        } else {
            1
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(
            self,
            StreamKind::StationaryMnist | StreamKind::LabelPermutedMnist { .. }
        )
    }

    pub fn needs_mnist(&self) -> bool {
        self.is_classification()
    }

    /// Steps per task, if the stream changes at all.
    pub fn period(&self) -> Option<u64> {
        match *self {
            StreamKind::LabelPermutedMnist { period }
            | StreamKind::ChangingAdder { period, .. }
            | StreamKind::PermutedAdder { period, .. } => Some(period),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StreamKind::StationaryMnist => "stationary_mnist",
            StreamKind::LabelPermutedMnist { .. } => "label_permuted_mnist",
            StreamKind::ChangingAdder { .. } => "changing_adder",
            StreamKind::PermutedAdder { .. } => "permuted_adder",
            StreamKind::UtilityProbeAdder { .. } => "utility_probe_adder",
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.period() == Some(0) {
            return Err(TaskError::ZeroPeriod);
        }
        match *self {
            StreamKind::PermutedAdder { n_inputs, .. } => {
                if !n_inputs.is_multiple_of(2) {
                    return Err(TaskError::OddInputs(n_inputs));
                }
                if n_inputs < 4 {
                    return Err(TaskError::TooFewInputs { min: 4, got: n_inputs });
                }
            }
            StreamKind::ChangingAdder { n_inputs, .. } | StreamKind::UtilityProbeAdder { n_inputs } => {
                if n_inputs < 2 {
                    return Err(TaskError::TooFewInputs { min: 2, got: n_inputs });
                }
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cycle of disjoint input pairs for the permuted adder.
///
/// The first cycle is `(0,1), (2,3), …`. Each later cycle partitions a fresh
/// random permutation into pairs, re-drawn until its first pair shares no
/// index with the last pair of the previous cycle.
#[derive(Clone, Debug)]
pub struct PairSchedule {
    n_inputs: usize,
    rng: ChaCha8Rng,
    pairs: Vec<(usize, usize)>,
}

impl PairSchedule {
    pub fn new(n_inputs: usize, rng: ChaCha8Rng) -> Result<Self, TaskError> {
        if !n_inputs.is_multiple_of(2) {
            return Err(TaskError::OddInputs(n_inputs));
        }
        if n_inputs < 4 {
            return Err(TaskError::TooFewInputs { min: 4, got: n_inputs });
        }
        let pairs = (0..n_inputs / 2).map(|k| (2 * k, 2 * k + 1)).collect();
        Ok(PairSchedule { n_inputs, rng, pairs })
    }

    pub fn pair(&mut self, task: u64) -> (usize, usize) {
        let task = task as usize;
        while self.pairs.len() <= task {
            self.extend_cycle();
        }
        self.pairs[task]
    }

    fn extend_cycle(&mut self) {
        let last = *self.pairs.last().expect("schedule starts non-empty");
        let mut perm: Vec<usize> = (0..self.n_inputs).collect();
        loop {
            perm.shuffle(&mut self.rng);
            let (a, b) = (perm[0], perm[1]);
            if a != last.0 && a != last.1 && b != last.0 && b != last.1 {
                break;
            }
        }
        self.pairs
            .extend(perm.chunks(2).map(|c| (c[0].min(c[1]), c[0].max(c[1]))));
    }
}

/// Pair used at `task` by a permuted adder with `n_inputs` inputs whose
/// schedule is seeded with `seed`.
pub fn pair_schedule(n_inputs: usize, task: u64, seed: u64) -> Result<(usize, usize), TaskError> {
    let mut s = PairSchedule::new(n_inputs, ChaCha8Rng::seed_from_u64(seed))?;
    Ok(s.pair(task))
}

#[derive(Clone, Debug)]
enum Schedule {
    Fixed,
    Sign,
    Pairs(PairSchedule),
    Labels { perm: [usize; MNIST_CLASSES], task: u64 },
}

/// Infinite generator of batches with a hidden schedule.
#[derive(Clone, Debug)]
pub struct TaskStream {
    kind: StreamKind,
    batch_size: usize,
    data_rng: ChaCha8Rng,
    schedule_rng: ChaCha8Rng,
    schedule: Schedule,
    dataset: Option<Arc<MnistDataset>>,
    step: u64,
}

impl TaskStream {
    pub fn new(
        kind: StreamKind,
        batch_size: usize,
        seed: u64,
        dataset: Option<Arc<MnistDataset>>,
    ) -> Result<Self, TaskError> {
        kind.validate()?;
        if batch_size == 0 {
            return Err(TaskError::ZeroBatch);
        }
        if kind.needs_mnist() && dataset.as_ref().is_none_or(|d| d.is_empty()) {
            return Err(TaskError::MissingDataset);
        }
        let mut schedule_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SCHEDULE_STREAM));
        let schedule = match kind {
            StreamKind::StationaryMnist | StreamKind::UtilityProbeAdder { .. } => Schedule::Fixed,
            StreamKind::ChangingAdder { .. } => Schedule::Sign,
            StreamKind::PermutedAdder { n_inputs, .. } => {
                let rng = ChaCha8Rng::seed_from_u64(schedule_rng.random());
                Schedule::Pairs(PairSchedule::new(n_inputs, rng)?)
            }
            StreamKind::LabelPermutedMnist { .. } => Schedule::Labels {
                perm: std::array::from_fn(|i| i),
                task: 0,
            },
        };
        Ok(TaskStream {
            kind,
            batch_size,
            data_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, DATA_STREAM)),
            schedule_rng,
            schedule,
            dataset: if kind.needs_mnist() { dataset } else { None },
            step: 0,
        })
    }

    pub fn kind(&self) -> StreamKind {
        self.kind
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batches produced so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Task the next batch belongs to (for logging only).
    pub fn task_index(&self) -> u64 {
        self.kind.period().map_or(0, |p| self.step / p)
    }

    /// Current adder pair, sign, or label permutation, for diagnostics.
    pub fn current_pair(&mut self) -> Option<(usize, usize)> {
        let task = self.task_index();
        match (&mut self.schedule, self.kind) {
            (Schedule::Pairs(s), _) => Some(s.pair(task)),
            (_, StreamKind::ChangingAdder { .. } | StreamKind::UtilityProbeAdder { .. }) => Some((0, 1)),
            _ => None,
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let task = self.task_index();
        let batch = match self.kind {
            StreamKind::ChangingAdder { n_inputs, .. } => {
                let sign = if task.is_multiple_of(2) { 1.0 } else { -1.0 };
                self.adder_batch(n_inputs, (0, 1), sign)
            }
            StreamKind::UtilityProbeAdder { n_inputs } => self.adder_batch(n_inputs, (0, 1), 1.0),
            StreamKind::PermutedAdder { n_inputs, .. } => {
                let pair = match &mut self.schedule {
                    Schedule::Pairs(s) => s.pair(task),
                    _ => unreachable!(),
                };
                self.adder_batch(n_inputs, pair, 1.0)
            }
            StreamKind::StationaryMnist => self.mnist_batch(None),
            StreamKind::LabelPermutedMnist { .. } => {
                if let Schedule::Labels { perm, task: current } = &mut self.schedule {
                    while *current < task {
                        perm.shuffle(&mut self.schedule_rng);
                        *current += 1;
                    }
                }
                let perm = match &self.schedule {
                    Schedule::Labels { perm, .. } => *perm,
                    _ => unreachable!(),
                };
                self.mnist_batch(Some(perm))
            }
        };
        self.step += 1;
        batch
    }

    fn adder_batch(&mut self, n_inputs: usize, (i, j): (usize, usize), sign: f64) -> Batch {
        let rng = &mut self.data_rng;
        let inputs = Array2::from_shape_fn((self.batch_size, n_inputs), |_| rng.random_range(-0.5..=0.5));
        let targets = Array2::from_shape_fn((self.batch_size, 1), |(n, _)| {
            sign * (inputs[[n, i]] + inputs[[n, j]])
        });
        Batch {
            inputs,
            targets: Targets::Values(targets),
        }
    }

    fn mnist_batch(&mut self, perm: Option<[usize; MNIST_CLASSES]>) -> Batch {
        let data = self.dataset.as_ref().expect("checked at construction");
        let mut inputs = Array2::zeros((self.batch_size, MNIST_PIXELS));
        let mut classes = Vec::with_capacity(self.batch_size);
        for mut row in inputs.outer_iter_mut() {
            let idx = self.data_rng.random_range(0..data.len());
            for (x, &p) in row.iter_mut().zip(data.image(idx)) {
                *x = p as f64 / 255.0;
            }
            let label = data.label(idx);
            classes.push(perm.map_or(label, |p| p[label]));
        }
        Batch {
            inputs,
            targets: Targets::Classes(classes),
        }
    }
}
