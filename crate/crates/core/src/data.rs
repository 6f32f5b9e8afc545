//! Datasets: IDX ingestion, synthetic Gaussian blobs, standardization,
//! validation holdout, worker partitioning and minibatch sampling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{column_stats, standardize, ColumnStats, Matrix};
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset,
            message: message.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let word = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| self.fail("truncated header"))?;
        self.offset = end;
        Ok(u32::from_be_bytes(word.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(self.fail(format!("truncated body: need {n} bytes, {available} remain")));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_file(images_path)?;
    let mut images = Reader {
        path: images_path,
        bytes: &image_bytes,
        offset: 0,
    };
    let magic = images.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        images.offset = 0;
        return Err(images.fail(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = images.u32()? as usize;
    let rows = images.u32()? as usize;
    let cols = images.u32()? as usize;
    let dims = rows * cols;
    let pixels = images.take(count * dims)?;
    let features = Matrix::from_vec(count, dims, pixels.iter().map(|&b| T::of(b as f64 / 255.0)).collect())?;

    let label_bytes = read_file(labels_path)?;
    let mut labels = Reader {
        path: labels_path,
        bytes: &label_bytes,
        offset: 0,
    };
    let magic = labels.u32()?;
    if magic != IDX_LABELS_MAGIC {
        labels.offset = 0;
        return Err(labels.fail(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = labels.u32()? as usize;
    if label_count != count {
        labels.offset = 4;
        return Err(labels.fail(format!(
            "label file declares {label_count} items but image file declares {count}"
        )));
    }
    let labels: Vec<usize> = labels.take(count)?.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(features, labels, class_count)
}

/// Writes an IDX image/label pair. Inverse of [`load_idx`] for raw bytes.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    assert_eq!(pixels.len(), labels.len() * rows * cols, "pixel count mismatch");
    let mut img = Vec::with_capacity(16 + pixels.len());
    for word in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for word in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&word.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// Norm of every synthetic class center.
pub const SYNTHETIC_CENTER_NORM: f64 = 1.0;

/// Center of class `c` in `d` dimensions. Classes below `d` sit on the
/// coordinate axes; the rest get fixed pseudo-random directions.
pub fn synthetic_center(c: usize, d: usize) -> Vec<f64> {
    let mut center = vec![0.0; d];
    if c < d {
        center[c] = SYNTHETIC_CENTER_NORM;
        return center;
    }
    let mut rng = RngStream::from_seed(0x5EED_0000 ^ c as u64);
    for x in center.iter_mut() {
        *x = rng.standard_normal();
    }
    let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt();
    center.iter_mut().for_each(|x| *x *= SYNTHETIC_CENTER_NORM / norm);
    center
}

/// Isotropic Gaussian blobs, one per class, balanced labels (`row mod classes`).
pub fn make_synthetic<T: Scalar>(seed: u64, n: usize, d: usize, classes: usize, spread: f64) -> Result<Dataset<T>> {
    if classes < 2 || n < classes || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs classes >= 2, n >= classes, d >= 1 (got n={n}, d={d}, classes={classes})"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..classes).map(|c| synthetic_center(c, d)).collect();
    let mut rng = RngStream::from_seed(seed);
    let mut data = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|r| r % classes).collect();
    for &y in &labels {
        for &m in &centers[y] {
            data.push(T::of(m + spread * rng.standard_normal()));
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, classes)
}

/// Per-feature standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<T> {
    pub stats: ColumnStats<T>,
}

impl<T: Scalar> Normalizer<T> {
    pub fn fit(train: &Dataset<T>) -> Result<Self> {
        Ok(Normalizer {
            stats: column_stats(&train.features)?,
        })
    }

    pub fn apply(&self, data: &Dataset<T>) -> Result<Dataset<T>> {
        Ok(Dataset {
            features: standardize(&data.features, &self.stats)?,
            labels: data.labels.clone(),
            class_count: data.class_count,
        })
    }
}

/// Normalized training set, the other sets, and the fitted normalizer.
pub type Normalized<T> = (Dataset<T>, Vec<Dataset<T>>, Normalizer<T>);

/// Fits on `train` only and applies to `train` and every dataset in `others`.
pub fn fit_apply_normalizer<T: Scalar>(train: &Dataset<T>, others: &[&Dataset<T>]) -> Result<Normalized<T>> {
    let norm = Normalizer::fit(train)?;
    let train = norm.apply(train)?;
    let others = others.iter().map(|d| norm.apply(d)).collect::<Result<_>>()?;
    Ok((train, others, norm))
}

/// Holds out `holdout` rows sampled without replacement. Both halves keep
/// the original row order.
pub fn split_validation<T: Scalar>(
    data: &Dataset<T>,
    holdout: usize,
    rng: &mut RngStream,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if holdout >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "holdout {holdout} must be smaller than the dataset ({} rows)",
            data.len()
        )));
    }
    let mut held = vec![false; data.len()];
    for i in rng.sample_indices(data.len(), holdout) {
        held[i] = true;
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| held[i]);
    Ok((data.subset(&train), data.subset(&val)))
}

/// How training rows are dealt to workers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Uniform,
    /// Each worker draws `majority_share` of its quota from its own classes.
    ClassBiased {
        majority_share: f64,
    },
}

/// Rows of the parent training set owned by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub worker_rank: usize,
    pub indices: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Near-equal quotas: the first `n mod w` workers get one extra row.
fn quotas(n: usize, workers: usize) -> Vec<usize> {
    (0..workers)
        .map(|i| n / workers + usize::from(i < n % workers))
        .collect()
}

/// Classes owned by `rank`: round-robin when classes outnumber workers,
/// otherwise the single class `rank mod classes`.
pub fn majority_classes(rank: usize, workers: usize, classes: usize) -> Vec<usize> {
    if classes >= workers {
        (0..classes).filter(|c| c % workers == rank).collect()
    } else {
        vec![rank % classes]
    }
}

pub fn partition<T: Scalar>(
    train: &Dataset<T>,
    workers: usize,
    mode: PartitionMode,
    rng: &mut RngStream,
) -> Result<Vec<Partition>> {
    let n = train.len();
    if workers == 0 || workers > n {
        return Err(Error::InvalidArgument(format!(
            "cannot partition {n} rows across {workers} workers"
        )));
    }
    let quota = quotas(n, workers);
    let assigned: Vec<Vec<usize>> = match mode {
        PartitionMode::Uniform => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let mut rest = order.as_slice();
            quota
                .iter()
                .map(|&q| {
                    let (head, tail) = rest.split_at(q);
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        }
        PartitionMode::ClassBiased { majority_share } => {
            if !(0.0..=1.0).contains(&majority_share) {
                return Err(Error::InvalidArgument(format!(
                    "majority_share must be in [0, 1], got {majority_share}"
                )));
            }
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); train.class_count];
            for (i, &y) in train.labels.iter().enumerate() {
                pools[y].push(i);
            }
            for pool in pools.iter_mut() {
                rng.shuffle(pool);
            }
            let owned: Vec<Vec<usize>> = (0..workers)
                .map(|r| majority_classes(r, workers, train.class_count))
                .collect();
            let wanted: Vec<usize> = quota
                .iter()
                .map(|&q| ((q as f64) * majority_share).round() as usize)
                .collect();
            let mut parts: Vec<Vec<usize>> = vec![Vec::new(); workers];
            // deal one row at a time across workers so shared classes split evenly
            let mut cursor = vec![0usize; workers];
            loop {
                let mut progressed = false;
                for r in 0..workers {
                    if parts[r].len() >= wanted[r] {
                        continue;
                    }
                    let classes = &owned[r];
                    for attempt in 0..classes.len() {
                        let c = classes[(cursor[r] + attempt) % classes.len()];
                        if let Some(i) = pools[c].pop() {
                            parts[r].push(i);
                            cursor[r] = (cursor[r] + attempt + 1) % classes.len();
                            progressed = true;
                            break;
                        }
                    }
                }
                if !progressed {
                    break;
                }
            }
            let mut rest: Vec<usize> = pools.into_iter().flatten().collect();
            rest.sort_unstable();
            rng.shuffle(&mut rest);
            let mut rest = rest.as_slice();
            for (part, &q) in parts.iter_mut().zip(&quota) {
                let (head, tail) = rest.split_at(q - part.len());
                part.extend_from_slice(head);
                rest = tail;
            }
            parts
        }
    };
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(worker_rank, indices)| Partition { worker_rank, indices })
        .collect())
}

/// Per-worker share of the effective batch.
pub fn per_worker_batch(effective_batch: usize, workers: usize) -> Result<usize> {
    if workers == 0 || effective_batch == 0 || !effective_batch.is_multiple_of(workers) {
        return Err(Error::Config(format!(
            "effective batch {effective_batch} is not divisible by {workers} workers"
        )));
    }
    Ok(effective_batch / workers)
}

/// Row order within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    /// Fresh permutation every epoch.
    Shuffled,
    /// Partition order, every epoch. Used for equivalence checks.
    Sequential,
}

/// Epoch-wise sampling without replacement over one partition. A trailing
/// remainder smaller than a batch is dropped and a new epoch begins.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    indices: Vec<usize>,
    order: BatchOrder,
    batch: usize,
    cursor: usize,
    epoch: u64,
}

impl MinibatchSampler {
    pub fn new(part: &Partition, batch: usize, order: BatchOrder) -> Result<Self> {
        if batch == 0 || batch > part.len() {
            return Err(Error::Config(format!(
                "batch {batch} does not fit partition of {} rows (worker {})",
                part.len(),
                part.worker_rank
            )));
        }
        Ok(MinibatchSampler {
            indices: part.indices.clone(),
            order,
            batch,
            // forces a shuffle before the first batch
            cursor: usize::MAX,
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len() / self.batch
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch.saturating_sub(1)
    }

    /// Parent-dataset row indices of the next batch.
    pub fn next_indices(&mut self, rng: &mut RngStream) -> &[usize] {
        if self.cursor == usize::MAX || self.cursor + self.batch > self.indices.len() {
            if self.order == BatchOrder::Shuffled {
                rng.shuffle(&mut self.indices);
            }
            self.cursor = 0;
            self.epoch += 1;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.indices[start..self.cursor]
    }

    pub fn next_batch<T: Scalar>(&mut self, data: &Dataset<T>, rng: &mut RngStream) -> (Matrix<T>, Vec<usize>) {
        let idx = self.next_indices(rng);
        let x = data.features.select_rows(idx);
        let y = idx.iter().map(|&i| data.labels[i]).collect();
        (x, y)
    }
}

/// Draws one minibatch; convenience wrapper for one-shot use.
pub fn sample_minibatch<T: Scalar>(
    data: &Dataset<T>,
    part: &Partition,
    rng: &mut RngStream,
    batch: usize,
) -> Result<(Matrix<T>, Vec<usize>)> {
    let mut sampler = MinibatchSampler::new(part, batch, BatchOrder::Shuffled)?;
    Ok(sampler.next_batch(data, rng))
}
