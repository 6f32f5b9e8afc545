//! Evaluation of worker and aggregate models, consensus diagnostics and the
//! metrics CSV.
//!
//! CSV schema (one row per evaluation, `N` = workers − 1):
//! `step,epoch,train_loss_mean,rank0_acc,aggregate_acc,pairwise_disagreement,val_loss_r0,...,val_loss_rN,val_acc_r0,...,val_acc_rN`.
//! Reals are written with 17 significant digits so they parse back exactly.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward, softmax_ce, MlpSpec, ParamVector};
use crate::scalar::Scalar;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1024;

/// One evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: f64,
    pub train_loss_mean: f64,
    pub rank0_acc: f64,
    pub aggregate_acc: f64,
    pub pairwise_disagreement: f64,
    pub per_worker_val_loss: Vec<f64>,
    pub per_worker_val_acc: Vec<f64>,
}

/// Evaluation history of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSeries {
    pub workers: usize,
    pub records: Vec<MetricsRecord>,
}

impl MetricsSeries {
    pub fn new(workers: usize) -> Self {
        MetricsSeries {
            workers,
            records: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Mean cross-entropy and argmax accuracy over every row, dropout off.
pub fn evaluate<T: Scalar>(spec: &MlpSpec, params: &ParamVector<T>, data: &Dataset<T>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = data.features.select_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let (logits, _) = forward(spec, params, &x, None)?;
        let (loss, _) = softmax_ce(&logits, &labels)?;
        loss_sum += loss.as_f64() * chunk.len() as f64;
        for (r, &y) in labels.iter().enumerate() {
            if argmax(logits.row(r)) == y {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-coordinate mean of the worker vectors.
pub fn aggregate_model<T: Scalar>(workers: &[ParamVector<T>]) -> Result<ParamVector<T>> {
    crate::protocols::allreduce_mean(workers)
}

/// `Σ_{i<k} ‖θ^i − θ^k‖²`; zero for fewer than two workers.
pub fn pairwise_disagreement<T: Scalar>(workers: &[ParamVector<T>]) -> f64 {
    let mut total = 0.0;
    for i in 0..workers.len() {
        for k in i + 1..workers.len() {
            total += workers[i]
                .0
                .iter()
                .zip(&workers[k].0)
                .map(|(&a, &b)| {
                    let d = (a - b).as_f64();
                    d * d
                })
                .sum::<f64>();
        }
    }
    total
}

pub fn csv_header(workers: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "epoch",
        "train_loss_mean",
        "rank0_acc",
        "aggregate_acc",
        "pairwise_disagreement",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..workers).map(|r| format!("val_loss_r{r}")));
    h.extend((0..workers).map(|r| format!("val_acc_r{r}")));
    h
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_metrics(series: &MetricsSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(csv_header(series.workers)).map_err(csv_err)?;
    for r in &series.records {
        let mut row = vec![
            r.step.to_string(),
            real(r.epoch),
            real(r.train_loss_mean),
            real(r.rank0_acc),
            real(r.aggregate_acc),
            real(r.pairwise_disagreement),
        ];
        row.extend(r.per_worker_val_loss.iter().map(|&x| real(x)));
        row.extend(r.per_worker_val_acc.iter().map(|&x| real(x)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsSeries> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < 6 || (header.len() - 6) % 2 != 0 {
        return Err(bad(format!("unexpected metrics header with {} columns", header.len())));
    }
    let workers = (header.len() - 6) / 2;
    let expected = csv_header(workers);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(bad("metrics header does not match schema".into()));
    }
    let mut series = MetricsSeries::new(workers);
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {}: {e}", expected[i])))
        };
        series.records.push(MetricsRecord {
            step: row[0].parse().map_err(|e| bad(format!("step: {e}")))?,
            epoch: f(1)?,
            train_loss_mean: f(2)?,
            rank0_acc: f(3)?,
            aggregate_acc: f(4)?,
            pairwise_disagreement: f(5)?,
            per_worker_val_loss: (0..workers).map(|r| f(6 + r)).collect::<Result<_>>()?,
            per_worker_val_acc: (0..workers).map(|r| f(6 + workers + r)).collect::<Result<_>>()?,
        });
    }
    Ok(series)
}
