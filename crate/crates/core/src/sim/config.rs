use std::path::PathBuf;

use crate::data::PartitionMode;
use crate::error::{Error, Result};
use crate::nn::MlpSpec;
use crate::protocols::{Method, ProtocolSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Gaussian blobs drawn from the run's synthetic stream.
    Synthetic {
        n: usize,
        d: usize,
        classes: usize,
        spread: f64,
    },
    /// An IDX image/label pair, e.g. the MNIST training files.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Validation rows held out from the training pool.
    pub holdout: usize,
    pub partition: PartitionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: MlpSpec,
    pub protocol: ProtocolSpec,
    pub optimizer: OptimizerConfig,
    pub workers: usize,
    pub effective_batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub data: DataConfig,
    pub eval_every: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.protocol.validate()?;
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        if self.workers == 1 && !matches!(self.protocol.method, Method::None | Method::AllReduce) {
            return fail(format!(
                "a single worker only supports methods none and all_reduce, not {}",
                self.protocol.method
            ));
        }
        crate::data::per_worker_batch(self.effective_batch, self.workers)?;
        let OptimizerConfig { eta, mu } = self.optimizer;
        if !(eta.is_finite() && eta > 0.0) {
            return fail(format!("eta must be positive and finite, got {eta}"));
        }
        if !(0.0..1.0).contains(&mu) {
            return fail(format!("mu must be in [0, 1), got {mu}"));
        }
        if self.data.holdout == 0 {
            return fail("holdout must be at least 1 row for validation".into());
        }
        if let PartitionMode::ClassBiased { majority_share } = self.data.partition {
            if !(0.0..=1.0).contains(&majority_share) {
                return fail(format!("majority_share must be in [0, 1], got {majority_share}"));
            }
        }
        if let DataSource::Synthetic { n, d, classes, spread } = self.data.source {
            if classes < 2 || n < classes || d == 0 || !(spread.is_finite() && spread >= 0.0) {
                return fail(format!(
                    "synthetic data needs classes >= 2, n >= classes, d >= 1, spread >= 0 (got n={n}, d={d}, classes={classes}, spread={spread})"
                ));
            }
            if d != self.model.input_size() {
                return fail(format!(
                    "model input size {} does not match data dims {d}",
                    self.model.input_size()
                ));
            }
            if classes != self.model.classes() {
                return fail(format!(
                    "model has {} outputs but data has {classes} classes",
                    self.model.classes()
                ));
            }
            if self.data.holdout >= n {
                return fail(format!("holdout {} must be smaller than n = {n}", self.data.holdout));
            }
        }
        Ok(())
    }
}
