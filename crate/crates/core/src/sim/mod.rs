//! Lock-step simulation of a synchronous cluster.
//!
//! Every round each worker (1) computes a gradient at its current
//! parameters, (2) takes part in the communication step if its schedule
//! fires, and (3) applies the momentum update to the post-communication
//! parameters, then (4) advances its clock. Rounds are barriers by
//! construction, so all clocks agree between rounds. Clocks are kept per
//! worker so that an asynchronous driver could advance them independently.

mod checkpoint;
mod config;

use rayon::prelude::*;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{DataConfig, DataSource, ExperimentConfig, OptimizerConfig};

use crate::data::{
    fit_apply_normalizer, load_idx, make_synthetic, partition, per_worker_batch, split_validation, BatchOrder, Dataset,
    MinibatchSampler, Partition,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_model, evaluate, pairwise_disagreement, MetricsRecord, MetricsSeries};
use crate::nn::{dropout_masks, kaiming_init, loss_and_gradient, nag_update, MlpSpec, ParamVector, Velocity};
use crate::protocols::{
    allreduce_mean, communicate, select_peer, should_communicate, CommRound, Method, ProtocolSpec, Selections,
};
use crate::rng::{derive_key, Purpose, RngStream, WorkerStreams};
use crate::scalar::Scalar;

/// Parameters beyond this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct WorkerState<T> {
    pub rank: usize,
    pub params: ParamVector<T>,
    pub velocity: Velocity<T>,
    /// Completed gradient updates.
    pub clock: u64,
    pub rng: WorkerStreams,
}

/// Source of per-worker minibatch gradients. `Local` carries whatever state
/// a worker keeps between rounds, such as its sampler position.
pub trait Objective<T: Scalar>: Sync {
    type Local: Send;

    fn local(&self, rank: usize) -> Result<Self::Local>;

    fn loss_and_gradient(
        &self,
        local: &mut Self::Local,
        params: &ParamVector<T>,
        rng: &mut WorkerStreams,
    ) -> Result<(T, ParamVector<T>)>;
}

/// Minibatch cross-entropy of an MLP over each worker's partition.
#[derive(Debug, Clone)]
pub struct MlpObjective<'a, T> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset<T>,
    pub partitions: Vec<Partition>,
    pub batch: usize,
    pub order: BatchOrder,
}

impl<T: Scalar> Objective<T> for MlpObjective<'_, T> {
    type Local = MinibatchSampler;

    fn local(&self, rank: usize) -> Result<MinibatchSampler> {
        let part = self
            .partitions
            .get(rank)
            .ok_or_else(|| Error::InvalidArgument(format!("no partition for worker {rank}")))?;
        MinibatchSampler::new(part, self.batch, self.order)
    }

    fn loss_and_gradient(
        &self,
        sampler: &mut MinibatchSampler,
        params: &ParamVector<T>,
        rng: &mut WorkerStreams,
    ) -> Result<(T, ParamVector<T>)> {
        let (x, y) = sampler.next_batch(self.data, &mut rng.data);
        let masks = self
            .spec
            .has_dropout()
            .then(|| dropout_masks(self.spec, &mut rng.dropout, x.rows()));
        loss_and_gradient(self.spec, params, &x, &y, masks.as_ref())
    }
}

/// `½‖θ − c_i‖²` with a fixed target per worker. Small enough to trace by hand.
#[derive(Debug, Clone)]
pub struct QuadraticObjective<T> {
    pub targets: Vec<ParamVector<T>>,
}

impl<T: Scalar> Objective<T> for QuadraticObjective<T> {
    /// The worker's rank.
    type Local = usize;

    fn local(&self, rank: usize) -> Result<usize> {
        if rank >= self.targets.len() {
            return Err(Error::InvalidArgument(format!("no target for worker {rank}")));
        }
        Ok(rank)
    }

    fn loss_and_gradient(
        &self,
        rank: &mut usize,
        params: &ParamVector<T>,
        _: &mut WorkerStreams,
    ) -> Result<(T, ParamVector<T>)> {
        let target = &self.targets[*rank];
        let grad: Vec<T> = params.0.iter().zip(&target.0).map(|(&p, &c)| p - c).collect();
        let half = T::of(0.5);
        let loss = grad.iter().map(|&g| half * g * g).sum();
        Ok((loss, ParamVector(grad)))
    }
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    /// Minibatch loss per worker, at pre-communication parameters.
    pub losses: Vec<f64>,
    pub comm: CommRound,
}

/// All workers plus the shared protocol state, advanced one round at a time.
pub struct Cluster<T: Scalar, O: Objective<T>> {
    objective: O,
    protocol: ProtocolSpec,
    eta: T,
    mu: T,
    workers: Vec<WorkerState<T>>,
    locals: Vec<O::Local>,
    center: Option<ParamVector<T>>,
    pool: Option<rayon::ThreadPool>,
    rounds: u64,
}

impl<T: Scalar, O: Objective<T>> Cluster<T, O> {
    /// Every worker starts from `init` with zero velocity. `threads > 1`
    /// computes gradients on a pool of that size; results are identical to
    /// the single-threaded path because each worker owns its streams.
    pub fn new(
        objective: O,
        protocol: ProtocolSpec,
        optimizer: OptimizerConfig,
        init: &ParamVector<T>,
        workers: usize,
        seed: u64,
        threads: usize,
    ) -> Result<Self> {
        protocol.validate()?;
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if workers == 1 && protocol.method.uses_peers() {
            return Err(Error::Config(format!("{} needs at least 2 workers", protocol.method)));
        }
        let locals = (0..workers).map(|r| objective.local(r)).collect::<Result<_>>()?;
        let states = (0..workers)
            .map(|rank| WorkerState {
                rank,
                params: init.clone(),
                velocity: ParamVector::zeros(init.len()),
                clock: 0,
                rng: WorkerStreams::derive(seed, rank),
            })
            .collect();
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} threads: {e}")))?,
            )
        } else {
            None
        };
        let center = (protocol.method == Method::Easgd).then(|| init.clone());
        Ok(Cluster {
            objective,
            protocol,
            eta: T::of(optimizer.eta),
            mu: T::of(optimizer.mu),
            workers: states,
            locals,
            center,
            pool,
            rounds: 0,
        })
    }

    pub fn workers(&self) -> &[WorkerState<T>] {
        &self.workers
    }

    /// Direct access for setting up traces; clocks are not checked.
    pub fn workers_mut(&mut self) -> &mut [WorkerState<T>] {
        &mut self.workers
    }

    pub fn params(&self) -> Vec<ParamVector<T>> {
        self.workers.iter().map(|w| w.params.clone()).collect()
    }

    /// EASGD center variable.
    pub fn center(&self) -> Option<&ParamVector<T>> {
        self.center.as_ref()
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn objective(&self) -> &O {
        &self.objective
    }

    /// Runs `f` on the cluster's pool, or inline in single-threaded mode.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    pub fn tick(&mut self) -> Result<TickReport> {
        let step = self.rounds;
        let objective = &self.objective;
        let work = |(w, local): (&mut WorkerState<T>, &mut O::Local)| {
            objective.loss_and_gradient(local, &w.params, &mut w.rng)
        };
        let results: Vec<Result<(T, ParamVector<T>)>> = match &self.pool {
            Some(pool) => {
                let (workers, locals) = (&mut self.workers, &mut self.locals);
                pool.install(|| workers.par_iter_mut().zip(locals.par_iter_mut()).map(work).collect())
            }
            None => self.workers.iter_mut().zip(self.locals.iter_mut()).map(work).collect(),
        };
        let mut losses = Vec::with_capacity(results.len());
        let mut grads = Vec::with_capacity(results.len());
        for (rank, r) in results.into_iter().enumerate() {
            let (loss, grad) = r?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("worker {rank} loss is {loss}"),
                });
            }
            losses.push(loss.as_f64());
            grads.push(grad);
        }
        if self.protocol.method == Method::AllReduce {
            let mean = allreduce_mean(&grads)?;
            grads = vec![mean; grads.len()];
        }

        let comm = self.plan_round()?;
        if comm.any() {
            let snapshot = self.params();
            let (next, center) = communicate(&self.protocol, &snapshot, self.center.as_ref(), &comm)?;
            for (w, p) in self.workers.iter_mut().zip(next) {
                w.params = p;
            }
            self.center = center;
        }

        for (w, g) in self.workers.iter_mut().zip(&grads) {
            nag_update(&mut w.params, &mut w.velocity, g, self.eta, self.mu);
            w.clock += 1;
            if !w.params.all_finite() || w.params.max_abs().as_f64() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    step,
                    reason: format!("worker {} parameters exceed {DIVERGENCE_LIMIT:e}", w.rank),
                });
            }
        }
        self.rounds += 1;
        Ok(TickReport { losses, comm })
    }

    /// Draws this round's schedule and, for communicating workers of a
    /// gossip method, their peers.
    fn plan_round(&mut self) -> Result<CommRound> {
        let n = self.workers.len();
        if !self.protocol.method.uses_schedule() {
            return Ok(CommRound {
                communicating: vec![false; n],
                selections: None,
            });
        }
        let communicating: Vec<bool> = self
            .workers
            .iter_mut()
            .map(|w| should_communicate(&self.protocol, w.clock, &mut w.rng.schedule))
            .collect();
        let selections = if self.protocol.method.uses_peers() {
            let choices = self
                .workers
                .iter_mut()
                .zip(&communicating)
                .map(|(w, &c)| c.then(|| select_peer(w.rank, n, &mut w.rng.peer)).transpose())
                .collect::<Result<Vec<_>>>()?;
            Some(Selections::new(choices)?)
        } else {
            None
        };
        Ok(CommRound {
            communicating,
            selections,
        })
    }
}

/// Normalized training and validation splits.
#[derive(Debug, Clone)]
pub struct DatasetBundle<T> {
    pub train: Dataset<T>,
    pub validation: Dataset<T>,
}

/// Loads or generates the data, holds out validation rows and standardizes
/// both splits with training statistics.
pub fn prepare_data<T: Scalar>(config: &DataConfig, seed: u64) -> Result<DatasetBundle<T>> {
    let full = match &config.source {
        DataSource::Synthetic { n, d, classes, spread } => {
            make_synthetic(derive_key(seed, 0, Purpose::Synthetic), *n, *d, *classes, *spread)?
        }
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
    };
    let mut rng = RngStream::derive(seed, 0, Purpose::Split);
    let (train, validation) = split_validation(&full, config.holdout, &mut rng)?;
    let (train, mut others, _) = fit_apply_normalizer(&train, &[&validation])?;
    Ok(DatasetBundle {
        train,
        validation: others.remove(0),
    })
}

/// Initial parameters shared by every worker, drawn from rank 0's init stream.
pub fn shared_init<T: Scalar>(spec: &MlpSpec, seed: u64) -> ParamVector<T> {
    kaiming_init(spec, &mut RngStream::derive(seed, 0, Purpose::Init))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub threads: usize,
    pub order: BatchOrder,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: 1,
            order: BatchOrder::Shuffled,
        }
    }
}

/// A run stopped by the divergence guard.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    /// Evaluations up to the last good one.
    pub series: MetricsSeries,
    pub params: Vec<ParamVector<T>>,
    pub divergence: Option<Divergence>,
}

/// Per-worker, rank-0 and aggregate validation metrics at the current round.
pub fn evaluate_cluster<T: Scalar, O: Objective<T>>(
    cluster: &Cluster<T, O>,
    spec: &MlpSpec,
    validation: &Dataset<T>,
    epoch: f64,
    train_loss_mean: f64,
) -> Result<MetricsRecord> {
    let params = cluster.params();
    let per_worker: Vec<(f64, f64)> = cluster.install(|| {
        params
            .par_iter()
            .map(|p| evaluate(spec, p, validation))
            .collect::<Result<Vec<_>>>()
    })?;
    let (_, aggregate_acc) = evaluate(spec, &aggregate_model(&params)?, validation)?;
    Ok(MetricsRecord {
        step: cluster.rounds(),
        epoch,
        train_loss_mean,
        rank0_acc: per_worker[0].1,
        aggregate_acc,
        pairwise_disagreement: pairwise_disagreement(&params),
        per_worker_val_loss: per_worker.iter().map(|e| e.0).collect(),
        per_worker_val_acc: per_worker.iter().map(|e| e.1).collect(),
    })
}

/// Runs `config.steps` rounds, evaluating every `eval_every` rounds and after
/// the last one. Divergence ends the run early and is reported in the
/// output rather than as an error.
pub fn run_experiment<T: Scalar>(
    config: &ExperimentConfig,
    data: &DatasetBundle<T>,
    options: &RunOptions,
) -> Result<RunOutput<T>> {
    config.validate()?;
    if data.train.dims() != config.model.input_size() || data.train.class_count > config.model.classes() {
        return Err(Error::Config(format!(
            "model {:?} does not fit data with {} features and {} classes",
            config.model.layer_sizes,
            data.train.dims(),
            data.train.class_count
        )));
    }
    if data.validation.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let batch = per_worker_batch(config.effective_batch, config.workers)?;
    let mut part_rng = RngStream::derive(config.seed, 0, Purpose::Partition);
    let partitions = partition(&data.train, config.workers, config.data.partition, &mut part_rng)?;
    let objective = MlpObjective {
        spec: &config.model,
        data: &data.train,
        partitions,
        batch,
        order: options.order,
    };
    let init = shared_init(&config.model, config.seed);
    let mut cluster = Cluster::new(
        objective,
        config.protocol,
        config.optimizer,
        &init,
        config.workers,
        config.seed,
        options.threads,
    )?;
    let rounds_per_epoch = data.train.len() as f64 / (config.workers * batch) as f64;
    let mut series = MetricsSeries::new(config.workers);
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut divergence = None;
    while cluster.rounds() < config.steps {
        match cluster.tick() {
            Ok(report) => {
                loss_sum += report.losses.iter().sum::<f64>();
                loss_count += report.losses.len();
            }
            Err(Error::Divergence { step, reason }) => {
                divergence = Some(Divergence { step, reason });
                break;
            }
            Err(e) => return Err(e),
        }
        let step = cluster.rounds();
        if step % config.eval_every == 0 || step == config.steps {
            let epoch = step as f64 / rounds_per_epoch;
            let record = evaluate_cluster(
                &cluster,
                &config.model,
                &data.validation,
                epoch,
                loss_sum / loss_count as f64,
            )?;
            series.records.push(record);
            (loss_sum, loss_count) = (0.0, 0);
        }
    }
    Ok(RunOutput {
        series,
        params: cluster.params(),
        divergence,
    })
}
