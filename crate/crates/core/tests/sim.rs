use egl_core::data::{BatchOrder, Partition, PartitionMode};
use egl_core::nn::{nag_update, MlpSpec, ParamVector};
use egl_core::protocols::{Method, ProtocolSpec, Schedule};
use egl_core::sim::{
    prepare_data, run_experiment, Checkpoint, Cluster, DataConfig, DataSource, ExperimentConfig, MlpObjective,
    OptimizerConfig, QuadraticObjective, RunOptions,
};
use egl_core::Error;

const OPT: OptimizerConfig = OptimizerConfig { eta: 0.1, mu: 0.9 };

fn scalar(x: f64) -> ParamVector<f64> {
    ParamVector(vec![x])
}

fn quadratic_cluster(protocol: ProtocolSpec, start: &[f64], targets: &[f64]) -> Cluster<f64, QuadraticObjective<f64>> {
    let objective = QuadraticObjective {
        targets: targets.iter().map(|&c| scalar(c)).collect(),
    };
    let mut cluster = Cluster::new(objective, protocol, OPT, &scalar(0.0), start.len(), 7, 1).unwrap();
    for (w, &x) in cluster.workers_mut().iter_mut().zip(start) {
        w.params = scalar(x);
    }
    cluster
}

fn elastic(alpha: f64, schedule: Schedule) -> ProtocolSpec {
    ProtocolSpec::with_schedule(Method::ElasticGossip, Some(alpha), schedule).unwrap()
}

#[test]
fn two_worker_elastic_tick_matches_hand_trace() {
    // θ = (1, 3), targets (0, 4): g = (1, -1)
    // exchange at α = 0.5: both move to 2
    // v = (-0.1, 0.1); θ = 2 ∓ 0.1 ∓ 0.09 = (1.81, 2.19)
    let mut c = quadratic_cluster(elastic(0.5, Schedule::Period(1)), &[1.0, 3.0], &[0.0, 4.0]);
    let report = c.tick().unwrap();
    assert_eq!(report.comm.communicating, vec![true, true]);
    assert_eq!(report.losses, vec![0.5, 0.5]);
    let p = c.params();
    assert!((p[0][0] - 1.81).abs() < 1e-15, "{}", p[0][0]);
    assert!((p[1][0] - 2.19).abs() < 1e-15, "{}", p[1][0]);
    assert!((c.workers()[0].velocity[0] + 0.1).abs() < 1e-15);
    assert!((c.workers()[1].velocity[0] - 0.1).abs() < 1e-15);
}

#[test]
fn gradient_is_taken_before_communication() {
    let mut c = quadratic_cluster(elastic(0.5, Schedule::Period(1)), &[1.0, 3.0], &[0.0, 4.0]);
    c.tick().unwrap();
    let got = c.params()[0][0];
    // gradient after the exchange would be 2, giving 2 - 0.2 - 0.18
    let grad_after_comm = 1.62;
    // updating before the exchange leaves both workers at 2
    let update_then_comm = 2.0;
    assert!((got - 1.81).abs() < 1e-15);
    assert!((got - grad_after_comm).abs() > 0.1);
    assert!((got - update_then_comm).abs() > 0.1);
}

#[test]
fn method_none_is_plain_momentum() {
    let mut c = quadratic_cluster(ProtocolSpec::none(), &[1.0, -2.0, 5.0], &[0.5, 0.0, 1.0]);
    let mut manual: Vec<(ParamVector<f64>, ParamVector<f64>)> =
        [1.0, -2.0, 5.0].iter().map(|&x| (scalar(x), scalar(0.0))).collect();
    let targets = [0.5, 0.0, 1.0];
    for _ in 0..50 {
        c.tick().unwrap();
        for ((p, v), &t) in manual.iter_mut().zip(&targets) {
            let g = scalar(p[0] - t);
            nag_update(p, v, &g, 0.1, 0.9);
        }
    }
    for (w, (p, _)) in c.workers().iter().zip(&manual) {
        assert_eq!(w.params, *p);
    }
}

#[test]
fn clocks_stay_in_lock_step() {
    let mut c = quadratic_cluster(
        elastic(0.3, Schedule::Probability(0.25)),
        &[0.0, 1.0, 2.0, 3.0],
        &[1.0; 4],
    );
    for r in 1..=40 {
        c.tick().unwrap();
        assert!(c.workers().iter().all(|w| w.clock == r));
        assert_eq!(c.rounds(), r);
    }
}

#[test]
fn easgd_keeps_center_and_conserves_with_center() {
    let spec = ProtocolSpec::with_schedule(Method::Easgd, Some(0.2), Schedule::Period(1)).unwrap();
    let objective = QuadraticObjective {
        targets: vec![scalar(0.0); 3],
    };
    let mut c = Cluster::new(
        objective,
        spec,
        OptimizerConfig { eta: 1e-300, mu: 0.0 },
        &scalar(1.0),
        3,
        0,
        1,
    )
    .unwrap();
    for (w, x) in c.workers_mut().iter_mut().zip([1.0, 2.0, 6.0]) {
        w.params = scalar(x);
    }
    c.tick().unwrap();
    // center starts at the init (1): z = 0.2 * (0, 1, 5)
    let center = c.center().unwrap()[0];
    assert!((center - 2.2).abs() < 1e-12);
    let total: f64 = c.params().iter().map(|p| p[0]).sum::<f64>() + center;
    assert!((total - 10.0).abs() < 1e-12);
}

#[test]
fn single_worker_rejects_gossip() {
    let objective = QuadraticObjective {
        targets: vec![scalar(0.0)],
    };
    let err = Cluster::new(objective, elastic(0.5, Schedule::Period(4)), OPT, &scalar(0.0), 1, 0, 1);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn divergence_is_reported() {
    let objective = QuadraticObjective {
        targets: vec![scalar(0.0)],
    };
    // η = 3 with zero momentum multiplies θ by -2 every round
    let mut c = Cluster::new(
        objective,
        ProtocolSpec::none(),
        OptimizerConfig { eta: 3.0, mu: 0.0 },
        &scalar(1.0),
        1,
        0,
        1,
    )
    .unwrap();
    let mut rounds = 0;
    let err = loop {
        match c.tick() {
            Ok(_) => rounds += 1,
            Err(e) => break e,
        }
    };
    assert!(matches!(err, Error::Divergence { step, .. } if step == rounds));
    assert_eq!(rounds, 39); // 2^40 > 1e12 > 2^39
}

fn small_config(protocol: ProtocolSpec, workers: usize) -> ExperimentConfig {
    ExperimentConfig {
        model: MlpSpec::new(vec![4, 8, 3]).unwrap(),
        protocol,
        optimizer: OptimizerConfig { eta: 0.05, mu: 0.9 },
        workers,
        effective_batch: 16,
        steps: 60,
        seed: 11,
        data: DataConfig {
            source: DataSource::Synthetic {
                n: 600,
                d: 4,
                classes: 3,
                spread: 0.5,
            },
            holdout: 100,
            partition: PartitionMode::ClassBiased { majority_share: 0.8 },
        },
        eval_every: 20,
    }
}

fn run(config: &ExperimentConfig, threads: usize) -> egl_core::sim::RunOutput<f64> {
    let data = prepare_data(&config.data, config.seed).unwrap();
    run_experiment(
        config,
        &data,
        &RunOptions {
            threads,
            order: BatchOrder::Shuffled,
        },
    )
    .unwrap()
}

#[test]
fn never_firing_period_equals_no_communication() {
    let none = run(&small_config(ProtocolSpec::none(), 4), 1);
    let off = run(&small_config(elastic(0.5, Schedule::Period(u64::MAX)), 4), 1);
    assert_eq!(none.params, off.params);
    assert_eq!(none.series, off.series);
}

#[test]
fn runs_are_deterministic_and_thread_count_free() {
    let mut config = small_config(elastic(0.5, Schedule::Probability(0.25)), 4);
    config.model = config.model.clone().with_dropout(0.1, 0.3).unwrap();
    let a = run(&config, 1);
    let b = run(&config, 1);
    let c = run(&config, 4);
    assert_eq!(a.params, b.params);
    assert_eq!(a.series, b.series);
    assert_eq!(a.params, c.params);
    assert_eq!(a.series, c.series);
    assert!(a.divergence.is_none());
}

#[test]
fn series_layout() {
    let mut config = small_config(ProtocolSpec::none(), 1);
    config.steps = 50;
    let out = run(&config, 1);
    let steps: Vec<u64> = out.series.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![20, 40, 50]);
    let r = &out.series.records[0];
    assert_eq!(r.rank0_acc, r.aggregate_acc);
    assert_eq!(r.pairwise_disagreement, 0.0);
    // 500 training rows, batch 16: 31.25 rounds per epoch
    assert!((r.epoch - 20.0 * 16.0 / 500.0).abs() < 1e-15);
}

#[test]
fn every_method_runs() {
    for method in Method::ALL {
        let spec = match method {
            Method::None => ProtocolSpec::none(),
            Method::AllReduce => ProtocolSpec::all_reduce(),
            m => ProtocolSpec::with_schedule(m, m.uses_alpha().then_some(0.5), Schedule::Period(4)).unwrap(),
        };
        let out = run(&small_config(spec, 4), 1);
        assert!(out.divergence.is_none(), "{method}");
        assert_eq!(out.series.records.len(), 3, "{method}");
        if method == Method::AllReduce {
            assert_eq!(out.series.records[2].pairwise_disagreement, 0.0);
        }
    }
}

#[test]
fn all_reduce_matches_one_big_batch() {
    let config = small_config(ProtocolSpec::all_reduce(), 4);
    let data = prepare_data::<f64>(&config.data, 3).unwrap();
    let init = egl_core::sim::shared_init(&config.model, 3);
    // worker k owns rows 32t + 8k .. 32t + 8k + 8, so round t of the four
    // workers covers the same rows as batch t of the single worker
    let rows = 480;
    let parts: Vec<Partition> = (0..4)
        .map(|k| Partition {
            worker_rank: k,
            indices: (0..rows / 32)
                .flat_map(|t| 32 * t + 8 * k..32 * t + 8 * k + 8)
                .collect(),
        })
        .collect();
    let big = vec![Partition {
        worker_rank: 0,
        indices: (0..rows).collect(),
    }];
    let objective = |partitions, batch| MlpObjective {
        spec: &config.model,
        data: &data.train,
        partitions,
        batch,
        order: BatchOrder::Sequential,
    };
    let mut four = Cluster::new(
        objective(parts, 8),
        ProtocolSpec::all_reduce(),
        config.optimizer,
        &init,
        4,
        0,
        1,
    )
    .unwrap();
    let mut one = Cluster::new(
        objective(big, 32),
        ProtocolSpec::none(),
        config.optimizer,
        &init,
        1,
        0,
        1,
    )
    .unwrap();
    for _ in 0..200 {
        four.tick().unwrap();
        one.tick().unwrap();
    }
    let reference = &one.params()[0];
    let worst = four
        .params()
        .iter()
        .flat_map(|p| p.0.iter().zip(&reference.0).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "max |Δθ| = {worst:e}");
}

#[test]
fn config_validation() {
    let ok = small_config(ProtocolSpec::none(), 4);
    assert!(ok.validate().is_ok());
    let mut c = ok.clone();
    c.effective_batch = 18;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.steps = 0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.workers = 1;
    c.protocol = elastic(0.5, Schedule::Period(2));
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.model = MlpSpec::new(vec![5, 8, 3]).unwrap();
    assert!(c.validate().is_err());
    let mut c = ok;
    c.optimizer.mu = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    let ck = Checkpoint {
        config_hash: [7u8; 32],
        params: vec![
            ParamVector(vec![1.5, -0.25, 3e-300]),
            ParamVector(vec![0.0, f64::MAX, -1.0]),
        ],
    };
    ck.write(&path).unwrap();
    assert_eq!(Checkpoint::<f64>::read(&path).unwrap(), ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 52 + 2 * 3 * 8);
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(Checkpoint::<f64>::read(&path), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        Checkpoint::<f64>::read(&path),
        Err(Error::Format { offset: 0, .. })
    ));
}

#[test]
fn single_precision_run_tracks_double() {
    let config = small_config(elastic(0.5, Schedule::Period(4)), 4);
    let d64 = prepare_data::<f64>(&config.data, config.seed).unwrap();
    let d32 = prepare_data::<f32>(&config.data, config.seed).unwrap();
    let a = run_experiment(&config, &d64, &RunOptions::default()).unwrap();
    let b = run_experiment(&config, &d32, &RunOptions::default()).unwrap();
    let (ra, rb) = (a.series.last().unwrap(), b.series.last().unwrap());
    assert!(
        (ra.aggregate_acc - rb.aggregate_acc).abs() <= 0.02,
        "{} vs {}",
        ra.aggregate_acc,
        rb.aggregate_acc
    );
    let worst = a.params[0]
        .0
        .iter()
        .zip(&b.params[0].0)
        .map(|(x, &y)| (x - y as f64).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}
