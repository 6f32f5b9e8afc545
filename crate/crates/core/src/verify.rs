//! Built-in invariant checks, run by the `verify` command.

use crate::data::{make_synthetic, BatchOrder, PartitionMode};
use crate::metrics::pairwise_disagreement;
use crate::nn::{finite_diff_grad, kaiming_init, loss_and_gradient, max_relative_error, MlpSpec, ParamVector};
use crate::numeric::Matrix;
use crate::protocols::{
    build_gossip_sets, easgd_step, elastic_gossip_step, full_consensus_step, select_peers, should_communicate,
    GossipVariant, Method, ProtocolSpec, Schedule, Selections,
};
use crate::rng::RngStream;
use crate::sim::{prepare_data, run_experiment, DataConfig, DataSource, ExperimentConfig, OptimizerConfig, RunOptions};

/// Outcome of one check. `detail` holds the measured quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("gradient matches central differences", gradient_check),
    ("communication conserves the parameter sum", conservation_check),
    ("moving rate boundary cases", moving_rate_check),
    ("bernoulli schedule rate", bernoulli_check),
    ("mutual pairs do not increase disagreement", disagreement_check),
    ("runs are deterministic across thread counts", determinism_check),
];

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let (passed, detail) = match check() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn random_vectors(rng: &mut RngStream, w: usize, dim: usize) -> Vec<ParamVector<f64>> {
    (0..w)
        .map(|_| ParamVector((0..dim).map(|_| rng.standard_normal()).collect()))
        .collect()
}

fn gradient_check() -> Result<String, String> {
    let spec = MlpSpec::new(vec![6, 5, 3]).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = RngStream::from_seed(seed);
        let p = kaiming_init::<f64>(&spec, &mut rng);
        let x = Matrix::from_vec(4, 6, (0..24).map(|_| rng.standard_normal()).collect()).map_err(|e| e.to_string())?;
        let y: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
        let (_, g) = loss_and_gradient(&spec, &p, &x, &y, None).map_err(|e| e.to_string())?;
        let fd = finite_diff_grad(&spec, &p, &x, &y, 1e-6).map_err(|e| e.to_string())?;
        worst = worst.max(max_relative_error(&g, &fd));
    }
    let detail = format!("max relative error {worst:.3e} over 20 seeds");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn column_sums(ws: &[ParamVector<f64>], extra: Option<&ParamVector<f64>>) -> Vec<f64> {
    (0..ws[0].len())
        .map(|c| ws.iter().chain(extra).map(|p| p[c]).sum())
        .collect()
}

fn conservation_check() -> Result<String, String> {
    let mut rng = RngStream::from_seed(0xC0115E);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let w = 2 + rng.below(7);
        let alpha = [0.1, 0.5, 0.9][trial % 3];
        let ws = random_vectors(&mut rng, w, 100);
        let center = random_vectors(&mut rng, 1, 100).remove(0);
        let sel = select_peers(w, &mut rng).map_err(|e| e.to_string())?;
        let sets = build_gossip_sets(&sel, GossipVariant::Elastic);
        let before = column_sums(&ws, None);
        let before_c = column_sums(&ws, Some(&center));
        let eg = elastic_gossip_step(&ws, &sets, alpha).map_err(|e| e.to_string())?;
        let fc = full_consensus_step(&ws, alpha).map_err(|e| e.to_string())?;
        let (ea, c) = easgd_step(&ws, &center, alpha).map_err(|e| e.to_string())?;
        for (after, reference) in [
            (column_sums(&eg, None), &before),
            (column_sums(&fc, None), &before),
            (column_sums(&ea, Some(&c)), &before_c),
        ] {
            for (a, b) in after.iter().zip(reference) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    let detail = format!("max relative drift {worst:.3e} over 200 trials");
    if worst < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn moving_rate_check() -> Result<String, String> {
    let mutual = Selections::complete(&[1, 0]).map_err(|e| e.to_string())?;
    let sets = build_gossip_sets(&mutual, GossipVariant::Elastic);
    let pair: Vec<ParamVector<f64>> = vec![ParamVector(vec![0.0, 1.25, -3.5]), ParamVector(vec![2.0, -0.75, 8.0])];
    let still = elastic_gossip_step(&pair, &sets, 0.0).map_err(|e| e.to_string())?;
    if still != pair {
        return Err("alpha = 0 changed the parameters".into());
    }
    let swapped = elastic_gossip_step(&pair, &sets, 1.0).map_err(|e| e.to_string())?;
    if swapped[0] != pair[1] || swapped[1] != pair[0] {
        return Err("alpha = 1 did not swap a mutual pair".into());
    }
    let half = elastic_gossip_step(&pair, &sets, 0.5).map_err(|e| e.to_string())?;
    for c in 0..3 {
        let mean = (pair[0][c] + pair[1][c]) / 2.0;
        if (half[0][c] - mean).abs() > 1e-12 || (half[1][c] - mean).abs() > 1e-12 {
            return Err(format!("alpha = 0.5 missed the average at coordinate {c}"));
        }
    }
    Ok("identity, swap and average hold".into())
}

fn bernoulli_check() -> Result<String, String> {
    let p = 1.0 / 32.0;
    let spec = ProtocolSpec::with_schedule(Method::ElasticGossip, Some(0.5), Schedule::Probability(p))
        .map_err(|e| e.to_string())?;
    let mut rng = RngStream::from_seed(32);
    let n = 100_000u64;
    let hits = (0..n).filter(|&t| should_communicate(&spec, t, &mut rng)).count();
    let rate = hits as f64 / n as f64;
    let bound = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    let detail = format!("rate {rate:.5} vs {p:.5} (bound {bound:.5})");
    if (rate - p).abs() <= bound {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn disagreement_check() -> Result<String, String> {
    let mut rng = RngStream::from_seed(7);
    for _ in 0..100 {
        let ws = random_vectors(&mut rng, 6, 10);
        let sets = build_gossip_sets(
            &Selections::complete(&[1, 0, 3, 2, 5, 4]).map_err(|e| e.to_string())?,
            GossipVariant::Elastic,
        );
        let after = elastic_gossip_step(&ws, &sets, 0.5).map_err(|e| e.to_string())?;
        if pairwise_disagreement(&after) > pairwise_disagreement(&ws) {
            return Err("disagreement grew after a mutual-pair exchange".into());
        }
    }
    Ok("100 random pairings".into())
}

fn determinism_check() -> Result<String, String> {
    let config = ExperimentConfig {
        model: MlpSpec::new(vec![4, 8, 3])
            .and_then(|m| m.with_dropout(0.1, 0.2))
            .map_err(|e| e.to_string())?,
        protocol: ProtocolSpec::with_schedule(Method::ElasticGossip, Some(0.5), Schedule::Probability(0.25))
            .map_err(|e| e.to_string())?,
        optimizer: OptimizerConfig { eta: 0.05, mu: 0.9 },
        workers: 4,
        effective_batch: 16,
        steps: 40,
        seed: 5,
        data: DataConfig {
            source: DataSource::Synthetic {
                n: 400,
                d: 4,
                classes: 3,
                spread: 0.5,
            },
            holdout: 80,
            partition: PartitionMode::ClassBiased { majority_share: 0.8 },
        },
        eval_every: 10,
    };
    let data = prepare_data::<f64>(&config.data, config.seed).map_err(|e| e.to_string())?;
    let run = |threads| {
        run_experiment(
            &config,
            &data,
            &RunOptions {
                threads,
                order: BatchOrder::Shuffled,
            },
        )
        .map_err(|e| e.to_string())
    };
    let (a, b, c) = (run(1)?, run(1)?, run(3)?);
    if a.params != b.params || a.series != b.series {
        return Err("two sequential runs differ".into());
    }
    if a.params != c.params || a.series != c.series {
        return Err("threaded run differs from sequential".into());
    }
    // the data generator must be deterministic too
    let d1 = make_synthetic::<f64>(1, 50, 3, 3, 0.3).map_err(|e| e.to_string())?;
    let d2 = make_synthetic::<f64>(1, 50, 3, 3, 0.3).map_err(|e| e.to_string())?;
    if d1.features != d2.features {
        return Err("synthetic data is not deterministic".into());
    }
    Ok("3 runs identical".into())
}
