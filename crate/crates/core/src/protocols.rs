//! Communication-related updates of every supported protocol.
//!
//! All steps are pure functions of a pre-step snapshot: each worker's new
//! vector is computed from values read before any worker changed, so the
//! result does not depend on the order workers are visited in. Sums over
//! peer sets run in ascending rank order.
//!
//! The moving rate `alpha` is the only runtime coefficient. The consensus
//! penalty weight and EASGD's center rate are folded into it
//! (`alpha = 2·eta·rho` for full consensus, center rate `= alpha·|W|` for
//! EASGD, which makes the exchange symmetric).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AllReduce,
    Easgd,
    PullGossip,
    PushGossip,
    ElasticGossip,
    FullConsensus,
    None,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::AllReduce,
        Method::Easgd,
        Method::PullGossip,
        Method::PushGossip,
        Method::ElasticGossip,
        Method::FullConsensus,
        Method::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::AllReduce => "all_reduce",
            Method::Easgd => "easgd",
            Method::PullGossip => "pull_gossip",
            Method::PushGossip => "push_gossip",
            Method::ElasticGossip => "elastic_gossip",
            Method::FullConsensus => "full_consensus",
            Method::None => "none",
        }
    }

    /// Short label used in experiment names (`EG-4-0.125`).
    pub fn label(self) -> &'static str {
        match self {
            Method::AllReduce => "AR",
            Method::Easgd => "EA",
            Method::PullGossip => "GS",
            Method::PushGossip => "GSP",
            Method::ElasticGossip => "EG",
            Method::FullConsensus => "FC",
            Method::None => "NC",
        }
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, Method::Easgd | Method::ElasticGossip | Method::FullConsensus)
    }

    /// Whether the method exchanges parameters on a τ/p schedule.
    pub fn uses_schedule(self) -> bool {
        !matches!(self, Method::AllReduce | Method::None)
    }

    pub fn uses_peers(self) -> bool {
        matches!(self, Method::PullGossip | Method::PushGossip | Method::ElasticGossip)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol method `{s}`")))
    }
}

/// When a worker communicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every `τ`-th clock tick, starting at 0.
    Period(u64),
    /// Independent Bernoulli(p) draw per worker per tick.
    Probability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub method: Method,
    pub alpha: Option<f64>,
    pub schedule: Option<Schedule>,
}

impl ProtocolSpec {
    pub fn none() -> Self {
        ProtocolSpec {
            method: Method::None,
            alpha: None,
            schedule: None,
        }
    }

    pub fn all_reduce() -> Self {
        ProtocolSpec {
            method: Method::AllReduce,
            alpha: None,
            schedule: None,
        }
    }

    pub fn with_schedule(method: Method, alpha: Option<f64>, schedule: Schedule) -> Result<Self> {
        let spec = ProtocolSpec {
            method,
            alpha,
            schedule: Some(schedule),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.method.uses_alpha(), self.alpha) {
            (true, None) => {
                return Err(Error::Config(format!("protocol.alpha is required for {}", self.method)));
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!("protocol.alpha is not used by {}", self.method)));
            }
            (true, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return Err(Error::Config(format!("protocol.alpha must be in [0, 1], got {a}")));
            }
            _ => {}
        }
        match (self.method.uses_schedule(), self.schedule) {
            (true, None) => Err(Error::Config(format!(
                "{} needs exactly one of protocol.tau or protocol.comm_probability",
                self.method
            ))),
            (false, Some(_)) => Err(Error::Config(format!(
                "{} takes no communication schedule (protocol.tau / protocol.comm_probability)",
                self.method
            ))),
            (true, Some(Schedule::Period(0))) => Err(Error::Config("protocol.tau must be positive".into())),
            (true, Some(Schedule::Probability(p))) if !(p > 0.0 && p <= 1.0) => Err(Error::Config(format!(
                "protocol.comm_probability must be in (0, 1], got {p}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn alpha_or_zero(&self) -> f64 {
        self.alpha.unwrap_or(0.0)
    }
}

/// Decides whether a worker at clock `t` communicates this tick. Draws from
/// `rng` only in probability mode.
pub fn should_communicate(spec: &ProtocolSpec, t: u64, rng: &mut RngStream) -> bool {
    if !spec.method.uses_schedule() {
        return false;
    }
    match spec.schedule {
        Some(Schedule::Period(tau)) => t.is_multiple_of(tau),
        Some(Schedule::Probability(p)) => rng.bernoulli(p),
        None => false,
    }
}

/// Peer chosen by each worker this round; `None` for workers that sat out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selections {
    choices: Vec<Option<usize>>,
}

impl Selections {
    pub fn new(choices: Vec<Option<usize>>) -> Result<Self> {
        let w = choices.len();
        for (i, c) in choices.iter().enumerate() {
            if let Some(k) = *c {
                if k == i || k >= w {
                    return Err(Error::InvalidArgument(format!(
                        "worker {i} cannot select peer {k} among {w} workers"
                    )));
                }
            }
        }
        Ok(Selections { choices })
    }

    /// Every worker selects the given peer (`sel[i]` is worker i's peer).
    pub fn complete(peers: &[usize]) -> Result<Self> {
        Self::new(peers.iter().map(|&k| Some(k)).collect())
    }

    pub fn workers(&self) -> usize {
        self.choices.len()
    }

    pub fn peer_of(&self, i: usize) -> Option<usize> {
        self.choices[i]
    }

    pub fn choices(&self) -> &[Option<usize>] {
        &self.choices
    }

    /// Ranks that selected `i`, ascending.
    pub fn selectors_of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.choices
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == Some(i))
            .map(|(j, _)| j)
    }
}

/// Uniform choice from `W \ {rank}`.
pub fn select_peer(rank: usize, workers: usize, rng: &mut RngStream) -> Result<usize> {
    if workers < 2 {
        return Err(Error::InvalidArgument(format!(
            "peer selection needs at least 2 workers, got {workers}"
        )));
    }
    let k = rng.below(workers - 1);
    Ok(if k >= rank { k + 1 } else { k })
}

/// Every worker selects a peer, in rank order, from one stream.
pub fn select_peers(workers: usize, rng: &mut RngStream) -> Result<Selections> {
    let choices = (0..workers)
        .map(|i| select_peer(i, workers, rng).map(Some))
        .collect::<Result<_>>()?;
    Selections::new(choices)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GossipVariant {
    /// `K_i = {k'(i)} ∪ {j : k'(j) = i}`.
    Elastic,
    /// `K_i = {i} ∪ {j : k'(j) = i}`.
    Push,
}

/// Per-worker exchange sets, each sorted ascending without duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GossipSets(pub Vec<Vec<usize>>);

impl GossipSets {
    pub fn get(&self, i: usize) -> &[usize] {
        &self.0[i]
    }
}

pub fn build_gossip_sets(sel: &Selections, variant: GossipVariant) -> GossipSets {
    let w = sel.workers();
    let mut sets: Vec<Vec<usize>> = (0..w)
        .map(|i| match variant {
            GossipVariant::Elastic => sel.peer_of(i).into_iter().collect(),
            GossipVariant::Push => vec![i],
        })
        .collect();
    for (j, choice) in sel.choices().iter().enumerate() {
        if let Some(k) = *choice {
            sets[k].push(j);
        }
    }
    for s in sets.iter_mut() {
        s.sort_unstable();
        s.dedup();
    }
    GossipSets(sets)
}

fn check_congruent<T: Scalar>(vectors: &[ParamVector<T>]) -> Result<usize> {
    let len = vectors.first().map_or(0, ParamVector::len);
    if let Some(bad) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::Dimension {
            op: "protocol step",
            left: (len, 1),
            right: (bad.len(), 1),
        });
    }
    Ok(len)
}

/// `θ^i ← θ^i − α Σ_{k∈K_i} (θ^i − θ^k)` over `members` for each worker.
fn elastic_pull_toward<T: Scalar>(
    snapshot: &[ParamVector<T>],
    members: impl Fn(usize) -> Vec<usize>,
    alpha: T,
) -> Vec<ParamVector<T>> {
    // keeps the identity bitwise, signed zeros included
    if alpha == T::zero() {
        return snapshot.to_vec();
    }
    snapshot
        .iter()
        .enumerate()
        .map(|(i, own)| {
            let peers = members(i);
            if peers.is_empty() {
                return own.clone();
            }
            let out = own
                .0
                .iter()
                .enumerate()
                .map(|(c, &theta)| {
                    let mut acc = T::zero();
                    for &k in &peers {
                        acc += theta - snapshot[k][c];
                    }
                    theta - alpha * acc
                })
                .collect();
            ParamVector(out)
        })
        .collect()
}

/// Elastic Gossip exchange on sets built with [`GossipVariant::Elastic`].
pub fn elastic_gossip_step<T: Scalar>(
    snapshot: &[ParamVector<T>],
    sets: &GossipSets,
    alpha: T,
) -> Result<Vec<ParamVector<T>>> {
    check_congruent(snapshot)?;
    if sets.0.len() != snapshot.len() {
        return Err(Error::InvalidArgument("gossip sets do not cover every worker".into()));
    }
    Ok(elastic_pull_toward(snapshot, |i| sets.get(i).to_vec(), alpha))
}

/// Generalized consensus update among `participants` (every worker when
/// all communicate): `θ^i ← θ^i − α Σ_{k∈S} (θ^i − θ^k)` for `i ∈ S`.
pub fn full_consensus_among<T: Scalar>(
    snapshot: &[ParamVector<T>],
    participants: &[bool],
    alpha: T,
) -> Result<Vec<ParamVector<T>>> {
    check_congruent(snapshot)?;
    let members: Vec<usize> = (0..snapshot.len()).filter(|&k| participants[k]).collect();
    Ok(elastic_pull_toward(
        snapshot,
        |i| if participants[i] { members.clone() } else { Vec::new() },
        alpha,
    ))
}

pub fn full_consensus_step<T: Scalar>(snapshot: &[ParamVector<T>], alpha: T) -> Result<Vec<ParamVector<T>>> {
    full_consensus_among(snapshot, &vec![true; snapshot.len()], alpha)
}

/// Pull Gossiping SGD: each selecting worker averages with its peer; the
/// peer itself is untouched.
pub fn pull_gossip_step<T: Scalar>(snapshot: &[ParamVector<T>], sel: &Selections) -> Result<Vec<ParamVector<T>>> {
    check_congruent(snapshot)?;
    let half = T::of(0.5);
    Ok(snapshot
        .iter()
        .enumerate()
        .map(|(i, own)| match sel.peer_of(i) {
            Some(k) => ParamVector(
                own.0
                    .iter()
                    .zip(&snapshot[k].0)
                    .map(|(&a, &b)| (a + b) * half)
                    .collect(),
            ),
            None => own.clone(),
        })
        .collect())
}

/// Push Gossiping SGD: `θ^i ← mean_{k∈K_i} θ^k` on push-variant sets.
pub fn push_gossip_step<T: Scalar>(snapshot: &[ParamVector<T>], sets: &GossipSets) -> Result<Vec<ParamVector<T>>> {
    let len = check_congruent(snapshot)?;
    Ok(sets
        .0
        .iter()
        .enumerate()
        .map(|(i, members)| {
            if members.len() <= 1 {
                return snapshot[i].clone();
            }
            let count = T::from_usize(members.len()).unwrap();
            ParamVector(
                (0..len)
                    .map(|c| {
                        let mut acc = T::zero();
                        for &k in members {
                            acc += snapshot[k][c];
                        }
                        acc / count
                    })
                    .collect(),
            )
        })
        .collect())
}

/// EASGD exchange between the `participants` and the center variable:
/// `z^i = α(θ^i − θ̃)`, `θ^i ← θ^i − z^i`, `θ̃ ← θ̃ + Σ z^i`.
pub fn easgd_among<T: Scalar>(
    snapshot: &[ParamVector<T>],
    center: &ParamVector<T>,
    participants: &[bool],
    alpha: T,
) -> Result<(Vec<ParamVector<T>>, ParamVector<T>)> {
    let len = check_congruent(snapshot)?;
    if center.len() != len && !snapshot.is_empty() {
        return Err(Error::Dimension {
            op: "easgd center",
            left: (len, 1),
            right: (center.len(), 1),
        });
    }
    let mut new_center = center.clone();
    let workers = snapshot
        .iter()
        .zip(participants)
        .map(|(own, &active)| {
            if !active {
                return own.clone();
            }
            ParamVector(
                own.0
                    .iter()
                    .zip(&center.0)
                    .zip(new_center.0.iter_mut())
                    .map(|((&theta, &c), acc)| {
                        let z = alpha * (theta - c);
                        *acc += z;
                        theta - z
                    })
                    .collect(),
            )
        })
        .collect();
    Ok((workers, new_center))
}

pub fn easgd_step<T: Scalar>(
    snapshot: &[ParamVector<T>],
    center: &ParamVector<T>,
    alpha: T,
) -> Result<(Vec<ParamVector<T>>, ParamVector<T>)> {
    easgd_among(snapshot, center, &vec![true; snapshot.len()], alpha)
}

/// Mean of the workers' gradients; every worker receives the result.
pub fn allreduce_mean<T: Scalar>(gradients: &[ParamVector<T>]) -> Result<ParamVector<T>> {
    let len = check_congruent(gradients)?;
    if gradients.is_empty() {
        return Err(Error::Empty("allreduce_mean"));
    }
    let n = T::from_usize(gradients.len()).unwrap();
    Ok(ParamVector(
        (0..len)
            .map(|c| {
                let mut acc = T::zero();
                for g in gradients {
                    acc += g[c];
                }
                acc / n
            })
            .collect(),
    ))
}

/// Who communicates in one round and with whom.
#[derive(Debug, Clone, PartialEq)]
pub struct CommRound {
    pub communicating: Vec<bool>,
    /// Present for peer-based methods.
    pub selections: Option<Selections>,
}

impl CommRound {
    pub fn any(&self) -> bool {
        self.communicating.iter().any(|&c| c)
    }
}

/// New worker vectors and, for EASGD, the new center.
pub type CommOutput<T> = (Vec<ParamVector<T>>, Option<ParamVector<T>>);

/// Applies the communication-related update of `spec.method` for one round.
/// `center` is the EASGD center variable and is ignored by other methods.
pub fn communicate<T: Scalar>(
    spec: &ProtocolSpec,
    snapshot: &[ParamVector<T>],
    center: Option<&ParamVector<T>>,
    round: &CommRound,
) -> Result<CommOutput<T>> {
    let alpha = T::of(spec.alpha_or_zero());
    let center = center.cloned();
    if !round.any() {
        return Ok((snapshot.to_vec(), center));
    }
    let selections = || {
        round
            .selections
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs peer selections", spec.method)))
    };
    match spec.method {
        Method::None | Method::AllReduce => Ok((snapshot.to_vec(), center)),
        Method::ElasticGossip => {
            let sets = build_gossip_sets(selections()?, GossipVariant::Elastic);
            Ok((elastic_gossip_step(snapshot, &sets, alpha)?, center))
        }
        Method::PullGossip => Ok((pull_gossip_step(snapshot, selections()?)?, center)),
        Method::PushGossip => {
            let sets = build_gossip_sets(selections()?, GossipVariant::Push);
            Ok((push_gossip_step(snapshot, &sets)?, center))
        }
        Method::FullConsensus => Ok((full_consensus_among(snapshot, &round.communicating, alpha)?, center)),
        Method::Easgd => {
            let c = center.ok_or_else(|| Error::InvalidArgument("easgd needs a center variable".into()))?;
            let (w, c) = easgd_among(snapshot, &c, &round.communicating, alpha)?;
            Ok((w, Some(c)))
        }
    }
}
