//! Discrete-time simulation of the protocol under churn and adversaries.
//!
//! One tick is one network delay. View `v` occupies ticks `4v..4v+3` and is
//! finalized at tick `4v+4`, when its confirms arrive. A run is a pure
//! function of its [`RunSpec`].

pub mod adversary;
pub mod churn;
pub mod config;
pub mod network;
pub(crate) mod sim;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use churn::{ChurnModel, ChurnProcess, ChurnSchedule, Stage};
pub use config::{ConfigError, ExperimentConfig, RunSpec, Strategy};
pub use sim::run_pvss;

use crate::codec::sha256;
use crate::metrics::{MetricsRecord, NodeRecord, TickRecord, TxRecord, Variant};
use crate::protocol::{Block, Evidence, NodeId};

/// Independent random stream for one purpose within a run.
pub fn rng_stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(sha256(&[label.as_bytes(), &seed.to_be_bytes()]))
}

/// Byzantine node ids for a run.
pub fn byzantine_set(n: usize, malicious: usize, seed: u64) -> BTreeSet<NodeId> {
    let mut ids: Vec<NodeId> = (0..n as NodeId).collect();
    ids.shuffle(&mut rng_stream(seed, "byzantine"));
    ids.into_iter().take(malicious).collect()
}

/// Splits the honest nodes into two halves for partitioning attacks.
pub fn honest_groups(n: usize, byzantine: &BTreeSet<NodeId>, split_seed: u64) -> [BTreeSet<NodeId>; 2] {
    let mut honest: Vec<NodeId> = (0..n as NodeId).filter(|i| !byzantine.contains(i)).collect();
    honest.shuffle(&mut rng_stream(split_seed, "split"));
    let half = honest.len().div_ceil(2);
    [honest[..half].iter().copied().collect(), honest[half..].iter().copied().collect()]
}

/// What happened in one view, as seen by the honest nodes that completed it.
#[derive(Clone, Debug, Serialize)]
pub struct ViewTrace {
    pub view: u64,
    pub active: usize,
    pub leader: Option<NodeId>,
    pub leader_byzantine: bool,
    /// Honest members awake from the view start through finalization.
    pub completed: Vec<NodeId>,
    pub deciders: Vec<NodeId>,
    #[serde(skip)]
    pub decided: Option<Block>,
    /// Every node was awake throughout the view.
    pub all_awake: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub views: Vec<MetricsRecord>,
    pub nodes: Vec<NodeRecord>,
    pub ticks: Vec<TickRecord>,
    pub txs: Vec<TxRecord>,
    pub traces: Vec<ViewTrace>,
    pub evidence: Vec<Evidence>,
    pub byzantine: BTreeSet<NodeId>,
    pub forks: u64,
    /// Ticks at which Byzantine nodes were not a strict minority of the awake nodes.
    pub unsafe_ticks: u64,
}

impl RunResult {
    /// True when the honest-majority assumption held at every tick.
    pub fn safety_valid(&self) -> bool {
        self.unsafe_ticks == 0
    }

    pub fn decided_views(&self) -> usize {
        self.views.iter().filter(|r| r.outcome == crate::metrics::Outcome::Decided).count()
    }
}

/// Runs one scenario with the protocol variant it names.
pub fn run(spec: &RunSpec) -> Result<RunResult, ConfigError> {
    spec.validate()?;
    Ok(match spec.variant {
        Variant::PvssBft => run_pvss(spec),
        Variant::BaselineBft => crate::baselines::run_baseline_bft(spec),
        Variant::LongestChain => crate::baselines::run_longest_chain(spec),
    })
}

pub(crate) fn honest_minority(awake: u32, byz_awake: u32) -> bool {
    byz_awake == 0 || 2 * byz_awake < awake
}
