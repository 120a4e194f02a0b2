//! Slot-based longest-chain protocol.
//!
//! Every `slot_ticks` ticks one awake node, chosen uniformly, extends the
//! best chain it knows. Blocks reach awake nodes one tick later; sleeping
//! nodes keep stale tips and may fork when they lead. Fork choice prefers
//! the longer chain, then the tip with the lower leader index. A block is
//! confirmed once `confirm_depth` blocks extend it on the best chain.

use std::collections::HashSet;

use rand::Rng;

use crate::metrics::{MetricsRecord, Outcome, TickRecord, TxRecord, Variant};
use crate::protocol::{NodeId, TxId};
use crate::simnet::network::Network;
use crate::simnet::{byzantine_set, honest_minority, rng_stream, ChurnProcess, RunResult, RunSpec};

#[derive(Clone, Debug)]
struct ChainBlock {
    parent: usize,
    height: u64,
    leader: NodeId,
    tick: u64,
    txs: Vec<TxId>,
    confirmed: Option<u64>,
}

struct Tree {
    blocks: Vec<ChainBlock>,
}

impl Tree {
    fn better(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.blocks[a], &self.blocks[b]);
        (x.height, std::cmp::Reverse(x.leader)) > (y.height, std::cmp::Reverse(y.leader))
    }

    fn chain(&self, mut tip: usize) -> Vec<usize> {
        let mut out = vec![tip];
        while tip != 0 {
            tip = self.blocks[tip].parent;
            out.push(tip);
        }
        out.reverse();
        out
    }
}

/// Runs the longest-chain baseline. Byzantine nodes behave honestly; the
/// baseline only measures latency under churn.
pub fn run_longest_chain(spec: &RunSpec) -> RunResult {
    let n = spec.nodes;
    let params = spec.longest_chain;
    let byzantine = byzantine_set(n, spec.malicious, spec.seed);
    let mut churn = ChurnProcess::new(n, spec.churn.clone(), rng_stream(spec.seed, "churn"));
    let mut rng = rng_stream(spec.seed, "leaders");
    let mut tree = Tree {
        blocks: vec![ChainBlock { parent: 0, height: 0, leader: 0, tick: 0, txs: Vec::new(), confirmed: Some(0) }],
    };
    let mut tips = vec![0usize; n];
    let mut net: Network<usize> = Network::new(n);
    let mut txs: Vec<TxRecord> = Vec::new();
    let mut slots: Vec<(u64, Option<usize>, u32, u32, u64, u64)> = Vec::new();
    let mut out = RunResult {
        spec: spec.clone(),
        views: Vec::new(),
        nodes: Vec::new(),
        ticks: Vec::new(),
        txs: Vec::new(),
        traces: Vec::new(),
        evidence: Vec::new(),
        byzantine: byzantine.clone(),
        forks: 0,
        unsafe_ticks: 0,
    };
    let total = spec.ticks();
    for tick in 0..total {
        let awake = churn.advance(tick).to_vec();
        let awake_n = awake.iter().filter(|&&a| a).count() as u32;
        let byz_n = byzantine.iter().filter(|&&b| awake[b as usize]).count() as u32;
        if !honest_minority(awake_n, byz_n) {
            out.unsafe_ticks += 1;
        }
        for (i, inbox) in net.deliver(&awake).into_iter().enumerate() {
            for b in inbox {
                if tree.better(b, tips[i]) {
                    tips[i] = b;
                }
            }
        }
        if tick % params.slot_ticks == 0 {
            let awake_ids: Vec<usize> = (0..n).filter(|&i| awake[i]).collect();
            let made = (!awake_ids.is_empty()).then(|| {
                let leader = awake_ids[rng.gen_range(0..awake_ids.len())];
                let parent = tips[leader];
                let included: HashSet<TxId> =
                    tree.chain(parent).iter().flat_map(|&b| tree.blocks[b].txs.iter().copied()).collect();
                let batch: Vec<TxId> =
                    txs.iter().filter(|t| t.submitted < tick && !included.contains(&t.tx)).map(|t| t.tx).collect();
                tree.blocks.push(ChainBlock {
                    parent,
                    height: tree.blocks[parent].height + 1,
                    leader: leader as NodeId,
                    tick,
                    txs: batch,
                    confirmed: None,
                });
                let id = tree.blocks.len() - 1;
                tips[leader] = id;
                net.broadcast(id);
                id
            });
            let heights = tips.iter().map(|&t| tree.blocks[t].height);
            let (lo, hi) = (heights.clone().min().unwrap_or(0), heights.max().unwrap_or(0));
            slots.push((tick, made, awake_n, byz_n, lo, hi));
        }
        let best = tips.iter().copied().fold(0, |acc, t| if tree.better(t, acc) { t } else { acc });
        let best_height = tree.blocks[best].height;
        if best_height > params.confirm_depth {
            let chain = tree.chain(best);
            let deep = (best_height - params.confirm_depth) as usize;
            for &b in chain[..=deep].iter().rev() {
                if tree.blocks[b].confirmed.is_some() {
                    break;
                }
                tree.blocks[b].confirmed = Some(tick);
                for &tx in &tree.blocks[b].txs {
                    let r = &mut txs[tx as usize];
                    if r.confirmed.is_none() {
                        r.confirmed = Some(tick);
                        r.latency_ticks = Some(tick - r.submitted);
                    }
                }
            }
        }
        if spec.workload.tx_interval > 0 && tick % spec.workload.tx_interval == 0 {
            txs.push(TxRecord {
                scenario: spec.scenario.clone(),
                seed: spec.seed,
                variant: Variant::LongestChain,
                tx: txs.len() as TxId,
                submitted: tick,
                confirmed: None,
                latency_ticks: None,
            });
        }
        out.ticks.push(TickRecord {
            scenario: spec.scenario.clone(),
            seed: spec.seed,
            variant: Variant::LongestChain,
            tick,
            stage: churn.schedule().stage_at(tick).0,
            awake: awake_n,
            byz_awake: byz_n,
            active: awake_n,
            height_max: best_height,
        });
    }
    let best = tips.iter().copied().fold(0, |acc, t| if tree.better(t, acc) { t } else { acc });
    let on_best: HashSet<usize> = tree.chain(best).into_iter().collect();
    let mut orphans = 0u64;
    for (slot, (tick, made, awake_n, byz_n, lo, hi)) in slots.into_iter().enumerate() {
        let (outcome, latency, discarded) = match made {
            None => (Outcome::Aborted, None, 0),
            Some(b) if on_best.contains(&b) => {
                (Outcome::Decided, tree.blocks[b].confirmed.map(|c| c - tree.blocks[b].tick), 0)
            }
            Some(_) => {
                orphans += 1;
                (Outcome::Forked, None, 1)
            }
        };
        debug_assert_eq!(made.map_or(tick, |b| tree.blocks[b].tick), tick);
        out.views.push(MetricsRecord {
            scenario: spec.scenario.clone(),
            seed: spec.seed,
            view: slot as u64,
            variant: Variant::LongestChain,
            outcome,
            latency_ticks: latency,
            discarded,
            forks_cum: orphans,
            chain_len_min: lo,
            chain_len_max: hi,
            awake: awake_n,
            byz_awake: byz_n,
        });
    }
    out.forks = orphans;
    out.txs = txs;
    out
}
