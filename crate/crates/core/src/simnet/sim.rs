//! Tick loop for the PVSS-BFT protocol.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use super::adversary::Coalition;
use super::churn::ChurnProcess;
use super::config::RunSpec;
use super::network::{Audience, Network};
use super::{byzantine_set, honest_groups, honest_minority, rng_stream, RunResult, ViewTrace};
use crate::codec::Digest;
use crate::group::Group;
use crate::metrics::{ForkMonitor, MetricsRecord, NodeRecord, Outcome, TickRecord, TxRecord, Variant};
use crate::protocol::*;
use crate::pvss::KeyPair;

#[derive(Clone, Debug)]
pub(crate) enum Packet {
    Tx(TxId),
    Propose(Arc<ProposeMsg>),
    Forward(Arc<ShareForwardMsg>),
    Vote(Arc<VoteMsg>),
    Confirm(ConfirmMsg),
    Recover(Arc<RecoverMsg>),
    Awake(AwakeMsg),
}

#[derive(Default)]
struct Inbox {
    proposals: Vec<Arc<ProposeMsg>>,
    forwards: Vec<Arc<ShareForwardMsg>>,
    votes: Vec<Arc<VoteMsg>>,
    confirms: Vec<ConfirmMsg>,
    recovers: Vec<Arc<RecoverMsg>>,
    late_awakes: Vec<AwakeMsg>,
}

struct Sim<'a> {
    spec: &'a RunSpec,
    ctx: Ctx,
    nodes: Vec<Node>,
    coalition: Coalition,
    net: Network<Packet>,
    rng: rand_chacha::ChaCha8Rng,
    inboxes: Vec<Inbox>,
    in_view: Vec<bool>,
    awake: Vec<bool>,
    view_awake: Vec<bool>,
    initial: Vec<NodeId>,
    canonical: usize,
    forks: ForkMonitor,
    evidence_seen: HashSet<Evidence>,
    txs: Vec<TxRecord>,
    out: RunResult,
}

/// Runs a PVSS-BFT scenario.
pub fn run_pvss(spec: &RunSpec) -> RunResult {
    let n = spec.nodes;
    let group = Group::new(spec.profile);
    let mut key_rng = rng_stream(spec.seed, "keys");
    let keys: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(&group, &mut key_rng)).collect();
    let ctx = Ctx::new(group, keys.iter().map(|k| k.public).collect());
    let byzantine = byzantine_set(n, spec.malicious, spec.seed);
    let groups = honest_groups(n, &byzantine, spec.split_seed);
    let nodes: Vec<Node> = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let mut node = Node::new(i as NodeId, k);
            node.verify = !byzantine.contains(&(i as NodeId));
            node
        })
        .collect();
    let mut churn = ChurnProcess::new(n, spec.churn.clone(), rng_stream(spec.seed, "churn"));
    let awake = churn.advance(0).to_vec();
    let mut initial: Vec<NodeId> = (0..n as NodeId).filter(|&i| awake[i as usize]).collect();
    if initial.is_empty() {
        initial = (0..n as NodeId).collect();
    }
    let canonical = (0..n).find(|&i| !byzantine.contains(&(i as NodeId))).unwrap_or(0);
    let mut sim = Sim {
        spec,
        ctx,
        nodes,
        coalition: Coalition::new(spec.strategy, byzantine.clone(), &groups),
        net: Network::new(n),
        rng: rng_stream(spec.seed, "protocol"),
        inboxes: (0..n).map(|_| Inbox::default()).collect(),
        in_view: vec![false; n],
        awake: awake.clone(),
        view_awake: awake,
        initial: initial.clone(),
        canonical,
        forks: ForkMonitor::default(),
        evidence_seen: HashSet::new(),
        txs: Vec::new(),
        out: RunResult {
            spec: spec.clone(),
            views: Vec::new(),
            nodes: Vec::new(),
            ticks: Vec::new(),
            txs: Vec::new(),
            traces: Vec::new(),
            evidence: Vec::new(),
            byzantine,
            forks: 0,
            unsafe_ticks: 0,
        },
    };
    for node in &mut sim.nodes {
        node.set_next_active(initial.clone());
    }
    let total = spec.ticks();
    for tick in 0..=total {
        sim.awake = churn.advance(tick).to_vec();
        sim.step(tick, total, churn.schedule().stage_at(tick).0);
    }
    sim.out.forks = sim.forks.forks();
    sim.out.txs = sim.txs;
    sim.out
}

impl Sim<'_> {
    fn is_byz(&self, i: usize) -> bool {
        self.coalition.is_byzantine(i as NodeId)
    }

    fn counts(&self, awake: &[bool]) -> (u32, u32) {
        let a = awake.iter().filter(|&&x| x).count() as u32;
        let b = (0..awake.len()).filter(|&i| awake[i] && self.is_byz(i)).count() as u32;
        (a, b)
    }

    fn step(&mut self, tick: u64, total: u64, stage: usize) {
        let (awake_n, byz_n) = self.counts(&self.awake);
        if !honest_minority(awake_n, byz_n) {
            self.out.unsafe_ticks += 1;
        }
        let phase = tick % 4;
        let view = tick / 4;
        let delivered = self.net.deliver(&self.awake);
        for (i, packets) in delivered.into_iter().enumerate() {
            for p in packets {
                self.route(i, phase, p);
            }
        }
        for i in 0..self.nodes.len() {
            self.in_view[i] &= self.awake[i];
        }
        if phase == 0 && view > 0 {
            self.finalize(view - 1, tick);
        }
        if tick < total {
            if phase == 0 {
                self.begin(view);
            }
            self.act(phase);
            let interval = self.spec.workload.tx_interval;
            if interval > 0 && tick % interval == 0 {
                let id = self.txs.len() as TxId;
                self.txs.push(TxRecord {
                    scenario: self.spec.scenario.clone(),
                    seed: self.spec.seed,
                    variant: Variant::PvssBft,
                    tx: id,
                    submitted: tick,
                    confirmed: None,
                    latency_ticks: None,
                });
                self.net.broadcast(Packet::Tx(id));
            }
        }
        let honest = (0..self.nodes.len()).filter(|&i| !self.is_byz(i));
        let height_max = honest.map(|i| self.nodes[i].tip().height).max().unwrap_or(0);
        self.out.ticks.push(TickRecord {
            scenario: self.spec.scenario.clone(),
            seed: self.spec.seed,
            variant: Variant::PvssBft,
            tick,
            stage,
            awake: awake_n,
            byz_awake: byz_n,
            active: self.nodes[self.canonical].state.active.len() as u32,
            height_max,
        });
    }

    fn route(&mut self, i: usize, phase: u64, p: Packet) {
        let inbox = &mut self.inboxes[i];
        match p {
            Packet::Tx(t) => self.nodes[i].receive_tx(t),
            Packet::Propose(m) => inbox.proposals.push(m),
            Packet::Forward(m) => inbox.forwards.push(m),
            Packet::Vote(m) => inbox.votes.push(m),
            Packet::Confirm(m) => inbox.confirms.push(m),
            Packet::Recover(m) => inbox.recovers.push(m),
            Packet::Awake(m) if phase == 0 => inbox.late_awakes.push(m),
            Packet::Awake(m) => self.nodes[i].handle_awake(&m),
        }
    }

    fn begin(&mut self, view: u64) {
        self.ctx.clear_caches();
        self.coalition.begin_view();
        self.view_awake.clone_from(&self.awake);
        for i in 0..self.nodes.len() {
            self.inboxes[i] = Inbox::default();
            let active = self.nodes[i].next_active.clone().unwrap_or_else(|| self.initial.clone());
            self.nodes[i].begin_view(view, active);
            self.in_view[i] = self.awake[i];
        }
    }

    fn act(&mut self, phase: u64) {
        let mut sends: Vec<(Audience, Packet)> = Vec::new();
        for i in 0..self.nodes.len() {
            if !self.awake[i] {
                continue;
            }
            let node = &mut self.nodes[i];
            let view = node.state.view;
            if !node.is_member() {
                if phase == 0 || phase == 3 {
                    sends.push((Audience::All, Packet::Awake(AwakeMsg::new(view, node.id))));
                }
                continue;
            }
            if !self.in_view[i] {
                continue;
            }
            let (ctx, rng, inbox) = (&self.ctx, &mut self.rng, &mut self.inboxes[i]);
            let byz = self.coalition.is_byzantine(i as NodeId);
            match (phase, byz) {
                (0, true) => sends.extend(self.coalition.propose(node, ctx, rng)),
                (0, false) => {
                    if let Some(m) = node.phase1_propose(ctx, rng) {
                        sends.push((Audience::All, Packet::Propose(Arc::new(m))));
                    }
                }
                (1, true) => sends.extend(self.coalition.forward(node, ctx, &inbox.proposals, rng)),
                (1, false) => {
                    if let Some(m) = node.phase2_process(ctx, &inbox.proposals, rng) {
                        sends.push((Audience::All, Packet::Forward(Arc::new(m))));
                    }
                }
                (2, true) => sends.extend(self.coalition.vote(node, ctx, &inbox.forwards, rng)),
                (2, false) => {
                    if let Some(m) = node.phase3_vote(ctx, &inbox.forwards, rng) {
                        sends.push((Audience::All, Packet::Vote(Arc::new(m))));
                    }
                }
                (_, true) => sends.extend(self.coalition.confirm(node, ctx, &inbox.votes, rng)),
                (_, false) => {
                    let out = node.phase4_confirm(ctx, &inbox.votes, rng);
                    if let Some(c) = out.confirm {
                        sends.push((Audience::All, Packet::Confirm(c)));
                    }
                    if let Some(r) = out.recover {
                        sends.push((Audience::All, Packet::Recover(Arc::new(r))));
                    }
                }
            }
        }
        for (to, p) in sends {
            self.net.send(to, p);
        }
    }

    fn finalize(&mut self, view: u64, tick: u64) {
        let n = self.nodes.len();
        let honest: Vec<usize> = (0..n).filter(|&i| !self.is_byz(i)).collect();
        let fresh: Vec<usize> =
            honest.iter().copied().filter(|&i| self.in_view[i] && self.nodes[i].is_member()).collect();
        let quorums: BTreeSet<Digest> = fresh.iter().filter_map(|&i| self.nodes[i].state.vote_quorum).collect();
        let mut deciders = Vec::new();
        let mut decided_h = BTreeSet::new();
        let mut decided_block = None;
        let mut forked = false;
        for &i in &fresh {
            let inbox = std::mem::take(&mut self.inboxes[i]);
            let report = self.nodes[i].finalize(&self.ctx, &inbox.confirms, &inbox.recovers, &inbox.late_awakes);
            for e in &report.evidence {
                if self.evidence_seen.insert(*e) {
                    self.out.evidence.push(*e);
                }
            }
            let Some(block) = report.decided else { continue };
            forked |= self.forks.observe(block.height, block.digest());
            if let Some(m) = self.nodes[i].state.leader_proposal() {
                decided_h.insert(m.header.h);
            }
            for &tx in &block.payload {
                if let Some(r) = self.txs.get_mut(tx as usize) {
                    if r.confirmed.is_none() {
                        r.confirmed = Some(tick);
                        r.latency_ticks = Some(tick - r.submitted);
                    }
                }
            }
            deciders.push(i as NodeId);
            decided_block.get_or_insert(block);
        }
        let first = fresh.first().map(|&i| &self.nodes[i].state);
        let leader = first.and_then(|s| s.leader);
        self.out.traces.push(ViewTrace {
            view,
            active: first.map_or(0, |s| s.active.len()),
            leader,
            leader_byzantine: leader.is_some_and(|l| self.is_byz(l as usize)),
            completed: fresh.iter().map(|&i| i as NodeId).collect(),
            deciders: deciders.clone(),
            decided: decided_block,
            all_awake: self.in_view.iter().all(|&x| x) && self.awake.iter().all(|&x| x),
        });
        let lens: Vec<u64> = honest.iter().map(|&i| self.nodes[i].tip().height).collect();
        for i in 0..n {
            let node = &self.nodes[i];
            self.out.nodes.push(NodeRecord {
                scenario: self.spec.scenario.clone(),
                seed: self.spec.seed,
                view,
                node: i as NodeId,
                byzantine: self.is_byz(i),
                awake: self.view_awake[i],
                member: node.state.is_member(node.id),
                decided: deciders.contains(&(i as NodeId)),
                chain_len: node.tip().height,
            });
        }
        let (awake_n, byz_n) = self.counts(&self.view_awake);
        let outcome = if forked {
            Outcome::Forked
        } else if deciders.is_empty() {
            Outcome::Aborted
        } else {
            Outcome::Decided
        };
        self.out.views.push(MetricsRecord {
            scenario: self.spec.scenario.clone(),
            seed: self.spec.seed,
            view,
            variant: Variant::PvssBft,
            outcome,
            latency_ticks: (!deciders.is_empty()).then_some(4),
            discarded: quorums.difference(&decided_h).count() as u64,
            forks_cum: self.forks.forks(),
            chain_len_min: lens.iter().copied().min().unwrap_or(0),
            chain_len_max: lens.iter().copied().max().unwrap_or(0),
            awake: awake_n,
            byz_awake: byz_n,
        });
        self.sync(&honest, &fresh);
    }

    /// Brings nodes that missed part of the view up to date with the most
    /// advanced honest node that completed it.
    fn sync(&mut self, honest: &[usize], fresh: &[usize]) {
        let pool = if fresh.is_empty() { honest } else { fresh };
        let Some(&canon) = pool.iter().max_by_key(|&&i| (self.nodes[i].log().len(), std::cmp::Reverse(i))) else {
            return;
        };
        self.canonical = canon;
        let reference = self.nodes[canon].clone();
        for i in 0..self.nodes.len() {
            if i == canon || !self.awake[i] {
                continue;
            }
            if fresh.contains(&i) {
                self.nodes[i].catch_up(&reference);
            } else {
                self.nodes[i].sync_from(&reference);
            }
        }
    }
}
