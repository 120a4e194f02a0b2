//! Four-phase BFT without secret sharing.
//!
//! Proposals carry raw blocks and votes are plain digests, so nothing binds
//! a leader to a single block. Each node counts only the votes and confirms
//! for its own leader's block. Branches that diverge are reconciled one view
//! after the fork is detected; the losing branch is discarded.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::codec::Digest;
use crate::group::Group;
use crate::metrics::{ForkMonitor, MetricsRecord, NodeRecord, Outcome, TickRecord, TxRecord, Variant};
use crate::protocol::{leader_key, AwakeMsg, Block, Ctx, Node, NodeId, TxId};
use crate::pvss::KeyPair;
use crate::simnet::adversary::equivocation_marker;
use crate::simnet::network::{Audience, Network};
use crate::simnet::{
    byzantine_set, honest_groups, honest_minority, rng_stream, ChurnProcess, RunResult, RunSpec, Strategy, ViewTrace,
};
use crate::vrf::{vrf_eval, VrfOutput};

#[derive(Clone, Debug)]
struct Proposal {
    view: u64,
    proposer: NodeId,
    block: Block,
    digest: Digest,
    vrf: VrfOutput,
}

#[derive(Clone, Debug)]
enum Packet {
    Tx(TxId),
    Propose(Arc<Proposal>),
    Vote { view: u64, from: NodeId, digest: Digest },
    Confirm { view: u64, from: NodeId, digest: Digest },
    Awake(AwakeMsg),
}

#[derive(Default)]
struct ViewState {
    proposals: BTreeMap<NodeId, Arc<Proposal>>,
    equivocators: BTreeSet<NodeId>,
    leader: Option<Arc<Proposal>>,
    votes: BTreeMap<NodeId, Digest>,
    quorum: Option<Digest>,
    confirms: BTreeMap<NodeId, Digest>,
    awake_seen: BTreeSet<NodeId>,
}

struct Baseline<'a> {
    spec: &'a RunSpec,
    ctx: Ctx,
    nodes: Vec<Node>,
    views: Vec<ViewState>,
    byzantine: BTreeSet<NodeId>,
    audiences: [Audience; 2],
    net: Network<Packet>,
    in_view: Vec<bool>,
    awake: Vec<bool>,
    view_awake: Vec<bool>,
    initial: Vec<NodeId>,
    canonical: usize,
    forks: ForkMonitor,
    twins: BTreeMap<NodeId, [Digest; 2]>,
    unresolved: bool,
    discarded: BTreeSet<Digest>,
    txs: Vec<TxRecord>,
    out: RunResult,
}

/// Runs the baseline BFT protocol. Byzantine nodes equivocate under
/// [`Strategy::EquivocatingLeader`] and behave honestly otherwise.
pub fn run_baseline_bft(spec: &RunSpec) -> RunResult {
    let n = spec.nodes;
    let group = Group::new(spec.profile);
    let mut key_rng = rng_stream(spec.seed, "keys");
    let keys: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(&group, &mut key_rng)).collect();
    let ctx = Ctx::new(group, keys.iter().map(|k| k.public).collect());
    let byzantine = byzantine_set(n, spec.malicious, spec.seed);
    let groups = honest_groups(n, &byzantine, spec.split_seed);
    let aud = |k: usize| Audience::Only(groups[k].union(&byzantine).copied().collect());
    let mut churn = ChurnProcess::new(n, spec.churn.clone(), rng_stream(spec.seed, "churn"));
    let awake = churn.advance(0).to_vec();
    let mut initial: Vec<NodeId> = (0..n as NodeId).filter(|&i| awake[i as usize]).collect();
    if initial.is_empty() {
        initial = (0..n as NodeId).collect();
    }
    let mut nodes: Vec<Node> = keys.into_iter().enumerate().map(|(i, k)| Node::new(i as NodeId, k)).collect();
    for node in &mut nodes {
        node.set_next_active(initial.clone());
    }
    let mut b = Baseline {
        spec,
        ctx,
        nodes,
        views: (0..n).map(|_| ViewState::default()).collect(),
        audiences: [aud(0), aud(1)],
        canonical: (0..n).find(|&i| !byzantine.contains(&(i as NodeId))).unwrap_or(0),
        byzantine: byzantine.clone(),
        net: Network::new(n),
        in_view: vec![false; n],
        awake: awake.clone(),
        view_awake: awake,
        initial,
        forks: ForkMonitor::default(),
        twins: BTreeMap::new(),
        unresolved: false,
        discarded: BTreeSet::new(),
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
    let total = spec.ticks();
    for tick in 0..=total {
        b.awake = churn.advance(tick).to_vec();
        b.step(tick, total, churn.schedule().stage_at(tick).0);
    }
    b.out.forks = b.forks.forks();
    b.out.txs = b.txs;
    b.out
}

impl Baseline<'_> {
    fn is_byz(&self, i: usize) -> bool {
        self.byzantine.contains(&(i as NodeId))
    }

    fn equivocates(&self, i: usize) -> bool {
        self.is_byz(i) && self.spec.strategy == Strategy::EquivocatingLeader
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
        for (i, packets) in self.net.deliver(&self.awake).into_iter().enumerate() {
            for p in packets {
                self.route(i, p);
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
                    variant: Variant::BaselineBft,
                    tx: id,
                    submitted: tick,
                    confirmed: None,
                    latency_ticks: None,
                });
                self.net.broadcast(Packet::Tx(id));
            }
        }
        let height_max =
            (0..self.nodes.len()).filter(|&i| !self.is_byz(i)).map(|i| self.nodes[i].tip().height).max().unwrap_or(0);
        self.out.ticks.push(TickRecord {
            scenario: self.spec.scenario.clone(),
            seed: self.spec.seed,
            variant: Variant::BaselineBft,
            tick,
            stage,
            awake: awake_n,
            byz_awake: byz_n,
            active: self.nodes[self.canonical].state.active.len() as u32,
            height_max,
        });
    }

    fn route(&mut self, i: usize, p: Packet) {
        let node = &mut self.nodes[i];
        let st = &mut self.views[i];
        let view = node.state.view;
        match p {
            Packet::Tx(t) => node.receive_tx(t),
            Packet::Propose(m) => {
                if m.view != view || !node.state.is_member(m.proposer) {
                    return;
                }
                match st.proposals.get(&m.proposer) {
                    Some(prev) if prev.digest != m.digest => {
                        st.equivocators.insert(m.proposer);
                    }
                    Some(_) => {}
                    None => {
                        st.proposals.insert(m.proposer, m);
                    }
                }
            }
            Packet::Vote { view: v, from, digest } => {
                if v == view && node.state.is_member(from) {
                    st.votes.entry(from).or_insert(digest);
                }
            }
            Packet::Confirm { view: v, from, digest } => {
                if v == view && node.state.is_member(from) {
                    st.confirms.entry(from).or_insert(digest);
                }
            }
            Packet::Awake(m) => {
                if m.view == view && !node.state.is_member(m.from) && m.stamp_ok() {
                    st.awake_seen.insert(m.from);
                }
            }
        }
    }

    fn begin(&mut self, view: u64) {
        self.ctx.clear_caches();
        self.twins.clear();
        self.view_awake.clone_from(&self.awake);
        for i in 0..self.nodes.len() {
            self.views[i] = ViewState::default();
            let active = self.nodes[i].next_active.clone().unwrap_or_else(|| self.initial.clone());
            self.nodes[i].begin_view(view, active);
            self.in_view[i] = self.awake[i];
        }
    }

    fn proposal(&self, i: usize, block: Block) -> Proposal {
        let node = &self.nodes[i];
        let view = node.state.view;
        Proposal {
            view,
            proposer: node.id,
            digest: block.digest(),
            block,
            vrf: vrf_eval(&self.ctx.group, node.keys(), view),
        }
    }

    fn act(&mut self, phase: u64) {
        let mut sends: Vec<(Audience, Packet)> = Vec::new();
        for i in 0..self.nodes.len() {
            if !self.awake[i] {
                continue;
            }
            let node = &self.nodes[i];
            let (id, view) = (node.id, node.state.view);
            if !node.is_member() {
                if phase == 0 || phase == 3 {
                    sends.push((Audience::All, Packet::Awake(AwakeMsg::new(view, id))));
                }
                continue;
            }
            if !self.in_view[i] {
                continue;
            }
            match phase {
                0 => {
                    let first = Arc::new(self.proposal(i, node.next_block(view)));
                    if self.equivocates(i) {
                        let mut payload = node.pending().to_vec();
                        payload.push(equivocation_marker(view));
                        let second = Arc::new(self.proposal(i, Block::child(node.tip(), view, id, payload)));
                        self.twins.insert(id, [first.digest, second.digest]);
                        sends.push((self.audiences[0].clone(), Packet::Propose(first)));
                        sends.push((self.audiences[1].clone(), Packet::Propose(second)));
                    } else {
                        sends.push((Audience::All, Packet::Propose(first)));
                    }
                }
                1 => self.elect(i),
                2 => {
                    if self.equivocates(i) {
                        for (k, d) in self.twin_digests(i).into_iter().enumerate() {
                            sends.push((self.audiences[k].clone(), Packet::Vote { view, from: id, digest: d }));
                        }
                    } else if let Some(m) = &self.views[i].leader {
                        if m.block.parent == node.tip_digest() && m.block.height == node.tip().height + 1 {
                            sends.push((Audience::All, Packet::Vote { view, from: id, digest: m.digest }));
                        }
                    }
                }
                _ => {
                    if self.equivocates(i) {
                        for (k, d) in self.twin_digests(i).into_iter().enumerate() {
                            sends.push((self.audiences[k].clone(), Packet::Confirm { view, from: id, digest: d }));
                        }
                        continue;
                    }
                    let st = &mut self.views[i];
                    let t = node.state.threshold;
                    if let Some(m) = &st.leader {
                        if st.votes.values().filter(|&&d| d == m.digest).count() >= t {
                            st.quorum = Some(m.digest);
                            sends.push((Audience::All, Packet::Confirm { view, from: id, digest: m.digest }));
                        }
                    }
                }
            }
        }
        for (to, p) in sends {
            self.net.send(to, p);
        }
    }

    /// Leader election from the proposals received; equivocators are skipped.
    fn elect(&mut self, i: usize) {
        let view = self.nodes[i].state.view;
        let verify = !self.is_byz(i);
        let st = &self.views[i];
        let leader = st
            .proposals
            .values()
            .filter(|m| !verify || !st.equivocators.contains(&m.proposer))
            .filter(|m| !verify || self.ctx.vrf_ok(m.proposer, view, &m.vrf))
            .max_by_key(|m| leader_key(&m.vrf, m.proposer))
            .cloned();
        self.views[i].leader = leader;
    }

    /// Digests a Byzantine node backs, one per group.
    fn twin_digests(&self, i: usize) -> Vec<Digest> {
        let Some(m) = &self.views[i].leader else { return Vec::new() };
        match self.twins.get(&m.proposer) {
            Some(pair) => pair.to_vec(),
            None => vec![m.digest, m.digest],
        }
    }

    fn finalize(&mut self, view: u64, tick: u64) {
        let n = self.nodes.len();
        let honest: Vec<usize> = (0..n).filter(|&i| !self.is_byz(i)).collect();
        let fresh: Vec<usize> =
            honest.iter().copied().filter(|&i| self.in_view[i] && self.nodes[i].is_member()).collect();
        let mut deciders = Vec::new();
        let mut decided_block = None;
        let mut forked = false;
        let quorums: BTreeSet<Digest> = fresh.iter().filter_map(|&i| self.views[i].quorum).collect();
        let mut decided_digests = BTreeSet::new();
        for &i in &fresh {
            let st = &self.views[i];
            let node = &self.nodes[i];
            let Some(m) = st.leader.clone() else { continue };
            let count = st.confirms.values().filter(|&&d| d == m.digest).count();
            if st.quorum == Some(m.digest)
                && count >= node.state.threshold
                && m.block.parent == node.tip_digest()
                && m.block.height == node.tip().height + 1
            {
                self.nodes[i].commit(m.block.clone());
                forked |= self.forks.observe(m.block.height, m.digest);
                decided_digests.insert(m.digest);
                for &tx in &m.block.payload {
                    if let Some(r) = self.txs.get_mut(tx as usize) {
                        if r.confirmed.is_none() {
                            r.confirmed = Some(tick);
                            r.latency_ticks = Some(tick - r.submitted);
                        }
                    }
                }
                deciders.push(i as NodeId);
                decided_block.get_or_insert(m.block.clone());
            }
        }
        for &i in &fresh {
            let st = &self.views[i];
            let node = &self.nodes[i];
            let mut next: BTreeSet<NodeId> = st.votes.keys().copied().collect();
            next.extend(st.awake_seen.iter().copied());
            let next: Vec<NodeId> = if next.is_empty() { node.state.active.clone() } else { next.into_iter().collect() };
            self.nodes[i].set_next_active(next);
        }
        let leader = fresh.first().and_then(|&i| self.views[i].leader.as_ref().map(|m| m.proposer));
        self.out.traces.push(ViewTrace {
            view,
            active: fresh.first().map_or(0, |&i| self.nodes[i].state.active.len()),
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
        let before = self.discarded.len();
        if self.unresolved {
            self.reconcile(&honest);
            self.unresolved = false;
        }
        self.unresolved |= forked;
        let abandoned = quorums.difference(&decided_digests).count();
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
            variant: Variant::BaselineBft,
            outcome,
            latency_ticks: (!deciders.is_empty()).then_some(4),
            discarded: (self.discarded.len() - before + abandoned) as u64,
            forks_cum: self.forks.forks(),
            chain_len_min: lens.iter().copied().min().unwrap_or(0),
            chain_len_max: lens.iter().copied().max().unwrap_or(0),
            awake: awake_n,
            byz_awake: byz_n,
        });
        self.sync(&honest, &fresh);
    }

    /// Every honest node adopts the branch held by the most honest nodes
    /// (longest first, then lowest block digest).
    fn reconcile(&mut self, honest: &[usize]) {
        let mut support: BTreeMap<Digest, (usize, usize)> = BTreeMap::new();
        for &i in honest {
            let e = support.entry(self.nodes[i].tip_digest()).or_insert((0, i));
            e.0 += 1;
        }
        let Some((_, &(_, holder))) = support.iter().max_by_key(|(d, (count, holder))| {
            (self.nodes[*holder].log().len(), *count, std::cmp::Reverse(**d))
        }) else {
            return;
        };
        let winner = self.nodes[holder].clone();
        for i in 0..self.nodes.len() {
            if i != holder {
                for b in self.nodes[i].adopt_chain(&winner) {
                    if !self.is_byz(i) {
                        self.discarded.insert(b.digest());
                    }
                }
            }
        }
    }

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
