//! Per-node view state machine.
//!
//! A view spans four message rounds. The driver calls `phase1_propose`,
//! `phase2_process`, `phase3_vote` and `phase4_confirm` at consecutive
//! ticks, then `finalize` when the last round's messages have arrived.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::RngCore;
use rustc_hash::{FxHashMap, FxHashSet};

use super::messages::*;
use crate::codec::Digest;
use crate::group::{Group, GroupElement, Scalar};
use crate::pvss::{self, decrypt_share, split, DecryptedShare, DleqProof, KeyPair, PvssDeal};
use crate::vrf::{vrf_eval, vrf_verify, VrfOutput};

/// Minimum votes for a proposal: a strict majority of the active set.
pub fn vote_threshold(active: usize) -> usize {
    active / 2 + 1
}

/// Secret dealt by a proposer whose block and pre-commit hash to `h`.
pub fn proposal_secret(group: &Group, h: &Digest) -> Scalar {
    group.hash_to_scalar("PVSS-BFT/secret", h)
}

pub fn vote_secret(group: &Group, view: u64, from: NodeId, vote: bool, target: Option<&Digest>) -> Scalar {
    group.hash_to_scalar("PVSS-BFT/vote-secret", &vote_secret_input(view, from, vote, target))
}

#[derive(Default)]
struct Caches {
    vrf: FxHashMap<(NodeId, u64, VrfOutput), bool>,
    shares: FxHashMap<(NodeId, Digest, u32, GroupElement, DleqProof), bool>,
    decryptions: FxHashMap<(NodeId, GroupElement, DecryptedShare), bool>,
    reconstructions: FxHashMap<Vec<(u32, GroupElement)>, Option<GroupElement>>,
    headers: FxHashMap<(ProposalHeader, Stamp), bool>,
    confirms: FxHashMap<ConfirmMsg, bool>,
    vote_points: FxHashMap<(u64, NodeId, bool, Option<Digest>), GroupElement>,
}

/// Shared public context: group, key directory and memoized verification.
///
/// Every cached check is a pure function of public inputs, so results are
/// identical to recomputing them at each node.
pub struct Ctx {
    pub group: Group,
    pub keys: Vec<GroupElement>,
    caches: RefCell<Caches>,
}

impl Ctx {
    pub fn new(group: Group, keys: Vec<GroupElement>) -> Self {
        for k in &keys {
            group.register_base(k);
        }
        Ctx { group, keys, caches: RefCell::default() }
    }

    pub fn pk(&self, id: NodeId) -> &GroupElement {
        &self.keys[id as usize]
    }

    pub fn clear_caches(&self) {
        *self.caches.borrow_mut() = Caches::default();
    }

    pub fn vrf_ok(&self, id: NodeId, view: u64, out: &VrfOutput) -> bool {
        let key = (id, view, *out);
        if let Some(&v) = self.caches.borrow().vrf.get(&key) {
            return v;
        }
        let ok = vrf_verify(&self.group, self.pk(id), view, out);
        self.caches.borrow_mut().vrf.insert(key, ok);
        ok
    }

    /// Checks `enc_share` for `owner` against `deal`'s commitments.
    /// `deal_id` must uniquely identify the deal's contents.
    pub fn share_ok(&self, owner: NodeId, deal: &PvssDeal, deal_id: &Digest, index: u32, enc_share: &GroupElement) -> bool {
        let Some(proof) = deal.proof(index) else { return false };
        let key = (owner, *deal_id, index, *enc_share, *proof);
        if let Some(&v) = self.caches.borrow().shares.get(&key) {
            return v;
        }
        let ok = deal.commitments.len() == deal.threshold
            && pvss::verify_share(&self.group, self.pk(owner), &deal.commitments, index, enc_share, proof);
        self.caches.borrow_mut().shares.insert(key, ok);
        ok
    }

    pub fn decryption_ok(&self, owner: NodeId, enc_share: &GroupElement, ds: &DecryptedShare) -> bool {
        let key = (owner, *enc_share, *ds);
        if let Some(&v) = self.caches.borrow().decryptions.get(&key) {
            return v;
        }
        let ok = pvss::verify_decryption(&self.group, self.pk(owner), enc_share, ds);
        self.caches.borrow_mut().decryptions.insert(key, ok);
        ok
    }

    /// Checks a relayed header's stamp against its proposer.
    pub fn header_ok(&self, header: &ProposalHeader, stamp: &Stamp) -> bool {
        let key = (*header, *stamp);
        if let Some(&v) = self.caches.borrow().headers.get(&key) {
            return v;
        }
        let ok = stamp.verify(header.proposer, &header.digest(&self.group));
        self.caches.borrow_mut().headers.insert(key, ok);
        ok
    }

    pub fn confirm_ok(&self, c: &ConfirmMsg) -> bool {
        if let Some(&v) = self.caches.borrow().confirms.get(c) {
            return v;
        }
        let ok = c.stamp_ok();
        self.caches.borrow_mut().confirms.insert(*c, ok);
        ok
    }

    /// `G^s` for the secret a voter must deal with its vote.
    pub fn vote_point(&self, view: u64, from: NodeId, vote: bool, target: Option<&Digest>) -> GroupElement {
        let key = (view, from, vote, target.copied());
        if let Some(v) = self.caches.borrow().vote_points.get(&key) {
            return *v;
        }
        let out = self.group.exp_big_g(&vote_secret(&self.group, view, from, vote, target));
        self.caches.borrow_mut().vote_points.insert(key, out);
        out
    }

    pub fn reconstruct(&self, shares: &[DecryptedShare], t: usize) -> Option<GroupElement> {
        let mut sorted: Vec<_> = shares.to_vec();
        sorted.sort_by_key(|s| s.index);
        sorted.dedup_by_key(|s| s.index);
        sorted.truncate(t);
        let key: Vec<_> = sorted.iter().map(|s| (s.index, s.value)).collect();
        if let Some(v) = self.caches.borrow().reconstructions.get(&key) {
            return *v;
        }
        let out = pvss::reconstruct(&self.group, &sorted, t).ok();
        self.caches.borrow_mut().reconstructions.insert(key, out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Idle,
    Proposed,
    Forwarded,
    Voted,
    Confirmed,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvidenceKind {
    /// Two differently stamped proposals from one proposer.
    LeaderEquivocation,
    ConflictingVotes,
    ConflictingConfirms,
    /// A vote whose dealt secret does not encode the broadcast vote.
    VoteMismatch,
    /// A vote deal whose share for this node fails verification.
    BadVoteDeal,
    /// Too few recovery shares to check this node's vote.
    Unverifiable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Evidence {
    pub view: u64,
    pub node: NodeId,
    pub kind: EvidenceKind,
}

impl Evidence {
    pub fn is_fault(&self) -> bool {
        self.kind != EvidenceKind::Unverifiable
    }
}

/// Why a node voted the way it did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VoteBasis {
    pub reconstructed: bool,
    pub secret_matches: bool,
    pub leader_conflict: bool,
    pub leader_mismatch: bool,
    pub extends_tip: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ViewState {
    pub view: u64,
    pub phase: Option<Phase>,
    pub active: Vec<NodeId>,
    pub threshold: usize,
    pub(crate) proposals: BTreeMap<NodeId, Arc<ProposeMsg>>,
    pub(crate) alt_proposals: BTreeMap<NodeId, Arc<ProposeMsg>>,
    pub(crate) equivocators: BTreeSet<NodeId>,
    pub(crate) valid: BTreeSet<NodeId>,
    pub(crate) precommits: BTreeSet<NodeId>,
    pub(crate) awake_seen: BTreeSet<NodeId>,
    pub leader: Option<NodeId>,
    pub(crate) forwarders: BTreeSet<NodeId>,
    pub(crate) next_participants: BTreeSet<NodeId>,
    pub(crate) next_committers: BTreeSet<NodeId>,
    pub(crate) tallies_cleared: bool,
    pub basis: VoteBasis,
    pub my_vote: Option<bool>,
    pub(crate) votes: BTreeMap<NodeId, Arc<VoteMsg>>,
    pub vote_quorum: Option<Digest>,
    pub confirm_quorum: usize,
    pub(crate) recovery_armed: bool,
    pub sent_confirm: Option<Digest>,
    pub evidence: Vec<Evidence>,
}

impl ViewState {
    pub fn is_member(&self, id: NodeId) -> bool {
        self.active.binary_search(&id).is_ok()
    }

    /// One-based share index of `id` within the active set.
    pub fn index_of(&self, id: NodeId) -> Option<u32> {
        self.active.binary_search(&id).ok().map(|p| p as u32 + 1)
    }

    pub fn leader_proposal(&self) -> Option<&Arc<ProposeMsg>> {
        self.leader.and_then(|l| self.proposals.get(&l))
    }

    fn note(&mut self, node: NodeId, kind: EvidenceKind) {
        let e = Evidence { view: self.view, node, kind };
        if !self.evidence.contains(&e) {
            self.evidence.push(e);
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Phase4Output {
    pub confirm: Option<ConfirmMsg>,
    pub recover: Option<RecoverMsg>,
}

#[derive(Clone, Debug)]
pub struct ViewReport {
    pub view: u64,
    pub decided: Option<Block>,
    pub next_active: Vec<NodeId>,
    pub evidence: Vec<Evidence>,
}

/// Ordering key for leader election: higher `rho` wins, ties go to the lower id.
pub fn leader_key(out: &VrfOutput, id: NodeId) -> (Scalar, Reverse<NodeId>) {
    (out.rho, Reverse(id))
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    keys: KeyPair,
    /// Byzantine nodes skip receive-side verification.
    pub(crate) verify: bool,
    log: Vec<Block>,
    tip: Digest,
    pending: Vec<TxId>,
    pending_set: FxHashSet<TxId>,
    decided_txs: FxHashSet<TxId>,
    pub state: ViewState,
    pub next_active: Option<Vec<NodeId>>,
    /// Pre-commit intent for the next view.
    pub intent: bool,
}

impl Node {
    pub fn new(id: NodeId, keys: KeyPair) -> Self {
        let genesis = Block::genesis();
        Node {
            id,
            keys,
            verify: true,
            tip: genesis.digest(),
            log: vec![genesis],
            pending: Vec::new(),
            pending_set: FxHashSet::default(),
            decided_txs: FxHashSet::default(),
            state: ViewState::default(),
            next_active: None,
            intent: true,
        }
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn log(&self) -> &[Block] {
        &self.log
    }

    pub fn tip(&self) -> &Block {
        self.log.last().expect("log holds genesis")
    }

    pub fn tip_digest(&self) -> Digest {
        self.tip
    }

    pub fn pending(&self) -> &[TxId] {
        &self.pending
    }

    pub fn receive_tx(&mut self, tx: TxId) {
        if !self.decided_txs.contains(&tx) && self.pending_set.insert(tx) {
            self.pending.push(tx);
        }
    }

    /// Adopts another node's log, mempool and next active set.
    pub fn sync_from(&mut self, other: &Node) {
        self.log.clone_from(&other.log);
        self.tip = other.tip;
        self.pending.clone_from(&other.pending);
        self.pending_set.clone_from(&other.pending_set);
        self.decided_txs.clone_from(&other.decided_txs);
        self.next_active.clone_from(&other.next_active);
    }

    /// Adopts a longer log that extends this node's own; returns false otherwise.
    pub fn catch_up(&mut self, other: &Node) -> bool {
        if other.log.len() <= self.log.len() || other.log[self.log.len() - 1].digest() != self.tip {
            return false;
        }
        for b in other.log[self.log.len()..].to_vec() {
            self.append(b);
        }
        true
    }

    /// Appends a block decided outside the view state machine.
    pub fn commit(&mut self, block: Block) {
        self.append(block);
    }

    /// Replaces this node's log with `other`'s and returns the blocks dropped
    /// from its own branch; their transactions go back to the mempool.
    pub fn adopt_chain(&mut self, other: &Node) -> Vec<Block> {
        let common = self.log.iter().zip(&other.log).take_while(|(a, b)| a.digest() == b.digest()).count();
        let dropped = self.log.split_off(common);
        self.log = other.log.clone();
        self.tip = other.tip;
        self.decided_txs = self.log.iter().flat_map(|b| b.payload.iter().copied()).collect();
        for tx in dropped.iter().flat_map(|b| b.payload.iter().copied()) {
            self.receive_tx(tx);
        }
        let decided = &self.decided_txs;
        self.pending.retain(|tx| !decided.contains(tx));
        self.pending_set.retain(|tx| !decided.contains(tx));
        dropped
    }

    pub fn set_next_active(&mut self, active: Vec<NodeId>) {
        self.next_active = Some(active);
    }

    fn append(&mut self, block: Block) {
        for tx in &block.payload {
            self.decided_txs.insert(*tx);
            self.pending_set.remove(tx);
        }
        let decided = &self.decided_txs;
        self.pending.retain(|tx| !decided.contains(tx));
        self.tip = block.digest();
        self.log.push(block);
    }

    pub fn begin_view(&mut self, view: u64, mut active: Vec<NodeId>) {
        active.sort_unstable();
        active.dedup();
        let threshold = vote_threshold(active.len());
        self.state = ViewState { view, phase: Some(Phase::Idle), active, threshold, ..ViewState::default() };
        self.intent = true;
    }

    pub fn is_member(&self) -> bool {
        self.state.is_member(self.id)
    }

    pub fn handle_awake(&mut self, msg: &AwakeMsg) {
        let st = &mut self.state;
        if msg.view == st.view && !st.is_member(msg.from) && msg.stamp_ok() {
            st.awake_seen.insert(msg.from);
        }
    }

    fn active_keys(&self, ctx: &Ctx) -> Vec<GroupElement> {
        self.state.active.iter().map(|&k| *ctx.pk(k)).collect()
    }

    /// Builds a proposal for an arbitrary block; `secret` overrides the dealt secret.
    pub fn build_proposal<R: RngCore + ?Sized>(
        &self,
        ctx: &Ctx,
        block: Block,
        secret: Option<Scalar>,
        rng: &mut R,
    ) -> ProposeMsg {
        let precommit = Precommit { node: self.id, view: self.state.view, intent: self.intent };
        let h = proposal_digest(&block, &precommit);
        let s = secret.unwrap_or_else(|| proposal_secret(&ctx.group, &h));
        let n = self.state.active.len();
        let deal = split(&ctx.group, &s, n, self.state.threshold, &self.active_keys(ctx), rng)
            .expect("active set is nonempty and contains the proposer");
        let vrf = vrf_eval(&ctx.group, &self.keys, self.state.view);
        ProposeMsg::new(&ctx.group, block, precommit, deal, vrf)
    }

    pub fn next_block(&self, view: u64) -> Block {
        Block::child(self.tip(), view, self.id, self.pending.clone())
    }

    pub fn phase1_propose<R: RngCore + ?Sized>(&mut self, ctx: &Ctx, rng: &mut R) -> Option<ProposeMsg> {
        self.state.phase = Some(Phase::Proposed);
        if !self.is_member() {
            return None;
        }
        let block = self.next_block(self.state.view);
        Some(self.build_proposal(ctx, block, None, rng))
    }

    pub fn phase2_process<R: RngCore + ?Sized>(
        &mut self,
        ctx: &Ctx,
        proposals: &[Arc<ProposeMsg>],
        rng: &mut R,
    ) -> Option<ShareForwardMsg> {
        self.state.phase = Some(Phase::Forwarded);
        if !self.is_member() {
            return None;
        }
        let g = &ctx.group;
        let view = self.state.view;
        let my_idx = self.state.index_of(self.id).expect("member");
        let n = self.state.active.len();
        for m in proposals {
            let k = m.header.proposer;
            if m.header.view != view || !self.state.is_member(k) || !m.is_consistent(g) {
                continue;
            }
            if let Some(prev) = self.state.proposals.get(&k) {
                if prev.header != m.header {
                    self.state.equivocators.insert(k);
                    self.state.alt_proposals.insert(k, m.clone());
                    self.state.note(k, EvidenceKind::LeaderEquivocation);
                }
                continue;
            }
            self.state.proposals.insert(k, m.clone());
            if m.precommit.intent {
                self.state.precommits.insert(k);
            }
        }
        // Candidates are checked in election order; only the winner needs verifying.
        let st = &self.state;
        let mut order: Vec<NodeId> = st.proposals.keys().filter(|k| !st.equivocators.contains(k)).copied().collect();
        order.sort_by_key(|&k| Reverse(leader_key(&st.proposals[&k].header.vrf, k)));
        self.state.leader = None;
        for k in order {
            let m = &self.state.proposals[&k];
            let ok = !self.verify
                || (m.deal.n() == n
                    && m.deal.threshold == self.state.threshold
                    && ctx.vrf_ok(k, view, &m.header.vrf)
                    && ctx.share_ok(self.id, &m.deal, &m.header.deal_digest, my_idx, &m.deal.enc_shares[my_idx as usize - 1]));
            if ok {
                self.state.valid.insert(k);
                self.state.leader = Some(k);
                break;
            }
        }
        let share = self.leader_share(ctx, self.state.leader, rng);
        Some(ShareForwardMsg::new(
            g,
            view,
            self.id,
            share,
            self.state.awake_seen.iter().copied().collect(),
            self.state.precommits.iter().copied().collect(),
        ))
    }

    /// This node's decrypted share of `leader`'s deal, ready to forward.
    pub(crate) fn leader_share<R: RngCore + ?Sized>(
        &self,
        ctx: &Ctx,
        leader: Option<NodeId>,
        rng: &mut R,
    ) -> Option<LeaderShare> {
        let m = self.state.proposals.get(&leader?)?;
        self.share_of(ctx, m, rng)
    }

    pub(crate) fn share_of<R: RngCore + ?Sized>(&self, ctx: &Ctx, m: &ProposeMsg, rng: &mut R) -> Option<LeaderShare> {
        let idx = self.state.index_of(self.id)?;
        let enc_share = *m.deal.enc_share(idx)?;
        let decrypted = decrypt_share(&ctx.group, &self.keys, idx, &enc_share, rng);
        Some(LeaderShare { header: m.header, header_stamp: m.stamp, index: idx, enc_share, decrypted })
    }

    fn extends_tip(&self, block: &Block) -> bool {
        block.parent == self.tip && block.height == self.tip().height + 1
    }

    /// Processes forwards: tallies the next-view lists and, for this node's
    /// leader, checks consistency and reconstructs the dealt secret.
    pub fn process_forwards(&mut self, ctx: &Ctx, forwards: &[Arc<ShareForwardMsg>]) -> VoteBasis {
        let g = &ctx.group;
        let view = self.state.view;
        let a = self.state.active.len();
        let n = ctx.keys.len();
        let mut counts = [vec![0usize; n], vec![0usize; n]];
        let mut seen = [vec![usize::MAX; n], vec![usize::MAX; n]];
        let mine = self.state.leader_proposal().cloned();
        let mut basis = VoteBasis::default();
        let mut shares = Vec::new();
        for f in forwards {
            if f.view != view
                || !self.state.is_member(f.from)
                || self.state.forwarders.contains(&f.from)
                || !f.stamp_ok(g)
            {
                continue;
            }
            self.state.forwarders.insert(f.from);
            let fi = self.state.forwarders.len();
            for (j, list) in [&f.awake_list, &f.next_round_commit].into_iter().enumerate() {
                for &k in list.iter().filter(|&&k| (k as usize) < n) {
                    if seen[j][k as usize] != fi {
                        seen[j][k as usize] = fi;
                        counts[j][k as usize] += 1;
                    }
                }
            }
            let Some(ls) = &f.leader else { continue };
            let hdr = &ls.header;
            if hdr.view != view
                || !self.state.is_member(hdr.proposer)
                || !ctx.header_ok(hdr, &ls.header_stamp)
                || (self.verify && !ctx.vrf_ok(hdr.proposer, view, &hdr.vrf))
            {
                continue;
            }
            let Some(mine) = &mine else {
                basis.leader_mismatch = true;
                continue;
            };
            if hdr.proposer == mine.header.proposer {
                if *hdr != mine.header {
                    basis.leader_conflict = true;
                    self.state.note(hdr.proposer, EvidenceKind::LeaderEquivocation);
                    continue;
                }
                let idx = self.state.index_of(f.from).expect("member");
                let ok = ls.index == idx
                    && ls.decrypted.index == idx
                    && (!self.verify
                        || (ctx.share_ok(f.from, &mine.deal, &hdr.deal_digest, idx, &ls.enc_share)
                            && ctx.decryption_ok(f.from, &ls.enc_share, &ls.decrypted)));
                if ok {
                    shares.push(ls.decrypted);
                }
            } else if leader_key(&hdr.vrf, hdr.proposer) > leader_key(&mine.header.vrf, mine.header.proposer) {
                basis.leader_mismatch = true;
            }
        }
        let clears = |c: &[usize]| (0..n as NodeId).filter(|&k| 2 * c[k as usize] > a).collect();
        self.state.next_participants = clears(&counts[0]);
        self.state.next_committers = clears(&counts[1]);
        self.state.tallies_cleared = 2 * self.state.forwarders.len() > a;
        if let Some(mine) = &mine {
            basis.extends_tip = self.extends_tip(&mine.block);
            if self.state.equivocators.contains(&mine.header.proposer) {
                basis.leader_conflict = true;
            }
            if shares.len() >= self.state.threshold {
                basis.reconstructed = true;
                let expected = g.exp_big_g(&proposal_secret(g, &mine.header.h));
                basis.secret_matches = ctx.reconstruct(&shares, self.state.threshold) == Some(expected);
            }
        }
        self.state.recovery_armed = mine.is_some() && !basis.reconstructed;
        self.state.basis = basis;
        basis
    }

    pub fn basis_vote(&self, basis: &VoteBasis) -> bool {
        self.state.leader.is_some()
            && basis.reconstructed
            && basis.secret_matches
            && !basis.leader_conflict
            && !basis.leader_mismatch
            && basis.extends_tip
    }

    /// Deals a vote; `encoded` is the value bound into the dealt secret.
    pub fn build_vote<R: RngCore + ?Sized>(
        &self,
        ctx: &Ctx,
        vote: bool,
        encoded: bool,
        target: Option<Digest>,
        rng: &mut R,
    ) -> VoteMsg {
        let g = &ctx.group;
        let s = vote_secret(g, self.state.view, self.id, encoded, target.as_ref());
        let n = self.state.active.len();
        let deal = split(g, &s, n, self.state.threshold, &self.active_keys(ctx), rng).expect("member of active set");
        VoteMsg::new(g, self.state.view, self.id, vote, target, deal)
    }

    pub fn phase3_vote<R: RngCore + ?Sized>(
        &mut self,
        ctx: &Ctx,
        forwards: &[Arc<ShareForwardMsg>],
        rng: &mut R,
    ) -> Option<VoteMsg> {
        self.state.phase = Some(Phase::Voted);
        if !self.is_member() {
            return None;
        }
        let basis = self.process_forwards(ctx, forwards);
        let vote = self.basis_vote(&basis);
        self.state.my_vote = Some(vote);
        let target = self.state.leader_proposal().map(|m| m.header.h);
        Some(self.build_vote(ctx, vote, vote, target, rng))
    }

    /// Records votes and derives the confirm quorum; returns the quorum target.
    pub fn process_votes(&mut self, ctx: &Ctx, votes: &[Arc<VoteMsg>]) -> Option<Digest> {
        let g = &ctx.group;
        let (n, t) = (self.state.active.len(), self.state.threshold);
        for m in votes {
            if m.view != self.state.view || !self.state.is_member(m.from) || !m.stamp_ok(g) {
                continue;
            }
            if let Some(prev) = self.state.votes.get(&m.from) {
                if prev.content_digest(g) != m.content_digest(g) {
                    self.state.note(m.from, EvidenceKind::ConflictingVotes);
                }
                continue;
            }
            if m.deal.commitments.len() != m.deal.threshold || m.deal.proofs.len() != m.deal.n() {
                self.state.note(m.from, EvidenceKind::BadVoteDeal);
                continue;
            }
            // A sender with a different view of the active set is not at fault.
            if m.deal.n() != n || m.deal.threshold != t {
                continue;
            }
            self.state.votes.insert(m.from, m.clone());
        }
        let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
        for m in self.state.votes.values() {
            if let (true, Some(d)) = (m.vote, m.target) {
                *tally.entry(d).or_default() += 1;
            }
        }
        self.state.vote_quorum =
            tally.iter().filter(|(_, &c)| c >= t).max_by_key(|(d, &c)| (c, Reverse(**d))).map(|(d, _)| *d);
        let st = &self.state;
        let sleepers = st
            .active
            .iter()
            .filter(|k| !(st.proposals.contains_key(k) && st.forwarders.contains(k)))
            .count();
        self.state.confirm_quorum = (st.active.len() - sleepers) / 2 + 1;
        let any_true = self.state.votes.values().any(|m| m.vote);
        let any_false = self.state.votes.values().any(|m| !m.vote);
        if any_true && any_false {
            self.state.recovery_armed = true;
        }
        self.state.vote_quorum
    }

    /// This node's decrypted shares of every recorded vote deal.
    pub(crate) fn recovery_shares<R: RngCore + ?Sized>(&mut self, ctx: &Ctx, rng: &mut R) -> RecoverMsg {
        let g = &ctx.group;
        let idx = self.state.index_of(self.id).expect("member");
        let mut shares = Vec::new();
        let mut bad = Vec::new();
        for (&k, m) in &self.state.votes {
            let y = m.deal.enc_shares[idx as usize - 1];
            if self.verify && !ctx.share_ok(self.id, &m.deal, &m.content_digest(g), idx, &y) {
                bad.push(k);
                continue;
            }
            shares.push((k, decrypt_share(g, &self.keys, idx, &y, rng)));
        }
        for k in bad {
            self.state.note(k, EvidenceKind::BadVoteDeal);
        }
        RecoverMsg { view: self.state.view, from: self.id, shares }
    }

    pub fn phase4_confirm<R: RngCore + ?Sized>(&mut self, ctx: &Ctx, votes: &[Arc<VoteMsg>], rng: &mut R) -> Phase4Output {
        self.state.phase = Some(Phase::Confirmed);
        if !self.is_member() {
            return Phase4Output::default();
        }
        let quorum = self.process_votes(ctx, votes);
        let mut out = Phase4Output::default();
        if let (Some(d), Some(mine)) = (quorum, self.state.leader_proposal()) {
            if mine.header.h == d && self.extends_tip(&mine.block) {
                out.confirm = Some(ConfirmMsg::new(self.state.view, self.id, d));
                self.state.sent_confirm = Some(d);
            }
        }
        if self.state.recovery_armed {
            out.recover = Some(self.recovery_shares(ctx, rng));
        }
        out
    }

    /// Checks every recorded vote against its dealt secret using rebroadcast shares.
    pub fn error_recovery(&mut self, ctx: &Ctx, recovers: &[Arc<RecoverMsg>]) -> Vec<Evidence> {
        let g = &ctx.group;
        let view = self.state.view;
        let t = self.state.threshold;
        let mut by_voter: BTreeMap<NodeId, Vec<DecryptedShare>> = BTreeMap::new();
        let mut senders = BTreeSet::new();
        for r in recovers {
            if r.view != view || !self.state.is_member(r.from) || !senders.insert(r.from) {
                continue;
            }
            let idx = self.state.index_of(r.from).expect("member");
            for (voter, ds) in &r.shares {
                let Some(m) = self.state.votes.get(voter) else { continue };
                let y = m.deal.enc_shares[idx as usize - 1];
                if ds.index == idx
                    && ctx.share_ok(r.from, &m.deal, &m.content_digest(g), idx, &y)
                    && ctx.decryption_ok(r.from, &y, ds)
                {
                    by_voter.entry(*voter).or_default().push(*ds);
                }
            }
        }
        let mut found = Vec::new();
        for &k in &self.state.active {
            let kind = match self.state.votes.get(&k) {
                None => Some(EvidenceKind::Unverifiable),
                Some(m) => match by_voter.get(&k).filter(|s| s.len() >= t) {
                    None => Some(EvidenceKind::Unverifiable),
                    Some(shares) => {
                        let expected = ctx.vote_point(view, k, m.vote, m.target.as_ref());
                        (ctx.reconstruct(shares, t) != Some(expected)).then_some(EvidenceKind::VoteMismatch)
                    }
                },
            };
            if let Some(kind) = kind {
                found.push(Evidence { view, node: k, kind });
            }
        }
        for e in &found {
            self.state.note(e.node, e.kind);
        }
        found
    }

    /// Counts confirms, decides, runs recovery if needed and computes the next active set.
    pub fn finalize(
        &mut self,
        ctx: &Ctx,
        confirms: &[ConfirmMsg],
        recovers: &[Arc<RecoverMsg>],
        late_awakes: &[AwakeMsg],
    ) -> ViewReport {
        let view = self.state.view;
        let mut by_sender: BTreeMap<NodeId, Digest> = BTreeMap::new();
        for c in confirms {
            if c.view != view || !self.state.is_member(c.from) || !ctx.confirm_ok(c) {
                continue;
            }
            match by_sender.get(&c.from) {
                Some(d) if *d != c.block_hash => self.state.note(c.from, EvidenceKind::ConflictingConfirms),
                Some(_) => {}
                None => {
                    by_sender.insert(c.from, c.block_hash);
                }
            }
        }
        let mut decided = None;
        if self.is_member() {
            if let (Some(d), Some(mine)) = (self.state.vote_quorum, self.state.leader_proposal().cloned()) {
                let count = by_sender.values().filter(|&&x| x == d).count();
                if mine.header.h == d && count >= self.state.confirm_quorum && self.extends_tip(&mine.block) {
                    self.append(mine.block.clone());
                    decided = Some(mine.block.clone());
                }
            }
            if !recovers.is_empty() {
                self.error_recovery(ctx, recovers);
            }
        }
        let late: BTreeSet<NodeId> = late_awakes
            .iter()
            .filter(|m| m.view == view && m.stamp_ok() && !self.state.is_member(m.from))
            .map(|m| m.from)
            .collect();
        let next = if self.is_member() {
            self.next_active_set(decided.is_some(), &by_sender, &late)
        } else {
            self.state.active.clone()
        };
        self.next_active = self.is_member().then(|| next.clone());
        self.state.phase = Some(Phase::Done);
        ViewReport { view, decided, next_active: next, evidence: self.state.evidence.clone() }
    }

    fn next_active_set(&self, decided: bool, confirmers: &BTreeMap<NodeId, Digest>, late: &BTreeSet<NodeId>) -> Vec<NodeId> {
        let st = &self.state;
        let live = |k: &NodeId| if decided { confirmers.contains_key(k) } else { st.votes.contains_key(k) };
        let next: BTreeSet<NodeId> = if st.tallies_cleared {
            let members = st.next_committers.iter().filter(|k| st.is_member(**k) && live(k));
            let newcomers = st.next_participants.iter().filter(|k| !st.is_member(**k) && late.contains(k));
            members.chain(newcomers).copied().collect()
        } else {
            let members = st.active.iter().filter(|k| st.precommits.contains(k) && live(k));
            let newcomers = st.awake_seen.iter().filter(|k| late.contains(k));
            members.chain(newcomers).copied().collect()
        };
        if next.is_empty() {
            st.active.clone()
        } else {
            next.into_iter().collect()
        }
    }
}
