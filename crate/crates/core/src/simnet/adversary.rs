//! Byzantine behaviour, applied as overrides of the honest phase steps.
//!
//! All Byzantine nodes collude. Partitioning strategies split the honest
//! nodes into two fixed groups and address each group separately; Byzantine
//! nodes receive both halves.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::RngCore;

use super::config::Strategy;
use super::network::Audience;
use super::sim::Packet;
use crate::codec::Digest;
use crate::protocol::*;

/// Transaction id carried only by the second block of an equivocating leader.
pub fn equivocation_marker(view: u64) -> TxId {
    u64::MAX - view
}

pub(crate) struct Coalition {
    strategy: Strategy,
    byzantine: BTreeSet<NodeId>,
    audiences: [Audience; 2],
    victims: BTreeSet<NodeId>,
    /// Per-group proposals of equivocating members in the current view.
    twins: BTreeMap<NodeId, [Arc<ProposeMsg>; 2]>,
    /// Leader each Byzantine member backs in the current view.
    backed: BTreeMap<NodeId, NodeId>,
}

type Out = Vec<(Audience, Packet)>;

impl Coalition {
    pub fn new(strategy: Strategy, byzantine: BTreeSet<NodeId>, groups: &[BTreeSet<NodeId>; 2]) -> Self {
        let aud = |k: usize| Audience::Only(groups[k].union(&byzantine).copied().collect());
        Coalition {
            strategy,
            audiences: [aud(0), aud(1)],
            victims: groups[1].clone(),
            byzantine,
            twins: BTreeMap::new(),
            backed: BTreeMap::new(),
        }
    }

    pub fn is_byzantine(&self, id: NodeId) -> bool {
        self.byzantine.contains(&id)
    }

    pub fn begin_view(&mut self) {
        self.twins.clear();
        self.backed.clear();
    }

    fn per_group(&self) -> bool {
        matches!(self.strategy, Strategy::EquivocatingLeader | Strategy::CommitmentForger)
    }

    fn twins_of(&self, id: NodeId) -> Option<&[Arc<ProposeMsg>; 2]> {
        let leader = self.backed.get(&id)?;
        self.twins.get(leader).filter(|_| self.per_group())
    }

    pub fn propose<R: RngCore + ?Sized>(&mut self, node: &mut Node, ctx: &Ctx, rng: &mut R) -> Out {
        let Some(honest) = node.phase1_propose(ctx, rng) else { return Vec::new() };
        let g = &ctx.group;
        let view = node.state.view;
        match self.strategy {
            Strategy::EquivocatingLeader => {
                let mut payload = node.pending().to_vec();
                payload.push(equivocation_marker(view));
                let other = Block::child(node.tip(), view, node.id, payload);
                let second = node.build_proposal(ctx, other, None, rng);
                self.split_send(node.id, honest, second)
            }
            Strategy::CommitmentForger => {
                let s = g.add(&proposal_secret(g, &honest.header.h), &g.scalar_from_u64(1));
                let second = node.build_proposal(ctx, honest.block.clone(), Some(s), rng);
                self.split_send(node.id, honest, second)
            }
            Strategy::ShareForger => {
                let mut deal = honest.deal.clone();
                for (pos, k) in node.state.active.iter().enumerate() {
                    if self.victims.contains(k) {
                        deal.enc_shares[pos] = g.mul(&deal.enc_shares[pos], &g.g());
                    }
                }
                let forged = ProposeMsg::new(g, honest.block, honest.precommit, deal, honest.header.vrf);
                vec![(Audience::All, Packet::Propose(Arc::new(forged)))]
            }
            Strategy::SelectiveBroadcaster => vec![(self.audiences[0].clone(), Packet::Propose(Arc::new(honest)))],
            Strategy::Honest | Strategy::VoteEquivocator => vec![(Audience::All, Packet::Propose(Arc::new(honest)))],
        }
    }

    fn split_send(&mut self, id: NodeId, first: ProposeMsg, second: ProposeMsg) -> Out {
        let pair = [Arc::new(first), Arc::new(second)];
        let out = vec![
            (self.audiences[0].clone(), Packet::Propose(pair[0].clone())),
            (self.audiences[1].clone(), Packet::Propose(pair[1].clone())),
        ];
        self.twins.insert(id, pair);
        out
    }

    pub fn forward<R: RngCore + ?Sized>(
        &mut self,
        node: &mut Node,
        ctx: &Ctx,
        proposals: &[Arc<ProposeMsg>],
        rng: &mut R,
    ) -> Out {
        let Some(fwd) = node.phase2_process(ctx, proposals, rng) else { return Vec::new() };
        if self.strategy == Strategy::Honest {
            return vec![(Audience::All, Packet::Forward(Arc::new(fwd)))];
        }
        let g = &ctx.group;
        let view = node.state.view;
        let top = proposals
            .iter()
            .filter(|m| m.header.view == view && node.state.is_member(m.header.proposer))
            .max_by_key(|m| leader_key(&m.header.vrf, m.header.proposer))
            .map(|m| m.header.proposer);
        let backed = match top {
            Some(l) if self.twins.contains_key(&l) || self.byzantine.contains(&l) => Some(l),
            _ => node.state.leader,
        };
        if let Some(l) = backed {
            self.backed.insert(node.id, l);
        }
        let rebuild = |share| {
            ShareForwardMsg::new(g, view, node.id, share, fwd.awake_list.clone(), fwd.next_round_commit.clone())
        };
        if let Some(pair) = self.twins_of(node.id) {
            return (0..2)
                .map(|k| {
                    let f = rebuild(node.share_of(ctx, &pair[k], rng));
                    (self.audiences[k].clone(), Packet::Forward(Arc::new(f)))
                })
                .collect();
        }
        if self.strategy == Strategy::ShareForger {
            let mut share = fwd.leader.clone();
            if let Some(ls) = &mut share {
                ls.decrypted.value = g.mul(&ls.decrypted.value, &g.g());
            }
            return vec![(Audience::All, Packet::Forward(Arc::new(rebuild(share))))];
        }
        vec![(Audience::All, Packet::Forward(Arc::new(fwd)))]
    }

    pub fn vote<R: RngCore + ?Sized>(
        &self,
        node: &mut Node,
        ctx: &Ctx,
        forwards: &[Arc<ShareForwardMsg>],
        rng: &mut R,
    ) -> Out {
        if self.strategy == Strategy::Honest {
            return node.phase3_vote(ctx, forwards, rng).map(|v| (Audience::All, Packet::Vote(Arc::new(v)))).into_iter().collect();
        }
        node.state.phase = Some(Phase::Voted);
        if !node.is_member() {
            return Vec::new();
        }
        node.process_forwards(ctx, forwards);
        node.state.my_vote = Some(true);
        if let Some(pair) = self.twins_of(node.id) {
            return (0..2)
                .map(|k| {
                    let v = node.build_vote(ctx, true, true, Some(pair[k].header.h), rng);
                    (self.audiences[k].clone(), Packet::Vote(Arc::new(v)))
                })
                .collect();
        }
        let target = self.backed_target(node);
        let encoded = self.strategy != Strategy::VoteEquivocator;
        let v = node.build_vote(ctx, true, encoded, target, rng);
        vec![(Audience::All, Packet::Vote(Arc::new(v)))]
    }

    fn backed_target(&self, node: &Node) -> Option<Digest> {
        let l = self.backed.get(&node.id)?;
        node.state.proposals.get(l).or_else(|| node.state.alt_proposals.get(l)).map(|m| m.header.h)
    }

    pub fn confirm<R: RngCore + ?Sized>(&self, node: &mut Node, ctx: &Ctx, votes: &[Arc<VoteMsg>], rng: &mut R) -> Out {
        if self.strategy == Strategy::Honest {
            let out = node.phase4_confirm(ctx, votes, rng);
            let mut sends = Vec::new();
            if let Some(c) = out.confirm {
                sends.push((Audience::All, Packet::Confirm(c)));
            }
            if let Some(r) = out.recover {
                sends.push((Audience::All, Packet::Recover(Arc::new(r))));
            }
            return sends;
        }
        node.state.phase = Some(Phase::Confirmed);
        if !node.is_member() {
            return Vec::new();
        }
        node.process_votes(ctx, votes);
        let view = node.state.view;
        if let Some(pair) = self.twins_of(node.id) {
            return (0..2)
                .map(|k| (self.audiences[k].clone(), Packet::Confirm(ConfirmMsg::new(view, node.id, pair[k].header.h))))
                .collect();
        }
        self.backed_target(node)
            .map(|h| (Audience::All, Packet::Confirm(ConfirmMsg::new(view, node.id, h))))
            .into_iter()
            .collect()
    }
}
