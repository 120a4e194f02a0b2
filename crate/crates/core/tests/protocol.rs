//! Node state machine driven phase by phase, with hand-made faults.

use std::sync::Arc;

use proptest::prelude::*;
use pvss_bft::group::{Group, SecurityLevel};
use pvss_bft::protocol::*;
use pvss_bft::pvss::KeyPair;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Cluster {
    ctx: Ctx,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

struct Round {
    proposals: Vec<Arc<ProposeMsg>>,
    votes: Vec<Arc<VoteMsg>>,
    confirms: Vec<ConfirmMsg>,
    recovers: Vec<Arc<RecoverMsg>>,
}

impl Cluster {
    fn new(n: usize, seed: u64) -> Self {
        let group = Group::new(SecurityLevel::Test64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(&group, &mut rng)).collect();
        let ctx = Ctx::new(group, keys.iter().map(|k| k.public).collect());
        let nodes = keys.into_iter().enumerate().map(|(i, k)| Node::new(i as NodeId, k)).collect();
        Cluster { ctx, nodes, rng }
    }

    fn begin(&mut self, view: u64, active: &[NodeId]) {
        for node in &mut self.nodes {
            node.begin_view(view, active.to_vec());
        }
    }

    /// Starts the next view; nodes outside the last view learn the active
    /// set from the first member.
    fn begin_next(&mut self, view: u64) {
        let known = self.nodes.iter().find_map(|n| n.next_active.clone()).expect("finalized");
        for node in &mut self.nodes {
            let active = node.next_active.clone().unwrap_or_else(|| known.clone());
            node.begin_view(view, active);
        }
    }

    fn propose(&mut self) -> Vec<Arc<ProposeMsg>> {
        let (ctx, rng) = (&self.ctx, &mut self.rng);
        self.nodes.iter_mut().filter_map(|n| n.phase1_propose(ctx, rng)).map(Arc::new).collect()
    }

    fn forward(&mut self, proposals: &[Arc<ProposeMsg>]) -> Vec<Arc<ShareForwardMsg>> {
        let (ctx, rng) = (&self.ctx, &mut self.rng);
        self.nodes.iter_mut().filter_map(|n| n.phase2_process(ctx, proposals, rng)).map(Arc::new).collect()
    }

    fn vote(&mut self, forwards: &[Arc<ShareForwardMsg>]) -> Vec<Arc<VoteMsg>> {
        let (ctx, rng) = (&self.ctx, &mut self.rng);
        self.nodes.iter_mut().filter_map(|n| n.phase3_vote(ctx, forwards, rng)).map(Arc::new).collect()
    }

    fn confirm(&mut self, votes: &[Arc<VoteMsg>]) -> (Vec<ConfirmMsg>, Vec<Arc<RecoverMsg>>) {
        let (ctx, rng) = (&self.ctx, &mut self.rng);
        let outs: Vec<Phase4Output> = self.nodes.iter_mut().map(|n| n.phase4_confirm(ctx, votes, rng)).collect();
        let confirms = outs.iter().filter_map(|o| o.confirm).collect();
        let recovers = outs.into_iter().filter_map(|o| o.recover).map(Arc::new).collect();
        (confirms, recovers)
    }

    fn finalize(&mut self, confirms: &[ConfirmMsg], recovers: &[Arc<RecoverMsg>], late: &[AwakeMsg]) -> Vec<ViewReport> {
        let ctx = &self.ctx;
        self.nodes.iter_mut().map(|n| n.finalize(ctx, confirms, recovers, late)).collect()
    }

    /// Runs one view with unmodified message flow.
    fn round(&mut self) -> (Round, Vec<ViewReport>) {
        let proposals = self.propose();
        let forwards = self.forward(&proposals);
        let votes = self.vote(&forwards);
        let (confirms, recovers) = self.confirm(&votes);
        let reports = self.finalize(&confirms, &recovers, &[]);
        (Round { proposals, votes, confirms, recovers }, reports)
    }

    /// Replaces the votes of `liars` with `false` votes.
    fn override_false(&mut self, votes: &mut [Arc<VoteMsg>], liars: &[NodeId]) {
        for v in votes.iter_mut() {
            if liars.contains(&v.from) {
                let node = &self.nodes[v.from as usize];
                *v = Arc::new(node.build_vote(&self.ctx, false, false, None, &mut self.rng));
            }
        }
    }
}

fn all(n: usize) -> Vec<NodeId> {
    (0..n as NodeId).collect()
}

#[test]
fn thresholds_follow_active_set_size() {
    let mut c = Cluster::new(8, 1);
    c.begin(0, &all(4));
    assert_eq!(c.nodes[0].state.threshold, 3);
    c.begin(0, &all(8));
    assert_eq!(c.nodes[0].state.threshold, 5);
    assert_eq!(vote_threshold(7), 4);
}

#[test]
fn honest_round_decides_the_top_vrf_block() {
    let mut c = Cluster::new(4, 2);
    c.begin(0, &all(4));
    for tx in [7, 8] {
        for n in &mut c.nodes {
            n.receive_tx(tx);
        }
    }
    let (r, reports) = c.round();
    let best = r.proposals.iter().max_by_key(|p| leader_key(&p.header.vrf, p.header.proposer)).unwrap();
    for n in &c.nodes {
        assert_eq!(n.state.leader, Some(best.header.proposer));
        assert_eq!(n.state.my_vote, Some(true));
    }
    assert!(r.votes.iter().all(|v| v.vote));
    assert_eq!(r.confirms.len(), 4);
    assert!(r.recovers.is_empty());
    for rep in &reports {
        assert_eq!(rep.decided.as_ref(), Some(&best.block));
        assert_eq!(rep.next_active, all(4));
        assert!(rep.evidence.is_empty());
    }
    assert_eq!(best.block.payload, vec![7, 8]);
    assert!(c.nodes.iter().all(|n| n.pending().is_empty()));
}

#[test]
fn empty_mempool_still_proposes() {
    let mut c = Cluster::new(4, 3);
    c.begin(0, &all(4));
    let proposals = c.propose();
    assert_eq!(proposals.len(), 4);
    assert!(proposals.iter().all(|p| p.block.payload.is_empty()));
}

#[test]
fn every_share_of_every_proposal_verifies_at_its_owner() {
    let mut c = Cluster::new(6, 4);
    c.begin(0, &all(6));
    let proposals = c.propose();
    for p in &proposals {
        for (i, y) in p.deal.enc_shares.iter().enumerate() {
            assert!(c.ctx.share_ok(i as NodeId, &p.deal, &p.header.deal_digest, i as u32 + 1, y));
        }
    }
}

#[test]
fn invalid_vrf_is_never_elected() {
    let mut c = Cluster::new(4, 5);
    c.begin(0, &all(4));
    let mut proposals = c.propose();
    let cheat = proposals[1].clone();
    let mut vrf = cheat.header.vrf;
    let g = &c.ctx.group;
    vrf.rho = g.sub(&g.scalar_from_u64(0), &g.scalar_from_u64(1));
    proposals[1] = Arc::new(ProposeMsg::new(g, cheat.block.clone(), cheat.precommit, cheat.deal.clone(), vrf));
    let forwards = c.forward(&proposals);
    assert_eq!(forwards.len(), 4);
    for n in &c.nodes {
        assert!(n.state.leader.is_some());
        assert_ne!(n.state.leader, Some(1));
    }
}

#[test]
fn bad_share_excludes_proposer_only_at_the_victim() {
    let mut c = Cluster::new(4, 6);
    c.begin(0, &all(4));
    let mut proposals = c.propose();
    // Pick the proposal everyone would elect and corrupt node 2's share.
    let top = (0..4).max_by_key(|&i| leader_key(&proposals[i].header.vrf, proposals[i].header.proposer)).unwrap();
    let p = proposals[top].clone();
    let mut deal = p.deal.clone();
    deal.enc_shares[2] = c.ctx.group.mul(&deal.enc_shares[2], &c.ctx.group.g());
    proposals[top] = Arc::new(ProposeMsg::new(&c.ctx.group, p.block.clone(), p.precommit, deal, p.header.vrf));
    c.forward(&proposals);
    for n in &c.nodes {
        if n.id == 2 {
            assert_ne!(n.state.leader, Some(top as NodeId));
        } else {
            assert_eq!(n.state.leader, Some(top as NodeId));
        }
    }
}

#[test]
fn deal_for_a_different_block_draws_false_votes() {
    let mut c = Cluster::new(4, 7);
    c.begin(0, &all(4));
    let mut proposals = c.propose();
    let top = (0..4).max_by_key(|&i| leader_key(&proposals[i].header.vrf, proposals[i].header.proposer)).unwrap();
    let g = c.ctx.group.clone();
    let leader = &c.nodes[top];
    let other = Block::child(leader.tip(), 0, leader.id, vec![99]);
    let other_h = proposal_digest(&other, &proposals[top].precommit);
    let secret = proposal_secret(&g, &other_h);
    let forged = leader.build_proposal(&c.ctx, leader.next_block(0), Some(secret), &mut c.rng);
    proposals[top] = Arc::new(forged);
    let forwards = c.forward(&proposals);
    let votes = c.vote(&forwards);
    assert!(votes.iter().all(|v| !v.vote));
    for n in &c.nodes {
        assert!(n.state.basis.reconstructed && !n.state.basis.secret_matches);
    }
    let (confirms, recovers) = c.confirm(&votes);
    assert!(confirms.is_empty());
    let reports = c.finalize(&confirms, &recovers, &[]);
    assert!(reports.iter().all(|r| r.decided.is_none()));
}

#[test]
fn too_few_forwards_block_reconstruction() {
    let mut c = Cluster::new(4, 8);
    c.begin(0, &all(4));
    let proposals = c.propose();
    let forwards = c.forward(&proposals);
    let t = c.nodes[0].state.threshold;
    let few: Vec<_> = forwards.into_iter().take(t - 1).collect();
    let votes = c.vote(&few);
    assert!(votes.iter().all(|v| !v.vote));
    assert!(c.nodes.iter().all(|n| !n.state.basis.reconstructed));
}

fn quorum_case(n: usize, honest_true: usize, seed: u64) -> (Vec<ConfirmMsg>, Vec<ViewReport>) {
    let mut c = Cluster::new(n, seed);
    c.begin(0, &all(n));
    let proposals = c.propose();
    let forwards = c.forward(&proposals);
    let mut votes = c.vote(&forwards);
    assert!(votes.iter().all(|v| v.vote));
    let liars: Vec<NodeId> = (honest_true as NodeId..n as NodeId).collect();
    c.override_false(&mut votes, &liars);
    let (confirms, recovers) = c.confirm(&votes);
    let reports = c.finalize(&confirms, &recovers, &[]);
    (confirms, reports)
}

#[test]
fn majority_of_seven_decides() {
    let (confirms, reports) = quorum_case(7, 4, 9);
    assert_eq!(confirms.len(), 7);
    assert!(reports.iter().all(|r| r.decided.is_some()));
    assert!(reports.iter().all(|r| r.evidence.iter().all(|e| !e.is_fault())));
}

#[test]
fn half_of_eight_is_not_a_quorum() {
    let (confirms, reports) = quorum_case(8, 4, 10);
    assert!(confirms.is_empty());
    assert!(reports.iter().all(|r| r.decided.is_none()));
}

#[test]
fn minority_of_seven_aborts() {
    let (confirms, reports) = quorum_case(7, 3, 11);
    assert!(confirms.is_empty());
    assert!(reports.iter().all(|r| r.decided.is_none()));
}

#[test]
fn conflicting_confirms_are_evidence() {
    let mut c = Cluster::new(4, 12);
    c.begin(0, &all(4));
    let proposals = c.propose();
    let forwards = c.forward(&proposals);
    let votes = c.vote(&forwards);
    let (mut confirms, recovers) = c.confirm(&votes);
    confirms.push(ConfirmMsg::new(0, 3, [7; 32]));
    for rep in &c.finalize(&confirms, &recovers, &[]) {
        assert!(rep.evidence.contains(&Evidence { view: 0, node: 3, kind: EvidenceKind::ConflictingConfirms }));
    }
}

#[test]
fn vote_equivocation_is_exposed_by_recovery() {
    let mut c = Cluster::new(5, 13);
    c.begin(0, &all(5));
    let proposals = c.propose();
    let forwards = c.forward(&proposals);
    let mut votes = c.vote(&forwards);
    // Node 4 claims a true vote while dealing a secret for false; node 3
    // honestly votes false so the recovery path runs.
    c.override_false(&mut votes, &[3]);
    let liar = &c.nodes[4];
    let target = liar.state.leader_proposal().map(|m| m.header.h);
    let fake = liar.build_vote(&c.ctx, true, false, target, &mut c.rng);
    let i = votes.iter().position(|v| v.from == 4).unwrap();
    votes[i] = Arc::new(fake);
    let (confirms, recovers) = c.confirm(&votes);
    assert!(!recovers.is_empty());
    let reports = c.finalize(&confirms, &recovers, &[]);
    for rep in reports.iter().take(4) {
        let faults: Vec<_> = rep.evidence.iter().filter(|e| e.is_fault()).collect();
        assert_eq!(faults.len(), 1, "{:?}", rep.evidence);
        assert_eq!((faults[0].node, faults[0].kind), (4, EvidenceKind::VoteMismatch));
    }
}

#[test]
fn missing_recovery_shares_mean_unverifiable_not_faulty() {
    let mut c = Cluster::new(5, 14);
    c.begin(0, &all(5));
    let proposals = c.propose();
    let forwards = c.forward(&proposals);
    let mut votes = c.vote(&forwards);
    c.override_false(&mut votes, &[3]);
    let (confirms, recovers) = c.confirm(&votes);
    // Only two recovery messages arrive; three are needed.
    let partial: Vec<_> = recovers.into_iter().take(2).collect();
    let reports = c.finalize(&confirms, &partial, &[]);
    for rep in &reports {
        assert!(rep.evidence.iter().all(|e| !e.is_fault()));
        assert!(rep.evidence.iter().any(|e| e.kind == EvidenceKind::Unverifiable));
    }
}

#[test]
fn intent_false_leaves_the_next_active_set() {
    let mut c = Cluster::new(5, 15);
    c.begin(0, &all(5));
    c.nodes[2].intent = false;
    let (_, reports) = c.round();
    for rep in &reports {
        assert!(rep.decided.is_some());
        assert_eq!(rep.next_active, vec![0, 1, 3, 4]);
    }
}

#[test]
fn awake_seen_by_everyone_joins_the_next_view() {
    let mut c = Cluster::new(5, 16);
    c.begin(0, &all(4));
    let proposals = c.propose();
    let early = AwakeMsg::new(0, 4);
    for n in &mut c.nodes {
        n.handle_awake(&early);
    }
    let forwards = c.forward(&proposals);
    let votes = c.vote(&forwards);
    let (confirms, recovers) = c.confirm(&votes);
    let reports = c.finalize(&confirms, &recovers, &[AwakeMsg::new(0, 4)]);
    for rep in reports.iter().take(4) {
        assert_eq!(rep.next_active, all(5));
    }
    let (head, tail) = c.nodes.split_at_mut(4);
    tail[0].sync_from(&head[0]);
    c.begin_next(1);
    assert!(c.nodes[4].is_member());
    let (_, reports) = c.round();
    assert!(reports.iter().all(|r| r.decided.is_some()));
}

#[test]
fn awake_seen_by_a_minority_does_not_join() {
    let mut c = Cluster::new(5, 17);
    c.begin(0, &all(4));
    let proposals = c.propose();
    c.nodes[0].handle_awake(&AwakeMsg::new(0, 4));
    let forwards = c.forward(&proposals);
    let votes = c.vote(&forwards);
    let (confirms, recovers) = c.confirm(&votes);
    let reports = c.finalize(&confirms, &recovers, &[AwakeMsg::new(0, 4)]);
    assert!(reports.iter().take(4).all(|r| r.next_active == all(4)));
}

#[test]
fn late_awake_alone_is_deferred() {
    let mut c = Cluster::new(5, 18);
    c.begin(0, &all(4));
    let proposals = c.propose();
    let forwards = c.forward(&proposals);
    let votes = c.vote(&forwards);
    let (confirms, recovers) = c.confirm(&votes);
    let reports = c.finalize(&confirms, &recovers, &[AwakeMsg::new(0, 4)]);
    assert!(reports.iter().take(4).all(|r| r.next_active == all(4)));
}

#[test]
fn awake_from_a_member_is_ignored() {
    let mut c = Cluster::new(4, 19);
    c.begin(0, &all(4));
    c.nodes[0].handle_awake(&AwakeMsg::new(0, 1));
    let (_, reports) = c.round();
    assert_eq!(reports[0].next_active, all(4));
}

#[test]
fn logs_grow_by_one_block_per_honest_view() {
    let mut c = Cluster::new(4, 20);
    c.begin(0, &all(4));
    for view in 0..5 {
        if view > 0 {
            c.begin_next(view);
        }
        let (_, reports) = c.round();
        assert!(reports.iter().all(|r| r.decided.is_some()));
    }
    let tip = c.nodes[0].tip_digest();
    assert!(c.nodes.iter().all(|n| n.log().len() == 6 && n.tip_digest() == tip));
}

#[test]
fn wire_tags_are_stable() {
    assert_eq!([TAG_PROPOSE, TAG_FORWARD, TAG_VOTE, TAG_CONFIRM, TAG_AWAKE, TAG_RECOVER], [1, 2, 3, 4, 5, 6]);
}

fn roundtrip(g: &Group, m: Message) {
    let bytes = m.to_bytes(g);
    assert_eq!(bytes[0], m.tag());
    let back = Message::from_bytes(g, &bytes).unwrap();
    assert_eq!(back.to_bytes(g), bytes);
    assert_eq!((back.view(), back.sender()), (m.view(), m.sender()));
    for cut in [1, bytes.len() / 2, bytes.len() - 1] {
        assert!(Message::from_bytes(g, &bytes[..cut]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_message_kind_roundtrips(seed in any::<u64>(), n in 4usize..7, txs in proptest::collection::vec(any::<u64>(), 0..5)) {
        let mut c = Cluster::new(n, seed);
        c.begin(seed % 1000, &all(n));
        for tx in &txs {
            for node in &mut c.nodes {
                node.receive_tx(*tx);
            }
        }
        let g = c.ctx.group.clone();
        let proposals = c.propose();
        let forwards = c.forward(&proposals);
        let mut votes = c.vote(&forwards);
        c.override_false(&mut votes, &[0]);
        let (confirms, recovers) = c.confirm(&votes);
        prop_assert!(!recovers.is_empty());
        roundtrip(&g, Message::Propose((*proposals[0]).clone()));
        roundtrip(&g, Message::Forward((*forwards[0]).clone()));
        roundtrip(&g, Message::Vote((*votes[0]).clone()));
        roundtrip(&g, Message::Vote((*votes[n - 1]).clone()));
        roundtrip(&g, Message::Confirm(confirms[0]));
        roundtrip(&g, Message::Awake(AwakeMsg::new(seed, n as NodeId)));
        roundtrip(&g, Message::Recover((*recovers[0]).clone()));
    }
}
