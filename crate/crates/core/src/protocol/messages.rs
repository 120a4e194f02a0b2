//! Blocks, protocol messages and their canonical wire encoding.
//!
//! Each frame is `tag (u8) || body length (u32) || body`. Tags:
//! 1 PROPOSE, 2 FORWARD, 3 VOTE, 4 CONFIRM, 5 AWAKE, 6 RECOVER.

use std::sync::OnceLock;

use crate::codec::{sha256, CodecError, Digest, Reader, Writer};
use crate::group::{Group, GroupElement};
use crate::pvss::{DecryptedShare, PvssDeal};
use crate::vrf::VrfOutput;

pub type NodeId = u32;
pub type TxId = u64;

// Cache of a pure function of the enclosing message; cleared on clone so an
// edited copy never inherits a stale value.
#[derive(Debug, Default)]
struct Memo<T>(OnceLock<T>);

impl<T> Clone for Memo<T> {
    fn clone(&self) -> Self {
        Memo(OnceLock::new())
    }
}

impl<T: Copy> Memo<T> {
    fn get(&self, f: impl FnOnce() -> T) -> T {
        *self.0.get_or_init(f)
    }
}

pub const TAG_PROPOSE: u8 = 1;
pub const TAG_FORWARD: u8 = 2;
pub const TAG_VOTE: u8 = 3;
pub const TAG_CONFIRM: u8 = 4;
pub const TAG_AWAKE: u8 = 5;
pub const TAG_RECOVER: u8 = 6;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub parent: Digest,
    pub height: u64,
    pub view: u64,
    pub proposer: NodeId,
    pub payload: Vec<TxId>,
}

impl Block {
    pub fn genesis() -> Self {
        Block { parent: [0; 32], height: 0, view: 0, proposer: NodeId::MAX, payload: Vec::new() }
    }

    pub fn child(parent: &Block, view: u64, proposer: NodeId, payload: Vec<TxId>) -> Self {
        Block { parent: parent.digest(), height: parent.height + 1, view, proposer, payload }
    }

    fn encode(&self, w: &mut Writer) {
        w.digest(&self.parent).u64(self.height).u64(self.view).u32(self.proposer);
        w.len(self.payload.len());
        for tx in &self.payload {
            w.u64(*tx);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let parent = r.digest()?;
        let height = r.u64()?;
        let view = r.u64()?;
        let proposer = r.u32()?;
        let n = r.len()?;
        let payload = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
        Ok(Block { parent, height, view, proposer, payload })
    }

    pub fn digest(&self) -> Digest {
        let mut w = Writer::new();
        self.encode(&mut w);
        sha256(&[b"PVSS-BFT/block", w.as_slice()])
    }
}

/// Intent to take part in the next view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Precommit {
    pub node: NodeId,
    pub view: u64,
    pub intent: bool,
}

/// Authenticated-channel stamp binding a signer to a content digest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Stamp {
    pub signer: NodeId,
    pub tag: Digest,
}

impl Stamp {
    pub fn new(signer: NodeId, content: &Digest) -> Self {
        Stamp { signer, tag: sha256(&[b"PVSS-BFT/stamp", &signer.to_be_bytes(), content]) }
    }

    pub fn verify(&self, signer: NodeId, content: &Digest) -> bool {
        self.signer == signer && *self == Stamp::new(signer, content)
    }

    fn encode(&self, w: &mut Writer) {
        w.u32(self.signer).digest(&self.tag);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Stamp { signer: r.u32()?, tag: r.digest()? })
    }
}

/// The part of a proposal that forwarders relay to expose equivocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProposalHeader {
    pub view: u64,
    pub proposer: NodeId,
    /// Digest of block and pre-commit; the dealt secret is derived from it.
    pub h: Digest,
    pub deal_digest: Digest,
    pub vrf: VrfOutput,
}

impl ProposalHeader {
    fn encode(&self, g: &Group, w: &mut Writer) {
        w.u64(self.view).u32(self.proposer).digest(&self.h).digest(&self.deal_digest);
        self.vrf.encode(g, w);
    }

    fn decode(g: &Group, r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ProposalHeader {
            view: r.u64()?,
            proposer: r.u32()?,
            h: r.digest()?,
            deal_digest: r.digest()?,
            vrf: VrfOutput::decode(g, r)?,
        })
    }

    pub fn digest(&self, g: &Group) -> Digest {
        let mut w = Writer::new();
        self.encode(g, &mut w);
        sha256(&[b"PVSS-BFT/header", w.as_slice()])
    }
}

pub fn proposal_digest(block: &Block, precommit: &Precommit) -> Digest {
    let mut w = Writer::new();
    w.u32(precommit.node).u64(precommit.view).bool(precommit.intent);
    sha256(&[b"PVSS-BFT/h", &block.digest(), w.as_slice()])
}

#[derive(Clone, Debug)]
pub struct ProposeMsg {
    pub header: ProposalHeader,
    pub block: Block,
    pub precommit: Precommit,
    pub deal: PvssDeal,
    pub stamp: Stamp,
    consistent: Memo<bool>,
}

impl ProposeMsg {
    /// Assembles a proposal, computing the header digests and stamp.
    pub fn new(g: &Group, block: Block, precommit: Precommit, deal: PvssDeal, vrf: VrfOutput) -> Self {
        let header = ProposalHeader {
            view: block.view,
            proposer: precommit.node,
            h: proposal_digest(&block, &precommit),
            deal_digest: deal.digest(g),
            vrf,
        };
        let stamp = Stamp::new(precommit.node, &header.digest(g));
        ProposeMsg { header, block, precommit, deal, stamp, consistent: Memo::default() }
    }

    /// Checks that the header matches the body and the stamp matches the header.
    pub fn is_consistent(&self, g: &Group) -> bool {
        self.consistent.get(|| self.check_consistent(g))
    }

    fn check_consistent(&self, g: &Group) -> bool {
        self.header.proposer == self.precommit.node
            && self.header.proposer == self.block.proposer
            && self.header.view == self.block.view
            && self.header.view == self.precommit.view
            && self.header.h == proposal_digest(&self.block, &self.precommit)
            && self.header.deal_digest == self.deal.digest(g)
            && self.stamp.verify(self.header.proposer, &self.header.digest(g))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaderShare {
    pub header: ProposalHeader,
    pub header_stamp: Stamp,
    pub index: u32,
    pub enc_share: GroupElement,
    pub decrypted: DecryptedShare,
}

#[derive(Clone, Debug)]
pub struct ShareForwardMsg {
    pub view: u64,
    pub from: NodeId,
    pub leader: Option<LeaderShare>,
    pub awake_list: Vec<NodeId>,
    pub next_round_commit: Vec<NodeId>,
    pub stamp: Stamp,
    digest: Memo<Digest>,
    stamp_valid: Memo<bool>,
}

impl ShareForwardMsg {
    pub fn new(
        g: &Group,
        view: u64,
        from: NodeId,
        leader: Option<LeaderShare>,
        awake_list: Vec<NodeId>,
        next_round_commit: Vec<NodeId>,
    ) -> Self {
        let mut m = ShareForwardMsg {
            view,
            from,
            leader,
            awake_list,
            next_round_commit,
            stamp: Stamp { signer: from, tag: [0; 32] },
            digest: Memo::default(),
            stamp_valid: Memo::default(),
        };
        m.stamp = Stamp::new(from, &m.content_digest(g));
        m
    }

    fn encode_content(&self, g: &Group, w: &mut Writer) {
        w.u64(self.view).u32(self.from);
        match &self.leader {
            None => {
                w.bool(false);
            }
            Some(ls) => {
                w.bool(true);
                ls.header.encode(g, w);
                ls.header_stamp.encode(w);
                w.u32(ls.index).element(g, &ls.enc_share);
                ls.decrypted.encode(g, w);
            }
        }
        for list in [&self.awake_list, &self.next_round_commit] {
            w.len(list.len());
            for id in list {
                w.u32(*id);
            }
        }
    }

    pub fn content_digest(&self, g: &Group) -> Digest {
        self.digest.get(|| {
            let mut w = Writer::new();
            self.encode_content(g, &mut w);
            sha256(&[b"PVSS-BFT/forward", w.as_slice()])
        })
    }

    pub fn stamp_ok(&self, g: &Group) -> bool {
        self.stamp_valid.get(|| self.stamp.verify(self.from, &self.content_digest(g)))
    }
}

#[derive(Clone, Debug)]
pub struct VoteMsg {
    pub view: u64,
    pub from: NodeId,
    pub vote: bool,
    pub target: Option<Digest>,
    pub deal: PvssDeal,
    pub stamp: Stamp,
    digest: Memo<Digest>,
    stamp_valid: Memo<bool>,
}

/// Bytes hashed to the secret a voter deals alongside its vote.
pub fn vote_secret_input(view: u64, from: NodeId, vote: bool, target: Option<&Digest>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(view).u32(from).bool(vote);
    match target {
        Some(d) => w.bool(true).digest(d),
        None => w.bool(false),
    };
    w.finish()
}

impl VoteMsg {
    pub fn new(g: &Group, view: u64, from: NodeId, vote: bool, target: Option<Digest>, deal: PvssDeal) -> Self {
        let mut m = VoteMsg {
            view,
            from,
            vote,
            target,
            deal,
            stamp: Stamp { signer: from, tag: [0; 32] },
            digest: Memo::default(),
            stamp_valid: Memo::default(),
        };
        m.stamp = Stamp::new(from, &m.content_digest(g));
        m
    }

    pub fn content_digest(&self, g: &Group) -> Digest {
        self.digest.get(|| {
            let input = vote_secret_input(self.view, self.from, self.vote, self.target.as_ref());
            sha256(&[b"PVSS-BFT/vote", &input, &self.deal.digest(g)])
        })
    }

    pub fn stamp_ok(&self, g: &Group) -> bool {
        self.stamp_valid.get(|| self.stamp.verify(self.from, &self.content_digest(g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConfirmMsg {
    pub view: u64,
    pub from: NodeId,
    pub block_hash: Digest,
    pub stamp: Stamp,
}

impl ConfirmMsg {
    fn content(view: u64, from: NodeId, block_hash: &Digest) -> Digest {
        sha256(&[b"PVSS-BFT/confirm", &view.to_be_bytes(), &from.to_be_bytes(), block_hash])
    }

    pub fn new(view: u64, from: NodeId, block_hash: Digest) -> Self {
        ConfirmMsg { view, from, block_hash, stamp: Stamp::new(from, &Self::content(view, from, &block_hash)) }
    }

    pub fn stamp_ok(&self) -> bool {
        self.stamp.verify(self.from, &Self::content(self.view, self.from, &self.block_hash))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AwakeMsg {
    pub view: u64,
    pub from: NodeId,
    pub stamp: Stamp,
}

impl AwakeMsg {
    fn content(view: u64, from: NodeId) -> Digest {
        sha256(&[b"PVSS-BFT/awake", &view.to_be_bytes(), &from.to_be_bytes()])
    }

    pub fn new(view: u64, from: NodeId) -> Self {
        AwakeMsg { view, from, stamp: Stamp::new(from, &Self::content(view, from)) }
    }

    pub fn stamp_ok(&self) -> bool {
        self.stamp.verify(self.from, &Self::content(self.view, self.from))
    }
}

/// Decrypted vote-deal shares rebroadcast during error recovery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoverMsg {
    pub view: u64,
    pub from: NodeId,
    pub shares: Vec<(NodeId, DecryptedShare)>,
}

#[derive(Clone, Debug)]
pub enum Message {
    Propose(ProposeMsg),
    Forward(ShareForwardMsg),
    Vote(VoteMsg),
    Confirm(ConfirmMsg),
    Awake(AwakeMsg),
    Recover(RecoverMsg),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Propose(_) => TAG_PROPOSE,
            Message::Forward(_) => TAG_FORWARD,
            Message::Vote(_) => TAG_VOTE,
            Message::Confirm(_) => TAG_CONFIRM,
            Message::Awake(_) => TAG_AWAKE,
            Message::Recover(_) => TAG_RECOVER,
        }
    }

    pub fn view(&self) -> u64 {
        match self {
            Message::Propose(m) => m.header.view,
            Message::Forward(m) => m.view,
            Message::Vote(m) => m.view,
            Message::Confirm(m) => m.view,
            Message::Awake(m) => m.view,
            Message::Recover(m) => m.view,
        }
    }

    pub fn sender(&self) -> NodeId {
        match self {
            Message::Propose(m) => m.header.proposer,
            Message::Forward(m) => m.from,
            Message::Vote(m) => m.from,
            Message::Confirm(m) => m.from,
            Message::Awake(m) => m.from,
            Message::Recover(m) => m.from,
        }
    }

    pub fn to_bytes(&self, g: &Group) -> Vec<u8> {
        let mut body = Writer::new();
        match self {
            Message::Propose(m) => {
                m.header.encode(g, &mut body);
                m.block.encode(&mut body);
                body.u32(m.precommit.node).u64(m.precommit.view).bool(m.precommit.intent);
                m.deal.encode(g, &mut body);
                m.stamp.encode(&mut body);
            }
            Message::Forward(m) => {
                m.encode_content(g, &mut body);
                m.stamp.encode(&mut body);
            }
            Message::Vote(m) => {
                body.u64(m.view).u32(m.from).bool(m.vote);
                match &m.target {
                    Some(d) => body.bool(true).digest(d),
                    None => body.bool(false),
                };
                m.deal.encode(g, &mut body);
                m.stamp.encode(&mut body);
            }
            Message::Confirm(m) => {
                body.u64(m.view).u32(m.from).digest(&m.block_hash);
                m.stamp.encode(&mut body);
            }
            Message::Awake(m) => {
                body.u64(m.view).u32(m.from);
                m.stamp.encode(&mut body);
            }
            Message::Recover(m) => {
                body.u64(m.view).u32(m.from).len(m.shares.len());
                for (voter, ds) in &m.shares {
                    body.u32(*voter);
                    ds.encode(g, &mut body);
                }
            }
        }
        let mut w = Writer::new();
        w.u8(self.tag()).bytes(body.as_slice());
        w.finish()
    }

    pub fn from_bytes(g: &Group, bytes: &[u8]) -> Result<Self, CodecError> {
        let mut outer = Reader::new(bytes);
        let tag = outer.u8()?;
        let body = outer.bytes()?;
        outer.finish()?;
        let r = &mut Reader::new(body);
        let msg = match tag {
            TAG_PROPOSE => {
                let header = ProposalHeader::decode(g, r)?;
                let block = Block::decode(r)?;
                let precommit = Precommit { node: r.u32()?, view: r.u64()?, intent: r.bool()? };
                let deal = PvssDeal::decode(g, r)?;
                let stamp = Stamp::decode(r)?;
                Message::Propose(ProposeMsg { header, block, precommit, deal, stamp, consistent: Memo::default() })
            }
            TAG_FORWARD => {
                let view = r.u64()?;
                let from = r.u32()?;
                let leader = if r.bool()? {
                    Some(LeaderShare {
                        header: ProposalHeader::decode(g, r)?,
                        header_stamp: Stamp::decode(r)?,
                        index: r.u32()?,
                        enc_share: r.element(g)?,
                        decrypted: DecryptedShare::decode(g, r)?,
                    })
                } else {
                    None
                };
                let mut lists = [Vec::new(), Vec::new()];
                for list in lists.iter_mut() {
                    let n = r.len()?;
                    *list = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
                }
                let [awake_list, next_round_commit] = lists;
                let stamp = Stamp::decode(r)?;
                Message::Forward(ShareForwardMsg {
                    view,
                    from,
                    leader,
                    awake_list,
                    next_round_commit,
                    stamp,
                    digest: Memo::default(),
                    stamp_valid: Memo::default(),
                })
            }
            TAG_VOTE => {
                let view = r.u64()?;
                let from = r.u32()?;
                let vote = r.bool()?;
                let target = if r.bool()? { Some(r.digest()?) } else { None };
                let deal = PvssDeal::decode(g, r)?;
                let stamp = Stamp::decode(r)?;
                Message::Vote(VoteMsg {
                    view,
                    from,
                    vote,
                    target,
                    deal,
                    stamp,
                    digest: Memo::default(),
                    stamp_valid: Memo::default(),
                })
            }
            TAG_CONFIRM => Message::Confirm(ConfirmMsg {
                view: r.u64()?,
                from: r.u32()?,
                block_hash: r.digest()?,
                stamp: Stamp::decode(r)?,
            }),
            TAG_AWAKE => Message::Awake(AwakeMsg { view: r.u64()?, from: r.u32()?, stamp: Stamp::decode(r)? }),
            TAG_RECOVER => {
                let view = r.u64()?;
                let from = r.u32()?;
                let n = r.len()?;
                let shares = (0..n)
                    .map(|_| Ok((r.u32()?, DecryptedShare::decode(g, r)?)))
                    .collect::<Result<_, CodecError>>()?;
                Message::Recover(RecoverMsg { view, from, shares })
            }
            other => return Err(CodecError::UnknownTag(other)),
        };
        Ok(msg)
    }
}
