//! Synchronous network: everything sent at tick `t` arrives at tick `t + 1`.
//!
//! Receivers asleep at the arrival tick never see the message.

use std::collections::BTreeSet;

use crate::protocol::NodeId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Audience {
    All,
    Only(BTreeSet<NodeId>),
}

impl Audience {
    pub fn includes(&self, id: NodeId) -> bool {
        match self {
            Audience::All => true,
            Audience::Only(s) => s.contains(&id),
        }
    }
}

#[derive(Debug)]
pub struct Network<P> {
    n: usize,
    in_flight: Vec<(Audience, P)>,
    delivered: u64,
    dropped: u64,
}

impl<P: Clone> Network<P> {
    pub fn new(n: usize) -> Self {
        Network { n, in_flight: Vec::new(), delivered: 0, dropped: 0 }
    }

    pub fn send(&mut self, to: Audience, packet: P) {
        self.in_flight.push((to, packet));
    }

    pub fn broadcast(&mut self, packet: P) {
        self.send(Audience::All, packet);
    }

    /// Hands last tick's traffic to awake receivers, in send order.
    pub fn deliver(&mut self, awake: &[bool]) -> Vec<Vec<P>> {
        let mut inboxes = vec![Vec::new(); self.n];
        for (to, packet) in self.in_flight.drain(..) {
            for (id, inbox) in inboxes.iter_mut().enumerate() {
                if to.includes(id as NodeId) {
                    if awake[id] {
                        inbox.push(packet.clone());
                        self.delivered += 1;
                    } else {
                        self.dropped += 1;
                    }
                }
            }
        }
        inboxes
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
