//! Discrete-log verifiable random function used for leader election.
//!
//! `u = H(view)^sk`, `rho = H'(u)`, with a DLEQ proof that `u` and
//! `pk = G^sk` share the same exponent. The nonce is derived from the
//! secret key and view, so evaluation is deterministic.

use crate::codec::{CodecError, Reader, Writer};
use crate::group::{Group, GroupElement, Scalar};
use crate::pvss::{DleqProof, KeyPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VrfOutput {
    pub rho: Scalar,
    pub gamma: GroupElement,
    pub proof: DleqProof,
}

fn view_base(group: &Group, view: u64) -> GroupElement {
    group.hash_to_group("PVSS-BFT/VRF-base", &view.to_be_bytes())
}

fn output_hash(group: &Group, gamma: &GroupElement) -> Scalar {
    group.hash_to_scalar("PVSS-BFT/VRF", &group.encode_element(gamma))
}

pub fn vrf_eval(group: &Group, keys: &KeyPair, view: u64) -> VrfOutput {
    let base = view_base(group, view);
    let gamma = group.exp(&base, &keys.secret);
    let mut seed = group.encode_scalar(&keys.secret);
    seed.extend_from_slice(&view.to_be_bytes());
    let nonce = group.hash_to_scalar("PVSS-BFT/VRF-nonce", &seed);
    let proof = DleqProof::prove(group, &group.big_g(), &keys.public, &base, &gamma, &keys.secret, &nonce);
    VrfOutput { rho: output_hash(group, &gamma), gamma, proof }
}

pub fn vrf_verify(group: &Group, pk: &GroupElement, view: u64, out: &VrfOutput) -> bool {
    if output_hash(group, &out.gamma) != out.rho {
        return false;
    }
    let base = view_base(group, view);
    out.proof.verify(group, &group.big_g(), pk, &base, &out.gamma)
}

impl VrfOutput {
    /// Serialized as `rho || u || proof`.
    pub fn encode(&self, group: &Group, w: &mut Writer) {
        w.scalar(group, &self.rho).element(group, &self.gamma);
        self.proof.encode(group, w);
    }

    pub fn decode(group: &Group, r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(VrfOutput { rho: r.scalar(group)?, gamma: r.element(group)?, proof: DleqProof::decode(group, r)? })
    }
}
