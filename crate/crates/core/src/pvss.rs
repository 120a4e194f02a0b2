//! Publicly verifiable secret sharing in the style of Schoenmakers.
//!
//! A dealer commits to a degree `t - 1` polynomial with `C_j = g^{a_j}`,
//! encrypts share `i` under `pk_i = G^{x_i}` as `Y_i = pk_i^{p(i)}`, and
//! proves `log_g X_i = log_{pk_i} Y_i` where `X_i = prod_j C_j^{i^j}`.
//! Anyone can check a share against the commitments; holders decrypt to
//! `S_i = G^{p(i)}` and any `t` of those interpolate to `G^{p(0)}`.

use std::collections::BTreeSet;

use rand::RngCore;
use thiserror::Error;

use crate::codec::{sha256, CodecError, Digest, Reader, Writer};
use crate::group::{Group, GroupElement, GroupError, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PvssError {
    #[error("threshold {t} is invalid for {n} participants")]
    InvalidThreshold { t: usize, n: usize },
    #[error("expected {expected} public keys, got {found}")]
    KeyCountMismatch { expected: usize, found: usize },
    #[error("need {need} distinct shares, have {have}")]
    InsufficientShares { have: usize, need: usize },
    #[error("share index {0} appears more than once")]
    DuplicateIndex(u32),
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// Non-interactive Chaum-Pedersen proof that `log_{g1} h1 = log_{g2} h2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DleqProof {
    pub challenge: Scalar,
    pub response: Scalar,
}

fn dleq_challenge(group: &Group, pts: [&GroupElement; 6]) -> Scalar {
    let mut w = Writer::with_capacity(6 * group.element_len());
    for p in pts {
        w.element(group, p);
    }
    group.hash_to_scalar("PVSS-BFT/DLEQ", w.as_slice())
}

impl DleqProof {
    /// Proves knowledge of `x` with `h1 = g1^x`, `h2 = g2^x`, using nonce `w`.
    pub fn prove(
        group: &Group,
        g1: &GroupElement,
        h1: &GroupElement,
        g2: &GroupElement,
        h2: &GroupElement,
        x: &Scalar,
        w: &Scalar,
    ) -> Self {
        let a1 = group.exp_fast(g1, w);
        let a2 = group.exp_fast(g2, w);
        let c = dleq_challenge(group, [g1, h1, g2, h2, &a1, &a2]);
        let r = group.sub(w, &group.smul(&c, x));
        DleqProof { challenge: c, response: r }
    }

    pub fn verify(&self, group: &Group, g1: &GroupElement, h1: &GroupElement, g2: &GroupElement, h2: &GroupElement) -> bool {
        let (c, r) = (&self.challenge, &self.response);
        let lift = |b: &GroupElement, h: &GroupElement| {
            if group.has_table(b) {
                group.mul(&group.exp_fast(b, r), &group.exp(h, c))
            } else {
                group.exp2(b, r, h, c)
            }
        };
        let a1 = lift(g1, h1);
        let a2 = lift(g2, h2);
        dleq_challenge(group, [g1, h1, g2, h2, &a1, &a2]) == *c
    }

    pub fn encode(&self, group: &Group, w: &mut Writer) {
        w.scalar(group, &self.challenge).scalar(group, &self.response);
    }

    pub fn decode(group: &Group, r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(DleqProof { challenge: r.scalar(group)?, response: r.scalar(group)? })
    }
}

/// Long-term key pair with `public = G^secret`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub secret: Scalar,
    pub public: GroupElement,
}

impl KeyPair {
    pub fn generate<R: RngCore + ?Sized>(group: &Group, rng: &mut R) -> Self {
        Self::from_secret(group, group.random_scalar(rng))
    }

    pub fn from_secret(group: &Group, secret: Scalar) -> Self {
        KeyPair { secret, public: group.exp_big_g(&secret) }
    }
}

/// Output of `split`: commitments plus one encrypted share and proof per
/// participant, indexed from 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PvssDeal {
    pub threshold: usize,
    pub commitments: Vec<GroupElement>,
    pub enc_shares: Vec<GroupElement>,
    pub proofs: Vec<DleqProof>,
}

/// A decrypted share `S_i = G^{p(i)}` with its proof of correct decryption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DecryptedShare {
    pub index: u32,
    pub value: GroupElement,
    pub proof: DleqProof,
}

impl PvssDeal {
    pub fn n(&self) -> usize {
        self.enc_shares.len()
    }

    pub fn enc_share(&self, index: u32) -> Option<&GroupElement> {
        self.enc_shares.get((index as usize).checked_sub(1)?)
    }

    pub fn proof(&self, index: u32) -> Option<&DleqProof> {
        self.proofs.get((index as usize).checked_sub(1)?)
    }

    /// Checks share `index` for the holder of `pk`.
    pub fn verify_share(&self, group: &Group, index: u32, pk: &GroupElement) -> bool {
        match (self.enc_share(index), self.proof(index)) {
            (Some(y), Some(p)) if self.commitments.len() == self.threshold => {
                verify_share(group, pk, &self.commitments, index, y, p)
            }
            _ => false,
        }
    }

    pub fn encode(&self, group: &Group, w: &mut Writer) {
        w.len(self.threshold).len(self.n());
        w.len(self.commitments.len());
        for c in &self.commitments {
            w.element(group, c);
        }
        w.len(self.enc_shares.len());
        for y in &self.enc_shares {
            w.element(group, y);
        }
        w.len(self.proofs.len());
        for p in &self.proofs {
            p.encode(group, w);
        }
    }

    pub fn decode(group: &Group, r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let threshold = r.u32()? as usize;
        let n = r.u32()? as usize;
        let nc = r.len()?;
        let commitments = (0..nc).map(|_| r.element(group)).collect::<Result<Vec<_>, _>>()?;
        let ny = r.len()?;
        let enc_shares = (0..ny).map(|_| r.element(group)).collect::<Result<Vec<_>, _>>()?;
        let np = r.len()?;
        let proofs = (0..np).map(|_| DleqProof::decode(group, r)).collect::<Result<Vec<_>, _>>()?;
        if threshold == 0 || threshold > n || nc != threshold || ny != n || np != n {
            return Err(CodecError::Invalid("deal dimensions"));
        }
        Ok(PvssDeal { threshold, commitments, enc_shares, proofs })
    }

    pub fn to_bytes(&self, group: &Group) -> Vec<u8> {
        let words = self.commitments.len() + 3 * self.enc_shares.len();
        let mut w = Writer::with_capacity(words * group.element_len() + 16);
        self.encode(group, &mut w);
        w.finish()
    }

    pub fn from_bytes(group: &Group, bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let d = Self::decode(group, &mut r)?;
        r.finish()?;
        Ok(d)
    }

    pub fn digest(&self, group: &Group) -> Digest {
        sha256(&[b"PVSS-BFT/deal", &self.to_bytes(group)])
    }
}

impl DecryptedShare {
    pub fn encode(&self, group: &Group, w: &mut Writer) {
        w.u32(self.index).element(group, &self.value);
        self.proof.encode(group, w);
    }

    pub fn decode(group: &Group, r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(DecryptedShare { index: r.u32()?, value: r.element(group)?, proof: DleqProof::decode(group, r)? })
    }
}

/// `X_i = prod_j C_j^{i^j}`, evaluated by Horner's rule in the exponent.
pub fn share_commitment(group: &Group, commitments: &[GroupElement], index: u32) -> GroupElement {
    let mut acc = group.identity();
    for c in commitments.iter().rev() {
        acc = group.mul(&group.exp_small(&acc, index as u64), c);
    }
    acc
}

/// Splits `secret` into `n` encrypted shares with reconstruction threshold `t`.
pub fn split<R: RngCore + ?Sized>(
    group: &Group,
    secret: &Scalar,
    n: usize,
    t: usize,
    pks: &[GroupElement],
    rng: &mut R,
) -> Result<PvssDeal, PvssError> {
    if t == 0 || t > n {
        return Err(PvssError::InvalidThreshold { t, n });
    }
    if pks.len() != n {
        return Err(PvssError::KeyCountMismatch { expected: n, found: pks.len() });
    }
    let mut coeffs = Vec::with_capacity(t);
    coeffs.push(*secret);
    for _ in 1..t {
        coeffs.push(group.random_scalar(rng));
    }
    let commitments = coeffs.iter().map(|a| group.exp_g(a)).collect();
    let mut enc_shares = Vec::with_capacity(n);
    let mut proofs = Vec::with_capacity(n);
    for (k, pk) in pks.iter().enumerate() {
        let i = group.scalar_from_u64(k as u64 + 1);
        let mut p_i = Scalar::default();
        for a in coeffs.iter().rev() {
            p_i = group.add(&group.smul(&p_i, &i), a);
        }
        let x_i = group.exp_g(&p_i);
        let y_i = group.exp_fast(pk, &p_i);
        let w = group.random_scalar(rng);
        proofs.push(DleqProof::prove(group, &group.g(), &x_i, pk, &y_i, &p_i, &w));
        enc_shares.push(y_i);
    }
    Ok(PvssDeal { threshold: t, commitments, enc_shares, proofs })
}

/// Checks that `enc_share` encrypts the `index`-th evaluation of the committed polynomial.
pub fn verify_share(
    group: &Group,
    pk: &GroupElement,
    commitments: &[GroupElement],
    index: u32,
    enc_share: &GroupElement,
    proof: &DleqProof,
) -> bool {
    if index == 0 || commitments.is_empty() {
        return false;
    }
    let x_i = share_commitment(group, commitments, index);
    proof.verify(group, &group.g(), &x_i, pk, enc_share)
}

/// Decrypts `enc_share` as `Y^{1/x}` and proves correctness.
pub fn decrypt_share<R: RngCore + ?Sized>(
    group: &Group,
    keys: &KeyPair,
    index: u32,
    enc_share: &GroupElement,
    rng: &mut R,
) -> DecryptedShare {
    let x_inv = group.inv(&keys.secret).expect("secret keys are nonzero");
    let value = group.exp(enc_share, &x_inv);
    let w = group.random_scalar(rng);
    let proof = DleqProof::prove(group, &group.big_g(), &keys.public, &value, enc_share, &keys.secret, &w);
    DecryptedShare { index, value, proof }
}

pub fn verify_decryption(group: &Group, pk: &GroupElement, enc_share: &GroupElement, share: &DecryptedShare) -> bool {
    share.proof.verify(group, &group.big_g(), pk, &share.value, enc_share)
}

/// Interpolates `G^{p(0)}` from the `t` lowest-indexed shares.
pub fn reconstruct(group: &Group, shares: &[DecryptedShare], t: usize) -> Result<GroupElement, PvssError> {
    let mut seen = BTreeSet::new();
    for s in shares {
        if s.index == 0 {
            return Err(GroupError::BadIndexSet.into());
        }
        if !seen.insert(s.index) {
            return Err(PvssError::DuplicateIndex(s.index));
        }
    }
    if t == 0 || shares.len() < t {
        return Err(PvssError::InsufficientShares { have: shares.len(), need: t.max(1) });
    }
    let mut chosen: Vec<&DecryptedShare> = shares.iter().collect();
    chosen.sort_by_key(|s| s.index);
    chosen.truncate(t);
    let idx: Vec<u64> = chosen.iter().map(|s| s.index as u64).collect();
    let mut acc = group.identity();
    for s in chosen {
        let l = group.lagrange_coeff(&idx, s.index as u64)?;
        acc = group.mul(&acc, &group.exp(&s.value, &l));
    }
    Ok(acc)
}

/// Wall-clock timings of the three dealing operations.
pub mod bench {
    use std::time::Instant;

    use rand::RngCore;
    use serde::Serialize;

    use super::{decrypt_share, reconstruct, split, verify_share, KeyPair};
    use crate::group::Group;

    /// Column order of the benchmark CSV.
    pub const BENCH_COLUMNS: [&str; 7] = ["profile", "n", "t", "samples", "split_ms", "verify_all_ms", "reconstruct_ms"];

    /// Median timings in milliseconds for one participant count.
    #[derive(Clone, Debug, PartialEq, Serialize)]
    pub struct BenchRow {
        pub profile: String,
        pub n: usize,
        pub t: usize,
        pub samples: usize,
        pub split_ms: f64,
        pub verify_all_ms: f64,
        pub reconstruct_ms: f64,
    }

    impl crate::metrics::CsvRow for BenchRow {
        const COLUMNS: &'static [&'static str] = &BENCH_COLUMNS;
    }

    fn median(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        let m = xs.len() / 2;
        if xs.len() % 2 == 1 {
            xs[m]
        } else {
            (xs[m - 1] + xs[m]) / 2.0
        }
    }

    fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
        let start = Instant::now();
        let out = f();
        (out, start.elapsed().as_secs_f64() * 1e3)
    }

    /// Times `split`, verification of all `n` shares, and reconstruction from
    /// `t = n/2 + 1` decrypted shares, over `samples` fresh dealings.
    pub fn bench_pvss<R: RngCore + ?Sized>(group: &Group, n: usize, samples: usize, rng: &mut R) -> BenchRow {
        assert!(n > 0 && samples > 0);
        let t = n / 2 + 1;
        let keys: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(group, rng)).collect();
        let pks: Vec<_> = keys.iter().map(|k| k.public).collect();
        let (mut s, mut v, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..samples {
            let secret = group.random_scalar(rng);
            let (deal, ms) = timed(|| split(group, &secret, n, t, &pks, rng).expect("valid threshold"));
            s.push(ms);
            let (ok, ms) = timed(|| {
                (0..n).all(|i| {
                    verify_share(group, &pks[i], &deal.commitments, i as u32 + 1, &deal.enc_shares[i], &deal.proofs[i])
                })
            });
            assert!(ok);
            v.push(ms);
            let shares: Vec<_> =
                (0..t).map(|i| decrypt_share(group, &keys[i], i as u32 + 1, &deal.enc_shares[i], rng)).collect();
            let (secret_g, ms) = timed(|| reconstruct(group, &shares, t).expect("enough shares"));
            assert_eq!(secret_g, group.exp_big_g(&secret));
            r.push(ms);
        }
        BenchRow {
            profile: group.level().name().to_string(),
            n,
            t,
            samples,
            split_ms: median(s),
            verify_all_ms: median(v),
            reconstruct_ms: median(r),
        }
    }
}
