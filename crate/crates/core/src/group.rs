//! Prime-order subgroup arithmetic over safe-prime moduli.
//!
//! Every element is a quadratic residue modulo `p = 2q + 1`, so the
//! subgroup has prime order `q`. Two parameter sets are bundled:
//! `test64` (64-bit modulus, single-word Montgomery arithmetic) and
//! `std256` (256-bit modulus, backed by `crypto-bigint`).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use rustc_hash::FxHashMap;
use std::sync::{Arc, RwLock};

use crypto_bigint::modular::runtime_mod::{DynResidue, DynResidueParams};
use crypto_bigint::{Encoding, NonZero, U256, U512};
use rand::RngCore;
use sha2::{Digest as _, Sha512};
use thiserror::Error;

type Limbs = [u64; 4];

const TEST64_P: u64 = 0xc6e4_b87a_ff26_e7e7;
const STD256_P: &str = "d623327aacd9ed1c5a3fb7685549902354ce9c24d2eef3776d64b6d04d4a117b";

/// Named parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SecurityLevel {
    Test64,
    Std256,
}

impl SecurityLevel {
    pub fn name(self) -> &'static str {
        match self {
            SecurityLevel::Test64 => "test64",
            SecurityLevel::Std256 => "std256",
        }
    }
}

impl fmt::Display for SecurityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SecurityLevel {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "test64" => Ok(SecurityLevel::Test64),
            "std256" => Ok(SecurityLevel::Std256),
            other => Err(GroupError::UnknownProfile(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroupError {
    #[error("unknown group profile `{0}` (expected test64 or std256)")]
    UnknownProfile(String),
    #[error("encoding has {found} bytes, expected {expected}")]
    BadLength { expected: usize, found: usize },
    #[error("value is not reduced modulo {0}")]
    NotReduced(&'static str),
    #[error("element is not in the prime-order subgroup")]
    NotInSubgroup,
    #[error("interpolation index set is empty, contains zero, or repeats an index")]
    BadIndexSet,
}

/// Integer modulo `q`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Scalar(Limbs);

/// Element of the order-`q` subgroup of `Z_p^*`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement(Limbs);

fn cmp_limbs(a: &Limbs, b: &Limbs) -> Ordering {
    a.iter().rev().cmp(b.iter().rev())
}

impl Ord for Scalar {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_limbs(&self.0, &other.0)
    }
}

impl PartialOrd for Scalar {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GroupElement {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_limbs(&self.0, &other.0)
    }
}

impl PartialOrd for GroupElement {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn fmt_limbs(l: &Limbs, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let top = l.iter().rposition(|&w| w != 0).unwrap_or(0);
    write!(f, "0x{:x}", l[top])?;
    for w in l[..top].iter().rev() {
        write!(f, "{w:016x}")?;
    }
    Ok(())
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_limbs(&self.0, f)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_limbs(&self.0, f)
    }
}

impl Scalar {
    pub fn is_zero(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn limbs(&self) -> &[u64; 4] {
        &self.0
    }
}

impl GroupElement {
    pub fn limbs(&self) -> &[u64; 4] {
        &self.0
    }
}

// Single-word Montgomery arithmetic. Values stay canonical outside `pow`.
#[derive(Clone, Debug)]
struct Word {
    p: u64,
    q: u64,
    p_neg_inv: u64,
    r2: u64,
    one: u64,
}

impl Word {
    fn new(p: u64) -> Self {
        let mut inv = 1u64;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(p.wrapping_mul(inv)));
        }
        let r = ((1u128 << 64) % p as u128) as u64;
        let r2 = ((r as u128 * r as u128) % p as u128) as u64;
        Word {
            p,
            q: (p - 1) / 2,
            p_neg_inv: inv.wrapping_neg(),
            r2,
            one: r,
        }
    }

    #[inline]
    fn redc(&self, t: u128) -> u64 {
        let k = (t as u64).wrapping_mul(self.p_neg_inv);
        let (s, carry) = t.overflowing_add(k as u128 * self.p as u128);
        let hi = (s >> 64) as u64;
        if carry || hi >= self.p {
            hi.wrapping_sub(self.p)
        } else {
            hi
        }
    }

    #[inline]
    fn mm(&self, a: u64, b: u64) -> u64 {
        self.redc(a as u128 * b as u128)
    }

    fn to_mont(&self, a: u64) -> u64 {
        self.mm(a, self.r2)
    }

    fn from_mont(&self, a: u64) -> u64 {
        self.redc(a as u128)
    }

    fn smul(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.q as u128) as u64
    }

    fn sinv(&self, a: u64) -> u64 {
        let (mut r0, mut r1) = (self.q as i128, a as i128);
        let (mut t0, mut t1) = (0i128, 1i128);
        while r1 != 0 {
            let k = r0 / r1;
            (r0, r1) = (r1, r0 - k * r1);
            (t0, t1) = (t1, t0 - k * t1);
        }
        t0.rem_euclid(self.q as i128) as u64
    }
}

#[derive(Clone, Debug)]
struct Wide {
    p: U256,
    q: U256,
    pp: DynResidueParams<4>,
    qp: DynResidueParams<4>,
}

impl Wide {
    fn new(p: U256) -> Self {
        let q = p.shr_vartime(1);
        Wide {
            p,
            q,
            pp: DynResidueParams::new(&p),
            qp: DynResidueParams::new(&q),
        }
    }

    fn res(&self, a: &Limbs) -> DynResidue<4> {
        DynResidue::new(&U256::from_words(*a), self.pp)
    }
}

#[derive(Clone, Debug)]
enum Backend {
    Word(Word),
    Wide(Wide),
}

// Fixed-base table: entry [i][d] = base^(d * 16^i), in Montgomery form.
#[derive(Clone, Debug)]
enum Table {
    Word(Vec<[u64; 16]>),
    Wide(Vec<Vec<DynResidue<4>>>),
}

#[inline]
fn nibble(e: &Limbs, i: usize) -> usize {
    ((e[i / 16] >> (4 * (i % 16))) & 0xf) as usize
}

fn window_pow<T: Copy>(one: T, base: T, e: &Limbs, nibbles: usize, mul: impl Fn(T, T) -> T) -> T {
    let mut pre = [one; 16];
    for d in 1..16 {
        pre[d] = mul(pre[d - 1], base);
    }
    let mut acc = one;
    for i in (0..nibbles).rev() {
        for _ in 0..4 {
            acc = mul(acc, acc);
        }
        let d = nibble(e, i);
        if d != 0 {
            acc = mul(acc, pre[d]);
        }
    }
    acc
}

fn window_pow2<T: Copy>(
    one: T,
    b1: T,
    e1: &Limbs,
    b2: T,
    e2: &Limbs,
    bits: usize,
    mul: impl Fn(T, T) -> T,
) -> T {
    // pre[a + 4b] = b1^a * b2^b over 2-bit digits
    let mut pre = [one; 16];
    for a in 1..4 {
        pre[a] = mul(pre[a - 1], b1);
    }
    for b in 1..4 {
        for a in 0..4 {
            pre[a + 4 * b] = mul(pre[a + 4 * (b - 1)], b2);
        }
    }
    let digit = |e: &Limbs, i: usize| ((e[i / 32] >> (2 * (i % 32))) & 3) as usize;
    let mut acc = one;
    for i in (0..bits.div_ceil(2)).rev() {
        acc = mul(acc, acc);
        acc = mul(acc, acc);
        let d = digit(e1, i) + 4 * digit(e2, i);
        if d != 0 {
            acc = mul(acc, pre[d]);
        }
    }
    acc
}

struct Inner {
    level: SecurityLevel,
    backend: Backend,
    g: GroupElement,
    h: GroupElement,
    g_table: Table,
    h_table: Table,
    q_bits: usize,
    p_bits: usize,
    registered: RwLock<FxHashMap<GroupElement, Arc<Table>>>,
}

/// Handle to a group instance. Cheap to clone.
#[derive(Clone)]
pub struct Group(Arc<Inner>);

impl fmt::Debug for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Group")
            .field("level", &self.0.level)
            .field("p", &self.modulus())
            .field("g", &self.0.g)
            .field("G", &self.0.h)
            .finish()
    }
}

impl Group {
    pub fn new(level: SecurityLevel) -> Self {
        let backend = match level {
            SecurityLevel::Test64 => Backend::Word(Word::new(TEST64_P)),
            SecurityLevel::Std256 => Backend::Wide(Wide::new(U256::from_be_hex(STD256_P))),
        };
        let (p_bits, q_bits) = match &backend {
            Backend::Word(w) => (64 - w.p.leading_zeros() as usize, 64 - w.q.leading_zeros() as usize),
            Backend::Wide(w) => (w.p.bits_vartime(), w.q.bits_vartime()),
        };
        let g = GroupElement([4, 0, 0, 0]);
        let mut inner = Inner {
            level,
            backend,
            g,
            h: g,
            g_table: Table::Word(Vec::new()),
            h_table: Table::Word(Vec::new()),
            q_bits,
            p_bits,
            registered: RwLock::new(FxHashMap::default()),
        };
        inner.g_table = build_table(&inner, &g);
        let mut group = Group(Arc::new(inner));
        let mut seed = group.encode_element(&group.modulus_element_unchecked());
        seed.extend(group.encode_scalar(&group.order_scalar_unchecked()));
        seed.extend(group.encode_element(&g));
        let h = group.hash_to_group("PVSS-G", &seed);
        let inner = Arc::get_mut(&mut group.0).expect("unshared during construction");
        inner.h = h;
        inner.h_table = build_table(inner, &h);
        group
    }

    pub fn level(&self) -> SecurityLevel {
        self.0.level
    }

    /// Modulus `p` as big-endian hex.
    pub fn modulus(&self) -> String {
        format!("{:?}", self.modulus_element_unchecked())
    }

    /// Subgroup order `q` as big-endian hex.
    pub fn order(&self) -> String {
        format!("{:?}", self.order_scalar_unchecked())
    }

    fn modulus_element_unchecked(&self) -> GroupElement {
        match &self.0.backend {
            Backend::Word(w) => GroupElement([w.p, 0, 0, 0]),
            Backend::Wide(w) => GroupElement(w.p.to_words()),
        }
    }

    fn order_scalar_unchecked(&self) -> Scalar {
        match &self.0.backend {
            Backend::Word(w) => Scalar([w.q, 0, 0, 0]),
            Backend::Wide(w) => Scalar(w.q.to_words()),
        }
    }

    pub fn order_bits(&self) -> usize {
        self.0.q_bits
    }

    pub fn scalar_len(&self) -> usize {
        self.0.q_bits.div_ceil(8)
    }

    pub fn element_len(&self) -> usize {
        self.0.p_bits.div_ceil(8)
    }

    /// Generator `g` of the subgroup.
    pub fn g(&self) -> GroupElement {
        self.0.g
    }

    /// Independent generator `G`, derived by hashing the public parameters.
    pub fn big_g(&self) -> GroupElement {
        self.0.h
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement([1, 0, 0, 0])
    }

    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        match &self.0.backend {
            Backend::Word(w) => {
                let m = w.mm(a.0[0], b.0[0]);
                GroupElement([w.mm(m, w.r2), 0, 0, 0])
            }
            Backend::Wide(w) => GroupElement((w.res(&a.0) * w.res(&b.0)).retrieve().to_words()),
        }
    }

    pub fn exp(&self, base: &GroupElement, e: &Scalar) -> GroupElement {
        let nibbles = self.0.q_bits.div_ceil(4);
        match &self.0.backend {
            Backend::Word(w) => {
                let r = window_pow(w.one, w.to_mont(base.0[0]), &e.0, nibbles, |a, b| w.mm(a, b));
                GroupElement([w.from_mont(r), 0, 0, 0])
            }
            Backend::Wide(w) => {
                let one = DynResidue::one(w.pp);
                let r = window_pow(one, w.res(&base.0), &e.0, nibbles, |a, b| a * b);
                GroupElement(r.retrieve().to_words())
            }
        }
    }

    /// `base^e` for a small public exponent.
    pub fn exp_small(&self, base: &GroupElement, e: u64) -> GroupElement {
        if e == 0 {
            return self.identity();
        }
        let top = 63 - e.leading_zeros();
        match &self.0.backend {
            Backend::Word(w) => {
                let b = w.to_mont(base.0[0]);
                let mut acc = b;
                for bit in (0..top).rev() {
                    acc = w.mm(acc, acc);
                    if (e >> bit) & 1 == 1 {
                        acc = w.mm(acc, b);
                    }
                }
                GroupElement([w.from_mont(acc), 0, 0, 0])
            }
            Backend::Wide(w) => {
                let b = w.res(&base.0);
                let mut acc = b;
                for bit in (0..top).rev() {
                    acc = acc.square();
                    if (e >> bit) & 1 == 1 {
                        acc = acc * b;
                    }
                }
                GroupElement(acc.retrieve().to_words())
            }
        }
    }

    /// `b1^e1 * b2^e2` by interleaved exponentiation.
    pub fn exp2(&self, b1: &GroupElement, e1: &Scalar, b2: &GroupElement, e2: &Scalar) -> GroupElement {
        let bits = self.0.q_bits;
        match &self.0.backend {
            Backend::Word(w) => {
                let r = window_pow2(
                    w.one,
                    w.to_mont(b1.0[0]),
                    &e1.0,
                    w.to_mont(b2.0[0]),
                    &e2.0,
                    bits,
                    |a, b| w.mm(a, b),
                );
                GroupElement([w.from_mont(r), 0, 0, 0])
            }
            Backend::Wide(w) => {
                let one = DynResidue::one(w.pp);
                let r = window_pow2(one, w.res(&b1.0), &e1.0, w.res(&b2.0), &e2.0, bits, |a, b| a * b);
                GroupElement(r.retrieve().to_words())
            }
        }
    }

    /// `g^e`, using a precomputed table.
    pub fn exp_g(&self, e: &Scalar) -> GroupElement {
        table_pow(&self.0, &self.0.g_table, e)
    }

    /// `G^e`, using a precomputed table.
    pub fn exp_big_g(&self, e: &Scalar) -> GroupElement {
        table_pow(&self.0, &self.0.h_table, e)
    }

    /// Precomputes a fixed-base table for a long-lived base such as a public key.
    pub fn register_base(&self, base: &GroupElement) {
        if *base == self.0.g || *base == self.0.h {
            return;
        }
        let mut reg = self.0.registered.write().expect("table registry poisoned");
        if !reg.contains_key(base) {
            let table = build_table(&self.0, base);
            reg.insert(*base, Arc::new(table));
        }
    }

    /// `base^e`, using a precomputed table when one exists for `base`.
    pub fn exp_fast(&self, base: &GroupElement, e: &Scalar) -> GroupElement {
        if *base == self.0.g {
            return self.exp_g(e);
        }
        if *base == self.0.h {
            return self.exp_big_g(e);
        }
        let table = self.0.registered.read().expect("table registry poisoned").get(base).cloned();
        match table {
            Some(t) => table_pow(&self.0, &t, e),
            None => self.exp(base, e),
        }
    }

    pub fn has_table(&self, base: &GroupElement) -> bool {
        *base == self.0.g
            || *base == self.0.h
            || self.0.registered.read().expect("table registry poisoned").contains_key(base)
    }

    pub fn is_member(&self, x: &GroupElement) -> bool {
        let in_range = match &self.0.backend {
            Backend::Word(w) => x.0[1..] == [0; 3] && x.0[0] != 0 && x.0[0] < w.p,
            Backend::Wide(w) => {
                let v = U256::from_words(x.0);
                v != U256::ZERO && v < w.p
            }
        };
        in_range && self.exp(x, &self.order_scalar_unchecked()) == self.identity()
    }

    pub fn scalar_from_u64(&self, v: u64) -> Scalar {
        match &self.0.backend {
            Backend::Word(w) => Scalar([v % w.q, 0, 0, 0]),
            Backend::Wide(_) => Scalar([v, 0, 0, 0]),
        }
    }

    pub fn add(&self, a: &Scalar, b: &Scalar) -> Scalar {
        match &self.0.backend {
            Backend::Word(w) => {
                let s = a.0[0] + b.0[0];
                Scalar([if s >= w.q { s - w.q } else { s }, 0, 0, 0])
            }
            Backend::Wide(w) => {
                Scalar(U256::from_words(a.0).add_mod(&U256::from_words(b.0), &w.q).to_words())
            }
        }
    }

    pub fn sub(&self, a: &Scalar, b: &Scalar) -> Scalar {
        match &self.0.backend {
            Backend::Word(w) => {
                let (x, y) = (a.0[0], b.0[0]);
                Scalar([if x >= y { x - y } else { x + w.q - y }, 0, 0, 0])
            }
            Backend::Wide(w) => {
                Scalar(U256::from_words(a.0).sub_mod(&U256::from_words(b.0), &w.q).to_words())
            }
        }
    }

    pub fn neg(&self, a: &Scalar) -> Scalar {
        self.sub(&Scalar::default(), a)
    }

    pub fn smul(&self, a: &Scalar, b: &Scalar) -> Scalar {
        match &self.0.backend {
            Backend::Word(w) => Scalar([w.smul(a.0[0], b.0[0]), 0, 0, 0]),
            Backend::Wide(w) => {
                let x = DynResidue::new(&U256::from_words(a.0), w.qp);
                let y = DynResidue::new(&U256::from_words(b.0), w.qp);
                Scalar((x * y).retrieve().to_words())
            }
        }
    }

    /// Multiplicative inverse modulo `q`; `None` for zero.
    pub fn inv(&self, a: &Scalar) -> Option<Scalar> {
        if a.is_zero() {
            return None;
        }
        Some(match &self.0.backend {
            Backend::Word(w) => Scalar([w.sinv(a.0[0]), 0, 0, 0]),
            Backend::Wide(w) => {
                let (inv, _) = DynResidue::new(&U256::from_words(a.0), w.qp).invert();
                Scalar(inv.retrieve().to_words())
            }
        })
    }

    fn reduce_wide(&self, bytes: &[u8; 64], modulus_p: bool) -> Limbs {
        let m = match &self.0.backend {
            Backend::Word(w) => {
                let m = if modulus_p { w.p } else { w.q } as u128;
                let mut acc = 0u128;
                for chunk in bytes.chunks_exact(8) {
                    let word = u64::from_be_bytes(chunk.try_into().expect("8 bytes"));
                    acc = ((acc << 64) | word as u128) % m;
                }
                return [acc as u64, 0, 0, 0];
            }
            Backend::Wide(w) => {
                if modulus_p {
                    w.p
                } else {
                    w.q
                }
            }
        };
        let wide = U512::from_be_bytes(*bytes);
        let nz = NonZero::new(m.resize::<8>()).expect("modulus is nonzero");
        wide.rem(&nz).resize::<4>().to_words()
    }

    /// Domain-separated hash onto `Z_q`.
    pub fn hash_to_scalar(&self, tag: &str, data: &[u8]) -> Scalar {
        let d = tagged_sha512(tag, data, None);
        Scalar(self.reduce_wide(&d, false))
    }

    /// Domain-separated hash onto the subgroup: reduce mod `p`, then square.
    pub fn hash_to_group(&self, tag: &str, data: &[u8]) -> GroupElement {
        for ctr in 0u32.. {
            let d = tagged_sha512(tag, data, Some(ctr));
            let x = GroupElement(self.reduce_wide(&d, true));
            let e = self.mul(&x, &x);
            if e.0 != [0; 4] && e != self.identity() {
                return e;
            }
        }
        unreachable!("counter space exhausted")
    }

    /// Uniform nonzero scalar.
    pub fn random_scalar<R: RngCore + ?Sized>(&self, rng: &mut R) -> Scalar {
        let q = self.order_scalar_unchecked();
        let top_bits = self.0.q_bits % 64;
        let words = self.0.q_bits.div_ceil(64);
        loop {
            let mut l = [0u64; 4];
            for w in l.iter_mut().take(words) {
                *w = rng.next_u64();
            }
            if top_bits != 0 {
                l[words - 1] &= (1u64 << top_bits) - 1;
            }
            let s = Scalar(l);
            if !s.is_zero() && s < q {
                return s;
            }
        }
    }

    /// Lagrange coefficient at zero for index `i` within `indices`.
    pub fn lagrange_coeff(&self, indices: &[u64], i: u64) -> Result<Scalar, GroupError> {
        let mut seen = std::collections::BTreeSet::new();
        if indices.is_empty() || !indices.iter().all(|&j| j != 0 && seen.insert(j)) || !seen.contains(&i) {
            return Err(GroupError::BadIndexSet);
        }
        let si = self.scalar_from_u64(i);
        let mut num = self.scalar_from_u64(1);
        let mut den = self.scalar_from_u64(1);
        for &j in indices {
            if j == i {
                continue;
            }
            let sj = self.scalar_from_u64(j);
            num = self.smul(&num, &sj);
            den = self.smul(&den, &self.sub(&sj, &si));
        }
        let den_inv = self.inv(&den).ok_or(GroupError::BadIndexSet)?;
        Ok(self.smul(&num, &den_inv))
    }

    pub fn encode_scalar(&self, s: &Scalar) -> Vec<u8> {
        let full = U256::from_words(s.0).to_be_bytes();
        full[32 - self.scalar_len()..].to_vec()
    }

    pub fn decode_scalar(&self, bytes: &[u8]) -> Result<Scalar, GroupError> {
        let v = read_fixed(bytes, self.scalar_len())?;
        let s = Scalar(v);
        if s >= self.order_scalar_unchecked() {
            return Err(GroupError::NotReduced("q"));
        }
        Ok(s)
    }

    pub fn encode_element(&self, e: &GroupElement) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.element_len());
        self.append_element(e, &mut out);
        out
    }

    /// Appends the fixed-width big-endian encoding of `e` to `out`.
    pub fn append_element(&self, e: &GroupElement, out: &mut Vec<u8>) {
        let len = self.element_len();
        let mut full = [0u8; 32];
        for (i, limb) in e.0.iter().enumerate() {
            full[24 - 8 * i..32 - 8 * i].copy_from_slice(&limb.to_be_bytes());
        }
        out.extend_from_slice(&full[32 - len..]);
    }

    /// Decodes an element, rejecting anything outside the subgroup.
    pub fn decode_element(&self, bytes: &[u8]) -> Result<GroupElement, GroupError> {
        let e = GroupElement(read_fixed(bytes, self.element_len())?);
        if e >= self.modulus_element_unchecked() {
            return Err(GroupError::NotReduced("p"));
        }
        if !self.is_member(&e) {
            return Err(GroupError::NotInSubgroup);
        }
        Ok(e)
    }
}

fn read_fixed(bytes: &[u8], len: usize) -> Result<Limbs, GroupError> {
    if bytes.len() != len {
        return Err(GroupError::BadLength { expected: len, found: bytes.len() });
    }
    let mut buf = [0u8; 32];
    buf[32 - len..].copy_from_slice(bytes);
    Ok(U256::from_be_bytes(buf).to_words())
}

fn tagged_sha512(tag: &str, data: &[u8], ctr: Option<u32>) -> [u8; 64] {
    let mut h = Sha512::new();
    h.update((tag.len() as u32).to_be_bytes());
    h.update(tag.as_bytes());
    h.update(data);
    if let Some(c) = ctr {
        h.update(c.to_be_bytes());
    }
    h.finalize().into()
}

fn build_table(inner: &Inner, base: &GroupElement) -> Table {
    let nibbles = inner.q_bits.div_ceil(4);
    match &inner.backend {
        Backend::Word(w) => {
            let mut rows = Vec::with_capacity(nibbles);
            let mut b = w.to_mont(base.0[0]);
            for _ in 0..nibbles {
                let mut row = [w.one; 16];
                for d in 1..16 {
                    row[d] = w.mm(row[d - 1], b);
                }
                b = w.mm(row[15], b);
                rows.push(row);
            }
            Table::Word(rows)
        }
        Backend::Wide(w) => {
            let mut rows = Vec::with_capacity(nibbles);
            let mut b = w.res(&base.0);
            for _ in 0..nibbles {
                let mut row = vec![DynResidue::one(w.pp); 16];
                for d in 1..16 {
                    row[d] = row[d - 1] * b;
                }
                b = row[15] * b;
                rows.push(row);
            }
            Table::Wide(rows)
        }
    }
}

fn table_pow(inner: &Inner, table: &Table, e: &Scalar) -> GroupElement {
    match (&inner.backend, table) {
        (Backend::Word(w), Table::Word(rows)) => {
            let mut acc = w.one;
            for (i, row) in rows.iter().enumerate() {
                let d = nibble(&e.0, i);
                if d != 0 {
                    acc = w.mm(acc, row[d]);
                }
            }
            GroupElement([w.from_mont(acc), 0, 0, 0])
        }
        (Backend::Wide(w), Table::Wide(rows)) => {
            let mut acc = DynResidue::one(w.pp);
            for (i, row) in rows.iter().enumerate() {
                let d = nibble(&e.0, i);
                if d != 0 {
                    acc = acc * row[d];
                }
            }
            GroupElement(acc.retrieve().to_words())
        }
        _ => unreachable!("table built for a different backend"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn word_and_wide_agree_on_small_modulus() {
        // A 64-bit modulus run through both backends must give identical results.
        let w = Word::new(TEST64_P);
        let wide = Wide::new(U256::from_u64(TEST64_P));
        let a = 0x1234_5678_9abc_def0u64 % TEST64_P;
        let b = 0x0fed_cba9_8765_4321u64;
        let m = w.from_mont(w.mm(w.to_mont(a), w.to_mont(b)));
        let m2 = (wide.res(&[a, 0, 0, 0]) * wide.res(&[b, 0, 0, 0])).retrieve();
        assert_eq!(U256::from_u64(m), m2);
        assert_eq!(m as u128, (a as u128 * b as u128) % TEST64_P as u128);
    }

    #[test]
    fn generators_are_members() {
        for level in [SecurityLevel::Test64, SecurityLevel::Std256] {
            let g = Group::new(level);
            assert!(g.is_member(&g.g()));
            assert!(g.is_member(&g.big_g()));
            assert_ne!(g.g(), g.big_g());
        }
    }

    #[test]
    fn table_exp_matches_window_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for level in [SecurityLevel::Test64, SecurityLevel::Std256] {
            let g = Group::new(level);
            for _ in 0..20 {
                let e = g.random_scalar(&mut rng);
                assert_eq!(g.exp_g(&e), g.exp(&g.g(), &e));
                assert_eq!(g.exp_big_g(&e), g.exp(&g.big_g(), &e));
                let f = g.random_scalar(&mut rng);
                let both = g.mul(&g.exp(&g.g(), &e), &g.exp(&g.big_g(), &f));
                assert_eq!(g.exp2(&g.g(), &e, &g.big_g(), &f), both);
            }
        }
    }

    #[test]
    fn scalar_inverse_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for level in [SecurityLevel::Test64, SecurityLevel::Std256] {
            let g = Group::new(level);
            let one = g.scalar_from_u64(1);
            for _ in 0..20 {
                let a = g.random_scalar(&mut rng);
                assert_eq!(g.smul(&a, &g.inv(&a).unwrap()), one);
                assert_eq!(g.add(&a, &g.neg(&a)), Scalar::default());
            }
            assert!(g.inv(&Scalar::default()).is_none());
        }
    }

    #[test]
    fn decode_rejects_non_residue() {
        let g = Group::new(SecurityLevel::Test64);
        // -1 is a non-residue modulo a safe prime with q odd.
        let minus_one = GroupElement([TEST64_P - 1, 0, 0, 0]);
        let bytes = g.encode_element(&minus_one);
        assert_eq!(g.decode_element(&bytes), Err(GroupError::NotInSubgroup));
        assert_eq!(g.decode_element(&[0u8; 8]), Err(GroupError::NotInSubgroup));
        assert!(matches!(g.decode_element(&[0u8; 7]), Err(GroupError::BadLength { .. })));
        assert_eq!(g.decode_element(&TEST64_P.to_be_bytes()), Err(GroupError::NotReduced("p")));
    }

    #[test]
    fn lagrange_rejects_bad_sets() {
        let g = Group::new(SecurityLevel::Test64);
        assert_eq!(g.lagrange_coeff(&[], 1), Err(GroupError::BadIndexSet));
        assert_eq!(g.lagrange_coeff(&[0, 1], 1), Err(GroupError::BadIndexSet));
        assert_eq!(g.lagrange_coeff(&[1, 1, 2], 1), Err(GroupError::BadIndexSet));
        assert_eq!(g.lagrange_coeff(&[2, 3], 1), Err(GroupError::BadIndexSet));
    }
}
