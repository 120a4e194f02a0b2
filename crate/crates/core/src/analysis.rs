//! Closed-form churn analytics and a Monte-Carlo oracle for them.
//!
//! Round model. A round has four one-second phases. At the start of a round
//! `X1` nodes are eligible participants and every other node is asleep. At
//! the end of each second every node flips its state with probability `p`.
//! A participant stays active in phase `j` while it has not flipped in the
//! first `j` seconds; once asleep it drops out of the round. A node outside
//! the surviving participants becomes eligible for the next round when it
//! wakes at the end of second 1 or 2 and stays awake to the end of the round.
//! Eligible nodes for round `i+1` are the surviving participants plus those
//! newcomers.

use serde::Serialize;
use statrs::distribution::{Binomial, ContinuousCDF, Discrete, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("expected actives {ex1} is outside [0, {n}]")]
    OutOfRange { ex1: f64, n: usize },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChurnParams {
    pub n: usize,
    /// Per-second flip probability.
    pub p: f64,
}

impl ChurnParams {
    pub fn new(n: usize, p: f64) -> Result<Self, AnalysisError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(AnalysisError::InvalidProbability(p));
        }
        Ok(ChurnParams { n, p })
    }

    fn stay(&self) -> f64 {
        1.0 - self.p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhaseExpectation {
    /// `E[X_1]..E[X_4]`.
    pub ex_phase: [f64; 4],
    /// `E[S_2]`, `E[S_3]`: participants known asleep by phases 2 and 3.
    pub sleepy: [f64; 2],
    /// `E[Y]`: newcomers eligible for the next round.
    pub newly_active: f64,
}

/// Per-phase expectations given `ex1` eligible participants.
pub fn expected_actives(params: ChurnParams, ex1: f64) -> Result<PhaseExpectation, AnalysisError> {
    let n = params.n as f64;
    if !(0.0..=n).contains(&ex1) {
        return Err(AnalysisError::OutOfRange { ex1, n: params.n });
    }
    let (p, q) = (params.p, params.stay());
    Ok(PhaseExpectation {
        ex_phase: [ex1, ex1 * q.powi(2), ex1 * q.powi(3), ex1 * q.powi(4)],
        sleepy: [ex1 * p, ex1 * (1.0 - q.powi(2))],
        newly_active: newly_active(params, ex1),
    })
}

/// Exact `E[Y]`: second-1 wakers from the asleep non-participants, plus
/// second-2 wakers from everyone asleep after second 1.
pub fn newly_active(params: ChurnParams, ex1: f64) -> f64 {
    let (n, p, q) = (params.n as f64, params.p, params.stay());
    let asleep_after_first = (n - ex1) * q + ex1 * p;
    (n - ex1) * p * q.powi(3) + asleep_after_first * p * q.powi(2)
}

/// The published two-term `E[Y]`. Its second population also contains the
/// nodes that already woke in second 1, so it exceeds [`newly_active`] by
/// `(n - ex1) p^2 (1-p)^2`.
pub fn newly_active_paper(params: ChurnParams, ex1: f64) -> f64 {
    let (n, p, q) = (params.n as f64, params.p, params.stay());
    (n - ex1) * p * q.powi(3) + (n - ex1 * q) * p * q.powi(2)
}

/// Steady-state `E[X_1]`, the fixed point of `x = x (1-p)^4 + E[Y](x)`.
pub fn steady_state_ex1(params: ChurnParams) -> Result<f64, AnalysisError> {
    fixed_point(params, newly_active)
}

/// Steady state under the published `E[Y]`.
pub fn steady_state_ex1_paper(params: ChurnParams) -> Result<f64, AnalysisError> {
    fixed_point(params, newly_active_paper)
}

/// One step of the round recursion.
pub fn next_ex1(params: ChurnParams, ex1: f64) -> f64 {
    ex1 * params.stay().powi(4) + newly_active(params, ex1)
}

fn fixed_point(params: ChurnParams, y: fn(ChurnParams, f64) -> f64) -> Result<f64, AnalysisError> {
    if params.p == 0.0 {
        return Err(AnalysisError::Degenerate("p = 0 leaves the steady state undefined"));
    }
    // The round map is affine, so iterate it by repeated squaring:
    // after k steps `x` holds the 2^k-th iterate.
    let step = |x: f64| x * params.stay().powi(4) + y(params, x);
    let (mut b, mut a) = (step(0.0), step(1.0) - step(0.0));
    let mut x = params.n as f64;
    for _ in 0..200 {
        let next = a * x + b;
        let done = (next - x).abs() <= 1e-12 * next.abs().max(f64::MIN_POSITIVE);
        x = next;
        if done {
            break;
        }
        b += a * b;
        a *= a;
    }
    Ok(x)
}

/// Largest `p` with `(1-p)^3 >= 1/2`.
pub fn max_tolerable_p() -> f64 {
    1.0 - 2f64.powf(-1.0 / 3.0)
}

/// Fraction of a round's participants expected to go offline at some point.
pub fn round_offline_tolerance(p: f64) -> f64 {
    1.0 - (1.0 - p).powi(4)
}

/// Whether `E[X_4] >= (E[X_1] - E[S_2]) / 2` holds in expectation, with the
/// phase-4 sleepy count `E[X_1] (1 - (1-p)^2)`.
pub fn confirm_inequality_holds(p: f64) -> bool {
    let q = 1.0 - p;
    q.powi(4) >= (1.0 - (1.0 - q.powi(2))) / 2.0
}

/// Exact `(P[vote succeeds], P[confirm succeeds | vote succeeds])` for a
/// round that starts with all `n` nodes participating.
pub fn success_probabilities(params: ChurnParams) -> (f64, f64) {
    success_probabilities_at(params, params.n)
}

/// Exact success probabilities with `x1` participants.
///
/// Vote: `2 X_3 >= X_1`. Confirm: `2 X_4 >= X_1 - S_2`. Conditioning on the
/// participants asleep after second 1 (`S_2 = k`), the survivors to phase 3
/// are `Bin(x1 - k, (1-p)^2)` and those to phase 4 are `Bin(X_3, 1-p)`.
pub fn success_probabilities_at(params: ChurnParams, x1: usize) -> (f64, f64) {
    let (p, q) = (params.p, params.stay());
    let x = x1 as u64;
    let pmf = |n: u64, prob: f64, k: u64| -> f64 {
        match prob {
            _ if prob <= 0.0 => f64::from(k == 0),
            _ if prob >= 1.0 => f64::from(k == n),
            _ => Binomial::new(prob, n).map(|b| b.pmf(k)).unwrap_or(0.0),
        }
    };
    let (mut vote, mut both) = (0.0, 0.0);
    for k in 0..=x {
        let pk = pmf(x, p, k);
        if pk == 0.0 {
            continue;
        }
        for s in 0..=(x - k) {
            if 2 * s < x {
                continue;
            }
            let ps = pk * pmf(x - k, q * q, s);
            if ps == 0.0 {
                continue;
            }
            vote += ps;
            let need = (x - k).div_ceil(2);
            both += ps * (need..=s).map(|f| pmf(s, q, f)).sum::<f64>();
        }
    }
    let confirm = if vote > 0.0 { (both / vote).min(1.0) } else { 0.0 };
    (vote.min(1.0), confirm)
}

/// Normal approximations of the two success probabilities. The confirm
/// term ignores the conditioning on the vote.
pub fn success_probabilities_normal(params: ChurnParams) -> (f64, f64) {
    let x = params.n as f64;
    let q = params.stay();
    let tail = |mean: f64, var: f64, threshold: f64| -> f64 {
        if var <= 0.0 {
            return f64::from(mean >= threshold);
        }
        let z = Normal::new(mean, var.sqrt()).expect("finite parameters");
        1.0 - z.cdf(threshold - 0.5)
    };
    let q3 = q.powi(3);
    let vote = tail(x * q3, x * q3 * (1.0 - q3), (x / 2.0).ceil());
    // Per participant d = +1 if it survives phase 4, 0 if asleep after
    // second 1, -1 otherwise; confirm needs the sum to be non-negative.
    let (up, zero) = (q.powi(4), params.p);
    let down = 1.0 - up - zero;
    let mean = up - down;
    let var = up + down - mean * mean;
    let confirm = tail(x * mean, x * var, 0.0);
    (vote, confirm)
}

/// One line of the churn table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChurnRow {
    pub p: f64,
    pub n: usize,
    pub ex1_steady: f64,
    pub ex_phase2: f64,
    pub ex_phase3: f64,
    pub ex_phase4: f64,
    pub p_vote_success: f64,
    pub p_confirm_success: f64,
    pub tolerance: f64,
}

pub const CHURN_COLUMNS: [&str; 9] = [
    "p",
    "n",
    "ex1_steady",
    "ex_phase2",
    "ex_phase3",
    "ex_phase4",
    "p_vote_success",
    "p_confirm_success",
    "tolerance",
];

impl crate::metrics::CsvRow for ChurnRow {
    const COLUMNS: &'static [&'static str] = &CHURN_COLUMNS;
}

pub fn churn_row(params: ChurnParams) -> Result<ChurnRow, AnalysisError> {
    let ex1 = steady_state_ex1(params)?;
    let e = expected_actives(params, ex1)?;
    let (vote, confirm) = success_probabilities(params);
    Ok(ChurnRow {
        p: params.p,
        n: params.n,
        ex1_steady: ex1,
        ex_phase2: e.ex_phase[1],
        ex_phase3: e.ex_phase[2],
        ex_phase4: e.ex_phase[3],
        p_vote_success: vote,
        p_confirm_success: confirm,
        tolerance: round_offline_tolerance(params.p),
    })
}

/// Rows for every `(p, n)` pair, `p` varying fastest.
pub fn churn_table(ps: &[f64], ns: &[usize]) -> Result<Vec<ChurnRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(ps.len() * ns.len());
    for &n in ns {
        for &p in ps {
            rows.push(churn_row(ChurnParams::new(n, p)?)?);
        }
    }
    Ok(rows)
}

/// Node-level simulation of the round model.
pub mod monte_carlo {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde::Serialize;

    use super::ChurnParams;

    const BATCH: usize = 1000;

    #[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
    pub struct Estimate {
        pub mean: f64,
        pub std_err: f64,
    }

    impl Estimate {
        /// Distance from `value` in standard errors, or infinity when the
        /// sample never varied yet disagrees.
        pub fn sigmas_from(&self, value: f64) -> f64 {
            let d = (self.mean - value).abs();
            if self.std_err > 0.0 {
                d / self.std_err
            } else if d <= 1e-9 {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }

    #[derive(Default)]
    struct Moments {
        n: f64,
        sum: f64,
        sq: f64,
    }

    impl Moments {
        fn push(&mut self, v: f64) {
            self.n += 1.0;
            self.sum += v;
            self.sq += v * v;
        }

        fn estimate(&self) -> Estimate {
            if self.n == 0.0 {
                return Estimate::default();
            }
            let mean = self.sum / self.n;
            let var = if self.n > 1.0 { ((self.sq - self.n * mean * mean) / (self.n - 1.0)).max(0.0) } else { 0.0 };
            Estimate { mean, std_err: (var / self.n).sqrt() }
        }
    }

    /// Counts observed in one simulated round.
    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub struct RoundSample {
        pub x: [usize; 4],
        pub s2: usize,
        pub s3: usize,
        pub y: usize,
        pub vote_ok: bool,
        pub confirm_ok: bool,
    }

    /// Simulates one round from `eligible`; returns the sample and the next
    /// round's eligible set.
    pub fn simulate_round<R: Rng>(p: f64, eligible: &[bool], rng: &mut R) -> (RoundSample, Vec<bool>) {
        let n = eligible.len();
        let mut awake = eligible.to_vec();
        let mut active = eligible.to_vec();
        let mut asleep_before = vec![false; n];
        let mut woke_at = vec![0u8; n];
        let x1 = eligible.iter().filter(|&&e| e).count();
        let mut x = [x1, 0, 0, 0];
        let mut dropped = [0usize; 4];
        for second in 1..=4u8 {
            for i in 0..n {
                asleep_before[i] = !awake[i];
                if rng.gen_bool(p) {
                    awake[i] = !awake[i];
                }
                if active[i] && !awake[i] {
                    active[i] = false;
                    dropped[second as usize - 1] += 1;
                }
                if second <= 2 && asleep_before[i] && awake[i] && woke_at[i] == 0 {
                    woke_at[i] = second;
                }
                if woke_at[i] != 0 && !awake[i] {
                    woke_at[i] = u8::MAX;
                }
            }
            if second >= 2 {
                x[second as usize - 1] = active.iter().filter(|&&a| a).count();
            }
        }
        let survive4 = active.iter().filter(|&&a| a).count();
        let newcomers: Vec<bool> = (0..n).map(|i| !active[i] && (woke_at[i] == 1 || woke_at[i] == 2)).collect();
        let y = newcomers.iter().filter(|&&c| c).count();
        let s2 = dropped[0];
        let s3 = dropped[0] + dropped[1];
        let vote_ok = 2 * x[2] >= x1;
        let confirm_ok = vote_ok && 2 * survive4 + s2 >= x1;
        let next = (0..n).map(|i| active[i] || newcomers[i]).collect();
        (RoundSample { x: [x[0], x[1], x[2], survive4], s2, s3, y, vote_ok, confirm_ok }, next)
    }

    fn batch_rng(seed: u64, batch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(batch as u64);
        rng
    }

    fn eligible_prefix(n: usize, x1: usize) -> Vec<bool> {
        (0..n).map(|i| i < x1).collect()
    }

    /// Per-phase means over `trials` independent rounds starting from `x1`
    /// participants.
    #[derive(Clone, Copy, Debug, PartialEq, Serialize)]
    pub struct RoundEstimates {
        pub ex_phase: [Estimate; 4],
        pub sleepy: [Estimate; 2],
        pub newly_active: Estimate,
        pub vote_success: Estimate,
        /// Confirm success among the rounds whose vote succeeded.
        pub confirm_success: Estimate,
    }

    pub fn round_estimates(params: ChurnParams, x1: usize, trials: usize, seed: u64) -> RoundEstimates {
        let start = eligible_prefix(params.n, x1.min(params.n));
        let mut phases: [Moments; 4] = Default::default();
        let mut sleepy: [Moments; 2] = Default::default();
        let (mut y, mut vote, mut confirm) = (Moments::default(), Moments::default(), Moments::default());
        for batch in 0..trials.div_ceil(BATCH) {
            let mut rng = batch_rng(seed, batch);
            for _ in 0..BATCH.min(trials - batch * BATCH) {
                let (s, _) = simulate_round(params.p, &start, &mut rng);
                for (m, v) in phases.iter_mut().zip(s.x) {
                    m.push(v as f64);
                }
                sleepy[0].push(s.s2 as f64);
                sleepy[1].push(s.s3 as f64);
                y.push(s.y as f64);
                vote.push(f64::from(s.vote_ok));
                if s.vote_ok {
                    confirm.push(f64::from(s.confirm_ok));
                }
            }
        }
        RoundEstimates {
            ex_phase: phases.map(|m| m.estimate()),
            sleepy: sleepy.map(|m| m.estimate()),
            newly_active: y.estimate(),
            vote_success: vote.estimate(),
            confirm_success: confirm.estimate(),
        }
    }

    /// Long-run mean of the eligible count, chaining rounds from all nodes
    /// eligible. The standard error uses means of consecutive blocks of
    /// rounds to absorb autocorrelation.
    pub fn steady_state_mean(params: ChurnParams, rounds: usize, burn_in: usize, seed: u64) -> Estimate {
        let mut rng = batch_rng(seed, 0);
        let mut eligible = vec![true; params.n];
        for _ in 0..burn_in {
            eligible = simulate_round(params.p, &eligible, &mut rng).1;
        }
        let block = (rounds / 50).max(1);
        let (mut blocks, mut acc, mut filled) = (Moments::default(), 0.0, 0);
        for _ in 0..rounds {
            acc += eligible.iter().filter(|&&e| e).count() as f64;
            filled += 1;
            if filled == block {
                blocks.push(acc / block as f64);
                acc = 0.0;
                filled = 0;
            }
            eligible = simulate_round(params.p, &eligible, &mut rng).1;
        }
        blocks.estimate()
    }
}
