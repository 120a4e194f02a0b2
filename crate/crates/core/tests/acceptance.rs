//! Acceptance criteria. Each test writes one PASS/FAIL line to stdout,
//! bypassing the test harness capture, and tests run one at a time so
//! wall-clock measurements are not shared with other work.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use pvss_bft::analysis::monte_carlo::round_estimates;
use pvss_bft::analysis::*;
use pvss_bft::group::{Group, GroupElement, SecurityLevel};
use pvss_bft::metrics::{summarize, Outcome, Variant};
use pvss_bft::protocol::TxId;
use pvss_bft::pvss::bench::bench_pvss;
use pvss_bft::pvss::*;
use pvss_bft::simnet::{run, ChurnModel, ChurnSchedule, RunResult, RunSpec, Stage, Strategy};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs `check` under the global lock and prints its verdict.
fn criterion(name: &str, check: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let verdict = check();
    let secs = start.elapsed().as_secs_f64();
    let line = match &verdict {
        Ok(detail) => format!("PASS {name}: {detail} [{secs:.1}s]"),
        Err(detail) => format!("FAIL {name}: {detail} [{secs:.1}s]"),
    };
    writeln!(std::io::stdout().lock(), "{line}").unwrap();
    if let Err(detail) = verdict {
        panic!("{name}: {detail}");
    }
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn keys(group: &Group, n: usize, rng: &mut ChaCha8Rng) -> (Vec<KeyPair>, Vec<GroupElement>) {
    let keys: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(group, rng)).collect();
    let pks = keys.iter().map(|k| k.public).collect();
    (keys, pks)
}

fn decrypt_all(group: &Group, keys: &[KeyPair], deal: &PvssDeal, rng: &mut ChaCha8Rng) -> Vec<DecryptedShare> {
    keys.iter().enumerate().map(|(i, k)| decrypt_share(group, k, i as u32 + 1, &deal.enc_shares[i], rng)).collect()
}

fn share_verifies(group: &Group, pk: &GroupElement, deal: &PvssDeal, i: usize) -> bool {
    verify_share(group, pk, &deal.commitments, i as u32 + 1, &deal.enc_shares[i], &deal.proofs[i])
}

#[test]
fn pvss_roundtrip() {
    criterion("pvss roundtrip", || {
        let group = Group::new(SecurityLevel::Test64);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let start = Instant::now();
        let mut checked = 0;
        for n in [4, 8, 16, 32, 64] {
            let t = n / 2 + 1;
            let (keys, pks) = keys(&group, n, &mut rng);
            for _ in 0..50 {
                let s = group.random_scalar(&mut rng);
                let deal = split(&group, &s, n, t, &pks, &mut rng).map_err(|e| e.to_string())?;
                let shares = decrypt_all(&group, &keys, &deal, &mut rng);
                let expected = group.exp_big_g(&s);
                for _ in 0..10 {
                    let subset: Vec<DecryptedShare> = sample(&mut rng, n, t).into_iter().map(|i| shares[i]).collect();
                    let got = reconstruct(&group, &subset, t).map_err(|e| e.to_string())?;
                    require(got == expected, || format!("n={n}: subset reconstructed a different element"))?;
                    checked += 1;
                }
            }
        }
        let elapsed = start.elapsed();
        require(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}, limit 60s"))?;
        Ok(format!("{checked} subsets reconstructed G^s exactly in {:.1}s (limit 60s)", elapsed.as_secs_f64()))
    });
}

#[test]
fn forgery_rejection() {
    criterion("forgery rejection", || {
        let group = Group::new(SecurityLevel::Test64);
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let (n, t) = (10, 6);
        let (_, pks) = keys(&group, n, &mut rng);
        let mut passed = [0usize; 3];
        for trial in 0..100 {
            let s = group.random_scalar(&mut rng);
            let deal = split(&group, &s, n, t, &pks, &mut rng).map_err(|e| e.to_string())?;
            let i = rng.gen_range(0..n);

            let mut bad = deal.clone();
            let noise = group.exp_g(&group.random_scalar(&mut rng));
            bad.enc_shares[i] = group.mul(&bad.enc_shares[i], &noise);
            passed[0] += usize::from(share_verifies(&group, &pks[i], &bad, i));

            let mut bad = deal.clone();
            let j = rng.gen_range(0..t);
            bad.commitments[j] = group.mul(&bad.commitments[j], &noise);
            passed[1] += (0..n).filter(|&k| share_verifies(&group, &pks[k], &bad, k)).count();

            // The dealer encrypts a value off the committed polynomial and
            // proves a true statement about the wrong commitment.
            let mut bad = deal.clone();
            let fake = group.random_scalar(&mut rng);
            let y = group.exp(&pks[i], &fake);
            let x = if trial % 2 == 0 { group.exp_g(&fake) } else { share_commitment(&group, &deal.commitments, i as u32 + 1) };
            let w = group.random_scalar(&mut rng);
            bad.enc_shares[i] = y;
            bad.proofs[i] = DleqProof::prove(&group, &group.g(), &x, &pks[i], &y, &fake, &w);
            passed[2] += usize::from(share_verifies(&group, &pks[i], &bad, i));
        }
        require(passed == [0, 0, 0], || format!("forgeries accepted: share {}, commitment {}, leader {}", passed[0], passed[1], passed[2]))?;

        let (n, t) = (6, 4);
        let (keys, pks) = keys(&group, n, &mut rng);
        let mut subsets = 0;
        for _ in 0..5 {
            let s = group.random_scalar(&mut rng);
            let deal = split(&group, &s, n, t, &pks, &mut rng).map_err(|e| e.to_string())?;
            let shares = decrypt_all(&group, &keys, &deal, &mut rng);
            for (i, sh) in shares.iter().enumerate() {
                require(share_verifies(&group, &pks[i], &deal, i), || "honest share rejected".into())?;
                require(verify_decryption(&group, &pks[i], &deal.enc_shares[i], sh), || "honest decryption rejected".into())?;
            }
            let mut seen = std::collections::BTreeSet::new();
            for mask in 0u32..1 << n {
                if mask.count_ones() as usize >= t {
                    let subset: Vec<DecryptedShare> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| shares[i]).collect();
                    seen.insert(reconstruct(&group, &subset, t).map_err(|e| e.to_string())?);
                    subsets += 1;
                }
            }
            require(seen.len() == 1, || format!("{} distinct reconstructions from one dealing", seen.len()))?;
        }
        Ok(format!("0 of 100+100+100 forgeries verified; {subsets} subsets at n=6, t=4 gave one element per dealing"))
    });
}

fn grid_spec(variant: Variant, strategy: Strategy, malicious: usize, seed: u64) -> RunSpec {
    let mut s = RunSpec::basic(variant, 40, 200, seed);
    s.strategy = strategy;
    s.malicious = malicious;
    s
}

const GRID_MALICIOUS: [usize; 5] = [0, 5, 10, 15, 19];

#[test]
fn safety_grid() {
    criterion("safety grid", || {
        let start = Instant::now();
        let (mut runs, mut forks, mut forked_views) = (0, 0, 0);
        for strategy in Strategy::ADVERSARIAL {
            for m in GRID_MALICIOUS {
                // Without Byzantine nodes the strategy has no effect, so the
                // m = 0 cells are one run per seed.
                if m == 0 && strategy != Strategy::ADVERSARIAL[0] {
                    continue;
                }
                for seed in 1..=5 {
                    let r = run(&grid_spec(Variant::PvssBft, strategy, m, seed)).map_err(|e| e.to_string())?;
                    forks += r.forks;
                    forked_views += r.views.iter().filter(|v| v.outcome == Outcome::Forked).count();
                    runs += 1;
                }
            }
        }
        let elapsed = start.elapsed();
        require(forks == 0 && forked_views == 0, || format!("{forks} forks over {runs} runs"))?;
        require(elapsed < Duration::from_secs(300), || {
            format!("0 forks over {runs} runs, but runtime {:.0}s exceeds the 300s target", elapsed.as_secs_f64())
        })?;
        Ok(format!("0 forks over {runs} distinct runs (125 grid cells) in {:.0}s (target 300s)", elapsed.as_secs_f64()))
    });
}

#[test]
fn baseline_contrast() {
    criterion("baseline contrast", || {
        let mut means = Vec::new();
        for m in GRID_MALICIOUS {
            let mut total = 0;
            for seed in 1..=5 {
                let r = run(&grid_spec(Variant::BaselineBft, Strategy::EquivocatingLeader, m, seed)).map_err(|e| e.to_string())?;
                require(m < 10 || r.forks > 0, || format!("no fork at m={m} seed {seed}"))?;
                total += r.forks;
            }
            means.push(total as f64 / 5.0);
        }
        require(means.windows(2).all(|w| w[0] <= w[1]), || format!("mean forks not monotone: {means:?}"))?;
        Ok(format!("mean forks over 5 seeds at m=0,5,10,15,19: {means:?}"))
    });
}

fn three_stage(nodes: usize) -> ChurnSchedule {
    ChurnSchedule {
        initial_awake: Some(nodes / 2),
        stages: vec![
            Stage { ticks: Some(360), model: ChurnModel::Sinusoidal { mean: 0.5, amplitude: 0.2, period: 120.0 } },
            Stage { ticks: None, model: ChurnModel::Bernoulli { awake_prob: 0.9 } },
        ],
    }
}

fn mean_tx_latency(r: &RunResult) -> Option<f64> {
    let lat: Vec<u64> = r.txs.iter().filter_map(|t| t.latency_ticks).collect();
    (!lat.is_empty()).then(|| lat.iter().sum::<u64>() as f64 / lat.len() as f64)
}

#[test]
fn latency() {
    criterion("latency", || {
        let mut specs = Vec::new();
        for seed in 1..=3 {
            specs.push(RunSpec::basic(Variant::PvssBft, 40, 100, seed));
            let mut s = RunSpec::basic(Variant::PvssBft, 40, 180, seed);
            s.churn = three_stage(40);
            specs.push(s);
        }
        let mut decided = 0;
        for s in &specs {
            let r = run(s).map_err(|e| e.to_string())?;
            for v in &r.views {
                let grew = r.ticks[4 * v.view as usize + 4].height_max > r.ticks[4 * v.view as usize + 3].height_max;
                match v.outcome {
                    Outcome::Decided => {
                        require(v.latency_ticks == Some(4), || format!("view {} latency {:?}", v.view, v.latency_ticks))?;
                        require(grew, || format!("view {} decided without growth at tick {}", v.view, 4 * v.view + 4))?;
                        decided += 1;
                    }
                    _ => require(v.latency_ticks.is_none(), || format!("undecided view {} has a latency", v.view))?,
                }
            }
            let heights: Vec<u64> = r.ticks.iter().map(|t| t.height_max).collect();
            for (tick, w) in heights.windows(2).enumerate() {
                require(w[1] == w[0] || (tick + 1) % 4 == 0, || format!("height changed at tick {}", tick + 1))?;
            }
        }
        require(decided > 0, || "no view decided".into())?;
        let mut lc = RunSpec::basic(Variant::LongestChain, 40, 270, 1);
        lc.churn = ChurnSchedule::single(ChurnModel::Bernoulli { awake_prob: 0.9 });
        let lc_lat = mean_tx_latency(&run(&lc).map_err(|e| e.to_string())?).ok_or("longest chain confirmed nothing")?;
        let mut pv = lc.clone();
        pv.variant = Variant::PvssBft;
        let pv_lat = mean_tx_latency(&run(&pv).map_err(|e| e.to_string())?).ok_or("PVSS-BFT confirmed nothing")?;
        require(lc_lat >= 150.0, || format!("longest-chain tx latency {lc_lat:.1} < 150"))?;
        require(pv_lat < lc_lat, || format!("PVSS-BFT tx latency {pv_lat:.1} not below {lc_lat:.1}"))?;
        Ok(format!(
            "{decided} decided views all at 4 ticks; at 90% participation tx latency {pv_lat:.1} (PVSS-BFT) vs {lc_lat:.1} (longest chain, bound 150)"
        ))
    });
}

#[test]
fn liveness() {
    criterion("liveness", || {
        let mut honest_views = 0;
        for (strategy, malicious) in [(Strategy::Honest, 0), (Strategy::EquivocatingLeader, 4)] {
            let mut s = RunSpec::basic(Variant::PvssBft, 10, 500, 17);
            s.strategy = strategy;
            s.malicious = malicious;
            let r = run(&s).map_err(|e| e.to_string())?;
            let mut included = std::collections::BTreeSet::<TxId>::new();
            for t in &r.traces {
                if let Some(b) = &t.decided {
                    if t.leader_byzantine {
                        included.extend(b.payload.iter().copied());
                        continue;
                    }
                }
                if t.leader_byzantine || !t.all_awake {
                    continue;
                }
                honest_views += 1;
                require(t.deciders == t.completed, || format!("{strategy} view {}: not every honest node decided", t.view))?;
                let block = t.decided.as_ref().ok_or_else(|| format!("{strategy} view {}: nothing decided", t.view))?;
                let missing = r
                    .txs
                    .iter()
                    .filter(|x| x.submitted + 1 <= 4 * t.view && !included.contains(&x.tx) && !block.payload.contains(&x.tx))
                    .count();
                require(missing == 0, || format!("{strategy} view {}: {missing} transactions left out", t.view))?;
                included.extend(block.payload.iter().copied());
            }
        }
        require(honest_views >= 500, || format!("only {honest_views} honest-leader views"))?;
        Ok(format!("{honest_views} honest-leader churn-free views decided by every honest node with all earlier txs"))
    });
}

const TRIALS: f64 = 1e5;

#[test]
fn churn_analytics() {
    criterion("churn analytics", || {
        let p = max_tolerable_p();
        let exact = 1.0 - 2f64.powf(-1.0 / 3.0);
        require((p - exact).abs() < 1e-9, || format!("max_tolerable_p {p} vs {exact}"))?;

        let mut worst: (f64, String) = (0.0, String::new());
        let mut compared = 0;
        for n in [20, 40, 80] {
            for p in [0.05, 0.1, 0.15, 0.2, 0.3] {
                let c = ChurnParams::new(n, p).map_err(|e| e.to_string())?;
                let x1 = steady_state_ex1(c).map_err(|e| e.to_string())?.round() as usize;
                let e = expected_actives(c, x1 as f64).map_err(|e| e.to_string())?;
                let cell = 1000 * n as u64 + (100.0 * p).round() as u64;
                let mc = round_estimates(c, x1, TRIALS as usize, cell);
                let (vote, confirm) = success_probabilities(c);
                let full = round_estimates(c, n, TRIALS as usize, cell + 500_000);
                let counts = e.ex_phase.iter().zip(&mc.ex_phase).chain(e.sleepy.iter().zip(&mc.sleepy));
                let mut zs: Vec<(f64, f64, f64)> = counts
                    .chain([(&e.newly_active, &mc.newly_active)])
                    .map(|(a, m)| (m.sigmas_from(*a), *a, m.mean))
                    .collect();
                // Success rates use the binomial standard error of the
                // analytic value, which stays positive when every trial agrees.
                for (a, m, trials) in [(vote, full.vote_success, TRIALS), (confirm, full.confirm_success, TRIALS * vote)] {
                    let se = (a * (1.0 - a) / trials).sqrt().max(m.std_err);
                    zs.push(((m.mean - a).abs() / se, a, m.mean));
                }
                for (k, (z, a, m)) in zs.into_iter().enumerate() {
                    compared += 1;
                    if z > worst.0 {
                        worst = (z, format!("n={n} p={p} quantity {k}: {a:.4} vs {m:.4}"));
                    }
                }
            }
        }
        require(worst.0 <= 3.0, || format!("analytic value off by {:.2} sigma ({})", worst.0, worst.1))?;

        let rate = |n: usize, views: u64, p: f64| -> Result<f64, String> {
            let mut s = RunSpec::basic(Variant::PvssBft, n, views, 1);
            s.churn = ChurnSchedule::single(ChurnModel::Flip { flip_prob: p });
            let r = run(&s).map_err(|e| e.to_string())?;
            require(r.forks == 0, || format!("forks at p={p}"))?;
            Ok(summarize(&r.views).decision_rate)
        };
        let low = rate(160, 300, 0.15)?;
        let high = rate(160, 100, 0.30)?;
        require(low > 0.9 && high < 0.1, || format!("decision rate {low:.3} at p=0.15, {high:.3} at p=0.30"))?;

        let tol = round_offline_tolerance(p);
        let exact_tol = 1.0 - 2f64.powf(-4.0 / 3.0);
        require((tol - exact_tol).abs() < 1e-12 && (tol - 0.603).abs() < 5e-4 && (tol - 0.63).abs() > 0.02, || {
            format!("round tolerance {tol}")
        })?;
        Ok(format!(
            "max p {p:.12}; {compared} expectations within {:.2} sigma at 1e5 trials; decision rate {low:.3} at p=0.15 and {high:.3} at p=0.30 (n=160); round tolerance {tol:.4}, not the published 0.63",
            worst.0
        ))
    });
}

#[test]
fn stall_without_violation() {
    criterion("stall without violation", || {
        let mut s = RunSpec::basic(Variant::PvssBft, 40, 250, 1);
        s.churn = ChurnSchedule::single(ChurnModel::Flip { flip_prob: 0.5 });
        let r = run(&s).map_err(|e| e.to_string())?;
        let faults = r.evidence.iter().filter(|e| e.is_fault()).count();
        let decided = r.decided_views();
        require(decided == 0 && r.forks == 0 && r.safety_valid() && faults == 0, || {
            format!("decided {decided}, forks {}, unsafe ticks {}, fault evidence {faults}", r.forks, r.unsafe_ticks)
        })?;
        Ok(format!("{} ticks: 0 decisions, 0 forks, 0 safety failures", r.ticks.len() - 1))
    });
}

#[test]
fn pvss_benchmark_shape() {
    criterion("pvss benchmark shape", || {
        let group = Group::new(SecurityLevel::Std256);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row = bench_pvss(&group, 64, 21, &mut rng);
        require(row.verify_all_ms > row.split_ms && row.verify_all_ms > row.reconstruct_ms, || format!("{row:?}"))?;
        Ok(format!(
            "std256 n=64 medians: verify-all {:.2} ms, split {:.2} ms, reconstruct {:.2} ms",
            row.verify_all_ms, row.split_ms, row.reconstruct_ms
        ))
    });
}
