//! One test per acceptance criterion. Each prints a single PASS/FAIL line;
//! run with `--nocapture` to see them.

mod common;

use num_rational::Ratio;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use specdec::metrics::DecodeStats;
use specdec::{
    compare_runs, decode_amusd, decode_autoregressive, decode_speculative_sync,
    make_agreement_pair, make_agreement_pair_without_eos, simulate, tokens, EngineKind, EventKind,
    ExactLatencyModel, LatencyModel, MockModel, PollPolicy, ThreadedExecutor, TokenId,
};
use specdec::{DecodeConfig, Simulator};

type Q = Ratio<i64>;

fn report(n: u32, what: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("criterion {n} PASS: {what} ({detail})"),
        Err(why) => {
            println!("criterion {n} FAIL: {what} ({why})");
            panic!("criterion {n} failed: {why}");
        }
    }
}

fn pair(seed: u64, rho: f64, with_eos: bool) -> (MockModel, MockModel) {
    if with_eos {
        make_agreement_pair(seed, rho, 48, TokenId(0)).unwrap()
    } else {
        make_agreement_pair_without_eos(seed, rho, 1000, TokenId(0)).unwrap()
    }
}

fn criterion_1() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xACCE_0001);
    let threaded = ThreadedExecutor::default().with_audit(true);
    let sim = Simulator::<f64>::default().with_audit(true);
    let mut configs = 0;
    for rho in [0.0, 0.25, 0.5, 0.8, 0.95, 1.0] {
        for n in [1usize, 2, 17, 128] {
            for k in [1usize, 4, 8] {
                for _ in 0..15 {
                    let seed = rng.gen::<u64>();
                    let with_eos = rng.gen_bool(0.5);
                    let (d, v) = pair(seed, rho, with_eos);
                    let prompt: Vec<TokenId> = (0..rng.gen_range(1..6))
                        .map(|_| TokenId(rng.gen_range(1..48)))
                        .collect();
                    let mut config = DecodeConfig::new(n).with_window(k).with_seed(seed);
                    if rng.gen_bool(0.3) {
                        config = config.with_max_lead(rng.gen_range(1..10));
                    }
                    let reference =
                        decode_autoregressive(&v, &prompt, &config).map_err(|e| e.to_string())?;
                    let candidates = [
                        (
                            "sync",
                            decode_speculative_sync(&d, &v, &prompt, &config)
                                .map(|r| r.result.tokens),
                        ),
                        (
                            "amusd threaded",
                            decode_amusd(&d, &v, &prompt, &config, &threaded)
                                .map(|r| r.result.tokens),
                        ),
                        (
                            "amusd simulated",
                            decode_amusd(&d, &v, &prompt, &config, &sim).map(|r| r.result.tokens),
                        ),
                        (
                            "sync simulated",
                            sim.run(EngineKind::SyncSpeculative, &d, &v, &prompt, &config)
                                .map(|r| r.result.tokens),
                        ),
                    ];
                    for (label, out) in candidates {
                        let out = out.map_err(|e| format!("{label}: {e}"))?;
                        if out != reference.result.tokens {
                            return Err(format!(
                                "{label} differs: rho {rho} N {n} k {k} seed {seed} eos {with_eos}"
                            ));
                        }
                    }
                    configs += 1;
                }
            }
        }
    }
    Ok(format!("{configs} configurations, zero mismatches"))
}

#[test]
fn criterion_1_output_equivalence() {
    report(
        1,
        "sync and amusd outputs equal autoregressive",
        criterion_1(),
    );
}

fn criterion_2() -> Result<String, String> {
    let (d, v) = pair(2024, 0.8, false);
    let prompt = tokens(&[1, 2, 3, 4]);
    let config = DecodeConfig::new(512);
    let stats: Vec<(String, DecodeStats<f64>)> = EngineKind::ALL
        .iter()
        .map(|&e| {
            simulate(e, &d, &v, &prompt, &config, LatencyModel::default())
                .map(|r| (e.to_string(), r.result.stats))
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let table = compare_runs(&stats).map_err(|e| e.to_string())?;
    let sync = table.speedup_of("sync_speculative").unwrap();
    let amusd = table.speedup_of("amusd").unwrap();
    let detail = format!("amusd {amusd:.3}x, sync {sync:.3}x");
    if amusd > sync && sync > 1.0 && amusd >= 1.2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn criterion_2_speedup_ordering() {
    report(
        2,
        "rho 0.8, N 512: speedup amusd > sync > 1 and amusd >= 1.2",
        criterion_2(),
    );
}

/// Completion time of the asynchronous engine at full agreement under the
/// default latencies, from the schedule alone: draft token `i` appears at
/// `10 i`; a verify pass takes 25 and, when started right after the previous
/// pass, sees only tokens that appeared strictly earlier.
fn full_agreement_completion(n: i64) -> i64 {
    let (mut t, mut v) = (0, 0);
    while v < n {
        let visible = if t == 0 { 0 } else { n.min((t - 1) / 10) };
        if visible > v {
            v = visible;
        } else {
            // Idle until the next token lands; that pass sees just it.
            t = 10 * (v + 1);
            v += 1;
        }
        t += 25;
    }
    t
}

fn criterion_3() -> Result<String, String> {
    let (d, v) = pair(7, 1.0, false);
    let prompt = tokens(&[1, 2, 3, 4]);
    let config = DecodeConfig::new(200).with_window(4);
    let run = |e| {
        simulate(e, &d, &v, &prompt, &config, ExactLatencyModel::default())
            .map(|r| r.result.stats)
            .map_err(|e| e.to_string())
    };
    let ar = run(EngineKind::Autoregressive)?;
    let sync = run(EngineKind::SyncSpeculative)?;
    let amusd = run(EngineKind::Amusd)?;
    let detail = format!(
        "ar {}, sync {}, amusd {} ms/token",
        ar.mean_ms_per_token, sync.mean_ms_per_token, amusd.mean_ms_per_token
    );
    if ar.mean_ms_per_token != Q::from_integer(25) {
        return Err(detail);
    }
    // 40 rounds of 4 draft forwards and one verify forward.
    if sync.elapsed_ms != Q::from_integer(40 * (4 * 10 + 25))
        || sync.mean_ms_per_token != Q::from_integer(13)
    {
        return Err(detail);
    }
    if amusd.elapsed_ms != Q::from_integer(full_agreement_completion(200)) {
        return Err(format!(
            "{detail}; oracle {}",
            full_agreement_completion(200)
        ));
    }
    let mean = amusd.mean_ms_per_token;
    if mean < Q::from_integer(9) || mean > Q::from_integer(11) {
        return Err(detail);
    }
    Ok(detail)
}

#[test]
fn criterion_3_full_agreement_asymptotics() {
    report(
        3,
        "rho 1, N 200: amusd ~10, sync 13, ar 25 ms/token",
        criterion_3(),
    );
}

fn criterion_4() -> Result<String, String> {
    let (d, v) = pair(99, 0.0, false);
    let prompt = tokens(&[1, 2, 3, 4]);
    let config = DecodeConfig::new(100);
    let reference = decode_autoregressive(&v, &prompt, &config).map_err(|e| e.to_string())?;
    let oracle = common::reference_hash_chain(99, 1000, 0, false, &[1, 2, 3, 4], 100);
    if reference.result.tokens != oracle {
        return Err("autoregressive disagrees with the hash-chain oracle".into());
    }
    let sim = Simulator::<f64>::default().with_audit(true);
    let threaded = ThreadedExecutor::default().with_audit(true);
    let runs = [
        ("simulated", decode_amusd(&d, &v, &prompt, &config, &sim)),
        (
            "threaded",
            decode_amusd(&d, &v, &prompt, &config, &threaded),
        ),
    ];
    for (label, run) in runs {
        let run = run.map_err(|e| format!("{label}: {e}"))?;
        let s = &run.result.stats;
        if run.result.tokens != oracle {
            return Err(format!("{label}: output differs from oracle"));
        }
        if (s.verify_steps, s.rollbacks) != (100, 100) {
            return Err(format!(
                "{label}: {} steps, {} rollbacks",
                s.verify_steps, s.rollbacks
            ));
        }
        let mut last = 4;
        for e in run.trace.events.iter().filter(|e| e.kind.is_verify()) {
            if e.pos_from != last || e.pos_to <= e.pos_from {
                return Err(format!(
                    "{label}: p_v {}..{} after {last}",
                    e.pos_from, e.pos_to
                ));
            }
            last = e.pos_to;
        }
        common::check_frontiers(&run.trace, prompt.len()).map_err(|e| format!("{label}: {e}"))?;
    }
    Ok("100 steps, 100 rollbacks, p_v strictly increasing".into())
}

#[test]
fn criterion_4_livelock_freedom() {
    report(
        4,
        "rho 0, N 100: one token and one rollback per step",
        criterion_4(),
    );
}

fn criterion_5() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xACCE_0005);
    let mut runs = 0;
    let mut rollbacks = 0;
    for i in 0..240u64 {
        let rho = [0.0, 0.3, 0.6, 0.8, 0.95, 1.0][rng.gen_range(0..6)];
        let n = rng.gen_range(1..96);
        let seed = rng.gen::<u64>();
        let (d, v) = pair(seed, rho, rng.gen_bool(0.5));
        let prompt = tokens(&[3, 1, 4]);
        let mut config = DecodeConfig::new(n).with_seed(seed);
        if rng.gen_bool(0.3) {
            config = config.with_max_lead(rng.gen_range(1..8));
        }
        let executor = ThreadedExecutor::default()
            .with_audit(true)
            .with_poll(PollPolicy::Jitter {
                seed: seed ^ i,
                max_sleep_us: 50,
            });
        let run = decode_amusd(&d, &v, &prompt, &config, &executor)
            .map_err(|e| format!("run {i}: {e}"))?;
        common::check_frontiers(&run.trace, prompt.len()).map_err(|e| format!("run {i}: {e}"))?;
        let reference = decode_autoregressive(&v, &prompt, &config).map_err(|e| e.to_string())?;
        if run.result.tokens != reference.result.tokens {
            return Err(format!("run {i}: output differs"));
        }
        rollbacks += run
            .trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Rollback)
            .count();
        runs += 1;
    }
    Ok(format!(
        "{runs} runs, {rollbacks} audited rollbacks, zero violations"
    ))
}

#[test]
fn criterion_5_concurrent_coordination_invariants() {
    report(
        5,
        "threaded runs with jittered polling keep the protocol",
        criterion_5(),
    );
}

fn criterion_6() -> Result<String, String> {
    let artifacts = || -> Result<(Vec<u8>, String), String> {
        let (d, v) = pair(31337, 0.8, true);
        let run = simulate(
            EngineKind::Amusd,
            &d,
            &v,
            &tokens(&[1, 2, 3, 4]),
            &DecodeConfig::new(256).with_seed(31337),
            LatencyModel::default(),
        )
        .map_err(|e| e.to_string())?;
        let mut csv = Vec::new();
        run.trace.write_csv(&mut csv).map_err(|e| e.to_string())?;
        Ok((csv, run.result.stats.to_json().map_err(|e| e.to_string())?))
    };
    let first = artifacts()?;
    for i in 1..10 {
        if artifacts()? != first {
            return Err(format!("invocation {i} differs"));
        }
    }
    Ok(format!(
        "10 invocations, {} trace bytes each",
        first.0.len()
    ))
}

#[test]
fn criterion_6_simulator_determinism() {
    report(
        6,
        "identical inputs give byte-identical trace and stats",
        criterion_6(),
    );
}

fn criterion_7() -> Result<String, String> {
    let prompt = tokens(&[1, 2, 3, 4]);
    let mut min_overlap = f64::INFINITY;
    for seed in 0..20 {
        for n in [64usize, 128, 512] {
            let (d, v) = pair(seed, 0.8, false);
            let config = DecodeConfig::new(n);
            let sync = simulate(
                EngineKind::SyncSpeculative,
                &d,
                &v,
                &prompt,
                &config,
                LatencyModel::default(),
            )
            .map_err(|e| e.to_string())?;
            if sync.trace.overlap_ms() != 0.0 {
                return Err(format!(
                    "sync overlap {} at seed {seed} N {n}",
                    sync.trace.overlap_ms()
                ));
            }
            let amusd = simulate(
                EngineKind::Amusd,
                &d,
                &v,
                &prompt,
                &config,
                LatencyModel::default(),
            )
            .map_err(|e| e.to_string())?;
            let overlap = amusd.trace.overlap_ms();
            if overlap <= 0.0 {
                return Err(format!("amusd has no overlap at seed {seed} N {n}"));
            }
            min_overlap = min_overlap.min(overlap);
        }
    }
    Ok(format!("sync overlap 0, amusd overlap >= {min_overlap} ms"))
}

#[test]
fn criterion_7_schedule_shape() {
    report(
        7,
        "sync never overlaps, amusd at rho 0.8 does",
        criterion_7(),
    );
}
