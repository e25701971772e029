//! Acceptance matrix. Prints one PASS/FAIL line per criterion.
//!
//! Checksums, CRCs and intervals are checked against oracles written here,
//! independently of the library code paths under test.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use common::serial_checksum;
use reinit_core::bench::stats::ci95;
use reinit_core::bench::verify::{self, CriterionResult, VerifyOptions, RCK1_GOLDEN, WIRE_VECTORS};
use reinit_core::bench::BenchError;
use reinit_core::wire::golden_samples;
use reinit_core::{
    buddy_of, plan_recovery, Checkpoint, CheckpointError, DaemonId, FailedEntity, MessageKind,
    RankId, Topology,
};

const ITERS: u64 = 20;
const VEC_LEN: usize = 4096;
/// C1 budget for the whole injected matrix.
const C1_BUDGET_S: f64 = 120.0;
const ORDERING_MAX_RATIO: f64 = 0.5;
const SCALING_MAX_RATIO: f64 = 2.0;
const CI_REL_TOL: f64 = 1e-3;

fn report(results: &mut Vec<CriterionResult>, r: CriterionResult) {
    println!("{}", r.line());
    results.push(r);
}

fn merge(id: u32, name: &'static str, parts: &[&CriterionResult], extra: &[String]) -> CriterionResult {
    let mut failures: Vec<String> = parts
        .iter()
        .filter(|p| !p.passed)
        .map(|p| p.detail.clone())
        .collect();
    failures.extend(extra.iter().cloned());
    let passed = failures.is_empty();
    CriterionResult {
        id,
        name,
        passed,
        detail: if passed {
            parts.iter().map(|p| p.detail.as_str()).collect::<Vec<_>>().join("; ")
        } else {
            failures.join("; ")
        },
    }
}

/// Argmin by (load, id) over live daemons other than `failed`.
fn argmin(t: &Topology, failed: DaemonId) -> Option<DaemonId> {
    t.daemons()
        .filter(|(d, r)| *d != failed && r.alive)
        .map(|(d, r)| (r.children.len(), d))
        .min()
        .map(|(_, d)| d)
}

fn proptest_placement(cases: u32) -> Vec<String> {
    let mut runner = TestRunner::new(Config {
        cases,
        ..Config::default()
    });
    let strat = (
        proptest::collection::vec((0usize..16, proptest::bool::weighted(0.8)), 1..10),
        any::<u64>(),
    );
    let outcome = runner.run(&strat, |(daemons, pick)| {
        let mut t = Topology::new();
        let mut next = 0;
        for (d, &(load, _)) in daemons.iter().enumerate() {
            t.add_daemon(DaemonId(d as u32));
            for _ in 0..load {
                t.place(RankId(next), DaemonId(d as u32));
                next += 1;
            }
        }
        for (d, &(_, alive)) in daemons.iter().enumerate() {
            if !alive {
                t.mark_dead(DaemonId(d as u32));
            }
        }
        let victim = DaemonId((pick % daemons.len() as u64) as u32);
        let lost: Vec<RankId> = t.children(victim).unwrap().iter().copied().collect();
        match (plan_recovery(&t, FailedEntity::Daemon(victim)), argmin(&t, victim)) {
            (Ok(a), _) if lost.is_empty() => prop_assert!(a.is_empty()),
            (Ok(a), Some(w)) => {
                prop_assert_eq!(a.ranks().collect::<Vec<_>>(), lost);
                prop_assert!(a.0.iter().all(|&(d, _)| d == w));
            }
            (Err(_), None) => {}
            (p, w) => prop_assert!(false, "plan {:?} vs argmin {:?}", p, w),
        }
        if next > 0 {
            let r = RankId((pick / 7 % next as u64) as u32);
            let parent = t.parent(r).unwrap();
            let a = plan_recovery(&t, FailedEntity::Rank(r)).unwrap();
            prop_assert_eq!(a.0, vec![(parent, r)]);
        }
        Ok(())
    });
    let mut out: Vec<String> = outcome.err().map(|e| e.to_string()).into_iter().collect();
    for n in 1..=1024u32 {
        let mut r = 0;
        let mut steps = 0;
        loop {
            r = buddy_of(RankId(r), n).0;
            steps += 1;
            if r == 0 || steps > n {
                break;
            }
        }
        if steps != n {
            out.push(format!("buddy cycle length {steps} for n={n}"));
        }
    }
    out
}

/// Hand-assembled RCK1 record.
fn rck1_by_hand(rank: u32, iter: u64, payload: &[u8]) -> Vec<u8> {
    let mut v = b"RCK1".to_vec();
    v.extend(1u16.to_le_bytes());
    v.extend(rank.to_le_bytes());
    v.extend(iter.to_le_bytes());
    v.extend((payload.len() as u64).to_le_bytes());
    v.extend(crc32fast::hash(payload).to_le_bytes());
    v.extend(payload);
    v
}

fn checkpoint_oracles() -> Vec<String> {
    let mut out = Vec::new();
    let payload = verify::RCK1_GOLDEN_PAYLOAD;
    if rck1_by_hand(3, 5, payload) != RCK1_GOLDEN {
        out.push("golden file differs from hand-built record".into());
    }
    let on_disk = std::fs::read(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/rck1_r0003_i0000000005.bin"),
    )
    .unwrap_or_default();
    if on_disk != RCK1_GOLDEN {
        out.push("committed golden file unreadable or changed".into());
    }
    if crc32fast::hash(b"123456789") != 0xCBF4_3926 || reinit_core::crc32(b"123456789") != 0xCBF4_3926 {
        out.push("crc32 check value".into());
    }
    for flip in 30..RCK1_GOLDEN.len() {
        let mut bad = RCK1_GOLDEN.to_vec();
        bad[flip] ^= 0x01;
        if !matches!(Checkpoint::decode(&bad), Err(CheckpointError::CrcMismatch { .. })) {
            out.push(format!("flip at byte {flip} not reported as CrcMismatch"));
        }
    }
    out
}

fn stats_oracles() -> Vec<String> {
    // (samples, mean, half width) worked by hand from the t table
    let cases: [(&[f64], f64, f64); 3] = [
        (&[1.0, 2.0, 3.0, 4.0, 5.0], 3.0, 1.962928),
        (&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0], 5.0, 1.787772),
        (&[10.0, 12.0], 11.0, 12.706),
    ];
    let mut out = Vec::new();
    for (xs, m, hw) in cases {
        match ci95(xs) {
            Ok((gm, ghw)) => {
                if (gm - m).abs() > CI_REL_TOL * m.abs() || (ghw - hw).abs() > CI_REL_TOL * hw {
                    out.push(format!("{xs:?}: got ({gm}, {ghw}), want ({m}, {hw})"));
                }
            }
            Err(e) => out.push(format!("{xs:?}: {e}")),
        }
    }
    out
}

fn wire_oracles() -> Vec<String> {
    let mut out = Vec::new();
    let lines: Vec<&str> = WIRE_VECTORS
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .collect();
    if lines.len() != MessageKind::ALL.len() {
        out.push(format!("{} vectors for {} kinds", lines.len(), MessageKind::ALL.len()));
    }
    for ((line, kind), sample) in lines.iter().zip(MessageKind::ALL).zip(golden_samples()) {
        let (name, hex) = line.split_once(' ').unwrap_or(("", ""));
        let bytes: Vec<u8> = (0..hex.len() / 2)
            .filter_map(|i| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok())
            .collect();
        if name != kind.name() || bytes.len() < 14 {
            out.push(format!("bad vector line for {}", kind.name()));
            continue;
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let k = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        let epoch = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        if len + 4 != bytes.len() || k != kind as u16 || epoch != sample.epoch.0 {
            out.push(format!("{name}: header fields"));
        }
    }
    out
}

fn ratio_result(id: u32, name: &'static str, m: Result<(f64, f64), BenchError>, ok: impl Fn(f64, f64) -> bool, label: (&str, &str)) -> CriterionResult {
    let (passed, detail) = match m {
        Ok((a, b)) => (
            ok(a, b),
            format!("median t_recovery {} {a:.4}s, {} {b:.4}s (ratio {:.2})", label.0, label.1, a / b),
        ),
        Err(e) => (false, e.to_string()),
    };
    CriterionResult {
        id,
        name,
        passed,
        detail,
    }
}

fn ordering(opts: &VerifyOptions) -> CriterionResult {
    ratio_result(
        4,
        "recovery ordering",
        verify::ordering_medians(opts),
        |r, c| r < c && r <= ORDERING_MAX_RATIO * c,
        ("reinit", "cr"),
    )
}

fn scaling(opts: &VerifyOptions) -> CriterionResult {
    ratio_result(
        5,
        "recovery scaling",
        verify::scaling_medians(opts).map(|(s, l)| (l, s)),
        |l, s| l <= SCALING_MAX_RATIO * s,
        ("n=64", "n=8"),
    )
}

#[test]
fn acceptance() {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_bench"));
    let dir = tempfile::tempdir().expect("temp dir");
    let mut opts = VerifyOptions::new(exe, dir.path().to_path_buf());
    opts.iterations = ITERS;
    opts.vec_len = VEC_LEN;

    let mut memo: BTreeMap<u32, u64> = BTreeMap::new();
    let mut oracle = |n: u32| -> Result<u64, BenchError> {
        Ok(*memo.entry(n).or_insert_with(|| serial_checksum(n, ITERS, VEC_LEN)))
    };
    let mut results = Vec::new();

    // the runtime's own fault-free run must agree with the serial oracle too
    let mut extra = Vec::new();
    for n in [4, 8, 16] {
        match verify::fault_free_checksum(&opts, n) {
            Ok(c) if c == oracle(n).unwrap() => {}
            Ok(c) => extra.push(format!("fault-free n={n} checksum {c:#x} != serial oracle")),
            Err(e) => extra.push(format!("fault-free n={n}: {e}")),
        }
    }
    let t = Instant::now();
    let c1 = verify::end_to_end(&opts, &mut oracle);
    let elapsed = t.elapsed().as_secs_f64();
    if elapsed > C1_BUDGET_S {
        extra.push(format!("matrix took {elapsed:.1}s, budget {C1_BUDGET_S}s"));
    }
    let mut c1 = merge(1, c1.name, &[&c1], &extra);
    c1.detail = format!("{} ({elapsed:.1}s)", c1.detail);
    report(&mut results, c1);

    report(&mut results, verify::state_machine(&opts));

    let c3 = verify::placement(&opts);
    report(&mut results, merge(3, c3.name, &[&c3], &proptest_placement(1000)));

    report(&mut results, ordering(&opts));
    report(&mut results, scaling(&opts));

    report(&mut results, verify::node_failure(&opts, &mut oracle));

    let c7 = verify::checkpoint_format(&crc32fast::hash);
    report(&mut results, merge(7, c7.name, &[&c7], &checkpoint_oracles()));

    let c8 = verify::statistics();
    report(&mut results, merge(8, c8.name, &[&c8], &stats_oracles()));

    let c9 = verify::wire_golden();
    report(&mut results, merge(9, c9.name, &[&c9], &wire_oracles()));

    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", results.len());
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    assert!(failed.is_empty(), "failing criteria:\n{}", failed.join("\n"));
}
