//! The acceptance matrix behind `bench verify`.
//!
//! Each criterion returns a [`CriterionResult`]; end-to-end criteria take the
//! fault-free checksum oracle as a parameter so callers can supply their own.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use super::stats::{ci95, median};
use super::{run_experiment, run_once, BenchError, ExperimentConfig, RunOutcome, Strategy};
use crate::checkpoint::{self, CheckpointError, Checkpoint, CkptMode};
use crate::inject::{InjectKind, InjectionPlan, SplitMix64};
use crate::topology::{
    buddy_of, least_loaded, plan_recovery, DaemonId, FailedEntity, PlacementError, ProcessState,
    RankId, Topology,
};
use crate::wire::{golden_samples, ControlMessage};

pub const WIRE_VECTORS: &str = include_str!("../../tests/fixtures/wire_vectors.txt");
pub const RCK1_GOLDEN: &[u8] = include_bytes!("../../tests/fixtures/rck1_r0003_i0000000005.bin");
pub const RCK1_GOLDEN_PAYLOAD: &[u8] = b"reinit checkpoint payload\x00\x01\x02";

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: u32, name: &'static str, failures: &[String], ok_detail: String) -> Self {
        let passed = failures.is_empty();
        let detail = if passed {
            ok_detail
        } else {
            let shown: Vec<&str> = failures.iter().take(5).map(String::as_str).collect();
            format!("{} failure(s): {}", failures.len(), shown.join("; "))
        };
        Self {
            id,
            name,
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] C{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub exe: PathBuf,
    pub ckpt_dir: PathBuf,
    pub iterations: u64,
    pub vec_len: usize,
    pub ordering_reps: u32,
    pub scaling_reps: u32,
    pub state_runs: u32,
    pub placement_cases: u32,
}

impl VerifyOptions {
    pub fn new(exe: PathBuf, ckpt_dir: PathBuf) -> Self {
        Self {
            exe,
            ckpt_dir,
            iterations: 20,
            vec_len: super::app::DEFAULT_VEC_LEN,
            ordering_reps: 10,
            scaling_reps: 5,
            state_runs: 50,
            placement_cases: 1000,
        }
    }

    pub fn config(
        &self,
        world: u32,
        daemons: u32,
        strategy: Strategy,
        ckpt: CkptMode,
        inject: InjectKind,
    ) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(self.exe.clone(), world, daemons, strategy);
        c.ckpt = ckpt;
        c.inject = inject;
        c.iterations = self.iterations;
        c.vec_len = self.vec_len;
        c.ckpt_dir = self.ckpt_dir.clone();
        c.repetitions = 1;
        c
    }
}

/// Fault-free checksum for `world` ranks: the reference every recovered run
/// must reproduce.
pub fn fault_free_checksum(opts: &VerifyOptions, world: u32) -> Result<u64, BenchError> {
    let cfg = opts.config(world, 1, Strategy::Reinit, CkptMode::None, InjectKind::None);
    Ok(run_once(&cfg)?.report.checksum)
}

/// Checksum oracle keyed by world size.
pub type Oracle<'a> = dyn FnMut(u32) -> Result<u64, BenchError> + 'a;

/// The recoverable (strategy, checkpoint, failure) combinations.
pub const CELLS: [(Strategy, CkptMode, InjectKind); 5] = [
    (Strategy::Reinit, CkptMode::Buddy, InjectKind::Process),
    (Strategy::Reinit, CkptMode::File, InjectKind::Node),
    (Strategy::Ulfm, CkptMode::Buddy, InjectKind::Process),
    (Strategy::Cr, CkptMode::File, InjectKind::Process),
    (Strategy::Cr, CkptMode::File, InjectKind::Node),
];

fn describe(cfg: &ExperimentConfig) -> String {
    format!(
        "{}+{}+{} n={} d={}",
        cfg.strategy,
        cfg.ckpt.name(),
        cfg.plan().kind,
        cfg.world_size,
        cfg.num_daemons
    )
}

/// C1: every recoverable cell reproduces the fault-free checksum.
pub fn end_to_end(opts: &VerifyOptions, oracle: &mut Oracle<'_>) -> CriterionResult {
    let mut failures = Vec::new();
    let mut runs = 0;
    let mut seed = 100;
    for world in [4, 8, 16] {
        let want = match oracle(world) {
            Ok(c) => c,
            Err(e) => {
                failures.push(format!("oracle n={world}: {e}"));
                continue;
            }
        };
        for daemons in [1, 2, 4] {
            for (strategy, ckpt, inject) in CELLS {
                let mut cfg = opts.config(world, daemons, strategy, ckpt, inject);
                if inject == InjectKind::Node {
                    cfg.spares = 1;
                }
                cfg.seed = seed;
                seed += 1;
                runs += 1;
                match run_once(&cfg) {
                    Ok(o) if o.report.checksum == want && o.report.recoveries.len() == 1 => {}
                    Ok(o) => failures.push(format!(
                        "{}: checksum {:#x} (want {want:#x}), {} recoveries",
                        describe(&cfg),
                        o.report.checksum,
                        o.report.recoveries.len()
                    )),
                    Err(e) => failures.push(format!("{}: {e}", describe(&cfg))),
                }
            }
        }
    }
    CriterionResult::new(
        1,
        "end-to-end oracle equivalence",
        &failures,
        format!("{runs} injected runs match the fault-free checksum"),
    )
}

/// Ranks a run should have respawned, from its first recovery.
fn respawned(o: &RunOutcome) -> BTreeSet<RankId> {
    o.report
        .recoveries
        .first()
        .map(|r| r.assignment.ranks().collect())
        .unwrap_or_default()
}

/// Checks the per-process state sequences of a run with one recovery.
pub fn state_violations(o: &RunOutcome) -> Vec<String> {
    let mut out = Vec::new();
    let fresh = respawned(o);
    if o.report.recoveries.len() != 1 {
        out.push(format!("{} recoveries", o.report.recoveries.len()));
        return out;
    }
    for (r, d) in &o.report.dones {
        let want: &[ProcessState] = if fresh.contains(r) {
            &[ProcessState::Restarted]
        } else {
            &[ProcessState::New, ProcessState::Reinited]
        };
        if d.states != want {
            out.push(format!("rank {} saw {:?}, want {:?}", r.0, d.states, want));
        }
    }
    out
}

/// C2: survivors see NEW→REINITED, respawned ranks see RESTARTED.
pub fn state_machine(opts: &VerifyOptions) -> CriterionResult {
    let mut failures = Vec::new();
    for i in 0..opts.state_runs {
        let (strategy, ckpt, inject) = match i % 5 {
            0 | 2 => (Strategy::Reinit, CkptMode::Buddy, InjectKind::Process),
            1 | 3 => (Strategy::Ulfm, CkptMode::Buddy, InjectKind::Process),
            _ => (Strategy::Reinit, CkptMode::File, InjectKind::Node),
        };
        let world = if i % 2 == 0 { 4 } else { 8 };
        let mut cfg = opts.config(world, 2, strategy, ckpt, inject);
        cfg.spares = 1;
        cfg.seed = 1000 + i as u64;
        match run_once(&cfg) {
            Ok(o) => failures.extend(
                state_violations(&o)
                    .into_iter()
                    .map(|v| format!("{} seed {}: {v}", describe(&cfg), cfg.seed)),
            ),
            Err(e) => failures.push(format!("{} seed {}: {e}", describe(&cfg), cfg.seed)),
        }
    }
    CriterionResult::new(
        2,
        "process state machine",
        &failures,
        format!("{} injected runs, zero violations", opts.state_runs),
    )
}

/// Brute-force placement oracle for a daemon failure.
fn expected_target(t: &Topology, failed: DaemonId) -> Option<DaemonId> {
    let mut best: Option<(usize, DaemonId)> = None;
    for (d, rec) in t.daemons() {
        if d == failed || !rec.alive {
            continue;
        }
        let key = (rec.children.len(), d);
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
    }
    best.map(|(_, d)| d)
}

fn random_topology(rng: &mut SplitMix64) -> Topology {
    let daemons = 1 + (rng.next_u64() % 8) as u32;
    let world = 1 + (rng.next_u64() % 64) as u32;
    let mut t = Topology::new();
    for d in 0..daemons {
        t.add_daemon(DaemonId(d));
    }
    for r in 0..world {
        t.place(RankId(r), DaemonId((rng.next_u64() % daemons as u64) as u32));
    }
    for d in 0..daemons {
        if rng.next_u64().is_multiple_of(4) {
            t.mark_dead(DaemonId(d));
        }
    }
    t
}

/// Violations of the placement rules for one topology and failure.
pub fn placement_violations(t: &Topology, failed: FailedEntity) -> Vec<String> {
    let mut out = Vec::new();
    let plan = plan_recovery(t, failed);
    match failed {
        FailedEntity::Daemon(d) => {
            let lost: Vec<RankId> = t.children(d).map(|c| c.iter().copied().collect()).unwrap_or_default();
            let want = expected_target(t, d);
            match (plan, want) {
                (Ok(a), _) if lost.is_empty() && a.is_empty() => {}
                (Ok(a), Some(w)) => {
                    if a.ranks().collect::<Vec<_>>() != lost {
                        out.push(format!("daemon {} plan covers wrong ranks", d.0));
                    }
                    if a.0.iter().any(|&(x, _)| x != w) {
                        out.push(format!("daemon {} ranks not all sent to argmin {}", d.0, w.0));
                    }
                    let mut after = t.clone();
                    after.mark_dead(d);
                    after.apply(&a);
                    let hosted: usize = t
                        .daemons()
                        .filter(|(x, r)| *x != d && r.alive)
                        .map(|(_, r)| r.children.len())
                        .sum();
                    if after.live_rank_count() != hosted + lost.len() {
                        out.push(format!("daemon {} loses ranks after recovery", d.0));
                    }
                    if a.0.iter().any(|&(x, _)| !after.daemon(x).is_some_and(|r| r.alive)) {
                        out.push(format!("daemon {} plan names a dead daemon", d.0));
                    }
                }
                (Err(PlacementError::NoAliveDaemons), None) => {}
                (p, w) => out.push(format!("daemon {} plan {p:?}, argmin {w:?}", d.0)),
            }
        }
        FailedEntity::Rank(r) => match (plan, t.parent(r)) {
            (Ok(a), Some(p)) if a.0 == [(p, r)] => {}
            (p, parent) => out.push(format!("rank {} plan {p:?}, parent {parent:?}", r.0)),
        },
    }
    out
}

/// Whether `buddy_of` over `n` ranks is one n-cycle.
pub fn buddy_is_single_cycle(n: u32) -> bool {
    let mut seen = vec![false; n as usize];
    let mut r = RankId(0);
    for _ in 0..n {
        if seen[r.0 as usize] {
            return false;
        }
        seen[r.0 as usize] = true;
        r = buddy_of(r, n);
    }
    r == RankId(0) && seen.iter().all(|&s| s)
}

/// C3: placement rules over random topologies and the buddy permutation.
pub fn placement(opts: &VerifyOptions) -> CriterionResult {
    let mut failures = Vec::new();
    let mut rng = SplitMix64::new(0x5eed);
    for case in 0..opts.placement_cases {
        let t = random_topology(&mut rng);
        let daemons: Vec<DaemonId> = t.daemons().map(|(d, _)| d).collect();
        let d = daemons[(rng.next_u64() % daemons.len() as u64) as usize];
        for v in placement_violations(&t, FailedEntity::Daemon(d)) {
            failures.push(format!("case {case}: {v}"));
        }
        let ranks: Vec<RankId> = daemons
            .iter()
            .flat_map(|&d| t.children(d).into_iter().flatten().copied())
            .collect();
        if !ranks.is_empty() {
            let r = ranks[(rng.next_u64() % ranks.len() as u64) as usize];
            for v in placement_violations(&t, FailedEntity::Rank(r)) {
                failures.push(format!("case {case}: {v}"));
            }
        }
        if least_loaded(&t).ok() != expected_target(&t, DaemonId(u32::MAX)) {
            failures.push(format!("case {case}: least_loaded disagrees with brute force"));
        }
    }
    for n in 1..=1024 {
        if !buddy_is_single_cycle(n) {
            failures.push(format!("buddy_of is not a single cycle for n={n}"));
        }
    }
    CriterionResult::new(
        3,
        "placement and buddy properties",
        &failures,
        format!(
            "{} random topologies, buddy cycles for n in 1..=1024",
            opts.placement_cases
        ),
    )
}

fn recovery_times(cfg: &ExperimentConfig) -> Result<Vec<f64>, BenchError> {
    let outs = run_experiment(cfg)?;
    Ok(outs.iter().map(|o| o.timing.t_recovery).collect())
}

/// Median REINIT and CR recovery times at n=16.
pub fn ordering_medians(opts: &VerifyOptions) -> Result<(f64, f64), BenchError> {
    let mut reinit = opts.config(16, 2, Strategy::Reinit, CkptMode::Buddy, InjectKind::Process);
    let mut cr = opts.config(16, 2, Strategy::Cr, CkptMode::File, InjectKind::Process);
    for c in [&mut reinit, &mut cr] {
        c.repetitions = opts.ordering_reps;
        c.seed = 7;
    }
    let r = recovery_times(&reinit)?;
    let c = recovery_times(&cr)?;
    Ok((median(&r).unwrap_or(f64::NAN), median(&c).unwrap_or(f64::NAN)))
}

/// C4: REINIT recovers in at most half the CR time at n=16.
pub fn recovery_ordering(opts: &VerifyOptions) -> CriterionResult {
    let name = "recovery ordering";
    let (mr, mc) = match ordering_medians(opts) {
        Ok(m) => m,
        Err(e) => return CriterionResult::new(4, name, &[e.to_string()], String::new()),
    };
    let mut failures = Vec::new();
    if !(mr < mc && mr <= 0.5 * mc) {
        failures.push(format!("median reinit {mr:.4}s vs cr {mc:.4}s"));
    }
    CriterionResult::new(
        4,
        name,
        &failures,
        format!(
            "median t_recovery reinit {mr:.4}s, cr {mc:.4}s (ratio {:.2})",
            mr / mc
        ),
    )
}

/// Median REINIT recovery times at n=8 (1 daemon) and n=64 (8 daemons).
pub fn scaling_medians(opts: &VerifyOptions) -> Result<(f64, f64), BenchError> {
    let mut small = opts.config(8, 1, Strategy::Reinit, CkptMode::Buddy, InjectKind::Process);
    let mut large = opts.config(64, 8, Strategy::Reinit, CkptMode::Buddy, InjectKind::Process);
    for c in [&mut small, &mut large] {
        c.repetitions = opts.scaling_reps;
        c.seed = 11;
    }
    let s = recovery_times(&small)?;
    let l = recovery_times(&large)?;
    Ok((median(&s).unwrap_or(f64::NAN), median(&l).unwrap_or(f64::NAN)))
}

/// C5: REINIT recovery at n=64 within twice its n=8 value.
pub fn recovery_scaling(opts: &VerifyOptions) -> CriterionResult {
    let name = "recovery scaling";
    let (ms, ml) = match scaling_medians(opts) {
        Ok(m) => m,
        Err(e) => return CriterionResult::new(5, name, &[e.to_string()], String::new()),
    };
    let mut failures = Vec::new();
    if !(ml <= 2.0 * ms) {
        failures.push(format!("median n=64 {ml:.4}s vs n=8 {ms:.4}s"));
    }
    CriterionResult::new(
        5,
        name,
        &failures,
        format!(
            "median t_recovery n=8 {ms:.4}s, n=64 {ml:.4}s (ratio {:.2})",
            ml / ms
        ),
    )
}

/// C6: every daemon of a 4-daemon tree (plus one spare) can be lost.
pub fn node_failure(opts: &VerifyOptions, oracle: &mut Oracle<'_>) -> CriterionResult {
    let world = 16;
    let mut failures = Vec::new();
    let want = match oracle(world) {
        Ok(c) => c,
        Err(e) => {
            failures.push(format!("oracle: {e}"));
            return CriterionResult::new(6, "node failure recovery", &failures, String::new());
        }
    };
    for victim in 0..4u32 {
        let mut cfg = opts.config(world, 4, Strategy::Reinit, CkptMode::File, InjectKind::Node);
        cfg.spares = 1;
        cfg.plan_override = Some(InjectionPlan {
            kind: InjectKind::Node,
            iteration: opts.iterations / 2,
            // round-robin placement puts rank v on daemon v
            victim: RankId(victim),
            seed: 0,
        });
        let before = Topology::round_robin(world, 4, 1);
        let lost: BTreeSet<RankId> = before
            .children(DaemonId(victim))
            .cloned()
            .unwrap_or_default();
        let mut survivors = before.clone();
        survivors.mark_dead(DaemonId(victim));
        let target = expected_target(&before, DaemonId(victim));
        match run_once(&cfg) {
            Ok(o) => {
                let rec = o.report.recoveries.first();
                if o.report.checksum != want {
                    failures.push(format!("victim d{victim}: checksum mismatch"));
                }
                if rec.map(|r| r.failed) != Some(FailedEntity::Daemon(DaemonId(victim))) {
                    failures.push(format!("victim d{victim}: detected {:?}", rec.map(|r| r.failed)));
                }
                let placed: BTreeSet<RankId> = target
                    .and_then(|t| o.report.topology.children(t).cloned())
                    .unwrap_or_default();
                if !lost.is_subset(&placed) {
                    failures.push(format!("victim d{victim}: ranks not on argmin {target:?}"));
                }
                if rec.is_some_and(|r| r.assignment.0.iter().any(|&(d, _)| Some(d) != target)) {
                    failures.push(format!("victim d{victim}: assignment off argmin"));
                }
                failures.extend(state_violations(&o).into_iter().map(|v| format!("victim d{victim}: {v}")));
            }
            Err(e) => failures.push(format!("victim d{victim}: {e}")),
        }
    }
    CriterionResult::new(
        6,
        "node failure recovery",
        &failures,
        "each of 4 daemons killed; ranks respawned on the argmin daemon".into(),
    )
}

/// Bitwise CRC-32 used as an independent reference for the table version.
pub fn crc32_bitwise(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// C7: RCK1 golden bytes, CRC check values, corruption detection.
pub fn checkpoint_format(ref_crc: &dyn Fn(&[u8]) -> u32) -> CriterionResult {
    let mut failures = Vec::new();
    let ck = Checkpoint::new(RankId(3), 5, RCK1_GOLDEN_PAYLOAD.to_vec());
    if ck.encode() != RCK1_GOLDEN {
        failures.push("encoding differs from golden file".into());
    }
    match Checkpoint::decode(RCK1_GOLDEN) {
        Ok(d) if d == ck => {}
        other => failures.push(format!("golden decode: {other:?}")),
    }
    if checkpoint::file_name(RankId(3), 5) != "r0003_i0000000005.ckpt" {
        failures.push("file name format".into());
    }
    for (input, want) in [(&b""[..], 0u32), (b"123456789", 0xCBF4_3926), (&[0u8][..], 0xD202_EF8D)] {
        let got = checkpoint::crc32(input);
        if got != want || ref_crc(input) != want {
            failures.push(format!("crc32({input:?}) = {got:#010x}, want {want:#010x}"));
        }
    }
    let mut rng = SplitMix64::new(77);
    for len in 0..300 {
        let data: Vec<u8> = (0..len).map(|_| rng.next_u64() as u8).collect();
        if checkpoint::crc32(&data) != ref_crc(&data) {
            failures.push(format!("crc32 disagrees with reference at len {len}"));
        }
    }
    let mut bad = RCK1_GOLDEN.to_vec();
    let last = bad.len() - 1;
    bad[last] ^= 0x40;
    if !matches!(Checkpoint::decode(&bad), Err(CheckpointError::CrcMismatch { .. })) {
        failures.push("flipped payload bit not detected".into());
    }
    CriterionResult::new(
        7,
        "checkpoint format and CRC",
        &failures,
        "golden RCK1 file, CRC check values, corruption rejected".into(),
    )
}

/// C8: ci95 against hand-computed t-intervals.
pub fn statistics() -> CriterionResult {
    let mut failures = Vec::new();
    let one_to_ten: Vec<f64> = (1..=10).map(f64::from).collect();
    // s = sqrt(82.5 / 9)
    let s10 = (82.5f64 / 9.0).sqrt();
    let cases: [(&[f64], f64, f64); 3] = [
        (&[3.25; 10], 3.25, 0.0),
        (&one_to_ten, 5.5, 2.262 * s10 / 10f64.sqrt()),
        (&[0.0, 2.0], 1.0, 12.706),
    ];
    for (samples, m, hw) in cases {
        match ci95(samples) {
            Ok((gm, ghw)) => {
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-3 * b.abs().max(1e-12);
                if !close(gm, m) || !(close(ghw, hw) || hw == 0.0 && ghw == 0.0) {
                    failures.push(format!("{samples:?}: ({gm}, {ghw}) want ({m}, {hw})"));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if ci95(&[1.0]).is_ok() {
        failures.push("single sample accepted".into());
    }
    CriterionResult::new(
        8,
        "confidence intervals",
        &failures,
        "three reference intervals within 1e-3".into(),
    )
}

/// Parses the committed golden vectors: `(kind name, frame bytes)`.
pub fn parse_vectors(text: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (name, hex) = l.split_once(' ').ok_or_else(|| format!("bad line {l}"))?;
            let hex = hex.trim();
            if hex.len() % 2 != 0 {
                return Err(format!("odd hex length for {name}"));
            }
            let bytes = (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
                .collect::<Result<Vec<u8>, _>>()
                .map_err(|e| format!("{name}: {e}"))?;
            Ok((name.to_string(), bytes))
        })
        .collect()
}

/// C9: every message kind round-trips against the committed vectors.
pub fn wire_golden() -> CriterionResult {
    let mut failures = Vec::new();
    let vectors = match parse_vectors(WIRE_VECTORS) {
        Ok(v) => v,
        Err(e) => {
            failures.push(e);
            return CriterionResult::new(9, "wire golden vectors", &failures, String::new());
        }
    };
    let samples = golden_samples();
    if vectors.len() != samples.len() {
        failures.push(format!("{} vectors for {} kinds", vectors.len(), samples.len()));
    }
    for ((name, bytes), msg) in vectors.iter().zip(&samples) {
        if msg.kind().name() != name {
            failures.push(format!("vector {name} paired with {}", msg.kind().name()));
        }
        if &msg.encode() != bytes {
            failures.push(format!("{name}: encoding differs"));
        }
        match ControlMessage::decode(bytes) {
            Ok((m, used)) if &m == msg && used == bytes.len() => {}
            other => failures.push(format!("{name}: decode gave {other:?}")),
        }
    }
    CriterionResult::new(
        9,
        "wire golden vectors",
        &failures,
        format!("{} kinds round-trip bit-exactly", vectors.len()),
    )
}

/// Runs every criterion in order.
pub fn verify_all(opts: &VerifyOptions, mut report: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut cache = BTreeMap::new();
    let mut cached = |n: u32| -> Result<u64, BenchError> {
        if let Some(&c) = cache.get(&n) {
            return Ok(c);
        }
        let c = fault_free_checksum(opts, n)?;
        cache.insert(n, c);
        Ok(c)
    };
    let mut out = Vec::new();
    let mut push = |r: CriterionResult| {
        report(&r);
        out.push(r);
    };
    push(end_to_end(opts, &mut cached));
    push(state_machine(opts));
    push(placement(opts));
    push(recovery_ordering(opts));
    push(recovery_scaling(opts));
    push(node_failure(opts, &mut cached));
    push(checkpoint_format(&crc32_bitwise));
    push(statistics());
    push(wire_golden());
    out
}
