//! End-to-end runs of the process tree at small sizes.

mod common;

use std::process::Command;

use common::{exe, serial_checksum, small};
use reinit_core::bench::verify::state_violations;
use reinit_core::bench::{csv_rows, run_experiment, run_once, run_strategy};
use reinit_core::bench::csv::HEADER;
use reinit_core::{CkptMode, DaemonId, Epoch, FailedEntity, InjectKind, ProcessState, RankId, Strategy};

const CELLS: [(Strategy, CkptMode, InjectKind); 5] = [
    (Strategy::Reinit, CkptMode::Buddy, InjectKind::Process),
    (Strategy::Reinit, CkptMode::File, InjectKind::Node),
    (Strategy::Ulfm, CkptMode::Buddy, InjectKind::Process),
    (Strategy::Cr, CkptMode::File, InjectKind::Process),
    (Strategy::Cr, CkptMode::File, InjectKind::Node),
];

#[test]
fn fault_free_runs_match_serial_solver() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    for strategy in Strategy::ALL {
        for (world, daemons) in [(1, 1), (3, 2), (5, 3)] {
            let cfg = small(dir.path(), world, daemons, strategy, CkptMode::File, InjectKind::None);
            let out = run_once(&cfg).unwrap();
            assert_eq!(out.report.checksum, serial_checksum(world, 10, 64), "{strategy} n={world}");
            assert!(out.report.recoveries.is_empty());
            assert_eq!(out.report.epoch, Epoch(0));
            assert_eq!(out.report.dones.len(), world as usize);
        }
    }
}

#[test]
fn recovered_worlds_span_every_rank() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    let n = 5u64;
    for (strategy, ckpt, inject) in CELLS {
        for seed in 0..3 {
            let mut cfg = small(dir.path(), n as u32, 2, strategy, ckpt, inject);
            cfg.app = "ranksum".into();
            cfg.seed = seed;
            let out = run_once(&cfg).unwrap();
            let r = &out.report;
            assert_eq!(r.checksum, 10 * n * (n - 1) / 2, "{strategy} {ckpt:?} {inject} seed {seed}");
            assert_eq!(r.recoveries.len(), 1);
            assert_eq!(r.epoch, Epoch(1));
            let ids: Vec<RankId> = r.dones.keys().copied().collect();
            assert_eq!(ids, (0..n as u32).map(RankId).collect::<Vec<_>>());
        }
    }
}

#[test]
fn injected_runs_match_serial_solver() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    for (strategy, ckpt, inject) in CELLS {
        let mut cfg = small(dir.path(), 6, 3, strategy, ckpt, inject);
        cfg.seed = 21;
        let out = run_once(&cfg).unwrap();
        assert_eq!(out.report.checksum, serial_checksum(6, 10, 64), "{strategy} {inject}");
        let rec = &out.report.recoveries[0];
        let plan = out.plan;
        // the commit precedes the failing iteration
        if let Some(c) = rec.commit {
            assert!(c < plan.iteration);
        }
        match inject {
            InjectKind::Process => {
                assert_eq!(rec.failed, FailedEntity::Rank(plan.victim));
            }
            _ => assert!(matches!(rec.failed, FailedEntity::Daemon(_))),
        }
        assert!(rec.t_recovery > 0.0);
    }
}

#[test]
fn process_states_follow_the_machine() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    for (strategy, ckpt, inject) in CELLS.into_iter().filter(|c| c.0 != Strategy::Cr) {
        for seed in 0..4 {
            let mut cfg = small(dir.path(), 4, 2, strategy, ckpt, inject);
            cfg.seed = seed;
            let out = run_once(&cfg).unwrap();
            assert_eq!(state_violations(&out), Vec::<String>::new(), "{strategy} seed {seed}");
        }
    }
    // CR relaunches everything, so every process starts fresh
    let mut cfg = small(dir.path(), 4, 2, Strategy::Cr, CkptMode::File, InjectKind::Process);
    cfg.seed = 1;
    let out = run_once(&cfg).unwrap();
    for d in out.report.dones.values() {
        assert_eq!(d.states, vec![ProcessState::New]);
    }
}

#[test]
fn node_failure_moves_ranks_to_least_loaded_daemon() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    // 6 ranks on 3 daemons (2 each) plus an empty spare daemon 3
    let mut cfg = small(dir.path(), 6, 3, Strategy::Reinit, CkptMode::File, InjectKind::Node);
    cfg.plan_override = Some(reinit_core::InjectionPlan {
        kind: InjectKind::Node,
        iteration: 4,
        victim: RankId(1),
        seed: 0,
    });
    let out = run_once(&cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.checksum, serial_checksum(6, 10, 64));
    assert_eq!(r.recoveries[0].failed, FailedEntity::Daemon(DaemonId(1)));
    let moved: Vec<RankId> = r.topology.children(DaemonId(3)).unwrap().iter().copied().collect();
    assert_eq!(moved, vec![RankId(1), RankId(4)]);
    assert!(!r.topology.daemon(DaemonId(1)).unwrap().alive);
    assert_eq!(r.topology.live_rank_count(), 6);
}

#[test]
fn phase_accounting() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    let none = small(dir.path(), 3, 1, Strategy::Reinit, CkptMode::None, InjectKind::None);
    for t in run_strategy(&none).unwrap() {
        assert_eq!((t.t_ckpt_write, t.t_ckpt_read, t.t_recovery), (0.0, 0.0, 0.0));
        assert!(t.t_app > 0.0 && t.t_total >= t.phases_sum());
    }
    let file = small(dir.path(), 3, 1, Strategy::Reinit, CkptMode::File, InjectKind::None);
    for t in run_strategy(&file).unwrap() {
        assert!(t.t_ckpt_write > 0.0);
        assert_eq!((t.t_ckpt_read, t.t_recovery), (0.0, 0.0));
        assert!(t.t_total >= t.phases_sum());
    }
    for (strategy, ckpt, inject) in CELLS {
        let mut cfg = small(dir.path(), 4, 2, strategy, ckpt, inject);
        cfg.seed = 5;
        cfg.repetitions = 2;
        for t in run_strategy(&cfg).unwrap() {
            for v in [t.t_app, t.t_ckpt_write, t.t_ckpt_read, t.t_recovery] {
                assert!(v >= 0.0);
            }
            assert!(t.t_recovery > 0.0);
            assert!(t.t_total >= t.phases_sum(), "{strategy}: {t:?}");
        }
    }
}

#[test]
fn repetitions_are_independent() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 4, 2, Strategy::Reinit, CkptMode::Buddy, InjectKind::Process);
    cfg.repetitions = 3;
    cfg.seed = 9;
    let outs = run_experiment(&cfg).unwrap();
    assert_eq!(outs.len(), 3);
    let want = serial_checksum(4, 10, 64);
    for o in &outs {
        assert_eq!(o.report.checksum, want);
        assert_eq!(o.plan, outs[0].plan);
    }
    let rows = csv_rows(&cfg, &outs.iter().map(|o| o.timing).collect::<Vec<_>>());
    assert_eq!(rows.iter().map(|r| r.rep).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn invalid_cells_are_rejected_before_launch() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    let cr_buddy = small(dir.path(), 4, 2, Strategy::Cr, CkptMode::Buddy, InjectKind::Process);
    assert!(run_once(&cr_buddy).is_err());
    let buddy_node = small(dir.path(), 4, 2, Strategy::Reinit, CkptMode::Buddy, InjectKind::Node);
    assert!(run_once(&buddy_node).is_err());
}

#[test]
fn cli_writes_csv() {
    let _guard = common::serial();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let status = Command::new(exe())
        .args(["run", "--n", "4", "--daemons", "2", "--strategy", "reinit", "--ckpt", "buddy"])
        .args(["--inject", "proc", "--seed", "3", "--iters", "8", "--reps", "2", "--vec-len", "32"])
        .arg("--ckpt-dir")
        .arg(dir.path())
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(&r[..6], &["jacobi", "reinit", "buddy", "proc", "4", &i.to_string()]);
        let t: Vec<f64> = r[6..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(t.len(), 5);
        assert!(t[3] > 0.0);
    }
}

#[test]
fn cli_rejects_cr_with_buddy() {
    let _guard = common::serial();
    let output = Command::new(exe())
        .args(["run", "--n", "4", "--strategy", "cr", "--ckpt", "buddy", "--reps", "1"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("CR needs file checkpoints"));
}
