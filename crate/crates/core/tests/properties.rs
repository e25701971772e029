use std::collections::BTreeSet;
use std::io::Cursor;

use proptest::collection::vec;
use proptest::prelude::*;

use reinit_core::bench::stats::{ci95, median};
use reinit_core::wire::{read_frame, write_frame, DoneReport};
use reinit_core::{
    buddy_of, collect_commit, make_plan, plan_recovery, Checkpoint, CheckpointError,
    ControlMessage, DaemonId, Epoch, FailedEntity, InjectKind, Message, PlacementError,
    ProcessState, RankId, ReinitAssignment, Topology,
};

/// Loads per daemon plus liveness; ranks are numbered consecutively.
fn topology_strategy() -> impl Strategy<Value = (Vec<(usize, bool)>, usize)> {
    (vec((0usize..12, any::<bool>()), 1..9), any::<usize>())
}

fn build(daemons: &[(usize, bool)]) -> Topology {
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
    t
}

fn opt_iter() -> impl Strategy<Value = Option<u64>> {
    prop_oneof![Just(None), (0..u64::MAX).prop_map(Some)]
}

fn ranks() -> impl Strategy<Value = Vec<RankId>> {
    vec(any::<u32>().prop_map(RankId), 0..8)
}

fn assignment() -> impl Strategy<Value = ReinitAssignment> {
    vec((any::<u32>(), any::<u32>()), 0..8).prop_map(|v| {
        ReinitAssignment(v.into_iter().map(|(d, r)| (DaemonId(d), RankId(r))).collect())
    })
}

fn state() -> impl Strategy<Value = ProcessState> {
    prop_oneof![
        Just(ProcessState::New),
        Just(ProcessState::Reinited),
        Just(ProcessState::Restarted)
    ]
}

fn message() -> impl Strategy<Value = Message> {
    let bytes = || vec(any::<u8>(), 0..64);
    prop_oneof![
        (any::<u32>(), any::<u32>())
            .prop_map(|(d, pid)| Message::RegisterDaemon { daemon: DaemonId(d), pid }),
        (any::<u32>(), any::<u32>())
            .prop_map(|(r, pid)| Message::RegisterWorker { rank: RankId(r), pid }),
        any::<u32>().prop_map(|r| Message::FaultNotify { rank: RankId(r) }),
        (assignment(), opt_iter())
            .prop_map(|(assignment, commit)| Message::ReinitCmd { assignment, commit }),
        opt_iter().prop_map(|commit| Message::Rollback { commit }),
        (any::<u32>(), any::<u64>())
            .prop_map(|(r, seq)| Message::BarrierEnter { rank: RankId(r), seq }),
        any::<u64>().prop_map(|seq| Message::BarrierRelease { seq }),
        (any::<u32>(), any::<u64>(), bytes()).prop_map(|(r, iter, payload)| Message::CkptPut {
            rank: RankId(r),
            iter,
            payload
        }),
        (any::<u32>(), any::<u64>())
            .prop_map(|(r, iter)| Message::CkptGet { rank: RankId(r), iter }),
        (any::<u32>(), opt_iter(), bytes()).prop_map(|(r, iter, payload)| Message::CkptData {
            rank: RankId(r),
            iter,
            payload
        }),
        (any::<u32>(), any::<u64>())
            .prop_map(|(r, iter)| Message::CkptReport { rank: RankId(r), iter }),
        Just(Message::Shutdown),
        (any::<u32>(), any::<u32>(), any::<u64>(), bytes()).prop_map(|(s, d, tag, payload)| {
            Message::AppData {
                src: RankId(s),
                dst: RankId(d),
                tag,
                payload,
            }
        }),
        (
            any::<u32>(),
            any::<i32>(),
            any::<u64>(),
            vec(-1e9f64..1e9, 4),
            vec(state(), 0..4)
        )
            .prop_map(|(r, exit_code, checksum, f, states)| {
                Message::WorkerDone(DoneReport {
                    rank: RankId(r),
                    exit_code,
                    checksum,
                    residual: f[0],
                    t_app: f[1],
                    t_ckpt_write: f[2],
                    t_ckpt_read: f[3],
                    states,
                })
            }),
        ranks().prop_map(|ranks| Message::ProcFailed { ranks }),
        Just(Message::Revoke),
        any::<u32>().prop_map(|r| Message::ShrinkEnter { rank: RankId(r) }),
        (opt_iter(), ranks())
            .prop_map(|(commit, members)| Message::ShrinkResult { commit, members }),
        ranks().prop_map(|ranks| Message::SpawnReq { ranks }),
        (assignment(), opt_iter(), state()).prop_map(|(assignment, commit, state)| {
            Message::SpawnCmd {
                assignment,
                commit,
                state,
            }
        }),
        Just(Message::Ping),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn buddy_of_is_one_cycle(n in 1u32..=1024) {
        let mut seen = BTreeSet::new();
        let mut r = RankId(0);
        for _ in 0..n {
            prop_assert!(seen.insert(r));
            let b = buddy_of(r, n);
            prop_assert_eq!(b, RankId((r.0 + 1) % n));
            r = b;
        }
        prop_assert_eq!(r, RankId(0));
        prop_assert_eq!(seen.len(), n as usize);
    }

    #[test]
    fn daemon_failure_goes_to_argmin((daemons, pick) in topology_strategy()) {
        let t = build(&daemons);
        let victim = pick % daemons.len();
        let lost: Vec<RankId> = t
            .children(DaemonId(victim as u32))
            .map(|c| c.iter().copied().collect())
            .unwrap_or_default();
        // brute force: smallest (load, id) among the other live daemons
        let argmin = daemons
            .iter()
            .enumerate()
            .filter(|&(d, &(_, alive))| d != victim && alive)
            .map(|(d, &(load, _))| (load, d))
            .min()
            .map(|(_, d)| DaemonId(d as u32));
        match plan_recovery(&t, FailedEntity::Daemon(DaemonId(victim as u32))) {
            Ok(a) if lost.is_empty() => prop_assert!(a.is_empty()),
            Ok(a) => {
                let target = argmin.expect("plan found a target the oracle did not");
                prop_assert_eq!(a.ranks().collect::<Vec<_>>(), lost);
                prop_assert!(a.0.iter().all(|&(d, _)| d == target));
            }
            Err(e) => {
                prop_assert_eq!(e, PlacementError::NoAliveDaemons);
                prop_assert!(argmin.is_none());
                prop_assert!(!lost.is_empty());
            }
        }
    }

    #[test]
    fn rank_failure_returns_to_parent((daemons, pick) in topology_strategy()) {
        let t = build(&daemons);
        let total: usize = daemons.iter().map(|d| d.0).sum();
        prop_assume!(total > 0);
        let r = RankId((pick % total) as u32);
        let mut start = 0;
        let parent = daemons
            .iter()
            .enumerate()
            .find_map(|(d, &(load, _))| {
                let hit = (start..start + load).contains(&(r.0 as usize));
                start += load;
                hit.then_some(DaemonId(d as u32))
            })
            .unwrap();
        let a = plan_recovery(&t, FailedEntity::Rank(r)).unwrap();
        prop_assert_eq!(a.0, vec![(parent, r)]);
    }

    #[test]
    fn recovery_preserves_world_size(loads in vec(0usize..10, 2..8), pick in any::<usize>()) {
        let daemons: Vec<(usize, bool)> = loads.iter().map(|&l| (l, true)).collect();
        let t = build(&daemons);
        let victim = DaemonId((pick % loads.len()) as u32);
        let a = plan_recovery(&t, FailedEntity::Daemon(victim)).unwrap();
        let mut after = t.clone();
        after.mark_dead(victim);
        after.apply(&a);
        prop_assert_eq!(after.live_rank_count(), loads.iter().sum::<usize>());
        for (_, rec) in after.daemons().filter(|(d, _)| *d != victim) {
            for r in &rec.children {
                prop_assert!(after.parent(*r).is_some());
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip(rank in any::<u32>(), iter in any::<u64>(), payload in vec(any::<u8>(), 1..512)) {
        let ck = Checkpoint::new(RankId(rank), iter, payload.clone());
        let bytes = ck.encode();
        prop_assert_eq!(&bytes[..4], b"RCK1");
        prop_assert_eq!(bytes.len(), 30 + payload.len());
        let crc = u32::from_le_bytes(bytes[26..30].try_into().unwrap());
        prop_assert_eq!(crc, crc32fast::hash(&payload));
        prop_assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn payload_bit_flip_is_rejected(payload in vec(any::<u8>(), 1..256), at in any::<usize>(), bit in 0u8..8) {
        let bytes = Checkpoint::new(RankId(1), 2, payload.clone()).encode();
        let mut bad = bytes.clone();
        let i = 30 + at % payload.len();
        bad[i] ^= 1 << bit;
        let rejected = matches!(Checkpoint::decode(&bad), Err(CheckpointError::CrcMismatch { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn truncated_checkpoint_is_an_error(payload in vec(any::<u8>(), 1..128), cut in any::<usize>()) {
        let bytes = Checkpoint::new(RankId(0), 0, payload).encode();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn frames_roundtrip(epoch in any::<u64>(), body in message()) {
        let m = ControlMessage::new(Epoch(epoch), body);
        let bytes = m.encode();
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len + 4, bytes.len());
        prop_assert_eq!(u16::from_le_bytes(bytes[4..6].try_into().unwrap()), m.kind() as u16);
        prop_assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), epoch);
        let (back, used) = ControlMessage::decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, m);
    }

    #[test]
    fn frame_streams_roundtrip(msgs in vec((any::<u64>(), message()), 0..8)) {
        let msgs: Vec<ControlMessage> =
            msgs.into_iter().map(|(e, b)| ControlMessage::new(Epoch(e), b)).collect();
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let mut r = Cursor::new(buf);
        for m in &msgs {
            prop_assert_eq!(read_frame(&mut r).unwrap(), Some(m.clone()));
        }
        prop_assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn truncated_frames_never_decode(body in message(), cut in any::<usize>()) {
        let bytes = ControlMessage::new(Epoch(1), body).encode();
        let cut = cut % bytes.len();
        prop_assert!(ControlMessage::decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn stale_fencing(msg_epoch in 0u64..100, current in 0u64..100, body in message()) {
        let m = ControlMessage::new(Epoch(msg_epoch), body);
        let want = msg_epoch < current && !m.is_registration();
        prop_assert_eq!(m.is_stale(Epoch(current)), want);
    }

    #[test]
    fn commit_is_global_min(iters in vec(any::<u64>(), 1..64)) {
        prop_assert_eq!(collect_commit(iters.iter().copied()).unwrap(), *iters.iter().min().unwrap());
    }

    #[test]
    fn plans_are_in_range(seed in any::<u64>(), n in 1u32..256, iters in 1u64..1000) {
        for kind in [InjectKind::Process, InjectKind::Node] {
            let p = make_plan(seed, n, iters, kind);
            prop_assert_eq!(p.kind, kind);
            prop_assert!(p.iteration < iters);
            prop_assert!(p.victim.0 < n);
            prop_assert_eq!(make_plan(seed, n, iters, kind), p);
        }
        prop_assert!(make_plan(seed, n, iters, InjectKind::None).is_none());
    }

    #[test]
    fn ci95_brackets_mean(xs in vec(-1e6f64..1e6, 2..40)) {
        let (m, hw) = ci95(&xs).unwrap();
        let oracle = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!((m - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
        prop_assert!(hw >= 0.0);
        let md = median(&xs).unwrap();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= md && md <= hi);
    }
}

mod store {
    use std::collections::BTreeMap;

    use proptest::collection::vec;
    use proptest::prelude::*;

    use reinit_core::checkpoint::{CkptChannel, WINDOW};
    use reinit_core::{CkptMode, CkptStore, CommError, ProcessState, RankId};

    /// Rank 1 of a three-rank world; the buddy's memory is a map.
    #[derive(Default)]
    struct Mock {
        held: BTreeMap<u64, Vec<u8>>,
        reports: Vec<u64>,
    }

    impl CkptChannel for Mock {
        fn rank(&self) -> RankId {
            RankId(1)
        }
        fn world_size(&self) -> u32 {
            3
        }
        fn put_to_buddy(&mut self, iter: u64, encoded: Vec<u8>) -> Result<(), CommError> {
            self.held.insert(iter, encoded);
            Ok(())
        }
        fn fetch_from_buddy(&mut self, iter: u64) -> Result<Option<Vec<u8>>, CommError> {
            Ok(self.held.get(&iter).cloned())
        }
        fn report(&mut self, iter: u64) -> Result<(), CommError> {
            self.reports.push(iter);
            Ok(())
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn load_after_write_returns_payload(
            payloads in vec(vec(any::<u8>(), 1..64), 1..8),
            buddy in any::<bool>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mode = if buddy { CkptMode::Buddy } else { CkptMode::File };
            let run = Some(dir.path().join("run"));
            let mut ch = Mock::default();
            let mut store = CkptStore::new(mode, RankId(1), 3, run.clone()).unwrap();
            for (i, p) in payloads.iter().enumerate() {
                store.write(&mut ch, i as u64, p).unwrap();
                prop_assert!(store.local_iters().len() <= WINDOW);
            }
            let last = payloads.len() as u64 - 1;
            prop_assert_eq!(&ch.reports, &(0..=last).collect::<Vec<_>>());
            // survivor: from its own memory
            prop_assert_eq!(&store.load(&mut ch, last, ProcessState::Reinited).unwrap(), &payloads[last as usize]);
            // respawned: empty memory, from the buddy or the shared directory
            let mut fresh = CkptStore::new(mode, RankId(1), 3, run).unwrap();
            prop_assert_eq!(&fresh.load(&mut ch, last, ProcessState::Restarted).unwrap(), &payloads[last as usize]);
            if !buddy {
                let files = std::fs::read_dir(dir.path().join("run")).unwrap().count();
                prop_assert!(files <= WINDOW);
            }
        }
    }
}
