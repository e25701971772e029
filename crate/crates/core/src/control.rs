//! The root process: launches daemons, detects failures and drives recovery.
//!
//! All state lives in [`Root`] and is mutated only by its event loop.
//! Daemon connections are read by helper threads that enqueue events.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{TcpListener, TcpStream};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::daemon::spawn_reader;
use crate::outbox::Outbox;
use crate::topology::{
    plan_recovery, DaemonId, Epoch, FailedEntity, PlacementError, ProcessState, RankId,
    ReinitAssignment, Topology,
};
use crate::wire::{ControlMessage, DoneReport, Message, Route};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("launch timed out: {0}")]
    LaunchTimeout(String),
    #[error("run exceeded its deadline of {0:?}")]
    RunTimeout(Duration),
    #[error("unrecoverable failure: {0}")]
    UnrecoverableFailure(String),
    #[error("no checkpoint reports to commit")]
    NoReports,
    #[error("inconsistent results: {0}")]
    Inconsistent(String),
    #[error("daemon spawn failed: {0}")]
    SpawnFailed(std::io::Error),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Cr,
    Reinit,
    Ulfm,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Cr, Strategy::Reinit, Strategy::Ulfm];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cr => "cr",
            Strategy::Reinit => "reinit",
            Strategy::Ulfm => "ulfm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Launching,
    Running,
    Recovering,
    Done,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct LaunchConfig {
    /// Executable providing the `daemon` and `worker` subcommands.
    pub exe: PathBuf,
    pub world_size: u32,
    pub num_daemons: u32,
    pub spares: u32,
    pub strategy: Strategy,
    /// Environment for every daemon (and so every worker).
    pub env: Vec<(String, String)>,
    /// Overrides applied on top of `env` for a CR relaunch.
    pub relaunch_env: Vec<(String, String)>,
    pub launch_timeout: Duration,
    pub run_timeout: Duration,
    /// Optional liveness probe period for daemon channels.
    pub keepalive: Option<Duration>,
    /// Failures tolerated before the run is aborted.
    pub max_failures: usize,
}

impl LaunchConfig {
    pub fn new(exe: PathBuf, world_size: u32, num_daemons: u32, strategy: Strategy) -> Self {
        Self {
            exe,
            world_size,
            num_daemons,
            spares: 0,
            strategy,
            env: Vec::new(),
            relaunch_env: Vec::new(),
            launch_timeout: Duration::from_secs(10),
            run_timeout: Duration::from_secs(300),
            keepalive: None,
            max_failures: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub topology: Topology,
    pub epoch: Epoch,
    pub phase: Phase,
    pub committed_iter: Option<u64>,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Failure(FailedEntity),
    Completion,
}

/// One completed recovery.
#[derive(Debug, Clone)]
pub struct RecoveryRecord {
    pub failed: FailedEntity,
    /// Epoch the world resumed at.
    pub epoch: Epoch,
    pub assignment: ReinitAssignment,
    pub commit: Option<u64>,
    /// Detection at the root until the post-recovery barrier release.
    pub t_recovery: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub checksum: u64,
    pub residual: f64,
    pub dones: BTreeMap<RankId, DoneReport>,
    pub recoveries: Vec<RecoveryRecord>,
    pub topology: Topology,
    pub epoch: Epoch,
    pub committed_iter: Option<u64>,
    pub t_total: f64,
}

/// Globally committed iteration: the minimum of each rank's latest report.
pub fn collect_commit<I: IntoIterator<Item = u64>>(reports: I) -> Result<u64, ControlError> {
    reports.into_iter().min().ok_or(ControlError::NoReports)
}

enum Event {
    Accepted { conn: u64, stream: TcpStream },
    Msg { conn: u64, msg: ControlMessage },
    Closed { conn: u64 },
}

struct InFlight {
    failed: FailedEntity,
    lost: BTreeSet<RankId>,
    assignment: ReinitAssignment,
    commit: Option<u64>,
    started: Instant,
    shrink: BTreeSet<RankId>,
    spawn_reqs: usize,
    revoked: bool,
}

pub struct Root {
    cfg: LaunchConfig,
    addr: String,
    events: Receiver<Event>,
    state: RunState,
    conns: HashMap<u64, (TcpStream, Outbox)>,
    conn_daemon: HashMap<u64, DaemonId>,
    daemon_conn: BTreeMap<DaemonId, u64>,
    procs: Vec<Child>,
    barriers: BTreeMap<(Epoch, u64), BTreeSet<RankId>>,
    reports: BTreeMap<RankId, u64>,
    dones: BTreeMap<RankId, DoneReport>,
    inflight: Option<InFlight>,
    recoveries: Vec<RecoveryRecord>,
    failures: usize,
    started: Instant,
    last_ping: Instant,
}

impl Root {
    /// Binds the control listener. Nothing is spawned yet.
    pub fn new(cfg: LaunchConfig) -> Result<Self, ControlError> {
        if cfg.world_size == 0 || cfg.num_daemons == 0 {
            return Err(ControlError::UnrecoverableFailure(
                "world size and daemon count must be positive".into(),
            ));
        }
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let (tx, events) = mpsc::channel();
        spawn_acceptor(listener, tx);
        Ok(Self {
            state: RunState {
                topology: Topology::round_robin(cfg.world_size, cfg.num_daemons, cfg.spares),
                epoch: Epoch(0),
                phase: Phase::Launching,
                committed_iter: None,
            },
            cfg,
            addr,
            events,
            conns: HashMap::new(),
            conn_daemon: HashMap::new(),
            daemon_conn: BTreeMap::new(),
            procs: Vec::new(),
            barriers: BTreeMap::new(),
            reports: BTreeMap::new(),
            dones: BTreeMap::new(),
            inflight: None,
            recoveries: Vec::new(),
            failures: 0,
            started: Instant::now(),
            last_ping: Instant::now(),
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    /// Starts the daemon tree and waits until every worker has passed the
    /// startup barrier.
    pub fn launch(&mut self) -> Result<&RunState, ControlError> {
        self.started = Instant::now();
        let env = self.cfg.env.clone();
        self.start_tree(&env)?;
        let deadline = Instant::now() + self.cfg.launch_timeout;
        loop {
            if self.state.phase == Phase::Running {
                return Ok(&self.state);
            }
            if Instant::now() >= deadline {
                let msg = format!(
                    "{} of {} daemons registered",
                    self.daemon_conn.len(),
                    self.state.topology.daemons().count()
                );
                self.abort();
                return Err(ControlError::LaunchTimeout(msg));
            }
            if let Some(f) = self.step(deadline)? {
                self.abort();
                return Err(ControlError::UnrecoverableFailure(format!(
                    "{f:?} before all workers registered"
                )));
            }
        }
    }

    /// Processes events until the first failure or until every worker has
    /// reported completion.
    pub fn monitor(&mut self) -> Result<Outcome, ControlError> {
        let deadline = self.started + self.cfg.run_timeout;
        loop {
            if self.dones.len() == self.cfg.world_size as usize {
                return Ok(Outcome::Completion);
            }
            if Instant::now() >= deadline {
                self.abort();
                return Err(ControlError::RunTimeout(self.cfg.run_timeout));
            }
            if let Some(f) = self.step(deadline)? {
                return Ok(Outcome::Failure(f));
            }
        }
    }

    /// Reacts to a detected failure according to the configured strategy.
    pub fn handle_failure(&mut self, failed: FailedEntity) -> Result<&RunState, ControlError> {
        if self.state.phase != Phase::Running {
            self.abort();
            return Err(ControlError::UnrecoverableFailure(format!(
                "{failed:?} while {:?} at {}",
                self.state.phase, self.state.epoch
            )));
        }
        self.failures += 1;
        if self.failures > self.cfg.max_failures {
            self.abort();
            return Err(ControlError::UnrecoverableFailure(format!(
                "{} failures exceed the limit of {}",
                self.failures, self.cfg.max_failures
            )));
        }
        let started = Instant::now();
        let topo = &self.state.topology;
        let lost: BTreeSet<RankId> = match failed {
            FailedEntity::Rank(r) => [r].into_iter().collect(),
            FailedEntity::Daemon(d) => topo.children(d).cloned().unwrap_or_default(),
        };
        let assignment = match plan_recovery(topo, failed) {
            Ok(a) => a,
            Err(e) => {
                self.abort();
                return Err(e.into());
            }
        };
        if let FailedEntity::Daemon(d) = failed {
            self.state.topology.mark_dead(d);
            self.drop_daemon(d);
        }
        let commit = if self.reports.len() == self.cfg.world_size as usize {
            Some(collect_commit(self.reports.values().copied())?)
        } else {
            None
        };
        if let (Some(prev), Some(c)) = (self.state.committed_iter, commit) {
            debug_assert!(c >= prev, "commit went backwards: {prev} -> {c}");
        }
        if commit.is_some() {
            self.state.committed_iter = commit;
        }
        log::info!(
            "root: {failed:?} at {} ({}), lost {:?}, commit {:?}",
            self.state.epoch,
            self.cfg.strategy,
            lost,
            commit
        );
        self.state.phase = Phase::Recovering;
        self.inflight = Some(InFlight {
            failed,
            lost: lost.clone(),
            assignment: assignment.clone(),
            commit,
            started,
            shrink: BTreeSet::new(),
            spawn_reqs: 0,
            revoked: false,
        });
        match self.cfg.strategy {
            Strategy::Reinit => {
                self.advance_epoch(&assignment, commit);
                let epoch = self.state.epoch;
                let dropped: usize = self.conns.values().map(|(_, o)| o.purge_before(epoch)).sum();
                log::debug!("root: dropped {dropped} queued frames from before {epoch}");
                self.broadcast(Message::ReinitCmd { assignment, commit });
            }
            Strategy::Ulfm => {
                let ranks = lost.into_iter().collect();
                self.broadcast(Message::ProcFailed { ranks });
            }
            Strategy::Cr => self.relaunch(commit)?,
        }
        Ok(&self.state)
    }

    /// Launch, then monitor and recover until completion.
    pub fn run(mut self) -> Result<RunReport, ControlError> {
        self.launch()?;
        loop {
            match self.monitor()? {
                Outcome::Completion => break,
                Outcome::Failure(f) => {
                    self.handle_failure(f)?;
                }
            }
        }
        self.finish()
    }

    fn finish(&mut self) -> Result<RunReport, ControlError> {
        let t_total = self.started.elapsed().as_secs_f64();
        self.state.phase = Phase::Done;
        self.broadcast(Message::Shutdown);
        let deadline = Instant::now() + Duration::from_secs(10);
        while !self.procs.is_empty() && Instant::now() < deadline {
            self.procs
                .retain_mut(|p| !matches!(p.try_wait(), Ok(Some(_))));
            thread::sleep(Duration::from_millis(2));
        }
        self.kill_all();

        let first = self.dones.values().next().cloned().ok_or_else(|| {
            ControlError::Inconsistent("run finished without reports".into())
        })?;
        if let Some(bad) = self.dones.values().find(|d| d.checksum != first.checksum) {
            return Err(ControlError::Inconsistent(format!(
                "rank {} checksum {:#x} != rank {} checksum {:#x}",
                bad.rank, bad.checksum, first.rank, first.checksum
            )));
        }
        Ok(RunReport {
            checksum: first.checksum,
            residual: first.residual,
            dones: std::mem::take(&mut self.dones),
            recoveries: std::mem::take(&mut self.recoveries),
            topology: self.state.topology.clone(),
            epoch: self.state.epoch,
            committed_iter: self.state.committed_iter,
            t_total,
        })
    }

    fn spawn_daemons(&mut self, env: &[(String, String)]) -> Result<(), ControlError> {
        let slots = self.cfg.world_size.div_ceil(self.cfg.num_daemons);
        let ids: Vec<DaemonId> = self.state.topology.daemons().map(|(d, _)| d).collect();
        for d in ids {
            let child = Command::new(&self.cfg.exe)
                .arg("daemon")
                .args(["--root-addr", &self.addr])
                .args(["--id", &d.0.to_string()])
                .args(["--slots", &slots.to_string()])
                .args(["--world-size", &self.cfg.world_size.to_string()])
                .envs(env.iter().map(|(k, v)| (k, v)))
                .stdin(Stdio::null())
                .process_group(0)
                .spawn()
                .map_err(ControlError::SpawnFailed)?;
            self.procs.push(child);
        }
        Ok(())
    }

    fn start_tree(&mut self, env: &[(String, String)]) -> Result<(), ControlError> {
        if let Err(e) = self.spawn_daemons(env) {
            self.abort();
            return Err(e);
        }
        Ok(())
    }

    /// Sent once every daemon of the current tree has registered.
    fn spawn_all(&mut self) {
        let topo = &self.state.topology;
        let assignment = ReinitAssignment(
            topo.daemons()
                .flat_map(|(d, rec)| rec.children.iter().map(move |&r| (d, r)))
                .collect(),
        );
        let commit = self.state.committed_iter.filter(|_| self.state.epoch.0 > 0);
        self.broadcast(Message::SpawnCmd {
            assignment,
            commit,
            state: ProcessState::New,
        });
    }

    /// CR: tear the whole tree down and deploy a fresh one at the next epoch.
    fn relaunch(&mut self, commit: Option<u64>) -> Result<(), ControlError> {
        self.kill_all();
        self.conns.clear();
        self.conn_daemon.clear();
        self.daemon_conn.clear();
        self.state.topology =
            Topology::round_robin(self.cfg.world_size, self.cfg.num_daemons, self.cfg.spares);
        self.state.epoch = self.state.epoch.next();
        self.state.committed_iter = commit.or(self.state.committed_iter);
        self.reset_epoch_state(commit);
        let mut env = self.cfg.env.clone();
        for (k, v) in &self.cfg.relaunch_env {
            env.retain(|(ek, _)| ek != k);
            env.push((k.clone(), v.clone()));
        }
        self.start_tree(&env)
    }

    fn advance_epoch(&mut self, assignment: &ReinitAssignment, commit: Option<u64>) {
        self.state.epoch = self.state.epoch.next();
        self.state.topology.apply(assignment);
        self.reset_epoch_state(commit);
    }

    fn reset_epoch_state(&mut self, commit: Option<u64>) {
        // survivors may enter the next epoch's barrier before the root does
        let epoch = self.state.epoch;
        self.barriers.retain(|&(e, _), _| e >= epoch);
        self.dones.clear();
        self.reports.clear();
        if let Some(c) = commit {
            self.reports = (0..self.cfg.world_size).map(|r| (RankId(r), c)).collect();
        }
    }

    fn drop_daemon(&mut self, d: DaemonId) {
        if let Some(conn) = self.daemon_conn.remove(&d) {
            self.conn_daemon.remove(&conn);
            if let Some((s, _)) = self.conns.remove(&conn) {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
        }
    }

    fn send_daemon(&mut self, d: DaemonId, bytes: &[u8]) {
        let Some(conn) = self.daemon_conn.get(&d) else {
            return;
        };
        if let Some((_, out)) = self.conns.get(conn) {
            if !out.push(bytes.to_vec()) {
                log::debug!("root: write to daemon {} failed", d.0);
            }
        }
    }

    fn broadcast(&mut self, body: Message) {
        let bytes = ControlMessage::new(self.state.epoch, body).encode();
        let alive: Vec<DaemonId> = self.state.topology.alive_daemons().collect();
        for d in alive {
            self.send_daemon(d, &bytes);
        }
    }

    fn forward(&mut self, to: RankId, bytes: &[u8]) {
        if let Some(d) = self.state.topology.parent(to) {
            if self.state.topology.daemon(d).is_some_and(|r| r.alive) {
                self.send_daemon(d, bytes);
            }
        }
    }

    /// Handles one event (or a tick). Returns a detected failure.
    fn step(&mut self, deadline: Instant) -> Result<Option<FailedEntity>, ControlError> {
        let tick = Duration::from_millis(100).min(deadline.saturating_duration_since(Instant::now()));
        let ev = match self.events.recv_timeout(tick) {
            Ok(ev) => ev,
            Err(RecvTimeoutError::Timeout) => return Ok(self.keepalive()),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(ControlError::UnrecoverableFailure("listener stopped".into()))
            }
        };
        match ev {
            Event::Accepted { conn, stream } => {
                if let Ok(out) = stream.try_clone().and_then(Outbox::new) {
                    self.conns.insert(conn, (stream, out));
                }
                Ok(None)
            }
            Event::Closed { conn } => {
                self.conns.remove(&conn);
                let Some(d) = self.conn_daemon.remove(&conn) else {
                    return Ok(None);
                };
                self.daemon_conn.remove(&d);
                let alive = self.state.topology.daemon(d).is_some_and(|r| r.alive);
                if alive && self.state.phase != Phase::Done {
                    log::info!("root: daemon {} channel broke", d.0);
                    return Ok(Some(FailedEntity::Daemon(d)));
                }
                Ok(None)
            }
            Event::Msg { conn, msg } => self.on_message(conn, msg),
        }
    }

    fn keepalive(&mut self) -> Option<FailedEntity> {
        let period = self.cfg.keepalive?;
        if self.last_ping.elapsed() < period {
            return None;
        }
        self.last_ping = Instant::now();
        let bytes = ControlMessage::new(self.state.epoch, Message::Ping).encode();
        let alive: Vec<DaemonId> = self.state.topology.alive_daemons().collect();
        for d in alive {
            let conn = self.daemon_conn.get(&d).copied();
            let ok = conn
                .and_then(|c| self.conns.get(&c))
                .is_some_and(|(_, out)| out.push(bytes.clone()));
            if !ok && conn.is_some() {
                return Some(FailedEntity::Daemon(d));
            }
        }
        None
    }

    fn on_message(
        &mut self,
        conn: u64,
        msg: ControlMessage,
    ) -> Result<Option<FailedEntity>, ControlError> {
        if let Message::RegisterDaemon { daemon, pid } = msg.body {
            let known = self.state.topology.daemon(daemon).is_some_and(|r| r.alive);
            if !known || self.daemon_conn.contains_key(&daemon) {
                log::warn!("root: rejecting daemon {} (pid {pid})", daemon.0);
                self.conns.remove(&conn);
                return Ok(None);
            }
            log::debug!("root: daemon {} registered (pid {pid})", daemon.0);
            self.conn_daemon.insert(conn, daemon);
            self.daemon_conn.insert(daemon, conn);
            if self.daemon_conn.len() == self.state.topology.alive_daemons().count() {
                self.spawn_all();
            }
            return Ok(None);
        }
        if !self.conn_daemon.contains_key(&conn) || msg.is_stale(self.state.epoch) {
            return Ok(None);
        }
        let epoch = msg.epoch;
        match msg.body {
            Message::FaultNotify { rank } => {
                if self.state.phase == Phase::Done {
                    return Ok(None);
                }
                log::info!("root: rank {} failed", rank.0);
                return Ok(Some(FailedEntity::Rank(rank)));
            }
            Message::BarrierEnter { rank, seq } => {
                let n = self.cfg.world_size as usize;
                let set = self.barriers.entry((epoch, seq)).or_default();
                set.insert(rank);
                if set.len() == n {
                    self.barriers.remove(&(epoch, seq));
                    self.broadcast(Message::BarrierRelease { seq });
                    if seq == 0 {
                    self.on_epoch_barrier();
                    }
                }
            }
            Message::CkptReport { rank, iter } => {
                self.reports.insert(rank, iter);
            }
            Message::WorkerDone(report) => {
                self.dones.insert(report.rank, report);
            }
            Message::Revoke => {
                if let Some(f) = self.inflight.as_mut() {
                    if !f.revoked {
                        f.revoked = true;
                        self.broadcast(Message::Revoke);
                    }
                }
            }
            Message::ShrinkEnter { rank } => self.on_shrink_enter(rank),
            Message::SpawnReq { ranks } => self.on_spawn_req(ranks)?,
            Message::Ping => {}
            body => {
                let m = ControlMessage::new(epoch, body);
                match m.route(self.cfg.world_size) {
                    Route::Rank(r) => {
                        let bytes = m.encode();
                        self.forward(r, &bytes);
                    }
                    _ => log::debug!("root: ignoring {:?}", m.kind()),
                }
            }
        }
        Ok(None)
    }

    fn on_epoch_barrier(&mut self) {
        match self.state.phase {
            Phase::Launching => {
                log::info!(
                    "root: launch complete in {:.3}s",
                    self.started.elapsed().as_secs_f64()
                );
                self.state.phase = Phase::Running;
            }
            Phase::Recovering => {
                let Some(f) = self.inflight.take() else { return };
                let t = f.started.elapsed().as_secs_f64();
                log::info!("root: recovered at {} in {t:.4}s", self.state.epoch);
                self.recoveries.push(RecoveryRecord {
                    failed: f.failed,
                    epoch: self.state.epoch,
                    assignment: f.assignment,
                    commit: f.commit,
                    t_recovery: t,
                });
                self.state.phase = Phase::Running;
            }
            _ => {}
        }
    }

    fn on_shrink_enter(&mut self, rank: RankId) {
        let n = self.cfg.world_size;
        let Some(f) = self.inflight.as_mut() else { return };
        f.shrink.insert(rank);
        let survivors: Vec<RankId> = (0..n).map(RankId).filter(|r| !f.lost.contains(r)).collect();
        if f.shrink.len() == survivors.len() {
            let commit = f.commit;
            self.broadcast(Message::ShrinkResult {
                commit,
                members: survivors,
            });
        }
    }

    /// Every survivor asks once its agreement finished; the epoch only moves
    /// when all have, so no agreement traffic is still in flight.
    fn on_spawn_req(&mut self, ranks: Vec<RankId>) -> Result<(), ControlError> {
        let n = self.cfg.world_size as usize;
        let Some(f) = self.inflight.as_mut() else {
            return Ok(());
        };
        let asked: BTreeSet<RankId> = ranks.into_iter().collect();
        if asked != f.lost {
            let msg = format!("spawn request for {asked:?}, lost {:?}", f.lost);
            self.abort();
            return Err(ControlError::Inconsistent(msg));
        }
        f.spawn_reqs += 1;
        if f.spawn_reqs < n - f.lost.len() {
            return Ok(());
        }
        let assignment = f.assignment.clone();
        let commit = f.commit;
        self.advance_epoch(&assignment, commit);
        self.broadcast(Message::SpawnCmd {
            assignment,
            commit,
            state: ProcessState::Restarted,
        });
        Ok(())
    }

    fn kill_all(&mut self) {
        for p in &mut self.procs {
            // SAFETY: each daemon leads its own process group.
            unsafe {
                libc::kill(-(p.id() as i32), libc::SIGKILL);
            }
            let _ = p.wait();
        }
        self.procs.clear();
    }

    fn abort(&mut self) {
        self.state.phase = Phase::Aborted;
        self.kill_all();
    }
}

impl Drop for Root {
    fn drop(&mut self) {
        self.kill_all();
    }
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Event>) {
    thread::spawn(move || {
        for (conn, stream) in listener.incoming().enumerate() {
            let Ok(stream) = stream else { continue };
            let _ = stream.set_nodelay(true);
            let conn = conn as u64;
            let Ok(read_half) = stream.try_clone() else {
                continue;
            };
            if tx.send(Event::Accepted { conn, stream }).is_err() {
                return;
            }
            spawn_reader(
                tx.clone(),
                read_half,
                move |msg| Event::Msg { conn, msg },
                Event::Closed { conn },
            );
        }
    });
}
