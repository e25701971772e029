//! Per-node daemon: spawns and watches local workers, relays their traffic
//! and failures to the root, and executes REINIT commands.
//!
//! One event loop owns every child record; socket readers, the accept loop
//! and per-child wait threads only enqueue events.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::outbox::Outbox;
use crate::topology::{DaemonId, Epoch, ProcessState, RankId, ReinitAssignment};
use crate::wire::{read_frame, ControlMessage, Message, Route, WireError};

const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("cannot reach root at {addr}: {source}")]
    RootUnreachable {
        addr: String,
        source: std::io::Error,
    },
    #[error("spawn of rank {rank} failed: {source}")]
    SpawnFailed {
        rank: RankId,
        source: std::io::Error,
    },
    #[error("root connection lost")]
    RootLost,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    pub root_addr: String,
    pub id: DaemonId,
    pub slots: u32,
    pub world_size: u32,
    /// Executable that implements the `worker` subcommand.
    pub exe: PathBuf,
    /// Appended to every worker command line.
    pub worker_args: Vec<String>,
}

#[derive(Debug)]
pub struct ChildRecord {
    pub rank: RankId,
    pub pid: u32,
    pub state: ProcessState,
    pub alive: bool,
    spawn: u64,
    conn: Option<u64>,
    eof: bool,
    exit: Option<ExitStatus>,
}

enum Event {
    Root(ControlMessage),
    RootClosed,
    Accepted { conn: u64, stream: TcpStream },
    Child { conn: u64, msg: ControlMessage },
    ChildEof { conn: u64 },
    Exited { rank: RankId, spawn: u64, status: ExitStatus },
}

struct Conn {
    stream: TcpStream,
    out: Outbox,
    rank: Option<RankId>,
}

#[derive(Default)]
struct Held {
    key: Option<(Epoch, u64)>,
    /// Entries seen for `key`, flushed or not.
    count: usize,
    bytes: Vec<u8>,
}

pub struct Daemon {
    cfg: DaemonConfig,
    epoch: Epoch,
    addr: String,
    root: TcpStream,
    events: Receiver<Event>,
    tx: Sender<Event>,
    children: BTreeMap<RankId, ChildRecord>,
    conns: HashMap<u64, Conn>,
    pending: BTreeMap<RankId, Vec<Vec<u8>>>,
    /// Barrier entries of local children, sent up together.
    held: Held,
    next_spawn: u64,
    shutdown_at: Option<Instant>,
}

/// Reads frames off `stream` until EOF or error, forwarding each as an event.
pub(crate) fn spawn_reader<E: Send + 'static>(
    tx: Sender<E>,
    stream: TcpStream,
    on_msg: impl Fn(ControlMessage) -> E + Send + 'static,
    on_close: E,
) {
    thread::spawn(move || {
        let mut r = BufReader::with_capacity(1 << 16, stream);
        while let Ok(Some(m)) = read_frame(&mut r) {
            if tx.send(on_msg(m)).is_err() {
                return;
            }
        }
        let _ = tx.send(on_close);
    });
}

impl Daemon {
    /// Binds the worker listener, connects to the root and registers.
    pub fn connect(cfg: DaemonConfig) -> Result<Self, DaemonError> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let root = TcpStream::connect(&cfg.root_addr).map_err(|source| {
            DaemonError::RootUnreachable {
                addr: cfg.root_addr.clone(),
                source,
            }
        })?;
        let _ = root.set_nodelay(true);
        let (tx, events) = mpsc::channel();

        spawn_reader(tx.clone(), root.try_clone()?, Event::Root, Event::RootClosed);

        let accept_tx = tx.clone();
        thread::spawn(move || {
            for (conn, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let conn = conn as u64;
                let Ok(read_half) = stream.try_clone() else { continue };
                if accept_tx.send(Event::Accepted { conn, stream }).is_err() {
                    return;
                }
                spawn_reader(
                    accept_tx.clone(),
                    read_half,
                    move |msg| Event::Child { conn, msg },
                    Event::ChildEof { conn },
                );
            }
        });

        let mut d = Daemon {
            epoch: Epoch(0),
            addr,
            root,
            events,
            tx,
            children: BTreeMap::new(),
            conns: HashMap::new(),
            pending: BTreeMap::new(),
            held: Held::default(),
            next_spawn: 0,
            shutdown_at: None,
            cfg,
        };
        d.send_root(Message::RegisterDaemon {
            daemon: d.cfg.id,
            pid: std::process::id(),
        })?;
        Ok(d)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn children(&self) -> impl Iterator<Item = &ChildRecord> {
        self.children.values()
    }

    fn send_root(&mut self, body: Message) -> Result<(), DaemonError> {
        self.up(ControlMessage::new(self.epoch, body))
    }

    /// Sends `msg` to the root. Barrier entries wait until every live child
    /// has entered the same barrier.
    fn up(&mut self, msg: ControlMessage) -> Result<(), DaemonError> {
        let Message::BarrierEnter { seq, .. } = msg.body else {
            self.flush_held()?;
            return self.root.write_all(&msg.encode()).map_err(|_| DaemonError::RootLost);
        };
        let key = (msg.epoch, seq);
        if self.held.key != Some(key) {
            self.flush_held()?;
            self.held = Held {
                key: Some(key),
                ..Held::default()
            };
        }
        self.held.bytes.extend_from_slice(&msg.encode());
        self.held.count += 1;
        if self.held.count >= self.children.values().filter(|c| c.alive).count() {
            self.flush_held()?;
        }
        Ok(())
    }

    fn flush_held(&mut self) -> Result<(), DaemonError> {
        if self.held.bytes.is_empty() {
            return Ok(());
        }
        let bytes = std::mem::take(&mut self.held.bytes);
        self.root.write_all(&bytes).map_err(|_| DaemonError::RootLost)
    }

    /// Event loop; returns after an orderly SHUTDOWN once all children exit.
    pub fn run(mut self) -> Result<(), DaemonError> {
        loop {
            if let Some(t) = self.shutdown_at {
                if self.children.values().all(|c| !c.alive) {
                    return Ok(());
                }
                if Instant::now() >= t {
                    log::warn!("daemon {} killing children after grace period", self.cfg.id.0);
                    self.kill_children();
                    return Ok(());
                }
            }
            let ev = match self.events.recv_timeout(Duration::from_millis(200)) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return Err(DaemonError::RootLost),
            };
            match ev {
                Event::Root(m) => self.on_root(m)?,
                Event::RootClosed => {
                    if self.shutdown_at.is_none() {
                        log::error!("daemon {} lost the root", self.cfg.id.0);
                    }
                    self.kill_children();
                    return Err(DaemonError::RootLost);
                }
                Event::Accepted { conn, stream } => {
                    if let Ok(out) = stream.try_clone().and_then(Outbox::new) {
                        self.conns.insert(conn, Conn { stream, out, rank: None });
                    }
                }
                Event::Child { conn, msg } => self.on_child_msg(conn, msg)?,
                Event::ChildEof { conn } => self.on_child_eof(conn)?,
                Event::Exited {
                    rank,
                    spawn,
                    status,
                } => self.on_child_exit(rank, spawn, status)?,
            }
        }
    }

    fn kill_children(&mut self) {
        for c in self.children.values_mut().filter(|c| c.alive) {
            // SAFETY: signalling a pid we spawned.
            unsafe {
                libc::kill(c.pid as i32, libc::SIGKILL);
            }
            c.alive = false;
        }
    }

    fn on_root(&mut self, m: ControlMessage) -> Result<(), DaemonError> {
        match m.route(self.cfg.world_size) {
            Route::Rank(r) => {
                let bytes = m.encode();
                self.deliver(r, bytes);
                return Ok(());
            }
            Route::AllWorkers => {
                let bytes = m.encode();
                let ranks: Vec<RankId> = self.children.keys().copied().collect();
                for r in ranks {
                    self.deliver(r, bytes.clone());
                }
                return Ok(());
            }
            Route::Control => {}
        }
        match m.body {
            Message::ReinitCmd { assignment, commit } => {
                self.handle_reinit(&assignment, m.epoch, commit)
            }
            Message::SpawnCmd {
                assignment,
                commit,
                state,
            } => {
                if m.epoch < self.epoch {
                    log::debug!("daemon {} dropping stale spawn", self.cfg.id.0);
                    return Ok(());
                }
                self.epoch = m.epoch;
                let mine: Vec<RankId> = assignment.for_daemon(self.cfg.id).collect();
                for r in mine {
                    self.spawn_child(r, m.epoch, state, commit)?;
                }
                Ok(())
            }
            Message::Shutdown => {
                self.shutdown_at = Some(Instant::now() + SHUTDOWN_GRACE);
                Ok(())
            }
            Message::Ping => Ok(()),
            other => {
                log::debug!("daemon {} ignoring {:?}", self.cfg.id.0, other.kind());
                Ok(())
            }
        }
    }

    /// Rolls back every live local child, then respawns the ranks assigned
    /// here.
    pub fn handle_reinit(
        &mut self,
        assignment: &ReinitAssignment,
        epoch: Epoch,
        commit: Option<u64>,
    ) -> Result<(), DaemonError> {
        if epoch != self.epoch.next() {
            log::debug!(
                "daemon {} dropping REINIT for {epoch} at {}",
                self.cfg.id.0,
                self.epoch
            );
            return Ok(());
        }
        self.epoch = epoch;
        for c in self.conns.values() {
            c.out.purge_before(epoch);
        }
        for q in self.pending.values_mut() {
            q.retain(|b| ControlMessage::decode(b).is_ok_and(|(m, _)| m.epoch >= epoch));
        }
        let rollback = ControlMessage::new(epoch, Message::Rollback { commit }).encode();
        let survivors: Vec<RankId> = self
            .children
            .values_mut()
            .filter(|c| c.alive)
            .map(|c| {
                c.state = ProcessState::Reinited;
                c.rank
            })
            .collect();
        for r in survivors {
            self.deliver(r, rollback.clone());
        }
        let mine: Vec<RankId> = assignment.for_daemon(self.cfg.id).collect();
        for r in mine {
            self.spawn_child(r, epoch, ProcessState::Restarted, commit)?;
        }
        Ok(())
    }

    /// Starts a worker process for `rank`.
    pub fn spawn_child(
        &mut self,
        rank: RankId,
        epoch: Epoch,
        state: ProcessState,
        commit: Option<u64>,
    ) -> Result<(), DaemonError> {
        let commit_arg = commit.map_or_else(|| "none".to_string(), |c| c.to_string());
        let mut child = Command::new(&self.cfg.exe)
            .arg("worker")
            .args(["--rank", &rank.0.to_string()])
            .args(["--epoch", &epoch.0.to_string()])
            .args(["--state", state.name()])
            .args(["--daemon-addr", &self.addr])
            .args(["--commit", &commit_arg])
            .args(&self.cfg.worker_args)
            .stdin(Stdio::null())
            .spawn()
            .map_err(|source| DaemonError::SpawnFailed { rank, source })?;
        let pid = child.id();
        let spawn = self.next_spawn;
        self.next_spawn += 1;
        log::debug!(
            "daemon {} spawned rank {} pid {pid} ({state}, {epoch})",
            self.cfg.id.0,
            rank.0
        );
        let tx = self.tx.clone();
        thread::spawn(move || {
            if let Ok(status) = child.wait() {
                let _ = tx.send(Event::Exited {
                    rank,
                    spawn,
                    status,
                });
            }
        });
        self.pending.remove(&rank);
        self.children.insert(
            rank,
            ChildRecord {
                rank,
                pid,
                state,
                alive: true,
                spawn,
                conn: None,
                eof: false,
                exit: None,
            },
        );
        Ok(())
    }

    fn deliver(&mut self, rank: RankId, bytes: Vec<u8>) {
        let Some(rec) = self.children.get(&rank) else {
            return;
        };
        if !rec.alive {
            return;
        }
        match rec.conn.and_then(|c| self.conns.get_mut(&c)) {
            Some(conn) => {
                conn.out.push(bytes);
            }
            None => self.pending.entry(rank).or_default().push(bytes),
        }
    }

    fn on_child_msg(&mut self, conn: u64, msg: ControlMessage) -> Result<(), DaemonError> {
        if let Message::RegisterWorker { rank, pid } = msg.body {
            let ok = msg.epoch == self.epoch
                && self
                    .children
                    .get(&rank)
                    .is_some_and(|c| c.alive && c.pid == pid && c.conn.is_none());
            let Some(c) = self.conns.get_mut(&conn) else {
                return Ok(());
            };
            if !ok {
                log::warn!(
                    "daemon {} refusing rank {} registration at {}",
                    self.cfg.id.0,
                    rank.0,
                    msg.epoch
                );
                let _ = c.stream.shutdown(Shutdown::Both);
                self.conns.remove(&conn);
                return Ok(());
            }
            c.rank = Some(rank);
            c.out.push(msg.encode());
            if let Some(queued) = self.pending.remove(&rank) {
                for b in queued {
                    c.out.push(b);
                }
            }
            self.children.get_mut(&rank).unwrap().conn = Some(conn);
            return Ok(());
        }
        // Everything else goes up; the root routes and fences.
        self.up(msg)
    }

    fn on_child_eof(&mut self, conn: u64) -> Result<(), DaemonError> {
        let Some(c) = self.conns.remove(&conn) else {
            return Ok(());
        };
        self.flush_held()?;
        let _ = c.stream.shutdown(Shutdown::Both);
        let Some(rank) = c.rank else { return Ok(()) };
        let Some(rec) = self.children.get_mut(&rank) else {
            return Ok(());
        };
        if rec.conn != Some(conn) {
            return Ok(());
        }
        rec.eof = true;
        if let Some(status) = rec.exit {
            if !status.success() {
                self.notify_fault(rank)?;
            }
        }
        Ok(())
    }

    /// Abnormal exits are forwarded as FAULT_NOTIFY once the child's channel
    /// has drained; clean exits are only recorded. Events for a replaced
    /// process are stale and dropped.
    pub fn on_child_exit(
        &mut self,
        rank: RankId,
        spawn: u64,
        status: ExitStatus,
    ) -> Result<(), DaemonError> {
        let Some(rec) = self.children.get_mut(&rank) else {
            return Ok(());
        };
        if rec.spawn != spawn {
            log::debug!("daemon {} dropping stale exit of rank {}", self.cfg.id.0, rank.0);
            return Ok(());
        }
        rec.alive = false;
        rec.exit = Some(status);
        let drained = rec.conn.is_none() || rec.eof;
        self.flush_held()?;
        if status.success() {
            log::debug!("daemon {} rank {} completed", self.cfg.id.0, rank.0);
            return Ok(());
        }
        log::info!(
            "daemon {} observed rank {} failure ({status})",
            self.cfg.id.0,
            rank.0
        );
        if drained {
            self.notify_fault(rank)?;
        }
        Ok(())
    }

    fn notify_fault(&mut self, rank: RankId) -> Result<(), DaemonError> {
        if self.shutdown_at.is_some() {
            return Ok(());
        }
                self.send_root(Message::FaultNotify { rank })
    }
}

/// Daemon process entry point.
pub fn run_daemon(cfg: DaemonConfig) -> Result<(), DaemonError> {
    Daemon::connect(cfg)?.run()
}
