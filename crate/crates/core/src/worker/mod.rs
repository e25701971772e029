//! Worker-side runtime: world communicator, safe-point rollback and the
//! restart-point entry loop.
//!
//! All traffic goes through the parent daemon. Frames are read and handled on
//! the application thread inside [`WorldComm::pump`], which every
//! communication call drives. That
//! makes each runtime call a safe point: a pending rollback surfaces as
//! [`CommError::RollbackPending`] and unwinds to [`reinit_entry`].

mod collective;
mod ulfm;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream};
use std::os::fd::AsRawFd;
use std::time::Duration;

use thiserror::Error;

use crate::checkpoint::{CkptChannel, WINDOW};
use crate::topology::{Epoch, ProcessState, RankId};
use crate::wire::{read_frame, ControlMessage, Message, WireError};

pub use collective::ReduceOp;
pub use ulfm::ShrunkComm;

/// Tag namespaces so user point-to-point, collectives and ULFM recovery
/// traffic never match each other.
const USER_TAG: u64 = 1 << 63;
const COLL_TAG: u64 = 1 << 62;
const ULFM_TAG: u64 = 1 << 61;

#[derive(Debug, Error)]
pub enum CommError {
    #[error("rollback pending")]
    RollbackPending,
    #[error("peer rank {0} lost")]
    PeerLost(RankId),
    #[error("communicator revoked")]
    CommRevoked,
    #[error("connection to daemon failed: {0}")]
    ConnectFailed(String),
    #[error("daemon connection closed")]
    Disconnected,
    #[error("rank {0} out of range for world size {1}")]
    BadRank(RankId, u32),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Errors that may carry a rollback request up to [`reinit_entry`].
pub trait Unwind {
    fn comm_error(&self) -> Option<&CommError>;

    fn is_rollback(&self) -> bool {
        matches!(self.comm_error(), Some(CommError::RollbackPending))
    }

    /// Failures the ULFM-style driver recovers from.
    fn is_peer_failure(&self) -> bool {
        matches!(
            self.comm_error(),
            Some(CommError::PeerLost(_) | CommError::CommRevoked)
        )
    }
}

impl Unwind for CommError {
    fn comm_error(&self) -> Option<&CommError> {
        Some(self)
    }
}

/// Launch parameters a worker receives from its daemon.
#[derive(Debug, Clone)]
pub struct WorkerEnv {
    pub rank: RankId,
    pub world_size: u32,
    pub epoch: Epoch,
    pub state: ProcessState,
    pub daemon_addr: String,
    pub commit: Option<u64>,
}

enum Inbound {
    Frame(ControlMessage),
    Closed,
}

#[derive(Debug)]
struct Envelope {
    epoch: Epoch,
    src: RankId,
    tag: u64,
    payload: Vec<u8>,
}

/// What blocking waits treat as interrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Guard {
    /// Normal operation: rollback, revocation and peer failure all abort.
    World,
    /// ULFM recovery traffic on a shrunk communicator: nothing aborts.
    Recovery,
}

/// The world communicator of one worker process.
pub struct WorldComm {
    rank: RankId,
    size: u32,
    epoch: Epoch,
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    closed: bool,
    mailbox: VecDeque<Envelope>,
    pending_rollback: Option<(Epoch, Option<u64>)>,
    barrier_seq: u64,
    released: BTreeSet<u64>,
    coll_seq: u64,
    ulfm_seq: u64,
    commit: Option<u64>,
    /// Buddy copies held for other ranks: (origin, iter) → encoded checkpoint.
    held: BTreeMap<(RankId, u64), Vec<u8>>,
    ckpt_reply: Option<(Option<u64>, Vec<u8>)>,
    failed: BTreeSet<RankId>,
    revoked: bool,
    shrink_result: Option<(Option<u64>, Vec<RankId>)>,
    registered: bool,
    history: Vec<ProcessState>,
    initial_state: ProcessState,
}

/// Connects to the daemon, registers, and passes the startup barrier of the
/// launch epoch.
pub fn runtime_init(env: &WorkerEnv) -> Result<WorldComm, CommError> {
    if env.rank.0 >= env.world_size {
        return Err(CommError::BadRank(env.rank, env.world_size));
    }
    let stream = TcpStream::connect(&env.daemon_addr)
        .map_err(|e| CommError::ConnectFailed(format!("{}: {e}", env.daemon_addr)))?;
    let _ = stream.set_nodelay(true);
    let reader = stream
        .try_clone()
        .map_err(|e| CommError::ConnectFailed(e.to_string()))?;

    let mut comm = WorldComm {
        rank: env.rank,
        size: env.world_size,
        epoch: env.epoch,
        writer: stream,
        reader: BufReader::with_capacity(1 << 16, reader),
        closed: false,
        mailbox: VecDeque::new(),
        pending_rollback: None,
        barrier_seq: 0,
        released: BTreeSet::new(),
        coll_seq: 0,
        ulfm_seq: 0,
        commit: env.commit,
        held: BTreeMap::new(),
        ckpt_reply: None,
        failed: BTreeSet::new(),
        revoked: false,
        shrink_result: None,
        registered: false,
        history: Vec::new(),
        initial_state: env.state,
    };
    comm.post(Message::RegisterWorker {
        rank: env.rank,
        pid: std::process::id(),
    })?;
    while !comm.registered {
        if comm.pump(true).is_err() || comm.closed {
            return Err(CommError::ConnectFailed(
                "daemon refused registration".into(),
            ));
        }
    }
    comm.barrier()?;
    Ok(comm)
}

impl WorldComm {
    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    /// Iteration every rank agreed to resume from, if any.
    pub fn commit_iter(&self) -> Option<u64> {
        self.commit
    }

    pub fn is_revoked(&self) -> bool {
        self.revoked
    }

    /// States this process has entered the restart point with, in order.
    pub fn history(&self) -> &[ProcessState] {
        &self.history
    }

    pub fn initial_state(&self) -> ProcessState {
        self.initial_state
    }

    /// Records an entry into a restart point run outside [`reinit_entry`].
    pub fn record_entry(&mut self, state: ProcessState) {
        self.history.push(state);
    }

    /// Buddy copies currently held for other ranks.
    pub fn held_copies(&self) -> Vec<(RankId, u64)> {
        self.held.keys().copied().collect()
    }

    fn post(&mut self, body: Message) -> Result<(), CommError> {
        self.post_at(self.epoch, body)
    }

    fn post_at(&mut self, epoch: Epoch, body: Message) -> Result<(), CommError> {
        let bytes = ControlMessage::new(epoch, body).encode();
        self.writer
            .write_all(&bytes)
            .map_err(|_| CommError::Disconnected)
    }

    /// Processes one inbound frame. Blocks if `block` and nothing is queued.
    /// Returns whether a frame was handled.
    fn pump(&mut self, block: bool) -> Result<bool, CommError> {
        if self.closed {
            return Err(CommError::Disconnected);
        }
        let wait = if block { Duration::from_secs(1) } else { Duration::ZERO };
        let Some(inbound) = self.next_inbound(wait) else {
            return Ok(false);
        };
        match inbound {
            Inbound::Closed => {
                self.closed = true;
                Err(CommError::Disconnected)
            }
            Inbound::Frame(m) => {
                self.handle(m)?;
                Ok(true)
            }
        }
    }

    /// Next inbound frame, or `None` if nothing arrived within `wait`.
    fn next_inbound(&mut self, wait: Duration) -> Option<Inbound> {
        if self.reader.buffer().is_empty() {
            let mut fd = libc::pollfd {
                fd: self.reader.get_ref().as_raw_fd(),
                events: libc::POLLIN,
                revents: 0,
            };
            // SAFETY: one valid pollfd for the duration of the call.
            let ready = unsafe { libc::poll(&mut fd, 1, wait.as_millis() as libc::c_int) };
            if ready <= 0 {
                return None;
            }
        }
        match read_frame(&mut self.reader) {
            Ok(Some(m)) => Some(Inbound::Frame(m)),
            Ok(None) | Err(_) => Some(Inbound::Closed),
        }
    }

    fn drain(&mut self) -> Result<(), CommError> {
        while self.pump(false)? {}
        Ok(())
    }

    fn handle(&mut self, m: ControlMessage) -> Result<(), CommError> {
        if m.is_stale(self.epoch) {
            log::trace!("rank {} dropping stale {:?}", self.rank.0, m.kind());
            return Ok(());
        }
        let epoch = m.epoch;
        match m.body {
            Message::RegisterWorker { rank, .. } if rank == self.rank => self.registered = true,
            Message::AppData {
                src, tag, payload, ..
            } => self.mailbox.push_back(Envelope {
                epoch,
                src,
                tag,
                payload,
            }),
            Message::Rollback { commit } => {
                if epoch == self.epoch.next() {
                    self.pending_rollback = Some((epoch, commit));
                } else if epoch > self.epoch.next() {
                    return Err(CommError::Protocol(format!(
                        "rollback to {epoch} skips an epoch (at {})",
                        self.epoch
                    )));
                }
            }
            Message::BarrierRelease { seq } => {
                if epoch == self.epoch {
                    self.released.insert(seq);
                }
            }
            Message::CkptPut {
                rank,
                iter,
                payload,
            } => {
                self.held.insert((rank, iter), payload);
                let mine: Vec<u64> = self
                    .held
                    .range((rank, 0)..=(rank, u64::MAX))
                    .map(|(&(_, i), _)| i)
                    .collect();
                if mine.len() > WINDOW {
                    for &i in &mine[..mine.len() - WINDOW] {
                        self.held.remove(&(rank, i));
                    }
                }
            }
            Message::CkptGet { rank, iter } => {
                let reply = match self.held.get(&(rank, iter)) {
                    Some(bytes) => Message::CkptData {
                        rank,
                        iter: Some(iter),
                        payload: bytes.clone(),
                    },
                    None => Message::CkptData {
                        rank,
                        iter: None,
                        payload: Vec::new(),
                    },
                };
                self.post_at(epoch.max(self.epoch), reply)?;
            }
            Message::CkptData { iter, payload, .. } => {
                if epoch == self.epoch {
                    self.ckpt_reply = Some((iter, payload));
                }
            }
            Message::ProcFailed { ranks } => {
                if epoch == self.epoch {
                    self.failed.extend(ranks);
                }
            }
            Message::Revoke => {
                if epoch == self.epoch {
                    self.revoked = true;
                }
            }
            Message::ShrinkResult { commit, members } => {
                if epoch == self.epoch {
                    self.shrink_result = Some((commit, members));
                }
            }
            other => log::debug!("rank {} ignoring {:?}", self.rank.0, other.kind()),
        }
        Ok(())
    }

    fn check(&self, guard: Guard) -> Result<(), CommError> {
        if guard == Guard::Recovery {
            return Ok(());
        }
        if self.pending_rollback.is_some() {
            return Err(CommError::RollbackPending);
        }
        if self.revoked {
            return Err(CommError::CommRevoked);
        }
        if let Some(&r) = self.failed.iter().next() {
            return Err(CommError::PeerLost(r));
        }
        Ok(())
    }

    /// Blocks until `ready` yields, honoring interrupts at every step. An
    /// operation that already completed still succeeds; the interrupt
    /// surfaces at the next call.
    fn wait_until<T>(
        &mut self,
        guard: Guard,
        mut ready: impl FnMut(&mut Self) -> Option<T>,
    ) -> Result<T, CommError> {
        self.drain()?;
        loop {
            if let Some(v) = ready(self) {
                return Ok(v);
            }
            self.check(guard)?;
            self.pump(true)?;
        }
    }

    /// Whether a rollback for the next epoch has arrived. Drains queued
    /// traffic first, so this is also a safe point.
    pub fn poll_rollback(&mut self) -> Result<bool, CommError> {
        self.drain()?;
        Ok(self.pending_rollback.is_some())
    }

    fn check_peer(&self, peer: RankId) -> Result<(), CommError> {
        if peer.0 >= self.size {
            return Err(CommError::BadRank(peer, self.size));
        }
        Ok(())
    }

    fn send_tagged(&mut self, to: RankId, tag: u64, bytes: &[u8]) -> Result<(), CommError> {
        self.check_peer(to)?;
        self.post(Message::AppData {
            src: self.rank,
            dst: to,
            tag,
            payload: bytes.to_vec(),
        })
    }

    fn recv_tagged(&mut self, from: RankId, tag: u64, guard: Guard) -> Result<Vec<u8>, CommError> {
        self.check_peer(from)?;
        self.wait_until(guard, |c| {
            let epoch = c.epoch;
            let pos = c
                .mailbox
                .iter()
                .position(|e| e.epoch == epoch && e.src == from && e.tag == tag)?;
            c.mailbox.remove(pos).map(|e| e.payload)
        })
    }

    /// Point-to-point send. Non-blocking beyond the socket write.
    pub fn send(&mut self, to: RankId, tag: u32, bytes: &[u8]) -> Result<(), CommError> {
        self.drain()?;
        self.check(Guard::World)?;
        self.send_tagged(to, USER_TAG | tag as u64, bytes)
    }

    pub fn recv(&mut self, from: RankId, tag: u32) -> Result<Vec<u8>, CommError> {
        self.recv_tagged(from, USER_TAG | tag as u64, Guard::World)
    }

    /// Root-coordinated barrier over the whole world at the current epoch.
    pub fn barrier(&mut self) -> Result<(), CommError> {
        self.drain()?;
        self.check(Guard::World)?;
        let seq = self.barrier_seq;
        self.barrier_seq += 1;
        self.post(Message::BarrierEnter {
            rank: self.rank,
            seq,
        })?;
        self.wait_until(Guard::World, |c| c.released.remove(&seq).then_some(()))
    }

    fn next_coll_tag(&mut self) -> u64 {
        let t = COLL_TAG | self.coll_seq;
        self.coll_seq += 1;
        t
    }

    fn next_ulfm_tag(&mut self) -> u64 {
        let t = ULFM_TAG | self.ulfm_seq;
        self.ulfm_seq += 1;
        t
    }

    /// Resets everything derived from the communicator and moves to `epoch`.
    /// Application memory (held buddy copies) survives.
    fn discard_state(&mut self, epoch: Epoch, commit: Option<u64>) {
        self.epoch = epoch;
        self.mailbox.retain(|e| e.epoch >= epoch);
        self.released.clear();
        self.barrier_seq = 0;
        self.coll_seq = 0;
        self.ulfm_seq = 0;
        self.ckpt_reply = None;
        self.failed.clear();
        self.revoked = false;
        self.shrink_result = None;
        self.pending_rollback = None;
        self.commit = commit;
        if let Some(c) = commit {
            let floor = c.saturating_sub(1);
            self.held.retain(|&(_, i), _| i >= floor);
        }
    }

    /// Takes a pending rollback: discard state, wait on the epoch barrier,
    /// come back with a fresh world communicator.
    fn rollback(&mut self) -> Result<(), CommError> {
        let (epoch, commit) = self
            .pending_rollback
            .take()
            .ok_or_else(|| CommError::Protocol("rollback without request".into()))?;
        log::debug!(
            "rank {} rolling back to {epoch}, commit {:?}",
            self.rank.0,
            commit
        );
        self.discard_state(epoch, commit);
        self.barrier()
    }

    /// Sends the final report and waits for the daemon to close the channel.
    pub fn finish(mut self, report: crate::wire::DoneReport) -> Result<(), CommError> {
        self.post(Message::WorkerDone(report))?;
        let _ = self.writer.shutdown(Shutdown::Write);
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while std::time::Instant::now() < deadline {
            if let Some(Inbound::Closed) = self.next_inbound(Duration::from_millis(200)) {
                break;
            }
        }
        Ok(())
    }
}

impl CkptChannel for WorldComm {
    fn rank(&self) -> RankId {
        self.rank
    }

    fn world_size(&self) -> u32 {
        self.size
    }

    fn put_to_buddy(&mut self, iter: u64, encoded: Vec<u8>) -> Result<(), CommError> {
        self.drain()?;
        self.check(Guard::World)?;
        self.post(Message::CkptPut {
            rank: self.rank,
            iter,
            payload: encoded,
        })
    }

    fn fetch_from_buddy(&mut self, iter: u64) -> Result<Option<Vec<u8>>, CommError> {
        self.ckpt_reply = None;
        self.post(Message::CkptGet {
            rank: self.rank,
            iter,
        })?;
        let (got, payload) = self.wait_until(Guard::World, |c| c.ckpt_reply.take())?;
        Ok(match got {
            Some(i) if i == iter => Some(payload),
            _ => None,
        })
    }

    fn report(&mut self, iter: u64) -> Result<(), CommError> {
        self.post(Message::CkptReport {
            rank: self.rank,
            iter,
        })
    }
}

/// Runs `point` under global-restart semantics.
///
/// `point` receives the communicator and the process state. When it returns
/// a rollback error, the communicator is rebuilt at the next epoch and
/// `point` is entered again with [`ProcessState::Reinited`].
pub fn reinit_entry<E, F>(comm: &mut WorldComm, mut point: F) -> Result<i32, E>
where
    E: Unwind + From<CommError>,
    F: FnMut(&mut WorldComm, ProcessState) -> Result<i32, E>,
{
    let mut state = comm.initial_state;
    loop {
        comm.history.push(state);
        match point(comm, state) {
            Ok(code) => return Ok(code),
            Err(e) if e.is_rollback() => {
                loop {
                    match comm.rollback() {
                        Ok(()) => break,
                        // another rollback landed while waiting on the barrier
                        Err(CommError::RollbackPending) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
                state = ProcessState::Reinited;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Same contract as [`reinit_entry`] but recovering through the ULFM-style
/// sequence: revoke, shrink, agree, spawn + merge.
pub fn ulfm_entry<E, F>(comm: &mut WorldComm, mut point: F) -> Result<i32, E>
where
    E: Unwind + From<CommError>,
    F: FnMut(&mut WorldComm, ProcessState) -> Result<i32, E>,
{
    let mut state = comm.initial_state;
    loop {
        comm.history.push(state);
        match point(comm, state) {
            Ok(code) => return Ok(code),
            Err(e) if e.is_peer_failure() => {
                log::debug!("rank {} entering ulfm recovery: {:?}", comm.rank.0, e.comm_error());
                comm.ulfm_revoke()?;
                let shrunk = comm.ulfm_shrink()?;
                log::debug!("rank {} shrunk to {:?}", comm.rank.0, shrunk.members());
                let (_, failed) = shrunk.agree(comm, true)?;
                log::debug!("rank {} agreed on failed {:?}", comm.rank.0, failed);
                comm.ulfm_spawn_merge(&shrunk, &failed)?;
                log::debug!("rank {} merged at {}", comm.rank.0, comm.epoch);
                state = ProcessState::Reinited;
            }
            Err(e) => return Err(e),
        }
    }
}
