//! Length-prefixed control protocol shared by root, daemons and workers.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! u32  frame length (bytes that follow: 2 + 8 + body)
//! u16  message kind
//! u64  epoch
//! ...  kind-specific body
//! ```
//!
//! Optional commit iterations are encoded as `u64::MAX` when absent.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::topology::{buddy_of, DaemonId, Epoch, ProcessState, RankId, ReinitAssignment};

/// Upper bound on a single frame; anything larger is treated as corruption.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

const HEADER_LEN: usize = 2 + 8;
const NO_ITER: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("frame length {0} exceeds limit")]
    FrameTooLarge(u32),
    #[error("unknown message kind {0}")]
    UnknownKind(u16),
    #[error("malformed {kind} body: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum MessageKind {
    RegisterDaemon = 1,
    RegisterWorker = 2,
    FaultNotify = 3,
    ReinitCmd = 4,
    Rollback = 5,
    BarrierEnter = 6,
    BarrierRelease = 7,
    CkptPut = 8,
    CkptGet = 9,
    CkptData = 10,
    CkptReport = 11,
    Shutdown = 12,
    AppData = 13,
    WorkerDone = 14,
    ProcFailed = 15,
    Revoke = 16,
    ShrinkEnter = 17,
    ShrinkResult = 18,
    SpawnReq = 19,
    SpawnCmd = 20,
    Ping = 21,
}

impl MessageKind {
    pub const ALL: [MessageKind; 21] = [
        MessageKind::RegisterDaemon,
        MessageKind::RegisterWorker,
        MessageKind::FaultNotify,
        MessageKind::ReinitCmd,
        MessageKind::Rollback,
        MessageKind::BarrierEnter,
        MessageKind::BarrierRelease,
        MessageKind::CkptPut,
        MessageKind::CkptGet,
        MessageKind::CkptData,
        MessageKind::CkptReport,
        MessageKind::Shutdown,
        MessageKind::AppData,
        MessageKind::WorkerDone,
        MessageKind::ProcFailed,
        MessageKind::Revoke,
        MessageKind::ShrinkEnter,
        MessageKind::ShrinkResult,
        MessageKind::SpawnReq,
        MessageKind::SpawnCmd,
        MessageKind::Ping,
    ];

    pub fn from_u16(v: u16) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| *k as u16 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::RegisterDaemon => "REGISTER_DAEMON",
            MessageKind::RegisterWorker => "REGISTER_WORKER",
            MessageKind::FaultNotify => "FAULT_NOTIFY",
            MessageKind::ReinitCmd => "REINIT_CMD",
            MessageKind::Rollback => "ROLLBACK",
            MessageKind::BarrierEnter => "BARRIER_ENTER",
            MessageKind::BarrierRelease => "BARRIER_RELEASE",
            MessageKind::CkptPut => "CKPT_PUT",
            MessageKind::CkptGet => "CKPT_GET",
            MessageKind::CkptData => "CKPT_DATA",
            MessageKind::CkptReport => "CKPT_REPORT",
            MessageKind::Shutdown => "SHUTDOWN",
            MessageKind::AppData => "APP_DATA",
            MessageKind::WorkerDone => "WORKER_DONE",
            MessageKind::ProcFailed => "PROC_FAILED",
            MessageKind::Revoke => "REVOKE",
            MessageKind::ShrinkEnter => "SHRINK_ENTER",
            MessageKind::ShrinkResult => "SHRINK_RESULT",
            MessageKind::SpawnReq => "SPAWN_REQ",
            MessageKind::SpawnCmd => "SPAWN_CMD",
            MessageKind::Ping => "PING",
        }
    }
}

/// Final per-rank report sent when a worker's restart point returns.
#[derive(Debug, Clone, PartialEq)]
pub struct DoneReport {
    pub rank: RankId,
    pub exit_code: i32,
    pub checksum: u64,
    pub residual: f64,
    pub t_app: f64,
    pub t_ckpt_write: f64,
    pub t_ckpt_read: f64,
    /// States observed by this process, in order.
    pub states: Vec<ProcessState>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    RegisterDaemon { daemon: DaemonId, pid: u32 },
    RegisterWorker { rank: RankId, pid: u32 },
    FaultNotify { rank: RankId },
    ReinitCmd { assignment: ReinitAssignment, commit: Option<u64> },
    Rollback { commit: Option<u64> },
    BarrierEnter { rank: RankId, seq: u64 },
    BarrierRelease { seq: u64 },
    CkptPut { rank: RankId, iter: u64, payload: Vec<u8> },
    CkptGet { rank: RankId, iter: u64 },
    /// `iter == None` means the holder has no copy.
    CkptData { rank: RankId, iter: Option<u64>, payload: Vec<u8> },
    CkptReport { rank: RankId, iter: u64 },
    Shutdown,
    AppData { src: RankId, dst: RankId, tag: u64, payload: Vec<u8> },
    WorkerDone(DoneReport),
    ProcFailed { ranks: Vec<RankId> },
    Revoke,
    ShrinkEnter { rank: RankId },
    ShrinkResult { commit: Option<u64>, members: Vec<RankId> },
    SpawnReq { ranks: Vec<RankId> },
    SpawnCmd {
        assignment: ReinitAssignment,
        commit: Option<u64>,
        state: ProcessState,
    },
    Ping,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::RegisterDaemon { .. } => MessageKind::RegisterDaemon,
            Message::RegisterWorker { .. } => MessageKind::RegisterWorker,
            Message::FaultNotify { .. } => MessageKind::FaultNotify,
            Message::ReinitCmd { .. } => MessageKind::ReinitCmd,
            Message::Rollback { .. } => MessageKind::Rollback,
            Message::BarrierEnter { .. } => MessageKind::BarrierEnter,
            Message::BarrierRelease { .. } => MessageKind::BarrierRelease,
            Message::CkptPut { .. } => MessageKind::CkptPut,
            Message::CkptGet { .. } => MessageKind::CkptGet,
            Message::CkptData { .. } => MessageKind::CkptData,
            Message::CkptReport { .. } => MessageKind::CkptReport,
            Message::Shutdown => MessageKind::Shutdown,
            Message::AppData { .. } => MessageKind::AppData,
            Message::WorkerDone(_) => MessageKind::WorkerDone,
            Message::ProcFailed { .. } => MessageKind::ProcFailed,
            Message::Revoke => MessageKind::Revoke,
            Message::ShrinkEnter { .. } => MessageKind::ShrinkEnter,
            Message::ShrinkResult { .. } => MessageKind::ShrinkResult,
            Message::SpawnReq { .. } => MessageKind::SpawnReq,
            Message::SpawnCmd { .. } => MessageKind::SpawnCmd,
            Message::Ping => MessageKind::Ping,
        }
    }
}

/// Where a message is headed once it leaves the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Consumed by the root or a daemon itself.
    Control,
    /// Delivered to one worker.
    Rank(RankId),
    /// Delivered to every worker.
    AllWorkers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlMessage {
    pub epoch: Epoch,
    pub body: Message,
}

impl ControlMessage {
    pub fn new(epoch: Epoch, body: Message) -> Self {
        Self { epoch, body }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    /// Registrations are exempt from epoch fencing.
    pub fn is_registration(&self) -> bool {
        matches!(
            self.body,
            Message::RegisterDaemon { .. } | Message::RegisterWorker { .. }
        )
    }

    /// Stale unless it is a registration or carries at least `current`.
    pub fn is_stale(&self, current: Epoch) -> bool {
        !self.is_registration() && self.epoch < current
    }

    pub fn route(&self, world_size: u32) -> Route {
        match &self.body {
            Message::AppData { dst, .. } => Route::Rank(*dst),
            Message::CkptPut { rank, .. } | Message::CkptGet { rank, .. } => {
                Route::Rank(buddy_of(*rank, world_size))
            }
            Message::CkptData { rank, .. } => Route::Rank(*rank),
            Message::BarrierRelease { .. }
            | Message::ProcFailed { .. }
            | Message::Revoke
            | Message::ShrinkResult { .. } => Route::AllWorkers,
            _ => Route::Control,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        encode_body(&self.body, &mut body);
        let len = (HEADER_LEN + body.len()) as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(self.kind() as u16).to_le_bytes());
        out.extend_from_slice(&self.epoch.0.to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decodes one frame from the front of `buf`, returning it and the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(ControlMessage, usize), WireError> {
        if buf.len() < 4 {
            return Err(WireError::Truncated {
                need: 4,
                have: buf.len(),
            });
        }
        let len = u32::from_le_bytes(buf[..4].try_into().unwrap());
        if len > MAX_FRAME_LEN {
            return Err(WireError::FrameTooLarge(len));
        }
        let total = 4 + len as usize;
        if buf.len() < total {
            return Err(WireError::Truncated {
                need: total,
                have: buf.len(),
            });
        }
        let msg = decode_frame(&buf[4..total])?;
        Ok((msg, total))
    }
}

/// Reads one frame. `Ok(None)` on clean EOF at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<ControlMessage>, WireError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated { need: 4, have: got });
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut frame = vec![0u8; len as usize];
    r.read_exact(&mut frame)?;
    decode_frame(&frame).map(Some)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &ControlMessage) -> Result<(), WireError> {
    w.write_all(&msg.encode())?;
    Ok(())
}

fn decode_frame(frame: &[u8]) -> Result<ControlMessage, WireError> {
    if frame.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            need: HEADER_LEN,
            have: frame.len(),
        });
    }
    let raw_kind = u16::from_le_bytes(frame[..2].try_into().unwrap());
    let kind = MessageKind::from_u16(raw_kind).ok_or(WireError::UnknownKind(raw_kind))?;
    let epoch = Epoch(u64::from_le_bytes(frame[2..10].try_into().unwrap()));
    let mut cur = Cursor {
        buf: &frame[HEADER_LEN..],
        kind: kind.name(),
    };
    let body = decode_body(kind, &mut cur)?;
    if !cur.buf.is_empty() {
        return Err(cur.malformed(format!("{} trailing bytes", cur.buf.len())));
    }
    Ok(ControlMessage { epoch, body })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_opt_iter(out: &mut Vec<u8>, v: Option<u64>) {
    put_u64(out, v.unwrap_or(NO_ITER));
}

fn put_ranks(out: &mut Vec<u8>, ranks: &[RankId]) {
    put_u32(out, ranks.len() as u32);
    for r in ranks {
        put_u32(out, r.0);
    }
}

fn put_assignment(out: &mut Vec<u8>, a: &ReinitAssignment) {
    put_u32(out, a.0.len() as u32);
    for (d, r) in &a.0 {
        put_u32(out, d.0);
        put_u32(out, r.0);
    }
}

fn encode_body(msg: &Message, out: &mut Vec<u8>) {
    match msg {
        Message::RegisterDaemon { daemon, pid } => {
            put_u32(out, daemon.0);
            put_u32(out, *pid);
        }
        Message::RegisterWorker { rank, pid } => {
            put_u32(out, rank.0);
            put_u32(out, *pid);
        }
        Message::FaultNotify { rank } | Message::ShrinkEnter { rank } => put_u32(out, rank.0),
        Message::ReinitCmd { assignment, commit } => {
            put_opt_iter(out, *commit);
            put_assignment(out, assignment);
        }
        Message::SpawnCmd {
            assignment,
            commit,
            state,
        } => {
            put_opt_iter(out, *commit);
            out.push(state.as_u8());
            put_assignment(out, assignment);
        }
        Message::Rollback { commit } => put_opt_iter(out, *commit),
        Message::BarrierEnter { rank, seq } => {
            put_u32(out, rank.0);
            put_u64(out, *seq);
        }
        Message::BarrierRelease { seq } => put_u64(out, *seq),
        Message::CkptPut {
            rank,
            iter,
            payload,
        } => {
            put_u32(out, rank.0);
            put_u64(out, *iter);
            out.extend_from_slice(payload);
        }
        Message::CkptGet { rank, iter } | Message::CkptReport { rank, iter } => {
            put_u32(out, rank.0);
            put_u64(out, *iter);
        }
        Message::CkptData {
            rank,
            iter,
            payload,
        } => {
            put_u32(out, rank.0);
            put_opt_iter(out, *iter);
            out.extend_from_slice(payload);
        }
        Message::Shutdown | Message::Revoke | Message::Ping => {}
        Message::AppData {
            src,
            dst,
            tag,
            payload,
        } => {
            put_u32(out, src.0);
            put_u32(out, dst.0);
            put_u64(out, *tag);
            out.extend_from_slice(payload);
        }
        Message::WorkerDone(d) => {
            put_u32(out, d.rank.0);
            out.extend_from_slice(&d.exit_code.to_le_bytes());
            put_u64(out, d.checksum);
            put_f64(out, d.residual);
            put_f64(out, d.t_app);
            put_f64(out, d.t_ckpt_write);
            put_f64(out, d.t_ckpt_read);
            put_u32(out, d.states.len() as u32);
            out.extend(d.states.iter().map(|s| s.as_u8()));
        }
        Message::ProcFailed { ranks } | Message::SpawnReq { ranks } => put_ranks(out, ranks),
        Message::ShrinkResult { commit, members } => {
            put_opt_iter(out, *commit);
            put_ranks(out, members);
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    kind: &'static str,
}

impl<'a> Cursor<'a> {
    fn malformed(&self, reason: String) -> WireError {
        WireError::Malformed {
            kind: self.kind,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(self.malformed(format!("need {n} bytes, have {}", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, WireError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn opt_iter(&mut self) -> Result<Option<u64>, WireError> {
        let v = self.u64()?;
        Ok((v != NO_ITER).then_some(v))
    }

    fn rank(&mut self) -> Result<RankId, WireError> {
        self.u32().map(RankId)
    }

    fn count(&mut self, elem_size: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() {
            return Err(self.malformed(format!("count {n} overruns body")));
        }
        Ok(n)
    }

    fn ranks(&mut self) -> Result<Vec<RankId>, WireError> {
        let n = self.count(4)?;
        (0..n).map(|_| self.rank()).collect()
    }

    fn assignment(&mut self) -> Result<ReinitAssignment, WireError> {
        let n = self.count(8)?;
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let d = DaemonId(self.u32()?);
            let r = self.rank()?;
            pairs.push((d, r));
        }
        Ok(ReinitAssignment(pairs))
    }

    fn rest(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf).to_vec()
    }
}

fn decode_body(kind: MessageKind, c: &mut Cursor<'_>) -> Result<Message, WireError> {
    Ok(match kind {
        MessageKind::RegisterDaemon => Message::RegisterDaemon {
            daemon: DaemonId(c.u32()?),
            pid: c.u32()?,
        },
        MessageKind::RegisterWorker => Message::RegisterWorker {
            rank: c.rank()?,
            pid: c.u32()?,
        },
        MessageKind::FaultNotify => Message::FaultNotify { rank: c.rank()? },
        MessageKind::ReinitCmd => {
            let commit = c.opt_iter()?;
            Message::ReinitCmd {
                assignment: c.assignment()?,
                commit,
            }
        }
        MessageKind::Rollback => Message::Rollback {
            commit: c.opt_iter()?,
        },
        MessageKind::BarrierEnter => Message::BarrierEnter {
            rank: c.rank()?,
            seq: c.u64()?,
        },
        MessageKind::BarrierRelease => Message::BarrierRelease { seq: c.u64()? },
        MessageKind::CkptPut => Message::CkptPut {
            rank: c.rank()?,
            iter: c.u64()?,
            payload: c.rest(),
        },
        MessageKind::CkptGet => Message::CkptGet {
            rank: c.rank()?,
            iter: c.u64()?,
        },
        MessageKind::CkptData => Message::CkptData {
            rank: c.rank()?,
            iter: c.opt_iter()?,
            payload: c.rest(),
        },
        MessageKind::CkptReport => Message::CkptReport {
            rank: c.rank()?,
            iter: c.u64()?,
        },
        MessageKind::Shutdown => Message::Shutdown,
        MessageKind::AppData => Message::AppData {
            src: c.rank()?,
            dst: c.rank()?,
            tag: c.u64()?,
            payload: c.rest(),
        },
        MessageKind::WorkerDone => {
            let rank = c.rank()?;
            let exit_code = c.i32()?;
            let checksum = c.u64()?;
            let residual = c.f64()?;
            let t_app = c.f64()?;
            let t_ckpt_write = c.f64()?;
            let t_ckpt_read = c.f64()?;
            let n = c.count(1)?;
            let raw = c.take(n)?;
            let states = raw
                .iter()
                .map(|&b| {
                    ProcessState::from_u8(b)
                        .ok_or_else(|| c.malformed(format!("bad process state {b}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Message::WorkerDone(DoneReport {
                rank,
                exit_code,
                checksum,
                residual,
                t_app,
                t_ckpt_write,
                t_ckpt_read,
                states,
            })
        }
        MessageKind::ProcFailed => Message::ProcFailed { ranks: c.ranks()? },
        MessageKind::Revoke => Message::Revoke,
        MessageKind::ShrinkEnter => Message::ShrinkEnter { rank: c.rank()? },
        MessageKind::ShrinkResult => Message::ShrinkResult {
            commit: c.opt_iter()?,
            members: c.ranks()?,
        },
        MessageKind::SpawnReq => Message::SpawnReq { ranks: c.ranks()? },
        MessageKind::SpawnCmd => {
            let commit = c.opt_iter()?;
            let raw = c.take(1)?[0];
            let state = ProcessState::from_u8(raw)
                .ok_or_else(|| c.malformed(format!("bad process state {raw}")))?;
            Message::SpawnCmd {
                assignment: c.assignment()?,
                commit,
                state,
            }
        }
        MessageKind::Ping => Message::Ping,
    })
}

/// One representative message per kind, in kind order. These are the
/// messages behind the committed golden vectors.
pub fn golden_samples() -> Vec<ControlMessage> {
    let assign = ReinitAssignment(vec![(DaemonId(2), RankId(5)), (DaemonId(2), RankId(6))]);
    let bodies = vec![
        Message::RegisterDaemon {
            daemon: DaemonId(1),
            pid: 4242,
        },
        Message::RegisterWorker {
            rank: RankId(7),
            pid: 31337,
        },
        Message::FaultNotify { rank: RankId(7) },
        Message::ReinitCmd {
            assignment: assign.clone(),
            commit: Some(4),
        },
        Message::Rollback { commit: None },
        Message::BarrierEnter {
            rank: RankId(3),
            seq: 2,
        },
        Message::BarrierRelease { seq: 2 },
        Message::CkptPut {
            rank: RankId(3),
            iter: 5,
            payload: b"abc".to_vec(),
        },
        Message::CkptGet {
            rank: RankId(7),
            iter: 4,
        },
        Message::CkptData {
            rank: RankId(7),
            iter: Some(4),
            payload: vec![0xde, 0xad],
        },
        Message::CkptReport {
            rank: RankId(15),
            iter: 19,
        },
        Message::Shutdown,
        Message::AppData {
            src: RankId(0),
            dst: RankId(1),
            tag: 1 << 63 | 9,
            payload: 1.5f64.to_le_bytes().to_vec(),
        },
        Message::WorkerDone(DoneReport {
            rank: RankId(2),
            exit_code: 0,
            checksum: 0x0123_4567_89ab_cdef,
            residual: 0.25,
            t_app: 1.0,
            t_ckpt_write: 0.5,
            t_ckpt_read: 0.0,
            states: vec![ProcessState::New, ProcessState::Reinited],
        }),
        Message::ProcFailed {
            ranks: vec![RankId(7)],
        },
        Message::Revoke,
        Message::ShrinkEnter { rank: RankId(4) },
        Message::ShrinkResult {
            commit: Some(3),
            members: vec![RankId(0), RankId(1), RankId(3)],
        },
        Message::SpawnReq {
            ranks: vec![RankId(2)],
        },
        Message::SpawnCmd {
            assignment: ReinitAssignment(vec![(DaemonId(0), RankId(2))]),
            commit: Some(3),
            state: ProcessState::Restarted,
        },
        Message::Ping,
    ];
    bodies
        .into_iter()
        .enumerate()
        .map(|(i, b)| ControlMessage::new(Epoch(i as u64 % 3), b))
        .collect()
}
