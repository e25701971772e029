//! Application checkpoints: shared-directory files or local + buddy memory.
//!
//! On-disk (and on-wire, for buddy copies) layout, little-endian:
//!
//! ```text
//! "RCK1" | u16 version=1 | u32 rank | u64 iter | u64 payload_len | u32 crc | payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::topology::{ProcessState, RankId};
use crate::worker::CommError;

pub const MAGIC: &[u8; 4] = b"RCK1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 8 + 4;
/// Checkpoints retained per rank per store.
pub const WINDOW: usize = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint payload must not be empty")]
    EmptyPayload,
    #[error("buddy checkpointing needs at least two ranks")]
    BuddyNeedsPeers,
    #[error("checkpointing is disabled")]
    Disabled,
    #[error("checkpoint for rank {rank} iter {iter} is unavailable")]
    Unavailable { rank: RankId, iter: u64 },
    #[error("crc mismatch for rank {rank} iter {iter}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch {
        rank: RankId,
        iter: u64,
        stored: u32,
        computed: u32,
    },
    #[error("bad checkpoint format: {0}")]
    BadFormat(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Comm(#[from] CommError),
}

const CRC_TABLE: [u32; 256] = {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
};

/// Standard reflected CRC-32 (polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = CRC_TABLE[((crc ^ b as u32) & 0xff) as usize] ^ (crc >> 8);
    }
    !crc
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub rank: RankId,
    pub iter: u64,
    pub payload: Vec<u8>,
    pub crc: u32,
}

impl Checkpoint {
    pub fn new(rank: RankId, iter: u64, payload: Vec<u8>) -> Self {
        let crc = crc32(&payload);
        Self {
            rank,
            iter,
            payload,
            crc,
        }
    }

    pub fn is_valid(&self) -> bool {
        crc32(&self.payload) == self.crc
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.rank.0.to_le_bytes());
        out.extend_from_slice(&self.iter.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.crc.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and CRC-checks an encoded checkpoint.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::BadFormat(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadFormat(format!(
                "unsupported version {version}"
            )));
        }
        let rank = RankId(u32::from_le_bytes(bytes[6..10].try_into().unwrap()));
        let iter = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let crc = u32::from_le_bytes(bytes[26..30].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != len {
            return Err(CheckpointError::BadFormat(format!(
                "payload length {} does not match header {len}",
                payload.len()
            )));
        }
        let computed = crc32(payload);
        if computed != crc {
            return Err(CheckpointError::CrcMismatch {
                rank,
                iter,
                stored: crc,
                computed,
            });
        }
        Ok(Checkpoint {
            rank,
            iter,
            payload: payload.to_vec(),
            crc,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CkptMode {
    File,
    Buddy,
    /// No checkpoints; recovery restarts the computation from scratch.
    None,
}

impl CkptMode {
    pub fn name(self) -> &'static str {
        match self {
            CkptMode::File => "file",
            CkptMode::Buddy => "buddy",
            CkptMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "file" => Some(CkptMode::File),
            "buddy" | "memory" => Some(CkptMode::Buddy),
            "none" => Some(CkptMode::None),
            _ => None,
        }
    }
}

/// `r0003_i0000000005.ckpt`
pub fn file_name(rank: RankId, iter: u64) -> String {
    format!("r{:04}_i{:010}.ckpt", rank.0, iter)
}

/// `<ckpt_dir>/<run_id>/r%04d_i%010d.ckpt`
pub fn file_path(ckpt_dir: &Path, run_id: &str, rank: RankId, iter: u64) -> PathBuf {
    ckpt_dir.join(run_id).join(file_name(rank, iter))
}

/// Writes `bytes` to `path` via a temp file and rename, so readers never see
/// a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)
}

pub fn read_file(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    Checkpoint::decode(&bytes)
}

/// What the store needs from the communication layer.
pub trait CkptChannel {
    fn rank(&self) -> RankId;
    fn world_size(&self) -> u32;
    /// Ships an encoded checkpoint to the buddy's memory.
    fn put_to_buddy(&mut self, iter: u64, encoded: Vec<u8>) -> Result<(), CommError>;
    /// Asks the buddy for this rank's encoded checkpoint at `iter`.
    fn fetch_from_buddy(&mut self, iter: u64) -> Result<Option<Vec<u8>>, CommError>;
    /// Tells the root this rank now holds `iter`.
    fn report(&mut self, iter: u64) -> Result<(), CommError>;
}

/// Per-rank checkpoint store. Lives in application memory, so it survives
/// rollbacks of the communicator.
#[derive(Debug)]
pub struct CkptStore {
    mode: CkptMode,
    rank: RankId,
    run_dir: Option<PathBuf>,
    local: BTreeMap<u64, Checkpoint>,
}

impl CkptStore {
    /// `run_dir` is `<ckpt_dir>/<run_id>`; required in file mode.
    pub fn new(
        mode: CkptMode,
        rank: RankId,
        world_size: u32,
        run_dir: Option<PathBuf>,
    ) -> Result<Self, CheckpointError> {
        match mode {
            CkptMode::Buddy if world_size < 2 => return Err(CheckpointError::BuddyNeedsPeers),
            CkptMode::File => {
                let dir = run_dir.as_ref().ok_or_else(|| {
                    CheckpointError::BadFormat("file mode needs a checkpoint directory".into())
                })?;
                fs::create_dir_all(dir)?;
            }
            _ => {}
        }
        Ok(Self {
            mode,
            rank,
            run_dir,
            local: BTreeMap::new(),
        })
    }

    pub fn mode(&self) -> CkptMode {
        self.mode
    }

    pub fn enabled(&self) -> bool {
        self.mode != CkptMode::None
    }

    pub fn local_iters(&self) -> Vec<u64> {
        self.local.keys().copied().collect()
    }

    fn path(&self, iter: u64) -> PathBuf {
        self.run_dir
            .as_ref()
            .expect("file mode store has a run dir")
            .join(file_name(self.rank, iter))
    }

    fn remember(&mut self, ckpt: Checkpoint) {
        self.local.insert(ckpt.iter, ckpt);
        while self.local.len() > WINDOW {
            let oldest = *self.local.keys().next().unwrap();
            self.local.remove(&oldest);
        }
    }

    pub fn write<C: CkptChannel>(
        &mut self,
        ch: &mut C,
        iter: u64,
        payload: &[u8],
    ) -> Result<(), CheckpointError> {
        if payload.is_empty() {
            return Err(CheckpointError::EmptyPayload);
        }
        let ckpt = Checkpoint::new(self.rank, iter, payload.to_vec());
        match self.mode {
            CkptMode::None => return Err(CheckpointError::Disabled),
            CkptMode::File => {
                write_atomic(&self.path(iter), &ckpt.encode())?;
                if iter >= WINDOW as u64 {
                    match fs::remove_file(self.path(iter - WINDOW as u64)) {
                        Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                        _ => {}
                    }
                }
            }
            CkptMode::Buddy => ch.put_to_buddy(iter, ckpt.encode())?,
        }
        self.remember(ckpt);
        ch.report(iter)?;
        Ok(())
    }

    pub fn load<C: CkptChannel>(
        &mut self,
        ch: &mut C,
        commit: u64,
        state: ProcessState,
    ) -> Result<Vec<u8>, CheckpointError> {
        let unavailable = CheckpointError::Unavailable {
            rank: self.rank,
            iter: commit,
        };
        let ckpt = match (state, self.mode) {
            (_, CkptMode::None) => return Err(CheckpointError::Disabled),
            (ProcessState::Reinited, mode) => match self.local.get(&commit) {
                Some(c) if c.is_valid() => c.clone(),
                Some(c) => {
                    return Err(CheckpointError::CrcMismatch {
                        rank: self.rank,
                        iter: commit,
                        stored: c.crc,
                        computed: crc32(&c.payload),
                    })
                }
                None if mode == CkptMode::File => self.read_own_file(commit)?,
                None => return Err(unavailable),
            },
            (_, CkptMode::File) => self.read_own_file(commit)?,
            (ProcessState::Restarted, CkptMode::Buddy) => {
                let bytes = ch.fetch_from_buddy(commit)?.ok_or(unavailable)?;
                Checkpoint::decode(&bytes)?
            }
            (ProcessState::New, CkptMode::Buddy) => match self.local.get(&commit) {
                Some(c) => c.clone(),
                None => return Err(unavailable),
            },
        };
        if ckpt.rank != self.rank || ckpt.iter != commit {
            return Err(CheckpointError::BadFormat(format!(
                "expected rank {} iter {commit}, found rank {} iter {}",
                self.rank, ckpt.rank, ckpt.iter
            )));
        }
        let payload = ckpt.payload.clone();
        self.remember(ckpt);
        Ok(payload)
    }

    fn read_own_file(&self, iter: u64) -> Result<Checkpoint, CheckpointError> {
        match read_file(&self.path(iter)) {
            Err(CheckpointError::Io(e)) if e.kind() == io::ErrorKind::NotFound => {
                Err(CheckpointError::Unavailable {
                    rank: self.rank,
                    iter,
                })
            }
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Loopback channel: rank 0 of a two-rank world whose buddy memory is a map.
    #[derive(Default)]
    struct Loop {
        held: BTreeMap<u64, Vec<u8>>,
        reports: Vec<u64>,
    }

    impl CkptChannel for Loop {
        fn rank(&self) -> RankId {
            RankId(0)
        }
        fn world_size(&self) -> u32 {
            2
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

    #[test]
    fn crc_examples() {
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(&[0u8]), 0xD202_EF8D);
    }

    #[test]
    fn file_name_format() {
        assert_eq!(file_name(RankId(3), 5), "r0003_i0000000005.ckpt");
    }

    #[test]
    fn file_mode_roundtrip_and_window() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let mut ch = Loop::default();
        let mut store = CkptStore::new(CkptMode::File, RankId(0), 2, Some(run.clone())).unwrap();
        for it in 0..4u64 {
            store.write(&mut ch, it, &[it as u8; 16]).unwrap();
        }
        assert_eq!(ch.reports, vec![0, 1, 2, 3]);
        assert_eq!(store.local_iters(), vec![2, 3]);
        assert!(!run.join(file_name(RankId(0), 1)).exists());
        assert!(run.join(file_name(RankId(0), 2)).exists());

        let mut fresh = CkptStore::new(CkptMode::File, RankId(0), 2, Some(run)).unwrap();
        let got = fresh.load(&mut ch, 3, ProcessState::Restarted).unwrap();
        assert_eq!(got, vec![3u8; 16]);
        assert!(matches!(
            fresh.load(&mut ch, 0, ProcessState::Restarted),
            Err(CheckpointError::Unavailable { .. })
        ));
    }

    #[test]
    fn buddy_mode_roundtrip() {
        let mut ch = Loop::default();
        let mut store = CkptStore::new(CkptMode::Buddy, RankId(0), 2, None).unwrap();
        store.write(&mut ch, 4, b"state-4").unwrap();
        assert_eq!(store.load(&mut ch, 4, ProcessState::Reinited).unwrap(), b"state-4");
        let mut respawned = CkptStore::new(CkptMode::Buddy, RankId(0), 2, None).unwrap();
        assert_eq!(
            respawned.load(&mut ch, 4, ProcessState::Restarted).unwrap(),
            b"state-4"
        );
    }

    #[test]
    fn buddy_rejects_single_rank() {
        assert!(matches!(
            CkptStore::new(CkptMode::Buddy, RankId(0), 1, None),
            Err(CheckpointError::BuddyNeedsPeers)
        ));
    }

    #[test]
    fn empty_payload_rejected() {
        let mut ch = Loop::default();
        let mut store = CkptStore::new(CkptMode::Buddy, RankId(0), 2, None).unwrap();
        assert!(matches!(
            store.write(&mut ch, 0, &[]),
            Err(CheckpointError::EmptyPayload)
        ));
    }

    #[test]
    fn corrupted_file_is_crc_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        let mut ch = Loop::default();
        let mut store = CkptStore::new(CkptMode::File, RankId(0), 2, Some(run.clone())).unwrap();
        store.write(&mut ch, 1, b"hello world").unwrap();
        let path = run.join(file_name(RankId(0), 1));
        let mut bytes = fs::read(&path).unwrap();
        *bytes.last_mut().unwrap() ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let mut fresh = CkptStore::new(CkptMode::File, RankId(0), 2, Some(run)).unwrap();
        assert!(matches!(
            fresh.load(&mut ch, 1, ProcessState::Restarted),
            Err(CheckpointError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(
            Checkpoint::decode(b"RCK2xxxxxxxxxxxxxxxxxxxxxxxxxxxxxx"),
            Err(CheckpointError::BadFormat(_))
        ));
        let mut enc = Checkpoint::new(RankId(1), 2, vec![1, 2, 3]).encode();
        enc.pop();
        assert!(matches!(
            Checkpoint::decode(&enc),
            Err(CheckpointError::BadFormat(_))
        ));
    }
}
