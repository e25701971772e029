//! Synthetic proxy application: weak-scaled 1-D Jacobi sweep.
//!
//! Rank `r` owns global indices `r*L .. (r+1)*L`. Each iteration exchanges
//! one halo value with each neighbour, updates
//! `x'[g] = (x[g-1] + x[g+1] + b[g]) / 2` with zero outer boundaries,
//! all-reduces the squared update norm and writes a checkpoint.
//!
//! `ranksum` is a smaller diagnostic app that checks the world communicator
//! after recovery still spans every original rank id.

use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::checkpoint::{CheckpointError, CkptMode, CkptStore};
use crate::control::Strategy;
use crate::inject::{self, InjectKind, InjectionPlan};
use crate::topology::{Epoch, ProcessState, RankId};
use crate::wire::DoneReport;
use crate::worker::{
    reinit_entry, runtime_init, ulfm_entry, CommError, ReduceOp, Unwind, WorkerEnv, WorldComm,
};

pub const DEFAULT_VEC_LEN: usize = 4096;
/// Application names accepted by the worker.
pub const APPS: [&str; 2] = ["jacobi", "ranksum"];

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad worker configuration: {0}")]
    Config(String),
}

impl Unwind for AppError {
    fn comm_error(&self) -> Option<&CommError> {
        match self {
            AppError::Comm(e) | AppError::Checkpoint(CheckpointError::Comm(e)) => Some(e),
            _ => None,
        }
    }
}

/// Right-hand side at global index `g`.
pub fn rhs(g: u64) -> f64 {
    1.0 + ((g.wrapping_mul(7919)) % 101) as f64 / 101.0
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn vec_bytes(x: &[f64]) -> Vec<u8> {
    x.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn vec_from_bytes(b: &[u8], len: usize) -> Result<Vec<f64>, AppError> {
    if b.len() != len * 8 {
        return Err(AppError::Config(format!(
            "checkpoint holds {} bytes, expected {}",
            b.len(),
            len * 8
        )));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Combines per-rank checksums (rank order) into the world checksum.
pub fn combine_checksums(parts: &[u64]) -> u64 {
    let bytes: Vec<u8> = parts.iter().flat_map(|c| c.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

/// One stencil sweep of a rank's block. Returns the squared update norm.
pub fn sweep(x: &[f64], left: f64, right: f64, base: u64, out: &mut [f64]) -> f64 {
    let n = x.len();
    let mut res = 0.0;
    for i in 0..n {
        let l = if i == 0 { left } else { x[i - 1] };
        let r = if i + 1 == n { right } else { x[i + 1] };
        let v = 0.5 * (l + r + rhs(base + i as u64));
        let d = v - x[i];
        res += d * d;
        out[i] = v;
    }
    res
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AppTimes {
    pub t_app: f64,
    pub t_ckpt_write: f64,
    pub t_ckpt_read: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppResult {
    pub checksum: u64,
    pub residual: f64,
}

/// Fixed parameters of one application instance.
#[derive(Debug, Clone)]
pub struct AppParams {
    pub iters: u64,
    pub vec_len: usize,
    pub plan: InjectionPlan,
}

/// The restart-point body. Loads the committed checkpoint when one exists,
/// then runs the remaining iterations.
pub fn proxy_app(
    comm: &mut WorldComm,
    store: &mut CkptStore,
    params: &AppParams,
    state: ProcessState,
    times: &mut AppTimes,
) -> Result<AppResult, AppError> {
    let rank = comm.rank();
    let n = comm.size();
    let len = params.vec_len;
    let base = rank.0 as u64 * len as u64;
    // injection is armed only in the original launch
    let armed = state == ProcessState::New && comm.epoch() == Epoch(0);

    let (start, mut x) = match comm.commit_iter().filter(|_| store.enabled()) {
        Some(c) => {
            let t = Instant::now();
            let bytes = store.load(comm, c, state)?;
            times.t_ckpt_read += t.elapsed().as_secs_f64();
            (c + 1, vec_from_bytes(&bytes, len)?)
        }
        None => (0, vec![0.0; len]),
    };
    let mut next = vec![0.0; len];
    let mut residual = 0.0;

    for it in start..params.iters {
        if armed {
            inject::trigger(&params.plan, rank, it);
        }
        let t = Instant::now();
        let tag = it as u32;
        if rank.0 > 0 {
            comm.send(RankId(rank.0 - 1), tag, &x[0].to_le_bytes())?;
        }
        if rank.0 + 1 < n {
            comm.send(RankId(rank.0 + 1), tag, &x[len - 1].to_le_bytes())?;
        }
        let halo = |comm: &mut WorldComm, from: u32| -> Result<f64, AppError> {
            let b = comm.recv(RankId(from), tag)?;
            let arr: [u8; 8] = b
                .as_slice()
                .try_into()
                .map_err(|_| CommError::Protocol("halo payload".into()))?;
            Ok(f64::from_le_bytes(arr))
        };
        let left = if rank.0 > 0 { halo(comm, rank.0 - 1)? } else { 0.0 };
        let right = if rank.0 + 1 < n { halo(comm, rank.0 + 1)? } else { 0.0 };
        let local = sweep(&x, left, right, base, &mut next);
        residual = comm.allreduce(ReduceOp::Sum, &[local])?[0];
        std::mem::swap(&mut x, &mut next);
        times.t_app += t.elapsed().as_secs_f64();

        if store.enabled() {
            let t = Instant::now();
            store.write(comm, it, &vec_bytes(&x))?;
            times.t_ckpt_write += t.elapsed().as_secs_f64();
        }
    }

    let t = Instant::now();
    let mine = fnv1a64(&vec_bytes(&x));
    let gathered = comm.gather(RankId(0), &mine.to_le_bytes())?;
    let combined = gathered.map(|parts| {
        let sums: Vec<u64> = parts
            .iter()
            .map(|p| u64::from_le_bytes(p.as_slice().try_into().unwrap_or([0; 8])))
            .collect();
        combine_checksums(&sums)
    });
    let out = comm.bcast(RankId(0), &combined.unwrap_or(0).to_le_bytes())?;
    let checksum = u64::from_le_bytes(
        out.as_slice()
            .try_into()
            .map_err(|_| CommError::Protocol("checksum payload".into()))?,
    );
    times.t_app += t.elapsed().as_secs_f64();
    Ok(AppResult { checksum, residual })
}

/// Restart-point body that all-reduces rank ids every iteration and fails
/// unless the sum is n(n-1)/2. The checksum is the running total.
pub fn ranksum_app(
    comm: &mut WorldComm,
    store: &mut CkptStore,
    params: &AppParams,
    state: ProcessState,
    times: &mut AppTimes,
) -> Result<AppResult, AppError> {
    let rank = comm.rank();
    let n = comm.size() as u64;
    let want = n * (n - 1) / 2;
    let armed = state == ProcessState::New && comm.epoch() == Epoch(0);
    let (start, mut total) = match comm.commit_iter().filter(|_| store.enabled()) {
        Some(c) => {
            let t = Instant::now();
            let bytes = store.load(comm, c, state)?;
            times.t_ckpt_read += t.elapsed().as_secs_f64();
            let arr: [u8; 8] = bytes
                .as_slice()
                .try_into()
                .map_err(|_| AppError::Config("ranksum checkpoint size".into()))?;
            (c + 1, u64::from_le_bytes(arr))
        }
        None => (0, 0),
    };
    for it in start..params.iters {
        if armed {
            inject::trigger(&params.plan, rank, it);
        }
        let t = Instant::now();
        let sum = comm.allreduce(ReduceOp::Sum, &[rank.0 as f64])?[0];
        if sum != want as f64 {
            return Err(AppError::Config(format!(
                "rank sum {sum} at iteration {it}, want {want}"
            )));
        }
        total += want;
        times.t_app += t.elapsed().as_secs_f64();
        if store.enabled() {
            let t = Instant::now();
            store.write(comm, it, &total.to_le_bytes())?;
            times.t_ckpt_write += t.elapsed().as_secs_f64();
        }
    }
    Ok(AppResult {
        checksum: total,
        residual: 0.0,
    })
}

/// Everything a worker process gets from its command line and environment.
#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub env: WorkerEnv,
    pub app: String,
    pub ckpt: CkptMode,
    pub strategy: Strategy,
    pub params: AppParams,
    pub ckpt_dir: Option<PathBuf>,
    pub run_id: String,
}

fn env_var<T: std::str::FromStr>(name: &str) -> Result<Option<T>, AppError> {
    match std::env::var(name) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| AppError::Config(format!("{name}={v}"))),
        Err(_) => Ok(None),
    }
}

impl WorkerConfig {
    /// Fills the shared settings from the `RH_*` environment.
    pub fn from_env(env: WorkerEnv, app: String, ckpt: CkptMode) -> Result<Self, AppError> {
        let world: u32 = env_var("RH_WORLD_SIZE")?
            .ok_or_else(|| AppError::Config("RH_WORLD_SIZE unset".into()))?;
        let strategy = match std::env::var("RH_STRATEGY") {
            Ok(s) => Strategy::parse(&s).ok_or_else(|| AppError::Config(format!("strategy {s}")))?,
            Err(_) => Strategy::Reinit,
        };
        let kind = match std::env::var("RH_INJECT_KIND") {
            Ok(s) => InjectKind::parse(&s).ok_or_else(|| AppError::Config(format!("inject {s}")))?,
            Err(_) => InjectKind::None,
        };
        let plan = InjectionPlan {
            kind,
            iteration: env_var("RH_INJECT_ITER")?.unwrap_or(0),
            victim: RankId(env_var("RH_INJECT_VICTIM")?.unwrap_or(0)),
            seed: env_var("RH_INJECT_SEED")?.unwrap_or(0),
        };
        Ok(Self {
            env: WorkerEnv {
                world_size: world,
                ..env
            },
            app,
            ckpt,
            strategy,
            params: AppParams {
                iters: env_var("RH_ITERS")?.unwrap_or(20),
                vec_len: env_var("RH_VEC_LEN")?.unwrap_or(DEFAULT_VEC_LEN),
                plan,
            },
            ckpt_dir: std::env::var_os("RH_CKPT_DIR").map(PathBuf::from),
            run_id: std::env::var("RH_RUN_ID").unwrap_or_else(|_| "run".into()),
        })
    }
}

/// Worker process body. Returns the process exit code.
pub fn worker_main(cfg: WorkerConfig) -> i32 {
    match run_worker(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("rank {} failed: {e}", cfg.env.rank.0);
            1
        }
    }
}

fn run_worker(cfg: &WorkerConfig) -> Result<(), AppError> {
    let body = match cfg.app.as_str() {
        "jacobi" => proxy_app,
        "ranksum" => ranksum_app,
        other => return Err(AppError::Config(format!("unknown app {other}"))),
    };
    let run_dir = cfg.ckpt_dir.as_ref().map(|d| d.join(&cfg.run_id));
    let mut store = CkptStore::new(cfg.ckpt, cfg.env.rank, cfg.env.world_size, run_dir)?;
    let mut comm = runtime_init(&cfg.env)?;
    let mut times = AppTimes::default();
    let mut result = None;
    let mut point = |comm: &mut WorldComm, state: ProcessState| -> Result<i32, AppError> {
        result = Some(body(comm, &mut store, &cfg.params, state, &mut times)?);
        Ok(0)
    };
    let code = match cfg.strategy {
        Strategy::Reinit => reinit_entry(&mut comm, &mut point)?,
        Strategy::Ulfm => ulfm_entry(&mut comm, &mut point)?,
        Strategy::Cr => {
            let state = comm.initial_state();
            comm.record_entry(state);
            point(&mut comm, state)?
        }
    };
    let res = result.ok_or_else(|| AppError::Config("restart point produced nothing".into()))?;
    let report = DoneReport {
        rank: comm.rank(),
        exit_code: code,
        checksum: res.checksum,
        residual: res.residual,
        t_app: times.t_app,
        t_ckpt_write: times.t_ckpt_write,
        t_ckpt_read: times.t_ckpt_read,
        states: comm.history().to_vec(),
    };
    comm.finish(report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn sweep_matches_stencil() {
        let x = [1.0, 2.0, 3.0];
        let mut out = [0.0; 3];
        let res = sweep(&x, 0.5, 4.0, 0, &mut out);
        let want = [
            0.5 * (0.5 + 2.0 + rhs(0)),
            0.5 * (1.0 + 3.0 + rhs(1)),
            0.5 * (2.0 + 4.0 + rhs(2)),
        ];
        assert_eq!(out, want);
        let r: f64 = want.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_eq!(res, r);
    }
}
