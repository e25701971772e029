#![allow(dead_code)]

use std::path::{Path, PathBuf};

use reinit_core::bench::ExperimentConfig;
use reinit_core::{CkptMode, InjectKind, Strategy};

pub fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

/// Serial Jacobi over the whole global vector, then the per-rank and
/// combined FNV-1a checksums.
pub fn serial_checksum(world: u32, iters: u64, len: usize) -> u64 {
    let n = world as usize * len;
    let b: Vec<f64> = (0..n as u64)
        .map(|g| 1.0 + ((g * 7919) % 101) as f64 / 101.0)
        .collect();
    let mut x = vec![0.0f64; n];
    for _ in 0..iters {
        let prev = x.clone();
        for g in 0..n {
            let l = if g == 0 { 0.0 } else { prev[g - 1] };
            let r = if g + 1 == n { 0.0 } else { prev[g + 1] };
            x[g] = 0.5 * (l + r + b[g]);
        }
    }
    let mut parts = Vec::new();
    for block in x.chunks(len) {
        let bytes: Vec<u8> = block.iter().flat_map(|v| v.to_le_bytes()).collect();
        parts.extend(fnv(&bytes).to_le_bytes());
    }
    fnv(&parts)
}

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_bench"))
}

/// Small single-repetition config.
pub fn small(
    dir: &Path,
    world: u32,
    daemons: u32,
    strategy: Strategy,
    ckpt: CkptMode,
    inject: InjectKind,
) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(exe(), world, daemons, strategy);
    c.ckpt = ckpt;
    c.inject = inject;
    c.iterations = 10;
    c.vec_len = 64;
    c.repetitions = 1;
    c.ckpt_dir = dir.to_path_buf();
    if inject == InjectKind::Node {
        c.spares = 1;
    }
    c
}

/// Process-tree tests take this so they do not compete for the CPU.
pub fn serial() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
