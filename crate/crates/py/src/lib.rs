//! Python bindings: placement, checkpoints, fault plans, statistics, the
//! control protocol and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use reinit_core::bench::stats;
use reinit_core::bench::{run_experiment as run_exp, ExperimentConfig};
use reinit_core::topology;
use reinit_core::wire::golden_samples;
use reinit_core::{
    Checkpoint, CkptMode, ControlMessage, DaemonId, FailedEntity, InjectKind, RankId, Strategy,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Supervision tree of daemons and ranks.
#[pyclass]
struct Topology {
    inner: topology::Topology,
}

#[pymethods]
impl Topology {
    #[new]
    fn new() -> Self {
        Self {
            inner: topology::Topology::new(),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (world_size, num_daemons, spares = 0))]
    fn round_robin(world_size: u32, num_daemons: u32, spares: u32) -> PyResult<Self> {
        if num_daemons == 0 {
            return Err(value_err("num_daemons must be positive"));
        }
        Ok(Self {
            inner: topology::Topology::round_robin(world_size, num_daemons, spares),
        })
    }

    fn add_daemon(&mut self, daemon: u32) {
        self.inner.add_daemon(DaemonId(daemon));
    }

    fn place(&mut self, rank: u32, daemon: u32) {
        self.inner.place(RankId(rank), DaemonId(daemon));
    }

    fn mark_dead(&mut self, daemon: u32) {
        self.inner.mark_dead(DaemonId(daemon));
    }

    fn children(&self, daemon: u32) -> Vec<u32> {
        self.inner
            .children(DaemonId(daemon))
            .map(|c| c.iter().map(|r| r.0).collect())
            .unwrap_or_default()
    }

    fn parent(&self, rank: u32) -> Option<u32> {
        self.inner.parent(RankId(rank)).map(|d| d.0)
    }

    fn loads(&self) -> Vec<(u32, usize, bool)> {
        self.inner
            .daemons()
            .map(|(d, r)| (d.0, r.children.len(), r.alive))
            .collect()
    }

    fn least_loaded(&self) -> PyResult<u32> {
        topology::least_loaded(&self.inner)
            .map(|d| d.0)
            .map_err(value_err)
    }

    /// `(daemon, rank)` pairs to respawn after daemon `daemon` fails.
    fn plan_daemon_failure(&self, daemon: u32) -> PyResult<Vec<(u32, u32)>> {
        plan(&self.inner, FailedEntity::Daemon(DaemonId(daemon)))
    }

    /// `(daemon, rank)` pairs to respawn after rank `rank` fails.
    fn plan_rank_failure(&self, rank: u32) -> PyResult<Vec<(u32, u32)>> {
        plan(&self.inner, FailedEntity::Rank(RankId(rank)))
    }

    fn __repr__(&self) -> String {
        format!("Topology({:?})", self.loads())
    }
}

fn plan(t: &topology::Topology, f: FailedEntity) -> PyResult<Vec<(u32, u32)>> {
    topology::plan_recovery(t, f)
        .map(|a| a.0.iter().map(|(d, r)| (d.0, r.0)).collect())
        .map_err(value_err)
}

#[pyfunction]
fn buddy_of(rank: u32, world_size: u32) -> PyResult<u32> {
    if world_size == 0 || rank >= world_size {
        return Err(value_err("need rank < world_size"));
    }
    Ok(topology::buddy_of(RankId(rank), world_size).0)
}

#[pyfunction]
fn crc32(data: &[u8]) -> u32 {
    reinit_core::crc32(data)
}

#[pyfunction]
fn checkpoint_encode<'py>(py: Python<'py>, rank: u32, iter: u64, payload: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &Checkpoint::new(RankId(rank), iter, payload.to_vec()).encode())
}

/// `(rank, iter, payload)`; raises on bad format or CRC mismatch.
#[pyfunction]
fn checkpoint_decode<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(u32, u64, Bound<'py, PyBytes>)> {
    let c = Checkpoint::decode(data).map_err(value_err)?;
    Ok((c.rank.0, c.iter, PyBytes::new(py, &c.payload)))
}

/// `(iteration, victim)` for the given seed, or `None` for kind `"none"`.
#[pyfunction]
fn make_plan(seed: u64, world_size: u32, iterations: u64, kind: &str) -> PyResult<Option<(u64, u32)>> {
    let kind = InjectKind::parse(kind).ok_or_else(|| value_err(format!("unknown kind {kind}")))?;
    if iterations == 0 || world_size == 0 {
        return Err(value_err("iterations and world_size must be positive"));
    }
    let p = reinit_core::make_plan(seed, world_size, iterations, kind);
    Ok((!p.is_none()).then_some((p.iteration, p.victim.0)))
}

#[pyfunction]
fn ci95(samples: Vec<f64>) -> PyResult<(f64, f64)> {
    stats::ci95(&samples).map_err(value_err)
}

#[pyfunction]
fn median(samples: Vec<f64>) -> Option<f64> {
    stats::median(&samples)
}

/// One encoded frame per message kind: `[(kind_name, frame_bytes)]`.
#[pyfunction]
fn sample_frames<'py>(py: Python<'py>) -> Vec<(&'static str, Bound<'py, PyBytes>)> {
    golden_samples()
        .iter()
        .map(|m| (m.kind().name(), PyBytes::new(py, &m.encode())))
        .collect()
}

/// `(kind_name, epoch, bytes_consumed)` of the first frame in `data`.
#[pyfunction]
fn decode_frame(data: &[u8]) -> PyResult<(&'static str, u64, usize)> {
    let (m, used) = ControlMessage::decode(data).map_err(value_err)?;
    Ok((m.kind().name(), m.epoch.0, used))
}

/// Runs an experiment and returns one dict per repetition.
#[pyfunction]
#[pyo3(signature = (
    exe, world_size, strategy, ckpt = "file", inject = "none", daemons = 1, spares = 0,
    seed = 0, iterations = 20, repetitions = 1, vec_len = 4096, ckpt_dir = None
))]
#[allow(clippy::too_many_arguments)]
fn run_experiment<'py>(
    py: Python<'py>,
    exe: PathBuf,
    world_size: u32,
    strategy: &str,
    ckpt: &str,
    inject: &str,
    daemons: u32,
    spares: u32,
    seed: u64,
    iterations: u64,
    repetitions: u32,
    vec_len: usize,
    ckpt_dir: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let strategy = Strategy::parse(strategy).ok_or_else(|| value_err(format!("strategy {strategy}")))?;
    let mut cfg = ExperimentConfig::new(exe, world_size, daemons, strategy);
    cfg.ckpt = CkptMode::parse(ckpt).ok_or_else(|| value_err(format!("ckpt {ckpt}")))?;
    cfg.inject = InjectKind::parse(inject).ok_or_else(|| value_err(format!("inject {inject}")))?;
    cfg.spares = spares;
    cfg.seed = seed;
    cfg.iterations = iterations;
    cfg.repetitions = repetitions;
    cfg.vec_len = vec_len;
    if let Some(d) = ckpt_dir {
        cfg.ckpt_dir = d;
    }
    let outs = py
        .detach(|| run_exp(&cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    outs.iter()
        .map(|o| {
            let d = PyDict::new(py);
            d.set_item("checksum", o.report.checksum)?;
            d.set_item("epoch", o.report.epoch.0)?;
            d.set_item("recoveries", o.report.recoveries.len())?;
            d.set_item("t_app", o.timing.t_app)?;
            d.set_item("t_ckpt_write", o.timing.t_ckpt_write)?;
            d.set_item("t_ckpt_read", o.timing.t_ckpt_read)?;
            d.set_item("t_recovery", o.timing.t_recovery)?;
            d.set_item("t_total", o.timing.t_total)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn reinit_rt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Topology>()?;
    m.add_function(wrap_pyfunction!(buddy_of, m)?)?;
    m.add_function(wrap_pyfunction!(crc32, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_encode, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_decode, m)?)?;
    m.add_function(wrap_pyfunction!(make_plan, m)?)?;
    m.add_function(wrap_pyfunction!(ci95, m)?)?;
    m.add_function(wrap_pyfunction!(median, m)?)?;
    m.add_function(wrap_pyfunction!(sample_frames, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
