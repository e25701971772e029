//! Experiment orchestration: configuration, repeated runs and timing.

pub mod app;
pub mod csv;
pub mod stats;
pub mod verify;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use thiserror::Error;

use crate::checkpoint::CkptMode;
use crate::control::{ControlError, LaunchConfig, Root, RunReport};
use crate::inject::{make_plan, InjectKind, InjectionPlan};

pub use crate::control::Strategy;
pub use csv::{CsvRow, TimingBreakdown};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub app: String,
    pub world_size: u32,
    pub num_daemons: u32,
    pub spares: u32,
    pub strategy: Strategy,
    pub ckpt: CkptMode,
    pub inject: InjectKind,
    pub seed: u64,
    pub iterations: u64,
    pub repetitions: u32,
    pub vec_len: usize,
    pub ckpt_dir: PathBuf,
    /// Executable providing the `daemon` and `worker` subcommands.
    pub exe: PathBuf,
    /// Replaces the seeded plan, e.g. to pick a specific victim.
    pub plan_override: Option<InjectionPlan>,
    pub run_timeout: Duration,
}

impl ExperimentConfig {
    pub fn new(exe: PathBuf, world_size: u32, num_daemons: u32, strategy: Strategy) -> Self {
        Self {
            app: "jacobi".into(),
            world_size,
            num_daemons,
            spares: 0,
            strategy,
            ckpt: CkptMode::File,
            inject: InjectKind::None,
            seed: 0,
            iterations: 20,
            repetitions: 10,
            vec_len: app::DEFAULT_VEC_LEN,
            ckpt_dir: std::env::temp_dir().join("reinit-ckpt"),
            exe,
            plan_override: None,
            run_timeout: Duration::from_secs(120),
        }
    }

    /// Rejects combinations outside the supported strategy/checkpoint matrix.
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.into()));
        if !app::APPS.contains(&self.app.as_str()) {
            return bad(&format!("unknown app {}", self.app));
        }
        if self.world_size == 0 || self.num_daemons == 0 {
            return bad("world size and daemon count must be positive");
        }
        if self.iterations == 0 || self.vec_len == 0 {
            return bad("iterations and vector length must be positive");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be positive");
        }
        let inject = self.plan().kind;
        match (self.strategy, self.ckpt, inject) {
            (Strategy::Cr, CkptMode::Buddy, _) => return bad("CR needs file checkpoints"),
            (_, CkptMode::Buddy, InjectKind::Node) => {
                return bad("node failures need file checkpoints")
            }
            (_, CkptMode::Buddy, _) if self.world_size < 2 => {
                return bad("buddy checkpoints need at least two ranks")
            }
            (_, CkptMode::None, k) if k != InjectKind::None => {
                return bad("fault injection needs checkpoints")
            }
            (Strategy::Reinit | Strategy::Ulfm, _, InjectKind::Node)
                if self.num_daemons + self.spares < 2 =>
            {
                return bad("node failure recovery needs a second daemon")
            }
            _ => {}
        }
        if let Some(p) = self.plan_override {
            if p.kind != InjectKind::None
                && (p.iteration >= self.iterations || p.victim.0 >= self.world_size)
            {
                return bad("injection plan out of range");
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> InjectionPlan {
        self.plan_override.unwrap_or_else(|| {
            make_plan(self.seed, self.world_size, self.iterations, self.inject)
        })
    }
}

/// Result of one repetition.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timing: TimingBreakdown,
    pub plan: InjectionPlan,
}

fn run_id(cfg: &ExperimentConfig) -> String {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    format!(
        "{}-{}-n{}-{}",
        std::process::id(),
        cfg.strategy,
        cfg.world_size,
        NEXT.fetch_add(1, Ordering::Relaxed)
    )
}

/// Launches one run and waits for it to complete.
pub fn run_once(cfg: &ExperimentConfig) -> Result<RunOutcome, BenchError> {
    cfg.validate()?;
    let plan = cfg.plan();
    let run_id = run_id(cfg);
    let env: Vec<(String, String)> = [
        ("RH_WORLD_SIZE", cfg.world_size.to_string()),
        ("RH_ITERS", cfg.iterations.to_string()),
        ("RH_VEC_LEN", cfg.vec_len.to_string()),
        ("RH_APP", cfg.app.clone()),
        ("RH_CKPT_MODE", cfg.ckpt.name().to_string()),
        ("RH_CKPT_DIR", cfg.ckpt_dir.display().to_string()),
        ("RH_RUN_ID", run_id.clone()),
        ("RH_STRATEGY", cfg.strategy.name().to_string()),
        ("RH_INJECT_KIND", plan.kind.name().to_string()),
        ("RH_INJECT_ITER", plan.iteration.to_string()),
        ("RH_INJECT_VICTIM", plan.victim.0.to_string()),
        ("RH_INJECT_SEED", plan.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let mut lc = LaunchConfig::new(cfg.exe.clone(), cfg.world_size, cfg.num_daemons, cfg.strategy);
    lc.spares = cfg.spares;
    lc.env = env;
    lc.relaunch_env = vec![("RH_INJECT_KIND".into(), "none".into())];
    lc.run_timeout = cfg.run_timeout;

    let result = Root::new(lc).and_then(Root::run);
    let _ = std::fs::remove_dir_all(cfg.ckpt_dir.join(&run_id));
    let report = result?;

    let worker = report
        .dones
        .values()
        .max_by(|a, b| {
            let ka = a.t_app + a.t_ckpt_write + a.t_ckpt_read;
            let kb = b.t_app + b.t_ckpt_write + b.t_ckpt_read;
            ka.total_cmp(&kb)
        })
        .cloned();
    let timing = TimingBreakdown {
        t_app: worker.as_ref().map_or(0.0, |w| w.t_app),
        t_ckpt_write: worker.as_ref().map_or(0.0, |w| w.t_ckpt_write),
        t_ckpt_read: worker.as_ref().map_or(0.0, |w| w.t_ckpt_read),
        t_recovery: report.recoveries.iter().fold(0.0, |acc, r| acc + r.t_recovery),
        t_total: report.t_total,
    };
    Ok(RunOutcome {
        report,
        timing,
        plan,
    })
}

/// Runs `cfg.repetitions` repetitions sequentially.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>, BenchError> {
    (0..cfg.repetitions).map(|_| run_once(cfg)).collect()
}

pub fn run_strategy(cfg: &ExperimentConfig) -> Result<Vec<TimingBreakdown>, BenchError> {
    Ok(run_experiment(cfg)?.into_iter().map(|o| o.timing).collect())
}

/// CSV rows for a finished experiment.
pub fn csv_rows(cfg: &ExperimentConfig, timings: &[TimingBreakdown]) -> Vec<CsvRow> {
    timings
        .iter()
        .enumerate()
        .map(|(rep, t)| CsvRow {
            app: cfg.app.clone(),
            strategy: cfg.strategy,
            ckpt_mode: cfg.ckpt.name().into(),
            inject: cfg.plan().kind.name().into(),
            world_size: cfg.world_size,
            rep: rep as u32,
            timing: *t,
        })
        .collect()
}
