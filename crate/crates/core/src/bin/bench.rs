use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reinit_core::bench::app::{worker_main, WorkerConfig};
use reinit_core::bench::csv::emit_csv;
use reinit_core::bench::stats::{ci95, median};
use reinit_core::bench::verify::{verify_all, VerifyOptions};
use reinit_core::bench::{csv_rows, run_strategy, ExperimentConfig};
use reinit_core::daemon::{run_daemon, DaemonConfig};
use reinit_core::worker::WorkerEnv;
use reinit_core::{CkptMode, DaemonId, Epoch, InjectKind, ProcessState, RankId, Strategy};

#[derive(Parser)]
#[command(name = "bench", about = "Global-restart recovery benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment configuration and write per-repetition timings.
    Run(RunArgs),
    /// Run the full acceptance matrix; exits 0 iff every criterion holds.
    Verify(VerifyArgs),
    #[command(hide = true)]
    Daemon(DaemonArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Cr,
    Reinit,
    Ulfm,
}

#[derive(Clone, Copy, ValueEnum)]
enum CkptArg {
    File,
    Buddy,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectArg {
    None,
    Proc,
    Node,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "jacobi")]
    app: String,
    /// World size.
    #[arg(long)]
    n: u32,
    #[arg(long, default_value_t = 1)]
    daemons: u32,
    #[arg(long, default_value_t = 0)]
    spares: u32,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "file")]
    ckpt: CkptArg,
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    inject: InjectArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    iters: u64,
    #[arg(long, default_value_t = 10)]
    reps: u32,
    /// Per-rank vector length.
    #[arg(long, default_value_t = 4096)]
    vec_len: usize,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    iters: u64,
}

#[derive(Args)]
struct DaemonArgs {
    #[arg(long)]
    root_addr: String,
    #[arg(long)]
    id: u32,
    #[arg(long)]
    slots: u32,
    #[arg(long)]
    world_size: u32,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    rank: u32,
    #[arg(long)]
    epoch: u64,
    #[arg(long, value_parser = parse_state)]
    state: ProcessState,
    #[arg(long)]
    daemon_addr: String,
    /// Committed iteration, or `none`.
    #[arg(long, default_value = "none")]
    commit: String,
    #[arg(long, default_value = "jacobi")]
    app: String,
    #[arg(long, default_value = "file")]
    ckpt: String,
}

fn parse_state(s: &str) -> Result<ProcessState, String> {
    ProcessState::parse(s).ok_or_else(|| format!("unknown state {s}"))
}

fn default_ckpt_dir() -> PathBuf {
    std::env::temp_dir().join("reinit-ckpt")
}

fn exe() -> io::Result<PathBuf> {
    std::env::current_exe()
}

fn cmd_run(a: RunArgs) -> Result<(), Box<dyn std::error::Error>> {
    let strategy = match a.strategy {
        StrategyArg::Cr => Strategy::Cr,
        StrategyArg::Reinit => Strategy::Reinit,
        StrategyArg::Ulfm => Strategy::Ulfm,
    };
    let mut cfg = ExperimentConfig::new(exe()?, a.n, a.daemons, strategy);
    cfg.app = a.app;
    cfg.spares = a.spares;
    cfg.ckpt = match a.ckpt {
        CkptArg::File => CkptMode::File,
        CkptArg::Buddy => CkptMode::Buddy,
        CkptArg::None => CkptMode::None,
    };
    cfg.inject = match a.inject {
        InjectArg::None => InjectKind::None,
        InjectArg::Proc => InjectKind::Process,
        InjectArg::Node => InjectKind::Node,
    };
    cfg.seed = a.seed;
    cfg.iterations = a.iters;
    cfg.repetitions = a.reps;
    cfg.vec_len = a.vec_len;
    cfg.ckpt_dir = a.ckpt_dir.unwrap_or_else(default_ckpt_dir);
    cfg.validate()?;

    let timings = run_strategy(&cfg)?;
    let rows = csv_rows(&cfg, &timings);
    match &a.out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            emit_csv(&rows, &mut w)?;
            w.flush()?;
        }
        None => emit_csv(&rows, &mut io::stdout().lock())?,
    }
    let rec: Vec<f64> = timings.iter().map(|t| t.t_recovery).collect();
    let tot: Vec<f64> = timings.iter().map(|t| t.t_total).collect();
    eprintln!(
        "{} n={} reps={}: median t_recovery {:.4}s, median t_total {:.4}s",
        cfg.strategy,
        cfg.world_size,
        timings.len(),
        median(&rec).unwrap_or(0.0),
        median(&tot).unwrap_or(0.0)
    );
    if let Ok((m, hw)) = ci95(&tot) {
        eprintln!("t_total mean {m:.4}s ± {hw:.4}s (95% CI)");
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let mut opts = VerifyOptions::new(exe()?, a.ckpt_dir.unwrap_or_else(default_ckpt_dir));
    opts.iterations = a.iters;
    let results = verify_all(&opts, |r| println!("{}", r.line()));
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", results.len());
    Ok(passed == results.len())
}

fn cmd_worker(a: WorkerArgs) -> i32 {
    let commit = match a.commit.as_str() {
        "none" => None,
        s => match s.parse() {
            Ok(c) => Some(c),
            Err(_) => {
                eprintln!("bad --commit {s}");
                return 2;
            }
        },
    };
    let Some(ckpt) = CkptMode::parse(&a.ckpt) else {
        eprintln!("bad --ckpt {}", a.ckpt);
        return 2;
    };
    let env = WorkerEnv {
        rank: RankId(a.rank),
        world_size: 0,
        epoch: Epoch(a.epoch),
        state: a.state,
        daemon_addr: a.daemon_addr,
        commit,
    };
    match WorkerConfig::from_env(env, a.app, ckpt) {
        Ok(cfg) => worker_main(cfg),
        Err(e) => {
            eprintln!("worker: {e}");
            2
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RH_LOG", "warn")).init();
    match Cli::parse().cmd {
        Cmd::Run(a) => match cmd_run(a) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("bench run: {e}");
                ExitCode::FAILURE
            }
        },
        Cmd::Verify(a) => match cmd_verify(a) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::FAILURE,
            Err(e) => {
                eprintln!("bench verify: {e}");
                ExitCode::FAILURE
            }
        },
        Cmd::Daemon(a) => {
            let worker_args = vec![
                "--app".to_string(),
                std::env::var("RH_APP").unwrap_or_else(|_| "jacobi".into()),
                "--ckpt".to_string(),
                std::env::var("RH_CKPT_MODE").unwrap_or_else(|_| "file".into()),
            ];
            let cfg = DaemonConfig {
                root_addr: a.root_addr,
                id: DaemonId(a.id),
                slots: a.slots,
                world_size: a.world_size,
                exe: match exe() {
                    Ok(p) => p,
                    Err(e) => {
                        eprintln!("daemon: {e}");
                        return ExitCode::FAILURE;
                    }
                },
                worker_args,
            };
            match run_daemon(cfg) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    log::warn!("daemon {}: {e}", a.id);
                    ExitCode::FAILURE
                }
            }
        }
        Cmd::Worker(a) => ExitCode::from(cmd_worker(a) as u8),
    }
}
