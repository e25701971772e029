//! Global-restart recovery runtime.
//!
//! A root process supervises per-node daemons, which supervise worker
//! processes. When a worker or a whole daemon dies, the root plans a
//! recovery and the survivors roll back to their restart point while the
//! lost ranks are respawned. Checkpoint-restart and ULFM-style recovery are
//! provided as baselines, together with a benchmark harness.

pub mod bench;
pub mod checkpoint;
pub mod control;
pub mod daemon;
pub mod inject;
mod outbox;
pub mod topology;
pub mod wire;
pub mod worker;

pub use checkpoint::{crc32, Checkpoint, CheckpointError, CkptMode, CkptStore};
pub use control::{collect_commit, ControlError, LaunchConfig, Phase, Root, RunReport, RunState, Strategy};
pub use inject::{make_plan, InjectKind, InjectionPlan};
pub use topology::{
    buddy_of, least_loaded, plan_recovery, DaemonId, Epoch, FailedEntity, PlacementError,
    ProcessState, RankId, ReinitAssignment, Topology,
};
pub use wire::{ControlMessage, Message, MessageKind, WireError};
pub use worker::{CommError, WorldComm};
