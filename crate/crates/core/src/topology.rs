//! Identity types and the root → daemon → worker supervision tree.
//!
//! Everything in here is pure: placement decisions are computed from an
//! immutable [`Topology`] snapshot and only applied by the control plane.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Dense worker rank, `0..world_size`. Preserved across recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RankId(pub u32);

/// One daemon per logical node, `0..num_daemons + spares`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DaemonId(pub u32);

/// Recovery generation. Starts at 0 and grows by one per completed recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Epoch(pub u64);

impl Epoch {
    pub fn next(self) -> Epoch {
        Epoch(self.0 + 1)
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for DaemonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Runtime state handed to the restart point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcessState {
    /// First entry of a freshly launched process.
    New,
    /// Survivor that rolled back after a failure.
    Reinited,
    /// Process spawned by recovery to replace a failed rank.
    Restarted,
}

impl ProcessState {
    pub fn as_u8(self) -> u8 {
        match self {
            ProcessState::New => 0,
            ProcessState::Reinited => 1,
            ProcessState::Restarted => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ProcessState::New),
            1 => Some(ProcessState::Reinited),
            2 => Some(ProcessState::Restarted),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProcessState::New => "NEW",
            ProcessState::Reinited => "REINITED",
            ProcessState::Restarted => "RESTARTED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NEW" => Some(ProcessState::New),
            "REINITED" => Some(ProcessState::Reinited),
            "RESTARTED" => Some(ProcessState::Restarted),
            _ => None,
        }
    }
}

impl fmt::Display for ProcessState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlacementError {
    #[error("no alive daemons left to host failed ranks")]
    NoAliveDaemons,
    #[error("unknown rank {0}")]
    UnknownRank(RankId),
    #[error("unknown daemon {0}")]
    UnknownDaemon(DaemonId),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DaemonRecord {
    pub addr: Option<String>,
    pub alive: bool,
    pub children: BTreeSet<RankId>,
}

/// The entity whose failure triggered recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailedEntity {
    Rank(RankId),
    Daemon(DaemonId),
}

/// `(daemon, rank)` pairs carried by a REINIT command: which daemon respawns
/// which failed rank.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReinitAssignment(pub Vec<(DaemonId, RankId)>);

impl ReinitAssignment {
    pub fn ranks(&self) -> impl Iterator<Item = RankId> + '_ {
        self.0.iter().map(|&(_, r)| r)
    }

    pub fn for_daemon(&self, d: DaemonId) -> impl Iterator<Item = RankId> + '_ {
        self.0.iter().filter(move |&&(dd, _)| dd == d).map(|&(_, r)| r)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Topology {
    daemons: BTreeMap<DaemonId, DaemonRecord>,
    parent: BTreeMap<RankId, DaemonId>,
    spares: u32,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ranks dealt round-robin over the first `num_daemons` daemons; `spares`
    /// extra daemons start empty.
    pub fn round_robin(world_size: u32, num_daemons: u32, spares: u32) -> Self {
        assert!(num_daemons >= 1, "at least one daemon is required");
        let mut topo = Topology::new();
        for d in 0..num_daemons + spares {
            topo.add_daemon(DaemonId(d));
        }
        topo.spares = spares;
        for r in 0..world_size {
            topo.place(RankId(r), DaemonId(r % num_daemons));
        }
        topo
    }

    pub fn add_daemon(&mut self, d: DaemonId) {
        self.daemons.insert(
            d,
            DaemonRecord {
                addr: None,
                alive: true,
                children: BTreeSet::new(),
            },
        );
    }

    /// Attach `rank` to `daemon`, detaching it from any previous parent.
    pub fn place(&mut self, rank: RankId, daemon: DaemonId) {
        if let Some(old) = self.parent.insert(rank, daemon) {
            if let Some(rec) = self.daemons.get_mut(&old) {
                rec.children.remove(&rank);
            }
        }
        self.daemons
            .entry(daemon)
            .or_insert_with(|| DaemonRecord {
                addr: None,
                alive: true,
                children: BTreeSet::new(),
            })
            .children
            .insert(rank);
    }

    pub fn set_addr(&mut self, d: DaemonId, addr: String) {
        if let Some(rec) = self.daemons.get_mut(&d) {
            rec.addr = Some(addr);
        }
    }

    pub fn mark_dead(&mut self, d: DaemonId) {
        if let Some(rec) = self.daemons.get_mut(&d) {
            rec.alive = false;
        }
    }

    pub fn spares(&self) -> u32 {
        self.spares
    }

    pub fn daemon(&self, d: DaemonId) -> Option<&DaemonRecord> {
        self.daemons.get(&d)
    }

    pub fn daemons(&self) -> impl Iterator<Item = (DaemonId, &DaemonRecord)> {
        self.daemons.iter().map(|(&d, r)| (d, r))
    }

    pub fn alive_daemons(&self) -> impl Iterator<Item = DaemonId> + '_ {
        self.daemons.iter().filter(|(_, r)| r.alive).map(|(&d, _)| d)
    }

    pub fn parent(&self, rank: RankId) -> Option<DaemonId> {
        self.parent.get(&rank).copied()
    }

    pub fn children(&self, d: DaemonId) -> Option<&BTreeSet<RankId>> {
        self.daemons.get(&d).map(|r| &r.children)
    }

    pub fn load(&self, d: DaemonId) -> usize {
        self.daemons.get(&d).map_or(0, |r| r.children.len())
    }

    pub fn world_size(&self) -> usize {
        self.parent.len()
    }

    /// Ranks hosted by alive daemons.
    pub fn live_rank_count(&self) -> usize {
        self.daemons
            .values()
            .filter(|r| r.alive)
            .map(|r| r.children.len())
            .sum()
    }

    /// Moves every assigned rank under its new parent. The failed daemon (if
    /// any) must already be marked dead.
    pub fn apply(&mut self, assignment: &ReinitAssignment) {
        for &(d, r) in &assignment.0 {
            self.place(r, d);
        }
    }
}

/// Buddy of `rank`: the cyclically next rank.
pub fn buddy_of(rank: RankId, world_size: u32) -> RankId {
    debug_assert!(world_size >= 1 && rank.0 < world_size);
    RankId((rank.0 + 1) % world_size)
}

/// Alive daemon with the fewest children, lowest id on ties.
pub fn least_loaded(topology: &Topology) -> Result<DaemonId, PlacementError> {
    topology
        .daemons
        .iter()
        .filter(|(_, r)| r.alive)
        .min_by_key(|(&d, r)| (r.children.len(), d))
        .map(|(&d, _)| d)
        .ok_or(PlacementError::NoAliveDaemons)
}

/// Where each rank lost to `failed` gets respawned.
///
/// A failed daemon's children all go to the single least-loaded survivor;
/// a failed rank goes back to its original parent. The failed daemon is
/// excluded from the argmin even if it is still flagged alive.
pub fn plan_recovery(
    topology: &Topology,
    failed: FailedEntity,
) -> Result<ReinitAssignment, PlacementError> {
    match failed {
        FailedEntity::Daemon(d) => {
            let rec = topology
                .daemons
                .get(&d)
                .ok_or(PlacementError::UnknownDaemon(d))?;
            if rec.children.is_empty() {
                return Ok(ReinitAssignment::default());
            }
            let mut survivors = topology.clone();
            survivors.mark_dead(d);
            let target = least_loaded(&survivors)?;
            Ok(ReinitAssignment(
                rec.children.iter().map(|&c| (target, c)).collect(),
            ))
        }
        FailedEntity::Rank(r) => {
            let parent = topology.parent(r).ok_or(PlacementError::UnknownRank(r))?;
            Ok(ReinitAssignment(vec![(parent, r)]))
        }
    }
}
