//! Seeded fault injection: one process or node failure per run.

use std::fmt;

use crate::topology::RankId;

/// SplitMix64 generator. Fully specified so every strategy (and any other
/// implementation) derives the same plan from the same seed.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InjectKind {
    None,
    /// The victim kills itself.
    Process,
    /// The victim kills its parent daemon's process group.
    Node,
}

impl InjectKind {
    pub fn name(self) -> &'static str {
        match self {
            InjectKind::None => "none",
            InjectKind::Process => "proc",
            InjectKind::Node => "node",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(InjectKind::None),
            "proc" | "process" => Some(InjectKind::Process),
            "node" => Some(InjectKind::Node),
            _ => None,
        }
    }
}

impl fmt::Display for InjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionPlan {
    pub kind: InjectKind,
    pub iteration: u64,
    pub victim: RankId,
    pub seed: u64,
}

impl InjectionPlan {
    pub fn none() -> Self {
        Self {
            kind: InjectKind::None,
            iteration: 0,
            victim: RankId(0),
            seed: 0,
        }
    }

    pub fn is_none(&self) -> bool {
        self.kind == InjectKind::None
    }

    pub fn should_fire(&self, rank: RankId, current_iter: u64) -> bool {
        self.kind != InjectKind::None && rank == self.victim && current_iter == self.iteration
    }
}

/// `iteration = X1 mod iterations`, `victim = X2 mod world_size` with X1, X2
/// the first two SplitMix64 outputs for `seed`.
pub fn make_plan(seed: u64, world_size: u32, iterations: u64, kind: InjectKind) -> InjectionPlan {
    assert!(iterations >= 1, "iterations must be at least 1");
    assert!(world_size >= 1, "world_size must be at least 1");
    if kind == InjectKind::None {
        return InjectionPlan {
            seed,
            ..InjectionPlan::none()
        };
    }
    let mut rng = SplitMix64::new(seed);
    let x1 = rng.next_u64();
    let x2 = rng.next_u64();
    InjectionPlan {
        kind,
        iteration: x1 % iterations,
        victim: RankId((x2 % world_size as u64) as u32),
        seed,
    }
}

/// Terminates the calling process (or its daemon's whole process group) when
/// the plan says so. Returns only if nothing fired.
pub fn trigger(plan: &InjectionPlan, rank: RankId, current_iter: u64) {
    if !plan.should_fire(rank, current_iter) {
        return;
    }
    log::warn!(
        "injecting {} failure at rank {} iteration {}",
        plan.kind,
        rank.0,
        current_iter
    );
    // SAFETY: plain signal syscalls on our own pid / our parent's group.
    unsafe {
        match plan.kind {
            InjectKind::Process => {
                libc::kill(libc::getpid(), libc::SIGKILL);
            }
            InjectKind::Node => {
                let pgid = libc::getpgid(libc::getppid());
                if pgid > 1 {
                    libc::kill(-pgid, libc::SIGKILL);
                }
                libc::kill(libc::getpid(), libc::SIGKILL);
            }
            InjectKind::None => {}
        }
    }
    unreachable!("SIGKILL returned");
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference sequence computed with an independent SplitMix64 script.
    #[test]
    fn splitmix_reference() {
        let mut g = SplitMix64::new(1);
        assert_eq!(g.next_u64(), 0x910a_2dec_8902_5cc1);
        assert_eq!(g.next_u64(), 0xbeeb_8da1_658e_ec67);
        let mut g = SplitMix64::new(0);
        assert_eq!(g.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(g.next_u64(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn plan_examples() {
        let p = make_plan(1, 16, 20, InjectKind::Process);
        assert_eq!((p.iteration, p.victim), (5, RankId(7)));
        let p = make_plan(42, 8, 30, InjectKind::Node);
        assert_eq!((p.iteration, p.victim), (13, RankId(3)));
        assert!(make_plan(1, 16, 20, InjectKind::None).is_none());
    }

    #[test]
    fn same_seed_same_plan_across_kinds() {
        let a = make_plan(9, 16, 20, InjectKind::Process);
        let b = make_plan(9, 16, 20, InjectKind::Node);
        assert_eq!((a.iteration, a.victim), (b.iteration, b.victim));
    }

    #[test]
    fn fire_only_for_victim_at_iteration() {
        let p = make_plan(1, 16, 20, InjectKind::Process);
        assert!(p.should_fire(RankId(7), 5));
        assert!(!p.should_fire(RankId(6), 5));
        assert!(!p.should_fire(RankId(7), 4));
        assert!(!InjectionPlan::none().should_fire(RankId(0), 0));
        // non-victim trigger is a no-op
        trigger(&p, RankId(0), 5);
    }
}
