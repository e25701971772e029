//! ULFM-style recovery primitives emulated over the runtime transport.
//!
//! Failure discovery reuses the daemon/root detection path: the root turns a
//! detected failure into PROC_FAILED notices, after which every world
//! operation fails with [`CommError::PeerLost`]. The survivors then run
//! revoke → shrink → agree → spawn/merge.

use std::collections::BTreeSet;

use super::{CommError, Guard, WorldComm};
use crate::topology::RankId;
use crate::wire::Message;

/// Communicator of the survivors produced by [`WorldComm::ulfm_shrink`].
/// Local ranks are indices into `members`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShrunkComm {
    members: Vec<RankId>,
    me: usize,
    commit: Option<u64>,
}

impl ShrunkComm {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn rank(&self) -> usize {
        self.me
    }

    pub fn members(&self) -> &[RankId] {
        &self.members
    }

    /// Agreement over the survivors: AND of `flag` and the union of every
    /// member's view of the failed set.
    pub fn agree(
        &self,
        comm: &mut WorldComm,
        flag: bool,
    ) -> Result<(bool, BTreeSet<RankId>), CommError> {
        let mut known: BTreeSet<RankId> = comm.failed.clone();
        known.extend(
            (0..comm.size)
                .map(RankId)
                .filter(|r| !self.members.contains(r)),
        );
        let reduce_tag = comm.next_ulfm_tag();
        let bcast_tag = comm.next_ulfm_tag();
        let mut combine = |acc: &mut Vec<u8>, part: &[u8]| {
            let (fa, mut sa) = decode_vote(acc)?;
            let (fb, sb) = decode_vote(part)?;
            sa.extend(sb);
            *acc = encode_vote(fa && fb, &sa);
            Ok(())
        };
        let reduced = comm.tree_reduce(
            &self.members,
            self.me,
            reduce_tag,
            Guard::Recovery,
            encode_vote(flag, &known),
            &mut combine,
        )?;
        let out = comm.tree_bcast(&self.members, self.me, bcast_tag, Guard::Recovery, reduced)?;
        decode_vote(&out)
    }
}

fn encode_vote(flag: bool, failed: &BTreeSet<RankId>) -> Vec<u8> {
    let mut out = vec![flag as u8];
    out.extend_from_slice(&(failed.len() as u32).to_le_bytes());
    for r in failed {
        out.extend_from_slice(&r.0.to_le_bytes());
    }
    out
}

fn decode_vote(b: &[u8]) -> Result<(bool, BTreeSet<RankId>), CommError> {
    let bad = || CommError::Protocol("malformed agreement vote".into());
    if b.len() < 5 {
        return Err(bad());
    }
    let n = u32::from_le_bytes(b[1..5].try_into().unwrap()) as usize;
    if b.len() != 5 + 4 * n {
        return Err(bad());
    }
    let set = b[5..]
        .chunks_exact(4)
        .map(|c| RankId(u32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((b[0] != 0, set))
}

impl WorldComm {
    /// Poisons the communicator here and, via the root, at every rank.
    pub fn ulfm_revoke(&mut self) -> Result<(), CommError> {
        self.revoked = true;
        self.post(Message::Revoke)
    }

    /// Communicator of the surviving ranks, in rank order.
    pub fn ulfm_shrink(&mut self) -> Result<ShrunkComm, CommError> {
        self.shrink_result = None;
        self.post(Message::ShrinkEnter { rank: self.rank })?;
        let (commit, members) = self.wait_until(Guard::Recovery, |c| c.shrink_result.take())?;
        let me = members
            .iter()
            .position(|&r| r == self.rank)
            .ok_or_else(|| CommError::Protocol("shrink result excludes this rank".into()))?;
        Ok(ShrunkComm {
            members,
            me,
            commit,
        })
    }

    /// Collectively asks for the `missing` ranks to be respawned and merges them with the
    /// survivors into a full-size world communicator at the next epoch.
    pub fn ulfm_spawn_merge(
        &mut self,
        shrunk: &ShrunkComm,
        missing: &BTreeSet<RankId>,
    ) -> Result<(), CommError> {
        if shrunk.size() + missing.len() != self.size as usize {
            return Err(CommError::Protocol(format!(
                "{} survivors + {} missing != world size {}",
                shrunk.size(),
                missing.len(),
                self.size
            )));
        }
        self.post(Message::SpawnReq {
            ranks: missing.iter().copied().collect(),
        })?;
        self.discard_state(self.epoch.next(), shrunk.commit);
        self.barrier()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_codec() {
        let set: BTreeSet<_> = [RankId(7), RankId(2)].into_iter().collect();
        let enc = encode_vote(true, &set);
        assert_eq!(decode_vote(&enc).unwrap(), (true, set));
        assert!(decode_vote(&enc[..6]).is_err());
    }
}
