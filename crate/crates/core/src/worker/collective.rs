//! Tree collectives over point-to-point messages.
//!
//! Reductions combine along a fixed binomial tree rooted at virtual rank 0,
//! always as `lower ⊕ higher`, so results are bit-identical for a given
//! world size no matter how the run got there.

use super::{CommError, Guard, WorldComm};
use crate::topology::RankId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    fn apply(self, acc: &mut [f64], other: &[f64]) {
        for (a, b) in acc.iter_mut().zip(other) {
            *a = match self {
                ReduceOp::Sum => *a + *b,
                ReduceOp::Min => a.min(*b),
                ReduceOp::Max => a.max(*b),
            };
        }
    }
}

pub(crate) fn encode_f64s(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn decode_f64s(b: &[u8]) -> Result<Vec<f64>, CommError> {
    if !b.len().is_multiple_of(8) {
        return Err(CommError::Protocol(format!(
            "f64 payload of {} bytes",
            b.len()
        )));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl WorldComm {
    /// Binomial reduce of byte buffers onto `members[0]`. Returns the result
    /// at the root, `None` elsewhere.
    pub(super) fn tree_reduce(
        &mut self,
        members: &[RankId],
        me: usize,
        tag: u64,
        guard: Guard,
        mut acc: Vec<u8>,
        combine: &mut dyn FnMut(&mut Vec<u8>, &[u8]) -> Result<(), CommError>,
    ) -> Result<Option<Vec<u8>>, CommError> {
        let m = members.len();
        let mut mask = 1;
        while mask < m {
            if me & mask != 0 {
                self.send_tagged(members[me - mask], tag, &acc)?;
                return Ok(None);
            }
            if me + mask < m {
                let part = self.recv_tagged(members[me + mask], tag, guard)?;
                combine(&mut acc, &part)?;
            }
            mask <<= 1;
        }
        Ok(Some(acc))
    }

    /// Binomial broadcast from `members[0]`.
    pub(super) fn tree_bcast(
        &mut self,
        members: &[RankId],
        me: usize,
        tag: u64,
        guard: Guard,
        data: Option<Vec<u8>>,
    ) -> Result<Vec<u8>, CommError> {
        let m = members.len();
        let mut data = data;
        let mut mask = 1;
        while mask < m {
            if me & mask != 0 {
                data = Some(self.recv_tagged(members[me - mask], tag, guard)?);
                break;
            }
            mask <<= 1;
        }
        let data = data.ok_or_else(|| CommError::Protocol("bcast root without data".into()))?;
        mask >>= 1;
        while mask > 0 {
            if me + mask < m {
                self.send_tagged(members[me + mask], tag, &data)?;
            }
            mask >>= 1;
        }
        Ok(data)
    }

    /// World members listed so that `root` is virtual rank 0.
    fn rotated(&self, root: RankId) -> (Vec<RankId>, usize) {
        let n = self.size;
        let members = (0..n).map(|i| RankId((root.0 + i) % n)).collect();
        let me = ((self.rank.0 + n - root.0) % n) as usize;
        (members, me)
    }

    pub fn bcast(&mut self, root: RankId, bytes: &[u8]) -> Result<Vec<u8>, CommError> {
        self.check_peer(root)?;
        self.drain()?;
        self.check(Guard::World)?;
        let tag = self.next_coll_tag();
        let (members, me) = self.rotated(root);
        let data = (me == 0).then(|| bytes.to_vec());
        self.tree_bcast(&members, me, tag, Guard::World, data)
    }

    /// Element-wise reduction of `values` across all ranks; every rank gets
    /// the result.
    pub fn allreduce(&mut self, op: ReduceOp, values: &[f64]) -> Result<Vec<f64>, CommError> {
        self.drain()?;
        self.check(Guard::World)?;
        let n = values.len();
        let reduce_tag = self.next_coll_tag();
        let bcast_tag = self.next_coll_tag();
        let (members, me) = self.rotated(RankId(0));
        let mut combine = |acc: &mut Vec<u8>, part: &[u8]| {
            let mut a = decode_f64s(acc)?;
            let b = decode_f64s(part)?;
            if a.len() != n || b.len() != n {
                return Err(CommError::Protocol("allreduce length mismatch".into()));
            }
            op.apply(&mut a, &b);
            *acc = encode_f64s(&a);
            Ok(())
        };
        let reduced = self.tree_reduce(
            &members,
            me,
            reduce_tag,
            Guard::World,
            encode_f64s(values),
            &mut combine,
        )?;
        let out = self.tree_bcast(&members, me, bcast_tag, Guard::World, reduced)?;
        decode_f64s(&out)
    }

    /// Gathers every rank's buffer at `root`, in rank order.
    pub fn gather(
        &mut self,
        root: RankId,
        bytes: &[u8],
    ) -> Result<Option<Vec<Vec<u8>>>, CommError> {
        self.check_peer(root)?;
        self.drain()?;
        self.check(Guard::World)?;
        let tag = self.next_coll_tag();
        if self.rank != root {
            self.send_tagged(root, tag, bytes)?;
            return Ok(None);
        }
        let mut all = Vec::with_capacity(self.size as usize);
        for r in 0..self.size {
            if RankId(r) == self.rank {
                all.push(bytes.to_vec());
            } else {
                all.push(self.recv_tagged(RankId(r), tag, Guard::World)?);
            }
        }
        Ok(Some(all))
    }
}
