//! Small helpers shared by the tree algorithms.

use crate::error::{Error, Result};
use crate::fabric::{FabricError, Payload, RankCtx};
use crate::matrix::Matrix;

/// Which half of the pair a rank sits in at a tree step: the rank whose bit
/// `step` is clear holds the top block of the stacked factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Top,
    Bottom,
}

impl Side {
    pub fn of(rank: usize, step: usize) -> Side {
        if rank & (1 << step) == 0 {
            Side::Top
        } else {
            Side::Bottom
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Top => Side::Bottom,
            Side::Bottom => Side::Top,
        }
    }

    /// Orders `(mine, theirs)` as `(top, bottom)`.
    pub fn order<T>(self, mine: T, theirs: T) -> (T, T) {
        match self {
            Side::Top => (mine, theirs),
            Side::Bottom => (theirs, mine),
        }
    }
}

/// Number of tree steps for `size` ranks.
pub fn tree_steps(size: usize) -> usize {
    size.trailing_zeros() as usize
}

pub fn payload_of(parts: impl IntoIterator<Item = Option<Matrix>>) -> Payload {
    Payload(parts.into_iter().flatten().collect())
}

/// Exchange that retries once the peer's failure has been acknowledged; the
/// replacement rejoins at the same stage.
pub fn exchange_retrying<I, W: Default>(
    ctx: &mut RankCtx<'_, I, W>,
    peer: usize,
    label: &'static str,
    payload: &Payload,
) -> Result<Payload> {
    loop {
        match ctx.sendrecv(peer, label, payload.clone()) {
            Err(FabricError::FailedPeer(_)) => continue,
            other => return Ok(other?),
        }
    }
}

/// Without redundancy a dead peer cannot be worked around.
pub fn fatal_on_failure<T>(r: std::result::Result<T, FabricError>) -> Result<T> {
    match r {
        Err(FabricError::FailedPeer(p)) => Err(Error::Unrecoverable(format!(
            "peer {p} failed and the baseline algorithm keeps no redundant state"
        ))),
        other => Ok(other?),
    }
}
