//! Panel factorisation over a binary combine tree.
//!
//! Ranks pair up by `rank ^ 2^step`. In the all-reduce form both members of a
//! pair exchange their `R̃` and both compute the combined factor, so after
//! step `s` every rank of a `2^(s+1)` group holds the same bits. The reduce
//! form sends each bottom `R̃` up once and leaves the bottom rank idle.
//!
//! A rank with no live rows in the panel is an empty leaf (`None`). Combining
//! with an empty side forwards the other side unchanged.

use crate::comm::{exchange_retrying, fatal_on_failure, payload_of, tree_steps, Side};
use crate::error::{Error, Result};
use crate::fabric::{FaultPlan, RankCtx, Trace};
use crate::kernels::{combine_qr, CombineFactor, QRFactor};
use crate::matrix::Matrix;

/// Partner of `rank` at tree step `step`.
pub fn buddy(rank: usize, step: usize, size: usize) -> Result<usize> {
    if step >= tree_steps(size) || rank >= size {
        return Err(Error::Config(format!(
            "no buddy for rank {rank} at step {step} with {size} ranks"
        )));
    }
    Ok(rank ^ (1 << step))
}

/// What a rank keeps from one tree step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TsqrStepRecord {
    /// The rank's `R̃` after the step; `None` for an empty group, or for a
    /// rank that has left the reduction.
    pub rtilde: Option<Matrix>,
    /// Present when two non-empty sides were combined.
    pub combine: Option<CombineFactor>,
}

impl TsqrStepRecord {
    pub fn bytes(&self) -> u64 {
        let r = self.rtilde.as_ref().map_or(0, Matrix::byte_len);
        let c = self
            .combine
            .as_ref()
            .map_or(0, |c| c.y1.byte_len() + c.t.byte_len() + c.rout.byte_len());
        r + c
    }
}

/// Per-rank view of the panel factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TsqrState {
    pub leaf: Option<QRFactor>,
    pub rtilde: Option<Matrix>,
    pub combines: Vec<Option<CombineFactor>>,
    /// Number of completed steps.
    pub group_step: usize,
}

/// Combines the two sides of a pair, forwarding across empty sides.
pub fn combine_step(
    top: Option<&Matrix>,
    bottom: Option<&Matrix>,
) -> Result<(Option<Matrix>, Option<CombineFactor>)> {
    match (top, bottom) {
        (Some(a), Some(b)) => {
            let cf = combine_qr(a, b)?;
            Ok((Some(cf.rout.clone()), Some(cf)))
        }
        (one, other) => Ok((one.or(other).cloned(), None)),
    }
}

/// One all-reduce step: exchange `R̃` with the buddy, then both combine.
pub fn allreduce_step<I, W: Default>(
    ctx: &mut RankCtx<'_, I, W>,
    step: usize,
    own: Option<&Matrix>,
) -> Result<TsqrStepRecord> {
    let peer = buddy(ctx.rank(), step, ctx.size())?;
    let reply = exchange_retrying(ctx, peer, "Rtilde", &payload_of([own.cloned()]))?;
    let theirs = reply.0.into_iter().next();
    let (top, bottom) = Side::of(ctx.rank(), step).order(own, theirs.as_ref());
    let (rtilde, combine) = combine_step(top, bottom)?;
    if let Some(cf) = &combine {
        ctx.compute("combine_qr", cf.rout.byte_len());
    }
    Ok(TsqrStepRecord { rtilde, combine })
}

/// One reduce step. Only the current owner of a group holds `R̃`; the bottom
/// owner ships it to `other` (the top owner) and drops out.
pub fn reduce_step<I, W: Default>(
    ctx: &mut RankCtx<'_, I, W>,
    step: usize,
    own: Option<&Matrix>,
    other: Option<usize>,
) -> Result<TsqrStepRecord> {
    let (Some(mine), Some(peer)) = (own, other) else {
        return Ok(TsqrStepRecord {
            rtilde: own.cloned(),
            combine: None,
        });
    };
    match Side::of(ctx.rank(), step) {
        Side::Bottom => {
            fatal_on_failure(ctx.send(peer, "Rtilde", mine.clone()))?;
            Ok(TsqrStepRecord::default())
        }
        Side::Top => {
            let got = fatal_on_failure(ctx.recv(peer, "Rtilde"))?;
            let theirs = got
                .0
                .first()
                .ok_or_else(|| Error::Protocol("empty R̃ message".into()))?;
            let (rtilde, combine) = combine_step(Some(mine), Some(theirs))?;
            if let Some(cf) = &combine {
                ctx.compute("combine_qr", cf.rout.byte_len());
            }
            Ok(TsqrStepRecord { rtilde, combine })
        }
    }
}

/// Rebuilds a replacement's state from its recomputed leaf and the step
/// records fetched from one surviving group member. The replacement rejoins
/// the tree at step `records.len()`.
pub fn tsqr_recover(leaf: Option<QRFactor>, records: &[TsqrStepRecord]) -> TsqrState {
    let rtilde = match records.last() {
        Some(rec) => rec.rtilde.clone(),
        None => leaf.as_ref().map(|f| f.r.clone()),
    };
    TsqrState {
        leaf,
        rtilde,
        combines: records.iter().map(|r| r.combine.clone()).collect(),
        group_step: records.len(),
    }
}

/// Result of factoring a single tall panel spread over ranks.
#[derive(Debug)]
pub struct TsqrRun {
    pub states: Vec<TsqrState>,
    /// Every step record of every rank, as retained at the end of the run.
    pub records: Vec<Vec<TsqrStepRecord>>,
    pub trace: Trace,
}

impl TsqrRun {
    /// Final `R̃` per rank (`None` where a rank holds none).
    pub fn r(&self) -> Vec<Option<&Matrix>> {
        self.states.iter().map(|s| s.rtilde.as_ref()).collect()
    }
}

/// Factors the panel whose row blocks are `blocks` (one per rank, all with
/// the same column count). In all-reduce mode every rank ends with the same
/// `R`; in reduce mode only rank 0 does.
pub fn tsqr_allreduce(
    blocks: &[Matrix],
    mode: crate::caqr::Mode,
    plan: &FaultPlan,
) -> Result<TsqrRun> {
    use crate::caqr::{Distribution, FactorConfig};

    let n = blocks.first().map_or(0, Matrix::cols);
    let counts: Vec<usize> = blocks.iter().map(Matrix::rows).collect();
    let dist = Distribution::from_counts(&counts, n, n)?;
    let mut a = Matrix::zeros(0, n);
    for b in blocks {
        a = Matrix::vstack(&a, b)?;
    }
    let cfg = FactorConfig {
        mode,
        ..FactorConfig::default()
    };
    let run = crate::caqr::run_ranks(&a, &dist, &cfg, plan)?;
    let mut states = Vec::with_capacity(blocks.len());
    let mut records = Vec::with_capacity(blocks.len());
    for (out, win) in run.outputs.iter().zip(&run.windows) {
        let recs = win
            .panels
            .first()
            .map(|p| p.tsqr.clone())
            .unwrap_or_default();
        let leaf = out.panels.first().and_then(|p| p.leaf.clone());
        states.push(tsqr_recover(leaf, &recs));
        records.push(recs);
    }
    Ok(TsqrRun {
        states,
        records,
        trace: run.trace,
    })
}

/// Number of steps in the tree for `size` ranks.
pub fn steps(size: usize) -> usize {
    tree_steps(size)
}
