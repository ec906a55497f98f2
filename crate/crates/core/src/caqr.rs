//! Right-looking factorisation: for each column panel, a tree factorisation
//! of the panel followed by the trailing update, over 1D row blocks.
//!
//! Every rank runs the same program. For panel `k` a rank's live rows are
//! its rows at or below global row `k·b`; ranks whose rows are all finished
//! are empty leaves. The rank holding global row `k·b` ends the panel with
//! `R11` and `R12`.
//!
//! In fault-tolerant mode each rank keeps every step record in its retention
//! window. A replacement process fetches the records of its step-0 buddy
//! (which shares all of its tree state), rebuilds its own step-0 record from
//! the buddy's ledger, then replays finished panels from its durable input
//! block and rejoins the tree where its predecessor died.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::comm::{tree_steps, Side};
use crate::error::{Error, Result};
use crate::fabric::{self, FabricError, FaultPlan, KillEvent, Phase, Point, RankCtx, Stage, Trace};
use crate::kernels::{householder_qr, CombineFactor, QRFactor};
use crate::matrix::Matrix;
use crate::qhistory::{PanelQ, QHistory};
use crate::trailing::{
    buddy_record, leaf_update, update_pair_baseline, update_pair_ft, Role, TrailingStepRecord,
    Variant,
};
use crate::tsqr::{allreduce_step, reduce_step, TsqrStepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Reduction tree; idle ranks drop out and nothing is retained.
    Baseline,
    /// All-reduce tree with exchanges and retained ledgers.
    #[default]
    Ft,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Ft => "ft",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Mode::Baseline),
            "ft" => Ok(Mode::Ft),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FactorConfig {
    pub mode: Mode,
    pub variant: Variant,
}

/// Contiguous row blocks, one per rank, and the column panel width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distribution {
    rows: usize,
    cols: usize,
    panel: usize,
    starts: Vec<usize>,
}

impl Distribution {
    /// Splits `rows` as evenly as possible; the first `rows % ranks` ranks
    /// get one extra row.
    pub fn even(rows: usize, cols: usize, panel: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 {
            return Err(Error::Config("need at least one rank".into()));
        }
        let counts: Vec<usize> = (0..ranks)
            .map(|r| rows / ranks + usize::from(r < rows % ranks))
            .collect();
        Self::from_counts(&counts, cols, panel)
    }

    pub fn from_counts(counts: &[usize], cols: usize, panel: usize) -> Result<Self> {
        let mut starts = vec![0];
        for c in counts {
            starts.push(starts.last().unwrap() + c);
        }
        let d = Self {
            rows: *starts.last().unwrap(),
            cols,
            panel,
            starts,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let p = self.ranks();
        if fabric::check_size(p).is_err() {
            return Err(Error::Config(format!(
                "rank count must be a power of two, got {p}"
            )));
        }
        if self.cols == 0 || self.panel == 0 || !self.cols.is_multiple_of(self.panel) {
            return Err(Error::Config(format!(
                "panel width {} must divide column count {}",
                self.panel, self.cols
            )));
        }
        if self.rows < self.cols {
            return Err(Error::Config(format!(
                "need rows >= cols, got {}x{}",
                self.rows, self.cols
            )));
        }
        if let Some(r) = (0..p).find(|&r| self.row_range(r).is_empty()) {
            return Err(Error::Config(format!("rank {r} owns no rows")));
        }
        for k in 0..self.panels() {
            for r in 0..p {
                let live = self.live_range(r, k).len();
                if live != 0 && live < self.panel {
                    return Err(Error::Config(format!(
                        "rank {r} has {live} live rows at panel {k}, fewer than the panel width {}",
                        self.panel
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ranks(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn panel(&self) -> usize {
        self.panel
    }

    pub fn panels(&self) -> usize {
        self.cols / self.panel
    }

    pub fn steps(&self) -> usize {
        tree_steps(self.ranks())
    }

    pub fn row_range(&self, rank: usize) -> Range<usize> {
        self.starts[rank]..self.starts[rank + 1]
    }

    /// Rows of `rank` not yet finished when panel `k` starts.
    pub fn live_range(&self, rank: usize, k: usize) -> Range<usize> {
        let r = self.row_range(rank);
        let lo = r.start.max(k * self.panel).min(r.end);
        lo..r.end
    }

    /// Whether panel `k` has columns to its right.
    pub fn has_trailing(&self, k: usize) -> bool {
        (k + 1) * self.panel < self.cols
    }

    /// First rank with live rows in the group of size `2^level` containing
    /// `rank`; this rank's rows carry the group's `C'`.
    pub fn group_owner(&self, rank: usize, level: usize, k: usize) -> Option<usize> {
        let lo = rank & !((1 << level) - 1);
        (lo..lo + (1 << level)).find(|&r| !self.live_range(r, k).is_empty())
    }

    /// Rank holding global row `k·b` (and hence the panel's `R` rows).
    pub fn diag_owner(&self, k: usize) -> usize {
        self.group_owner(0, self.steps(), k)
            .expect("validated distributions always have a live rank")
    }
}

/// Everything a rank retains about one panel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PanelRetained {
    pub tsqr: Vec<TsqrStepRecord>,
    pub trailing: Vec<TrailingStepRecord>,
    pub done: bool,
}

/// A rank's retention window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retained {
    pub panels: Vec<PanelRetained>,
}

/// How much of a buddy's window a replacement needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Need {
    pub panel: usize,
    pub tsqr: usize,
    pub trailing: usize,
}

impl Need {
    pub fn after_failure(ev: &KillEvent, steps: usize) -> Need {
        let past = ev.step + usize::from(ev.point == Point::AfterExchange);
        let (tsqr, trailing) = match ev.phase {
            Phase::Tsqr => (past, 0),
            Phase::Trailing => (steps, past),
        };
        Need {
            panel: ev.panel,
            tsqr,
            trailing,
        }
    }
}

impl Retained {
    pub fn bytes(&self) -> u64 {
        self.panels
            .iter()
            .flat_map(|p| {
                p.tsqr
                    .iter()
                    .map(TsqrStepRecord::bytes)
                    .chain(p.trailing.iter().map(TrailingStepRecord::bytes))
            })
            .sum()
    }

    /// The records covered by `need`, or `None` while they are not all there.
    pub fn extract(&self, need: &Need) -> Option<Retained> {
        let k = need.panel;
        if self.panels.len() < k || !self.panels[..k].iter().all(|p| p.done) {
            return None;
        }
        let mut panels = self.panels[..k].to_vec();
        let cur = self.panels.get(k).cloned().unwrap_or_default();
        if cur.tsqr.len() < need.tsqr || cur.trailing.len() < need.trailing {
            return None;
        }
        panels.push(PanelRetained {
            tsqr: cur.tsqr[..need.tsqr].to_vec(),
            trailing: cur.trailing[..need.trailing].to_vec(),
            done: false,
        });
        Some(Retained { panels })
    }

    /// Turns the buddy's records into this rank's: only the step-0 trailing
    /// record differs between the two.
    pub fn mirror(mut self, buddy_side: Side, variant: Variant) -> Result<Retained> {
        for p in &mut self.panels {
            if let Some(rec) = p.trailing.first() {
                let cf = p.tsqr.first().and_then(|t| t.combine.as_ref());
                p.trailing[0] = buddy_record(rec, buddy_side, cf, variant)?;
            }
        }
        Ok(self)
    }
}

/// A rank's contribution to one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelOutput {
    /// First global row of the rank's live block.
    pub row_start: usize,
    pub leaf: Option<QRFactor>,
    pub combines: Vec<Option<CombineFactor>>,
    /// `R11`, on the diagonal owner only.
    pub r11: Option<Matrix>,
    /// The rank's live rows of the updated trailing matrix.
    pub updated: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankOutput {
    pub panels: Vec<PanelOutput>,
}

/// Durable per-rank input.
#[derive(Debug, Clone)]
pub struct RankInput {
    pub block: Matrix,
    pub dist: Distribution,
    pub cfg: FactorConfig,
}

type Ctx<'a> = RankCtx<'a, RankInput, Retained>;

fn retained<T>(ctx: &mut Ctx, k: usize, f: impl FnOnce(&PanelRetained) -> Option<T>) -> Option<T> {
    ctx.with_window(|w| w.panels.get(k).and_then(f))
}

/// Runs one step: replays a retained record if there is one, otherwise runs
/// `op` between the two injection points and retains its record.
fn step<T: Clone>(
    ctx: &mut Ctx,
    stage: Stage,
    lookup: impl FnOnce(&PanelRetained) -> Option<T>,
    op: impl FnOnce(&mut Ctx) -> Result<T>,
    keep: impl FnOnce(&mut PanelRetained, T),
) -> Result<T> {
    ctx.set_stage(stage);
    if let Some(rec) = retained(ctx, stage.panel, lookup) {
        return Ok(rec);
    }
    ctx.checkpoint(Point::BeforeExchange)?;
    let rec = op(ctx)?;
    ctx.checkpoint(Point::AfterExchange)?;
    let kept = rec.clone();
    ctx.with_window(|w| keep(&mut w.panels[stage.panel], kept));
    Ok(rec)
}

fn baseline_trailing_step(
    ctx: &mut Ctx,
    s: usize,
    own: Option<&Matrix>,
    cf: Option<&CombineFactor>,
    other: Option<usize>,
) -> Result<TrailingStepRecord> {
    let (Some(c), Some(peer)) = (own, other) else {
        return Ok(TrailingStepRecord {
            cont: own.cloned(),
            ..Default::default()
        });
    };
    Ok(match Side::of(ctx.rank(), s) {
        Side::Top => TrailingStepRecord {
            cont: Some(update_pair_baseline(ctx, Role::Computer, c, cf, peer)?),
            ..Default::default()
        },
        Side::Bottom => TrailingStepRecord {
            group_final: Some(update_pair_baseline(ctx, Role::Sender, c, None, peer)?),
            ..Default::default()
        },
    })
}

fn run_panel(ctx: &mut Ctx, k: usize, work: Matrix) -> Result<(PanelOutput, Matrix)> {
    let input = ctx.input();
    let (dist, cfg) = (&input.dist, input.cfg);
    let (rank, b, steps) = (ctx.rank(), dist.panel(), dist.steps());
    let live = dist.live_range(rank, k);
    let kc = work.cols();
    if work.rows() != live.len() {
        return Err(Error::Protocol(format!(
            "rank {rank} panel {k}: working block has {} rows, expected {}",
            work.rows(),
            live.len()
        )));
    }
    ctx.with_window(|w| {
        if w.panels.len() <= k {
            w.panels.resize_with(k + 1, Default::default);
        }
    });

    ctx.set_stage(Stage::new(k, Phase::Tsqr, 0));
    let leaf = if live.is_empty() {
        None
    } else {
        let f = householder_qr(&work.block(0..live.len(), 0..b))?;
        ctx.compute("leaf_qr", f.r.byte_len());
        Some(f)
    };

    let mut rt = leaf.as_ref().map(|f| f.r.clone());
    let mut combines = Vec::with_capacity(steps);
    for s in 0..steps {
        let other = dist.group_owner(rank ^ (1 << s), s, k);
        let own = rt.clone();
        let rec = step(
            ctx,
            Stage::new(k, Phase::Tsqr, s),
            |p| p.tsqr.get(s).cloned(),
            |ctx| match cfg.mode {
                Mode::Ft => allreduce_step(ctx, s, own.as_ref()),
                Mode::Baseline => reduce_step(ctx, s, own.as_ref(), other),
            },
            |p, rec| p.tsqr.push(rec),
        )?;
        rt = rec.rtilde;
        combines.push(rec.combine);
    }

    let diag = dist.diag_owner(k);
    let r11 = if rank == diag {
        Some(rt.ok_or_else(|| Error::Protocol(format!("rank {rank} ends panel {k} without R")))?)
    } else {
        None
    };

    let mut updated = None;
    let mut next = Matrix::zeros(0, kc.saturating_sub(b));
    if dist.has_trailing(k) {
        ctx.set_stage(Stage::new(k, Phase::Trailing, 0));
        let tb = match &leaf {
            Some(f) => {
                let tb = leaf_update(f, &work.block(0..live.len(), b..kc))?;
                ctx.compute("leaf_update", tb.cfull.byte_len());
                Some(tb)
            }
            None => None,
        };
        let mut cont = tb.as_ref().map(|t| t.cprime.clone());
        let mut own_final = None;
        for (s, cf) in combines.iter().enumerate() {
            let mine = dist.group_owner(rank, s, k);
            let other = dist.group_owner(rank ^ (1 << s), s, k);
            let own = cont.clone();
            let rec = step(
                ctx,
                Stage::new(k, Phase::Trailing, s),
                |p| p.trailing.get(s).cloned(),
                |ctx| match cfg.mode {
                    Mode::Ft => update_pair_ft(ctx, s, own.as_ref(), cf.as_ref(), cfg.variant),
                    Mode::Baseline => {
                        baseline_trailing_step(ctx, s, own.as_ref(), cf.as_ref(), other)
                    }
                },
                |p, rec| p.trailing.push(rec),
            )?;
            if Side::of(rank, s) == Side::Bottom && mine == Some(rank) && other.is_some() {
                own_final = rec.group_final.clone();
            }
            cont = rec.cont;
        }
        if let Some(tb) = tb {
            let top = if rank == diag { cont } else { own_final };
            let top = top.ok_or_else(|| {
                Error::Protocol(format!("rank {rank} ends panel {k} without its C' rows"))
            })?;
            let full = Matrix::vstack(&top, &tb.cdoubleprime)?;
            next = if rank == diag {
                full.block(b..full.rows(), 0..full.cols())
            } else {
                full.clone()
            };
            updated = Some(full);
        }
    }
    ctx.with_window(|w| w.panels[k].done = true);
    Ok((
        PanelOutput {
            row_start: live.start,
            leaf,
            combines,
            r11,
            updated,
        },
        next,
    ))
}

fn recover(ctx: &mut Ctx, ev: &KillEvent) -> Result<()> {
    let input = ctx.input();
    let need = Need::after_failure(ev, input.dist.steps());
    let buddy = ctx.rank() ^ 1;
    ctx.set_stage(ev.stage());
    let fetched = loop {
        let got = ctx.fetch(buddy, "Retained", |w: &Retained| {
            w.extract(&need).map(|r| {
                let bytes = r.bytes();
                (r, bytes)
            })
        });
        match got {
            Err(FabricError::FailedPeer(_)) => continue,
            other => break other?,
        }
    };
    let mine = fetched.mirror(Side::of(buddy, 0), input.cfg.variant)?;
    ctx.with_window(|w| *w = mine);
    Ok(())
}

fn rank_program(ctx: &mut Ctx) -> Result<RankOutput> {
    let input = ctx.input();
    if let Some(ev) = ctx.failure() {
        if input.cfg.mode == Mode::Baseline {
            return Err(Error::Unrecoverable(format!(
                "rank {} failed at {ev} and the baseline algorithm keeps no redundant state",
                ctx.rank()
            )));
        }
        recover(ctx, &ev)?;
    }
    let mut work = input.block.clone();
    let mut out = RankOutput::default();
    for k in 0..input.dist.panels() {
        let (panel, next) = run_panel(ctx, k, work)?;
        out.panels.push(panel);
        work = next;
    }
    Ok(out)
}

/// Rejects plans the recovery protocol cannot serve.
pub fn validate_plan(plan: &FaultPlan, dist: &Distribution) -> Result<()> {
    let steps = dist.steps();
    for ev in plan.events() {
        if ev.rank >= dist.ranks() || ev.panel >= dist.panels() || ev.step >= steps {
            return Err(Error::Config(format!(
                "fault {ev} is outside the run ({} ranks, {} panels, {steps} tree steps)",
                dist.ranks(),
                dist.panels()
            )));
        }
        if ev.phase == Phase::Trailing && !dist.has_trailing(ev.panel) {
            return Err(Error::Config(format!(
                "fault {ev}: panel {} has no trailing columns",
                ev.panel
            )));
        }
    }
    for (i, a) in plan.events().iter().enumerate() {
        for b in &plan.events()[i + 1..] {
            if a.rank ^ 1 == b.rank && a.stage() == b.stage() {
                return Err(Error::Config(format!(
                    "faults {a} and {b} hit both members of a pair at the same step"
                )));
            }
        }
    }
    Ok(())
}

/// Raw result of running every rank.
#[derive(Debug)]
pub struct RankRun {
    pub outputs: Vec<RankOutput>,
    pub windows: Vec<Retained>,
    pub trace: Trace,
}

pub fn run_ranks(
    a: &Matrix,
    dist: &Distribution,
    cfg: &FactorConfig,
    plan: &FaultPlan,
) -> Result<RankRun> {
    if a.shape() != (dist.rows(), dist.cols()) {
        return Err(Error::Config(format!(
            "matrix is {}x{} but the distribution covers {}x{}",
            a.rows(),
            a.cols(),
            dist.rows(),
            dist.cols()
        )));
    }
    a.check_finite()?;
    validate_plan(plan, dist)?;
    let inputs: Vec<RankInput> = (0..dist.ranks())
        .map(|r| RankInput {
            block: a.block(dist.row_range(r), 0..dist.cols()),
            dist: dist.clone(),
            cfg: *cfg,
        })
        .collect();
    let outcome = match fabric::run(&inputs, plan, rank_program) {
        Err(FabricError::Deadlock { blocked }) if !plan.is_empty() => {
            let why = match cfg.mode {
                Mode::Baseline => "; the baseline algorithm keeps no redundant state",
                Mode::Ft => "",
            };
            return Err(Error::Unrecoverable(format!(
                "ranks {blocked:?} blocked after injected failures{why}"
            )));
        }
        other => other?,
    };
    let mut outputs = Vec::with_capacity(outcome.results.len());
    let mut first_err = None;
    for res in outcome.results {
        match res {
            Ok(o) => outputs.push(o),
            Err(e) => {
                let fatal = matches!(e, Error::Unrecoverable(_));
                if first_err.is_none() || fatal {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(RankRun {
        outputs,
        windows: outcome.windows,
        trace: outcome.trace,
    })
}

/// Output of [`factor`].
#[derive(Debug)]
pub struct Factorization {
    /// `n × n` upper triangular.
    pub r: Matrix,
    pub q: QHistory,
    /// Per panel, the updated trailing matrix: rows `k·b..m`, columns right
    /// of the panel.
    pub trailing: Vec<Matrix>,
    pub windows: Vec<Retained>,
    pub trace: Trace,
}

/// Factors `a` over the ranks of `dist`, injecting the failures in `plan`.
pub fn factor(
    a: &Matrix,
    dist: &Distribution,
    cfg: &FactorConfig,
    plan: &FaultPlan,
) -> Result<Factorization> {
    let run = run_ranks(a, dist, cfg, plan)?;
    let (n, b, p) = (dist.cols(), dist.panel(), dist.ranks());
    let mut r = Matrix::zeros(n, n);
    let mut trailing = Vec::with_capacity(dist.panels());
    let mut panels = Vec::with_capacity(dist.panels());
    for k in 0..dist.panels() {
        let c0 = k * b;
        let diag = &run.outputs[dist.diag_owner(k)].panels[k];
        let r11 = diag
            .r11
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("panel {k} has no R11")))?;
        r.set_block(c0, c0, r11);

        let mut t = Matrix::zeros(dist.rows() - c0, n - c0 - b);
        for out in &run.outputs {
            if let Some(u) = &out.panels[k].updated {
                t.set_block(out.panels[k].row_start - c0, 0, u);
            }
        }
        if let Some(u) = &diag.updated {
            r.set_block(c0, c0 + b, &u.block(0..b, 0..u.cols()));
        }
        trailing.push(t);

        let leaves = run
            .outputs
            .iter()
            .filter_map(|o| o.panels[k].leaf.clone().map(|f| (o.panels[k].row_start, f)))
            .collect();
        let mut steps = Vec::with_capacity(dist.steps());
        for s in 0..dist.steps() {
            let mut pairs = Vec::new();
            for g in (0..p).step_by(2 << s) {
                let top = dist.group_owner(g, s, k);
                let bottom = dist.group_owner(g + (1 << s), s, k);
                if let (Some(top), Some(bottom)) = (top, bottom) {
                    let cf = run.outputs[top].panels[k].combines[s]
                        .clone()
                        .ok_or_else(|| {
                            Error::Protocol(format!(
                                "panel {k} step {s}: rank {top} kept no combine factor"
                            ))
                        })?;
                    pairs.push((
                        run.outputs[top].panels[k].row_start,
                        run.outputs[bottom].panels[k].row_start,
                        cf,
                    ));
                }
            }
            steps.push(pairs);
        }
        panels.push(PanelQ { leaves, steps });
    }
    Ok(Factorization {
        r,
        q: QHistory::new(dist.rows(), panels),
        trailing,
        windows: run.windows,
        trace: run.trace,
    })
}

/// Explicit thin `Q` (`m × n`) from the factorisation's reflector history.
pub fn reconstruct_q(f: &Factorization) -> Result<Matrix> {
    let n = f.r.cols();
    let mut e = Matrix::zeros(f.q.rows(), n);
    for i in 0..n {
        e[(i, i)] = 1.0;
    }
    f.q.apply_q(&e)
}
