//! Trailing-matrix update along the panel's combine tree.
//!
//! After the leaf update each rank's trailing rows split into `C'` (the top
//! `b` rows, which travel up the tree) and `C''` (final). At a tree step the
//! pair `[C0'; C1']` is hit by the transpose of the step's combine factor:
//! `W = Tᵀ(C0' + Y1ᵀC1')`, `Ĉ0' = C0' − W`, `Ĉ1' = C1' − Y1·W`. The top
//! value continues up the tree; the bottom value is final.
//!
//! The baseline form ships `C1'` to the top owner and gets `W` (with `Y1`)
//! back. The fault-tolerant form swaps `C'` in one exchange and both members
//! compute; each keeps a [`Ledger`] from which its buddy can be rebuilt.

use std::fmt;
use std::str::FromStr;

use crate::comm::{exchange_retrying, fatal_on_failure, payload_of, Side};
use crate::error::{Error, Result};
use crate::fabric::RankCtx;
use crate::kernels::{apply_qt, pair_w, update_bottom, update_top, CombineFactor, QRFactor};
use crate::matrix::Matrix;

/// What the exchange carries in fault-tolerant mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Top sends `C0'`; bottom sends `C1'` and `Y1`.
    Literal,
    /// Both send `C'` and their reflector block (`I` for the top).
    #[default]
    Symmetric,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Literal => "literal",
            Variant::Symmetric => "symmetric",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(Variant::Literal),
            "symmetric" => Ok(Variant::Symmetric),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Baseline roles: the bottom owner sends, the top owner computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Sender,
    Computer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrailingBlock {
    pub cfull: Matrix,
    pub cprime: Matrix,
    pub cdoubleprime: Matrix,
}

/// Applies the leaf `Qᵀ` to the rank's trailing rows and splits off `C'`.
pub fn leaf_update(leaf: &QRFactor, cfull: &Matrix) -> Result<TrailingBlock> {
    let updated = apply_qt(leaf, cfull)?;
    let (m, k, b) = (updated.rows(), updated.cols(), leaf.cols());
    Ok(TrailingBlock {
        cprime: updated.block(0..b, 0..k),
        cdoubleprime: updated.block(b..m, 0..k),
        cfull: updated,
    })
}

/// Data one member of a pair keeps about a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub w: Matrix,
    pub t: Matrix,
    pub own_cprime: Matrix,
    pub peer_cprime: Matrix,
    pub peer_y: Option<Matrix>,
    /// The member's own updated `Ĉ'`.
    pub chat: Matrix,
}

impl Ledger {
    fn bytes(&self) -> u64 {
        [
            &self.w,
            &self.t,
            &self.own_cprime,
            &self.peer_cprime,
            &self.chat,
        ]
        .iter()
        .map(|m| m.byte_len())
        .sum::<u64>()
            + self.peer_y.as_ref().map_or(0, Matrix::byte_len)
    }
}

/// What a rank keeps from one trailing step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrailingStepRecord {
    pub ledger: Option<Ledger>,
    /// `C'` of the merged group after the step, if the rank holds it.
    pub cont: Option<Matrix>,
    /// `Ĉ1'` when the rank sits in the bottom half of a real pair.
    pub group_final: Option<Matrix>,
}

impl TrailingStepRecord {
    pub fn bytes(&self) -> u64 {
        self.ledger.as_ref().map_or(0, Ledger::bytes)
            + self.cont.as_ref().map_or(0, Matrix::byte_len)
            + self.group_final.as_ref().map_or(0, Matrix::byte_len)
    }
}

fn expect_part(parts: &[Matrix], i: usize, what: &str) -> Result<Matrix> {
    parts
        .get(i)
        .cloned()
        .ok_or_else(|| Error::Protocol(format!("message lacks {what}")))
}

/// Baseline pair update. Returns `Ĉ0'` for the computer and `Ĉ1'` for the
/// sender. A peer failure is fatal.
pub fn update_pair_baseline<I, W: Default>(
    ctx: &mut RankCtx<'_, I, W>,
    role: Role,
    own: &Matrix,
    cf: Option<&CombineFactor>,
    peer: usize,
) -> Result<Matrix> {
    match role {
        Role::Sender => {
            fatal_on_failure(ctx.send(peer, "Cprime", own.clone()))?;
            let reply = fatal_on_failure(ctx.recv(peer, "W"))?;
            let w = expect_part(&reply.0, 0, "W")?;
            let y1 = expect_part(&reply.0, 1, "Y1")?;
            let chat = update_bottom(own, &y1, &w)?;
            ctx.compute("update_bottom", chat.byte_len());
            Ok(chat)
        }
        Role::Computer => {
            let cf =
                cf.ok_or_else(|| Error::Protocol("computer without a combine factor".into()))?;
            let got = fatal_on_failure(ctx.recv(peer, "Cprime"))?;
            let c1 = expect_part(&got.0, 0, "C1'")?;
            let w = pair_w(own, &c1, cf)?;
            ctx.compute("pair_w", w.byte_len());
            fatal_on_failure(ctx.send(
                peer,
                "W",
                crate::fabric::Payload(vec![w.clone(), cf.y1.clone()]),
            ))?;
            Ok(update_top(own, &w)?)
        }
    }
}

/// Fault-tolerant step: one exchange with the buddy at `step`, then both
/// members compute. `own` is the rank's copy of its group's `C'` (`None` for
/// an empty group); `cf` is the step's combine factor (`None` when a side is
/// empty, in which case the non-empty value is forwarded).
pub fn update_pair_ft<I, W: Default>(
    ctx: &mut RankCtx<'_, I, W>,
    step: usize,
    own: Option<&Matrix>,
    cf: Option<&CombineFactor>,
    variant: Variant,
) -> Result<TrailingStepRecord> {
    let side = Side::of(ctx.rank(), step);
    let peer = ctx.rank() ^ (1 << step);
    let own_y = match (own, cf, side, variant) {
        (Some(_), Some(cf), Side::Bottom, _) => Some(cf.y1.clone()),
        (Some(_), Some(cf), Side::Top, Variant::Symmetric) => Some(Matrix::identity(cf.n())),
        _ => None,
    };
    let reply = exchange_retrying(ctx, peer, "Cprime", &payload_of([own.cloned(), own_y]))?;
    let mut parts = reply.0.into_iter();
    let theirs = parts.next();
    let peer_y = parts.next();

    let Some(cf) = cf else {
        return Ok(TrailingStepRecord {
            ledger: None,
            cont: own.cloned().or(theirs),
            group_final: None,
        });
    };
    let (Some(own), Some(theirs)) = (own, theirs) else {
        return Err(Error::Protocol(format!(
            "step {step}: combine factor present but a side has no C'"
        )));
    };
    let (c0, c1) = side.order(own, &theirs);
    let w = pair_w(c0, c1, cf)?;
    let chat0 = update_top(c0, &w)?;
    let (chat, group_final) = match side {
        Side::Top => (chat0.clone(), None),
        Side::Bottom => {
            let chat1 = update_bottom(c1, &cf.y1, &w)?;
            (chat1.clone(), Some(chat1))
        }
    };
    ctx.compute("pair_update", chat.byte_len());
    Ok(TrailingStepRecord {
        ledger: Some(Ledger {
            w,
            t: cf.t.clone(),
            own_cprime: own.clone(),
            peer_cprime: theirs,
            peer_y,
            chat,
        }),
        cont: Some(chat0),
        group_final,
    })
}

/// Everything needed to rebuild the failed member's `Ĉ'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub w: Matrix,
    pub t: Matrix,
    pub c_f: Matrix,
    pub y_f: Option<Matrix>,
    pub failed: Side,
}

impl Packet {
    pub fn bytes(&self) -> u64 {
        self.w.byte_len()
            + self.t.byte_len()
            + self.c_f.byte_len()
            + self.y_f.as_ref().map_or(0, Matrix::byte_len)
    }
}

/// Extracts the packet for the buddy of the ledger's owner, who sat on
/// `owner_side` of the pair.
pub fn recovery_packet(ledger: &Ledger, owner_side: Side) -> Result<Packet> {
    let failed = owner_side.other();
    if failed == Side::Bottom && ledger.peer_y.is_none() {
        return Err(Error::Protocol(
            "ledger holds no reflector block for the bottom member".into(),
        ));
    }
    Ok(Packet {
        w: ledger.w.clone(),
        t: ledger.t.clone(),
        c_f: ledger.peer_cprime.clone(),
        y_f: ledger.peer_y.clone(),
        failed,
    })
}

/// `Ĉ_f' = C_f' − Y_f·W`, or `C_f' − W` for the top member (whose block is `I`).
pub fn trailing_recover(packet: &Packet) -> Result<Matrix> {
    match (packet.failed, &packet.y_f) {
        (Side::Top, _) => Ok(update_top(&packet.c_f, &packet.w)?),
        (Side::Bottom, Some(y)) => Ok(update_bottom(&packet.c_f, y, &packet.w)?),
        (Side::Bottom, None) => Err(Error::Protocol(
            "packet lacks Y for the bottom member".into(),
        )),
    }
}

/// The record the buddy of `owner` would have kept for the same step.
pub fn buddy_record(
    owner: &TrailingStepRecord,
    owner_side: Side,
    cf: Option<&CombineFactor>,
    variant: Variant,
) -> Result<TrailingStepRecord> {
    let Some(ledger) = &owner.ledger else {
        return Ok(owner.clone());
    };
    let cf = cf.ok_or_else(|| Error::Protocol("ledger without a combine factor".into()))?;
    let packet = recovery_packet(ledger, owner_side)?;
    let chat = trailing_recover(&packet)?;
    let peer_y = match (owner_side, variant) {
        (Side::Bottom, _) => Some(cf.y1.clone()),
        (Side::Top, Variant::Symmetric) => Some(Matrix::identity(cf.n())),
        (Side::Top, Variant::Literal) => None,
    };
    let group_final = (packet.failed == Side::Bottom).then(|| chat.clone());
    Ok(TrailingStepRecord {
        ledger: Some(Ledger {
            w: ledger.w.clone(),
            t: ledger.t.clone(),
            own_cprime: ledger.peer_cprime.clone(),
            peer_cprime: ledger.own_cprime.clone(),
            peer_y,
            chat,
        }),
        cont: owner.cont.clone(),
        group_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{run, FaultPlan, TraceKind};
    use crate::gen::{random_matrix, random_upper_triangular};
    use crate::kernels::{combine_qr, householder_qr};

    type Ctx<'a> = RankCtx<'a, Matrix, ()>;

    fn factor(seed: u64) -> CombineFactor {
        combine_qr(
            &random_upper_triangular(3, seed),
            &random_upper_triangular(3, seed + 1),
        )
        .unwrap()
    }

    /// `[Ĉ0; Ĉ1]` via the explicit stacked reflector `I − [I; Y1] T [I; Y1]ᵀ`.
    fn stacked_oracle(c0: &Matrix, c1: &Matrix, cf: &CombineFactor) -> Matrix {
        let n = cf.n();
        let y = Matrix::vstack(&Matrix::identity(n), &cf.y1).unwrap();
        let q = Matrix::identity(2 * n)
            .sub(&y.matmul(&cf.t).unwrap().matmul(&y.transpose()).unwrap())
            .unwrap();
        q.t_matmul(&Matrix::vstack(c0, c1).unwrap()).unwrap()
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs() <= tol
    }

    fn pair_inputs() -> Vec<Matrix> {
        vec![random_matrix(3, 4, 21), random_matrix(3, 4, 22)]
    }

    fn baseline_pair(cf: CombineFactor) -> Vec<Matrix> {
        let out = run(&pair_inputs(), &FaultPlan::empty(), |ctx: &mut Ctx| {
            let own = ctx.input().clone();
            if ctx.rank() == 0 {
                update_pair_baseline(ctx, Role::Computer, &own, Some(&cf), 1)
            } else {
                update_pair_baseline(ctx, Role::Sender, &own, None, 0)
            }
        })
        .unwrap();
        assert_eq!(out.trace.count(TraceKind::Send), 2);
        assert_eq!(out.trace.count(TraceKind::Exchange), 0);
        out.results.into_iter().map(Result::unwrap).collect()
    }

    fn ft_pair(cf: CombineFactor, variant: Variant) -> Vec<TrailingStepRecord> {
        let out = run(&pair_inputs(), &FaultPlan::empty(), |ctx: &mut Ctx| {
            let own = ctx.input().clone();
            update_pair_ft(ctx, 0, Some(&own), Some(&cf), variant)
        })
        .unwrap();
        assert_eq!(out.trace.count(TraceKind::Exchange), 1);
        assert_eq!(out.trace.count(TraceKind::Send), 0);
        out.results.into_iter().map(Result::unwrap).collect()
    }

    #[test]
    fn leaf_update_with_identity_leaf_only_splits() {
        let leaf = householder_qr(&Matrix::identity(3)).unwrap();
        let c = random_matrix(3, 2, 4);
        let tb = leaf_update(&leaf, &c).unwrap();
        assert!(tb.cprime.bit_eq(&c));
        assert_eq!(tb.cdoubleprime.shape(), (0, 2));
    }

    #[test]
    fn leaf_update_split_matches_reflected_rows() {
        let a = random_matrix(5, 2, 6);
        let leaf = householder_qr(&a).unwrap();
        let c = random_matrix(5, 3, 7);
        let tb = leaf_update(&leaf, &c).unwrap();
        assert_eq!(tb.cprime.rows(), 2);
        assert_eq!(tb.cdoubleprime.rows(), 3);
        assert!(Matrix::vstack(&tb.cprime, &tb.cdoubleprime)
            .unwrap()
            .bit_eq(&tb.cfull));
    }

    #[test]
    fn baseline_pair_matches_stacked_oracle() {
        let cf = factor(30);
        let got = baseline_pair(cf.clone());
        let ins = pair_inputs();
        let want = stacked_oracle(&ins[0], &ins[1], &cf);
        assert!(close(
            &Matrix::vstack(&got[0], &got[1]).unwrap(),
            &want,
            1e-13
        ));
    }

    #[test]
    fn zero_inputs_give_zero_w() {
        let cf = factor(31);
        let zeros = vec![Matrix::zeros(3, 2), Matrix::zeros(3, 2)];
        let out = run(&zeros, &FaultPlan::empty(), |ctx: &mut Ctx| {
            let own = ctx.input().clone();
            update_pair_ft(ctx, 0, Some(&own), Some(&cf), Variant::Symmetric)
        })
        .unwrap();
        for rec in out.results {
            let rec = rec.unwrap();
            let l = rec.ledger.unwrap();
            assert_eq!(l.w.max_abs(), 0.0);
            assert_eq!(l.chat.max_abs(), 0.0);
        }
    }

    #[test]
    fn ft_pair_equals_baseline_bitwise() {
        let cf = factor(32);
        let base = baseline_pair(cf.clone());
        for variant in [Variant::Literal, Variant::Symmetric] {
            let ft = ft_pair(cf.clone(), variant);
            assert!(ft[0].ledger.as_ref().unwrap().chat.bit_eq(&base[0]));
            assert!(ft[1].ledger.as_ref().unwrap().chat.bit_eq(&base[1]));
            assert!(ft[1].group_final.as_ref().unwrap().bit_eq(&base[1]));
            assert!(ft[0]
                .cont
                .as_ref()
                .unwrap()
                .bit_eq(ft[1].cont.as_ref().unwrap()));
        }
    }

    #[test]
    fn ledgers_rebuild_the_buddy() {
        let cf = factor(33);
        for variant in [Variant::Literal, Variant::Symmetric] {
            let ft = ft_pair(cf.clone(), variant);
            let top_from_bottom = buddy_record(&ft[1], Side::Bottom, Some(&cf), variant).unwrap();
            assert_eq!(top_from_bottom, ft[0], "{variant}");
            let bottom_from_top = buddy_record(&ft[0], Side::Top, Some(&cf), variant).unwrap();
            assert_eq!(bottom_from_top, ft[1], "{variant}");
            assert!(bottom_from_top
                .group_final
                .unwrap()
                .bit_eq(&ft[1].ledger.as_ref().unwrap().chat));
        }
    }

    #[test]
    fn packet_contents_by_variant() {
        let cf = factor(34);
        let sym = ft_pair(cf.clone(), Variant::Symmetric);
        let p = recovery_packet(sym[1].ledger.as_ref().unwrap(), Side::Bottom).unwrap();
        assert!(p.y_f.is_some());
        let lit = ft_pair(cf.clone(), Variant::Literal);
        let p = recovery_packet(lit[1].ledger.as_ref().unwrap(), Side::Bottom).unwrap();
        assert_eq!(p.failed, Side::Top);
        assert!(p.y_f.is_none());
        let l = lit[1].ledger.as_ref().unwrap();
        assert_eq!(
            p.bytes(),
            l.w.byte_len() + l.t.byte_len() + l.peer_cprime.byte_len()
        );
    }

    #[test]
    fn zero_w_packet_returns_c() {
        let c = random_matrix(2, 3, 8);
        for (failed, y_f) in [
            (Side::Top, None),
            (Side::Bottom, Some(random_matrix(2, 2, 9))),
        ] {
            let p = Packet {
                w: Matrix::zeros(2, 3),
                t: Matrix::zeros(2, 2),
                c_f: c.clone(),
                y_f,
                failed,
            };
            assert!(close(&trailing_recover(&p).unwrap(), &c, 0.0));
        }
    }

    #[test]
    fn pass_through_forwards_the_live_side() {
        let inputs = vec![Matrix::zeros(0, 0), random_matrix(3, 2, 10)];
        let out = run(&inputs, &FaultPlan::empty(), |ctx: &mut Ctx| {
            let own = (ctx.rank() == 1).then(|| ctx.input().clone());
            update_pair_ft(ctx, 0, own.as_ref(), None, Variant::Symmetric)
        })
        .unwrap();
        for rec in out.results {
            let rec = rec.unwrap();
            assert!(rec.cont.unwrap().bit_eq(&inputs[1]));
            assert!(rec.ledger.is_none() && rec.group_final.is_none());
        }
    }

    #[test]
    fn variant_round_trips() {
        for v in [Variant::Literal, Variant::Symmetric] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("diagonal".parse::<Variant>().is_err());
    }
}
