//! Exhaustive single-failure injection.

use std::fmt::Write as _;

use crate::caqr::{factor, Distribution, FactorConfig, Factorization, Mode};
use crate::error::{Error, Result};
use crate::fabric::{FaultPlan, KillEvent, Phase, Point, TraceKind};
use crate::matrix::Matrix;

/// Every `(rank, panel, phase, step, point)` at which one rank can be killed.
pub fn injection_points(dist: &Distribution) -> Vec<KillEvent> {
    let mut out = Vec::new();
    for panel in 0..dist.panels() {
        let phases: &[Phase] = if dist.has_trailing(panel) {
            &[Phase::Tsqr, Phase::Trailing]
        } else {
            &[Phase::Tsqr]
        };
        for &phase in phases {
            for step in 0..dist.steps() {
                for point in [Point::BeforeExchange, Point::AfterExchange] {
                    for rank in 0..dist.ranks() {
                        out.push(KillEvent {
                            rank,
                            panel,
                            phase,
                            step,
                            point,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCase {
    pub event: KillEvent,
    pub r_identical: bool,
    pub trailing_identical: bool,
    pub recover_events: usize,
    /// Every `RECOVER` event names exactly one peer.
    pub single_peer: bool,
    pub error: Option<String>,
}

impl SweepCase {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && self.r_identical
            && self.trailing_identical
            && self.recover_events == 1
            && self.single_peer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub ranks: usize,
    pub cases: Vec<SweepCase>,
}

fn same_blocks(a: &[Matrix], b: &[Matrix]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

fn judge(event: KillEvent, reference: &Factorization, got: Result<Factorization>) -> SweepCase {
    match got {
        Ok(f) => {
            let rec: Vec<_> = f.trace.of_kind(TraceKind::Recover).collect();
            SweepCase {
                event,
                r_identical: f.r.bit_eq(&reference.r),
                trailing_identical: same_blocks(&f.trailing, &reference.trailing),
                recover_events: rec.len(),
                single_peer: rec.iter().all(|e| e.peer.is_some()),
                error: None,
            }
        }
        Err(e) => SweepCase {
            event,
            r_identical: false,
            trailing_identical: false,
            recover_events: 0,
            single_peer: false,
            error: Some(e.to_string()),
        },
    }
}

/// Runs the fault-free reference and then one run per injection point.
pub fn sweep(a: &Matrix, dist: &Distribution, cfg: &FactorConfig) -> Result<Sweep> {
    if cfg.mode != Mode::Ft {
        return Err(Error::Config("sweeps need fault-tolerant mode".into()));
    }
    let reference = factor(a, dist, cfg, &FaultPlan::empty())?;
    let cases = injection_points(dist)
        .into_iter()
        .map(|ev| judge(ev, &reference, factor(a, dist, cfg, &FaultPlan::single(ev))))
        .collect();
    Ok(Sweep {
        ranks: dist.ranks(),
        cases,
    })
}

impl Sweep {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(SweepCase::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepCase> {
        self.cases.iter().filter(|c| !c.passed())
    }

    /// One row per injection stage and point, one column per rank.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<30}", "stage");
        for r in 0..self.ranks {
            let _ = write!(s, " r{r:<3}");
        }
        s.push('\n');
        for row in self.cases.chunks(self.ranks.max(1)) {
            let e = row[0].event;
            let label = format!("{}:{}:{}:{}", e.phase, e.panel, e.step, e.point);
            let _ = write!(s, "{label:<30}");
            for c in row {
                let _ = write!(s, " {:<4}", if c.passed() { "ok" } else { "FAIL" });
            }
            s.push('\n');
        }
        let passed = self.cases.iter().filter(|c| c.passed()).count();
        let _ = writeln!(s, "passed {passed}/{}", self.cases.len());
        s
    }
}
