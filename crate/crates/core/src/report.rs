//! Run summaries aggregated from the trace.

use std::fmt::Write as _;

use crate::caqr::Factorization;
use crate::fabric::{Phase, Trace, TraceKind};
use crate::verify::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recovery {
    pub rank: usize,
    pub panel: usize,
    pub phase: Phase,
    pub step: usize,
    pub peer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub metrics: Metrics,
    pub exchanges: usize,
    pub sends: usize,
    /// Bytes moved by sends, exchanges and recovery fetches.
    pub bytes_total: u64,
    /// For the first panel: how many ranks hold `R̃` bitwise equal to rank 0's
    /// after each tree step.
    pub redundancy_by_step: Vec<usize>,
    pub recoveries: Vec<Recovery>,
    /// Logical clock at the end of the run (number of trace events).
    pub elapsed: u64,
}

pub fn recoveries(trace: &Trace) -> Vec<Recovery> {
    trace
        .of_kind(TraceKind::Recover)
        .map(|e| Recovery {
            rank: e.rank,
            panel: e.stage.panel,
            phase: e.stage.phase,
            step: e.stage.step,
            peer: e.peer,
        })
        .collect()
}

/// Group sizes sharing rank 0's `R̃` after each step of the first panel.
pub fn redundancy_by_step(f: &Factorization) -> Vec<usize> {
    let Some(first) = f.windows.first().and_then(|w| w.panels.first()) else {
        return Vec::new();
    };
    (0..first.tsqr.len())
        .map(|s| match &first.tsqr[s].rtilde {
            None => 0,
            Some(r0) => f
                .windows
                .iter()
                .filter(|w| {
                    w.panels
                        .first()
                        .and_then(|p| p.tsqr.get(s))
                        .and_then(|rec| rec.rtilde.as_ref())
                        .is_some_and(|r| r.bit_eq(r0))
                })
                .count(),
        })
        .collect()
}

impl RunReport {
    pub fn new(f: &Factorization, metrics: Metrics) -> Self {
        let t = &f.trace;
        let bytes_total = t
            .events
            .iter()
            .filter(|e| {
                matches!(
                    e.kind,
                    TraceKind::Send | TraceKind::Exchange | TraceKind::Recover
                )
            })
            .map(|e| e.bytes)
            .sum();
        Self {
            metrics,
            exchanges: t.count(TraceKind::Exchange),
            sends: t.count(TraceKind::Send),
            bytes_total,
            redundancy_by_step: redundancy_by_step(f),
            recoveries: recoveries(t),
            elapsed: t.events.len() as u64,
        }
    }

    /// One `key value` pair per line, always in the same order. Each
    /// recovery adds a `recovery rank panel phase step peer` line.
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "backward_error {:e}", m.backward_error);
        let _ = writeln!(s, "orthogonality {:e}", m.orthogonality);
        let _ = writeln!(s, "triangularity {:e}", m.triangularity);
        let _ = writeln!(s, "max_diff {:e}", m.max_diff);
        let _ = writeln!(s, "exchanges {}", self.exchanges);
        let _ = writeln!(s, "sends {}", self.sends);
        let _ = writeln!(s, "bytes_total {}", self.bytes_total);
        let red: Vec<String> = self
            .redundancy_by_step
            .iter()
            .map(usize::to_string)
            .collect();
        let _ = writeln!(s, "redundancy_by_step {}", red.join(" "));
        let _ = writeln!(s, "recoveries {}", self.recoveries.len());
        for r in &self.recoveries {
            let peer = r.peer.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(
                s,
                "recovery {} {} {} {} {}",
                r.rank, r.panel, r.phase, r.step, peer
            );
        }
        let _ = writeln!(s, "elapsed {}", self.elapsed);
        s
    }
}
