//! Deterministic simulated message-passing runtime with fail-stop faults.
//!
//! Each logical rank runs the same program on its own OS thread, but only the
//! rank holding the *baton* executes. The baton moves round-robin by rank at
//! every communication call, so a run is a pure function of
//! `(program, inputs, plan)`: traces and results are bitwise reproducible.
//!
//! Failures are injected at [`RankCtx::checkpoint`] calls named by a
//! [`FaultPlan`]. A killed rank loses its volatile state and its retention
//! window; a replacement with the same rank is spawned immediately and
//! restarts the program with [`RankCtx::failure`] set (REBUILD semantics).
//! Peers learn about the failure only when they communicate with that rank,
//! which surfaces once per (observer, failed rank) as
//! [`FabricError::FailedPeer`]; the caller decides what to do about it.
//!
//! Besides two-sided messages, every rank owns a *retention window* of type
//! `W`: data it chooses to keep for others. A replacement may read one live
//! peer's window with [`RankCtx::fetch`]; that read is the only way recovery
//! data moves and is logged as a `RECOVER` event.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Condvar, Mutex, MutexGuard};

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("peer rank {0} has failed")]
    FailedPeer(usize),
    #[error("this rank was killed by the fault plan")]
    Killed,
    #[error("deadlock: ranks {blocked:?} cannot make progress")]
    Deadlock { blocked: Vec<usize> },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Phase {
    #[default]
    Tsqr,
    Trailing,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Tsqr => "TSQR",
            Phase::Trailing => "TRAILING",
        })
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "TSQR" => Ok(Phase::Tsqr),
            "TRAILING" => Ok(Phase::Trailing),
            _ => Err(format!("unknown phase `{s}` (expected TSQR or TRAILING)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Point {
    BeforeExchange,
    AfterExchange,
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Point::BeforeExchange => "BEFORE_EXCHANGE",
            Point::AfterExchange => "AFTER_EXCHANGE",
        })
    }
}

impl FromStr for Point {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "BEFORE_EXCHANGE" => Ok(Point::BeforeExchange),
            "AFTER_EXCHANGE" => Ok(Point::AfterExchange),
            _ => Err(format!(
                "unknown point `{s}` (expected BEFORE_EXCHANGE or AFTER_EXCHANGE)"
            )),
        }
    }
}

/// Where a rank is in the algorithm; stamped on every trace event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Stage {
    pub panel: usize,
    pub phase: Phase,
    pub step: usize,
}

impl Stage {
    pub fn new(panel: usize, phase: Phase, step: usize) -> Self {
        Self { panel, phase, step }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KillEvent {
    pub rank: usize,
    pub panel: usize,
    pub phase: Phase,
    pub step: usize,
    pub point: Point,
}

impl KillEvent {
    pub fn stage(&self) -> Stage {
        Stage::new(self.panel, self.phase, self.step)
    }
}

/// `RANK@PHASE:PANEL:STEP:POINT`, e.g. `2@TSQR:0:0:BEFORE_EXCHANGE`.
impl FromStr for KillEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (rank, rest) = s
            .split_once('@')
            .ok_or_else(|| format!("fault `{s}`: expected RANK@PHASE:PANEL:STEP:POINT"))?;
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 4 {
            return Err(format!("fault `{s}`: expected RANK@PHASE:PANEL:STEP:POINT"));
        }
        let num = |what: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| format!("fault `{s}`: bad {what} `{v}`"))
        };
        Ok(KillEvent {
            rank: num("rank", rank)?,
            phase: parts[0].parse()?,
            panel: num("panel", parts[1])?,
            step: num("step", parts[2])?,
            point: parts[3].parse()?,
        })
    }
}

impl fmt::Display for KillEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{}:{}:{}:{}",
            self.rank, self.phase, self.panel, self.step, self.point
        )
    }
}

/// Declarative list of kill events, kept sorted by `(panel, phase, step)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    events: Vec<KillEvent>,
}

impl FaultPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(mut events: Vec<KillEvent>) -> Self {
        events.sort_by_key(|e| (e.panel, e.phase, e.step, e.point, e.rank));
        events.dedup();
        Self { events }
    }

    pub fn single(event: KillEvent) -> Self {
        Self::new(vec![event])
    }

    pub fn events(&self) -> &[KillEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Send,
    Recv,
    Exchange,
    Compute,
    Fail,
    Respawn,
    Recover,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::Send => "SEND",
            TraceKind::Recv => "RECV",
            TraceKind::Exchange => "EXCHANGE",
            TraceKind::Compute => "COMPUTE",
            TraceKind::Fail => "FAIL",
            TraceKind::Respawn => "RESPAWN",
            TraceKind::Recover => "RECOVER",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub clock: u64,
    pub kind: TraceKind,
    pub rank: usize,
    pub peer: Option<usize>,
    pub stage: Stage,
    pub bytes: u64,
    pub tag: String,
}

/// One line: `clock kind rank peer panel phase step bytes payload_tag`.
impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} ", self.clock, self.kind, self.rank)?;
        match self.peer {
            Some(p) => write!(f, "{p} ")?,
            None => f.write_str("- ")?,
        }
        let tag = if self.tag.is_empty() { "-" } else { &self.tag };
        write!(
            f,
            "{} {} {} {} {}",
            self.stage.panel, self.stage.phase, self.stage.step, self.bytes, tag
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn count(&self, kind: TraceKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Line-delimited export, one event per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

/// A message: one or more matrices travelling together.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Payload(pub Vec<Matrix>);

impl Payload {
    pub fn bytes(&self) -> u64 {
        self.0.iter().map(Matrix::byte_len).sum()
    }
}

impl From<Matrix> for Payload {
    fn from(m: Matrix) -> Self {
        Payload(vec![m])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ChanKey {
    src: usize,
    dst: usize,
    label: &'static str,
    stage: Stage,
}

struct State<W> {
    size: usize,
    current: usize,
    finished: Vec<bool>,
    alive: Vec<bool>,
    incarnation: Vec<u32>,
    /// `known[observer][rank]`: last incarnation of `rank` the observer has
    /// acknowledged.
    known: Vec<Vec<u32>>,
    mail: HashMap<ChanKey, VecDeque<Payload>>,
    offers: HashMap<ChanKey, Payload>,
    completed: HashMap<ChanKey, Payload>,
    windows: Vec<W>,
    plan: Vec<(KillEvent, bool)>,
    trace: Vec<TraceEvent>,
    stalls: usize,
    deadlock: Option<Vec<usize>>,
}

impl<W: Default> State<W> {
    fn new(size: usize, plan: &FaultPlan) -> Self {
        Self {
            size,
            current: 0,
            finished: vec![false; size],
            alive: vec![true; size],
            incarnation: vec![0; size],
            known: vec![vec![0; size]; size],
            mail: HashMap::new(),
            offers: HashMap::new(),
            completed: HashMap::new(),
            windows: (0..size).map(|_| W::default()).collect(),
            plan: plan.events().iter().map(|e| (*e, false)).collect(),
            trace: Vec::new(),
            stalls: 0,
            deadlock: None,
        }
    }

    fn emit(
        &mut self,
        kind: TraceKind,
        rank: usize,
        peer: Option<usize>,
        stage: Stage,
        bytes: u64,
        tag: &str,
    ) {
        let clock = self.trace.len() as u64;
        self.trace.push(TraceEvent {
            clock,
            kind,
            rank,
            peer,
            stage,
            bytes,
            tag: tag.to_string(),
        });
    }

    fn unfinished(&self) -> Vec<usize> {
        (0..self.size).filter(|&r| !self.finished[r]).collect()
    }

    fn pass_from(&mut self, rank: usize) {
        for d in 1..=self.size {
            let c = (rank + d) % self.size;
            if !self.finished[c] {
                self.current = c;
                return;
            }
        }
    }

    /// Returns `true` (and acknowledges) if `observer` has not yet seen the
    /// latest failure of `peer`.
    fn observe_failure(&mut self, observer: usize, peer: usize) -> bool {
        if self.incarnation[peer] > self.known[observer][peer] {
            self.known[observer][peer] = self.incarnation[peer];
            true
        } else {
            false
        }
    }

    fn kill(&mut self, rank: usize) -> Result<(), FabricError> {
        if !self.alive[rank] {
            return Err(FabricError::Protocol(format!(
                "rank {rank} is already dead"
            )));
        }
        self.alive[rank] = false;
        self.incarnation[rank] += 1;
        self.windows[rank] = W::default();
        self.mail.retain(|k, _| k.dst != rank);
        self.offers.retain(|k, _| k.dst != rank && k.src != rank);
        self.completed.retain(|k, _| k.src != rank);
        Ok(())
    }

    fn respawn(&mut self, rank: usize) -> Result<(), FabricError> {
        if self.alive[rank] {
            return Err(FabricError::Protocol(format!(
                "cannot respawn live rank {rank}"
            )));
        }
        self.alive[rank] = true;
        self.known[rank] = self.incarnation.clone();
        Ok(())
    }
}

enum Attempt<R> {
    Done(R),
    Failed(FabricError),
    Blocked,
}

struct Shared<W> {
    state: Mutex<State<W>>,
    turn: Condvar,
}

impl<W> Shared<W> {
    fn lock(&self) -> MutexGuard<'_, State<W>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait_turn<'a>(
        &'a self,
        rank: usize,
        guard: MutexGuard<'a, State<W>>,
    ) -> MutexGuard<'a, State<W>> {
        self.turn
            .wait_while(guard, |st| st.current != rank && st.deadlock.is_none())
            .unwrap_or_else(|e| e.into_inner())
    }
}

/// Per-rank handle passed to the program.
pub struct RankCtx<'a, I, W> {
    shared: &'a Shared<W>,
    rank: usize,
    size: usize,
    input: &'a I,
    incarnation: u32,
    failure: Option<KillEvent>,
    stage: Stage,
    killed: Option<KillEvent>,
}

impl<'a, I, W: Default> RankCtx<'a, I, W> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The rank's durable input; survives respawn unchanged.
    pub fn input(&self) -> &'a I {
        self.input
    }

    /// 0 for the original process, incremented on every respawn.
    pub fn incarnation(&self) -> u32 {
        self.incarnation
    }

    /// For a replacement process: the kill event that ended its predecessor.
    pub fn failure(&self) -> Option<KillEvent> {
        self.failure
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    fn ensure_live(&self) -> Result<(), FabricError> {
        if self.killed.is_some() {
            Err(FabricError::Killed)
        } else {
            Ok(())
        }
    }

    /// Fault-injection point. Returns `Err(Killed)` if the plan kills this
    /// rank here; the program must then unwind.
    pub fn checkpoint(&mut self, point: Point) -> Result<(), FabricError> {
        self.ensure_live()?;
        let mut st = self.shared.lock();
        let (rank, stage) = (self.rank, self.stage);
        let hit = st.plan.iter_mut().find(|(ev, fired)| {
            !*fired && ev.rank == rank && ev.stage() == stage && ev.point == point
        });
        let Some((ev, fired)) = hit else {
            return Ok(());
        };
        *fired = true;
        let ev = *ev;
        st.emit(TraceKind::Fail, rank, None, stage, 0, &point.to_string());
        st.kill(rank)?;
        st.respawn(rank)?;
        st.stalls = 0;
        st.emit(TraceKind::Respawn, rank, None, stage, 0, "-");
        self.killed = Some(ev);
        Err(FabricError::Killed)
    }

    /// Records a local computation in the trace.
    pub fn compute(&mut self, tag: &str, bytes: u64) {
        let mut st = self.shared.lock();
        st.emit(TraceKind::Compute, self.rank, None, self.stage, bytes, tag);
    }

    /// Mutates this rank's retention window.
    pub fn with_window<R>(&mut self, f: impl FnOnce(&mut W) -> R) -> R {
        let mut st = self.shared.lock();
        f(&mut st.windows[self.rank])
    }

    fn check_peer(&self, peer: usize) -> Result<(), FabricError> {
        if peer >= self.size || peer == self.rank {
            return Err(FabricError::Protocol(format!(
                "rank {} cannot address peer {peer}",
                self.rank
            )));
        }
        Ok(())
    }

    fn op<R>(
        &mut self,
        mut attempt: impl FnMut(&mut State<W>, usize, Stage) -> Attempt<R>,
    ) -> Result<R, FabricError> {
        self.ensure_live()?;
        let (rank, stage) = (self.rank, self.stage);
        let mut st = self.shared.lock();
        loop {
            if let Some(blocked) = &st.deadlock {
                return Err(FabricError::Deadlock {
                    blocked: blocked.clone(),
                });
            }
            let outcome = match attempt(&mut st, rank, stage) {
                Attempt::Done(r) => Ok(r),
                Attempt::Failed(e) => Err(e),
                Attempt::Blocked => {
                    st.stalls += 1;
                    if st.stalls >= st.unfinished().len() {
                        let blocked = st.unfinished();
                        st.deadlock = Some(blocked.clone());
                        self.shared.turn.notify_all();
                        return Err(FabricError::Deadlock { blocked });
                    }
                    st.pass_from(rank);
                    self.shared.turn.notify_all();
                    st = self.shared.wait_turn(rank, st);
                    continue;
                }
            };
            st.stalls = 0;
            st.pass_from(rank);
            self.shared.turn.notify_all();
            let _st = self.shared.wait_turn(rank, st);
            return outcome;
        }
    }

    /// Buffered send on the `(self, dst, label, stage)` channel.
    pub fn send(
        &mut self,
        dst: usize,
        label: &'static str,
        payload: impl Into<Payload>,
    ) -> Result<(), FabricError> {
        self.check_peer(dst)?;
        let mut payload = Some(payload.into());
        self.op(|st, rank, stage| {
            if st.observe_failure(rank, dst) {
                return Attempt::Failed(FabricError::FailedPeer(dst));
            }
            let p = payload.take().expect("send attempted twice");
            st.emit(TraceKind::Send, rank, Some(dst), stage, p.bytes(), label);
            st.mail
                .entry(ChanKey {
                    src: rank,
                    dst,
                    label,
                    stage,
                })
                .or_default()
                .push_back(p);
            Attempt::Done(())
        })
    }

    /// Blocking receive; FIFO per channel.
    pub fn recv(&mut self, src: usize, label: &'static str) -> Result<Payload, FabricError> {
        self.check_peer(src)?;
        self.op(|st, rank, stage| {
            let key = ChanKey {
                src,
                dst: rank,
                label,
                stage,
            };
            if let Some(p) = st.mail.get_mut(&key).and_then(VecDeque::pop_front) {
                st.emit(TraceKind::Recv, rank, Some(src), stage, p.bytes(), label);
                return Attempt::Done(p);
            }
            if st.observe_failure(rank, src) {
                return Attempt::Failed(FabricError::FailedPeer(src));
            }
            Attempt::Blocked
        })
    }

    /// Atomic pairwise exchange: both sides receive the other's payload, or
    /// the caller observes the peer's failure. One `EXCHANGE` event per pair.
    pub fn sendrecv(
        &mut self,
        peer: usize,
        label: &'static str,
        payload: impl Into<Payload>,
    ) -> Result<Payload, FabricError> {
        self.check_peer(peer)?;
        let mut mine = Some(payload.into());
        self.op(|st, rank, stage| {
            let key = ChanKey {
                src: rank,
                dst: peer,
                label,
                stage,
            };
            if let Some(theirs) = st.completed.remove(&key) {
                return Attempt::Done(theirs);
            }
            if st.observe_failure(rank, peer) {
                st.offers.remove(&key);
                return Attempt::Failed(FabricError::FailedPeer(peer));
            }
            let rkey = ChanKey {
                src: peer,
                dst: rank,
                label,
                stage,
            };
            if let Some(theirs) = st.offers.remove(&rkey) {
                let mine = mine
                    .take()
                    .or_else(|| st.offers.remove(&key))
                    .expect("exchange payload lost");
                let bytes = mine.bytes() + theirs.bytes();
                st.completed.insert(rkey, mine);
                st.emit(TraceKind::Exchange, rank, Some(peer), stage, bytes, label);
                return Attempt::Done(theirs);
            }
            if let Some(p) = mine.take() {
                st.offers.insert(key, p);
            }
            Attempt::Blocked
        })
    }

    /// Reads from a live peer's retention window. `read` returns `None` while
    /// the data is not there yet (the call blocks) and `Some((value, bytes))`
    /// once it is. Logged as one `RECOVER` event.
    pub fn fetch<R>(
        &mut self,
        peer: usize,
        label: &'static str,
        mut read: impl FnMut(&W) -> Option<(R, u64)>,
    ) -> Result<R, FabricError> {
        self.check_peer(peer)?;
        self.op(|st, rank, stage| {
            if st.observe_failure(rank, peer) {
                return Attempt::Failed(FabricError::FailedPeer(peer));
            }
            match read(&st.windows[peer]) {
                Some((value, bytes)) => {
                    st.emit(TraceKind::Recover, rank, Some(peer), stage, bytes, label);
                    Attempt::Done(value)
                }
                None => Attempt::Blocked,
            }
        })
    }
}

/// Everything a run produced.
#[derive(Debug)]
pub struct Outcome<T, W> {
    /// Result of the last incarnation of each rank.
    pub results: Vec<T>,
    /// Final retention windows.
    pub windows: Vec<W>,
    pub trace: Trace,
}

pub fn check_size(size: usize) -> Result<(), FabricError> {
    if size == 0 || !size.is_power_of_two() {
        return Err(FabricError::Protocol(format!(
            "rank count must be a power of two, got {size}"
        )));
    }
    Ok(())
}

/// Runs `program` on `inputs.len()` ranks to completion.
pub fn run<I, W, T, E, F>(
    inputs: &[I],
    plan: &FaultPlan,
    program: F,
) -> Result<Outcome<Result<T, E>, W>, FabricError>
where
    I: Sync,
    W: Default + Send,
    T: Send,
    E: Send,
    F: Fn(&mut RankCtx<'_, I, W>) -> Result<T, E> + Sync,
{
    let size = inputs.len();
    check_size(size)?;
    if let Some(ev) = plan.events().iter().find(|e| e.rank >= size) {
        return Err(FabricError::Protocol(format!(
            "fault {ev} names a rank outside 0..{size}"
        )));
    }
    let shared = Shared {
        state: Mutex::new(State::<W>::new(size, plan)),
        turn: Condvar::new(),
    };

    let results: Vec<Result<T, E>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..size)
            .map(|rank| {
                let shared = &shared;
                let program = &program;
                let input = &inputs[rank];
                scope.spawn(move || {
                    drop(shared.wait_turn(rank, shared.lock()));
                    let mut incarnation = 0;
                    let mut failure = None;
                    let result = loop {
                        let mut ctx = RankCtx {
                            shared,
                            rank,
                            size,
                            input,
                            incarnation,
                            failure,
                            stage: Stage::default(),
                            killed: None,
                        };
                        let result = program(&mut ctx);
                        match ctx.killed {
                            Some(ev) => {
                                incarnation += 1;
                                failure = Some(ev);
                            }
                            None => break result,
                        }
                    };
                    let mut st = shared.lock();
                    st.finished[rank] = true;
                    st.stalls = 0;
                    st.pass_from(rank);
                    shared.turn.notify_all();
                    result
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });

    let st = shared.state.into_inner().unwrap_or_else(|e| e.into_inner());
    if let Some(blocked) = st.deadlock {
        return Err(FabricError::Deadlock { blocked });
    }
    Ok(Outcome {
        results,
        windows: st.windows,
        trace: Trace { events: st.trace },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type Ctx<'a> = RankCtx<'a, Matrix, ()>;

    fn inputs(p: usize) -> Vec<Matrix> {
        (0..p)
            .map(|r| Matrix::from_rows(&[[r as f64, 0.5]]))
            .collect()
    }

    fn kinds(trace: &Trace) -> Vec<(TraceKind, usize, Option<usize>)> {
        trace
            .events
            .iter()
            .map(|e| (e.kind, e.rank, e.peer))
            .collect()
    }

    #[test]
    fn trivial_program_sends_nothing() {
        let out = run(&inputs(4), &FaultPlan::empty(), |ctx: &mut Ctx| {
            Ok::<_, FabricError>(ctx.rank())
        })
        .unwrap();
        assert_eq!(out.trace.count(TraceKind::Send), 0);
        assert_eq!(out.trace.count(TraceKind::Exchange), 0);
        let ranks: Vec<usize> = out.results.into_iter().map(Result::unwrap).collect();
        assert_eq!(ranks, vec![0, 1, 2, 3]);
    }

    fn ping_pong(ctx: &mut Ctx) -> Result<Matrix, FabricError> {
        let me = ctx.input().clone();
        if ctx.rank() == 0 {
            ctx.send(1, "ping", me)?;
            Ok(ctx.recv(1, "pong")?.0.remove(0))
        } else {
            let got = ctx.recv(0, "ping")?.0.remove(0);
            ctx.send(0, "pong", me)?;
            Ok(got)
        }
    }

    #[test]
    fn ping_pong_trace_order() {
        let out = run(&inputs(2), &FaultPlan::empty(), ping_pong).unwrap();
        assert_eq!(
            kinds(&out.trace),
            vec![
                (TraceKind::Send, 0, Some(1)),
                (TraceKind::Recv, 1, Some(0)),
                (TraceKind::Send, 1, Some(0)),
                (TraceKind::Recv, 0, Some(1)),
            ]
        );
        let clocks: Vec<u64> = out.trace.events.iter().map(|e| e.clock).collect();
        assert_eq!(clocks, vec![0, 1, 2, 3]);
        // Payload arrives bit-for-bit.
        assert!(out.results[0].as_ref().unwrap().bit_eq(&inputs(2)[1]));
        assert!(out.results[1].as_ref().unwrap().bit_eq(&inputs(2)[0]));
    }

    #[test]
    fn reruns_give_identical_traces() {
        let program = |ctx: &mut Ctx| -> Result<(), FabricError> {
            let peer = ctx.rank() ^ 1;
            for step in 0..3 {
                ctx.set_stage(Stage::new(0, Phase::Tsqr, step));
                ctx.sendrecv(peer, "x", ctx.input().clone())?;
                ctx.send((ctx.rank() + 1) % 4, "ring", ctx.input().clone())?;
                ctx.recv((ctx.rank() + 3) % 4, "ring")?;
            }
            Ok(())
        };
        let a = run(&inputs(4), &FaultPlan::empty(), program).unwrap();
        let b = run(&inputs(4), &FaultPlan::empty(), program).unwrap();
        assert_eq!(a.trace.to_text(), b.trace.to_text());
        assert_eq!(a.trace.count(TraceKind::Exchange), 6);
    }

    #[test]
    fn channels_are_fifo() {
        let out = run(&inputs(2), &FaultPlan::empty(), |ctx: &mut Ctx| {
            if ctx.rank() == 0 {
                for v in 0..3 {
                    ctx.send(1, "seq", Matrix::from_rows(&[[v as f64]]))?;
                }
                Ok(vec![])
            } else {
                (0..3)
                    .map(|_| ctx.recv(0, "seq").map(|p| p.0[0][(0, 0)]))
                    .collect::<Result<Vec<_>, FabricError>>()
            }
        })
        .unwrap();
        assert_eq!(out.results[1].as_ref().unwrap(), &vec![0.0, 1.0, 2.0]);
    }

    fn kill(rank: usize) -> KillEvent {
        KillEvent {
            rank,
            panel: 0,
            phase: Phase::Tsqr,
            step: 0,
            point: Point::BeforeExchange,
        }
    }

    #[test]
    fn recv_from_killed_rank_fails_peer() {
        let out = run(&inputs(2), &FaultPlan::single(kill(0)), |ctx: &mut Ctx| {
            if ctx.rank() == 0 {
                if ctx.incarnation() > 0 {
                    return Ok(None);
                }
                ctx.checkpoint(Point::BeforeExchange)?;
                ctx.send(1, "m", ctx.input().clone())?;
                Ok(None)
            } else {
                Ok::<_, FabricError>(Some(ctx.recv(0, "m")))
            }
        })
        .unwrap();
        assert_eq!(
            out.results[1].as_ref().unwrap(),
            &Some(Err(FabricError::FailedPeer(0)))
        );
        assert_eq!(out.trace.count(TraceKind::Fail), 1);
        assert_eq!(out.trace.count(TraceKind::Respawn), 1);
    }

    #[test]
    fn exchange_swaps_payloads_and_counts_bytes() {
        let out = run(&inputs(2), &FaultPlan::empty(), |ctx: &mut Ctx| {
            let mine = Matrix::from_rows(&[[10.0 + ctx.rank() as f64]]);
            ctx.sendrecv(ctx.rank() ^ 1, "x", mine)
        })
        .unwrap();
        assert_eq!(out.results[0].as_ref().unwrap().0[0][(0, 0)], 11.0);
        assert_eq!(out.results[1].as_ref().unwrap().0[0][(0, 0)], 10.0);
        let ex: Vec<_> = out.trace.of_kind(TraceKind::Exchange).collect();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].bytes, 16);
    }

    #[test]
    fn exchange_with_killed_peer_fails_survivor() {
        let out = run(&inputs(2), &FaultPlan::single(kill(0)), |ctx: &mut Ctx| {
            if ctx.rank() == 0 {
                if ctx.incarnation() > 0 {
                    return Ok(Payload::default());
                }
                ctx.checkpoint(Point::BeforeExchange)?;
            }
            ctx.sendrecv(ctx.rank() ^ 1, "x", ctx.input().clone())
        })
        .unwrap();
        assert_eq!(
            out.results[1].as_ref().unwrap_err(),
            &FabricError::FailedPeer(0)
        );
    }

    #[test]
    fn survivor_retries_with_replacement() {
        let out = run(&inputs(2), &FaultPlan::single(kill(1)), |ctx: &mut Ctx| {
            ctx.checkpoint(Point::BeforeExchange)?;
            loop {
                match ctx.sendrecv(ctx.rank() ^ 1, "x", ctx.input().clone()) {
                    Err(FabricError::FailedPeer(_)) => continue,
                    other => return other.map(|p| (ctx.incarnation(), p)),
                }
            }
        })
        .unwrap();
        let (inc1, got1) = out.results[1].as_ref().unwrap();
        assert_eq!(*inc1, 1);
        assert!(got1.0[0].bit_eq(&inputs(2)[0]));
        let (_, got0) = out.results[0].as_ref().unwrap();
        assert!(got0.0[0].bit_eq(&inputs(2)[1]));
        assert_eq!(out.trace.count(TraceKind::Exchange), 1);
    }

    #[test]
    fn respawned_rank_keeps_durable_input_and_loses_window() {
        #[derive(Default)]
        struct Win(Option<u32>);
        let plan = FaultPlan::single(KillEvent { rank: 2, ..kill(2) });
        let out = run(&inputs(4), &plan, |ctx: &mut RankCtx<'_, Matrix, Win>| {
            if ctx.incarnation() == 0 {
                ctx.with_window(|w| w.0 = Some(7));
                ctx.checkpoint(Point::BeforeExchange)?;
            }
            Ok::<_, FabricError>((ctx.incarnation(), ctx.input().clone()))
        })
        .unwrap();
        let (inc, block) = out.results[2].as_ref().unwrap();
        assert_eq!(*inc, 1);
        assert!(block.bit_eq(&inputs(4)[2]));
        assert!(out.windows[2].0.is_none());
        assert_eq!(out.windows[1].0, Some(7));
    }

    #[test]
    fn two_sequential_failures() {
        let plan = FaultPlan::new(vec![
            kill(1),
            KillEvent {
                rank: 3,
                step: 1,
                ..kill(3)
            },
        ]);
        let out = run(&inputs(4), &plan, |ctx: &mut Ctx| {
            for step in 0..2 {
                ctx.set_stage(Stage::new(0, Phase::Tsqr, step));
                ctx.checkpoint(Point::BeforeExchange)?;
            }
            Ok::<_, FabricError>(ctx.incarnation())
        })
        .unwrap();
        let incs: Vec<u32> = out.results.into_iter().map(Result::unwrap).collect();
        assert_eq!(incs, vec![0, 1, 0, 1]);
        assert_eq!(out.trace.count(TraceKind::Fail), 2);
        assert_eq!(out.trace.count(TraceKind::Respawn), 2);
    }

    #[test]
    fn respawn_requires_dead_rank() {
        let mut st = State::<()>::new(4, &FaultPlan::empty());
        assert!(matches!(st.respawn(2), Err(FabricError::Protocol(_))));
        st.kill(2).unwrap();
        assert!(!st.alive[2]);
        st.respawn(2).unwrap();
        assert!(st.alive[2]);
        assert_eq!(st.known[2][2], 1);
    }

    #[test]
    fn fetch_waits_for_data_and_logs_recover() {
        #[derive(Default)]
        struct Win(Option<Matrix>);
        let out = run(
            &inputs(2),
            &FaultPlan::empty(),
            |ctx: &mut RankCtx<'_, Matrix, Win>| {
                if ctx.rank() == 0 {
                    ctx.fetch(1, "state", |w: &Win| {
                        w.0.as_ref().map(|m| (m.clone(), m.byte_len()))
                    })
                } else {
                    ctx.send(0, "noise", Matrix::zeros(0, 0))?;
                    let m = ctx.input().clone();
                    ctx.with_window(|w| w.0 = Some(m.clone()));
                    Ok(m)
                }
            },
        )
        .unwrap();
        assert!(out.results[0].as_ref().unwrap().bit_eq(&inputs(2)[1]));
        let rec: Vec<_> = out.trace.of_kind(TraceKind::Recover).collect();
        assert_eq!(rec.len(), 1);
        assert_eq!((rec[0].rank, rec[0].peer, rec[0].bytes), (0, Some(1), 16));
    }

    #[test]
    fn deadlock_is_reported() {
        let err = run(&inputs(2), &FaultPlan::empty(), |ctx: &mut Ctx| {
            ctx.recv(ctx.rank() ^ 1, "never")
        })
        .unwrap_err();
        assert_eq!(
            err,
            FabricError::Deadlock {
                blocked: vec![0, 1]
            }
        );
    }

    #[test]
    fn non_power_of_two_rejected() {
        let err = run(&inputs(3), &FaultPlan::empty(), |_: &mut Ctx| {
            Ok::<_, FabricError>(())
        })
        .unwrap_err();
        assert!(matches!(err, FabricError::Protocol(_)));
    }

    #[test]
    fn trace_line_format() {
        let e = TraceEvent {
            clock: 5,
            kind: TraceKind::Exchange,
            rank: 1,
            peer: None,
            stage: Stage::new(2, Phase::Trailing, 1),
            bytes: 64,
            tag: "C'".into(),
        };
        assert_eq!(e.to_string(), "5 EXCHANGE 1 - 2 TRAILING 1 64 C'");
    }

    #[test]
    fn fault_text_round_trip() {
        let ev: KillEvent = "2@TSQR:0:1:BEFORE_EXCHANGE".parse().unwrap();
        assert_eq!(
            ev,
            KillEvent {
                rank: 2,
                panel: 0,
                phase: Phase::Tsqr,
                step: 1,
                point: Point::BeforeExchange
            }
        );
        assert_eq!(ev.to_string(), "2@TSQR:0:1:BEFORE_EXCHANGE");
        assert!("2@TSQR:0:1".parse::<KillEvent>().is_err());
        assert!("x@TSQR:0:1:AFTER_EXCHANGE".parse::<KillEvent>().is_err());
        assert!("1@LU:0:1:AFTER_EXCHANGE".parse::<KillEvent>().is_err());
    }

    #[test]
    fn plan_is_sorted() {
        let late = KillEvent {
            panel: 1,
            ..kill(0)
        };
        let plan = FaultPlan::new(vec![late, kill(3), late]);
        assert_eq!(plan.events(), &[kill(3), late]);
    }
}
