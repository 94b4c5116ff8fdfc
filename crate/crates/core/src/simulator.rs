//! Deterministic virtual-clock execution of the engines.
//!
//! Each forward pass occupies its actor for a cost given by the
//! [`LatencyModel`]. The serial engines run on a single timeline. The
//! asynchronous engine gets two actors whose busy intervals may overlap.
//! Events are processed in timestamp order; ties go to the verify actor,
//! then to the earlier-scheduled event.
//!
//! Timing rules of the asynchronous engine:
//!
//! * A verify pass snapshots its window when it starts and publishes when
//!   it ends.
//! * A draft forward publishes its token when it ends. If a rollback is
//!   pending at that point the token is discarded and the acknowledgment
//!   lands `rollback_overhead_ms` later.
//! * An idle actor is woken at the time of the event that may unblock it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::coordination::{DraftPlan, DraftPort, SharedDecodeState, VerifyPort};
use crate::engines::{
    begin_verify, draft_loop_step, finish_verify, serial_events, Autoregressive, DecodeConfig,
    DecodeError, DraftStep, Executor, Run, SerialDecoder, SyncSpeculative, VerifyStep,
};
use crate::metrics::{Actor, ClockKind, DecodeTrace, EventKind, TraceEvent};
use crate::model::{LanguageModel, ModelState, TokenId};
use crate::scalar::Millis;

/// Forward-pass costs in milliseconds. A forward over `batch` positions
/// costs `base + per_token * batch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel<T = f64> {
    pub draft_base_ms: T,
    pub draft_per_token_ms: T,
    pub verify_base_ms: T,
    pub verify_per_token_ms: T,
    pub rollback_overhead_ms: T,
}

impl<T: Millis> Default for LatencyModel<T> {
    /// 10 ms per draft token, 25 ms per verify forward regardless of batch,
    /// free rollbacks.
    fn default() -> Self {
        let ms = |v: u32| T::from_u32(v).expect("small integer fits time scalar");
        Self {
            draft_base_ms: ms(0),
            draft_per_token_ms: ms(10),
            verify_base_ms: ms(25),
            verify_per_token_ms: ms(0),
            rollback_overhead_ms: ms(0),
        }
    }
}

impl<T: Millis> LatencyModel<T> {
    pub fn draft_cost(&self, batch: usize) -> T {
        self.draft_base_ms + self.draft_per_token_ms * T::from_count(batch)
    }

    pub fn verify_cost(&self, batch: usize) -> T {
        self.verify_base_ms + self.verify_per_token_ms * T::from_count(batch)
    }

    fn cost(&self, actor: Actor, batch: usize) -> T {
        match actor {
            Actor::Draft => self.draft_cost(batch),
            Actor::Verify => self.verify_cost(batch),
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let fields = [
            ("draft_base_ms", self.draft_base_ms),
            ("draft_per_token_ms", self.draft_per_token_ms),
            ("verify_base_ms", self.verify_base_ms),
            ("verify_per_token_ms", self.verify_per_token_ms),
            ("rollback_overhead_ms", self.rollback_overhead_ms),
        ];
        for (name, v) in fields {
            if !v.is_valid_duration() {
                return Err(DecodeError::Config(format!(
                    "latency {name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if self.draft_cost(1) <= T::zero() || self.verify_cost(1) <= T::zero() {
            return Err(DecodeError::Config("forward costs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Autoregressive,
    SyncSpeculative,
    Amusd,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [
        EngineKind::Autoregressive,
        EngineKind::SyncSpeculative,
        EngineKind::Amusd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Autoregressive => "autoregressive",
            EngineKind::SyncSpeculative => "sync_speculative",
            EngineKind::Amusd => "amusd",
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEventKind {
    ForwardDone,
    RollbackAck,
    /// Re-poll an idle actor.
    Wake,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent<T> {
    pub at: T,
    pub actor: Actor,
    pub kind: SimEventKind,
    pub seq: u64,
}

impl<T: Millis> SimEvent<T> {
    fn rank(&self) -> u8 {
        match self.actor {
            Actor::Verify => 0,
            Actor::Draft => 1,
        }
    }
}

impl<T: Millis> Eq for SimEvent<T> {}

impl<T: Millis> Ord for SimEvent<T> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .partial_cmp(&self.at)
            .expect("event times are never NaN")
            .then_with(|| other.rank().cmp(&self.rank()))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl<T: Millis> PartialOrd for SimEvent<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pending events ordered by (time, verify-before-draft, insertion order).
#[derive(Debug, Clone)]
pub struct EventQueue<T: Millis> {
    heap: BinaryHeap<SimEvent<T>>,
    next_seq: u64,
    now: T,
}

impl<T: Millis> Default for EventQueue<T> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: T::zero(),
        }
    }
}

impl<T: Millis> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> T {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: T, actor: Actor, kind: SimEventKind) {
        assert!(at >= self.now, "event scheduled in the past");
        self.heap.push(SimEvent {
            at,
            actor,
            kind,
            seq: self.next_seq,
        });
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<SimEvent<T>> {
        let ev = self.heap.pop()?;
        self.now = ev.at;
        Some(ev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Complete,
}

/// Something the virtual clock can drive.
pub trait SimProcess<T: Millis> {
    fn on_event(
        &mut self,
        event: SimEvent<T>,
        queue: &mut EventQueue<T>,
    ) -> Result<Flow, DecodeError>;

    fn take_trace(&mut self) -> DecodeTrace<T>;
}

/// Pops events in order and hands them to `process` until it reports
/// completion.
pub fn virtual_clock_run<T: Millis, P: SimProcess<T>>(
    queue: &mut EventQueue<T>,
    process: &mut P,
) -> Result<DecodeTrace<T>, DecodeError> {
    while let Some(event) = queue.pop() {
        if process.on_event(event, queue)? == Flow::Complete {
            return Ok(process.take_trace());
        }
    }
    Err(DecodeError::Simulator(
        "event queue drained before completion".into(),
    ))
}

struct SerialProcess<T: Millis, S> {
    decoder: S,
    latency: LatencyModel<T>,
    trace: DecodeTrace<T>,
    started: T,
}

impl<T: Millis, S: SerialDecoder> SerialProcess<T, S> {
    fn schedule_next(&mut self, now: T, queue: &mut EventQueue<T>) -> Result<(), DecodeError> {
        let forward = self
            .decoder
            .next_forward()
            .ok_or_else(|| DecodeError::Simulator("serial engine has no next forward".into()))?;
        self.started = now;
        queue.schedule(
            now + self.latency.cost(forward.actor, forward.batch),
            forward.actor,
            SimEventKind::ForwardDone,
        );
        Ok(())
    }
}

impl<T: Millis, S: SerialDecoder> SimProcess<T> for SerialProcess<T, S> {
    fn on_event(
        &mut self,
        event: SimEvent<T>,
        queue: &mut EventQueue<T>,
    ) -> Result<Flow, DecodeError> {
        if event.kind == SimEventKind::Completion {
            return Ok(Flow::Complete);
        }
        let outcome = self.decoder.step()?;
        let prompt = self.decoder.prompt_length();
        let events = serial_events(outcome, prompt, self.started, event.at);
        let done = events.iter().any(|e| e.kind == EventKind::Complete);
        for e in events {
            self.trace.push(e);
        }
        if done {
            queue.schedule(event.at, Actor::Verify, SimEventKind::Completion);
            return Ok(Flow::Continue);
        }
        self.schedule_next(event.at, queue)?;
        Ok(Flow::Continue)
    }

    fn take_trace(&mut self) -> DecodeTrace<T> {
        std::mem::replace(&mut self.trace, DecodeTrace::new(ClockKind::Virtual))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DraftPhase<T> {
    Forward { start: T },
    AwaitAck { start: T, discarded: usize },
    Idle,
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
enum VerifyPhase<T> {
    Forward { start: T, window: Vec<TokenId> },
    AwaitAck,
    Idle,
    Finished,
}

struct AmusdProcess<'m, T: Millis, D: ?Sized, V: ?Sized> {
    draft: &'m D,
    verify: &'m V,
    draft_port: DraftPort,
    verify_port: VerifyPort,
    draft_state: ModelState,
    verify_state: ModelState,
    max_lead: Option<usize>,
    latency: LatencyModel<T>,
    trace: DecodeTrace<T>,
    draft_phase: DraftPhase<T>,
    verify_phase: VerifyPhase<T>,
    draft_wake_pending: bool,
    verify_wake_pending: bool,
}

impl<T, D, V> AmusdProcess<'_, T, D, V>
where
    T: Millis,
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    fn draft_try_start(&mut self, now: T, queue: &mut EventQueue<T>) {
        self.draft_phase = match self.draft_port.plan(self.max_lead) {
            DraftPlan::Stop => DraftPhase::Stopped,
            DraftPlan::Rollback(_) => {
                queue.schedule(
                    now + self.latency.rollback_overhead_ms,
                    Actor::Draft,
                    SimEventKind::RollbackAck,
                );
                DraftPhase::AwaitAck {
                    start: now,
                    discarded: 0,
                }
            }
            DraftPlan::Idle => DraftPhase::Idle,
            DraftPlan::Generate => {
                queue.schedule(
                    now + self.latency.draft_cost(1),
                    Actor::Draft,
                    SimEventKind::ForwardDone,
                );
                DraftPhase::Forward { start: now }
            }
        };
    }

    fn verify_try_start(&mut self, now: T, queue: &mut EventQueue<T>) -> Result<(), DecodeError> {
        self.verify_phase = if self.verify_port.awaiting_ack() {
            VerifyPhase::AwaitAck
        } else {
            match begin_verify(&self.verify_port)? {
                None => VerifyPhase::Idle,
                Some(window) => {
                    queue.schedule(
                        now + self.latency.verify_cost(window.len()),
                        Actor::Verify,
                        SimEventKind::ForwardDone,
                    );
                    VerifyPhase::Forward { start: now, window }
                }
            }
        };
        Ok(())
    }

    fn wake_draft(&mut self, now: T, queue: &mut EventQueue<T>) {
        if self.draft_phase == DraftPhase::Idle && !self.draft_wake_pending {
            self.draft_wake_pending = true;
            queue.schedule(now, Actor::Draft, SimEventKind::Wake);
        }
    }

    fn wake_verify(&mut self, now: T, queue: &mut EventQueue<T>) {
        if matches!(self.verify_phase, VerifyPhase::Idle | VerifyPhase::AwaitAck)
            && !self.verify_wake_pending
        {
            self.verify_wake_pending = true;
            queue.schedule(now, Actor::Verify, SimEventKind::Wake);
        }
    }

    fn on_draft(
        &mut self,
        event: SimEvent<T>,
        queue: &mut EventQueue<T>,
    ) -> Result<(), DecodeError> {
        let now = event.at;
        match (event.kind, self.draft_phase) {
            (SimEventKind::Wake, phase) => {
                self.draft_wake_pending = false;
                if phase == DraftPhase::Idle {
                    self.draft_try_start(now, queue);
                }
            }
            (SimEventKind::ForwardDone, DraftPhase::Forward { start }) => {
                if self.draft_port.is_complete() {
                    self.draft_phase = DraftPhase::Stopped;
                } else if self.draft_port.shared().pending_rollback().is_some() {
                    queue.schedule(
                        now + self.latency.rollback_overhead_ms,
                        Actor::Draft,
                        SimEventKind::RollbackAck,
                    );
                    self.draft_phase = DraftPhase::AwaitAck {
                        start,
                        discarded: 1,
                    };
                } else {
                    match draft_loop_step(
                        &mut self.draft_port,
                        self.draft,
                        &mut self.draft_state,
                        self.max_lead,
                    )? {
                        DraftStep::Generated { position, .. } => {
                            self.trace.push(TraceEvent::new(
                                EventKind::DraftToken,
                                Actor::Draft,
                                start,
                                now,
                                (position - 1, position),
                            ));
                            self.wake_verify(now, queue);
                        }
                        other => {
                            return Err(DecodeError::Simulator(format!(
                                "draft forward finished as {other:?}"
                            )))
                        }
                    }
                    self.draft_try_start(now, queue);
                }
            }
            (SimEventKind::RollbackAck, DraftPhase::AwaitAck { start, discarded }) => {
                match draft_loop_step(
                    &mut self.draft_port,
                    self.draft,
                    &mut self.draft_state,
                    self.max_lead,
                )? {
                    DraftStep::RolledBack(ack) => {
                        self.trace.push(
                            TraceEvent::new(
                                EventKind::Rollback,
                                Actor::Draft,
                                start,
                                now,
                                (ack.target, ack.abandoned_from),
                            )
                            .with_discarded(discarded),
                        );
                        self.wake_verify(now, queue);
                        self.draft_try_start(now, queue);
                    }
                    DraftStep::Stopped => self.draft_phase = DraftPhase::Stopped,
                    other => {
                        return Err(DecodeError::Simulator(format!(
                            "rollback acknowledgment finished as {other:?}"
                        )))
                    }
                }
            }
            (kind, phase) => {
                return Err(DecodeError::Simulator(format!(
                    "draft event {kind:?} in phase {phase:?}"
                )))
            }
        }
        Ok(())
    }

    fn on_verify(
        &mut self,
        event: SimEvent<T>,
        queue: &mut EventQueue<T>,
    ) -> Result<Flow, DecodeError> {
        let now = event.at;
        match event.kind {
            SimEventKind::Wake => {
                self.verify_wake_pending = false;
                if matches!(self.verify_phase, VerifyPhase::Idle | VerifyPhase::AwaitAck) {
                    self.verify_try_start(now, queue)?;
                }
                Ok(Flow::Continue)
            }
            SimEventKind::ForwardDone => {
                let VerifyPhase::Forward { start, window } =
                    std::mem::replace(&mut self.verify_phase, VerifyPhase::Idle)
                else {
                    return Err(DecodeError::Simulator(
                        "verify forward without window".into(),
                    ));
                };
                let step = finish_verify(
                    &mut self.verify_port,
                    self.verify,
                    &mut self.verify_state,
                    &window,
                )?;
                let (verdict, done) = match step {
                    VerifyStep::Accepted(v) | VerifyStep::Corrected(v) => (v, false),
                    VerifyStep::Done(v) => (v, true),
                    VerifyStep::Idle => unreachable!("window was non-empty"),
                };
                let kind = if verdict.corrected {
                    EventKind::VerifyCorrect
                } else {
                    EventKind::VerifyAccept
                };
                self.trace.push(
                    TraceEvent::new(
                        kind,
                        Actor::Verify,
                        start,
                        now,
                        (verdict.from, verdict.to()),
                    )
                    .with_matched(verdict.matched),
                );
                if done {
                    self.trace.push(TraceEvent::new(
                        EventKind::Complete,
                        Actor::Verify,
                        now,
                        now,
                        (self.verify_state.prompt_length(), verdict.to()),
                    ));
                    self.verify_phase = VerifyPhase::Finished;
                    queue.schedule(now, Actor::Verify, SimEventKind::Completion);
                    return Ok(Flow::Continue);
                }
                // A correction needs the draft's acknowledgment; an accepted
                // batch may have lifted the lead cap.
                self.wake_draft(now, queue);
                self.verify_try_start(now, queue)?;
                Ok(Flow::Continue)
            }
            SimEventKind::Completion => Ok(Flow::Complete),
            other => Err(DecodeError::Simulator(format!("verify event {other:?}"))),
        }
    }
}

impl<T, D, V> SimProcess<T> for AmusdProcess<'_, T, D, V>
where
    T: Millis,
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    fn on_event(
        &mut self,
        event: SimEvent<T>,
        queue: &mut EventQueue<T>,
    ) -> Result<Flow, DecodeError> {
        match event.actor {
            Actor::Draft => {
                self.on_draft(event, queue)?;
                Ok(Flow::Continue)
            }
            Actor::Verify => self.on_verify(event, queue),
        }
    }

    fn take_trace(&mut self) -> DecodeTrace<T> {
        std::mem::replace(&mut self.trace, DecodeTrace::new(ClockKind::Virtual))
    }
}

/// Virtual-clock backend.
#[derive(Debug, Clone, Default)]
pub struct Simulator<T: Millis = f64> {
    pub latency: LatencyModel<T>,
    /// Re-check the resynchronization invariant at every acknowledgment.
    pub audit: bool,
}

impl<T: Millis> Simulator<T> {
    pub fn new(latency: LatencyModel<T>) -> Self {
        Self {
            latency,
            audit: false,
        }
    }

    pub fn with_audit(mut self, audit: bool) -> Self {
        self.audit = audit;
        self
    }

    /// Runs `engine` under the virtual clock.
    pub fn run<D, V>(
        &self,
        engine: EngineKind,
        draft: &D,
        verify: &V,
        prompt: &[TokenId],
        config: &DecodeConfig,
    ) -> Result<Run<T>, DecodeError>
    where
        D: LanguageModel + ?Sized,
        V: LanguageModel + ?Sized,
    {
        self.latency.validate()?;
        config.validate()?;
        match engine {
            EngineKind::Autoregressive => self.run_serial(
                Autoregressive::new(verify, prompt, config)?,
                verify.eos_token(),
            ),
            EngineKind::SyncSpeculative => self.run_serial(
                SyncSpeculative::new(draft, verify, prompt, config)?,
                verify.eos_token(),
            ),
            EngineKind::Amusd => crate::engines::decode_amusd(draft, verify, prompt, config, self),
        }
    }

    fn run_serial<S: SerialDecoder>(
        &self,
        decoder: S,
        eos: TokenId,
    ) -> Result<Run<T>, DecodeError> {
        let mut process = SerialProcess {
            decoder,
            latency: self.latency,
            trace: DecodeTrace::new(ClockKind::Virtual),
            started: T::zero(),
        };
        let mut queue = EventQueue::new();
        process.schedule_next(T::zero(), &mut queue)?;
        let trace = virtual_clock_run(&mut queue, &mut process)?;
        Run::assemble(process.decoder.generated().to_vec(), eos, trace)
    }
}

impl<T: Millis> Executor for Simulator<T> {
    type Time = T;

    fn run_amusd<D, V>(
        &self,
        draft: &D,
        verify: &V,
        prompt: &[TokenId],
        config: &DecodeConfig,
    ) -> Result<Run<T>, DecodeError>
    where
        D: LanguageModel + ?Sized,
        V: LanguageModel + ?Sized,
    {
        self.latency.validate()?;
        let (_shared, draft_port, verify_port) =
            SharedDecodeState::new(prompt.len(), config.max_new_tokens, self.audit);
        let mut process = AmusdProcess {
            draft,
            verify,
            draft_port,
            verify_port,
            draft_state: draft.init_state(prompt)?,
            verify_state: verify.init_state(prompt)?,
            max_lead: config.max_draft_lead,
            latency: self.latency,
            trace: DecodeTrace::new(ClockKind::Virtual),
            draft_phase: DraftPhase::Idle,
            verify_phase: VerifyPhase::Idle,
            draft_wake_pending: false,
            verify_wake_pending: false,
        };
        let mut queue = EventQueue::new();
        process.verify_try_start(T::zero(), &mut queue)?;
        process.draft_try_start(T::zero(), &mut queue);
        let trace = virtual_clock_run(&mut queue, &mut process)?;
        Run::assemble(
            process.verify_state.generated().to_vec(),
            verify.eos_token(),
            trace,
        )
    }
}

/// Runs `engine` on the virtual clock with `latency`.
pub fn simulate<T, D, V>(
    engine: EngineKind,
    draft: &D,
    verify: &V,
    prompt: &[TokenId],
    config: &DecodeConfig,
    latency: LatencyModel<T>,
) -> Result<Run<T>, DecodeError>
where
    T: Millis,
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    Simulator::new(latency).run(engine, draft, verify, prompt, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_verify_then_insertion_order() {
        let mut q = EventQueue::<f64>::new();
        q.schedule(5.0, Actor::Draft, SimEventKind::ForwardDone);
        q.schedule(5.0, Actor::Verify, SimEventKind::ForwardDone);
        q.schedule(5.0, Actor::Verify, SimEventKind::Wake);
        q.schedule(1.0, Actor::Draft, SimEventKind::Wake);
        let order: Vec<_> = std::iter::from_fn(|| q.pop())
            .map(|e| (e.at, e.actor, e.kind))
            .collect();
        assert_eq!(
            order,
            vec![
                (1.0, Actor::Draft, SimEventKind::Wake),
                (5.0, Actor::Verify, SimEventKind::ForwardDone),
                (5.0, Actor::Verify, SimEventKind::Wake),
                (5.0, Actor::Draft, SimEventKind::ForwardDone),
            ]
        );
    }

    struct Never;
    impl SimProcess<f64> for Never {
        fn on_event(
            &mut self,
            _: SimEvent<f64>,
            _: &mut EventQueue<f64>,
        ) -> Result<Flow, DecodeError> {
            Ok(Flow::Continue)
        }
        fn take_trace(&mut self) -> DecodeTrace<f64> {
            DecodeTrace::new(ClockKind::Virtual)
        }
    }

    #[test]
    fn drained_queue_is_an_error() {
        let mut q = EventQueue::new();
        q.schedule(1.0, Actor::Draft, SimEventKind::Wake);
        assert!(matches!(
            virtual_clock_run(&mut q, &mut Never),
            Err(DecodeError::Simulator(_))
        ));
    }

    #[test]
    fn latency_validation() {
        let mut l = LatencyModel::<f64>::default();
        assert!(l.validate().is_ok());
        l.verify_base_ms = -1.0;
        assert!(l.validate().is_err());
        l.verify_base_ms = f64::NAN;
        assert!(l.validate().is_err());
        let d = LatencyModel::<f64>::default();
        assert_eq!((d.draft_cost(1), d.verify_cost(4)), (10.0, 25.0));
    }

    use crate::engines::decode_autoregressive;
    use crate::model::{make_agreement_pair, make_agreement_pair_without_eos, tokens};
    use num_rational::Ratio;

    type Q = Ratio<i64>;

    fn pair(rho: f64) -> (crate::model::MockModel, crate::model::MockModel) {
        make_agreement_pair_without_eos(11, rho, 64, TokenId(0)).unwrap()
    }

    #[test]
    fn autoregressive_costs_one_verify_forward_per_token() {
        let (d, v) = pair(1.0);
        let run = simulate(
            EngineKind::Autoregressive,
            &d,
            &v,
            &tokens(&[1, 2, 3, 4]),
            &DecodeConfig::new(12),
            LatencyModel::<f64>::default(),
        )
        .unwrap();
        assert_eq!(run.result.stats.elapsed_ms, 300.0);
        assert_eq!(run.result.stats.verify_steps, 12);
    }

    #[test]
    fn sync_at_full_agreement_is_thirteen_ms_per_token() {
        let (d, v) = pair(1.0);
        let run = simulate(
            EngineKind::SyncSpeculative,
            &d,
            &v,
            &tokens(&[1, 2, 3, 4]),
            &DecodeConfig::new(200).with_window(4),
            LatencyModel::<Q>::default(),
        )
        .unwrap();
        assert_eq!(run.result.stats.elapsed_ms, Q::from_integer(2600));
        assert_eq!(run.result.stats.mean_ms_per_token, Q::from_integer(13));
        assert_eq!(run.trace.overlap_ms(), Q::from_integer(0));
    }

    #[test]
    fn amusd_at_full_agreement_tracks_draft_speed() {
        let (d, v) = pair(1.0);
        let run = simulate(
            EngineKind::Amusd,
            &d,
            &v,
            &tokens(&[1, 2, 3, 4]),
            &DecodeConfig::new(200),
            LatencyModel::<f64>::default(),
        )
        .unwrap();
        let stats = &run.result.stats;
        assert!(stats.mean_ms_per_token <= 11.0, "{stats:?}");
        assert_eq!((stats.rollbacks, stats.wasted_draft_tokens), (0, 0));
        assert!(run.trace.overlap_ms() > 0.0);
    }

    #[test]
    fn timestamps_never_decrease_and_outputs_agree() {
        for rho in [0.0, 0.5, 0.8, 1.0] {
            let (d, v) = make_agreement_pair(3, rho, 32, TokenId(0)).unwrap();
            let prompt = tokens(&[5, 6]);
            let config = DecodeConfig::new(64);
            let reference = decode_autoregressive(&v, &prompt, &config).unwrap();
            for engine in EngineKind::ALL {
                let run = simulate(
                    engine,
                    &d,
                    &v,
                    &prompt,
                    &config,
                    LatencyModel::<f64>::default(),
                )
                .unwrap();
                assert_eq!(run.tokens(), reference.tokens(), "{engine} rho {rho}");
                run.trace.validate().unwrap();
                assert!(run.trace.events.windows(2).all(|w| w[0].t_ms <= w[1].t_ms));
            }
        }
    }

    #[test]
    fn pending_rollback_discards_in_flight_draft_forward() {
        // Rollback overhead keeps the verify actor waiting; the draft forward
        // that was running when the correction landed is thrown away.
        let (d, v) = pair(0.0);
        let latency = LatencyModel::<f64> {
            rollback_overhead_ms: 3.0,
            ..Default::default()
        };
        let run = simulate(
            EngineKind::Amusd,
            &d,
            &v,
            &tokens(&[1]),
            &DecodeConfig::new(8),
            latency,
        )
        .unwrap();
        let rollbacks: Vec<_> = run
            .trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Rollback)
            .collect();
        assert!(!rollbacks.is_empty());
        assert!(rollbacks.iter().any(|e| e.discarded == 1));
        for r in rollbacks {
            assert!(r.t_ms - r.start_ms >= 3.0);
        }
    }
}
