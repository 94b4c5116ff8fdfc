//! Concurrent backend: the draft and verify loops on two OS threads.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::coordination::{DraftPlan, DraftPort, SharedDecodeState, VerifyPort};
use crate::metrics::{Actor, ActorLog, ClockKind, DecodeTrace, EventKind, TraceEvent};
use crate::model::{LanguageModel, ModelState, TokenId};
use crate::simulator::{EngineKind, LatencyModel};

use super::amusd::{begin_verify, execute_draft_plan, finish_verify, DraftStep, VerifyStep};
use super::serial::run_wall;
use super::{
    decode_amusd, Autoregressive, DecodeConfig, DecodeError, Executor, Run, SyncSpeculative,
};

/// Monotone wall clock that hands out `(sequence, ms)` pairs in one
/// critical section, so sequence order and timestamp order agree across
/// threads.
#[derive(Debug)]
pub(crate) struct WallClock {
    origin: Instant,
    seq: Mutex<u64>,
}

impl WallClock {
    pub(crate) fn start() -> Self {
        Self {
            origin: Instant::now(),
            seq: Mutex::new(0),
        }
    }

    pub(crate) fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1e3
    }

    pub(crate) fn stamp(&self) -> (u64, f64) {
        let mut seq = self.seq.lock().expect("clock mutex poisoned");
        *seq += 1;
        (*seq, self.now_ms())
    }
}

/// How an idle loop waits before polling again. Never affects output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollPolicy {
    Spin,
    Yield,
    Sleep(Duration),
    /// Per-poll random choice between spinning, yielding and sleeping up to
    /// `max_sleep_us`, from a seeded generator.
    Jitter {
        seed: u64,
        max_sleep_us: u64,
    },
}

struct Backoff {
    policy: PollPolicy,
    rng: StdRng,
}

impl Backoff {
    fn new(policy: PollPolicy, stream: u64) -> Self {
        let seed = match policy {
            PollPolicy::Jitter { seed, .. } => seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            _ => stream,
        };
        Self {
            policy,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    fn wait(&mut self) {
        match self.policy {
            PollPolicy::Spin => std::hint::spin_loop(),
            PollPolicy::Yield => thread::yield_now(),
            PollPolicy::Sleep(d) => thread::sleep(d),
            PollPolicy::Jitter { max_sleep_us, .. } => match self.rng.gen_range(0..3) {
                0 => {
                    for _ in 0..self.rng.gen_range(1..64) {
                        std::hint::spin_loop();
                    }
                }
                1 => thread::yield_now(),
                _ => thread::sleep(Duration::from_micros(self.rng.gen_range(0..=max_sleep_us))),
            },
        }
    }

    /// Occasionally delays a busy loop too, to shake out interleavings.
    fn jitter(&mut self) {
        if matches!(self.policy, PollPolicy::Jitter { .. }) && self.rng.gen_bool(0.1) {
            self.wait();
        }
    }
}

/// Runs the two loops on scoped threads over one [`SharedDecodeState`].
#[derive(Debug, Clone)]
pub struct ThreadedExecutor {
    pub poll: PollPolicy,
    /// When set, each forward sleeps for its modeled cost.
    pub inject_latency: Option<LatencyModel<f64>>,
    /// Re-check the resynchronization invariant at every acknowledgment.
    pub audit: bool,
}

impl Default for ThreadedExecutor {
    fn default() -> Self {
        Self {
            poll: PollPolicy::Yield,
            inject_latency: None,
            audit: cfg!(debug_assertions),
        }
    }
}

impl ThreadedExecutor {
    pub fn with_poll(mut self, poll: PollPolicy) -> Self {
        self.poll = poll;
        self
    }

    pub fn with_latency(mut self, latency: LatencyModel<f64>) -> Self {
        self.inject_latency = Some(latency);
        self
    }

    pub fn with_audit(mut self, audit: bool) -> Self {
        self.audit = audit;
        self
    }

    /// Runs `engine` on the wall clock. The serial engines stay on the
    /// calling thread and honor `inject_latency` too.
    pub fn run<D, V>(
        &self,
        engine: EngineKind,
        draft: &D,
        verify: &V,
        prompt: &[TokenId],
        config: &DecodeConfig,
    ) -> Result<Run<f64>, DecodeError>
    where
        D: LanguageModel + ?Sized,
        V: LanguageModel + ?Sized,
    {
        config.validate()?;
        if let Some(l) = &self.inject_latency {
            l.validate()?;
        }
        let latency = self.inject_latency.as_ref();
        match engine {
            EngineKind::Autoregressive => {
                run_wall(Autoregressive::new(verify, prompt, config)?, latency)
            }
            EngineKind::SyncSpeculative => run_wall(
                SyncSpeculative::new(draft, verify, prompt, config)?,
                latency,
            ),
            EngineKind::Amusd => decode_amusd(draft, verify, prompt, config, self),
        }
    }
}

pub(crate) fn sleep_ms(ms: f64) {
    if ms > 0.0 {
        thread::sleep(Duration::from_secs_f64(ms / 1e3));
    }
}

struct Ctx<'a> {
    clock: &'a WallClock,
    abort: &'a AtomicBool,
    poll: PollPolicy,
    latency: Option<&'a LatencyModel<f64>>,
    max_lead: Option<usize>,
    seed: u64,
}

/// Raises the abort flag if the owning worker unwinds.
struct AbortOnPanic<'a>(&'a AtomicBool);

impl Drop for AbortOnPanic<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            self.0.store(true, Ordering::Release);
        }
    }
}

fn draft_worker<M: LanguageModel + ?Sized>(
    ctx: &Ctx<'_>,
    mut port: DraftPort,
    model: &M,
    mut state: ModelState,
) -> Result<ActorLog<f64>, DecodeError> {
    let mut log = ActorLog::default();
    let mut backoff = Backoff::new(ctx.poll, ctx.seed ^ 0xD);
    loop {
        if ctx.abort.load(Ordering::Acquire) {
            return Err(DecodeError::Aborted);
        }
        let start = ctx.clock.now_ms();
        let plan = port.plan(ctx.max_lead);
        if plan == DraftPlan::Generate {
            if let Some(l) = ctx.latency {
                sleep_ms(l.draft_cost(1));
            }
            backoff.jitter();
        }
        // A rollback is stamped after R was observed and before the
        // acknowledgment clears it.
        let pre_stamp = matches!(plan, DraftPlan::Rollback(_)).then(|| ctx.clock.stamp());
        match execute_draft_plan(&mut port, model, &mut state, plan)? {
            DraftStep::Generated { position, .. } => {
                let (seq, t) = ctx.clock.stamp();
                log.push(
                    seq,
                    TraceEvent::new(
                        EventKind::DraftToken,
                        Actor::Draft,
                        start,
                        t,
                        (position - 1, position),
                    ),
                );
            }
            DraftStep::RolledBack(ack) => {
                let (seq, t) = pre_stamp.expect("rollback plan was stamped");
                log.push(
                    seq,
                    TraceEvent::new(
                        EventKind::Rollback,
                        Actor::Draft,
                        start.min(t),
                        t,
                        (ack.target, ack.abandoned_from),
                    ),
                );
            }
            DraftStep::Idle => backoff.wait(),
            DraftStep::Stopped => return Ok(log),
        }
    }
}

fn verify_worker<M: LanguageModel + ?Sized>(
    ctx: &Ctx<'_>,
    mut port: VerifyPort,
    model: &M,
    mut state: ModelState,
) -> Result<(ActorLog<f64>, Vec<TokenId>), DecodeError> {
    let mut log = ActorLog::default();
    let mut backoff = Backoff::new(ctx.poll, ctx.seed ^ 0xF);
    let prompt_length = state.prompt_length();
    loop {
        if ctx.abort.load(Ordering::Acquire) {
            return Err(DecodeError::Aborted);
        }
        if port.awaiting_ack() {
            backoff.wait();
            continue;
        }
        let start = ctx.clock.now_ms();
        let Some(window) = begin_verify(&port)? else {
            backoff.wait();
            continue;
        };
        if let Some(l) = ctx.latency {
            sleep_ms(l.verify_cost(window.len()));
        }
        backoff.jitter();
        // Stamped before publication so the correction precedes the
        // draft's rollback in sequence order.
        let (seq, t) = ctx.clock.stamp();
        let (verdict, done) = match finish_verify(&mut port, model, &mut state, &window)? {
            VerifyStep::Accepted(v) | VerifyStep::Corrected(v) => (v, false),
            VerifyStep::Done(v) => (v, true),
            VerifyStep::Idle => unreachable!("window was non-empty"),
        };
        let kind = if verdict.corrected {
            EventKind::VerifyCorrect
        } else {
            EventKind::VerifyAccept
        };
        log.push(
            seq,
            TraceEvent::new(
                kind,
                Actor::Verify,
                start.min(t),
                t,
                (verdict.from, verdict.to()),
            )
            .with_matched(verdict.matched),
        );
        if done {
            let (seq, t) = ctx.clock.stamp();
            log.push(
                seq,
                TraceEvent::new(
                    EventKind::Complete,
                    Actor::Verify,
                    t,
                    t,
                    (prompt_length, verdict.to()),
                ),
            );
            return Ok((log, state.generated().to_vec()));
        }
    }
}

impl Executor for ThreadedExecutor {
    type Time = f64;

    fn run_amusd<D, V>(
        &self,
        draft: &D,
        verify: &V,
        prompt: &[TokenId],
        config: &DecodeConfig,
    ) -> Result<Run<f64>, DecodeError>
    where
        D: LanguageModel + ?Sized,
        V: LanguageModel + ?Sized,
    {
        let draft_state = draft.init_state(prompt)?;
        let verify_state = verify.init_state(prompt)?;
        let (shared, dport, vport) =
            SharedDecodeState::new(prompt.len(), config.max_new_tokens, self.audit);
        let clock = WallClock::start();
        let abort = AtomicBool::new(false);
        let ctx = Ctx {
            clock: &clock,
            abort: &abort,
            poll: self.poll,
            latency: self.inject_latency.as_ref(),
            max_lead: config.max_draft_lead,
            seed: config.seed,
        };

        let (draft_out, verify_out) = thread::scope(|scope| {
            let ctx = &ctx;
            let d = scope.spawn(move || {
                let _guard = AbortOnPanic(ctx.abort);
                let r = draft_worker(ctx, dport, draft, draft_state);
                if r.is_err() {
                    ctx.abort.store(true, Ordering::Release);
                }
                r
            });
            let v = scope.spawn(move || {
                let _guard = AbortOnPanic(ctx.abort);
                let r = verify_worker(ctx, vport, verify, verify_state);
                if r.is_err() {
                    ctx.abort.store(true, Ordering::Release);
                }
                r
            });
            (
                d.join().map_err(|_| DecodeError::WorkerPanicked("draft")),
                v.join().map_err(|_| DecodeError::WorkerPanicked("verify")),
            )
        });
        // Prefer the root cause over the other worker's abort.
        let (draft_log, (verify_log, tokens)) =
            match (draft_out.and_then(|r| r), verify_out.and_then(|r| r)) {
                (Ok(d), Ok(v)) => (d, v),
                (Err(DecodeError::Aborted), Err(e)) | (Err(e), _) | (_, Err(e)) => return Err(e),
            };
        debug_assert_eq!(tokens, shared.verified_tokens());
        let mut trace = DecodeTrace::merge(ClockKind::Wall, [draft_log, verify_log]);
        // Draft tokens stamped after completion lie past the final output;
        // the simulator never records them either.
        if let Some(end) = trace
            .events
            .iter()
            .position(|e| e.kind == EventKind::Complete)
        {
            trace.events.truncate(end + 1);
        }
        Run::assemble(tokens, verify.eos_token(), trace)
    }
}
