//! Decode traces, summary statistics and comparison reports.
//!
//! A [`DecodeTrace`] is the ordered event log of one run. Everything else in
//! this module is a pure function of a trace: [`summarize`] for per-run
//! statistics, [`export_timeline`] for verified tokens over time, and
//! [`compare_runs`] for the mean-token-time/speedup table.
//!
//! Stable file formats:
//!
//! * trace CSV: `t_ms,start_ms,actor,kind,pos_from,pos_to,matched,discarded`
//! * timeline CSV: `t_ms,verified_tokens`
//! * comparison JSON: array of `{label, clock, mean_ms_per_token, speedup,
//!   generated_tokens, elapsed_ms}`

use std::fmt::{self, Write as _};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Millis;

pub const TRACE_CSV_HEADER: [&str; 8] = [
    "t_ms",
    "start_ms",
    "actor",
    "kind",
    "pos_from",
    "pos_to",
    "matched",
    "discarded",
];

pub const TIMELINE_CSV_HEADER: [&str; 2] = ["t_ms", "verified_tokens"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Draft,
    Verify,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Actor::Draft => "draft",
            Actor::Verify => "verify",
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// One draft forward whose token was published to `D`.
    DraftToken,
    /// A verify batch with no mismatch. Bonus tokens count as appended.
    VerifyAccept,
    /// A verify batch that appended a correction token.
    VerifyCorrect,
    /// Draft cropped back to the verified frontier.
    Rollback,
    Complete,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::DraftToken => "draft_token",
            EventKind::VerifyAccept => "verify_accept",
            EventKind::VerifyCorrect => "verify_correct",
            EventKind::Rollback => "rollback",
            EventKind::Complete => "complete",
        }
    }

    pub fn is_verify(self) -> bool {
        matches!(self, EventKind::VerifyAccept | EventKind::VerifyCorrect)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which clock produced a trace's timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Wall,
    Virtual,
}

/// One trace record. Positions are absolute token counts; the event covers
/// `(pos_from, pos_to]`.
///
/// * `draft_token`: the published position.
/// * `verify_*`: the verified frontier before and after the batch;
///   `matched` counts draft tokens accepted as-is.
/// * `rollback`: `(target, abandoned draft frontier]`; `discarded` counts
///   draft forwards thrown away because the rollback was pending when they
///   finished.
/// * `complete`: `(prompt_length, final p_v]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent<T = f64> {
    pub t_ms: T,
    pub start_ms: T,
    pub actor: Actor,
    pub kind: EventKind,
    pub pos_from: usize,
    pub pos_to: usize,
    pub matched: usize,
    pub discarded: usize,
}

impl<T: Millis> TraceEvent<T> {
    pub fn new(kind: EventKind, actor: Actor, start_ms: T, t_ms: T, range: (usize, usize)) -> Self {
        Self {
            t_ms,
            start_ms,
            actor,
            kind,
            pos_from: range.0,
            pos_to: range.1,
            matched: 0,
            discarded: 0,
        }
    }

    pub fn with_matched(mut self, matched: usize) -> Self {
        self.matched = matched;
        self
    }

    pub fn with_discarded(mut self, discarded: usize) -> Self {
        self.discarded = discarded;
        self
    }

    /// Tokens appended to `V` by a verify event.
    pub fn appended(&self) -> usize {
        if self.kind.is_verify() {
            self.pos_to - self.pos_from
        } else {
            0
        }
    }
}

/// Append-only event log of one actor, tagged with a global sequence number
/// so per-actor logs can be merged into one linear order.
#[derive(Debug, Clone)]
pub struct ActorLog<T = f64> {
    entries: Vec<(u64, TraceEvent<T>)>,
}

impl<T> Default for ActorLog<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<T: Millis> ActorLog<T> {
    pub fn push(&mut self, seq: u64, event: TraceEvent<T>) {
        self.entries.push((seq, event));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace<T = f64> {
    pub clock: ClockKind,
    pub events: Vec<TraceEvent<T>>,
}

impl<T: Millis> DecodeTrace<T> {
    pub fn new(clock: ClockKind) -> Self {
        Self {
            clock,
            events: Vec::new(),
        }
    }

    /// Merges per-actor logs by sequence number.
    pub fn merge(clock: ClockKind, logs: impl IntoIterator<Item = ActorLog<T>>) -> Self {
        let mut all: Vec<(u64, TraceEvent<T>)> = logs.into_iter().flat_map(|l| l.entries).collect();
        all.sort_by_key(|(seq, _)| *seq);
        Self {
            clock,
            events: all.into_iter().map(|(_, e)| e).collect(),
        }
    }

    pub fn push(&mut self, event: TraceEvent<T>) {
        self.events.push(event);
    }

    pub fn completion(&self) -> Option<&TraceEvent<T>> {
        self.events.iter().find(|e| e.kind == EventKind::Complete)
    }

    /// Checks the structural invariants: non-decreasing timestamps, exactly
    /// one completion as the last event, and every correction followed by
    /// exactly one rollback before the next verify event.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::InvalidInput(m));
        for (i, w) in self.events.windows(2).enumerate() {
            if w[1].t_ms < w[0].t_ms {
                return bad(format!("timestamp decreases at event {}", i + 1));
            }
        }
        let completes = self
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Complete)
            .count();
        if completes != 1 || self.events.last().map(|e| e.kind) != Some(EventKind::Complete) {
            return bad(format!(
                "expected one trailing complete event, found {completes}"
            ));
        }
        let mut awaiting_rollback = false;
        for (i, e) in self.events.iter().enumerate() {
            match e.kind {
                k if k.is_verify() => {
                    if awaiting_rollback {
                        return bad(format!("verify event {i} inside rollback handshake"));
                    }
                    awaiting_rollback = k == EventKind::VerifyCorrect;
                }
                EventKind::Rollback => {
                    if !awaiting_rollback {
                        return bad(format!("rollback event {i} without correction"));
                    }
                    awaiting_rollback = false;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Busy intervals `[start_ms, t_ms]` of one actor's forwards.
    pub fn busy_intervals(&self, actor: Actor) -> Vec<(T, T)> {
        self.events
            .iter()
            .filter(|e| e.actor == actor && e.kind != EventKind::Complete && e.t_ms > e.start_ms)
            .map(|e| (e.start_ms, e.t_ms))
            .collect()
    }

    /// Total time during which both actors were busy.
    pub fn overlap_ms(&self) -> T {
        let draft = union(self.busy_intervals(Actor::Draft));
        let verify = union(self.busy_intervals(Actor::Verify));
        let (mut i, mut j) = (0, 0);
        let mut total = T::zero();
        while i < draft.len() && j < verify.len() {
            let lo = draft[i].0.max_of(verify[j].0);
            let hi = draft[i].1.min_of(verify[j].1);
            if hi > lo {
                total = total + (hi - lo);
            }
            if draft[i].1 < verify[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_CSV_HEADER)?;
        for e in &self.events {
            w.write_record([
                e.t_ms.to_string(),
                e.start_ms.to_string(),
                e.actor.to_string(),
                e.kind.to_string(),
                e.pos_from.to_string(),
                e.pos_to.to_string(),
                e.matched.to_string(),
                e.discarded.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl DecodeTrace<f64> {
    pub fn read_csv<R: io::Read>(clock: ClockKind, input: R) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()?.iter().ne(TRACE_CSV_HEADER) {
            return Err(MetricsError::InvalidInput(
                "unexpected trace CSV header".into(),
            ));
        }
        let events = r
            .deserialize()
            .collect::<Result<Vec<TraceEvent<f64>>, _>>()?;
        Ok(Self { clock, events })
    }
}

fn union<T: Millis>(mut spans: Vec<(T, T)>) -> Vec<(T, T)> {
    spans.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("ordered timestamps"));
    let mut out: Vec<(T, T)> = Vec::with_capacity(spans.len());
    for (lo, hi) in spans {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max_of(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

/// Per-run statistics. One schema serves wall-clock and virtual-clock runs;
/// `clock` says which produced the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats<T = f64> {
    pub clock: ClockKind,
    pub generated_tokens: usize,
    pub elapsed_ms: T,
    pub mean_ms_per_token: T,
    pub verify_steps: usize,
    /// Tokens appended to `V` per verify step, corrections and bonus tokens
    /// included.
    pub draft_tokens_accepted_per_verify_step: f64,
    pub rollbacks: usize,
    pub drafted_tokens_total: usize,
    /// Draft tokens accepted without change.
    pub draft_tokens_matched: usize,
    pub wasted_draft_tokens: usize,
}

pub fn summarize<T: Millis>(trace: &DecodeTrace<T>) -> Result<DecodeStats<T>, MetricsError> {
    let done = trace
        .completion()
        .ok_or_else(|| MetricsError::InvalidInput("trace has no complete event".into()))?;
    let generated_tokens = done.pos_to - done.pos_from;
    if generated_tokens == 0 {
        return Err(MetricsError::InvalidInput(
            "trace generated no tokens".into(),
        ));
    }
    let mut verify_steps = 0;
    let mut appended = 0;
    let mut rollbacks = 0;
    let mut drafted = 0;
    let mut matched = 0;
    for e in &trace.events {
        match e.kind {
            EventKind::DraftToken => drafted += 1,
            EventKind::VerifyAccept | EventKind::VerifyCorrect => {
                verify_steps += 1;
                appended += e.appended();
                matched += e.matched;
                if e.kind == EventKind::VerifyCorrect {
                    rollbacks += 1;
                }
            }
            EventKind::Rollback => drafted += e.discarded,
            EventKind::Complete => {}
        }
    }
    if matched > drafted {
        return Err(MetricsError::InvalidInput(format!(
            "{matched} matched draft tokens exceed {drafted} drafted"
        )));
    }
    Ok(DecodeStats {
        clock: trace.clock,
        generated_tokens,
        elapsed_ms: done.t_ms,
        mean_ms_per_token: done.t_ms / T::from_count(generated_tokens),
        verify_steps,
        draft_tokens_accepted_per_verify_step: if verify_steps == 0 {
            0.0
        } else {
            appended as f64 / verify_steps as f64
        },
        rollbacks,
        drafted_tokens_total: drafted,
        draft_tokens_matched: matched,
        wasted_draft_tokens: drafted - matched,
    })
}

impl<T: Millis + Serialize> DecodeStats<T> {
    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint<T = f64> {
    pub t_ms: T,
    pub verified_tokens: usize,
}

/// Cumulative verified tokens over time, starting at the origin.
pub fn export_timeline<T: Millis>(trace: &DecodeTrace<T>) -> Vec<TimelinePoint<T>> {
    let mut out = vec![TimelinePoint {
        t_ms: T::zero(),
        verified_tokens: 0,
    }];
    let mut total = 0;
    for e in trace.events.iter().filter(|e| e.kind.is_verify()) {
        total += e.appended();
        out.push(TimelinePoint {
            t_ms: e.t_ms,
            verified_tokens: total,
        });
    }
    out
}

pub fn write_timeline_csv<T: Millis, W: io::Write>(
    points: &[TimelinePoint<T>],
    out: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TIMELINE_CSV_HEADER)?;
    for p in points {
        w.write_record([p.t_ms.to_string(), p.verified_tokens.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn timeline_json<T: Millis + Serialize>(
    points: &[TimelinePoint<T>],
) -> Result<String, MetricsError> {
    Ok(serde_json::to_string_pretty(points)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow<T = f64> {
    pub label: String,
    pub clock: ClockKind,
    pub mean_ms_per_token: T,
    pub speedup: T,
    pub generated_tokens: usize,
    pub elapsed_ms: T,
}

/// Mean token time and speedup of each run against the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison<T = f64> {
    pub rows: Vec<ComparisonRow<T>>,
}

pub fn compare_runs<T: Millis>(
    results: &[(String, DecodeStats<T>)],
) -> Result<Comparison<T>, MetricsError> {
    let Some((_, baseline)) = results.first() else {
        return Err(MetricsError::InvalidInput("no runs to compare".into()));
    };
    if let Some((label, _)) = results.iter().find(|(_, s)| s.clock != baseline.clock) {
        return Err(MetricsError::InvalidInput(format!(
            "run {label} uses a different clock than the baseline"
        )));
    }
    let rows = results
        .iter()
        .map(|(label, s)| {
            if s.mean_ms_per_token <= T::zero() {
                return Err(MetricsError::InvalidInput(format!(
                    "run {label} has non-positive mean token time"
                )));
            }
            Ok(ComparisonRow {
                label: label.clone(),
                clock: s.clock,
                mean_ms_per_token: s.mean_ms_per_token,
                speedup: baseline.mean_ms_per_token / s.mean_ms_per_token,
                generated_tokens: s.generated_tokens,
                elapsed_ms: s.elapsed_ms,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(Comparison { rows })
}

impl<T: Millis> Comparison<T> {
    pub fn speedup_of(&self, label: &str) -> Option<T> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.speedup)
    }

    /// Aligned text table.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["strategy".len()])
            .max()
            .unwrap_or(8);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>15}  {:>8}",
            "strategy", "mean ms/token", "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>15.2}  {:>7.2}x",
                r.label,
                r.mean_ms_per_token.as_f64(),
                r.speedup.as_f64()
            );
        }
        s
    }
}

impl<T: Millis + Serialize> Comparison<T> {
    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }
}
