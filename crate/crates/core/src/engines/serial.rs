//! Single-threaded engines as step machines: autoregressive decoding and
//! synchronous speculative decoding.

use crate::metrics::{Actor, ClockKind, DecodeTrace, EventKind, TraceEvent};
use crate::model::{LanguageModel, ModelState, TokenId};
use crate::scalar::Millis;

use crate::simulator::LatencyModel;

use super::threaded::{sleep_ms, WallClock};
use super::{check_pair, find_mismatch, truncate_accepted, DecodeConfig, DecodeError, Run};

/// The next forward pass a serial engine will run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forward {
    pub actor: Actor,
    /// Positions scored by the pass.
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SerialOutcome {
    /// A draft token at absolute `position`.
    Drafted { position: usize },
    /// A verify pass moved the frontier from `from` to `to`.
    Verified {
        from: usize,
        to: usize,
        matched: usize,
        corrected: bool,
        /// Draft frontier before the crop, when a correction was applied.
        abandoned_from: usize,
        done: bool,
    },
}

pub trait SerialDecoder {
    /// `None` once decoding has finished.
    fn next_forward(&self) -> Option<Forward>;

    fn step(&mut self) -> Result<SerialOutcome, DecodeError>;

    fn prompt_length(&self) -> usize;

    fn generated(&self) -> &[TokenId];

    fn eos_token(&self) -> TokenId;
}

/// Trace events for one serial step that ran over `[start, end]`.
pub fn serial_events<T: Millis>(
    outcome: SerialOutcome,
    prompt_length: usize,
    start: T,
    end: T,
) -> Vec<TraceEvent<T>> {
    match outcome {
        SerialOutcome::Drafted { position } => vec![TraceEvent::new(
            EventKind::DraftToken,
            Actor::Draft,
            start,
            end,
            (position - 1, position),
        )],
        SerialOutcome::Verified {
            from,
            to,
            matched,
            corrected,
            abandoned_from,
            done,
        } => {
            let kind = if corrected {
                EventKind::VerifyCorrect
            } else {
                EventKind::VerifyAccept
            };
            let mut out =
                vec![TraceEvent::new(kind, Actor::Verify, start, end, (from, to))
                    .with_matched(matched)];
            if done {
                out.push(TraceEvent::new(
                    EventKind::Complete,
                    Actor::Verify,
                    end,
                    end,
                    (prompt_length, to),
                ));
            } else if corrected {
                out.push(TraceEvent::new(
                    EventKind::Rollback,
                    Actor::Draft,
                    end,
                    end,
                    (to, abandoned_from),
                ));
            }
            out
        }
    }
}

fn is_done(generated: &[TokenId], eos: TokenId, max_new: usize) -> bool {
    generated.last() == Some(&eos) || generated.len() >= max_new
}

/// Greedy decoding with the verify model, one token per forward.
pub struct Autoregressive<'m, M: ?Sized> {
    model: &'m M,
    state: ModelState,
    max_new_tokens: usize,
}

impl<'m, M: LanguageModel + ?Sized> Autoregressive<'m, M> {
    pub fn new(
        model: &'m M,
        prompt: &[TokenId],
        config: &DecodeConfig,
    ) -> Result<Self, DecodeError> {
        config.validate()?;
        Ok(Self {
            model,
            state: model.init_state(prompt)?,
            max_new_tokens: config.max_new_tokens,
        })
    }
}

impl<M: LanguageModel + ?Sized> SerialDecoder for Autoregressive<'_, M> {
    fn next_forward(&self) -> Option<Forward> {
        (!is_done(self.generated(), self.eos_token(), self.max_new_tokens)).then_some(Forward {
            actor: Actor::Verify,
            batch: 1,
        })
    }

    fn step(&mut self) -> Result<SerialOutcome, DecodeError> {
        let from = self.state.prefix_length();
        let token = self.model.next_token(&self.state)?;
        self.model.advance(&mut self.state, &[token])?;
        Ok(SerialOutcome::Verified {
            from,
            to: from + 1,
            matched: 0,
            corrected: false,
            abandoned_from: from,
            done: is_done(self.generated(), self.eos_token(), self.max_new_tokens),
        })
    }

    fn prompt_length(&self) -> usize {
        self.state.prompt_length()
    }

    fn generated(&self) -> &[TokenId] {
        self.state.generated()
    }

    fn eos_token(&self) -> TokenId {
        self.model.eos_token()
    }
}

/// Synchronous speculative decoding: rounds of `k` sequential draft
/// forwards followed by one verify forward over the candidates plus the
/// bonus position.
///
/// A round drafts `min(k, remaining - 1)` tokens, so the bonus token of a
/// fully matched round never overshoots the length limit.
pub struct SyncSpeculative<'m, D: ?Sized, V: ?Sized> {
    draft: &'m D,
    verify: &'m V,
    draft_state: ModelState,
    verify_state: ModelState,
    window: usize,
    max_new_tokens: usize,
    candidates: Vec<TokenId>,
}

impl<'m, D, V> SyncSpeculative<'m, D, V>
where
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    pub fn new(
        draft: &'m D,
        verify: &'m V,
        prompt: &[TokenId],
        config: &DecodeConfig,
    ) -> Result<Self, DecodeError> {
        config.validate()?;
        check_pair(draft, verify)?;
        Ok(Self {
            draft,
            verify,
            draft_state: draft.init_state(prompt)?,
            verify_state: verify.init_state(prompt)?,
            window: config.draft_window_k,
            max_new_tokens: config.max_new_tokens,
            candidates: Vec::with_capacity(config.draft_window_k),
        })
    }

    fn round_length(&self) -> usize {
        let remaining = self.max_new_tokens - self.generated().len();
        self.window.min(remaining - 1)
    }

    fn verify_round(&mut self) -> Result<SerialOutcome, DecodeError> {
        let from = self.verify_state.prefix_length();
        let abandoned_from = self.draft_state.prefix_length();
        let k = self.candidates.len();
        // One extra slot scores the bonus position; its token is never read.
        let mut probe = self.candidates.clone();
        probe.push(TokenId(0));
        let predictions = self.verify.verify_tokens(&self.verify_state, &probe)?;
        let mismatch = find_mismatch(&self.candidates, &predictions[..k])?;
        let (mut accepted, matched) = match mismatch {
            None => {
                let mut a = std::mem::take(&mut self.candidates);
                a.push(predictions[k]);
                (a, k)
            }
            Some(i) => {
                let mut a = self.candidates[..i - 1].to_vec();
                a.push(predictions[i - 1]);
                (a, i - 1)
            }
        };
        self.candidates.clear();
        let remaining = self.max_new_tokens - self.generated().len();
        truncate_accepted(&mut accepted, self.eos_token(), remaining);
        let matched = matched.min(accepted.len());
        let corrected = mismatch.is_some() && accepted.len() > matched;

        self.verify.advance(&mut self.verify_state, &accepted)?;
        self.draft_state.rollback(from + matched)?;
        if accepted.len() > matched {
            self.draft
                .advance(&mut self.draft_state, &accepted[matched..])?;
        }
        Ok(SerialOutcome::Verified {
            from,
            to: from + accepted.len(),
            matched,
            corrected,
            abandoned_from,
            done: is_done(self.generated(), self.eos_token(), self.max_new_tokens),
        })
    }
}

impl<D, V> SerialDecoder for SyncSpeculative<'_, D, V>
where
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    fn next_forward(&self) -> Option<Forward> {
        if is_done(self.generated(), self.eos_token(), self.max_new_tokens) {
            return None;
        }
        let k = self.round_length();
        Some(if self.candidates.len() < k {
            Forward {
                actor: Actor::Draft,
                batch: 1,
            }
        } else {
            Forward {
                actor: Actor::Verify,
                batch: k + 1,
            }
        })
    }

    fn step(&mut self) -> Result<SerialOutcome, DecodeError> {
        if self.candidates.len() < self.round_length() {
            let token = self.draft.next_token(&self.draft_state)?;
            self.draft.advance(&mut self.draft_state, &[token])?;
            self.candidates.push(token);
            Ok(SerialOutcome::Drafted {
                position: self.draft_state.prefix_length(),
            })
        } else {
            self.verify_round()
        }
    }

    fn prompt_length(&self) -> usize {
        self.verify_state.prompt_length()
    }

    fn generated(&self) -> &[TokenId] {
        self.verify_state.generated()
    }

    fn eos_token(&self) -> TokenId {
        self.verify.eos_token()
    }
}

/// Runs a serial decoder to completion, timestamping with the wall clock.
/// With `latency` set, each forward first sleeps for its modeled cost.
pub(crate) fn run_wall<S: SerialDecoder>(
    mut decoder: S,
    latency: Option<&LatencyModel<f64>>,
) -> Result<Run<f64>, DecodeError> {
    let clock = WallClock::start();
    let mut trace = DecodeTrace::new(ClockKind::Wall);
    while let Some(forward) = decoder.next_forward() {
        let start = clock.now_ms();
        if let Some(l) = latency {
            sleep_ms(match forward.actor {
                Actor::Draft => l.draft_cost(forward.batch),
                Actor::Verify => l.verify_cost(forward.batch),
            });
        }
        let outcome = decoder.step()?;
        let end = clock.now_ms().max(start);
        for e in serial_events(outcome, decoder.prompt_length(), start, end) {
            trace.push(e);
        }
    }
    Run::assemble(decoder.generated().to_vec(), decoder.eos_token(), trace)
}

pub fn decode_autoregressive<M: LanguageModel + ?Sized>(
    verify: &M,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<Run<f64>, DecodeError> {
    run_wall(Autoregressive::new(verify, prompt, config)?, None)
}

pub fn decode_speculative_sync<D, V>(
    draft: &D,
    verify: &V,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<Run<f64>, DecodeError>
where
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    run_wall(SyncSpeculative::new(draft, verify, prompt, config)?, None)
}
