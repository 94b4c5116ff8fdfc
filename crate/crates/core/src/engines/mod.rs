//! Decoding strategies.
//!
//! * [`decode_autoregressive`]: one verify-model forward per token. This is
//!   the reference output every other engine must reproduce.
//! * [`decode_speculative_sync`]: draft `k` tokens, verify them in one
//!   batch, keep the matched prefix plus one verify-model token.
//! * [`decode_amusd`]: the draft and verify loops run concurrently over the
//!   shared state in [`crate::coordination`], either on two threads
//!   ([`ThreadedExecutor`]) or interleaved on a virtual clock
//!   ([`crate::simulator::Simulator`]).
//!
//! All engines are expressed as step functions; the wall-clock runners and
//! the simulator drive the same steps.

mod amusd;
mod serial;
mod threaded;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{CoordinationError, ProtocolViolation};
use crate::metrics::{summarize, DecodeStats, DecodeTrace, MetricsError};
use crate::model::{LanguageModel, ModelError, TokenId};
use crate::scalar::Millis;

pub use amusd::{
    begin_verify, draft_loop_step, execute_draft_plan, finish_verify, verify_loop_step, DraftStep,
    Verdict, VerifyStep,
};
pub use serial::{
    decode_autoregressive, decode_speculative_sync, serial_events, Autoregressive, Forward,
    SerialDecoder, SerialOutcome, SyncSpeculative,
};
pub use threaded::{PollPolicy, ThreadedExecutor};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolViolation),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("simulator: {0}")]
    Simulator(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0} worker panicked")]
    WorkerPanicked(&'static str),
    #[error("run aborted by the other worker")]
    Aborted,
}

impl From<CoordinationError> for DecodeError {
    fn from(e: CoordinationError) -> Self {
        match e {
            CoordinationError::Protocol(p) => DecodeError::Protocol(p),
            CoordinationError::Model(m) => DecodeError::Model(m),
        }
    }
}

impl DecodeError {
    pub fn is_protocol_violation(&self) -> bool {
        matches!(self, DecodeError::Protocol(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// Draft length per round of the synchronous baseline.
    #[serde(default = "default_window")]
    pub draft_window_k: usize,
    /// The draft loop idles while `p_d - p_v` is at least this.
    #[serde(default)]
    pub max_draft_lead: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> usize {
    4
}

impl DecodeConfig {
    pub fn new(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            draft_window_k: default_window(),
            max_draft_lead: None,
            seed: 0,
        }
    }

    pub fn with_window(mut self, k: usize) -> Self {
        self.draft_window_k = k;
        self
    }

    pub fn with_max_lead(mut self, lead: usize) -> Self {
        self.max_draft_lead = Some(lead);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_new_tokens == 0 {
            return Err(DecodeError::Config(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if self.draft_window_k == 0 {
            return Err(DecodeError::Config(
                "draft_window_k must be at least 1".into(),
            ));
        }
        if self.max_draft_lead == Some(0) {
            return Err(DecodeError::Config(
                "max_draft_lead must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    LengthLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult<T = f64> {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<TokenId>,
    pub finished_by: FinishReason,
    pub stats: DecodeStats<T>,
}

/// A finished run: its result and the trace the statistics came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Run<T = f64> {
    pub result: DecodeResult<T>,
    pub trace: DecodeTrace<T>,
}

impl<T: Millis> Run<T> {
    pub(crate) fn assemble(
        tokens: Vec<TokenId>,
        eos: TokenId,
        trace: DecodeTrace<T>,
    ) -> Result<Self, DecodeError> {
        let stats = summarize(&trace)?;
        let finished_by = if tokens.last() == Some(&eos) {
            FinishReason::Eos
        } else {
            FinishReason::LengthLimit
        };
        Ok(Self {
            result: DecodeResult {
                tokens,
                finished_by,
                stats,
            },
            trace,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.result.tokens
    }
}

/// 1-based index of the first position where the two sequences differ.
pub fn find_mismatch(
    candidates: &[TokenId],
    predictions: &[TokenId],
) -> Result<Option<usize>, DecodeError> {
    if candidates.len() != predictions.len() {
        return Err(ModelError::InvalidInput(format!(
            "{} candidates vs {} predictions",
            candidates.len(),
            predictions.len()
        ))
        .into());
    }
    Ok(candidates
        .iter()
        .zip(predictions)
        .position(|(c, p)| c != p)
        .map(|i| i + 1))
}

/// Cuts an accepted batch after the first eos and at the remaining budget.
pub(crate) fn truncate_accepted(accepted: &mut Vec<TokenId>, eos: TokenId, remaining: usize) {
    if let Some(i) = accepted.iter().position(|&t| t == eos) {
        accepted.truncate(i + 1);
    }
    accepted.truncate(remaining);
}

/// Backend for the asynchronous engine.
pub trait Executor {
    type Time: Millis;

    fn run_amusd<D, V>(
        &self,
        draft: &D,
        verify: &V,
        prompt: &[TokenId],
        config: &DecodeConfig,
    ) -> Result<Run<Self::Time>, DecodeError>
    where
        D: LanguageModel + ?Sized,
        V: LanguageModel + ?Sized;
}

/// Runs the draft and verify loops under `executor` until the verify loop
/// signals completion.
pub fn decode_amusd<E, D, V>(
    draft: &D,
    verify: &V,
    prompt: &[TokenId],
    config: &DecodeConfig,
    executor: &E,
) -> Result<Run<E::Time>, DecodeError>
where
    E: Executor,
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    config.validate()?;
    check_pair(draft, verify)?;
    executor.run_amusd(draft, verify, prompt, config)
}

pub(crate) fn check_pair<D, V>(draft: &D, verify: &V) -> Result<(), DecodeError>
where
    D: LanguageModel + ?Sized,
    V: LanguageModel + ?Sized,
{
    if draft.vocab_size() != verify.vocab_size() || draft.eos_token() != verify.eos_token() {
        return Err(DecodeError::Config(
            "draft and verify models must share vocabulary and eos token".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokens;

    #[test]
    fn mismatch_positions() {
        let f = |a: &[u32], b: &[u32]| find_mismatch(&tokens(a), &tokens(b)).unwrap();
        assert_eq!(f(&[5, 7, 9], &[5, 7, 9]), None);
        assert_eq!(f(&[5, 7, 9], &[5, 8, 2]), Some(2));
        assert_eq!(f(&[4], &[6]), Some(1));
        assert!(find_mismatch(&tokens(&[1]), &tokens(&[1, 2])).is_err());
    }

    #[test]
    fn truncation_rules() {
        let mut a = tokens(&[3, 0, 4]);
        truncate_accepted(&mut a, TokenId(0), 5);
        assert_eq!(a, tokens(&[3, 0]));
        let mut b = tokens(&[3, 4, 5]);
        truncate_accepted(&mut b, TokenId(0), 2);
        assert_eq!(b, tokens(&[3, 4]));
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::new(0).validate().is_err());
        assert!(DecodeConfig::new(1).with_window(0).validate().is_err());
        assert!(DecodeConfig::new(1).with_max_lead(0).validate().is_err());
        assert!(DecodeConfig::new(1).validate().is_ok());
    }
}
