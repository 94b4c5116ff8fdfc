//! The two loop bodies of the asynchronous engine.
//!
//! Each call performs one iteration. Backends decide when to call them: the
//! threaded executor spins them on two threads, the simulator calls them at
//! virtual-clock event times. The verify iteration is split into
//! [`begin_verify`] (window snapshot) and [`finish_verify`] (score and
//! publish) so a backend can place the forward pass between the two.

use crate::coordination::{DraftPlan, DraftPort, RollbackAck, RollbackRequest, VerifyPort};
use crate::model::{LanguageModel, ModelState, TokenId};

use super::{find_mismatch, truncate_accepted, DecodeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftStep {
    Generated { position: usize, token: TokenId },
    RolledBack(RollbackAck),
    Idle,
    Stopped,
}

/// One draft iteration. Priority: completion, pending rollback, lead cap,
/// then generate-and-publish.
pub fn draft_loop_step<M: LanguageModel + ?Sized>(
    port: &mut DraftPort,
    model: &M,
    state: &mut ModelState,
    max_lead: Option<usize>,
) -> Result<DraftStep, DecodeError> {
    let plan = port.plan(max_lead);
    execute_draft_plan(port, model, state, plan)
}

/// Carries out a plan obtained from [`DraftPort::plan`].
///
/// A `Generate` plan publishes even if a rollback was raised after the plan
/// was taken; the next iteration acknowledges it and crops the token.
pub fn execute_draft_plan<M: LanguageModel + ?Sized>(
    port: &mut DraftPort,
    model: &M,
    state: &mut ModelState,
    plan: DraftPlan,
) -> Result<DraftStep, DecodeError> {
    match plan {
        DraftPlan::Stop => Ok(DraftStep::Stopped),
        DraftPlan::Rollback(_) => Ok(DraftStep::RolledBack(
            port.acknowledge_rollback(model, state)?,
        )),
        DraftPlan::Idle => Ok(DraftStep::Idle),
        DraftPlan::Generate => {
            let token = model.next_token(state)?;
            model.advance(state, &[token])?;
            let position = port.publish_draft_token(token)?;
            debug_assert_eq!(position, state.prefix_length());
            Ok(DraftStep::Generated { position, token })
        }
    }
}

/// Outcome of a non-idle verify iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    /// `p_v` before the batch.
    pub from: usize,
    /// Tokens appended to `V`, correction included.
    pub appended: usize,
    /// Draft tokens accepted unchanged.
    pub matched: usize,
    pub corrected: bool,
}

impl Verdict {
    pub fn to(&self) -> usize {
        self.from + self.appended
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyStep {
    Accepted(Verdict),
    Corrected(Verdict),
    Idle,
    /// Completion was signaled after this batch.
    Done(Verdict),
}

/// Snapshot of the draft window `(p_v, p_d]`, or `None` when it is empty.
pub fn begin_verify(port: &VerifyPort) -> Result<Option<Vec<TokenId>>, DecodeError> {
    let window = port.read_draft_window()?;
    Ok((!window.is_empty()).then_some(window))
}

/// Scores `window`, publishes the matched prefix plus the correction token
/// on a mismatch, and then either signals completion or raises the
/// rollback.
pub fn finish_verify<M: LanguageModel + ?Sized>(
    port: &mut VerifyPort,
    model: &M,
    state: &mut ModelState,
    window: &[TokenId],
) -> Result<VerifyStep, DecodeError> {
    let shared = port.shared();
    let prompt = shared.prompt_length();
    let max_new = shared.max_new_tokens();
    let from = shared.p_v();
    debug_assert_eq!(from, state.prefix_length());

    let predictions = model.verify_tokens(state, window)?;
    let mismatch = find_mismatch(window, &predictions)?;
    let (mut accepted, matched) = match mismatch {
        None => (window.to_vec(), window.len()),
        Some(i) => {
            let mut a = window[..i - 1].to_vec();
            a.push(predictions[i - 1]);
            (a, i - 1)
        }
    };
    truncate_accepted(&mut accepted, model.eos_token(), max_new - (from - prompt));
    let matched = matched.min(accepted.len());
    let verdict = Verdict {
        from,
        appended: accepted.len(),
        matched,
        corrected: mismatch.is_some() && accepted.len() > matched,
    };

    let p_v = port.publish_verified(&accepted)?;
    model.advance(state, &accepted)?;

    let last = *accepted.last().expect("window is non-empty");
    if last == model.eos_token() || p_v - prompt >= max_new {
        port.signal_completion();
        return Ok(VerifyStep::Done(verdict));
    }
    if verdict.corrected {
        port.request_rollback(RollbackRequest {
            target: p_v,
            correction_token: last,
        })?;
        Ok(VerifyStep::Corrected(verdict))
    } else {
        Ok(VerifyStep::Accepted(verdict))
    }
}

/// One verify iteration: window snapshot, scoring and publication.
pub fn verify_loop_step<M: LanguageModel + ?Sized>(
    port: &mut VerifyPort,
    model: &M,
    state: &mut ModelState,
) -> Result<VerifyStep, DecodeError> {
    match begin_verify(port)? {
        None => Ok(VerifyStep::Idle),
        Some(window) => finish_verify(port, model, state, &window),
    }
}
