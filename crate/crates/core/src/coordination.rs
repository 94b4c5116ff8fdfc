//! Shared decode state between the draft and verify loops.
//!
//! The draft buffer `D` and verified buffer `V` each have exactly one writer.
//! Writership is carried by two non-cloneable capability handles,
//! [`DraftPort`] and [`VerifyPort`], handed out once when the state is
//! created. Tokens are stored before the matching position counter is
//! published with `Release`; readers load the counter with `Acquire`, so a
//! reader that observes position `n` can read every token up to `n`.
//!
//! Positions are absolute token counts: `p_d = prompt_length + |D|` and
//! `p_v = prompt_length + |V|`. The token at absolute position `p`
//! (1-based) lives at buffer index `p - prompt_length - 1`.
//!
//! Rollback handshake: the verify loop publishes the correction token into
//! `V`, then raises `R` with the target position. It does nothing else until
//! the draft loop acknowledges by cropping its model state, mirroring the
//! correction into `D`, resetting `p_d` to the target and clearing `R`.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::model::{LanguageModel, ModelError, ModelState, TokenId};

/// A broken handshake or buffer contract. Always an engine bug.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol violation: {0}")]
pub struct ProtocolViolation(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoordinationError {
    #[error(transparent)]
    Protocol(#[from] ProtocolViolation),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn violation<T>(msg: impl Into<String>) -> Result<T, ProtocolViolation> {
    Err(ProtocolViolation(msg.into()))
}

/// Rollback raised by the verify loop after a mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RollbackRequest {
    /// Absolute position of the correction token, equal to `p_v` when raised.
    pub target: usize,
    pub correction_token: TokenId,
}

/// Result of a completed acknowledgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RollbackAck {
    pub target: usize,
    /// Draft frontier before the crop.
    pub abandoned_from: usize,
}

/// Point-in-time view of the counters, for observers and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Snapshot {
    pub p_d: usize,
    pub p_v: usize,
    pub rollback: Option<usize>,
    pub complete: bool,
}

#[derive(Debug)]
struct TokenBuffer {
    slots: Box<[AtomicU32]>,
}

impl TokenBuffer {
    fn new(capacity: usize) -> Self {
        Self {
            slots: (0..capacity).map(|_| AtomicU32::new(0)).collect(),
        }
    }

    fn capacity(&self) -> usize {
        self.slots.len()
    }

    fn store(&self, index: usize, token: TokenId) {
        self.slots[index].store(token.0, Ordering::Relaxed);
    }

    fn load(&self, index: usize) -> TokenId {
        TokenId(self.slots[index].load(Ordering::Relaxed))
    }

    fn read(&self, from: usize, to: usize) -> Vec<TokenId> {
        (from..to).map(|i| self.load(i)).collect()
    }
}

/// The coordination record: `D`, `V`, `p_d`, `p_v`, `R` and the completion
/// flag.
#[derive(Debug)]
pub struct SharedDecodeState {
    prompt_length: usize,
    max_new_tokens: usize,
    draft: TokenBuffer,
    verified: TokenBuffer,
    p_d: AtomicUsize,
    p_v: AtomicUsize,
    // 0 means no rollback pending; targets are always > prompt_length >= 1.
    rollback_target: AtomicUsize,
    correction: AtomicU32,
    complete: AtomicBool,
    audit: bool,
}

impl SharedDecodeState {
    /// Creates the state and its two writer handles. Both buffers hold at
    /// most `max_new_tokens` tokens.
    ///
    /// With `audit` set, every acknowledgment re-checks `D[1..p_d] ==
    /// V[1..p_v]` and reports a violation on mismatch.
    pub fn new(
        prompt_length: usize,
        max_new_tokens: usize,
        audit: bool,
    ) -> (Arc<Self>, DraftPort, VerifyPort) {
        assert!(prompt_length >= 1, "prompt must not be empty");
        let shared = Arc::new(Self {
            prompt_length,
            max_new_tokens,
            draft: TokenBuffer::new(max_new_tokens),
            verified: TokenBuffer::new(max_new_tokens),
            p_d: AtomicUsize::new(prompt_length),
            p_v: AtomicUsize::new(prompt_length),
            rollback_target: AtomicUsize::new(0),
            correction: AtomicU32::new(0),
            complete: AtomicBool::new(false),
            audit,
        });
        let draft = DraftPort {
            shared: Arc::clone(&shared),
        };
        let verify = VerifyPort {
            shared: Arc::clone(&shared),
        };
        (shared, draft, verify)
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_length
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    pub fn p_d(&self) -> usize {
        self.p_d.load(Ordering::Acquire)
    }

    pub fn p_v(&self) -> usize {
        self.p_v.load(Ordering::Acquire)
    }

    pub fn pending_rollback(&self) -> Option<RollbackRequest> {
        match self.rollback_target.load(Ordering::Acquire) {
            0 => None,
            target => Some(RollbackRequest {
                target,
                correction_token: TokenId(self.correction.load(Ordering::Relaxed)),
            }),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.complete.load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            p_d: self.p_d(),
            p_v: self.p_v(),
            rollback: self.pending_rollback().map(|r| r.target),
            complete: self.is_complete(),
        }
    }

    fn index(&self, position: usize) -> usize {
        position - self.prompt_length - 1
    }

    /// Draft token at absolute `position`, if published.
    pub fn draft_token_at(&self, position: usize) -> Option<TokenId> {
        (position > self.prompt_length && position <= self.p_d())
            .then(|| self.draft.load(self.index(position)))
    }

    /// Draft tokens published so far (`D[1..p_d]`).
    pub fn draft_tokens(&self) -> Vec<TokenId> {
        let p_d = self.p_d();
        self.draft.read(0, p_d - self.prompt_length)
    }

    /// Verified tokens published so far (`V[1..p_v]`).
    pub fn verified_tokens(&self) -> Vec<TokenId> {
        let p_v = self.p_v();
        self.verified.read(0, p_v - self.prompt_length)
    }
}

/// Writer handle for `D`, owned by the draft loop.
#[derive(Debug)]
pub struct DraftPort {
    shared: Arc<SharedDecodeState>,
}

/// What the draft loop should do next, in priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftPlan {
    Stop,
    Rollback(RollbackRequest),
    Idle,
    Generate,
}

impl DraftPort {
    pub fn shared(&self) -> &SharedDecodeState {
        &self.shared
    }

    /// Draft lead over the verified frontier.
    pub fn lead(&self) -> usize {
        self.shared.p_d().saturating_sub(self.shared.p_v())
    }

    /// `D` already holds `max_new_tokens` tokens; drafting further could
    /// never be verified.
    pub fn is_full(&self) -> bool {
        self.shared.p_d() - self.shared.prompt_length >= self.shared.max_new_tokens
    }

    pub fn plan(&self, max_lead: Option<usize>) -> DraftPlan {
        if self.shared.is_complete() {
            DraftPlan::Stop
        } else if let Some(req) = self.shared.pending_rollback() {
            DraftPlan::Rollback(req)
        } else if self.is_full() || max_lead.is_some_and(|cap| self.lead() >= cap) {
            DraftPlan::Idle
        } else {
            DraftPlan::Generate
        }
    }

    /// Appends `token` at `p_d + 1`, then publishes the new `p_d`.
    pub fn publish_draft_token(&mut self, token: TokenId) -> Result<usize, ProtocolViolation> {
        let s = &*self.shared;
        let p_d = s.p_d.load(Ordering::Relaxed);
        if p_d - s.prompt_length >= s.draft.capacity() {
            return violation(format!("draft buffer full at position {p_d}"));
        }
        s.draft.store(p_d - s.prompt_length, token);
        s.p_d.store(p_d + 1, Ordering::Release);
        Ok(p_d + 1)
    }

    /// Completes a pending rollback: crops `state` to `target - 1`, feeds it
    /// the correction token, mirrors the correction into `D` and resets
    /// `p_d` to `target` before clearing `R`.
    pub fn acknowledge_rollback<M: LanguageModel + ?Sized>(
        &mut self,
        model: &M,
        state: &mut ModelState,
    ) -> Result<RollbackAck, CoordinationError> {
        let s = &*self.shared;
        let Some(req) = s.pending_rollback() else {
            return Err(ProtocolViolation("acknowledge without pending rollback".into()).into());
        };
        let abandoned_from = s.p_d.load(Ordering::Relaxed);
        if req.target > abandoned_from || req.target <= s.prompt_length {
            return Err(ProtocolViolation(format!(
                "rollback target {} outside ({}, {abandoned_from}]",
                req.target, s.prompt_length
            ))
            .into());
        }
        state.rollback(req.target - 1)?;
        model.advance(state, &[req.correction_token])?;
        s.draft.store(s.index(req.target), req.correction_token);
        s.p_d.store(req.target, Ordering::Release);
        if s.audit {
            self.audit_resync(state)?;
        }
        s.rollback_target.store(0, Ordering::Release);
        Ok(RollbackAck {
            target: req.target,
            abandoned_from,
        })
    }

    fn audit_resync(&self, state: &ModelState) -> Result<(), ProtocolViolation> {
        let s = &*self.shared;
        let (p_d, p_v) = (s.p_d(), s.p_v());
        if p_d != p_v {
            return violation(format!("after rollback p_d {p_d} != p_v {p_v}"));
        }
        let d = s.draft_tokens();
        if d != s.verified_tokens() {
            return violation("after rollback D and V prefixes differ");
        }
        if state.generated() != d.as_slice() {
            return violation("after rollback draft state differs from D");
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.shared.is_complete()
    }
}

/// Writer handle for `V`, `R` and the completion flag, owned by the verify
/// loop.
#[derive(Debug)]
pub struct VerifyPort {
    shared: Arc<SharedDecodeState>,
}

impl VerifyPort {
    pub fn shared(&self) -> &SharedDecodeState {
        &self.shared
    }

    pub fn awaiting_ack(&self) -> bool {
        self.shared.pending_rollback().is_some()
    }

    /// Tokens at `(p_v, p_d]` for one observation of `p_d`. Empty means
    /// nothing to verify yet.
    pub fn read_draft_window(&self) -> Result<Vec<TokenId>, ProtocolViolation> {
        let s = &*self.shared;
        if self.awaiting_ack() {
            return violation("draft window read while rollback pending");
        }
        let p_d = s.p_d.load(Ordering::Acquire);
        let p_v = s.p_v.load(Ordering::Relaxed);
        if p_d < p_v {
            return violation(format!("p_d {p_d} behind p_v {p_v} outside handshake"));
        }
        Ok(s.draft.read(p_v - s.prompt_length, p_d - s.prompt_length))
    }

    /// Appends to `V`, then publishes the advanced `p_v`.
    pub fn publish_verified(&mut self, tokens: &[TokenId]) -> Result<usize, ProtocolViolation> {
        let s = &*self.shared;
        if self.awaiting_ack() {
            return violation("verified tokens published while rollback pending");
        }
        let p_v = s.p_v.load(Ordering::Relaxed);
        let base = p_v - s.prompt_length;
        if base + tokens.len() > s.verified.capacity() {
            return violation(format!(
                "verified buffer overflow: {} + {} > {}",
                base,
                tokens.len(),
                s.verified.capacity()
            ));
        }
        for (i, &t) in tokens.iter().enumerate() {
            s.verified.store(base + i, t);
        }
        let p_v = p_v + tokens.len();
        s.p_v.store(p_v, Ordering::Release);
        Ok(p_v)
    }

    /// Raises `R`. The correction must already be the last token of `V`.
    pub fn request_rollback(&mut self, req: RollbackRequest) -> Result<(), ProtocolViolation> {
        let s = &*self.shared;
        if self.awaiting_ack() {
            return violation("rollback requested while another is pending");
        }
        let p_v = s.p_v.load(Ordering::Relaxed);
        if req.target != p_v || req.target <= s.prompt_length {
            return violation(format!("rollback target {} != p_v {p_v}", req.target));
        }
        if s.verified.load(s.index(req.target)) != req.correction_token {
            return violation("correction token not published to V");
        }
        s.correction
            .store(req.correction_token.0, Ordering::Relaxed);
        s.rollback_target.store(req.target, Ordering::Release);
        Ok(())
    }

    pub fn signal_completion(&mut self) {
        self.shared.complete.store(true, Ordering::Release);
    }

    pub fn is_complete(&self) -> bool {
        self.shared.is_complete()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tokens, HashChainModel};

    fn model() -> HashChainModel {
        HashChainModel::new(3, 100, TokenId(0)).unwrap()
    }

    #[test]
    fn publish_advances_p_d() {
        let (shared, mut d, _v) = SharedDecodeState::new(10, 8, true);
        assert_eq!(d.publish_draft_token(TokenId(7)).unwrap(), 11);
        assert_eq!(shared.p_d(), 11);
        assert_eq!(shared.draft_token_at(11), Some(TokenId(7)));
        assert_eq!(shared.draft_token_at(12), None);
    }

    #[test]
    fn window_arithmetic() {
        let (_s, mut d, mut v) = SharedDecodeState::new(1, 16, true);
        assert!(v.read_draft_window().unwrap().is_empty());
        for t in 1..=8 {
            d.publish_draft_token(TokenId(t)).unwrap();
        }
        v.publish_verified(&tokens(&[1, 2, 3, 4])).unwrap();
        assert_eq!(v.read_draft_window().unwrap(), tokens(&[5, 6, 7, 8]));
    }

    #[test]
    fn rollback_handshake() {
        let m = model();
        let prompt = tokens(&[1, 2]);
        let (shared, mut d, mut v) = SharedDecodeState::new(2, 16, true);
        let mut state = m.init_state(&prompt).unwrap();
        for t in [10, 11, 12, 13, 14] {
            m.advance(&mut state, &[TokenId(t)]).unwrap();
            d.publish_draft_token(TokenId(t)).unwrap();
        }
        assert_eq!(shared.p_d(), 7);

        // verify accepts 10, 11 and corrects position 5 to 40
        v.publish_verified(&tokens(&[10, 11, 40])).unwrap();
        let req = RollbackRequest {
            target: 5,
            correction_token: TokenId(40),
        };
        v.request_rollback(req).unwrap();
        assert_eq!(d.plan(None), DraftPlan::Rollback(req));
        assert!(v.read_draft_window().is_err());
        assert!(v.publish_verified(&tokens(&[1])).is_err());
        assert!(v.request_rollback(req).is_err());

        let ack = d.acknowledge_rollback(&m, &mut state).unwrap();
        assert_eq!(ack.target, 5);
        assert_eq!(ack.abandoned_from, 7);
        assert_eq!(shared.p_d(), 5);
        assert_eq!(shared.draft_tokens(), shared.verified_tokens());
        assert_eq!(state.generated(), tokens(&[10, 11, 40]).as_slice());
        assert!(shared.pending_rollback().is_none());
        assert!(v.read_draft_window().unwrap().is_empty());
    }

    #[test]
    fn ack_without_request_is_violation() {
        let m = model();
        let (_s, mut d, _v) = SharedDecodeState::new(1, 4, false);
        let mut state = m.init_state(&tokens(&[1])).unwrap();
        assert!(matches!(
            d.acknowledge_rollback(&m, &mut state),
            Err(CoordinationError::Protocol(_))
        ));
    }

    #[test]
    fn request_needs_published_correction() {
        let (_s, mut d, mut v) = SharedDecodeState::new(1, 4, false);
        d.publish_draft_token(TokenId(5)).unwrap();
        v.publish_verified(&tokens(&[6])).unwrap();
        let bad = RollbackRequest {
            target: 2,
            correction_token: TokenId(9),
        };
        assert!(v.request_rollback(bad).is_err());
    }

    #[test]
    fn capacity_is_enforced() {
        let (_s, mut d, mut v) = SharedDecodeState::new(1, 2, false);
        d.publish_draft_token(TokenId(1)).unwrap();
        d.publish_draft_token(TokenId(1)).unwrap();
        assert!(d.is_full());
        assert_eq!(d.plan(None), DraftPlan::Idle);
        assert!(d.publish_draft_token(TokenId(1)).is_err());
        assert!(v.publish_verified(&tokens(&[1, 2, 3])).is_err());
    }

    #[test]
    fn plan_priorities() {
        let (_s, mut d, mut v) = SharedDecodeState::new(1, 8, false);
        assert_eq!(d.plan(Some(1)), DraftPlan::Generate);
        d.publish_draft_token(TokenId(1)).unwrap();
        assert_eq!(d.plan(Some(1)), DraftPlan::Idle);
        assert_eq!(d.plan(None), DraftPlan::Generate);
        v.publish_verified(&tokens(&[2])).unwrap();
        v.request_rollback(RollbackRequest {
            target: 2,
            correction_token: TokenId(2),
        })
        .unwrap();
        assert!(matches!(d.plan(Some(1)), DraftPlan::Rollback(_)));
        v.signal_completion();
        assert_eq!(d.plan(None), DraftPlan::Stop);
    }

    #[test]
    fn publication_ordering_across_threads() {
        // The reader must never observe p_d ahead of the readable tokens.
        const N: usize = 20_000;
        let (shared, mut d, _v) = SharedDecodeState::new(1, N, false);
        std::thread::scope(|scope| {
            scope.spawn(move || {
                for i in 0..N {
                    d.publish_draft_token(TokenId(i as u32 + 1)).unwrap();
                }
            });
            let mut seen = 1;
            while seen < N + 1 {
                let p_d = shared.p_d();
                for pos in seen + 1..=p_d {
                    assert_eq!(shared.draft_token_at(pos), Some(TokenId((pos - 1) as u32)));
                }
                seen = p_d;
            }
        });
    }
}
