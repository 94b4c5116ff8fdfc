//! Deterministic language models and their incremental decoding state.
//!
//! Every model here is a pure function of the token prefix. A model exposes a
//! running 64-bit digest over the prefix (the KV-cache analog) and predicts
//! the next token from that digest and the absolute position being
//! predicted. [`ModelState`] keeps one digest per prefix length so rolling
//! back is a crop of the digest vector.
//!
//! # Hash chain
//!
//! The hash-chain model is defined over SplitMix64's output function
//! `mix(x)`:
//!
//! ```text
//! z = x + 0x9E3779B97F4A7C15            (wrapping)
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! mix(x) = z ^ (z >> 31)
//!
//! h_0 = mix(seed)
//! h_i = mix(h_{i-1} ^ token_i)
//! next = h_n mod vocab_size
//! ```
//!
//! When eos sampling is disabled the draw is `h_n mod (vocab_size - 1)`,
//! shifted up by one when it lands on or above the eos id.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const fn new(value: u32) -> Self {
        Self(value)
    }

    pub const fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for TokenId {
    fn from(value: u32) -> Self {
        Self(value)
    }
}

/// Converts a slice of raw ids.
pub fn tokens(raw: &[u32]) -> Vec<TokenId> {
    raw.iter().copied().map(TokenId).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(
        "invalid rollback to position {position}: prefix length is {prefix_length}, prompt length is {prompt_length}"
    )]
    InvalidRollback {
        position: usize,
        prefix_length: usize,
        prompt_length: usize,
    },
    #[error("state belongs to a different model")]
    OwnershipMismatch,
}

/// SplitMix64 output function.
#[inline]
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Incremental decoding state of one model for one sequence.
///
/// `digests[i]` is the model's digest after absorbing the first `i` tokens,
/// so `digests.len() == tokens.len() + 1` at all times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelState {
    owner: u64,
    prompt_length: usize,
    tokens: Vec<TokenId>,
    digests: Vec<u64>,
}

impl ModelState {
    /// Number of tokens incorporated so far, prompt included.
    pub fn prefix_length(&self) -> usize {
        self.tokens.len()
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_length
    }

    /// The incorporated prefix, prompt included.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Tokens incorporated after the prompt.
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_length..]
    }

    fn digest(&self) -> u64 {
        *self.digests.last().expect("digest vector is never empty")
    }

    /// Crops the state back to `position` tokens.
    pub fn rollback(&mut self, position: usize) -> Result<(), ModelError> {
        if position > self.prefix_length() || position < self.prompt_length {
            return Err(ModelError::InvalidRollback {
                position,
                prefix_length: self.prefix_length(),
                prompt_length: self.prompt_length,
            });
        }
        self.tokens.truncate(position);
        self.digests.truncate(position + 1);
        Ok(())
    }
}

/// A deterministic next-token predictor with greedy semantics.
///
/// Implementors supply the digest recurrence and the prediction rule; the
/// state-handling operations are provided.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> u32;

    fn eos_token(&self) -> TokenId;

    /// Identity used to reject states created by another model.
    fn fingerprint(&self) -> u64;

    fn initial_digest(&self) -> u64;

    fn absorb(&self, digest: u64, token: TokenId) -> u64;

    /// Greedy prediction for the absolute (1-based) `position`, given the
    /// digest of the `position - 1` tokens before it.
    fn predict(&self, digest: u64, position: usize) -> TokenId;

    fn init_state(&self, prompt: &[TokenId]) -> Result<ModelState, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::InvalidInput("prompt must not be empty".into()));
        }
        let mut state = ModelState {
            owner: self.fingerprint(),
            prompt_length: 0,
            tokens: Vec::with_capacity(prompt.len()),
            digests: vec![self.initial_digest()],
        };
        self.advance(&mut state, prompt)?;
        state.prompt_length = prompt.len();
        Ok(state)
    }

    /// Prediction for position `prefix_length + 1`. Does not touch the state.
    fn next_token(&self, state: &ModelState) -> Result<TokenId, ModelError> {
        self.check_owner(state)?;
        Ok(self.predict(state.digest(), state.prefix_length() + 1))
    }

    fn advance(&self, state: &mut ModelState, tokens: &[TokenId]) -> Result<(), ModelError> {
        self.check_owner(state)?;
        if tokens.is_empty() {
            return Err(ModelError::InvalidInput(
                "advance needs at least one token".into(),
            ));
        }
        self.check_range(tokens)?;
        let mut digest = state.digest();
        for &token in tokens {
            digest = self.absorb(digest, token);
            state.tokens.push(token);
            state.digests.push(digest);
        }
        Ok(())
    }

    /// Greedy predictions for each candidate position, conditioning position
    /// `j` on the candidates before it. The state is not mutated.
    fn verify_tokens(
        &self,
        state: &ModelState,
        candidates: &[TokenId],
    ) -> Result<Vec<TokenId>, ModelError> {
        self.check_owner(state)?;
        if candidates.is_empty() {
            return Err(ModelError::InvalidInput(
                "verify needs at least one candidate".into(),
            ));
        }
        self.check_range(candidates)?;
        let mut digest = state.digest();
        let base = state.prefix_length();
        let mut out = Vec::with_capacity(candidates.len());
        for (j, &candidate) in candidates.iter().enumerate() {
            out.push(self.predict(digest, base + j + 1));
            digest = self.absorb(digest, candidate);
        }
        Ok(out)
    }

    fn check_owner(&self, state: &ModelState) -> Result<(), ModelError> {
        if state.owner == self.fingerprint() {
            Ok(())
        } else {
            Err(ModelError::OwnershipMismatch)
        }
    }

    fn check_range(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|t| t.0 >= self.vocab_size()) {
            Some(t) => Err(ModelError::InvalidInput(format!(
                "token {t} outside vocabulary of size {}",
                self.vocab_size()
            ))),
            None => Ok(()),
        }
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> u32 {
        (**self).vocab_size()
    }
    fn eos_token(&self) -> TokenId {
        (**self).eos_token()
    }
    fn fingerprint(&self) -> u64 {
        (**self).fingerprint()
    }
    fn initial_digest(&self) -> u64 {
        (**self).initial_digest()
    }
    fn absorb(&self, digest: u64, token: TokenId) -> u64 {
        (**self).absorb(digest, token)
    }
    fn predict(&self, digest: u64, position: usize) -> TokenId {
        (**self).predict(digest, position)
    }
}

fn check_vocab(vocab_size: u32, eos_token: TokenId) -> Result<(), ModelError> {
    if vocab_size < 2 {
        return Err(ModelError::InvalidInput(format!(
            "vocab_size must be at least 2, got {vocab_size}"
        )));
    }
    if eos_token.0 >= vocab_size {
        return Err(ModelError::InvalidInput(format!(
            "eos_token {eos_token} outside vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

/// The seeded hash-chain model (see the module docs for the recurrence).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashChainModel {
    seed: u64,
    vocab_size: u32,
    eos_token: TokenId,
    sample_eos: bool,
}

impl HashChainModel {
    pub fn new(seed: u64, vocab_size: u32, eos_token: TokenId) -> Result<Self, ModelError> {
        check_vocab(vocab_size, eos_token)?;
        Ok(Self {
            seed,
            vocab_size,
            eos_token,
            sample_eos: true,
        })
    }

    /// Excludes eos from the sampled range so generation only ends at the
    /// length limit.
    pub fn without_eos(mut self) -> Self {
        self.sample_eos = false;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn draw(&self, digest: u64) -> TokenId {
        if self.sample_eos {
            TokenId((digest % u64::from(self.vocab_size)) as u32)
        } else {
            let t = (digest % u64::from(self.vocab_size - 1)) as u32;
            TokenId(if t >= self.eos_token.0 { t + 1 } else { t })
        }
    }
}

impl LanguageModel for HashChainModel {
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }
    fn eos_token(&self) -> TokenId {
        self.eos_token
    }
    fn fingerprint(&self) -> u64 {
        let mut h = mix64(0x4841_5348 ^ self.seed);
        h = mix64(h ^ u64::from(self.vocab_size));
        h = mix64(h ^ u64::from(self.eos_token.0));
        mix64(h ^ u64::from(self.sample_eos))
    }
    fn initial_digest(&self) -> u64 {
        mix64(self.seed)
    }
    fn absorb(&self, digest: u64, token: TokenId) -> u64 {
        mix64(digest ^ u64::from(token.0))
    }
    fn predict(&self, digest: u64, _position: usize) -> TokenId {
        self.draw(digest)
    }
}

/// Replays a table of tokens keyed by absolute (1-based) position, falling
/// back to a hash chain elsewhere. `eos_position` forces eos at that
/// position regardless of the table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedModel {
    table: BTreeMap<usize, TokenId>,
    eos_position: Option<usize>,
    fallback: HashChainModel,
}

impl ScriptedModel {
    pub fn new(
        table: BTreeMap<usize, TokenId>,
        eos_position: Option<usize>,
        fallback: HashChainModel,
    ) -> Result<Self, ModelError> {
        if let Some((pos, tok)) = table.iter().find(|(_, t)| t.0 >= fallback.vocab_size) {
            return Err(ModelError::InvalidInput(format!(
                "scripted token {tok} at position {pos} outside vocabulary"
            )));
        }
        if table.contains_key(&0) || eos_position == Some(0) {
            return Err(ModelError::InvalidInput(
                "scripted positions are 1-based".into(),
            ));
        }
        Ok(Self {
            table,
            eos_position,
            fallback,
        })
    }

    /// Table from a list: entry `i` is the token at absolute position
    /// `i + 1`.
    pub fn from_list(
        list: &[TokenId],
        eos_position: Option<usize>,
        fallback: HashChainModel,
    ) -> Result<Self, ModelError> {
        let table = list.iter().enumerate().map(|(i, &t)| (i + 1, t)).collect();
        Self::new(table, eos_position, fallback)
    }
}

impl LanguageModel for ScriptedModel {
    fn vocab_size(&self) -> u32 {
        self.fallback.vocab_size
    }
    fn eos_token(&self) -> TokenId {
        self.fallback.eos_token
    }
    fn fingerprint(&self) -> u64 {
        let mut h = mix64(0x5343_5250 ^ self.fallback.fingerprint());
        for (&pos, tok) in &self.table {
            h = mix64(h ^ pos as u64);
            h = mix64(h ^ u64::from(tok.0));
        }
        mix64(h ^ self.eos_position.map_or(u64::MAX, |p| p as u64))
    }
    fn initial_digest(&self) -> u64 {
        self.fallback.initial_digest()
    }
    fn absorb(&self, digest: u64, token: TokenId) -> u64 {
        self.fallback.absorb(digest, token)
    }
    fn predict(&self, digest: u64, position: usize) -> TokenId {
        if self.eos_position == Some(position) {
            return self.fallback.eos_token;
        }
        match self.table.get(&position) {
            Some(&t) => t,
            None => self.fallback.predict(digest, position),
        }
    }
}

/// A draft model that reproduces its target's prediction with probability
/// `rho`, decided per prefix by a keyed uniform draw, and otherwise emits a
/// deterministically chosen different token.
///
/// The draft shares the target's digest recurrence, so the agreement draw at
/// a prefix is the same for every `rho`: lowering `rho` only removes
/// agreements.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementDraft {
    target: Box<MockModel>,
    rho: f64,
    salt: u64,
}

impl AgreementDraft {
    pub fn over(target: MockModel, rho: f64, seed: u64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(ModelError::InvalidInput(format!(
                "agreement rho must be in [0, 1], got {rho}"
            )));
        }
        Ok(Self {
            target: Box::new(target),
            rho,
            salt: mix64(seed ^ 0xD2AF_7000_0000_0001),
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// The keyed uniform in `[0, 1)` for the prefix with this digest.
    pub fn agreement_draw(&self, digest: u64) -> f64 {
        (mix64(digest ^ self.salt) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl LanguageModel for AgreementDraft {
    fn vocab_size(&self) -> u32 {
        self.target.vocab_size()
    }
    fn eos_token(&self) -> TokenId {
        self.target.eos_token()
    }
    fn fingerprint(&self) -> u64 {
        let h = mix64(0x4452_4654 ^ self.target.fingerprint());
        mix64(mix64(h ^ self.rho.to_bits()) ^ self.salt)
    }
    fn initial_digest(&self) -> u64 {
        self.target.initial_digest()
    }
    fn absorb(&self, digest: u64, token: TokenId) -> u64 {
        self.target.absorb(digest, token)
    }
    fn predict(&self, digest: u64, position: usize) -> TokenId {
        let verified = self.target.predict(digest, position);
        if self.agreement_draw(digest) < self.rho {
            return verified;
        }
        let vocab = u64::from(self.vocab_size());
        let offset = 1 + mix64(digest ^ self.salt.rotate_left(17)) % (vocab - 1);
        TokenId(((u64::from(verified.0) + offset) % vocab) as u32)
    }
}

/// Which mock a [`MockModelSpec`] builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    HashChain,
    Scripted,
    AgreementPairMember,
}

/// Declarative description of a mock model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModelSpec {
    pub kind: MockKind,
    pub seed: u64,
    pub vocab_size: u32,
    pub eos_token: TokenId,
    #[serde(default)]
    pub eos_position: Option<usize>,
    #[serde(default = "default_true")]
    pub sample_eos: bool,
    /// Scripted table, entry `i` at absolute position `i + 1`.
    #[serde(default)]
    pub script: Vec<TokenId>,
    /// Agreement probability; pair members only.
    #[serde(default)]
    pub agreement_rho: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl MockModelSpec {
    pub fn hash_chain(seed: u64, vocab_size: u32, eos_token: TokenId) -> Self {
        Self {
            kind: MockKind::HashChain,
            seed,
            vocab_size,
            eos_token,
            eos_position: None,
            sample_eos: true,
            script: Vec::new(),
            agreement_rho: None,
        }
    }

    fn base(&self) -> Result<HashChainModel, ModelError> {
        let m = HashChainModel::new(self.seed, self.vocab_size, self.eos_token)?;
        Ok(if self.sample_eos { m } else { m.without_eos() })
    }

    /// Builds the described verify-side model. For a pair member
    /// this is the pair's verify model; use [`MockModelSpec::build_pair`]
    /// for both halves.
    pub fn build(&self) -> Result<MockModel, ModelError> {
        let base = self.base()?;
        match self.kind {
            MockKind::HashChain | MockKind::AgreementPairMember if self.eos_position.is_none() => {
                Ok(MockModel::HashChain(base))
            }
            _ => Ok(MockModel::Scripted(ScriptedModel::from_list(
                &self.script,
                self.eos_position,
                base,
            )?)),
        }
    }

    /// Builds `(draft, verify)` where the draft agrees with the verify model
    /// with probability `agreement_rho` (default 1).
    pub fn build_pair(&self) -> Result<(MockModel, MockModel), ModelError> {
        let verify = self.build()?;
        let rho = self.agreement_rho.unwrap_or(1.0);
        let draft = AgreementDraft::over(verify.clone(), rho, self.seed)?;
        Ok((MockModel::Agreement(draft), verify))
    }
}

/// Any of the mock models, as one concrete type.
#[derive(Debug, Clone, PartialEq)]
pub enum MockModel {
    HashChain(HashChainModel),
    Scripted(ScriptedModel),
    Agreement(AgreementDraft),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            MockModel::HashChain($m) => $e,
            MockModel::Scripted($m) => $e,
            MockModel::Agreement($m) => $e,
        }
    };
}

impl LanguageModel for MockModel {
    fn vocab_size(&self) -> u32 {
        dispatch!(self, m => m.vocab_size())
    }
    fn eos_token(&self) -> TokenId {
        dispatch!(self, m => m.eos_token())
    }
    fn fingerprint(&self) -> u64 {
        dispatch!(self, m => m.fingerprint())
    }
    fn initial_digest(&self) -> u64 {
        dispatch!(self, m => m.initial_digest())
    }
    fn absorb(&self, digest: u64, token: TokenId) -> u64 {
        dispatch!(self, m => m.absorb(digest, token))
    }
    fn predict(&self, digest: u64, position: usize) -> TokenId {
        dispatch!(self, m => m.predict(digest, position))
    }
}

/// A hash-chain verify model and an agreement draft over it.
pub fn make_agreement_pair(
    seed: u64,
    rho: f64,
    vocab_size: u32,
    eos_token: TokenId,
) -> Result<(MockModel, MockModel), ModelError> {
    let verify = MockModel::HashChain(HashChainModel::new(seed, vocab_size, eos_token)?);
    let draft = AgreementDraft::over(verify.clone(), rho, seed)?;
    Ok((MockModel::Agreement(draft), verify))
}

/// Same as [`make_agreement_pair`] with eos excluded from the verify
/// model's sampled range.
pub fn make_agreement_pair_without_eos(
    seed: u64,
    rho: f64,
    vocab_size: u32,
    eos_token: TokenId,
) -> Result<(MockModel, MockModel), ModelError> {
    let verify =
        MockModel::HashChain(HashChainModel::new(seed, vocab_size, eos_token)?.without_eos());
    let draft = AgreementDraft::over(verify.clone(), rho, seed)?;
    Ok((MockModel::Agreement(draft), verify))
}
