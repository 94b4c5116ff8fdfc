//! Speculative decoding with an asynchronous draft/verify pair.
//!
//! The draft model proposes tokens into a shared buffer while the verify
//! model checks them in batches; a mismatch truncates the draft's lead and
//! resynchronizes it at the corrected position. Output is always identical
//! to greedy autoregressive decoding with the verify model.
//!
//! Time-valued types are generic over a [`Millis`] scalar. The crate-root
//! aliases fix it to `f64`; the `Exact*` aliases use `Ratio<i64>`.

pub mod coordination;
pub mod engines;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod simulator;

pub use coordination::{
    CoordinationError, DraftPlan, DraftPort, ProtocolViolation, RollbackAck, RollbackRequest,
    SharedDecodeState, Snapshot, VerifyPort,
};
pub use engines::{
    decode_amusd, decode_autoregressive, decode_speculative_sync, DecodeConfig, DecodeError,
    Executor, FinishReason, PollPolicy, ThreadedExecutor,
};
pub use metrics::{
    compare_runs, export_timeline, summarize, Actor, ClockKind, Comparison, ComparisonRow,
    EventKind, MetricsError, TraceEvent,
};
pub use model::{
    make_agreement_pair, make_agreement_pair_without_eos, tokens, AgreementDraft, HashChainModel,
    LanguageModel, MockKind, MockModel, MockModelSpec, ModelError, ModelState, ScriptedModel,
    TokenId,
};
pub use scalar::Millis;
pub use simulator::{simulate, EngineKind, Simulator};

/// Exact rational milliseconds.
pub type ExactMs = num_rational::Ratio<i64>;

pub type LatencyModel = simulator::LatencyModel<f64>;
pub type DecodeTrace = metrics::DecodeTrace<f64>;
pub type DecodeStats = metrics::DecodeStats<f64>;
pub type DecodeResult = engines::DecodeResult<f64>;
pub type Run = engines::Run<f64>;

pub type ExactLatencyModel = simulator::LatencyModel<ExactMs>;
pub type ExactDecodeTrace = metrics::DecodeTrace<ExactMs>;
pub type ExactDecodeStats = metrics::DecodeStats<ExactMs>;
pub type ExactRun = engines::Run<ExactMs>;
pub type ExactSimulator = Simulator<ExactMs>;
