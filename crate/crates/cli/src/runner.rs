//! Executes configured strategies and writes per-run artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use specdec::metrics::DecodeStats;
use specdec::{
    compare_runs, Comparison, DecodeError, EngineKind, FinishReason, LatencyModel, MockModel, Run,
    Simulator, ThreadedExecutor, TokenId,
};

use crate::config::{Backend, RunConfig};

pub const FAILED_MARKER: &str = "FAILED";

/// Contents of `tokens.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensFile {
    pub strategy: EngineKind,
    pub backend: Backend,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub finished_by: FinishReason,
}

pub struct Outcome {
    pub id: String,
    pub strategy: EngineKind,
    pub run: Run,
}

pub fn run_id(strategy: EngineKind, trial: usize) -> String {
    format!("{strategy}-{trial}")
}

pub fn run_dir(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join(id)
}

fn backend_run(
    config: &RunConfig,
    models: &(MockModel, MockModel),
    strategy: EngineKind,
) -> Result<Run, DecodeError> {
    let (draft, verify) = models;
    let prompt = config.prompt();
    let decode = config.decode_config();
    let latency = LatencyModel::from(config.latency);
    match config.execution.backend {
        Backend::Simulate => Simulator::new(latency).run(strategy, draft, verify, &prompt, &decode),
        Backend::Concurrent => {
            let mut executor = ThreadedExecutor::default();
            if config.execution.inject_sleep {
                executor = executor.with_latency(latency);
            }
            executor.run(strategy, draft, verify, &prompt, &decode)
        }
    }
}

fn write_artifacts(dir: &Path, config: &RunConfig, strategy: EngineKind, run: &Run) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let tokens = TokensFile {
        strategy,
        backend: config.execution.backend,
        prompt: config.prompt(),
        tokens: run.result.tokens.clone(),
        finished_by: run.result.finished_by,
    };
    fs::write(
        dir.join("tokens.json"),
        serde_json::to_string_pretty(&tokens)? + "\n",
    )?;
    fs::write(dir.join("stats.json"), run.result.stats.to_json()? + "\n")?;
    let mut csv = Vec::new();
    run.trace.write_csv(&mut csv)?;
    fs::write(dir.join("trace.csv"), csv)?;
    let _ = fs::remove_file(dir.join(FAILED_MARKER));
    Ok(())
}

/// Leaves a marker next to whatever the failed run managed to write.
pub fn record_failure(dir: &Path, error: &DecodeError) -> Result<()> {
    fs::create_dir_all(dir)?;
    let kind = if error.is_protocol_violation() {
        "protocol violation"
    } else {
        "decode error"
    };
    fs::write(dir.join(FAILED_MARKER), format!("{kind}: {error}\n"))?;
    Ok(())
}

/// Runs every strategy `trials` times, writing artifacts as it goes. Stops
/// at the first failure; earlier runs' artifacts are kept.
pub fn execute(config: &RunConfig) -> Result<Vec<Outcome>> {
    let out_dir = &config.execution.out_dir;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    fs::write(out_dir.join("config.toml"), config.to_toml()?)?;
    let models = config.build_models()?;
    let mut outcomes = Vec::new();
    for &strategy in &config.execution.strategies {
        for trial in 0..config.execution.trials {
            let id = run_id(strategy, trial);
            let dir = run_dir(out_dir, &id);
            match backend_run(config, &models, strategy) {
                Ok(run) => {
                    write_artifacts(&dir, config, strategy, &run)?;
                    outcomes.push(Outcome { id, strategy, run });
                }
                Err(e) => {
                    record_failure(&dir, &e)?;
                    return Err(anyhow::Error::new(e).context(format!("run {id} failed")));
                }
            }
        }
    }
    Ok(outcomes)
}

/// One line per run.
pub fn summary_line(o: &Outcome) -> String {
    let s = &o.run.result.stats;
    format!(
        "{:<20} {:>5} tokens  {:>9.3} ms/token  {:>4} verify steps  {:>5.2} accepted/step  {:>4} rollbacks  {:>5} wasted drafts",
        o.id,
        s.generated_tokens,
        s.mean_ms_per_token,
        s.verify_steps,
        s.draft_tokens_accepted_per_verify_step,
        s.rollbacks,
        s.wasted_draft_tokens
    )
}

/// Per-strategy comparison in configuration order. With several trials the
/// trial with the median elapsed time represents its strategy.
pub fn comparison(config: &RunConfig, outcomes: &[Outcome]) -> Result<Comparison> {
    let rows: Vec<(String, DecodeStats)> = config
        .execution
        .strategies
        .iter()
        .map(|&strategy| {
            let mut stats: Vec<&DecodeStats> = outcomes
                .iter()
                .filter(|o| o.strategy == strategy)
                .map(|o| &o.run.result.stats)
                .collect();
            stats.sort_by(|a, b| a.elapsed_ms.total_cmp(&b.elapsed_ms));
            (strategy.to_string(), stats[stats.len() / 2].clone())
        })
        .collect();
    Ok(compare_runs(&rows)?)
}

/// Fails unless every run produced the first run's tokens.
pub fn check_identical_outputs(outcomes: &[Outcome]) -> Result<()> {
    let Some(first) = outcomes.first() else {
        bail!("no runs to compare");
    };
    for o in &outcomes[1..] {
        if o.run.tokens() != first.run.tokens() {
            let at = o
                .run
                .tokens()
                .iter()
                .zip(first.run.tokens())
                .position(|(a, b)| a != b)
                .unwrap_or_else(|| o.run.tokens().len().min(first.run.tokens().len()));
            bail!(
                "correctness bug: {} and {} produced different tokens (first difference at generated index {at}); refusing to report speedups",
                first.id,
                o.id
            );
        }
    }
    Ok(())
}

/// Loads a finished run's trace, using its stats to recover the clock.
pub fn load_trace(out_dir: &Path, id: &str) -> Result<specdec::DecodeTrace> {
    let dir = run_dir(out_dir, id);
    let trace_path = dir.join("trace.csv");
    if !trace_path.is_file() {
        bail!("no run {id:?} under {}", out_dir.display());
    }
    let stats: DecodeStats = serde_json::from_str(
        &fs::read_to_string(dir.join("stats.json"))
            .with_context(|| format!("run {id} has no stats.json"))?,
    )
    .with_context(|| format!("run {id} has a malformed stats.json"))?;
    let file = fs::File::open(&trace_path)?;
    Ok(specdec::DecodeTrace::read_csv(stats.clock, file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use specdec::ProtocolViolation;

    #[test]
    fn failure_marker_keeps_partial_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("amusd-0");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("trace.csv"), "partial").unwrap();
        let err = DecodeError::Protocol(ProtocolViolation("verify inside handshake".into()));
        record_failure(&dir, &err).unwrap();
        let marker = fs::read_to_string(dir.join(FAILED_MARKER)).unwrap();
        assert!(marker.starts_with("protocol violation: "), "{marker}");
        assert_eq!(
            fs::read_to_string(dir.join("trace.csv")).unwrap(),
            "partial"
        );
    }
}
