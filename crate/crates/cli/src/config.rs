//! TOML run configuration.
//!
//! ```toml
//! [model]
//! kind = "hash_chain"        # hash_chain | scripted | agreement_pair_member
//! seed = 0
//! vocab_size = 1000
//! eos_token = 0
//! rho = 0.8                  # draft/verify agreement probability
//! sample_eos = true
//! # eos_position = 40        # force eos at this absolute position
//! # script_path = "script.json"
//!
//! [decode]
//! max_new_tokens = 512
//! k = 4
//! # max_draft_lead = 8
//! prompt = [1, 2, 3, 4]
//!
//! [latency]
//! draft_base_ms = 0.0
//! draft_per_token_ms = 10.0
//! verify_base_ms = 25.0
//! verify_per_token_ms = 0.0
//! rollback_overhead_ms = 0.0
//!
//! [execution]
//! backend = "simulate"       # simulate | concurrent
//! strategies = ["autoregressive", "sync_speculative", "amusd"]
//! out_dir = "runs"
//! trials = 1
//! inject_sleep = false
//! ```
//!
//! Every field is optional. `script_path` is resolved against the config
//! file's directory and names a JSON array of token ids, entry `i` being the
//! token at absolute position `i + 1`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use specdec::{
    DecodeConfig, EngineKind, LatencyModel, MockKind, MockModel, MockModelSpec, TokenId,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub decode: DecodeSection,
    pub latency: LatencySection,
    pub execution: ExecutionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: MockKind,
    pub seed: u64,
    pub vocab_size: u32,
    pub eos_token: u32,
    pub rho: f64,
    pub sample_eos: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eos_position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: MockKind::HashChain,
            seed: 0,
            vocab_size: 1000,
            eos_token: 0,
            rho: 0.8,
            sample_eos: true,
            eos_position: None,
            script_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub max_new_tokens: usize,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_draft_lead: Option<usize>,
    pub prompt: Vec<u32>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            max_new_tokens: 512,
            k: 4,
            max_draft_lead: None,
            prompt: vec![1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub draft_base_ms: f64,
    pub draft_per_token_ms: f64,
    pub verify_base_ms: f64,
    pub verify_per_token_ms: f64,
    pub rollback_overhead_ms: f64,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencyModel::default().into()
    }
}

impl From<LatencyModel> for LatencySection {
    fn from(l: LatencyModel) -> Self {
        Self {
            draft_base_ms: l.draft_base_ms,
            draft_per_token_ms: l.draft_per_token_ms,
            verify_base_ms: l.verify_base_ms,
            verify_per_token_ms: l.verify_per_token_ms,
            rollback_overhead_ms: l.rollback_overhead_ms,
        }
    }
}

impl From<LatencySection> for LatencyModel {
    fn from(l: LatencySection) -> Self {
        Self {
            draft_base_ms: l.draft_base_ms,
            draft_per_token_ms: l.draft_per_token_ms,
            verify_base_ms: l.verify_base_ms,
            verify_per_token_ms: l.verify_per_token_ms,
            rollback_overhead_ms: l.rollback_overhead_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Concurrent,
    Simulate,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Concurrent => "concurrent",
            Backend::Simulate => "simulate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionSection {
    pub backend: Backend,
    pub strategies: Vec<EngineKind>,
    pub out_dir: PathBuf,
    pub trials: usize,
    /// Concurrent backend only: sleep for each forward's modeled cost.
    pub inject_sleep: bool,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        Self {
            backend: Backend::Simulate,
            strategies: EngineKind::ALL.to_vec(),
            out_dir: PathBuf::from("runs"),
            trials: 1,
            inject_sleep: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads and validates `path`; a relative `script_path` is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config =
            Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(script) = &config.model.script_path {
            if script.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                config.model.script_path = Some(base.join(script));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        ensure!(
            (0.0..=1.0).contains(&m.rho),
            "model.rho must be in [0, 1], got {}",
            m.rho
        );
        ensure!(
            m.vocab_size >= 2,
            "model.vocab_size must be at least 2, got {}",
            m.vocab_size
        );
        ensure!(
            m.eos_token < m.vocab_size,
            "model.eos_token {} is outside the vocabulary of {}",
            m.eos_token,
            m.vocab_size
        );
        if m.kind == MockKind::Scripted && m.script_path.is_none() && m.eos_position.is_none() {
            bail!("model.script_path or model.eos_position is required for kind \"scripted\"");
        }
        if let Some(p) = &m.script_path {
            ensure!(
                p.is_file(),
                "model.script_path {} is not a readable file",
                p.display()
            );
        }

        let d = &self.decode;
        ensure!(
            d.max_new_tokens >= 1,
            "decode.max_new_tokens must be at least 1"
        );
        ensure!(d.k >= 1, "decode.k must be at least 1");
        ensure!(
            d.max_draft_lead != Some(0),
            "decode.max_draft_lead must be at least 1"
        );
        ensure!(!d.prompt.is_empty(), "decode.prompt must not be empty");
        if let Some(t) = d.prompt.iter().find(|&&t| t >= m.vocab_size) {
            bail!(
                "decode.prompt token {t} is outside the vocabulary of {}",
                m.vocab_size
            );
        }

        let l = &self.latency;
        for (name, v) in [
            ("draft_base_ms", l.draft_base_ms),
            ("draft_per_token_ms", l.draft_per_token_ms),
            ("verify_base_ms", l.verify_base_ms),
            ("verify_per_token_ms", l.verify_per_token_ms),
            ("rollback_overhead_ms", l.rollback_overhead_ms),
        ] {
            ensure!(
                v.is_finite() && v >= 0.0,
                "latency.{name} must be a non-negative number, got {v}"
            );
        }
        LatencyModel::from(*l)
            .validate()
            .map_err(|e| anyhow::anyhow!("latency: {e}"))?;

        let e = &self.execution;
        ensure!(
            !e.strategies.is_empty(),
            "execution.strategies must not be empty"
        );
        let unique: BTreeSet<_> = e.strategies.iter().map(|s| s.as_str()).collect();
        ensure!(
            unique.len() == e.strategies.len(),
            "execution.strategies lists a strategy twice"
        );
        ensure!(e.trials >= 1, "execution.trials must be at least 1");
        Ok(())
    }

    pub fn decode_config(&self) -> DecodeConfig {
        let mut c = DecodeConfig::new(self.decode.max_new_tokens)
            .with_window(self.decode.k)
            .with_seed(self.model.seed);
        c.max_draft_lead = self.decode.max_draft_lead;
        c
    }

    pub fn prompt(&self) -> Vec<TokenId> {
        specdec::tokens(&self.decode.prompt)
    }

    /// `(draft, verify)`.
    pub fn build_models(&self) -> Result<(MockModel, MockModel)> {
        let m = &self.model;
        let script = match &m.script_path {
            None => Vec::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read script {}", p.display()))?;
                let ids: Vec<u32> = serde_json::from_str(&text).with_context(|| {
                    format!("script {} is not a JSON array of token ids", p.display())
                })?;
                specdec::tokens(&ids)
            }
        };
        let spec = MockModelSpec {
            kind: m.kind,
            seed: m.seed,
            vocab_size: m.vocab_size,
            eos_token: TokenId(m.eos_token),
            eos_position: m.eos_position,
            sample_eos: m.sample_eos,
            script,
            agreement_rho: Some(m.rho),
        };
        Ok(spec.build_pair()?)
    }
}
