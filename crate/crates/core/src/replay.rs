//! Scenario replay against recorded measurements.
//!
//! A scenario file names a model, gates, and an ordered list of candidate
//! configurations with the verdict each one historically received. Replay
//! runs every candidate through the real evaluator, with the encrypted
//! measurements supplied by the recorded backend, and reports where the
//! reproduced verdicts agree with the expected ones.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{EvalError, EvalMode, Evaluator, RecordedBackend, TrialRequest};
use crate::config::{config_digest, ConfigError, FheConfig};
use crate::model::{ModelError, ModelGraph, ModelSummary};
use crate::orchestrator::GateConfig;
use crate::policy::{Phase, ProposerKind};
use crate::simulator::CalibrationBatch;
use crate::trace::{TraceError, TraceRepository};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioTrial {
    pub alias: String,
    pub expected_verdict: Verdict,
    pub config: FheConfig,
}

/// On-disk scenario document. The model is embedded so a scenario is
/// self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioDoc {
    pub name: String,
    pub model: serde_json::Value,
    #[serde(default)]
    pub gates: GateConfig,
    #[serde(default)]
    pub batch: CalibrationBatch,
    pub trials: Vec<ScenarioTrial>,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trial {alias}: {source}")]
    Config { alias: String, source: ConfigError },
    #[error(transparent)]
    Ledger(#[from] TraceError),
    #[error("no recorded measurement for trial {alias} (digest {digest})")]
    UnknownAlias { alias: String, digest: String },
    #[error("trial {alias}: recorded ledger knows this configuration as {found}")]
    AliasMismatch { alias: String, found: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One replayed trial compared against its expected verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayTrial {
    pub alias: String,
    pub digest: String,
    pub expected: Verdict,
    pub actual: Verdict,
    pub matched: bool,
    pub latency_seconds: f64,
    pub mae: f64,
    pub precision_bits: f64,
    /// This trial became the running best (passed and ran fastest so far).
    pub became_best: bool,
    /// This trial directly followed one or more failed trials.
    pub after_failure: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayReport {
    pub name: String,
    pub model: ModelSummary,
    pub trials: Vec<ReplayTrial>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_alias: Option<String>,
    pub all_matched: bool,
    pub encrypted_trials: usize,
}

pub fn replay_scenario<P: AsRef<Path>, Q: AsRef<Path>>(
    scenario_path: P,
    recorded_path: Q,
) -> Result<ReplayReport, ReplayError> {
    let text = std::fs::read_to_string(scenario_path)?;
    let doc: ScenarioDoc = serde_json::from_str(&text)?;
    let backend = RecordedBackend::from_path(recorded_path)?;
    replay(&doc, backend)
}

pub fn replay(doc: &ScenarioDoc, backend: RecordedBackend) -> Result<ReplayReport, ReplayError> {
    let graph = ModelGraph::from_value(doc.model.clone())?;
    for trial in &doc.trials {
        trial
            .config
            .validate_against(&graph)
            .map_err(|source| ReplayError::Config {
                alias: trial.alias.clone(),
                source,
            })?;
        let digest = config_digest(&trial.config);
        match backend.alias_of(&digest) {
            None => {
                return Err(ReplayError::UnknownAlias {
                    alias: trial.alias.clone(),
                    digest,
                })
            }
            Some(found) if found != trial.alias => {
                return Err(ReplayError::AliasMismatch {
                    alias: trial.alias.clone(),
                    found: found.to_string(),
                })
            }
            Some(_) => {}
        }
    }

    let mut ev = Evaluator::new(
        Box::new(backend),
        doc.gates,
        doc.batch,
        TraceRepository::in_memory(),
    );

    let mut trials = Vec::new();
    let mut best: Option<(String, f64)> = None;
    let mut failures_pending = false;
    for scenario_trial in &doc.trials {
        let out = ev.run_trial(TrialRequest {
            graph: &graph,
            config: &scenario_trial.config,
            mode: EvalMode::FheLight,
            phase: Phase::Replay,
            iteration: 0,
            proposer: ProposerKind::HeuristicRegime,
            direction: None,
            rationale: format!("replay of trial {}", scenario_trial.alias),
        })?;
        let passed = out.passed();
        let latency = out.record.metrics.latency_seconds.unwrap_or(0.0);
        let actual = if passed {
            Verdict::Accept
        } else {
            Verdict::Reject
        };
        let became_best = passed && best.as_ref().map(|(_, l)| latency < *l).unwrap_or(true);
        if became_best {
            best = Some((scenario_trial.alias.clone(), latency));
        }
        trials.push(ReplayTrial {
            alias: scenario_trial.alias.clone(),
            digest: out.record.digest.clone(),
            expected: scenario_trial.expected_verdict,
            actual,
            matched: actual == scenario_trial.expected_verdict,
            latency_seconds: latency,
            mae: out.record.metrics.mae.unwrap_or(f64::NAN),
            precision_bits: out.record.metrics.precision_bits.unwrap_or(f64::NAN),
            became_best,
            after_failure: failures_pending,
        });
        failures_pending = !passed;
    }

    Ok(ReplayReport {
        name: doc.name.clone(),
        model: graph.summarize(),
        all_matched: trials.iter().all(|t| t.matched),
        best_alias: best.map(|(alias, _)| alias),
        encrypted_trials: ev.encrypted_trials(),
        trials,
    })
}
