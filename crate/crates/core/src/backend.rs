//! Evaluation modes, measurement backends, and the evaluator that turns a
//! candidate configuration into a verified, gated trial record.
//!
//! Two backends ship with the crate: a deterministic mock that prices the
//! primitive counts with hardware-flavored noise, and a recorded backend
//! that replays measurements captured from real runs. Both sit behind the
//! same trait so the orchestrator cannot tell them apart.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{analyze, AnalyzerError, StaticReport};
use crate::config::{config_digest, Direction, FheConfig};
use crate::cost::{CostCoefficients, Observation, SEED_COEFFICIENTS};
use crate::digest::sha256_hex;
use crate::model::ModelGraph;
use crate::orchestrator::{GateConfig, TrialRecord};
use crate::policy::{Phase, ProposerKind};
use crate::simulator::{
    check_gates, check_measured_gates, simulate, CalibrationBatch, ClearRunReport, SimError,
};
use crate::trace::{ledger_line, read_ledger, TraceError, TraceRepository};

/// How much machinery a trial engages, cheapest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalMode {
    StaticOnly,
    ClearOnly,
    FheLight,
    FheFull,
}

impl EvalMode {
    pub fn is_encrypted(self) -> bool {
        self >= EvalMode::FheLight
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            EvalMode::StaticOnly => "STATIC_ONLY",
            EvalMode::ClearOnly => "CLEAR_ONLY",
            EvalMode::FheLight => "FHE_LIGHT",
            EvalMode::FheFull => "FHE_FULL",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no recorded measurement for configuration digest {digest}")]
    RecordedMiss { digest: String },
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

/// One encrypted execution's measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncryptedRun {
    pub total_seconds: f64,
    pub layer_seconds: BTreeMap<String, f64>,
    pub mae: f64,
    pub precision_bits: f64,
}

pub trait Backend {
    fn name(&self) -> &str;

    fn run_encrypted(
        &self,
        graph: &ModelGraph,
        config: &FheConfig,
        digest: &str,
        clear: &ClearRunReport,
        mode: EvalMode,
    ) -> Result<EncryptedRun, BackendError>;
}

/// Deterministic stand-in for an FHE runtime. Layer latency is the cost
/// model under the backend's private coefficients, perturbed by a hash of
/// (digest, layer, salt) within `noise_amplitude`; FHE_FULL costs
/// `full_factor` times FHE_LIGHT. Accuracy is taken from the cleartext
/// simulation, which is exactly what a mock cannot improve on.
pub struct MockBackend {
    pub coeffs: CostCoefficients,
    pub noise_amplitude: f64,
    pub salt: u64,
    pub full_factor: f64,
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend {
            coeffs: SEED_COEFFICIENTS,
            noise_amplitude: 0.05,
            salt: 0,
            full_factor: 10.0,
        }
    }
}

impl MockBackend {
    /// Uniform value in [-1, 1) derived from the trial identity.
    fn unit_noise(&self, digest: &str, layer_id: &str) -> f64 {
        let hex = sha256_hex(format!("{digest}|{layer_id}|{}", self.salt).as_bytes());
        let word = u64::from_str_radix(&hex[..16], 16).unwrap_or(0);
        (word as f64 / u64::MAX as f64) * 2.0 - 1.0
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn run_encrypted(
        &self,
        _graph: &ModelGraph,
        _config: &FheConfig,
        digest: &str,
        clear: &ClearRunReport,
        mode: EvalMode,
    ) -> Result<EncryptedRun, BackendError> {
        let factor = if mode == EvalMode::FheFull {
            self.full_factor
        } else {
            1.0
        };
        let mut layer_seconds = BTreeMap::new();
        let mut total = 0.0;
        for profile in &clear.profiles {
            let base = self.coeffs.layer_seconds(&profile.perf.counts);
            let eps = self.unit_noise(digest, &profile.layer_id) * self.noise_amplitude;
            let seconds = base * (1.0 + eps) * factor;
            total += seconds;
            layer_seconds.insert(profile.layer_id.clone(), seconds);
        }
        Ok(EncryptedRun {
            total_seconds: total,
            layer_seconds,
            mae: clear.mae,
            precision_bits: clear.precision_bits,
        })
    }
}

/// One measurement captured from a real run, stored in the same
/// checksummed ledger format as the trial trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordedTrial {
    pub alias: String,
    pub digest: String,
    pub total_seconds: f64,
    pub layer_seconds: BTreeMap<String, f64>,
    pub mae: f64,
    pub precision_bits: f64,
}

/// Replays previously captured measurements, keyed by configuration digest.
/// Asking for a configuration that was never measured is an error rather
/// than a guess.
#[derive(Default)]
pub struct RecordedBackend {
    by_digest: BTreeMap<String, RecordedTrial>,
}

impl RecordedBackend {
    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self, TraceError> {
        let records: Vec<RecordedTrial> = read_ledger(path.as_ref())?;
        let mut backend = RecordedBackend::default();
        for r in records {
            backend.insert(r);
        }
        Ok(backend)
    }

    pub fn insert(&mut self, trial: RecordedTrial) {
        self.by_digest.insert(trial.digest.clone(), trial);
    }

    /// Writes trials to a checksummed ledger readable by [`Self::from_path`].
    pub fn write_ledger<P: AsRef<Path>>(
        path: P,
        trials: &[RecordedTrial],
    ) -> Result<(), TraceError> {
        let mut text = String::new();
        for trial in trials {
            text.push_str(&ledger_line(trial)?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(TraceError::Io)
    }

    pub fn alias_of(&self, digest: &str) -> Option<&str> {
        self.by_digest.get(digest).map(|t| t.alias.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_digest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_digest.is_empty()
    }
}

impl Backend for RecordedBackend {
    fn name(&self) -> &str {
        "recorded"
    }

    fn run_encrypted(
        &self,
        _graph: &ModelGraph,
        _config: &FheConfig,
        digest: &str,
        _clear: &ClearRunReport,
        _mode: EvalMode,
    ) -> Result<EncryptedRun, BackendError> {
        let trial = self
            .by_digest
            .get(digest)
            .ok_or_else(|| BackendError::RecordedMiss {
                digest: digest.to_string(),
            })?;
        Ok(EncryptedRun {
            total_seconds: trial.total_seconds,
            layer_seconds: trial.layer_seconds.clone(),
            mae: trial.mae,
            precision_bits: trial.precision_bits,
        })
    }
}

/// Everything measured or derived for one trial, by mode: static analysis
/// always runs; cleartext fields appear from CLEAR_ONLY up; measured fields
/// appear for encrypted modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub sec_bits: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boot_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proxy_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layer_seconds: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_bits: Option<f64>,
}

/// Gate verdict stored on the trial record. `static_ok` covers depth,
/// scale, and security; the numeric flags are present once a run produced
/// accuracy figures to judge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateVerdict {
    pub pass: bool,
    pub static_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_ok: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_ok: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers_ok: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Inputs for one trial.
pub struct TrialRequest<'a> {
    pub graph: &'a ModelGraph,
    pub config: &'a FheConfig,
    pub mode: EvalMode,
    pub phase: Phase,
    pub iteration: u32,
    pub proposer: ProposerKind,
    pub direction: Option<Direction>,
    pub rationale: String,
}

/// A successful trial: the appended record plus the intermediate artifacts
/// callers usually want without re-deriving.
pub struct TrialOutcome {
    pub record: TrialRecord,
    pub static_report: StaticReport,
    pub clear: Option<ClearRunReport>,
}

impl TrialOutcome {
    pub fn passed(&self) -> bool {
        self.record.gate.pass
    }
}

/// Runs trials against a backend, applies the acceptance gates, and appends
/// exactly one record to the trace per successful call.
pub struct Evaluator {
    backend: Box<dyn Backend>,
    gates: GateConfig,
    batch: CalibrationBatch,
    coeffs: CostCoefficients,
    trace: TraceRepository,
    /// Trace length when this evaluator was created; budget accounting
    /// ignores records inherited from earlier sessions.
    session_start: usize,
}

impl Evaluator {
    pub fn new(
        backend: Box<dyn Backend>,
        gates: GateConfig,
        batch: CalibrationBatch,
        trace: TraceRepository,
    ) -> Self {
        let session_start = trace.len();
        Evaluator {
            backend,
            gates,
            batch,
            coeffs: SEED_COEFFICIENTS,
            trace,
            session_start,
        }
    }

    pub fn gates(&self) -> &GateConfig {
        &self.gates
    }

    pub fn batch(&self) -> &CalibrationBatch {
        &self.batch
    }

    pub fn coefficients(&self) -> &CostCoefficients {
        &self.coeffs
    }

    pub fn set_coefficients(&mut self, coeffs: CostCoefficients) {
        self.coeffs = coeffs;
    }

    pub fn trace(&self) -> &TraceRepository {
        &self.trace
    }

    pub fn into_trace(self) -> TraceRepository {
        self.trace
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Encrypted trials this session; the budget drains against this.
    pub fn encrypted_trials(&self) -> usize {
        self.trace.records()[self.session_start..]
            .iter()
            .filter(|r| r.mode.is_encrypted())
            .count()
    }

    pub fn run_trial(&mut self, req: TrialRequest<'_>) -> Result<TrialOutcome, EvalError> {
        let digest = config_digest(req.config);
        let static_report = analyze(req.graph, req.config);
        let static_ok = static_report.pass(self.gates.security_target_bits);

        let mut metrics = Metrics {
            sec_bits: static_report.sec_bits,
            boot_count: None,
            proxy_seconds: None,
            latency_seconds: None,
            layer_seconds: BTreeMap::new(),
            mae: None,
            precision_bits: None,
        };
        let mut gate = GateVerdict {
            pass: static_ok,
            static_ok,
            mae_ok: None,
            precision_ok: None,
            layers_ok: None,
            reasons: static_report.reasons.clone(),
        };

        let mut clear_report = None;
        if req.mode >= EvalMode::ClearOnly {
            let clear = simulate(req.graph, req.config, &self.batch, &self.coeffs)?;
            metrics.boot_count = Some(clear.boot_count);
            metrics.proxy_seconds = Some(clear.proxy_seconds);

            if req.mode.is_encrypted() {
                let run = self
                    .backend
                    .run_encrypted(req.graph, req.config, &digest, &clear, req.mode)?;
                let outcome =
                    check_measured_gates(run.mae, run.precision_bits, &clear, &self.gates);
                metrics.latency_seconds = Some(run.total_seconds);
                metrics.layer_seconds = run.layer_seconds;
                metrics.mae = Some(run.mae);
                metrics.precision_bits = Some(run.precision_bits);
                gate.mae_ok = Some(outcome.mae_ok);
                gate.precision_ok = Some(outcome.precision_ok);
                gate.layers_ok = Some(outcome.layers_ok);
                gate.reasons.extend(outcome.reasons);
                gate.pass = static_ok && outcome.pass;
            } else {
                let outcome = check_gates(&clear, &self.gates);
                metrics.mae = Some(clear.mae);
                metrics.precision_bits = Some(clear.precision_bits);
                gate.mae_ok = Some(outcome.mae_ok);
                gate.precision_ok = Some(outcome.precision_ok);
                gate.layers_ok = Some(outcome.layers_ok);
                gate.reasons.extend(outcome.reasons);
                gate.pass = static_ok && outcome.pass;
            }
            clear_report = Some(clear);
        }

        let ordinal = self.trace.next_ordinal();
        let record = TrialRecord {
            ordinal,
            timestamp: ordinal,
            phase: req.phase,
            iteration: req.iteration,
            mode: req.mode,
            proposer: req.proposer,
            direction: req.direction,
            rationale: req.rationale,
            config: req.config.clone(),
            digest,
            arch_signature: req.graph.signature(),
            metrics,
            gate,
        };
        self.trace.append(record.clone())?;
        Ok(TrialOutcome {
            record,
            static_report,
            clear: clear_report,
        })
    }
}

/// Per-layer calibration rows from one encrypted run: measured seconds
/// joined with the layer's primitive counts. Layers that do no measurable
/// work are skipped; they cannot constrain any coefficient.
pub fn observations(
    clear: &ClearRunReport,
    layer_seconds: &BTreeMap<String, f64>,
) -> Vec<Observation> {
    clear
        .profiles
        .iter()
        .filter_map(|p| {
            let c = &p.perf.counts;
            if c.mul == 0 && c.rot == 0 && c.boot == 0 && c.mem_cost == 0.0 {
                return None;
            }
            layer_seconds.get(&p.layer_id).map(|&seconds| Observation {
                layer_id: p.layer_id.clone(),
                counts: c.clone(),
                seconds,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Embedding, GlobalConfig};
    use crate::model::testdata::lenet_json;

    fn lenet() -> ModelGraph {
        ModelGraph::from_json(lenet_json()).unwrap()
    }

    fn lenet_config() -> FheConfig {
        let mut chain = vec![60u32];
        chain.extend(std::iter::repeat(40).take(16));
        FheConfig::new(GlobalConfig {
            log_n: 15,
            modulus_chain: chain,
            log_scale: 40,
            sigma: 3.2,
            default_embedding: Embedding::Square,
            bootstrap_interval: 1,
            security_target_bits: 128,
        })
    }

    fn evaluator(backend: Box<dyn Backend>) -> Evaluator {
        Evaluator::new(
            backend,
            GateConfig::default(),
            CalibrationBatch::default(),
            TraceRepository::in_memory(),
        )
    }

    fn request<'a>(
        graph: &'a ModelGraph,
        config: &'a FheConfig,
        mode: EvalMode,
    ) -> TrialRequest<'a> {
        TrialRequest {
            graph,
            config,
            mode,
            phase: Phase::InitScreen,
            iteration: 0,
            proposer: ProposerKind::HeuristicInit,
            direction: None,
            rationale: "test".into(),
        }
    }

    #[test]
    fn eval_modes_are_ordered_and_named() {
        assert!(EvalMode::StaticOnly < EvalMode::ClearOnly);
        assert!(EvalMode::ClearOnly < EvalMode::FheLight);
        assert!(EvalMode::FheLight < EvalMode::FheFull);
        assert!(!EvalMode::ClearOnly.is_encrypted());
        assert!(EvalMode::FheLight.is_encrypted());
        assert_eq!(
            serde_json::to_string(&EvalMode::FheLight).unwrap(),
            "\"FHE_LIGHT\""
        );
        let back: EvalMode = serde_json::from_str("\"STATIC_ONLY\"").unwrap();
        assert_eq!(back, EvalMode::StaticOnly);
    }

    #[test]
    fn mock_backend_is_deterministic_and_bounded() {
        let graph = lenet();
        let config = lenet_config();
        let clear = simulate(
            &graph,
            &config,
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        let backend = MockBackend {
            noise_amplitude: 0.05,
            ..MockBackend::default()
        };
        let a = backend
            .run_encrypted(&graph, &config, "digest", &clear, EvalMode::FheLight)
            .unwrap();
        let b = backend
            .run_encrypted(&graph, &config, "digest", &clear, EvalMode::FheLight)
            .unwrap();
        assert_eq!(a.total_seconds.to_bits(), b.total_seconds.to_bits());

        for profile in &clear.profiles {
            let base = SEED_COEFFICIENTS.layer_seconds(&profile.perf.counts);
            let got = a.layer_seconds[&profile.layer_id];
            assert!(
                (got - base).abs() <= 0.05 * base + 1e-12,
                "{}: {got} vs {base}",
                profile.layer_id
            );
        }

        let other = backend
            .run_encrypted(&graph, &config, "other-digest", &clear, EvalMode::FheLight)
            .unwrap();
        assert_ne!(a.total_seconds.to_bits(), other.total_seconds.to_bits());
    }

    #[test]
    fn full_mode_scales_light_latency() {
        let graph = lenet();
        let config = lenet_config();
        let clear = simulate(
            &graph,
            &config,
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        let backend = MockBackend {
            noise_amplitude: 0.0,
            ..MockBackend::default()
        };
        let light = backend
            .run_encrypted(&graph, &config, "d", &clear, EvalMode::FheLight)
            .unwrap();
        let full = backend
            .run_encrypted(&graph, &config, "d", &clear, EvalMode::FheFull)
            .unwrap();
        assert!((full.total_seconds - 10.0 * light.total_seconds).abs() < 1e-9);
    }

    #[test]
    fn recorded_backend_hits_and_misses() {
        let mut backend = RecordedBackend::default();
        backend.insert(RecordedTrial {
            alias: "t0".into(),
            digest: "abc".into(),
            total_seconds: 7.89,
            layer_seconds: BTreeMap::new(),
            mae: 3.0e-4,
            precision_bits: 11.63,
        });
        assert_eq!(backend.alias_of("abc"), Some("t0"));

        let graph = lenet();
        let config = lenet_config();
        let clear = simulate(
            &graph,
            &config,
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        let hit = backend
            .run_encrypted(&graph, &config, "abc", &clear, EvalMode::FheLight)
            .unwrap();
        assert_eq!(hit.total_seconds, 7.89);
        let miss = backend.run_encrypted(&graph, &config, "zzz", &clear, EvalMode::FheLight);
        assert!(matches!(
            miss,
            Err(BackendError::RecordedMiss { digest }) if digest == "zzz"
        ));
    }

    #[test]
    fn run_trial_appends_one_record_per_call() {
        let graph = lenet();
        let config = lenet_config();
        let mut ev = evaluator(Box::new(MockBackend::default()));
        ev.run_trial(request(&graph, &config, EvalMode::StaticOnly))
            .unwrap();
        ev.run_trial(request(&graph, &config, EvalMode::ClearOnly))
            .unwrap();
        ev.run_trial(request(&graph, &config, EvalMode::FheLight))
            .unwrap();
        assert_eq!(ev.trace().len(), 3);
        assert_eq!(ev.encrypted_trials(), 1);
        let ordinals: Vec<u64> = ev.trace().records().iter().map(|r| r.ordinal).collect();
        assert_eq!(ordinals, vec![0, 1, 2]);
        assert!(ev
            .trace()
            .records()
            .iter()
            .all(|r| r.timestamp == r.ordinal));
    }

    #[test]
    fn static_only_blocks_weak_security() {
        let graph = lenet();
        let mut config = lenet_config();
        config.global.log_n = 14;
        let mut ev = evaluator(Box::new(MockBackend::default()));
        let out = ev
            .run_trial(request(&graph, &config, EvalMode::StaticOnly))
            .unwrap();
        assert!(!out.passed());
        assert!(!out.record.gate.static_ok);
        assert!(out.record.metrics.sec_bits < 128);
        assert!(out.record.metrics.latency_seconds.is_none());
    }

    #[test]
    fn measured_accuracy_drives_encrypted_verdict() {
        let graph = lenet();
        let config = lenet_config();
        let digest = config_digest(&config);

        let mut backend = RecordedBackend::default();
        backend.insert(RecordedTrial {
            alias: "bad".into(),
            digest: digest.clone(),
            total_seconds: 6.25,
            layer_seconds: BTreeMap::new(),
            mae: 2.9e-2,
            precision_bits: 5.12,
        });
        let mut ev = evaluator(Box::new(backend));
        let out = ev
            .run_trial(request(&graph, &config, EvalMode::FheLight))
            .unwrap();
        // The cleartext sim passes, but the measured run must rule.
        assert!(!out.passed());
        assert_eq!(out.record.metrics.mae, Some(2.9e-2));
        assert!(!out.record.gate.mae_ok.unwrap());

        let clear = out.clear.unwrap();
        let sim_gate = check_gates(&clear, ev.gates());
        assert!(sim_gate.pass, "sanity: sim alone would have passed");
    }

    #[test]
    fn observations_skip_workless_layers() {
        let graph = lenet();
        let config = lenet_config();
        let clear = simulate(
            &graph,
            &config,
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        let backend = MockBackend::default();
        let run = backend
            .run_encrypted(&graph, &config, "d", &clear, EvalMode::FheLight)
            .unwrap();
        let rows = observations(&clear, &run.layer_seconds);
        assert!(rows.iter().all(|o| o.layer_id != "flat"));
        assert_eq!(rows.len(), graph.layers.len() - 1);
    }
}
