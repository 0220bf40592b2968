//! The budgeted search loop.
//!
//! A run moves through three phases. The init screen prices a grid of
//! starting configurations with static analysis and cleartext simulation
//! only, keeping the cheapest feasible regimes. Calibration spends one
//! encrypted trial per survivor to fit the latency model and picks the
//! measured baseline. Refinement then iterates: propose patches, let the
//! decision policy prune them, admit at most one per iteration through the
//! static and cleartext gates, and spend one encrypted trial on the winner.
//! Encrypted trials never exceed the budget, and every accepted improvement
//! must beat the incumbent's measured latency.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    observations, Backend, EvalError, EvalMode, GateVerdict, Metrics, MockBackend, RecordedBackend,
    TrialOutcome, TrialRequest,
};
use crate::config::{Direction, FheConfig};
use crate::cost::{
    bottleneck_scores, calibrate, BottleneckWeights, CalibrationOutcome, CostCoefficients,
    Observation, BOTTLENECK_TOP_K,
};
use crate::model::{ModelGraph, ModelSummary};
use crate::policy::{
    global_tradeoff_propose, init_propose, layerwise_propose, regime_select, CandidatePatch,
    DecisionPolicy, InitTemplate, OfferedDirection, Phase, PolicyContext, ProposerKind,
    RegimeCandidate, ToolView, TrialSummary, DEFAULT_LOG_N_GRID, DEFAULT_REGIME_KEEP,
};
use crate::simulator::{CalibrationBatch, ClearRunReport};
use crate::trace::{TraceError, TraceRepository};

/// Acceptance thresholds for a run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Largest tolerated end-to-end mean absolute error.
    pub mae_max: f64,
    /// Fewest tolerated bits of output precision.
    pub precision_min_bits: f64,
    /// Largest tolerated per-layer mean absolute error.
    pub layer_mae_max: f64,
    /// Required security level.
    pub security_target_bits: u32,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            mae_max: 1e-2,
            precision_min_bits: 8.0,
            layer_mae_max: 5e-2,
            security_target_bits: 128,
        }
    }
}

/// Which measurement backend a run uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        /// Ground-truth coefficients the mock prices layers with. Defaults
        /// to the seed coefficients.
        #[serde(skip_serializing_if = "Option::is_none")]
        coeffs: Option<CostCoefficients>,
        #[serde(default = "default_noise_amplitude")]
        noise_amplitude: f64,
        #[serde(default)]
        salt: u64,
        #[serde(default = "default_full_factor")]
        full_factor: f64,
    },
    Recorded {
        path: PathBuf,
    },
}

fn default_noise_amplitude() -> f64 {
    0.05
}

fn default_full_factor() -> f64 {
    10.0
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock {
            coeffs: None,
            noise_amplitude: default_noise_amplitude(),
            salt: 0,
            full_factor: default_full_factor(),
        }
    }
}

/// Everything that parameterizes one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub gates: GateConfig,
    /// Hard cap on encrypted trials (light and full combined).
    pub budget: usize,
    /// Regimes kept after the init screen.
    pub phase_a_keep: usize,
    /// Iteration cap for the refinement loop.
    pub max_c_iterations: usize,
    /// Seed for the synthetic evaluation batch.
    pub seed: u64,
    pub batch_samples: usize,
    pub backend: BackendSpec,
    /// Remote decision endpoint; resolved by the caller into a policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_endpoint: Option<String>,
    pub templates: Vec<InitTemplate>,
    pub log_n_grid: Vec<u32>,
    /// Verify the final best with one full-depth encrypted run.
    pub final_full: bool,
    /// Persist the trial ledger here; in memory when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gates: GateConfig::default(),
            budget: 8,
            phase_a_keep: DEFAULT_REGIME_KEEP,
            max_c_iterations: 8,
            seed: 7,
            batch_samples: 4,
            backend: BackendSpec::default(),
            policy_endpoint: None,
            templates: crate::policy::default_templates(),
            log_n_grid: DEFAULT_LOG_N_GRID.to_vec(),
            final_full: false,
            trace_path: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.phase_a_keep == 0 {
            return Err(OptimizeError::InvalidRun(
                "phase_a_keep must be at least 1".into(),
            ));
        }
        if self.budget < self.phase_a_keep {
            return Err(OptimizeError::InvalidRun(format!(
                "budget {} cannot cover {} calibration trials",
                self.budget, self.phase_a_keep
            )));
        }
        if self.templates.is_empty() {
            return Err(OptimizeError::InvalidRun("no templates".into()));
        }
        if self.log_n_grid.is_empty() {
            return Err(OptimizeError::InvalidRun("empty log_n grid".into()));
        }
        if let Some(bad) = self.log_n_grid.iter().find(|&&n| !(12..=16).contains(&n)) {
            return Err(OptimizeError::InvalidRun(format!(
                "log_n {bad} is outside the supported security table (12..=16)"
            )));
        }
        if self.batch_samples == 0 {
            return Err(OptimizeError::InvalidRun(
                "batch_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn batch(&self) -> CalibrationBatch {
        CalibrationBatch {
            seed: self.seed,
            samples: self.batch_samples,
        }
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    /// Encrypted-trial budget or iteration cap ran out.
    BudgetExhausted,
    /// Two consecutive accepted trials failed to improve the best latency.
    Converged,
    /// No starting configuration survived the init screen.
    NoFeasibleRegime,
    /// The proposers had nothing that passed admission.
    NoAdmissibleCandidate,
    /// Every calibration survivor failed its measured gates.
    AllSurvivorsFailedEncrypted,
}

/// One trial as persisted in the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub ordinal: u64,
    /// Logical clock; equals the ordinal so reports are byte-stable.
    pub timestamp: u64,
    pub phase: Phase,
    pub iteration: u32,
    pub mode: EvalMode,
    pub proposer: ProposerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    pub rationale: String,
    pub config: FheConfig,
    pub digest: String,
    pub arch_signature: String,
    pub metrics: Metrics,
    pub gate: GateVerdict,
}

/// The winning configuration and its measured numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestTrial {
    pub ordinal: u64,
    pub digest: String,
    pub config: FheConfig,
    pub latency_seconds: f64,
    pub precision_bits: f64,
    pub mae: f64,
}

/// Outcome of the optional final full-depth verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullCheck {
    pub ordinal: u64,
    pub pass: bool,
    pub latency_seconds: f64,
    /// Full latency strayed more than 25% from the light-mode expectation.
    pub discrepancy: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelSummary,
    pub termination: Termination,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best: Option<BestTrial>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_check: Option<FullCheck>,
    pub encrypted_trials: usize,
    pub total_trials: usize,
    pub iterations: usize,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid run configuration: {0}")]
    InvalidRun(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// The configuration the refinement loop currently stands on, with the
/// artifacts needed to propose and judge moves from it.
#[derive(Debug, Clone)]
pub struct CurrentState {
    pub config: FheConfig,
    pub digest: String,
    pub ordinal: u64,
    pub clear: ClearRunReport,
    pub latency_seconds: f64,
    pub precision_bits: f64,
    pub mae: f64,
}

impl CurrentState {
    fn from_outcome(out: &TrialOutcome) -> Option<Self> {
        let clear = out.clear.clone()?;
        let m = &out.record.metrics;
        Some(CurrentState {
            config: out.record.config.clone(),
            digest: out.record.digest.clone(),
            ordinal: out.record.ordinal,
            clear,
            latency_seconds: m.latency_seconds?,
            precision_bits: m.precision_bits?,
            mae: m.mae?,
        })
    }

    fn as_best(&self) -> BestTrial {
        BestTrial {
            ordinal: self.ordinal,
            digest: self.digest.clone(),
            config: self.config.clone(),
            latency_seconds: self.latency_seconds,
            precision_bits: self.precision_bits,
            mae: self.mae,
        }
    }
}

pub fn build_backend(spec: &BackendSpec) -> Result<Box<dyn Backend>, OptimizeError> {
    match spec {
        BackendSpec::Mock {
            coeffs,
            noise_amplitude,
            salt,
            full_factor,
        } => Ok(Box::new(MockBackend {
            coeffs: (*coeffs).unwrap_or(crate::cost::SEED_COEFFICIENTS),
            noise_amplitude: *noise_amplitude,
            salt: *salt,
            full_factor: *full_factor,
        })),
        BackendSpec::Recorded { path } => Ok(Box::new(RecordedBackend::from_path(path)?)),
    }
}

pub use crate::backend::Evaluator;

fn make_evaluator(run: &RunConfig) -> Result<Evaluator, OptimizeError> {
    let backend = build_backend(&run.backend)?;
    let trace = match &run.trace_path {
        Some(path) => TraceRepository::open(path)?,
        None => TraceRepository::in_memory(),
    };
    Ok(Evaluator::new(backend, run.gates, run.batch(), trace))
}

/// Init screen: static filter, then cleartext simulation, then regime
/// selection. Spends zero encrypted trials.
pub fn phase_a(
    graph: &ModelGraph,
    run: &RunConfig,
    ev: &mut Evaluator,
) -> Result<Vec<RegimeCandidate>, OptimizeError> {
    let proposals = init_propose(
        graph,
        ev.trace(),
        &run.templates,
        &run.log_n_grid,
        run.gates.security_target_bits,
    );
    let mut candidates = Vec::new();
    for proposal in proposals {
        if proposal.config.validate_against(graph).is_err() {
            continue;
        }
        let static_out = ev.run_trial(TrialRequest {
            graph,
            config: &proposal.config,
            mode: EvalMode::StaticOnly,
            phase: Phase::InitScreen,
            iteration: 0,
            proposer: proposal.proposer,
            direction: None,
            rationale: proposal.rationale.clone(),
        })?;
        if !static_out.passed() {
            continue;
        }
        let clear_out = ev.run_trial(TrialRequest {
            graph,
            config: &proposal.config,
            mode: EvalMode::ClearOnly,
            phase: Phase::InitScreen,
            iteration: 0,
            proposer: proposal.proposer,
            direction: None,
            rationale: proposal.rationale.clone(),
        })?;
        let clear = clear_out.clear.as_ref().expect("clear mode ran simulation");
        candidates.push(RegimeCandidate {
            digest: clear_out.record.digest.clone(),
            config: proposal.config.clone(),
            proxy_seconds: clear.proxy_seconds,
            precision_bits: clear.precision_bits,
            gates_pass: clear_out.passed(),
        });
    }
    Ok(regime_select(&candidates, run.phase_a_keep))
}

/// Calibration outcome plus the measured baseline (when any survivor
/// passed its encrypted gates).
pub struct PhaseBOutcome {
    pub calibration: CalibrationOutcome,
    pub base: Option<CurrentState>,
}

/// One light encrypted trial per survivor; fit the latency model on the
/// pooled per-layer measurements; baseline is the fastest gate-passer.
pub fn phase_b(
    graph: &ModelGraph,
    run: &RunConfig,
    ev: &mut Evaluator,
    survivors: &[RegimeCandidate],
) -> Result<PhaseBOutcome, OptimizeError> {
    let mut pooled: Vec<Observation> = Vec::new();
    let mut base: Option<CurrentState> = None;
    for survivor in survivors {
        if ev.encrypted_trials() >= run.budget {
            break;
        }
        let out = ev.run_trial(TrialRequest {
            graph,
            config: &survivor.config,
            mode: EvalMode::FheLight,
            phase: Phase::Calibrate,
            iteration: 0,
            proposer: ProposerKind::HeuristicRegime,
            direction: None,
            rationale: "calibration run for surviving regime".into(),
        })?;
        if let Some(clear) = &out.clear {
            pooled.extend(observations(clear, &out.record.metrics.layer_seconds));
        }
        if out.passed() {
            if let Some(state) = CurrentState::from_outcome(&out) {
                let better = base
                    .as_ref()
                    .map(|b| state.latency_seconds < b.latency_seconds)
                    .unwrap_or(true);
                if better {
                    base = Some(state);
                }
            }
        }
    }
    let calibration = calibrate(&pooled);
    ev.set_coefficients(calibration.coefficients);
    Ok(PhaseBOutcome { calibration, base })
}

struct AdmittedCandidate {
    patch: CandidatePatch,
    clear: ClearRunReport,
    clear_pass: bool,
}

/// Refinement loop state.
struct SearchState {
    current: CurrentState,
    best: CurrentState,
    repair: bool,
    stalled_accepts: u32,
}

const CONVERGENCE_PATIENCE: u32 = 2;
const HISTORY_WINDOW: usize = 20;

fn history_window(ev: &Evaluator) -> Vec<TrialSummary> {
    let records = ev.trace().records();
    let start = records.len().saturating_sub(HISTORY_WINDOW);
    records[start..]
        .iter()
        .map(|r| TrialSummary {
            ordinal: r.ordinal,
            digest: r.digest.clone(),
            mode: r.mode,
            pass: r.gate.pass,
            latency_seconds: r.metrics.latency_seconds,
            precision_bits: r.metrics.precision_bits,
        })
        .collect()
}

enum IterationEnd {
    Continue,
    Terminate(Termination),
}

fn refine_iteration(
    graph: &ModelGraph,
    run: &RunConfig,
    ev: &mut Evaluator,
    policy: &mut dyn DecisionPolicy,
    state: &mut SearchState,
    iteration: u32,
) -> Result<IterationEnd, OptimizeError> {
    let budget_remaining = run.budget.saturating_sub(ev.encrypted_trials());
    if budget_remaining == 0 {
        return Ok(IterationEnd::Terminate(Termination::BudgetExhausted));
    }

    let coeffs = *ev.coefficients();
    let gates = *ev.gates();
    let batch = *ev.batch();
    let view = ToolView {
        graph,
        config: &state.current.config,
        clear: &state.current.clear,
        coeffs: &coeffs,
        gates: &gates,
        batch: &batch,
    };
    let bottlenecks = bottleneck_scores(
        &state.current.clear.profiles,
        &BottleneckWeights::default(),
        BOTTLENECK_TOP_K,
    );

    let mut candidates = global_tradeoff_propose(&view, state.repair);
    candidates.extend(layerwise_propose(&view, &bottlenecks, state.repair));
    for (i, c) in candidates.iter_mut().enumerate() {
        c.id = format!("c{i}");
    }
    if candidates.is_empty() {
        return Ok(IterationEnd::Terminate(Termination::NoAdmissibleCandidate));
    }

    let ctx = PolicyContext {
        phase: Phase::Refine,
        model_summary: graph.summarize(),
        budget_remaining,
        offered: candidates
            .iter()
            .map(|c| OfferedDirection {
                id: c.id.clone(),
                direction: c.direction.clone(),
                predicted_delta: c.predicted_delta,
            })
            .collect(),
        bottlenecks: bottlenecks.iter().map(|(id, _)| id.clone()).collect(),
        history: history_window(ev),
    };
    let decision = policy.choose(&ctx);
    let chosen: Vec<CandidatePatch> = decision
        .chosen
        .iter()
        .filter_map(|id| candidates.iter().find(|c| &c.id == id).cloned())
        .collect();
    if chosen.is_empty() {
        return Ok(IterationEnd::Terminate(Termination::NoAdmissibleCandidate));
    }

    // Admission: static then cleartext gates for every chosen candidate.
    let current_predicted = view.predicted_seconds(&state.current.config);
    let mut admitted: Vec<AdmittedCandidate> = Vec::new();
    for cand in chosen {
        let proposer = decision.proposer_override.unwrap_or(cand.proposer);
        let rationale = if decision.proposer_override.is_some() {
            format!("{} [{}]", cand.rationale, decision.rationale)
        } else {
            cand.rationale.clone()
        };
        let static_out = ev.run_trial(TrialRequest {
            graph,
            config: &cand.config,
            mode: EvalMode::StaticOnly,
            phase: Phase::Refine,
            iteration,
            proposer,
            direction: Some(cand.direction.clone()),
            rationale: rationale.clone(),
        })?;
        if !static_out.passed() {
            continue;
        }
        let clear_out = ev.run_trial(TrialRequest {
            graph,
            config: &cand.config,
            mode: EvalMode::ClearOnly,
            phase: Phase::Refine,
            iteration,
            proposer,
            direction: Some(cand.direction.clone()),
            rationale,
        })?;
        let clear = clear_out.clear.clone().expect("clear mode ran simulation");
        admitted.push(AdmittedCandidate {
            patch: CandidatePatch { proposer, ..cand },
            clear,
            clear_pass: clear_out.passed(),
        });
    }

    let winner = if state.repair {
        // Repair: chase simulated precision; gates may still fail, the
        // measured run decides.
        admitted
            .into_iter()
            .filter(|a| a.clear.precision_bits > state.current.precision_bits)
            .max_by(|a, b| a.clear.precision_bits.total_cmp(&b.clear.precision_bits))
    } else {
        // Normal: among cleartext gate-passers, largest predicted gain.
        admitted
            .into_iter()
            .filter(|a| a.clear_pass)
            .filter_map(|a| {
                let gain = current_predicted? - a.clear.proxy_seconds;
                if gain > 0.0 {
                    Some((a, gain))
                } else {
                    None
                }
            })
            .max_by(|(_, ga), (_, gb)| ga.total_cmp(gb))
            .map(|(a, _)| a)
    };
    let Some(winner) = winner else {
        return Ok(IterationEnd::Terminate(Termination::NoAdmissibleCandidate));
    };

    let out = ev.run_trial(TrialRequest {
        graph,
        config: &winner.patch.config,
        mode: EvalMode::FheLight,
        phase: Phase::Refine,
        iteration,
        proposer: winner.patch.proposer,
        direction: Some(winner.patch.direction.clone()),
        rationale: winner.patch.rationale.clone(),
    })?;

    if out.passed() {
        state.repair = false;
        if let Some(next) = CurrentState::from_outcome(&out) {
            let improved = next.latency_seconds < state.best.latency_seconds;
            if improved {
                state.best = next.clone();
                state.stalled_accepts = 0;
            } else {
                state.stalled_accepts += 1;
            }
            state.current = next;
            if state.stalled_accepts >= CONVERGENCE_PATIENCE {
                return Ok(IterationEnd::Terminate(Termination::Converged));
            }
        }
    } else {
        state.repair = true;
    }
    Ok(IterationEnd::Continue)
}

fn final_full_check(
    graph: &ModelGraph,
    run: &RunConfig,
    ev: &mut Evaluator,
    best: &CurrentState,
) -> Result<Option<FullCheck>, OptimizeError> {
    if ev.encrypted_trials() >= run.budget {
        return Ok(None);
    }
    let full_factor = match &run.backend {
        BackendSpec::Mock { full_factor, .. } => *full_factor,
        BackendSpec::Recorded { .. } => 1.0,
    };
    let out = ev.run_trial(TrialRequest {
        graph,
        config: &best.config,
        mode: EvalMode::FheFull,
        phase: Phase::Refine,
        iteration: 0,
        proposer: ProposerKind::HeuristicRegime,
        direction: None,
        rationale: "final full-depth verification of the best configuration".into(),
    })?;
    let latency = out.record.metrics.latency_seconds.unwrap_or(0.0);
    let expected = best.latency_seconds * full_factor;
    let discrepancy = expected > 0.0 && ((latency - expected) / expected).abs() > 0.25;
    Ok(Some(FullCheck {
        ordinal: out.record.ordinal,
        pass: out.passed(),
        latency_seconds: latency,
        discrepancy,
    }))
}

fn finish(
    graph: &ModelGraph,
    termination: Termination,
    best: Option<BestTrial>,
    calibration: Option<CalibrationOutcome>,
    full_check: Option<FullCheck>,
    iterations: usize,
    ev: Evaluator,
) -> RunReport {
    let encrypted = ev.encrypted_trials();
    let trials = ev.into_trace().records().to_vec();
    RunReport {
        model: graph.summarize(),
        termination,
        best,
        calibration,
        full_check,
        encrypted_trials: encrypted,
        total_trials: trials.len(),
        iterations,
        trials,
    }
}

/// Runs the full search. The policy prunes candidate patches; pass
/// [`crate::policy::HeuristicPolicy`] for the self-contained default.
pub fn optimize(
    graph: &ModelGraph,
    run: &RunConfig,
    policy: &mut dyn DecisionPolicy,
) -> Result<RunReport, OptimizeError> {
    run.validate()?;
    let mut ev = make_evaluator(run)?;

    let survivors = phase_a(graph, run, &mut ev)?;
    if survivors.is_empty() {
        return Ok(finish(
            graph,
            Termination::NoFeasibleRegime,
            None,
            None,
            None,
            0,
            ev,
        ));
    }

    let PhaseBOutcome { calibration, base } = phase_b(graph, run, &mut ev, &survivors)?;
    let Some(base) = base else {
        return Ok(finish(
            graph,
            Termination::AllSurvivorsFailedEncrypted,
            None,
            Some(calibration),
            None,
            0,
            ev,
        ));
    };

    let mut state = SearchState {
        current: base.clone(),
        best: base,
        repair: false,
        stalled_accepts: 0,
    };
    let mut termination = Termination::BudgetExhausted;
    let mut iterations = 0usize;
    for iteration in 1..=run.max_c_iterations {
        match refine_iteration(graph, run, &mut ev, policy, &mut state, iteration as u32)? {
            IterationEnd::Continue => {
                iterations = iteration;
            }
            IterationEnd::Terminate(t) => {
                termination = t;
                break;
            }
        }
    }

    let full_check = if run.final_full {
        final_full_check(graph, run, &mut ev, &state.best)?
    } else {
        None
    };
    let best = match &full_check {
        Some(check) if !check.pass => None,
        _ => Some(state.best.as_best()),
    };
    Ok(finish(
        graph,
        termination,
        best,
        Some(calibration),
        full_check,
        iterations,
        ev,
    ))
}

#[cfg(test)]
pub(crate) mod testdata {
    use std::collections::BTreeMap;

    use super::*;
    use crate::config::{Embedding, GlobalConfig};

    pub(crate) fn small_config() -> FheConfig {
        FheConfig::new(GlobalConfig {
            log_n: 13,
            modulus_chain: vec![60, 40, 40],
            log_scale: 30,
            sigma: 3.2,
            default_embedding: Embedding::Square,
            bootstrap_interval: 1,
            security_target_bits: 128,
        })
    }

    pub(crate) fn sample_record(ordinal: u64, digest: &str) -> TrialRecord {
        TrialRecord {
            ordinal,
            timestamp: ordinal,
            phase: Phase::InitScreen,
            iteration: 0,
            mode: EvalMode::StaticOnly,
            proposer: ProposerKind::HeuristicInit,
            direction: None,
            rationale: "test".into(),
            config: small_config(),
            digest: digest.to_string(),
            arch_signature: "sig".into(),
            metrics: Metrics {
                sec_bits: 128,
                boot_count: None,
                proxy_seconds: None,
                latency_seconds: None,
                layer_seconds: BTreeMap::new(),
                mae: None,
                precision_bits: None,
            },
            gate: GateVerdict {
                pass: false,
                static_ok: true,
                mae_ok: None,
                precision_ok: None,
                layers_ok: None,
                reasons: Vec::new(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::testdata::lenet_json;
    use crate::policy::HeuristicPolicy;
    use crate::trace::ledger_line;

    fn lenet() -> ModelGraph {
        ModelGraph::from_json(lenet_json()).unwrap()
    }

    fn mock_run(budget: usize) -> RunConfig {
        RunConfig {
            budget,
            backend: BackendSpec::Mock {
                coeffs: None,
                noise_amplitude: 0.02,
                salt: 3,
                full_factor: 10.0,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn run_config_validation_catches_bad_budgets() {
        let mut run = RunConfig {
            budget: 1,
            phase_a_keep: 2,
            ..RunConfig::default()
        };
        assert!(matches!(run.validate(), Err(OptimizeError::InvalidRun(_))));
        run.budget = 2;
        run.validate().unwrap();
    }

    #[test]
    fn run_config_parses_with_defaults() {
        let run: RunConfig = serde_json::from_str(r#"{"budget": 5}"#).unwrap();
        assert_eq!(run.budget, 5);
        assert_eq!(run.phase_a_keep, 2);
        assert_eq!(run.templates.len(), 2);
        assert!(matches!(run.backend, BackendSpec::Mock { .. }));

        let run: RunConfig =
            serde_json::from_str(r#"{"backend": {"kind": "recorded", "path": "/tmp/x.ndjson"}}"#)
                .unwrap();
        assert!(matches!(run.backend, BackendSpec::Recorded { .. }));
    }

    #[test]
    fn optimize_stays_within_budget_and_funnels_trials() {
        let graph = lenet();
        let run = mock_run(5);
        let report = optimize(&graph, &run, &mut HeuristicPolicy).unwrap();

        assert!(report.encrypted_trials <= run.budget);
        assert!(report.best.is_some(), "mock run should find a baseline");
        let best = report.best.as_ref().unwrap();
        assert!(best.latency_seconds > 0.0);

        // Funnel: every encrypted trial's digest must appear earlier as a
        // cleartext trial that passed its gates.
        for (i, r) in report.trials.iter().enumerate() {
            if r.mode.is_encrypted() {
                let preceded = report.trials[..i]
                    .iter()
                    .any(|p| p.digest == r.digest && p.mode == EvalMode::ClearOnly && p.gate.pass);
                assert!(
                    preceded,
                    "trial {} lacked a passing cleartext run",
                    r.ordinal
                );
            }
        }

        // Ordinals are dense and the logical clock mirrors them.
        for (i, r) in report.trials.iter().enumerate() {
            assert_eq!(r.ordinal, i as u64);
            assert_eq!(r.timestamp, r.ordinal);
        }

        // The best trial passed its gates.
        let best_record = report
            .trials
            .iter()
            .find(|r| r.ordinal == best.ordinal)
            .unwrap();
        assert!(best_record.gate.pass);
        assert!(best_record.mode.is_encrypted());
    }

    #[test]
    fn optimize_is_deterministic() {
        let graph = lenet();
        let run = mock_run(5);
        let a = optimize(&graph, &run, &mut HeuristicPolicy).unwrap();
        let b = optimize(&graph, &run, &mut HeuristicPolicy).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn tight_budget_stops_after_calibration() {
        let graph = lenet();
        let run = mock_run(2);
        let report = optimize(&graph, &run, &mut HeuristicPolicy).unwrap();
        assert_eq!(report.encrypted_trials, 2);
        assert_eq!(report.termination, Termination::BudgetExhausted);
        assert!(report.best.is_some());
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn infeasible_model_spends_nothing() {
        // Thirty degree-31 activations: depth 150. No chain in the grid
        // can host it at 128-bit security.
        let mut layers = String::new();
        for i in 0..30 {
            if i > 0 {
                layers.push(',');
            }
            layers.push_str(&format!(
                r#"{{"id": "a{i}", "kind": "ActPoly", "act_degree": 31, "act_error": 1e-5}}"#
            ));
        }
        let graph = ModelGraph::from_json(&format!(
            r#"{{"name": "deep-act", "input_shape": [64], "layers": [{layers}]}}"#
        ))
        .unwrap();
        let report = optimize(&graph, &mock_run(5), &mut HeuristicPolicy).unwrap();
        assert_eq!(report.termination, Termination::NoFeasibleRegime);
        assert_eq!(report.encrypted_trials, 0);
        assert!(report.best.is_none());
        assert!(report.trials.iter().all(|t| !t.mode.is_encrypted()));
    }

    #[test]
    fn failing_survivors_terminate_honestly() {
        let graph = lenet();
        // Discover which digests survive the init screen.
        let run = mock_run(4);
        let mut probe = make_evaluator(&run).unwrap();
        let survivors = phase_a(&graph, &run, &mut probe).unwrap();
        assert!(!survivors.is_empty());

        // Record a failing measurement for every survivor.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recorded.ndjson");
        let mut lines = String::new();
        for (i, s) in survivors.iter().enumerate() {
            let trial = crate::backend::RecordedTrial {
                alias: format!("t{i}"),
                digest: s.digest.clone(),
                total_seconds: 5.0,
                layer_seconds: BTreeMap::new(),
                mae: 0.5,
                precision_bits: 1.0,
            };
            lines.push_str(&ledger_line(&trial).unwrap());
            lines.push('\n');
        }
        std::fs::write(&path, lines).unwrap();

        let recorded_run = RunConfig {
            backend: BackendSpec::Recorded { path },
            ..run
        };
        let report = optimize(&graph, &recorded_run, &mut HeuristicPolicy).unwrap();
        assert_eq!(report.termination, Termination::AllSurvivorsFailedEncrypted);
        assert!(report.best.is_none());
        assert_eq!(report.encrypted_trials, survivors.len());
        assert!(report.calibration.is_some());
    }

    #[test]
    fn final_full_verification_runs_within_budget() {
        let graph = lenet();
        let mut run = mock_run(6);
        run.final_full = true;
        run.max_c_iterations = 2;
        let report = optimize(&graph, &run, &mut HeuristicPolicy).unwrap();
        if let Some(check) = &report.full_check {
            assert!(check.pass);
            assert!(!check.discrepancy);
            assert!(report.encrypted_trials <= run.budget);
            let full_trials: Vec<_> = report
                .trials
                .iter()
                .filter(|t| t.mode == EvalMode::FheFull)
                .collect();
            assert_eq!(full_trials.len(), 1);
        } else {
            // Budget was consumed before the check; that is a legal outcome.
            assert_eq!(report.encrypted_trials, run.budget);
        }
    }
}
