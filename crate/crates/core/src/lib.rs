//! Configuration search for CKKS encrypted inference.
//!
//! The crate turns a small neural-network description into a tuned CKKS
//! configuration by combining cheap static analysis, a cleartext fixed-point
//! simulator, a calibrated latency model, and a strictly budgeted loop of
//! mock or pre-recorded encrypted trials.

pub mod analyzer;
pub mod backend;
pub mod bootstrap;
pub mod config;
pub mod cost;
pub mod model;
pub mod orchestrator;
pub mod policy;
pub mod replay;
pub mod simulator;
pub mod trace;

mod digest;

pub use analyzer::{
    analyze, check_depth, depth_costs, estimate_security, layer_depth_cost, max_q_bits_128,
    AnalyzerError, DepthReport, StaticReport,
};
pub use backend::{
    observations, Backend, EvalError, EvalMode, Evaluator, GateVerdict, Metrics, MockBackend,
    RecordedBackend, RecordedTrial, TrialOutcome, TrialRequest,
};
pub use bootstrap::{
    mask_blocks, schedule, BootstrapPlan, ScheduleError, Segment, BOOT_LEVEL_COST,
};
pub use config::{
    apply_direction, config_digest, enumerate_directions, ConfigError, Direction, DirectionKind,
    Embedding, FheConfig, GlobalConfig, LayerOverride, PatchError, Scope,
};
pub use cost::{
    bottleneck_scores, calibrate, predict, predict_counts, BottleneckWeights, CalibrationOutcome,
    CostCoefficients, Observation, SEED_COEFFICIENTS,
};
pub use model::{LayerOp, LayerSpec, ModelError, ModelGraph, ModelSummary};
pub use orchestrator::{
    optimize, phase_a, phase_b, BackendSpec, BestTrial, GateConfig, OptimizeError, PhaseBOutcome,
    RunConfig, RunReport, Termination, TrialRecord,
};
pub use policy::{
    default_templates, DecisionPolicy, HeuristicPolicy, HttpTransport, InitTemplate,
    OfferedDirection, Phase, PolicyContext, PolicyDecision, PolicyResponse, PolicyTransport,
    ProposerKind, RegimeCandidate, RemotePolicy, TransportError, TrialSummary,
};
pub use replay::{
    replay, replay_scenario, ReplayError, ReplayReport, ReplayTrial, ScenarioDoc, ScenarioTrial,
    Verdict,
};
pub use simulator::{
    check_gates, check_measured_gates, count_primitives, precision_from_mae, simulate,
    CalibrationBatch, ClearRunReport, GateOutcome, LayerProfile, PrimitiveCounts, SimError,
};
pub use trace::{TraceError, TraceRepository};
