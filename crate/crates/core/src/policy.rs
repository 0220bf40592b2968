//! Candidate generation and selection.
//!
//! Heuristic proposers enumerate initial configurations, global trade-off
//! moves, and per-layer moves on the current bottlenecks. A pluggable
//! decision policy prunes and orders those candidates; the default keeps
//! the heuristic order, and an optional remote policy delegates the choice
//! to an external service with strict response validation and a total
//! fallback to the heuristic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::EvalMode;
use crate::bootstrap;
use crate::config::{
    apply_direction, config_digest, enumerate_directions, Direction, DirectionKind, Embedding,
    FheConfig, GlobalConfig, Scope, SPECIAL_PRIME_BITS,
};
use crate::cost::{predict_counts, CostCoefficients};
use crate::model::{ModelGraph, ModelSummary};
use crate::orchestrator::GateConfig;
use crate::simulator::{count_primitives, simulate, CalibrationBatch, ClearRunReport};
use crate::trace::TraceRepository;

/// Where in the run a trial happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    InitScreen,
    Calibrate,
    Refine,
    Replay,
}

/// Which machinery proposed the configuration a trial ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProposerKind {
    HeuristicInit,
    HeuristicRegime,
    HeuristicGlobal,
    HeuristicLayer,
    RemoteLlm,
    Fallback,
}

/// Starting-point template for the initial grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitTemplate {
    pub name: String,
    pub log_scale: u32,
    pub default_embedding: Embedding,
}

pub fn default_templates() -> Vec<InitTemplate> {
    vec![
        InitTemplate {
            name: "high-precision".into(),
            log_scale: 40,
            default_embedding: Embedding::Diagonal,
        },
        InitTemplate {
            name: "aggressive-packing".into(),
            log_scale: 30,
            default_embedding: Embedding::Hybrid,
        },
    ]
}

pub const DEFAULT_LOG_N_GRID: [u32; 3] = [14, 15, 16];

#[derive(Debug, Clone)]
pub struct InitProposal {
    pub config: FheConfig,
    pub proposer: ProposerKind,
    pub rationale: String,
}

/// Initial candidate grid: every template at every ring size, with a chain
/// sized to the model's depth lower bound plus one spare level. Previously
/// accepted encrypted configurations for the same architecture are
/// prepended as exemplars.
pub fn init_propose(
    graph: &ModelGraph,
    trace: &TraceRepository,
    templates: &[InitTemplate],
    log_n_grid: &[u32],
    security_target_bits: u32,
) -> Vec<InitProposal> {
    let mut proposals: Vec<InitProposal> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();

    let mut exemplars: Vec<&crate::orchestrator::TrialRecord> = trace
        .query_signature(&graph.signature())
        .into_iter()
        .filter(|r| r.mode.is_encrypted() && r.gate.pass)
        .collect();
    exemplars.sort_by(|a, b| {
        let la = a.metrics.latency_seconds.unwrap_or(f64::INFINITY);
        let lb = b.metrics.latency_seconds.unwrap_or(f64::INFINITY);
        la.total_cmp(&lb)
    });
    for record in exemplars.into_iter().take(2) {
        if seen.insert(record.digest.clone()) {
            proposals.push(InitProposal {
                config: record.config.clone(),
                proposer: ProposerKind::HeuristicInit,
                rationale: format!(
                    "exemplar: accepted for this architecture at trial {}",
                    record.ordinal
                ),
            });
        }
    }

    let depth = graph.summarize().depth_lower_bound;
    let chain_len = ((depth + 2) as usize).max(3);
    for &log_n in log_n_grid {
        for template in templates {
            let mut chain = vec![SPECIAL_PRIME_BITS];
            chain.extend(std::iter::repeat(template.log_scale).take(chain_len - 1));
            let config = FheConfig::new(GlobalConfig {
                log_n,
                modulus_chain: chain,
                log_scale: template.log_scale,
                sigma: 3.2,
                default_embedding: template.default_embedding,
                bootstrap_interval: 1,
                security_target_bits,
            });
            if seen.insert(config_digest(&config)) {
                proposals.push(InitProposal {
                    config,
                    proposer: ProposerKind::HeuristicInit,
                    rationale: format!("template {} at log_n {log_n}", template.name),
                });
            }
        }
    }
    proposals
}

/// A cleartext-screened configuration competing to survive the first cut.
#[derive(Debug, Clone)]
pub struct RegimeCandidate {
    pub digest: String,
    pub config: FheConfig,
    pub proxy_seconds: f64,
    pub precision_bits: f64,
    pub gates_pass: bool,
}

pub const DEFAULT_REGIME_KEEP: usize = 2;

/// Keeps the cheapest gate-passing regimes: ascending predicted latency,
/// ties broken by higher precision.
pub fn regime_select(candidates: &[RegimeCandidate], keep: usize) -> Vec<RegimeCandidate> {
    let mut passers: Vec<RegimeCandidate> = candidates
        .iter()
        .filter(|c| c.gates_pass)
        .cloned()
        .collect();
    passers.sort_by(|a, b| {
        a.proxy_seconds
            .total_cmp(&b.proxy_seconds)
            .then(b.precision_bits.total_cmp(&a.precision_bits))
    });
    passers.truncate(keep);
    passers
}

/// Read-only window over the current state that proposers use to price
/// hypothetical moves without touching the budget.
pub struct ToolView<'a> {
    pub graph: &'a ModelGraph,
    pub config: &'a FheConfig,
    pub clear: &'a ClearRunReport,
    pub coeffs: &'a CostCoefficients,
    pub gates: &'a GateConfig,
    pub batch: &'a CalibrationBatch,
}

impl<'a> ToolView<'a> {
    /// Predicted end-to-end seconds for an arbitrary configuration, or
    /// `None` when it cannot schedule.
    pub fn predicted_seconds(&self, config: &FheConfig) -> Option<f64> {
        let costs = crate::analyzer::depth_costs(self.graph, config);
        let plan = bootstrap::schedule(self.graph, config, &costs).ok()?;
        let counts = count_primitives(self.graph, config, &plan);
        match predict_counts(&counts, self.coeffs) {
            Ok((total, _)) => Some(total),
            Err(_) => Some(0.0),
        }
    }

    /// Applies a direction and prices it. Negative delta is an improvement.
    pub fn predicted_delta(&self, direction: &Direction, scope: Scope) -> Option<(FheConfig, f64)> {
        let patched = apply_direction(
            self.config,
            self.graph,
            direction,
            scope,
            &self.clear.plan.depth_mask,
        )
        .ok()?;
        let before = self.predicted_seconds(self.config)?;
        let after = self.predicted_seconds(&patched)?;
        Some((patched, after - before))
    }

    /// Re-simulates a hypothetical configuration for its precision.
    pub fn hypothetical_precision(&self, config: &FheConfig) -> Option<f64> {
        simulate(self.graph, config, self.batch, self.coeffs)
            .ok()
            .map(|r| r.precision_bits)
    }
}

/// One concrete move offered to the decision policy.
#[derive(Debug, Clone)]
pub struct CandidatePatch {
    pub id: String,
    pub direction: Direction,
    pub config: FheConfig,
    pub predicted_delta: f64,
    pub rationale: String,
    pub proposer: ProposerKind,
}

/// Global moves, triggered by state rather than enumerated blindly:
/// spare depth suggests a shorter chain, precision headroom suggests a
/// coarser scale, and bootstraps invite a wider interval unless masked.
/// In repair mode the proposals aim at accuracy instead.
pub fn global_tradeoff_propose(view: &ToolView<'_>, repair: bool) -> Vec<CandidatePatch> {
    let mut out = Vec::new();
    let mut push = |direction: Direction, rationale: String, view: &ToolView<'_>| {
        if let Some((config, delta)) = view.predicted_delta(&direction, Scope::GlobalAgent) {
            out.push(CandidatePatch {
                id: String::new(),
                direction,
                config,
                predicted_delta: delta,
                rationale,
                proposer: ProposerKind::HeuristicGlobal,
            });
        }
    };

    if repair {
        push(
            Direction::global(DirectionKind::TightenScaleOneStep),
            "numeric gates failed: finer scale".into(),
            view,
        );
        push(
            Direction::global(DirectionKind::ExtendModulusTail),
            "numeric gates failed: more level headroom".into(),
            view,
        );
        return out;
    }

    if let Some(slack) = view.clear.plan.min_slack().filter(|&s| s >= 2) {
        push(
            Direction::global(DirectionKind::ShortenModulusTail),
            format!("{slack} unused levels in the slackest segment"),
            view,
        );
    }
    if view.clear.precision_bits >= view.gates.precision_min_bits + 4.0 {
        push(
            Direction::global(DirectionKind::RelaxScaleOneStep),
            format!(
                "{:.1} bits of precision against a floor of {:.1}",
                view.clear.precision_bits, view.gates.precision_min_bits
            ),
            view,
        );
    }
    if view.clear.boot_count > 0 && view.clear.plan.depth_mask.is_empty() {
        push(
            Direction::global(DirectionKind::IncreaseBootstrapInterval),
            format!("{} bootstraps and no masked layers", view.clear.boot_count),
            view,
        );
    }
    out
}

/// Per-layer moves on the current bottlenecks. A move is kept when it is
/// predicted to run faster; in repair mode a simulated precision gain
/// qualifies instead.
pub fn layerwise_propose(
    view: &ToolView<'_>,
    bottlenecks: &[(String, f64)],
    repair: bool,
) -> Vec<CandidatePatch> {
    let bottleneck_ids: Vec<String> = bottlenecks.iter().map(|(id, _)| id.clone()).collect();
    let directions = enumerate_directions(
        view.config,
        view.graph,
        Scope::LayerAgent,
        &bottleneck_ids,
        &view.clear.plan.depth_mask,
    );
    let mut out = Vec::new();
    for direction in directions {
        let Some((config, delta)) = view.predicted_delta(&direction, Scope::LayerAgent) else {
            continue;
        };
        let keep = if delta < 0.0 {
            true
        } else if repair {
            match view.hypothetical_precision(&config) {
                Some(p) => p > view.clear.precision_bits,
                None => false,
            }
        } else {
            false
        };
        if keep {
            let rationale = if delta < 0.0 {
                format!("predicted {:.4}s faster", -delta)
            } else {
                "repair: simulated precision improves".to_string()
            };
            out.push(CandidatePatch {
                id: String::new(),
                direction,
                config,
                predicted_delta: delta,
                rationale,
                proposer: ProposerKind::HeuristicLayer,
            });
        }
    }
    out
}

/// Compressed trial history entry shared with the decision policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSummary {
    pub ordinal: u64,
    pub digest: String,
    pub mode: EvalMode,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_bits: Option<f64>,
}

/// One candidate as offered over the wire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfferedDirection {
    pub id: String,
    pub direction: Direction,
    pub predicted_delta: f64,
}

/// Request sent to (and context given to) a decision policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyContext {
    pub phase: Phase,
    pub model_summary: ModelSummary,
    pub budget_remaining: usize,
    pub offered: Vec<OfferedDirection>,
    pub bottlenecks: Vec<String>,
    pub history: Vec<TrialSummary>,
}

/// Ordered choice among offered candidate ids. `proposer_override` stamps
/// the chosen trials when the decision did not come from the heuristics.
#[derive(Debug, Clone)]
pub struct PolicyDecision {
    pub chosen: Vec<String>,
    pub rationale: String,
    pub proposer_override: Option<ProposerKind>,
}

pub trait DecisionPolicy {
    fn choose(&mut self, ctx: &PolicyContext) -> PolicyDecision;
}

/// Keeps every offered candidate in heuristic order.
#[derive(Debug, Default)]
pub struct HeuristicPolicy;

impl DecisionPolicy for HeuristicPolicy {
    fn choose(&mut self, ctx: &PolicyContext) -> PolicyDecision {
        PolicyDecision {
            chosen: ctx.offered.iter().map(|o| o.id.clone()).collect(),
            rationale: "heuristic order".into(),
            proposer_override: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("policy transport: {0}")]
    Http(String),
    #[error("policy response schema: {0}")]
    Schema(String),
}

/// Wire response from a remote policy. Unknown fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub chosen: Vec<String>,
    #[serde(default)]
    pub rationale: Option<String>,
}

pub trait PolicyTransport {
    fn exchange(&mut self, request: &PolicyContext) -> Result<PolicyResponse, TransportError>;
}

/// Environment variable holding the bearer token for the remote policy.
pub const POLICY_TOKEN_ENV: &str = "CKKSTUNE_POLICY_TOKEN";

/// Blocking HTTP transport: POSTs the context as JSON and reads the
/// decision back.
pub struct HttpTransport {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: String) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| TransportError::Http(e.to_string()))?;
        Ok(HttpTransport { endpoint, client })
    }
}

impl PolicyTransport for HttpTransport {
    fn exchange(&mut self, request: &PolicyContext) -> Result<PolicyResponse, TransportError> {
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Ok(token) = std::env::var(POLICY_TOKEN_ENV) {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .map_err(|e| TransportError::Http(e.to_string()))?;
        if !response.status().is_success() {
            return Err(TransportError::Http(format!(
                "status {}",
                response.status()
            )));
        }
        response
            .json::<PolicyResponse>()
            .map_err(|e| TransportError::Schema(e.to_string()))
    }
}

/// Delegates the choice to a remote service. Any transport failure, any id
/// outside the offered set, or an empty choice falls back to the heuristic
/// order with the [`ProposerKind::Fallback`] stamp; a malformed remote can
/// therefore never inject a configuration that was not offered.
pub struct RemotePolicy<T: PolicyTransport> {
    transport: T,
}

impl<T: PolicyTransport> RemotePolicy<T> {
    pub fn new(transport: T) -> Self {
        RemotePolicy { transport }
    }

    fn fallback(ctx: &PolicyContext, why: String) -> PolicyDecision {
        PolicyDecision {
            chosen: ctx.offered.iter().map(|o| o.id.clone()).collect(),
            rationale: format!("fallback to heuristic order: {why}"),
            proposer_override: Some(ProposerKind::Fallback),
        }
    }
}

impl<T: PolicyTransport> DecisionPolicy for RemotePolicy<T> {
    fn choose(&mut self, ctx: &PolicyContext) -> PolicyDecision {
        let response = match self.transport.exchange(ctx) {
            Ok(r) => r,
            Err(e) => return Self::fallback(ctx, e.to_string()),
        };
        let offered: std::collections::BTreeSet<&str> =
            ctx.offered.iter().map(|o| o.id.as_str()).collect();
        let mut chosen = Vec::new();
        for id in response.chosen {
            if !offered.contains(id.as_str()) {
                return Self::fallback(ctx, format!("unknown candidate id {id:?}"));
            }
            if !chosen.contains(&id) {
                chosen.push(id);
            }
        }
        if chosen.is_empty() {
            return Self::fallback(ctx, "empty choice".into());
        }
        PolicyDecision {
            chosen,
            rationale: response.rationale.unwrap_or_else(|| "remote policy".into()),
            proposer_override: Some(ProposerKind::RemoteLlm),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::SEED_COEFFICIENTS;
    use crate::model::testdata::lenet_json;
    use crate::model::ModelGraph;

    fn lenet() -> ModelGraph {
        ModelGraph::from_json(lenet_json()).unwrap()
    }

    fn wide_config(levels: usize, log_scale: u32, embedding: Embedding) -> FheConfig {
        let mut chain = vec![60u32];
        chain.extend(std::iter::repeat(40).take(levels));
        FheConfig::new(GlobalConfig {
            log_n: 15,
            modulus_chain: chain,
            log_scale,
            sigma: 3.2,
            default_embedding: embedding,
            bootstrap_interval: 1,
            security_target_bits: 128,
        })
    }

    #[test]
    fn init_grid_covers_templates_and_rings() {
        let graph = lenet();
        let trace = TraceRepository::in_memory();
        let proposals = init_propose(
            &graph,
            &trace,
            &default_templates(),
            &DEFAULT_LOG_N_GRID,
            128,
        );
        assert_eq!(proposals.len(), 6);
        for p in &proposals {
            // Depth lower bound 16: one spare level on top.
            assert_eq!(p.config.global.modulus_chain.len(), 18);
            assert_eq!(p.config.global.modulus_chain[0], 60);
            p.config.validate_against(&graph).unwrap();
        }
        let scales: std::collections::BTreeSet<u32> = proposals
            .iter()
            .map(|p| p.config.global.log_scale)
            .collect();
        assert_eq!(scales.into_iter().collect::<Vec<_>>(), vec![30, 40]);
    }

    #[test]
    fn shallow_models_get_a_minimum_chain() {
        let graph = ModelGraph::from_json(
            r#"{"name": "tiny", "input_shape": [4, 4],
                "layers": [{"id": "f", "kind": "Flatten"}]}"#,
        )
        .unwrap();
        let trace = TraceRepository::in_memory();
        let proposals = init_propose(&graph, &trace, &default_templates(), &[14], 128);
        for p in &proposals {
            assert_eq!(p.config.global.modulus_chain.len(), 3);
        }
    }

    #[test]
    fn exemplars_lead_the_proposal_list() {
        let graph = lenet();
        let mut trace = TraceRepository::in_memory();
        let exemplar_config = wide_config(16, 40, Embedding::Square);
        let mut record = crate::orchestrator::testdata::sample_record(0, "ignored");
        record.digest = config_digest(&exemplar_config);
        record.config = exemplar_config.clone();
        record.arch_signature = graph.signature();
        record.mode = EvalMode::FheLight;
        record.gate.pass = true;
        record.metrics.latency_seconds = Some(7.89);
        trace.append(record).unwrap();

        let proposals = init_propose(
            &graph,
            &trace,
            &default_templates(),
            &DEFAULT_LOG_N_GRID,
            128,
        );
        assert_eq!(proposals.len(), 7);
        assert_eq!(
            config_digest(&proposals[0].config),
            config_digest(&exemplar_config)
        );
        assert!(proposals[0].rationale.contains("exemplar"));
    }

    #[test]
    fn regime_select_orders_by_latency_then_precision() {
        let mk = |digest: &str, proxy: f64, precision: f64, pass: bool| RegimeCandidate {
            digest: digest.into(),
            config: wide_config(16, 40, Embedding::Square),
            proxy_seconds: proxy,
            precision_bits: precision,
            gates_pass: pass,
        };
        let picked = regime_select(
            &[
                mk("slow", 9.0, 20.0, true),
                mk("fail", 1.0, 20.0, false),
                mk("fast-low", 3.0, 12.0, true),
                mk("fast-high", 3.0, 18.0, true),
            ],
            2,
        );
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].digest, "fast-high");
        assert_eq!(picked[1].digest, "fast-low");
    }

    fn view_parts(config: &FheConfig) -> (ModelGraph, ClearRunReport) {
        let graph = lenet();
        let clear = simulate(
            &graph,
            config,
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        (graph, clear)
    }

    #[test]
    fn global_proposals_follow_state_triggers() {
        // 17 usable levels against depth 16: no boots, one spare level,
        // and plenty of precision headroom over a low floor.
        let config = wide_config(17, 40, Embedding::Square);
        let (graph, clear) = view_parts(&config);
        let gates = GateConfig {
            precision_min_bits: 2.0,
            ..GateConfig::default()
        };
        let batch = CalibrationBatch::default();
        let view = ToolView {
            graph: &graph,
            config: &config,
            clear: &clear,
            coeffs: &SEED_COEFFICIENTS,
            gates: &gates,
            batch: &batch,
        };
        let candidates = global_tradeoff_propose(&view, false);
        let kinds: Vec<DirectionKind> = candidates.iter().map(|c| c.direction.kind).collect();
        assert!(kinds.contains(&DirectionKind::RelaxScaleOneStep));
        // Slack is exactly 1 (17 usable, depth 16): no shorten offer.
        assert!(!kinds.contains(&DirectionKind::ShortenModulusTail));
        assert!(!kinds.contains(&DirectionKind::IncreaseBootstrapInterval));

        // Two spare levels: shortening shows up and is predicted to help.
        let slack_config = wide_config(18, 40, Embedding::Square);
        let (graph2, clear2) = view_parts(&slack_config);
        let view2 = ToolView {
            graph: &graph2,
            config: &slack_config,
            clear: &clear2,
            coeffs: &SEED_COEFFICIENTS,
            gates: &gates,
            batch: &batch,
        };
        let candidates2 = global_tradeoff_propose(&view2, false);
        let shorten = candidates2
            .iter()
            .find(|c| c.direction.kind == DirectionKind::ShortenModulusTail)
            .expect("shorten should be offered");
        assert!(
            shorten.predicted_delta < 0.0,
            "dropping a level cuts memory cost: {}",
            shorten.predicted_delta
        );
    }

    #[test]
    fn masked_plans_do_not_offer_wider_intervals() {
        // 9 usable levels forces bootstraps on the depth-16 net, and the
        // tight segments mask their layers.
        let config = wide_config(9, 40, Embedding::Square);
        let (graph, clear) = view_parts(&config);
        assert!(clear.boot_count > 0);
        assert!(!clear.plan.depth_mask.is_empty());
        let gates = GateConfig::default();
        let batch = CalibrationBatch::default();
        let view = ToolView {
            graph: &graph,
            config: &config,
            clear: &clear,
            coeffs: &SEED_COEFFICIENTS,
            gates: &gates,
            batch: &batch,
        };
        let kinds: Vec<DirectionKind> = global_tradeoff_propose(&view, false)
            .iter()
            .map(|c| c.direction.kind)
            .collect();
        assert!(!kinds.contains(&DirectionKind::IncreaseBootstrapInterval));
    }

    #[test]
    fn repair_mode_proposes_accuracy_moves() {
        // Scale 30 under 40-bit rescale entries leaves room to tighten.
        let config = wide_config(17, 30, Embedding::Square);
        let (graph, clear) = view_parts(&config);
        let gates = GateConfig::default();
        let batch = CalibrationBatch::default();
        let view = ToolView {
            graph: &graph,
            config: &config,
            clear: &clear,
            coeffs: &SEED_COEFFICIENTS,
            gates: &gates,
            batch: &batch,
        };
        let kinds: Vec<DirectionKind> = global_tradeoff_propose(&view, true)
            .iter()
            .map(|c| c.direction.kind)
            .collect();
        assert!(kinds.contains(&DirectionKind::TightenScaleOneStep));
        assert!(kinds.contains(&DirectionKind::ExtendModulusTail));
        assert!(!kinds.contains(&DirectionKind::ShortenModulusTail));
    }

    #[test]
    fn layer_proposals_only_keep_predicted_wins() {
        let config = wide_config(17, 40, Embedding::Square);
        let (graph, clear) = view_parts(&config);
        let gates = GateConfig::default();
        let batch = CalibrationBatch::default();
        let view = ToolView {
            graph: &graph,
            config: &config,
            clear: &clear,
            coeffs: &SEED_COEFFICIENTS,
            gates: &gates,
            batch: &batch,
        };
        let bottlenecks = vec![("conv2".to_string(), 0.43), ("fc1".to_string(), 0.3)];
        let candidates = layerwise_propose(&view, &bottlenecks, false);
        assert!(!candidates.is_empty());
        for c in &candidates {
            assert!(c.predicted_delta < 0.0, "{:?}", c.direction);
            assert!(c.direction.kind.is_layer_local());
            let target = c.direction.target_layer.as_deref().unwrap();
            assert!(target == "conv2" || target == "fc1");
        }
        // Switching conv2 to hybrid packing drops rotations, so it must
        // be among the keepers.
        assert!(candidates.iter().any(|c| c.direction.kind
            == DirectionKind::SwitchPackingSquareToHybrid
            && c.direction.target_layer.as_deref() == Some("conv2")));
    }

    fn offers(ids: &[&str]) -> PolicyContext {
        PolicyContext {
            phase: Phase::Refine,
            model_summary: lenet().summarize(),
            budget_remaining: 5,
            offered: ids
                .iter()
                .map(|id| OfferedDirection {
                    id: id.to_string(),
                    direction: Direction::global(DirectionKind::ShortenModulusTail),
                    predicted_delta: -0.1,
                })
                .collect(),
            bottlenecks: vec!["conv2".into()],
            history: Vec::new(),
        }
    }

    #[test]
    fn heuristic_policy_keeps_order() {
        let ctx = offers(&["a", "b", "c"]);
        let decision = HeuristicPolicy.choose(&ctx);
        assert_eq!(decision.chosen, vec!["a", "b", "c"]);
        assert!(decision.proposer_override.is_none());
    }

    struct StubTransport(Result<PolicyResponse, TransportError>);

    impl PolicyTransport for StubTransport {
        fn exchange(&mut self, _request: &PolicyContext) -> Result<PolicyResponse, TransportError> {
            match &self.0 {
                Ok(r) => Ok(r.clone()),
                Err(TransportError::Http(e)) => Err(TransportError::Http(e.clone())),
                Err(TransportError::Schema(e)) => Err(TransportError::Schema(e.clone())),
            }
        }
    }

    #[test]
    fn remote_policy_respects_valid_choices() {
        let ctx = offers(&["a", "b", "c"]);
        let mut policy = RemotePolicy::new(StubTransport(Ok(PolicyResponse {
            chosen: vec!["c".into(), "a".into(), "c".into()],
            rationale: Some("prefer c".into()),
        })));
        let decision = policy.choose(&ctx);
        assert_eq!(decision.chosen, vec!["c", "a"], "deduped, order kept");
        assert_eq!(decision.proposer_override, Some(ProposerKind::RemoteLlm));
    }

    #[test]
    fn remote_policy_falls_back_on_bad_ids_and_errors() {
        let ctx = offers(&["a", "b"]);

        let mut unknown = RemotePolicy::new(StubTransport(Ok(PolicyResponse {
            chosen: vec!["zzz".into()],
            rationale: None,
        })));
        let d = unknown.choose(&ctx);
        assert_eq!(d.chosen, vec!["a", "b"]);
        assert_eq!(d.proposer_override, Some(ProposerKind::Fallback));

        let mut broken = RemotePolicy::new(StubTransport(Err(TransportError::Http(
            "connection refused".into(),
        ))));
        let d = broken.choose(&ctx);
        assert_eq!(d.proposer_override, Some(ProposerKind::Fallback));

        let mut empty = RemotePolicy::new(StubTransport(Ok(PolicyResponse {
            chosen: vec![],
            rationale: None,
        })));
        let d = empty.choose(&ctx);
        assert_eq!(d.proposer_override, Some(ProposerKind::Fallback));
        assert_eq!(d.chosen, vec!["a", "b"]);
    }

    #[test]
    fn policy_context_wire_format_is_stable() {
        let ctx = offers(&["a"]);
        let json: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&ctx).unwrap()).unwrap();
        let obj = json.as_object().unwrap();
        for key in [
            "phase",
            "model_summary",
            "budget_remaining",
            "offered",
            "bottlenecks",
            "history",
        ] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert_eq!(json["phase"], "REFINE");
        let offer = json["offered"][0].as_object().unwrap();
        for key in ["id", "direction", "predicted_delta"] {
            assert!(offer.contains_key(key), "missing offered.{key}");
        }
    }
}
