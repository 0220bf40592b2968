//! Static feasibility checks: multiplicative depth against the modulus
//! chain, scale consistency, and a table-based security estimate. Nothing
//! here touches ciphertexts; failures come back as data, not errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::{self, BootstrapPlan, BOOT_LEVEL_COST};
use crate::config::FheConfig;
use crate::model::{LayerOp, ModelGraph};

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("no security estimate for log_n = {log_n}; table covers 12..=16")]
    UnsupportedRing { log_n: u32 },
}

/// Maximum total modulus bits at 128-bit classical security for a ternary
/// secret and sigma = 3.2, indexed by log2(N). Entries for N = 2^12..2^15
/// are the HomomorphicEncryption.org standard table; the 2^16 entry matches
/// the Lattigo PN16QP1761 default parameter set.
const MAX_Q_BITS_128: [(u32, u32); 5] = [(12, 109), (13, 218), (14, 438), (15, 881), (16, 1761)];

pub fn max_q_bits_128(log_n: u32) -> Option<u32> {
    MAX_Q_BITS_128
        .iter()
        .find(|(n, _)| *n == log_n)
        .map(|(_, q)| *q)
}

/// Bits of classical security for the ring/modulus pair, by linear scaling
/// of the 128-bit modulus budget: floor(128 * maxQ(log_n) / log_q_total).
/// `sigma` is accepted for interface completeness; the table assumes 3.2.
pub fn estimate_security(log_n: u32, log_q_total: u32, _sigma: f64) -> Result<u32, AnalyzerError> {
    let max_q = max_q_bits_128(log_n).ok_or(AnalyzerError::UnsupportedRing { log_n })?;
    let q = log_q_total.max(1) as u64;
    Ok((128 * max_q as u64 / q) as u32)
}

/// Multiplicative levels one layer consumes. Linear transforms and the
/// pooling mask multiply cost one level; a degree-d polynomial costs
/// ceil(log2(d + 1)) via the balanced product tree; reshapes are free.
pub fn layer_depth_cost(op: &LayerOp, act_degree_override: Option<u32>) -> u32 {
    match op {
        LayerOp::Linear | LayerOp::Conv2d { .. } | LayerOp::AvgPool { .. } => 1,
        LayerOp::Flatten => 0,
        LayerOp::ActPoly { act_degree, .. } => {
            let d = act_degree_override.unwrap_or(*act_degree).max(1);
            ceil_log2(d + 1)
        }
    }
}

fn ceil_log2(x: u32) -> u32 {
    debug_assert!(x >= 1);
    if x <= 1 {
        0
    } else {
        32 - (x - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDepth {
    pub layer_id: String,
    pub cost: u32,
    /// Total levels consumed up to and including this layer, ignoring
    /// bootstrap refreshes. Nondecreasing along the graph.
    pub cumulative: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthReport {
    pub per_layer: Vec<LayerDepth>,
    pub total_depth: u32,
    pub depth_ok: bool,
    pub first_overflow_layer: Option<String>,
}

pub fn depth_costs(graph: &ModelGraph, config: &FheConfig) -> Vec<(String, u32)> {
    graph
        .layers
        .iter()
        .map(|l| {
            let ov = crate::config::effective_act_degree(l, config);
            (l.id.clone(), layer_depth_cost(&l.op, ov))
        })
        .collect()
}

/// Replays the rescale walk: start with `usable_levels`, consume each
/// layer's cost, and reset the remaining count to `L - BOOT_LEVEL_COST`
/// after every planned bootstrap. Overflow at a layer means the chain ran
/// out of levels before that layer finished.
pub fn check_depth(
    graph: &ModelGraph,
    config: &FheConfig,
    plan: Option<&BootstrapPlan>,
) -> DepthReport {
    let costs = depth_costs(graph, config);
    let usable = config.global.usable_levels() as i64;
    let boots: std::collections::BTreeSet<&str> = plan
        .map(|p| p.boot_after.iter().map(String::as_str).collect())
        .unwrap_or_default();

    let mut per_layer = Vec::with_capacity(costs.len());
    let mut cumulative = 0u32;
    let mut remaining = usable;
    let mut depth_ok = true;
    let mut first_overflow = None;

    for (id, cost) in &costs {
        cumulative += cost;
        remaining -= *cost as i64;
        if remaining < 0 && depth_ok {
            depth_ok = false;
            first_overflow = Some(id.clone());
        }
        per_layer.push(LayerDepth {
            layer_id: id.clone(),
            cost: *cost,
            cumulative,
        });
        if boots.contains(id.as_str()) {
            remaining = usable - BOOT_LEVEL_COST as i64;
        }
    }

    DepthReport {
        per_layer,
        total_depth: cumulative,
        depth_ok,
        first_overflow_layer: first_overflow,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticReport {
    pub depth_ok: bool,
    pub sec_bits: u32,
    pub scale_ok: bool,
    pub reasons: Vec<String>,
}

impl StaticReport {
    pub fn pass(&self, security_target_bits: u32) -> bool {
        self.depth_ok && self.scale_ok && self.sec_bits >= security_target_bits
    }
}

/// Full static check: scale consistency, security estimate against the
/// config's own target, and the depth walk under a provisional greedy
/// bootstrap plan. Infeasibility shows up in the report, never as an error.
pub fn analyze(graph: &ModelGraph, config: &FheConfig) -> StaticReport {
    let mut reasons = Vec::new();
    let g = &config.global;

    let interior = &g.modulus_chain[1..];
    let scale_ok = interior.iter().all(|&bits| g.log_scale <= bits);
    if !scale_ok {
        let worst = interior.iter().min().expect("chain has interior entries");
        reasons.push(format!(
            "log_scale {} exceeds interior chain entry of {worst} bits",
            g.log_scale
        ));
    }

    let sec_bits = match estimate_security(g.log_n, g.log_q_total(), g.sigma) {
        Ok(bits) => bits,
        Err(e) => {
            reasons.push(e.to_string());
            0
        }
    };
    if sec_bits < g.security_target_bits {
        reasons.push(format!(
            "estimated security {sec_bits} bits below target {}",
            g.security_target_bits
        ));
    }

    let costs = depth_costs(graph, config);
    let depth_ok = match bootstrap::schedule(graph, config, &costs) {
        Ok(plan) => {
            let report = check_depth(graph, config, Some(&plan));
            if !report.depth_ok {
                if let Some(l) = &report.first_overflow_layer {
                    reasons.push(format!("depth overflow at layer `{l}`"));
                }
            }
            report.depth_ok
        }
        Err(e) => {
            reasons.push(e.to_string());
            false
        }
    };

    StaticReport {
        depth_ok,
        sec_bits,
        scale_ok,
        reasons,
    }
}
