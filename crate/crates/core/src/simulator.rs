//! Cleartext dress rehearsal for a candidate configuration.
//!
//! Runs the model twice on seeded synthetic data: once in exact f64 and once
//! with the value grid and activation error the encrypted run would see.
//! The gap between the passes is the precision estimate, and the same walk
//! produces per-layer primitive counts, slot utilization, and noise-margin
//! bookkeeping for the optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::layer_depth_cost;
use crate::bootstrap::{self, BootstrapPlan, ScheduleError};
use crate::config::{
    effective_act_degree, effective_bsgs_gap, effective_embedding, uncapped_blocks, Embedding,
    FheConfig,
};
use crate::cost::{predict_counts, CostCoefficients};
use crate::digest::sha256_hex;
use crate::model::{LayerOp, LayerSpec, ModelGraph};
use crate::orchestrator::GateConfig;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("calibration batch must have at least one sample")]
    EmptyBatch,
}

/// Homomorphic work performed by one layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCounts {
    pub mul: u64,
    pub rot: u64,
    pub boot: u64,
    /// Live ciphertext blocks times chain levels held while this layer runs.
    pub mem_cost: f64,
}

/// Synthetic evaluation batch: inputs are seeded uniform values in [-1, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationBatch {
    pub seed: u64,
    pub samples: usize,
}

impl Default for CalibrationBatch {
    fn default() -> Self {
        CalibrationBatch {
            seed: 7,
            samples: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureStats {
    pub kind: String,
    pub shape_in: Vec<usize>,
    pub shape_out: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerfStats {
    /// This layer's share of predicted runtime (shares sum to 1).
    pub runtime_fraction: f64,
    /// Fraction of occupied slots in the ciphertexts holding the output.
    pub slot_utilization: f64,
    pub counts: PrimitiveCounts,
    /// Rotations relative to the heaviest rotating layer.
    pub rot_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NumericStats {
    pub layer_mae: f64,
    /// Effective output precision in bits at this layer.
    pub eff_bits: f64,
    /// Modulus bits still unconsumed after this layer.
    pub noise_margin_bits: u64,
    /// Margin has dropped below twice the scale.
    pub low_margin: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_degree: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer_id: String,
    pub structure: StructureStats,
    pub perf: PerfStats,
    pub numeric: NumericStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClearRunReport {
    /// Mean absolute error of the degraded pass against the exact pass.
    pub mae: f64,
    pub precision_bits: f64,
    pub min_noise_margin_bits: u64,
    /// Predicted end-to-end seconds under the supplied coefficients
    /// (zero when the model does no measurable work).
    pub proxy_seconds: f64,
    pub boot_count: usize,
    pub plan: BootstrapPlan,
    pub profiles: Vec<LayerProfile>,
}

/// `-log2(mae)`; infinite for an exact run (callers cap it).
pub fn precision_from_mae(mae: f64) -> f64 {
    if mae > 0.0 {
        -mae.log2()
    } else {
        f64::INFINITY
    }
}

fn ceil_log2(v: usize) -> u64 {
    let mut bits = 0u64;
    let mut span = 1usize;
    while span < v {
        span *= 2;
        bits += 1;
    }
    bits
}

fn next_pow2(v: usize) -> usize {
    v.next_power_of_two()
}

fn layer_counts(config: &FheConfig, layer: &LayerSpec) -> PrimitiveCounts {
    let levels = config.global.usable_levels() as f64;
    let mem = |blocks: u64| blocks as f64 * levels;
    let blocks = uncapped_blocks(layer, &config.global).min(
        config
            .override_for(&layer.id)
            .and_then(|o| o.max_parallel_blocks)
            .map(u64::from)
            .unwrap_or(u64::MAX),
    );
    match &layer.op {
        LayerOp::Linear => {
            let n_diag = next_pow2(layer.in_elems()) as u64;
            match effective_embedding(layer, config) {
                Embedding::Hybrid => {
                    let gap = u64::from(effective_bsgs_gap(layer, config)).max(1);
                    let giant = n_diag.div_ceil(gap);
                    PrimitiveCounts {
                        mul: n_diag,
                        rot: (gap - 1) + giant.saturating_sub(1),
                        boot: 0,
                        mem_cost: mem(blocks),
                    }
                }
                // Square collapses to Diagonal for dense layers.
                _ => PrimitiveCounts {
                    mul: n_diag,
                    rot: n_diag - 1,
                    boot: 0,
                    mem_cost: mem(blocks),
                },
            }
        }
        LayerOp::Conv2d {
            kernel,
            channels_in,
            ..
        } => {
            let k2 = (kernel * kernel) as u64;
            let cin = *channels_in as u64;
            let rot = match effective_embedding(layer, config) {
                Embedding::Hybrid => (k2 - 1) + ceil_log2(*channels_in),
                // Diagonal collapses to Square for convolutions.
                _ => (k2 - 1) + (cin - 1),
            };
            PrimitiveCounts {
                mul: k2 * cin,
                rot,
                boot: 0,
                mem_cost: mem(blocks),
            }
        }
        LayerOp::ActPoly { .. } => {
            let degree = effective_act_degree(layer, config).unwrap_or(1);
            PrimitiveCounts {
                mul: degree.saturating_sub(1) as u64,
                rot: 0,
                boot: 0,
                mem_cost: mem(blocks),
            }
        }
        LayerOp::AvgPool { stride } => PrimitiveCounts {
            mul: 1,
            rot: ceil_log2(stride * stride),
            boot: 0,
            mem_cost: mem(blocks),
        },
        LayerOp::Flatten => PrimitiveCounts::default(),
    }
}

/// Per-layer primitive counts for a configuration and bootstrap plan.
/// Bootstraps are charged to the layer they follow.
pub fn count_primitives(
    graph: &ModelGraph,
    config: &FheConfig,
    plan: &BootstrapPlan,
) -> Vec<PrimitiveCounts> {
    graph
        .layers
        .iter()
        .map(|layer| {
            let mut c = layer_counts(config, layer);
            if plan.boot_after.iter().any(|id| id == &layer.id) {
                c.boot += 1;
            }
            c
        })
        .collect()
}

fn quantize(v: f64, log_scale: u32) -> f64 {
    let grid = (1u128 << log_scale) as f64;
    (v * grid).round() / grid
}

fn quantize_all(values: &mut [f64], log_scale: u32) {
    for v in values {
        *v = quantize(*v, log_scale);
    }
}

fn seeded_rng(signature: &str, layer_id: &str, tag: &str, seed: u64) -> ChaCha8Rng {
    let digest = sha256_hex(format!("{signature}|{layer_id}|{tag}|{seed}").as_bytes());
    let mut key = [0u8; 32];
    for (i, chunk) in digest.as_bytes().chunks(2).take(32).enumerate() {
        key[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).unwrap();
    }
    ChaCha8Rng::from_seed(key)
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect()
}

/// Deterministic synthetic weights, scaled by 1/sqrt(fan_in) so activations
/// stay near unit magnitude through the network.
struct LayerWeights {
    values: Vec<f64>,
}

fn make_weights(signature: &str, layer: &LayerSpec, seed: u64) -> LayerWeights {
    let mut rng = seeded_rng(signature, &layer.id, "weights", seed);
    let values = match &layer.op {
        LayerOp::Linear => {
            let fan_in = layer.in_elems();
            uniform_vec(
                &mut rng,
                fan_in * layer.out_elems(),
                1.0 / (fan_in as f64).sqrt(),
            )
        }
        LayerOp::Conv2d {
            kernel,
            channels_in,
            channels_out,
            ..
        } => {
            let fan_in = kernel * kernel * channels_in;
            uniform_vec(
                &mut rng,
                channels_out * channels_in * kernel * kernel,
                1.0 / (fan_in as f64).sqrt(),
            )
        }
        _ => Vec::new(),
    };
    LayerWeights { values }
}

fn apply_linear(w: &LayerWeights, x: &[f64], out_dim: usize) -> Vec<f64> {
    let fan_in = x.len();
    (0..out_dim)
        .map(|j| {
            let row = &w.values[j * fan_in..(j + 1) * fan_in];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn apply_conv(
    w: &LayerWeights,
    x: &[f64],
    shape_in: &[usize],
    shape_out: &[usize],
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    let (cin, h, wid) = (shape_in[0], shape_in[1], shape_in[2]);
    let (cout, ho, wo) = (shape_out[0], shape_out[1], shape_out[2]);
    let mut out = vec![0.0; cout * ho * wo];
    for oc in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ic in 0..cin {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let wv = w.values[((oc * cin + ic) * kernel + ky) * kernel + kx];
                            acc += wv * x[(ic * h + iy) * wid + ix];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn apply_pool(x: &[f64], shape_in: &[usize], shape_out: &[usize], stride: usize) -> Vec<f64> {
    let (c, h, wid) = (shape_in[0], shape_in[1], shape_in[2]);
    let (_, ho, wo) = (shape_out[0], shape_out[1], shape_out[2]);
    let inv = 1.0 / (stride * stride) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..stride {
                    for kx in 0..stride {
                        acc += x[(ch * h + oy * stride + ky) * wid + ox * stride + kx];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    out
}

fn apply_act(x: &[f64], perturb: Option<f64>) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let y = v - v * v * v / 6.0;
            match perturb {
                Some(e) if i % 2 == 0 => y + e,
                Some(e) => y - e,
                None => y,
            }
        })
        .collect()
}

/// Error injected on the degraded pass for a polynomial activation:
/// the declared approximation error, inflated when the degree is lowered
/// below the declared one.
fn effective_act_error(declared_degree: u32, declared_error: f64, effective_degree: u32) -> f64 {
    declared_error * (declared_degree + 1) as f64 / (effective_degree + 1) as f64
}

struct MarginInfo {
    noise_margin_bits: u64,
    low_margin: bool,
}

fn margin_walk(graph: &ModelGraph, config: &FheConfig, plan: &BootstrapPlan) -> Vec<MarginInfo> {
    let usable = config.global.usable_levels();
    let interior = &config.global.modulus_chain[1..];
    let mut remaining = usable;
    let threshold = 2 * config.global.log_scale as u64;
    graph
        .layers
        .iter()
        .map(|layer| {
            let act = effective_act_degree(layer, config);
            let cost = layer_depth_cost(&layer.op, act);
            remaining = remaining.saturating_sub(cost);
            let bits: u64 = interior
                .iter()
                .take(remaining as usize)
                .map(|&b| b as u64)
                .sum();
            let info = MarginInfo {
                noise_margin_bits: bits,
                low_margin: bits < threshold,
            };
            if plan.boot_after.iter().any(|id| id == &layer.id) {
                remaining = usable.saturating_sub(bootstrap::BOOT_LEVEL_COST);
            }
            info
        })
        .collect()
}

/// Runs the dual cleartext pass and assembles the full per-layer profile.
pub fn simulate(
    graph: &ModelGraph,
    config: &FheConfig,
    batch: &CalibrationBatch,
    coeffs: &CostCoefficients,
) -> Result<ClearRunReport, SimError> {
    if batch.samples == 0 {
        return Err(SimError::EmptyBatch);
    }
    let costs = crate::analyzer::depth_costs(graph, config);
    let plan = bootstrap::schedule(graph, config, &costs)?;
    let counts = count_primitives(graph, config, &plan);
    let n = graph.layers.len();

    let (proxy_seconds, shares) = match predict_counts(&counts, coeffs) {
        Ok((total, shares)) => (total, shares),
        Err(_) => (0.0, vec![1.0 / n.max(1) as f64; n]),
    };

    let signature = graph.signature();
    let log_scale = config.global.log_scale;
    let weights: Vec<LayerWeights> = graph
        .layers
        .iter()
        .map(|l| make_weights(&signature, l, batch.seed))
        .collect();

    let mut abs_err_sum = vec![0.0f64; n];
    let mut elem_count = vec![0usize; n];
    let mut final_err_sum = 0.0f64;
    let mut final_count = 0usize;

    let input_len: usize = graph.input_shape.iter().product();
    for sample in 0..batch.samples {
        let mut rng = seeded_rng(&signature, "input", &format!("sample{sample}"), batch.seed);
        // Both passes start from the encoded input: encoding error is not
        // circuit-induced, so the reference shares it.
        let mut encoded = uniform_vec(&mut rng, input_len, 1.0);
        quantize_all(&mut encoded, log_scale);
        let mut exact = encoded.clone();
        let mut degraded = encoded;

        for (idx, layer) in graph.layers.iter().enumerate() {
            let act_override = effective_act_degree(layer, config);
            match &layer.op {
                LayerOp::Linear => {
                    exact = apply_linear(&weights[idx], &exact, layer.out_elems());
                    degraded = apply_linear(&weights[idx], &degraded, layer.out_elems());
                }
                LayerOp::Conv2d { kernel, stride, .. } => {
                    exact = apply_conv(
                        &weights[idx],
                        &exact,
                        &layer.shape_in,
                        &layer.shape_out,
                        *kernel,
                        *stride,
                    );
                    degraded = apply_conv(
                        &weights[idx],
                        &degraded,
                        &layer.shape_in,
                        &layer.shape_out,
                        *kernel,
                        *stride,
                    );
                }
                LayerOp::ActPoly {
                    act_degree,
                    act_error,
                } => {
                    let eff_deg = act_override.unwrap_or(*act_degree);
                    let eff_err = effective_act_error(*act_degree, *act_error, eff_deg);
                    exact = apply_act(&exact, None);
                    degraded = apply_act(&degraded, Some(eff_err));
                }
                LayerOp::AvgPool { stride } => {
                    exact = apply_pool(&exact, &layer.shape_in, &layer.shape_out, *stride);
                    degraded = apply_pool(&degraded, &layer.shape_in, &layer.shape_out, *stride);
                }
                LayerOp::Flatten => {}
            }
            let cost = layer_depth_cost(&layer.op, act_override);
            if cost > 0 {
                quantize_all(&mut degraded, log_scale);
            }
            abs_err_sum[idx] += exact
                .iter()
                .zip(&degraded)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            elem_count[idx] += exact.len();
            if idx == n - 1 {
                final_err_sum += exact
                    .iter()
                    .zip(&degraded)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
                final_count += exact.len();
            }
        }
    }

    let margins = margin_walk(graph, config, &plan);
    let min_margin = margins
        .iter()
        .map(|m| m.noise_margin_bits)
        .min()
        .unwrap_or(0);
    let mae = if final_count > 0 {
        final_err_sum / final_count as f64
    } else {
        0.0
    };
    let precision_cap = (log_scale as f64).min(min_margin as f64);
    let precision_bits = if mae > 0.0 {
        precision_from_mae(mae)
    } else {
        precision_cap
    };

    let slots = 1usize << (config.global.log_n - 1);
    let max_rot = counts.iter().map(|c| c.rot).max().unwrap_or(0);
    let profiles: Vec<LayerProfile> = graph
        .layers
        .iter()
        .enumerate()
        .map(|(idx, layer)| {
            let out = layer.out_elems();
            let blocks = (out + slots - 1) / slots.max(1);
            let utilization = if blocks == 0 {
                1.0
            } else {
                out as f64 / (blocks * slots) as f64
            };
            let layer_mae = if elem_count[idx] > 0 {
                abs_err_sum[idx] / elem_count[idx] as f64
            } else {
                0.0
            };
            let eff_bits = if layer_mae > 0.0 {
                precision_from_mae(layer_mae)
            } else {
                precision_cap
            };
            let (act_degree, act_error) = match &layer.op {
                LayerOp::ActPoly {
                    act_degree,
                    act_error,
                } => {
                    let eff_deg = effective_act_degree(layer, config).unwrap_or(*act_degree);
                    (
                        Some(eff_deg),
                        Some(effective_act_error(*act_degree, *act_error, eff_deg)),
                    )
                }
                _ => (None, None),
            };
            LayerProfile {
                layer_id: layer.id.clone(),
                structure: StructureStats {
                    kind: layer.op.kind_name().to_string(),
                    shape_in: layer.shape_in.clone(),
                    shape_out: layer.shape_out.clone(),
                },
                perf: PerfStats {
                    runtime_fraction: shares[idx],
                    slot_utilization: utilization,
                    counts: counts[idx].clone(),
                    rot_norm: if max_rot > 0 {
                        counts[idx].rot as f64 / max_rot as f64
                    } else {
                        0.0
                    },
                },
                numeric: NumericStats {
                    layer_mae,
                    eff_bits,
                    noise_margin_bits: margins[idx].noise_margin_bits,
                    low_margin: margins[idx].low_margin,
                    act_degree,
                    act_error,
                },
            }
        })
        .collect();

    Ok(ClearRunReport {
        mae,
        precision_bits,
        min_noise_margin_bits: min_margin,
        proxy_seconds,
        boot_count: plan.boot_count as usize,
        plan,
        profiles,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateOutcome {
    pub pass: bool,
    pub mae_ok: bool,
    pub precision_ok: bool,
    pub layers_ok: bool,
    /// Layer with the largest error, for diagnostics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_layer: Option<(String, f64)>,
    pub reasons: Vec<String>,
}

/// Numeric acceptance gates against externally measured end-to-end error,
/// with the per-layer check taken from the cleartext profile.
pub fn check_measured_gates(
    mae: f64,
    precision_bits: f64,
    report: &ClearRunReport,
    gates: &GateConfig,
) -> GateOutcome {
    let mae_ok = mae <= gates.mae_max;
    let precision_ok = precision_bits >= gates.precision_min_bits;
    let worst_layer = report
        .profiles
        .iter()
        .max_by(|a, b| a.numeric.layer_mae.total_cmp(&b.numeric.layer_mae))
        .map(|p| (p.layer_id.clone(), p.numeric.layer_mae));
    let layers_ok = report
        .profiles
        .iter()
        .all(|p| p.numeric.layer_mae <= gates.layer_mae_max);
    let mut reasons = Vec::new();
    if !mae_ok {
        reasons.push(format!("mae {mae:.3e} above limit {:.3e}", gates.mae_max));
    }
    if !precision_ok {
        reasons.push(format!(
            "precision {precision_bits:.2} bits below floor {:.2}",
            gates.precision_min_bits
        ));
    }
    if !layers_ok {
        if let Some((id, err)) = &worst_layer {
            reasons.push(format!(
                "layer {id} error {err:.3e} above limit {:.3e}",
                gates.layer_mae_max
            ));
        }
    }
    GateOutcome {
        pass: mae_ok && precision_ok && layers_ok,
        mae_ok,
        precision_ok,
        layers_ok,
        worst_layer,
        reasons,
    }
}

/// Numeric acceptance gates on the simulation's own error estimates.
pub fn check_gates(report: &ClearRunReport, gates: &GateConfig) -> GateOutcome {
    check_measured_gates(report.mae, report.precision_bits, report, gates)
}

/// Convenience map from layer id to profile index.
pub fn profile_index(report: &ClearRunReport) -> BTreeMap<String, usize> {
    report
        .profiles
        .iter()
        .enumerate()
        .map(|(i, p)| (p.layer_id.clone(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Embedding, GlobalConfig, LayerOverride};
    use crate::cost::SEED_COEFFICIENTS;
    use crate::model::testdata::lenet_json;
    use crate::model::ModelGraph;

    fn lenet() -> ModelGraph {
        ModelGraph::from_json(lenet_json()).unwrap()
    }

    fn wide_config(log_n: u32, levels: usize, log_scale: u32) -> FheConfig {
        let mut chain = vec![60u32];
        chain.extend(std::iter::repeat(40).take(levels));
        FheConfig::new(GlobalConfig {
            log_n,
            modulus_chain: chain,
            log_scale,
            sigma: 3.2,
            default_embedding: Embedding::Square,
            bootstrap_interval: 1,
            security_target_bits: 128,
        })
    }

    fn counts_for(graph: &ModelGraph, config: &FheConfig) -> Vec<PrimitiveCounts> {
        let costs = crate::analyzer::depth_costs(graph, config);
        let plan = bootstrap::schedule(graph, config, &costs).unwrap();
        count_primitives(graph, config, &plan)
    }

    #[test]
    fn conv_counts_match_hand_derivation() {
        let graph = lenet();
        let config = wide_config(15, 16, 40);
        let counts = counts_for(&graph, &config);
        let by_id = |id: &str| {
            let idx = graph.layers.iter().position(|l| l.id == id).unwrap();
            counts[idx].clone()
        };
        // conv2: 5x5 kernel over 6 input channels, square packing.
        let conv2 = by_id("conv2");
        assert_eq!(conv2.rot, 29);
        assert_eq!(conv2.mul, 150);
        // act1: degree 31 polynomial.
        assert_eq!(by_id("act1").mul, 30);
        assert_eq!(by_id("act1").rot, 0);
        // pool1: stride 2 means a 4-element window.
        assert_eq!(by_id("pool1").mul, 1);
        assert_eq!(by_id("pool1").rot, 2);
        // flat: free.
        assert_eq!(by_id("flat"), PrimitiveCounts::default());
        // fc1: 400 inputs pad to 512 diagonals.
        let fc1 = by_id("fc1");
        assert_eq!(fc1.mul, 512);
        assert_eq!(fc1.rot, 511);
        assert!(counts.iter().all(|c| c.boot == 0));
    }

    #[test]
    fn hybrid_packing_changes_rotation_counts() {
        let graph = lenet();
        let mut config = wide_config(15, 16, 40);
        config.overrides.insert(
            "conv2".into(),
            LayerOverride {
                embedding_method: Some(Embedding::Hybrid),
                ..Default::default()
            },
        );
        config.overrides.insert(
            "fc1".into(),
            LayerOverride {
                embedding_method: Some(Embedding::Hybrid),
                ..Default::default()
            },
        );
        let counts = counts_for(&graph, &config);
        let idx = |id: &str| graph.layers.iter().position(|l| l.id == id).unwrap();
        // conv2 hybrid: (25-1) + ceil(log2 6) = 24 + 3.
        assert_eq!(counts[idx("conv2")].rot, 27);
        assert_eq!(counts[idx("conv2")].mul, 150);
        // fc1 hybrid, default gap round(sqrt(512)) = 23: 22 + ceil(512/23) - 1.
        assert_eq!(counts[idx("fc1")].rot, 44);
        assert_eq!(counts[idx("fc1")].mul, 512);
    }

    #[test]
    fn bsgs_gap_override_moves_linear_rotations() {
        let graph = lenet();
        let mut config = wide_config(15, 16, 40);
        config.overrides.insert(
            "fc1".into(),
            LayerOverride {
                embedding_method: Some(Embedding::Hybrid),
                bsgs_gap: Some(32),
                ..Default::default()
            },
        );
        let counts = counts_for(&graph, &config);
        let idx = graph.layers.iter().position(|l| l.id == "fc1").unwrap();
        // gap 32: (32-1) + 512/32 - 1 = 31 + 15.
        assert_eq!(counts[idx].rot, 46);
    }

    #[test]
    fn parallel_block_cap_limits_memory() {
        let graph = lenet();
        // Tiny ring: 2^10 -> 512 slots; conv1 output 4704 elems -> 10 blocks.
        let mut config = wide_config(10, 16, 40);
        let levels = config.global.usable_levels() as f64;
        let counts = counts_for(&graph, &config);
        assert_eq!(counts[0].mem_cost, 10.0 * levels);
        config.overrides.insert(
            "conv1".into(),
            LayerOverride {
                max_parallel_blocks: Some(2),
                ..Default::default()
            },
        );
        let capped = counts_for(&graph, &config);
        assert_eq!(capped[0].mem_cost, 2.0 * levels);
    }

    #[test]
    fn bootstraps_are_charged_to_the_preceding_layer() {
        let graph = lenet();
        let config = wide_config(15, 9, 40);
        let counts = counts_for(&graph, &config);
        let boots: Vec<&str> = graph
            .layers
            .iter()
            .zip(&counts)
            .filter(|(_, c)| c.boot > 0)
            .map(|(l, _)| l.id.as_str())
            .collect();
        assert_eq!(boots, vec!["conv2", "flat"]);
    }

    #[test]
    fn flatten_only_network_is_exact() {
        let graph = ModelGraph::from_json(
            r#"{
                "name": "noop",
                "input_shape": [4, 4],
                "layers": [
                    {"id": "flat", "kind": "Flatten"}
                ]
            }"#,
        )
        .unwrap();
        let config = wide_config(12, 4, 30);
        let report = simulate(
            &graph,
            &config,
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        assert_eq!(report.mae, 0.0);
        // Exact runs cap precision at the scale (margin is far larger).
        assert_eq!(report.precision_bits, 30.0);
        assert_eq!(report.proxy_seconds, 0.0);
        let share_sum: f64 = report
            .profiles
            .iter()
            .map(|p| p.perf.runtime_fraction)
            .sum();
        assert!((share_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activation_error_dominates_and_scales_with_degree_reduction() {
        let graph = ModelGraph::from_json(
            r#"{
                "name": "one-act",
                "input_shape": [64],
                "layers": [
                    {"id": "a", "kind": "ActPoly", "act_degree": 31, "act_error": 1e-4}
                ]
            }"#,
        )
        .unwrap();
        let config = wide_config(12, 8, 40);
        let batch = CalibrationBatch::default();
        let base = simulate(&graph, &config, &batch, &SEED_COEFFICIENTS).unwrap();
        assert!(
            (base.mae - 1e-4).abs() < 1e-9,
            "declared error should pass through, got {}",
            base.mae
        );

        let mut lowered = config.clone();
        lowered.overrides.insert(
            "a".into(),
            LayerOverride {
                act_degree: Some(15),
                ..Default::default()
            },
        );
        let low = simulate(&graph, &lowered, &batch, &SEED_COEFFICIENTS).unwrap();
        assert!(
            (low.mae - 2e-4).abs() < 1e-9,
            "halving the degree ladder doubles error, got {}",
            low.mae
        );
        let prof = &low.profiles[0];
        assert_eq!(prof.numeric.act_degree, Some(15));
    }

    #[test]
    fn coarser_scale_loses_precision() {
        // Activation-free net: the only degradation is rescale quantization,
        // so error must drop as the scale grows.
        let graph = ModelGraph::from_json(
            r#"{
                "name": "linear-stack",
                "input_shape": [1, 12, 12],
                "layers": [
                    {"id": "c1", "kind": "Conv2d", "kernel": 3, "stride": 1,
                     "channels_in": 1, "channels_out": 4},
                    {"id": "p1", "kind": "AvgPool", "stride": 2},
                    {"id": "f", "kind": "Flatten"},
                    {"id": "d1", "kind": "Linear", "shape_out": [8]}
                ]
            }"#,
        )
        .unwrap();
        let batch = CalibrationBatch::default();
        let fine = simulate(&graph, &wide_config(13, 6, 40), &batch, &SEED_COEFFICIENTS).unwrap();
        let coarse = simulate(&graph, &wide_config(13, 6, 20), &batch, &SEED_COEFFICIENTS).unwrap();
        assert!(coarse.mae > fine.mae);
        assert!(coarse.precision_bits < fine.precision_bits);
        assert!(fine.mae < 1e-9, "40-bit scale error should be tiny");
    }

    #[test]
    fn simulation_is_deterministic() {
        let graph = lenet();
        let config = wide_config(15, 16, 40);
        let batch = CalibrationBatch::default();
        let a = simulate(&graph, &config, &batch, &SEED_COEFFICIENTS).unwrap();
        let b = simulate(&graph, &config, &batch, &SEED_COEFFICIENTS).unwrap();
        assert_eq!(a.mae.to_bits(), b.mae.to_bits());
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn margins_shrink_with_consumed_levels_and_reset_after_boot() {
        let graph = lenet();
        // Depth 16 on 9 usable levels forces two bootstraps.
        let report = simulate(
            &graph,
            &wide_config(15, 9, 40),
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        assert_eq!(report.boot_count, 2);
        let margin = |id: &str| {
            report
                .profiles
                .iter()
                .find(|p| p.layer_id == id)
                .unwrap()
                .numeric
                .noise_margin_bits
        };
        // conv2 ends its segment with 1 level left; act2 runs after a boot.
        assert_eq!(margin("conv2"), 40);
        assert_eq!(margin("act2"), 40);
        assert!(margin("fc2") > margin("fc1") - 41);
        let conv2 = report
            .profiles
            .iter()
            .find(|p| p.layer_id == "conv2")
            .unwrap();
        assert!(conv2.numeric.low_margin);
    }

    #[test]
    fn gates_flag_low_precision() {
        let graph = lenet();
        let report = simulate(
            &graph,
            &wide_config(15, 16, 40),
            &CalibrationBatch::default(),
            &SEED_COEFFICIENTS,
        )
        .unwrap();
        let gates = GateConfig::default();
        let ok = check_gates(&report, &gates);
        assert!(ok.pass, "reasons: {:?}", ok.reasons);

        let strict = GateConfig {
            precision_min_bits: 60.0,
            ..GateConfig::default()
        };
        let bad = check_gates(&report, &strict);
        assert!(!bad.pass);
        assert!(!bad.precision_ok);
        assert!(bad.reasons.iter().any(|r| r.contains("precision")));

        let measured = check_measured_gates(2.9e-2, 5.11, &report, &gates);
        assert!(!measured.pass);
        assert!(!measured.mae_ok);
    }

    #[test]
    fn precision_pairs_from_error_rule() {
        let pairs = [
            (5.89e-6, 17.37),
            (1.13e-7, 23.07),
            (1.31e-6, 19.54),
            (2.9e-2, 5.11),
            (1.6e-3, 9.29),
        ];
        for (mae, bits) in pairs {
            assert!(
                (precision_from_mae(mae) - bits).abs() < 0.1,
                "mae {mae} expected {bits} got {}",
                precision_from_mae(mae)
            );
        }
    }
}
