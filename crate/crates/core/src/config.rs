//! Hierarchical CKKS configuration: one global parameter block plus sparse
//! per-layer overrides, and the closed vocabulary of search moves over it.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::digest::json_digest;
use crate::model::{LayerOp, LayerSpec, ModelGraph};

pub const MIN_LOG_N: u32 = 10;
pub const MAX_LOG_N: u32 = 17;
pub const MIN_CHAIN_ENTRY_BITS: u32 = 20;
pub const MAX_CHAIN_ENTRY_BITS: u32 = 60;
/// Bit size of the key-switching prime at the head of every chain.
pub const SPECIAL_PRIME_BITS: u32 = 60;
/// One scale move = this many bits of `log_scale`.
pub const SCALE_STEP_BITS: u32 = 2;
/// Relaxing the scale never goes below this floor.
pub const MIN_LOG_SCALE: u32 = 10;
pub const DEFAULT_SIGMA: f64 = 3.2;
/// Backend-supported activation degrees, highest first. Degree overrides
/// move down this ladder one rung at a time.
pub const ACT_DEGREE_LADDER: [u32; 4] = [31, 15, 7, 3];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("scope violation: {0}")]
    ScopeViolation(String),
    #[error("depth-mask violation: {0}")]
    MaskViolation(String),
    #[error("patch invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Embedding {
    Square,
    Hybrid,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    /// log2 of the ring dimension N; slots = 2^(log_n - 1).
    pub log_n: u32,
    /// Prime bit sizes, head first. The head is the special prime; the rest
    /// are rescale levels. Usable depth = len - 1 (one level reserved for
    /// the output scale).
    pub modulus_chain: Vec<u32>,
    pub log_scale: u32,
    pub sigma: f64,
    pub default_embedding: Embedding,
    /// Minimum number of layers between two bootstraps.
    pub bootstrap_interval: u32,
    pub security_target_bits: u32,
}

impl GlobalConfig {
    /// Rescale levels available before the reserved output level.
    pub fn usable_levels(&self) -> u32 {
        self.modulus_chain.len() as u32 - 1
    }

    pub fn log_q_total(&self) -> u32 {
        self.modulus_chain.iter().sum()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError::InvariantViolation(msg));
        if !(MIN_LOG_N..=MAX_LOG_N).contains(&self.log_n) {
            return err(format!(
                "log_n {} outside [{MIN_LOG_N},{MAX_LOG_N}]",
                self.log_n
            ));
        }
        if self.modulus_chain.len() < 2 {
            return err(format!(
                "modulus chain needs >= 2 entries, has {}",
                self.modulus_chain.len()
            ));
        }
        for (i, &bits) in self.modulus_chain.iter().enumerate() {
            if !(MIN_CHAIN_ENTRY_BITS..=MAX_CHAIN_ENTRY_BITS).contains(&bits) {
                return err(format!(
                    "chain entry {i} is {bits} bits, outside [{MIN_CHAIN_ENTRY_BITS},{MAX_CHAIN_ENTRY_BITS}]"
                ));
            }
        }
        let min_entry = *self.modulus_chain.iter().min().expect("non-empty chain");
        if self.log_scale > min_entry {
            return err(format!(
                "log_scale {} exceeds smallest chain entry {min_entry}",
                self.log_scale
            ));
        }
        if self.bootstrap_interval == 0 {
            return err("bootstrap_interval must be >= 1".into());
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return err(format!("sigma {} must be positive", self.sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_method: Option<Embedding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bsgs_gap: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_parallel_blocks: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_degree: Option<u32>,
}

impl LayerOverride {
    pub fn is_empty(&self) -> bool {
        self.embedding_method.is_none()
            && self.bsgs_gap.is_none()
            && self.max_parallel_blocks.is_none()
            && self.act_degree.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FheConfig {
    pub global: GlobalConfig,
    #[serde(default)]
    pub overrides: BTreeMap<String, LayerOverride>,
}

impl FheConfig {
    pub fn new(global: GlobalConfig) -> Self {
        FheConfig {
            global,
            overrides: BTreeMap::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: FheConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError::InvariantViolation(format!("config parse error: {e}")))?;
        cfg.global.validate()?;
        Ok(cfg)
    }

    pub fn override_for(&self, layer_id: &str) -> Option<&LayerOverride> {
        self.overrides.get(layer_id)
    }

    /// Validates override targets and payloads against a concrete graph.
    pub fn validate_against(&self, graph: &ModelGraph) -> Result<(), ConfigError> {
        self.global.validate()?;
        let err = |msg: String| Err(ConfigError::InvariantViolation(msg));
        for (id, ov) in &self.overrides {
            let Some(layer) = graph.layer(id) else {
                return err(format!("override targets unknown layer `{id}`"));
            };
            if let Some(gap) = ov.bsgs_gap {
                if gap == 0 {
                    return err(format!("bsgs_gap on `{id}` must be >= 1"));
                }
            }
            if let Some(blocks) = ov.max_parallel_blocks {
                if blocks == 0 {
                    return err(format!("max_parallel_blocks on `{id}` must be >= 1"));
                }
            }
            if let Some(deg) = ov.act_degree {
                let LayerOp::ActPoly { act_degree, .. } = layer.op else {
                    return err(format!(
                        "act_degree override on `{id}` which is not an ActPoly layer"
                    ));
                };
                if deg == 0 {
                    return err(format!("act_degree on `{id}` must be >= 1"));
                }
                if deg > act_degree {
                    return err(format!(
                        "act_degree override {deg} on `{id}` exceeds declared degree {act_degree}"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Digest of the canonical serialized form. Structurally equal configs hash
/// equal: overrides are a sorted map and the field order is fixed.
pub fn config_digest(config: &FheConfig) -> String {
    json_digest(config)
}

/// Effective embedding for counting purposes. The per-kind count formulas
/// only distinguish square-style and hybrid packings, so `Diagonal` on a
/// conv collapses to `Square` and `Square` on a linear collapses to
/// `Diagonal`; both keep their meaning where it exists.
pub fn effective_embedding(layer: &LayerSpec, config: &FheConfig) -> Embedding {
    let chosen = config
        .override_for(&layer.id)
        .and_then(|o| o.embedding_method)
        .unwrap_or(config.global.default_embedding);
    match (&layer.op, chosen) {
        (LayerOp::Conv2d { .. }, Embedding::Diagonal) => Embedding::Square,
        (LayerOp::Linear, Embedding::Square) => Embedding::Diagonal,
        (_, e) => e,
    }
}

pub fn effective_act_degree(layer: &LayerSpec, config: &FheConfig) -> Option<u32> {
    match layer.op {
        LayerOp::ActPoly { act_degree, .. } => Some(
            config
                .override_for(&layer.id)
                .and_then(|o| o.act_degree)
                .unwrap_or(act_degree),
        ),
        _ => None,
    }
}

/// Giant-step count `n_diag` for the baby-step/giant-step layout: the padded
/// work dimension of the layer.
pub fn bsgs_work_dim(layer: &LayerSpec) -> u64 {
    match layer.op {
        LayerOp::Linear => (layer.in_elems() as u64).next_power_of_two(),
        LayerOp::Conv2d {
            kernel,
            channels_in,
            ..
        } => (kernel * kernel * channels_in) as u64,
        LayerOp::AvgPool { stride } => (stride * stride) as u64,
        _ => 1,
    }
}

pub fn effective_bsgs_gap(layer: &LayerSpec, config: &FheConfig) -> u32 {
    config
        .override_for(&layer.id)
        .and_then(|o| o.bsgs_gap)
        .unwrap_or_else(|| default_bsgs_gap(layer))
}

pub fn default_bsgs_gap(layer: &LayerSpec) -> u32 {
    ((bsgs_work_dim(layer) as f64).sqrt().round() as u32).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionKind {
    // Global moves.
    ShortenModulusTail,
    ExtendModulusTail,
    RelaxScaleOneStep,
    TightenScaleOneStep,
    IncreaseBootstrapInterval,
    DecreaseBootstrapInterval,
    // Layer-local moves.
    SwitchPackingSquareToHybrid,
    SwitchPackingHybridToSquare,
    AdjustBsgsGapUp,
    AdjustBsgsGapDown,
    LowerActivationDegree,
    CapParallelBlocks,
}

impl DirectionKind {
    pub fn is_layer_local(&self) -> bool {
        use DirectionKind::*;
        matches!(
            self,
            SwitchPackingSquareToHybrid
                | SwitchPackingHybridToSquare
                | AdjustBsgsGapUp
                | AdjustBsgsGapDown
                | LowerActivationDegree
                | CapParallelBlocks
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub kind: DirectionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_layer: Option<String>,
    /// Numeric argument where the move needs one (block cap).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arg: Option<u32>,
}

impl Direction {
    pub fn global(kind: DirectionKind) -> Self {
        Direction {
            kind,
            target_layer: None,
            arg: None,
        }
    }

    pub fn layer(kind: DirectionKind, target: impl Into<String>) -> Self {
        Direction {
            kind,
            target_layer: Some(target.into()),
            arg: None,
        }
    }

    pub fn with_arg(mut self, arg: u32) -> Self {
        self.arg = Some(arg);
        self
    }

    pub fn describe(&self) -> String {
        match (&self.target_layer, self.arg) {
            (Some(t), Some(a)) => format!("{:?}({t}, {a})", self.kind),
            (Some(t), None) => format!("{:?}({t})", self.kind),
            (None, Some(a)) => format!("{:?}({a})", self.kind),
            (None, None) => format!("{:?}", self.kind),
        }
    }
}

/// Who is asking for the edit. Layer agents may only touch per-layer
/// overrides; global agents may only touch the global block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    GlobalAgent,
    LayerAgent,
}

/// True when the depth mask forbids this direction. Only interval widening
/// is depth-increasing in the current vocabulary: a wider interval can merge
/// segments that have no slack left. Packing switches and degree lowering
/// never add depth, and tail extension always buys levels.
pub fn direction_blocked_by_mask(dir: &Direction, depth_mask: &BTreeSet<String>) -> bool {
    match dir.kind {
        DirectionKind::IncreaseBootstrapInterval => !depth_mask.is_empty(),
        _ => false,
    }
}

/// Applies one direction, returning the patched config. The input config is
/// not modified. Preconditions are checked in order: scope, mask, then the
/// structural invariants of the result.
pub fn apply_direction(
    config: &FheConfig,
    graph: &ModelGraph,
    dir: &Direction,
    scope: Scope,
    depth_mask: &BTreeSet<String>,
) -> Result<FheConfig, PatchError> {
    use DirectionKind::*;

    if scope == Scope::LayerAgent && !dir.kind.is_layer_local() {
        return Err(PatchError::ScopeViolation(format!(
            "layer agent may not apply global move {:?}",
            dir.kind
        )));
    }
    if scope == Scope::GlobalAgent && dir.kind.is_layer_local() {
        return Err(PatchError::ScopeViolation(format!(
            "global agent must delegate layer move {:?}",
            dir.kind
        )));
    }
    if direction_blocked_by_mask(dir, depth_mask) {
        return Err(PatchError::MaskViolation(format!(
            "{:?} blocked: {} masked layer(s) have no depth slack",
            dir.kind,
            depth_mask.len()
        )));
    }

    let inv = |msg: String| Err(PatchError::InvariantViolation(msg));
    let mut out = config.clone();

    if dir.kind.is_layer_local() {
        let Some(target) = dir.target_layer.as_deref() else {
            return inv(format!("{:?} requires a target layer", dir.kind));
        };
        let Some(layer) = graph.layer(target) else {
            return inv(format!("target layer `{target}` not in graph"));
        };
        let entry = out.overrides.entry(target.to_string()).or_default();
        match dir.kind {
            SwitchPackingSquareToHybrid => {
                if effective_embedding(layer, config) != Embedding::Square {
                    return inv(format!("`{target}` is not square-packed"));
                }
                entry.embedding_method = Some(Embedding::Hybrid);
            }
            SwitchPackingHybridToSquare => {
                if effective_embedding(layer, config) != Embedding::Hybrid {
                    return inv(format!("`{target}` is not hybrid-packed"));
                }
                entry.embedding_method = Some(Embedding::Square);
            }
            AdjustBsgsGapUp => {
                let cur = effective_bsgs_gap(layer, config) as u64;
                if cur.saturating_mul(2) > bsgs_work_dim(layer).max(1) {
                    return inv(format!("bsgs gap on `{target}` already at work dimension"));
                }
                entry.bsgs_gap = Some((cur * 2) as u32);
            }
            AdjustBsgsGapDown => {
                let cur = effective_bsgs_gap(layer, config);
                if cur < 2 {
                    return inv(format!("bsgs gap on `{target}` already minimal"));
                }
                entry.bsgs_gap = Some(cur / 2);
            }
            LowerActivationDegree => {
                let Some(cur) = effective_act_degree(layer, config) else {
                    return inv(format!("`{target}` is not an ActPoly layer"));
                };
                let Some(next) = ACT_DEGREE_LADDER.iter().copied().find(|&d| d < cur) else {
                    return inv(format!("`{target}` already at the lowest degree rung"));
                };
                entry.act_degree = Some(next);
            }
            CapParallelBlocks => {
                let Some(cap) = dir.arg else {
                    return inv("CapParallelBlocks requires an arg".into());
                };
                if cap == 0 {
                    return inv("block cap must be >= 1".into());
                }
                entry.max_parallel_blocks = Some(cap);
            }
            _ => unreachable!("layer-local kinds handled above"),
        }
        if entry.is_empty() {
            out.overrides.remove(target);
        }
    } else {
        let g = &mut out.global;
        match dir.kind {
            ShortenModulusTail => {
                if g.modulus_chain.len() <= 2 {
                    return inv("chain already at minimum length 2".into());
                }
                g.modulus_chain.pop();
            }
            ExtendModulusTail => {
                g.modulus_chain.push(default_tail_entry(g));
            }
            RelaxScaleOneStep => {
                if g.log_scale < MIN_LOG_SCALE + SCALE_STEP_BITS {
                    return inv(format!("log_scale {} at relaxation floor", g.log_scale));
                }
                g.log_scale -= SCALE_STEP_BITS;
            }
            TightenScaleOneStep => {
                let min_entry = *g.modulus_chain.iter().min().expect("validated chain");
                if g.log_scale + SCALE_STEP_BITS > min_entry {
                    return inv(format!(
                        "log_scale {} cannot exceed smallest chain entry {min_entry}",
                        g.log_scale
                    ));
                }
                g.log_scale += SCALE_STEP_BITS;
            }
            IncreaseBootstrapInterval => {
                g.bootstrap_interval += 1;
            }
            DecreaseBootstrapInterval => {
                if g.bootstrap_interval < 2 {
                    return inv("bootstrap_interval already at 1".into());
                }
                g.bootstrap_interval -= 1;
            }
            _ => unreachable!("global kinds handled above"),
        }
    }

    out.validate_against(graph)
        .map_err(|e| PatchError::InvariantViolation(e.to_string()))?;
    Ok(out)
}

/// Bit size used when the tail is extended: one more interior level at the
/// scale's precision, clamped to the legal entry range.
pub fn default_tail_entry(g: &GlobalConfig) -> u32 {
    g.log_scale
        .clamp(MIN_CHAIN_ENTRY_BITS, MAX_CHAIN_ENTRY_BITS)
}

/// Every direction returned here applies cleanly via [`apply_direction`]
/// with the same scope and mask (enumeration soundness).
pub fn enumerate_directions(
    config: &FheConfig,
    graph: &ModelGraph,
    scope: Scope,
    bottlenecks: &[String],
    depth_mask: &BTreeSet<String>,
) -> Vec<Direction> {
    use DirectionKind::*;
    let mut out = Vec::new();
    match scope {
        Scope::GlobalAgent => {
            let g = &config.global;
            if g.modulus_chain.len() > 2 {
                out.push(Direction::global(ShortenModulusTail));
            }
            out.push(Direction::global(ExtendModulusTail));
            if g.log_scale >= MIN_LOG_SCALE + SCALE_STEP_BITS {
                out.push(Direction::global(RelaxScaleOneStep));
            }
            let min_entry = *g.modulus_chain.iter().min().expect("validated chain");
            if g.log_scale + SCALE_STEP_BITS <= min_entry {
                out.push(Direction::global(TightenScaleOneStep));
            }
            if depth_mask.is_empty() {
                out.push(Direction::global(IncreaseBootstrapInterval));
            }
            if g.bootstrap_interval >= 2 {
                out.push(Direction::global(DecreaseBootstrapInterval));
            }
        }
        Scope::LayerAgent => {
            for id in bottlenecks {
                let Some(layer) = graph.layer(id) else {
                    continue;
                };
                match effective_embedding(layer, config) {
                    Embedding::Square => {
                        out.push(Direction::layer(SwitchPackingSquareToHybrid, id));
                    }
                    Embedding::Hybrid => {
                        out.push(Direction::layer(SwitchPackingHybridToSquare, id));
                    }
                    Embedding::Diagonal => {}
                }
                if matches!(layer.op, LayerOp::Linear | LayerOp::Conv2d { .. }) {
                    let gap = effective_bsgs_gap(layer, config) as u64;
                    if gap * 2 <= bsgs_work_dim(layer).max(1) {
                        out.push(Direction::layer(AdjustBsgsGapUp, id));
                    }
                    if gap >= 2 {
                        out.push(Direction::layer(AdjustBsgsGapDown, id));
                    }
                }
                if let Some(deg) = effective_act_degree(layer, config) {
                    if ACT_DEGREE_LADDER.iter().any(|&d| d < deg) {
                        out.push(Direction::layer(LowerActivationDegree, id));
                    }
                }
                let uncapped = uncapped_blocks(layer, &config.global);
                let current_cap = config
                    .override_for(id)
                    .and_then(|o| o.max_parallel_blocks)
                    .unwrap_or(u32::MAX);
                if uncapped > 1 {
                    let proposed = (uncapped / 2).max(1) as u32;
                    if proposed < current_cap.min(uncapped as u32) {
                        out.push(Direction::layer(CapParallelBlocks, id).with_arg(proposed));
                    }
                }
            }
        }
    }
    out
}

/// Ciphertext blocks the layer's output occupies before any cap.
pub fn uncapped_blocks(layer: &LayerSpec, g: &GlobalConfig) -> u64 {
    if matches!(layer.op, LayerOp::Flatten) {
        return 0;
    }
    let slots = 1u64 << (g.log_n - 1);
    (layer.out_elems() as u64).div_ceil(slots).max(1)
}
