//! Bootstrap placement. Greedy, latest-possible: walk the graph spending
//! levels, and when the next layer would overflow, refresh right after the
//! last layer that still fit. A refresh burns [`BOOT_LEVEL_COST`] levels of
//! the restored chain, so segments after the first run on a smaller budget.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::config::{Direction, DirectionKind, FheConfig};
use crate::model::ModelGraph;

/// Levels the bootstrap circuit itself consumes out of a refreshed chain.
pub const BOOT_LEVEL_COST: u32 = 3;
/// Segments whose leftover slack is below this many levels get their layers
/// masked against depth-increasing edits.
pub const MASK_SLACK_THRESHOLD: u32 = 1;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("bootstrap schedule infeasible: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub layer_ids: Vec<String>,
    /// Levels consumed inside this segment.
    pub depth: u32,
    /// Levels the segment had available.
    pub budget: u32,
    pub slack: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    /// Layer ids a bootstrap follows, in graph order.
    pub boot_after: Vec<String>,
    pub segments: Vec<Segment>,
    pub boot_count: u32,
    /// Layers living in segments with slack below the threshold.
    pub depth_mask: BTreeSet<String>,
}

impl BootstrapPlan {
    pub fn empty() -> Self {
        BootstrapPlan {
            boot_after: Vec::new(),
            segments: Vec::new(),
            boot_count: 0,
            depth_mask: BTreeSet::new(),
        }
    }

    /// Smallest leftover slack across segments; `None` for an empty plan.
    pub fn min_slack(&self) -> Option<u32> {
        self.segments.iter().map(|s| s.slack).min()
    }
}

/// Places bootstraps for the given per-layer depth costs. The first segment
/// runs on the full usable chain; every later segment runs on
/// `usable - BOOT_LEVEL_COST`. Consecutive bootstraps must be at least
/// `bootstrap_interval` layers apart. A layer that cannot fit even on a
/// fresh budget makes the configuration infeasible.
pub fn schedule(
    graph: &ModelGraph,
    config: &FheConfig,
    depth_costs: &[(String, u32)],
) -> Result<BootstrapPlan, ScheduleError> {
    debug_assert_eq!(depth_costs.len(), graph.layers.len());
    let usable = config.global.usable_levels();
    let restored = usable.saturating_sub(BOOT_LEVEL_COST);
    let interval = config.global.bootstrap_interval as usize;

    let mut boot_after = Vec::new();
    let mut segments = Vec::new();
    let mut seg_start = 0usize;
    let mut budget = usable;
    let mut used = 0u32;
    let mut prev_boot: Option<usize> = None;

    for (i, (id, cost)) in depth_costs.iter().enumerate() {
        if used + cost <= budget {
            used += cost;
            continue;
        }
        if i == seg_start {
            return Err(ScheduleError::Infeasible(format!(
                "layer `{id}` needs {cost} levels but the segment budget is {budget}"
            )));
        }
        let boot_pos = i - 1;
        if let Some(p) = prev_boot {
            if boot_pos - p < interval {
                return Err(ScheduleError::Infeasible(format!(
                    "bootstrap after `{}` would sit {} layer(s) after the previous one; \
                     the configured interval requires {interval}",
                    depth_costs[boot_pos].0,
                    boot_pos - p
                )));
            }
        }
        boot_after.push(depth_costs[boot_pos].0.clone());
        segments.push(Segment {
            layer_ids: depth_costs[seg_start..=boot_pos]
                .iter()
                .map(|(l, _)| l.clone())
                .collect(),
            depth: used,
            budget,
            slack: budget - used,
        });
        prev_boot = Some(boot_pos);
        seg_start = i;
        budget = restored;
        if *cost > budget {
            return Err(ScheduleError::Infeasible(format!(
                "layer `{id}` needs {cost} levels but only {budget} remain after a bootstrap"
            )));
        }
        used = *cost;
    }

    segments.push(Segment {
        layer_ids: depth_costs[seg_start..]
            .iter()
            .map(|(l, _)| l.clone())
            .collect(),
        depth: used,
        budget,
        slack: budget - used,
    });

    let depth_mask = segments
        .iter()
        .filter(|s| s.slack < MASK_SLACK_THRESHOLD)
        .flat_map(|s| s.layer_ids.iter().cloned())
        .collect();

    Ok(BootstrapPlan {
        boot_count: boot_after.len() as u32,
        boot_after,
        segments,
        depth_mask,
    })
}

/// True when the depth mask forbids the direction under this plan. Interval
/// widening can merge segments, so it is blocked whenever any layer is
/// masked; packing switches, degree lowering, and tail extension never add
/// depth to a masked layer.
pub fn mask_blocks(plan: &BootstrapPlan, dir: &Direction) -> bool {
    match dir.kind {
        DirectionKind::IncreaseBootstrapInterval => !plan.depth_mask.is_empty(),
        _ => false,
    }
}
