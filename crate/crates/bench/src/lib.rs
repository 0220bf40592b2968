//! Shared fixtures for the pipeline benchmarks: a LeNet-scale model and a
//! deep configuration that forces the bootstrap planner to work.

use ckkstune_core::{Embedding, FheConfig, GlobalConfig, ModelGraph};

/// Nine-layer convolutional classifier over a 1x32x32 input.
pub fn lenet() -> ModelGraph {
    ModelGraph::from_json(include_str!("../../../fixtures/lenet_model.json"))
        .expect("bundled model parses")
}

/// A chain deep enough to run the model without bootstrapping.
pub fn roomy_config() -> FheConfig {
    FheConfig::new(GlobalConfig {
        log_n: 16,
        modulus_chain: std::iter::once(60)
            .chain(std::iter::repeat(40).take(17))
            .collect(),
        log_scale: 40,
        sigma: 3.2,
        default_embedding: Embedding::Square,
        bootstrap_interval: 1,
        security_target_bits: 128,
    })
}

/// A short chain that needs several bootstraps for the same model.
pub fn tight_config() -> FheConfig {
    FheConfig::new(GlobalConfig {
        log_n: 16,
        modulus_chain: vec![60, 35, 35, 35, 35, 35, 35, 35, 35],
        log_scale: 35,
        sigma: 3.2,
        default_embedding: Embedding::Hybrid,
        bootstrap_interval: 1,
        security_target_bits: 128,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ckkstune_core::{analyze, depth_costs, schedule};

    #[test]
    fn fixtures_are_usable() {
        let graph = lenet();
        assert_eq!(graph.layers.len(), 9);
        assert!(analyze(&graph, &roomy_config()).depth_ok);
        let costs = depth_costs(&graph, &tight_config());
        let plan = schedule(&graph, &tight_config(), &costs).expect("schedulable");
        assert!(plan.boot_count > 0);
    }
}
