//! Models shared by the inference benchmarks.

use forestnet::autocontext::{ForestStack, LevelParams};
use forestnet::deepnet::SparseNet;
use forestnet::features::FeatureStack;
use forestnet::forest::{ForestParams, SamplingParams, TreeParams};
use forestnet::mapback::{map_back_1, RemappedStack};
use forestnet::pipeline::{map_net, prepare, train_stack, ExperimentConfig};
use forestnet::synth::SyntheticTask;

pub struct Fixture {
    pub filters: FeatureStack,
    pub stack: ForestStack,
    pub net: SparseNet,
    pub remapped: RemappedStack,
}

/// A two-level stack trained on synthetic bands, its net, and the net mapped
/// straight back. `filters` belongs to a held-out image of `size`².
pub fn fixture(size: usize, trees: usize, depth: usize) -> forestnet::Result<Fixture> {
    let task = SyntheticTask { width: size, height: size, train: 4, test: 1, seed: 1, ..SyntheticTask::default() };
    let set = task.generate()?;
    let cfg = ExperimentConfig {
        classes: task.classes,
        level: LevelParams {
            forest: ForestParams { trees, tree: TreeParams { max_depth: depth, delta_max: 16, ..TreeParams::default() } },
            sampling: SamplingParams { stride: 2, ..SamplingParams::default() },
        },
        ..ExperimentConfig::default()
    };
    let (pre, data) = prepare(cfg.bank()?, &set.train)?;
    let stack = train_stack(&cfg, &pre, &data)?;
    let net = map_net(&cfg, &stack)?;
    let remapped = map_back_1(&net, &stack)?;
    let filters = pre.prepare(&set.test[0].image)?;
    Ok(Fixture { filters, stack, net, remapped })
}
