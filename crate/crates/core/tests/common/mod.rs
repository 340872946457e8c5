#![allow(dead_code)]

use forestnet::autocontext::ForestStack;
use forestnet::features::{FeatureSource, FeatureStack, OffsetFeatureId};
use forestnet::forest::{DecisionTree, FeatureSchema, Forest, RandomTreeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tree_spec(classes: usize, channels: usize, delta_max: u32, max_depth: usize) -> RandomTreeSpec {
    RandomTreeSpec {
        classes,
        channels,
        delta_max,
        max_depth,
        split_probability: 0.85,
        threshold_range: (-1.0, 1.0),
        max_votes: 20,
    }
}

pub fn random_forest(rng: &mut ChaCha8Rng, trees: usize, spec: &RandomTreeSpec) -> Forest {
    let t = (0..trees).map(|_| DecisionTree::random(spec, rng)).collect();
    Forest::new(t, spec.classes, FeatureSchema { channels: spec.channels, delta_max: spec.delta_max }).unwrap()
}

/// A `levels`-level stack over `filters` channels; context thresholds are
/// drawn inside `[0, 1]` where the class maps live.
pub fn random_stack(rng: &mut ChaCha8Rng, levels: usize, filters: usize, classes: usize, trees: usize, depth: usize) -> ForestStack {
    let forests = (0..levels)
        .map(|k| {
            let channels = if k == 0 { filters } else { filters + classes };
            let mut spec = tree_spec(classes, channels, 2, depth);
            if k > 0 {
                spec.threshold_range = (0.05, 0.95);
            }
            random_forest(rng, trees, &spec)
        })
        .collect();
    ForestStack::new(forests, filters, None).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize) -> FeatureStack {
    let data = (0..w * h * channels).map(|_| rng.random_range(-1.5f32..1.5)).collect();
    FeatureStack::from_planes(w, h, (0..channels).map(|c| format!("c{c}")).collect(), data).unwrap()
}

/// A feature vector with one independent value per distinct offset feature.
pub struct RandomInput {
    seed: u64,
}

impl RandomInput {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        RandomInput { seed: rng.random() }
    }
}

impl FeatureSource for RandomInput {
    fn feature(&self, fid: OffsetFeatureId) -> f64 {
        let key = self.seed
            ^ (fid.channel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ ((fid.dx as i64 as u64) << 20)
            ^ ((fid.dy as i64 as u64) << 40);
        ChaCha8Rng::seed_from_u64(key).random_range(-1.5..1.5)
    }
}

/// Smallest distance to its threshold among the split tests `x` visits.
pub fn routing_margin<X: FeatureSource + ?Sized>(forest: &Forest, x: &X) -> f64 {
    let mut m = f64::INFINITY;
    for t in forest.trees() {
        let l = t.leaf(t.leaf_index(x)).unwrap();
        for &(n, _) in &l.path {
            let s = t.split(n).unwrap();
            m = m.min((x.feature(s.feature) - s.threshold).abs());
        }
    }
    m
}
