//! Mapping a trained network back onto its source forest stack.
//!
//! Map back #1 reads thresholds and votes straight off the split and class
//! layers. Map back #2 keeps those thresholds but re-estimates each leaf's
//! votes as the mean, over the training pixels routed to it, of the tree's
//! share of the network's class scores.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autocontext::{run_levels, ForestStack, StackTrace};
use crate::deepnet::SparseNet;
use crate::error::{Error, Result};
use crate::features::{FeatureStack, PixelFeatures};
use crate::forest::{NodeId, Sample, Side};
use crate::grid::{ClassMaps, Image};
use crate::rf2nn::{class_normalize, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapBackVariant {
    Mb1,
    Mb2,
}

impl fmt::Display for MapBackVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapBackVariant::Mb1 => "mb1",
            MapBackVariant::Mb2 => "mb2",
        })
    }
}

impl FromStr for MapBackVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mb1" => Ok(MapBackVariant::Mb1),
            "mb2" => Ok(MapBackVariant::Mb2),
            other => Err(Error::Config(format!("unknown map-back variant '{other}' (mb1 or mb2)"))),
        }
    }
}

/// A forest stack whose votes may be signed. Levels are evaluated with class
/// normalization between levels and softmax at the end, like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct RemappedStack {
    pub stack: ForestStack,
    pub variant: MapBackVariant,
}

impl RemappedStack {
    pub fn predict(&self, filters: &FeatureStack) -> Result<StackTrace> {
        let last = self.stack.levels().len() - 1;
        run_levels(self.stack.levels(), self.stack.filter_channels(), filters, |k, mut v| {
            post_activation(k == last, &mut v);
            v
        })
    }

    pub fn predict_image(&self, image: &Image) -> Result<StackTrace> {
        let pre = self
            .stack
            .preprocessor()
            .ok_or_else(|| Error::Config("stack has no preprocessor; pass a feature stack".into()))?;
        self.predict(&pre.prepare(image)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let k = self.stack.levels().len();
        let acts: Vec<&str> = (0..k).map(|i| if i + 1 == k { "softmax" } else { "class_norm" }).collect();
        self.stack.save_with(
            dir,
            &[
                ("mapback".into(), self.variant.to_string()),
                ("votes".into(), "signed".into()),
                ("activations".into(), acts.join(",")),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<RemappedStack> {
        let (stack, extra) = ForestStack::load_with(dir)?;
        let variant = extra
            .get("mapback")
            .ok_or_else(|| Error::format("manifest", "not a remapped stack (no 'mapback' entry)"))?
            .parse()?;
        Ok(RemappedStack { stack, variant })
    }
}

/// Whether a stack directory holds a remapped stack.
pub fn is_remapped(dir: &Path) -> Result<bool> {
    Ok(ForestStack::load_with(dir)?.1.contains_key("mapback"))
}

fn post_activation(last: bool, v: &mut [f64]) {
    if last {
        softmax(v);
    } else {
        class_normalize(v);
    }
}

fn check_source(net: &SparseNet, source: &ForestStack) -> Result<()> {
    if net.levels() != source.levels().len() || net.classes() != source.classes() {
        return Err(Error::MapBack("net and stack differ in levels or classes".into()));
    }
    for (k, (b, f)) in net.blocks().iter().zip(source.levels()).enumerate() {
        if b.trees.len() != f.trees().len() {
            return Err(Error::MapBack(format!("level {k}: net has {} trees, forest {}", b.trees.len(), f.trees().len())));
        }
        for (t, (tu, tree)) in b.trees.iter().zip(f.trees()).enumerate() {
            if tu.split_nodes != tree.split_ids() || tu.leaf_nodes != tree.leaf_ids() {
                return Err(Error::MapBack(format!("level {k} tree {t}: node layout differs from the stack")));
            }
        }
    }
    Ok(())
}

/// Read thresholds `θ = -b / w` and votes (the class-layer weights) off the
/// network. Fails if a split weight is zero or negative, or if a leaf unit no
/// longer encodes its path with the construction signs.
pub fn map_back_1(net: &SparseNet, source: &ForestStack) -> Result<RemappedStack> {
    check_source(net, source)?;
    let mut stack = source.clone();
    for (k, (block, forest)) in net.blocks().iter().zip(stack.levels_mut()).enumerate() {
        let split_b = block.split.bias().expect("split layer has biases");
        let mut vote_w: HashMap<(u32, u32), f64> = HashMap::new();
        for (e, (s, d)) in block.vote.edge_list().into_iter().enumerate() {
            vote_w.insert((s, d), block.vote.weights()[e]);
        }
        for (t, (tu, tree)) in block.trees.iter().zip(forest.trees_mut()).enumerate() {
            let mut unit_of: HashMap<NodeId, usize> = HashMap::new();
            for (i, &n) in tu.split_nodes.iter().enumerate() {
                let u = tu.splits.start + i;
                unit_of.insert(n, u);
                let row = block.split.row(u);
                if row.len() != 1 {
                    return Err(Error::MapBack(format!("level {k} tree {t} node {n}: split unit has {} inputs", row.len())));
                }
                let tap = block.taps[block.split.sources()[row.start] as usize];
                if tap != tree.split(n).expect("split").feature {
                    return Err(Error::MapBack(format!("level {k} tree {t} node {n}: split reads a different feature")));
                }
                let w = block.split.weights()[row.start];
                if w == 0.0 {
                    return Err(Error::MapBack(format!("level {k} tree {t} node {n}: zero input weight, threshold undefined")));
                }
                if w < 0.0 {
                    return Err(Error::MapBack(format!("level {k} tree {t} node {n}: input weight changed sign")));
                }
                tree.set_threshold(n, -split_b[u] / w)?;
            }
            for (j, &l) in tu.leaf_nodes.iter().enumerate() {
                let u = tu.leaves.start + j;
                let row = block.leaf.row(u);
                let path = tree.leaf(l).expect("leaf").path.clone();
                for (n, side) in path {
                    let su = unit_of[&n] as u32;
                    let w = row
                        .clone()
                        .find(|&e| block.leaf.sources()[e] == su)
                        .map(|e| block.leaf.weights()[e])
                        .unwrap_or(0.0);
                    let ok = match side {
                        Side::Left => w < 0.0,
                        Side::Right => w > 0.0,
                    };
                    if !ok {
                        return Err(Error::MapBack(format!(
                            "level {k} tree {t} leaf {l}: path weight from node {n} no longer routes {side:?}"
                        )));
                    }
                }
                let votes = (0..net.classes())
                    .map(|c| vote_w.get(&(u as u32, c as u32)).copied().unwrap_or(0.0))
                    .collect();
                tree.set_votes(l, votes)?;
            }
        }
    }
    Ok(RemappedStack { stack, variant: MapBackVariant::Mb1 })
}

/// Per-level network quantities at one set of training pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelActivations {
    pub trees: usize,
    pub classes: usize,
    pub leaf_units: usize,
    /// `samples × leaf_units` leaf-layer activations, when kept.
    pub activations: Option<Vec<f64>>,
    /// `samples × trees × classes`: each tree's share of the class scores.
    pub z: Vec<f64>,
}

impl LevelActivations {
    pub fn z(&self, sample: usize, tree: usize) -> &[f64] {
        let o = (sample * self.trees + tree) * self.classes;
        &self.z[o..o + self.classes]
    }

    pub fn activation(&self, sample: usize) -> Option<&[f64]> {
        self.activations.as_ref().map(|a| &a[sample * self.leaf_units..(sample + 1) * self.leaf_units])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafActivationTable {
    pub samples: Vec<Sample>,
    pub levels: Vec<LevelActivations>,
}

/// Run the network over each image holding samples and record, per level
/// and sample, every tree's `z = Σ_l a(l) · w(l, c)` over its own leaves.
pub fn compute_z(
    net: &SparseNet,
    stacks: &[&FeatureStack],
    samples: &[Sample],
    keep_activations: bool,
) -> Result<LeafActivationTable> {
    let k_levels = net.levels();
    let c = net.classes();
    let mut levels: Vec<LevelActivations> = net
        .blocks()
        .iter()
        .map(|b| LevelActivations {
            trees: b.trees.len(),
            classes: c,
            leaf_units: b.leaf.units(),
            activations: keep_activations.then(|| vec![0.0; samples.len() * b.leaf.units()]),
            z: vec![0.0; samples.len() * b.trees.len() * c],
        })
        .collect();
    let mut by_image: Vec<Vec<usize>> = vec![Vec::new(); stacks.len()];
    for (i, s) in samples.iter().enumerate() {
        by_image
            .get_mut(s.image)
            .ok_or_else(|| Error::Index(format!("sample refers to image {} of {}", s.image, stacks.len())))?
            .push(i);
    }
    for (img, idx) in by_image.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let stack = stacks[img];
        let fwd = net.forward(stack, &[])?;
        for (k, lvl) in levels.iter_mut().enumerate().take(k_levels) {
            let prev = k.checked_sub(1).map(|p| &fwd.levels[p]);
            let rows: Vec<(Vec<f64>, Vec<f64>)> = idx
                .par_iter()
                .map(|&i| {
                    let s = samples[i];
                    let st = net.level_state(k, stack, prev, s.x, s.y);
                    let z: Vec<f64> = net.blocks()[k].tree_scores(&st.leaf_act).concat();
                    (z, st.leaf_act)
                })
                .collect();
            for (&i, (z, act)) in idx.iter().zip(rows) {
                let tz = lvl.trees * c;
                lvl.z[i * tz..(i + 1) * tz].copy_from_slice(&z);
                if let Some(a) = lvl.activations.as_mut() {
                    a[i * lvl.leaf_units..(i + 1) * lvl.leaf_units].copy_from_slice(&act);
                }
            }
        }
    }
    Ok(LeafActivationTable { samples: samples.to_vec(), levels })
}

/// Outcome of map back #2 per level.
#[derive(Debug, Clone, PartialEq)]
pub struct Mb2Report {
    /// Fraction of leaves that received at least one training sample.
    pub populated_fraction: Vec<f64>,
    /// Leaves reached by each sample, `levels × samples × trees`.
    pub leaves: Vec<Vec<Vec<NodeId>>>,
}

/// Map back #2. Levels are processed in order; level `i` routes the samples
/// through the already-updated levels below it, then sets every populated
/// leaf's votes to the mean of its tree's `z` over the samples it received.
/// Unpopulated leaves keep their map-back-#1 votes.
pub fn map_back_2(
    net: &SparseNet,
    source: &ForestStack,
    stacks: &[&FeatureStack],
    samples: &[Sample],
) -> Result<(RemappedStack, Mb2Report)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("map back #2 needs training samples".into()));
    }
    let mut rs = map_back_1(net, source)?;
    let table = compute_z(net, stacks, samples, false)?;
    let levels = rs.stack.levels().len();
    let f = rs.stack.filter_channels();
    let mut by_image: Vec<Vec<usize>> = vec![Vec::new(); stacks.len()];
    for (i, s) in samples.iter().enumerate() {
        by_image[s.image].push(i);
    }
    // Class maps of the remapped levels processed so far, per image.
    let mut prev: Vec<Option<ClassMaps>> = vec![None; stacks.len()];
    let mut report = Mb2Report { populated_fraction: Vec::new(), leaves: Vec::new() };
    for k in 0..levels {
        let z = &table.levels[k];
        let forest = &rs.stack.levels()[k];
        let mut routed: Vec<Vec<NodeId>> = vec![Vec::new(); samples.len()];
        let mut inputs: Vec<Option<FeatureStack>> = vec![None; stacks.len()];
        for (img, idx) in by_image.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let input = match &prev[img] {
                None => stacks[img].clone(),
                Some(maps) => stacks[img].with_context(maps)?,
            };
            if input.channels() != f + if k == 0 { 0 } else { rs.stack.classes() } {
                return Err(Error::Schema(format!("image {img}: unexpected channel count")));
            }
            forest.check_stack(&input)?;
            for &i in idx {
                let s = samples[i];
                routed[i] = forest.leaves(&PixelFeatures { stack: &input, x: s.x, y: s.y });
            }
            inputs[img] = Some(input);
        }
        let c = rs.stack.classes();
        let mut sums: Vec<HashMap<NodeId, (Vec<f64>, usize)>> = vec![HashMap::new(); forest.trees().len()];
        for (i, leaves) in routed.iter().enumerate() {
            for (t, &l) in leaves.iter().enumerate() {
                let e = sums[t].entry(l).or_insert_with(|| (vec![0.0; c], 0));
                for (acc, v) in e.0.iter_mut().zip(z.z(i, t)) {
                    *acc += v;
                }
                e.1 += 1;
            }
        }
        let total: usize = forest.trees().iter().map(|t| t.leaf_ids().len()).sum();
        let populated: usize = sums.iter().map(HashMap::len).sum();
        if populated == 0 {
            return Err(Error::MapBack(format!("level {k}: no sample reached any leaf")));
        }
        let forest = &mut rs.stack.levels_mut()[k];
        for (tree, leaf_sums) in forest.trees_mut().iter_mut().zip(sums) {
            for (l, (sum, n)) in leaf_sums {
                tree.set_votes(l, sum.into_iter().map(|s| s / n as f64).collect())?;
            }
        }
        report.populated_fraction.push(populated as f64 / total as f64);
        report.leaves.push(routed);
        if k + 1 < levels {
            let forest = &rs.stack.levels()[k];
            for (img, input) in inputs.into_iter().enumerate() {
                if let Some(input) = input {
                    prev[img] = Some(crate::forest::map_pixels(&input, c, |x, y| {
                        let mut v = forest.vote_sum(&PixelFeatures { stack: &input, x, y });
                        post_activation(false, &mut v);
                        v
                    }));
                }
            }
        }
    }
    rs.variant = MapBackVariant::Mb2;
    Ok((rs, report))
}

/// Squared error `Σ_x ||z_x - v||²` of votes `v` for one leaf over the samples
/// that reached it.
pub fn leaf_vote_error(table: &LeafActivationTable, level: usize, tree: usize, samples: &[usize], votes: &[f64]) -> f64 {
    let lvl = &table.levels[level];
    samples
        .iter()
        .map(|&i| lvl.z(i, tree).iter().zip(votes).map(|(z, v)| (z - v) * (z - v)).sum::<f64>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autocontext::{LabeledStack, LevelParams};
    use crate::deepnet::{map_stack_to_net, tree_structure_layers, train_sgd, LayerRef, ParamId, ParamKind, Stage, TrainConfig};
    use crate::features::OffsetFeatureId;
    use crate::forest::{DecisionTree, FeatureSchema, Forest, ForestParams, LeafNode, Node, SamplingParams, SplitNode, TreeParams};
    use crate::grid::LabelMap;
    use crate::rf2nn::{StrengthTriple, VoteScaling};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> Vec<LabeledStack> {
        (0..n)
            .map(|s| {
                let (w, h) = (12, 10);
                let mut rng = ChaCha8Rng::seed_from_u64(40 + s as u64);
                let labels: Vec<u8> = (0..w * h).map(|i| (((i % w) / 4) % 3) as u8).collect();
                let mut v: Vec<f32> = labels.iter().map(|&l| l as f32 + rng.random_range(-0.7..0.7)).collect();
                v.extend((0..w * h).map(|_| rng.random_range(-1.0f32..1.0)));
                LabeledStack {
                    stack: FeatureStack::from_planes(w, h, vec!["a".into(), "b".into()], v).unwrap(),
                    labels: LabelMap::new(w, h, labels).unwrap(),
                }
            })
            .collect()
    }

    fn stack(levels: usize, d: &[LabeledStack]) -> ForestStack {
        let p = LevelParams {
            forest: ForestParams {
                trees: 3,
                tree: TreeParams { max_depth: 3, min_samples_split: 4, candidate_features: 12, threshold_candidates: 8, delta_max: 2 },
            },
            sampling: SamplingParams { stride: 1, per_class_per_image: Some(20), fraction: 1.0 },
        };
        ForestStack::train(d, 3, &vec![p; levels], 11).unwrap()
    }

    fn all_pixels(d: &[LabeledStack]) -> Vec<Sample> {
        let mut out = Vec::new();
        for (image, ls) in d.iter().enumerate() {
            for y in 0..ls.labels.height() {
                for x in 0..ls.labels.width() {
                    out.push(Sample { image, x, y, label: ls.labels.get(x, y) });
                }
            }
        }
        out
    }

    #[test]
    fn mb1_of_untrained_net_recovers_stack() {
        let d = data(2);
        let src = stack(2, &d);
        let net = map_stack_to_net(&src, &[StrengthTriple::default()], VoteScaling::Counts).unwrap();
        let rs = map_back_1(&net, &src).unwrap();
        for (fa, fb) in rs.stack.levels().iter().zip(src.levels()) {
            for (ta, tb) in fa.trees().iter().zip(fb.trees()) {
                assert_eq!(ta.split_ids(), tb.split_ids());
                for n in ta.split_ids() {
                    let (a, b) = (ta.split(n).unwrap(), tb.split(n).unwrap());
                    assert_eq!((a.feature, a.left, a.right), (b.feature, b.left, b.right));
                    assert!((a.threshold - b.threshold).abs() <= 1e-12 * b.threshold.abs().max(1.0));
                }
                for l in ta.leaf_ids() {
                    let (a, b) = (&ta.leaf(l).unwrap().votes, &tb.leaf(l).unwrap().votes);
                    for (x, y) in a.iter().zip(b) {
                        assert!((x - 0.1 * y).abs() < 1e-12);
                    }
                }
            }
        }
        for ls in &d {
            let want = src.predict(&ls.stack).unwrap().final_maps().argmax();
            assert_eq!(rs.predict(&ls.stack).unwrap().final_maps().argmax(), want);
        }
    }

    #[test]
    fn mb1_rejects_bad_split_weights() {
        let d = data(1);
        let src = stack(1, &d);
        let mut net = map_stack_to_net(&src, &[StrengthTriple::default()], VoteScaling::Counts).unwrap();
        let id = ParamId { layer: LayerRef::new(0, Stage::Split), kind: ParamKind::Weight, index: 0 };
        net.set_param(id, 0.0);
        assert!(matches!(map_back_1(&net, &src), Err(Error::MapBack(_))));
        net.set_param(id, -3.0);
        assert!(matches!(map_back_1(&net, &src), Err(Error::MapBack(_))));
    }

    #[test]
    fn mb1_rejects_flipped_path_weight() {
        let d = data(1);
        let src = stack(1, &d);
        let mut net = map_stack_to_net(&src, &[StrengthTriple::default()], VoteScaling::Counts).unwrap();
        let id = ParamId { layer: LayerRef::new(0, Stage::Leaf), kind: ParamKind::Weight, index: 0 };
        let v = net.param(id);
        net.set_param(id, -v);
        assert!(matches!(map_back_1(&net, &src), Err(Error::MapBack(_))));
    }

    #[test]
    fn z_matches_double_loop_oracle() {
        let d = data(2);
        let src = stack(2, &d);
        let mut net = map_stack_to_net(&src, &[StrengthTriple::new(3.0, 1.5, 0.4).unwrap()], VoteScaling::Counts).unwrap();
        net.randomize(0.5, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Sample> =
            (0..50).map(|_| Sample { image: rng.random_range(0..2), x: rng.random_range(0..12), y: rng.random_range(0..10), label: 0 }).collect();
        let stacks: Vec<&FeatureStack> = d.iter().map(|l| &l.stack).collect();
        let table = compute_z(&net, &stacks, &samples, true).unwrap();
        for (k, lvl) in table.levels.iter().enumerate() {
            let b = &net.blocks()[k];
            for i in 0..samples.len() {
                let a = lvl.activation(i).unwrap();
                for (t, tu) in b.trees.iter().enumerate() {
                    for c in 0..3 {
                        let mut oracle = 0.0;
                        for l in tu.leaves.clone() {
                            for e in 0..b.vote.edges() {
                                if b.vote.edge_list()[e] == (l as u32, c as u32) {
                                    oracle += a[l] * b.vote.weights()[e];
                                }
                            }
                        }
                        assert!((lvl.z(i, t)[c] - oracle).abs() < 1e-9);
                    }
                }
            }
        }
    }

    /// One split on channel 0 at 0.5, thresholds far from the data so each
    /// sample activates exactly one leaf.
    fn one_hot_case() -> (ForestStack, Vec<LabeledStack>) {
        let tree = DecisionTree::from_nodes(
            vec![
                Node::Split(SplitNode { feature: OffsetFeatureId::centered(0), threshold: 0.5, left: 1, right: 2 }),
                Node::Leaf(LeafNode { votes: vec![3.0, 1.0], depth: 0, path: vec![] }),
                Node::Leaf(LeafNode { votes: vec![0.0, 5.0], depth: 0, path: vec![] }),
            ],
            2,
        )
        .unwrap();
        let forest = Forest::new(vec![tree], 2, FeatureSchema { channels: 1, delta_max: 0 }).unwrap();
        let st = ForestStack::new(vec![forest], 1, None).unwrap();
        let vals: Vec<f32> = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let d = vec![LabeledStack {
            stack: FeatureStack::from_planes(4, 4, vec!["a".into()], vals).unwrap(),
            labels: LabelMap::new(4, 4, vec![0; 16]).unwrap(),
        }];
        (st, d)
    }

    #[test]
    fn mb2_equals_mb1_under_one_hot_leaves() {
        let (src, d) = one_hot_case();
        let net = map_stack_to_net(&src, &[StrengthTriple::new(1000.0, 100.0, 0.7).unwrap()], VoteScaling::Counts).unwrap();
        let stacks: Vec<&FeatureStack> = d.iter().map(|l| &l.stack).collect();
        let mb1 = map_back_1(&net, &src).unwrap();
        let (mb2, rep) = map_back_2(&net, &src, &stacks, &all_pixels(&d)).unwrap();
        assert_eq!(rep.populated_fraction, vec![1.0]);
        let (t1, t2) = (&mb1.stack.levels()[0].trees()[0], &mb2.stack.levels()[0].trees()[0]);
        for l in t1.leaf_ids() {
            for (a, b) in t1.leaf(l).unwrap().votes.iter().zip(&t2.leaf(l).unwrap().votes) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        assert_eq!(mb2.variant, MapBackVariant::Mb2);
    }

    #[test]
    fn mb2_votes_are_means_and_local_minima() {
        let d = data(2);
        let src = stack(2, &d);
        let net = map_stack_to_net(&src, &[StrengthTriple::new(4.0, 1.0, 0.2).unwrap()], VoteScaling::Counts).unwrap();
        let cfg = TrainConfig { iterations: 6, stride: 2, lr_a: 0.05, ..TrainConfig::default() };
        let net = train_sgd(net, &d, &cfg, &tree_structure_layers(2), |_, _| Ok(())).unwrap().net;
        let stacks: Vec<&FeatureStack> = d.iter().map(|l| &l.stack).collect();
        let samples = all_pixels(&d);
        let (mb2, rep) = map_back_2(&net, &src, &stacks, &samples).unwrap();
        let table = compute_z(&net, &stacks, &samples, false).unwrap();
        let mb1 = map_back_1(&net, &src).unwrap();
        for k in 0..2 {
            for (t, tree) in mb2.stack.levels()[k].trees().iter().enumerate() {
                for l in tree.leaf_ids() {
                    let members: Vec<usize> = (0..samples.len()).filter(|&i| rep.leaves[k][i][t] == l).collect();
                    let votes = &tree.leaf(l).unwrap().votes;
                    if members.is_empty() {
                        assert_eq!(votes, &mb1.stack.levels()[k].trees()[t].leaf(l).unwrap().votes);
                        continue;
                    }
                    let base = leaf_vote_error(&table, k, t, &members, votes);
                    for c in 0..3 {
                        for delta in [0.01, -0.01] {
                            let mut v = votes.clone();
                            v[c] += delta;
                            assert!(leaf_vote_error(&table, k, t, &members, &v) > base);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mb2_leaves_later_levels_untouched_until_reached() {
        // With a single level processed, deeper levels equal map back #1.
        let d = data(1);
        let src = stack(2, &d);
        let net = map_stack_to_net(&src, &[StrengthTriple::new(4.0, 1.0, 0.2).unwrap()], VoteScaling::Counts).unwrap();
        let stacks: Vec<&FeatureStack> = d.iter().map(|l| &l.stack).collect();
        let samples = all_pixels(&d);
        let src1 = src.truncated(1).unwrap();
        let net1 = map_stack_to_net(&src1, &[StrengthTriple::new(4.0, 1.0, 0.2).unwrap()], VoteScaling::Counts).unwrap();
        let (one, _) = map_back_2(&net1, &src1, &stacks, &samples).unwrap();
        let (two, _) = map_back_2(&net, &src, &stacks, &samples).unwrap();
        // Level 0 of a 2-level net uses class normalization rather than softmax,
        // but its leaf activations and z only depend on the level itself.
        assert_eq!(one.stack.levels()[0], two.stack.levels()[0]);
    }

    #[test]
    fn averaging_arithmetic() {
        let table = LeafActivationTable {
            samples: vec![],
            levels: vec![LevelActivations { trees: 1, classes: 2, leaf_units: 1, activations: None, z: vec![1.0, 3.0, 3.0, 1.0] }],
        };
        let e = leaf_vote_error(&table, 0, 0, &[0, 1], &[2.0, 2.0]);
        assert_eq!(e, 4.0);
    }

    #[test]
    fn remapped_round_trip_on_disk() {
        let d = data(1);
        let src = stack(2, &d);
        let net = map_stack_to_net(&src, &[StrengthTriple::default()], VoteScaling::Counts).unwrap();
        let rs = map_back_1(&net, &src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rs.save(dir.path()).unwrap();
        assert!(is_remapped(dir.path()).unwrap());
        assert_eq!(RemappedStack::load(dir.path()).unwrap(), rs);
        let plain = tempfile::tempdir().unwrap();
        src.save(plain.path()).unwrap();
        assert!(RemappedStack::load(plain.path()).is_err());
    }
}
