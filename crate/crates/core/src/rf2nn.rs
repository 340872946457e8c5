//! Exact construction of a two-hidden-layer sparse network from one forest.
//!
//! Per forest the block has a split layer (one `tanh` unit per split node,
//! reading a single offset feature), a leaf layer (one unit per leaf, wired
//! to the splits on its path) and a vote layer (one unit per class, fully
//! connected from the leaf layer, no bias).

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSource, OffsetFeatureId};
use crate::forest::{Forest, NodeId, Side};

/// Class-normalization falls back to uniform when `|Σ v| <` this.
pub const CLASS_NORM_GUARD: f64 = 1e-6;

/// Scaling constants used when writing a forest into network weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrengthTriple {
    /// Input-to-split weight; sharpness of each threshold test.
    pub input: f64,
    /// Split-to-leaf weight magnitude; sharpness of leaf membership.
    pub path: f64,
    /// Leaf-to-class weight scale applied to the votes.
    pub vote: f64,
}

impl StrengthTriple {
    pub fn new(input: f64, path: f64, vote: f64) -> Result<Self> {
        let s = StrengthTriple { input, path, vote };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("input", self.input), ("path", self.path), ("vote", self.vote)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("strength {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for StrengthTriple {
    fn default() -> Self {
        StrengthTriple { input: 100.0, path: 1.0, vote: 0.1 }
    }
}

/// How leaf votes become vote-layer weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteScaling {
    /// Raw class counts.
    #[default]
    Counts,
    /// Each leaf's votes divided by their sum first.
    LeafNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `tanh(z)`, split layers.
    Tanh,
    /// `(tanh(z) + 1) / 2`, leaf layers.
    Tanh01,
    /// `v / Σ v` over the classes.
    ClassNorm,
    Softmax,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Tanh01 => "tanh01",
            Activation::ClassNorm => "class_norm",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "tanh" => Activation::Tanh,
            "tanh01" => Activation::Tanh01,
            "class_norm" => Activation::ClassNorm,
            "softmax" => Activation::Softmax,
            "identity" => Activation::Identity,
            _ => return Err(Error::format("activation", format!("unknown activation '{s}'"))),
        })
    }

    /// Apply a vector-valued output activation in place. Returns `false` when
    /// class normalization hit its guard and fell back to uniform.
    pub fn apply_output(self, v: &mut [f64]) -> bool {
        match self {
            Activation::ClassNorm => class_normalize(v),
            Activation::Softmax => {
                softmax(v);
                true
            }
            Activation::Identity => true,
            Activation::Tanh => {
                v.iter_mut().for_each(|x| *x = saturating_tanh(*x));
                true
            }
            Activation::Tanh01 => {
                v.iter_mut().for_each(|x| *x = tanh01(*x));
                true
            }
        }
    }

    /// Backpropagate `grad_out` (w.r.t. the activated outputs `out`) to the
    /// pre-activations, writing into `grad_in`. Guarded class-norm pixels pass
    /// zero gradient.
    pub fn backward_output(self, out: &[f64], pre: &[f64], grad_out: &[f64], guarded: bool, grad_in: &mut [f64]) {
        match self {
            Activation::ClassNorm => {
                if guarded {
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    return;
                }
                let sum: f64 = pre.iter().sum();
                let dot: f64 = grad_out.iter().zip(out).map(|(g, o)| g * o).sum();
                for (gi, g) in grad_in.iter_mut().zip(grad_out) {
                    *gi = (g - dot) / sum;
                }
            }
            Activation::Softmax => {
                let dot: f64 = grad_out.iter().zip(out).map(|(g, o)| g * o).sum();
                for ((gi, g), o) in grad_in.iter_mut().zip(grad_out).zip(out) {
                    *gi = o * (g - dot);
                }
            }
            Activation::Identity => grad_in.copy_from_slice(grad_out),
            Activation::Tanh => {
                for ((gi, g), o) in grad_in.iter_mut().zip(grad_out).zip(out) {
                    *gi = g * (1.0 - o * o);
                }
            }
            Activation::Tanh01 => {
                for ((gi, g), o) in grad_in.iter_mut().zip(grad_out).zip(out) {
                    // a = (t+1)/2  =>  da/dz = (1 - t^2)/2 = 2a(1-a)
                    *gi = g * 2.0 * o * (1.0 - o);
                }
            }
        }
    }
}

/// `tanh`, short-circuited where the f64 result is already exactly `±1`.
#[inline]
pub fn saturating_tanh(x: f64) -> f64 {
    if x.abs() >= TANH_SATURATION {
        1.0f64.copysign(x)
    } else {
        x.tanh()
    }
}

/// `(tanh(x) + 1) / 2`, evaluated as the logistic `1 / (1 + e^{-2x})`.
#[inline]
pub fn tanh01(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * x).exp())
}

/// Beyond this magnitude `tanh` rounds to `±1` in f64.
const TANH_SATURATION: f64 = 20.0;

/// Divide by the sum; uniform (and `false`) when `|Σ| <` [`CLASS_NORM_GUARD`].
pub fn class_normalize(v: &mut [f64]) -> bool {
    let sum: f64 = v.iter().sum();
    if sum.abs() < CLASS_NORM_GUARD || !sum.is_finite() {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
        return false;
    }
    v.iter_mut().for_each(|x| *x /= sum);
    true
}

pub fn softmax(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Sparse affine layer stored row-wise by destination unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayer {
    inputs: usize,
    row_start: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl SparseLayer {
    /// Build from per-unit `(src, weight)` rows.
    pub fn from_rows(inputs: usize, rows: Vec<Vec<(u32, f64)>>, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != rows.len() {
                return Err(Error::Dimension(format!("{} biases for {} units", b.len(), rows.len())));
            }
        }
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        row_start.push(0);
        let mut src = Vec::new();
        let mut weight = Vec::new();
        for row in rows {
            for (s, w) in row {
                if s as usize >= inputs {
                    return Err(Error::Index(format!("edge source {s} >= {inputs} inputs")));
                }
                src.push(s);
                weight.push(w);
            }
            row_start.push(src.len());
        }
        Ok(SparseLayer { inputs, row_start, src, weight, bias })
    }

    /// Build from CSR parts as written by the network serializer.
    pub(crate) fn from_parts(
        inputs: usize,
        row_start: Vec<usize>,
        src: Vec<u32>,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let units = row_start.len().saturating_sub(1);
        let ok = !row_start.is_empty()
            && row_start[0] == 0
            && row_start.windows(2).all(|w| w[0] <= w[1])
            && *row_start.last().unwrap() == src.len()
            && src.len() == weight.len()
            && src.iter().all(|&s| (s as usize) < inputs)
            && bias.as_ref().is_none_or(|b| b.len() == units);
        if !ok {
            return Err(Error::format("sparse layer", "inconsistent layer layout"));
        }
        Ok(SparseLayer { inputs, row_start, src, weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn units(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn edges(&self) -> usize {
        self.src.len()
    }

    #[inline]
    pub fn row(&self, unit: usize) -> Range<usize> {
        self.row_start[unit]..self.row_start[unit + 1]
    }

    pub fn sources(&self) -> &[u32] {
        &self.src
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    /// `(src, dst)` of every edge, row-major.
    pub fn edge_list(&self) -> Vec<(u32, u32)> {
        (0..self.units())
            .flat_map(|u| self.row(u).map(move |e| (e, u)))
            .map(|(e, u)| (self.src[e], u as u32))
            .collect()
    }

    /// Pre-activations `W x + b`.
    #[inline]
    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        for (u, o) in out.iter_mut().enumerate() {
            let r = self.row(u);
            let acc: f64 = self.weight[r.clone()]
                .iter()
                .zip(&self.src[r])
                .map(|(w, &s)| w * input[s as usize])
                .sum();
            *o = acc + self.bias.as_ref().map_or(0.0, |b| b[u]);
        }
    }

    /// Accumulate parameter gradients and input gradients given `grad_pre`
    /// (gradient w.r.t. this layer's pre-activations).
    #[inline]
    pub fn backward(
        &self,
        input: &[f64],
        grad_pre: &[f64],
        grad_weight: &mut [f64],
        grad_bias: Option<&mut [f64]>,
        grad_input: Option<&mut [f64]>,
    ) {
        if let Some(gb) = grad_bias {
            for (g, d) in gb.iter_mut().zip(grad_pre) {
                *g += d;
            }
        }
        match grad_input {
            Some(gi) => {
                for (u, &d) in grad_pre.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let r = self.row(u);
                    for ((gw, w), &s) in grad_weight[r.clone()].iter_mut().zip(&self.weight[r.clone()]).zip(&self.src[r]) {
                        *gw += d * input[s as usize];
                        gi[s as usize] += d * w;
                    }
                }
            }
            None => {
                for (u, &d) in grad_pre.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let r = self.row(u);
                    for (gw, &s) in grad_weight[r.clone()].iter_mut().zip(&self.src[r]) {
                        *gw += d * input[s as usize];
                    }
                }
            }
        }
    }

    /// Insert zero-weight edges so each `(src, dst)` pair in `pairs` exists.
    /// Existing edges and their order within a row are kept.
    pub(crate) fn with_extra_edges(&self, pairs: &[(u32, u32)]) -> SparseLayer {
        let mut rows: Vec<Vec<(u32, f64)>> = (0..self.units())
            .map(|u| self.row(u).map(|e| (self.src[e], self.weight[e])).collect())
            .collect();
        for &(s, d) in pairs {
            let row = &mut rows[d as usize];
            if !row.iter().any(|&(rs, _)| rs == s) {
                row.push((s, 0.0));
            }
        }
        SparseLayer::from_rows(self.inputs, rows, self.bias.clone()).expect("valid edges")
    }
}

/// Units that belong to one tree inside a block.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeUnits {
    pub splits: Range<usize>,
    pub leaves: Range<usize>,
    /// Forest node id of each split unit, in unit order.
    pub split_nodes: Vec<NodeId>,
    /// Forest node id of each leaf unit, in unit order.
    pub leaf_nodes: Vec<NodeId>,
}

/// The mapped network for one forest.
#[derive(Debug, Clone, PartialEq)]
pub struct NetBlock {
    /// Offset features read by the split layer, in the forest's channel space.
    pub taps: Vec<OffsetFeatureId>,
    pub split: SparseLayer,
    pub leaf: SparseLayer,
    pub vote: SparseLayer,
    pub output: Activation,
    pub trees: Vec<TreeUnits>,
    pub strengths: StrengthTriple,
    pub classes: usize,
}

/// Per-sample intermediate values of one block.
#[derive(Debug, Clone, Default)]
pub struct BlockState {
    pub input: Vec<f64>,
    pub split_pre: Vec<f64>,
    pub split_act: Vec<f64>,
    pub leaf_pre: Vec<f64>,
    pub leaf_act: Vec<f64>,
    pub vote_pre: Vec<f64>,
    pub output: Vec<f64>,
    /// Class normalization hit its guard.
    pub guarded: bool,
}

impl NetBlock {
    pub fn state(&self) -> BlockState {
        BlockState {
            input: vec![0.0; self.taps.len()],
            split_pre: vec![0.0; self.split.units()],
            split_act: vec![0.0; self.split.units()],
            leaf_pre: vec![0.0; self.leaf.units()],
            leaf_act: vec![0.0; self.leaf.units()],
            vote_pre: vec![0.0; self.classes],
            output: vec![0.0; self.classes],
            guarded: false,
        }
    }

    /// Forward pass given the already gathered tap values in `st.input`.
    #[inline]
    pub fn forward_state(&self, st: &mut BlockState) {
        self.split.forward(&st.input, &mut st.split_pre);
        for (a, z) in st.split_act.iter_mut().zip(&st.split_pre) {
            *a = saturating_tanh(*z);
        }
        self.leaf.forward(&st.split_act, &mut st.leaf_pre);
        for (a, z) in st.leaf_act.iter_mut().zip(&st.leaf_pre) {
            *a = tanh01(*z);
        }
        self.vote.forward(&st.leaf_act, &mut st.vote_pre);
        st.output.copy_from_slice(&st.vote_pre);
        st.guarded = !self.output.apply_output(&mut st.output);
    }

    /// Read this block's tap values from `x` into `st.input`.
    #[inline]
    pub fn gather<X: FeatureSource + ?Sized>(&self, x: &X, st: &mut BlockState) {
        for (v, &tap) in st.input.iter_mut().zip(&self.taps) {
            *v = x.feature(tap);
        }
    }

    /// Forward pass on any feature source in the forest's channel space.
    pub fn forward<X: FeatureSource + ?Sized>(&self, x: &X) -> BlockState {
        let mut st = self.state();
        self.gather(x, &mut st);
        self.forward_state(&mut st);
        st
    }

    /// `Σ_{l in tree t} a(l) · w(l, c)` for every tree and class.
    pub fn tree_scores(&self, leaf_act: &[f64]) -> Vec<Vec<f64>> {
        let mut z = vec![vec![0.0; self.classes]; self.trees.len()];
        let mut tree_of = vec![0usize; self.leaf.units()];
        for (t, tu) in self.trees.iter().enumerate() {
            tree_of[tu.leaves.clone()].iter_mut().for_each(|x| *x = t);
        }
        for (c, zc) in (0..self.classes).map(|c| (c, self.vote.row(c))) {
            for e in zc {
                let l = self.vote.sources()[e] as usize;
                z[tree_of[l]][c] += leaf_act[l] * self.vote.weights()[e];
            }
        }
        z
    }
}

/// Map a forest onto a block. `output` is the vote-layer activation.
pub fn map_forest_to_block(
    forest: &Forest,
    strengths: StrengthTriple,
    scaling: VoteScaling,
    output: Activation,
) -> Result<NetBlock> {
    strengths.validate()?;
    let classes = forest.classes();
    let mut taps: Vec<OffsetFeatureId> = Vec::new();
    let mut tap_index: HashMap<OffsetFeatureId, u32> = HashMap::new();
    let mut split_rows = Vec::new();
    let mut split_bias = Vec::new();
    let mut leaf_rows = Vec::new();
    let mut leaf_bias = Vec::new();
    let mut leaf_votes: Vec<Vec<f64>> = Vec::new();
    let mut trees = Vec::new();
    for tree in forest.trees() {
        let split_nodes = tree.split_ids();
        let leaf_nodes = tree.leaf_ids();
        let s0 = split_rows.len();
        let l0 = leaf_rows.len();
        let mut unit_of: HashMap<NodeId, u32> = HashMap::new();
        for (i, &n) in split_nodes.iter().enumerate() {
            let s = tree.split(n).expect("split");
            let next = taps.len() as u32;
            let tap = *tap_index.entry(s.feature).or_insert_with(|| {
                taps.push(s.feature);
                next
            });
            split_rows.push(vec![(tap, strengths.input)]);
            split_bias.push(-strengths.input * s.threshold);
            unit_of.insert(n, (s0 + i) as u32);
        }
        for &l in &leaf_nodes {
            let leaf = tree.leaf(l).expect("leaf");
            let row = leaf
                .path
                .iter()
                .map(|&(n, side)| {
                    let w = match side {
                        Side::Left => -strengths.path,
                        Side::Right => strengths.path,
                    };
                    (unit_of[&n], w)
                })
                .collect();
            leaf_rows.push(row);
            leaf_bias.push(-strengths.path * (leaf.depth as f64 - 1.0));
            let votes = match scaling {
                VoteScaling::Counts => leaf.votes.clone(),
                VoteScaling::LeafNormalized => crate::forest::normalize_votes(leaf.votes.clone()),
            };
            leaf_votes.push(votes);
        }
        trees.push(TreeUnits {
            splits: s0..split_rows.len(),
            leaves: l0..leaf_rows.len(),
            split_nodes,
            leaf_nodes,
        });
    }
    let n_splits = split_rows.len();
    let n_leaves = leaf_rows.len();
    let vote_rows = (0..classes)
        .map(|c| (0..n_leaves).map(|l| (l as u32, strengths.vote * leaf_votes[l][c])).collect())
        .collect();
    Ok(NetBlock {
        split: SparseLayer::from_rows(taps.len(), split_rows, Some(split_bias))?,
        leaf: SparseLayer::from_rows(n_splits, leaf_rows, Some(leaf_bias))?,
        vote: SparseLayer::from_rows(n_leaves, vote_rows, None)?,
        taps,
        output,
        trees,
        strengths,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturating_tanh_is_exact() {
        for x in [20.0, 20.5, 37.0, 1e6, f64::MAX] {
            assert_eq!(x.tanh(), 1.0);
            assert_eq!(saturating_tanh(x), 1.0);
            assert_eq!(saturating_tanh(-x), -1.0);
        }
        for x in [-19.9, -3.0, -1e-3, 0.0, 0.7, 19.99] {
            assert_eq!(saturating_tanh(x), x.tanh());
        }
    }
    #[test]
    fn tanh01_matches_shifted_tanh() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01;
            assert!((tanh01(x) - 0.5 * (x.tanh() + 1.0)).abs() < 4e-16, "{x}");
        }
        assert_eq!(tanh01(1e6), 1.0);
        assert_eq!(tanh01(-1e6), 0.0);
    }
    use crate::forest::{DecisionTree, FeatureSchema, LeafNode, Node, RandomTreeSpec, SplitNode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(v: Vec<f64>) -> Node {
        Node::Leaf(LeafNode { votes: v, depth: 0, path: vec![] })
    }

    fn split(ch: usize, t: f64, l: usize, r: usize) -> Node {
        Node::Split(SplitNode { feature: OffsetFeatureId::centered(ch), threshold: t, left: l, right: r })
    }

    fn forest_of(trees: Vec<DecisionTree>, channels: usize, classes: usize) -> Forest {
        Forest::new(trees, classes, FeatureSchema { channels, delta_max: 2 }).unwrap()
    }

    #[test]
    fn stump_split_unit_weights() {
        let t = DecisionTree::from_nodes(vec![split(2, 0.4, 1, 2), leaf(vec![1.0, 0.0]), leaf(vec![0.0, 1.0])], 2).unwrap();
        let b = map_forest_to_block(&forest_of(vec![t], 3, 2), StrengthTriple::new(100.0, 1.0, 0.1).unwrap(), VoteScaling::Counts, Activation::Softmax).unwrap();
        assert_eq!(b.taps, vec![OffsetFeatureId::centered(2)]);
        assert_eq!(b.split.weights(), &[100.0]);
        assert!((b.split.bias().unwrap()[0] + 40.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_depth_two_tree_wiring() {
        let nodes = vec![
            split(0, 0.0, 1, 4),
            split(1, 0.0, 2, 3),
            leaf(vec![1.0, 0.0]),
            leaf(vec![0.0, 1.0]),
            split(1, 0.5, 5, 6),
            leaf(vec![1.0, 1.0]),
            leaf(vec![2.0, 0.0]),
        ];
        let t = DecisionTree::from_nodes(nodes, 2).unwrap();
        let s = StrengthTriple::new(100.0, 3.0, 0.1).unwrap();
        let b = map_forest_to_block(&forest_of(vec![t], 2, 2), s, VoteScaling::Counts, Activation::Softmax).unwrap();
        assert_eq!(b.split.units(), 3);
        assert_eq!(b.leaf.units(), 4);
        let ll = b.leaf.row(0);
        assert_eq!(&b.leaf.weights()[ll], &[-3.0, -3.0]);
        assert_eq!(b.leaf.bias().unwrap()[0], -3.0);
        // leaf-layer edge count is the summed path length
        assert_eq!(b.leaf.edges(), 8);
        assert_eq!(b.split.edges(), 3);
    }

    #[test]
    fn threshold_input_gives_zero_split_activation() {
        let t = DecisionTree::from_nodes(vec![split(0, 0.25, 1, 2), leaf(vec![1.0, 0.0]), leaf(vec![0.0, 1.0])], 2).unwrap();
        let b = map_forest_to_block(&forest_of(vec![t], 1, 2), StrengthTriple::default(), VoteScaling::Counts, Activation::Softmax).unwrap();
        let st = b.forward(&|_: OffsetFeatureId| 0.25);
        assert_eq!(st.split_pre[0], 0.0);
        assert_eq!(st.split_act[0], 0.0);
    }

    #[test]
    fn single_leaf_tree_is_constant() {
        let t = DecisionTree::constant(vec![3.0, 1.0]);
        let b = map_forest_to_block(&forest_of(vec![t], 1, 2), StrengthTriple::new(100.0, 100.0, 0.5).unwrap(), VoteScaling::Counts, Activation::Softmax).unwrap();
        let a = b.forward(&|_: OffsetFeatureId| -7.0).output;
        let c = b.forward(&|_: OffsetFeatureId| 9.0).output;
        assert_eq!(a, c);
        let mut expect = vec![1.5, 0.5];
        softmax(&mut expect);
        assert!((a[0] - expect[0]).abs() < 1e-12);
    }

    #[test]
    fn class_norm_of_equal_maps() {
        let mut v = vec![2.0, 2.0];
        assert!(class_normalize(&mut v));
        assert_eq!(v, vec![0.5, 0.5]);
        let mut z = vec![1e-9, -1e-9];
        assert!(!class_normalize(&mut z));
        assert_eq!(z, vec![0.5, 0.5]);
    }

    fn random_forest(rng: &mut ChaCha8Rng) -> Forest {
        let spec = RandomTreeSpec {
            classes: 3,
            channels: 3,
            delta_max: 2,
            max_depth: 6,
            split_probability: 0.85,
            threshold_range: (-1.0, 1.0),
            max_votes: 20,
        };
        let trees = (0..4).map(|_| DecisionTree::random(&spec, rng)).collect();
        Forest::new(trees, 3, FeatureSchema { channels: 3, delta_max: 2 }).unwrap()
    }

    fn margin(forest: &Forest, x: &dyn Fn(OffsetFeatureId) -> f64) -> f64 {
        let mut m = f64::INFINITY;
        for t in forest.trees() {
            let l = t.leaf(t.leaf_index(&x)).unwrap();
            for &(n, _) in &l.path {
                let s = t.split(n).unwrap();
                m = m.min((x(s.feature) - s.threshold).abs());
            }
        }
        m
    }

    #[test]
    fn saturated_block_matches_forest_routing_and_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let forest = random_forest(&mut rng);
        let s = StrengthTriple::new(1000.0, 100.0, 0.1).unwrap();
        let b = map_forest_to_block(&forest, s, VoteScaling::Counts, Activation::Softmax).unwrap();
        let mut tested = 0;
        while tested < 100 {
            let table: Vec<f64> = (0..3 * 25).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = move |f: OffsetFeatureId| table[f.channel * 25 + ((f.dy + 2) * 5 + f.dx + 2) as usize];
            if margin(&forest, &x) < 1e-2 {
                continue;
            }
            tested += 1;
            let st = b.forward(&x);
            for (t, tu) in b.trees.iter().enumerate() {
                let reached = forest.trees()[t].leaf_index(&x);
                for (i, &node) in tu.leaf_nodes.iter().enumerate() {
                    let a = st.leaf_act[tu.leaves.start + i];
                    if node == reached {
                        assert!(a > 0.99);
                    } else {
                        assert!(a < 0.01);
                    }
                }
            }
            assert_eq!(crate::grid::argmax(&st.output), crate::grid::argmax(&forest.predict(&x)));
        }
    }

    #[test]
    fn activation_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let forest = random_forest(&mut rng);
        let b = map_forest_to_block(&forest, StrengthTriple::default(), VoteScaling::Counts, Activation::Softmax).unwrap();
        for _ in 0..20 {
            let v: f64 = rng.random_range(-1.0..1.0);
            let st = b.forward(&move |_: OffsetFeatureId| v);
            assert!(st.split_act.iter().all(|&a| a > -1.0 && a < 1.0 || a.abs() == 1.0));
            assert!(st.leaf_act.iter().all(|&a| (0.0..=1.0).contains(&a)));
            assert!((st.output.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_scores_sum_to_vote_preactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let forest = random_forest(&mut rng);
        let b = map_forest_to_block(&forest, StrengthTriple::default(), VoteScaling::Counts, Activation::Identity).unwrap();
        let st = b.forward(&|f: OffsetFeatureId| f.channel as f64 * 0.3 - 0.4);
        let z = b.tree_scores(&st.leaf_act);
        for c in 0..3 {
            let total: f64 = z.iter().map(|zt| zt[c]).sum();
            assert!((total - st.vote_pre[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn leaf_normalized_votes() {
        let t = DecisionTree::constant(vec![3.0, 1.0]);
        let b = map_forest_to_block(&forest_of(vec![t], 1, 2), StrengthTriple::new(1.0, 1.0, 2.0).unwrap(), VoteScaling::LeafNormalized, Activation::Identity).unwrap();
        assert_eq!(b.vote.weights(), &[1.5, 0.5]);
    }

    #[test]
    fn non_positive_strength_rejected() {
        assert!(StrengthTriple::new(0.0, 1.0, 1.0).is_err());
        assert!(StrengthTriple::new(1.0, -1.0, 1.0).is_err());
    }
}
