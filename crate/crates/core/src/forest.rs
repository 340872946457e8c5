//! Axis-aligned decision trees and forests over offset features.
//!
//! A split node sends `x` left iff `x[f(n)] < θ(n)`; a value exactly at the
//! threshold goes right. Leaves store raw (unnormalized) class votes. A tree
//! predicts its reached leaf's votes divided by their sum; a forest sums the
//! reached leaves' votes over all trees and then normalizes.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSource, FeatureStack, OffsetFeatureId, PixelFeatures};
use crate::grid::{ClassMaps, LabelMap, IGNORE_LABEL};

pub type NodeId = usize;

const FOREST_HEADER: &str = "forestnet-forest 1";

/// Which child of a split node a path descends into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitNode {
    pub feature: OffsetFeatureId,
    pub threshold: f64,
    pub left: NodeId,
    pub right: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafNode {
    pub votes: Vec<f64>,
    /// `|P(l)|`, the number of split nodes above this leaf.
    pub depth: usize,
    /// Split nodes from the root down to this leaf, with the side taken.
    pub path: Vec<(NodeId, Side)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split(SplitNode),
    Leaf(LeafNode),
}

/// Arena-allocated binary tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    classes: usize,
}

impl DecisionTree {
    /// Build a tree from raw nodes. Validates the structure and fills in each
    /// leaf's depth and path (any values passed in are overwritten).
    pub fn from_nodes(mut nodes: Vec<Node>, classes: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("tree has no nodes".into()));
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack: Vec<(NodeId, Vec<(NodeId, Side)>)> = vec![(0, Vec::new())];
        while let Some((id, path)) = stack.pop() {
            if id >= nodes.len() {
                return Err(Error::InvalidInput(format!("child id {id} out of range")));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::InvalidInput(format!("node {id} reachable twice")));
            }
            match &mut nodes[id] {
                Node::Split(s) => {
                    if !s.threshold.is_finite() {
                        return Err(Error::InvalidInput(format!("node {id} threshold not finite")));
                    }
                    let mut lp = path.clone();
                    lp.push((id, Side::Left));
                    let mut rp = path;
                    rp.push((id, Side::Right));
                    stack.push((s.right, rp));
                    stack.push((s.left, lp));
                }
                Node::Leaf(l) => {
                    if l.votes.len() != classes {
                        return Err(Error::InvalidInput(format!(
                            "leaf {id} has {} votes, expected {classes}",
                            l.votes.len()
                        )));
                    }
                    l.depth = path.len();
                    l.path = path;
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("node {orphan} unreachable from root")));
        }
        Ok(DecisionTree { nodes, classes })
    }

    /// Single-leaf tree.
    pub fn constant(votes: Vec<f64>) -> Self {
        let classes = votes.len();
        DecisionTree {
            nodes: vec![Node::Leaf(LeafNode { votes, depth: 0, path: Vec::new() })],
            classes,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self, id: NodeId) -> Option<&SplitNode> {
        match &self.nodes[id] {
            Node::Split(s) => Some(s),
            Node::Leaf(_) => None,
        }
    }

    pub fn leaf(&self, id: NodeId) -> Option<&LeafNode> {
        match &self.nodes[id] {
            Node::Leaf(l) => Some(l),
            Node::Split(_) => None,
        }
    }

    /// Split node ids in arena order.
    pub fn split_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i], Node::Split(_))).collect()
    }

    /// Leaf ids in arena order.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i], Node::Leaf(_))).collect()
    }

    /// Maximum leaf depth.
    pub fn depth(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf(l) => Some(l.depth),
                Node::Split(_) => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// `leaf(x)`: the unique leaf reached by `x`.
    #[inline]
    pub fn leaf_index<X: FeatureSource + ?Sized>(&self, x: &X) -> NodeId {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Split(s) => {
                    id = if x.feature(s.feature) < s.threshold { s.left } else { s.right };
                }
                Node::Leaf(_) => return id,
            }
        }
    }

    /// Leaf votes normalized by their sum; a zero-sum leaf predicts uniform.
    pub fn predict<X: FeatureSource + ?Sized>(&self, x: &X) -> Vec<f64> {
        let votes = &self.leaf(self.leaf_index(x)).expect("leaf").votes;
        normalize_votes(votes.clone())
    }

    pub fn set_threshold(&mut self, id: NodeId, threshold: f64) -> Result<()> {
        if !threshold.is_finite() {
            return Err(Error::InvalidInput(format!("threshold for node {id} not finite")));
        }
        match self.nodes.get_mut(id) {
            Some(Node::Split(s)) => {
                s.threshold = threshold;
                Ok(())
            }
            _ => Err(Error::Index(format!("node {id} is not a split node"))),
        }
    }

    pub fn set_votes(&mut self, id: NodeId, votes: Vec<f64>) -> Result<()> {
        if votes.len() != self.classes {
            return Err(Error::InvalidInput(format!("expected {} votes", self.classes)));
        }
        match self.nodes.get_mut(id) {
            Some(Node::Leaf(l)) => {
                l.votes = votes;
                Ok(())
            }
            _ => Err(Error::Index(format!("node {id} is not a leaf"))),
        }
    }
}

/// Divide by the sum, or return uniform when the sum is zero.
pub fn normalize_votes(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total == 0.0 || !total.is_finite() {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    } else {
        v.iter_mut().for_each(|x| *x /= total);
    }
    v
}

/// Input schema a forest was trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSchema {
    pub channels: usize,
    pub delta_max: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<DecisionTree>,
    classes: usize,
    schema: FeatureSchema,
}

impl Forest {
    pub fn new(trees: Vec<DecisionTree>, classes: usize, schema: FeatureSchema) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidInput("forest has no trees".into()));
        }
        for (t, tree) in trees.iter().enumerate() {
            if tree.classes != classes {
                return Err(Error::Schema(format!("tree {t} has {} classes", tree.classes)));
            }
            for node in &tree.nodes {
                if let Node::Split(s) = node {
                    if s.feature.channel >= schema.channels || !s.feature.within(schema.delta_max) {
                        return Err(Error::Schema(format!(
                            "tree {t} feature {} outside schema",
                            s.feature
                        )));
                    }
                }
            }
        }
        Ok(Forest { trees, classes, schema })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn trees_mut(&mut self) -> &mut [DecisionTree] {
        &mut self.trees
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn schema(&self) -> FeatureSchema {
        self.schema
    }

    /// `leaf_t(x)` for every tree.
    pub fn leaves<X: FeatureSource + ?Sized>(&self, x: &X) -> Vec<NodeId> {
        self.trees.iter().map(|t| t.leaf_index(x)).collect()
    }

    /// Sum of reached leaf votes over all trees.
    pub fn vote_sum<X: FeatureSource + ?Sized>(&self, x: &X) -> Vec<f64> {
        let mut sum = vec![0.0; self.classes];
        for t in &self.trees {
            let l = t.leaf(t.leaf_index(x)).expect("leaf");
            for (s, v) in sum.iter_mut().zip(&l.votes) {
                *s += v;
            }
        }
        sum
    }

    /// Normalized vote sum; uniform when all reached votes are zero.
    pub fn predict<X: FeatureSource + ?Sized>(&self, x: &X) -> Vec<f64> {
        normalize_votes(self.vote_sum(x))
    }

    pub fn check_stack(&self, stack: &FeatureStack) -> Result<()> {
        if stack.channels() != self.schema.channels {
            return Err(Error::Schema(format!(
                "forest expects {} channels, stack has {}",
                self.schema.channels,
                stack.channels()
            )));
        }
        Ok(())
    }

    /// Run every pixel of the stack through the forest.
    pub fn predict_image(&self, stack: &FeatureStack) -> Result<ClassMaps> {
        self.check_stack(stack)?;
        Ok(map_pixels(stack, self.classes, |x, y| {
            self.predict(&PixelFeatures { stack, x, y })
        }))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{FOREST_HEADER}").unwrap();
        writeln!(s, "classes {}", self.classes).unwrap();
        writeln!(s, "channels {}", self.schema.channels).unwrap();
        writeln!(s, "delta_max {}", self.schema.delta_max).unwrap();
        writeln!(s, "trees {}", self.trees.len()).unwrap();
        for (t, tree) in self.trees.iter().enumerate() {
            writeln!(s, "tree {t} nodes {}", tree.nodes.len()).unwrap();
            for node in &tree.nodes {
                match node {
                    Node::Split(n) => writeln!(
                        s,
                        "split {} {} {} {} {} {}",
                        n.feature.channel, n.feature.dx, n.feature.dy, n.threshold, n.left, n.right
                    )
                    .unwrap(),
                    Node::Leaf(l) => {
                        s.push_str("leaf");
                        for v in &l.votes {
                            write!(s, " {v}").unwrap();
                        }
                        s.push('\n');
                    }
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Forest> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let err = |line: usize, msg: &str| Error::format("forest", format!("line {line}: {msg}"));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::format("forest", format!("unexpected end, expected {what}")))
        };
        let (n, header) = next("header")?;
        if header != FOREST_HEADER {
            return Err(err(n, "bad header"));
        }
        let mut keyed = |key: &str| -> Result<usize> {
            let (n, l) = next(key)?;
            l.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| err(n, &format!("expected '{key} <n>'")))
        };
        let classes = keyed("classes")?;
        let channels = keyed("channels")?;
        let delta_max = keyed("delta_max")? as u32;
        let tree_count = keyed("trees")?;
        let mut trees = Vec::with_capacity(tree_count);
        for t in 0..tree_count {
            let (n, l) = next("tree")?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tree" || parts[1] != t.to_string() || parts[2] != "nodes" {
                return Err(err(n, "expected 'tree <t> nodes <n>'"));
            }
            let count: usize = parts[3].parse().map_err(|_| err(n, "bad node count"))?;
            let mut nodes = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, l) = next("node")?;
                let p: Vec<&str> = l.split_whitespace().collect();
                let node = match p.first() {
                    Some(&"split") if p.len() == 7 => {
                        let bad = || err(n, "bad split record");
                        Node::Split(SplitNode {
                            feature: OffsetFeatureId::new(
                                p[1].parse().map_err(|_| bad())?,
                                p[2].parse().map_err(|_| bad())?,
                                p[3].parse().map_err(|_| bad())?,
                            ),
                            threshold: p[4].parse().map_err(|_| bad())?,
                            left: p[5].parse().map_err(|_| bad())?,
                            right: p[6].parse().map_err(|_| bad())?,
                        })
                    }
                    Some(&"leaf") => {
                        let votes = p[1..]
                            .iter()
                            .map(|v| v.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| err(n, "bad leaf votes"))?;
                        Node::Leaf(LeafNode { votes, depth: 0, path: Vec::new() })
                    }
                    _ => return Err(err(n, "expected split or leaf record")),
                };
                nodes.push(node);
            }
            trees.push(DecisionTree::from_nodes(nodes, classes)?);
        }
        let (n, l) = next("end")?;
        if l != "end" {
            return Err(err(n, "expected 'end'"));
        }
        Forest::new(trees, classes, FeatureSchema { channels, delta_max })
    }
}

/// Evaluate `f` at every pixel, rows in parallel.
pub(crate) fn map_pixels<F>(stack: &FeatureStack, classes: usize, f: F) -> ClassMaps
where
    F: Fn(usize, usize) -> Vec<f64> + Sync,
{
    let (w, h) = (stack.width(), stack.height());
    let rows: Vec<Vec<Vec<f64>>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| f(x, y)).collect())
        .collect();
    let mut maps = ClassMaps::zeros(w, h, classes);
    for (y, row) in rows.iter().enumerate() {
        for (x, p) in row.iter().enumerate() {
            maps.set_pixel(x, y, p);
        }
    }
    maps
}

/// A training pixel: which stack it lives in, where, and its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub image: usize,
    pub x: usize,
    pub y: usize,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Nodes with fewer samples than this become leaves.
    pub min_samples_split: usize,
    /// Random `(channel, dx, dy)` candidates drawn per node.
    pub candidate_features: usize,
    /// Quantile thresholds tried per candidate feature.
    pub threshold_candidates: usize,
    pub delta_max: u32,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 12,
            min_samples_split: 25,
            candidate_features: 100,
            threshold_candidates: 20,
            delta_max: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub trees: usize,
    #[serde(flatten)]
    pub tree: TreeParams,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { trees: 16, tree: TreeParams::default() }
    }
}

/// Greedy information-gain training of one tree.
pub fn train_tree(
    samples: &[Sample],
    stacks: &[FeatureStack],
    classes: usize,
    params: &TreeParams,
    rng: &mut ChaCha8Rng,
) -> Result<DecisionTree> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let channels = stacks
        .first()
        .map(|s| s.channels())
        .ok_or_else(|| Error::InvalidInput("no feature stacks".into()))?;
    if stacks.iter().any(|s| s.channels() != channels) {
        return Err(Error::Schema("stacks disagree on channel count".into()));
    }
    for s in samples {
        if s.label as usize >= classes {
            return Err(Error::InvalidInput(format!("label {} >= {classes} classes", s.label)));
        }
        let st = stacks
            .get(s.image)
            .ok_or_else(|| Error::Index(format!("sample image {} out of range", s.image)))?;
        if s.x >= st.width() || s.y >= st.height() {
            return Err(Error::Index(format!("sample pixel ({}, {}) outside image", s.x, s.y)));
        }
    }
    if params.candidate_features == 0 || params.threshold_candidates == 0 {
        return Err(Error::Config("candidate counts must be positive".into()));
    }
    let mut builder = TreeBuilder {
        samples,
        stacks,
        classes,
        channels,
        params,
        rng,
        nodes: Vec::new(),
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    builder.grow(idx, 0);
    DecisionTree::from_nodes(builder.nodes, classes)
}

struct TreeBuilder<'a> {
    samples: &'a [Sample],
    stacks: &'a [FeatureStack],
    classes: usize,
    channels: usize,
    params: &'a TreeParams,
    rng: &'a mut ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn value(&self, i: usize, fid: OffsetFeatureId) -> f64 {
        let s = &self.samples[i];
        self.stacks[s.image].sample(s.x, s.y, fid)
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> NodeId {
        let id = self.nodes.len();
        let mut counts = vec![0usize; self.classes];
        for &i in &idx {
            counts[self.samples[i].label as usize] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let leaf = |counts: &[usize]| {
            Node::Leaf(LeafNode {
                votes: counts.iter().map(|&c| c as f64).collect(),
                depth,
                path: Vec::new(),
            })
        };
        if depth >= self.params.max_depth || idx.len() < self.params.min_samples_split.max(2) || pure {
            self.nodes.push(leaf(&counts));
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&idx, &counts) else {
            self.nodes.push(leaf(&counts));
            return id;
        };
        self.nodes.push(leaf(&counts)); // placeholder, replaced below
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.value(i, feature) < threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split(SplitNode { feature, threshold, left, right });
        id
    }

    fn best_split(&mut self, idx: &[usize], counts: &[usize]) -> Option<(OffsetFeatureId, f64)> {
        let n = idx.len();
        let parent = entropy(counts, n);
        let d = self.params.delta_max as i32;
        let mut best: Option<(f64, OffsetFeatureId, f64)> = None;
        let mut vals: Vec<(f64, u8)> = Vec::with_capacity(n);
        let mut left = vec![0usize; self.classes];
        let mut right = vec![0usize; self.classes];
        for _ in 0..self.params.candidate_features {
            let fid = OffsetFeatureId::new(
                self.rng.random_range(0..self.channels),
                self.rng.random_range(-d..=d),
                self.rng.random_range(-d..=d),
            );
            vals.clear();
            vals.extend(idx.iter().map(|&i| (self.value(i, fid), self.samples[i].label)));
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            if vals[0].0 == vals[n - 1].0 {
                continue;
            }
            // Candidate cut positions: between sorted[i-1] and sorted[i].
            let k = self.params.threshold_candidates;
            let positions: Vec<usize> = if n - 1 <= k {
                (1..n).collect()
            } else {
                let mut p: Vec<usize> = (1..=k).map(|j| (j * n) / (k + 1)).filter(|&p| p >= 1).collect();
                p.dedup();
                p
            };
            left.iter_mut().for_each(|c| *c = 0);
            right.copy_from_slice(counts);
            let mut cursor = 0;
            for &p in &positions {
                while cursor < p {
                    let c = vals[cursor].1 as usize;
                    left[c] += 1;
                    right[c] -= 1;
                    cursor += 1;
                }
                let (lo, hi) = (vals[p - 1].0, vals[p].0);
                if lo == hi {
                    continue;
                }
                let gain = parent
                    - (p as f64 / n as f64) * entropy(&left, p)
                    - ((n - p) as f64 / n as f64) * entropy(&right, n - p);
                if best.as_ref().is_none_or(|b| gain > b.0) {
                    let mut theta = 0.5 * (lo + hi);
                    if theta <= lo {
                        theta = hi;
                    }
                    best = Some((gain, fid, theta));
                }
            }
        }
        best.filter(|b| b.0 > 1e-12).map(|b| (b.1, b.2))
    }
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Train `params.trees` trees; tree `t` uses stream `t` of a generator seeded
/// with `seed`, so results do not depend on thread scheduling.
pub fn train_forest(
    samples: &[Sample],
    stacks: &[FeatureStack],
    classes: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<Forest> {
    if params.trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            train_tree(samples, stacks, classes, &params.tree, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let channels = stacks[0].channels();
    Forest::new(trees, classes, FeatureSchema { channels, delta_max: params.tree.delta_max })
}

/// How training pixels are drawn from labeled images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    /// Only pixels on a grid with this step per axis are candidates.
    pub stride: usize,
    /// Keep at most this many pixels per class per image.
    pub per_class_per_image: Option<usize>,
    /// Random fraction of the remaining candidates to keep.
    pub fraction: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { stride: 1, per_class_per_image: Some(20), fraction: 1.0 }
    }
}

/// Draw class-balanced training samples from labeled images.
pub fn draw_samples(labels: &[&LabelMap], params: &SamplingParams, seed: u64) -> Result<Vec<Sample>> {
    if params.stride == 0 || !(params.fraction > 0.0 && params.fraction <= 1.0) {
        return Err(Error::Config("stride must be >= 1 and fraction in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (image, lm) in labels.iter().enumerate() {
        let mut by_class: Vec<Vec<Sample>> = Vec::new();
        for y in (0..lm.height()).step_by(params.stride) {
            for x in (0..lm.width()).step_by(params.stride) {
                let label = lm.get(x, y);
                if label == IGNORE_LABEL {
                    continue;
                }
                if by_class.len() <= label as usize {
                    by_class.resize(label as usize + 1, Vec::new());
                }
                by_class[label as usize].push(Sample { image, x, y, label });
            }
        }
        for mut pool in by_class {
            if let Some(k) = params.per_class_per_image {
                // partial Fisher-Yates
                let k = k.min(pool.len());
                for i in 0..k {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool.truncate(k);
            }
            for s in pool {
                if params.fraction >= 1.0 || rng.random::<f64>() < params.fraction {
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}

/// Shape of randomly generated trees (for tests and benchmarks).
#[derive(Debug, Clone)]
pub struct RandomTreeSpec {
    pub classes: usize,
    pub channels: usize,
    pub delta_max: u32,
    pub max_depth: usize,
    /// Probability that a node above `max_depth` splits.
    pub split_probability: f64,
    pub threshold_range: (f64, f64),
    pub max_votes: u32,
}

impl DecisionTree {
    /// Random tree with integer votes; every leaf has at least one vote.
    pub fn random(spec: &RandomTreeSpec, rng: &mut impl Rng) -> DecisionTree {
        fn grow(spec: &RandomTreeSpec, rng: &mut impl Rng, nodes: &mut Vec<Node>, depth: usize) -> NodeId {
            let id = nodes.len();
            let split = depth < spec.max_depth && (depth == 0 || rng.random::<f64>() < spec.split_probability);
            if !split {
                let mut votes: Vec<f64> = (0..spec.classes)
                    .map(|_| rng.random_range(0..=spec.max_votes) as f64)
                    .collect();
                if votes.iter().all(|&v| v == 0.0) {
                    votes[rng.random_range(0..spec.classes)] = 1.0;
                }
                nodes.push(Node::Leaf(LeafNode { votes, depth, path: Vec::new() }));
                return id;
            }
            let d = spec.delta_max as i32;
            let feature = OffsetFeatureId::new(
                rng.random_range(0..spec.channels),
                rng.random_range(-d..=d),
                rng.random_range(-d..=d),
            );
            let threshold = rng.random_range(spec.threshold_range.0..spec.threshold_range.1);
            nodes.push(Node::Leaf(LeafNode { votes: vec![], depth, path: Vec::new() }));
            let left = grow(spec, rng, nodes, depth + 1);
            let right = grow(spec, rng, nodes, depth + 1);
            nodes[id] = Node::Split(SplitNode { feature, threshold, left, right });
            id
        }
        let mut nodes = Vec::new();
        grow(spec, rng, &mut nodes, 0);
        DecisionTree::from_nodes(nodes, spec.classes).expect("valid random tree")
    }
}
