//! The deep sparse network built by chaining one block per stack level.
//!
//! Level `k` contributes three layers: split units, leaf units and the class
//! layer. Class layers of all but the last level are hidden prediction layers
//! (class normalization); the last one is the softmax output. Split units of
//! level `k > 0` read either a filter channel (a fixed pass-through tap) or the
//! previous level's class layer at a pixel offset.
//!
//! Only the per-level class maps are kept for a whole image; split and leaf
//! activations are recomputed per pixel when gradients are needed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autocontext::{write_preprocessor, ForestStack, LabeledStack, PreprocessorReader};
use crate::error::{Error, Result};
use crate::features::{FeatureSource, FeatureStack, OffsetFeatureId, Preprocessor};
use crate::grid::{clamp_coord, ClassMaps, Image, LabelMap, IGNORE_LABEL};
use crate::rf2nn::{
    map_forest_to_block, Activation, BlockState, NetBlock, SparseLayer, StrengthTriple, TreeUnits, VoteScaling,
};

const NET_HEADER: &str = "forestnet-net 1";
const PAYLOAD_MARKER: &[u8] = b"\npayload\n";
/// Pixels per gradient chunk; chunks are summed in a fixed order.
const CHUNK: usize = 256;
/// Chunks evaluated concurrently before being folded into the total.
const CHUNK_GROUP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Split,
    Leaf,
    Vote,
}

/// One of the three layers of a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerRef {
    pub level: usize,
    pub stage: Stage,
}

impl LayerRef {
    pub fn new(level: usize, stage: Stage) -> Self {
        LayerRef { level, stage }
    }

    /// 1-based position counting hidden layers; the last class layer of a
    /// `K`-level net gets `3K` (the output).
    pub fn index(self) -> usize {
        3 * self.level
            + match self.stage {
                Stage::Split => 1,
                Stage::Leaf => 2,
                Stage::Vote => 3,
            }
    }

    pub fn from_index(index: usize) -> Option<LayerRef> {
        if index == 0 {
            return None;
        }
        let level = (index - 1) / 3;
        let stage = match (index - 1) % 3 {
            0 => Stage::Split,
            1 => Stage::Leaf,
            _ => Stage::Vote,
        };
        Some(LayerRef { level, stage })
    }
}

/// Layers whose weights and biases are not updated during training.
pub type FrozenSet = BTreeSet<LayerRef>;

/// The leaf layers of every level: the weights that encode tree structure.
pub fn tree_structure_layers(levels: usize) -> FrozenSet {
    (0..levels).map(|k| LayerRef::new(k, Stage::Leaf)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Address of a single trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub layer: LayerRef,
    pub kind: ParamKind,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseNet {
    blocks: Vec<NetBlock>,
    classes: usize,
    filter_channels: usize,
    preprocessor: Option<Preprocessor>,
}

/// Feature source for a level at one pixel: filter channels from the input
/// stack, channels `>= F` from the previous level's class maps.
struct LevelInput<'a> {
    filters: &'a FeatureStack,
    prev: Option<&'a ClassMaps>,
    filter_channels: usize,
    x: usize,
    y: usize,
}

impl FeatureSource for LevelInput<'_> {
    #[inline]
    fn feature(&self, fid: OffsetFeatureId) -> f64 {
        if fid.channel < self.filter_channels {
            return self.filters.sample(self.x, self.y, fid);
        }
        let prev = self.prev.expect("prediction tap on the first level");
        let cx = clamp_coord(self.x as i64 + fid.dx as i64, prev.width());
        let cy = clamp_coord(self.y as i64 + fid.dy as i64, prev.height());
        prev.get(fid.channel - self.filter_channels, cx, cy)
    }
}

/// Whole-image activations of selected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    pub units: usize,
    pub width: usize,
    pub height: usize,
    /// Unit-major planes.
    pub data: Vec<f64>,
}

impl LayerMaps {
    pub fn plane(&self, unit: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[unit * n..(unit + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationSnapshot {
    pub layers: BTreeMap<LayerRef, LayerMaps>,
}

impl ActivationSnapshot {
    pub fn get(&self, layer: LayerRef) -> Result<&LayerMaps> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {} was not captured", layer.index())))
    }
}

#[derive(Debug, Clone)]
pub struct NetForward {
    /// Class maps of every level; the last entry is the network output.
    pub levels: Vec<ClassMaps>,
    pub snapshot: ActivationSnapshot,
    /// Pixels where class normalization fell back to uniform.
    pub guarded: usize,
}

impl NetForward {
    pub fn output(&self) -> &ClassMaps {
        self.levels.last().expect("net has at least one level")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Each pixel weighted by `N / (C_present · n_c)`.
    BalancedCrossEntropy,
}

/// Labeled pixels contributing to the loss, with per-pixel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPixels {
    pub pixels: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
    pub weights: Vec<f64>,
}

impl LossPixels {
    /// Labeled pixels on the grid `x ≡ ox, y ≡ oy (mod stride)`.
    pub fn new(labels: &LabelMap, classes: usize, loss: LossKind, stride: usize, offset: (usize, usize)) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("loss stride must be >= 1".into()));
        }
        let mut pixels = Vec::new();
        let mut ls = Vec::new();
        for y in (offset.1.min(labels.height() - 1)..labels.height()).step_by(stride) {
            for x in (offset.0.min(labels.width() - 1)..labels.width()).step_by(stride) {
                let l = labels.get(x, y);
                if l == IGNORE_LABEL {
                    continue;
                }
                if l as usize >= classes {
                    return Err(Error::InvalidInput(format!("label {l} at ({x}, {y}) >= {classes} classes")));
                }
                pixels.push((x, y));
                ls.push(l);
            }
        }
        let weights = match loss {
            LossKind::CrossEntropy => vec![1.0; ls.len()],
            LossKind::BalancedCrossEntropy => {
                let mut counts = vec![0usize; classes];
                for &l in &ls {
                    counts[l as usize] += 1;
                }
                let cw = class_weights(&counts);
                ls.iter().map(|&l| cw[l as usize]).collect()
            }
        };
        Ok(LossPixels { pixels, labels: ls, weights })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Inverse-frequency weights `N / (C_present · n_c)`; zero for absent classes.
pub fn class_weights(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (present as f64 * c as f64) })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub split_w: Vec<f64>,
    pub split_b: Vec<f64>,
    pub leaf_w: Vec<f64>,
    pub leaf_b: Vec<f64>,
    pub vote_w: Vec<f64>,
}

impl BlockGrads {
    fn zeros(b: &NetBlock) -> Self {
        BlockGrads {
            split_w: vec![0.0; b.split.edges()],
            split_b: vec![0.0; b.split.units()],
            leaf_w: vec![0.0; b.leaf.edges()],
            leaf_b: vec![0.0; b.leaf.units()],
            vote_w: vec![0.0; b.vote.edges()],
        }
    }

    fn parts(&self) -> [&Vec<f64>; 5] {
        [&self.split_w, &self.split_b, &self.leaf_w, &self.leaf_b, &self.vote_w]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.split_w, &mut self.split_b, &mut self.leaf_w, &mut self.leaf_b, &mut self.vote_w]
    }

    fn add(&mut self, other: &BlockGrads) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Gradients shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
}

impl Gradients {
    pub fn zeros(net: &SparseNet) -> Self {
        Gradients { blocks: net.blocks.iter().map(BlockGrads::zeros).collect() }
    }

    pub fn get(&self, id: ParamId) -> f64 {
        let b = &self.blocks[id.layer.level];
        match (id.layer.stage, id.kind) {
            (Stage::Split, ParamKind::Weight) => b.split_w[id.index],
            (Stage::Split, ParamKind::Bias) => b.split_b[id.index],
            (Stage::Leaf, ParamKind::Weight) => b.leaf_w[id.index],
            (Stage::Leaf, ParamKind::Bias) => b.leaf_b[id.index],
            (Stage::Vote, ParamKind::Weight) => b.vote_w[id.index],
            (Stage::Vote, ParamKind::Bias) => 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.parts().into_iter().flat_map(|v| v.iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub grads: Gradients,
    pub pixels: usize,
    pub guarded: usize,
}

#[derive(Clone, Copy)]
struct BackItem {
    x: usize,
    y: usize,
    label: u8,
    /// Loss weight divided by the number of loss pixels.
    scale: f64,
}

struct ChunkResult {
    grads: BlockGrads,
    scatter: Vec<(usize, f64)>,
    loss: f64,
    guarded: usize,
}

/// Evaluate `map` on fixed-size chunks of `items`, in parallel within small
/// groups, and hand the results to `fold` in chunk order.
fn ordered_chunks<T: Sync, R: Send>(items: &[T], map: impl Fn(&[T]) -> R + Sync, mut fold: impl FnMut(R)) {
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    for group in chunks.chunks(CHUNK_GROUP) {
        let results: Vec<R> = group.par_iter().map(|c| map(c)).collect();
        results.into_iter().for_each(&mut fold);
    }
}

fn first_non_finite(st: &BlockState) -> Option<Stage> {
    let bad = |v: &[f64]| v.iter().any(|x| !x.is_finite());
    if bad(&st.split_pre) || bad(&st.split_act) {
        Some(Stage::Split)
    } else if bad(&st.leaf_pre) || bad(&st.leaf_act) {
        Some(Stage::Leaf)
    } else if bad(&st.vote_pre) || bad(&st.output) {
        Some(Stage::Vote)
    } else {
        None
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl SparseNet {
    pub fn from_blocks(blocks: Vec<NetBlock>, filter_channels: usize, preprocessor: Option<Preprocessor>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::InvalidInput("net has no blocks".into()))?;
        let classes = first.classes;
        for (k, b) in blocks.iter().enumerate() {
            if b.classes != classes || b.vote.units() != classes {
                return Err(Error::Schema(format!("block {k} class count differs")));
            }
            let limit = if k == 0 { filter_channels } else { filter_channels + classes };
            if b.taps.iter().any(|t| t.channel >= limit) {
                return Err(Error::Schema(format!("block {k} reads a channel >= {limit}")));
            }
        }
        Ok(SparseNet { blocks, classes, filter_channels, preprocessor })
    }

    pub fn blocks(&self) -> &[NetBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [NetBlock] {
        &mut self.blocks
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn filter_channels(&self) -> usize {
        self.filter_channels
    }

    pub fn preprocessor(&self) -> Option<&Preprocessor> {
        self.preprocessor.as_ref()
    }

    /// `3K - 1`.
    pub fn hidden_layer_count(&self) -> usize {
        3 * self.blocks.len() - 1
    }

    pub fn layer_name(&self, layer: LayerRef) -> String {
        if layer.level + 1 == self.blocks.len() && layer.stage == Stage::Vote {
            "output".into()
        } else {
            format!("H{}", layer.index())
        }
    }

    fn layer(&self, r: LayerRef) -> &SparseLayer {
        let b = &self.blocks[r.level];
        match r.stage {
            Stage::Split => &b.split,
            Stage::Leaf => &b.leaf,
            Stage::Vote => &b.vote,
        }
    }

    fn layer_mut(&mut self, r: LayerRef) -> &mut SparseLayer {
        let b = &mut self.blocks[r.level];
        match r.stage {
            Stage::Split => &mut b.split,
            Stage::Leaf => &mut b.leaf,
            Stage::Vote => &mut b.vote,
        }
    }

    /// Every weight and bias, layer by layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for level in 0..self.blocks.len() {
            for stage in [Stage::Split, Stage::Leaf, Stage::Vote] {
                let layer = LayerRef::new(level, stage);
                let l = self.layer(layer);
                out.extend((0..l.edges()).map(|index| ParamId { layer, kind: ParamKind::Weight, index }));
                if l.bias().is_some() {
                    out.extend((0..l.units()).map(|index| ParamId { layer, kind: ParamKind::Bias, index }));
                }
            }
        }
        out
    }

    pub fn param(&self, id: ParamId) -> f64 {
        let l = self.layer(id.layer);
        match id.kind {
            ParamKind::Weight => l.weights()[id.index],
            ParamKind::Bias => l.bias().expect("layer has biases")[id.index],
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: f64) {
        let l = self.layer_mut(id.layer);
        match id.kind {
            ParamKind::Weight => l.weights_mut()[id.index] = value,
            ParamKind::Bias => l.bias_mut().expect("layer has biases")[id.index] = value,
        }
    }

    /// `(src, dst)` edge list of a layer.
    pub fn edges(&self, layer: LayerRef) -> Vec<(u32, u32)> {
        self.layer(layer).edge_list()
    }

    /// Add zero-weight edges from every split unit to every leaf unit of the
    /// same tree.
    pub fn densify_tree_connectivity(&mut self) {
        for b in &mut self.blocks {
            let mut pairs = Vec::new();
            for t in &b.trees {
                for s in t.splits.clone() {
                    for l in t.leaves.clone() {
                        pairs.push((s as u32, l as u32));
                    }
                }
            }
            b.leaf = b.leaf.with_extra_edges(&pairs);
        }
    }

    /// Replace every weight and bias with a draw from `N(0, std²)`.
    pub fn randomize(&mut self, std: f64, seed: u64) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.param_ids() {
            let v = normal.sample(&mut rng);
            self.set_param(id, v);
        }
        Ok(())
    }

    /// State of level `level` at one pixel, given the previous level's maps.
    pub fn level_state(&self, level: usize, filters: &FeatureStack, prev: Option<&ClassMaps>, x: usize, y: usize) -> BlockState {
        let b = &self.blocks[level];
        let mut st = b.state();
        let src = LevelInput { filters, prev, filter_channels: self.filter_channels, x, y };
        b.gather(&src, &mut st);
        b.forward_state(&mut st);
        st
    }

    fn check_input(&self, filters: &FeatureStack) -> Result<()> {
        if filters.channels() != self.filter_channels {
            return Err(Error::Schema(format!(
                "net expects {} filter channels, got {}",
                self.filter_channels,
                filters.channels()
            )));
        }
        Ok(())
    }

    /// Whole-image forward pass capturing the listed layers.
    pub fn forward(&self, filters: &FeatureStack, capture: &[LayerRef]) -> Result<NetForward> {
        self.check_input(filters)?;
        self.forward_levels(filters, None, self.blocks.len(), capture)
    }

    /// Final class maps.
    pub fn predict(&self, filters: &FeatureStack) -> Result<ClassMaps> {
        let mut f = self.forward(filters, &[])?;
        Ok(f.levels.pop().expect("one level"))
    }

    pub fn predict_image(&self, image: &Image) -> Result<ClassMaps> {
        let pre = self
            .preprocessor
            .as_ref()
            .ok_or_else(|| Error::Config("net has no preprocessor; pass a feature stack".into()))?;
        self.predict(&pre.prepare(image)?)
    }

    /// Forward the first `upto` levels, optionally only at masked pixels.
    fn forward_levels(
        &self,
        filters: &FeatureStack,
        masks: Option<&[Vec<bool>]>,
        upto: usize,
        capture: &[LayerRef],
    ) -> Result<NetForward> {
        let (w, h) = (filters.width(), filters.height());
        let c = self.classes;
        let mut levels: Vec<ClassMaps> = Vec::with_capacity(upto);
        let mut snapshot = ActivationSnapshot::default();
        let mut guarded = 0;
        for k in 0..upto {
            let block = &self.blocks[k];
            let stages: Vec<Stage> = capture.iter().filter(|r| r.level == k).map(|r| r.stage).collect();
            let units = |s: Stage| match s {
                Stage::Split => block.split.units(),
                Stage::Leaf => block.leaf.units(),
                Stage::Vote => c,
            };
            let prev = levels.last();
            let mask = masks.map(|m| &m[k]);
            let rows: Vec<Result<(Vec<f64>, usize, Vec<Vec<f64>>)>> = (0..h)
                .into_par_iter()
                .map(|y| {
                    let mut st = block.state();
                    let mut out = vec![0.0; w * c];
                    let mut cap: Vec<Vec<f64>> = stages.iter().map(|&s| vec![0.0; w * units(s)]).collect();
                    let mut g = 0;
                    for x in 0..w {
                        if mask.is_some_and(|m| !m[y * w + x]) {
                            continue;
                        }
                        let src = LevelInput { filters, prev, filter_channels: self.filter_channels, x, y };
                        block.gather(&src, &mut st);
                        block.forward_state(&mut st);
                        if let Some(stage) = first_non_finite(&st) {
                            return Err(Error::NonFinite {
                                layer: self.layer_name(LayerRef::new(k, stage)),
                                x,
                                y,
                            });
                        }
                        g += st.guarded as usize;
                        out[x * c..(x + 1) * c].copy_from_slice(&st.output);
                        for (buf, &s) in cap.iter_mut().zip(&stages) {
                            let src = match s {
                                Stage::Split => &st.split_act,
                                Stage::Leaf => &st.leaf_act,
                                Stage::Vote => &st.output,
                            };
                            buf[x * src.len()..(x + 1) * src.len()].copy_from_slice(src);
                        }
                    }
                    Ok((out, g, cap))
                })
                .collect();
            let mut maps = ClassMaps::zeros(w, h, c);
            let mut caps: Vec<LayerMaps> = stages
                .iter()
                .map(|&s| LayerMaps { units: units(s), width: w, height: h, data: vec![0.0; units(s) * w * h] })
                .collect();
            for (y, row) in rows.into_iter().enumerate() {
                let (out, g, cap) = row?;
                guarded += g;
                for x in 0..w {
                    for cl in 0..c {
                        maps.set(cl, x, y, out[x * c + cl]);
                    }
                }
                for (lm, buf) in caps.iter_mut().zip(cap) {
                    for x in 0..w {
                        for u in 0..lm.units {
                            lm.data[(u * h + y) * w + x] = buf[x * lm.units + u];
                        }
                    }
                }
            }
            for (s, lm) in stages.into_iter().zip(caps) {
                snapshot.layers.insert(LayerRef::new(k, s), lm);
            }
            levels.push(maps);
        }
        Ok(NetForward { levels, snapshot, guarded })
    }

    /// Pixels of each level that influence the loss pixels.
    fn needed_masks(&self, w: usize, h: usize, lp: &LossPixels) -> Vec<Vec<bool>> {
        let k_last = self.blocks.len() - 1;
        let mut masks = vec![vec![false; w * h]; self.blocks.len()];
        for &(x, y) in &lp.pixels {
            masks[k_last][y * w + x] = true;
        }
        for k in (1..self.blocks.len()).rev() {
            let taps: Vec<OffsetFeatureId> =
                self.blocks[k].taps.iter().filter(|t| t.channel >= self.filter_channels).copied().collect();
            let (upper, lower) = {
                let (lo, hi) = masks.split_at_mut(k);
                (&hi[0], &mut lo[k - 1])
            };
            for y in 0..h {
                for x in 0..w {
                    if !upper[y * w + x] {
                        continue;
                    }
                    for t in &taps {
                        let cx = clamp_coord(x as i64 + t.dx as i64, w);
                        let cy = clamp_coord(y as i64 + t.dy as i64, h);
                        lower[cy * w + cx] = true;
                    }
                }
            }
        }
        masks
    }

    /// Loss only, on the given pixels.
    pub fn loss_at(&self, filters: &FeatureStack, lp: &LossPixels) -> Result<f64> {
        self.check_input(filters)?;
        if lp.is_empty() {
            return Ok(0.0);
        }
        let (w, h) = (filters.width(), filters.height());
        let masks = self.needed_masks(w, h, lp);
        let fwd = self.forward_levels(filters, Some(&masks), self.blocks.len(), &[])?;
        let out = fwd.output();
        let n = lp.len() as f64;
        let last = self.blocks.last().unwrap();
        let mut loss = 0.0;
        for (i, &(x, y)) in lp.pixels.iter().enumerate() {
            let y_c = lp.labels[i] as usize;
            let nll = if last.output == Activation::Softmax {
                let k = self.blocks.len() - 1;
                let st = self.level_state(k, filters, fwd.levels.get(k.wrapping_sub(1)), x, y);
                log_sum_exp(&st.vote_pre) - st.vote_pre[y_c]
            } else {
                -out.get(y_c, x, y).ln()
            };
            loss += lp.weights[i] / n * nll;
        }
        Ok(loss)
    }

    /// Loss and gradients for one image on the given pixels, averaged over them.
    pub fn loss_and_gradient_at(&self, filters: &FeatureStack, lp: &LossPixels) -> Result<LossGradient> {
        self.check_input(filters)?;
        let mut grads = Gradients::zeros(self);
        if lp.is_empty() {
            log::warn!("no labeled pixels in the loss set; gradient is zero");
            return Ok(LossGradient { loss: 0.0, grads, pixels: 0, guarded: 0 });
        }
        let (w, h) = (filters.width(), filters.height());
        let c = self.classes;
        let k_last = self.blocks.len() - 1;
        let masks = self.needed_masks(w, h, lp);
        let fwd = self.forward_levels(filters, Some(&masks), k_last, &[])?;
        let mut guarded = fwd.guarded;
        let n = lp.len() as f64;

        let mut items: Vec<BackItem> = lp
            .pixels
            .iter()
            .zip(&lp.labels)
            .zip(&lp.weights)
            .map(|((&(x, y), &label), &wt)| BackItem { x, y, label, scale: wt / n })
            .collect();
        let mut grad_out: Option<Vec<f64>> = None;
        let mut loss = 0.0;
        for k in (0..=k_last).rev() {
            let prev = if k > 0 { Some(&fwd.levels[k - 1]) } else { None };
            let mut scatter_target = if k > 0 { Some(vec![0.0; c * w * h]) } else { None };
            let go = grad_out.as_deref();
            ordered_chunks(
                &items,
                |chunk| self.backward_chunk(k, k == k_last, filters, prev, go, chunk),
                |r| {
                    grads.blocks[k].add(&r.grads);
                    loss += r.loss;
                    guarded += r.guarded;
                    if let Some(t) = scatter_target.as_mut() {
                        for (i, v) in r.scatter {
                            t[i] += v;
                        }
                    }
                },
            );
            if let Some(t) = scatter_target {
                items = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (x, y)))
                    .filter(|&(x, y)| masks[k - 1][y * w + x] && (0..c).any(|cl| t[(cl * h + y) * w + x] != 0.0))
                    .map(|(x, y)| BackItem { x, y, label: 0, scale: 0.0 })
                    .collect();
                grad_out = Some(t);
            }
        }
        Ok(LossGradient { loss, grads, pixels: lp.len(), guarded })
    }

    /// Convenience wrapper building the loss pixels from a label map.
    pub fn loss_and_gradient(
        &self,
        filters: &FeatureStack,
        labels: &LabelMap,
        loss: LossKind,
        stride: usize,
        offset: (usize, usize),
    ) -> Result<LossGradient> {
        let lp = LossPixels::new(labels, self.classes, loss, stride, offset)?;
        self.loss_and_gradient_at(filters, &lp)
    }

    fn backward_chunk(
        &self,
        k: usize,
        is_output: bool,
        filters: &FeatureStack,
        prev: Option<&ClassMaps>,
        grad_out: Option<&[f64]>,
        items: &[BackItem],
    ) -> ChunkResult {
        let block = &self.blocks[k];
        let (w, h) = (filters.width(), filters.height());
        let c = self.classes;
        let mut g = BlockGrads::zeros(block);
        let mut st = block.state();
        let mut g_out = vec![0.0; c];
        let mut g_vote = vec![0.0; c];
        let mut g_leaf_act = vec![0.0; block.leaf.units()];
        let mut g_leaf_pre = vec![0.0; block.leaf.units()];
        let mut g_split_act = vec![0.0; block.split.units()];
        let mut g_split_pre = vec![0.0; block.split.units()];
        let mut g_input = vec![0.0; block.taps.len()];
        let mut scatter = Vec::new();
        let mut loss = 0.0;
        let mut guarded = 0;
        for it in items {
            let src = LevelInput { filters, prev, filter_channels: self.filter_channels, x: it.x, y: it.y };
            block.gather(&src, &mut st);
            block.forward_state(&mut st);
            if is_output {
                let yc = it.label as usize;
                if block.output == Activation::Softmax {
                    loss += it.scale * (log_sum_exp(&st.vote_pre) - st.vote_pre[yc]);
                    for cl in 0..c {
                        g_vote[cl] = it.scale * (st.output[cl] - if cl == yc { 1.0 } else { 0.0 });
                    }
                } else {
                    loss -= it.scale * st.output[yc].ln();
                    g_out.iter_mut().for_each(|v| *v = 0.0);
                    g_out[yc] = -it.scale / st.output[yc];
                    block.output.backward_output(&st.output, &st.vote_pre, &g_out, st.guarded, &mut g_vote);
                }
            } else {
                let go = grad_out.expect("upstream gradient");
                for (cl, v) in g_out.iter_mut().enumerate() {
                    *v = go[(cl * h + it.y) * w + it.x];
                }
                block.output.backward_output(&st.output, &st.vote_pre, &g_out, st.guarded, &mut g_vote);
            }
            guarded += (st.guarded && is_output) as usize;

            g_leaf_act.iter_mut().for_each(|v| *v = 0.0);
            block.vote.backward(&st.leaf_act, &g_vote, &mut g.vote_w, None, Some(&mut g_leaf_act));
            Activation::Tanh01.backward_output(&st.leaf_act, &st.leaf_pre, &g_leaf_act, false, &mut g_leaf_pre);
            g_split_act.iter_mut().for_each(|v| *v = 0.0);
            block.leaf.backward(&st.split_act, &g_leaf_pre, &mut g.leaf_w, Some(&mut g.leaf_b), Some(&mut g_split_act));
            Activation::Tanh.backward_output(&st.split_act, &st.split_pre, &g_split_act, false, &mut g_split_pre);
            if k == 0 {
                block.split.backward(&st.input, &g_split_pre, &mut g.split_w, Some(&mut g.split_b), None);
            } else {
                g_input.iter_mut().for_each(|v| *v = 0.0);
                block.split.backward(&st.input, &g_split_pre, &mut g.split_w, Some(&mut g.split_b), Some(&mut g_input));
                for (tap, &gv) in block.taps.iter().zip(&g_input) {
                    if tap.channel < self.filter_channels || gv == 0.0 {
                        continue;
                    }
                    let cx = clamp_coord(it.x as i64 + tap.dx as i64, w);
                    let cy = clamp_coord(it.y as i64 + tap.dy as i64, h);
                    scatter.push((((tap.channel - self.filter_channels) * h + cy) * w + cx, gv));
                }
            }
        }
        ChunkResult { grads: g, scatter, loss, guarded }
    }

    /// Serialize: text header with layer specs and bookkeeping, then a
    /// little-endian binary payload of `(src u32, dst u32, weight f64)`
    /// triples followed by biases per layer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        writeln!(h, "{NET_HEADER}").unwrap();
        writeln!(h, "classes {}", self.classes).unwrap();
        writeln!(h, "filter_channels {}", self.filter_channels).unwrap();
        writeln!(h, "levels {}", self.blocks.len()).unwrap();
        if let Some(p) = &self.preprocessor {
            write_preprocessor(&mut h, p);
        }
        for (k, b) in self.blocks.iter().enumerate() {
            let s = b.strengths;
            writeln!(
                h,
                "block {k} output {} strengths {} {} {} taps {} trees {}",
                b.output.name(),
                s.input,
                s.path,
                s.vote,
                b.taps.len(),
                b.trees.len()
            )
            .unwrap();
            for t in &b.taps {
                writeln!(h, "tap {} {} {}", t.channel, t.dx, t.dy).unwrap();
            }
            for t in &b.trees {
                writeln!(h, "tree {} {} {} {}", t.splits.start, t.splits.end, t.leaves.start, t.leaves.end).unwrap();
                writeln!(h, "split_nodes{}", join_ids(&t.split_nodes)).unwrap();
                writeln!(h, "leaf_nodes{}", join_ids(&t.leaf_nodes)).unwrap();
            }
            for (name, l) in [("split", &b.split), ("leaf", &b.leaf), ("vote", &b.vote)] {
                writeln!(
                    h,
                    "layer {name} inputs {} units {} edges {} bias {}",
                    l.inputs(),
                    l.units(),
                    l.edges(),
                    l.bias().is_some() as u8
                )
                .unwrap();
            }
        }
        h.push_str("end");
        let mut out = h.into_bytes();
        out.extend_from_slice(PAYLOAD_MARKER);
        for b in &self.blocks {
            for l in [&b.split, &b.leaf, &b.vote] {
                for (e, (s, d)) in l.edge_list().into_iter().enumerate() {
                    out.extend_from_slice(&s.to_le_bytes());
                    out.extend_from_slice(&d.to_le_bytes());
                    out.extend_from_slice(&l.weights()[e].to_le_bytes());
                }
                if let Some(bias) = l.bias() {
                    for v in bias {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SparseNet> {
        let ferr = |m: String| Error::format("net", m);
        let split = bytes
            .windows(PAYLOAD_MARKER.len())
            .position(|w| w == PAYLOAD_MARKER)
            .ok_or_else(|| ferr("missing payload marker".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| ferr("header is not utf-8".into()))?;
        let mut payload = &bytes[split + PAYLOAD_MARKER.len()..];
        let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
        if lines.next() != Some(NET_HEADER) {
            return Err(ferr("bad header".into()));
        }
        let mut field = |key: &str| -> Result<usize> {
            let l = lines.next().unwrap_or("");
            l.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| ferr(format!("expected '{key} <n>', got '{l}'")))
        };
        let classes = field("classes")?;
        let filter_channels = field("filter_channels")?;
        let levels = field("levels")?;
        let mut pre = PreprocessorReader::default();
        while let Some(l) = lines.peek() {
            match l.split_once(' ') {
                Some((k @ ("bank" | "stat"), rest)) => {
                    pre.line(k, rest)?;
                    lines.next();
                }
                _ => break,
            }
        }
        let mut specs = Vec::with_capacity(levels);
        for k in 0..levels {
            let l = lines.next().ok_or_else(|| ferr(format!("missing block {k}")))?;
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 12 || t[0] != "block" || t[1] != k.to_string() || t[2] != "output" || t[4] != "strengths" || t[8] != "taps" || t[10] != "trees" {
                return Err(ferr(format!("bad block line '{l}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| ferr(format!("bad number '{s}'")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| ferr(format!("bad integer '{s}'")));
            let output = Activation::parse(t[3])?;
            let strengths = StrengthTriple { input: num(t[5])?, path: num(t[6])?, vote: num(t[7])? };
            let mut taps = Vec::new();
            for _ in 0..int(t[9])? {
                let l = lines.next().unwrap_or("");
                let p: Vec<&str> = l.split_whitespace().collect();
                if p.len() != 4 || p[0] != "tap" {
                    return Err(ferr(format!("bad tap line '{l}'")));
                }
                let bad = || ferr(format!("bad tap line '{l}'"));
                taps.push(OffsetFeatureId::new(
                    p[1].parse().map_err(|_| bad())?,
                    p[2].parse().map_err(|_| bad())?,
                    p[3].parse().map_err(|_| bad())?,
                ));
            }
            let mut trees = Vec::new();
            for _ in 0..int(t[11])? {
                let l = lines.next().unwrap_or("");
                let p: Vec<usize> = l
                    .strip_prefix("tree")
                    .map(|r| r.split_whitespace().map(int).collect::<Result<Vec<_>>>())
                    .transpose()?
                    .filter(|p| p.len() == 4)
                    .ok_or_else(|| ferr(format!("bad tree line '{l}'")))?;
                let ids = |key: &str, l: Option<&str>| -> Result<Vec<usize>> {
                    l.and_then(|l| l.strip_prefix(key))
                        .ok_or_else(|| ferr(format!("expected {key}")))?
                        .split_whitespace()
                        .map(int)
                        .collect()
                };
                let split_nodes = ids("split_nodes", lines.next())?;
                let leaf_nodes = ids("leaf_nodes", lines.next())?;
                trees.push(TreeUnits { splits: p[0]..p[1], leaves: p[2]..p[3], split_nodes, leaf_nodes });
            }
            let mut layers = Vec::new();
            for name in ["split", "leaf", "vote"] {
                let l = lines.next().unwrap_or("");
                let p: Vec<&str> = l.split_whitespace().collect();
                if p.len() != 10 || p[0] != "layer" || p[1] != name {
                    return Err(ferr(format!("bad layer line '{l}'")));
                }
                layers.push((int(p[3])?, int(p[5])?, int(p[7])?, p[9] == "1"));
            }
            specs.push((output, strengths, taps, trees, layers));
        }
        if lines.next() != Some("end") {
            return Err(ferr("missing end of header".into()));
        }
        let mut take = |n: usize| -> Result<&[u8]> {
            if payload.len() < n {
                return Err(ferr("payload truncated".into()));
            }
            let (a, b) = payload.split_at(n);
            payload = b;
            Ok(a)
        };
        let mut blocks = Vec::with_capacity(levels);
        for (output, strengths, taps, trees, specs) in specs {
            let mut built = Vec::new();
            for (inputs, units, edges, has_bias) in specs {
                let mut row_start = vec![0usize; units + 1];
                let mut src = Vec::with_capacity(edges);
                let mut weight = Vec::with_capacity(edges);
                let mut last_dst = 0u32;
                for _ in 0..edges {
                    let r = take(16)?;
                    let s = u32::from_le_bytes(r[0..4].try_into().unwrap());
                    let d = u32::from_le_bytes(r[4..8].try_into().unwrap());
                    if d < last_dst || d as usize >= units {
                        return Err(ferr("edges out of order".into()));
                    }
                    last_dst = d;
                    row_start[d as usize + 1] += 1;
                    src.push(s);
                    weight.push(f64::from_le_bytes(r[8..16].try_into().unwrap()));
                }
                for u in 0..units {
                    row_start[u + 1] += row_start[u];
                }
                let bias = if has_bias {
                    Some((0..units).map(|_| take(8).map(|r| f64::from_le_bytes(r.try_into().unwrap()))).collect::<Result<Vec<_>>>()?)
                } else {
                    None
                };
                built.push(SparseLayer::from_parts(inputs, row_start, src, weight, bias)?);
            }
            let vote = built.pop().unwrap();
            let leaf = built.pop().unwrap();
            let split = built.pop().unwrap();
            blocks.push(NetBlock { taps, split, leaf, vote, output, trees, strengths, classes });
        }
        if !payload.is_empty() {
            return Err(ferr("trailing bytes after payload".into()));
        }
        SparseNet::from_blocks(blocks, filter_channels, pre.finish()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SparseNet> {
        SparseNet::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| format!(" {i}")).collect()
}

/// Map every level of a stack to a block and chain them. `strengths` holds
/// one triple per level, or a single triple used for all levels.
pub fn map_stack_to_net(stack: &ForestStack, strengths: &[StrengthTriple], scaling: VoteScaling) -> Result<SparseNet> {
    let k = stack.levels().len();
    if strengths.len() != 1 && strengths.len() != k {
        return Err(Error::Config(format!("{} strength triples for {k} levels", strengths.len())));
    }
    let blocks = stack
        .levels()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let s = strengths[if strengths.len() == 1 { 0 } else { i }];
            let out = if i + 1 == k { Activation::Softmax } else { Activation::ClassNorm };
            map_forest_to_block(f, s, scaling, out)
        })
        .collect::<Result<Vec<_>>>()?;
    SparseNet::from_blocks(blocks, stack.filter_channels(), stack.preprocessor().cloned())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentumSchedule {
    /// `min(max, 1 - 3 / (i + 5))`.
    Capped { max: f64 },
    /// `initial` before iteration `switch_at`, `after` from then on.
    Step { initial: f64, after: f64, switch_at: usize },
    Constant { value: f64 },
}

impl MomentumSchedule {
    pub fn at(&self, i: usize) -> f64 {
        match *self {
            MomentumSchedule::Capped { max } => max.min(1.0 - 3.0 / (i as f64 + 5.0)),
            MomentumSchedule::Step { initial, after, switch_at } => {
                if i < switch_at {
                    initial
                } else {
                    after
                }
            }
            MomentumSchedule::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// Train only edges created by the mapping.
    #[default]
    Sparse,
    /// Connect every split to every leaf of its tree before training.
    DenseWithinTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Learning rate at iteration 0.
    pub lr_a: f64,
    /// Iterations until the learning rate halves.
    pub lr_b: f64,
    pub momentum: MomentumSchedule,
    pub iterations: usize,
    /// Loss pixels are taken on a grid with this step per axis.
    pub stride: usize,
    pub seed: u64,
    pub connectivity: Connectivity,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::CrossEntropy,
            lr_a: 0.01,
            lr_b: 400.0,
            momentum: MomentumSchedule::Capped { max: 0.95 },
            iterations: 200,
            stride: 5,
            seed: 0,
            connectivity: Connectivity::Sparse,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_a > 0.0 && self.lr_b > 0.0) {
            return Err(Error::Config("learning-rate parameters a and b must be positive".into()));
        }
        let mu_ok = |m: f64| (0.0..1.0).contains(&m);
        let ok = match self.momentum {
            MomentumSchedule::Capped { max } => mu_ok(max),
            MomentumSchedule::Step { initial, after, .. } => mu_ok(initial) && mu_ok(after),
            MomentumSchedule::Constant { value } => mu_ok(value),
        };
        if !ok {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// `a / (1 + i / b)`.
    pub fn learning_rate(&self, i: usize) -> f64 {
        self.lr_a / (1.0 + i as f64 / self.lr_b)
    }

    pub fn momentum_at(&self, i: usize) -> f64 {
        self.momentum.at(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: f64,
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("iteration,lr,momentum,loss\n");
    for r in curve {
        writeln!(s, "{},{},{},{}", r.iteration, r.lr, r.momentum, r.loss).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: SparseNet,
    pub curve: Vec<LossRecord>,
}

/// SGD with classical momentum, one image per iteration. Frozen layers are
/// never written. `checkpoint` is called every `checkpoint_every` iterations
/// with the iteration count and current parameters.
pub fn train_sgd(
    mut net: SparseNet,
    data: &[LabeledStack],
    config: &TrainConfig,
    frozen: &FrozenSet,
    mut checkpoint: impl FnMut(usize, &SparseNet) -> Result<()>,
) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no training images".into()));
    }
    if config.connectivity == Connectivity::DenseWithinTree {
        net.densify_tree_connectivity();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = Gradients::zeros(&net);
    let mut curve = Vec::with_capacity(config.iterations);
    let mut last_good = net.clone();
    for i in 0..config.iterations {
        if i % data.len() == 0 {
            order.shuffle(&mut rng);
        }
        let d = &data[order[i % data.len()]];
        let offset = (rng.random_range(0..config.stride), rng.random_range(0..config.stride));
        let lp = LossPixels::new(&d.labels, net.classes, config.loss, config.stride, offset)?;
        let lg = match net.loss_and_gradient_at(&d.stack, &lp) {
            Ok(lg) => lg,
            Err(e) if e.is_numerical() => {
                log::error!("iteration {i}: {e}");
                return Err(Error::Diverged { iteration: i, last_finite: Box::new(last_good) });
            }
            Err(e) => return Err(e),
        };
        if !lg.loss.is_finite() {
            return Err(Error::Diverged { iteration: i, last_finite: Box::new(last_good) });
        }
        let lr = config.learning_rate(i);
        let mu = config.momentum_at(i);
        curve.push(LossRecord { iteration: i, lr, momentum: mu, loss: lg.loss });
        log::debug!("iteration {i}: loss {:.6} lr {lr:.3e} momentum {mu:.3}", lg.loss);
        last_good.clone_from(&net);
        for (k, (vb, gb)) in velocity.blocks.iter_mut().zip(&lg.grads.blocks).enumerate() {
            let block = &mut net.blocks[k];
            let layers: [(Stage, &mut SparseLayer); 3] =
                [(Stage::Split, &mut block.split), (Stage::Leaf, &mut block.leaf), (Stage::Vote, &mut block.vote)];
            let [vsw, vsb, vlw, vlb, vvw] = vb.parts_mut();
            let vel: [(&mut Vec<f64>, Option<&mut Vec<f64>>); 3] = [(vsw, Some(vsb)), (vlw, Some(vlb)), (vvw, None)];
            let grads: [(&Vec<f64>, Option<&Vec<f64>>); 3] =
                [(&gb.split_w, Some(&gb.split_b)), (&gb.leaf_w, Some(&gb.leaf_b)), (&gb.vote_w, None)];
            for (((stage, layer), (vw, vbias)), (gw, gbias)) in layers.into_iter().zip(vel).zip(grads) {
                if frozen.contains(&LayerRef::new(k, stage)) {
                    continue;
                }
                momentum_step(layer.weights_mut(), vw, gw, lr, mu);
                if let (Some(b), Some(vb), Some(gb)) = (layer.bias_mut(), vbias, gbias) {
                    momentum_step(b, vb, gb, lr, mu);
                }
            }
        }
        if net.param_ids().iter().any(|&id| !net.param(id).is_finite()) {
            return Err(Error::Diverged { iteration: i, last_finite: Box::new(last_good) });
        }
        if config.checkpoint_every.is_some_and(|n| (i + 1) % n == 0) {
            checkpoint(i + 1, &net)?;
        }
    }
    Ok(Trained { net, curve })
}

fn momentum_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, mu: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
}

/// Write each requested unit of a captured layer as an 8-bit grayscale PNG,
/// min-max scaled, with the scale in a `.scale.txt` sidecar.
pub fn export_activation_images(
    snapshot: &ActivationSnapshot,
    layer: LayerRef,
    units: &[usize],
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let maps = snapshot.get(layer)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &u in units {
        if u >= maps.units {
            return Err(Error::Index(format!("unit {u} >= {} units", maps.units)));
        }
        let plane = maps.plane(u);
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pixels: Vec<u8> = plane
            .iter()
            .map(|&v| if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { 128 })
            .collect();
        let path = dir.join(format!("{prefix}H{}_u{u}.png", layer.index()));
        crate::io::write_gray8(&path, maps.width, maps.height, &pixels)?;
        let side = path.with_extension("scale.txt");
        fs::write(&side, format!("min {lo}\nmax {hi}\n")).map_err(|e| Error::io(&side, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Read back an exported activation image using its sidecar scale.
pub fn read_activation_image(path: &Path) -> Result<Vec<f64>> {
    let img = crate::io::read_grayscale(path)?;
    let side = path.with_extension("scale.txt");
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut lo = None;
    let mut hi = None;
    for l in text.lines() {
        match l.split_once(' ') {
            Some(("min", v)) => lo = v.trim().parse::<f64>().ok(),
            Some(("max", v)) => hi = v.trim().parse::<f64>().ok(),
            _ => {}
        }
    }
    let (lo, hi) = lo.zip(hi).ok_or_else(|| Error::format("activation scale", "missing min/max"))?;
    Ok(img
        .data()
        .iter()
        .map(|&p| if hi > lo { lo + (p as f64 / 255.0) * (hi - lo) } else { lo })
        .collect())
}
