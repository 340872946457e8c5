//! End-to-end experiment: train a stack, map it to a net, fine-tune, map
//! back, and score every model on held-out images.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autocontext::{ForestStack, LabeledStack, LevelParams};
use crate::deepnet::{map_stack_to_net, train_sgd, tree_structure_layers, FrozenSet, LossRecord, SparseNet, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureStack, FilterBank, Preprocessor};
use crate::forest::{draw_samples, SamplingParams};
use crate::grid::{ClassMaps, LabelMap};
use crate::mapback::{map_back_1, map_back_2, Mb2Report, RemappedStack};
use crate::metrics::{evaluate, Evaluation};
use crate::rf2nn::{StrengthTriple, VoteScaling};
use crate::synth::{LabeledImage, SyntheticTask};

/// Where a dataset lives on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub train_split: PathBuf,
    pub test_split: Option<PathBuf>,
}

/// Which layers stay fixed during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenLayers {
    /// The leaf layers that encode tree structure.
    #[default]
    TreeStructure,
    None,
}

impl FrozenLayers {
    pub fn set(self, levels: usize) -> FrozenSet {
        match self {
            FrozenLayers::TreeStructure => tree_structure_layers(levels),
            FrozenLayers::None => FrozenSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapBackConfig {
    /// Training pixels used to re-estimate leaf votes.
    pub sampling: SamplingParams,
}

impl Default for MapBackConfig {
    fn default() -> Self {
        MapBackConfig { sampling: SamplingParams { stride: 2, per_class_per_image: None, fraction: 1.0 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: Option<DataConfig>,
    /// Generate data instead of reading `data`.
    pub synth: Option<SyntheticTask>,
    pub classes: usize,
    pub background: usize,
    /// `standard` or a comma-separated filter list.
    pub filters: String,
    pub levels: usize,
    /// Settings shared by every level.
    pub level: LevelParams,
    /// One triple for all levels, or one per level.
    pub strengths: Vec<StrengthTriple>,
    pub vote_scaling: VoteScaling,
    pub frozen: FrozenLayers,
    pub train: TrainConfig,
    pub mapback: MapBackConfig,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: None,
            synth: None,
            classes: 2,
            background: 0,
            filters: "standard".into(),
            levels: 2,
            level: LevelParams::default(),
            strengths: vec![StrengthTriple::default()],
            vote_scaling: VoteScaling::Counts,
            frozen: FrozenLayers::TreeStructure,
            train: TrainConfig::default(),
            mapback: MapBackConfig::default(),
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config("classes must be in 2..=255".into()));
        }
        if self.background >= self.classes {
            return Err(Error::Config("background class must be < classes".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.strengths.len() != 1 && self.strengths.len() != self.levels {
            return Err(Error::Config("give one strength triple or one per level".into()));
        }
        for s in &self.strengths {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(s) = &self.synth {
            s.validate()?;
            if s.classes != self.classes {
                return Err(Error::Config("synth.classes differs from classes".into()));
            }
        }
        self.filters.parse::<FilterBank>()?;
        self.train.validate()
    }

    pub fn level_params(&self) -> Vec<LevelParams> {
        vec![self.level.clone(); self.levels]
    }

    pub fn bank(&self) -> Result<FilterBank> {
        self.filters.parse()
    }
}

/// Fit the preprocessor on the training images and build labeled stacks.
pub fn prepare(bank: FilterBank, train: &[LabeledImage]) -> Result<(Preprocessor, Vec<LabeledStack>)> {
    let images: Vec<_> = train.iter().map(|t| &t.image).collect();
    let (pre, stacks) = Preprocessor::fit(bank, &images)?;
    let data = stacks
        .into_iter()
        .zip(train)
        .map(|(stack, t)| LabeledStack { stack, labels: t.labels.clone() })
        .collect();
    Ok((pre, data))
}

pub fn train_stack(cfg: &ExperimentConfig, pre: &Preprocessor, data: &[LabeledStack]) -> Result<ForestStack> {
    ForestStack::train(data, cfg.classes, &cfg.level_params(), cfg.seed)?.with_preprocessor(pre.clone())
}

pub fn map_net(cfg: &ExperimentConfig, stack: &ForestStack) -> Result<SparseNet> {
    map_stack_to_net(stack, &cfg.strengths, cfg.vote_scaling)
}

pub fn finetune(cfg: &ExperimentConfig, net: SparseNet, data: &[LabeledStack]) -> Result<(SparseNet, Vec<LossRecord>)> {
    let frozen = cfg.frozen.set(net.levels());
    let t = train_sgd(net, data, &cfg.train, &frozen, |_, _| Ok(()))?;
    Ok((t.net, t.curve))
}

pub fn mapback_samples(cfg: &ExperimentConfig, data: &[LabeledStack]) -> Result<Vec<crate::forest::Sample>> {
    let labels: Vec<&LabelMap> = data.iter().map(|d| &d.labels).collect();
    draw_samples(&labels, &cfg.mapback.sampling, cfg.seed ^ 0xB4C)
}

pub fn run_mapback_2(cfg: &ExperimentConfig, net: &SparseNet, stack: &ForestStack, data: &[LabeledStack]) -> Result<(RemappedStack, Mb2Report)> {
    let samples = mapback_samples(cfg, data)?;
    let stacks: Vec<&FeatureStack> = data.iter().map(|d| &d.stack).collect();
    map_back_2(net, stack, &stacks, &samples)
}

/// Scores of one model on the test images.
pub fn score<F>(test: &[(String, FeatureStack, LabelMap)], classes: usize, background: usize, predict: F) -> Result<Evaluation>
where
    F: Fn(&FeatureStack) -> Result<ClassMaps>,
{
    let preds: Vec<LabelMap> = test.iter().map(|(_, s, _)| predict(s).map(|m| m.argmax())).collect::<Result<_>>()?;
    evaluate(test.iter().zip(&preds).map(|((id, _, l), p)| (id.clone(), p, l)), classes, background)
}

#[derive(Debug, Clone)]
pub struct ModelScores {
    pub name: &'static str,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub stack: ForestStack,
    pub net: SparseNet,
    pub tuned: SparseNet,
    pub mb1: RemappedStack,
    pub mb2: RemappedStack,
    pub mb2_report: Mb2Report,
    pub curve: Vec<LossRecord>,
    /// Forest stack, fine-tuned net, map back #1, map back #2.
    pub scores: Vec<ModelScores>,
    pub timings: Vec<(&'static str, Duration)>,
}

impl ExperimentOutcome {
    pub fn dice(&self, name: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.name == name).and_then(|s| s.evaluation.dice)
    }
}

/// Run every stage in memory.
pub fn run_experiment(cfg: &ExperimentConfig, train: &[LabeledImage], test: &[LabeledImage]) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, Duration)>| {
        timings.push((name, clock.elapsed()));
        log::info!("{name}: {:.1?}", clock.elapsed());
        clock = Instant::now();
    };
    let (pre, data) = prepare(cfg.bank()?, train)?;
    let stack = train_stack(cfg, &pre, &data)?;
    lap("train_rf", &mut timings);
    let net = map_net(cfg, &stack)?;
    let (tuned, curve) = finetune(cfg, net.clone(), &data)?;
    lap("finetune", &mut timings);
    let mb1 = map_back_1(&tuned, &stack)?;
    let (mb2, mb2_report) = run_mapback_2(cfg, &tuned, &stack, &data)?;
    lap("mapback", &mut timings);
    let test_stacks: Vec<(String, FeatureStack, LabelMap)> = test
        .iter()
        .map(|t| Ok((t.id.clone(), pre.prepare(&t.image)?, t.labels.clone())))
        .collect::<Result<_>>()?;
    let (c, bg) = (cfg.classes, cfg.background);
    let scores = vec![
        ModelScores { name: "rf", evaluation: score(&test_stacks, c, bg, |s| Ok(stack.predict(s)?.final_maps().clone()))? },
        ModelScores { name: "net", evaluation: score(&test_stacks, c, bg, |s| tuned.predict(s))? },
        ModelScores { name: "mb1", evaluation: score(&test_stacks, c, bg, |s| Ok(mb1.predict(s)?.final_maps().clone()))? },
        ModelScores { name: "mb2", evaluation: score(&test_stacks, c, bg, |s| Ok(mb2.predict(s)?.final_maps().clone()))? },
    ];
    lap("evaluate", &mut timings);
    Ok(ExperimentOutcome { stack, net, tuned, mb1, mb2, mb2_report, curve, scores, timings })
}
