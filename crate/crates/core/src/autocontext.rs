//! Auto-context stacking: level `k > 1` reads the filter channels plus the
//! class maps predicted by level `k - 1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ChannelStats, FeatureStack, PixelFeatures, Preprocessor};
use crate::forest::{self, draw_samples, normalize_votes, Forest, ForestParams, SamplingParams};
use crate::grid::{ClassMaps, Image, LabelMap};

const MANIFEST_HEADER: &str = "forestnet-stack 1";
const MANIFEST_FILE: &str = "manifest.txt";

/// Forest and sampling settings for one level.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelParams {
    pub forest: ForestParams,
    pub sampling: SamplingParams,
}

/// A filter stack with its ground truth.
#[derive(Debug, Clone)]
pub struct LabeledStack {
    pub stack: FeatureStack,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestStack {
    levels: Vec<Forest>,
    classes: usize,
    filter_channels: usize,
    preprocessor: Option<Preprocessor>,
}

/// Per-level class maps for one image, first level first.
#[derive(Debug, Clone, PartialEq)]
pub struct StackTrace {
    pub levels: Vec<ClassMaps>,
}

impl StackTrace {
    pub fn final_maps(&self) -> &ClassMaps {
        self.levels.last().expect("trace has at least one level")
    }
}

fn level_seed(seed: u64, level: usize) -> u64 {
    seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl ForestStack {
    pub fn new(levels: Vec<Forest>, filter_channels: usize, preprocessor: Option<Preprocessor>) -> Result<Self> {
        let first = levels.first().ok_or_else(|| Error::InvalidInput("stack has no levels".into()))?;
        let classes = first.classes();
        for (k, f) in levels.iter().enumerate() {
            if f.classes() != classes {
                return Err(Error::Schema(format!("level {} has {} classes", k + 1, f.classes())));
            }
            let expect = if k == 0 { filter_channels } else { filter_channels + classes };
            if f.schema().channels != expect {
                return Err(Error::Schema(format!(
                    "level {} reads {} channels, expected {expect}",
                    k + 1,
                    f.schema().channels
                )));
            }
        }
        if let Some(p) = &preprocessor {
            if p.channels() != filter_channels {
                return Err(Error::Schema("preprocessor channel count differs from the stack".into()));
            }
        }
        Ok(ForestStack { levels, classes, filter_channels, preprocessor })
    }

    /// Train `params.len()` levels on the given filter stacks. Each level's
    /// context maps come from running the levels below it on the same images.
    pub fn train(data: &[LabeledStack], classes: usize, params: &[LevelParams], seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no training images".into()));
        }
        if params.is_empty() {
            return Err(Error::Config("stack needs at least one level".into()));
        }
        let filter_channels = data[0].stack.channels();
        for d in data {
            if d.stack.channels() != filter_channels {
                return Err(Error::Schema("training stacks disagree on channel count".into()));
            }
            if d.stack.width() != d.labels.width() || d.stack.height() != d.labels.height() {
                return Err(Error::Dimension("label map size differs from its image".into()));
            }
        }
        let labels: Vec<&LabelMap> = data.iter().map(|d| &d.labels).collect();
        let mut inputs: Vec<FeatureStack> = data.iter().map(|d| d.stack.clone()).collect();
        let mut levels = Vec::with_capacity(params.len());
        for (k, p) in params.iter().enumerate() {
            let samples = draw_samples(&labels, &p.sampling, level_seed(seed, k) ^ 0x5A)?;
            log::info!("level {}: {} training samples", k + 1, samples.len());
            let forest = forest::train_forest(&samples, &inputs, classes, &p.forest, level_seed(seed, k))?;
            if k + 1 < params.len() {
                inputs = data
                    .iter()
                    .zip(&inputs)
                    .map(|(d, s)| d.stack.with_context(&forest.predict_image(s)?))
                    .collect::<Result<_>>()?;
            }
            levels.push(forest);
        }
        ForestStack::new(levels, filter_channels, None)
    }

    pub fn with_preprocessor(mut self, preprocessor: Preprocessor) -> Result<Self> {
        if preprocessor.channels() != self.filter_channels {
            return Err(Error::Schema("preprocessor channel count differs from the stack".into()));
        }
        self.preprocessor = Some(preprocessor);
        Ok(self)
    }

    pub fn levels(&self) -> &[Forest] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Forest] {
        &mut self.levels
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

    /// The first `k` levels.
    pub fn truncated(&self, k: usize) -> Result<ForestStack> {
        if k == 0 || k > self.levels.len() {
            return Err(Error::InvalidInput(format!("cannot keep {k} of {} levels", self.levels.len())));
        }
        ForestStack::new(self.levels[..k].to_vec(), self.filter_channels, self.preprocessor.clone())
    }

    /// Fraction of level `k`'s split nodes (0-based) that read a context channel.
    pub fn context_usage(&self, level: usize) -> f64 {
        let mut total = 0usize;
        let mut ctx = 0usize;
        for t in self.levels[level].trees() {
            for n in t.split_ids() {
                total += 1;
                if t.split(n).unwrap().feature.channel >= self.filter_channels {
                    ctx += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            ctx as f64 / total as f64
        }
    }

    /// Run a normalized filter stack through every level.
    pub fn predict(&self, filters: &FeatureStack) -> Result<StackTrace> {
        run_levels(&self.levels, self.filter_channels, filters, |_, v| normalize_votes(v))
    }

    /// Preprocess a raw image and run it through every level.
    pub fn predict_image(&self, image: &Image) -> Result<StackTrace> {
        let pre = self
            .preprocessor
            .as_ref()
            .ok_or_else(|| Error::Config("stack has no preprocessor; pass a feature stack".into()))?;
        self.predict(&pre.prepare(image)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with(dir, &[])
    }

    /// Write the manifest and one forest file per level, plus extra manifest
    /// entries.
    pub fn save_with(&self, dir: &Path, extra: &[(String, String)]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = String::new();
        writeln!(m, "{MANIFEST_HEADER}").unwrap();
        writeln!(m, "levels {}", self.levels.len()).unwrap();
        writeln!(m, "classes {}", self.classes).unwrap();
        writeln!(m, "filter_channels {}", self.filter_channels).unwrap();
        for (k, f) in self.levels.iter().enumerate() {
            let file = format!("level_{}.forest", k + 1);
            writeln!(m, "level {} delta_max {} channels {} file {file}", k + 1, f.schema().delta_max, f.schema().channels).unwrap();
            let path = dir.join(&file);
            fs::write(&path, f.to_text()).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(p) = &self.preprocessor {
            write_preprocessor(&mut m, p);
        }
        for (k, v) in extra {
            writeln!(m, "{k} {v}").unwrap();
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, m).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<ForestStack> {
        Ok(Self::load_with(dir)?.0)
    }

    /// Load a stack and return manifest keys this module does not interpret.
    pub fn load_with(dir: &Path) -> Result<(ForestStack, BTreeMap<String, String>)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::format("stack manifest", "bad header"));
        }
        let mut extra = BTreeMap::new();
        let mut levels = Vec::new();
        let mut filter_channels = None;
        let mut count = None;
        let mut pre = PreprocessorReader::default();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "levels" => count = Some(parse_usize(rest, "levels")?),
                "classes" => {}
                "filter_channels" => filter_channels = Some(parse_usize(rest, "filter_channels")?),
                "level" => {
                    let file = rest
                        .split_whitespace()
                        .skip_while(|t| *t != "file")
                        .nth(1)
                        .ok_or_else(|| Error::format("stack manifest", format!("level line without file: {line}")))?;
                    let p = dir.join(file);
                    let t = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    levels.push(Forest::from_text(&t)?);
                }
                "bank" | "stat" => pre.line(key, rest)?,
                _ => {
                    extra.insert(key.to_string(), rest.to_string());
                }
            }
        }
        if count != Some(levels.len()) {
            return Err(Error::format("stack manifest", "level count does not match level entries"));
        }
        let fc = filter_channels.ok_or_else(|| Error::format("stack manifest", "missing filter_channels"))?;
        Ok((ForestStack::new(levels, fc, pre.finish()?)?, extra))
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::format("manifest", format!("bad {what}: '{s}'")))
}

pub(crate) fn write_preprocessor(out: &mut String, p: &Preprocessor) {
    writeln!(out, "bank {}", p.bank).unwrap();
    for line in p.stats.to_text().lines() {
        writeln!(out, "stat {line}").unwrap();
    }
}

/// Collects `bank` and `stat` manifest lines.
#[derive(Default)]
pub(crate) struct PreprocessorReader {
    bank: Option<crate::features::FilterBank>,
    stats: ChannelStats,
}

impl PreprocessorReader {
    pub(crate) fn line(&mut self, key: &str, rest: &str) -> Result<()> {
        match key {
            "bank" => {
                self.bank = Some(rest.trim().parse()?);
                Ok(())
            }
            _ => ChannelStats::parse_line(rest, &mut self.stats),
        }
    }

    pub(crate) fn finish(self) -> Result<Option<Preprocessor>> {
        match self.bank {
            None => Ok(None),
            Some(bank) => {
                if self.stats.channels() != bank.len() {
                    return Err(Error::format("manifest", "stats do not match the filter bank"));
                }
                Ok(Some(Preprocessor { bank, stats: self.stats }))
            }
        }
    }
}

/// Level-at-a-time evaluation. `post(level, vote_sum)` turns a level's summed
/// votes into that level's class maps.
pub(crate) fn run_levels<P>(levels: &[Forest], filter_channels: usize, filters: &FeatureStack, post: P) -> Result<StackTrace>
where
    P: Fn(usize, Vec<f64>) -> Vec<f64> + Sync,
{
    if filters.channels() != filter_channels {
        return Err(Error::Schema(format!(
            "stack expects {filter_channels} filter channels, got {}",
            filters.channels()
        )));
    }
    let mut out: Vec<ClassMaps> = Vec::with_capacity(levels.len());
    for (k, forest) in levels.iter().enumerate() {
        let input = match out.last() {
            None => filters.clone(),
            Some(prev) => filters.with_context(prev)?,
        };
        forest.check_stack(&input)?;
        let maps = forest::map_pixels(&input, forest.classes(), |x, y| {
            post(k, forest.vote_sum(&PixelFeatures { stack: &input, x, y }))
        });
        out.push(maps);
    }
    Ok(StackTrace { levels: out })
}
