//! Experiment configuration files and the datasets they point at.

use std::fs;
use std::path::{Path, PathBuf};

use forestnet::autocontext::LabeledStack;
use forestnet::dataset::{check_disjoint, load_labeled, read_split};
use forestnet::features::Preprocessor;
use forestnet::pipeline::ExperimentConfig;
use forestnet::synth::LabeledImage;

use crate::error::{CliError, CliResult};

/// Parse and validate a TOML config. Relative paths are taken relative to
/// the config file's directory.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(d) = cfg.data.as_mut() {
        for p in [&mut d.images, &mut d.labels, &mut d.train_split] {
            *p = rebase(base, p);
        }
        if let Some(t) = d.test_split.as_mut() {
            *t = rebase(base, t);
        }
    }
    cfg.output = rebase(base, &cfg.output);
    cfg.validate()?;
    if let Some(d) = &cfg.data {
        let mut required = vec![("images dir", &d.images), ("labels dir", &d.labels), ("train split", &d.train_split)];
        if let Some(t) = &d.test_split {
            required.push(("test split", t));
        }
        for (what, p) in required {
            if !p.exists() {
                return Err(CliError::Config(format!("{what} {} does not exist", p.display())));
            }
        }
    } else if cfg.synth.is_none() {
        return Err(CliError::Config("config needs a [data] or a [synth] section".into()));
    }
    Ok(cfg)
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Training and test images named by the config, generated when it has a
/// `[synth]` section.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> CliResult<Vec<LabeledImage>> {
    let images = if let Some(task) = &cfg.synth {
        let set = task.generate()?;
        match split {
            Split::Train => set.train,
            Split::Test => set.test,
        }
    } else {
        let d = cfg.data.as_ref().ok_or_else(|| CliError::Config("no [data] section".into()))?;
        let train = read_split(&d.train_split)?;
        let test = d.test_split.as_deref().map(read_split).transpose()?;
        if let Some(test) = &test {
            check_disjoint(&train, test)?;
        }
        let ids = match split {
            Split::Train => train,
            Split::Test => test.ok_or_else(|| CliError::Config("config has no test_split".into()))?,
        };
        load_labeled(&d.images, &d.labels, &ids)?
    };
    if images.is_empty() {
        return Err(CliError::Data("split is empty".into()));
    }
    for im in &images {
        if let Some(bad) = im.labels.labels().iter().find(|&&l| l as usize >= cfg.classes && l != forestnet::grid::IGNORE_LABEL) {
            return Err(CliError::Data(format!("image '{}' has label {bad} but classes = {}", im.id, cfg.classes)));
        }
    }
    Ok(images)
}

/// Filter stacks computed with an already fitted preprocessor.
pub fn stacks_with(pre: &Preprocessor, images: &[LabeledImage]) -> CliResult<Vec<LabeledStack>> {
    images
        .iter()
        .map(|im| Ok(LabeledStack { stack: pre.prepare(&im.image)?, labels: im.labels.clone() }))
        .collect()
}
