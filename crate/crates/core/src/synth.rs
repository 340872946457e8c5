//! Synthetic labeled images for desk-scale experiments.
//!
//! `Bands` draws an elongated, slightly rotated body split along its long
//! axis into `C - 1` consecutive segments; each segment carries a few chevron
//! shaped bands separated by dark boundaries. Neighboring segments have close
//! mean intensities, so a pixel's class is mostly told apart by where it sits
//! in the body. `Blobs` scatters textured ellipses, at least one per class.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::io::{write_gray8, write_label_map, Palette};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    #[default]
    Bands,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub generator: Generator,
    pub width: usize,
    pub height: usize,
    /// Including background (class 0).
    pub classes: usize,
    /// Standard deviation of additive pixel noise, in intensity units.
    pub noise: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            generator: Generator::Bands,
            width: 128,
            height: 128,
            classes: 6,
            noise: 28.0,
            train: 20,
            test: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 32 {
            return Err(Error::Config("synthetic tasks need 2..=32 classes".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("synthetic images must be at least 16x16".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a finite non-negative number".into()));
        }
        Ok(())
    }

    /// Generate the train and test images. Image `i` uses its own stream, so
    /// adding images never changes earlier ones.
    pub fn generate(&self) -> Result<SyntheticSet> {
        self.validate()?;
        let make = |stream: usize, i: usize, prefix: &str| -> Result<LabeledImage> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(stream as u64);
            let (image, labels) = match self.generator {
                Generator::Bands => bands(self, &mut rng)?,
                Generator::Blobs => blobs(self, &mut rng)?,
            };
            Ok(LabeledImage { id: format!("{prefix}{i:03}"), image, labels })
        };
        let train = (0..self.train).map(|i| make(i, i, "train_")).collect::<Result<Vec<_>>>()?;
        let test = (0..self.test).map(|i| make(self.train + i, i, "test_")).collect::<Result<Vec<_>>>()?;
        Ok(SyntheticSet { train, test })
    }
}

/// Per-class mean intensity. Neighbouring foreground classes differ by a
/// small step; background is dark.
fn class_mean(c: usize, classes: usize) -> f64 {
    if c == 0 {
        return 50.0;
    }
    let fg = (classes - 1).max(1) as f64;
    120.0 + 60.0 * ((c - 1) as f64 / fg)
}

fn finish(task: &SyntheticTask, rng: &mut ChaCha8Rng, labels: Vec<u8>, mut base: Vec<f64>) -> Result<(Image, LabelMap)> {
    let (w, h) = (task.width, task.height);
    let noise = Normal::new(0.0, task.noise.max(1e-12)).expect("valid normal");
    // smooth illumination ramp
    let (gx, gy) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
    for y in 0..h {
        for x in 0..w {
            let ramp = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            let v = &mut base[y * w + x];
            *v += ramp + if task.noise > 0.0 { noise.sample(rng) } else { 0.0 };
        }
    }
    let data = base.into_iter().map(|v| v.clamp(0.0, 255.0).round() as f32).collect();
    Ok((Image::new(w, h, data)?, LabelMap::new(w, h, labels)?))
}

fn bands(task: &SyntheticTask, rng: &mut ChaCha8Rng) -> Result<(Image, LabelMap)> {
    let (w, h) = (task.width as f64, task.height as f64);
    let segs = task.classes - 1;
    let cx = w * (0.5 + rng.random_range(-0.04..0.04));
    let cy = h * (0.5 + rng.random_range(-0.06..0.06));
    let a = w * rng.random_range(0.40..0.46);
    let b = h * rng.random_range(0.16..0.22);
    let angle: f64 = rng.random_range(-0.25..0.25);
    let bend = rng.random_range(-0.25..0.25);
    let (sin, cos) = angle.sin_cos();
    // Segment boundaries along the normalized long axis t ∈ [0, 1].
    let weights: Vec<f64> = (0..segs).map(|_| rng.random_range(0.75..1.25)).collect();
    let total: f64 = weights.iter().sum();
    let mut edges = vec![0.0];
    for wt in &weights {
        edges.push(edges.last().unwrap() + wt / total);
    }
    let per_seg: Vec<usize> = (0..segs).map(|_| rng.random_range(2..4)).collect();
    let chevron = rng.random_range(0.02..0.05);
    let mut labels = Vec::with_capacity(task.width * task.height);
    let mut base = Vec::with_capacity(task.width * task.height);
    for y in 0..task.height {
        for x in 0..task.width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (cos * dx + sin * dy) / a;
            let v0 = (-sin * dx + cos * dy) / b;
            let v = v0 - bend * (u * u - 0.3);
            if u * u + v * v > 1.0 {
                labels.push(0);
                base.push(class_mean(0, task.classes));
                continue;
            }
            let t = ((u + 1.0) / 2.0 + chevron * v.abs()).clamp(0.0, 1.0 - 1e-9);
            let s = edges.partition_point(|&e| e <= t).saturating_sub(1).min(segs - 1);
            let c = s + 1;
            let local = (t - edges[s]) / (edges[s + 1] - edges[s]);
            let band_pos = local * per_seg[s] as f64;
            let near_boundary = (band_pos - band_pos.round()).abs() * (edges[s + 1] - edges[s]) * a * 2.0 / per_seg[s] as f64;
            let mut val = class_mean(c, task.classes);
            if near_boundary < 1.2 {
                val -= 45.0;
            }
            // faint stripes along the body
            val += 8.0 * (v * 6.0).cos();
            labels.push(c as u8);
            base.push(val);
        }
    }
    let hist = LabelMap::new(task.width, task.height, labels.clone())?.histogram(task.classes);
    if hist.iter().any(|&n| n == 0) {
        return Err(Error::InvalidInput("image too small for the requested classes".into()));
    }
    finish(task, rng, labels, base)
}

fn blobs(task: &SyntheticTask, rng: &mut ChaCha8Rng) -> Result<(Image, LabelMap)> {
    let (w, h) = (task.width, task.height);
    let mut labels = vec![0u8; w * h];
    let mut base = vec![class_mean(0, task.classes); w * h];
    let mut order: Vec<usize> = (1..task.classes).collect();
    let extra = rng.random_range(0..task.classes);
    order.extend((0..extra).map(|_| rng.random_range(1..task.classes)));
    let r_max = (w.min(h) as f64) * 0.22;
    for c in order {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (ra, rb) = (rng.random_range(r_max * 0.4..r_max), rng.random_range(r_max * 0.4..r_max));
        let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, co) = ang.sin_cos();
        let freq = rng.random_range(0.2..0.6);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = ((co * dx + s * dy) / ra, (-s * dx + co * dy) / rb);
                if u * u + v * v <= 1.0 {
                    labels[y * w + x] = c as u8;
                    base[y * w + x] = class_mean(c, task.classes) + 15.0 * (freq * (dx + dy) * c as f64).sin();
                }
            }
        }
    }
    // a class overwritten everywhere gets one small disc near the center
    let hist = LabelMap::new(w, h, labels.clone())?.histogram(task.classes);
    for (c, &n) in hist.iter().enumerate().skip(1) {
        if n == 0 {
            let (cx, cy) = (rng.random_range(4..w - 4), rng.random_range(4..h - 4));
            for y in cy - 3..=cy + 3 {
                for x in cx - 3..=cx + 3 {
                    labels[y * w + x] = c as u8;
                    base[y * w + x] = class_mean(c, task.classes);
                }
            }
        }
    }
    finish(task, rng, labels, base)
}

/// Write a dataset directory: `images/`, `labels/`, `palette.txt`,
/// `train.txt` and `test.txt` (one id per line).
pub fn write_dataset(dir: &Path, set: &SyntheticSet, classes: usize) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let palette = Palette::for_classes(classes);
    palette.save(&dir.join("palette.txt"))?;
    for (name, items) in [("train.txt", &set.train), ("test.txt", &set.test)] {
        let mut list = String::new();
        for it in items.iter() {
            let px: Vec<u8> = it.image.data().iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect();
            write_gray8(&images.join(format!("{}.png", it.id)), it.image.width(), it.image.height(), &px)?;
            write_label_map(&labels.join(format!("{}.png", it.id)), &it.labels, &palette)?;
            list.push_str(&it.id);
            list.push('\n');
        }
        let p = dir.join(name);
        fs::write(&p, list).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
