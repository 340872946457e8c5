//! Segmentation metrics: foreground-averaged per-class pixel accuracy and
//! class-balanced Dice, both computed from a confusion matrix.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{LabelMap, IGNORE_LABEL};

/// `counts[truth * classes + pred]`; pixels labeled [`IGNORE_LABEL`] are
/// only tallied in `ignored`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes], ignored: 0 }
    }

    pub fn from_maps(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<Self> {
        let mut m = ConfusionMatrix::new(classes);
        m.add_maps(pred, truth)?;
        Ok(m)
    }

    pub fn add_maps(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs labels {}x{}",
                pred.width(),
                pred.height(),
                truth.width(),
                truth.height()
            )));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if p as usize >= self.classes || t as usize >= self.classes {
                return Err(Error::InvalidInput(format!("label {} outside {} classes", p.max(t), self.classes)));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Labeled pixels evaluated.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn truth_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn pred_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// Per-class recall; `None` for classes absent from the labels.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let n = self.truth_count(c);
        (n > 0).then(|| self.get(c, c) as f64 / n as f64)
    }

    /// Per-class Dice `2|P∩G| / (|P| + |G|)`; `None` when the class is in
    /// neither prediction nor labels.
    pub fn dice(&self, c: usize) -> Option<f64> {
        let denom = self.truth_count(c) + self.pred_count(c);
        (denom > 0).then(|| 2.0 * self.get(c, c) as f64 / denom as f64)
    }

    /// Mean recall over foreground classes present in the labels.
    pub fn foreground_accuracy(&self, background: usize) -> Option<f64> {
        mean((0..self.classes).filter(|&c| c != background).filter_map(|c| {
            let r = self.recall(c);
            if r.is_none() {
                log::warn!("class {c} absent from labels; left out of the accuracy mean");
            }
            r
        }))
    }

    /// Unweighted mean of per-class Dice over the classes present in either
    /// map. `background`, when given, is left out.
    pub fn class_balanced_dice(&self, background: Option<usize>) -> Option<f64> {
        mean((0..self.classes).filter(|&c| Some(c) != background).filter_map(|c| self.dice(c)))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean over foreground classes of per-class recall. `None` when no
/// foreground class occurs in the labels.
pub fn pixel_accuracy_foreground(pred: &LabelMap, truth: &LabelMap, classes: usize, background: usize) -> Result<Option<f64>> {
    Ok(ConfusionMatrix::from_maps(pred, truth, classes)?.foreground_accuracy(background))
}

/// Unweighted mean of per-class Dice over present classes, background
/// excluded when given.
pub fn dice_class_balanced(pred: &LabelMap, truth: &LabelMap, classes: usize, background: Option<usize>) -> Result<Option<f64>> {
    Ok(ConfusionMatrix::from_maps(pred, truth, classes)?.class_balanced_dice(background))
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub image: String,
    pub metric: String,
    pub value: f64,
}

/// Per-image rows for both metrics plus pooled-matrix rows under `image = "all"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    pub pooled: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub dice: Option<f64>,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,metric,value\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.image, r.metric, r.value).unwrap();
        }
        s
    }
}

/// Evaluate named prediction/label pairs. Aggregates come from the pooled
/// confusion matrix.
pub fn evaluate<'a>(
    pairs: impl IntoIterator<Item = (String, &'a LabelMap, &'a LabelMap)>,
    classes: usize,
    background: usize,
) -> Result<Evaluation> {
    let mut pooled = ConfusionMatrix::new(classes);
    let mut rows = Vec::new();
    for (name, pred, truth) in pairs {
        let m = ConfusionMatrix::from_maps(pred, truth, classes)?;
        if let Some(a) = m.foreground_accuracy(background) {
            rows.push(MetricRow { image: name.clone(), metric: "pixel_accuracy_fg".into(), value: a });
        }
        if let Some(d) = m.class_balanced_dice(Some(background)) {
            rows.push(MetricRow { image: name, metric: "dice_class_balanced".into(), value: d });
        }
        pooled.merge(&m);
    }
    let accuracy = pooled.foreground_accuracy(background);
    let dice = pooled.class_balanced_dice(Some(background));
    if let Some(a) = accuracy {
        rows.push(MetricRow { image: "all".into(), metric: "pixel_accuracy_fg".into(), value: a });
    }
    if let Some(d) = dice {
        rows.push(MetricRow { image: "all".into(), metric: "dice_class_balanced".into(), value: d });
    }
    Ok(Evaluation { rows, pooled, accuracy, dice })
}
