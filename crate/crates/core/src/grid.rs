//! Plain raster containers: grayscale images, label maps and per-class maps.

use crate::error::{Error, Result};

/// Label value for pixels that carry no ground truth.
pub const IGNORE_LABEL: u8 = 255;

/// Relative tolerance under which two class scores are treated as tied.
///
/// Ties resolve to the lowest class index, so scores that differ only by
/// floating-point rounding of an exact tie give the same label.
pub const ARGMAX_TIE_TOLERANCE: f64 = 1e-12;

/// Single-channel real-valued image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Per-pixel class labels; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Dimension(format!(
                "label map {width}x{height} with {} entries",
                labels.len()
            )));
        }
        Ok(LabelMap {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Largest non-ignore label plus one, or 0 when every pixel is ignored.
    pub fn class_bound(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != IGNORE_LABEL)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Per-class pixel counts over `classes` classes, ignoring unlabeled pixels.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0usize; classes];
        for &l in &self.labels {
            if l != IGNORE_LABEL && (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Per-class real-valued maps stored as `classes` contiguous row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMaps {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ClassMaps {
    pub fn zeros(width: usize, height: usize, classes: usize) -> Self {
        ClassMaps {
            width,
            height,
            classes,
            data: vec![0.0; width * height * classes],
        }
    }

    pub fn from_planes(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * classes {
            return Err(Error::Dimension(format!(
                "class maps {width}x{height}x{classes} with {} values",
                data.len()
            )));
        }
        Ok(ClassMaps {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, class: usize, x: usize, y: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, class: usize, x: usize, y: usize, value: f64) {
        self.data[(class * self.height + y) * self.width + x] = value;
    }

    pub fn plane(&self, class: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[class * n..(class + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Class vector at one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.classes).map(|c| self.get(c, x, y)).collect()
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, values: &[f64]) {
        for (c, &v) in values.iter().enumerate() {
            self.set(c, x, y, v);
        }
    }

    /// Per-pixel argmax label map.
    pub fn argmax(&self) -> LabelMap {
        let mut labels = Vec::with_capacity(self.width * self.height);
        let mut buf = vec![0.0; self.classes];
        for y in 0..self.height {
            for x in 0..self.width {
                for (c, b) in buf.iter_mut().enumerate() {
                    *b = self.get(c, x, y);
                }
                labels.push(argmax(&buf) as u8);
            }
        }
        LabelMap {
            width: self.width,
            height: self.height,
            labels,
        }
    }
}

/// Index of the largest value; near-ties (see [`ARGMAX_TIE_TOLERANCE`])
/// resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let b = values[best];
        let scale = v.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        if v > b && (v - b) / scale > ARGMAX_TIE_TOLERANCE {
            best = i;
        }
    }
    best
}

/// Clamp a signed coordinate to `[0, len)`.
#[inline]
pub fn clamp_coord(v: i64, len: usize) -> usize {
    v.clamp(0, len as i64 - 1) as usize
}
