//! Per-pixel feature space: a fixed filter bank applied to a grayscale image,
//! channel normalization, and contextual offset lookups.
//!
//! A [`FeatureStack`] stores one row-major `f32` plane per channel. Level-1
//! forests see only filter responses; stacked levels append the previous
//! level's class maps as extra channels (see [`FeatureStack::with_context`]).
//! Every lookup outside the image is clamped to the nearest valid pixel.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{clamp_coord, ClassMaps, Image};

/// Floor applied to per-channel standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-8;

const CACHE_MAGIC: &[u8; 8] = b"FNFSTACK";
const CACHE_VERSION: u32 = 1;

/// A single fixed filter of the bank.
#[derive(Debug, Clone, PartialEq)]
pub enum Filter {
    /// Raw intensity.
    Identity,
    /// Gaussian blur.
    Gaussian { sigma: f64 },
    /// Gradient magnitude of the Gaussian-smoothed image.
    GradientMagnitude { sigma: f64 },
    /// Five-point Laplacian of the Gaussian-smoothed image.
    Laplacian { sigma: f64 },
    /// Larger (`larger = true`) or smaller eigenvalue of the structure tensor.
    StructureEigen { sigma: f64, rho: f64, larger: bool },
    /// Mean over a `(2r+1)²` box.
    BoxMean { radius: usize },
    /// Central difference along x of the Gaussian-smoothed image.
    DerivativeX { sigma: f64 },
    /// Central difference along y of the Gaussian-smoothed image.
    DerivativeY { sigma: f64 },
}

impl Filter {
    /// Kernel half-width `h` of the filter's support.
    pub fn half_width(&self) -> usize {
        let r = |s: f64| (3.0 * s).ceil() as usize;
        match *self {
            Filter::Identity => 0,
            Filter::Gaussian { sigma } => r(sigma),
            Filter::GradientMagnitude { sigma }
            | Filter::Laplacian { sigma }
            | Filter::DerivativeX { sigma }
            | Filter::DerivativeY { sigma } => r(sigma) + 1,
            Filter::StructureEigen { sigma, rho, .. } => r(sigma) + 1 + r(rho),
            Filter::BoxMean { radius } => radius,
        }
    }

    /// Apply the filter with reflect padding; returns one row-major plane.
    pub fn apply(&self, img: &Image) -> Vec<f32> {
        let (w, h) = (img.width(), img.height());
        let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let out = match *self {
            Filter::Identity => src,
            Filter::Gaussian { sigma } => gaussian_blur(&src, w, h, sigma),
            Filter::BoxMean { radius } => {
                let k = vec![1.0 / (2 * radius + 1) as f64; 2 * radius + 1];
                separable(&src, w, h, &k)
            }
            Filter::DerivativeX { sigma } => {
                let s = gaussian_blur(&src, w, h, sigma);
                derivative(&s, w, h, true)
            }
            Filter::DerivativeY { sigma } => {
                let s = gaussian_blur(&src, w, h, sigma);
                derivative(&s, w, h, false)
            }
            Filter::GradientMagnitude { sigma } => {
                let s = gaussian_blur(&src, w, h, sigma);
                let gx = derivative(&s, w, h, true);
                let gy = derivative(&s, w, h, false);
                gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
            }
            Filter::Laplacian { sigma } => {
                let s = gaussian_blur(&src, w, h, sigma);
                let mut out = vec![0.0; w * h];
                for y in 0..h {
                    for x in 0..w {
                        let at = |dx: i64, dy: i64| {
                            s[reflect(y as i64 + dy, h) * w + reflect(x as i64 + dx, w)]
                        };
                        out[y * w + x] = at(1, 0) + at(-1, 0) + at(0, 1) + at(0, -1) - 4.0 * at(0, 0);
                    }
                }
                out
            }
            Filter::StructureEigen { sigma, rho, larger } => {
                let s = gaussian_blur(&src, w, h, sigma);
                let gx = derivative(&s, w, h, true);
                let gy = derivative(&s, w, h, false);
                let jxx: Vec<f64> = gx.iter().map(|v| v * v).collect();
                let jyy: Vec<f64> = gy.iter().map(|v| v * v).collect();
                let jxy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
                let jxx = gaussian_blur(&jxx, w, h, rho);
                let jyy = gaussian_blur(&jyy, w, h, rho);
                let jxy = gaussian_blur(&jxy, w, h, rho);
                (0..w * h)
                    .map(|i| {
                        let half_tr = 0.5 * (jxx[i] + jyy[i]);
                        let d = (0.25 * (jxx[i] - jyy[i]).powi(2) + jxy[i] * jxy[i]).sqrt();
                        if larger {
                            half_tr + d
                        } else {
                            half_tr - d
                        }
                    })
                    .collect()
            }
        };
        out.into_iter().map(|v| v as f32).collect()
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Filter::Identity => write!(f, "identity"),
            Filter::Gaussian { sigma } => write!(f, "gauss:{sigma}"),
            Filter::GradientMagnitude { sigma } => write!(f, "gradmag:{sigma}"),
            Filter::Laplacian { sigma } => write!(f, "laplace:{sigma}"),
            Filter::StructureEigen { sigma, rho, larger: true } => write!(f, "st_max:{sigma}:{rho}"),
            Filter::StructureEigen { sigma, rho, larger: false } => write!(f, "st_min:{sigma}:{rho}"),
            Filter::BoxMean { radius } => write!(f, "box:{radius}"),
            Filter::DerivativeX { sigma } => write!(f, "dx:{sigma}"),
            Filter::DerivativeY { sigma } => write!(f, "dy:{sigma}"),
        }
    }
}

impl FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Config(format!("bad filter token '{s}'"));
        let num = |i: usize| -> Result<f64> {
            let v: f64 = parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        let filter = match parts[0] {
            "identity" if parts.len() == 1 => Filter::Identity,
            "gauss" if parts.len() == 2 => Filter::Gaussian { sigma: num(1)? },
            "gradmag" if parts.len() == 2 => Filter::GradientMagnitude { sigma: num(1)? },
            "laplace" if parts.len() == 2 => Filter::Laplacian { sigma: num(1)? },
            "dx" if parts.len() == 2 => Filter::DerivativeX { sigma: num(1)? },
            "dy" if parts.len() == 2 => Filter::DerivativeY { sigma: num(1)? },
            "st_max" | "st_min" if parts.len() == 3 => Filter::StructureEigen {
                sigma: num(1)?,
                rho: num(2)?,
                larger: parts[0] == "st_max",
            },
            "box" if parts.len() == 2 => Filter::BoxMean {
                radius: parts[1].parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        Ok(filter)
    }
}

/// Ordered set of filters; channel `i` of the resulting stack is filter `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    filters: Vec<Filter>,
}

impl FilterBank {
    pub fn new(filters: Vec<Filter>) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::Config("filter bank needs at least one filter".into()));
        }
        Ok(FilterBank { filters })
    }

    /// Raw intensity, Gaussian blurs at σ ∈ {1,2,4,8}, gradient magnitude,
    /// Laplacian and both structure-tensor eigenvalues.
    pub fn standard() -> Self {
        FilterBank {
            filters: vec![
                Filter::Identity,
                Filter::Gaussian { sigma: 1.0 },
                Filter::Gaussian { sigma: 2.0 },
                Filter::Gaussian { sigma: 4.0 },
                Filter::Gaussian { sigma: 8.0 },
                Filter::GradientMagnitude { sigma: 1.0 },
                Filter::Laplacian { sigma: 1.0 },
                Filter::StructureEigen { sigma: 1.0, rho: 2.0, larger: true },
                Filter::StructureEigen { sigma: 1.0, rho: 2.0, larger: false },
            ],
        }
    }

    pub fn filters(&self) -> &[Filter] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Filter the image into an `H×W×F` stack. Channel 0 is the raw
    /// intensity whenever the bank starts with [`Filter::Identity`].
    pub fn apply(&self, img: &Image) -> Result<FeatureStack> {
        let mut data = Vec::with_capacity(img.width() * img.height() * self.filters.len());
        for f in &self.filters {
            data.extend(f.apply(img));
        }
        FeatureStack::from_planes(
            img.width(),
            img.height(),
            self.filters.iter().map(|f| f.to_string()).collect(),
            data,
        )
    }
}

impl fmt::Display for FilterBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<String> = self.filters.iter().map(|f| f.to_string()).collect();
        write!(f, "{}", tokens.join(","))
    }
}

impl FromStr for FilterBank {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "standard" {
            return Ok(FilterBank::standard());
        }
        let filters = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Filter>>>()?;
        FilterBank::new(filters)
    }
}

/// Index into a [`FeatureStack`] plus a pixel offset: the feature read at
/// `(x + dx, y + dy)` in `channel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OffsetFeatureId {
    pub channel: usize,
    pub dx: i32,
    pub dy: i32,
}

impl OffsetFeatureId {
    pub fn new(channel: usize, dx: i32, dy: i32) -> Self {
        OffsetFeatureId { channel, dx, dy }
    }

    pub fn centered(channel: usize) -> Self {
        OffsetFeatureId { channel, dx: 0, dy: 0 }
    }

    /// Whether the offset lies inside the `(2Δ+1)²` window.
    pub fn within(&self, delta_max: u32) -> bool {
        self.dx.unsigned_abs() <= delta_max && self.dy.unsigned_abs() <= delta_max
    }
}

impl fmt::Display for OffsetFeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.channel, self.dx, self.dy)
    }
}

/// Anything that can answer an offset-feature query for one sample.
pub trait FeatureSource {
    fn feature(&self, fid: OffsetFeatureId) -> f64;
}

impl<F: Fn(OffsetFeatureId) -> f64> FeatureSource for F {
    fn feature(&self, fid: OffsetFeatureId) -> f64 {
        self(fid)
    }
}

/// A pixel of a feature stack viewed as a feature vector.
#[derive(Debug, Clone, Copy)]
pub struct PixelFeatures<'a> {
    pub stack: &'a FeatureStack,
    pub x: usize,
    pub y: usize,
}

impl FeatureSource for PixelFeatures<'_> {
    #[inline]
    fn feature(&self, fid: OffsetFeatureId) -> f64 {
        self.stack.sample(self.x, self.y, fid)
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Pooled moments over every pixel of every stack. Standard deviations
    /// are floored at [`STD_FLOOR`].
    pub fn from_stacks(stacks: &[&FeatureStack]) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::InvalidInput("no stacks to compute statistics".into()))?;
        let channels = first.channels();
        if stacks.iter().any(|s| s.channels() != channels) {
            return Err(Error::Schema("stacks disagree on channel count".into()));
        }
        let count: usize = stacks.iter().map(|s| s.width * s.height).sum();
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let sum: f64 = stacks
                .iter()
                .flat_map(|s| s.plane(c).iter())
                .map(|&v| v as f64)
                .sum();
            let m = sum / count as f64;
            let var: f64 = stacks
                .iter()
                .flat_map(|s| s.plane(c).iter())
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>()
                / count as f64;
            mean[c] = m;
            std[c] = var.sqrt().max(STD_FLOOR);
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// One `mean std` line per channel, shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| format!("{m} {s}\n"))
            .collect()
    }

    pub fn parse_line(line: &str, stats: &mut ChannelStats) -> Result<()> {
        let mut it = line.split_whitespace();
        let mut next = || -> Result<f64> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::format("channel stats", format!("bad line '{line}'")))
        };
        stats.mean.push(next()?);
        stats.std.push(next()?);
        Ok(())
    }
}

/// `H×W×channels` feature values, one `f32` plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    names: Vec<String>,
    data: Vec<f32>,
    stats: Option<ChannelStats>,
}

impl FeatureStack {
    pub fn from_planes(width: usize, height: usize, names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || names.is_empty() {
            return Err(Error::Dimension(format!(
                "feature stack {width}x{height} with {} channels",
                names.len()
            )));
        }
        if data.len() != width * height * names.len() {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                width * height * names.len(),
                data.len()
            )));
        }
        Ok(FeatureStack {
            width,
            height,
            names,
            data,
            stats: None,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Statistics used to normalize the leading channels, if any.
    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, channel: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    /// Offset lookup with clamp-to-edge; no bounds check on the channel.
    #[inline]
    pub fn sample(&self, x: usize, y: usize, fid: OffsetFeatureId) -> f64 {
        let sx = clamp_coord(x as i64 + fid.dx as i64, self.width);
        let sy = clamp_coord(y as i64 + fid.dy as i64, self.height);
        self.value(sx, sy, fid.channel) as f64
    }

    /// Checked offset lookup.
    pub fn lookup(&self, x: usize, y: usize, fid: OffsetFeatureId) -> Result<f64> {
        if x >= self.width || y >= self.height {
            return Err(Error::Index(format!(
                "pixel ({x}, {y}) outside {}x{} stack",
                self.width, self.height
            )));
        }
        if fid.channel >= self.channels() {
            return Err(Error::Index(format!(
                "channel {} out of range for {} channels",
                fid.channel,
                self.channels()
            )));
        }
        Ok(self.sample(x, y, fid))
    }

    /// The first `channels` channels as a new stack.
    pub fn leading(&self, channels: usize) -> Result<FeatureStack> {
        if channels == 0 || channels > self.channels() {
            return Err(Error::Index(format!(
                "cannot take {channels} of {} channels",
                self.channels()
            )));
        }
        let n = self.width * self.height;
        Ok(FeatureStack {
            width: self.width,
            height: self.height,
            names: self.names[..channels].to_vec(),
            data: self.data[..channels * n].to_vec(),
            stats: self.stats.clone(),
        })
    }

    /// This stack with the class maps appended as channels `p0..p{C-1}`.
    pub fn with_context(&self, maps: &ClassMaps) -> Result<FeatureStack> {
        if maps.width() != self.width || maps.height() != self.height {
            return Err(Error::Dimension(format!(
                "context maps {}x{} do not match stack {}x{}",
                maps.width(),
                maps.height(),
                self.width,
                self.height
            )));
        }
        let mut names = self.names.clone();
        names.extend((0..maps.classes()).map(|c| format!("p{c}")));
        let mut data = self.data.clone();
        data.extend(maps.data().iter().map(|&v| v as f32));
        Ok(FeatureStack {
            width: self.width,
            height: self.height,
            names,
            data,
            stats: self.stats.clone(),
        })
    }

    /// Write the versioned binary cache: magic, dims, channel names, stats,
    /// then row-major little-endian `f32` planes.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.data.len() * 4);
        buf.extend_from_slice(CACHE_MAGIC);
        for v in [CACHE_VERSION, self.width as u32, self.height as u32, self.channels() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.names {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        match &self.stats {
            Some(s) => {
                buf.push(1);
                buf.extend_from_slice(&(s.channels() as u32).to_le_bytes());
                for (m, d) in s.mean.iter().zip(&s.std) {
                    buf.extend_from_slice(&m.to_le_bytes());
                    buf.extend_from_slice(&d.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<FeatureStack> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let mut r = ByteReader { buf: &buf, pos: 0, ctx: &ctx };
        if r.take(8)? != CACHE_MAGIC {
            return Err(Error::format(&ctx, "not a feature-stack cache"));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::format(&ctx, format!("unsupported version {version}")));
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let mut names = Vec::with_capacity(channels);
        for _ in 0..channels {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(&ctx, "channel name is not utf-8"))?;
            names.push(s.to_string());
        }
        let stats = match r.take(1)?[0] {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let mut s = ChannelStats { mean: Vec::with_capacity(n), std: Vec::with_capacity(n) };
                for _ in 0..n {
                    s.mean.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                    s.std.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                }
                Some(s)
            }
            t => return Err(Error::format(&ctx, format!("bad stats flag {t}"))),
        };
        let n = width * height * channels;
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if r.pos != buf.len() {
            return Err(Error::format(&ctx, "trailing bytes"));
        }
        let mut stack = FeatureStack::from_planes(width, height, names, data)?;
        stack.stats = stats;
        Ok(stack)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.ctx, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Normalize every channel covered by `stats` (or by statistics computed from
/// this stack when `stats` is `None`) to zero mean and unit variance.
/// Channels beyond the statistics are copied unchanged.
pub fn normalize_channels(
    stack: &FeatureStack,
    stats: Option<&ChannelStats>,
) -> Result<(FeatureStack, ChannelStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ChannelStats::from_stacks(&[stack])?,
    };
    if stats.channels() > stack.channels() {
        return Err(Error::Schema(format!(
            "statistics for {} channels, stack has {}",
            stats.channels(),
            stack.channels()
        )));
    }
    let n = stack.width * stack.height;
    let mut data = stack.data.clone();
    for c in 0..stats.channels() {
        let (m, s) = (stats.mean[c], stats.std[c].max(STD_FLOOR));
        for v in &mut data[c * n..(c + 1) * n] {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    let out = FeatureStack {
        width: stack.width,
        height: stack.height,
        names: stack.names.clone(),
        data,
        stats: Some(stats.clone()),
    };
    Ok((out, stats))
}

/// Filter bank plus the training-set statistics used to normalize it; turns
/// a raw image into the level-1 input stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub bank: FilterBank,
    pub stats: ChannelStats,
}

impl Preprocessor {
    /// Fit normalization statistics on raw training images.
    pub fn fit(bank: FilterBank, images: &[&Image]) -> Result<(Preprocessor, Vec<FeatureStack>)> {
        let raw = images
            .iter()
            .map(|img| bank.apply(img))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FeatureStack> = raw.iter().collect();
        let stats = ChannelStats::from_stacks(&refs)?;
        let stacks = raw
            .iter()
            .map(|s| normalize_channels(s, Some(&stats)).map(|(n, _)| n))
            .collect::<Result<Vec<_>>>()?;
        Ok((Preprocessor { bank, stats }, stacks))
    }

    pub fn prepare(&self, img: &Image) -> Result<FeatureStack> {
        let raw = self.bank.apply(img)?;
        Ok(normalize_channels(&raw, Some(&self.stats))?.0)
    }

    pub fn channels(&self) -> usize {
        self.bank.len()
    }
}

/// Symmetric reflection of an index into `[0, len)` (edge sample repeated).
#[inline]
fn reflect(i: i64, len: usize) -> usize {
    let n = len as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    separable(src, w, h, &gaussian_kernel(sigma))
}

/// Separable convolution with the same symmetric kernel along both axes.
fn separable(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * src[y * w + reflect(x as i64 + i as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[reflect(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn derivative(src: &[f64], w: usize, h: usize, along_x: bool) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = if along_x {
                (
                    src[y * w + reflect(x as i64 + 1, w)],
                    src[y * w + reflect(x as i64 - 1, w)],
                )
            } else {
                (
                    src[reflect(y as i64 + 1, h) * w + x],
                    src[reflect(y as i64 - 1, h) * w + x],
                )
            };
            out[y * w + x] = 0.5 * (a - b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(w: usize, h: usize, c: usize, seed: u64) -> FeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        FeatureStack::from_planes(w, h, (0..c).map(|i| format!("c{i}")).collect(), data).unwrap()
    }

    #[test]
    fn identity_on_single_pixel() {
        let img = Image::new(1, 1, vec![5.0]).unwrap();
        let bank = FilterBank::new(vec![Filter::Identity]).unwrap();
        let s = bank.apply(&img).unwrap();
        assert_eq!(s.channels(), 1);
        assert_eq!(s.value(0, 0, 0), 5.0);
    }

    #[test]
    fn derivative_filters_vanish_on_constant_image() {
        let img = Image::filled(9, 7, 3.25).unwrap();
        let bank: FilterBank = "identity,dx:0,dy:1,gradmag:1,laplace:2,st_max:1:2".parse().unwrap();
        let s = bank.apply(&img).unwrap();
        for c in 1..s.channels() {
            assert!(s.plane(c).iter().all(|v| v.abs() < 1e-5), "channel {c}");
        }
    }

    #[test]
    fn box_mean_matches_neighborhood_average() {
        let img = Image::from_fn(8, 8, |x, y| (x + 8 * y) as f32 * 0.5).unwrap();
        let bank = FilterBank::new(vec![Filter::BoxMean { radius: 1 }]).unwrap();
        let s = bank.apply(&img).unwrap();
        // brute-force oracle over the 3×3 neighbourhood of (4,4)
        let mut sum = 0.0f64;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                sum += img.get((4 + dx) as usize, (4 + dy) as usize) as f64;
            }
        }
        assert!((s.value(4, 4, 0) as f64 - sum / 9.0).abs() < 1e-4);
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(-9, 2), 0);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn bank_string_round_trips() {
        let bank = FilterBank::standard();
        let parsed: FilterBank = bank.to_string().parse().unwrap();
        assert_eq!(parsed, bank);
        assert_eq!(bank.len(), 9);
        assert!("gauss:-1".parse::<Filter>().is_err());
        assert!("".parse::<FilterBank>().is_err());
    }

    #[test]
    fn zero_offset_lookup_is_direct_indexing() {
        let s = random_stack(5, 4, 2, 1);
        assert_eq!(s.lookup(3, 2, OffsetFeatureId::centered(1)).unwrap(), s.value(3, 2, 1) as f64);
    }

    #[test]
    fn corner_lookup_clamps() {
        let s = random_stack(5, 4, 1, 2);
        let v = s.lookup(0, 0, OffsetFeatureId::new(0, -7, -9)).unwrap();
        assert_eq!(v, s.value(0, 0, 0) as f64);
        let v = s.lookup(4, 3, OffsetFeatureId::new(0, 10, -1)).unwrap();
        assert_eq!(v, s.value(4, 2, 0) as f64);
    }

    #[test]
    fn lookup_rejects_bad_channel() {
        let s = random_stack(3, 3, 2, 3);
        assert!(matches!(s.lookup(0, 0, OffsetFeatureId::centered(2)), Err(Error::Index(_))));
    }

    #[test]
    fn random_lookups_match_naive_oracle() {
        let s = random_stack(16, 16, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (x, y) = (rng.random_range(0..16usize), rng.random_range(0..16usize));
            let fid = OffsetFeatureId::new(rng.random_range(0..3), rng.random_range(-20..=20), rng.random_range(-20..=20));
            // naive oracle: scan the plane for the clamped coordinate
            let tx = (x as i32 + fid.dx).clamp(0, 15) as usize;
            let ty = (y as i32 + fid.dy).clamp(0, 15) as usize;
            let mut expected = f32::NAN;
            for yy in 0..16 {
                for xx in 0..16 {
                    if xx == tx && yy == ty {
                        expected = s.plane(fid.channel)[yy * 16 + xx];
                    }
                }
            }
            assert_eq!(s.lookup(x, y, fid).unwrap(), expected as f64);
        }
    }

    #[test]
    fn normalization_of_constant_and_two_point_channels() {
        let s = FeatureStack::from_planes(
            2,
            1,
            vec!["a".into(), "b".into()],
            vec![4.0, 4.0, 0.0, 2.0],
        )
        .unwrap();
        let (n, stats) = normalize_channels(&s, None).unwrap();
        assert_eq!(n.plane(0), &[0.0, 0.0]);
        assert_eq!(n.plane(1), &[-1.0, 1.0]);
        assert_eq!(stats.std[0], STD_FLOOR);
    }

    #[test]
    fn normalized_moments() {
        let s = random_stack(20, 15, 2, 6);
        let (n, _) = normalize_channels(&s, None).unwrap();
        for c in 0..2 {
            let p = n.plane(c);
            let m = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
            let v = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / p.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn train_stats_are_reused() {
        let a = random_stack(6, 6, 1, 7);
        let b = random_stack(6, 6, 1, 8);
        let (_, stats) = normalize_channels(&a, None).unwrap();
        let (nb, used) = normalize_channels(&b, Some(&stats)).unwrap();
        assert_eq!(used, stats);
        let expect = ((b.value(2, 3, 0) as f64 - stats.mean[0]) / stats.std[0]) as f32;
        assert_eq!(nb.value(2, 3, 0), expect);
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let s = random_stack(7, 5, 3, 9);
        let (n, _) = normalize_channels(&s, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.fns");
        n.write_cache(&p).unwrap();
        let back = FeatureStack::read_cache(&p).unwrap();
        assert_eq!(back, n);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(FeatureStack::read_cache(&p).is_err());
    }

    #[test]
    fn stats_text_round_trip() {
        let s = random_stack(7, 5, 3, 10);
        let stats = ChannelStats::from_stacks(&[&s]).unwrap();
        let mut back = ChannelStats { mean: vec![], std: vec![] };
        for line in stats.to_text().lines() {
            ChannelStats::parse_line(line, &mut back).unwrap();
        }
        assert_eq!(back, stats);
    }

    #[test]
    fn context_channels_append_maps() {
        let s = random_stack(3, 2, 2, 11);
        let mut maps = ClassMaps::zeros(3, 2, 2);
        maps.set(1, 2, 1, 0.75);
        let ctx = s.with_context(&maps).unwrap();
        assert_eq!(ctx.channels(), 4);
        assert_eq!(ctx.value(2, 1, 3), 0.75);
        assert_eq!(ctx.names()[3], "p1");
    }
}
