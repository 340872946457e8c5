//! Reading grayscale images and reading/writing indexed label maps.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, IGNORE_LABEL};

/// Read an 8- or 16-bit grayscale PNG/PGM as raw intensities.
pub fn read_grayscale(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        other => {
            return Err(Error::Image {
                path: path.into(),
                message: format!("expected a grayscale image, got {:?}", other.color()),
            })
        }
    };
    Image::new(w, h, data)
}

fn png_writer(path: &Path, w: usize, h: usize) -> Result<png::Encoder<'static, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(png::Encoder::new(BufWriter::new(file), w as u32, h as u32))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.into(), message: e.to_string() }
}

/// Write an 8-bit grayscale PNG.
pub fn write_gray8(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::Dimension(format!("{} pixels for {w}x{h}", pixels.len())));
    }
    let mut enc = png_writer(path, w, h)?;
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut wr = enc.write_header().map_err(|e| png_err(path, e))?;
    wr.write_image_data(pixels).map_err(|e| png_err(path, e))?;
    wr.finish().map_err(|e| png_err(path, e))
}

/// RGB color per class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Palette {
    /// Class 0 black, then a fixed cycle of distinct hues.
    pub fn for_classes(classes: usize) -> Palette {
        const HUES: [[u8; 3]; 8] = [
            [230, 25, 75],
            [60, 180, 75],
            [255, 225, 25],
            [0, 130, 200],
            [245, 130, 48],
            [145, 30, 180],
            [70, 240, 240],
            [240, 50, 230],
        ];
        let colors = (0..classes)
            .map(|c| if c == 0 { [0, 0, 0] } else { HUES[(c - 1) % HUES.len()] })
            .collect();
        Palette { colors }
    }

    /// Full 256-entry PLTE payload; unused entries and the ignore label are gray.
    fn plte(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(768);
        for i in 0..256 {
            let c = if i == IGNORE_LABEL as usize { [128, 128, 128] } else { self.colors.get(i).copied().unwrap_or([128, 128, 128]) };
            out.extend_from_slice(&c);
        }
        out
    }

    /// Sidecar text: one `class r g b` line per class.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.colors.iter().enumerate() {
            writeln!(s, "{i} {} {} {}", c[0], c[1], c[2]).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Palette> {
        let mut colors = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Vec<u8> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("palette", format!("line {}: bad entry", n + 1)))?;
            if v.len() != 4 || v[0] as usize != colors.len() {
                return Err(Error::format("palette", format!("line {}: expected '<class> r g b'", n + 1)));
            }
            colors.push([v[1], v[2], v[3]]);
        }
        Ok(Palette { colors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Palette> {
        Palette::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Write a label map as an 8-bit indexed PNG.
pub fn write_label_map(path: &Path, labels: &LabelMap, palette: &Palette) -> Result<()> {
    let mut enc = png_writer(path, labels.width(), labels.height())?;
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.plte());
    let mut wr = enc.write_header().map_err(|e| png_err(path, e))?;
    wr.write_image_data(labels.labels()).map_err(|e| png_err(path, e))?;
    wr.finish().map_err(|e| png_err(path, e))
}

/// Read an 8-bit indexed or grayscale PNG; pixel values are the labels.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight || !matches!(color, png::ColorType::Indexed | png::ColorType::Grayscale) {
        return Err(png_err(path, format!("label maps must be 8-bit indexed or gray, got {color:?} {depth:?}")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    LabelMap::new(info.width as usize, info.height as usize, buf)
}
