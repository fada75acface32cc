//! Raster types, the total-variation smoothness term and interval projection
//! for the adversarial pattern.
//!
//! All rasters are stored row-major with interleaved channels (`HWC`).
//! Images are colour rasters whose values stay in `[0, 1]`; patterns carry
//! their own per-channel printable interval.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length accepted by the embedding models.
pub const MIN_IMAGE_SIDE: usize = 8;

/// A dense `height x width x channels` buffer of reals without range constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "raster buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.offset(y, x, c);
        self.data[i] = value;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bilinear sample at continuous pixel-centre coordinates with edge replication.
    pub fn sample_bilinear(&self, sy: f64, sx: f64, c: usize) -> f64 {
        let y0f = sy.floor();
        let x0f = sx.floor();
        let fy = sy - y0f;
        let fx = sx - x0f;
        let clamp_y = |v: f64| v.max(0.0).min((self.height - 1) as f64) as usize;
        let clamp_x = |v: f64| v.max(0.0).min((self.width - 1) as f64) as usize;
        let (y0, y1) = (clamp_y(y0f), clamp_y(y0f + 1.0));
        let (x0, x1) = (clamp_x(x0f), clamp_x(x0f + 1.0));
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// A colour image with every channel value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Raster);

impl Image {
    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 3 channels, got {}",
                raster.channels
            )));
        }
        if raster.height < MIN_IMAGE_SIDE || raster.width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} floor",
                raster.height, raster.width
            )));
        }
        if let Some(v) = raster.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self(raster))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(Raster::from_vec(height, width, 3, data)?)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Wraps a raster the caller has already kept in range.
    pub(crate) fn from_raster_unchecked(raster: Raster) -> Self {
        debug_assert!(raster.data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self(raster)
    }

    #[inline]
    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        let data = self.0.data.iter().map(|v| quantize_unit(*v)).collect();
        Image(Raster {
            data,
            ..self.0.clone()
        })
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        let sy = self.height() as f64 / height as f64;
        let sx = self.width() as f64 / width as f64;
        let src = &self.0;
        let raster = Raster::from_fn(height, width, 3, |y, x, c| {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let fx = (x as f64 + 0.5) * sx - 0.5;
            src.sample_bilinear(fy, fx, c).clamp(0.0, 1.0)
        });
        Image::new(raster)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb_png(&self.0, path)
    }

    /// Loads an 8-bit image file (PNG or JPEG) as a `[0, 1]` colour image.
    pub fn load(path: &Path) -> Result<Image> {
        Image::new(load_rgb_raster(path)?)
    }
}

fn load_rgb_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    Raster::from_vec(h as usize, w as usize, 3, data)
}

#[inline]
pub(crate) fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_rgb_png(raster: &Raster, path: &Path) -> Result<()> {
    if raster.channels != 3 {
        return Err(Error::InvalidArgument("PNG export expects 3 channels".into()));
    }
    let bytes: Vec<u8> = raster.data.iter().map(|v| to_u8(*v)).collect();
    image::save_buffer(
        path,
        &bytes,
        raster.width as u32,
        raster.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Per-channel printable colour interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorInterval {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl Default for ColorInterval {
    fn default() -> Self {
        Self::uniform(0.1, 0.85)
    }
}

impl ColorInterval {
    pub fn uniform(lower: f64, upper: f64) -> Self {
        Self {
            lower: [lower; 3],
            upper: [upper; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            let (lo, hi) = (self.lower[c], self.upper[c]);
            if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "colour interval channel {c} must satisfy 0 <= lower < upper <= 1, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> [f64; 3] {
        [0, 1, 2].map(|c| 0.5 * (self.lower[c] + self.upper[c]))
    }

    #[inline]
    pub fn contains(&self, c: usize, v: f64) -> bool {
        v >= self.lower[c] && v <= self.upper[c]
    }
}

/// The optimised adversarial pattern together with its colour interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    raster: Raster,
    interval: ColorInterval,
}

impl Pattern {
    pub fn new(raster: Raster, interval: ColorInterval) -> Result<Self> {
        interval.validate()?;
        if raster.channels != 3 {
            return Err(Error::InvalidArgument("patterns have 3 channels".into()));
        }
        if raster.is_empty() {
            return Err(Error::InvalidArgument("pattern is empty".into()));
        }
        if raster.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("pattern contains non-finite values".into()));
        }
        Ok(Self { raster, interval })
    }

    /// A pattern filled with the centre of its interval.
    pub fn midpoint(height: usize, width: usize, interval: ColorInterval) -> Result<Self> {
        let mid = interval.midpoint();
        Self::new(Raster::from_fn(height, width, 3, |_, _, c| mid[c]), interval)
    }

    #[inline]
    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.raster.data_mut()
    }

    #[inline]
    pub fn interval(&self) -> &ColorInterval {
        &self.interval
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn within_interval(&self) -> bool {
        self.raster
            .data
            .chunks_exact(3)
            .all(|px| (0..3).all(|c| self.interval.contains(c, px[c])))
    }

    /// Clamps every value into the interval, in place.
    pub fn project_in_place(&mut self) {
        let iv = self.interval;
        for px in self.raster.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = px[c].clamp(iv.lower[c], iv.upper[c]);
            }
        }
    }

    pub fn total_variation(&self) -> Result<(f64, Raster)> {
        total_variation(&self.raster)
    }

    /// Writes `path` as an 8-bit PNG and a `.json` sidecar with the interval.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_rgb_png(&self.raster, path)?;
        let meta = PatternSidecar {
            format: PATTERN_FORMAT.into(),
            height: self.height(),
            width: self.width(),
            lower: self.interval.lower,
            upper: self.interval.upper,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    /// Reads a pattern written by [`Pattern::save`]. The 8-bit values are
    /// projected back into the recorded interval.
    pub fn load(path: &Path) -> Result<Pattern> {
        let side = sidecar_path(path);
        let meta: PatternSidecar = serde_json::from_str(&fs::read_to_string(&side)?)
            .map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.format != PATTERN_FORMAT {
            return Err(Error::format(&side, format!("unknown format tag {}", meta.format)));
        }
        let raster = load_rgb_raster(path)?;
        if raster.height() != meta.height || raster.width() != meta.width {
            return Err(Error::format(path, "pattern size disagrees with sidecar"));
        }
        let mut pattern = Pattern::new(
            raster,
            ColorInterval {
                lower: meta.lower,
                upper: meta.upper,
            },
        )?;
        pattern.project_in_place();
        Ok(pattern)
    }
}

const PATTERN_FORMAT: &str = "reidpatch-pattern/1";
const MASK_FORMAT: &str = "reidpatch-mask/1";

#[derive(Serialize, Deserialize)]
struct PatternSidecar {
    format: String,
    height: usize,
    width: usize,
    lower: [f64; 3],
    upper: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct MaskSidecar {
    format: String,
    height: usize,
    width: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Clamps every pattern value into its interval. Values already inside are untouched.
pub fn project_interval(p: &Pattern) -> Pattern {
    let mut out = p.clone();
    out.project_in_place();
    out
}

/// Shapes available for the binary pattern mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    Full,
    #[default]
    Ellipse,
    Diamond,
}

/// Binary mask selecting which pattern pixels exist.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidArgument("mask size mismatch".into()));
        }
        if values.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        if !values.contains(&1) {
            return Err(Error::InvalidArgument("mask selects no pixels".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_shape(shape: MaskShape, height: usize, width: usize) -> Result<Self> {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let ry = height as f64 / 2.0;
        let rx = width as f64 / 2.0;
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = match shape {
                    MaskShape::Full => true,
                    MaskShape::Ellipse => dx * dx + dy * dy <= 1.0,
                    MaskShape::Diamond => dx.abs() + dy.abs() <= 1.0,
                };
                values.push(inside as u8);
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|v| v * 255).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        let meta = MaskSidecar {
            format: MASK_FORMAT.into(),
            height: self.height,
            width: self.width,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let side = sidecar_path(path);
        let meta: MaskSidecar = serde_json::from_str(&fs::read_to_string(&side)?)
            .map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.format != MASK_FORMAT {
            return Err(Error::format(&side, format!("unknown format tag {}", meta.format)));
        }
        let img = image::open(path)?.to_luma8();
        if img.width() as usize != meta.width || img.height() as usize != meta.height {
            return Err(Error::format(path, "mask size disagrees with sidecar"));
        }
        let values = img.as_raw().iter().map(|v| (*v >= 128) as u8).collect();
        Mask::new(meta.height, meta.width, values)
    }
}

/// Isotropic total variation summed over channels, with its analytic gradient.
///
/// Neighbours past the last row or column contribute a zero difference, so a
/// constant raster has exactly zero variation. The derivative of the square
/// root at zero is taken to be zero.
pub fn total_variation(r: &Raster) -> Result<(f64, Raster)> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("total variation of an empty pattern".into()));
    }
    let (h, w, ch) = (r.height, r.width, r.channels);
    let mut grad = Raster::zeros(h, w, ch);
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = r.get(y, x, c);
                let dv = if y + 1 < h { v - r.get(y + 1, x, c) } else { 0.0 };
                let dh = if x + 1 < w { v - r.get(y, x + 1, c) } else { 0.0 };
                let n = (dv * dv + dh * dh).sqrt();
                tv += n;
                if n > 0.0 {
                    let i = grad.offset(y, x, c);
                    grad.data[i] += (dv + dh) / n;
                    if y + 1 < h {
                        let j = grad.offset(y + 1, x, c);
                        grad.data[j] -= dv / n;
                    }
                    if x + 1 < w {
                        let j = grad.offset(y, x + 1, c);
                        grad.data[j] -= dh / n;
                    }
                }
            }
        }
    }
    Ok((tv, grad))
}
