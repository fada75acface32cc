use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AnchorQuad;
use crate::imagecore::{Image, Raster};

/// A translation (pixels) plus a uniform scale about the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Largest shift as a fraction of width (for x) or height (for y).
    pub max_shift_fraction: f64,
    pub scale: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_shift_fraction: 0.1,
            scale: (0.9, 1.1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: Image,
    pub quad: AnchorQuad,
    pub params: AugmentParams,
}

const MAX_TRIES: usize = 10;

fn centre(width: usize, height: usize) -> [f64; 2] {
    [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]
}

/// Applies a fixed translation and scale to the image content and its quad.
/// Pixels pulled from outside the frame replicate the border.
pub fn apply_augment(x: &Image, quad: &AnchorQuad, p: &AugmentParams) -> Result<(Image, AnchorQuad)> {
    if !(p.scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {}", p.scale)));
    }
    let (w, h) = (x.width(), x.height());
    let c = centre(w, h);
    let forward = |q: [f64; 2]| {
        [
            p.scale * q[0] + (1.0 - p.scale) * c[0] + p.tx,
            p.scale * q[1] + (1.0 - p.scale) * c[1] + p.ty,
        ]
    };
    let moved = quad.map(forward)?;
    if !moved.inside(w, h) {
        return Err(Error::Augmentation(format!(
            "augmentation {p:?} pushes the quad out of the {w}x{h} frame"
        )));
    }
    let src = x.raster();
    let raster = Raster::from_fn(h, w, 3, |yy, xx, ch| {
        let sx = (xx as f64 - p.tx - (1.0 - p.scale) * c[0]) / p.scale;
        let sy = (yy as f64 - p.ty - (1.0 - p.scale) * c[1]) / p.scale;
        src.sample_bilinear(sy, sx, ch).clamp(0.0, 1.0)
    });
    Ok((Image::new(raster)?, AnchorQuad::new(*moved.corners(), w, h)?))
}

/// Random translation and scaling; draws that push the quad out of frame are
/// redrawn up to ten times.
pub fn synth_augment<R: Rng + ?Sized>(
    x: &Image,
    quad: &AnchorQuad,
    ranges: &AugmentRanges,
    rng: &mut R,
) -> Result<Augmented> {
    let max_tx = ranges.max_shift_fraction * x.width() as f64;
    let max_ty = ranges.max_shift_fraction * x.height() as f64;
    for _ in 0..MAX_TRIES {
        let params = AugmentParams {
            tx: rng.random_range(-max_tx..=max_tx),
            ty: rng.random_range(-max_ty..=max_ty),
            scale: rng.random_range(ranges.scale.0..=ranges.scale.1),
        };
        match apply_augment(x, quad, &params) {
            Ok((image, quad)) => return Ok(Augmented { image, quad, params }),
            Err(Error::Augmentation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Augmentation(format!(
        "no in-frame augmentation found after {MAX_TRIES} draws"
    )))
}
