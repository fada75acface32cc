//! Labelled person images and the on-disk dataset layout.
//!
//! A dataset directory holds one sub-directory per split with files named
//! `PPPP_cC_NNNN.png` (identity, camera, sequence), the Market1501 naming
//! convention. Each image may carry a sidecar `<stem>.txt` with its anchor quad.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::AnchorQuad;
use crate::imagecore::Image;

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Image,
    pub identity: u32,
    pub camera: u32,
    pub sequence: u32,
    pub quad: AnchorQuad,
}

impl LabeledImage {
    pub fn file_stem(&self) -> String {
        market_stem(self.identity, self.camera, self.sequence)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

pub fn identities(images: &[LabeledImage]) -> BTreeSet<u32> {
    images.iter().map(|li| li.identity).collect()
}

pub fn cameras(images: &[LabeledImage]) -> BTreeSet<u32> {
    images.iter().map(|li| li.camera).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(self.test.iter())
    }

    /// Content hash over labels, quads and 8-bit pixel values of both splits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, split) in [("train", &self.train), ("test", &self.test)] {
            h.update(tag.as_bytes());
            for li in split {
                h.update(li.identity.to_le_bytes());
                h.update(li.camera.to_le_bytes());
                h.update(li.sequence.to_le_bytes());
                h.update(li.quad.to_sidecar_line().as_bytes());
                h.update((li.image.height() as u32).to_le_bytes());
                h.update((li.image.width() as u32).to_le_bytes());
                let bytes: Vec<u8> = li.image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
                h.update(&bytes);
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn market_stem(identity: u32, camera: u32, sequence: u32) -> String {
    format!("{identity:04}_c{camera}_{sequence:04}")
}

/// Parses `PPPP_cC...` file names into `(identity, camera, sequence)`.
///
/// The sequence is read from a third `_NNNN` field when it is purely numeric.
/// Market1501 names such as `0002_c1s1_000451_03.jpg` parse with camera 1.
pub fn parse_market_name(name: &str) -> Option<(u32, u32, Option<u32>)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let mut parts = stem.split('_');
    let id_part = parts.next()?;
    if id_part.len() != 4 || !id_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let identity: u32 = id_part.parse().ok()?;
    let cam_part = parts.next()?;
    let digits: String = cam_part.strip_prefix('c')?.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let camera: u32 = digits.parse().ok()?;
    let sequence = parts
        .next()
        .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok());
    Some((identity, camera, sequence))
}

/// Writes each image as PNG plus its quad sidecar into `dir`.
pub fn save_split(dir: &Path, images: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for li in images {
        let stem = li.file_stem();
        li.image.save_png(&dir.join(format!("{stem}.png")))?;
        fs::write(dir.join(format!("{stem}.txt")), format!("{}\n", li.quad.to_sidecar_line()))?;
    }
    Ok(())
}

pub fn quad_sidecar(image_path: &Path) -> std::path::PathBuf {
    image_path.with_extension("txt")
}

pub fn read_quad_sidecar(path: &Path) -> Result<Option<AnchorQuad>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    AnchorQuad::parse_sidecar_line(line)
        .map(Some)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_toy_and_market_names() {
        assert_eq!(parse_market_name("0001_c1_0001.png"), Some((1, 1, Some(1))));
        assert_eq!(parse_market_name("0042_c3_0017.png"), Some((42, 3, Some(17))));
        assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg"), Some((2, 1, Some(451))));
        assert_eq!(parse_market_name("junk.txt"), None);
        assert_eq!(parse_market_name("-1_c1s1_000401_03.jpg"), None);
        assert_eq!(parse_market_name("0001_x1_0001.png"), None);
    }

    #[test]
    fn stem_round_trips() {
        let stem = market_stem(7, 2, 13);
        assert_eq!(stem, "0007_c2_0013");
        assert_eq!(parse_market_name(&format!("{stem}.png")), Some((7, 2, Some(13))));
    }
}
