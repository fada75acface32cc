//! Small differentiable re-identification models.
//!
//! Both variants share the same encoder and expose unit-norm embeddings with
//! the similarity `(1 + cos) / 2` in `[0, 1]`, so attack code never needs to
//! know which one it is facing.

mod encoder;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{Image, Raster};
use crate::rng::{derive_seed, seeded};

pub use encoder::{Architecture, Tape};
pub use train::{cross_camera_rank1, train_model, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Verification head on embedding differences plus identity classification.
    SiameseVerification,
    /// Identity classification only; the classifier is dropped at inference.
    ClassificationEmbedding,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese_verification" | "a" | "A" => Ok(Variant::SiameseVerification),
            "classification_embedding" | "b" | "B" => Ok(Variant::ClassificationEmbedding),
            _ => Err(Error::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

/// Which input of a pair to differentiate with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

pub const PREPROCESSING: &str = "bilinear resize to input size (pixel centres aligned), values in [0,1], no mean subtraction";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub preprocessing: String,
    pub seed: Option<u64>,
    pub dataset_fingerprint: Option<String>,
    pub held_out_rank1: Option<f64>,
    pub final_loss: Option<f64>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReIDModel {
    variant: Variant,
    architecture: Architecture,
    params: Vec<f64>,
    meta: ModelMeta,
}

const CHECKPOINT_HEADER: &str = "reidpatch-reid-checkpoint 1";

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    variant: Variant,
    architecture: Architecture,
    meta: ModelMeta,
    params: Vec<f64>,
}

impl ReIDModel {
    pub fn new_random(variant: Variant, architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = seeded(derive_seed(seed, "reid/init"));
        let params = architecture.init_params(&mut rng);
        Ok(Self {
            variant,
            architecture,
            params,
            meta: ModelMeta {
                preprocessing: PREPROCESSING.into(),
                seed: Some(seed),
                ..Default::default()
            },
        })
    }

    pub fn from_parts(variant: Variant, architecture: Architecture, params: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if params.len() != architecture.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                architecture.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(Self {
            variant,
            architecture,
            params,
            meta: ModelMeta {
                preprocessing: PREPROCESSING.into(),
                ..Default::default()
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn embedding_dim(&self) -> usize {
        self.architecture.embedding_dim
    }

    /// `(height, width)` expected by [`ReIDModel::embed`].
    pub fn input_size(&self) -> (usize, usize) {
        (self.architecture.input_height, self.architecture.input_width)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut ModelMeta {
        &mut self.meta
    }

    /// Bilinear resize to the model input size.
    pub fn preprocess(&self, x: &Image) -> Result<Image> {
        let (h, w) = self.input_size();
        x.resize_bilinear(h, w)
    }

    fn to_chw(&self, x: &Image) -> Result<Vec<f64>> {
        let (h, w) = self.input_size();
        if x.height() != h || x.width() != w {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{} but the model expects {h}x{w}; preprocess first",
                x.height(),
                x.width()
            )));
        }
        Ok(hwc_to_chw(x.data(), h, w))
    }

    pub(crate) fn forward_chw(&self, params: &[f64], input: Vec<f64>) -> Result<Tape> {
        encoder::forward(&self.architecture, &self.architecture.layout(), params, input)
    }

    pub(crate) fn backward_chw(
        &self,
        params: &[f64],
        tape: &Tape,
        d_embedding: &[f64],
        dparams: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        encoder::backward(&self.architecture, &self.architecture.layout(), params, tape, d_embedding, dparams, want_input)
    }

    /// Forward pass retaining what [`ReIDModel::input_gradient`] needs.
    pub fn embed_tape(&self, x: &Image) -> Result<Tape> {
        self.forward_chw(&self.params, self.to_chw(x)?)
    }

    pub fn embed(&self, x: &Image) -> Result<Vec<f64>> {
        Ok(self.embed_tape(x)?.into_embedding())
    }

    /// Pulls an embedding-space gradient back to image pixels (HWC raster).
    pub fn input_gradient(&self, tape: &Tape, d_embedding: &[f64]) -> Result<Raster> {
        if d_embedding.len() != self.embedding_dim() {
            return Err(Error::InvalidArgument("embedding gradient has the wrong length".into()));
        }
        let (h, w) = self.input_size();
        let chw = self
            .backward_chw(&self.params, tape, d_embedding, None, true)
            .expect("input gradient requested");
        Raster::from_vec(h, w, 3, chw_to_hwc(&chw, h, w))
    }

    pub fn similarity(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(score(&self.embed(a)?, &self.embed(b)?))
    }

    /// Gradient of `similarity(a, b)` with respect to the pixels of one input.
    pub fn similarity_gradient(&self, a: &Image, b: &Image, wrt: Side) -> Result<Raster> {
        let (x, other) = match wrt {
            Side::A => (a, b),
            Side::B => (b, a),
        };
        let tape = self.embed_tape(x)?;
        let e_other = self.embed(other)?;
        self.input_gradient(&tape, &score_gradient(&e_other))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = CheckpointBody {
            variant: self.variant,
            architecture: self.architecture.clone(),
            meta: self.meta.clone(),
            params: self.params.clone(),
        };
        let json = serde_json::to_string(&body).map_err(|e| Error::format(path, e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, format!("{CHECKPOINT_HEADER}\n{json}\n"))?;
        let manifest = serde_json::json!({
            "checkpoint": path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "variant": self.variant,
            "seed": self.meta.seed,
            "dataset_fingerprint": self.meta.dataset_fingerprint,
            "held_out_rank1": self.meta.held_out_rank1,
        });
        fs::write(
            manifest_path(path),
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(path, e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let (header, body) = text.split_once('\n').ok_or_else(|| Error::format(path, "missing header line"))?;
        if header.trim() != CHECKPOINT_HEADER {
            return Err(Error::format(path, format!("unsupported checkpoint header {header:?}")));
        }
        let body: CheckpointBody = serde_json::from_str(body).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = Self::from_parts(body.variant, body.architecture, body.params)
            .map_err(|e| Error::format(path, e.to_string()))?;
        model.meta = body.meta;
        Ok(model)
    }
}

/// Manifest written next to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest.json")
}

/// `(1 + <a, b>) / 2` clamped to `[0, 1]`, for unit embeddings.
pub fn score(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((1.0 + dot) / 2.0).clamp(0.0, 1.0)
}

/// Derivative of [`score`] with respect to its first argument.
pub fn score_gradient(other: &[f64]) -> Vec<f64> {
    other.iter().map(|v| 0.5 * v).collect()
}

pub(crate) fn hwc_to_chw(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for p in 0..h * w {
        for c in 0..3 {
            out[c * h * w + p] = data[p * 3 + c];
        }
    }
    out
}

pub(crate) fn chw_to_hwc(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for p in 0..h * w {
        for c in 0..3 {
            out[p * 3 + c] = data[c * h * w + p];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Architecture {
        Architecture {
            input_height: 16,
            input_width: 8,
            channels: vec![4, 6],
            embedding_dim: 8,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = seeded(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let m = ReIDModel::new_random(Variant::ClassificationEmbedding, tiny(), 3).unwrap();
        let x = random_image(1, 16, 8);
        let e = m.embed(&x).unwrap();
        assert_eq!(e.len(), 8);
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(e, m.embed(&x).unwrap());
    }

    #[test]
    fn similarity_contract() {
        let m = ReIDModel::new_random(Variant::SiameseVerification, tiny(), 4).unwrap();
        let (a, b) = (random_image(1, 16, 8), random_image(2, 16, 8));
        assert!((m.similarity(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(m.similarity(&a, &b).unwrap(), m.similarity(&b, &a).unwrap());
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
        assert_eq!(score(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
    }

    #[test]
    fn wrong_size_is_rejected_and_preprocess_fixes_it() {
        let m = ReIDModel::new_random(Variant::ClassificationEmbedding, tiny(), 3).unwrap();
        let x = random_image(1, 32, 16);
        assert!(matches!(m.embed(&x), Err(Error::InvalidArgument(_))));
        assert!(m.embed(&m.preprocess(&x).unwrap()).is_ok());
    }

    #[test]
    fn zero_projection_is_a_numerical_error() {
        let arch = tiny();
        let params = vec![0.0; arch.param_count()];
        let m = ReIDModel::from_parts(Variant::ClassificationEmbedding, arch, params).unwrap();
        assert!(matches!(m.embed(&random_image(1, 16, 8)), Err(Error::Numerical(_))));
    }

    #[test]
    fn gradient_vanishes_at_identical_inputs() {
        let m = ReIDModel::new_random(Variant::ClassificationEmbedding, tiny(), 5).unwrap();
        let x = random_image(7, 16, 8);
        let ga = m.similarity_gradient(&x, &x, Side::A).unwrap();
        let gb = m.similarity_gradient(&x, &x, Side::B).unwrap();
        for (a, b) in ga.data().iter().zip(gb.data()) {
            assert!((a + b).abs() < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ReIDModel::new_random(Variant::SiameseVerification, tiny(), 9).unwrap();
        m.meta_mut().dataset_fingerprint = Some("abc".into());
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        assert!(manifest_path(&path).exists());
        let back = ReIDModel::load(&path).unwrap();
        assert_eq!(back, m);
        fs::write(&path, "garbage\n{}").unwrap();
        assert!(matches!(ReIDModel::load(&path), Err(Error::Format { .. })));
    }
}
