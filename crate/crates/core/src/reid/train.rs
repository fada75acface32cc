//! Training for both model variants.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{hwc_to_chw, score, Architecture, ReIDModel, Variant};
use crate::dataset::{cameras, identities, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the identity classification loss.
    pub identification_weight: f64,
    /// Weight of the pairwise verification loss (siamese variant only).
    pub verification_weight: f64,
    /// Temperature applied to classifier logits on unit embeddings.
    pub classifier_scale: f64,
    /// Images per identity in each siamese batch.
    pub images_per_identity: usize,
    pub weight_decay: f64,
    pub horizontal_flip: bool,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 32,
            learning_rate: 3e-3,
            identification_weight: 1.0,
            verification_weight: 1.0,
            classifier_scale: 12.0,
            images_per_identity: 4,
            weight_decay: 5e-4,
            horizontal_flip: true,
            architecture: Architecture::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be positive and batch_size at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.classifier_scale > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and classifier_scale must be positive".into()));
        }
        if !(self.identification_weight >= 0.0) || !(self.verification_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.images_per_identity < 2 {
            return Err(Error::Config("images_per_identity must be at least 2".into()));
        }
        self.architecture.validate()
    }
}

struct Heads {
    classes: usize,
    dim: usize,
    base: usize,
}

impl Heads {
    fn cls_weight(&self) -> usize {
        self.base
    }
    fn cls_bias(&self) -> usize {
        self.base + self.classes * self.dim
    }
    fn ver_weight(&self) -> usize {
        self.cls_bias() + self.classes
    }
    fn ver_bias(&self) -> usize {
        self.ver_weight() + self.dim
    }
    fn len(&self, variant: Variant) -> usize {
        match variant {
            Variant::ClassificationEmbedding => self.classes * (self.dim + 1),
            Variant::SiameseVerification => self.classes * (self.dim + 1) + self.dim + 1,
        }
    }
}

fn flip_chw(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..3 {
        for y in 0..h {
            for i in 0..w {
                out[(c * h + y) * w + i] = x[(c * h + y) * w + (w - 1 - i)];
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Shuffled batches for the classification variant, P x K batches for the siamese one.
fn make_batches<R: Rng>(labels: &[usize], variant: Variant, tc: &TrainConfig, rng: &mut R) -> Vec<Vec<usize>> {
    match variant {
        Variant::ClassificationEmbedding => {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(rng);
            order.chunks(tc.batch_size).filter(|b| b.len() >= 2).map(|b| b.to_vec()).collect()
        }
        Variant::SiameseVerification => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                by_class.entry(l).or_default().push(i);
            }
            let k = tc.images_per_identity;
            let mut chunks = Vec::new();
            for members in by_class.values_mut() {
                members.shuffle(rng);
                for c in members.chunks(k) {
                    chunks.push(c.to_vec());
                }
            }
            chunks.shuffle(rng);
            let per_batch = (tc.batch_size / k).max(2);
            chunks.chunks(per_batch).map(|cs| cs.concat()).filter(|b| b.len() >= 2).collect()
        }
    }
}

/// Trains a model of the given variant on the training split.
///
/// The held-out cross-camera rank-1 on the test split is recorded in the
/// returned model's metadata.
pub fn train_model(dataset: &Dataset, variant: Variant, tc: &TrainConfig) -> Result<ReIDModel> {
    tc.validate()?;
    let train = &dataset.train;
    let ids = identities(train);
    if ids.len() < 2 || cameras(train).len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 identities and 2 cameras, found {} and {}",
            ids.len(),
            cameras(train).len()
        )));
    }
    let arch = &tc.architecture;
    let (h, w) = (arch.input_height, arch.input_width);
    if let Some(bad) = train.iter().find(|li| li.image.height() != h || li.image.width() != w) {
        return Err(Error::Config(format!(
            "training image {} is {}x{}, model input is {h}x{w}",
            bad.file_stem(),
            bad.image.height(),
            bad.image.width()
        )));
    }
    let class_of: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let labels: Vec<usize> = train.iter().map(|li| class_of[&li.identity]).collect();
    let inputs: Vec<Vec<f64>> = train.iter().map(|li| hwc_to_chw(li.image.data(), h, w)).collect();

    let mut model = ReIDModel::new_random(variant, arch.clone(), tc.seed)?;
    let enc_len = model.params.len();
    let dim = arch.embedding_dim;
    let heads = Heads { classes: ids.len(), dim, base: enc_len };
    let mut params = model.params.clone();
    params.resize(enc_len + heads.len(variant), 0.0);
    {
        use rand_distr::{Distribution, Normal};
        let mut rng = seeded(derive_seed(tc.seed, "reid/heads"));
        let n = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("finite std");
        for v in &mut params[heads.cls_weight()..heads.cls_bias()] {
            *v = n.sample(&mut rng);
        }
        if variant == Variant::SiameseVerification {
            for v in &mut params[heads.ver_weight()..heads.ver_bias()] {
                *v = -1.0;
            }
            params[heads.ver_bias()] = 1.0;
        }
    }
    let mut adam = Adam::with_defaults(params.len(), tc.learning_rate)?;
    let mut rng = seeded(derive_seed(tc.seed, "reid/batches"));
    let s = tc.classifier_scale;
    let mut final_loss = f64::NAN;
    let decay_epoch = (tc.epochs * 2).div_ceil(3);

    for epoch in 0..tc.epochs {
        adam.lr = if epoch >= decay_epoch { tc.learning_rate * 0.1 } else { tc.learning_rate };
        let batches = make_batches(&labels, variant, tc, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let n = batch.len() as f64;
            let mut tapes = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = if tc.horizontal_flip && rng.random_bool(0.5) {
                    flip_chw(&inputs[i], h, w)
                } else {
                    inputs[i].clone()
                };
                tapes.push(model.forward_chw(&params[..enc_len], x)?);
            }
            let mut grads = vec![0.0; params.len()];
            let mut d_emb = vec![vec![0.0; dim]; batch.len()];
            let mut loss = 0.0;

            // identity classification on scaled unit embeddings
            let (cw, cb) = (heads.cls_weight(), heads.cls_bias());
            for (bi, &i) in batch.iter().enumerate() {
                let e = tapes[bi].embedding();
                let logits: Vec<f64> = (0..heads.classes)
                    .map(|k| s * params[cw + k * dim..cw + (k + 1) * dim].iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + params[cb + k])
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                loss += tc.identification_weight * (z.ln() + max - logits[labels[i]]) / n;
                for k in 0..heads.classes {
                    let p = (logits[k] - max).exp() / z;
                    let g = tc.identification_weight * (p - if k == labels[i] { 1.0 } else { 0.0 }) / n;
                    grads[cb + k] += g;
                    for d in 0..dim {
                        grads[cw + k * dim + d] += g * s * e[d];
                        d_emb[bi][d] += g * s * params[cw + k * dim + d];
                    }
                }
            }

            // balanced verification over every pair in the batch
            if variant == Variant::SiameseVerification && tc.verification_weight > 0.0 {
                let (vw, vb) = (heads.ver_weight(), heads.ver_bias());
                let mut pairs = Vec::new();
                for a in 0..batch.len() {
                    for b in a + 1..batch.len() {
                        pairs.push((a, b, labels[batch[a]] == labels[batch[b]]));
                    }
                }
                let n_pos = pairs.iter().filter(|p| p.2).count();
                let n_neg = pairs.len() - n_pos;
                for &(a, b, same) in &pairs {
                    let count = if same { n_pos } else { n_neg };
                    let weight = tc.verification_weight / (2.0 * count as f64);
                    let (ea, eb) = (tapes[a].embedding(), tapes[b].embedding());
                    let diff: Vec<f64> = ea.iter().zip(eb).map(|(x, y)| x - y).collect();
                    let v = params[vb] + diff.iter().zip(&params[vw..vw + dim]).map(|(d, wv)| wv * d * d).sum::<f64>();
                    let y = if same { 1.0 } else { 0.0 };
                    let bce = v.max(0.0) - v * y + (-v.abs()).exp().ln_1p();
                    loss += weight * bce;
                    let dv = weight * (sigmoid(v) - y);
                    grads[vb] += dv;
                    for d in 0..dim {
                        grads[vw + d] += dv * diff[d] * diff[d];
                        let g = dv * 2.0 * params[vw + d] * diff[d];
                        d_emb[a][d] += g;
                        d_emb[b][d] -= g;
                    }
                }
            }

            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            for (bi, tape) in tapes.iter().enumerate() {
                model.backward_chw(&params[..enc_len], tape, &d_emb[bi], Some(&mut grads[..enc_len]), false);
            }
            if tc.weight_decay > 0.0 {
                for (g, p) in grads.iter_mut().zip(&params) {
                    *g += tc.weight_decay * p;
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient at epoch {epoch}")));
            }
            adam.step(&mut params, &grads);
            epoch_loss += loss;
        }
        final_loss = epoch_loss / batches.len().max(1) as f64;
        debug!("epoch {}/{} loss {final_loss:.4}", epoch + 1, tc.epochs);
    }

    params.truncate(enc_len);
    model.params = params;
    model.meta.seed = Some(tc.seed);
    model.meta.final_loss = Some(final_loss);
    model.meta.dataset_fingerprint = Some(dataset.fingerprint());
    model.meta.train_config = Some(tc.clone());
    model.meta.held_out_rank1 = held_out_rank1(&model, &dataset.test)?;
    match model.meta.held_out_rank1 {
        Some(r) => info!("trained {variant:?}: loss {final_loss:.4}, held-out cross-camera rank-1 {r:.3}"),
        None => warn!("no usable held-out queries; rank-1 not recorded"),
    }
    Ok(model)
}

fn held_out_rank1(model: &ReIDModel, test: &[LabeledImage]) -> Result<Option<f64>> {
    let (h, w) = model.input_size();
    let usable: Vec<&LabeledImage> = test.iter().filter(|li| li.image.height() == h && li.image.width() == w).collect();
    let embs = usable.iter().map(|li| model.embed(&li.image)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<u32> = usable.iter().map(|li| li.identity).collect();
    let cams: Vec<u32> = usable.iter().map(|li| li.camera).collect();
    Ok(cross_camera_rank1(&embs, &ids, &cams))
}

/// All-vs-all cross-camera rank-1: each image queries every other one,
/// same-identity same-camera items are ignored and ties go to the lower index.
/// `None` when no query has a cross-camera match.
pub fn cross_camera_rank1(embeddings: &[Vec<f64>], ids: &[u32], cams: &[u32]) -> Option<f64> {
    let mut hits = 0usize;
    let mut queries = 0usize;
    for q in 0..embeddings.len() {
        let has_relevant = (0..embeddings.len()).any(|g| ids[g] == ids[q] && cams[g] != cams[q]);
        if !has_relevant {
            continue;
        }
        queries += 1;
        let mut best: Option<(usize, f64)> = None;
        for g in 0..embeddings.len() {
            if g == q || (ids[g] == ids[q] && cams[g] == cams[q]) {
                continue;
            }
            let s = score(&embeddings[q], &embeddings[g]);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((g, s));
            }
        }
        if let Some((g, _)) = best {
            if ids[g] == ids[q] {
                hits += 1;
            }
        }
    }
    (queries > 0).then(|| hits as f64 / queries as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank1_helper_on_hand_instance() {
        let e = |a: f64| vec![a.cos(), a.sin()];
        let embs = vec![e(0.0), e(0.1), e(2.0), e(2.1), e(0.05)];
        let ids = [1, 1, 2, 2, 3];
        let cams = [1, 2, 1, 2, 1];
        // queries 0 and 1 prefer the id-3 decoy, 2 and 3 find each other, 4 has no match
        let r = cross_camera_rank1(&embs, &ids, &cams).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pk_batches_group_identities() {
        let labels: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let tc = TrainConfig { batch_size: 8, ..Default::default() };
        let mut rng = seeded(1);
        let batches = make_batches(&labels, Variant::SiameseVerification, &tc, &mut rng);
        assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), 40);
        for b in &batches {
            let mut counts = BTreeMap::new();
            for &i in b {
                *counts.entry(labels[i]).or_insert(0) += 1;
            }
            assert!(counts.values().all(|c| *c == 4));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
