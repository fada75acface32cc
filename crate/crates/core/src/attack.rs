//! Generating sets, tuple sampling, attack objectives and the pattern optimiser.
//!
//! Every objective is a weighted sum of similarity scores between operands,
//! where an operand is either an adversarial image the degraded image with the
//! masked, warped pattern overlaid, or a fixed target image. One generic evaluator computes the value and the
//! gradient with respect to the pattern for all of them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::{AnchorQuad, WarpPlan};
use crate::imagecore::{ColorInterval, Image, Mask, MaskShape, Pattern, Raster};
use crate::optim::Adam;
use crate::physicsim::{apply_degradation, synth_augment, AugmentParams, AugmentRanges, DegradeParams, DegradeSample};
use crate::reid::{score, ReIDModel, Tape};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    #[default]
    Evade,
    Impersonate,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evade" => Ok(AttackMode::Evade),
            "impersonate" => Ok(AttackMode::Impersonate),
            _ => Err(Error::Config(format!("unknown attack mode {s:?} (expected evade or impersonate)"))),
        }
    }
}

/// Which family of objectives drives the optimisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveStage {
    /// All cross-camera pairs of the generating set, every iteration.
    Pairwise,
    /// One sampled triplet or quadruplet per iteration, no degradation or smoothness term.
    Triplet,
    /// Sampled tuples with random degradation and the smoothness penalty.
    #[default]
    Robust,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Synthesised variants per original image.
    pub per_original: usize,
    pub ranges: AugmentRanges,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            per_original: 4,
            ranges: AugmentRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub stage: ObjectiveStage,
    /// Target-term weight of the pairwise impersonation objective.
    pub target_weight: f64,
    /// Same-camera term weight of the evading triplet objective.
    pub evade_positive_weight: f64,
    /// Same-camera term weight of the impersonation quadruplet objective.
    pub impersonate_positive_weight: f64,
    /// Cross-camera term weight of the impersonation quadruplet objective.
    pub impersonate_negative_weight: f64,
    /// Total-variation penalty weight.
    pub smoothness_weight: f64,
    /// Rank threshold the attack aims to push matches beyond (or targets into).
    pub rank_threshold: usize,
    pub interval: ColorInterval,
    pub pattern_height: usize,
    pub pattern_width: usize,
    pub mask_shape: MaskShape,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub max_iterations: usize,
    /// Tuples averaged per iteration in the sampled stages.
    pub tuples_per_iteration: usize,
    pub degradation: DegradeParams,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Evade,
            stage: ObjectiveStage::Robust,
            target_weight: 1.0,
            evade_positive_weight: 0.5,
            impersonate_positive_weight: 0.5,
            impersonate_negative_weight: 1.0,
            smoothness_weight: 1e-3,
            rank_threshold: 10,
            interval: ColorInterval::default(),
            pattern_height: 12,
            pattern_width: 12,
            mask_shape: MaskShape::Ellipse,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            max_iterations: 700,
            tuples_per_iteration: 1,
            degradation: DegradeParams::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("target_weight", self.target_weight),
            ("evade_positive_weight", self.evade_positive_weight),
            ("impersonate_positive_weight", self.impersonate_positive_weight),
            ("impersonate_negative_weight", self.impersonate_negative_weight),
            ("smoothness_weight", self.smoothness_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        if self.rank_threshold == 0 {
            return Err(Error::Config("rank_threshold must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) || !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return Err(Error::Config("adam betas must lie strictly inside (0, 1)".into()));
        }
        if self.pattern_height == 0 || self.pattern_width == 0 {
            return Err(Error::Config("pattern size must be positive".into()));
        }
        if self.tuples_per_iteration == 0 {
            return Err(Error::Config("tuples_per_iteration must be positive".into()));
        }
        self.interval.validate()?;
        self.degradation.validate()?;
        Ok(())
    }

    pub fn mask(&self) -> Result<Mask> {
        Mask::from_shape(self.mask_shape, self.pattern_height, self.pattern_width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Synthesized { source: usize, params: AugmentParams },
}

#[derive(Clone, Debug)]
pub struct GenEntry {
    pub image: Image,
    pub camera: u32,
    /// Human-readable position tag, e.g. `c2_0007` or `c2_0007_aug3`.
    pub position: String,
    pub quad: AnchorQuad,
    pub provenance: Provenance,
}

/// The adversary's own multi-camera, multi-position images.
#[derive(Clone, Debug)]
pub struct GeneratingSet {
    identity: u32,
    entries: Vec<GenEntry>,
}

impl GeneratingSet {
    pub fn new(identity: u32, entries: Vec<GenEntry>) -> Result<Self> {
        let cams: std::collections::BTreeSet<u32> = entries.iter().map(|e| e.camera).collect();
        if cams.len() < 2 {
            return Err(Error::Config(format!(
                "generating set needs at least 2 cameras, found {}",
                cams.len()
            )));
        }
        for e in &entries {
            if !e.quad.inside(e.image.width(), e.image.height()) {
                return Err(Error::Config(format!("entry {} has a quad outside its image", e.position)));
            }
        }
        Ok(Self { identity, entries })
    }

    pub fn identity(&self) -> u32 {
        self.identity
    }

    pub fn entries(&self) -> &[GenEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn camera_count(&self) -> usize {
        self.entries.iter().map(|e| e.camera).collect::<std::collections::BTreeSet<_>>().len()
    }
}

/// Originals followed by their synthesised variants, `per_original` each.
pub fn build_generating_set<R: Rng + ?Sized>(raw: &[LabeledImage], aug: &AugmentConfig, rng: &mut R) -> Result<GeneratingSet> {
    let first = raw.first().ok_or_else(|| Error::Config("generating set input is empty".into()))?;
    if let Some(other) = raw.iter().find(|li| li.identity != first.identity) {
        return Err(Error::Config(format!(
            "generating set mixes identities {} and {}",
            first.identity, other.identity
        )));
    }
    let mut entries: Vec<GenEntry> = raw
        .iter()
        .map(|li| GenEntry {
            image: li.image.clone(),
            camera: li.camera,
            position: format!("c{}_{:04}", li.camera, li.sequence),
            quad: li.quad,
            provenance: Provenance::Original,
        })
        .collect();
    let cams = entries.iter().map(|e| e.camera).collect::<std::collections::BTreeSet<_>>();
    if cams.len() < 2 {
        return Err(Error::Config("generating set input covers a single camera".into()));
    }
    for (i, li) in raw.iter().enumerate() {
        for k in 0..aug.per_original {
            let a = synth_augment(&li.image, &li.quad, &aug.ranges, rng)?;
            entries.push(GenEntry {
                image: a.image,
                camera: li.camera,
                position: format!("c{}_{:04}_aug{}", li.camera, li.sequence, k + 1),
                quad: a.quad,
                provenance: Provenance::Synthesized { source: i, params: a.params },
            });
        }
    }
    GeneratingSet::new(first.identity, entries)
}

/// Indices into a generating set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// A triplet plus an index into the target set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Quadruplet {
    pub triplet: Triplet,
    pub target: usize,
}

/// Uniform anchor among entries whose camera has a second image, then a
/// uniform same-camera positive and a uniform other-camera negative.
pub fn sample_triplet<R: Rng + ?Sized>(gs: &GeneratingSet, rng: &mut R) -> Result<Triplet> {
    let e = &gs.entries;
    let anchors: Vec<usize> = (0..e.len())
        .filter(|&i| {
            let same = e.iter().enumerate().any(|(j, x)| j != i && x.camera == e[i].camera);
            let other = e.iter().any(|x| x.camera != e[i].camera);
            same && other
        })
        .collect();
    if anchors.is_empty() {
        return Err(Error::Sampling("no camera has two images alongside another camera".into()));
    }
    let anchor = anchors[rng.random_range(0..anchors.len())];
    let cam = e[anchor].camera;
    let positives: Vec<usize> = (0..e.len()).filter(|&j| j != anchor && e[j].camera == cam).collect();
    let negatives: Vec<usize> = (0..e.len()).filter(|&j| e[j].camera != cam).collect();
    Ok(Triplet {
        anchor,
        positive: positives[rng.random_range(0..positives.len())],
        negative: negatives[rng.random_range(0..negatives.len())],
    })
}

pub fn sample_quadruplet<R: Rng + ?Sized>(gs: &GeneratingSet, target_count: usize, rng: &mut R) -> Result<Quadruplet> {
    if target_count == 0 {
        return Err(Error::Sampling("target set is empty".into()));
    }
    let triplet = sample_triplet(gs, rng)?;
    Ok(Quadruplet {
        triplet,
        target: rng.random_range(0..target_count),
    })
}

/// Value and pattern gradient of one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossEval {
    /// The quantity being descended.
    pub loss: f64,
    /// The objective in its natural orientation (maximised for impersonation).
    pub objective: f64,
    /// Gradient of `loss` with respect to the pattern.
    pub gradient: Raster,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Operand {
    Adversarial { entry: usize, degrade: DegradeSample },
    Target(usize),
}

struct Term {
    weight: f64,
    a: usize,
    b: usize,
}

/// A trained model, a generating set and per-entry warp plans for one mask.
pub struct AttackContext<'a> {
    gs: &'a GeneratingSet,
    model: &'a ReIDModel,
    plans: Vec<WarpPlan>,
    targets: Vec<Vec<f64>>,
    pattern_height: usize,
    pattern_width: usize,
}

impl<'a> AttackContext<'a> {
    pub fn new(gs: &'a GeneratingSet, model: &'a ReIDModel, mask: &Mask, targets: &[Image]) -> Result<Self> {
        let plans = gs
            .entries
            .iter()
            .map(|e| WarpPlan::for_quad(mask, &e.quad, e.image.height(), e.image.width()))
            .collect::<Result<Vec<_>>>()?;
        let targets = targets.iter().map(|t| model.embed(t)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gs,
            model,
            plans,
            targets,
            pattern_height: mask.height(),
            pattern_width: mask.width(),
        })
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    pub fn plan(&self, entry: usize) -> &WarpPlan {
        &self.plans[entry]
    }

    fn check_pattern(&self, pattern: &Pattern) -> Result<()> {
        if pattern.height() != self.pattern_height || pattern.width() != self.pattern_width {
            return Err(Error::InvalidArgument(format!(
                "pattern is {}x{} but the mask is {}x{}",
                pattern.height(),
                pattern.width(),
                self.pattern_height,
                self.pattern_width
            )));
        }
        Ok(())
    }

    /// Degraded entry image with the masked, warped pattern overlaid.
    pub fn adversarial_image(&self, entry: usize, pattern: &Pattern, degrade: &DegradeSample) -> Result<Image> {
        self.check_pattern(pattern)?;
        let base = apply_degradation(&self.gs.entries[entry].image, degrade);
        self.plans[entry].overlay(&base, pattern.raster())
    }

    fn evaluate(&self, pattern: &Pattern, operands: &[Operand], terms: &[Term]) -> Result<(f64, Raster)> {
        self.check_pattern(pattern)?;
        let mut tapes: Vec<Option<Tape>> = Vec::with_capacity(operands.len());
        let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(operands.len());
        for op in operands {
            match *op {
                Operand::Adversarial { entry, degrade } => {
                    let img = self.adversarial_image(entry, pattern, &degrade)?;
                    let tape = self.model.embed_tape(&img)?;
                    embeddings.push(tape.embedding().to_vec());
                    tapes.push(Some(tape));
                }
                Operand::Target(t) => {
                    embeddings.push(self.targets[t].clone());
                    tapes.push(None);
                }
            }
        }
        let dim = self.model.embedding_dim();
        let mut d_emb = vec![vec![0.0; dim]; operands.len()];
        let mut value = 0.0;
        for t in terms {
            value += t.weight * score(&embeddings[t.a], &embeddings[t.b]);
            for k in 0..dim {
                d_emb[t.a][k] += 0.5 * t.weight * embeddings[t.b][k];
                d_emb[t.b][k] += 0.5 * t.weight * embeddings[t.a][k];
            }
        }
        let mut grad = Raster::zeros(self.pattern_height, self.pattern_width, 3);
        for (i, op) in operands.iter().enumerate() {
            if let (Operand::Adversarial { entry, .. }, Some(tape)) = (op, &tapes[i]) {
                if d_emb[i].iter().all(|v| *v == 0.0) {
                    continue;
                }
                let g_img = self.model.input_gradient(tape, &d_emb[i])?;
                self.plans[*entry].accumulate_gradient(&g_img, &mut grad)?;
            }
        }
        Ok((value, grad))
    }

    fn cross_camera_pairs(&self) -> Vec<(usize, usize)> {
        let e = &self.gs.entries;
        let mut pairs = Vec::new();
        for i in 0..e.len() {
            for j in 0..e.len() {
                if i != j && e[i].camera != e[j].camera {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    /// Sum over ordered cross-camera pairs of `sim(a, b)` between adversarial
    /// images. For impersonation each pair also subtracts
    /// `target_weight * (sim_t(a) + sim_t(b))`, where `sim_t` is the mean
    /// similarity to the target set.
    pub fn pairwise_objective(&self, pattern: &Pattern, mode: AttackMode, target_weight: f64) -> Result<LossEval> {
        if mode == AttackMode::Impersonate && self.targets.is_empty() {
            return Err(Error::Config("impersonation needs a nonempty target set".into()));
        }
        let n = self.gs.entries.len();
        let mut operands: Vec<Operand> = (0..n)
            .map(|entry| Operand::Adversarial {
                entry,
                degrade: DegradeSample::IDENTITY,
            })
            .collect();
        let mut terms: Vec<Term> = Vec::new();
        let pairs = self.cross_camera_pairs();
        for &(i, j) in &pairs {
            terms.push(Term { weight: 1.0, a: i, b: j });
        }
        if mode == AttackMode::Impersonate && target_weight != 0.0 {
            // how often each entry appears in an ordered pair, in either role
            let mut appearances = vec![0usize; n];
            for &(i, j) in &pairs {
                appearances[i] += 1;
                appearances[j] += 1;
            }
            let t_base = operands.len();
            operands.extend((0..self.targets.len()).map(Operand::Target));
            let per_target = target_weight / self.targets.len() as f64;
            for (i, &count) in appearances.iter().enumerate() {
                for t in 0..self.targets.len() {
                    terms.push(Term {
                        weight: -per_target * count as f64,
                        a: i,
                        b: t_base + t,
                    });
                }
            }
        }
        let (value, gradient) = self.evaluate(pattern, &operands, &terms)?;
        Ok(LossEval {
            loss: value,
            objective: value,
            gradient,
        })
    }

    /// `sim(anchor, negative) - evade_positive_weight * sim(anchor, positive) + smoothness_weight * tv(pattern)`
    /// over adversarial images, with one fixed degradation sample per triplet member.
    pub fn robust_evading_loss_with(
        &self,
        t: &Triplet,
        pattern: &Pattern,
        evade_positive_weight: f64,
        smoothness_weight: f64,
        samples: &[DegradeSample; 3],
    ) -> Result<LossEval> {
        let operands = [
            Operand::Adversarial { entry: t.anchor, degrade: samples[0] },
            Operand::Adversarial { entry: t.positive, degrade: samples[1] },
            Operand::Adversarial { entry: t.negative, degrade: samples[2] },
        ];
        let terms = [Term { weight: 1.0, a: 0, b: 2 }, Term { weight: -evade_positive_weight, a: 0, b: 1 }];
        let (value, mut gradient) = self.evaluate(pattern, &operands, &terms)?;
        let loss = value + add_tv(pattern, smoothness_weight, 1.0, &mut gradient)?;
        Ok(LossEval { loss, objective: loss, gradient })
    }

    /// [`AttackContext::robust_evading_loss_with`] with degradation drawn fresh from `rng`.
    pub fn robust_evading_loss<R: Rng + ?Sized>(
        &self,
        t: &Triplet,
        pattern: &Pattern,
        evade_positive_weight: f64,
        smoothness_weight: f64,
        dp: &DegradeParams,
        rng: &mut R,
    ) -> Result<LossEval> {
        let samples = [dp.sample(rng), dp.sample(rng), dp.sample(rng)];
        self.robust_evading_loss_with(t, pattern, evade_positive_weight, smoothness_weight, &samples)
    }

    /// Maximises `sim(anchor, target) + impersonate_positive_weight * sim(anchor, positive)`
    /// minus `impersonate_negative_weight * sim(anchor, negative) + smoothness_weight * tv(pattern)`
    /// by descending its negation; the smoothness term is a penalty in both modes.
    #[allow(clippy::too_many_arguments)]
    pub fn robust_impersonation_loss_with(
        &self,
        q: &Quadruplet,
        pattern: &Pattern,
        impersonate_positive_weight: f64,
        impersonate_negative_weight: f64,
        smoothness_weight: f64,
        samples: &[DegradeSample; 3],
    ) -> Result<LossEval> {
        if q.target >= self.targets.len() {
            return Err(Error::InvalidArgument(format!("target index {} out of range", q.target)));
        }
        let t = &q.triplet;
        let operands = [
            Operand::Adversarial { entry: t.anchor, degrade: samples[0] },
            Operand::Adversarial { entry: t.positive, degrade: samples[1] },
            Operand::Adversarial { entry: t.negative, degrade: samples[2] },
            Operand::Target(q.target),
        ];
        // negated: -sim(a, t) - wp sim(a, +) + wn sim(a, -)
        let terms = [
            Term { weight: -1.0, a: 0, b: 3 },
            Term { weight: -impersonate_positive_weight, a: 0, b: 1 },
            Term { weight: impersonate_negative_weight, a: 0, b: 2 },
        ];
        let (value, mut gradient) = self.evaluate(pattern, &operands, &terms)?;
        let loss = value + add_tv(pattern, smoothness_weight, 1.0, &mut gradient)?;
        Ok(LossEval {
            loss,
            objective: -loss,
            gradient,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn robust_impersonation_loss<R: Rng + ?Sized>(
        &self,
        q: &Quadruplet,
        pattern: &Pattern,
        impersonate_positive_weight: f64,
        impersonate_negative_weight: f64,
        smoothness_weight: f64,
        dp: &DegradeParams,
        rng: &mut R,
    ) -> Result<LossEval> {
        let samples = [dp.sample(rng), dp.sample(rng), dp.sample(rng)];
        self.robust_impersonation_loss_with(q, pattern, impersonate_positive_weight, impersonate_negative_weight, smoothness_weight, &samples)
    }

    /// The undegraded triplet objective `sim(anchor, negative) - evade_positive_weight * sim(anchor, positive)`,
    /// computed directly from image similarities.
    pub fn triplet_loss(&self, t: &Triplet, pattern: &Pattern, evade_positive_weight: f64) -> Result<f64> {
        let id = DegradeSample::IDENTITY;
        let o = self.adversarial_image(t.anchor, pattern, &id)?;
        let p = self.adversarial_image(t.positive, pattern, &id)?;
        let n = self.adversarial_image(t.negative, pattern, &id)?;
        Ok(self.model.similarity(&o, &n)? - evade_positive_weight * self.model.similarity(&o, &p)?)
    }
}

fn add_tv(pattern: &Pattern, smoothness_weight: f64, sign: f64, grad: &mut Raster) -> Result<f64> {
    if smoothness_weight == 0.0 {
        return Ok(0.0);
    }
    let (tv, g) = pattern.total_variation()?;
    for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
        *a += sign * smoothness_weight * b;
    }
    Ok(sign * smoothness_weight * tv)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub gradient_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,gradient_norm\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9},{:.9}", r.iteration, r.loss, r.gradient_norm);
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean loss over the `window` iterations ending at `iteration` (1-based).
    pub fn smoothed_loss(&self, iteration: usize, window: usize) -> Option<f64> {
        if iteration == 0 || iteration > self.rows.len() || window == 0 {
            return None;
        }
        let start = iteration.saturating_sub(window);
        let slice = &self.rows[start..iteration];
        Some(slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64)
    }
}

/// Adam from the interval midpoint, projecting back into the interval after every step.
pub fn optimize_pattern(
    gs: &GeneratingSet,
    model: &ReIDModel,
    cfg: &AttackConfig,
    mask: &Mask,
    targets: &[Image],
) -> Result<(Pattern, Trace)> {
    optimize_pattern_observed(gs, model, cfg, mask, targets, |_, _| {})
}

/// [`optimize_pattern`], calling `observe(iteration, pattern)` after each projected step.
pub fn optimize_pattern_observed(
    gs: &GeneratingSet,
    model: &ReIDModel,
    cfg: &AttackConfig,
    mask: &Mask,
    targets: &[Image],
    mut observe: impl FnMut(usize, &Pattern),
) -> Result<(Pattern, Trace)> {
    cfg.validate()?;
    if cfg.mode == AttackMode::Impersonate && targets.is_empty() {
        return Err(Error::Config("impersonation needs a nonempty target set".into()));
    }
    if mask.height() != cfg.pattern_height || mask.width() != cfg.pattern_width {
        return Err(Error::Config("mask size differs from the configured pattern size".into()));
    }
    let mut pattern = Pattern::midpoint(cfg.pattern_height, cfg.pattern_width, cfg.interval)?;
    let mut trace = Trace::default();
    if cfg.max_iterations == 0 {
        return Ok((pattern, trace));
    }
    let ctx = AttackContext::new(gs, model, mask, targets)?;
    let mut rng = seeded(derive_seed(cfg.seed, "attack/sampling"));
    let n = pattern.raster().data().len();
    let mut adam = Adam::new(n, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, 1e-8)?;
    let identity = [DegradeSample::IDENTITY; 3];
    for iteration in 0..cfg.max_iterations {
        let eval = match cfg.stage {
            ObjectiveStage::Pairwise => ctx.pairwise_objective(&pattern, cfg.mode, cfg.target_weight)?,
            ObjectiveStage::Triplet | ObjectiveStage::Robust => {
                let mut acc: Option<LossEval> = None;
                for _ in 0..cfg.tuples_per_iteration {
                    let e = match cfg.mode {
                        AttackMode::Evade => {
                            let t = sample_triplet(gs, &mut rng)?;
                            if cfg.stage == ObjectiveStage::Robust {
                                ctx.robust_evading_loss(&t, &pattern, cfg.evade_positive_weight, cfg.smoothness_weight, &cfg.degradation, &mut rng)?
                            } else {
                                ctx.robust_evading_loss_with(&t, &pattern, cfg.evade_positive_weight, 0.0, &identity)?
                            }
                        }
                        AttackMode::Impersonate => {
                            let q = sample_quadruplet(gs, targets.len(), &mut rng)?;
                            if cfg.stage == ObjectiveStage::Robust {
                                ctx.robust_impersonation_loss(
                                    &q,
                                    &pattern,
                                    cfg.impersonate_positive_weight,
                                    cfg.impersonate_negative_weight,
                                    cfg.smoothness_weight,
                                    &cfg.degradation,
                                    &mut rng,
                                )?
                            } else {
                                ctx.robust_impersonation_loss_with(&q, &pattern, cfg.impersonate_positive_weight, cfg.impersonate_negative_weight, 0.0, &identity)?
                            }
                        }
                    };
                    acc = Some(match acc {
                        None => e,
                        Some(mut a) => {
                            a.loss += e.loss;
                            a.objective += e.objective;
                            for (x, y) in a.gradient.data_mut().iter_mut().zip(e.gradient.data()) {
                                *x += y;
                            }
                            a
                        }
                    });
                }
                let mut a = acc.expect("at least one tuple");
                let k = cfg.tuples_per_iteration as f64;
                a.loss /= k;
                a.objective /= k;
                for g in a.gradient.data_mut() {
                    *g /= k;
                }
                a
            }
        };
        let gradient_norm = eval.gradient.norm();
        if !eval.loss.is_finite() || !gradient_norm.is_finite() {
            return Err(Error::Optimization {
                iteration,
                reason: format!("non-finite loss {} or gradient norm {gradient_norm}", eval.loss),
            });
        }
        adam.step(pattern.data_mut(), eval.gradient.data());
        pattern.project_in_place();
        assert!(pattern.within_interval(), "projection left the interval at iteration {iteration}");
        observe(iteration + 1, &pattern);
        trace.rows.push(TraceRow {
            iteration: iteration + 1,
            loss: eval.loss,
            gradient_norm,
        });
        if (iteration + 1) % 100 == 0 {
            debug!(
                "iteration {} smoothed loss {:.4}",
                iteration + 1,
                trace.smoothed_loss(iteration + 1, 50).unwrap_or(f64::NAN)
            );
        }
    }
    info!(
        "optimised {:?} pattern over {} iterations, final smoothed loss {:.4}",
        cfg.mode,
        cfg.max_iterations,
        trace.smoothed_loss(cfg.max_iterations, 50).unwrap_or(f64::NAN)
    );
    Ok((pattern, trace))
}
