//! A desk-scale stand-in for a multi-camera re-identification dataset.
//!
//! Each identity is a stick-figure person with its own shirt, trousers, hair
//! and build. Each camera applies a global colour-temperature, contrast and
//! offset shift, its own background and a horizontal shear standing in for the
//! viewing angle. Every image also gets pose, position, scale, lighting and
//! sensor-noise jitter. The anchor quad is the shirt front, pushed through the
//! same placement transform as the figure.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::geometry::AnchorQuad;
use crate::imagecore::{quantize_unit, Image};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraStyle {
    /// Per-channel multiplicative gains (colour temperature).
    pub gains: [f64; 3],
    pub contrast: f64,
    pub offset: f64,
    pub background: [f64; 3],
    /// Horizontal shear of the figure per unit height.
    pub shear: f64,
}

impl CameraStyle {
    pub fn defaults() -> Vec<CameraStyle> {
        vec![
            CameraStyle {
                gains: [1.12, 1.0, 0.82],
                contrast: 1.0,
                offset: 0.0,
                background: [0.66, 0.56, 0.42],
                shear: 0.0,
            },
            CameraStyle {
                gains: [0.82, 0.95, 1.15],
                contrast: 0.78,
                offset: 0.06,
                background: [0.34, 0.40, 0.52],
                shear: 0.10,
            },
            CameraStyle {
                gains: [0.86, 1.14, 0.92],
                contrast: 1.25,
                offset: -0.07,
                background: [0.30, 0.50, 0.34],
                shear: -0.10,
            },
        ]
    }

    /// Deterministic extra styles for configurations with more cameras than defaults.
    fn extra(index: usize) -> CameraStyle {
        let t = index as f64;
        CameraStyle {
            gains: [
                1.0 + 0.15 * (1.7 * t).sin(),
                1.0 + 0.1 * (2.3 * t).cos(),
                1.0 + 0.15 * (0.9 * t).cos(),
            ],
            contrast: 0.9 + 0.25 * (1.3 * t).sin().abs(),
            offset: 0.05 * (3.1 * t).sin(),
            background: [
                0.45 + 0.12 * (0.7 * t).sin(),
                0.45 + 0.12 * (1.1 * t).cos(),
                0.45 + 0.12 * (1.9 * t).sin(),
            ],
            shear: 0.1 * (2.9 * t).sin(),
        }
    }

    fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|c| ((rgb[c] * self.gains[c] - 0.5) * self.contrast + 0.5 + self.offset).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetConfig {
    pub identity_count: usize,
    pub camera_count: usize,
    pub images_per_identity_per_camera: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of each (identity, camera) group assigned to the training split.
    pub train_fraction: f64,
    /// Per-camera styles; missing entries are filled deterministically.
    pub cameras: Vec<CameraStyle>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            identity_count: 20,
            camera_count: 3,
            images_per_identity_per_camera: 30,
            height: 32,
            width: 16,
            train_fraction: 2.0 / 3.0,
            cameras: CameraStyle::defaults(),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

const SHIRTS: [[f64; 3]; 8] = [
    [0.80, 0.15, 0.15],
    [0.15, 0.60, 0.20],
    [0.15, 0.25, 0.80],
    [0.90, 0.85, 0.20],
    [0.55, 0.20, 0.65],
    [0.95, 0.55, 0.10],
    [0.92, 0.92, 0.92],
    [0.12, 0.12, 0.12],
];

const TROUSERS: [[f64; 3]; 5] = [
    [0.10, 0.12, 0.35],
    [0.40, 0.40, 0.40],
    [0.45, 0.30, 0.15],
    [0.78, 0.72, 0.55],
    [0.04, 0.04, 0.04],
];

const HAIR: [[f64; 3]; 3] = [[0.08, 0.06, 0.05], [0.55, 0.35, 0.15], [0.85, 0.75, 0.45]];

const TORSO_HALF_WIDTH: [f64; 2] = [0.13, 0.165];

const SKIN: [f64; 3] = [0.86, 0.68, 0.55];

#[derive(Clone, Copy, Debug)]
struct Appearance {
    shirt: [f64; 3],
    trousers: [f64; 3],
    hair: [f64; 3],
    torso_half_width: f64,
}

impl ToyDatasetConfig {
    pub fn max_identities() -> usize {
        SHIRTS.len() * TROUSERS.len() * HAIR.len() * TORSO_HALF_WIDTH.len()
    }

    pub fn camera_styles(&self) -> Vec<CameraStyle> {
        (0..self.camera_count)
            .map(|i| self.cameras.get(i).cloned().unwrap_or_else(|| CameraStyle::extra(i)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.identity_count == 0 || self.images_per_identity_per_camera == 0 {
            return Err(Error::Config("identity and image counts must be positive".into()));
        }
        if self.camera_count < 2 {
            return Err(Error::Config("at least two cameras are needed for cross-camera matching".into()));
        }
        if self.identity_count > Self::max_identities() {
            return Err(Error::Config(format!(
                "{} identities requested but only {} appearance combinations are distinguishable",
                self.identity_count,
                Self::max_identities()
            )));
        }
        if self.height < 16 || self.width < 8 {
            return Err(Error::Config("toy images must be at least 16x8".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        let styles = self.camera_styles();
        for i in 0..styles.len() {
            for j in i + 1..styles.len() {
                if styles[i] == styles[j] {
                    return Err(Error::Config(format!("cameras {} and {} share a style", i + 1, j + 1)));
                }
            }
        }
        Ok(())
    }

    fn appearances(&self) -> Vec<Appearance> {
        // distinct (shirt, trousers) pairs first
        let mut pairs: Vec<(usize, usize)> = (0..SHIRTS.len())
            .flat_map(|s| (0..TROUSERS.len()).map(move |t| (s, t)))
            .collect();
        let mut rng = seeded(derive_seed(self.seed, "toy/appearance"));
        pairs.shuffle(&mut rng);
        let rounds = HAIR.len() * TORSO_HALF_WIDTH.len();
        (0..rounds)
            .flat_map(|round| pairs.iter().map(move |&(s, t)| (s, t, round)))
            .take(self.identity_count)
            .map(|(s, t, round)| {
                // (hair, build) runs through every combination as round varies
                let variant = (round + s + t) % rounds;
                Appearance {
                    shirt: SHIRTS[s],
                    trousers: TROUSERS[t],
                    hair: HAIR[variant % HAIR.len()],
                    torso_half_width: TORSO_HALF_WIDTH[variant / HAIR.len()],
                }
            })
            .collect()
    }
}

/// Per-image jitter drawn from the image's own seed.
struct Placement {
    centre_x: f64,
    top: f64,
    scale: f64,
    shear: f64,
    leg_gap: f64,
    light: f64,
    bg_tilt: [f64; 2],
}

impl Placement {
    /// Canonical figure coordinates `(u, v)` (units of image height) to pixels.
    fn to_pixel(&self, h: f64, u: f64, v: f64) -> [f64; 2] {
        let s = h * self.scale;
        [self.centre_x + s * (u + self.shear * (v - 0.4)), self.top + s * v]
    }

    fn to_figure(&self, h: f64, x: f64, y: f64) -> (f64, f64) {
        let s = h * self.scale;
        let v = (y - self.top) / s;
        let u = (x - self.centre_x) / s - self.shear * (v - 0.4);
        (u, v)
    }
}

fn figure_colour(a: &Appearance, p: &Placement, u: f64, v: f64) -> Option<[f64; 3]> {
    let tw = a.torso_half_width;
    // head and hair
    let hy = (v - 0.13) / 0.085;
    let hx = u / 0.07;
    if hx * hx + hy * hy <= 1.0 {
        return Some(if v < 0.105 { a.hair } else { SKIN });
    }
    // torso
    if (0.23..0.56).contains(&v) && u.abs() <= tw {
        return Some(a.shirt);
    }
    // sleeves and hands
    if (0.24..0.52).contains(&v) && u.abs() > tw && u.abs() <= tw + 0.05 {
        return Some(if v > 0.47 { SKIN } else { a.shirt.map(|c| c * 0.85) });
    }
    // legs and shoes
    if (0.56..0.96).contains(&v) {
        let leg = |centre: f64| (u - centre).abs() <= 0.055;
        if leg(-p.leg_gap) || leg(p.leg_gap) {
            return Some(if v > 0.92 { [0.1, 0.08, 0.08] } else { a.trousers });
        }
    }
    None
}

/// Renders the configured identities under every camera.
pub fn generate_toy_dataset(cfg: &ToyDatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let styles = cfg.camera_styles();
    let appearances = cfg.appearances();
    let n_train = (cfg.images_per_identity_per_camera as f64 * cfg.train_fraction).round() as usize;
    let mut dataset = Dataset::default();
    for (id_index, appearance) in appearances.iter().enumerate() {
        let identity = id_index as u32 + 1;
        for (cam_index, style) in styles.iter().enumerate() {
            let camera = cam_index as u32 + 1;
            for seq in 0..cfg.images_per_identity_per_camera {
                let sequence = seq as u32 + 1;
                let label = format!("toy/{identity}/{camera}/{sequence}");
                let (image, quad) = render(cfg, appearance, style, derive_seed(cfg.seed, &label))?;
                let li = LabeledImage {
                    image,
                    identity,
                    camera,
                    sequence,
                    quad,
                };
                if seq < n_train {
                    dataset.train.push(li);
                } else {
                    dataset.test.push(li);
                }
            }
        }
    }
    Ok(dataset)
}

fn render(cfg: &ToyDatasetConfig, a: &Appearance, style: &CameraStyle, seed: u64) -> Result<(Image, AnchorQuad)> {
    let mut rng = seeded(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let scale = rng.random_range(0.90..=1.02);
    let placement = Placement {
        centre_x: (w - 1.0) / 2.0 + rng.random_range(-0.05..=0.05) * w,
        top: rng.random_range(-0.01..=0.04) * h,
        scale,
        shear: style.shear + rng.random_range(-0.03..=0.03),
        leg_gap: rng.random_range(0.045..=0.075),
        light: rng.random_range(0.92..=1.08),
        bg_tilt: [rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)],
    };
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).expect("valid sigma");
    const SUB: [f64; 2] = [-0.25, 0.25];
    let mut data = Vec::with_capacity(cfg.height * cfg.width * 3);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let mut acc = [0.0; 3];
            for dy in SUB {
                for dx in SUB {
                    let (u, v) = placement.to_figure(h, x as f64 + dx, y as f64 + dy);
                    let rgb = figure_colour(a, &placement, u, v).unwrap_or_else(|| {
                        let t = placement.bg_tilt[0] * (y as f64 / h - 0.5) + placement.bg_tilt[1] * (x as f64 / w - 0.5);
                        style.background.map(|c| c + t)
                    });
                    for c in 0..3 {
                        acc[c] += 0.25 * rgb[c];
                    }
                }
            }
            let lit = acc.map(|c| c * placement.light);
            let styled = style.apply(lit);
            for v in styled {
                let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(quantize_unit(v + n));
            }
        }
    }
    let image = Image::new(crate::imagecore::Raster::from_vec(cfg.height, cfg.width, 3, data)?)?;
    let tw = a.torso_half_width + 0.03;
    let corners = [[-tw, 0.235], [tw, 0.235], [tw, 0.555], [-tw, 0.555]].map(|[u, v]| placement.to_pixel(h, u, v));
    let quad = AnchorQuad::new(corners, cfg.width, cfg.height)?;
    Ok((image, quad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ToyDatasetConfig {
        ToyDatasetConfig {
            identity_count: 2,
            camera_count: 2,
            images_per_identity_per_camera: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn counts_groups() {
        let ds = generate_toy_dataset(&small(0)).unwrap();
        assert_eq!(ds.len(), 12);
        let mut groups = std::collections::BTreeMap::new();
        for li in ds.all() {
            *groups.entry((li.identity, li.camera)).or_insert(0) += 1;
        }
        assert_eq!(groups.len(), 4);
        assert!(groups.values().all(|n| *n == 3));
        assert_eq!(ds.train.len(), 8);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_toy_dataset(&small(42)).unwrap();
        let b = generate_toy_dataset(&small(42)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        for (x, y) in a.all().zip(b.all()) {
            assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = generate_toy_dataset(&small(43)).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(0);
        cfg.camera_count = 1;
        assert!(matches!(generate_toy_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = small(0);
        cfg.identity_count = ToyDatasetConfig::max_identities() + 1;
        assert!(matches!(generate_toy_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = small(0);
        cfg.cameras = vec![CameraStyle::defaults()[0].clone(); 2];
        assert!(matches!(generate_toy_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn identities_have_distinct_appearance() {
        let cfg = ToyDatasetConfig {
            identity_count: ToyDatasetConfig::max_identities(),
            ..Default::default()
        };
        let apps = cfg.appearances();
        for i in 0..apps.len() {
            for j in i + 1..apps.len() {
                let (a, b) = (&apps[i], &apps[j]);
                assert!(
                    a.shirt != b.shirt || a.trousers != b.trousers || a.hair != b.hair || a.torso_half_width != b.torso_half_width,
                    "identities {i} and {j} collide"
                );
            }
        }
    }

    #[test]
    fn extra_cameras_get_distinct_styles() {
        let cfg = ToyDatasetConfig {
            identity_count: 2,
            camera_count: 6,
            images_per_identity_per_camera: 1,
            ..Default::default()
        };
        let ds = generate_toy_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 12);
        let all: Vec<_> = ds.all().cloned().collect();
        assert_eq!(crate::dataset::cameras(&all).len(), 6);
    }

    #[test]
    fn quads_cover_the_shirt() {
        let ds = generate_toy_dataset(&small(1)).unwrap();
        for li in ds.all() {
            let area = li.quad.area();
            let frac = area / (li.image.height() * li.image.width()) as f64;
            assert!(frac > 0.18 && frac < 0.35, "quad covers {frac}");
        }
    }
}
