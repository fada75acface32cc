#![allow(dead_code)]

use reidpatch::attack::{build_generating_set, AugmentConfig, GeneratingSet};
use reidpatch::dataset::LabeledImage;
use reidpatch::geometry::AnchorQuad;
use reidpatch::imagecore::{ColorInterval, Image, Pattern, Raster};
use reidpatch::reid::{Architecture, ReIDModel, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_arch() -> Architecture {
    Architecture {
        input_height: 16,
        input_width: 8,
        channels: vec![4, 6],
        embedding_dim: 8,
    }
}

pub fn tiny_model(variant: Variant, seed: u64) -> ReIDModel {
    ReIDModel::new_random(variant, tiny_arch(), seed).unwrap()
}

/// Smooth random colour field with per-camera tint.
pub fn scene(seed: u64, camera: u32, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let fy: f64 = rng.random_range(0.2..0.9);
    let fx: f64 = rng.random_range(0.2..0.9);
    let tint = 0.08 * camera as f64;
    Image::from_fn(h, w, |y, x| {
        let wave = 0.15 * ((y as f64 * fy).sin() + (x as f64 * fx).cos());
        [0, 1, 2].map(|c| (base[c] + wave + if c == (camera as usize % 3) { tint } else { 0.0 }).clamp(0.05, 0.95))
    })
    .unwrap()
}

pub fn torso_quad() -> AnchorQuad {
    AnchorQuad::new([[1.0, 4.0], [6.5, 4.5], [6.0, 11.5], [1.5, 11.0]], 8, 16).unwrap()
}

/// Adversary images: `(camera, count)` groups of 16x8 scenes.
pub fn adversary_images(groups: &[(u32, usize)], seed: u64) -> Vec<LabeledImage> {
    let mut out = Vec::new();
    for &(camera, count) in groups {
        for s in 0..count {
            out.push(LabeledImage {
                image: scene(seed * 1000 + camera as u64 * 100 + s as u64, camera, 16, 8),
                identity: 1,
                camera,
                sequence: s as u32 + 1,
                quad: torso_quad(),
            });
        }
    }
    out
}

pub fn plain_gs(groups: &[(u32, usize)], seed: u64) -> GeneratingSet {
    let raw = adversary_images(groups, seed);
    let aug = AugmentConfig {
        per_original: 0,
        ..Default::default()
    };
    build_generating_set(&raw, &aug, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

pub fn random_pattern(seed: u64, h: usize, w: usize) -> Pattern {
    let iv = ColorInterval::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * 3).map(|i| rng.random_range(iv.lower[i % 3]..iv.upper[i % 3])).collect();
    Pattern::new(Raster::from_vec(h, w, 3, data).unwrap(), iv).unwrap()
}

/// Fraction of sampled entries whose central difference agrees with `analytic`.
pub fn fd_agreement(
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    tol: f64,
    mut f: impl FnMut(usize, f64) -> f64,
) -> f64 {
    let mut ok = 0;
    for &i in indices {
        let fd = (f(i, step) - f(i, -step)) / (2.0 * step);
        let a = analytic[i];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
        if rel <= tol {
            ok += 1;
        } else {
            eprintln!("index {i}: fd {fd:e} analytic {a:e}");
        }
    }
    ok as f64 / indices.len() as f64
}

pub fn sample_indices(seed: u64, n: usize, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(0..n)).collect()
}
