use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{Image, Raster};

/// Ranges for the random brightness factor and Gaussian blur sigma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub brightness: (f64, f64),
    pub blur_sigma: (f64, f64),
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            brightness: (0.7, 1.3),
            blur_sigma: (0.0, 1.2),
        }
    }
}

/// One draw of the degradation function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSample {
    pub brightness: f64,
    pub sigma: f64,
}

impl DegradeSample {
    pub const IDENTITY: DegradeSample = DegradeSample {
        brightness: 1.0,
        sigma: 0.0,
    };
}

impl DegradeParams {
    pub fn identity() -> Self {
        Self {
            brightness: (1.0, 1.0),
            blur_sigma: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b0, b1) = self.brightness;
        let (s0, s1) = self.blur_sigma;
        if !(b0 > 0.0 && b0 <= b1 && b1 <= 2.0) {
            return Err(Error::Config(format!(
                "brightness range must lie in (0, 2] with lower <= upper, got [{b0}, {b1}]"
            )));
        }
        if !(s0 >= 0.0 && s0 <= s1 && s1 <= 3.0) {
            return Err(Error::Config(format!(
                "blur sigma range must lie in [0, 3] with lower <= upper, got [{s0}, {s1}]"
            )));
        }
        Ok(())
    }

    /// Draws brightness then sigma, each uniform over its closed range.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DegradeSample {
        DegradeSample {
            brightness: rng.random_range(self.brightness.0..=self.brightness.1),
            sigma: rng.random_range(self.blur_sigma.0..=self.blur_sigma.1),
        }
    }
}

pub fn degrade<R: Rng + ?Sized>(x: &Image, dp: &DegradeParams, rng: &mut R) -> Result<Image> {
    dp.validate()?;
    Ok(apply_degradation(x, &dp.sample(rng)))
}

/// Scales by the brightness factor, clamps to `[0, 1]`, then blurs.
pub fn apply_degradation(x: &Image, s: &DegradeSample) -> Image {
    let mut r = x.raster().clone();
    if s.brightness != 1.0 {
        for v in r.data_mut() {
            *v = (*v * s.brightness).clamp(0.0, 1.0);
        }
    }
    if s.sigma > 0.0 {
        r = gaussian_blur(&r, s.sigma);
        for v in r.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Image::from_raster_unchecked(r)
}

/// Vector-Jacobian product of [`apply_degradation`] for a fixed sample.
pub fn degradation_vjp(x: &Image, s: &DegradeSample, grad_out: &Raster) -> Raster {
    let mut g = if s.sigma > 0.0 {
        gaussian_blur_transpose(grad_out, s.sigma)
    } else {
        grad_out.clone()
    };
    if s.brightness != 1.0 {
        for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
            let scaled = xv * s.brightness;
            *gv = if (0.0..=1.0).contains(&scaled) { *gv * s.brightness } else { 0.0 };
        }
    }
    g
}

/// Normalised 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(r: &Raster, sigma: f64) -> Raster {
    let k = gaussian_kernel(sigma);
    let tmp = blur_axis(r, &k, Axis::X);
    blur_axis(&tmp, &k, Axis::Y)
}

fn gaussian_blur_transpose(g: &Raster, sigma: f64) -> Raster {
    let k = gaussian_kernel(sigma);
    let tmp = blur_axis_transpose(g, &k, Axis::Y);
    blur_axis_transpose(&tmp, &k, Axis::X)
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

fn tap_source(axis: Axis, y: usize, x: usize, d: i64, h: usize, w: usize) -> (usize, usize) {
    match axis {
        Axis::X => (y, (x as i64 + d).clamp(0, w as i64 - 1) as usize),
        Axis::Y => ((y as i64 + d).clamp(0, h as i64 - 1) as usize, x),
    }
}

fn blur_axis(r: &Raster, k: &[f64], axis: Axis) -> Raster {
    let (h, w, ch) = (r.height(), r.width(), r.channels());
    let radius = (k.len() / 2) as i64;
    let mut out = Raster::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for (i, kv) in k.iter().enumerate() {
                let (sy, sx) = tap_source(axis, y, x, i as i64 - radius, h, w);
                for c in 0..ch {
                    let o = out.offset(y, x, c);
                    out.data_mut()[o] += kv * r.get(sy, sx, c);
                }
            }
        }
    }
    out
}

fn blur_axis_transpose(g: &Raster, k: &[f64], axis: Axis) -> Raster {
    let (h, w, ch) = (g.height(), g.width(), g.channels());
    let radius = (k.len() / 2) as i64;
    let mut out = Raster::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for (i, kv) in k.iter().enumerate() {
                let (sy, sx) = tap_source(axis, y, x, i as i64 - radius, h, w);
                for c in 0..ch {
                    let o = out.offset(sy, sx, c);
                    out.data_mut()[o] += kv * g.get(y, x, c);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn identity_degradation_is_exact() {
        let x = random_image(1, 12, 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = degrade(&x, &DegradeParams::identity(), &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn brightness_saturates() {
        let x = Image::filled(8, 8, [0.8; 3]).unwrap();
        let y = apply_degradation(&x, &DegradeSample { brightness: 2.0, sigma: 0.0 });
        assert!(y.data().iter().all(|v| *v == 1.0));
    }

    // Full 2-D convolution with replicated borders, independent of the separable path.
    fn direct_blur_oracle(x: &Raster, sigma: f64) -> Raster {
        let radius = (3.0 * sigma).ceil() as i64;
        let mut weights = Vec::new();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                weights.push((dy, dx, (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()));
            }
        }
        let total: f64 = weights.iter().map(|w| w.2).sum();
        Raster::from_fn(x.height(), x.width(), x.channels(), |y, xx, c| {
            weights
                .iter()
                .map(|&(dy, dx, wt)| {
                    let sy = (y as i64 + dy).clamp(0, x.height() as i64 - 1) as usize;
                    let sx = (xx as i64 + dx).clamp(0, x.width() as i64 - 1) as usize;
                    wt * x.get(sy, sx, c)
                })
                .sum::<f64>()
                / total
        })
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let x = random_image(2, 16, 12);
        let s = DegradeSample { brightness: 0.5, sigma: 1.0 };
        let y = apply_degradation(&x, &s);
        let scaled = Raster::from_vec(16, 12, 3, x.data().iter().map(|v| (v * 0.5).clamp(0.0, 1.0)).collect()).unwrap();
        let oracle = direct_blur_oracle(&scaled, 1.0);
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn kernel_radius_and_normalisation() {
        assert_eq!(gaussian_kernel(1.0).len(), 7);
        assert_eq!(gaussian_kernel(0.4).len(), 5);
        assert!((gaussian_kernel(1.7).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let x = random_image(3, 10, 9);
        let s = DegradeSample { brightness: 0.9, sigma: 0.8 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = Raster::from_fn(10, 9, 3, |_, _, _| rng.random::<f64>() - 0.5);
        let vjp = degradation_vjp(&x, &s, &g);
        let f = |img: &Image| -> f64 {
            apply_degradation(img, &s).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        for i in (0..x.data().len()).step_by(7) {
            let h = 1e-6;
            let mut p = x.raster().clone();
            p.data_mut()[i] = (p.data()[i] + h).min(1.0);
            let mut m = x.raster().clone();
            m.data_mut()[i] = (m.data()[i] - h).max(0.0);
            let span = p.data()[i] - m.data()[i];
            let fd = (f(&Image::new(p).unwrap()) - f(&Image::new(m).unwrap())) / span;
            assert!((fd - vjp.data()[i]).abs() < 1e-6, "index {i}: {fd} vs {}", vjp.data()[i]);
        }
    }

    #[test]
    fn params_validation() {
        assert!(DegradeParams::default().validate().is_ok());
        assert!(DegradeParams { brightness: (0.0, 1.0), blur_sigma: (0.0, 1.0) }.validate().is_err());
        assert!(DegradeParams { brightness: (0.5, 2.5), blur_sigma: (0.0, 1.0) }.validate().is_err());
        assert!(DegradeParams { brightness: (0.5, 1.0), blur_sigma: (0.0, 3.5) }.validate().is_err());
    }

    #[test]
    fn output_stays_in_unit_range_and_is_seeded() {
        let x = random_image(5, 12, 12);
        let dp = DegradeParams { brightness: (0.2, 2.0), blur_sigma: (0.0, 3.0) };
        let run = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| degrade(&x, &dp, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let a = run(9);
        assert_eq!(a, run(9));
        assert!(a.iter().all(|img| img.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
