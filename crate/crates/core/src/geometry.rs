//! Planar perspective placement of the pattern on person images.
//!
//! Coordinates are continuous pixel-centre coordinates: pixel `(x, y)` has its
//! centre at `(x, y)` and covers `[x - 0.5, x + 0.5]`. The pattern occupies the
//! rectangle `[-0.5, pw - 0.5] x [-0.5, ph - 0.5]` in its own frame.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::imagecore::{Image, Mask, Pattern, Raster};

pub type Point = [f64; 2];

/// A 3x3 projective transform, normalised so that the bottom-right entry is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if !s.is_finite() || s.abs() < 1e-15 {
            return Err(Error::Geometry("homography has a vanishing (3,3) entry".into()));
        }
        let m = m.map(|row| row.map(|v| v / s));
        let h = Self { m };
        let det = h.det();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::Geometry(format!("homography is singular (det = {det:e})")));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::new([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, p: Point) -> Option<Point> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= 1e-12 {
            return Err(Error::Geometry("homography is not invertible".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Homography::new(adj)
    }
}

/// Four corners ordered top-left, top-right, bottom-right, bottom-left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorQuad {
    corners: [Point; 4],
}

const MIN_QUAD_AREA: f64 = 4.0;

impl AnchorQuad {
    /// A quad that must also lie inside a `width x height` image.
    pub fn new(corners: [Point; 4], width: usize, height: usize) -> Result<Self> {
        let q = Self::unbounded(corners)?;
        if !q.inside(width, height) {
            return Err(Error::Geometry(format!(
                "quad {corners:?} leaves the {width}x{height} image"
            )));
        }
        Ok(q)
    }

    /// A convex, non-degenerate quad with no frame constraint.
    pub fn unbounded(corners: [Point; 4]) -> Result<Self> {
        if corners.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("quad has non-finite corners".into()));
        }
        let q = Self { corners };
        if !q.is_convex() {
            return Err(Error::Geometry(format!("quad {corners:?} is not convex")));
        }
        if q.area() < MIN_QUAD_AREA {
            return Err(Error::Geometry(format!(
                "quad area {:.3} is below {MIN_QUAD_AREA} px^2",
                q.area()
            )));
        }
        Ok(q)
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::unbounded([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    /// The pattern's own frame: the outer edges of its pixel grid.
    pub fn pattern_frame(height: usize, width: usize) -> Result<Self> {
        Self::rect(-0.5, -0.5, width as f64 - 0.5, height as f64 - 0.5)
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    pub fn area(&self) -> f64 {
        let c = &self.corners;
        let mut s = 0.0;
        for i in 0..4 {
            let j = (i + 1) % 4;
            s += c[i][0] * c[j][1] - c[j][0] * c[i][1];
        }
        0.5 * s.abs()
    }

    fn is_convex(&self) -> bool {
        let c = &self.corners;
        let mut sign = 0.0f64;
        for i in 0..4 {
            let a = c[i];
            let b = c[(i + 1) % 4];
            let d = c[(i + 2) % 4];
            let cross = (b[0] - a[0]) * (d[1] - b[1]) - (b[1] - a[1]) * (d[0] - b[0]);
            if cross.abs() < 1e-12 {
                return false;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.corners.iter().all(|p| {
            p[0] >= -0.5 && p[0] <= width as f64 - 0.5 && p[1] >= -0.5 && p[1] <= height as f64 - 0.5
        })
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        Self::unbounded(self.corners.map(f))
    }

    /// One line of eight comma-separated coordinates.
    pub fn to_sidecar_line(&self) -> String {
        self.corners
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_sidecar_line(line: &str) -> Result<Self> {
        let vals: Vec<f64> = line
            .trim()
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Geometry(format!("bad quad annotation {line:?}: {e}")))?;
        if vals.len() != 8 {
            return Err(Error::Geometry(format!(
                "quad annotation needs 8 values, found {}",
                vals.len()
            )));
        }
        Self::unbounded([
            [vals[0], vals[1]],
            [vals[2], vals[3]],
            [vals[4], vals[5]],
            [vals[6], vals[7]],
        ])
    }
}

/// Solves for the homography taking each `src` corner onto its `dst` corner.
///
/// Points are Hartley-normalised before the 8x8 linear solve.
pub fn estimate_homography(src: &AnchorQuad, dst: &AnchorQuad) -> Result<Homography> {
    let (ts, s) = normalise(&src.corners);
    let (td, d) = normalise(&dst.corners);

    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = s[i];
        let [u, v] = d[i];
        let r = 2 * i;
        a.set_row(r, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Geometry("homography system is singular".into()))?;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Geometry("homography system is singular".into()));
    }
    let hn = SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Geometry("degenerate destination quad".into()))?;
    let full = td_inv * hn * ts;
    let m = [
        [full[(0, 0)], full[(0, 1)], full[(0, 2)]],
        [full[(1, 0)], full[(1, 1)], full[(1, 2)]],
        [full[(2, 0)], full[(2, 1)], full[(2, 2)]],
    ];
    Homography::new(m)
}

fn normalise(points: &[Point; 4]) -> (SMatrix<f64, 3, 3>, [Point; 4]) {
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = SMatrix::<f64, 3, 3>::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let mapped = points.map(|p| [s * (p[0] - cx), s * (p[1] - cy)]);
    (t, mapped)
}

#[derive(Clone, Copy, Debug)]
struct CoveredPixel {
    pixel: u32,
    len: u8,
    taps: [(u32, f64); 4],
}

/// The inverse-warp of a masked pattern into an output frame, stored as a
/// sparse linear map from pattern pixels to covered output pixels.
///
/// Taps whose weight is zero, including every masked-out source pixel, are
/// dropped, so masked-out pattern values are never read.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    out_height: usize,
    out_width: usize,
    src_height: usize,
    src_width: usize,
    covered: Vec<CoveredPixel>,
}

impl WarpPlan {
    /// `h` maps pattern coordinates to output coordinates.
    pub fn build(
        h: &Homography,
        src_height: usize,
        src_width: usize,
        mask: &[u8],
        out_height: usize,
        out_width: usize,
    ) -> Result<Self> {
        if out_height == 0 || out_width == 0 {
            return Err(Error::InvalidArgument("warp output size must be positive".into()));
        }
        if mask.len() != src_height * src_width {
            return Err(Error::InvalidArgument("mask does not match pattern size".into()));
        }
        let inv = h.inverse()?;
        let max_x = src_width as f64 - 0.5;
        let max_y = src_height as f64 - 0.5;
        let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
        let mut covered = Vec::new();
        for y in 0..out_height {
            for x in 0..out_width {
                let Some([sx, sy]) = inv.apply([x as f64, y as f64]) else {
                    continue;
                };
                if !(sx >= -0.5 && sx <= max_x && sy >= -0.5 && sy <= max_y) {
                    continue;
                }
                let nx = clamp(sx.round(), src_width);
                let ny = clamp(sy.round(), src_height);
                if mask[ny * src_width + nx] == 0 {
                    continue;
                }
                let x0f = sx.floor();
                let y0f = sy.floor();
                let fx = sx - x0f;
                let fy = sy - y0f;
                let xs = [clamp(x0f, src_width), clamp(x0f + 1.0, src_width)];
                let ys = [clamp(y0f, src_height), clamp(y0f + 1.0, src_height)];
                let wx = [1.0 - fx, fx];
                let wy = [1.0 - fy, fy];
                let mut px = CoveredPixel {
                    pixel: (y * out_width + x) as u32,
                    len: 0,
                    taps: [(0, 0.0); 4],
                };
                for j in 0..2 {
                    for i in 0..2 {
                        let idx = ys[j] * src_width + xs[i];
                        let w = wy[j] * wx[i] * mask[idx] as f64;
                        if w != 0.0 {
                            px.taps[px.len as usize] = (idx as u32, w);
                            px.len += 1;
                        }
                    }
                }
                covered.push(px);
            }
        }
        Ok(Self {
            out_height,
            out_width,
            src_height,
            src_width,
            covered,
        })
    }

    /// Plan placing a pattern of the given size into `dst` inside a `width x height` frame.
    pub fn for_quad(mask: &Mask, dst: &AnchorQuad, out_height: usize, out_width: usize) -> Result<Self> {
        let src = AnchorQuad::pattern_frame(mask.height(), mask.width())?;
        let h = estimate_homography(&src, dst)?;
        Self::build(&h, mask.height(), mask.width(), mask.values(), out_height, out_width)
    }

    pub fn out_height(&self) -> usize {
        self.out_height
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn covered_count(&self) -> usize {
        self.covered.len()
    }

    fn check_source(&self, pattern: &Raster) -> Result<()> {
        if pattern.height() != self.src_height || pattern.width() != self.src_width {
            return Err(Error::InvalidArgument(format!(
                "pattern is {}x{}, plan expects {}x{}",
                pattern.height(),
                pattern.width(),
                self.src_height,
                self.src_width
            )));
        }
        Ok(())
    }

    /// Single-channel coverage raster with values exactly 0 or 1.
    pub fn coverage(&self) -> Raster {
        let mut cov = Raster::zeros(self.out_height, self.out_width, 1);
        for px in &self.covered {
            cov.data_mut()[px.pixel as usize] = 1.0;
        }
        cov
    }

    /// The warped pattern, zero outside coverage.
    pub fn apply(&self, pattern: &Raster) -> Result<Raster> {
        self.check_source(pattern)?;
        let ch = pattern.channels();
        let mut out = Raster::zeros(self.out_height, self.out_width, ch);
        for px in &self.covered {
            self.write_pixel(px, pattern, &mut out.data_mut()[px.pixel as usize * ch..][..ch]);
        }
        Ok(out)
    }

    #[inline]
    fn write_pixel(&self, px: &CoveredPixel, pattern: &Raster, dst: &mut [f64]) {
        let ch = pattern.channels();
        let src = pattern.data();
        for (c, d) in dst.iter_mut().enumerate() {
            let mut v = 0.0;
            for &(idx, w) in &px.taps[..px.len as usize] {
                v += w * src[idx as usize * ch + c];
            }
            *d = v;
        }
    }

    /// Replaces covered pixels of `base` with the warped pattern.
    pub fn overlay(&self, base: &Image, pattern: &Raster) -> Result<Image> {
        self.check_source(pattern)?;
        if base.height() != self.out_height || base.width() != self.out_width {
            return Err(Error::InvalidArgument("overlay target size differs from plan".into()));
        }
        if pattern.channels() != 3 {
            return Err(Error::InvalidArgument("overlay expects a 3-channel pattern".into()));
        }
        let mut out = base.raster().clone();
        for px in &self.covered {
            let i = px.pixel as usize * 3;
            self.write_pixel(px, pattern, &mut out.data_mut()[i..i + 3]);
        }
        for px in &self.covered {
            let i = px.pixel as usize * 3;
            for v in &mut out.data_mut()[i..i + 3] {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::InvalidArgument(format!(
                        "overlaid value {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Image::from_raster_unchecked(out))
    }

    /// Pulls a gradient on the overlaid image back onto the pattern.
    /// Only covered pixels carry gradient to the pattern.
    pub fn accumulate_gradient(&self, grad_image: &Raster, grad_pattern: &mut Raster) -> Result<()> {
        self.check_source(grad_pattern)?;
        let ch = grad_pattern.channels();
        if grad_image.height() != self.out_height
            || grad_image.width() != self.out_width
            || grad_image.channels() != ch
        {
            return Err(Error::InvalidArgument("gradient raster does not match plan".into()));
        }
        let g = grad_image.data();
        let gp = grad_pattern.data_mut();
        for px in &self.covered {
            let base = px.pixel as usize * ch;
            for &(idx, w) in &px.taps[..px.len as usize] {
                let dst = idx as usize * ch;
                for c in 0..ch {
                    gp[dst + c] += w * g[base + c];
                }
            }
        }
        Ok(())
    }
}

/// Warps `M * p` through `h` into an `out_h x out_w` frame, returning the
/// warped raster and its binary coverage.
pub fn warp_pattern(p: &Pattern, m: &Mask, h: &Homography, out_h: usize, out_w: usize) -> Result<(Raster, Raster)> {
    if m.height() != p.height() || m.width() != p.width() {
        return Err(Error::InvalidArgument("mask and pattern sizes differ".into()));
    }
    let plan = WarpPlan::build(h, p.height(), p.width(), m.values(), out_h, out_w)?;
    Ok((plan.apply(p.raster())?, plan.coverage()))
}

/// Hard replacement of `x` by `warped` wherever `coverage` is set.
pub fn overlay(x: &Image, warped: &Raster, coverage: &Raster) -> Result<Image> {
    if warped.height() != x.height() || warped.width() != x.width() || warped.channels() != 3 {
        return Err(Error::InvalidArgument("warped raster does not match image".into()));
    }
    if coverage.height() != x.height() || coverage.width() != x.width() || coverage.channels() != 1 {
        return Err(Error::InvalidArgument("coverage raster does not match image".into()));
    }
    let mut out = x.raster().clone();
    for (i, cov) in coverage.data().iter().enumerate() {
        if *cov >= 0.5 {
            for c in 0..3 {
                let v = warped.data()[i * 3 + c];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("warped value {v} outside [0, 1]")));
                }
                out.data_mut()[i * 3 + c] = v;
            }
        }
    }
    Ok(Image::from_raster_unchecked(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ColorInterval;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_square() -> AnchorQuad {
        AnchorQuad::rect(0.0, 0.0, 2.0, 2.0).unwrap()
    }

    #[test]
    fn identity_and_translation_estimates() {
        let h = estimate_homography(&unit_square(), &unit_square()).unwrap();
        for (r, row) in h.matrix().iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-9, "{h:?}");
            }
        }
        let shifted = unit_square().map(|p| [p[0] + 5.0, p[1] + 3.0]).unwrap();
        let t = estimate_homography(&unit_square(), &shifted).unwrap();
        let m = t.matrix();
        assert!((m[0][2] - 5.0).abs() < 1e-9 && (m[1][2] - 3.0).abs() < 1e-9);
        assert!((m[0][0] - 1.0).abs() < 1e-9 && (m[2][0]).abs() < 1e-9);
    }

    #[test]
    fn generic_quad_maps_corners() {
        let src = AnchorQuad::pattern_frame(12, 12).unwrap();
        let dst = AnchorQuad::unbounded([[3.2, 10.1], [12.7, 9.4], [13.1, 21.0], [2.6, 20.2]]).unwrap();
        let h = estimate_homography(&src, &dst).unwrap();
        for i in 0..4 {
            let p = h.apply(src.corners()[i]).unwrap();
            let d = dst.corners()[i];
            assert!(((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)).sqrt() < 1e-6);
        }
    }

    #[test]
    fn degenerate_quads_rejected() {
        assert!(AnchorQuad::unbounded([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).is_err());
        assert!(AnchorQuad::unbounded([[0.0, 0.0], [4.0, 0.0], [8.0, 0.0], [0.0, 4.0]]).is_err());
        // self-intersecting bow-tie
        assert!(AnchorQuad::unbounded([[0.0, 0.0], [4.0, 4.0], [4.0, 0.0], [0.0, 4.0]]).is_err());
        assert!(AnchorQuad::new([[0.0, 0.0], [20.0, 0.0], [20.0, 4.0], [0.0, 4.0]], 16, 32).is_err());
    }

    #[test]
    fn singular_homography_rejected() {
        assert!(Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn sidecar_line_round_trip() {
        let q = AnchorQuad::unbounded([[3.25, 10.0], [12.5, 9.0], [13.0, 21.0], [2.0, 20.0]]).unwrap();
        let line = q.to_sidecar_line();
        assert_eq!(line.split(',').count(), 8);
        assert_eq!(AnchorQuad::parse_sidecar_line(&line).unwrap(), q);
        assert!(AnchorQuad::parse_sidecar_line("1,2,3").is_err());
    }

    fn random_pattern(seed: u64, h: usize, w: usize) -> Pattern {
        let mut r = rng(seed);
        Pattern::new(Raster::from_fn(h, w, 3, |_, _, _| r.random()), ColorInterval::uniform(0.0, 1.0)).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let p = random_pattern(1, 8, 8);
        let m = Mask::full(8, 8).unwrap();
        let (warped, cov) = warp_pattern(&p, &m, &Homography::identity(), 8, 8).unwrap();
        assert_eq!(warped.data(), p.raster().data());
        assert!(cov.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn empty_mask_covers_nothing() {
        let h = estimate_homography(
            &AnchorQuad::pattern_frame(8, 8).unwrap(),
            &AnchorQuad::unbounded([[1.0, 2.0], [9.0, 1.0], [10.0, 12.0], [0.5, 11.0]]).unwrap(),
        )
        .unwrap();
        for hom in [Homography::identity(), h] {
            let plan = WarpPlan::build(&hom, 8, 8, &[0; 64], 16, 16).unwrap();
            assert_eq!(plan.covered_count(), 0);
            assert!(plan.coverage().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn scaling_warp_matches_per_pixel_oracle() {
        let checker = Raster::from_fn(4, 4, 3, |y, x, c| if (x + y) % 2 == 0 { 0.9 - 0.1 * c as f64 } else { 0.1 });
        let p = Pattern::new(checker.clone(), ColorInterval::uniform(0.0, 1.0)).unwrap();
        let m = Mask::full(4, 4).unwrap();
        let h = Homography::scaling(2.0, 2.0).unwrap();
        let (warped, cov) = warp_pattern(&p, &m, &h, 8, 8).unwrap();

        // naive inverse mapping: src = dst / 2, bilinear with edge clamping
        for y in 0..8 {
            for x in 0..8 {
                let sx = x as f64 / 2.0;
                let sy = y as f64 / 2.0;
                let inb = sx <= 3.5 && sy <= 3.5;
                assert_eq!(cov.get(y, x, 0), inb as u8 as f64);
                for c in 0..3 {
                    let x0 = sx.floor() as usize;
                    let y0 = sy.floor() as usize;
                    let x1 = (x0 + 1).min(3);
                    let y1 = (y0 + 1).min(3);
                    let fx = sx - x0 as f64;
                    let fy = sy - y0 as f64;
                    let v = checker.get(y0, x0, c) * (1.0 - fx) * (1.0 - fy)
                        + checker.get(y0, x1, c) * fx * (1.0 - fy)
                        + checker.get(y1, x0, c) * (1.0 - fx) * fy
                        + checker.get(y1, x1, c) * fx * fy;
                    let expect = if inb { v } else { 0.0 };
                    assert!((warped.get(y, x, c) - expect).abs() < 1e-6, "({y},{x},{c})");
                }
            }
        }
    }

    #[test]
    fn round_trip_warp_of_smooth_pattern() {
        let smooth = Raster::from_fn(24, 24, 3, |y, x, c| {
            0.5 + 0.3 * ((x as f64 * 0.2 + c as f64).sin() * (y as f64 * 0.15).cos())
        });
        let p = Pattern::new(smooth.clone(), ColorInterval::uniform(0.0, 1.0)).unwrap();
        let m = Mask::full(24, 24).unwrap();
        let frame = AnchorQuad::pattern_frame(24, 24).unwrap();
        let dst = AnchorQuad::unbounded([[1.0, 0.5], [25.0, 2.0], [26.0, 27.0], [0.0, 25.0]]).unwrap();
        let h = estimate_homography(&frame, &dst).unwrap();
        let (fwd, _) = warp_pattern(&p, &m, &h, 28, 28).unwrap();
        let fwd_p = Pattern::new(fwd, ColorInterval::uniform(0.0, 1.0)).unwrap();
        let back_plan = WarpPlan::build(&h.inverse().unwrap(), 28, 28, &[1; 28 * 28], 24, 24).unwrap();
        let back = back_plan.apply(fwd_p.raster()).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for y in 3..21 {
            for x in 3..21 {
                for c in 0..3 {
                    err += (back.get(y, x, c) - smooth.get(y, x, c)).abs();
                    n += 1;
                }
            }
        }
        assert!(err / n as f64 <= 0.02, "mean abs error {}", err / n as f64);
    }

    #[test]
    fn overlay_no_op_full_and_partial() {
        let mut r = rng(5);
        let x = Image::from_fn(10, 10, |_, _| [r.random(), r.random(), r.random()]).unwrap();
        let warped = Raster::from_fn(10, 10, 3, |_, _, _| r.random());
        let none = Raster::zeros(10, 10, 1);
        assert_eq!(overlay(&x, &warped, &none).unwrap(), x);
        let all = Raster::filled(10, 10, 1, 1.0);
        assert_eq!(overlay(&x, &warped, &all).unwrap().data(), warped.data());
        let half = Raster::from_fn(10, 10, 1, |_, col, _| (col < 5) as u8 as f64);
        let out = overlay(&x, &warped, &half).unwrap();
        for y in 0..10 {
            for col in 0..10 {
                for c in 0..3 {
                    let expect = if col < 5 { warped.get(y, col, c) } else { x.raster().get(y, col, c) };
                    assert_eq!(out.raster().get(y, col, c).to_bits(), expect.to_bits());
                }
            }
        }
        assert!(overlay(&x, &Raster::zeros(9, 10, 3), &none).is_err());
    }

    #[test]
    fn overlay_is_affine_in_pattern() {
        let mut r = rng(9);
        let x = Image::from_fn(20, 16, |_, _| [r.random(), r.random(), r.random()]).unwrap();
        let m = Mask::from_shape(crate::imagecore::MaskShape::Ellipse, 8, 8).unwrap();
        let dst = AnchorQuad::new([[4.0, 6.0], [12.0, 6.5], [12.5, 15.0], [3.5, 14.0]], 16, 20).unwrap();
        let plan = WarpPlan::for_quad(&m, &dst, 20, 16).unwrap();
        let zero = Raster::zeros(8, 8, 3);
        let a = Raster::from_fn(8, 8, 3, |_, _, _| 0.5 * r.random::<f64>());
        let b = Raster::from_fn(8, 8, 3, |_, _, _| 0.5 * r.random::<f64>());
        let sum = Raster::from_vec(8, 8, 3, a.data().iter().zip(b.data()).map(|(u, v)| u + v).collect()).unwrap();
        let f0 = plan.overlay(&x, &zero).unwrap();
        let fa = plan.overlay(&x, &a).unwrap();
        let fb = plan.overlay(&x, &b).unwrap();
        let fs = plan.overlay(&x, &sum).unwrap();
        for i in 0..f0.data().len() {
            let lhs = fs.data()[i] - f0.data()[i];
            let rhs = (fa.data()[i] - f0.data()[i]) + (fb.data()[i] - f0.data()[i]);
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_out_pixels_never_reach_the_image() {
        let mut r = rng(11);
        let x = Image::from_fn(20, 16, |_, _| [r.random(), r.random(), r.random()]).unwrap();
        let m = Mask::from_shape(crate::imagecore::MaskShape::Diamond, 8, 8).unwrap();
        let dst = AnchorQuad::new([[3.0, 5.0], [13.0, 5.5], [12.5, 16.0], [3.5, 15.0]], 16, 20).unwrap();
        let plan = WarpPlan::for_quad(&m, &dst, 20, 16).unwrap();
        let a = Raster::from_fn(8, 8, 3, |_, _, _| r.random::<f64>());
        let mut b = a.clone();
        for y in 0..8 {
            for xx in 0..8 {
                if m.get(y, xx) == 0 {
                    for c in 0..3 {
                        b.set(y, xx, c, if (y + xx) % 2 == 0 { 1e6 } else { f64::NAN });
                    }
                }
            }
        }
        let ia = plan.overlay(&x, &a).unwrap();
        let ib = plan.overlay(&x, &b).unwrap();
        assert!(ia.data().iter().zip(ib.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn gradient_pullback_is_transpose_of_apply() {
        let mut r = rng(13);
        let m = Mask::from_shape(crate::imagecore::MaskShape::Ellipse, 6, 6).unwrap();
        let dst = AnchorQuad::new([[2.0, 3.0], [10.0, 2.5], [11.0, 12.0], [1.5, 11.0]], 14, 16).unwrap();
        let plan = WarpPlan::for_quad(&m, &dst, 16, 14).unwrap();
        let p = Raster::from_fn(6, 6, 3, |_, _, _| r.random::<f64>());
        let g = Raster::from_fn(16, 14, 3, |_, _, _| r.random::<f64>() - 0.5);
        let warped = plan.apply(&p).unwrap();
        let lhs: f64 = warped.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let mut gp = Raster::zeros(6, 6, 3);
        plan.accumulate_gradient(&g, &mut gp).unwrap();
        let rhs: f64 = gp.data().iter().zip(p.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
