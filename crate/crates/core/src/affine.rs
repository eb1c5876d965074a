//! Affine warps about the image centre, applied by inverse mapping.

use rand::Rng;
use refnet_tensor::{Scalar, SpatialMap, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{BinaryMask, Image, SoftMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Rotation/scale/flip part `linear` acting on centred `(x, y)` pixel
/// coordinates, followed by a shift of `translation` image sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

/// Parameters of a similarity transform with optional horizontal mirror.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub flip: bool,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn new(linear: [[f64; 2]; 2], translation: [f64; 2]) -> Result<Self> {
        let t = Self { linear, translation };
        t.check()?;
        Ok(t)
    }

    /// Mirror first, then scale and rotate, then translate.
    pub fn from_params(p: AffineParams) -> Result<Self> {
        let (s, c) = p.rotation_deg.to_radians().sin_cos();
        let f = if p.flip { -1.0 } else { 1.0 };
        Self::new(
            [[p.scale * c * f, -p.scale * s], [p.scale * s * f, p.scale * c]],
            [p.translate_x, p.translate_y],
        )
    }

    pub fn det(&self) -> f64 {
        self.linear[0][0] * self.linear[1][1] - self.linear[0][1] * self.linear[1][0]
    }

    fn check(&self) -> Result<()> {
        let finite = self.linear.iter().flatten().chain(&self.translation).all(|v| v.is_finite());
        if !finite || self.det().abs() <= 1e-6 {
            return Err(invalid("affine", format!("singular or non-finite transform {self:?}")));
        }
        Ok(())
    }

    /// Forward `2 x 3` matrix in pixel coordinates of an `h x w` image.
    pub fn matrix(&self, h: usize, w: usize) -> [[f64; 3]; 2] {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let l = self.linear;
        let tx = cx - l[0][0] * cx - l[0][1] * cy + self.translation[0] * w as f64;
        let ty = cy - l[1][0] * cx - l[1][1] * cy + self.translation[1] * h as f64;
        [[l[0][0], l[0][1], tx], [l[1][0], l[1][1], ty]]
    }

    /// Resampling operator for an `h x w` grid: `dst = map(src)`.
    pub fn spatial_map<T: Scalar>(&self, h: usize, w: usize, mode: Interpolation) -> Result<SpatialMap<T>> {
        self.check()?;
        let [[a, b, tx], [c, d, ty]] = self.matrix(h, w);
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let mut entries = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let dst = (y * w + x) as u32;
                let (u, v) = (x as f64 - tx, y as f64 - ty);
                let sx = inv[0][0] * u + inv[0][1] * v;
                let sy = inv[1][0] * u + inv[1][1] * v;
                match mode {
                    Interpolation::Nearest => {
                        let (ix, iy) = (sx.round(), sy.round());
                        if ix >= 0.0 && iy >= 0.0 && ix < w as f64 && iy < h as f64 {
                            entries.push((dst, (iy as usize * w + ix as usize) as u32, T::one()));
                        }
                    }
                    Interpolation::Bilinear => {
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let (fx, fy) = (sx - x0, sy - y0);
                        for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                            for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                                let (px, py) = (x0 + ox, y0 + oy);
                                let weight = wx * wy;
                                if weight != 0.0 && px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64 {
                                    entries.push((dst, (py as usize * w + px as usize) as u32, T::lit(weight)));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(SpatialMap {
            src_hw: (h, w),
            dst_hw: (h, w),
            entries,
        })
    }
}

/// Sampling ranges for random transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    pub max_scale_delta: f64,
    pub max_translation: f64,
    pub flip_prob: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            max_scale_delta: 0.2,
            max_translation: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl AffineRanges {
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_scale_delta: 0.0,
            max_translation: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.max_rotation_deg, self.max_scale_delta, self.max_translation];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("affine ranges", format!("ranges must be finite and non-negative: {self:?}")));
        }
        if self.max_scale_delta >= 1.0 {
            return Err(invalid("affine ranges", "scale delta must be below 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("affine ranges", format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.random_range(-half..=half)
    }
}

pub fn sample_affine_params(rng: &mut impl Rng, ranges: &AffineRanges) -> AffineParams {
    AffineParams {
        rotation_deg: symmetric(rng, ranges.max_rotation_deg),
        scale: 1.0 + symmetric(rng, ranges.max_scale_delta),
        translate_x: symmetric(rng, ranges.max_translation),
        translate_y: symmetric(rng, ranges.max_translation),
        flip: ranges.flip_prob > 0.0 && rng.random_bool(ranges.flip_prob),
    }
}

pub fn sample_affine(rng: &mut impl Rng, ranges: &AffineRanges) -> AffineTransform {
    AffineTransform::from_params(sample_affine_params(rng, ranges)).expect("scale delta below 1 keeps the transform invertible")
}

fn warp_planes(data: &[f32], planes: usize, h: usize, w: usize, map: &SpatialMap<f32>) -> Vec<f32> {
    let t = Tensor::new(vec![planes, h, w], data.to_vec()).expect("plane layout");
    t.spatial_map(map, false).expect("map matches grid").into_data()
}

pub fn apply_affine_image(x: &Image, a: &AffineTransform, mode: Interpolation) -> Result<Image> {
    let (h, w) = x.hw();
    let map = a.spatial_map(h, w, mode)?;
    let data = warp_planes(x.data(), x.channels(), h, w, &map)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_planar_unchecked(h, w, x.channels(), data))
}

/// Nearest-neighbour warp, so the result stays binary.
pub fn apply_affine_mask(m: &BinaryMask, a: &AffineTransform) -> Result<BinaryMask> {
    let (h, w) = m.hw();
    let map = a.spatial_map(h, w, Interpolation::Nearest)?;
    BinaryMask::from_f32(h, w, &warp_planes(&m.to_f32(), 1, h, w, &map))
}

pub fn apply_affine_soft(m: &SoftMask, a: &AffineTransform, mode: Interpolation) -> Result<SoftMask> {
    let (h, w) = m.hw();
    let map = a.spatial_map(h, w, mode)?;
    let data = warp_planes(m.data(), 1, h, w, &map)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    SoftMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rot(deg: f64) -> AffineTransform {
        AffineTransform::from_params(AffineParams {
            rotation_deg: deg,
            scale: 1.0,
            ..Default::default()
        })
        .unwrap()
    }

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |c, y, x| ((c * 31 + y * 7 + x * 13) % 17) as f32 / 16.0)
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = textured(9, 7);
        for mode in [Interpolation::Bilinear, Interpolation::Nearest] {
            assert_eq!(apply_affine_image(&img, &AffineTransform::identity(), mode).unwrap(), img);
        }
        let m = BinaryMask::from_fn(9, 7, |y, x| (x * y) % 3 == 0);
        assert_eq!(apply_affine_mask(&m, &AffineTransform::identity()).unwrap(), m);
    }

    #[test]
    fn half_turn_twice_restores() {
        for (h, w) in [(8, 8), (7, 9)] {
            let img = textured(h, w);
            let once = apply_affine_image(&img, &rot(180.0), Interpolation::Nearest).unwrap();
            assert_ne!(once, img);
            assert_eq!(apply_affine_image(&once, &rot(180.0), Interpolation::Nearest).unwrap(), img);
        }
    }

    #[test]
    fn quarter_turn_moves_pixel() {
        // centred coords of (y=1, x=3) in 5x5 are (x=1, y=-1); rotating by 90
        // degrees gives (x=1, y=1), i.e. pixel (y=3, x=3)
        let m = BinaryMask::from_fn(5, 5, |y, x| y == 1 && x == 3);
        let out = apply_affine_mask(&m, &rot(90.0)).unwrap();
        assert_eq!(out, BinaryMask::from_fn(5, 5, |y, x| y == 3 && x == 3));
    }

    #[test]
    fn translation_fills_zero() {
        let m = BinaryMask::ones(4, 4);
        let t = AffineTransform::new([[1.0, 0.0], [0.0, 1.0]], [0.25, 0.0]).unwrap();
        let out = apply_affine_mask(&m, &t).unwrap();
        assert_eq!(out, BinaryMask::from_fn(4, 4, |_, x| x >= 1));
    }

    #[test]
    fn singular_rejected() {
        assert!(AffineTransform::new([[1.0, 2.0], [0.5, 1.0]], [0.0, 0.0]).is_err());
        assert!(AffineTransform::from_params(AffineParams::default()).is_err());
    }

    #[test]
    fn zero_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_affine(&mut rng, &AffineRanges::none()), AffineTransform::identity());
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let ranges = AffineRanges::default();
        let a = sample_affine(&mut ChaCha8Rng::seed_from_u64(9), &ranges);
        let b = sample_affine(&mut ChaCha8Rng::seed_from_u64(9), &ranges);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for _ in 0..10_000 {
            let p = sample_affine_params(&mut rng, &ranges);
            lo = lo.min(p.rotation_deg);
            hi = hi.max(p.rotation_deg);
            assert!((0.8..=1.2).contains(&p.scale));
        }
        assert!(lo >= -30.0 && hi <= 30.0);
        assert!(lo < -29.0 && hi > 29.0);
    }
}
