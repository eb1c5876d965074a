//! Boundary critics and the triplets they judge.
//!
//! A triplet stacks `(image, mask, mask * image)` along the channel axis. The
//! outer critic sees the object mask, the inner critic its complement.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refnet_tensor::nn::{conv2d, global_avg_pool};
use refnet_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::convert::masks_to_tensor;
use crate::error::{invalid, Error, Result};
use crate::image::BinaryMask;
use crate::model::SLOPE;
use crate::morphology::{dilate, erode};
use crate::params::{he_normal, leaky_gain, Bound, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Outer,
    Inner,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Outer => "outer",
            Side::Inner => "inner",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Fake,
    Real,
    Pseudo,
    Interpolated,
}

/// A batch of triplets: `image` is `[C, N, H, W]`, `mask` `[1, N, H, W]`.
#[derive(Debug, Clone)]
pub struct Triplet<T: Scalar> {
    pub image: Var<T>,
    pub mask: Var<T>,
    pub masked_image: Var<T>,
    pub side: Side,
    pub provenance: Provenance,
}

impl<T: Scalar> Triplet<T> {
    /// Channel stack `[2C + 1, N, H, W]` fed to a critic.
    pub fn stacked(&self) -> Var<T> {
        Var::concat0(&[&self.image, &self.mask, &self.masked_image])
    }

    pub fn batch(&self) -> usize {
        self.image.shape()[1]
    }

    fn build(image: &Var<T>, mask: &Var<T>, side: Side, provenance: Provenance) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 4 || ms.len() != 4 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::ShapeMismatch {
                op: "triplet",
                lhs: is.to_vec(),
                rhs: ms.to_vec(),
            });
        }
        Ok(Self {
            image: image.clone(),
            mask: mask.clone(),
            masked_image: image.mul_b(mask),
            side,
            provenance,
        })
    }
}

fn complement<T: Scalar>(m: &Var<T>) -> Var<T> {
    m.neg().add_scalar(T::one())
}

/// Triplet from predicted soft masks; gradients flow into `soft`.
pub fn make_fake_triplet<T: Scalar>(image: &Var<T>, soft: &Var<T>, side: Side) -> Result<Triplet<T>> {
    let mask = match side {
        Side::Outer => soft.clone(),
        Side::Inner => complement(soft),
    };
    Triplet::build(image, &mask, side, Provenance::Fake)
}

/// Triplet from ground-truth masks, which must be exactly binary.
pub fn make_real_triplet<T: Scalar>(image: &Var<T>, mask: &Var<T>, side: Side) -> Result<Triplet<T>> {
    if let Some(v) = mask.value().data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(invalid("make_real_triplet", format!("mask value {v} is not binary")));
    }
    let image = image.detach();
    let mask = match side {
        Side::Outer => mask.detach(),
        Side::Inner => Var::constant(mask.value().map(|v| T::one() - v)),
    };
    Triplet::build(&image, &mask, side, Provenance::Real)
}

/// Inclusive range of dilation radii for pseudo triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusRange {
    pub min: usize,
    pub max: usize,
}

impl RadiusRange {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min > max {
            return Err(invalid("radius range", format!("min {min} exceeds max {max}")));
        }
        Ok(Self { min, max })
    }

    /// `[11, 55]` at 128 pixels, scaled linearly to `size`, at least 1.
    pub fn scaled_to(size: usize) -> Self {
        let scale = |r: f64| ((r * size as f64 / 128.0).round() as usize).max(1);
        Self {
            min: scale(11.0),
            max: scale(55.0),
        }
    }

    pub fn contains(&self, r: usize) -> bool {
        (self.min..=self.max).contains(&r)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

/// How pseudo masks are grown from ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMorphology {
    #[default]
    Dilate,
    /// Shrinks instead, giving a band on the other side of the true edge.
    Erode,
}

/// Dilated ground truth (outer) or dilated complement (inner); eroded with [`PseudoMorphology::Erode`].
pub fn pseudo_mask(mask: &BinaryMask, r: usize, side: Side, op: PseudoMorphology) -> BinaryMask {
    let base = match side {
        Side::Outer => mask.clone(),
        Side::Inner => mask.complement(),
    };
    match op {
        PseudoMorphology::Dilate => dilate(&base, r),
        PseudoMorphology::Erode => erode(&base, r),
    }
}

/// Pseudo triplets with one radius per sample, each checked against `range`.
pub fn make_pseudo_triplet<T: Scalar>(
    image: &Var<T>,
    masks: &[BinaryMask],
    radii: &[usize],
    range: &RadiusRange,
    side: Side,
    op: PseudoMorphology,
) -> Result<Triplet<T>> {
    if masks.len() != radii.len() {
        return Err(invalid("make_pseudo_triplet", format!("{} masks but {} radii", masks.len(), radii.len())));
    }
    if let Some(r) = radii.iter().find(|r| !range.contains(**r)) {
        return Err(invalid(
            "make_pseudo_triplet",
            format!("radius {r} outside [{}, {}]", range.min, range.max),
        ));
    }
    let pseudo: Vec<BinaryMask> = masks.iter().zip(radii).map(|(m, &r)| pseudo_mask(m, r, side, op)).collect();
    let refs: Vec<&BinaryMask> = pseudo.iter().collect();
    let mask = Var::constant(masks_to_tensor(&refs)?);
    Triplet::build(&image.detach(), &mask, side, Provenance::Pseudo)
}

/// Same as [`make_pseudo_triplet`] with radii drawn from `range`.
pub fn sample_pseudo_triplet<T: Scalar>(
    image: &Var<T>,
    masks: &[BinaryMask],
    range: &RadiusRange,
    side: Side,
    op: PseudoMorphology,
    rng: &mut impl Rng,
) -> Result<Triplet<T>> {
    let radii: Vec<usize> = masks.iter().map(|_| range.sample(rng)).collect();
    make_pseudo_triplet(image, masks, &radii, range, side, op)
}

/// Per-sample convex combination `eps * e + (1 - eps) * a` of every component.
pub fn interpolate_triplets<T: Scalar>(e: &Triplet<T>, a: &Triplet<T>, eps: &[T]) -> Result<Triplet<T>> {
    if e.side != a.side {
        return Err(invalid("interpolate_triplets", format!("sides differ: {} vs {}", e.side, a.side)));
    }
    if e.image.shape() != a.image.shape() || e.mask.shape() != a.mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate_triplets",
            lhs: e.image.shape().to_vec(),
            rhs: a.image.shape().to_vec(),
        });
    }
    let n = e.batch();
    if eps.len() != n {
        return Err(invalid("interpolate_triplets", format!("{} weights for {n} samples", eps.len())));
    }
    if let Some(v) = eps.iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
        return Err(invalid("interpolate_triplets", format!("weight {v} outside [0, 1]")));
    }
    let w = Var::constant(Tensor::new(vec![1, n, 1, 1], eps.to_vec())?);
    let w_rest = Var::constant(w.value().map(|v| T::one() - v));
    let mix = |x: &Var<T>, y: &Var<T>| x.mul_b(&w).add(&y.mul_b(&w_rest));
    Ok(Triplet {
        image: mix(&e.image, &a.image),
        mask: mix(&e.mask, &a.mask),
        masked_image: mix(&e.masked_image, &a.masked_image),
        side: e.side,
        provenance: Provenance::Interpolated,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub image_channels: usize,
    pub base_width: usize,
    /// Start with a zero final layer so every score is 0.
    pub zero_init_final: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_width: 16,
            zero_init_final: false,
        }
    }
}

impl fmt::Display for CriticConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "image_channels={} base_width={} zero_init_final={}",
            self.image_channels, self.base_width, self.zero_init_final
        )
    }
}

impl CriticConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.image_channels + 1
    }

    fn widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [self.input_channels(), w, 2 * w, 4 * w]
    }
}

/// Three stride-2 3x3 convolutions with leaky ReLU, a 3x3 convolution to one
/// channel, then a spatial mean. No normalization and no output squashing.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic<T: Scalar> {
    pub config: CriticConfig,
    pub params: ParamSet<T>,
}

pub fn init_critic<T: Scalar>(config: &CriticConfig, seed: u64) -> Result<Critic<T>> {
    if config.image_channels == 0 || config.base_width == 0 {
        return Err(invalid("critic", format!("channel counts must be positive: {config}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = config.widths();
    let mut p = ParamSet::default();
    for i in 0..3 {
        let fan_in = w[i] * 9;
        p.push(format!("c{i}.w"), he_normal(&mut rng, vec![w[i + 1], w[i], 3, 3], fan_in, leaky_gain(SLOPE)));
        p.push(format!("c{i}.b"), Tensor::zeros(vec![w[i + 1]]));
    }
    let last = if config.zero_init_final {
        Tensor::zeros(vec![1, w[3], 3, 3])
    } else {
        he_normal(&mut rng, vec![1, w[3], 3, 3], w[3] * 9, 1.0)
    };
    p.push("c3.w", last);
    p.push("c3.b", Tensor::zeros(vec![1]));
    Ok(Critic {
        config: config.clone(),
        params: p,
    })
}

pub struct CriticGraph<'a, T: Scalar> {
    config: &'a CriticConfig,
    params: Bound<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn bind(&self, trainable: bool) -> CriticGraph<'_, T> {
        CriticGraph {
            config: &self.config,
            params: self.params.bind(trainable),
        }
    }
}

impl<T: Scalar> CriticGraph<'_, T> {
    pub fn params(&self) -> &Bound<T> {
        &self.params
    }

    /// Scores `[N]` for a stacked triplet batch `[2C + 1, N, H, W]`.
    pub fn score_stacked(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.config.input_channels() || s[2] < 8 || s[3] < 8 {
            return Err(invalid(
                "critic_score",
                format!("expected [{}, N, H>=8, W>=8], got {s:?}", self.config.input_channels()),
            ));
        }
        let p = &self.params;
        let mut h = x.clone();
        for i in 0..3 {
            h = conv2d(&h, p.get(&format!("c{i}.w")), Some(p.get(&format!("c{i}.b"))), 2, 1).leaky_relu(T::lit(SLOPE));
        }
        let out = conv2d(&h, p.get("c3.w"), Some(p.get("c3.b")), 1, 1);
        Ok(global_avg_pool(&out).reshape(&[s[1]]))
    }

    pub fn score(&self, triplet: &Triplet<T>) -> Result<Var<T>> {
        self.score_stacked(&triplet.stacked())
    }
}

/// Scores of a frozen critic for a triplet batch.
pub fn critic_score<T: Scalar>(critic: &Critic<T>, triplet: &Triplet<T>) -> Result<Vec<T>> {
    let g = critic.bind(false);
    Ok(g.score(triplet)?.value().data().to_vec())
}
