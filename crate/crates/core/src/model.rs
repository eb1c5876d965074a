//! Two-branch segmentation network.
//!
//! One encoder embeds both the target image and the masked reference image.
//! The reference embedding is pooled to a vector (or kept as a map), tiled over
//! the target bottleneck and concatenated with it; a U-Net style decoder with
//! skips from the target branch predicts a one-channel soft mask.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refnet_tensor::nn::{conv2d, conv_transpose2d, global_avg_pool, group_norm};
use refnet_tensor::{no_grad, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::convert::{images_to_tensor, tensor_to_soft_masks};
use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, Image, SoftMask};
use crate::params::{he_normal, leaky_gain, Bound, ParamSet};

pub(crate) const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
/// Keeps predictions strictly inside (0, 1).
const OUTPUT_EPS: f64 = 1e-6;

/// How the reference embedding enters the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Global average of the reference bottleneck, tiled spatially.
    Pooled,
    /// Reference bottleneck map concatenated as is.
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 levels.
    pub depth: usize,
    /// Channel cap for deep levels.
    pub max_width: usize,
    pub norm_groups: usize,
    pub conditioning: Conditioning,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            depth: 4,
            max_width: 256,
            norm_groups: 4,
            conditioning: Conditioning::Pooled,
        }
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "in_channels={} base_width={} depth={} max_width={} norm_groups={} conditioning={:?}",
            self.in_channels, self.base_width, self.depth, self.max_width, self.norm_groups, self.conditioning
        )
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(invalid("arch", reason));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.in_channels == 0 || self.base_width == 0 || self.norm_groups == 0 {
            return bad(format!("channel counts must be positive: {self}"));
        }
        if self.max_width < self.base_width {
            return bad(format!("max_width {} below base_width {}", self.max_width, self.base_width));
        }
        if self.depth > 16 {
            return bad(format!("depth {} is unreasonably large", self.depth));
        }
        Ok(())
    }

    /// Channel width of each level, `0..=depth`.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|i| (self.base_width << i).min(self.max_width))
            .collect()
    }

    /// Spatial downsampling factor of the bottleneck.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
    }

    pub fn feature_dim(&self) -> usize {
        self.widths()[self.depth]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Target,
    Reference,
}

/// Bottleneck feature map of one image, `d` planes of `h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFeatures {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub source: FeatureSource,
}

/// Segmentation network parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct RefSegNet<T: Scalar> {
    pub arch: ArchConfig,
    pub params: ParamSet<T>,
}

fn conv_norm<T: Scalar>(rng: &mut ChaCha8Rng, p: &mut ParamSet<T>, name: &str, c_in: usize, c_out: usize, k: usize) {
    let gain = leaky_gain(SLOPE);
    p.push(format!("{name}.w"), he_normal(rng, vec![c_out, c_in, k, k], c_in * k * k, gain));
    p.push(format!("{name}.g"), Tensor::ones(vec![c_out]));
    p.push(format!("{name}.b"), Tensor::zeros(vec![c_out]));
}

pub fn init_model<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<RefSegNet<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = arch.widths();
    let d = arch.depth;
    let mut p = ParamSet::default();
    conv_norm(&mut rng, &mut p, "enc.0", arch.in_channels, w[0], 3);
    for i in 1..=d {
        conv_norm(&mut rng, &mut p, &format!("enc.{i}.down"), w[i - 1], w[i], 3);
        conv_norm(&mut rng, &mut p, &format!("enc.{i}.conv"), w[i], w[i], 3);
    }
    conv_norm(&mut rng, &mut p, "dec.fuse", 3 * w[d], w[d], 1);
    for i in (1..=d).rev() {
        p.push(format!("dec.{i}.up.w"), he_normal(&mut rng, vec![w[i], w[i - 1], 2, 2], w[i], 1.0));
        p.push(format!("dec.{i}.up.b"), Tensor::zeros(vec![w[i - 1]]));
        conv_norm(&mut rng, &mut p, &format!("dec.{i}.conv"), 2 * w[i - 1], w[i - 1], 3);
    }
    p.push("head.w", he_normal(&mut rng, vec![1, w[0], 1, 1], w[0], 1.0));
    p.push("head.b", Tensor::zeros(vec![1]));
    Ok(RefSegNet {
        arch: arch.clone(),
        params: p,
    })
}

/// Encoder activations kept for the decoder.
pub struct Encoded<T: Scalar> {
    pub skips: Vec<Var<T>>,
    pub bottleneck: Var<T>,
}

/// The network bound to graph leaves for one forward/backward pass.
pub struct SegGraph<'a, T: Scalar> {
    arch: &'a ArchConfig,
    params: Bound<T>,
}

impl<T: Scalar> RefSegNet<T> {
    pub fn bind(&self, trainable: bool) -> SegGraph<'_, T> {
        SegGraph {
            arch: &self.arch,
            params: self.params.bind(trainable),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Bottleneck features of a single image.
    pub fn encode_image(&self, x: &Image, source: FeatureSource) -> Result<EncoderFeatures> {
        let t = images_to_tensor::<T>(&[x])?;
        let g = self.bind(false);
        let z = no_grad(|| g.encode(&Var::constant(t)))?.bottleneck;
        let [c, 1, h, w] = *z.shape() else { unreachable!("single image batch") };
        Ok(EncoderFeatures {
            height: h,
            width: w,
            channels: c,
            data: z.value().data().iter().map(|v| v.as_f64() as f32).collect(),
            source,
        })
    }

    /// Soft mask for `target` conditioned on `reference_image * reference_mask`.
    pub fn segment_image(&self, target: &Image, reference_image: &Image, reference_mask: &BinaryMask) -> Result<SoftMask> {
        let masked = reference_image.masked(&reference_mask.to_f32())?;
        Ok(self.segment_batch(&[target], &[&masked])?.remove(0))
    }

    /// Inference over a batch of targets and already-masked references.
    pub fn segment_batch(&self, targets: &[&Image], masked_refs: &[&Image]) -> Result<Vec<SoftMask>> {
        let x = Var::constant(images_to_tensor::<T>(targets)?);
        let r = Var::constant(images_to_tensor::<T>(masked_refs)?);
        let g = self.bind(false);
        let m = no_grad(|| g.segment(&x, &r))?;
        tensor_to_soft_masks(m.value())
    }
}

pub fn encode<T: Scalar>(net: &RefSegNet<T>, x: &Image) -> Result<EncoderFeatures> {
    net.encode_image(x, FeatureSource::Target)
}

pub fn segment<T: Scalar>(net: &RefSegNet<T>, target: &Image, reference_image: &Image, reference_mask: &BinaryMask) -> Result<SoftMask> {
    net.segment_image(target, reference_image, reference_mask)
}

impl<T: Scalar> SegGraph<'_, T> {
    pub fn params(&self) -> &Bound<T> {
        &self.params
    }

    fn block(&self, name: &str, x: &Var<T>, stride: usize, kernel: usize) -> Var<T> {
        let p = &self.params;
        let y = conv2d(x, p.get(&format!("{name}.w")), None, stride, kernel / 2);
        let c = y.shape()[0];
        group_norm(
            &y,
            self.arch.groups_for(c),
            p.get(&format!("{name}.g")),
            p.get(&format!("{name}.b")),
            T::lit(NORM_EPS),
        )
        .leaky_relu(T::lit(SLOPE))
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let s = x.shape();
        let k = self.arch.stride();
        if s.len() != 4 || s[0] != self.arch.in_channels || s[2] % k != 0 || s[3] % k != 0 || s[2] == 0 || s[3] == 0 {
            return Err(invalid(
                "encode",
                format!(
                    "input {s:?} must be [{}, N, H, W] with H and W positive multiples of {k}",
                    self.arch.in_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Var<T>) -> Result<Encoded<T>> {
        self.check_input(x)?;
        let mut h = self.block("enc.0", x, 1, 3);
        let mut skips = Vec::with_capacity(self.arch.depth);
        for i in 1..=self.arch.depth {
            skips.push(h.clone());
            h = self.block(&format!("enc.{i}.down"), &h, 2, 3);
            h = self.block(&format!("enc.{i}.conv"), &h, 1, 3);
        }
        Ok(Encoded { skips, bottleneck: h })
    }

    /// Conditioning code for masked reference images: `[d, N]` when pooled,
    /// the bottleneck map otherwise.
    pub fn reference_code(&self, masked_ref: &Var<T>) -> Result<Var<T>> {
        let z = self.encode(masked_ref)?.bottleneck;
        Ok(match self.arch.conditioning {
            Conditioning::Pooled => global_avg_pool(&z),
            Conditioning::Spatial => z,
        })
    }

    /// Pooled bottleneck vectors, `[N, d]`.
    pub fn pooled_features(&self, x: &Var<T>) -> Result<Var<T>> {
        let z = self.encode(x)?.bottleneck;
        Ok(global_avg_pool(&z).permute(&[1, 0]))
    }

    pub fn decode(&self, enc: &Encoded<T>, code: &Var<T>) -> Result<Var<T>> {
        let b = &enc.bottleneck;
        let [d, n, h, w] = *b.shape() else { unreachable!("bottleneck is 4-d") };
        let tiled = match (self.arch.conditioning, code.shape()) {
            (Conditioning::Pooled, [cd, cn]) if *cd == d && *cn == n => code.reshape(&[d, n, 1, 1]).broadcast_to(&[d, n, h, w]),
            (Conditioning::Spatial, s) if s == b.shape() => code.clone(),
            (_, s) => {
                return Err(Error::ShapeMismatch {
                    op: "decode",
                    lhs: b.shape().to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        let p = &self.params;
        // the product channels let a 1x1 fuse respond to feature agreement
        let mut z = self.block("dec.fuse", &Var::concat0(&[b, &tiled, &b.mul(&tiled)]), 1, 1);
        for i in (1..=self.arch.depth).rev() {
            let up = conv_transpose2d(&z, p.get(&format!("dec.{i}.up.w")), Some(p.get(&format!("dec.{i}.up.b"))), 2);
            z = self.block(&format!("dec.{i}.conv"), &Var::concat0(&[&up, &enc.skips[i - 1]]), 1, 3);
        }
        let logits = conv2d(&z, p.get("head.w"), Some(p.get("head.b")), 1, 0);
        let eps = T::lit(OUTPUT_EPS);
        Ok(logits.sigmoid().scale(T::one() - eps - eps).add_scalar(eps))
    }

    /// Soft masks `[1, N, H, W]` for targets `[C, N, H, W]` given a
    /// precomputed reference code.
    pub fn segment_with_code(&self, target: &Var<T>, code: &Var<T>) -> Result<Var<T>> {
        let enc = self.encode(target)?;
        self.decode(&enc, code)
    }

    pub fn segment(&self, target: &Var<T>, masked_ref: &Var<T>) -> Result<Var<T>> {
        if target.shape() != masked_ref.shape() {
            return Err(Error::ShapeMismatch {
                op: "segment",
                lhs: target.shape().to_vec(),
                rhs: masked_ref.shape().to_vec(),
            });
        }
        let code = self.reference_code(masked_ref)?;
        self.segment_with_code(target, &code)
    }
}

#[cfg(test)]
mod tests {
    use refnet_tensor::grad_or_zeros;

    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            base_width: 4,
            depth: 2,
            max_width: 8,
            norm_groups: 2,
            ..Default::default()
        }
    }

    fn img(seed: usize, h: usize) -> Image {
        Image::from_fn(h, h, 3, |c, y, x| ((seed * 7 + c * 5 + y * 3 + x * 11) % 13) as f32 / 12.0)
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = init_model::<f32>(&tiny(), 5).unwrap();
        let b = init_model::<f32>(&tiny(), 5).unwrap();
        let c = init_model::<f32>(&tiny(), 6).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn rejects_bad_arch() {
        let arch = ArchConfig { depth: 0, ..tiny() };
        assert!(init_model::<f32>(&arch, 0).is_err());
    }

    #[test]
    fn shapes_and_range() {
        let net = init_model::<f32>(&tiny(), 1).unwrap();
        let f = encode(&net, &img(0, 16)).unwrap();
        assert_eq!((f.height, f.width, f.channels), (4, 4, 8));
        let zero = encode(&net, &Image::zeros(16, 16, 3)).unwrap();
        assert!(zero.data.iter().all(|v| v.is_finite()));
        let m = segment(&net, &img(1, 16), &img(2, 16), &BinaryMask::ones(16, 16)).unwrap();
        assert_eq!(m.hw(), (16, 16));
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(segment(&net, &img(1, 10), &img(2, 10), &BinaryMask::ones(10, 10)).is_err());
        assert!(segment(&net, &img(1, 16), &img(2, 8), &BinaryMask::ones(8, 8)).is_err());
    }

    #[test]
    fn full_mask_reference_equals_plain_encoding() {
        let net = init_model::<f32>(&tiny(), 1).unwrap();
        let x = img(3, 8);
        let masked = x.masked(&BinaryMask::ones(8, 8).to_f32()).unwrap();
        assert_eq!(encode(&net, &masked).unwrap().data, encode(&net, &x).unwrap().data);
    }

    #[test]
    fn encoder_gradient_sums_both_branches() {
        let net = init_model::<f64>(&tiny(), 2).unwrap();
        let x = Var::constant(images_to_tensor(&[&img(4, 8)]).unwrap());
        let r = Var::constant(images_to_tensor(&[&img(5, 8)]).unwrap());
        let g = net.bind(true);
        let total = g.segment(&x, &r).unwrap().sum();
        let w = g.params().get("enc.1.conv.w");
        let both = grad_or_zeros(&total, &[w], false).remove(0);
        // target branch alone: reference code detached
        let code = g.reference_code(&r).unwrap().detach();
        let target_only = grad_or_zeros(&g.segment_with_code(&x, &code).unwrap().sum(), &[w], false).remove(0);
        // reference branch alone: target encoding from frozen params
        let frozen = net.bind(false);
        let enc = frozen.encode(&x).unwrap();
        let code = g.reference_code(&r).unwrap();
        let ref_only = grad_or_zeros(&g.decode(&enc, &code).unwrap().sum(), &[w], false).remove(0);
        let sum = target_only.value().zip_map(ref_only.value(), |a, b| a + b).unwrap();
        assert!(both.value().max_abs_diff(target_only.value()) > 1e-9);
        assert!(both.value().max_abs_diff(ref_only.value()) > 1e-9);
        assert!(both.value().max_abs_diff(&sum) < 1e-9);
    }

    #[test]
    fn default_param_count_in_range() {
        let net = init_model::<f32>(&ArchConfig::default(), 0).unwrap();
        let n = net.param_count();
        assert!((500_000..=5_000_000).contains(&n), "{n}");
    }
}
