//! Training objectives.

use std::rc::Rc;

use refnet_tensor::{grad, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::affine::{AffineTransform, Interpolation};
use crate::critic::{interpolate_triplets, CriticGraph, Triplet};
use crate::error::{invalid, Error, Result};
use crate::image::BinaryMask;
use crate::model::SegGraph;
use crate::morphology::boundary_band;

/// Dice smoothing `tau`, penalty weight `lambda`, Dice / MMD /
/// self-supervision weights `xi`, `zeta`, `eta`, and `adv` on both critic
/// scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda: f64,
    pub xi: f64,
    pub zeta: f64,
    pub eta: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda: 10.0,
            xi: 1.0,
            zeta: 1.0,
            eta: 1.0,
            adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tau, self.lambda, self.xi, self.zeta, self.eta, self.adv];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("loss weights", format!("weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `1 - (2 sum(p * m) + tau) / (sum(p) + sum(m) + tau)` over all elements.
pub fn dice_loss<T: Scalar>(pred: &Var<T>, target: &Var<T>, tau: f64) -> Result<Var<T>> {
    same_shape("dice_loss", pred, target)?;
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(invalid("dice_loss", format!("smoothing {tau} must be finite and non-negative")));
    }
    let tau = T::lit(tau);
    let num = pred.mul(target).sum().scale(T::lit(2.0)).add_scalar(tau);
    let den = pred.sum().add(&target.sum()).add_scalar(tau);
    Ok(num.div(&den).neg().add_scalar(T::one()))
}

/// Gaussian kernel bandwidths; with `median_heuristic` the listed values
/// multiply the median pairwise distance of the pooled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdKernelConfig {
    pub bandwidths: Vec<f64>,
    pub median_heuristic: bool,
}

impl Default for MmdKernelConfig {
    fn default() -> Self {
        Self {
            bandwidths: vec![0.5, 1.0, 2.0],
            median_heuristic: true,
        }
    }
}

impl MmdKernelConfig {
    pub fn fixed(bandwidths: Vec<f64>) -> Self {
        Self {
            bandwidths,
            median_heuristic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(invalid("mmd kernel", format!("need at least one positive bandwidth, got {:?}", self.bandwidths)));
        }
        Ok(())
    }
}

/// Squared Euclidean distances between the rows of `x` `[n, d]` and `y` `[m, d]`.
fn sq_dists<T: Scalar>(x: &Var<T>, y: &Var<T>) -> Var<T> {
    let (n, m) = (x.shape()[0], y.shape()[0]);
    let xx = x.square().sum_to(&[n, 1]).broadcast_to(&[n, m]);
    let yy = y.square().sum_to(&[m, 1]).reshape(&[1, m]).broadcast_to(&[n, m]);
    xx.add(&yy).sub(&x.matmul_t(y, false, true).scale(T::lit(2.0)))
}

fn median_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let d = a.shape()[1];
    let rows: Vec<&[T]> = a.data().chunks(d).chain(b.data().chunks(d)).collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i].iter().zip(rows[j]).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum();
            dists.push(s.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// Resolved kernel bandwidths for a pair of sample sets.
pub fn mmd_bandwidths<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &MmdKernelConfig) -> Vec<f64> {
    let scale = if cfg.median_heuristic { median_distance(a, b) } else { 1.0 };
    cfg.bandwidths.iter().map(|f| f * scale).collect()
}

/// Biased squared MMD between row sets `a` `[n, d]` and `b` `[m, d]` with a
/// sum of Gaussian kernels.
pub fn mmd_loss<T: Scalar>(a: &Var<T>, b: &Var<T>, cfg: &MmdKernelConfig) -> Result<Var<T>> {
    cfg.validate()?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::ShapeMismatch {
            op: "mmd_loss",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    if sa[0] == 0 || sb[0] == 0 {
        return Err(invalid("mmd_loss", "empty sample set"));
    }
    let sigmas = mmd_bandwidths(a.value(), b.value(), cfg);
    let kernel_mean = |d2: Var<T>| {
        let terms: Vec<Var<T>> = sigmas
            .iter()
            .map(|s| d2.scale(T::lit(-1.0 / (2.0 * s * s))).exp().mean())
            .collect();
        terms.iter().skip(1).fold(terms[0].clone(), |acc, t| acc.add(t))
    };
    let kaa = kernel_mean(sq_dists(a, a));
    let kbb = kernel_mean(sq_dists(b, b));
    let kab = kernel_mean(sq_dists(a, b));
    Ok(kaa.add(&kbb).sub(&kab.scale(T::lit(2.0))))
}

/// Applies one warp per sample to a `[1, N, H, W]` tensor.
pub fn warp_per_sample<T: Scalar>(x: &Var<T>, transforms: &[AffineTransform], mode: Interpolation) -> Result<Var<T>> {
    let [c, n, h, w] = *x.shape() else {
        return Err(invalid("warp_per_sample", format!("expected 4-d input, got {:?}", x.shape())));
    };
    if transforms.len() != n {
        return Err(invalid("warp_per_sample", format!("{} transforms for {n} samples", transforms.len())));
    }
    let per_sample = x.permute(&[1, 0, 2, 3]);
    let parts = transforms
        .iter()
        .enumerate()
        .map(|(j, t)| Ok(per_sample.narrow0(j, 1).spatial_map(&Rc::new(t.spatial_map(h, w, mode)?), false)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Var<T>> = parts.iter().collect();
    Ok(Var::concat0(&refs).permute(&[1, 0, 2, 3]).reshape(&[c, n, h, w]))
}

/// Boundary bands of `[1, N, H, W]` soft masks, as a constant tensor.
pub fn weight_maps<T: Scalar>(m: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [1, _, h, w] = *m.shape() else {
        return Err(invalid("weight_maps", format!("expected [1, N, H, W], got {:?}", m.shape())));
    };
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(m.numel());
    for plane in m.data().chunks(h * w) {
        let b = BinaryMask::new(h, w, plane.iter().map(|&v| (v >= half) as u8).collect())?;
        out.extend(boundary_band(&b, r).mask().data().iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::new(m.shape().to_vec(), out)?)
}

/// `|| w' * m' - A(w * m) ||^2 / pixels`, with `m'` predicted on the warped
/// targets and both weight maps held constant.
pub fn self_supervision_from_predictions<T: Scalar>(
    m: &Var<T>,
    m_warped: &Var<T>,
    transforms: &[AffineTransform],
    r: usize,
) -> Result<Var<T>> {
    same_shape("self_supervision", m, m_warped)?;
    let w = Var::constant(weight_maps(m.value(), r)?);
    let w_warped = Var::constant(weight_maps(m_warped.value(), r)?);
    let lhs = w_warped.mul(m_warped);
    let rhs = warp_per_sample(&w.mul(m), transforms, Interpolation::Bilinear)?;
    let pixels = T::lit(m.numel() as f64);
    Ok(lhs.sub(&rhs).square().sum().scale(T::one() / pixels))
}

/// Runs the network on targets `[C, N, H, W]` and their warped copies.
pub fn self_supervision_loss<T: Scalar>(
    net: &SegGraph<'_, T>,
    targets: &Var<T>,
    masked_refs: &Var<T>,
    transforms: &[AffineTransform],
    r: usize,
) -> Result<Var<T>> {
    let code = net.reference_code(masked_refs)?;
    let m = net.segment_with_code(targets, &code)?;
    let warped = warp_per_sample(&targets.detach(), transforms, Interpolation::Bilinear)?;
    let m_warped = net.segment_with_code(&warped, &code)?;
    self_supervision_from_predictions(&m, &m_warped, transforms, r)
}

/// Smallest positive normal's square root; keeps `sqrt` differentiable at a
/// zero gradient without visibly shifting the norm.
fn norm_floor<T: Scalar>() -> T {
    T::min_positive_value().sqrt()
}

/// `lambda * mean((|grad_I critic(I)| - 1)^2)` at per-sample interpolations
/// between `real` and `fake`. Differentiable with respect to critic weights.
pub fn gradient_penalty<T: Scalar>(
    critic: &CriticGraph<'_, T>,
    real: &Triplet<T>,
    fake: &Triplet<T>,
    eps: &[T],
    lambda: f64,
) -> Result<Var<T>> {
    let mixed = interpolate_triplets(real, fake, eps)?;
    if lambda == 0.0 {
        return Ok(Var::scalar(T::zero()));
    }
    let point = Var::leaf(mixed.stacked().value().clone(), true);
    let scores = critic.score_stacked(&point)?;
    let [_, n, _, _] = *point.shape() else { unreachable!("stacked triplets are 4-d") };
    let norms = match grad(&scores.sum(), &[&point], true).remove(0) {
        Some(g) => g.square().sum_to(&[1, n, 1, 1]).add_scalar(norm_floor()).sqrt(),
        None => Var::constant(Tensor::full(vec![1, n, 1, 1], norm_floor::<T>().sqrt())),
    };
    Ok(norms.add_scalar(-T::one()).square().mean().scale(T::lit(lambda)))
}

/// `fake/2 + pseudo/2 - real + gp`, or `fake - real + gp` without pseudo
/// triplets.
pub fn critic_objective<T: Scalar>(d_fake: &Var<T>, d_pseudo: Option<&Var<T>>, d_real: &Var<T>, gp: &Var<T>) -> Var<T> {
    let fake_part = match d_pseudo {
        Some(p) => d_fake.add(p).scale(T::lit(0.5)),
        None => d_fake.clone(),
    };
    fake_part.sub(d_real).add(gp)
}

/// Critic loss and its components for logging.
pub struct CriticLoss<T: Scalar> {
    pub total: Var<T>,
    pub d_fake: T,
    pub d_pseudo: Option<T>,
    pub d_real: T,
    pub penalty: T,
}

/// Loss minimized by one critic; the fake triplet is detached so only the
/// critic receives gradients.
pub fn critic_loss<T: Scalar>(
    critic: &CriticGraph<'_, T>,
    fake: &Triplet<T>,
    pseudo: Option<&Triplet<T>>,
    real: &Triplet<T>,
    eps: &[T],
    lambda: f64,
) -> Result<CriticLoss<T>> {
    let sides = [Some(fake.side), pseudo.map(|p| p.side), Some(real.side)];
    if sides.iter().flatten().any(|s| *s != fake.side) {
        return Err(invalid("critic_loss", format!("mixed sides {sides:?}")));
    }
    let fake = Triplet {
        image: fake.image.detach(),
        mask: fake.mask.detach(),
        masked_image: fake.masked_image.detach(),
        ..fake.clone()
    };
    let d_fake = critic.score(&fake)?.mean();
    let d_pseudo = pseudo.map(|p| critic.score(p).map(|s| s.mean())).transpose()?;
    let d_real = critic.score(real)?.mean();
    let gp = gradient_penalty(critic, real, &fake, eps, lambda)?;
    let total = critic_objective(&d_fake, d_pseudo.as_ref(), &d_real, &gp);
    Ok(CriticLoss {
        d_fake: d_fake.item(),
        d_pseudo: d_pseudo.map(|d| d.item()),
        d_real: d_real.item(),
        penalty: gp.item(),
        total,
    })
}

/// Segmenter loss components; `None` marks a disabled term.
#[derive(Debug, Clone, Default)]
pub struct SegLossTerms<T: Scalar> {
    pub dice: Option<Var<T>>,
    pub rep: Option<Var<T>>,
    pub sel: Option<Var<T>>,
    pub d_outer: Option<Var<T>>,
    pub d_inner: Option<Var<T>>,
}

/// `xi * dice + zeta * rep + eta * sel - adv * (d_outer + d_inner)`.
pub fn total_seg_loss<T: Scalar>(terms: &SegLossTerms<T>, w: &LossWeights) -> Result<Var<T>> {
    let parts = [
        ("dice", &terms.dice, w.xi),
        ("rep", &terms.rep, w.zeta),
        ("sel", &terms.sel, w.eta),
        ("d_outer", &terms.d_outer, -w.adv),
        ("d_inner", &terms.d_inner, -w.adv),
    ];
    let mut total: Option<Var<T>> = None;
    for (name, term, coef) in parts {
        let Some(v) = term else { continue };
        if !v.value().all_finite() {
            return Err(Error::NonFiniteLoss { term: name });
        }
        if coef == 0.0 {
            continue;
        }
        let scaled = v.scale(T::lit(coef));
        total = Some(match total {
            Some(t) => t.add(&scaled),
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| Var::scalar(T::zero())))
}
