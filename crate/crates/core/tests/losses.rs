use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refnet::affine::{apply_affine_image, apply_affine_soft, sample_affine, AffineRanges, AffineTransform, Interpolation};
use refnet::convert::{images_to_tensor, masks_to_tensor};
use refnet::critic::{init_critic, make_fake_triplet, make_real_triplet, Critic, CriticConfig, Side};
use refnet::image::{BinaryMask, Image, SoftMask};
use refnet::losses::{
    critic_loss, critic_objective, dice_loss, gradient_penalty, mmd_loss, self_supervision_loss, total_seg_loss,
    LossWeights, MmdKernelConfig, SegLossTerms,
};
use refnet::model::{init_model, ArchConfig};
use refnet::morphology::boundary_weight_map;
use refnet::Error;
use refnet_tensor::{grad, Tensor, Var};

fn mask_var(bits: &[u8], shape: &[usize]) -> Var<f64> {
    Var::constant(Tensor::new(shape.to_vec(), bits.iter().map(|&b| b as f64).collect()).unwrap())
}

fn scalar(v: f64) -> Var<f64> {
    Var::scalar(v)
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 3, |_, _, _| rng.random::<f32>())
}

#[test]
fn dice_examples() {
    let mut m = vec![0u8; 64];
    m[..10].fill(1);
    let v = mask_var(&m, &[1, 1, 8, 8]);
    assert!(dice_loss(&v, &v, 1.0).unwrap().item().abs() < 1e-9);

    let zero = mask_var(&[0; 64], &[1, 1, 8, 8]);
    assert!(dice_loss(&zero, &zero, 1.0).unwrap().item().abs() < 1e-9);

    let mut a = vec![0u8; 64];
    let mut b = vec![0u8; 64];
    a[..8].fill(1);
    b[8..16].fill(1);
    let got = dice_loss(&mask_var(&a, &[1, 1, 8, 8]), &mask_var(&b, &[1, 1, 8, 8]), 1.0).unwrap().item();
    assert!((got - (1.0 - 1.0 / 17.0)).abs() < 1e-9);

    assert!(dice_loss(&v, &v, -1.0).is_err());
    assert!(matches!(dice_loss(&v, &mask_var(&[0; 16], &[1, 1, 4, 4]), 1.0), Err(Error::ShapeMismatch { .. })));
}

proptest! {
    #[test]
    fn dice_range_and_zero_iff_equal(bits in prop::collection::vec(0u8..2, 32), other in prop::collection::vec(0u8..2, 32), soft in prop::collection::vec(0.0f64..1.0, 32)) {
        let m = mask_var(&bits, &[1, 2, 4, 4]);
        let o = mask_var(&other, &[1, 2, 4, 4]);
        let p = Var::constant(Tensor::new(vec![1, 2, 4, 4], soft).unwrap());
        let d: f64 = dice_loss(&p, &m, 1.0).unwrap().item();
        prop_assert!((0.0..1.0).contains(&d));
        let d: f64 = dice_loss(&o, &m, 1.0).unwrap().item();
        prop_assert!((0.0..1.0).contains(&d));
        prop_assert_eq!(d == 0.0, bits == other);
    }

    #[test]
    fn mmd_symmetric_nonnegative(n in 1usize..5, m in 1usize..5, seed in 0u64..1000, median in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let a = Var::constant(Tensor::from_fn(vec![n, d], |_| rng.random_range(-2.0..2.0)));
        let b = Var::constant(Tensor::from_fn(vec![m, d], |_| rng.random_range(-2.0..2.0)));
        let cfg = MmdKernelConfig { median_heuristic: median, ..Default::default() };
        let ab: f64 = mmd_loss(&a, &b, &cfg).unwrap().item();
        let ba: f64 = mmd_loss(&b, &a, &cfg).unwrap().item();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= -1e-12);
    }

    #[test]
    fn seg_loss_linear_in_coefficients(dice in 0.0f64..1.0, rep in 0.0f64..1.0, sel in 0.0f64..1.0, xi in 0.0f64..3.0, zeta in 0.0f64..3.0, eta in 0.0f64..3.0) {
        let terms = SegLossTerms {
            dice: Some(scalar(dice)),
            rep: Some(scalar(rep)),
            sel: Some(scalar(sel)),
            d_outer: Some(scalar(0.3)),
            d_inner: Some(scalar(-0.2)),
        };
        let base = LossWeights { xi, zeta, eta, ..Default::default() };
        let at = |w: LossWeights| total_seg_loss(&terms, &w).unwrap().item();
        let l0: f64 = at(base);
        let dx = at(LossWeights { xi: 2.0 * xi, ..base }) - l0;
        let dz = at(LossWeights { zeta: 2.0 * zeta, ..base }) - l0;
        let de = at(LossWeights { eta: 2.0 * eta, ..base }) - l0;
        prop_assert!((dx - xi * dice).abs() < 1e-12);
        prop_assert!((dz - zeta * rep).abs() < 1e-12);
        prop_assert!((de - eta * sel).abs() < 1e-12);
    }
}

#[test]
fn mmd_examples() {
    let x = Var::constant(Tensor::new(vec![2, 2], vec![0.1f64, 0.2, -0.5, 1.0]).unwrap());
    assert!(mmd_loss(&x, &x, &MmdKernelConfig::default()).unwrap().item().abs() < 1e-9);
    let shuffled = Var::constant(Tensor::new(vec![2, 2], vec![-0.5f64, 1.0, 0.1, 0.2]).unwrap());
    assert!(mmd_loss(&x, &shuffled, &MmdKernelConfig::default()).unwrap().item().abs() < 1e-9);

    let sigma = 0.7;
    let p = Var::constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap());
    let q = Var::constant(Tensor::new(vec![1, 3], vec![0.5, 0.0, 2.5]).unwrap());
    let d2: f64 = 0.25 + 1.0 + 0.25;
    let expect = 2.0 - 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
    let got = mmd_loss(&p, &q, &MmdKernelConfig::fixed(vec![sigma])).unwrap().item();
    assert!((got - expect).abs() < 1e-12);

    let far = Var::constant(Tensor::new(vec![1, 3], vec![1e3, 0.0, 0.0]).unwrap());
    let got = mmd_loss(&p, &far, &MmdKernelConfig::fixed(vec![1.0])).unwrap().item();
    assert!((got - 2.0).abs() < 1e-12);

    let empty = Var::constant(Tensor::<f64>::zeros(vec![0, 3]));
    assert!(mmd_loss(&p, &empty, &MmdKernelConfig::default()).is_err());
    let wide = Var::constant(Tensor::<f64>::zeros(vec![1, 4]));
    assert!(mmd_loss(&p, &wide, &MmdKernelConfig::default()).is_err());
    assert!(mmd_loss(&p, &q, &MmdKernelConfig::fixed(vec![])).is_err());
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        base_width: 4,
        depth: 2,
        max_width: 8,
        norm_groups: 2,
        ..Default::default()
    }
}

#[test]
fn self_supervision_identity_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = init_model::<f64>(&small_arch(), 5).unwrap();
    let imgs: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 16, 16)).collect();
    let t = Var::constant(images_to_tensor::<f64>(&[&imgs[0], &imgs[1]]).unwrap());
    let r = Var::constant(images_to_tensor::<f64>(&[&imgs[2], &imgs[3]]).unwrap());
    let g = net.bind(false);
    let ids = [AffineTransform::identity(), AffineTransform::identity()];
    assert_eq!(self_supervision_loss(&g, &t, &r, &ids, 2).unwrap().item(), 0.0);
}

#[test]
fn self_supervision_constant_model_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = init_model::<f64>(&small_arch(), 6).unwrap();
    net.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    net.params.get_mut("head.b").unwrap().data_mut().fill(0.8);
    let imgs: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 16, 16)).collect();
    let t = Var::constant(images_to_tensor::<f64>(&[&imgs[0]]).unwrap());
    let r = Var::constant(images_to_tensor::<f64>(&[&imgs[1]]).unwrap());
    let a = sample_affine(&mut rng, &AffineRanges::default());
    assert_eq!(self_supervision_loss(&net.bind(false), &t, &r, &[a], 2).unwrap().item(), 0.0);
}

/// Rebuilds the loss from per-image segmentation, warping and weight maps.
#[test]
fn self_supervision_matches_composed_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = init_model::<f64>(&small_arch(), 8).unwrap();
    let (h, w, r) = (16, 16, 2);
    let targets: Vec<Image> = (0..2).map(|_| random_image(&mut rng, h, w)).collect();
    let refs: Vec<Image> = (0..2).map(|_| random_image(&mut rng, h, w)).collect();
    let transforms: Vec<AffineTransform> = (0..2).map(|_| sample_affine(&mut rng, &AffineRanges::default())).collect();
    let full = BinaryMask::ones(h, w);

    let mut expect = 0.0f64;
    for i in 0..2 {
        let m = net.segment_image(&targets[i], &refs[i], &full).unwrap();
        let warped = apply_affine_image(&targets[i], &transforms[i], Interpolation::Bilinear).unwrap();
        let m_w = net.segment_image(&warped, &refs[i], &full).unwrap();
        let wm = boundary_weight_map(&m, r).to_f32();
        let wm_w = boundary_weight_map(&m_w, r).to_f32();
        let weighted = SoftMask::new(h, w, m.data().iter().zip(&wm).map(|(a, b)| a * b).collect()).unwrap();
        let moved = apply_affine_soft(&weighted, &transforms[i], Interpolation::Bilinear).unwrap();
        for j in 0..h * w {
            let d = (wm_w[j] * m_w.data()[j]) as f64 - moved.data()[j] as f64;
            expect += d * d;
        }
    }
    expect /= (2 * h * w) as f64;

    let t = Var::constant(images_to_tensor::<f64>(&[&targets[0], &targets[1]]).unwrap());
    let rr = Var::constant(images_to_tensor::<f64>(&[&refs[0], &refs[1]]).unwrap());
    let got = self_supervision_loss(&net.bind(false), &t, &rr, &transforms, r).unwrap().item();
    assert!(expect > 0.0);
    assert!((got - expect).abs() <= 1e-5 * expect.max(1e-3), "{got} vs {expect}");
}

fn triplets(seed: u64, n: usize, side: Side) -> (refnet::critic::Triplet<f64>, refnet::critic::Triplet<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Var::constant(Tensor::from_fn(vec![3, n, 8, 8], |_| rng.random::<f64>()));
    let gt: Vec<BinaryMask> = (0..n).map(|_| BinaryMask::from_fn(8, 8, |_, _| rng.random_bool(0.4))).collect();
    let refs: Vec<&BinaryMask> = gt.iter().collect();
    let real = make_real_triplet(&x, &Var::constant(masks_to_tensor(&refs).unwrap()), side).unwrap();
    let soft = Var::constant(Tensor::from_fn(vec![1, n, 8, 8], |_| rng.random::<f64>()));
    let fake = make_fake_triplet(&x, &soft, side).unwrap();
    (real, fake)
}

fn tiny_critic(seed: u64) -> Critic<f64> {
    init_critic(&CriticConfig { base_width: 2, ..Default::default() }, seed).unwrap()
}

#[test]
fn gradient_penalty_zero_weight() {
    let (real, fake) = triplets(1, 2, Side::Outer);
    let c = tiny_critic(2);
    assert_eq!(gradient_penalty(&c.bind(false), &real, &fake, &[0.3, 0.6], 0.0).unwrap().item(), 0.0);
}

/// Positive weights and large positive biases keep every activation in the
/// identity region of the leaky ReLU, so the critic is affine in its input
/// and its input gradient is the same vector everywhere. Rescaling the last
/// layer by the inverse gradient norm gives a unit-norm linear critic.
#[test]
fn gradient_penalty_linear_critic_is_zero() {
    let mut c = tiny_critic(3);
    let names: Vec<String> = c.params.names().to_vec();
    for name in &names {
        let t = c.params.get_mut(name).unwrap();
        if name.ends_with(".b") {
            t.data_mut().fill(50.0);
        } else {
            t.data_mut().iter_mut().for_each(|v| *v = v.abs());
        }
    }
    let (real, fake) = triplets(4, 3, Side::Inner);
    let probe = Var::leaf(real.stacked().value().clone(), true);
    let score = c.bind(false).score_stacked(&probe).unwrap();
    let g = grad(&score.narrow0(0, 1).sum(), &[&probe], false)[0].clone().unwrap();
    let norm = g.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
    c.params.get_mut("c3.w").unwrap().data_mut().iter_mut().for_each(|v| *v /= norm);
    let gp = gradient_penalty(&c.bind(false), &real, &fake, &[0.1, 0.5, 0.9], 10.0).unwrap().item();
    assert!(gp.abs() < 1e-6, "{gp}");
}

#[test]
fn gradient_penalty_constant_critic_is_lambda() {
    let c = init_critic::<f64>(&CriticConfig { base_width: 2, zero_init_final: true, ..Default::default() }, 5).unwrap();
    let (real, fake) = triplets(6, 2, Side::Outer);
    let gp = gradient_penalty(&c.bind(false), &real, &fake, &[0.2, 0.7], 10.0).unwrap().item();
    assert!((gp - 10.0).abs() < 1e-6, "{gp}");
}

#[test]
fn gradient_penalty_weight_gradient_matches_finite_differences() {
    let c = tiny_critic(7);
    let (real, fake) = triplets(8, 2, Side::Outer);
    let eps = [0.25, 0.8];
    let gp_at = |critic: &Critic<f64>| gradient_penalty(&critic.bind(false), &real, &fake, &eps, 10.0).unwrap().item();
    let bound = c.bind(true);
    let gp = gradient_penalty(&bound, &real, &fake, &eps, 10.0).unwrap();
    let grads = grad(&gp, &bound.params().refs(), false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    for (pi, name) in c.params.names().iter().enumerate() {
        let analytic = grads[pi].as_ref().map(|g| g.value().clone());
        let len = c.params.tensors()[pi].numel();
        for _ in 0..4 {
            let j = rng.random_range(0..len);
            let mut plus = c.clone();
            plus.params.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = c.clone();
            minus.params.get_mut(name).unwrap().data_mut()[j] -= h;
            let numeric = (gp_at(&plus) - gp_at(&minus)) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[j]);
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-3);
            assert!(err < 1e-2, "{name}[{j}]: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn critic_loss_examples() {
    let total = critic_objective(&scalar(1.0), Some(&scalar(1.0)), &scalar(2.0), &scalar(0.0));
    assert!((total.item() + 1.0).abs() < 1e-12);
    let total = critic_objective(&scalar(0.4), Some(&scalar(0.4)), &scalar(0.4), &scalar(0.0));
    assert!(total.item().abs() < 1e-12);

    let zero = init_critic::<f64>(&CriticConfig { base_width: 2, zero_init_final: true, ..Default::default() }, 1).unwrap();
    let (real, fake) = triplets(10, 2, Side::Outer);
    let pseudo = fake.clone();
    let eps = [0.5, 0.5];
    let l = critic_loss(&zero.bind(true), &fake, Some(&pseudo), &real, &eps, 10.0).unwrap();
    let gp = gradient_penalty(&zero.bind(false), &real, &fake, &eps, 10.0).unwrap().item();
    assert_eq!(l.total.item(), gp);
    assert_eq!((l.d_fake, l.d_real), (0.0, 0.0));

    let (_, inner_fake) = triplets(10, 2, Side::Inner);
    assert!(critic_loss(&zero.bind(true), &inner_fake, None, &real, &eps, 10.0).is_err());
}

#[test]
fn critic_loss_leaves_segmenter_output_ungraded() {
    let c = tiny_critic(11);
    let (real, _) = triplets(12, 2, Side::Outer);
    let soft = Var::leaf(Tensor::full(vec![1, 2, 8, 8], 0.3), true);
    let fake = make_fake_triplet(&real.image, &soft, Side::Outer).unwrap();
    let l = critic_loss(&c.bind(true), &fake, None, &real, &[0.5, 0.5], 10.0).unwrap();
    assert!(grad(&l.total, &[&soft], false)[0].is_none());
}

#[test]
fn total_seg_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(total_seg_loss(&SegLossTerms::<f64>::default(), &w).unwrap().item(), 0.0);
    let terms = SegLossTerms {
        dice: Some(scalar(0.5)),
        rep: Some(scalar(0.1)),
        sel: Some(scalar(0.2)),
        d_outer: Some(scalar(0.3)),
        d_inner: Some(scalar(0.1)),
    };
    assert!((total_seg_loss(&terms, &w).unwrap().item() - 0.4).abs() < 1e-12);
    let no_rep = LossWeights { zeta: 0.0, ..w };
    assert!((total_seg_loss(&terms, &no_rep).unwrap().item() - 0.3).abs() < 1e-12);

    let bad = SegLossTerms { sel: Some(scalar(f64::NAN)), ..terms };
    assert!(matches!(total_seg_loss(&bad, &w), Err(Error::NonFiniteLoss { term: "sel" })));
}
