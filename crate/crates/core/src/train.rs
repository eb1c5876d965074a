//! Alternating min-max training: critic updates on fake / pseudo / real
//! triplets, then one segmenter update on the combined loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refnet_tensor::{grad, no_grad, Adam, AdamConfig, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::affine::{sample_affine, AffineRanges, AffineTransform, Interpolation};
use crate::convert::{images_to_tensor, masks_to_tensor};
use crate::critic::{
    init_critic, make_fake_triplet, make_real_triplet, sample_pseudo_triplet, Critic, PseudoMorphology, CriticConfig, RadiusRange, Side,
};
use crate::dataset::{augment, sample_open_source, sample_supervised, sample_target_pairs, AugmentPolicy, TrainingData};
use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, Image};
use crate::losses::{
    critic_loss, dice_loss, mmd_loss, self_supervision_from_predictions, total_seg_loss, warp_per_sample, LossWeights,
    MmdKernelConfig, SegLossTerms,
};
use crate::model::{init_model, ArchConfig, Conditioning, RefSegNet};

/// Adam settings in serializable form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn critic_default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.9,
            ..Default::default()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("{what} optimizer: invalid settings {self:?}")));
        }
        Ok(())
    }
}

/// Component switches; `true` keeps the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub self_supervision: bool,
    pub condition: bool,
    pub pseudo_triplet: bool,
    pub inner_critic: bool,
    pub outer_critic: bool,
    pub dice_supervision: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            self_supervision: true,
            condition: true,
            pseudo_triplet: true,
            inner_critic: true,
            outer_critic: true,
            dice_supervision: true,
        }
    }
}

impl Ablations {
    pub fn critics_enabled(&self) -> bool {
        self.inner_critic || self.outer_critic
    }

    pub fn sides(&self) -> Vec<Side> {
        let mut out = Vec::new();
        if self.outer_critic {
            out.push(Side::Outer);
        }
        if self.inner_critic {
            out.push(Side::Inner);
        }
        out
    }
}

/// Command-line names of the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    SelfSupervision,
    Condition,
    PseudoTriplet,
    InnerCritic,
    OuterCritic,
    DiceSupervision,
}

impl Toggle {
    pub const ALL: [Toggle; 6] = [
        Toggle::SelfSupervision,
        Toggle::Condition,
        Toggle::PseudoTriplet,
        Toggle::InnerCritic,
        Toggle::OuterCritic,
        Toggle::DiceSupervision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::SelfSupervision => "self",
            Toggle::Condition => "cond",
            Toggle::PseudoTriplet => "pseudo",
            Toggle::InnerCritic => "inner",
            Toggle::OuterCritic => "outer",
            Toggle::DiceSupervision => "dice",
        }
    }

    /// Switches the component off.
    pub fn apply(self, a: &mut Ablations) {
        match self {
            Toggle::SelfSupervision => a.self_supervision = false,
            Toggle::Condition => a.condition = false,
            Toggle::PseudoTriplet => a.pseudo_triplet = false,
            Toggle::InnerCritic => a.inner_critic = false,
            Toggle::OuterCritic => a.outer_critic = false,
            Toggle::DiceSupervision => a.dice_supervision = false,
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toggle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Toggle::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Toggle::ALL.iter().map(|t| t.name()).collect();
            format!("unknown ablation {s:?}; valid: {}", names.join(", "))
        })
    }
}

/// How critic and segmenter updates interleave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `critic_steps` updates of each critic before every segmenter update.
    Alternate,
    /// Blocks of `critic_steps` critic updates and `critic_steps` segmenter
    /// updates.
    Interval,
}

/// Which parameters the representation-consistency term may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdGradient {
    /// Gradients reach the encoder through both feature sets.
    Full,
    /// Reference features are constants; segmented features backprop into
    /// the encoder and the predicted mask.
    DetachReference,
    /// Features come from a frozen copy of the encoder, so the term only
    /// moves the predicted mask.
    #[default]
    MaskOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub critic: CriticConfig,
    pub weights: LossWeights,
    pub mmd: MmdKernelConfig,
    pub mmd_gradient: MmdGradient,
    pub critic_steps: usize,
    pub schedule: Schedule,
    /// Requested batch size; shrunk to the number of labeled images.
    pub batch_size: usize,
    pub segmenter_optimizer: OptimizerConfig,
    pub critic_optimizer: OptimizerConfig,
    pub max_iterations: u64,
    pub seed: u64,
    pub neg_ratio: f64,
    pub ablations: Ablations,
    /// Keep only the first `k` references per category.
    pub k: Option<usize>,
    pub augment: AugmentPolicy,
    /// Transforms for the equivariance term.
    pub self_supervision_transforms: AffineRanges,
    /// Radius of the boundary bands weighting the equivariance term.
    pub weight_map_radius: usize,
    /// Dilation radii for pseudo triplets; scaled to the image size when absent.
    pub pseudo_radius: Option<RadiusRange>,
    pub pseudo_morphology: PseudoMorphology,
    /// Segmenter steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            critic: CriticConfig::default(),
            weights: LossWeights::default(),
            mmd: MmdKernelConfig::default(),
            mmd_gradient: MmdGradient::default(),
            critic_steps: 5,
            schedule: Schedule::Alternate,
            batch_size: 64,
            segmenter_optimizer: OptimizerConfig::default(),
            critic_optimizer: OptimizerConfig::critic_default(),
            max_iterations: 2000,
            seed: 0,
            neg_ratio: 0.25,
            ablations: Ablations::default(),
            k: None,
            augment: AugmentPolicy::default(),
            self_supervision_transforms: AffineRanges::default(),
            weight_map_radius: 3,
            pseudo_radius: None,
            pseudo_morphology: PseudoMorphology::Dilate,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Narrow networks, small batches and light auxiliary weights: trains on
    /// the default synthetic data in under half an hour on one core.
    pub fn smoke() -> Self {
        Self {
            arch: ArchConfig {
                base_width: 8,
                max_width: 64,
                ..Default::default()
            },
            critic: CriticConfig {
                base_width: 8,
                ..Default::default()
            },
            weights: LossWeights {
                zeta: 0.01,
                eta: 0.02,
                adv: 0.001,
                ..Default::default()
            },
            batch_size: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        self.mmd.validate()?;
        self.augment.validate()?;
        self.self_supervision_transforms.validate()?;
        self.segmenter_optimizer.validate("segmenter")?;
        self.critic_optimizer.validate("critic")?;
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.neg_ratio) {
            return Err(Error::Config(format!("neg_ratio {} outside [0, 1]", self.neg_ratio)));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.critic.image_channels != self.arch.in_channels {
            return Err(Error::Config(format!(
                "critic expects {} image channels, model has {}",
                self.critic.image_channels, self.arch.in_channels
            )));
        }
        Ok(())
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.ablations.dice_supervision {
            w.xi = 0.0;
        }
        if !self.ablations.self_supervision {
            w.eta = 0.0;
        }
        if !self.ablations.condition {
            w.zeta = 0.0;
        }
        w
    }

    pub fn effective_batch(&self, data: &TrainingData) -> usize {
        self.batch_size.min(data.labeled.len()).max(1)
    }

    pub fn radius_range(&self, height: usize, width: usize) -> RadiusRange {
        self.pseudo_radius.unwrap_or_else(|| RadiusRange::scaled_to(height.min(width)))
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed segmenter updates.
    pub iteration: u64,
    /// Completed updates of any network.
    pub updates: u64,
    pub model: RefSegNet<f32>,
    pub outer: Critic<f32>,
    pub inner: Critic<f32>,
    pub model_opt: Adam<f32>,
    pub outer_opt: Adam<f32>,
    pub inner_opt: Adam<f32>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = init_model::<f32>(&config.arch, config.seed)?;
        let outer = init_critic::<f32>(&config.critic, config.seed.wrapping_add(1))?;
        let inner = init_critic::<f32>(&config.critic, config.seed.wrapping_add(2))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Ok(Self {
            model_opt: Adam::new(config.segmenter_optimizer.adam(), model.params.tensors()),
            outer_opt: Adam::new(config.critic_optimizer.adam(), outer.params.tensors()),
            inner_opt: Adam::new(config.critic_optimizer.adam(), inner.params.tensors()),
            config,
            iteration: 0,
            updates: 0,
            model,
            outer,
            inner,
            rng,
        })
    }

    pub fn checksums(&self) -> Checksums {
        Checksums {
            segmenter: self.model.params.checksum(),
            outer: self.outer.params.checksum(),
            inner: self.inner.params.checksum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub segmenter: u64,
    pub outer: u64,
    pub inner: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Critic,
    Segmenter,
}

/// One parameter update. `iteration` counts segmenter updates completed
/// before this one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: u64,
    pub iteration: u64,
    pub kind: UpdateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    pub losses: BTreeMap<String, f64>,
    /// Parameter checksums after the update.
    pub checksums: Checksums,
    pub wall_ms: f64,
}

impl LogRecord {
    /// Copy with the timing field cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

fn image_refs<'a>(items: impl Iterator<Item = &'a Image>) -> Vec<&'a Image> {
    items.collect()
}

fn constant_images(images: &[&Image]) -> Result<Var<f32>> {
    Ok(Var::constant(images_to_tensor::<f32>(images)?))
}

/// Reference input: the masked reference, or zeros without conditioning.
fn reference_input(config: &TrainConfig, refs: &[&Image]) -> Result<Var<f32>> {
    let t = images_to_tensor::<f32>(refs)?;
    Ok(Var::constant(if config.ablations.condition {
        t
    } else {
        Tensor::zeros(t.shape().to_vec())
    }))
}

fn finite_grads(grads: &[Option<Var<f32>>]) -> bool {
    grads.iter().flatten().all(|g| g.value().all_finite())
}

fn apply_update(opt: &mut Adam<f32>, params: &mut [Tensor<f32>], grads: &[Option<Var<f32>>]) {
    let refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(|g| g.as_ref().map(|v| v.value())).collect();
    opt.update(params, &refs);
}

fn check_finite(step: u64, what: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("{what} is {value}"),
        });
    }
    Ok(())
}

/// One update of each enabled critic on a shared batch.
fn critic_round(state: &mut TrainState, data: &TrainingData, log: &mut dyn FnMut(LogRecord) -> Result<()>) -> Result<()> {
    let started = Instant::now();
    let cfg = state.config.clone();
    let b = cfg.effective_batch(data);
    let pairs = sample_target_pairs(data, &mut state.rng, b)?;
    let os = sample_open_source(data, &mut state.rng, b);

    let x_t = constant_images(&image_refs(pairs.iter().map(|p| &p.target)))?;
    let r_t = reference_input(&cfg, &image_refs(pairs.iter().map(|p| &p.masked_reference)))?;
    let model = state.model.bind(false);
    let fake_masks = no_grad(|| model.segment(&x_t, &r_t))?;
    let x_o = constant_images(&image_refs(os.iter().map(|s| &s.image)))?;
    let os_masks: Vec<BinaryMask> = os.iter().map(|s| s.mask.clone()).collect();
    let os_refs: Vec<&BinaryMask> = os_masks.iter().collect();
    let m_o = Var::constant(masks_to_tensor::<f32>(&os_refs)?);
    let (h, w) = os[0].image.hw();
    let range = cfg.radius_range(h, w);

    for side in cfg.ablations.sides() {
        let fake = make_fake_triplet(&x_t, &fake_masks, side)?;
        let real = make_real_triplet(&x_o, &m_o, side)?;
        let pseudo = if cfg.ablations.pseudo_triplet {
            Some(sample_pseudo_triplet(&x_o, &os_masks, &range, side, cfg.pseudo_morphology, &mut state.rng)?)
        } else {
            None
        };
        let eps: Vec<f32> = (0..b).map(|_| state.rng.random::<f32>()).collect();
        let (critic, opt) = match side {
            Side::Outer => (&mut state.outer, &mut state.outer_opt),
            Side::Inner => (&mut state.inner, &mut state.inner_opt),
        };
        let graph = critic.bind(true);
        let loss = critic_loss(&graph, &fake, pseudo.as_ref(), &real, &eps, cfg.weights.lambda)?;
        let total = loss.total.item() as f64;
        check_finite(state.updates, &format!("{side} critic loss"), total)?;
        let grads = grad(&loss.total, &graph.params().refs(), false);
        if !finite_grads(&grads) {
            return Err(Error::Diverged {
                step: state.updates,
                reason: format!("{side} critic gradient is not finite"),
            });
        }
        drop(graph);
        apply_update(opt, critic.params.tensors_mut(), &grads);
        state.updates += 1;
        let mut losses = BTreeMap::from([
            ("total".to_string(), total),
            ("d_fake".to_string(), loss.d_fake as f64),
            ("d_real".to_string(), loss.d_real as f64),
            ("penalty".to_string(), loss.penalty as f64),
        ]);
        if let Some(p) = loss.d_pseudo {
            losses.insert("d_pseudo".into(), p as f64);
        }
        log(LogRecord {
            update: state.updates,
            iteration: state.iteration,
            kind: UpdateKind::Critic,
            side: Some(side),
            losses,
            checksums: state.checksums(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
    }
    Ok(())
}

/// One segmenter update on the combined loss.
fn segmenter_step(state: &mut TrainState, data: &TrainingData, log: &mut dyn FnMut(LogRecord) -> Result<()>) -> Result<()> {
    let started = Instant::now();
    let cfg = state.config.clone();
    let weights = cfg.effective_weights();
    let b = cfg.effective_batch(data);
    let rng = &mut state.rng;

    let supervised = if weights.xi > 0.0 {
        let pairs = sample_supervised(data, rng, b, cfg.neg_ratio)?;
        let mut out = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (img, gt) = augment(&p.target, &p.gt, rng, &cfg.augment)?;
            out.push((img, gt, p.masked_reference));
        }
        Some(out)
    } else {
        None
    };
    let sides = cfg.ablations.sides();
    let unlabeled_needed = weights.zeta > 0.0 || weights.eta > 0.0 || !sides.is_empty();
    let pairs = if unlabeled_needed {
        Some(sample_target_pairs(data, rng, b)?)
    } else {
        None
    };
    let transforms: Vec<AffineTransform> = if weights.eta > 0.0 {
        (0..b).map(|_| sample_affine(rng, &cfg.self_supervision_transforms)).collect()
    } else {
        Vec::new()
    };

    let model = state.model.bind(true);
    let outer = state.outer.bind(false);
    let inner = state.inner.bind(false);
    let mut terms = SegLossTerms::default();

    if let Some(sup) = &supervised {
        let x = constant_images(&image_refs(sup.iter().map(|s| &s.0)))?;
        let r = reference_input(&cfg, &image_refs(sup.iter().map(|s| &s.2)))?;
        let gts: Vec<&BinaryMask> = sup.iter().map(|s| &s.1).collect();
        let gt = Var::constant(masks_to_tensor::<f32>(&gts)?);
        let pred = model.segment(&x, &r)?;
        terms.dice = Some(dice_loss(&pred, &gt, weights.tau)?);
    }
    if let Some(pairs) = &pairs {
        let x = constant_images(&image_refs(pairs.iter().map(|p| &p.target)))?;
        let r = reference_input(&cfg, &image_refs(pairs.iter().map(|p| &p.masked_reference)))?;
        let code = model.reference_code(&r)?;
        let m = model.segment_with_code(&x, &code)?;
        if weights.zeta > 0.0 {
            let seg_feats = match cfg.mmd_gradient {
                MmdGradient::MaskOnly => state.model.bind(false).pooled_features(&x.mul_b(&m))?,
                _ => model.pooled_features(&x.mul_b(&m))?,
            };
            let ref_feats = match cfg.arch.conditioning {
                Conditioning::Pooled => code.permute(&[1, 0]),
                Conditioning::Spatial => model.pooled_features(&r)?,
            };
            let ref_feats = match cfg.mmd_gradient {
                MmdGradient::Full => ref_feats,
                _ => ref_feats.detach(),
            };
            terms.rep = Some(mmd_loss(&seg_feats, &ref_feats, &cfg.mmd)?);
        }
        if weights.eta > 0.0 {
            let warped = warp_per_sample(&x, &transforms, Interpolation::Bilinear)?;
            let m_warped = model.segment_with_code(&warped, &code)?;
            terms.sel = Some(self_supervision_from_predictions(&m, &m_warped, &transforms, cfg.weight_map_radius)?);
        }
        for side in &sides {
            let fake = make_fake_triplet(&x, &m, *side)?;
            match side {
                Side::Outer => terms.d_outer = Some(outer.score(&fake)?.mean()),
                Side::Inner => terms.d_inner = Some(inner.score(&fake)?.mean()),
            }
        }
    }

    let total = total_seg_loss(&terms, &weights).map_err(|e| match e {
        Error::NonFiniteLoss { term } => Error::Diverged {
            step: state.updates,
            reason: format!("segmenter loss term {term} is not finite"),
        },
        e => e,
    })?;
    let total_value = total.item() as f64;
    check_finite(state.updates, "segmenter loss", total_value)?;
    let grads = grad(&total, &model.params().refs(), false);
    if !finite_grads(&grads) {
        return Err(Error::Diverged {
            step: state.updates,
            reason: "segmenter gradient is not finite".into(),
        });
    }
    drop(model);
    apply_update(&mut state.model_opt, state.model.params.tensors_mut(), &grads);
    state.updates += 1;
    state.iteration += 1;

    let mut losses = BTreeMap::from([("total".to_string(), total_value)]);
    let named = [
        ("dice", &terms.dice),
        ("rep", &terms.rep),
        ("sel", &terms.sel),
        ("d_outer", &terms.d_outer),
        ("d_inner", &terms.d_inner),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            losses.insert(name.to_string(), v.item() as f64);
        }
    }
    log(LogRecord {
        update: state.updates,
        iteration: state.iteration - 1,
        kind: UpdateKind::Segmenter,
        side: None,
        losses,
        checksums: state.checksums(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Trains until `until` segmenter updates have been made in total. Each
/// update is reported through `log`; `after_iteration` runs after every
/// segmenter update. On a non-finite loss or gradient the offending update
/// is not applied and [`Error::Diverged`] is returned.
pub fn train(
    state: &mut TrainState,
    data: &TrainingData,
    until: u64,
    log: &mut dyn FnMut(LogRecord) -> Result<()>,
    after_iteration: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    state.config.validate()?;
    if data.labeled.is_empty() {
        return Err(invalid("train", "no labeled images"));
    }
    let n_c = state.config.critic_steps as u64;
    while state.iteration < until {
        let critic_turn = match state.config.schedule {
            Schedule::Alternate => true,
            Schedule::Interval => state.iteration % n_c == 0,
        };
        if critic_turn && state.config.ablations.critics_enabled() {
            for _ in 0..n_c {
                critic_round(state, data, log)?;
            }
        }
        segmenter_step(state, data, log)?;
        after_iteration(state)?;
    }
    Ok(())
}
