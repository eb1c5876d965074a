//! Binary segmentation metrics and the held-out evaluation protocol.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use refnet_tensor::no_grad;
use refnet_tensor::Var;
use serde::{Deserialize, Serialize};

use crate::convert::{images_to_tensor, tensor_to_soft_masks};
use crate::dataset::{Dataset, Split, TrainingData};
use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, Image, SoftMask};
use crate::model::RefSegNet;

/// Threshold applied to soft masks wherever metrics are computed.
pub const THRESHOLD: f32 = 0.5;

/// Pixel counts with the object as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.hw() != gt.hw() {
        let (a, b) = (pred.hw(), gt.hw());
        return Err(Error::ShapeMismatch {
            op: "confusion_counts",
            lhs: vec![a.0, a.1],
            rhs: vec![b.0, b.1],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pa: f64,
    pub mpa: f64,
    pub miou: f64,
    pub fwiou: f64,
    /// `None` when the class occurs in neither prediction nor ground truth.
    pub iou_object: Option<f64>,
    pub iou_background: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// PA, MPA, MIoU and FWIoU over the object and background classes. Class
/// accuracy needs the class in the ground truth; class IoU needs it in the
/// prediction or the ground truth. Absent classes are left out of the means.
pub fn metrics_from_counts(c: &ConfusionCounts) -> Result<Metrics> {
    let n = c.total();
    if n == 0 {
        return Err(invalid("metrics_from_counts", "all counts are zero"));
    }
    let gt_obj = c.tp + c.fn_;
    let gt_bg = c.tn + c.fp;
    let acc = [ratio(c.tp, gt_obj), ratio(c.tn, gt_bg)];
    let iou_object = ratio(c.tp, c.tp + c.fp + c.fn_);
    let iou_background = ratio(c.tn, c.tn + c.fp + c.fn_);
    let fwiou = (gt_obj as f64 * iou_object.unwrap_or(0.0) + gt_bg as f64 * iou_background.unwrap_or(0.0)) / n as f64;
    Ok(Metrics {
        pa: (c.tp + c.tn) as f64 / n as f64,
        mpa: mean(&acc),
        miou: mean(&[iou_object, iou_background]),
        fwiou,
        iou_object,
        iou_background,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub pairs: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub per_category: BTreeMap<String, CategoryReport>,
}

impl MetricReport {
    pub fn summary_line(&self) -> String {
        let m = &self.metrics;
        format!("PA {:.4} MPA {:.4} MIoU {:.4} FWIoU {:.4}", m.pa, m.mpa, m.miou, m.fwiou)
    }

    fn from_pairs(pairs: &[(String, ConfusionCounts)]) -> Result<Self> {
        let mut per: BTreeMap<String, (usize, ConfusionCounts)> = BTreeMap::new();
        for (cat, c) in pairs {
            let e = per.entry(cat.clone()).or_default();
            e.0 += 1;
            e.1 += *c;
        }
        let per_category = per
            .into_iter()
            .map(|(cat, (n, counts))| {
                Ok((
                    cat,
                    CategoryReport {
                        pairs: n,
                        counts,
                        metrics: metrics_from_counts(&counts)?,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let counts = per_category.values().fold(ConfusionCounts::default(), |a, r| a + r.counts);
        Ok(Self {
            pairs: pairs.len(),
            metrics: metrics_from_counts(&counts)?,
            counts,
            per_category,
        })
    }
}

/// Which references condition each prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The first reference record of the category.
    #[default]
    First,
    /// Soft predictions averaged over every reference of the category.
    Averaged,
}

/// What produces the predictions.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// `condition == false` feeds a zero reference, matching a model trained
    /// without conditioning.
    Model { net: &'a RefSegNet<f32>, condition: bool },
    /// Returns the ground truth; exercises the protocol end to end.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub reference_mode: ReferenceMode,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            reference_mode: ReferenceMode::First,
            batch_size: 16,
        }
    }
}

/// Masked reference images per category, in index order.
pub fn reference_images(ds: &Dataset) -> Result<BTreeMap<String, Vec<Image>>> {
    let mut out: BTreeMap<String, Vec<Image>> = BTreeMap::new();
    for (i, r) in ds.index().split(Split::Reference) {
        let cat = r.category.clone().expect("validated reference record");
        let m = ds.mask(i, &cat)?;
        out.entry(cat).or_default().push(ds.image(i).masked(&m.to_f32())?);
    }
    Ok(out)
}

/// Soft predictions for `(target, masked reference)` pairs in batches.
pub fn predict_pairs(
    net: &RefSegNet<f32>,
    pairs: &[(&Image, &Image)],
    condition: bool,
    batch_size: usize,
) -> Result<Vec<SoftMask>> {
    let mut out = Vec::with_capacity(pairs.len());
    let graph = net.bind(false);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let targets: Vec<&Image> = chunk.iter().map(|p| p.0).collect();
        let refs: Vec<&Image> = chunk.iter().map(|p| p.1).collect();
        let x = Var::constant(images_to_tensor::<f32>(&targets)?);
        let mut r = images_to_tensor::<f32>(&refs)?;
        if !condition {
            r.data_mut().fill(0.0);
        }
        let r = Var::constant(r);
        let m = no_grad(|| graph.segment(&x, &r))?;
        out.extend(tensor_to_soft_masks(m.value())?);
    }
    Ok(out)
}

fn average(masks: &[SoftMask]) -> Result<SoftMask> {
    let (h, w) = masks[0].hw();
    let mut acc = vec![0f32; h * w];
    for m in masks {
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let k = masks.len() as f32;
    SoftMask::new(h, w, acc.into_iter().map(|v| (v / k).clamp(0.0, 1.0)).collect())
}

/// Evaluates every (image, category) pair of `split`, using the categories
/// each image contains.
pub fn evaluate(predictor: Predictor<'_>, ds: &Dataset, split: Split, opts: &EvalOptions) -> Result<MetricReport> {
    let refs = reference_images(ds)?;
    let mut jobs: Vec<(usize, String)> = Vec::new();
    for (i, r) in ds.index().split(split) {
        for c in &r.categories {
            if !refs.contains_key(c) {
                return Err(Error::Dataset(format!("category {c:?} has no reference")));
            }
            jobs.push((i, c.clone()));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} has nothing to evaluate")));
    }
    let gts = jobs.iter().map(|(i, c)| ds.mask(*i, c)).collect::<Result<Vec<_>>>()?;
    let preds: Vec<BinaryMask> = match predictor {
        Predictor::Oracle => gts.clone(),
        Predictor::Model { net, condition } => {
            let per_ref = match opts.reference_mode {
                ReferenceMode::First => 1,
                ReferenceMode::Averaged => usize::MAX,
            };
            let mut pairs: Vec<(&Image, &Image)> = Vec::new();
            let mut owners: Vec<usize> = Vec::new();
            for (j, (i, c)) in jobs.iter().enumerate() {
                for r in refs[c].iter().take(per_ref) {
                    pairs.push((ds.image(*i), r));
                    owners.push(j);
                }
            }
            let soft = predict_pairs(net, &pairs, condition, opts.batch_size)?;
            let mut grouped: Vec<Vec<SoftMask>> = vec![Vec::new(); jobs.len()];
            for (m, j) in soft.into_iter().zip(owners) {
                grouped[j].push(m);
            }
            grouped
                .iter()
                .map(|g| Ok(average(g)?.binarize(THRESHOLD)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let counted = jobs
        .iter()
        .zip(preds.iter().zip(&gts))
        .map(|((_, c), (p, g))| Ok((c.clone(), confusion_counts(p, g)?)))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_pairs(&counted)
}

/// Mean binarized foreground fraction over soft masks.
pub fn foreground_fraction(masks: &[SoftMask]) -> f64 {
    let per: Vec<f64> = masks
        .iter()
        .map(|m| m.binarize(THRESHOLD).count() as f64 / m.data().len() as f64)
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

/// Dice loss of binarized predictions over every positive labeled pair.
///
/// Each labeled image is paired with the first other reference of each
/// category it contains; counts are pooled over all pairs like the training
/// loss, with smoothing `tau`.
pub fn training_dice(net: &RefSegNet<f32>, data: &TrainingData, condition: bool, tau: f64, batch_size: usize) -> Result<f64> {
    let mut refs: Vec<Image> = Vec::new();
    let mut jobs: Vec<(usize, &BinaryMask)> = Vec::new();
    for (i, l) in data.labeled.iter().enumerate() {
        for (cat, gt) in &l.masks {
            let Some(&j) = data.references.get(cat).and_then(|r| r.iter().find(|&&j| j != i)) else {
                continue;
            };
            let r = &data.labeled[j];
            refs.push(r.image.masked(&r.masks[cat].to_f32())?);
            jobs.push((i, gt));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Dataset("no labeled pair has a distinct reference".into()));
    }
    let pairs: Vec<(&Image, &Image)> = jobs.iter().zip(&refs).map(|((i, _), r)| (&data.labeled[*i].image, r)).collect();
    let soft = predict_pairs(net, &pairs, condition, batch_size)?;
    let (mut inter, mut total) = (0u64, 0u64);
    for (p, (_, gt)) in soft.iter().zip(&jobs) {
        let b = p.binarize(THRESHOLD);
        inter += b.data().iter().zip(gt.data()).filter(|(a, g)| **a != 0 && **g != 0).count() as u64;
        total += (b.count() + gt.count()) as u64;
    }
    Ok(1.0 - (2.0 * inter as f64 + tau) / (total as f64 + tau))
}
