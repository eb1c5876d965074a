//! Incremental-category sweep: the same training recipe on datasets with a
//! growing number of target categories, tabulated as per-category IoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_splits, DataConfig, Dataset, Split, TrainingData};
use crate::error::{invalid, Result};
use crate::eval::{evaluate, EvalOptions, MetricReport, Predictor};
use crate::train::{train, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Number of target categories in this run.
    pub categories: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Tab-separated table, one row per run and one column per category;
    /// `-` where a category was not part of the run.
    pub fn table(&self) -> String {
        let mut cats: Vec<&String> = Vec::new();
        for r in &self.rows {
            for c in r.report.per_category.keys() {
                if !cats.contains(&c) {
                    cats.push(c);
                }
            }
        }
        let mut out = String::from("categories");
        for c in &cats {
            write!(out, "\t{c}").expect("string write");
        }
        out.push_str("\tmiou\n");
        for r in &self.rows {
            write!(out, "{}", r.categories).expect("string write");
            for c in &cats {
                match r.report.per_category.get(*c).and_then(|p| p.metrics.iou_object) {
                    Some(v) => write!(out, "\t{v:.4}"),
                    None => write!(out, "\t-"),
                }
                .expect("string write");
            }
            writeln!(out, "\t{:.4}", r.report.metrics.miou).expect("string write");
        }
        out
    }
}

/// Trains one model per entry of `counts`, using the first `n` configured
/// target categories, under `root/n<count>`.
pub fn category_sweep(
    data: &DataConfig,
    config: &TrainConfig,
    counts: &[usize],
    root: &Path,
    progress: &mut dyn FnMut(usize, &MetricReport),
) -> Result<SweepReport> {
    if counts.is_empty() {
        return Err(invalid("category_sweep", "no category counts given"));
    }
    if let Some(&n) = counts.iter().find(|&&n| n == 0 || n > data.target_categories.len()) {
        return Err(invalid(
            "category_sweep",
            format!("count {n} outside 1..={}", data.target_categories.len()),
        ));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let cfg = DataConfig {
            target_categories: data.target_categories[..n].to_vec(),
            ..data.clone()
        };
        let dir = root.join(format!("n{n}"));
        build_splits(&cfg, config.seed, &dir)?;
        let ds = Dataset::open(&dir)?;
        let td = TrainingData::load(&ds, config.k)?;
        let mut state = TrainState::new(config.clone())?;
        train(&mut state, &td, config.max_iterations, &mut |_| Ok(()), &mut |_| Ok(()))?;
        let predictor = Predictor::Model {
            net: &state.model,
            condition: config.ablations.condition,
        };
        let report = evaluate(predictor, &ds, Split::Heldout, &EvalOptions::default())?;
        progress(n, &report);
        rows.push(SweepRow { categories: n, report });
    }
    Ok(SweepReport { rows })
}

/// Per-category object IoU of each row, keyed by category.
pub fn iou_by_category(report: &SweepReport) -> BTreeMap<String, Vec<(usize, Option<f64>)>> {
    let mut out: BTreeMap<String, Vec<(usize, Option<f64>)>> = BTreeMap::new();
    for r in &report.rows {
        for (c, p) in &r.report.per_category {
            out.entry(c.clone()).or_default().push((r.categories, p.metrics.iou_object));
        }
    }
    out
}
