use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use refnet::checkpoint;
use refnet::dataset::{build_splits, read_image, read_mask, write_mask, write_soft_mask, Dataset, Split, TrainingData};
use refnet::eval::{evaluate, MetricReport, Predictor, THRESHOLD};
use refnet::sweep::category_sweep;
use refnet::train::{train, LogRecord, Toggle, TrainConfig, TrainState, UpdateKind};
use refnet::Error;

use crate::config::CliConfig;
use crate::plot;
use crate::{Ablate, Command, Eval, GenData, Predict, SplitArg, Sweep, Train, TrainFlags};

/// Misuse that clap cannot detect; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::CategorySweep(a) => sweep(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn data_dir(flag: Option<PathBuf>, cfg: &CliConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| UsageError("no dataset: pass --data or set paths.data in the config".into()).into())
}

fn apply_flags(cfg: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.max_iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.segmenter_optimizer.lr = v;
    }
    if let Some(v) = f.critic_steps {
        cfg.critic_steps = v;
    }
    if let Some(v) = f.neg_ratio {
        cfg.neg_ratio = v;
    }
    if f.k.is_some() {
        cfg.k = f.k;
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let index = build_splits(&cfg.data, a.seed, &a.out).with_context(|| format!("generating into {}", a.out.display()))?;
    for split in [Split::Target, Split::Reference, Split::OpenSource, Split::Heldout] {
        let cats: Vec<String> = index.categories(split).into_iter().collect();
        println!("{split:?}: {} records, categories {}", index.split(split).count(), cats.join(","));
    }
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()
        .with_context(|| format!("reading log {}", path.display()))
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(w.flush()?)
}

fn loss_plots(records: &[LogRecord], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let series = |kind: UpdateKind, keys: &[&str]| -> Vec<(String, Vec<(f64, f64)>)> {
        keys.iter()
            .map(|k| {
                let pts = records
                    .iter()
                    .filter(|r| r.kind == kind)
                    .filter_map(|r| r.losses.get(*k).map(|v| (r.update as f64, *v)))
                    .collect();
                (k.to_string(), pts)
            })
            .collect()
    };
    let seg = ["dice", "rep", "sel", "d_outer", "d_inner"];
    plot::line_chart(&series(UpdateKind::Segmenter, &seg), &dir.join("segmenter_losses.png"))?;
    plot::line_chart(&series(UpdateKind::Critic, &["total"]), &dir.join("critic_losses.png"))?;
    eprintln!("plot colors in order: {}", seg.join(", "));
    Ok(())
}

/// Trains `state` up to its configured iteration count, logging to
/// `out/train.log` and checkpointing under `out`.
fn run_training(mut state: TrainState, data: &TrainingData, out: &Path, mut log: Vec<LogRecord>) -> Result<(TrainState, Vec<LogRecord>)> {
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let log_path = out.join("train.log");
    write_log(&log_path, &log)?;
    let mut writer = BufWriter::new(
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?,
    );
    let until = state.config.max_iterations;
    let every = state.config.checkpoint_every;
    let mut last_good = state.clone();
    let mut write_err: Option<std::io::Error> = None;
    let last_dice = std::cell::Cell::new(None);
    let result = train(
        &mut state,
        data,
        until,
        &mut |r| {
            if let Err(e) = serde_json::to_writer(&mut writer, &r).map_err(std::io::Error::from).and_then(|_| writer.write_all(b"\n")) {
                write_err.get_or_insert(e);
            }
            if let Some(d) = r.losses.get("dice") {
                last_dice.set(Some(*d));
            }
            log.push(r);
            Ok(())
        },
        &mut |s| {
            last_good = s.clone();
            if s.iteration % 50 == 0 || s.iteration == until {
                match last_dice.get() {
                    Some(d) => eprintln!("iteration {}/{until} dice {d:.4}", s.iteration),
                    None => eprintln!("iteration {}/{until}", s.iteration),
                }
            }
            if every > 0 && s.iteration % every == 0 {
                checkpoint::save(s, &ckpt_dir.join(format!("step-{:06}.ckpt", s.iteration)))?;
                checkpoint::save(s, &out.join("latest.ckpt"))?;
            }
            Ok(())
        },
    );
    writer.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing training log");
    }
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            let path = out.join("last_good.ckpt");
            checkpoint::save(&last_good, &path)?;
            eprintln!(
                "last good state (iteration {}) saved to {}",
                last_good.iteration,
                path.display()
            );
        }
        return Err(e.into());
    }
    checkpoint::save(&state, &out.join("final.ckpt"))?;
    checkpoint::save(&state, &out.join("latest.ckpt"))?;
    Ok((state, log))
}

fn cmd_train(a: Train) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    apply_flags(&mut cfg.train, &a.flags);
    for t in &a.ablate {
        t.apply(&mut cfg.train.ablations);
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    let data = data_dir(a.data, &cfg)?;
    create_dir(&a.out)?;

    let (state, log) = if a.resume {
        let path = a.out.join("latest.ckpt");
        let mut state = checkpoint::load(&path).with_context(|| "resuming; run without --resume to start fresh")?;
        if a.config.is_some() {
            checkpoint::check_arch(&state, &cfg.train.arch)?;
        }
        if let Some(v) = a.flags.max_iterations {
            state.config.max_iterations = v;
        }
        let updates = state.updates;
        let log: Vec<LogRecord> = read_log(&a.out.join("train.log"))?.into_iter().filter(|r| r.update <= updates).collect();
        eprintln!("resuming at iteration {} ({} log records kept)", state.iteration, log.len());
        (state, log)
    } else {
        (TrainState::new(cfg.train.clone())?, Vec::new())
    };
    let mut effective = cfg.clone();
    effective.train = state.config.clone();
    effective.paths.data = Some(data.clone());
    write_file(&a.out.join("config.toml"), effective.to_toml()?)?;

    let ds = Dataset::open(&data)?;
    let td = TrainingData::load(&ds, state.config.k)?;
    let counts: Vec<String> = td.references.iter().map(|(c, r)| format!("{c}={}", r.len())).collect();
    eprintln!("references per category: {}", counts.join(", "));
    let (state, log) = run_training(state, &td, &a.out, log)?;
    if a.plot {
        loss_plots(&log, &a.out.join("plots"))?;
    }
    println!(
        "trained {} iterations ({} updates); checkpoint {}",
        state.iteration,
        state.updates,
        a.out.join("final.ckpt").display()
    );
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Heldout => Split::Heldout,
        SplitArg::Target => Split::Target,
        SplitArg::Reference => Split::Reference,
    }
}

fn iou_plot(report: &MetricReport, path: &Path) -> Result<()> {
    let bars: Vec<(String, f64)> = report
        .per_category
        .iter()
        .map(|(c, r)| (c.clone(), r.metrics.iou_object.unwrap_or(0.0)))
        .collect();
    plot::bar_chart(&bars, path)?;
    let names: Vec<&str> = bars.iter().map(|b| b.0.as_str()).collect();
    eprintln!("bars in order: {}", names.join(", "));
    Ok(())
}

fn cmd_eval(a: Eval) -> Result<()> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let data = data_dir(a.data, &cfg)?;
    let mut opts = cfg.eval;
    if let Some(m) = a.reference_mode {
        opts.reference_mode = m.into();
    }
    let ds = Dataset::open(&data)?;
    let state = match (&a.checkpoint, a.oracle_stub) {
        (_, true) => None,
        (Some(p), false) => {
            let s = checkpoint::load(p)?;
            if a.config.is_some() {
                checkpoint::check_arch(&s, &cfg.train.arch)?;
            }
            Some(s)
        }
        (None, false) => bail!(UsageError("--checkpoint is required".into())),
    };
    let predictor = match &state {
        None => Predictor::Oracle,
        Some(s) => Predictor::Model {
            net: &s.model,
            condition: s.config.ablations.condition,
        },
    };
    let report = evaluate(predictor, &ds, split_of(a.split), &opts)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&a.report, serde_json::to_string_pretty(&report)?)?;
    if a.plot {
        let stem = a.report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        iou_plot(&report, &a.report.with_file_name(format!("{stem}_iou.png")))?;
    }
    println!("{}", report.summary_line());
    Ok(())
}

fn predict(a: Predict) -> Result<()> {
    let net = checkpoint::load_model(&a.checkpoint)?;
    let target = read_image(&a.image)?;
    let reference = read_image(&a.reference_image)?;
    let mask = read_mask(&a.reference_mask)?;
    if reference.hw() != mask.hw() {
        bail!(
            "reference image is {:?} but its mask is {:?}",
            reference.hw(),
            mask.hw()
        );
    }
    if reference.hw() != target.hw() {
        bail!(
            "reference {:?} and target {:?} must have the same size",
            reference.hw(),
            target.hw()
        );
    }
    let (h, w) = target.hw();
    let k = net.arch.stride();
    let (ph, pw) = (h.div_ceil(k) * k, w.div_ceil(k) * k);
    let (target, reference, mask) = if (ph, pw) != (h, w) {
        eprintln!("warning: {h}x{w} is not a multiple of {k}; reflect-padding to {ph}x{pw} and cropping the result");
        (
            target.pad_reflect(ph, pw)?,
            reference.pad_reflect(ph, pw)?,
            mask.pad_reflect(ph, pw)?,
        )
    } else {
        (target, reference, mask)
    };
    let soft = net.segment_image(&target, &reference, &mask)?.crop(h, w)?;
    create_dir(&a.out)?;
    let mask_path = a.out.join("mask.png");
    write_mask(&soft.binarize(THRESHOLD), &mask_path)?;
    if a.soft {
        write_soft_mask(&soft, &a.out.join("soft_mask.png"))?;
    }
    println!("{}", mask_path.display());
    Ok(())
}

fn variant_name(t: Option<Toggle>) -> String {
    t.map_or_else(|| "full".to_string(), |t| format!("no-{t}"))
}

fn ablate(a: Ablate) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    apply_flags(&mut cfg.train, &a.flags);
    let data = data_dir(a.data, &cfg)?;
    let ds = Dataset::open(&data)?;
    let td = TrainingData::load(&ds, cfg.train.k)?;
    create_dir(&a.out)?;
    let toggles = if a.variants.is_empty() { Toggle::ALL.to_vec() } else { a.variants.clone() };
    let mut table = String::from("variant\tpa\tmpa\tmiou\tfwiou\n");
    let mut bars = Vec::new();
    for t in std::iter::once(None).chain(toggles.into_iter().map(Some)) {
        let name = variant_name(t);
        let mut tc = cfg.train.clone();
        if let Some(t) = t {
            t.apply(&mut tc.ablations);
        }
        let dir = a.out.join(&name);
        create_dir(&dir)?;
        eprintln!("training {name}");
        let (state, _) = run_training(TrainState::new(tc)?, &td, &dir, Vec::new())?;
        let predictor = Predictor::Model {
            net: &state.model,
            condition: state.config.ablations.condition,
        };
        let report = evaluate(predictor, &ds, Split::Heldout, &cfg.eval)?;
        write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        let m = &report.metrics;
        table.push_str(&format!("{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n", m.pa, m.mpa, m.miou, m.fwiou));
        bars.push((name, m.miou));
    }
    write_file(&a.out.join("ablation.tsv"), &table)?;
    if a.plot {
        plot::bar_chart(&bars, &a.out.join("ablation_miou.png"))?;
    }
    print!("{table}");
    Ok(())
}

fn sweep(a: Sweep) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    apply_flags(&mut cfg.train, &a.flags);
    let counts = if a.counts.is_empty() {
        (1..=cfg.data.target_categories.len()).collect()
    } else {
        a.counts.clone()
    };
    create_dir(&a.out)?;
    let report = category_sweep(&cfg.data, &cfg.train, &counts, &a.out.join("datasets"), &mut |n, r| {
        eprintln!("{n} categories: {}", r.summary_line());
    })?;
    let table = report.table();
    write_file(&a.out.join("sweep.tsv"), &table)?;
    write_file(&a.out.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    if a.plot {
        let bars: Vec<(String, f64)> = report.rows.iter().map(|r| (r.categories.to_string(), r.report.metrics.miou)).collect();
        plot::bar_chart(&bars, &a.out.join("sweep_miou.png"))?;
    }
    print!("{table}");
    Ok(())
}
