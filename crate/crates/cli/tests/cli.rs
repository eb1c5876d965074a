use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use refnet::dataset::{read_mask, write_image, write_mask, Dataset, Split};
use refnet::image::{BinaryMask, Image};
use refnet::train::LogRecord;
use refnet_cli::config::CliConfig;

fn refnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refnet"))
        .args(args)
        .env("REFNET_NUM_WORKERS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = refnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[data]
height = 32
width = 32
target_count = 12
open_source_count = 8
heldout_count = 3
references_per_category = 2

[train]
batch_size = 2
max_iterations = 2
checkpoint_every = 1

[train.arch]
base_width = 4
depth = 2
max_width = 8
norm_groups = 2

[train.critic]
base_width = 4
"#;

/// Writes the tiny config and generates its dataset.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--seed", "5"]);
    (cfg, data)
}

fn read_log(path: &Path) -> Vec<LogRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<LogRecord>(l).unwrap().without_timing())
        .collect()
}

#[test]
fn config_round_trip_and_unknown_keys() {
    let default = CliConfig::default();
    assert_eq!(CliConfig::parse(&default.to_toml().unwrap()).unwrap(), default);
    let tiny = CliConfig::parse(TINY).unwrap();
    assert_eq!(tiny.train.arch.base_width, 4);
    assert_eq!(tiny.train.segmenter_optimizer, default.train.segmenter_optimizer);
    let again = CliConfig::parse(&tiny.to_toml().unwrap()).unwrap();
    assert_eq!(again, tiny);
    assert!(CliConfig::parse("[train]\nbogus = 1\n").is_err());
    assert!(CliConfig::parse("[nonsense]\n").is_err());
}

#[test]
fn shipped_smoke_config_matches_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = CliConfig::parse(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg.train, refnet::train::TrainConfig::smoke());
    assert_eq!(cfg.data, CliConfig::default().data);
}

#[test]
fn gen_data_is_reproducible_and_reports_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&["gen-data", "--out", s(&a), "--seed", "3"]);
    ok(&["gen-data", "--out", s(&b), "--seed", "3"]);
    assert_eq!(fs::read(a.join("index.jsonl")).unwrap(), fs::read(b.join("index.jsonl")).unwrap());
    let text = stdout(&out);
    assert!(text.contains("circle,square,triangle"), "{text}");
    assert!(text.contains("cross,ring,star"), "{text}");

    assert_eq!(refnet(&["gen-data"]).status.code(), Some(2));
    assert_eq!(refnet(&["no-such-command"]).status.code(), Some(2));
    let blocked = dir.path().join("file");
    fs::write(&blocked, "x").unwrap();
    let r = refnet(&["gen-data", "--out", s(&blocked.join("sub"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr(&r).contains("error"));
}

#[test]
fn train_resume_eval_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());

    let bad = refnet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("x")), "--ablate", "bogus"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("self, cond, pseudo, inner, outer, dice"), "{}", stderr(&bad));
    let no_data = refnet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(no_data.status.code(), Some(2));

    // uninterrupted reference run, with a flag overriding the config
    let straight = dir.path().join("straight");
    let out = ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight), "--max-iterations", "3", "--k", "1", "--plot",
    ]);
    assert!(stdout(&out).contains("trained 3 iterations"));
    assert!(stderr(&out).contains("circle=1, square=1, triangle=1"), "{}", stderr(&out));
    assert!(straight.join("plots/segmenter_losses.png").exists());
    for f in ["final.ckpt", "latest.ckpt", "checkpoints/step-000002.ckpt", "config.toml"] {
        assert!(straight.join(f).exists(), "{f}");
    }
    let effective = CliConfig::parse(&fs::read_to_string(straight.join("config.toml")).unwrap()).unwrap();
    assert_eq!((effective.train.max_iterations, effective.train.k), (3, Some(1)));

    // interrupted at 2, then resumed to 3
    let resumed = dir.path().join("resumed");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&resumed), "--k", "1"]);
    let r = ok(&["train", "--data", s(&data), "--out", s(&resumed), "--resume", "--max-iterations", "3"]);
    assert!(stderr(&r).contains("resuming at iteration 2"));
    assert_eq!(read_log(&resumed.join("train.log")), read_log(&straight.join("train.log")));
    assert_eq!(fs::read(resumed.join("final.ckpt")).unwrap(), fs::read(straight.join("final.ckpt")).unwrap());

    // evaluation
    let ckpt = straight.join("final.ckpt");
    let report = dir.path().join("eval/report.json");
    let e1 = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--report", s(&report), "--plot"]);
    let first = fs::read(&report).unwrap();
    let e2 = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(first, fs::read(&report).unwrap());
    assert_eq!(stdout(&e1), stdout(&e2));
    assert!(stdout(&e1).starts_with("PA "));
    assert!(dir.path().join("eval/report_iou.png").exists());
    let parsed: refnet::eval::MetricReport = serde_json::from_slice(&first).unwrap();
    let sum = parsed
        .per_category
        .values()
        .fold(refnet::eval::ConfusionCounts::default(), |a, c| a + c.counts);
    assert_eq!(sum, parsed.counts);

    let oracle = ok(&["eval", "--oracle-stub", "--data", s(&data), "--report", s(&dir.path().join("oracle.json"))]);
    assert!(stdout(&oracle).starts_with("PA 1.0000 MPA 1.0000 MIoU 1.0000 FWIoU 1.0000"));

    let wide = dir.path().join("wide.toml");
    fs::write(&wide, TINY.replace("base_width = 4\ndepth", "base_width = 8\ndepth")).unwrap();
    let mismatch = refnet(&["eval", "--checkpoint", s(&ckpt), "--config", s(&wide), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(mismatch.status.code(), Some(1));
    let msg = stderr(&mismatch);
    assert!(msg.contains("base_width=4") && msg.contains("base_width=8"), "{msg}");

    // prediction on a size that is not a multiple of the stride
    let ds = Dataset::open(&data).unwrap();
    let (ri, rec) = ds.index().split(Split::Reference).next().unwrap();
    let cat = rec.category.clone().unwrap();
    let crop = |img: &Image| Image::from_fn(30, 29, 3, |c, y, x| img.get(c, y, x));
    let ref_mask = ds.mask(ri, &cat).unwrap();
    let files = dir.path().join("inputs");
    fs::create_dir_all(&files).unwrap();
    write_image(&crop(ds.image(ri)), &files.join("ref.png")).unwrap();
    write_mask(&BinaryMask::from_fn(30, 29, |y, x| ref_mask.get(y, x)), &files.join("ref_mask.png")).unwrap();
    let (ti, _) = ds.index().split(Split::Heldout).next().unwrap();
    write_image(&crop(ds.image(ti)), &files.join("target.png")).unwrap();
    let predict = |out: &Path| {
        refnet(&[
            "predict",
            "--checkpoint", s(&ckpt),
            "--image", s(&files.join("target.png")),
            "--reference-image", s(&files.join("ref.png")),
            "--reference-mask", s(&files.join("ref_mask.png")),
            "--out", s(out),
            "--soft",
        ])
    };
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    let r1 = predict(&p1);
    assert!(r1.status.success(), "{}", stderr(&r1));
    assert!(stderr(&r1).contains("warning"), "{}", stderr(&r1));
    assert!(predict(&p2).status.success());
    let mask = read_mask(&p1.join("mask.png")).unwrap();
    assert_eq!(mask.hw(), (30, 29));
    assert_eq!(fs::read(p1.join("mask.png")).unwrap(), fs::read(p2.join("mask.png")).unwrap());
    assert_eq!(fs::read(p1.join("soft_mask.png")).unwrap(), fs::read(p2.join("soft_mask.png")).unwrap());
}

#[test]
fn ablate_and_sweep_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let abl = dir.path().join("ablate");
    let out = ok(&[
        "ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&abl), "--variants", "dice,inner",
        "--max-iterations", "1", "--plot",
    ]);
    let table = stdout(&out);
    let rows: Vec<&str> = table.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, vec!["variant", "full", "no-dice", "no-inner"]);
    assert_eq!(fs::read_to_string(abl.join("ablation.tsv")).unwrap(), table);
    assert!(abl.join("no-dice/report.json").exists());
    assert!(abl.join("ablation_miou.png").exists());

    let sweep = dir.path().join("sweep");
    let out = ok(&["category-sweep", "--config", s(&cfg), "--out", s(&sweep), "--counts", "1,2", "--max-iterations", "0"]);
    let table = stdout(&out);
    assert!(table.starts_with("categories\tcircle\tsquare\tmiou\n"), "{table}");
    assert_eq!(table.lines().count(), 3);
    assert!(sweep.join("sweep.json").exists());
    assert_eq!(refnet(&["category-sweep", "--config", s(&cfg), "--out", s(&sweep), "--counts", "9"]).status.code(), Some(1));
}

const SINGLE: &str = r#"
[data]
height = 32
width = 32
target_categories = ["circle"]
target_count = 6
open_source_count = 6
heldout_count = 2
references_per_category = 1

[train]
batch_size = 1
max_iterations = 600
neg_ratio = 0.0
checkpoint_every = 0

[train.augment]
enabled = false

[train.segmenter_optimizer]
lr = 0.001

[train.arch]
base_width = 8
depth = 2
max_width = 16
norm_groups = 2

[train.critic]
base_width = 4

[train.weights]
zeta = 0.01
eta = 0.02
adv = 0.001
"#;

/// One labeled image, trained to memorization, then segmented through the CLI.
#[test]
fn overfit_checkpoint_reproduces_its_training_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("single.toml");
    fs::write(&cfg, SINGLE).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--seed", "2"]);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);

    let ds = Dataset::open(&data).unwrap();
    let (i, rec) = ds.index().split(Split::Reference).next().unwrap();
    let gt = ds.mask(i, rec.category.as_deref().unwrap()).unwrap();
    let files = dir.path().join("inputs");
    fs::create_dir_all(&files).unwrap();
    write_image(ds.image(i), &files.join("x.png")).unwrap();
    write_mask(&gt, &files.join("m.png")).unwrap();
    let out = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint", s(&run.join("final.ckpt")),
        "--image", s(&files.join("x.png")),
        "--reference-image", s(&files.join("x.png")),
        "--reference-mask", s(&files.join("m.png")),
        "--out", s(&out),
    ]);
    let pred = read_mask(&out.join("mask.png")).unwrap();
    let both = pred.data().iter().zip(gt.data()).filter(|(p, g)| **p == 1 && **g == 1).count();
    let either = pred.data().iter().zip(gt.data()).filter(|(p, g)| **p == 1 || **g == 1).count();
    let iou = both as f64 / either as f64;
    assert!(iou >= 0.95, "object IoU {iou}");
}
