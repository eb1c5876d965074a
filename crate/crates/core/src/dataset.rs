//! On-disk datasets: generation of the target / reference / open-source /
//! held-out splits, loading with a mask-access audit, batch sampling with
//! negative pairs, and paired augmentation.
//!
//! Layout: `images/<id>.png`, `masks/<category>/<id>.png` and `index.jsonl`
//! with one record per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::affine::{apply_affine_image, apply_affine_mask, sample_affine, AffineRanges, Interpolation};
use crate::error::{invalid, io_err, Error, Result};
use crate::image::{BinaryMask, Image, SoftMask};
use crate::params::Fnv;
use crate::synth::{generate_scene, Shape, ShapeSceneSpec};

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Target,
    Reference,
    OpenSource,
    Heldout,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Target, Split::Reference, Split::OpenSource, Split::Heldout];

    fn slot(self) -> usize {
        self as usize
    }
}

/// One line of the index. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub id: String,
    pub split: Split,
    pub path: String,
    pub masks: BTreeMap<String, String>,
    pub categories: Vec<String>,
    /// Category a reference record stands for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub records: Vec<IndexRecord>,
}

impl DatasetIndex {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("index line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let index = Self { records };
        index.validate()?;
        Ok(index)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(INDEX_FILE);
        fs::write(&path, self.to_jsonl()?).map_err(io_err(path))
    }

    /// FNV-1a of the serialized index.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = Fnv::default();
        h.bytes(self.to_jsonl()?.as_bytes());
        Ok(h.0)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &IndexRecord)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Union of the categories present in a split.
    pub fn categories(&self, split: Split) -> BTreeSet<String> {
        self.split(split).flat_map(|(_, r)| r.categories.iter().cloned()).collect()
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(Error::Dataset(format!("duplicate record id {:?}", r.id)));
            }
            if let Some(c) = r.categories.iter().find(|c| !r.masks.contains_key(*c)) {
                return Err(Error::Dataset(format!("record {:?} lists {c:?} without a mask", r.id)));
            }
            match (r.split, &r.category) {
                (Split::Reference, Some(c)) if r.masks.contains_key(c) => {}
                (Split::Reference, _) => {
                    return Err(Error::Dataset(format!("reference record {:?} needs a category with a mask", r.id)))
                }
                (_, Some(_)) => return Err(Error::Dataset(format!("record {:?} is not a reference but names a category", r.id))),
                _ => {}
            }
        }
        let target = self.categories(Split::Target);
        let reference: BTreeSet<String> = self.split(Split::Reference).filter_map(|(_, r)| r.category.clone()).collect();
        if let Some(c) = reference.iter().find(|c| !target.contains(*c)) {
            return Err(Error::Dataset(format!("reference category {c:?} does not occur in the target split")));
        }
        Ok(())
    }
}

/// Generator settings for a full dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub target_categories: Vec<Shape>,
    pub open_source_categories: Vec<Shape>,
    pub objects_per_scene: [usize; 2],
    pub size_range: [f64; 2],
    pub color_jitter: f32,
    pub texture: f32,
    pub noise: f32,
    pub target_count: usize,
    pub open_source_count: usize,
    pub heldout_count: usize,
    pub references_per_category: usize,
    pub require_disjoint: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = ShapeSceneSpec::default();
        Self {
            height: scene.height,
            width: scene.width,
            target_categories: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            open_source_categories: vec![Shape::Cross, Shape::Star, Shape::Ring],
            objects_per_scene: scene.objects_per_scene,
            size_range: scene.size_range,
            color_jitter: scene.color_jitter,
            texture: scene.texture,
            noise: scene.noise,
            target_count: 200,
            open_source_count: 300,
            heldout_count: 60,
            references_per_category: 10,
            require_disjoint: true,
        }
    }
}

impl DataConfig {
    pub fn scene_spec(&self, categories: &[Shape]) -> ShapeSceneSpec {
        ShapeSceneSpec {
            height: self.height,
            width: self.width,
            categories: categories.to_vec(),
            objects_per_scene: self.objects_per_scene,
            size_range: self.size_range,
            color_jitter: self.color_jitter,
            texture: self.texture,
            noise: self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_categories.is_empty() || self.open_source_categories.is_empty() {
            return Err(Error::Config("both category lists must be non-empty".into()));
        }
        if self.objects_per_scene[0] == 0 {
            return Err(Error::Config("scenes need at least one object".into()));
        }
        if self.references_per_category == 0 {
            return Err(Error::Config("references_per_category must be positive".into()));
        }
        if self.require_disjoint {
            if let Some(c) = self.target_categories.iter().find(|c| self.open_source_categories.contains(c)) {
                return Err(Error::Config(format!("category {c} is both a target and an open-source category")));
            }
        }
        self.scene_spec(&self.target_categories).validate()?;
        self.scene_spec(&self.open_source_categories).validate()
    }
}

fn rgb8(x: &Image) -> Result<image::RgbImage> {
    if x.channels() != 3 {
        return Err(invalid("write_image", format!("expected 3 channels, got {}", x.channels())));
    }
    let (h, w) = x.hw();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |px, py| {
        image::Rgb(std::array::from_fn(|c| (x.get(c, py as usize, px as usize) * 255.0).round() as u8))
    }))
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_image(x: &Image, path: &Path) -> Result<()> {
    rgb8(x)?.save(path).map_err(image_err(path))
}

/// Decodes any supported image to 3-channel `[0, 1]` values.
pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path).map_err(image_err(path))?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_fn(h, w, 3, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}

/// Stores a mask as single-channel 8-bit, 0 or 255.
pub fn write_mask(m: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = m.hw();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }]));
    img.save(path).map_err(image_err(path))
}

pub fn write_soft_mask(m: &SoftMask, path: &Path) -> Result<()> {
    let (h, w) = m.hw();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(m.data()[y as usize * w + x as usize] * 255.0).round() as u8])
    });
    img.save(path).map_err(image_err(path))
}

/// Reads a single-channel mask whose pixels are all 0/255 or all 0/1.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(image_err(path))?;
    if img.color().channel_count() != 1 {
        return Err(Error::Dataset(format!("{}: mask must be single-channel", path.display())));
    }
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let raw = gray.into_raw();
    let on = if raw.iter().all(|&v| v <= 1) { 1 } else { 255 };
    if let Some(v) = raw.iter().find(|&&v| v != 0 && v != on) {
        return Err(Error::Dataset(format!("{}: mask value {v} is not binary", path.display())));
    }
    BinaryMask::new(h, w, raw.into_iter().map(|v| (v == on) as u8).collect())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn split_stream(split: Split) -> u64 {
    split.slot() as u64 + 1
}

struct Generated {
    id: String,
    categories: Vec<String>,
    masks: BTreeMap<String, String>,
}

fn generate_split(
    cfg: &DataConfig,
    categories: &[Shape],
    split: Split,
    prefix: &str,
    count: usize,
    seed: u64,
    root: &Path,
) -> Result<Vec<Generated>> {
    let spec = cfg.scene_spec(categories);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_stream(split));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(&spec, &mut rng)?;
        let id = format!("{prefix}-{i:05}");
        write_image(&scene.image, &root.join("images").join(format!("{id}.png")))?;
        let mut masks = BTreeMap::new();
        let mut present = Vec::new();
        for (cat, m) in scene.present() {
            let rel = format!("masks/{cat}/{id}.png");
            create_dir(&root.join("masks").join(cat.name()))?;
            write_mask(m, &root.join(&rel))?;
            masks.insert(cat.name().to_string(), rel);
            present.push(cat.name().to_string());
        }
        out.push(Generated {
            id,
            categories: present,
            masks,
        });
    }
    Ok(out)
}

/// Generates every split under `root` and writes the index.
pub fn build_splits(cfg: &DataConfig, seed: u64, root: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    let image_path = |id: &str| format!("images/{id}.png");
    let record = |g: &Generated, split| IndexRecord {
        id: g.id.clone(),
        split,
        path: image_path(&g.id),
        masks: g.masks.clone(),
        categories: g.categories.clone(),
        category: None,
    };

    let targets = generate_split(cfg, &cfg.target_categories, Split::Target, "target", cfg.target_count, seed, root)?;
    let mut records: Vec<IndexRecord> = targets.iter().map(|g| record(g, Split::Target)).collect();

    let mut taken = BTreeSet::new();
    for cat in &cfg.target_categories {
        let name = cat.name();
        let chosen: Vec<&Generated> = targets
            .iter()
            .filter(|g| g.categories.iter().any(|c| c == name) && !taken.contains(&g.id))
            .take(cfg.references_per_category)
            .collect();
        if chosen.len() < cfg.references_per_category {
            return Err(Error::Dataset(format!(
                "only {} unused target scenes contain {name}, {} references requested",
                chosen.len(),
                cfg.references_per_category
            )));
        }
        for (k, g) in chosen.into_iter().enumerate() {
            taken.insert(g.id.clone());
            records.push(IndexRecord {
                id: format!("ref-{name}-{k:03}"),
                category: Some(name.to_string()),
                ..record(g, Split::Reference)
            });
        }
    }

    let os = generate_split(
        cfg,
        &cfg.open_source_categories,
        Split::OpenSource,
        "open",
        cfg.open_source_count,
        seed,
        root,
    )?;
    records.extend(os.iter().map(|g| record(g, Split::OpenSource)));
    let held = generate_split(cfg, &cfg.target_categories, Split::Heldout, "heldout", cfg.heldout_count, seed, root)?;
    records.extend(held.iter().map(|g| record(g, Split::Heldout)));

    let index = DatasetIndex { records };
    index.validate()?;
    index.write(root)?;
    Ok(index)
}

/// Worker count for parallel decoding: `REFNET_NUM_WORKERS`, else the number
/// of available cores.
pub fn num_workers() -> usize {
    std::env::var("REFNET_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to `workers` threads; output order matches input.
fn parallel_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<O>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("decode worker panicked")).collect()
    })
}

/// A dataset directory with all images decoded. Masks are read on demand
/// and every read is counted per split.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    index: DatasetIndex,
    images: Vec<Image>,
    image_of: Vec<usize>,
    mask_reads: [AtomicUsize; 4],
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let index = DatasetIndex::read(root)?;
        let mut paths: Vec<&str> = index.records.iter().map(|r| r.path.as_str()).collect();
        paths.sort_unstable();
        paths.dedup();
        let images = parallel_map(&paths, num_workers(), |p| read_image(&root.join(p)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let image_of = index
            .records
            .iter()
            .map(|r| paths.binary_search(&r.path.as_str()).expect("path collected above"))
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            index,
            images,
            image_of,
            mask_reads: Default::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn image(&self, record: usize) -> &Image {
        &self.images[self.image_of[record]]
    }

    /// Decodes one mask and checks it against the image size.
    pub fn mask(&self, record: usize, category: &str) -> Result<BinaryMask> {
        let r = &self.index.records[record];
        let rel = r
            .masks
            .get(category)
            .ok_or_else(|| Error::Dataset(format!("record {:?} has no mask for {category:?}", r.id)))?;
        self.mask_reads[r.split.slot()].fetch_add(1, Ordering::Relaxed);
        let m = read_mask(&self.root.join(rel))?;
        if m.hw() != self.image(record).hw() {
            return Err(Error::Dataset(format!(
                "record {:?}: mask {:?} does not match image {:?}",
                r.id,
                m.hw(),
                self.image(record).hw()
            )));
        }
        Ok(m)
    }

    /// Number of mask decodes so far for records of `split`.
    pub fn mask_reads(&self, split: Split) -> usize {
        self.mask_reads[split.slot()].load(Ordering::Relaxed)
    }
}

/// An image with every category mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub image: Image,
    pub masks: BTreeMap<String, BinaryMask>,
}

impl Labeled {
    fn load(ds: &Dataset, record: usize) -> Result<Self> {
        let r = &ds.index.records[record];
        let masks = r
            .categories
            .iter()
            .map(|c| Ok((c.clone(), ds.mask(record, c)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            image: ds.image(record).clone(),
            masks,
        })
    }

    fn has(&self, category: &str) -> bool {
        self.masks.contains_key(category)
    }
}

/// Everything the trainer may touch: reference scenes with masks, target
/// images with image-level tags only, and open-source scenes with masks.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub categories: Vec<String>,
    pub labeled: Vec<Labeled>,
    /// Per category, indices into `labeled`, in index order.
    pub references: BTreeMap<String, Vec<usize>>,
    pub targets: Vec<(Image, Vec<String>)>,
    pub open_source: Vec<Labeled>,
}

impl TrainingData {
    /// Loads the training view, keeping the first `k` references of each
    /// category when given.
    pub fn load(ds: &Dataset, k: Option<usize>) -> Result<Self> {
        if k == Some(0) {
            return Err(Error::Config("k must be positive".into()));
        }
        let mut labeled = Vec::new();
        let mut references: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in ds.index.split(Split::Reference) {
            let cat = r.category.clone().expect("validated reference record");
            let list = references.entry(cat).or_default();
            if k.is_some_and(|k| list.len() >= k) {
                continue;
            }
            list.push(labeled.len());
            labeled.push(Labeled::load(ds, i)?);
        }
        if references.is_empty() {
            return Err(Error::Dataset("no reference records".into()));
        }
        if let Some(k) = k {
            if let Some((c, v)) = references.iter().find(|(_, v)| v.len() < k) {
                return Err(Error::Dataset(format!("category {c} has {} references, {k} requested", v.len())));
            }
        }
        let categories: Vec<String> = references.keys().cloned().collect();
        let targets: Vec<(Image, Vec<String>)> = ds
            .index
            .split(Split::Target)
            .map(|(i, r)| {
                let tags = r.categories.iter().filter(|c| categories.contains(c)).cloned().collect();
                (ds.image(i).clone(), tags)
            })
            .filter(|(_, tags): &(Image, Vec<String>)| !tags.is_empty())
            .collect();
        if targets.is_empty() {
            return Err(Error::Dataset("no target images with a reference category".into()));
        }
        let open_source = ds
            .index
            .split(Split::OpenSource)
            .filter(|(_, r)| !r.categories.is_empty())
            .map(|(i, _)| Labeled::load(ds, i))
            .collect::<Result<Vec<_>>>()?;
        if open_source.is_empty() {
            return Err(Error::Dataset("open-source split is empty".into()));
        }
        Ok(Self {
            categories,
            labeled,
            references,
            targets,
            open_source,
        })
    }

    pub fn reference(&self, category: &str, k: usize) -> Option<(&Image, &BinaryMask)> {
        let l = &self.labeled[*self.references.get(category)?.get(k)?];
        Some((&l.image, &l.masks[category]))
    }
}

/// Labeled pair; `gt` is all zero for negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedPair {
    pub target: Image,
    pub masked_reference: Image,
    pub gt: BinaryMask,
    pub category: String,
    pub negative: bool,
}

/// Unlabeled target paired with a reference of a category it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair {
    pub target: Image,
    pub masked_reference: Image,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSourceSample {
    pub image: Image,
    pub mask: BinaryMask,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub supervised: Vec<SupervisedPair>,
    pub target: Vec<TargetPair>,
    pub open_source: Vec<OpenSourceSample>,
}

fn masked_reference(data: &TrainingData, category: &str, exclude: Option<usize>, rng: &mut impl Rng) -> Result<Image> {
    let all = &data.references[category];
    let pool: Vec<usize> = all.iter().copied().filter(|&i| Some(i) != exclude).collect();
    let pool = if pool.is_empty() { all.clone() } else { pool };
    let &i = pool.choose(rng).expect("every category has a reference");
    let l = &data.labeled[i];
    l.image.masked(&l.masks[category].to_f32())
}

fn check_ratio(neg_ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&neg_ratio) {
        return Err(invalid("sample_training_batch", format!("neg_ratio {neg_ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Labeled pairs; each is negative with probability `neg_ratio`.
pub fn sample_supervised(data: &TrainingData, rng: &mut impl Rng, n: usize, neg_ratio: f64) -> Result<Vec<SupervisedPair>> {
    check_ratio(neg_ratio)?;
    (0..n)
        .map(|_| {
            if rng.random_bool(neg_ratio) {
                let options: Vec<&String> = data
                    .categories
                    .iter()
                    .filter(|c| data.labeled.iter().any(|l| !l.has(c)))
                    .collect();
                let &category = options
                    .choose(rng)
                    .ok_or_else(|| Error::Dataset("every labeled image contains every category; no negatives".into()))?;
                let pool: Vec<usize> = (0..data.labeled.len()).filter(|&i| !data.labeled[i].has(category)).collect();
                let &s = pool.choose(rng).expect("non-empty by construction");
                let target = data.labeled[s].image.clone();
                let (h, w) = target.hw();
                Ok(SupervisedPair {
                    masked_reference: masked_reference(data, category, None, rng)?,
                    target,
                    gt: BinaryMask::zeros(h, w),
                    category: category.clone(),
                    negative: true,
                })
            } else {
                let s = rng.random_range(0..data.labeled.len());
                let l = &data.labeled[s];
                let cats: Vec<&String> = data.categories.iter().filter(|c| l.has(c)).collect();
                let &category = cats.choose(rng).expect("labeled scenes contain a reference category");
                Ok(SupervisedPair {
                    masked_reference: masked_reference(data, category, Some(s), rng)?,
                    target: l.image.clone(),
                    gt: l.masks[category].clone(),
                    category: category.clone(),
                    negative: false,
                })
            }
        })
        .collect()
}

pub fn sample_target_pairs(data: &TrainingData, rng: &mut impl Rng, n: usize) -> Result<Vec<TargetPair>> {
    (0..n)
        .map(|_| {
            let (image, tags) = data.targets.choose(rng).expect("non-empty target split");
            let category = tags.choose(rng).expect("targets keep only tagged images");
            Ok(TargetPair {
                target: image.clone(),
                masked_reference: masked_reference(data, category, None, rng)?,
                category: category.clone(),
            })
        })
        .collect()
}

pub fn sample_open_source(data: &TrainingData, rng: &mut impl Rng, n: usize) -> Vec<OpenSourceSample> {
    (0..n)
        .map(|_| {
            let l = data.open_source.choose(rng).expect("non-empty open-source split");
            let keys: Vec<&String> = l.masks.keys().collect();
            let &category = keys.choose(rng).expect("open-source scenes have objects");
            OpenSourceSample {
                image: l.image.clone(),
                mask: l.masks[category].clone(),
                category: category.clone(),
            }
        })
        .collect()
}

/// `batch` supervised pairs, `batch` target pairs and `batch` open-source samples.
pub fn sample_training_batch(data: &TrainingData, rng: &mut impl Rng, batch: usize, neg_ratio: f64) -> Result<Batch> {
    check_ratio(neg_ratio)?;
    Ok(Batch {
        supervised: sample_supervised(data, rng, batch, neg_ratio)?,
        target: sample_target_pairs(data, rng, batch)?,
        open_source: sample_open_source(data, rng, batch),
    })
}

/// Paired augmentation: one random affine warp for image and mask, then
/// brightness, contrast and noise on the image only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub geometric: AffineRanges,
    pub brightness: f32,
    pub contrast: f32,
    pub noise: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            geometric: AffineRanges::default(),
            brightness: 0.1,
            contrast: 0.1,
            noise: 0.02,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometric.validate()?;
        for v in [self.brightness, self.contrast, self.noise] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid("augment policy", format!("photometric amplitude {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn augment(image: &Image, mask: &BinaryMask, rng: &mut impl Rng, policy: &AugmentPolicy) -> Result<(Image, BinaryMask)> {
    if image.hw() != mask.hw() {
        return Err(invalid("augment", format!("image {:?} vs mask {:?}", image.hw(), mask.hw())));
    }
    if !policy.enabled {
        return Ok((image.clone(), mask.clone()));
    }
    let a = sample_affine(rng, &policy.geometric);
    let warped = apply_affine_image(image, &a, Interpolation::Bilinear)?;
    let m = apply_affine_mask(mask, &a)?;
    let b = policy.brightness * (2.0 * rng.random::<f32>() - 1.0);
    let c = 1.0 + policy.contrast * (2.0 * rng.random::<f32>() - 1.0);
    let noise = Normal::new(0.0f32, policy.noise).map_err(|e| invalid("augment", e.to_string()))?;
    let (h, w) = warped.hw();
    let shift = 0.5 - 0.5 * c + b;
    let data = warped
        .data()
        .iter()
        .map(|&v| {
            let n = if policy.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            (v * c + shift + n).clamp(0.0, 1.0)
        })
        .collect();
    Ok((Image::new(h, w, warped.channels(), data)?, m))
}
