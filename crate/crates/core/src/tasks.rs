//! Datasets, class-incremental task sequences and codec preprocessing.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codecs::{self, CodecSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Position within its split.
    pub id: usize,
    pub label: usize,
    pub image: RgbImage,
    /// Storage cost of this sample in its current form.
    pub bits: u64,
}

impl Sample {
    pub fn pixels(&self) -> u64 {
        self.image.width() as u64 * self.image.height() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetHandle {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Checks that labels are contiguous and every class has train and test samples.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Dataset(format!("{}: no classes", self.name)));
        }
        for split in [Split::Train, Split::Test] {
            let mut seen = vec![false; c];
            for s in self.split(split) {
                if s.label >= c {
                    return Err(Error::Dataset(format!(
                        "{}: label {} outside 0..{c}",
                        self.name, s.label
                    )));
                }
                seen[s.label] = true;
            }
            if let Some(missing) = seen.iter().position(|&x| !x) {
                return Err(Error::Dataset(format!(
                    "{}: class {missing} has no {split:?} samples",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Pooled bits per pixel of the train split as stored.
    pub fn train_bpp(&self) -> Result<f64> {
        codecs::pooled_bpp(self.train.iter().map(|s| (s.bits, s.pixels())))
    }

    pub fn mean_train_pixels(&self) -> f64 {
        self.train.iter().map(Sample::pixels).sum::<u64>() as f64 / self.train.len().max(1) as f64
    }

    /// Relabels so that class `order[i]` becomes class `i`.
    pub fn remapped(&self, order: &[usize]) -> Result<DatasetHandle> {
        let c = self.num_classes();
        let mut map = vec![usize::MAX; c];
        for (new, &old) in order.iter().enumerate() {
            if old >= c || map[old] != usize::MAX {
                return Err(Error::Invalid(format!("class order is not a permutation of 0..{c}")));
            }
            map[old] = new;
        }
        if order.len() != c {
            return Err(Error::Invalid(format!("class order has {} entries, need {c}", order.len())));
        }
        let relabel = |v: &[Sample]| {
            v.iter().map(|s| Sample { label: map[s.label], ..s.clone() }).collect()
        };
        Ok(DatasetHandle {
            name: self.name.clone(),
            class_names: order.iter().map(|&o| self.class_names[o].clone()).collect(),
            train: relabel(&self.train),
            test: relabel(&self.test),
        })
    }

    /// Content hash over labels and pixels of both splits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.test) {
            h.update((s.label as u64).to_le_bytes());
            h.update(s.image.width().to_le_bytes());
            h.update(s.image.height().to_le_bytes());
            h.update(s.image.as_raw());
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// Loads `root/train/<class>/*` and `root/test/<class>/*`. Classes are ordered
/// by folder name; each sample's storage cost is its file size.
pub fn load_folder(root: &Path) -> Result<DatasetHandle> {
    let list_classes = |dir: &Path| -> Result<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        Ok(names)
    };
    let classes = list_classes(&root.join("train"))?;
    let test_classes = list_classes(&root.join("test"))?;
    if classes != test_classes {
        return Err(Error::Dataset(format!(
            "{}: train and test class folders differ",
            root.display()
        )));
    }
    let load_split = |split: &str| -> Result<Vec<Sample>> {
        let mut files = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(root.join(split).join(class))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            paths.sort();
            files.extend(paths.into_iter().map(|p| (label, p)));
        }
        files
            .par_iter()
            .enumerate()
            .map(|(id, (label, path))| {
                let bytes = std::fs::read(path)?;
                let image = image::load_from_memory(&bytes)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
                    .to_rgb8();
                Ok(Sample { id, label: *label, image, bits: bytes.len() as u64 * 8 })
            })
            .collect()
    };
    let ds = DatasetHandle {
        name: root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "folder".into()),
        train: load_split("train")?,
        test: load_split("test")?,
        class_names: classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Fixed-size binary records: label bytes followed by a planar `3×H×W` image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedLayout {
    pub label_bytes: usize,
    /// Which of the label bytes carries the class.
    pub label_offset: usize,
    pub height: u32,
    pub width: u32,
}

impl Default for PackedLayout {
    fn default() -> Self {
        Self { label_bytes: 1, label_offset: 0, height: 32, width: 32 }
    }
}

/// Loads packed binary files. Native label values are sorted and remapped to
/// contiguous ids; pixels are charged at 24 bits.
pub fn load_packed(name: &str, train: &[PathBuf], test: &[PathBuf], layout: &PackedLayout) -> Result<DatasetHandle> {
    if layout.label_offset >= layout.label_bytes {
        return Err(Error::Config("packed label_offset must be below label_bytes".into()));
    }
    let plane = (layout.height * layout.width) as usize;
    let record = layout.label_bytes + 3 * plane;
    let read = |files: &[PathBuf]| -> Result<Vec<(u8, RgbImage)>> {
        let mut out = Vec::new();
        for f in files {
            let mut bytes = Vec::new();
            std::fs::File::open(f)
                .and_then(|mut h| h.read_to_end(&mut bytes))
                .map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?;
            if bytes.len() % record != 0 {
                return Err(Error::Dataset(format!(
                    "{}: size {} is not a multiple of the {record}-byte record",
                    f.display(),
                    bytes.len()
                )));
            }
            for r in bytes.chunks_exact(record) {
                let px = &r[layout.label_bytes..];
                let img = RgbImage::from_fn(layout.width, layout.height, |x, y| {
                    let i = (y * layout.width + x) as usize;
                    image::Rgb([px[i], px[plane + i], px[2 * plane + i]])
                });
                out.push((r[layout.label_offset], img));
            }
        }
        Ok(out)
    };
    let (tr, te) = (read(train)?, read(test)?);
    let native: BTreeSet<u8> = tr.iter().map(|r| r.0).collect();
    let index: BTreeMap<u8, usize> = native.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let to_samples = |rows: Vec<(u8, RgbImage)>| -> Result<Vec<Sample>> {
        rows.into_iter()
            .enumerate()
            .map(|(id, (l, image))| {
                let label = *index
                    .get(&l)
                    .ok_or_else(|| Error::Dataset(format!("test label {l} absent from train")))?;
                let bits = 24 * image.width() as u64 * image.height() as u64;
                Ok(Sample { id, label, image, bits })
            })
            .collect()
    };
    let ds = DatasetHandle {
        name: name.to_string(),
        class_names: native.iter().map(|l| l.to_string()).collect(),
        train: to_samples(tr)?,
        test: to_samples(te)?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Procedural image classification set for quick experiments: each class is a
/// geometric shape in a class-specific hue, drawn at a random position and
/// scale over a smooth random background, plus pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: u32,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 10, train_per_class: 150, test_per_class: 50, size: 32, noise: 24.0, seed: 7 }
    }
}

const SHAPES: usize = 5;

fn hue_rgb(h: f32) -> [f32; 3] {
    let f = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r + 1.8 * dx.abs(),
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r * 0.55
        }
        _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

fn synth_image(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f32>) -> RgbImage {
    let s = spec.size as f32;
    let shape = class % SHAPES;
    let family = class / SHAPES;
    let families = spec.classes.div_ceil(SHAPES).max(1) as f32;
    let hue = (family as f32 + rng.random_range(-0.15..0.15)) / families;
    let fg = hue_rgb(hue.rem_euclid(1.0)).map(|v| 40.0 + 180.0 * v);
    let bg0: [f32; 3] = std::array::from_fn(|_| rng.random_range(40.0..200.0));
    let bg1: [f32; 3] = std::array::from_fn(|_| rng.random_range(40.0..200.0));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let r = rng.random_range(0.22..0.36) * s;
    let cx = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let cy = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    RgbImage::from_fn(spec.size, spec.size, |x, y| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let t = ((fx * ca + fy * sa) / s + 1.0) / 2.0;
        let on = inside(shape, fx - cx, fy - cy, r);
        image::Rgb(std::array::from_fn(|k| {
            let v = if on { fg[k] } else { bg0[k] * (1.0 - t) + bg1[k] * t };
            (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8
        }))
    })
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<DatasetHandle> {
    if spec.classes == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 || spec.size < 8 {
        return Err(Error::Config(
            "synthetic dataset needs classes, per-class counts > 0 and size >= 8".into(),
        ));
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0))
        .map_err(|e| Error::Config(format!("synthetic noise: {e}")))?;
    let make = |split: u64, per: usize| -> Vec<Sample> {
        (0..spec.classes * per)
            .into_par_iter()
            .map(|id| {
                let label = id % spec.classes;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(split * 1_000_003 + id as u64);
                let image = synth_image(spec, label, &mut rng, &noise);
                let bits = 24 * image.width() as u64 * image.height() as u64;
                Sample { id, label, image, bits }
            })
            .collect()
    };
    let ds = DatasetHandle {
        name: format!(
            "shapes{}x{}-c{}-n{}-s{}",
            spec.size, spec.size, spec.classes, spec.train_per_class, spec.seed
        ),
        class_names: (0..spec.classes).map(|c| format!("shape{}_{}", c % SHAPES, c / SHAPES)).collect(),
        train: make(0, spec.train_per_class),
        test: make(1, spec.test_per_class),
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    /// Learn from scratch: classes split equally over all tasks.
    Lfs,
    /// Learn from half: half the classes in the first task, the rest split equally.
    Lfh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub num_tasks: usize,
    #[serde(default = "default_shuffle_seed")]
    pub shuffle_seed: u32,
}

fn default_shuffle_seed() -> u32 {
    1993
}

impl ProtocolSpec {
    /// Number of classes in each task for `classes` total classes.
    pub fn task_sizes(&self, classes: usize) -> Result<Vec<usize>> {
        let n = self.num_tasks;
        match self.kind {
            ProtocolKind::Lfs => {
                if n == 0 || classes % n != 0 {
                    return Err(Error::Config(format!(
                        "LFS needs num_tasks to divide the class count: {classes} classes, {n} tasks"
                    )));
                }
                Ok(vec![classes / n; n])
            }
            ProtocolKind::Lfh => {
                if n < 2 || classes % 2 != 0 || (classes / 2) % (n - 1) != 0 {
                    return Err(Error::Config(format!(
                        "LFH needs an even class count whose half divides into num_tasks - 1 tasks: \
                         {classes} classes, {n} tasks"
                    )));
                }
                let mut sizes = vec![classes / 2];
                sizes.extend(std::iter::repeat_n(classes / 2 / (n - 1), n - 1));
                Ok(sizes)
            }
        }
    }
}

/// Permutation of `0..n` identical to NumPy's legacy
/// `RandomState(seed).permutation(n)`: Mersenne Twister seeded with
/// `init_genrand(seed)`, then a Fisher–Yates pass from the top using masked
/// rejection sampling for each bounded draw.
pub fn class_permutation(n: usize, seed: u32) -> Vec<usize> {
    let mut mt = rand_mt::Mt::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let max = i as u32;
        let mask = u32::MAX >> max.leading_zeros();
        let j = loop {
            let v = mt.next_u32() & mask;
            if v <= max {
                break v as usize;
            }
        };
        order.swap(i, j);
    }
    order
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    /// `class_order[i]` is the native class id learned `i`-th.
    pub class_order: Vec<usize>,
    /// Native class ids of each task, in learning order.
    pub tasks: Vec<Vec<usize>>,
    /// Train sample positions of each task.
    pub train_indices: Vec<Vec<usize>>,
    /// Test sample positions of each task.
    pub test_indices: Vec<Vec<usize>>,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of task `t` after relabelling the dataset by `class_order`.
    pub fn class_range(&self, t: usize) -> Range<usize> {
        let start: usize = self.tasks[..t].iter().map(Vec::len).sum();
        start..start + self.tasks[t].len()
    }
}

pub fn build_task_sequence(dataset: &DatasetHandle, protocol: &ProtocolSpec) -> Result<TaskSequence> {
    let c = dataset.num_classes();
    let sizes = protocol.task_sizes(c)?;
    let class_order = class_permutation(c, protocol.shuffle_seed);
    let mut task_of = vec![0usize; c];
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for (t, &n) in sizes.iter().enumerate() {
        let members = class_order[at..at + n].to_vec();
        for &m in &members {
            task_of[m] = t;
        }
        tasks.push(members);
        at += n;
    }
    let index = |samples: &[Sample]| {
        let mut per = vec![Vec::new(); sizes.len()];
        for (i, s) in samples.iter().enumerate() {
            per[task_of[s.label]].push(i);
        }
        per
    };
    Ok(TaskSequence {
        train_indices: index(&dataset.train),
        test_indices: index(&dataset.test),
        class_order,
        tasks,
    })
}

/// Splits the first task's training samples into two halves with the same
/// class composition. Odd class counts give the extra sample to the first half.
/// First-task classes as labelled in `dataset`, which may carry either the
/// original ids or the ids produced by [`DatasetHandle::remapped`].
fn first_task_classes(seq: &TaskSequence, dataset: &DatasetHandle) -> Vec<usize> {
    let original = seq.train_indices[0].iter().all(|&i| seq.tasks[0].contains(&dataset.train[i].label));
    if original {
        seq.tasks[0].clone()
    } else {
        seq.class_range(0).collect()
    }
}

pub fn split_first_task(seq: &TaskSequence, dataset: &DatasetHandle, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> =
        first_task_classes(seq, dataset).into_iter().map(|c| (c, Vec::new())).collect();
    for &i in &seq.train_indices[0] {
        by_class.entry(dataset.train[i].label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Dataset(format!(
                "class {class} has {} training samples; the first-task split needs at least 2",
                idx.len()
            )));
        }
        if idx.len() % 2 == 1 {
            warn!("class {class} has an odd sample count ({}); first half gets the extra one", idx.len());
        }
        idx.shuffle(&mut rng);
        let half = idx.len().div_ceil(2);
        first.extend_from_slice(&idx[..half]);
        second.extend_from_slice(&idx[half..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

/// Splits the first task by class: the first half of its classes (rounded up)
/// and all their samples on one side, the rest on the other.
pub fn split_first_task_by_class(seq: &TaskSequence, dataset: &DatasetHandle) -> Result<(Vec<usize>, Vec<usize>)> {
    let classes = first_task_classes(seq, dataset);
    if classes.len() < 2 {
        return Err(Error::Dataset("splitting the first task by class needs at least 2 classes".into()));
    }
    let left: BTreeSet<usize> = classes[..classes.len().div_ceil(2)].iter().copied().collect();
    Ok(seq.train_indices[0].iter().partition(|&&i| left.contains(&dataset.train[i].label)))
}

/// Which parts of the data pass through the codec.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Train and test images are all replaced by their reconstructions.
    #[default]
    WholeDataset,
    /// Only stored exemplars are compressed; new-class data stays original.
    ExemplarsOnly,
}

/// Sample sources for one run.
#[derive(Clone, Copy, Debug)]
pub struct DataViews<'a> {
    /// New-class training data.
    pub train: &'a [Sample],
    /// Candidates for the exemplar buffer, carrying their stored bit cost.
    pub pool: &'a [Sample],
    pub test: &'a [Sample],
}

pub fn data_views<'a>(
    original: &'a DatasetHandle,
    compressed: &'a DatasetHandle,
    scope: Scope,
    compress_test: bool,
) -> DataViews<'a> {
    match scope {
        Scope::WholeDataset => {
            DataViews { train: &compressed.train, pool: &compressed.train, test: &compressed.test }
        }
        Scope::ExemplarsOnly => DataViews {
            train: &original.train,
            pool: &compressed.train,
            test: if compress_test { &compressed.test } else { &original.test },
        },
    }
}

/// Replaces every train and test image by `decode(encode(image))`, recording
/// the encoded bit count of each sample.
pub fn preprocess_with_codec(dataset: &DatasetHandle, codec: &CodecSpec) -> Result<DatasetHandle> {
    codec.self_test()?;
    let run = |split: &str, samples: &[Sample]| -> Result<Vec<Sample>> {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let (image, bits) = codecs::round_trip(&s.image, codec)
                    .map_err(|e| Error::Codec(format!("{split} sample {i} with {codec}: {e}")))?;
                Ok(Sample { id: s.id, label: s.label, image, bits })
            })
            .collect()
    };
    Ok(DatasetHandle {
        name: format!("{}@{}", dataset.name, codec.label()),
        class_names: dataset.class_names.clone(),
        train: run("train", &dataset.train)?,
        test: run("test", &dataset.test)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    split: Split,
    id: usize,
    label: usize,
    width: u32,
    height: u32,
    bits: u64,
}

/// [`preprocess_with_codec`] backed by an on-disk cache at
/// `root/<dataset>-<fingerprint>/<codec>/`, holding `manifest.csv` (per-image
/// encoded bits) and `pixels.bin` (decoded RGB, concatenated).
pub fn preprocess_cached(dataset: &DatasetHandle, codec: &CodecSpec, root: &Path) -> Result<DatasetHandle> {
    if codec.is_lossless() {
        return preprocess_with_codec(dataset, codec);
    }
    let safe: String = dataset.name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    let dir = root.join(format!("{safe}-{}", dataset.fingerprint())).join(codec.key());
    if let Some(ds) = load_preprocessed(&dir, dataset, codec)? {
        info!("using cached {} from {}", codec, dir.display());
        return Ok(ds);
    }
    let ds = preprocess_with_codec(dataset, codec)?;
    std::fs::create_dir_all(root)?;
    let tmp = tempfile::tempdir_in(root)?;
    {
        let mut w = csv::Writer::from_path(tmp.path().join("manifest.csv"))?;
        let mut px = std::io::BufWriter::new(std::fs::File::create(tmp.path().join("pixels.bin"))?);
        for (split, samples) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
            for s in samples {
                w.serialize(ManifestRow {
                    split,
                    id: s.id,
                    label: s.label,
                    width: s.image.width(),
                    height: s.image.height(),
                    bits: s.bits,
                })?;
                px.write_all(s.image.as_raw())?;
            }
        }
        w.flush()?;
        px.flush()?;
    }
    if let Some(parent) = dir.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let staged = tmp.keep();
    if std::fs::rename(&staged, &dir).is_err() {
        // Another writer finished first; its content is identical.
        let _ = std::fs::remove_dir_all(&staged);
    }
    Ok(ds)
}

fn load_preprocessed(dir: &Path, dataset: &DatasetHandle, codec: &CodecSpec) -> Result<Option<DatasetHandle>> {
    let (manifest, pixels) = (dir.join("manifest.csv"), dir.join("pixels.bin"));
    if !manifest.exists() || !pixels.exists() {
        return Ok(None);
    }
    let rows: Vec<ManifestRow> = csv::Reader::from_path(&manifest)?.deserialize().collect::<std::result::Result<_, _>>()?;
    let raw = std::fs::read(&pixels)?;
    if rows.len() != dataset.train.len() + dataset.test.len() {
        warn!("stale preprocessing cache at {}; rebuilding", dir.display());
        return Ok(None);
    }
    let mut at = 0usize;
    let mut train = Vec::with_capacity(dataset.train.len());
    let mut test = Vec::with_capacity(dataset.test.len());
    for (row, orig) in rows.iter().zip(dataset.train.iter().chain(&dataset.test)) {
        let n = (row.width * row.height * 3) as usize;
        if row.label != orig.label || row.id != orig.id || at + n > raw.len() {
            warn!("stale preprocessing cache at {}; rebuilding", dir.display());
            return Ok(None);
        }
        let image = RgbImage::from_raw(row.width, row.height, raw[at..at + n].to_vec()).expect("sized above");
        at += n;
        let s = Sample { id: row.id, label: row.label, image, bits: row.bits };
        match row.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok(Some(DatasetHandle {
        name: format!("{}@{}", dataset.name, codec.label()),
        class_names: dataset.class_names.clone(),
        train,
        test,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::CodecSpec;

    fn tiny(classes: usize, per: usize) -> DatasetHandle {
        synthetic(&SyntheticSpec {
            classes,
            train_per_class: per,
            test_per_class: 2,
            size: 16,
            noise: 10.0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn permutation_matches_numpy_legacy() {
        assert_eq!(class_permutation(10, 1993), vec![4, 2, 7, 6, 0, 3, 5, 8, 9, 1]);
        assert_eq!(class_permutation(4, 7), vec![2, 1, 0, 3]);
        let hundred = class_permutation(100, 1993);
        assert_eq!(&hundred[..10], &[68, 56, 78, 8, 23, 84, 90, 65, 74, 76]);
        assert_eq!(&hundred[90..], &[51, 48, 73, 93, 39, 67, 29, 49, 57, 33]);
    }

    #[test]
    fn lfs_and_lfh_sizes() {
        let lfs = ProtocolSpec { kind: ProtocolKind::Lfs, num_tasks: 10, shuffle_seed: 1993 };
        assert_eq!(lfs.task_sizes(100).unwrap(), vec![10; 10]);
        let lfh = ProtocolSpec { kind: ProtocolKind::Lfh, num_tasks: 6, shuffle_seed: 1993 };
        assert_eq!(lfh.task_sizes(100).unwrap(), vec![50, 10, 10, 10, 10, 10]);
        let bad = ProtocolSpec { kind: ProtocolKind::Lfs, num_tasks: 3, shuffle_seed: 1 };
        let err = bad.task_sizes(10).unwrap_err().to_string();
        assert!(err.contains("10 classes") && err.contains("3 tasks"), "{err}");
    }

    #[test]
    fn task_sequence_is_a_deterministic_partition() {
        let ds = tiny(4, 3);
        let p = ProtocolSpec { kind: ProtocolKind::Lfs, num_tasks: 2, shuffle_seed: 11 };
        let a = build_task_sequence(&ds, &p).unwrap();
        assert_eq!(a, build_task_sequence(&ds, &p).unwrap());
        let mut all: Vec<usize> = a.tasks.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(a.train_indices.iter().map(Vec::len).sum::<usize>(), ds.train.len());
        assert_eq!(a.class_range(1), 2..4);
    }

    #[test]
    fn remap_makes_tasks_contiguous() {
        let ds = tiny(4, 2);
        let p = ProtocolSpec { kind: ProtocolKind::Lfs, num_tasks: 2, shuffle_seed: 5 };
        let seq = build_task_sequence(&ds, &p).unwrap();
        let r = ds.remapped(&seq.class_order).unwrap();
        for t in 0..2 {
            for &i in &seq.train_indices[t] {
                assert!(seq.class_range(t).contains(&r.train[i].label));
            }
        }
        assert!(ds.remapped(&[0, 0, 1, 2]).is_err());
        let (a, b) = split_first_task(&seq, &r, 3).unwrap();
        let mut all = [a, b].concat();
        all.sort_unstable();
        assert_eq!(all, seq.train_indices[0]);
        let (a, _) = split_first_task_by_class(&seq, &r).unwrap();
        assert!(a.iter().all(|&i| r.train[i].label == 0));
    }

    #[test]
    fn first_task_split_balances_classes() {
        let ds = tiny(2, 3);
        let p = ProtocolSpec { kind: ProtocolKind::Lfs, num_tasks: 1, shuffle_seed: 1 };
        let seq = build_task_sequence(&ds, &p).unwrap();
        let (a, b) = split_first_task(&seq, &ds, 0).unwrap();
        assert_eq!((a.len(), b.len()), (4, 2));
        for c in 0..2 {
            let ca = a.iter().filter(|&&i| ds.train[i].label == c).count();
            let cb = b.iter().filter(|&&i| ds.train[i].label == c).count();
            assert_eq!((ca, cb), (2, 1));
        }
        assert_eq!((a.clone(), b.clone()), split_first_task(&seq, &ds, 0).unwrap());
    }

    #[test]
    fn first_task_split_rejects_singletons() {
        let ds = tiny(2, 1);
        let p = ProtocolSpec { kind: ProtocolKind::Lfs, num_tasks: 1, shuffle_seed: 1 };
        let seq = build_task_sequence(&ds, &p).unwrap();
        assert!(split_first_task(&seq, &ds, 0).is_err());
    }

    #[test]
    fn identity_preprocessing_is_byte_identical() {
        let ds = tiny(3, 2);
        let out = preprocess_with_codec(&ds, &CodecSpec::raw()).unwrap();
        assert_eq!(out.train, ds.train);
        assert_eq!(out.test, ds.test);
    }

    #[test]
    fn jpeg_preprocessing_preserves_shapes_and_labels() {
        let ds = tiny(3, 2);
        let out = preprocess_with_codec(&ds, &CodecSpec::jpeg(20)).unwrap();
        for (a, b) in ds.train.iter().chain(&ds.test).zip(out.train.iter().chain(&out.test)) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.dimensions(), b.image.dimensions());
            assert!(b.bits < a.bits);
        }
    }

    #[test]
    fn preprocessing_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(3, 2);
        let first = preprocess_cached(&ds, &CodecSpec::jpeg(30), dir.path()).unwrap();
        let second = preprocess_cached(&ds, &CodecSpec::jpeg(30), dir.path()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn packed_layout_loads_and_remaps() {
        let dir = tempfile::tempdir().unwrap();
        let layout = PackedLayout { label_bytes: 2, label_offset: 1, height: 2, width: 2 };
        let rec = |label: u8, v: u8| {
            let mut r = vec![0, label];
            r.extend((0..12).map(|i| v.wrapping_add(i)));
            r
        };
        let train: Vec<u8> = [rec(7, 0), rec(3, 10), rec(7, 20)].concat();
        let test: Vec<u8> = [rec(3, 30), rec(7, 40)].concat();
        std::fs::write(dir.path().join("train.bin"), train).unwrap();
        std::fs::write(dir.path().join("test.bin"), test).unwrap();
        let ds = load_packed(
            "p",
            &[dir.path().join("train.bin")],
            &[dir.path().join("test.bin")],
            &layout,
        )
        .unwrap();
        assert_eq!(ds.class_names, vec!["3", "7"]);
        assert_eq!(ds.train.iter().map(|s| s.label).collect::<Vec<_>>(), vec![1, 0, 1]);
        // Planar layout: R plane first.
        assert_eq!(ds.train[1].image.get_pixel(0, 0).0, [10, 14, 18]);
        assert_eq!(ds.train_bpp().unwrap(), 24.0);
    }

    #[test]
    fn folder_layout_loads() {
        let dir = tempfile::tempdir().unwrap();
        for split in ["train", "test"] {
            for (c, v) in [("cat", 10u8), ("dog", 200u8)] {
                let d = dir.path().join(split).join(c);
                std::fs::create_dir_all(&d).unwrap();
                RgbImage::from_pixel(4, 4, image::Rgb([v, v, v])).save(d.join("a.png")).unwrap();
            }
        }
        let ds = load_folder(dir.path()).unwrap();
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test[1].label, 1);
        assert!(ds.train[0].bits > 0);
    }
}
