//! Replay-based class-incremental training on a residual backbone with an
//! expanding linear head.

use std::fmt;
use std::path::Path;

use cilcomp_nn::{backbone_from_name, loss, Act, Backbone, Linear, MultiStepLr, Sgd, StateDict};
use image::RgbImage;
use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Cross-entropy plus logit distillation; nearest-mean-of-exemplars evaluation.
    Icarl,
    /// Same training, then new-class weight norms aligned to old ones; argmax evaluation.
    Wa,
    /// Plain cross-entropy on new data plus replay; argmax evaluation.
    Finetune,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Icarl => "icarl",
            Method::Wa => "wa",
            Method::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: String,
    pub base_width: Option<usize>,
    pub epochs_first: usize,
    pub epochs_incremental: usize,
    pub lr: f32,
    /// Epochs at which the learning rate is multiplied by `gamma`; applied in every phase.
    pub milestones: Vec<usize>,
    pub gamma: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Random 4-pixel shifts and horizontal flips.
    pub augment: bool,
    pub temperature: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: "resnet32".into(),
            base_width: None,
            epochs_first: 200,
            epochs_incremental: 170,
            lr: 0.1,
            milestones: vec![80, 120],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 1993,
            augment: true,
            temperature: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.gamma <= 0.0 {
            return bad("momentum must be in [0,1), weight_decay >= 0, gamma > 0".into());
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        for epochs in [self.epochs_first, self.epochs_incremental] {
            if let Some(&m) = self.milestones.iter().find(|&&m| epochs > 0 && m >= epochs) {
                return bad(format!("milestone {m} lies outside a {epochs}-epoch phase"));
            }
        }
        cilcomp_nn::ResNetConfig::from_name(&self.backbone, self.base_width)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn schedule(&self) -> MultiStepLr {
        MultiStepLr { base: self.lr, milestones: self.milestones.clone(), gamma: self.gamma }
    }
}

/// Backbone, classifier head over all classes seen so far, and step index.
#[derive(Clone)]
pub struct ModelSnapshot {
    pub backbone: Box<dyn Backbone>,
    pub head: Linear,
    pub step: usize,
}

impl fmt::Debug for ModelSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSnapshot")
            .field("backbone", &self.backbone.name())
            .field("classes", &self.head.out_dim)
            .field("step", &self.step)
            .finish()
    }
}

impl ModelSnapshot {
    /// Freshly initialized model with no classes.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let backbone = backbone_from_name(&cfg.backbone, cfg.base_width, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_4ead);
        let head = Linear::new(backbone.feature_dim(), 0, &mut rng);
        Ok(Self { backbone, head, step: 0 })
    }

    pub fn seen_classes(&self) -> usize {
        self.head.out_dim
    }

    fn features_act(&self, x: &Act) -> Vec<f32> {
        self.backbone.forward_eval(x)
    }

    fn logits_act(&self, x: &Act) -> Vec<f32> {
        self.head.forward(&self.features_act(x))
    }
}

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;
const SHIFT: i32 = 4;
const EVAL_CHUNK: usize = 64;

fn check_shapes(images: &[&RgbImage]) -> Result<(u32, u32)> {
    let dims = images.first().map(|i| i.dimensions()).unwrap_or((0, 0));
    if let Some(i) = images.iter().position(|im| im.dimensions() != dims) {
        return Err(Error::Invalid(format!(
            "image {i} is {:?}, expected {dims:?}; batches need a common size",
            images[i].dimensions()
        )));
    }
    Ok(dims)
}

/// Normalized `3×N×H×W` batch, optionally with a random shift and flip per image.
fn to_act(images: &[&RgbImage], mut aug: Option<&mut ChaCha8Rng>) -> Result<Act> {
    let (w, h) = check_shapes(images)?;
    let (w, h) = (w as usize, h as usize);
    let n = images.len();
    let plane = w * h;
    let mut act = Act::zeros(3, n, h, w);
    for (i, img) in images.iter().enumerate() {
        let (dx, dy, flip) = match aug.as_deref_mut() {
            Some(rng) => (rng.random_range(-SHIFT..=SHIFT), rng.random_range(-SHIFT..=SHIFT), rng.random_bool(0.5)),
            None => (0, 0, false),
        };
        let raw = img.as_raw();
        for y in 0..h {
            let sy = y as i32 + dy;
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx as i32 + dx;
                let inb = sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h;
                for c in 0..3 {
                    let v = if inb {
                        (raw[(sy as usize * w + sx as usize) * 3 + c] as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD
                    } else {
                        0.0
                    };
                    act.data[(c * n + i) * plane + y * w + x] = v;
                }
            }
        }
    }
    Ok(act)
}

fn rows(flat: Vec<f32>, width: usize) -> Vec<Vec<f32>> {
    flat.chunks(width.max(1)).map(<[f32]>::to_vec).collect()
}

/// Backbone features, one row per image, in evaluation mode.
pub fn extract_features(model: &ModelSnapshot, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
    check_shapes(images)?;
    let d = model.backbone.feature_dim();
    let chunks: Vec<Vec<Vec<f32>>> = images
        .par_chunks(EVAL_CHUNK)
        .map(|c| Ok(rows(model.features_act(&to_act(c, None)?), d)))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Classifier logits over all seen classes, one row per image.
pub fn logits(model: &ModelSnapshot, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
    check_shapes(images)?;
    let k = model.seen_classes();
    let chunks: Vec<Vec<Vec<f32>>> = images
        .par_chunks(EVAL_CHUNK)
        .map(|c| Ok(rows(model.logits_act(&to_act(c, None)?), k)))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn l2_normalize(v: &mut [f32]) {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

/// Rescales the rows of classes `old..` so that their mean L2 norm equals the
/// mean norm of rows `..old`. Returns the applied factor.
pub fn align_weights(head: &mut Linear, old: usize) -> f64 {
    let norm = |r: &[f32]| r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let total = head.out_dim;
    if old == 0 || old >= total {
        return 1.0;
    }
    let mean_old = (0..old).map(|k| norm(head.row(k))).sum::<f64>() / old as f64;
    let mean_new = (old..total).map(|k| norm(head.row(k))).sum::<f64>() / (total - old) as f64;
    if mean_new == 0.0 {
        return 1.0;
    }
    let gamma = mean_old / mean_new;
    for k in old..total {
        head.row_mut(k).iter_mut().for_each(|w| *w = (*w as f64 * gamma) as f32);
    }
    gamma
}

/// Ratio of mean new-class to mean old-class weight norm.
pub fn norm_ratio(head: &Linear, old: usize) -> f64 {
    let norm = |r: &[f32]| r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let total = head.out_dim;
    let mean_old = (0..old).map(|k| norm(head.row(k))).sum::<f64>() / old as f64;
    let mean_new = (old..total).map(|k| norm(head.row(k))).sum::<f64>() / (total - old) as f64;
    mean_new / mean_old
}

/// Learns one incremental step on `new_data ∪ exemplars`, starting from `prev`.
///
/// The head grows to cover every label present. Exemplars must belong to
/// classes `prev` already knows. With `Icarl` and `Wa`, outputs for old classes
/// are distilled from `prev` at temperature `cfg.temperature`, weighted by
/// old/total classes against the classification loss.
pub fn train_step(
    prev: &ModelSnapshot,
    new_data: &[&Sample],
    exemplars: &[&Sample],
    method: Method,
    cfg: &TrainConfig,
) -> Result<ModelSnapshot> {
    cfg.validate()?;
    let old = prev.seen_classes();
    if let Some(e) = exemplars.iter().find(|s| s.label >= old) {
        return Err(Error::Invalid(format!("exemplar of class {} which the model has not learned", e.label)));
    }
    let total = new_data.iter().map(|s| s.label + 1).max().unwrap_or(0).max(old);
    let mut model = prev.clone();
    model.step = if old == 0 { 0 } else { prev.step + 1 };
    let step = model.step;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64);
    model.head.expand(total - old, &mut rng);

    let data: Vec<&Sample> = new_data.iter().chain(exemplars).copied().collect();
    let teacher = (old > 0 && method != Method::Finetune).then_some(prev);
    let lambda = old as f32 / total.max(1) as f32;
    let epochs = if old == 0 { cfg.epochs_first } else { cfg.epochs_incremental };
    let schedule = cfg.schedule();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..epochs {
        let opt = Sgd { lr: schedule.at(epoch), momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // Batch statistics are undefined for a single sample.
            if batch.len() < 2 {
                continue;
            }
            let images: Vec<&RgbImage> = batch.iter().map(|&i| &data[i].image).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
            let x = to_act(&images, cfg.augment.then_some(&mut rng))?;
            let feats = model.backbone.forward_train(&x);
            let out = model.head.forward_train(&feats);
            let (mut loss, mut grad) = loss::cross_entropy(&out, total, &targets);
            if let Some(t) = teacher {
                let t_logits = t.logits_act(&x);
                let s_old: Vec<f32> = out.chunks(total).flat_map(|r| r[..old].iter().copied()).collect();
                let (kd, kd_grad) = loss::distillation(&s_old, &t_logits, old, cfg.temperature);
                loss = (1.0 - lambda) * loss + lambda * kd;
                for (row, krow) in grad.chunks_mut(total).zip(kd_grad.chunks(old)) {
                    row.iter_mut().for_each(|g| *g *= 1.0 - lambda);
                    row[..old].iter_mut().zip(krow).for_each(|(g, k)| *g += lambda * k);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "step {step}, epoch {epoch}: loss {loss} at lr {}",
                    opt.lr
                )));
            }
            let gf = model.head.backward(&grad);
            model.backbone.backward(&gf);
            opt.step(model.backbone.as_mut(), &mut model.head);
            sum += loss as f64;
            batches += 1;
        }
        debug!("step {step} epoch {epoch}: loss {:.4}", sum / batches.max(1) as f64);
    }
    model.backbone.clear_cache();
    model.head.clear_cache();
    if method == Method::Wa && total > old && old > 0 {
        let gamma = align_weights(&mut model.head, old);
        debug!("step {step}: aligned new-class weights by {gamma:.4}");
    }
    Ok(model)
}

/// Per-class mean of L2-normalized features, re-normalized. Classes without
/// samples get `None`.
pub fn class_means(model: &ModelSnapshot, samples: &[&Sample]) -> Result<Vec<Option<Vec<f32>>>> {
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let feats = if images.is_empty() { Vec::new() } else { extract_features(model, &images)? };
    let d = model.backbone.feature_dim();
    let mut sums = vec![vec![0f64; d]; model.seen_classes()];
    let mut counts = vec![0usize; model.seen_classes()];
    for (s, mut f) in samples.iter().zip(feats) {
        if s.label >= sums.len() {
            return Err(Error::Invalid(format!("sample of unseen class {}", s.label)));
        }
        l2_normalize(&mut f);
        sums[s.label].iter_mut().zip(&f).for_each(|(a, &b)| *a += b as f64);
        counts[s.label] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| {
            (n > 0).then(|| {
                let mut m: Vec<f32> = s.iter().map(|v| (v / n as f64) as f32).collect();
                l2_normalize(&mut m);
                m
            })
        })
        .collect())
}

/// Index of the closest mean (Euclidean) for each feature row; ties go to the
/// lower class id. Classes without a mean are never predicted.
pub fn nearest_mean(features: &[Vec<f32>], means: &[Option<Vec<f32>>]) -> Vec<usize> {
    features
        .iter()
        .map(|f| {
            let mut best = (f64::INFINITY, 0usize);
            for (c, m) in means.iter().enumerate() {
                if let Some(m) = m {
                    let d: f64 = f.iter().zip(m).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                    if d < best.0 {
                        best = (d, c);
                    }
                }
            }
            best.1
        })
        .collect()
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Predicted class per image: nearest class mean for `Icarl`, argmax logits otherwise.
pub fn predict(
    model: &ModelSnapshot,
    images: &[&RgbImage],
    method: Method,
    means: Option<&[Option<Vec<f32>>]>,
) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    match method {
        Method::Icarl => {
            let means = means.ok_or_else(|| Error::Invalid("nearest-mean evaluation needs class means".into()))?;
            let mut feats = extract_features(model, images)?;
            feats.iter_mut().for_each(|f| l2_normalize(f));
            Ok(nearest_mean(&feats, means))
        }
        Method::Wa | Method::Finetune => Ok(logits(model, images)?.iter().map(|r| argmax(r)).collect()),
    }
}

/// Fraction of positions where prediction equals label; 0 for empty input.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Top-1 accuracy on test samples of classes the model has seen.
pub fn evaluate(
    model: &ModelSnapshot,
    test: &[&Sample],
    method: Method,
    means: Option<&[Option<Vec<f32>>]>,
) -> Result<f64> {
    if let Some(s) = test.iter().find(|s| s.label >= model.seen_classes()) {
        return Err(Error::Invalid(format!(
            "test label {} not among the {} seen classes",
            s.label,
            model.seen_classes()
        )));
    }
    let images: Vec<&RgbImage> = test.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    Ok(accuracy(&predict(model, &images, method, means)?, &labels))
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    backbone: String,
    base_width: Option<usize>,
    classes: usize,
    step: usize,
}

/// Writes the model blob to `path` and a JSON sidecar next to it carrying the
/// step, seen classes and caller-supplied metrics.
pub fn save_snapshot(model: &ModelSnapshot, cfg: &TrainConfig, path: &Path, metrics: serde_json::Value) -> Result<()> {
    let meta = SnapshotMeta {
        backbone: cfg.backbone.clone(),
        base_width: cfg.base_width,
        classes: model.seen_classes(),
        step: model.step,
    };
    let mut copy = model.clone();
    let mut tensors = Vec::new();
    copy.backbone.visit_state(&mut |name, t| tensors.push((name.to_string(), t.clone())));
    tensors.push(("head.weight".into(), copy.head.weight.value.clone()));
    tensors.push(("head.bias".into(), copy.head.bias.value.clone()));
    let state = StateDict { meta: serde_json::to_value(&meta)?, tensors };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    cilcomp_nn::write_state(std::io::BufWriter::new(std::fs::File::create(path)?), &state)?;
    let sidecar = serde_json::json!({
        "step": meta.step,
        "seen_classes": meta.classes,
        "backbone": meta.backbone,
        "metrics": metrics,
    });
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<ModelSnapshot> {
    let state = cilcomp_nn::read_state(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let meta: SnapshotMeta = serde_json::from_value(state.meta.clone())?;
    let mut backbone = backbone_from_name(&meta.backbone, meta.base_width, 0)?;
    let mut missing = None;
    backbone.visit_state(&mut |name, t| match state.get(name) {
        Some(v) if v.len() == t.len() => t.copy_from_slice(v),
        _ => missing = Some(name.to_string()),
    });
    if let Some(name) = missing {
        return Err(Error::Invalid(format!("{}: tensor {name} missing or mis-sized", path.display())));
    }
    let mut head = Linear::new(backbone.feature_dim(), meta.classes, &mut ChaCha8Rng::seed_from_u64(0));
    for (name, p) in [("head.weight", &mut head.weight), ("head.bias", &mut head.bias)] {
        let v = state
            .get(name)
            .filter(|v| v.len() == p.value.len())
            .ok_or_else(|| Error::Invalid(format!("{}: tensor {name} missing or mis-sized", path.display())))?;
        p.value.copy_from_slice(v);
    }
    Ok(ModelSnapshot { backbone, head, step: meta.step })
}
