//! Run configuration and the prepare → probe → select → train → report pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffer::{read_manifest, rebuild_buffer, write_manifest, ExemplarBuffer, MemoryBudget};
use crate::codecs::{self, CodecSpec, ExternalCodec, Method as CodecMethod, RatePoint};
use crate::error::{plot_err, Error, Result};
use crate::selection::{
    feature_mse, forgetting_probe, plot_probe_svg, select_codec, select_rate, write_probe_csv, write_scores_csv,
    CodecScore, ForgettingProbeResult, ProbeData,
};
use crate::tasks::{
    self, build_task_sequence, data_views, preprocess_cached, split_first_task, split_first_task_by_class,
    DatasetHandle, PackedLayout, ProtocolSpec, Sample, Scope, SyntheticSpec, TaskSequence,
};
use crate::trainer::{
    class_means, load_snapshot, predict, save_snapshot, train_step, Method, ModelSnapshot, TrainConfig,
};

/// Environment variable that overrides the cache root.
pub const CACHE_ENV: &str = "CILCOMP_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Folder {
        root: PathBuf,
    },
    Packed {
        name: String,
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default = "one")]
        label_bytes: usize,
        #[serde(default)]
        label_offset: usize,
        #[serde(default = "thirty_two")]
        height: u32,
        #[serde(default = "thirty_two")]
        width: u32,
    },
}

fn one() -> usize {
    1
}

fn thirty_two() -> u32 {
    32
}

impl DatasetConfig {
    pub fn load(&self) -> Result<DatasetHandle> {
        match self {
            DatasetConfig::Synthetic(spec) => tasks::synthetic(spec),
            DatasetConfig::Folder { root } => tasks::load_folder(root),
            DatasetConfig::Packed { name, train, test, label_bytes, label_offset, height, width } => {
                let layout = PackedLayout {
                    label_bytes: *label_bytes,
                    label_offset: *label_offset,
                    height: *height,
                    width: *width,
                };
                tasks::load_packed(name, train, test, &layout)
            }
        }
    }
}

/// Memory budget, either as a count of source images or as bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub reference_images: Option<usize>,
    pub bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub method: CodecMethod,
    /// Quality grid; the method's default grid when empty.
    #[serde(default)]
    pub qualities: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalCodec>,
}

impl CandidateConfig {
    pub fn spec(&self, quality: u32) -> CodecSpec {
        CodecSpec { method: self.method, quality, external: self.external.clone() }
    }

    pub fn grid(&self) -> Vec<u32> {
        if self.qualities.is_empty() {
            self.method.default_grid()
        } else {
            self.qualities.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub scope: Scope,
    /// Evaluate on the codec-processed test set. Only meaningful for `exemplars_only`.
    pub compress_test: bool,
    /// Skip probing and selection and use this codec.
    pub fixed: Option<CodecSpec>,
    pub candidates: Vec<CandidateConfig>,
    /// Restrict candidate grids to the rate range all methods can reach.
    pub overlap_only: bool,
    /// Training images used for rate-distortion statistics.
    pub rd_images: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            scope: Scope::WholeDataset,
            compress_test: true,
            fixed: None,
            candidates: Vec::new(),
            overlap_only: true,
            rd_images: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSplit {
    /// Both halves hold every first-task class.
    #[default]
    Samples,
    /// Each half holds half of the first-task classes.
    Classes,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub split: ProbeSplit,
    /// Share of the run budget given to the probe; defaults to the share of
    /// classes the probe's first half covers.
    pub budget_fraction: Option<f64>,
    pub epochs_first: Option<usize>,
    pub epochs_incremental: Option<usize>,
    /// First-task images used for feature distortion; 0 means all.
    pub fmse_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Drives initialization, data order and probe splits.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_method")]
    pub method: Method,
    pub dataset: DatasetConfig,
    pub protocol: ProtocolSpec,
    pub budget: BudgetConfig,
    #[serde(default)]
    pub compression: CompressionConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seed() -> u64 {
    1993
}

fn default_method() -> Method {
    Method::Icarl
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Sets `key` (dotted path) to `value`, parsed as a TOML value when possible
/// and as a string otherwise.
fn set_path(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl RunConfig {
    /// Parses TOML and applies `key=value` overrides before validation.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        match (self.budget.reference_images, self.budget.bytes) {
            (Some(0), _) | (_, Some(0)) => return Err(Error::Config("budget must be positive".into())),
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("set exactly one of budget.reference_images or budget.bytes".into()))
            }
            _ => {}
        }
        if self.protocol.num_tasks == 0 {
            return Err(Error::Config("protocol.num_tasks must be positive".into()));
        }
        if self.train.seed != TrainConfig::default().seed && self.train.seed != self.seed {
            return Err(Error::Config("set the top-level seed instead of train.seed".into()));
        }
        self.train_config().validate()?;
        self.probe_config().validate()?;
        if let Some(c) = &self.compression.fixed {
            c.validate().map_err(config_err)?;
        }
        for cand in &self.compression.candidates {
            for q in cand.grid() {
                cand.spec(q).validate().map_err(config_err)?;
            }
        }
        if self.compression.scope == Scope::WholeDataset && !self.compression.compress_test {
            return Err(Error::Config(
                "compress_test = false only applies to scope = \"exemplars_only\"".into(),
            ));
        }
        if let Some(f) = self.probe.budget_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("probe.budget_fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn probe_config(&self) -> TrainConfig {
        let base = self.train_config();
        let epochs_first = self.probe.epochs_first.unwrap_or(base.epochs_first);
        let epochs_incremental = self.probe.epochs_incremental.unwrap_or(base.epochs_incremental);
        // Shortened probe phases keep only the milestones they reach.
        let shortest = [epochs_first, epochs_incremental].into_iter().filter(|&e| e > 0).min().unwrap_or(0);
        let milestones = base.milestones.iter().copied().filter(|&m| m < shortest).collect();
        TrainConfig { epochs_first, epochs_incremental, milestones, ..base }
    }

    /// `$CILCOMP_CACHE_DIR`, else `cache_dir`, else `<output_dir>/cache`.
    pub fn cache_root(&self) -> PathBuf {
        std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone())
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_dir = None;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes()))[..16].to_string())
    }
}

/// Dataset loaded, relabelled by the task order and measured.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: DatasetHandle,
    pub sequence: TaskSequence,
    pub bpp_ori: f64,
    pub mean_pixels: f64,
    /// Run budget priced at the source rate.
    pub budget: MemoryBudget,
}

impl Prepared {
    /// Classes before task `t` in relabelled ids.
    pub fn first_new_class(&self, t: usize) -> usize {
        self.sequence.class_range(t).start
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetInfo {
    name: String,
    fingerprint: String,
    classes: usize,
    train_samples: usize,
    test_samples: usize,
    bpp_ori: f64,
    mean_pixels: f64,
    budget: MemoryBudget,
    task_sizes: Vec<usize>,
    sequence: TaskSequence,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Loads the dataset, builds the task sequence and prices the budget.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let raw = cfg.dataset.load()?;
    let sequence = build_task_sequence(&raw, &cfg.protocol)?;
    let dataset = raw.remapped(&sequence.class_order)?;
    let bpp_ori = dataset.train_bpp()?;
    let mean_pixels = dataset.mean_train_pixels();
    let budget = match (cfg.budget.reference_images, cfg.budget.bytes) {
        (Some(b), _) => MemoryBudget::from_reference(b, bpp_ori, mean_pixels, bpp_ori)?,
        (None, Some(bytes)) => MemoryBudget::from_bytes(bytes, bpp_ori, mean_pixels, bpp_ori)?,
        (None, None) => return Err(Error::Config("no budget".into())),
    };
    info!(
        "{}: {} classes, source rate {bpp_ori:.3} bpp, budget {} bytes = {} source images",
        dataset.name,
        dataset.num_classes(),
        budget.bytes,
        budget.reference_image_count
    );
    let info = DatasetInfo {
        name: dataset.name.clone(),
        fingerprint: dataset.fingerprint(),
        classes: dataset.num_classes(),
        train_samples: dataset.train.len(),
        test_samples: dataset.test.len(),
        bpp_ori,
        mean_pixels,
        budget: budget.clone(),
        task_sizes: sequence.tasks.iter().map(Vec::len).collect(),
        sequence: sequence.clone(),
    };
    write_json(&cfg.output_dir.join("dataset.json"), &info)?;
    Ok(Prepared { dataset, sequence, bpp_ori, mean_pixels, budget })
}

fn preprocessed(cfg: &RunConfig, p: &Prepared, codec: &CodecSpec) -> Result<DatasetHandle> {
    preprocess_cached(&p.dataset, codec, &cfg.cache_root().join("datasets"))
}

/// Evenly strided subset of at most `n` training images (all when `n` is 0).
fn rd_sample(samples: &[Sample], n: usize) -> Vec<&RgbImage> {
    let stride = if n == 0 || samples.len() <= n { 1 } else { samples.len().div_ceil(n) };
    samples.iter().step_by(stride).map(|s| &s.image).collect()
}

/// Rate-distortion curve per candidate method; writes `rd.csv` and `rd.svg`.
pub fn rd_curves(cfg: &RunConfig, p: &Prepared) -> Result<Vec<RatePoint>> {
    let images = rd_sample(&p.dataset.train, cfg.compression.rd_images);
    let mut points = Vec::new();
    for cand in &cfg.compression.candidates {
        points.extend(codecs::rd_curve(&images, &cand.spec(0), &cand.grid())?);
    }
    fs::create_dir_all(&cfg.output_dir)?;
    codecs::write_rd_csv(&cfg.output_dir.join("rd.csv"), &points)?;
    codecs::plot_rd_svg(&cfg.output_dir.join("rd.svg"), &points)?;
    Ok(points)
}

/// Per-method quality grids limited to the rate range every method covers.
fn overlapping_grids(cfg: &RunConfig, p: &Prepared) -> Result<Vec<(CandidateConfig, Vec<u32>)>> {
    let cands = &cfg.compression.candidates;
    if !cfg.compression.overlap_only || cands.len() < 2 {
        return Ok(cands.iter().map(|c| (c.clone(), c.grid())).collect());
    }
    let points = rd_curves(cfg, p)?;
    let range = |c: &CandidateConfig| {
        points
            .iter()
            .filter(|r| r.codec.method == c.method && r.codec.external == c.external)
            .fold((f64::MAX, f64::MIN), |(lo, hi), r| (lo.min(r.mean_bpp), hi.max(r.mean_bpp)))
    };
    let (lo, hi) = cands.iter().map(range).fold((f64::MIN, f64::MAX), |(l, h), (a, b)| (l.max(a), h.min(b)));
    Ok(cands
        .iter()
        .map(|c| {
            let inside: Vec<u32> = points
                .iter()
                .filter(|r| r.codec.method == c.method && r.codec.external == c.external)
                .filter(|r| r.mean_bpp >= lo && r.mean_bpp <= hi)
                .map(|r| r.codec.quality)
                .collect();
            if inside.is_empty() {
                warn!("{}: no quality inside the shared rate range [{lo:.3}, {hi:.3}]; probing the full grid", c.method);
                (c.clone(), c.grid())
            } else {
                let mut q = inside;
                q.sort_unstable();
                (c.clone(), q)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub results: Vec<ForgettingProbeResult>,
    /// Selected setting per candidate method.
    pub selected: Vec<ForgettingProbeResult>,
}

fn probe_halves(cfg: &RunConfig, p: &Prepared) -> Result<(Vec<usize>, Vec<usize>)> {
    match cfg.probe.split {
        ProbeSplit::Samples => split_first_task(&p.sequence, &p.dataset, cfg.seed),
        ProbeSplit::Classes => split_first_task_by_class(&p.sequence, &p.dataset),
    }
}

/// Runs the forgetting probe over each candidate's grid and picks a rate per
/// method. Writes `probe.csv`, `probe.svg` and `probe.json`.
pub fn probe_rates(cfg: &RunConfig, p: &Prepared) -> Result<ProbeOutcome> {
    let path = cfg.output_dir.join("probe.json");
    if path.exists() {
        info!("reusing {}", path.display());
        return read_json(&path);
    }
    if cfg.compression.candidates.is_empty() {
        return Err(Error::Config("no compression.candidates to probe".into()));
    }
    let (first, second) = probe_halves(cfg, p)?;
    let mut classes: Vec<usize> = first.iter().map(|&i| p.dataset.train[i].label).collect();
    classes.sort_unstable();
    classes.dedup();
    let fraction = cfg
        .probe
        .budget_fraction
        .unwrap_or(classes.len() as f64 / p.dataset.num_classes() as f64);
    let budget = p.budget.scaled(fraction)?;
    let probe_cfg = cfg.probe_config();

    let mut results = Vec::new();
    let mut selected = Vec::new();
    for (cand, grid) in overlapping_grids(cfg, p)? {
        let mut per = Vec::new();
        for q in grid {
            let codec = cand.spec(q);
            let data = preprocessed(cfg, p, &codec)?;
            let test: Vec<&Sample> = data.test.iter().filter(|s| classes.binary_search(&s.label).is_ok()).collect();
            let probe = ProbeData { train: &data.train, first_half: &first, second_half: &second, test: &test };
            let r = forgetting_probe(&probe, &codec, &budget, &probe_cfg)?;
            info!(
                "probe {codec}: {:.3} bpp, {} exemplars, acc {:.4} -> {:.4}, forgetting {:.4}",
                r.bpp, r.exemplars, r.acc_step1, r.acc_step2, r.forgetting
            );
            per.push(r);
        }
        selected.push(select_rate(&per)?.clone());
        results.extend(per);
    }
    write_probe_csv(&cfg.output_dir.join("probe.csv"), &results)?;
    let marks: Vec<CodecSpec> = selected.iter().map(|r| r.codec.clone()).collect();
    plot_probe_svg(&cfg.output_dir.join("probe.svg"), &results, &marks)?;
    let out = ProbeOutcome { results, selected };
    write_json(&path, &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub scores: Vec<CodecScore>,
    pub selected: CodecSpec,
}

/// Scores each method at its probed rate by feature distortion under a
/// backbone trained on uncompressed first-task data, and picks the lowest.
/// Writes `codec_scores.csv` and `selection.json`.
pub fn select_codec_stage(cfg: &RunConfig, p: &Prepared, probes: &ProbeOutcome) -> Result<SelectionRecord> {
    let path = cfg.output_dir.join("selection.json");
    if path.exists() {
        info!("reusing {}", path.display());
        return read_json(&path);
    }
    let t0: Vec<&Sample> = p.sequence.train_indices[0].iter().map(|&i| &p.dataset.train[i]).collect();
    let phi_path = cfg.output_dir.join("selection").join("phi.ckpt");
    let phi = if phi_path.exists() {
        load_snapshot(&phi_path)?
    } else {
        let m = train_step(&ModelSnapshot::new(&cfg.probe_config())?, &t0, &[], Method::Finetune, &cfg.probe_config())?;
        save_snapshot(&m, &cfg.probe_config(), &phi_path, serde_json::json!({"role": "feature distortion reference"}))?;
        m
    };
    let n = if cfg.probe.fmse_images == 0 { t0.len() } else { cfg.probe.fmse_images.min(t0.len()) };
    let ids: Vec<usize> = p.sequence.train_indices[0][..n].to_vec();
    let originals: Vec<&RgbImage> = ids.iter().map(|&i| &p.dataset.train[i].image).collect();
    let mut scores = Vec::new();
    for sel in &probes.selected {
        let data = preprocessed(cfg, p, &sel.codec)?;
        let recon: Vec<&RgbImage> = ids.iter().map(|&i| &data.train[i].image).collect();
        let f_mse = feature_mse(&phi, &originals, &recon)?;
        let rate = codecs::rate_point(&originals, &sel.codec)?;
        info!("{}: F_MSE {f_mse:.6}, {:.3} bpp, {:.2} dB", sel.codec, rate.mean_bpp, rate.mean_psnr);
        scores.push(CodecScore { codec: sel.codec.clone(), f_mse, mean_bpp: rate.mean_bpp, mean_psnr: rate.mean_psnr });
    }
    let selected = select_codec(&scores)?.codec.clone();
    write_scores_csv(&cfg.output_dir.join("codec_scores.csv"), &scores)?;
    let rec = SelectionRecord { scores, selected };
    write_json(&path, &rec)?;
    Ok(rec)
}

/// The codec a run trains with: the fixed one, the selected one (probing and
/// selecting if needed), or raw storage when no candidates are configured.
pub fn resolve_codec(cfg: &RunConfig, p: &Prepared) -> Result<(CodecSpec, Option<SelectionRecord>)> {
    if let Some(c) = &cfg.compression.fixed {
        return Ok((c.clone(), None));
    }
    if cfg.compression.candidates.is_empty() {
        return Ok((CodecSpec::raw(), None));
    }
    let probes = probe_rates(cfg, p)?;
    let sel = select_codec_stage(cfg, p, &probes)?;
    Ok((sel.selected.clone(), Some(sel)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Accuracy on classes learned before this step; absent at step 0.
    pub old_accuracy: Option<f64>,
    pub new_accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub seen_classes: usize,
    pub first_new_class: usize,
    pub buffer_size: usize,
    pub buffer_bits: u64,
    pub budget_bits: u64,
    /// Metrics per evaluation view; `test` is the run's own test set.
    pub eval: BTreeMap<String, EvalMetrics>,
}

impl StepRecord {
    pub fn accuracy(&self, view: &str) -> Option<f64> {
        self.eval.get(view).map(|m| m.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub method: Method,
    pub codec: CodecSpec,
    pub bpp_ori: f64,
    pub bpp_comp: f64,
    pub budget: MemoryBudget,
    pub capacity: usize,
    pub num_tasks: usize,
    pub steps: Vec<StepRecord>,
    pub avg_accuracy: Option<f64>,
    pub last_accuracy: Option<f64>,
    #[serde(default)]
    pub selection: Option<SelectionRecord>,
}

impl RunRecord {
    pub fn complete(&self) -> bool {
        self.steps.len() == self.num_tasks
    }

    /// Per-step accuracies on one view.
    pub fn curve(&self, view: &str) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.accuracy(view)).collect()
    }

    /// Mean old-class accuracy over steps after the first.
    pub fn mean_old_accuracy(&self, view: &str) -> Option<f64> {
        let olds: Vec<f64> = self.steps.iter().filter_map(|s| s.eval.get(view)?.old_accuracy).collect();
        (!olds.is_empty()).then(|| olds.iter().sum::<f64>() / olds.len() as f64)
    }

    fn refresh_aggregates(&mut self) {
        let curve = self.curve(PRIMARY_VIEW);
        (self.avg_accuracy, self.last_accuracy) = match aggregate_metrics(&curve) {
            Ok((a, l)) => (Some(a), Some(l)),
            Err(_) => (None, None),
        };
    }
}

/// Average incremental accuracy and last-step accuracy.
pub fn aggregate_metrics(per_step: &[f64]) -> Result<(f64, f64)> {
    let last = *per_step.last().ok_or_else(|| Error::Invalid("no step accuracies".into()))?;
    Ok((per_step.iter().sum::<f64>() / per_step.len() as f64, last))
}

pub const PRIMARY_VIEW: &str = "test";

#[derive(Default, Serialize, Deserialize)]
struct RunState {
    config_digest: String,
    codec: Option<CodecSpec>,
    steps: Vec<StepRecord>,
}

const PARTIAL: &str = "PARTIAL";

fn step_dir(out: &Path, t: usize) -> PathBuf {
    out.join("steps").join(format!("step{t}"))
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    sample_id: usize,
    label: usize,
    prediction: usize,
}

fn eval_view(preds: &[usize], labels: &[usize], first_new: usize) -> EvalMetrics {
    let subset = |keep: &dyn Fn(usize) -> bool| {
        let (mut hit, mut n) = (0usize, 0usize);
        for (&p, &l) in preds.iter().zip(labels) {
            if keep(l) {
                n += 1;
                hit += usize::from(p == l);
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    };
    EvalMetrics {
        accuracy: subset(&|_| true).unwrap_or(0.0),
        old_accuracy: subset(&|l| l < first_new),
        new_accuracy: subset(&|l| l >= first_new).unwrap_or(0.0),
        samples: labels.len(),
    }
}

/// Trains all tasks with `codec`, evaluating every step on each view.
/// `views` maps a name to a test split (indexed like the original test set).
fn train_stage(
    cfg: &RunConfig,
    p: &Prepared,
    codec: &CodecSpec,
    selection: Option<SelectionRecord>,
    views: &[(&str, bool)],
) -> Result<RunRecord> {
    let out = &cfg.output_dir;
    let compressed = preprocessed(cfg, p, codec)?;
    let base = data_views(&p.dataset, &compressed, cfg.compression.scope, cfg.compression.compress_test);
    let bpp_comp = compressed.train_bpp()?;
    let budget = p.budget.at_rate(bpp_comp)?;
    let capacity = crate::buffer::equivalent_capacity(&budget)?;
    info!("{codec}: {bpp_comp:.3} bpp, capacity {capacity} exemplars");
    let tc = cfg.train_config();

    let state_path = out.join("state.json");
    let digest = cfg.digest()?;
    let mut state: RunState = if state_path.exists() { read_json(&state_path)? } else { RunState::default() };
    if state.config_digest != digest || state.codec.as_ref() != Some(codec) {
        state = RunState { config_digest: digest, codec: Some(codec.clone()), steps: Vec::new() };
    }

    let mut model = ModelSnapshot::new(&tc)?;
    let mut buffer = ExemplarBuffer::default();
    let done = state.steps.len();
    if done > 0 {
        let dir = step_dir(out, done - 1);
        model = load_snapshot(&dir.join("model.ckpt"))?;
        buffer = ExemplarBuffer {
            capacity,
            budget_bits: budget.bits(),
            entries: read_manifest(&dir.join("buffer.csv"))?.into_iter().map(|r| r.1).collect(),
        };
        info!("resuming after step {}", done - 1);
    }

    let mut record = RunRecord {
        name: cfg.name.clone(),
        method: cfg.method,
        codec: codec.clone(),
        bpp_ori: p.bpp_ori,
        bpp_comp,
        budget: budget.clone(),
        capacity,
        num_tasks: p.sequence.num_tasks(),
        steps: state.steps.clone(),
        avg_accuracy: None,
        last_accuracy: None,
        selection,
    };

    for t in done..p.sequence.num_tasks() {
        let new: Vec<&Sample> = p.sequence.train_indices[t].iter().map(|&i| &base.train[i]).collect();
        let exemplars = buffer.samples(base.pool)?;
        model = train_step(&model, &new, &exemplars, cfg.method, &tc)?;
        let seen: Vec<usize> = (0..p.sequence.class_range(t).end).collect();
        buffer = rebuild_buffer(&seen, base.pool, &model, &budget)?;
        let means = match cfg.method {
            Method::Icarl => Some(class_means(&model, &buffer.samples(base.pool)?)?),
            _ => None,
        };
        let dir = step_dir(out, t);
        fs::create_dir_all(&dir)?;
        let first_new = p.first_new_class(t);
        let mut eval = BTreeMap::new();
        for &(name, compressed_test) in views {
            let split = if compressed_test { &compressed.test } else { &p.dataset.test };
            let test: Vec<&Sample> = split.iter().filter(|s| s.label < seen.len()).collect();
            let images: Vec<&RgbImage> = test.iter().map(|s| &s.image).collect();
            let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
            let preds = predict(&model, &images, cfg.method, means.as_deref())?;
            let mut w = csv::Writer::from_path(dir.join(format!("pred_{name}.csv")))?;
            for ((s, &l), &pr) in test.iter().zip(&labels).zip(&preds) {
                w.serialize(PredictionRow { sample_id: s.id, label: l, prediction: pr })?;
            }
            w.flush()?;
            eval.insert(name.to_string(), eval_view(&preds, &labels, first_new));
        }
        write_manifest(&dir.join("buffer.csv"), t, &buffer)?;
        let step = StepRecord {
            step: t,
            seen_classes: seen.len(),
            first_new_class: first_new,
            buffer_size: buffer.len(),
            buffer_bits: buffer.total_bits(),
            budget_bits: budget.bits(),
            eval,
        };
        save_snapshot(&model, &tc, &dir.join("model.ckpt"), serde_json::to_value(&step)?)?;
        info!(
            "step {t}: {} classes, accuracy {}",
            seen.len(),
            step.eval.iter().map(|(k, v)| format!("{k}={:.4}", v.accuracy)).collect::<Vec<_>>().join(" ")
        );
        state.steps.push(step.clone());
        record.steps.push(step);
        write_json(&state_path, &state)?;
        write_metrics_jsonl(out, &record.steps)?;
    }
    record.refresh_aggregates();
    Ok(record)
}

fn write_metrics_jsonl(out: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut text = String::new();
    for s in steps {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    fs::write(out.join("metrics.jsonl"), text)?;
    Ok(())
}

/// Marks the run directory as partial for the duration of `f`; the marker
/// stays, holding the error, when `f` fails.
fn guarded<T>(cfg: &RunConfig, f: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let marker = cfg.output_dir.join(PARTIAL);
    fs::write(&marker, "running\n")?;
    match f() {
        Ok(v) => {
            fs::remove_file(&marker)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("failed: {e}\n"));
            Err(e)
        }
    }
}

/// Full pipeline: prepare, probe and select (unless fixed), preprocess, train
/// every task, evaluate after each, and write the report. Re-running in the
/// same output directory resumes finished stages and steps.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    guarded(cfg, || {
        let p = prepare(cfg)?;
        let (codec, selection) = resolve_codec(cfg, &p)?;
        let view = [(PRIMARY_VIEW, cfg.compression.scope == Scope::WholeDataset || cfg.compression.compress_test)];
        let record = train_stage(cfg, &p, &codec, selection, &view)?;
        emit_report(&record, &cfg.output_dir)?;
        Ok(record)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftReport {
    pub steps: Vec<usize>,
    /// Old-class accuracy with test data processed like the exemplars.
    pub matched_old: Vec<Option<f64>>,
    /// Old-class accuracy on unprocessed test data.
    pub mismatched_old: Vec<Option<f64>>,
    pub matched_acc: Vec<f64>,
    pub mismatched_acc: Vec<f64>,
    pub record: RunRecord,
}

impl DomainShiftReport {
    /// Mean old-class accuracy gap (matched − mismatched) over steps after the first.
    pub fn mean_old_gap(&self) -> Option<f64> {
        let gaps: Vec<f64> = self
            .matched_old
            .iter()
            .zip(&self.mismatched_old)
            .filter_map(|(a, b)| Some((*a)? - (*b)?))
            .collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }
}

/// Compares test-time preprocessing that matches the stored exemplars against
/// unprocessed test data. The two configurations may differ only in
/// `compression.compress_test`; since that flag does not influence training,
/// one trajectory is trained and evaluated on both test sets.
pub fn domain_shift_report(matched: &RunConfig, mismatched: &RunConfig) -> Result<DomainShiftReport> {
    if !matched.compression.compress_test || mismatched.compression.compress_test {
        return Err(Error::Config("the matched run needs compress_test = true and the mismatched run false".into()));
    }
    let mut probe = mismatched.clone();
    probe.compression.compress_test = true;
    if &probe != matched {
        return Err(Error::Config("domain-shift configurations differ in more than compress_test".into()));
    }
    matched.validate()?;
    let cfg = matched;
    guarded(cfg, || {
        let p = prepare(cfg)?;
        let (codec, selection) = resolve_codec(cfg, &p)?;
        let record = train_stage(cfg, &p, &codec, selection, &[("compressed", true), ("original", false)])?;
        let pick = |v: &str| -> (Vec<Option<f64>>, Vec<f64>) {
            record.steps.iter().map(|s| (s.eval[v].old_accuracy, s.eval[v].accuracy)).unzip()
        };
        let (matched_old, matched_acc) = pick("compressed");
        let (mismatched_old, mismatched_acc) = pick("original");
        let rep = DomainShiftReport {
            steps: record.steps.iter().map(|s| s.step).collect(),
            matched_old,
            mismatched_old,
            matched_acc,
            mismatched_acc,
            record,
        };
        write_domain_shift(&cfg.output_dir, &rep)?;
        Ok(rep)
    })
}

fn write_domain_shift(out: &Path, rep: &DomainShiftReport) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("domain_shift.csv"))?;
    w.write_record(["step", "matched_old", "mismatched_old", "matched_acc", "mismatched_acc"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for i in 0..rep.steps.len() {
        w.write_record([
            rep.steps[i].to_string(),
            opt(rep.matched_old[i]),
            opt(rep.mismatched_old[i]),
            format!("{:.6}", rep.matched_acc[i]),
            format!("{:.6}", rep.mismatched_acc[i]),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("domain_shift.json"), rep)?;
    let series = |v: &[Option<f64>]| -> Vec<(f64, f64)> {
        rep.steps.iter().zip(v).filter_map(|(&s, a)| Some((s as f64, (*a)? * 100.0))).collect()
    };
    plot_curves(
        &out.join("domain_shift.svg"),
        "old-class accuracy (%)",
        &[("matched", series(&rep.matched_old)), ("mismatched", series(&rep.mismatched_old))],
    )
}

fn plot_curves(path: &Path, y_desc: &str, curves: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    use plotters::prelude::*;
    let xmax = curves.iter().flat_map(|c| c.1.iter().map(|p| p.0)).fold(1.0f64, f64::max);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.2..xmax + 0.2, 0.0..100.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc(y_desc).draw().map_err(plot_err)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_else(|| "-".into())
}

/// Writes `summary.json`, `summary.md`, `metrics.csv` and `accuracy.svg`.
/// Steps not yet run are listed as missing.
pub fn emit_report(record: &RunRecord, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("summary.json"), record)?;
    let mut md = String::new();
    md.push_str(&format!("# {}\n\n", record.name));
    if !record.complete() {
        md.push_str(&format!("Partial run: {} of {} steps finished.\n\n", record.steps.len(), record.num_tasks));
    }
    md.push_str("| method | codec | bpp | exemplars | Avg | Last |\n|---|---|---|---|---|---|\n");
    md.push_str(&format!(
        "| {} | {} | {:.3} | {} | {} | {} |\n\n",
        record.method,
        record.codec,
        record.bpp_comp,
        record.capacity,
        pct(record.avg_accuracy),
        pct(record.last_accuracy)
    ));
    md.push_str("| step | classes | accuracy | old | new | buffer | bits / budget |\n|---|---|---|---|---|---|---|\n");
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record(["step", "view", "seen_classes", "accuracy", "old_accuracy", "new_accuracy", "buffer_size", "buffer_bits"])?;
    for t in 0..record.num_tasks {
        match record.steps.get(t) {
            Some(s) => {
                let m = s.eval.get(PRIMARY_VIEW).or_else(|| s.eval.values().next());
                md.push_str(&format!(
                    "| {t} | {} | {} | {} | {} | {} | {} / {} |\n",
                    s.seen_classes,
                    pct(m.map(|m| m.accuracy)),
                    pct(m.and_then(|m| m.old_accuracy)),
                    pct(m.map(|m| m.new_accuracy)),
                    s.buffer_size,
                    s.buffer_bits,
                    s.budget_bits
                ));
                for (view, m) in &s.eval {
                    w.write_record([
                        t.to_string(),
                        view.clone(),
                        s.seen_classes.to_string(),
                        format!("{:.6}", m.accuracy),
                        m.old_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default(),
                        format!("{:.6}", m.new_accuracy),
                        s.buffer_size.to_string(),
                        s.buffer_bits.to_string(),
                    ])?;
                }
            }
            None => md.push_str(&format!("| {t} | missing | - | - | - | - | - |\n")),
        }
    }
    w.flush()?;
    if let Some(sel) = &record.selection {
        md.push_str("\n| codec | bpp | PSNR | F_MSE |\n|---|---|---|---|\n");
        for s in &sel.scores {
            md.push_str(&format!("| {} | {:.3} | {:.2} | {:.6} |\n", s.codec, s.mean_bpp, s.mean_psnr, s.f_mse));
        }
        md.push_str(&format!("\nSelected codec: {}\n", sel.selected));
    }
    fs::write(out.join("summary.md"), md)?;
    let mut views: Vec<&String> = record.steps.iter().flat_map(|s| s.eval.keys()).collect();
    views.sort();
    views.dedup();
    let curves: Vec<(&str, Vec<(f64, f64)>)> = views
        .iter()
        .map(|v| {
            (
                v.as_str(),
                record.steps.iter().filter_map(|s| Some((s.step as f64, s.accuracy(v)? * 100.0))).collect(),
            )
        })
        .collect();
    plot_curves(&out.join("accuracy.svg"), "top-1 accuracy (%)", &curves)
}

/// Outcome of regenerating a report from saved predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportCheck {
    pub record: RunRecord,
    /// Largest difference between recomputed and logged accuracies.
    pub max_deviation: f64,
    /// Whether every saved buffer manifest fits its budget.
    pub budget_ok: bool,
}

/// Recomputes every accuracy from the prediction files and buffer manifests
/// in `out`, compares with the logged metrics, and rewrites the report.
pub fn report(out: &Path) -> Result<ReportCheck> {
    let mut record: RunRecord = read_json(&out.join("summary.json")).or_else(|_| -> Result<RunRecord> {
        let state: RunState = read_json(&out.join("state.json"))?;
        let info: DatasetInfo = read_json(&out.join("dataset.json"))?;
        let cfg = RunConfig::load(&out.join("config.toml"), &[])?;
        Ok(RunRecord {
            name: cfg.name,
            method: cfg.method,
            codec: state.codec.unwrap_or_else(CodecSpec::raw),
            bpp_ori: info.bpp_ori,
            bpp_comp: f64::NAN,
            budget: info.budget.clone(),
            capacity: 0,
            num_tasks: info.task_sizes.len(),
            steps: state.steps,
            avg_accuracy: None,
            last_accuracy: None,
            selection: None,
        })
    })?;
    if let Ok(state) = read_json::<RunState>(&out.join("state.json")) {
        if state.steps.len() > record.steps.len() {
            record.steps = state.steps;
        }
    }
    let info: DatasetInfo = read_json(&out.join("dataset.json"))?;
    let mut max_dev = 0f64;
    let mut budget_ok = true;
    for step in &mut record.steps {
        let t = step.step;
        let dir = step_dir(out, t);
        let first_new: usize = info.task_sizes[..t].iter().sum();
        for (view, logged) in step.eval.iter_mut() {
            let rows: Vec<PredictionRow> = csv::Reader::from_path(dir.join(format!("pred_{view}.csv")))?
                .deserialize()
                .collect::<std::result::Result<_, _>>()?;
            let preds: Vec<usize> = rows.iter().map(|r| r.prediction).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
            let fresh = eval_view(&preds, &labels, first_new);
            max_dev = max_dev.max((fresh.accuracy - logged.accuracy).abs());
            if let (Some(a), Some(b)) = (fresh.old_accuracy, logged.old_accuracy) {
                max_dev = max_dev.max((a - b).abs());
            }
            *logged = fresh;
        }
        let bits: u64 = read_manifest(&dir.join("buffer.csv"))?.iter().map(|r| r.1.bits).sum();
        budget_ok &= bits <= step.budget_bits;
        step.buffer_bits = bits;
    }
    record.refresh_aggregates();
    emit_report(&record, out)?;
    if max_dev > 1e-6 {
        warn!("recomputed accuracies deviate from the log by up to {max_dev:e}");
    }
    if !budget_ok {
        warn!("a saved buffer manifest exceeds its budget");
    }
    Ok(ReportCheck { record, max_deviation: max_dev, budget_ok })
}

/// Writes the rate-distortion curves of the configured candidates.
pub fn rd_stage(cfg: &RunConfig) -> Result<Vec<RatePoint>> {
    cfg.validate()?;
    let p = prepare(cfg)?;
    if cfg.compression.candidates.is_empty() {
        return Err(Error::Config("no compression.candidates for a rate-distortion curve".into()));
    }
    rd_curves(cfg, &p)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
name = "mini"
seed = 5
output_dir = "/tmp/unused"
method = "wa"

[dataset]
kind = "synthetic"
classes = 4
train_per_class = 6
test_per_class = 3
size = 16

[protocol]
kind = "lfs"
num_tasks = 2

[budget]
reference_images = 4

[train]
backbone = "resnet8"
base_width = 4
epochs_first = 1
epochs_incremental = 1
milestones = []
batch_size = 8
"#;

    #[test]
    fn config_parses_with_overrides() {
        let cfg = RunConfig::from_toml(MINI, &["train.lr=0.05".into(), "compression.fixed.method=jpeg".into(), "compression.fixed.quality=20".into()])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.compression.fixed, Some(CodecSpec::jpeg(20)));
        assert_eq!(cfg.train_config().seed, 5);
        let echo = RunConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(echo, cfg);
    }

    #[test]
    fn config_errors_are_config_errors() {
        for bad in [
            vec!["budget.bytes=100".to_string()],
            vec!["protocol.num_tasks=0".into()],
            vec!["compression.compress_test=false".into()],
            vec!["train.milestones=[50]".into()],
            vec!["nonsense".into()],
            vec!["unknown_key=1".into()],
        ] {
            let err = RunConfig::from_toml(MINI, &bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad:?}: {err}");
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_metrics(&[0.8]).unwrap(), (0.8, 0.8));
        let (avg, last) = aggregate_metrics(&[0.9, 0.7, 0.5]).unwrap();
        assert!((avg - 0.7).abs() < 1e-12 && last == 0.5);
        assert!(aggregate_metrics(&[]).is_err());
    }

    #[test]
    fn eval_view_splits_old_and_new() {
        let m = eval_view(&[0, 1, 2, 2], &[0, 0, 2, 3], 2);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.old_accuracy, Some(0.5));
        assert_eq!(m.new_accuracy, 0.5);
        assert_eq!(eval_view(&[0], &[0], 0).old_accuracy, None);
    }

    #[test]
    fn cache_root_prefers_environment() {
        let cfg = RunConfig::from_toml(MINI, &[]).unwrap();
        if std::env::var_os(CACHE_ENV).is_none() {
            assert_eq!(cfg.cache_root(), PathBuf::from("/tmp/unused/cache"));
        }
    }
}
