//! Byte-budgeted exemplar memory with herding selection.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::Sample;
use crate::trainer::{extract_features, l2_normalize, ModelSnapshot};

/// A storage budget in bytes, expressed against `reference_image_count`
/// images at the source rate `bpp_ori`, and the rate `bpp_comp` at which
/// exemplars are actually stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub bytes: u64,
    pub reference_image_count: usize,
    pub bpp_ori: f64,
    pub bpp_comp: f64,
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Budget(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

impl MemoryBudget {
    /// Budget that holds `images` source images of `mean_pixels` pixels each.
    pub fn from_reference(images: usize, bpp_ori: f64, mean_pixels: f64, bpp_comp: f64) -> Result<Self> {
        check_rate("bpp_ori", bpp_ori)?;
        check_rate("bpp_comp", bpp_comp)?;
        let bytes = (images as f64 * bpp_ori * mean_pixels / 8.0).ceil() as u64;
        Self::checked(Self { bytes, reference_image_count: images, bpp_ori, bpp_comp })
    }

    /// Budget of `bytes`, with the reference count it corresponds to at the source rate.
    pub fn from_bytes(bytes: u64, bpp_ori: f64, mean_pixels: f64, bpp_comp: f64) -> Result<Self> {
        check_rate("bpp_ori", bpp_ori)?;
        check_rate("bpp_comp", bpp_comp)?;
        let images = (bytes as f64 * 8.0 / (bpp_ori * mean_pixels)).floor() as usize;
        Self::checked(Self { bytes, reference_image_count: images, bpp_ori, bpp_comp })
    }

    fn checked(self) -> Result<Self> {
        if self.bytes == 0 {
            return Err(Error::Budget("budget must be at least one byte".into()));
        }
        if self.bpp_comp > self.bpp_ori {
            warn!(
                "stored rate {:.3} bpp exceeds the source rate {:.3} bpp; the buffer shrinks",
                self.bpp_comp, self.bpp_ori
            );
        }
        Ok(self)
    }

    pub fn bits(&self) -> u64 {
        self.bytes * 8
    }

    /// Same bytes and reference count at another storage rate.
    pub fn at_rate(&self, bpp_comp: f64) -> Result<Self> {
        check_rate("bpp_comp", bpp_comp)?;
        Self::checked(Self { bpp_comp, ..self.clone() })
    }

    /// Budget scaled by `fraction`, rounding down.
    pub fn scaled(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Budget(format!("budget fraction must be in (0, 1], got {fraction}")));
        }
        Self::checked(Self {
            bytes: (self.bytes as f64 * fraction).floor() as u64,
            reference_image_count: (self.reference_image_count as f64 * fraction).floor() as usize,
            ..self.clone()
        })
    }
}

/// Exemplar count the budget affords at the storage rate:
/// `⌊B · bpp_ori / bpp_comp⌋`.
pub fn equivalent_capacity(budget: &MemoryBudget) -> Result<usize> {
    check_rate("bpp_ori", budget.bpp_ori)?;
    check_rate("bpp_comp", budget.bpp_comp)?;
    Ok(floor_ratio(budget.reference_image_count as u64, budget.bpp_ori, budget.bpp_comp))
}

/// Mantissa and exponent with `v = m · 2^e`, for finite positive `v`.
fn decompose(v: f64) -> (u128, i32) {
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        (frac as u128, -1074)
    } else {
        ((frac | (1u64 << 52)) as u128, exp - 1075)
    }
}

/// `⌊b · num / den⌋` computed exactly from the binary values of `num` and
/// `den`, saturating at `usize::MAX`.
fn floor_ratio(b: u64, num: f64, den: f64) -> usize {
    let (mn, en) = decompose(num);
    let (md, ed) = decompose(den);
    let top = b as u128 * mn;
    let shift = en - ed;
    let q = if shift >= 0 {
        if shift >= 128 || (top != 0 && top.leading_zeros() <= shift as u32) {
            return if top == 0 { 0 } else { usize::MAX };
        }
        (top << shift) / md
    } else {
        let s = -shift;
        if s >= 128 || md.leading_zeros() <= s as u32 {
            // The denominator exceeds u128 while the numerator stays below 2^117.
            return 0;
        }
        top / (md << s)
    };
    usize::try_from(q).unwrap_or(usize::MAX)
}

/// Greedy herding: repeatedly adds the sample that brings the mean of the
/// selection closest (L2) to the mean of all `features`. Ties go to the lower
/// index. Returns the first `k` picks in order.
pub fn herding_select(features: &[Vec<f32>], k: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Invalid("herding over an empty class".into()));
    }
    if k > n {
        return Err(Error::Invalid(format!("cannot pick {k} exemplars from {n} samples")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Invalid("herding features must be finite and equally sized".into()));
    }
    let mut mu = vec![0f64; d];
    for f in features {
        mu.iter_mut().zip(f).for_each(|(m, &v)| *m += v as f64);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);

    let mut sum = vec![0f64; d];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(k);
    for t in 0..k {
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = (0..d)
                .map(|j| {
                    let diff = mu[j] - (sum[j] + f[j] as f64) / (t + 1) as f64;
                    diff * diff
                })
                .sum();
            // Distances equal up to summation rounding count as ties.
            if dist < best.0 * (1.0 - 1e-9) {
                best = (dist, i);
            }
        }
        let i = best.1;
        taken[i] = true;
        sum.iter_mut().zip(&features[i]).for_each(|(s, &v)| *s += v as f64);
        order.push(i);
    }
    Ok(order)
}

/// Splits `capacity` equally over `classes`; the remainder goes one each to
/// the lowest class ids.
pub fn allocate(capacity: usize, classes: &[usize]) -> Vec<(usize, usize)> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let n = sorted.len().max(1);
    let (base, extra) = (capacity / n, capacity % n);
    sorted.into_iter().enumerate().map(|(i, c)| (c, base + usize::from(i < extra))).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub class: usize,
    pub sample_id: usize,
    pub bits: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarBuffer {
    pub capacity: usize,
    pub budget_bits: u64,
    /// Grouped by class in ascending id, each group in herding order.
    pub entries: Vec<BufferEntry>,
}

impl ExemplarBuffer {
    pub fn total_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.bits).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_class(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.class).or_insert(0) += 1;
        }
        m
    }

    /// Resolves entries against the split they were drawn from.
    pub fn samples<'a>(&self, pool: &'a [Sample]) -> Result<Vec<&'a Sample>> {
        self.entries
            .iter()
            .map(|e| {
                pool.get(e.sample_id)
                    .filter(|s| s.id == e.sample_id && s.label == e.class)
                    .ok_or_else(|| Error::Invalid(format!("buffer entry {} not found in pool", e.sample_id)))
            })
            .collect()
    }
}

/// One exemplar candidate with its herding feature.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub class: usize,
    pub sample_id: usize,
    pub bits: u64,
    pub feature: Vec<f32>,
}

/// Allocates `capacity` over the candidates' classes, herds within each class
/// and trims entries until the stored bits fit `budget_bits`. Trimming removes
/// the last-selected entry of the currently largest class (highest id on ties),
/// so every class keeps a herding prefix and counts stay within one.
pub fn assemble_buffer(candidates: &[Candidate], capacity: usize, budget_bits: u64) -> Result<ExemplarBuffer> {
    let mut by_class: BTreeMap<usize, Vec<&Candidate>> = BTreeMap::new();
    for c in candidates {
        by_class.entry(c.class).or_default().push(c);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if capacity < classes.len() {
        let per = budget_bits as f64 / 8.0 / capacity.max(1) as f64;
        return Err(Error::Budget(format!(
            "capacity {capacity} cannot hold one exemplar for each of {} classes; \
             at least {} exemplars (about {:.0} bytes) are needed",
            classes.len(),
            classes.len(),
            per * classes.len() as f64
        )));
    }
    let mut groups: Vec<(usize, Vec<BufferEntry>)> = Vec::new();
    for (class, k) in allocate(capacity, &classes) {
        let members = &by_class[&class];
        let k = if k > members.len() {
            warn!("class {class}: {k} exemplars allotted but only {} samples exist", members.len());
            members.len()
        } else {
            k
        };
        let feats: Vec<Vec<f32>> = members.iter().map(|c| c.feature.clone()).collect();
        let order = herding_select(&feats, k)?;
        let entries =
            order.into_iter().map(|i| BufferEntry { class, sample_id: members[i].sample_id, bits: members[i].bits }).collect();
        groups.push((class, entries));
    }
    let mut total: u64 = groups.iter().flat_map(|g| &g.1).map(|e| e.bits).sum();
    let mut trimmed = 0;
    while total > budget_bits {
        let Some(g) = groups.iter_mut().filter(|g| !g.1.is_empty()).max_by_key(|g| (g.1.len(), g.0)) else {
            break;
        };
        total -= g.1.pop().expect("non-empty").bits;
        trimmed += 1;
    }
    if trimmed > 0 {
        info!("bit audit trimmed {trimmed} exemplars to fit {budget_bits} bits");
    }
    Ok(ExemplarBuffer { capacity, budget_bits, entries: groups.into_iter().flat_map(|g| g.1).collect() })
}

/// Rebuilds the buffer from scratch over the `seen` classes of `pool`, using
/// L2-normalized features of `model` for herding. Each entry carries the
/// stored bit cost of its sample.
pub fn rebuild_buffer(
    seen: &[usize],
    pool: &[Sample],
    model: &ModelSnapshot,
    budget: &MemoryBudget,
) -> Result<ExemplarBuffer> {
    let capacity = equivalent_capacity(budget)?;
    let members: Vec<&Sample> = pool.iter().filter(|s| seen.contains(&s.label)).collect();
    let images: Vec<&RgbImage> = members.iter().map(|s| &s.image).collect();
    let feats = if images.is_empty() { Vec::new() } else { extract_features(model, &images)? };
    let candidates: Vec<Candidate> = members
        .iter()
        .zip(feats)
        .map(|(s, mut f)| {
            l2_normalize(&mut f);
            Candidate { class: s.label, sample_id: s.id, bits: s.bits, feature: f }
        })
        .collect();
    let missing: Vec<usize> = seen.iter().copied().filter(|c| !candidates.iter().any(|m| m.class == *c)).collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("no pool samples for seen classes {missing:?}")));
    }
    assemble_buffer(&candidates, capacity, budget.bits())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    step: usize,
    class: usize,
    sample_id: usize,
    bits: u64,
}

pub fn write_manifest(path: &Path, step: usize, buffer: &ExemplarBuffer) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in &buffer.entries {
        w.serialize(ManifestRow { step, class: e.class, sample_id: e.sample_id, bits: e.bits })?;
    }
    if buffer.entries.is_empty() {
        w.write_record(["step", "class", "sample_id", "bits"])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest back as `(step, entry)` rows.
pub fn read_manifest(path: &Path) -> Result<Vec<(usize, BufferEntry)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<ManifestRow>()
        .map(|row| {
            let row = row?;
            Ok((row.step, BufferEntry { class: row.class, sample_id: row.sample_id, bits: row.bits }))
        })
        .collect()
}
