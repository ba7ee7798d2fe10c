//! Choosing a compression rate by a two-step forgetting probe on first-task
//! data, and choosing a codec by backbone feature distortion.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::buffer::{rebuild_buffer, MemoryBudget};
use crate::codecs::{pooled_bpp, CodecSpec};
use crate::error::{plot_err, Error, Result};
use crate::tasks::Sample;
use crate::trainer::{evaluate, extract_features, train_step, Method, ModelSnapshot, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingProbeResult {
    pub codec: CodecSpec,
    pub bpp: f64,
    pub exemplars: usize,
    pub acc_step1: f64,
    pub acc_step2: f64,
    /// `acc_step1 − acc_step2`.
    pub forgetting: f64,
}

impl ForgettingProbeResult {
    pub fn new(codec: CodecSpec, bpp: f64, exemplars: usize, acc_step1: f64, acc_step2: f64) -> Self {
        Self { codec, bpp, exemplars, acc_step1, acc_step2, forgetting: acc_step1 - acc_step2 }
    }
}

/// First-task data prepared with one codec.
#[derive(Clone, Copy, Debug)]
pub struct ProbeData<'a> {
    /// Training split the indices refer to; sample bits are the stored cost.
    pub train: &'a [Sample],
    pub first_half: &'a [usize],
    pub second_half: &'a [usize],
    /// Held-out test samples of the first half's classes.
    pub test: &'a [&'a Sample],
}

/// Trains on the first half, stores an exemplar buffer of it at the capacity
/// `budget` affords at this codec's rate, continues on the second half plus
/// the buffer, and reports how much accuracy on the first half's classes
/// dropped. Both steps use plain replay training and argmax evaluation.
pub fn forgetting_probe(
    data: &ProbeData,
    codec: &CodecSpec,
    budget: &MemoryBudget,
    cfg: &TrainConfig,
) -> Result<ForgettingProbeResult> {
    let annotate = |e: Error| match e {
        Error::Divergence(m) => Error::Divergence(format!("probe {codec}: {m}")),
        other => other,
    };
    let first: Vec<&Sample> = data.first_half.iter().map(|&i| &data.train[i]).collect();
    let second: Vec<&Sample> = data.second_half.iter().map(|&i| &data.train[i]).collect();
    let bpp = pooled_bpp(first.iter().map(|s| (s.bits, s.pixels())))?;
    let budget = budget.at_rate(bpp)?;

    let model1 = train_step(&ModelSnapshot::new(cfg)?, &first, &[], Method::Finetune, cfg).map_err(annotate)?;
    let acc1 = evaluate(&model1, data.test, Method::Finetune, None)?;

    let mut seen: Vec<usize> = first.iter().map(|s| s.label).collect();
    seen.sort_unstable();
    seen.dedup();
    let pool: Vec<Sample> = subset_by_position(data.train, data.first_half);
    let buffer = rebuild_buffer(&seen, &pool, &model1, &budget)?;
    let exemplars = buffer.samples(&pool)?;

    let model2 = train_step(&model1, &second, &exemplars, Method::Finetune, cfg).map_err(annotate)?;
    let acc2 = evaluate(&model2, data.test, Method::Finetune, None)?;
    Ok(ForgettingProbeResult::new(codec.clone(), bpp, buffer.len(), acc1, acc2))
}

/// Copies `indices` of `train` into a dense pool whose ids are positions.
fn subset_by_position(train: &[Sample], indices: &[usize]) -> Vec<Sample> {
    indices
        .iter()
        .enumerate()
        .map(|(pos, &i)| Sample { id: pos, ..train[i].clone() })
        .collect()
}

/// Quality with the least forgetting; ties go to the lower rate, then the
/// lower quality, so the choice never depends on input order.
pub fn select_rate(results: &[ForgettingProbeResult]) -> Result<&ForgettingProbeResult> {
    if let Some(r) = results.iter().find(|r| !r.forgetting.is_finite() || !r.bpp.is_finite()) {
        return Err(Error::Invalid(format!("non-finite probe result for {}", r.codec)));
    }
    results
        .iter()
        .min_by(|a, b| {
            a.forgetting
                .total_cmp(&b.forgetting)
                .then(a.bpp.total_cmp(&b.bpp))
                .then(a.codec.quality.cmp(&b.codec.quality))
        })
        .ok_or_else(|| Error::Invalid("no probe results to select from".into()))
}

/// Mean over samples and feature dimensions of squared feature differences.
pub fn feature_mse_from_features(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("{} originals but {} reconstructions", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Invalid("feature MSE of an empty set".into()));
    }
    let (mut sum, mut count) = (0f64, 0usize);
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::Invalid("feature dimensions differ".into()));
        }
        sum += x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>();
        count += x.len();
    }
    Ok(sum / count as f64)
}

/// Feature distortion between originals and their reconstructions under a frozen backbone.
pub fn feature_mse(model: &ModelSnapshot, originals: &[&RgbImage], compressed: &[&RgbImage]) -> Result<f64> {
    if originals.len() != compressed.len() {
        return Err(Error::Invalid(format!(
            "{} originals but {} reconstructions",
            originals.len(),
            compressed.len()
        )));
    }
    feature_mse_from_features(&extract_features(model, originals)?, &extract_features(model, compressed)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecScore {
    pub codec: CodecSpec,
    pub f_mse: f64,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
}

/// Codec with the lowest feature distortion; ties go to the lower rate, then
/// the label, so the choice never depends on input order.
pub fn select_codec(scores: &[CodecScore]) -> Result<&CodecScore> {
    if let Some(s) = scores.iter().find(|s| !s.f_mse.is_finite()) {
        return Err(Error::Invalid(format!("non-finite feature MSE for {}", s.codec)));
    }
    scores
        .iter()
        .min_by(|a, b| {
            a.f_mse
                .total_cmp(&b.f_mse)
                .then(a.mean_bpp.total_cmp(&b.mean_bpp))
                .then(a.codec.key().cmp(&b.codec.key()))
        })
        .ok_or_else(|| Error::Invalid("no codec scores to select from".into()))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

pub fn write_probe_csv(path: &Path, results: &[ForgettingProbeResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "quality", "bpp", "exemplars", "acc1", "acc2", "forgetting"])?;
    for r in results {
        w.write_record([
            r.codec.method.to_string(),
            r.codec.quality.to_string(),
            format!("{:.6}", r.bpp),
            r.exemplars.to_string(),
            format!("{:.6}", r.acc_step1),
            format!("{:.6}", r.acc_step2),
            format!("{:.6}", r.forgetting),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores_csv(path: &Path, scores: &[CodecScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["codec", "quality", "bpp", "psnr", "f_mse"])?;
    for s in scores {
        w.write_record([
            s.codec.method.to_string(),
            s.codec.quality.to_string(),
            format!("{:.6}", s.mean_bpp),
            format!("{:.4}", s.mean_psnr),
            format!("{:.8}", s.f_mse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Forgetting against quality, one series per method, selected points ringed.
pub fn plot_probe_svg(path: &Path, results: &[ForgettingProbeResult], selected: &[CodecSpec]) -> Result<()> {
    use plotters::prelude::*;

    let qmax = results.iter().map(|r| r.codec.quality).max().unwrap_or(1).max(1) as f64;
    let (lo, hi) = results
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), r| (lo.min(r.forgetting), hi.max(r.forgetting)));
    let (lo, hi) = if results.is_empty() { (0.0, 1.0) } else { (lo - 0.05, hi + 0.05) };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..qmax * 1.05, lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("quality").y_desc("forgetting").draw().map_err(plot_err)?;
    let mut methods: Vec<_> = results.iter().map(|r| r.codec.method).collect();
    methods.sort();
    methods.dedup();
    for (i, m) in methods.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut pts: Vec<(f64, f64)> = results
            .iter()
            .filter(|r| r.codec.method == *m)
            .map(|r| (r.codec.quality as f64, r.forgetting))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(m.to_string())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart
        .draw_series(
            results
                .iter()
                .filter(|r| selected.contains(&r.codec))
                .map(|r| Circle::new((r.codec.quality as f64, r.forgetting), 8, BLACK.stroke_width(2))),
        )
        .map_err(plot_err)?;
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probe(q: u32, bpp: f64, forgetting: f64) -> ForgettingProbeResult {
        ForgettingProbeResult::new(CodecSpec::jpeg(q), bpp, 0, 0.5 + forgetting, 0.5)
    }

    #[test]
    fn forgetting_is_accuracy_difference() {
        let r = ForgettingProbeResult::new(CodecSpec::jpeg(10), 1.0, 5, 0.90, 0.70);
        assert!((r.forgetting - 0.20).abs() < 1e-15);
    }

    #[test]
    fn rate_selection_argmin_and_tie_rule() {
        let single = [probe(30, 2.0, 0.4)];
        assert_eq!(select_rate(&single).unwrap().codec.quality, 30);
        let three = [probe(1, 1.0, 0.3), probe(2, 2.0, 0.1), probe(3, 3.0, 0.2)];
        assert_eq!(select_rate(&three).unwrap().codec.quality, 2);
        let tie = [
            ForgettingProbeResult { forgetting: 0.2, ..probe(1, 2.0, 0.2) },
            ForgettingProbeResult { forgetting: 0.2, ..probe(2, 1.0, 0.2) },
        ];
        assert_eq!(select_rate(&tie).unwrap().codec.quality, 2);
        assert!(select_rate(&[]).is_err());
        assert!(select_rate(&[probe(1, 1.0, f64::NAN)]).is_err());
    }

    #[test]
    fn feature_mse_hand_example() {
        let v = feature_mse_from_features(&[vec![1.0, 2.0]], &[vec![1.0, 0.0]]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert_eq!(feature_mse_from_features(&[vec![3.0, 4.0]], &[vec![3.0, 4.0]]).unwrap(), 0.0);
        assert!(feature_mse_from_features(&[vec![1.0]], &[]).is_err());
    }

    #[test]
    fn codec_selection_orders() {
        let s = |codec: CodecSpec, f: f64| CodecScore { codec, f_mse: f, mean_bpp: 1.0, mean_psnr: 25.0 };
        let table = [s(CodecSpec::jpeg(12), 0.177), s(CodecSpec::webp(27), 0.113), s(CodecSpec::raw(), 0.084)];
        assert_eq!(select_codec(&table).unwrap().codec, CodecSpec::raw());
        assert_eq!(select_codec(&table[..1]).unwrap().codec, CodecSpec::jpeg(12));
        assert!(select_codec(&[]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0], &[1.0]), None);
    }

    proptest! {
        #[test]
        fn selection_ignores_input_order(
            vals in prop::collection::vec((0.0f64..1.0, 0.1f64..5.0), 1..8),
            seed in any::<u64>(),
        ) {
            let results: Vec<_> = vals.iter().enumerate().map(|(i, &(f, b))| probe(i as u32 + 1, b, (f * 4.0).round() / 4.0)).collect();
            let scores: Vec<_> = vals.iter().enumerate().map(|(i, &(f, b))| CodecScore {
                codec: CodecSpec::webp(i as u32), f_mse: (f * 4.0).round(), mean_bpp: b, mean_psnr: 20.0,
            }).collect();
            let pick = select_rate(&results).unwrap().clone();
            let best = select_codec(&scores).unwrap().clone();
            let mut r2 = results.clone();
            let mut s2 = scores.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            use rand::{seq::SliceRandom, SeedableRng};
            r2.shuffle(&mut rng);
            s2.shuffle(&mut rng);
            prop_assert_eq!(select_rate(&r2).unwrap(), &pick);
            prop_assert_eq!(select_codec(&s2).unwrap(), &best);
        }

        #[test]
        fn feature_mse_is_symmetric_and_non_negative(
            a in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 1..6),
            shift in -2.0f32..2.0,
        ) {
            let b: Vec<Vec<f32>> = a.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let ab = feature_mse_from_features(&a, &b).unwrap();
            let ba = feature_mse_from_features(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
        }
    }
}
