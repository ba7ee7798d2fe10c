//! Lossy codecs behind one interface, with exact bit accounting.
//!
//! Every method maps an 8-bit RGB image to a byte payload and back. `bits` is
//! always eight times the payload length; image dimensions travel next to the
//! payload and are not charged.

use std::collections::HashMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{plot_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Uncompressed 8-bit RGB. Quality is ignored.
    Raw,
    /// Baseline JPEG, quality 1–100.
    Jpeg,
    /// Lossy WebP, quality 0–100.
    Webp,
    /// A program implementing the `enc`/`dec` file contract.
    External,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Jpeg => "jpeg",
            Method::Webp => "webp",
            Method::External => "external",
        }
    }

    pub fn quality_range(self) -> RangeInclusive<u32> {
        match self {
            Method::Raw => 0..=100,
            Method::Jpeg => 1..=100,
            Method::Webp => 0..=100,
            Method::External => 0..=u32::MAX,
        }
    }

    /// Default rate-distortion sweep.
    pub fn default_grid(self) -> Vec<u32> {
        match self {
            Method::Raw => vec![0],
            Method::Jpeg => vec![5, 10, 12, 15, 20, 30, 40, 50, 60, 70, 80, 90],
            Method::Webp => vec![5, 10, 20, 27, 30, 40, 50, 60, 70, 80, 90],
            Method::External => (1..=8).collect(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An executable implementing
/// `<program> <args…> enc <in.png> <out.bin>` and
/// `<program> <args…> dec <in.bin> <out.png>`, exiting 0 on success.
/// The literal `{quality}` inside `args` is replaced by the quality level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExternalCodec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalCodec {
    fn command(&self, quality: u32) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(self.args.iter().map(|a| a.replace("{quality}", &quality.to_string())));
        cmd
    }

    fn run(&self, quality: u32, verb: &str, input: &Path, output: &Path) -> Result<()> {
        let out = self
            .command(quality)
            .arg(verb)
            .arg(input)
            .arg(output)
            .output()
            .map_err(|e| Error::Codec(format!("cannot run {}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(Error::Codec(format!(
                "{} {verb} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecSpec {
    pub method: Method,
    #[serde(default)]
    pub quality: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalCodec>,
}

impl CodecSpec {
    pub fn raw() -> Self {
        Self { method: Method::Raw, quality: 0, external: None }
    }

    pub fn jpeg(quality: u32) -> Self {
        Self { method: Method::Jpeg, quality, external: None }
    }

    pub fn webp(quality: u32) -> Self {
        Self { method: Method::Webp, quality, external: None }
    }

    pub fn external(codec: ExternalCodec, quality: u32) -> Self {
        Self { method: Method::External, quality, external: Some(codec) }
    }

    /// Same codec at another quality level.
    pub fn with_quality(&self, quality: u32) -> Self {
        Self { quality, ..self.clone() }
    }

    pub fn is_lossless(&self) -> bool {
        self.method == Method::Raw
    }

    pub fn validate(&self) -> Result<()> {
        if !self.method.quality_range().contains(&self.quality) {
            return Err(Error::Codec(format!(
                "{} quality {} outside {:?}",
                self.method,
                self.quality,
                self.method.quality_range()
            )));
        }
        match (self.method, &self.external) {
            (Method::External, None) => {
                Err(Error::Codec("external codec requires a program".into()))
            }
            (Method::External, Some(_)) | (_, None) => Ok(()),
            (m, Some(_)) => Err(Error::Codec(format!("{m} does not take an external program"))),
        }
    }

    /// Short human-readable label, e.g. `jpeg-q12`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Raw => "raw".into(),
            Method::External => {
                let stem = self
                    .external
                    .as_ref()
                    .and_then(|e| Path::new(&e.program).file_stem().map(|s| s.to_string_lossy().into_owned()))
                    .unwrap_or_else(|| "external".into());
                format!("{stem}-q{}", self.quality)
            }
            m => format!("{m}-q{}", self.quality),
        }
    }

    /// Filesystem-safe key that distinguishes external command lines.
    pub fn key(&self) -> String {
        let label: String = self
            .label()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        match &self.external {
            None => label,
            Some(ext) => {
                let digest = Sha256::digest(serde_json::to_vec(ext).unwrap_or_default());
                format!("{label}-{}", &hex::encode(digest)[..12])
            }
        }
    }

    /// Round-trips a probe image; external codecs must pass this before batch use.
    pub fn self_test(&self) -> Result<()> {
        self.validate()?;
        let probe = RgbImage::from_fn(16, 16, |x, y| {
            image::Rgb([(x * 16) as u8, (y * 16) as u8, ((x + y) * 8) as u8])
        });
        let enc = encode(&probe, self)?;
        let dec = decode(&enc, self)?;
        if dec.dimensions() != probe.dimensions() {
            return Err(Error::Codec(format!(
                "{} self-test: decoded {:?}, expected {:?}",
                self.label(),
                dec.dimensions(),
                probe.dimensions()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for CodecSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// An encoded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedSample {
    pub payload: Vec<u8>,
    pub width: u32,
    pub height: u32,
}

impl CompressedSample {
    pub fn bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }

    pub fn pixels(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn bpp(&self) -> f64 {
        self.bits() as f64 / self.pixels() as f64
    }
}

pub fn encode(image: &RgbImage, codec: &CodecSpec) -> Result<CompressedSample> {
    codec.validate()?;
    let (width, height) = image.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::Codec("empty image".into()));
    }
    let payload = match codec.method {
        Method::Raw => image.as_raw().clone(),
        Method::Jpeg => jpeg::encode(image, codec.quality as u8)?,
        Method::Webp => webp::Encoder::from_rgb(image.as_raw(), width, height)
            .encode(codec.quality as f32)
            .to_vec(),
        Method::External => external_encode(image, codec)?,
    };
    Ok(CompressedSample { payload, width, height })
}

pub fn decode(sample: &CompressedSample, codec: &CodecSpec) -> Result<RgbImage> {
    codec.validate()?;
    let img = match codec.method {
        Method::Raw => RgbImage::from_raw(sample.width, sample.height, sample.payload.clone())
            .ok_or_else(|| Error::Codec("raw payload has the wrong length".into()))?,
        Method::Jpeg => jpeg::decode(&sample.payload, codec.quality as u8)?,
        Method::Webp => {
            let img = webp::Decoder::new(&sample.payload)
                .decode()
                .ok_or_else(|| Error::Codec("corrupt webp payload".into()))?;
            let bpp = if img.is_alpha() { 4 } else { 3 };
            let rgb: Vec<u8> = img.chunks_exact(bpp).flat_map(|p| [p[0], p[1], p[2]]).collect();
            RgbImage::from_raw(img.width(), img.height(), rgb)
                .ok_or_else(|| Error::Codec("webp decode size mismatch".into()))?
        }
        Method::External => external_decode(sample, codec)?,
    };
    if img.dimensions() != (sample.width, sample.height) {
        return Err(Error::Codec(format!(
            "decoded {:?}, expected {}x{}",
            img.dimensions(),
            sample.width,
            sample.height
        )));
    }
    Ok(img)
}

/// JPEG in abbreviated form: the quantization and Huffman tables depend only
/// on the quality level, so they are shared codec state rather than payload.
/// The stored stream is the frame header, scan header and entropy-coded data.
mod jpeg {
    use super::*;

    const SOI: [u8; 2] = [0xFF, 0xD8];

    /// Splits a full JPEG stream into (table segments, remaining segments).
    fn split(stream: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
        if !stream.starts_with(&SOI) {
            return Err(Error::Codec("JPEG stream lacks SOI".into()));
        }
        let (mut tables, mut rest) = (Vec::new(), Vec::new());
        let mut i = 2;
        while i + 4 <= stream.len() {
            if stream[i] != 0xFF {
                return Err(Error::Codec(format!("JPEG marker expected at byte {i}")));
            }
            let marker = stream[i + 1];
            let len = u16::from_be_bytes([stream[i + 2], stream[i + 3]]) as usize;
            if marker == 0xDA {
                rest.extend_from_slice(&stream[i..]);
                return Ok((tables, rest));
            }
            let seg = stream
                .get(i..i + 2 + len)
                .ok_or_else(|| Error::Codec("truncated JPEG segment".into()))?;
            match marker {
                0xDB | 0xC4 => tables.extend_from_slice(seg),
                0xE0..=0xEF | 0xFE => {}
                _ => rest.extend_from_slice(seg),
            }
            i += 2 + len;
        }
        Err(Error::Codec("JPEG stream has no scan".into()))
    }

    fn full(image: &RgbImage, quality: u8) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality)
            .encode_image(image)
            .map_err(|e| Error::Codec(format!("jpeg encode: {e}")))?;
        Ok(buf)
    }

    pub(super) fn tables(quality: u8) -> Result<Arc<Vec<u8>>> {
        static CACHE: OnceLock<Mutex<HashMap<u8, Arc<Vec<u8>>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(t) = cache.lock().expect("jpeg table cache").get(&quality) {
            return Ok(t.clone());
        }
        let (t, _) = split(&full(&RgbImage::new(8, 8), quality)?)?;
        let t = Arc::new(t);
        cache.lock().expect("jpeg table cache").insert(quality, t.clone());
        Ok(t)
    }

    pub(super) fn encode(image: &RgbImage, quality: u8) -> Result<Vec<u8>> {
        let (t, rest) = split(&full(image, quality)?)?;
        if t != *tables(quality)? {
            return Err(Error::Codec(format!("jpeg q{quality}: encoder emitted non-standard tables")));
        }
        Ok(rest)
    }

    pub(super) fn decode(payload: &[u8], quality: u8) -> Result<RgbImage> {
        let t = tables(quality)?;
        let mut stream = Vec::with_capacity(2 + t.len() + payload.len());
        stream.extend_from_slice(&SOI);
        stream.extend_from_slice(&t);
        stream.extend_from_slice(payload);
        let img = image::load_from_memory_with_format(&stream, ImageFormat::Jpeg)
            .map_err(|e| Error::Codec(format!("jpeg decode: {e}")))?;
        Ok(img.to_rgb8())
    }
}

fn external_of(codec: &CodecSpec) -> Result<&ExternalCodec> {
    codec.external.as_ref().ok_or_else(|| Error::Codec("external codec requires a program".into()))
}

fn external_encode(image: &RgbImage, codec: &CodecSpec) -> Result<Vec<u8>> {
    let ext = external_of(codec)?;
    let dir = tempfile::tempdir()?;
    let (input, output) = (dir.path().join("in.png"), dir.path().join("out.bin"));
    image.save_with_format(&input, ImageFormat::Png)?;
    ext.run(codec.quality, "enc", &input, &output)?;
    Ok(std::fs::read(&output)?)
}

fn external_decode(sample: &CompressedSample, codec: &CodecSpec) -> Result<RgbImage> {
    let ext = external_of(codec)?;
    let dir = tempfile::tempdir()?;
    let (input, output) = (dir.path().join("in.bin"), dir.path().join("out.png"));
    std::fs::write(&input, &sample.payload)?;
    ext.run(codec.quality, "dec", &input, &output)?;
    Ok(image::open(&output)?.to_rgb8())
}

/// Encode followed by decode, returning the reconstruction and its bit cost.
pub fn round_trip(image: &RgbImage, codec: &CodecSpec) -> Result<(RgbImage, u64)> {
    let enc = encode(image, codec)?;
    Ok((decode(&enc, codec)?, enc.bits()))
}

/// Pooled rate: total bits over total pixels.
pub fn pooled_bpp(items: impl IntoIterator<Item = (u64, u64)>) -> Result<f64> {
    let (bits, pixels) =
        items.into_iter().fold((0u64, 0u64), |(b, p), (bi, pi)| (b + bi, p + pi));
    if pixels == 0 {
        return Err(Error::Invalid("bpp of an empty image set".into()));
    }
    Ok(bits as f64 / pixels as f64)
}

/// Pooled bits per pixel of `images` under `codec`.
pub fn dataset_bpp(images: &[&RgbImage], codec: &CodecSpec) -> Result<f64> {
    let costs: Vec<(u64, u64)> = images
        .par_iter()
        .map(|img| encode(img, codec).map(|c| (c.bits(), c.pixels())))
        .collect::<Result<_>>()?;
    pooled_bpp(costs)
}

/// Mean squared error over all channels of two equally sized images.
pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Invalid(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let sum: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.as_raw().len() as f64)
}

/// PSNR in dB against peak 255 over RGB. Identical images give `+∞`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (255.0f64 * 255.0 / m).log10() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub codec: CodecSpec,
    pub mean_bpp: f64,
    /// Mean of per-image PSNR; `+∞` for lossless codecs.
    pub mean_psnr: f64,
}

/// Rate and distortion of `images` at one setting.
pub fn rate_point(images: &[&RgbImage], codec: &CodecSpec) -> Result<RatePoint> {
    if images.is_empty() {
        return Err(Error::Invalid("rate point of an empty image set".into()));
    }
    let per: Vec<(u64, u64, f64)> = images
        .par_iter()
        .map(|img| {
            let enc = encode(img, codec)?;
            let dec = decode(&enc, codec)?;
            Ok((enc.bits(), enc.pixels(), psnr(img, &dec)?))
        })
        .collect::<Result<_>>()?;
    let mean_bpp = pooled_bpp(per.iter().map(|&(b, p, _)| (b, p)))?;
    let mean_psnr = per.iter().map(|p| p.2).sum::<f64>() / per.len() as f64;
    Ok(RatePoint { codec: codec.clone(), mean_bpp, mean_psnr })
}

/// One rate point per quality level, sorted by rate.
pub fn rd_curve(images: &[&RgbImage], base: &CodecSpec, qualities: &[u32]) -> Result<Vec<RatePoint>> {
    if qualities.is_empty() {
        return Err(Error::Invalid("empty quality grid".into()));
    }
    let mut points = qualities
        .iter()
        .map(|&q| {
            rate_point(images, &base.with_quality(q))
                .map_err(|e| Error::Codec(format!("{} quality {q}: {e}", base.method)))
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.mean_bpp.total_cmp(&b.mean_bpp).then(a.codec.quality.cmp(&b.codec.quality)));
    Ok(points)
}

pub fn write_rd_csv(path: &Path, points: &[RatePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "quality", "bpp", "psnr"])?;
    for p in points {
        w.write_record([
            p.codec.label_method(),
            p.codec.quality.to_string(),
            format!("{:.6}", p.mean_bpp),
            format!("{:.4}", p.mean_psnr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl CodecSpec {
    fn label_method(&self) -> String {
        match self.method {
            Method::External => self.label().rsplit_once("-q").map(|(m, _)| m.to_string()).unwrap_or_default(),
            m => m.to_string(),
        }
    }
}

/// Renders PSNR against rate, one series per method, quality levels annotated.
pub fn plot_rd_svg(path: &Path, points: &[RatePoint]) -> Result<()> {
    use plotters::prelude::*;

    let finite: Vec<&RatePoint> = points.iter().filter(|p| p.mean_psnr.is_finite()).collect();
    let (xmax, ymin, ymax) = finite.iter().fold((0.1f64, f64::MAX, f64::MIN), |(x, lo, hi), p| {
        (x.max(p.mean_bpp), lo.min(p.mean_psnr), hi.max(p.mean_psnr))
    });
    let (ymin, ymax) = if finite.is_empty() { (0.0, 50.0) } else { (ymin - 1.0, ymax + 1.0) };

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xmax * 1.1, ymin..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("rate (bpp)")
        .y_desc("PSNR (dB)")
        .draw()
        .map_err(plot_err)?;

    let mut methods: Vec<String> = finite.iter().map(|p| p.codec.label_method()).collect();
    methods.sort();
    methods.dedup();
    for (i, m) in methods.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let series: Vec<(f64, f64)> = finite
            .iter()
            .filter(|p| &p.codec.label_method() == m)
            .map(|p| (p.mean_bpp, p.mean_psnr))
            .collect();
        chart
            .draw_series(LineSeries::new(series.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(m.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(series.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
        chart
            .draw_series(finite.iter().filter(|p| &p.codec.label_method() == m).map(|p| {
                Text::new(p.codec.quality.to_string(), (p.mean_bpp, p.mean_psnr), ("sans-serif", 11))
            }))
            .map_err(plot_err)?;
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

/// On-disk payload store keyed by image content and codec.
#[derive(Clone, Debug)]
pub struct PayloadCache {
    root: PathBuf,
}

impl PayloadCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn path(&self, image: &RgbImage, codec: &CodecSpec) -> PathBuf {
        let mut h = Sha256::new();
        h.update(image.width().to_le_bytes());
        h.update(image.height().to_le_bytes());
        h.update(image.as_raw());
        self.root.join(codec.key()).join(format!("{}.bin", hex::encode(h.finalize())))
    }

    /// Returns the cached payload, encoding and storing it on a miss.
    /// Concurrent writers of the same entry produce identical bytes; the
    /// last rename wins.
    pub fn encode(&self, image: &RgbImage, codec: &CodecSpec) -> Result<CompressedSample> {
        let path = self.path(image, codec);
        let (width, height) = image.dimensions();
        if let Ok(payload) = std::fs::read(&path) {
            return Ok(CompressedSample { payload, width, height });
        }
        let sample = encode(image, codec)?;
        let dir = path.parent().expect("cache entry has a parent");
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        std::io::Write::write_all(&mut tmp, &sample.payload)?;
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        Ok(sample)
    }
}
