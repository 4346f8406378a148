//! Pair discovery, loading, synthetic tampering and clarity degradation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::mask::{Mask, Provenance};

/// Smallest side accepted for a pair.
pub const MIN_PAIR_SIDE: u32 = crate::encoder::STRIDE as u32;
/// Smallest side accepted by [`synth_pair`].
pub const MIN_SYNTH_SIDE: u32 = 16;

/// Aligned original/tampered images of identical size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub pair_id: String,
    pub original: RgbImage,
    pub tampered: RgbImage,
}

impl ImagePair {
    pub fn new(pair_id: impl Into<String>, original: RgbImage, tampered: RgbImage) -> Result<Self> {
        let pair_id = pair_id.into();
        if original.dimensions() != tampered.dimensions() {
            return Err(Error::shape(
                "image_pair",
                format!("{pair_id}: original {:?} vs tampered {:?}", original.dimensions(), tampered.dimensions()),
            ));
        }
        let (w, h) = original.dimensions();
        if w < MIN_PAIR_SIDE || h < MIN_PAIR_SIDE {
            return Err(Error::InvalidArgument(format!("{pair_id}: {w}x{h} is below {MIN_PAIR_SIDE}x{MIN_PAIR_SIDE}")));
        }
        Ok(Self { pair_id, original, tampered })
    }

    pub fn dims(&self) -> (u32, u32) {
        self.original.dimensions()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One line of the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub original_path: PathBuf,
    pub tampered_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    /// Whether the original/tampered roles were checked rather than
    /// assumed from file naming.
    #[serde(default)]
    pub roles_verified: bool,
}

impl PairRecord {
    /// Join relative paths onto `base`, the manifest's directory.
    pub fn resolve_against(&mut self, base: &Path) {
        for p in [Some(&mut self.original_path), Some(&mut self.tampered_path), self.mask_path.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Rewrite paths under `base` relative to it; others stay as they are.
    pub fn relative_to(&mut self, base: &Path) {
        for p in [Some(&mut self.original_path), Some(&mut self.tampered_path), self.mask_path.as_mut()]
            .into_iter()
            .flatten()
        {
            if let Ok(rel) = p.strip_prefix(base) {
                *p = rel.to_path_buf();
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<PairRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    /// Unique ids, and masks on every train/val record.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.pair_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate pair_id {}", r.pair_id)));
            }
            if matches!(r.split, Split::Train | Split::Val) && r.mask_path.is_none() {
                return Err(Error::Manifest(format!("{} is in {} without a mask", r.pair_id, r.split)));
            }
        }
        Ok(())
    }

    /// Every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            let paths = [Some(&r.original_path), Some(&r.tampered_path), r.mask_path.as_ref()];
            for p in paths.into_iter().flatten() {
                if !p.is_file() {
                    return Err(Error::Manifest(format!("{}: missing file {}", r.pair_id, p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Read a manifest; relative paths are taken relative to its directory.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: PairRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if let Some(base) = path.parent() {
                rec.resolve_against(base);
            }
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Manifest(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// File naming convention for pair discovery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLayout {
    pub original_suffix: String,
    pub tampered_suffix: String,
    pub mask_suffix: String,
    pub extensions: Vec<String>,
}

impl Default for PairLayout {
    fn default() -> Self {
        Self {
            original_suffix: "_orig".into(),
            tampered_suffix: "_tamp".into(),
            mask_suffix: "_mask".into(),
            extensions: vec!["png".into(), "jpg".into(), "jpeg".into()],
        }
    }
}

impl PairLayout {
    /// Look up a registered convention by name.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            other => Err(Error::InvalidArgument(format!("unknown pair layout {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedPair {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub skipped: Vec<SkippedPair>,
}

impl SkipReport {
    pub fn count(&self) -> usize {
        self.skipped.len()
    }

    pub fn summary(&self) -> String {
        let mut by_reason: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.skipped {
            *by_reason.entry(s.reason.split(':').next().unwrap_or("")).or_default() += 1;
        }
        if by_reason.is_empty() {
            return "nothing found".into();
        }
        by_reason.iter().map(|(r, n)| format!("{n} {r}")).collect::<Vec<_>>().join(", ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOutcome {
    pub manifest: DatasetManifest,
    pub skipped: SkipReport,
}

#[derive(Default)]
struct Found {
    original: Option<PathBuf>,
    tampered: Option<PathBuf>,
    mask: Option<PathBuf>,
    split: Option<Split>,
}

/// Discover pairs under `root`. Pairs that fail to decode or whose two
/// images differ in size are left out and listed in the skip report.
pub fn scan_pairs(root: &Path, layout: &PairLayout) -> Result<ScanOutcome> {
    std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut found: BTreeMap<String, Found> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !layout.extensions.iter().any(|x| x.eq_ignore_ascii_case(ext)) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let split = path
            .strip_prefix(root)
            .ok()
            .and_then(|rel| rel.components().next())
            .and_then(|c| c.as_os_str().to_str())
            .and_then(Split::parse)
            .filter(|_| path.strip_prefix(root).map(|r| r.components().count() > 1).unwrap_or(false));
        let roles = [
            (&layout.original_suffix, 0),
            (&layout.tampered_suffix, 1),
            (&layout.mask_suffix, 2),
        ];
        for (suffix, role) in roles {
            if let Some(id) = stem.strip_suffix(suffix.as_str()) {
                let slot = found.entry(id.to_string()).or_default();
                let target = match role {
                    0 => &mut slot.original,
                    1 => &mut slot.tampered,
                    _ => &mut slot.mask,
                };
                *target = Some(path.to_path_buf());
                if split.is_some() {
                    slot.split = split;
                }
                break;
            }
        }
    }

    let mut records = Vec::new();
    let mut skipped = SkipReport::default();
    let mut skip = |id: &str, reason: String| skipped.skipped.push(SkippedPair { pair_id: id.to_string(), reason });
    for (id, f) in found {
        let (Some(orig), Some(tamp)) = (f.original, f.tampered) else {
            skip(&id, "incomplete: missing original or tampered image".into());
            continue;
        };
        let dims = |p: &Path| load_rgb8(p).map(|img| img.dimensions());
        let (a, b) = match (dims(&orig), dims(&tamp)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                skip(&id, format!("undecodable: {e}"));
                continue;
            }
        };
        if a != b {
            skip(&id, format!("size_mismatch: {}x{} vs {}x{}", a.0, a.1, b.0, b.1));
            continue;
        }
        if a.0 < MIN_PAIR_SIDE || a.1 < MIN_PAIR_SIDE {
            skip(&id, format!("too_small: {}x{}", a.0, a.1));
            continue;
        }
        let split = f.split.unwrap_or(if f.mask.is_some() { Split::Train } else { Split::Test });
        if split != Split::Test && f.mask.is_none() {
            skip(&id, format!("missing_mask: required for {split}"));
            continue;
        }
        records.push(PairRecord {
            pair_id: id,
            original_path: orig,
            tampered_path: tamp,
            mask_path: f.mask,
            width: a.0,
            height: a.1,
            split,
            roles_verified: false,
        });
    }
    if records.is_empty() {
        return Err(Error::NoValidPairs { root: root.to_path_buf(), summary: skipped.summary() });
    }
    Ok(ScanOutcome { manifest: DatasetManifest::new(records)?, skipped })
}

/// Deterministically reassign splits: masked records are shuffled with
/// `seed` and divided into test, val and train by the given fractions;
/// records without masks always go to test.
pub fn assign_splits(manifest: &DatasetManifest, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&val_fraction) || !(0.0..=1.0).contains(&test_fraction) || val_fraction + test_fraction > 1.0 {
        return Err(Error::InvalidArgument(format!("split fractions {val_fraction}/{test_fraction}")));
    }
    let mut masked: Vec<usize> = (0..manifest.records.len()).filter(|&i| manifest.records[i].mask_path.is_some()).collect();
    masked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = masked.len() as f64;
    let n_test = (test_fraction * n).round() as usize;
    let n_val = ((val_fraction * n).round() as usize).min(masked.len() - n_test);
    let mut records = manifest.records.clone();
    for r in records.iter_mut() {
        r.split = Split::Test;
    }
    for (rank, &i) in masked.iter().enumerate() {
        records[i].split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    DatasetManifest::new(records)
}

/// Convert any decoded image to 8-bit RGB. 16-bit samples keep their high
/// byte; grey is replicated across channels; alpha is dropped.
pub fn to_rgb8_truncating(img: DynamicImage) -> RgbImage {
    fn hi(v: u16) -> u8 {
        (v >> 8) as u8
    }
    match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageLuma16(i) => {
            RgbImage::from_fn(i.width(), i.height(), |x, y| {
                let v = hi(i.get_pixel(x, y)[0]);
                Rgb([v, v, v])
            })
        }
        DynamicImage::ImageLumaA16(i) => {
            RgbImage::from_fn(i.width(), i.height(), |x, y| {
                let v = hi(i.get_pixel(x, y)[0]);
                Rgb([v, v, v])
            })
        }
        DynamicImage::ImageRgb16(i) => {
            RgbImage::from_fn(i.width(), i.height(), |x, y| {
                let p = i.get_pixel(x, y);
                Rgb([hi(p[0]), hi(p[1]), hi(p[2])])
            })
        }
        DynamicImage::ImageRgba16(i) => {
            RgbImage::from_fn(i.width(), i.height(), |x, y| {
                let p = i.get_pixel(x, y);
                Rgb([hi(p[0]), hi(p[1]), hi(p[2])])
            })
        }
        other => other.to_rgb8(),
    }
}

fn load_rgb8(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(to_rgb8_truncating(img))
}

/// Decode a manifest record into an [`ImagePair`].
pub fn load_pair(record: &PairRecord) -> Result<ImagePair> {
    let original = load_rgb8(&record.original_path)?;
    let tampered = load_rgb8(&record.tampered_path)?;
    for (img, path) in [(&original, &record.original_path), (&tampered, &record.tampered_path)] {
        if img.dimensions() != (record.width, record.height) {
            return Err(Error::Manifest(format!(
                "{}: {} is {:?}, manifest says {}x{}",
                record.pair_id,
                path.display(),
                img.dimensions(),
                record.width,
                record.height
            )));
        }
    }
    ImagePair::new(record.pair_id.clone(), original, tampered)
}

/// Ground-truth mask of a record.
pub fn load_mask(record: &PairRecord) -> Result<Mask> {
    let path = record
        .mask_path
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("{} has no mask", record.pair_id)))?;
    let mask = Mask::load(path, Provenance::GroundTruth)?;
    if mask.dims() != (record.width, record.height) {
        return Err(Error::Manifest(format!("{}: mask is {:?}", record.pair_id, mask.dims())));
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperOp {
    PasteRect,
    PasteEllipse,
    CopyMove,
    InpaintBlur,
}

impl TamperOp {
    pub const ALL: [TamperOp; 4] = [TamperOp::PasteRect, TamperOp::PasteEllipse, TamperOp::CopyMove, TamperOp::InpaintBlur];
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Region {
    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }

    fn in_ellipse(&self, x: u32, y: u32) -> bool {
        let cx = f64::from(self.x) + f64::from(self.width) / 2.0;
        let cy = f64::from(self.y) + f64::from(self.height) / 2.0;
        let dx = (f64::from(x) + 0.5 - cx) / (f64::from(self.width) / 2.0);
        let dy = (f64::from(y) + 0.5 - cy) / (f64::from(self.height) / 2.0);
        dx * dx + dy * dy <= 1.0
    }
}

/// Clarity degradation applied to the tampered image only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    /// JPEG quality in `[10, 100]`; 100 means no re-encoding.
    pub jpeg_quality: u8,
    pub blur_sigma: f64,
}

impl Degradation {
    pub const NONE: Degradation = Degradation { jpeg_quality: 100, blur_sigma: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TamperSpec {
    pub op: TamperOp,
    pub region: Region,
    pub degradation: Degradation,
}

/// Fraction bounds a synthetic mask must respect.
pub const SYNTH_MIN_FRACTION: f64 = 0.01;
pub const SYNTH_MAX_FRACTION: f64 = 0.70;

fn check_degradation(jpeg_quality: u8, blur_sigma: f64) -> Result<()> {
    if !(10..=100).contains(&jpeg_quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {jpeg_quality} outside [10, 100]")));
    }
    if !(blur_sigma >= 0.0 && blur_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("blur sigma {blur_sigma} must be >= 0")));
    }
    Ok(())
}

/// Normalised 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur of an interleaved RGB plane, before rounding.
pub fn gaussian_blur_f64(image: &RgbImage, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();
    if sigma == 0.0 {
        return raw;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let idx = |y: i64, x: i64, c: usize| ((y * w + x) * 3) as usize + c;
    let mut tmp = vec![0.0f64; raw.len()];
    let mut out = vec![0.0f64; raw.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[idx(y, x, c)] =
                    k.iter().enumerate().map(|(t, kv)| kv * raw[idx(y, (x + t as i64 - r).clamp(0, w - 1), c)]).sum();
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[idx(y, x, c)] =
                    k.iter().enumerate().map(|(t, kv)| kv * tmp[idx((y + t as i64 - r).clamp(0, h - 1), x, c)]).sum();
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders, rounded back to 8 bits.
pub fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma == 0.0 {
        return image.clone();
    }
    let data = gaussian_blur_f64(image, sigma).into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(image.width(), image.height(), data).expect("same dimensions")
}

/// Round-trip through a JPEG encoder at the given quality.
pub fn jpeg_roundtrip(image: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(image)
        .map_err(|e| Error::Encode(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::Decode { path: PathBuf::from("<jpeg buffer>"), message: e.to_string() })?;
    Ok(decoded.to_rgb8())
}

/// Blur then JPEG-compress. Quality 100 with sigma 0 is the identity.
pub fn degrade(image: &RgbImage, jpeg_quality: u8, blur_sigma: f64) -> Result<RgbImage> {
    check_degradation(jpeg_quality, blur_sigma)?;
    let blurred = gaussian_blur(image, blur_sigma);
    if jpeg_quality == 100 {
        Ok(blurred)
    } else {
        jpeg_roundtrip(&blurred, jpeg_quality)
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

/// Procedural scene: a four-corner gradient, a handful of flat shapes,
/// and low-amplitude grain.
fn scene(rng: &mut ChaCha8Rng, width: u32, height: u32) -> RgbImage {
    let corners = [random_color(rng), random_color(rng), random_color(rng), random_color(rng)];
    let mut buf = vec![0.0f64; (width * height * 3) as usize];
    for y in 0..height {
        let fy = f64::from(y) / f64::from(height.max(2) - 1);
        for x in 0..width {
            let fx = f64::from(x) / f64::from(width.max(2) - 1);
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                let bottom = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                buf[((y * width + x) * 3) as usize + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    let shapes = rng.gen_range(5..10);
    for _ in 0..shapes {
        let color = random_color(rng);
        let sw = rng.gen_range(width / 8..=width / 2).max(2);
        let sh = rng.gen_range(height / 8..=height / 2).max(2);
        let x0 = rng.gen_range(0..width - sw / 2);
        let y0 = rng.gen_range(0..height - sh / 2);
        let region = Region { x: x0, y: y0, width: sw, height: sh };
        let ellipse = rng.gen_bool(0.5);
        for y in y0..(y0 + sh).min(height) {
            for x in x0..(x0 + sw).min(width) {
                if !ellipse || region.in_ellipse(x, y) {
                    buf[((y * width + x) * 3) as usize..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    let grain = rng.gen_range(2.0..8.0);
    RgbImage::from_fn(width, height, |x, y| {
        let mut px = [0u8; 3];
        for (c, slot) in px.iter_mut().enumerate() {
            let v = buf[((y * width + x) * 3) as usize + c] + rng.gen_range(-grain..grain);
            *slot = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Generate a deterministic tampered pair and its ground-truth mask.
///
/// The mask marks exactly the pixels whose content the operation replaced;
/// pixels that only change through the subsequent degradation stay black.
pub fn synth_pair(seed: u64, size: (u32, u32), spec: &TamperSpec) -> Result<(ImagePair, Mask)> {
    let (height, width) = size;
    if height < MIN_SYNTH_SIDE || width < MIN_SYNTH_SIDE {
        return Err(Error::InvalidArgument(format!("synthetic size {height}x{width} below 16x16")));
    }
    let d = spec.degradation;
    check_degradation(d.jpeg_quality, d.blur_sigma)?;
    let r = spec.region;
    if r.width == 0 || r.height == 0 || r.x + r.width > width || r.y + r.height > height {
        return Err(Error::InvalidArgument(format!("region {r:?} outside {width}x{height}")));
    }
    let total = f64::from(width) * f64::from(height);
    let frac = r.area() as f64 / total;
    if !(SYNTH_MIN_FRACTION..=SYNTH_MAX_FRACTION).contains(&frac) {
        return Err(Error::InvalidArgument(format!("region covers {frac:.4} of the image, outside [0.01, 0.70]")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let original = scene(&mut rng, width, height);
    let mut tampered = original.clone();
    let mask = match spec.op {
        TamperOp::PasteRect | TamperOp::PasteEllipse => {
            let donor = scene(&mut rng, width, height);
            let ellipse = spec.op == TamperOp::PasteEllipse;
            let mask = Mask::from_fn(width, height, Provenance::GroundTruth, |x, y| {
                r.contains(x, y) && (!ellipse || r.in_ellipse(x, y))
            });
            for y in r.y..r.y + r.height {
                for x in r.x..r.x + r.width {
                    if mask.is_white(x, y) {
                        tampered.put_pixel(x, y, *donor.get_pixel(x, y));
                    }
                }
            }
            mask
        }
        TamperOp::CopyMove => {
            let (sx, sy) = copy_source(&mut rng, r, width, height);
            for y in 0..r.height {
                for x in 0..r.width {
                    tampered.put_pixel(r.x + x, r.y + y, *original.get_pixel(sx + x, sy + y));
                }
            }
            Mask::from_fn(width, height, Provenance::GroundTruth, |x, y| r.contains(x, y))
        }
        TamperOp::InpaintBlur => {
            inpaint(&mut tampered, r);
            Mask::from_fn(width, height, Provenance::GroundTruth, |x, y| r.contains(x, y))
        }
    };
    let white = mask.white_count() as f64 / total;
    if !(SYNTH_MIN_FRACTION..=SYNTH_MAX_FRACTION).contains(&white) {
        return Err(Error::InvalidArgument(format!("{:?} mask covers {white:.4}, outside [0.01, 0.70]", spec.op)));
    }
    let tampered = degrade(&tampered, d.jpeg_quality, d.blur_sigma)?;
    Ok((ImagePair::new(format!("synth_{seed:06}"), original, tampered)?, mask))
}

/// Source corner for copy-move, at least a quarter region away from the
/// destination where the image allows it.
fn copy_source(rng: &mut ChaCha8Rng, r: Region, width: u32, height: u32) -> (u32, u32) {
    let (max_x, max_y) = (width - r.width, height - r.height);
    let far = |sx: u32, sy: u32| sx.abs_diff(r.x) > r.width / 4 || sy.abs_diff(r.y) > r.height / 4;
    for _ in 0..64 {
        let (sx, sy) = (rng.gen_range(0..=max_x), rng.gen_range(0..=max_y));
        if far(sx, sy) {
            return (sx, sy);
        }
    }
    // farthest corner
    let sx = if r.x > max_x / 2 { 0 } else { max_x };
    let sy = if r.y > max_y / 2 { 0 } else { max_y };
    (sx, sy)
}

/// Fill a region from its surroundings: row-wise linear blend of the
/// pixels just outside the left and right edges, then smoothed.
fn inpaint(image: &mut RgbImage, r: Region) {
    let (w, _) = image.dimensions();
    let left = r.x.saturating_sub(1);
    let right = (r.x + r.width).min(w - 1);
    let mut filled = image.clone();
    for y in r.y..r.y + r.height {
        let a = *image.get_pixel(left, y);
        let b = *image.get_pixel(right, y);
        for x in r.x..r.x + r.width {
            let t = f64::from(x - r.x + 1) / f64::from(r.width + 1);
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (f64::from(a[c]) * (1.0 - t) + f64::from(b[c]) * t).round() as u8;
            }
            filled.put_pixel(x, y, Rgb(px));
        }
    }
    let smooth = gaussian_blur(&filled, 2.0);
    for y in r.y..r.y + r.height {
        for x in r.x..r.x + r.width {
            image.put_pixel(x, y, *smooth.get_pixel(x, y));
        }
    }
}

/// The `index`-th pair of the synthetic dataset drawn from `seed`, named
/// `synth_<index>`.
pub fn synth_indexed(seed: u64, index: usize, size: (u32, u32), degradation: Degradation) -> Result<(ImagePair, Mask)> {
    let spec = sample_tamper_spec(seed, index, size, degradation);
    let (pair, mask) = synth_pair(seed.wrapping_mul(1_000_003).wrapping_add(index as u64), size, &spec)?;
    Ok((ImagePair::new(format!("synth_{index:06}"), pair.original, pair.tampered)?, mask))
}

/// Draw a tamper spec for the `index`-th synthetic pair of a dataset: the
/// operation cycles through all four kinds and the region covers between
/// 5% and 30% of the image.
pub fn sample_tamper_spec(seed: u64, index: usize, size: (u32, u32), degradation: Degradation) -> TamperSpec {
    let (height, width) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000 ^ index as u64);
    let op = TamperOp::ALL[index % TamperOp::ALL.len()];
    // ellipses cover pi/4 of their box
    let (lo, hi) = if op == TamperOp::PasteEllipse { (0.065, 0.38) } else { (0.05, 0.30) };
    let target = rng.gen_range(lo..hi);
    let aspect: f64 = rng.gen_range(0.5..2.0);
    let area = target * f64::from(width) * f64::from(height);
    let rw = ((area * aspect).sqrt().round() as u32).clamp(4, width - 1);
    let rh = ((area / f64::from(rw)).round() as u32).clamp(4, height - 1);
    let x = rng.gen_range(0..=width - rw);
    let y = rng.gen_range(0..=height - rh);
    TamperSpec { op, region: Region { x, y, width: rw, height: rh }, degradation }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(op: TamperOp, region: Region, degradation: Degradation) -> TamperSpec {
        TamperSpec { op, region, degradation }
    }

    #[test]
    fn paste_rect_mask_fraction() {
        let s = spec(TamperOp::PasteRect, Region { x: 10, y: 10, width: 20, height: 20 }, Degradation::NONE);
        let (pair, mask) = synth_pair(0, (64, 64), &s).unwrap();
        assert_eq!(mask.white_count(), 400);
        assert_eq!(mask.white_count() as f64 / 4096.0, 0.09765625);
        assert_eq!(pair.dims(), (64, 64));
        // outside the region nothing changed without degradation
        for (x, y, p) in pair.original.enumerate_pixels() {
            if !mask.is_white(x, y) {
                assert_eq!(p, pair.tampered.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let d = Degradation { jpeg_quality: 40, blur_sigma: 0.8 };
        for op in TamperOp::ALL {
            let s = spec(op, Region { x: 5, y: 9, width: 21, height: 17 }, d);
            assert_eq!(synth_pair(7, (48, 40), &s).unwrap(), synth_pair(7, (48, 40), &s).unwrap());
        }
    }

    #[test]
    fn synth_rejects_bad_regions() {
        let d = Degradation { jpeg_quality: 30, blur_sigma: 0.0 };
        let empty = spec(TamperOp::PasteRect, Region { x: 3, y: 3, width: 0, height: 0 }, d);
        assert!(synth_pair(0, (64, 64), &empty).is_err());
        let outside = spec(TamperOp::PasteRect, Region { x: 50, y: 3, width: 20, height: 20 }, d);
        assert!(synth_pair(0, (64, 64), &outside).is_err());
        let huge = spec(TamperOp::PasteRect, Region { x: 0, y: 0, width: 64, height: 60 }, d);
        assert!(synth_pair(0, (64, 64), &huge).is_err());
        let tiny_ellipse = spec(TamperOp::PasteEllipse, Region { x: 0, y: 0, width: 7, height: 6 }, d);
        assert!(synth_pair(0, (64, 64), &tiny_ellipse).is_err());
        assert!(synth_pair(0, (15, 64), &spec(TamperOp::PasteRect, Region { x: 0, y: 0, width: 8, height: 8 }, d)).is_err());
    }

    #[test]
    fn degradation_changes_only_unmasked_labels() {
        let d = Degradation { jpeg_quality: 30, blur_sigma: 0.0 };
        let s = spec(TamperOp::PasteRect, Region { x: 10, y: 10, width: 20, height: 20 }, d);
        let (pair, mask) = synth_pair(0, (64, 64), &s).unwrap();
        assert_eq!(mask.white_count(), 400);
        let changed_outside = pair
            .original
            .enumerate_pixels()
            .filter(|(x, y, p)| !mask.is_white(*x, *y) && *p != pair.tampered.get_pixel(*x, *y))
            .count();
        assert!(changed_outside > 0);
    }

    #[test]
    fn degrade_identity_and_ranges() {
        let img = RgbImage::from_fn(20, 12, |x, y| Rgb([(x * 11) as u8, (y * 17) as u8, (x * y) as u8]));
        assert_eq!(degrade(&img, 100, 0.0).unwrap(), img);
        assert!(degrade(&img, 9, 0.0).is_err());
        assert!(degrade(&img, 101, 0.0).is_err());
        assert!(degrade(&img, 50, -1.0).is_err());
        assert_eq!(degrade(&img, 35, 1.5).unwrap().dimensions(), img.dimensions());
    }

    #[test]
    fn jpeg_changes_noise_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = RgbImage::from_fn(32, 32, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let out = degrade(&img, 30, 0.0).unwrap();
        let mad: f64 = img
            .as_raw()
            .iter()
            .zip(out.as_raw())
            .map(|(a, b)| f64::from(a.abs_diff(*b)))
            .sum::<f64>()
            / img.as_raw().len() as f64;
        assert!(mad > 0.0);
        assert_eq!(out, degrade(&img, 30, 0.0).unwrap());
    }

    #[test]
    fn blur_matches_direct_convolution_and_conserves_mass() {
        let mut img = RgbImage::new(33, 33);
        img.put_pixel(16, 16, Rgb([255, 255, 255]));
        let sigma = 2.0;
        let exact = gaussian_blur_f64(&img, sigma);
        let out = gaussian_blur(&img, sigma);
        // direct 2-D convolution with the outer-product kernel
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as i64;
        let mut mass = 0.0;
        for y in 0..33i64 {
            for x in 0..33i64 {
                let mut acc = 0.0;
                for (i, ki) in k.iter().enumerate() {
                    for (j, kj) in k.iter().enumerate() {
                        let sy = (y + i as i64 - r).clamp(0, 32) as u32;
                        let sx = (x + j as i64 - r).clamp(0, 32) as u32;
                        acc += ki * kj * f64::from(img.get_pixel(sx, sy)[0]);
                    }
                }
                let i = ((y * 33 + x) * 3) as usize;
                assert!((exact[i] - acc).abs() <= 1e-9, "({x},{y}): {} vs {acc}", exact[i]);
                let got = f64::from(out.get_pixel(x as u32, y as u32)[0]);
                assert!((got - acc).abs() <= 0.5 + 1e-9, "({x},{y}): {got} vs {acc}");
                mass += exact[i];
            }
        }
        assert!(f64::from(out.get_pixel(16, 16)[0]) < 255.0);
        // 8-bit rounding drops the faint tails, so mass is checked before it
        assert!((mass - 255.0).abs() / 255.0 < 0.01, "mass {mass}");
    }

    fn write_png(path: &Path, w: u32, h: u32, seed: u8) {
        RgbImage::from_fn(w, h, |x, y| Rgb([x as u8 ^ seed, y as u8, seed])).save(path).unwrap();
    }

    #[test]
    fn scan_keeps_equal_size_pairs_only() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            write_png(&root.join(format!("{id}_orig.png")), 16, 12, i as u8);
            write_png(&root.join(format!("{id}_tamp.png")), 16, 12, i as u8 + 10);
        }
        write_png(&root.join("d_orig.png"), 16, 12, 0);
        write_png(&root.join("d_tamp.png"), 32, 24, 0);
        let out = scan_pairs(root, &PairLayout::default()).unwrap();
        assert_eq!(out.manifest.records.len(), 3);
        assert_eq!(out.skipped.count(), 1);
        assert_eq!(out.skipped.skipped[0].pair_id, "d");
        assert!(out.manifest.records.iter().all(|r| r.split == Split::Test));
    }

    #[test]
    fn scan_empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = scan_pairs(dir.path(), &PairLayout::default()).unwrap_err();
        assert!(matches!(err, Error::NoValidPairs { .. }));
        assert!(scan_pairs(&dir.path().join("nope"), &PairLayout::default()).is_err());
    }

    #[test]
    fn scan_reads_split_directories_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let val = dir.path().join("val");
        std::fs::create_dir(&val).unwrap();
        write_png(&val.join("v_orig.png"), 16, 16, 1);
        write_png(&val.join("v_tamp.png"), 16, 16, 2);
        Mask::filled(16, 16, false, Provenance::GroundTruth).save_png(&val.join("v_mask.png")).unwrap();
        write_png(&val.join("w_orig.png"), 16, 16, 1);
        write_png(&val.join("w_tamp.png"), 16, 16, 2);
        let out = scan_pairs(dir.path(), &PairLayout::default()).unwrap();
        assert_eq!(out.manifest.records.len(), 1);
        assert_eq!(out.manifest.records[0].split, Split::Val);
        assert!(out.skipped.skipped[0].reason.starts_with("missing_mask"));
    }

    #[test]
    fn load_pair_checks_paths_and_dims() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_png(&root.join("a_orig.png"), 16, 12, 0);
        write_png(&root.join("a_tamp.png"), 16, 12, 1);
        let rec = scan_pairs(root, &PairLayout::default()).unwrap().manifest.records[0].clone();
        let pair = load_pair(&rec).unwrap();
        assert_eq!(pair.dims(), (16, 12));

        let mut wrong = rec.clone();
        wrong.width = 17;
        assert!(load_pair(&wrong).is_err());
        let mut missing = rec;
        missing.tampered_path = root.join("zzz.png");
        let err = load_pair(&missing).unwrap_err().to_string();
        assert!(err.contains("zzz.png"));
    }

    #[test]
    fn sixteen_bit_input_keeps_high_byte() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g16.png");
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(64, 4, |x, y| {
            image::Luma([(x as u16 * 4) << 8 | (y as u16 * 61 + 7)])
        });
        img.save(&path).unwrap();
        let rgb = load_rgb8(&path).unwrap();
        for (x, _, p) in rgb.enumerate_pixels() {
            let want = (x * 4) as u8;
            assert_eq!(p.0, [want, want, want]);
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let rec = PairRecord {
            pair_id: "x".into(),
            original_path: "x_orig.png".into(),
            tampered_path: "x_tamp.png".into(),
            mask_path: Some("x_mask.png".into()),
            width: 16,
            height: 16,
            split: Split::Train,
            roles_verified: false,
        };
        let m = DatasetManifest::new(vec![rec.clone()]).unwrap();
        let path = dir.path().join("m.jsonl");
        m.write_jsonl(&path).unwrap();
        let back = DatasetManifest::read_jsonl(&path).unwrap();
        assert_eq!(back.records[0].original_path, dir.path().join("x_orig.png"));
        let mut rel = back.records[0].clone();
        rel.relative_to(dir.path());
        assert_eq!(rel, rec);
        assert!(DatasetManifest::new(vec![rec.clone(), rec.clone()]).is_err());
        let unmasked = PairRecord { mask_path: None, ..rec };
        assert!(DatasetManifest::new(vec![unmasked]).is_err());
    }

    #[test]
    fn assign_splits_counts() {
        let recs = (0..64)
            .map(|i| PairRecord {
                pair_id: format!("p{i}"),
                original_path: "o".into(),
                tampered_path: "t".into(),
                mask_path: Some("m".into()),
                width: 8,
                height: 8,
                split: Split::Train,
                roles_verified: false,
            })
            .collect();
        let m = DatasetManifest::new(recs).unwrap();
        let s = assign_splits(&m, 0.125, 0.25, 0).unwrap();
        assert_eq!(s.split(Split::Test).len(), 16);
        assert_eq!(s.split(Split::Val).len(), 8);
        assert_eq!(s.split(Split::Train).len(), 40);
        assert_eq!(s, assign_splits(&m, 0.125, 0.25, 0).unwrap());
    }

    #[test]
    fn sampled_specs_are_valid() {
        for i in 0..200 {
            let s = sample_tamper_spec(1, i, (64, 64), Degradation::NONE);
            synth_pair(i as u64, (64, 64), &s).unwrap();
        }
    }
}
