//! Image/mask/saliency triples: loading, resizing, fold assignment and a
//! synthetic generator of ultrasound-like data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::{self, ConfidenceParams};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const SALIENCY_DIR: &str = "saliency";

/// Raw 8-bit mask values at or above this are tumor.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample {id}: missing {kind} file {path}")]
    MissingCounterpart { id: String, kind: &'static str, path: PathBuf },
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset at {0} contains no samples")]
    Empty(PathBuf),
    #[error("sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("resize target {0} must be a positive multiple of 16 so four 2x poolings are exact")]
    BadSide(usize),
    #[error("need at least {needed} ids for {folds}-fold cross-validation, got {got}")]
    TooFewIds { needed: usize, got: usize, folds: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("fold plan file {path}: {source}")]
    PlanFormat {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One image with its ground-truth mask and precomputed saliency map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Grayscale intensity in `[0, 1]`.
    pub image: Array2<f32>,
    /// Tumor membership, values in `{0, 1}`.
    pub mask: Array2<u8>,
    /// Per-pixel saliency in `[0, 1]`.
    pub saliency: Array2<f32>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Array2<f32>,
        mask: Array2<u8>,
        saliency: Array2<f32>,
    ) -> Result<Self, DatasetError> {
        let s = Sample {
            id: id.into(),
            image,
            mask,
            saliency,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidSample {
            id: self.id.clone(),
            reason,
        };
        let dim = self.image.dim();
        if self.mask.dim() != dim || self.saliency.dim() != dim {
            return Err(invalid(format!(
                "shape mismatch: image {:?}, mask {:?}, saliency {:?}",
                dim,
                self.mask.dim(),
                self.saliency.dim()
            )));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(invalid("mask has values other than 0 and 1".into()));
        }
        let in_unit = |v: &f32| (0.0..=1.0).contains(v);
        if !self.image.iter().all(in_unit) {
            return Err(invalid("image values outside [0, 1]".into()));
        }
        if !self.saliency.iter().all(in_unit) {
            return Err(invalid("saliency values outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn side(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn tumor_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

fn read_gray(path: &Path) -> Result<GrayImage, DatasetError> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|source| DatasetError::Unreadable {
            path: path.to_path_buf(),
            source,
        })
}

fn gray_to_unit(img: &GrayImage) -> Array2<f32> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        f32::from(img.get_pixel(c as u32, r as u32)[0]) / 255.0
    })
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>, DatasetError> {
    let mut ids = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(ids);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Loads `<root>/{images,masks,saliency}/<id>.png`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>, DatasetError> {
    load_dataset_with(root, true)
}

/// As [`load_dataset`]; with `with_saliency = false` the saliency directory
/// is neither required nor read and every sample gets an all-zero map.
pub fn load_dataset_with(root: &Path, with_saliency: bool) -> Result<Vec<Sample>, DatasetError> {
    let mut dirs = vec![("image", root.join(IMAGES_DIR)), ("mask", root.join(MASKS_DIR))];
    if with_saliency {
        dirs.push(("saliency", root.join(SALIENCY_DIR)));
    }
    let mut all_ids = BTreeSet::new();
    let mut per_dir = Vec::new();
    for (_, dir) in &dirs {
        let ids = png_ids(dir)?;
        all_ids.extend(ids.iter().cloned());
        per_dir.push(ids);
    }
    if all_ids.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }
    for id in &all_ids {
        for ((kind, dir), ids) in dirs.iter().zip(&per_dir) {
            if !ids.contains(id) {
                return Err(DatasetError::MissingCounterpart {
                    id: id.clone(),
                    kind,
                    path: dir.join(format!("{id}.png")),
                });
            }
        }
    }
    let mut samples = Vec::with_capacity(all_ids.len());
    for id in all_ids {
        let file = format!("{id}.png");
        let image = gray_to_unit(&read_gray(&dirs[0].1.join(&file))?);
        let raw_mask = read_gray(&dirs[1].1.join(&file))?;
        let (w, h) = raw_mask.dimensions();
        let mask = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            u8::from(raw_mask.get_pixel(c as u32, r as u32)[0] >= MASK_THRESHOLD)
        });
        let saliency = if with_saliency {
            gray_to_unit(&read_gray(&dirs[2].1.join(&file))?)
        } else {
            Array2::zeros(mask.dim())
        };
        samples.push(Sample::new(id, image, mask, saliency)?);
    }
    Ok(samples)
}

fn unit_to_gray(values: &Array2<f32>) -> GrayImage {
    let (h, w) = values.dim();
    GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([(values[(r as usize, c as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn mask_to_gray(mask: &Array2<u8>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |c, r| Luma([mask[(r as usize, c as usize)] * 255]))
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DatasetError::Unreadable {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes a probability or intensity map as an 8-bit PNG.
pub fn write_unit_png(path: &Path, values: &Array2<f32>) -> Result<(), DatasetError> {
    write_png(path, &unit_to_gray(values))
}

pub fn read_unit_png(path: &Path) -> Result<Array2<f32>, DatasetError> {
    Ok(gray_to_unit(&read_gray(path)?))
}

/// Writes the standard directory layout. Values are quantized to 8 bits.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<(), DatasetError> {
    for s in samples {
        let file = format!("{}.png", s.id);
        write_png(&root.join(IMAGES_DIR).join(&file), &unit_to_gray(&s.image))?;
        write_png(&root.join(MASKS_DIR).join(&file), &mask_to_gray(&s.mask))?;
        write_png(&root.join(SALIENCY_DIR).join(&file), &unit_to_gray(&s.saliency))?;
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (r0, r1, fy) = rows[r];
        let (c0, c1, fx) = cols[c];
        let top = src[(r0, c0)] * (1.0 - fx) + src[(r0, c1)] * fx;
        let bottom = src[(r1, c0)] * (1.0 - fx) + src[(r1, c1)] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

/// Nearest-neighbour resampling: output `(r, c)` takes input
/// `(r * h / out_h, c * w / out_w)`.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| src[(r * h / out_h, c * w / out_w)])
}

/// Resizes to `side x side`: bilinear for image and saliency, nearest for the
/// mask (which stays binary).
pub fn resize_sample(s: &Sample, side: usize) -> Result<Sample, DatasetError> {
    if side < 16 || side % 16 != 0 {
        return Err(DatasetError::BadSide(side));
    }
    if s.side() == (side, side) {
        return Ok(s.clone());
    }
    Sample::new(
        s.id.clone(),
        resize_bilinear(&s.image, side, side),
        resize_nearest(&s.mask, side, side).mapv(|v| u8::from(v > 0)),
        resize_bilinear(&s.saliency, side, side),
    )
}

pub const DEFAULT_FOLDS: usize = 5;
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Deterministic assignment of sample ids to cross-validation test folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
    pub val_fraction: f64,
}

/// Train/validation/test id lists for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn make_fold_plan(ids: &[String], seed: u64) -> Result<FoldPlan, DatasetError> {
    make_fold_plan_k(ids, DEFAULT_FOLDS, seed)
}

/// Shuffles the sorted id set with `seed` and deals it into `k` contiguous
/// folds whose sizes differ by at most one.
pub fn make_fold_plan_k(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, DatasetError> {
    let k = k.max(2);
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(DatasetError::DuplicateId(w[0].clone()));
    }
    if sorted.len() < k {
        return Err(DatasetError::TooFewIds {
            needed: k,
            got: sorted.len(),
            folds: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n = sorted.len();
    let folds = (0..k)
        .map(|f| {
            let mut fold = sorted[f * n / k..(f + 1) * n / k].to_vec();
            fold.sort();
            fold
        })
        .collect();
    Ok(FoldPlan {
        seed,
        folds,
        val_fraction: VALIDATION_FRACTION,
    })
}

impl FoldPlan {
    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn all_ids(&self) -> BTreeSet<String> {
        self.folds.iter().flatten().cloned().collect()
    }

    /// Fold number (1-based) holding `id` as test sample.
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|x| x == id)).map(|i| i + 1)
    }

    /// Split for fold `fold` (1-based). The validation subset is
    /// `ceil(val_fraction * |train+val|)` ids drawn with a seed derived from
    /// the plan seed and fold number.
    pub fn split(&self, fold: usize) -> FoldSplit {
        assert!((1..=self.folds.len()).contains(&fold), "fold {fold} out of range");
        let test = self.folds[fold - 1].clone();
        let mut rest: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold - 1)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        rest.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fold as u64);
        rest.shuffle(&mut rng);
        let n_val = ((rest.len() as f64) * self.val_fraction - 1e-9).ceil() as usize;
        let mut val = rest[..n_val].to_vec();
        let mut train = rest[n_val..].to_vec();
        val.sort();
        train.sort();
        FoldSplit { fold, train, val, test }
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).expect("plan serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DatasetError::PlanFormat {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Saliency map quality levels of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyQuality {
    /// Smoothed mask, peak at least 0.8 inside the tumor.
    Satisfactory,
    /// Correct location, distorted shape.
    Moderate,
    /// Tumor plus distractor blobs of comparable cumulative intensity.
    Low,
    /// Saliency only outside the tumor.
    Poor,
}

impl SaliencyQuality {
    pub const ALL: [SaliencyQuality; 4] = [
        SaliencyQuality::Satisfactory,
        SaliencyQuality::Moderate,
        SaliencyQuality::Low,
        SaliencyQuality::Poor,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    /// Proportions of satisfactory / moderate / low / poor saliency maps.
    pub quality_mix: [f64; 4],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 200,
            size: 128,
            quality_mix: [0.7, 0.2, 0.1, 0.0],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidConfig(m));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if self.size < 32 {
            return bad(format!("size {} is too small (minimum 32)", self.size));
        }
        if self.quality_mix.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
            return bad(format!("quality_mix {:?} has negative or non-finite entries", self.quality_mix));
        }
        let total: f64 = self.quality_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("quality_mix {:?} sums to {total}, not 1", self.quality_mix));
        }
        Ok(())
    }

    /// Quality level per sample index: exact largest-remainder counts,
    /// shuffled with the seed.
    pub fn quality_assignment(&self) -> Vec<SaliencyQuality> {
        let n = self.count;
        let raw: Vec<f64> = self.quality_mix.iter().map(|q| q * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let mut missing = n - counts.iter().sum::<usize>();
        for &q in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            if self.quality_mix[q] > 0.0 {
                counts[q] += 1;
                missing -= 1;
            }
        }
        let mut out: Vec<SaliencyQuality> = counts
            .iter()
            .enumerate()
            .flat_map(|(q, &c)| std::iter::repeat_n(SaliencyQuality::ALL[q], c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        out.shuffle(&mut rng);
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius: `< 1` inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    fn max_radius(&self) -> f64 {
        self.rx.max(self.ry)
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        self.rho(r as f64 + 0.5, c as f64 + 0.5) <= 1.0
    }

    fn clear_of(&self, other: &Ellipse, margin: f64) -> bool {
        let d = ((self.cy - other.cy).powi(2) + (self.cx - other.cx).powi(2)).sqrt();
        d > self.max_radius() + other.max_radius() + margin
    }
}

fn separable_blur(src: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = src.dim();
    let pass = |input: &Array2<f32>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let mut acc = 0.0f32;
            for (j, k) in kernel.iter().enumerate() {
                let off = j as isize - radius;
                let (rr, cc) = if horizontal {
                    (r as isize, (c as isize + off).clamp(0, w as isize - 1))
                } else {
                    ((r as isize + off).clamp(0, h as isize - 1), c as isize)
                };
                acc += k * input[(rr as usize, cc as usize)];
            }
            acc
        })
    };
    pass(&pass(src, true), false)
}

fn normalize_peak(map: &mut Array2<f32>, peak: f32) {
    let max = map.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        map.mapv_inplace(|v| (v / max * peak).clamp(0.0, 1.0));
    }
}

/// Smooth bump of the given normalized-radius profile, zero outside
/// `1.6 * radius`.
fn blob(size: usize, shape: &Ellipse, peak: f32) -> Array2<f32> {
    Array2::from_shape_fn((size, size), |(r, c)| {
        let rho = shape.rho(r as f64 + 0.5, c as f64 + 0.5);
        if rho >= 1.6 {
            0.0
        } else {
            let t = rho / 1.6;
            (peak as f64 * (1.0 - t * t).powi(2)) as f32
        }
    })
}

fn random_ellipse(rng: &mut ChaCha8Rng, size: f64, r_lo: f64, r_hi: f64, border: f64) -> Ellipse {
    let ry = rng.random_range(r_lo..r_hi) * size;
    let rx = (ry * rng.random_range(0.75..1.5)).min(r_hi * size * 1.3);
    let m = rx.max(ry) + border * size;
    Ellipse {
        cy: rng.random_range(m..(size - m).max(m + 1.0)),
        cx: rng.random_range(m..(size - m).max(m + 1.0)),
        ry,
        rx,
        angle: rng.random_range(0.0..std::f64::consts::PI),
    }
}

/// Places an ellipse that keeps `margin` pixels from every ellipse in
/// `avoid`; falls back to the last candidate after a bounded search.
fn place_clear(
    rng: &mut ChaCha8Rng,
    size: f64,
    r_lo: f64,
    r_hi: f64,
    avoid: &[Ellipse],
    margin: f64,
) -> Option<Ellipse> {
    (0..200)
        .map(|_| random_ellipse(rng, size, r_lo, r_hi, 0.04))
        .find(|e| avoid.iter().all(|a| e.clear_of(a, margin)))
}

fn contour_intensity(map: &Array2<f32>) -> Option<(f64, f64)> {
    saliency::extract_contours(map.view(), ConfidenceParams::default().threshold)
        .first()
        .map(|c| (c.cum_intensity, c.mean_intensity))
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Scene {
    tumors: Vec<Ellipse>,
    mask: Array2<u8>,
    image: Array2<f32>,
    /// Dark non-tumor structures drawn into the image.
    decoys: Vec<Ellipse>,
}

fn render_scene(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let s = size as f64;
    let primary = random_ellipse(rng, s, 0.09, 0.19, 0.05);
    let mut tumors = vec![primary];
    if rng.random_bool(0.25) {
        if let Some(second) = place_clear(rng, s, 0.045, 0.08, &tumors, 0.06 * s) {
            tumors.push(second);
        }
    }
    // tumor-like dark structures (cysts, shadows) that only saliency can
    // tell apart from the lesion
    let mut decoys = Vec::new();
    for _ in 0..rng.random_range(1..=2) {
        let mut avoid = tumors.clone();
        avoid.extend(decoys.iter().copied());
        if let Some(d) = place_clear(rng, s, 0.07, 0.14, &avoid, 0.05 * s) {
            decoys.push(d);
        }
    }

    let mask = Array2::from_shape_fn((size, size), |(r, c)| u8::from(tumors.iter().any(|t| t.contains(r, c))));

    // layered tissue background with a smooth random texture
    let freq = rng.random_range(1.5..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let base_level = rng.random_range(0.5..0.62);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rough = Array2::from_shape_fn((size, size), |_| normal.sample(rng) as f32);
    let rough = separable_blur(&rough, s / 24.0);
    let rough_scale = 0.08 / rough.iter().map(|v| v.abs()).fold(1e-6f32, f32::max);
    let mut clean = Array2::from_shape_fn((size, size), |(r, c)| {
        let layer = 0.1 * (std::f64::consts::TAU * freq * r as f64 / s + phase).sin();
        (base_level + layer) as f32 + rough_scale * rough[(r, c)]
    });
    let tumor_level: Vec<f64> = tumors.iter().map(|_| rng.random_range(0.12..0.25)).collect();
    let decoy_level: Vec<f64> = decoys.iter().map(|_| rng.random_range(0.14..0.28)).collect();
    for (r, c) in (0..size).flat_map(|r| (0..size).map(move |c| (r, c))) {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut v = clean[(r, c)] as f64;
        for (d, &lvl) in decoys.iter().zip(&decoy_level) {
            let w = soft_inside(d.rho(y, x), d.max_radius());
            v = v * (1.0 - w) + lvl * w;
        }
        for (t, &lvl) in tumors.iter().zip(&tumor_level) {
            let w = soft_inside(t.rho(y, x), t.max_radius());
            v = v * (1.0 - w) + lvl * w;
        }
        clean[(r, c)] = v as f32;
    }

    // multiplicative speckle with short spatial correlation
    let gamma = Gamma::new(4.0, 0.25).expect("gamma params");
    let speckle = Array2::from_shape_fn((size, size), |_| gamma.sample(rng) as f32);
    let speckle = separable_blur(&speckle, 0.7);
    let image = Array2::from_shape_fn((size, size), |(r, c)| (clean[(r, c)] * speckle[(r, c)]).clamp(0.0, 1.0));
    Scene {
        tumors,
        mask,
        image,
        decoys,
    }
}

/// Blend weight for an object edge of about one pixel width.
fn soft_inside(rho: f64, radius: f64) -> f64 {
    let dist = (rho - 1.0) * radius;
    (0.5 - dist).clamp(0.0, 1.0)
}

fn ellipse_mask(size: usize, e: &Ellipse) -> Array2<f32> {
    Array2::from_shape_fn((size, size), |(r, c)| if e.contains(r, c) { 1.0 } else { 0.0 })
}

fn satisfactory_saliency(rng: &mut ChaCha8Rng, size: usize, tumors: &[Ellipse]) -> Array2<f32> {
    let s = size as f64;
    let peak = rng.random_range(0.85f32..1.0);
    let sigma = s * rng.random_range(0.015..0.03);
    let mut map = separable_blur(&ellipse_mask(size, &tumors[0]), sigma);
    normalize_peak(&mut map, peak);
    for t in &tumors[1..] {
        let mut extra = separable_blur(&ellipse_mask(size, t), sigma);
        normalize_peak(&mut extra, 0.5 * peak);
        map.zip_mut_with(&extra, |a, &b| *a = a.max(b));
    }
    if saliency::confidence_decision(
        &saliency::extract_contours(map.view(), 0.3).iter().map(|c| c.summary()).collect::<Vec<_>>(),
        &ConfidenceParams::default(),
    )
    .rejected
    {
        map = separable_blur(&ellipse_mask(size, &tumors[0]), sigma);
        normalize_peak(&mut map, peak);
    }
    map
}

fn moderate_saliency(rng: &mut ChaCha8Rng, size: usize, tumor: &Ellipse) -> Array2<f32> {
    let s = size as f64;
    let shift = 0.3 * tumor.rx.min(tumor.ry);
    let wobble = rng.random_range(0.1..0.25);
    let lobes = rng.random_range(2..=4) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let warped = Ellipse {
        cy: tumor.cy + rng.random_range(-shift..shift),
        cx: tumor.cx + rng.random_range(-shift..shift),
        ry: tumor.ry * rng.random_range(0.7..1.3),
        rx: tumor.rx * rng.random_range(0.7..1.3),
        angle: tumor.angle + rng.random_range(-0.5..0.5),
    };
    let raw = Array2::from_shape_fn((size, size), |(r, c)| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let theta = (y - warped.cy).atan2(x - warped.cx);
        let limit = 1.0 + wobble * (lobes * theta + phase).sin();
        if warped.rho(y, x) <= limit {
            1.0
        } else {
            0.0
        }
    });
    let mut map = separable_blur(&raw, s * rng.random_range(0.03..0.05));
    normalize_peak(&mut map, rng.random_range(0.7..0.9));
    map
}

/// Tumor blob plus brighter distractors whose cumulative intensity is
/// 55-85% of the tumor's, so the largest contour is not the brightest one.
fn low_saliency(rng: &mut ChaCha8Rng, size: usize, scene: &Scene) -> Array2<f32> {
    let s = size as f64;
    let tumor = scene.tumors[0];
    let mut map = blob(size, &tumor, rng.random_range(0.5..0.62));
    let Some((tumor_i, _)) = contour_intensity(&map) else {
        return map;
    };
    let mut avoid = scene.tumors.clone();
    let n_distractors = rng.random_range(1..=2);
    for k in 0..n_distractors {
        let target = tumor_i * if k == 0 { rng.random_range(0.6..0.8) } else { rng.random_range(0.3..0.5) };
        // distractors sit on plain tissue, away from tumors and decoys
        let mut blocked = avoid.clone();
        blocked.extend(scene.decoys.iter().copied());
        let center = place_clear(rng, s, 0.04, 0.06, &blocked, 0.1 * s)
            .or_else(|| place_clear(rng, s, 0.04, 0.06, &avoid, 0.1 * s));
        let Some(center) = center else { break };
        let peak = rng.random_range(0.9f32..1.0);
        // search the radius whose contour matches the target intensity
        let mut best: Option<(f64, Ellipse, Array2<f32>)> = None;
        for step in 1..=60 {
            let r = step as f64 * 0.5;
            let e = Ellipse {
                cy: center.cy,
                cx: center.cx,
                ry: r,
                rx: r,
                angle: 0.0,
            };
            let b = blob(size, &e, peak);
            if let Some((i, _)) = contour_intensity(&b) {
                let err = (i - target).abs();
                if best.as_ref().is_none_or(|(be, _, _)| err < *be) {
                    best = Some((err, e, b));
                }
                if i > target {
                    break;
                }
            }
        }
        if let Some((_, e, b)) = best {
            let clear = avoid.iter().all(|a| e.clear_of(a, 3.0));
            if clear {
                map.zip_mut_with(&b, |a, &v| *a = a.max(v));
                avoid.push(Ellipse {
                    ry: e.ry * 1.6,
                    rx: e.rx * 1.6,
                    ..e
                });
            }
        }
    }
    map
}

fn poor_saliency(rng: &mut ChaCha8Rng, size: usize, scene: &Scene) -> Array2<f32> {
    let s = size as f64;
    let spot = scene
        .decoys
        .first()
        .copied()
        .or_else(|| place_clear(rng, s, 0.06, 0.1, &scene.tumors, 0.05 * s))
        .unwrap_or(Ellipse {
            cy: s * 0.15,
            cx: s * 0.15,
            ry: s * 0.06,
            rx: s * 0.06,
            angle: 0.0,
        });
    let mut map = blob(size, &spot, rng.random_range(0.7..0.95));
    map.zip_mut_with(&scene.mask, |v, &m| {
        if m == 1 {
            *v = 0.0;
        }
    });
    map
}

fn synthesize_one(cfg: &SyntheticConfig, index: usize, quality: SaliencyQuality) -> Sample {
    let mut rng = sample_rng(cfg.seed, index);
    let scene = render_scene(&mut rng, cfg.size);
    let saliency = match quality {
        SaliencyQuality::Satisfactory => satisfactory_saliency(&mut rng, cfg.size, &scene.tumors),
        SaliencyQuality::Moderate => moderate_saliency(&mut rng, cfg.size, &scene.tumors[0]),
        SaliencyQuality::Low => low_saliency(&mut rng, cfg.size, &scene),
        SaliencyQuality::Poor => poor_saliency(&mut rng, cfg.size, &scene),
    };
    Sample::new(format!("syn_{index:05}"), scene.image, scene.mask, saliency)
        .expect("generator produces valid samples")
}

/// Synthetic BUS-like samples with ids `syn_00000..`. Deterministic in the
/// config; sample `i` depends only on `(seed, i, quality_i)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>, DatasetError> {
    Ok(generate_synthetic_labelled(cfg)?.into_iter().map(|(s, _)| s).collect())
}

/// As [`generate_synthetic`], also returning each sample's saliency quality.
pub fn generate_synthetic_labelled(cfg: &SyntheticConfig) -> Result<Vec<(Sample, SaliencyQuality)>, DatasetError> {
    cfg.validate()?;
    Ok(cfg
        .quality_assignment()
        .into_iter()
        .enumerate()
        .map(|(i, q)| (synthesize_one(cfg, i, q), q))
        .collect())
}

/// Index by id, rejecting duplicates.
pub fn index_by_id(samples: &[Sample]) -> Result<BTreeMap<&str, &Sample>, DatasetError> {
    let mut map = BTreeMap::new();
    for s in samples {
        if map.insert(s.id.as_str(), s).is_some() {
            return Err(DatasetError::DuplicateId(s.id.clone()));
        }
    }
    Ok(map)
}
