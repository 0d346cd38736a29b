//! Segmentation metrics (region overlap, boundary distances, accuracy,
//! AUC-ROC), fold aggregation and the Wilcoxon signed-rank test.
//!
//! FPR follows the positives-normalized convention:
//! `|pred \ truth| / |truth|`, so it can exceed 1.

use std::fmt;
use std::io;
use std::path::Path;

use log::info;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Variant;

/// Probabilities at or above this value are predicted tumor.
pub const BINARIZE_THRESHOLD: f32 = 0.5;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Largest number of nonzero differences using the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;
pub const WILCOXON_MIN_PAIRS: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("mask contains values other than 0 and 1")]
    NotBinary,
    #[error("ground-truth mask is empty; region metrics are undefined")]
    EmptyTruth,
    #[error("no images in fold")]
    EmptyFold,
    #[error("fold contains only one class; AUC-ROC is undefined")]
    SingleClass,
    #[error("paired samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in paired samples")]
    NonFinite,
    #[error("all paired differences are zero; the test is undefined")]
    AllZeroDifferences,
    #[error("only {0} nonzero differences; at least {WILCOXON_MIN_PAIRS} are required")]
    TooFewDifferences(usize),
}

fn check_pair<A, B>(a: ArrayView2<'_, A>, b: ArrayView2<'_, B>) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

fn check_binary(m: ArrayView2<'_, u8>) -> Result<(), MetricsError> {
    if m.iter().any(|&v| v > 1) {
        return Err(MetricsError::NotBinary);
    }
    Ok(())
}

/// Pixel confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: ArrayView2<'_, u8>, truth: ArrayView2<'_, u8>) -> Result<Self, MetricsError> {
        check_pair(pred, truth)?;
        check_binary(pred)?;
        check_binary(truth)?;
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub dsc: f64,
    pub ji: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// DSC, JI, TPR and FPR of a binary prediction. An empty prediction scores
/// zero on all four.
pub fn region_metrics(pred: ArrayView2<'_, u8>, truth: ArrayView2<'_, u8>) -> Result<RegionMetrics, MetricsError> {
    let c = Confusion::of(pred, truth)?;
    let g = c.tp + c.fn_;
    if g == 0 {
        return Err(MetricsError::EmptyTruth);
    }
    let p = c.tp + c.fp;
    let (i, g, p) = (c.tp as f64, g as f64, p as f64);
    Ok(RegionMetrics {
        dsc: 2.0 * i / (g + p),
        ji: i / (g + p - i),
        tpr: i / g,
        fpr: c.fp as f64 / g,
    })
}

/// Pooled pixel accuracy over a fold.
pub fn global_accuracy(preds: &[Array2<u8>], truths: &[Array2<u8>]) -> Result<f64, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyFold);
    }
    let mut c = Confusion::default();
    for (p, t) in preds.iter().zip(truths) {
        c += Confusion::of(p.view(), t.view())?;
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// Mann-Whitney AUC over all pixels of the fold, ties counted one half.
pub fn auc_roc(probs: &[Array2<f32>], truths: &[Array2<u8>]) -> Result<f64, MetricsError> {
    if probs.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(probs.len(), truths.len()));
    }
    if probs.is_empty() {
        return Err(MetricsError::EmptyFold);
    }
    let mut pooled: Vec<(f32, bool)> = Vec::new();
    for (p, t) in probs.iter().zip(truths) {
        check_pair(p.view(), t.view())?;
        check_binary(t.view())?;
        pooled.extend(p.iter().zip(t.iter()).map(|(&s, &l)| (s, l == 1)));
    }
    auc_from_scores(pooled)
}

/// AUC of labelled scores via average ranks.
pub fn auc_from_scores(mut pooled: Vec<(f32, bool)>) -> Result<f64, MetricsError> {
    let n_pos = pooled.iter().filter(|(_, l)| *l).count();
    let n_neg = pooled.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    if pooled.iter().any(|(s, _)| s.is_nan()) {
        return Err(MetricsError::NonFinite);
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos = pooled[i..j].iter().filter(|(_, l)| *l).count();
        rank_sum_pos += avg * pos as f64;
        i = j;
    }
    let n_pos = n_pos as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg as f64))
}

/// Foreground pixels with at least one 8-neighbour outside the foreground.
/// Positions outside the image count as background.
pub fn boundary(mask: ArrayView2<'_, u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize && mask[(r as usize, c as usize)] == 1;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[(r, c)] != 1 {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let edge = (-1..=1).any(|dr| (-1..=1).any(|dc| (dr, dc) != (0, 0) && !fg(ri + dr, ci + dc)));
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryDistances {
    pub hd: f64,
    pub md: f64,
}

/// Returns `(max, mean)` over `from` of the distance to the nearest point of
/// `to`.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> (f64, f64) {
    let mut max_sq = 0u64;
    let mut sum = 0.0f64;
    for &(r, c) in from {
        let best = to
            .iter()
            .map(|&(r2, c2)| {
                let dr = r.abs_diff(r2) as u64;
                let dc = c.abs_diff(c2) as u64;
                dr * dr + dc * dc
            })
            .min()
            .expect("target boundary is nonempty");
        max_sq = max_sq.max(best);
        sum += (best as f64).sqrt();
    }
    ((max_sq as f64).sqrt(), sum / from.len() as f64)
}

/// Symmetric Hausdorff and mean boundary distances in pixels. `None` when
/// either mask is empty.
pub fn boundary_distances(
    pred: ArrayView2<'_, u8>,
    truth: ArrayView2<'_, u8>,
) -> Result<Option<BoundaryDistances>, MetricsError> {
    check_pair(pred, truth)?;
    check_binary(pred)?;
    check_binary(truth)?;
    let bp = boundary(pred);
    let bt = boundary(truth);
    if bp.is_empty() || bt.is_empty() {
        return Ok(None);
    }
    let (max_tp, mean_tp) = directed(&bt, &bp);
    let (max_pt, mean_pt) = directed(&bp, &bt);
    Ok(Some(BoundaryDistances {
        hd: max_tp.max(max_pt),
        md: 0.5 * (mean_tp + mean_pt),
    }))
}

pub fn binarize(probs: ArrayView2<'_, f32>) -> Array2<u8> {
    probs.mapv(|p| u8::from(p >= BINARIZE_THRESHOLD))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scope {
    PerImage,
    PerFold,
}

/// Metric values for one image or one fold. Undefined boundary distances and
/// per-image accuracy/AUC are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dsc: f64,
    pub ji: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub hd: Option<f64>,
    pub md: Option<f64>,
    pub acc: Option<f64>,
    pub auc_roc: Option<f64>,
    pub scope: Scope,
}

impl MetricsRecord {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Dsc => Some(self.dsc),
            Metric::Ji => Some(self.ji),
            Metric::Tpr => Some(self.tpr),
            Metric::Fpr => Some(self.fpr),
            Metric::Hd => self.hd,
            Metric::Md => self.md,
            Metric::Acc => self.acc,
            Metric::AucRoc => self.auc_roc,
        }
    }
}

/// Per-image record from a probability map and ground truth.
pub fn image_metrics(probs: ArrayView2<'_, f32>, truth: ArrayView2<'_, u8>) -> Result<MetricsRecord, MetricsError> {
    check_pair(probs, truth)?;
    let pred = binarize(probs);
    let r = region_metrics(pred.view(), truth)?;
    let b = boundary_distances(pred.view(), truth)?;
    Ok(MetricsRecord {
        dsc: r.dsc,
        ji: r.ji,
        tpr: r.tpr,
        fpr: r.fpr,
        hd: b.map(|b| b.hd),
        md: b.map(|b| b.md),
        acc: None,
        auc_roc: None,
        scope: Scope::PerImage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dsc,
    Ji,
    Tpr,
    Fpr,
    Hd,
    Md,
    Acc,
    AucRoc,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Dsc,
        Metric::Ji,
        Metric::Tpr,
        Metric::Fpr,
        Metric::Hd,
        Metric::Md,
        Metric::Acc,
        Metric::AucRoc,
    ];
    /// Metrics defined per image and therefore eligible for paired testing.
    pub const PER_IMAGE: [Metric; 6] = [Metric::Dsc, Metric::Ji, Metric::Tpr, Metric::Fpr, Metric::Hd, Metric::Md];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Ji => "ji",
            Metric::Tpr => "tpr",
            Metric::Fpr => "fpr",
            Metric::Hd => "hd",
            Metric::Md => "md",
            Metric::Acc => "acc",
            Metric::AucRoc => "auc_roc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Dsc => "DSC",
            Metric::Ji => "JI",
            Metric::Tpr => "TPR",
            Metric::Fpr => "FPR",
            Metric::Hd => "HD",
            Metric::Md => "MD",
            Metric::Acc => "ACC",
            Metric::AucRoc => "AUC-ROC",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fold-level record plus bookkeeping on excluded boundary entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldAggregate {
    pub record: MetricsRecord,
    pub n_images: usize,
    /// Images whose HD/MD were undefined and left out of the means.
    pub n_boundary_undefined: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Averages per-image records within a fold and attaches fold-level
/// accuracy and AUC.
pub fn aggregate_fold(
    records: &[MetricsRecord],
    acc: Option<f64>,
    auc_roc: Option<f64>,
) -> Result<FoldAggregate, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyFold);
    }
    let field = |m: Metric| mean(records.iter().filter_map(|r| r.get(m)));
    let undefined = records.iter().filter(|r| r.hd.is_none()).count();
    if undefined > 0 {
        info!("{undefined} of {} images have undefined boundary distances; excluded", records.len());
    }
    Ok(FoldAggregate {
        record: MetricsRecord {
            dsc: field(Metric::Dsc).expect("nonempty"),
            ji: field(Metric::Ji).expect("nonempty"),
            tpr: field(Metric::Tpr).expect("nonempty"),
            fpr: field(Metric::Fpr).expect("nonempty"),
            hd: field(Metric::Hd),
            md: field(Metric::Md),
            acc,
            auc_roc,
            scope: Scope::PerFold,
        },
        n_images: records.len(),
        n_boundary_undefined: undefined,
    })
}

/// Mean and sample standard deviation across folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        let m = mean(values.iter().copied())?;
        let std = if n > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean: m, std, n })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ({:.3})", self.mean, self.std)
    }
}

/// Cross-fold mean (std) of `metric` over fold records.
pub fn cross_fold(folds: &[MetricsRecord], metric: Metric) -> Option<MeanStd> {
    let values: Vec<f64> = folds.iter().filter_map(|r| r.get(metric)).collect();
    MeanStd::of(&values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Nonzero differences entering the test.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test of `a - b`. Zero differences are
/// discarded, tied magnitudes get average ranks; exact null distribution for
/// up to [`WILCOXON_EXACT_MAX`] differences, otherwise a tie-corrected normal
/// approximation with continuity correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(MetricsError::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < WILCOXON_MIN_PAIRS {
        return Err(MetricsError::TooFewDifferences(n));
    }
    let (doubled, tie_sizes) = doubled_ranks(&diffs);
    let w_plus2: u64 = diffs.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let total2 = (n * (n + 1)) as u64;
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total2 - w_plus2) as f64 / 2.0;
    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX {
        (exact_p(&doubled, w_plus2), true)
    } else {
        (normal_p(n, w_plus, &tie_sizes), false)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        p_value,
        exact,
    })
}

/// Twice the average ranks of `|d|` (integers), plus the sizes of tie groups.
fn doubled_ranks(diffs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // average of ranks i+1..=j, doubled
        let r2 = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r2;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn exact_p(doubled: &[u64], w_plus2: u64) -> f64 {
    let max: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; max as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = (1u64 << doubled.len()) as f64;
    let w = w_plus2 as usize;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

fn normal_p(n: usize, w_plus: f64, tie_sizes: &[usize]) -> f64 {
    let n = n as f64;
    let mu = n * (n + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Paired comparison of one metric between two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub metric: Metric,
    pub model_a: String,
    pub model_b: String,
    pub p_value: f64,
    pub significant: bool,
    pub n_pairs: usize,
}

impl ComparisonResult {
    pub fn new(metric: Metric, model_a: &str, model_b: &str, test: &WilcoxonResult) -> Self {
        ComparisonResult {
            metric,
            model_a: model_a.to_string(),
            model_b: model_b.to_string(),
            p_value: test.p_value,
            significant: test.p_value < SIGNIFICANCE_LEVEL,
            n_pairs: test.n,
        }
    }

    /// `*` when significant at the 0.05 level.
    pub fn stars(&self) -> &'static str {
        if self.significant {
            "*"
        } else {
            ""
        }
    }
}

/// One row of the per-image CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRow {
    pub id: String,
    pub fold: usize,
    pub variant: Variant,
    pub metrics: MetricsRecord,
}

/// One row of the per-fold CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRow {
    pub fold: usize,
    pub variant: Variant,
    pub metrics: MetricsRecord,
}

pub const IMAGE_CSV_HEADER: [&str; 9] = ["id", "fold", "variant", "dsc", "ji", "tpr", "fpr", "hd", "md"];
pub const FOLD_CSV_HEADER: [&str; 10] = ["fold", "variant", "dsc", "ji", "tpr", "fpr", "hd", "md", "acc", "auc_roc"];
pub const COMPARISON_CSV_HEADER: [&str; 6] = ["metric", "model_a", "model_b", "p_value", "significant", "n_pairs"];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |v| v.to_string())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CsvError + '_ {
    move |source| CsvError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CsvError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| csv_err(path)(csv::Error::from(e)))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e: io::Error| csv_err(path)(e.into()))
}

pub fn write_image_csv(path: &Path, rows: &[ImageRow]) -> Result<(), CsvError> {
    write_rows(
        path,
        &IMAGE_CSV_HEADER,
        rows.iter().map(|r| {
            let m = &r.metrics;
            vec![
                r.id.clone(),
                r.fold.to_string(),
                r.variant.to_string(),
                m.dsc.to_string(),
                m.ji.to_string(),
                m.tpr.to_string(),
                m.fpr.to_string(),
                fmt_opt(m.hd),
                fmt_opt(m.md),
            ]
        }),
    )
}

pub fn write_fold_csv(path: &Path, rows: &[FoldRow]) -> Result<(), CsvError> {
    write_rows(
        path,
        &FOLD_CSV_HEADER,
        rows.iter().map(|r| {
            let m = &r.metrics;
            vec![
                r.fold.to_string(),
                r.variant.to_string(),
                m.dsc.to_string(),
                m.ji.to_string(),
                m.tpr.to_string(),
                m.fpr.to_string(),
                fmt_opt(m.hd),
                fmt_opt(m.md),
                fmt_opt(m.acc),
                fmt_opt(m.auc_roc),
            ]
        }),
    )
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonResult]) -> Result<(), CsvError> {
    write_rows(
        path,
        &COMPARISON_CSV_HEADER,
        rows.iter().map(|r| {
            vec![
                r.metric.to_string(),
                r.model_a.clone(),
                r.model_b.clone(),
                r.p_value.to_string(),
                r.significant.to_string(),
                r.n_pairs.to_string(),
            ]
        }),
    )
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64, CsvError> {
    s.trim().parse::<f64>().map_err(|_| CsvError::Format {
        path: path.display().to_string(),
        message: format!("line {line}: {field} = {s:?} is not a number"),
    })
}

fn parse_opt(path: &Path, line: usize, field: &str, s: &str) -> Result<Option<f64>, CsvError> {
    let v = parse_f64(path, line, field, s)?;
    Ok((!v.is_nan()).then_some(v))
}

pub fn read_image_csv(path: &Path) -> Result<Vec<ImageRow>, CsvError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().collect::<Vec<_>>() != IMAGE_CSV_HEADER {
        return Err(CsvError::Format {
            path: path.display().to_string(),
            message: format!("expected header {}", IMAGE_CSV_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let bad = |message: String| CsvError::Format {
            path: path.display().to_string(),
            message: format!("line {line}: {message}"),
        };
        let fold = rec[1].parse::<usize>().map_err(|_| bad(format!("bad fold {:?}", &rec[1])))?;
        let variant = rec[2].parse::<Variant>().map_err(bad)?;
        let f = |k: usize| parse_f64(path, line, IMAGE_CSV_HEADER[k], &rec[k]);
        let o = |k: usize| parse_opt(path, line, IMAGE_CSV_HEADER[k], &rec[k]);
        rows.push(ImageRow {
            id: rec[0].to_string(),
            fold,
            variant,
            metrics: MetricsRecord {
                dsc: f(3)?,
                ji: f(4)?,
                tpr: f(5)?,
                fpr: f(6)?,
                hd: o(7)?,
                md: o(8)?,
                acc: None,
                auc_roc: None,
                scope: Scope::PerImage,
            },
        });
    }
    Ok(rows)
}
