//! Confidence scoring of saliency maps.
//!
//! A map is thresholded, its 8-connected super-level components ("contours")
//! are measured by area `A_c`, cumulative intensity `I_c` and mean intensity
//! `M_c`, and three rules reject maps whose contour statistics leave the tumor
//! location ambiguous:
//!
//! 1. `I_max < a1 * I_2nd` and the `I_max` contour is not the brightest on average.
//! 2. `I_max < a2 * I_2nd` and its mean intensity plus `a3` is still below `M_max`.
//! 3. `M_max > a4` and the brightest-on-average contour is not the `I_max` contour.
//!
//! Only the saliency channel is consulted; ground truth never enters the
//! decision.

use std::cmp::Ordering;
use std::fmt;

use log::warn;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;

#[derive(Debug, Error, PartialEq)]
#[error("invalid confidence parameters: {0}")]
pub struct InvalidParams(String);

/// Binarization level and rule constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    pub threshold: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        ConfidenceParams {
            threshold: 0.3,
            a1: 2.0,
            a2: 3.0,
            a3: 0.2,
            a4: 0.55,
        }
    }
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<(), InvalidParams> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.threshold) {
            return Err(InvalidParams(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        if !(self.a1 > 1.0) {
            return Err(InvalidParams(format!("a1 = {} must exceed 1", self.a1)));
        }
        if !(self.a2 > self.a1) {
            return Err(InvalidParams(format!("a2 = {} must exceed a1 = {}", self.a2, self.a1)));
        }
        if !open_unit(self.a3) {
            return Err(InvalidParams(format!("a3 = {} must lie in (0, 1)", self.a3)));
        }
        // a4 = 0 is accepted so that rule 3 can be made to fire on any
        // multi-contour map whose argmaxes disagree.
        if !(self.a4 >= 0.0 && self.a4 < 1.0) {
            return Err(InvalidParams(format!("a4 = {} must lie in [0, 1)", self.a4)));
        }
        Ok(())
    }
}

/// Statistics of one contour, detached from its pixel list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourSummary {
    pub area: usize,
    pub cum_intensity: f64,
    pub mean_intensity: f64,
    /// First pixel of the component in raster order.
    pub origin: (usize, usize),
}

impl ContourSummary {
    /// Builds a summary from `(I_c, M_c)`; used for hand-constructed decision
    /// tables. The area is derived as `I_c / M_c` rounded.
    pub fn from_stats(cum_intensity: f64, mean_intensity: f64, origin: (usize, usize)) -> Self {
        ContourSummary {
            area: (cum_intensity / mean_intensity).round().max(1.0) as usize,
            cum_intensity,
            mean_intensity,
            origin,
        }
    }
}

/// A connected component of `{p : saliency(p) > threshold}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyContour {
    /// Member pixels as `(row, col)`, in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    pub cum_intensity: f64,
    pub mean_intensity: f64,
}

impl SaliencyContour {
    pub fn origin(&self) -> (usize, usize) {
        self.pixels[0]
    }

    pub fn summary(&self) -> ContourSummary {
        ContourSummary {
            area: self.area,
            cum_intensity: self.cum_intensity,
            mean_intensity: self.mean_intensity,
            origin: self.origin(),
        }
    }
}

/// Canonical contour order: descending `I_c`, then descending `M_c`, then
/// smallest origin.
fn by_intensity(a: &ContourSummary, b: &ContourSummary) -> Ordering {
    b.cum_intensity
        .total_cmp(&a.cum_intensity)
        .then(b.mean_intensity.total_cmp(&a.mean_intensity))
        .then(a.origin.cmp(&b.origin))
}

/// Order used to pick the contour with the highest mean intensity.
fn by_mean(a: &ContourSummary, b: &ContourSummary) -> Ordering {
    b.mean_intensity
        .total_cmp(&a.mean_intensity)
        .then(b.cum_intensity.total_cmp(&a.cum_intensity))
        .then(a.origin.cmp(&b.origin))
}

/// 8-connected components of the strict super-level set, sorted by
/// descending cumulative intensity (ties: descending mean, then origin).
pub fn extract_contours(saliency: ArrayView2<'_, f32>, threshold: f64) -> Vec<SaliencyContour> {
    let (h, w) = saliency.dim();
    // compare in the map's precision so a stored 0.3 is not above 0.3
    let threshold = threshold as f32;
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut contours = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if seen[(r, c)] || saliency[(r, c)] <= threshold {
                continue;
            }
            seen[(r, c)] = true;
            stack.push((r, c));
            let mut pixels = Vec::new();
            while let Some((y, x)) = stack.pop() {
                pixels.push((y, x));
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if !seen[(ny, nx)] && saliency[(ny, nx)] > threshold {
                            seen[(ny, nx)] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            pixels.sort_unstable();
            let cum_intensity: f64 = pixels.iter().map(|&p| f64::from(saliency[p])).sum();
            let area = pixels.len();
            contours.push(SaliencyContour {
                pixels,
                area,
                cum_intensity,
                mean_intensity: cum_intensity / area as f64,
            });
        }
    }
    contours.sort_by(|a, b| by_intensity(&a.summary(), &b.summary()));
    contours
}

/// Outcome of the three-rule test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub rejected: bool,
    /// 1, 2 or 3 when rejected.
    pub fired_rule: Option<u8>,
}

impl Decision {
    const KEEP: Decision = Decision {
        rejected: false,
        fired_rule: None,
    };

    fn reject(rule: u8) -> Self {
        Decision {
            rejected: true,
            fired_rule: Some(rule),
        }
    }
}

/// Global statistics the rules are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleStats {
    pub n_contours: usize,
    pub i_max: f64,
    pub i_second: f64,
    pub m_of_i_max: f64,
    pub m_max: f64,
    /// Whether the highest-`M` contour is a different contour from the
    /// highest-`I` one.
    pub argmax_differs: bool,
}

impl RuleStats {
    /// `None` for an empty contour list.
    pub fn from_contours(contours: &[ContourSummary]) -> Option<Self> {
        let mut sorted = contours.to_vec();
        sorted.sort_by(by_intensity);
        let top = *sorted.first()?;
        let (m_idx, brightest) = sorted
            .iter()
            .enumerate()
            .min_by(|a, b| by_mean(a.1, b.1))
            .expect("non-empty");
        Some(RuleStats {
            n_contours: sorted.len(),
            i_max: top.cum_intensity,
            i_second: sorted.get(1).map_or(0.0, |c| c.cum_intensity),
            m_of_i_max: top.mean_intensity,
            m_max: brightest.mean_intensity,
            argmax_differs: m_idx != 0,
        })
    }
}

/// Applies the rules in order; the first that holds is reported. Fewer than
/// two contours never trigger a rule.
pub fn confidence_decision(contours: &[ContourSummary], p: &ConfidenceParams) -> Decision {
    if contours.len() < 2 {
        return Decision::KEEP;
    }
    let s = RuleStats::from_contours(contours).expect("at least two contours");
    if s.i_max < p.a1 * s.i_second && s.m_of_i_max < s.m_max {
        Decision::reject(1)
    } else if s.i_max < p.a2 * s.i_second && s.m_of_i_max + p.a3 < s.m_max {
        Decision::reject(2)
    } else if s.m_max > p.a4 && s.argmax_differs {
        Decision::reject(3)
    } else {
        Decision::KEEP
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub id: String,
    pub contours: Vec<ContourSummary>,
    pub rejected: bool,
    pub fired_rule: Option<u8>,
}

impl ConfidenceReport {
    pub fn stats(&self) -> Option<RuleStats> {
        RuleStats::from_contours(&self.contours)
    }
}

impl fmt::Display for ConfidenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fired_rule {
            Some(rule) => write!(f, "{}: rejected by rule {rule} ({} contours)", self.id, self.contours.len()),
            None => write!(f, "{}: kept ({} contours)", self.id, self.contours.len()),
        }
    }
}

pub fn assess(id: &str, saliency: ArrayView2<'_, f32>, p: &ConfidenceParams) -> ConfidenceReport {
    let contours: Vec<ContourSummary> = extract_contours(saliency, p.threshold)
        .iter()
        .map(SaliencyContour::summary)
        .collect();
    let decision = confidence_decision(&contours, p);
    ConfidenceReport {
        id: id.to_string(),
        contours,
        rejected: decision.rejected,
        fired_rule: decision.fired_rule,
    }
}

/// Splits `samples` into kept and rejected by saliency confidence. Reports are
/// returned for every input sample, in input order.
pub fn filter_dataset(samples: Vec<Sample>, p: &ConfidenceParams) -> (Vec<Sample>, Vec<ConfidenceReport>) {
    let mut kept = Vec::with_capacity(samples.len());
    let mut reports = Vec::with_capacity(samples.len());
    for sample in samples {
        let report = assess(&sample.id, sample.saliency.view(), p);
        if !report.rejected {
            kept.push(sample);
        }
        reports.push(report);
    }
    (kept, reports)
}

/// A saliency map reduced to its single highest-`I_c` contour.
#[derive(Debug, Clone, PartialEq)]
pub struct TopContour {
    pub map: Array2<f32>,
    /// Set when the input had no pixel above threshold; `map` is then all zero.
    pub empty: bool,
}

/// Keeps the saliency values of the contour with the largest cumulative
/// intensity and zeroes every other pixel.
pub fn reduce_to_top_contour(saliency: ArrayView2<'_, f32>, p: &ConfidenceParams) -> TopContour {
    let mut map = Array2::<f32>::zeros(saliency.dim());
    let contours = extract_contours(saliency, p.threshold);
    match contours.first() {
        Some(top) => {
            for &px in &top.pixels {
                map[px] = saliency[px];
            }
            TopContour { map, empty: false }
        }
        None => {
            warn!("saliency map has no contour above {}; using an all-zero map", p.threshold);
            TopContour { map, empty: true }
        }
    }
}
