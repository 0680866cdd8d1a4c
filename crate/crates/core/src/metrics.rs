//! Pixel-level segmentation scores.
//!
//! Probability maps are binarized with a `>=` threshold, compared against a
//! binary ground truth (optionally restricted to a field-of-view mask), and
//! scored from the resulting confusion counts. Ratios with a zero
//! denominator are reported as `None`, never as a silent zero.

use std::io::Write;

use crate::datapipe::Plane;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_measure: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// 1 where `prob >= threshold` inside the mask, 0 elsewhere.
pub fn binarize(prob: &Plane, threshold: f64, mask: Option<&Plane>) -> Plane {
    let data = prob
        .data
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let inside = mask.is_none_or(|m| m.data[i] > 0.5);
            if inside && p >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Plane { height: prob.height, width: prob.width, data }
}

pub fn confusion(pred: &Plane, gt: &Plane, mask: Option<&Plane>) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() || mask.is_some_and(|m| m.dims() != gt.dims()) {
        return Err(Error::shape(
            "confusion",
            format!("prediction {:?}, ground truth {:?}, mask {:?}", pred.dims(), gt.dims(), mask.map(Plane::dims)),
        ));
    }
    let mut c = ConfusionCounts::default();
    for i in 0..gt.data.len() {
        if mask.is_some_and(|m| m.data[i] <= 0.5) {
            continue;
        }
        match (gt.data[i] > 0.5, pred.data[i] > 0.5) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn scores(c: &ConfusionCounts) -> ScoreSet {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f_measure = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * (p * s) / (s + p)),
        _ => None,
    };
    ScoreSet {
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity,
        specificity: ratio(c.tn, c.tn + c.fp),
        precision,
        recall: sensitivity,
        f_measure,
    }
}

/// One image to evaluate.
#[derive(Clone, Copy, Debug)]
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub prob: &'a Plane,
    pub gt: &'a Plane,
    pub mask: Option<&'a Plane>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub counts: ConfusionCounts,
    pub scores: ScoreSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    /// In input order; the F-measure column is the per-image curve.
    pub per_image: Vec<ImageScore>,
    /// Scores of the pooled counts.
    pub micro: ImageScore,
    /// Mean of the defined per-image values of each score.
    pub macro_avg: ScoreSet,
}

pub const MICRO_ID: &str = "__micro__";
pub const MACRO_ID: &str = "__macro__";

pub fn evaluate_set(items: &[EvalItem<'_>], threshold: f64) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::OutOfRange { value: threshold, range: "[0, 1]" });
    }
    let per_image = items
        .iter()
        .map(|it| {
            let pred = binarize(it.prob, threshold, it.mask);
            let counts = confusion(&pred, it.gt, it.mask)
                .map_err(|e| Error::Evaluation { id: it.id.to_string(), message: e.to_string() })?;
            Ok(ImageScore { id: it.id.to_string(), counts, scores: scores(&counts) })
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled: ConfusionCounts = per_image.iter().map(|s| s.counts).sum();
    let micro = ImageScore { id: MICRO_ID.to_string(), counts: pooled, scores: scores(&pooled) };
    let macro_avg = macro_average(per_image.iter().map(|s| &s.scores));
    Ok(EvalReport { threshold, per_image, micro, macro_avg })
}

fn macro_average<'a>(sets: impl Iterator<Item = &'a ScoreSet> + Clone) -> ScoreSet {
    let avg = |f: fn(&ScoreSet) -> Option<f64>| {
        let vals: Vec<f64> = sets.clone().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    ScoreSet {
        accuracy: avg(|s| s.accuracy),
        sensitivity: avg(|s| s.sensitivity),
        specificity: avg(|s| s.specificity),
        precision: avg(|s| s.precision),
        recall: avg(|s| s.recall),
        f_measure: avg(|s| s.f_measure),
    }
}

/// Thresholds 0.05, 0.10, …, 0.95.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

pub const CSV_HEADER: &str = "id,threshold,tp,tn,fp,fn,accuracy,sensitivity,specificity,precision,f_measure";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn score_row(id: &str, threshold: f64, counts: Option<&ConfusionCounts>, s: &ScoreSet) -> String {
    let counts = counts.map_or_else(|| ",,,".to_string(), |c| format!("{},{},{},{}", c.tp, c.tn, c.fp, c.fn_));
    format!(
        "{id},{threshold},{counts},{},{},{},{},{}",
        opt(s.accuracy),
        opt(s.sensitivity),
        opt(s.specificity),
        opt(s.precision),
        opt(s.f_measure)
    )
}

impl EvalReport {
    /// Per-image rows, then the micro row; the macro row carries no counts.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> =
            self.per_image.iter().map(|s| score_row(&s.id, self.threshold, Some(&s.counts), &s.scores)).collect();
        rows.push(score_row(MICRO_ID, self.threshold, Some(&self.micro.counts), &self.micro.scores));
        rows.push(score_row(MACRO_ID, self.threshold, None, &self.macro_avg));
        rows
    }
}

/// Writes the header followed by the rows of every report.
pub fn write_reports_csv<W: Write>(mut w: W, reports: &[EvalReport]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        for row in r.csv_rows() {
            writeln!(w, "{row}")?;
        }
    }
    w.flush()
}
