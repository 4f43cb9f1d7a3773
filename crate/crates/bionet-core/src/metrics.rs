//! Evaluation metrics for choroid segmentation.
//!
//! Region overlap (Dice, IoU), whole-image accuracy and sensitivity, the
//! average unsigned surface detection error (AUSDE) on the extracted upper
//! and lower choroid boundaries, and the thickness biomarker extractor.
//! Everything here is a pure function over masks; dataset-level evaluation
//! macro-averages per-sample values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BoundaryCurve, ChoroidMask, Thickness};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    MaskDimensionMismatch(usize, usize, usize, usize),
    #[error("boundary curves differ in width: {0} vs {1}")]
    CurveWidthMismatch(usize, usize),
    #[error("boundary curves live in different image heights: {0} vs {1}")]
    CurveHeightMismatch(usize, usize),
    #[error("prediction/ground-truth counts differ: {0} vs {1}")]
    SampleCountMismatch(usize, usize),
}

fn check_dims(a: &ChoroidMask, b: &ChoroidMask) -> Result<(), MetricsError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricsError::MaskDimensionMismatch(
            a.height, a.width, b.height, b.width,
        ));
    }
    Ok(())
}

fn confusion(pred: &ChoroidMask, gt: &ChoroidMask) -> (u64, u64, u64, u64) {
    let mut tp = 0u64;
    let mut tn = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &g) in pred.mask.iter().zip(gt.mask.iter()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fn_ += 1,
        }
    }
    (tp, tn, fp, fn_)
}

/// Dice index `2|P∩G| / (|P| + |G|)`.
///
/// Two empty masks agree vacuously and score 1.0.
pub fn dice(pred: &ChoroidMask, gt: &ChoroidMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (tp, _, fp, fn_) = confusion(pred, gt);
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Intersection over union `|P∩G| / |P∪G|`; empty/empty scores 1.0.
pub fn iou(pred: &ChoroidMask, gt: &ChoroidMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (tp, _, fp, fn_) = confusion(pred, gt);
    let union = tp + fp + fn_;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / union as f64)
}

/// Pixel accuracy `(TP + TN) / (H * W)` over the whole image.
pub fn accuracy(pred: &ChoroidMask, gt: &ChoroidMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (tp, tn, fp, fn_) = confusion(pred, gt);
    Ok((tp + tn) as f64 / (tp + tn + fp + fn_) as f64)
}

/// Sensitivity (recall) `TP / (TP + FN)`; an empty ground truth has nothing
/// to miss and scores 1.0.
pub fn sensitivity(pred: &ChoroidMask, gt: &ChoroidMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (tp, _, _, fn_) = confusion(pred, gt);
    if tp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / (tp + fn_) as f64)
}

/// Per-column first and last mask rows: the upper boundary (Bruch's
/// membrane) and the lower boundary (choroid-sclera interface). Columns
/// containing no mask pixel are marked absent in both curves.
pub fn extract_boundaries(mask: &ChoroidMask) -> (BoundaryCurve, BoundaryCurve) {
    let mut upper = Vec::with_capacity(mask.width);
    let mut lower = Vec::with_capacity(mask.width);
    for col in 0..mask.width {
        let mut first = None;
        let mut last = None;
        for row in 0..mask.height {
            if mask.mask[[row, col]] == 1 {
                if first.is_none() {
                    first = Some(row as f64);
                }
                last = Some(row as f64);
            }
        }
        upper.push(first);
        lower.push(last);
    }
    (
        BoundaryCurve {
            height: mask.height,
            rows: upper,
        },
        BoundaryCurve {
            height: mask.height,
            rows: lower,
        },
    )
}

/// Average unsigned surface detection error between two boundary curves,
/// in pixels.
///
/// Columns present in both curves contribute `|pred - gt|`. A column absent
/// in exactly one curve is a hallucinated or missed surface and contributes
/// a penalty of the full image height, so absence is never rewarded.
/// Columns absent in both are skipped; if every column is skipped the error
/// is undefined and `None` is returned.
pub fn ausde(
    pred: &BoundaryCurve,
    gt: &BoundaryCurve,
) -> Result<Option<f64>, MetricsError> {
    if pred.width() != gt.width() {
        return Err(MetricsError::CurveWidthMismatch(pred.width(), gt.width()));
    }
    if pred.height != gt.height {
        return Err(MetricsError::CurveHeightMismatch(pred.height, gt.height));
    }
    let penalty = gt.height as f64;
    let mut sum = 0.0;
    let mut count = 0u64;
    for (p, g) in pred.rows.iter().zip(gt.rows.iter()) {
        match (p, g) {
            (Some(p), Some(g)) => {
                sum += (p - g).abs();
                count += 1;
            }
            (None, None) => {}
            _ => {
                sum += penalty;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(sum / count as f64))
}

/// AUSDE of both extracted choroid boundaries plus their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AusdePair {
    pub upper: f64,
    pub lower: f64,
    pub mean: f64,
}

/// Extracts both boundaries from each mask and reports AUSDE per surface
/// and their mean. `None` only when both masks are entirely empty.
pub fn choroid_ausde(
    pred: &ChoroidMask,
    gt: &ChoroidMask,
) -> Result<Option<AusdePair>, MetricsError> {
    check_dims(pred, gt)?;
    let (pred_up, pred_lo) = extract_boundaries(pred);
    let (gt_up, gt_lo) = extract_boundaries(gt);
    let upper = ausde(&pred_up, &gt_up)?;
    let lower = ausde(&pred_lo, &gt_lo)?;
    Ok(match (upper, lower) {
        (Some(upper), Some(lower)) => Some(AusdePair {
            upper,
            lower,
            mean: 0.5 * (upper + lower),
        }),
        _ => None,
    })
}

/// Choroidal thickness of a mask: the mean, over columns containing at
/// least one mask pixel, of the column's mask-pixel count. An empty mask
/// has thickness 0.
///
/// For column-contiguous masks this equals `mean(lower - upper + 1)`, and
/// unlike the boundary form it stays well defined on ragged masks.
pub fn thickness_of(mask: &ChoroidMask) -> Thickness {
    let mut sum = 0u64;
    let mut cols = 0u64;
    for col in 0..mask.width {
        let count: u64 = (0..mask.height)
            .map(|row| u64::from(mask.mask[[row, col]]))
            .sum();
        if count > 0 {
            sum += count;
            cols += 1;
        }
    }
    if cols == 0 {
        return Thickness(0.0);
    }
    Thickness(sum as f64 / cols as f64)
}

/// Macro-averaged metrics over a test split.
///
/// AUSDE is averaged over the samples where it is defined;
/// `n_ausde_undefined` counts the excluded ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub iou: f64,
    pub ausde_upper: Option<f64>,
    pub ausde_lower: Option<f64>,
    pub ausde_mean: Option<f64>,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub n_samples: usize,
    pub n_ausde_undefined: usize,
}

impl MetricsReport {
    /// Column header matching the report table: overlap and accuracy in
    /// percent, AUSDE in pixels.
    pub fn table_header() -> &'static str {
        "IOU,AUSDE,DI,Acc,Sen"
    }

    /// One comma-separated row in `table_header` order.
    pub fn table_row(&self) -> String {
        let ausde = match self.ausde_mean {
            Some(v) => format!("{v:.2}"),
            None => "n/a".to_string(),
        };
        format!(
            "{:.2},{ausde},{:.2},{:.2},{:.2}",
            self.iou * 100.0,
            self.dice * 100.0,
            self.accuracy * 100.0,
            self.sensitivity * 100.0
        )
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples evaluated : {}", self.n_samples)?;
        writeln!(f, "dice              : {:.4}", self.dice)?;
        writeln!(f, "iou               : {:.4}", self.iou)?;
        match (self.ausde_upper, self.ausde_lower, self.ausde_mean) {
            (Some(u), Some(l), Some(m)) => {
                writeln!(f, "ausde upper (px)  : {u:.4}")?;
                writeln!(f, "ausde lower (px)  : {l:.4}")?;
                writeln!(f, "ausde mean  (px)  : {m:.4}")?;
            }
            _ => writeln!(f, "ausde             : undefined")?,
        }
        writeln!(f, "accuracy          : {:.4}", self.accuracy)?;
        writeln!(f, "sensitivity       : {:.4}", self.sensitivity)?;
        write!(f, "ausde undefined   : {}", self.n_ausde_undefined)
    }
}

/// Evaluates a prediction sequence against ground truth, macro-averaging
/// per-sample metrics uniformly.
pub fn evaluate_dataset(
    predictions: &[ChoroidMask],
    gts: &[ChoroidMask],
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != gts.len() {
        return Err(MetricsError::SampleCountMismatch(
            predictions.len(),
            gts.len(),
        ));
    }
    let n = predictions.len();
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut ausde_sums = (0.0, 0.0, 0.0);
    let mut ausde_defined = 0usize;
    for (pred, gt) in predictions.iter().zip(gts.iter()) {
        sums.0 += dice(pred, gt)?;
        sums.1 += iou(pred, gt)?;
        sums.2 += accuracy(pred, gt)?;
        sums.3 += sensitivity(pred, gt)?;
        if let Some(pair) = choroid_ausde(pred, gt)? {
            ausde_sums.0 += pair.upper;
            ausde_sums.1 += pair.lower;
            ausde_sums.2 += pair.mean;
            ausde_defined += 1;
        }
    }
    let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    let ausde_avg = |s: f64| {
        (ausde_defined > 0).then(|| s / ausde_defined as f64)
    };
    Ok(MetricsReport {
        dice: avg(sums.0),
        iou: avg(sums.1),
        ausde_upper: ausde_avg(ausde_sums.0),
        ausde_lower: ausde_avg(ausde_sums.1),
        ausde_mean: ausde_avg(ausde_sums.2),
        accuracy: avg(sums.2),
        sensitivity: avg(sums.3),
        n_samples: n,
        n_ausde_undefined: n - ausde_defined,
    })
}
