//! Core value types shared by every stage of the pipeline.
//!
//! A [`Sample`] bundles one OCT B-scan with its 12-layer label map, the
//! binary choroid mask, and the choroidal-thickness biomarker. Constructors
//! validate hard invariants and fail loudly; [`validate_sample`] re-checks
//! the whole set on an already-built sample and reports violations as plain
//! strings, so readers and tests can treat inconsistency as data rather than
//! as a panic.
//!
//! All types are immutable values after construction and can be shared
//! freely across threads.

use ndarray::Array2;
use thiserror::Error;

/// Smallest height/width the segmentation cascade supports (four 2x
/// downsampling levels need at least 16 pixels per axis).
pub const MIN_DIMENSION: usize = 16;

/// Tolerance for the stored-thickness consistency check, in pixels.
pub const THICKNESS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid scan size {height}x{width}: height >= 16 and width >= 16 required")]
    TooSmall { height: usize, width: usize },
    #[error("intensity at ({row}, {col}) is {value}, expected a finite value in [0, 1]")]
    IntensityOutOfRange { row: usize, col: usize, value: f64 },
    #[error("label {label} at ({row}, {col}) exceeds num_classes {num_classes}")]
    LabelOutOfRange {
        row: usize,
        col: usize,
        label: u8,
        num_classes: u8,
    },
    #[error("mask value {value} at ({row}, {col}) is not binary (0 or 1)")]
    MaskNotBinary { row: usize, col: usize, value: u8 },
    #[error("boundary row {value} at column {col} outside [0, {max}]")]
    BoundaryOutOfRange { col: usize, value: f64, max: f64 },
    #[error("thickness {0} must be finite and non-negative")]
    InvalidThickness(f64),
    #[error("num_classes must be at least 2, got {0}")]
    TooFewClasses(u8),
    #[error("dimension mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    DimensionMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
}

/// A single grayscale cross-sectional OCT image.
///
/// Rows are depth (one row per pixel along an A-line), columns are A-lines.
/// Intensities are normalized to `[0, 1]` at load time so downstream loss
/// magnitudes do not depend on acquisition scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct BScan {
    pub height: usize,
    pub width: usize,
    /// `height x width` intensity grid, each value finite and in `[0, 1]`.
    pub pixels: Array2<f64>,
}

impl BScan {
    pub fn new(pixels: Array2<f64>) -> Result<Self, DomainError> {
        let (height, width) = pixels.dim();
        if height < MIN_DIMENSION || width < MIN_DIMENSION {
            return Err(DomainError::TooSmall { height, width });
        }
        for ((row, col), &value) in pixels.indexed_iter() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(DomainError::IntensityOutOfRange { row, col, value });
            }
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

/// Per-pixel class map over `num_classes` mutually exclusive retinal layers,
/// ordered top to bottom. The classes are treated as opaque bands; which
/// anatomical structure each id denotes is a dataset convention.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Array2<u8>,
    pub num_classes: u8,
}

impl LayerLabelMap {
    pub fn new(labels: Array2<u8>, num_classes: u8) -> Result<Self, DomainError> {
        if num_classes < 2 {
            return Err(DomainError::TooFewClasses(num_classes));
        }
        let (height, width) = labels.dim();
        for ((row, col), &label) in labels.indexed_iter() {
            if label >= num_classes {
                return Err(DomainError::LabelOutOfRange {
                    row,
                    col,
                    label,
                    num_classes,
                });
            }
        }
        Ok(Self {
            height,
            width,
            labels,
            num_classes,
        })
    }
}

/// Per-pixel binary map of the choroid region (1 inside, 0 outside).
#[derive(Debug, Clone, PartialEq)]
pub struct ChoroidMask {
    pub height: usize,
    pub width: usize,
    pub mask: Array2<u8>,
}

impl ChoroidMask {
    pub fn new(mask: Array2<u8>) -> Result<Self, DomainError> {
        let (height, width) = mask.dim();
        for ((row, col), &value) in mask.indexed_iter() {
            if value > 1 {
                return Err(DomainError::MaskNotBinary { row, col, value });
            }
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    /// Number of mask pixels set to 1.
    pub fn area(&self) -> u64 {
        self.mask.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&v| v == 0)
    }
}

/// Per-column row coordinate of a layer surface, in fractional pixels.
///
/// Columns where the surface does not exist carry an explicit `None` rather
/// than a sentinel row, so absence survives arithmetic untouched. Fractional
/// coordinates keep sub-pixel boundary errors expressible; rasterization to
/// a mask rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCurve {
    /// Height of the image the curve lives in; present rows are in
    /// `[0, height - 1]`.
    pub height: usize,
    pub rows: Vec<Option<f64>>,
}

impl BoundaryCurve {
    pub fn new(height: usize, rows: Vec<Option<f64>>) -> Result<Self, DomainError> {
        let max = (height - 1) as f64;
        for (col, row) in rows.iter().enumerate() {
            if let Some(value) = *row {
                if !value.is_finite() || value < 0.0 || value > max {
                    return Err(DomainError::BoundaryOutOfRange {
                        col,
                        value,
                        max,
                    });
                }
            }
        }
        Ok(Self { height, rows })
    }

    pub fn width(&self) -> usize {
        self.rows.len()
    }
}

/// Mean vertical extent of the choroid, in pixels. The scalar biomarker the
/// regression network predicts and the regularizer compares against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thickness(pub f64);

impl Thickness {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if !value.is_finite() || value < 0.0 {
            return Err(DomainError::InvalidThickness(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// One fully annotated B-scan: image, layer map, choroid mask, thickness.
///
/// `choroid_class` names which layer id the mask corresponds to; the phantom
/// generator defaults to class 9 but real datasets may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: BScan,
    pub layers: LayerLabelMap,
    pub choroid: ChoroidMask,
    pub thickness: Thickness,
    pub choroid_class: u8,
}

/// Checks every cross-field invariant of a sample and returns one
/// description per violation. An empty list means the sample is consistent.
///
/// Violations are data, not failures: a reader may want to skip, repair or
/// report a bad sample rather than abort.
pub fn validate_sample(sample: &Sample) -> Vec<String> {
    let mut violations = Vec::new();
    let (h, w) = (sample.image.height, sample.image.width);

    if h < MIN_DIMENSION || w < MIN_DIMENSION {
        violations.push(format!(
            "image size {h}x{w} below minimum {MIN_DIMENSION}x{MIN_DIMENSION}"
        ));
    }
    for ((row, col), &v) in sample.image.pixels.indexed_iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            violations.push(format!(
                "intensity {v} at ({row}, {col}) outside [0, 1]"
            ));
            break;
        }
    }

    if (sample.layers.height, sample.layers.width) != (h, w) {
        violations.push(format!(
            "layer map is {}x{}, image is {h}x{w}",
            sample.layers.height, sample.layers.width
        ));
    }
    if let Some(((row, col), &label)) = sample
        .layers
        .labels
        .indexed_iter()
        .find(|(_, &l)| l >= sample.layers.num_classes)
    {
        violations.push(format!(
            "label {label} at ({row}, {col}) >= num_classes {}",
            sample.layers.num_classes
        ));
    }

    if (sample.choroid.height, sample.choroid.width) != (h, w) {
        violations.push(format!(
            "choroid mask is {}x{}, image is {h}x{w}",
            sample.choroid.height, sample.choroid.width
        ));
    }
    if let Some(((row, col), &v)) = sample
        .choroid
        .mask
        .indexed_iter()
        .find(|(_, &v)| v > 1)
    {
        violations.push(format!(
            "mask value {v} at ({row}, {col}) is not binary"
        ));
    }

    if sample.choroid_class >= sample.layers.num_classes {
        violations.push(format!(
            "choroid class {} >= num_classes {}",
            sample.choroid_class, sample.layers.num_classes
        ));
    }

    // Mask must be exactly the pixel set labelled with the choroid class.
    if (sample.layers.height, sample.layers.width) == (h, w)
        && (sample.choroid.height, sample.choroid.width) == (h, w)
    {
        let mismatch = sample
            .layers
            .labels
            .iter()
            .zip(sample.choroid.mask.iter())
            .any(|(&label, &m)| (label == sample.choroid_class) != (m == 1));
        if mismatch {
            violations.push(format!(
                "choroid mask differs from (labels == class {})",
                sample.choroid_class
            ));
        }
    }

    let t = sample.thickness.0;
    if !t.is_finite() || t < 0.0 {
        violations.push(format!("thickness {t} not finite and non-negative"));
    } else {
        let recomputed = crate::metrics::thickness_of(&sample.choroid).0;
        if (recomputed - t).abs() > THICKNESS_TOLERANCE {
            violations.push(format!(
                "stored thickness {t} differs from mask-derived {recomputed} by more than {THICKNESS_TOLERANCE}"
            ));
        }
    }

    violations
}
