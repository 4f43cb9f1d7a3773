//! Deterministic synthetic OCT phantoms.
//!
//! Real annotated choroid data is rarely shareable, so the pipeline ships a
//! generator that fabricates B-scans with known layer geometry: smooth
//! non-crossing boundary curves partition each column into ordered bands,
//! each band gets a distinct mean intensity plus multiplicative speckle,
//! and the lower choroid boundary is blurred to mimic the fuzzy
//! choroid-sclera interface. Layer map, choroid mask and thickness are
//! derived from the same geometry, so every sample is self-consistent by
//! construction.
//!
//! Generation is a pure function of `(config, index)`: the per-sample RNG is
//! ChaCha8 keyed by a SplitMix64 mix of the dataset seed and the sample
//! index, which is stable across platforms and runs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    BScan, BoundaryCurve, ChoroidMask, LayerLabelMap, Sample, MIN_DIMENSION,
};
use crate::metrics::thickness_of;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid scan size {height}x{width}: height >= 16 and width >= 16 required")]
    TooSmall { height: usize, width: usize },
    #[error("{num_layers} bands of at least {min_band_thickness} px need {required} rows, image has {height}")]
    BandsDontFit {
        num_layers: usize,
        min_band_thickness: usize,
        required: usize,
        height: usize,
    },
    #[error("choroid thickness range [{0}, {1}] is empty or non-positive")]
    BadThicknessRange(f64, f64),
    #[error("choroid class {choroid_class} >= num_layers {num_layers}")]
    BadChoroidClass { choroid_class: u8, num_layers: usize },
    #[error("speckle_strength {0} outside [0, 1]")]
    BadSpeckle(f64),
    #[error("csi_blur_sigma {0} must be finite and >= 0")]
    BadBlurSigma(f64),
    #[error("num_layers must be at least 2, got {0}")]
    TooFewLayers(usize),
}

/// Geometry and texture knobs for the phantom generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_layers: usize,
    /// Which band id is the choroid; its mask and thickness become the
    /// regression/segmentation targets.
    pub choroid_class: u8,
    /// Moving-average window (in columns) applied to the boundary random
    /// walks; larger values give smoother surfaces.
    pub boundary_smoothness: usize,
    /// Every band keeps at least this many rows in every column.
    pub min_band_thickness: usize,
    /// Target mean choroid thickness is drawn uniformly from this range
    /// (pixels).
    pub choroid_thickness_range: (f64, f64),
    /// Vertical Gaussian blur applied around the lower choroid boundary to
    /// soften the choroid-sclera interface. Zero disables it.
    pub csi_blur_sigma: f64,
    /// Amplitude of multiplicative speckle noise, in `[0, 1]`.
    pub speckle_strength: f64,
}

impl Default for PhantomConfig {
    /// Desk-scale default: quick to generate and train on.
    fn default() -> Self {
        Self {
            seed: 0,
            height: 128,
            width: 128,
            num_layers: 12,
            choroid_class: 9,
            boundary_smoothness: 25,
            min_band_thickness: 3,
            choroid_thickness_range: (20.0, 50.0),
            csi_blur_sigma: 1.5,
            speckle_strength: 0.15,
        }
    }
}

impl PhantomConfig {
    /// Full-scale preset: 512 A-lines of 992 pixels each, with geometry
    /// scaled up to match.
    pub fn paper_scale() -> Self {
        Self {
            height: 992,
            width: 512,
            boundary_smoothness: 80,
            min_band_thickness: 16,
            choroid_thickness_range: (150.0, 350.0),
            csi_blur_sigma: 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.height < MIN_DIMENSION || self.width < MIN_DIMENSION {
            return Err(PhantomError::TooSmall {
                height: self.height,
                width: self.width,
            });
        }
        if self.num_layers < 2 {
            return Err(PhantomError::TooFewLayers(self.num_layers));
        }
        let required = self.num_layers * self.min_band_thickness.max(1);
        if required > self.height {
            return Err(PhantomError::BandsDontFit {
                num_layers: self.num_layers,
                min_band_thickness: self.min_band_thickness.max(1),
                required,
                height: self.height,
            });
        }
        let (lo, hi) = self.choroid_thickness_range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(PhantomError::BadThicknessRange(lo, hi));
        }
        if usize::from(self.choroid_class) >= self.num_layers {
            return Err(PhantomError::BadChoroidClass {
                choroid_class: self.choroid_class,
                num_layers: self.num_layers,
            });
        }
        if !(0.0..=1.0).contains(&self.speckle_strength) {
            return Err(PhantomError::BadSpeckle(self.speckle_strength));
        }
        if !self.csi_blur_sigma.is_finite() || self.csi_blur_sigma < 0.0 {
            return Err(PhantomError::BadBlurSigma(self.csi_blur_sigma));
        }
        Ok(())
    }
}

/// A generated sample plus the continuous choroid boundary curves it was
/// rasterized from, for boundary-accuracy tests.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: Sample,
    /// Row of the top-most choroid pixel per column, fractional.
    pub upper_choroid: BoundaryCurve,
    /// Row of the bottom-most choroid pixel per column, fractional.
    pub lower_choroid: BoundaryCurve,
}

/// SplitMix64; used to derive independent per-sample streams from one seed.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(1))))
}

/// Cumulative random walk smoothed with a centered moving average, then
/// normalized to zero mean and max amplitude 1.
fn smooth_noise_curve(rng: &mut ChaCha8Rng, width: usize, window: usize) -> Vec<f64> {
    let mut walk = Vec::with_capacity(width);
    let mut acc = 0.0;
    for _ in 0..width {
        acc += rng.random_range(-1.0..1.0);
        walk.push(acc);
    }
    let window = window.max(1);
    let half = window / 2;
    let mut smooth = vec![0.0; width];
    for j in 0..width {
        let lo = j.saturating_sub(half);
        let hi = (j + half + 1).min(width);
        smooth[j] = walk[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
    }
    let mean = smooth.iter().sum::<f64>() / width as f64;
    for v in &mut smooth {
        *v -= mean;
    }
    let amp = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for v in &mut smooth {
        *v /= amp;
    }
    smooth
}

/// Generates one phantom sample. Pure in `(config, index)`: calling it twice
/// yields bitwise-identical output.
pub fn generate_phantom(config: &PhantomConfig, index: u64) -> Result<Sample, PhantomError> {
    Ok(generate_phantom_detailed(config, index)?.sample)
}

/// As [`generate_phantom`], additionally returning the continuous boundary
/// curves of the choroid band.
pub fn generate_phantom_detailed(
    config: &PhantomConfig,
    index: u64,
) -> Result<GeneratedSample, PhantomError> {
    config.validate()?;
    let mut rng = sample_rng(config.seed, index);
    let (h, w, layers) = (config.height, config.width, config.num_layers);
    let min_band = config.min_band_thickness.max(1) as f64;
    let excess_total = h as f64 - layers as f64 * min_band;

    // Per-band excess-thickness shares. The choroid band's share targets a
    // thickness drawn from the configured range; the rest of the excess is
    // split among the other bands by random weights.
    let (t_lo, t_hi) = config.choroid_thickness_range;
    let target = rng.random_range(t_lo..=t_hi);
    let choroid = usize::from(config.choroid_class);
    let choroid_share = (target - min_band).clamp(0.0, 0.9 * excess_total);
    let mut weights: Vec<f64> = (0..layers)
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    weights[choroid] = 0.0;
    let weight_sum: f64 = weights.iter().sum();
    let other_excess = excess_total - choroid_share;
    let mut shares: Vec<f64> = weights
        .iter()
        .map(|&w| other_excess * w / weight_sum)
        .collect();
    shares[choroid] = choroid_share;

    // Column-wise band thicknesses: share modulated by a smooth noise curve,
    // rescaled per column so each column sums to exactly the image height.
    // Every band keeps its minimum, so boundaries never cross.
    let curves: Vec<Vec<f64>> = (0..layers)
        .map(|_| smooth_noise_curve(&mut rng, w, config.boundary_smoothness))
        .collect();
    let mut thickness = Array2::<f64>::zeros((layers, w));
    for j in 0..w {
        let mut excess_sum = 0.0;
        for k in 0..layers {
            let e = shares[k] * (1.0 + 0.35 * curves[k][j]);
            thickness[[k, j]] = e;
            excess_sum += e;
        }
        let scale = if excess_sum > 1e-12 {
            excess_total / excess_sum
        } else {
            0.0
        };
        for k in 0..layers {
            thickness[[k, j]] = min_band + thickness[[k, j]] * scale;
        }
    }

    // Boundaries: band k occupies rows [bounds[k-1], bounds[k]).
    let mut bounds = Array2::<f64>::zeros((layers, w));
    for j in 0..w {
        let mut acc = 0.0;
        for k in 0..layers {
            acc += thickness[[k, j]];
            bounds[[k, j]] = acc;
        }
    }

    // Rasterize by pixel centers: row r belongs to the band whose interval
    // contains r + 0.5.
    let mut labels = Array2::<u8>::zeros((h, w));
    for j in 0..w {
        let mut band = 0usize;
        for r in 0..h {
            let center = r as f64 + 0.5;
            while band + 1 < layers && center >= bounds[[band, j]] {
                band += 1;
            }
            labels[[r, j]] = band as u8;
        }
    }
    let mask = labels.mapv(|l| u8::from(usize::from(l) == choroid));

    // Distinct band intensities: an evenly spaced ladder, shuffled, with a
    // small jitter.
    let mut levels: Vec<f64> = (0..layers)
        .map(|k| 0.12 + 0.78 * k as f64 / (layers - 1) as f64)
        .collect();
    for i in (1..levels.len()).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    let levels: Vec<f64> = levels
        .into_iter()
        .map(|v| v + rng.random_range(-0.015..0.015))
        .collect();

    let mut image = Array2::<f64>::zeros((h, w));
    for j in 0..w {
        for r in 0..h {
            let mut v = levels[usize::from(labels[[r, j]])];
            if config.speckle_strength > 0.0 {
                v *= 1.0 + config.speckle_strength * rng.random_range(-1.0..1.0);
            }
            image[[r, j]] = v.clamp(0.0, 1.0);
        }
    }

    // Soften the choroid-sclera interface: blend towards a vertically
    // blurred copy with weight peaking on the lower choroid boundary.
    let sigma = config.csi_blur_sigma;
    if sigma > 0.0 {
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let kernel_sum: f64 = kernel.iter().sum();
        let blend_sigma = 2.0 * sigma.max(1.0);
        let blurred_col = |col: usize, r: usize| -> f64 {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = (r as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * image[[rr, col]];
            }
            acc / kernel_sum
        };
        let mut softened = image.clone();
        for j in 0..w {
            let csi = bounds[[choroid, j]];
            let r_lo = ((csi - 4.0 * blend_sigma).floor().max(0.0)) as usize;
            let r_hi = ((csi + 4.0 * blend_sigma).ceil() as usize).min(h);
            for r in r_lo..r_hi {
                let d = r as f64 + 0.5 - csi;
                let a = (-d * d / (2.0 * blend_sigma * blend_sigma)).exp();
                softened[[r, j]] = (1.0 - a) * image[[r, j]] + a * blurred_col(j, r);
            }
        }
        image = softened;
    }

    // Continuous curves in last/first-contained-row convention, matching
    // what boundary extraction reads off the rasterized mask to 0.5 px.
    let upper_rows: Vec<Option<f64>> = (0..w)
        .map(|j| {
            let top = if choroid == 0 { 0.0 } else { bounds[[choroid - 1, j]] };
            Some(top.clamp(0.0, (h - 1) as f64))
        })
        .collect();
    let lower_rows: Vec<Option<f64>> = (0..w)
        .map(|j| Some((bounds[[choroid, j]] - 1.0).clamp(0.0, (h - 1) as f64)))
        .collect();

    let choroid_mask = ChoroidMask::new(mask).expect("mask is binary by construction");
    let thickness = thickness_of(&choroid_mask);
    let sample = Sample {
        id: format!("phantom-{index:05}"),
        image: BScan::new(image).expect("intensities clamped to [0,1]"),
        layers: LayerLabelMap::new(labels, layers as u8)
            .expect("labels bounded by construction"),
        choroid: choroid_mask,
        thickness,
        choroid_class: config.choroid_class,
    };
    Ok(GeneratedSample {
        sample,
        upper_choroid: BoundaryCurve::new(h, upper_rows).expect("curve in range"),
        lower_choroid: BoundaryCurve::new(h, lower_rows).expect("curve in range"),
    })
}
