//! Training losses and their analytic gradients.
//!
//! The biomarker regression and regularization terms are mean absolute
//! errors; the global module trains with categorical cross entropy over the
//! layer classes and the local module with per-pixel binary cross entropy.
//! Every loss ships the gradient w.r.t. its predictions so the whole
//! pipeline is checkable against central finite differences.
//!
//! Probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` inside the
//! logs; within the clamped region the gradient is exactly zero.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ChoroidMask, LayerLabelMap};
use crate::nn::{BioRegressor, NetworkError};

/// Numerical-stability clamp applied to probabilities inside logarithms.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch sizes differ: {0} vs {1}")]
    BatchSizeMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("prediction shape {got:?} does not match target shape {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("probabilities at pixel ({0}, {1}) sum to {2}, expected 1 within 1e-5")]
    NotNormalized(usize, usize, f64),
    #[error("probability {2} at ({0}, {1}) outside [0, 1]")]
    NotAProbability(usize, usize, f64),
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(u8, u8),
    #[error("biomarker network must be frozen before it can regularize")]
    NotFrozen,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Weights of the combined objective. The biomarker term is two orders of
/// magnitude down by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_multilayers: f64,
    pub w_choroid: f64,
    pub w_bio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_multilayers: 1.0,
            w_choroid: 1.0,
            w_bio: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, w) in [
            ("w_multilayers", self.w_multilayers),
            ("w_choroid", self.w_choroid),
            ("w_bio", self.w_bio),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(LossError::NonFinite(match name {
                    "w_multilayers" => "w_multilayers",
                    "w_choroid" => "w_choroid",
                    _ => "w_bio",
                }));
            }
        }
        Ok(())
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

fn in_clamp_range(p: f64) -> bool {
    (CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&p)
}

/// Mean absolute error over a batch of thickness predictions.
pub fn bio_mae_loss(
    pred: ArrayView1<f64>,
    target: ArrayView1<f64>,
) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::BatchSizeMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("predictions"));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("targets"));
    }
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// [`bio_mae_loss`] plus its gradient w.r.t. the predictions
/// (`sign(p - t) / N`, subgradient 0 at equality).
pub fn bio_mae_loss_grad(
    pred: ArrayView1<f64>,
    target: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>), LossError> {
    let loss = bio_mae_loss(pred, target)?;
    let n = pred.len() as f64;
    let grad = Array1::from_shape_fn(pred.len(), |i| {
        let d = pred[i] - target[i];
        if d == 0.0 {
            0.0
        } else {
            d.signum() / n
        }
    });
    Ok((loss, grad))
}

/// How the multi-layer segmentation loss treats the class dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultilayerLossKind {
    /// Per-pixel categorical cross entropy over the normalized class
    /// distribution (the layers are mutually exclusive).
    Categorical,
    /// Sum over classes of per-channel binary cross entropy against the
    /// one-hot target, for fidelity experiments.
    PerChannelBinary,
}

fn check_multilayer_shapes(
    pred_probs: &ArrayView3<f64>,
    gt: &LayerLabelMap,
) -> Result<(), LossError> {
    let (l, h, w) = pred_probs.dim();
    if l != usize::from(gt.num_classes) || h != gt.height || w != gt.width {
        return Err(LossError::ShapeMismatch {
            expected: vec![usize::from(gt.num_classes), gt.height, gt.width],
            got: vec![l, h, w],
        });
    }
    for ((c, r, col), &p) in pred_probs.indexed_iter() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            let _ = c;
            return Err(LossError::NotAProbability(r, col, p));
        }
    }
    for r in 0..h {
        for col in 0..w {
            let sum: f64 = (0..l).map(|c| pred_probs[[c, r, col]]).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(LossError::NotNormalized(r, col, sum));
            }
        }
    }
    Ok(())
}

/// Cross entropy of a `[L, H, W]` probability grid against the layer map:
/// mean over pixels of `-ln p(true class)`.
pub fn multilayer_ce_loss(
    pred_probs: ArrayView3<f64>,
    gt: &LayerLabelMap,
) -> Result<f64, LossError> {
    check_multilayer_shapes(&pred_probs, gt)?;
    let (_, h, w) = pred_probs.dim();
    let mut sum = 0.0;
    for r in 0..h {
        for col in 0..w {
            let label = usize::from(gt.labels[[r, col]]);
            sum -= clamp(pred_probs[[label, r, col]]).ln();
        }
    }
    Ok(sum / (h * w) as f64)
}

/// [`multilayer_ce_loss`] plus the gradient w.r.t. every probability entry.
pub fn multilayer_ce_loss_grad(
    pred_probs: ArrayView3<f64>,
    gt: &LayerLabelMap,
) -> Result<(f64, Array3<f64>), LossError> {
    let loss = multilayer_ce_loss(pred_probs, gt)?;
    let (l, h, w) = pred_probs.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut grad = Array3::<f64>::zeros((l, h, w));
    for r in 0..h {
        for col in 0..w {
            let label = usize::from(gt.labels[[r, col]]);
            let p = pred_probs[[label, r, col]];
            if in_clamp_range(p) {
                grad[[label, r, col]] = -scale / p;
            }
        }
    }
    Ok((loss, grad))
}

/// Printed-form variant: per-channel binary cross entropy against the
/// one-hot layer encoding, summed over channels and averaged over pixels.
pub fn multilayer_bce_loss(
    pred_probs: ArrayView3<f64>,
    gt: &LayerLabelMap,
) -> Result<f64, LossError> {
    check_multilayer_shapes(&pred_probs, gt)?;
    let (l, h, w) = pred_probs.dim();
    let mut sum = 0.0;
    for r in 0..h {
        for col in 0..w {
            let label = usize::from(gt.labels[[r, col]]);
            for c in 0..l {
                let p = clamp(pred_probs[[c, r, col]]);
                sum -= if c == label { p.ln() } else { (1.0 - p).ln() };
            }
        }
    }
    Ok(sum / (h * w) as f64)
}

pub fn multilayer_bce_loss_grad(
    pred_probs: ArrayView3<f64>,
    gt: &LayerLabelMap,
) -> Result<(f64, Array3<f64>), LossError> {
    let loss = multilayer_bce_loss(pred_probs, gt)?;
    let (l, h, w) = pred_probs.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut grad = Array3::<f64>::zeros((l, h, w));
    for r in 0..h {
        for col in 0..w {
            let label = usize::from(gt.labels[[r, col]]);
            for c in 0..l {
                let p = pred_probs[[c, r, col]];
                if !in_clamp_range(p) {
                    continue;
                }
                grad[[c, r, col]] = if c == label {
                    -scale / p
                } else {
                    scale / (1.0 - p)
                };
            }
        }
    }
    Ok((loss, grad))
}

/// Applies the selected multi-layer loss.
pub fn multilayer_seg_loss_grad(
    kind: MultilayerLossKind,
    pred_probs: ArrayView3<f64>,
    gt: &LayerLabelMap,
) -> Result<(f64, Array3<f64>), LossError> {
    match kind {
        MultilayerLossKind::Categorical => multilayer_ce_loss_grad(pred_probs, gt),
        MultilayerLossKind::PerChannelBinary => multilayer_bce_loss_grad(pred_probs, gt),
    }
}

fn check_choroid_shapes(
    pred_prob: &ArrayView2<f64>,
    gt: &ChoroidMask,
) -> Result<(), LossError> {
    let (h, w) = pred_prob.dim();
    if (h, w) != (gt.height, gt.width) {
        return Err(LossError::ShapeMismatch {
            expected: vec![gt.height, gt.width],
            got: vec![h, w],
        });
    }
    for ((r, c), &p) in pred_prob.indexed_iter() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(LossError::NotAProbability(r, c, p));
        }
    }
    Ok(())
}

/// Binary cross entropy of an `[H, W]` choroid probability map against the
/// mask: mean over pixels of `-[g ln p + (1 - g) ln(1 - p)]`.
pub fn choroid_bce_loss(
    pred_prob: ArrayView2<f64>,
    gt: &ChoroidMask,
) -> Result<f64, LossError> {
    check_choroid_shapes(&pred_prob, gt)?;
    let (h, w) = pred_prob.dim();
    let mut sum = 0.0;
    for ((r, c), &p) in pred_prob.indexed_iter() {
        let p = clamp(p);
        sum -= if gt.mask[[r, c]] == 1 {
            p.ln()
        } else {
            (1.0 - p).ln()
        };
    }
    Ok(sum / (h * w) as f64)
}

pub fn choroid_bce_loss_grad(
    pred_prob: ArrayView2<f64>,
    gt: &ChoroidMask,
) -> Result<(f64, Array2<f64>), LossError> {
    let loss = choroid_bce_loss(pred_prob, gt)?;
    let (h, w) = pred_prob.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut grad = Array2::<f64>::zeros((h, w));
    for ((r, c), &p) in pred_prob.indexed_iter() {
        if !in_clamp_range(p) {
            continue;
        }
        grad[[r, c]] = if gt.mask[[r, c]] == 1 {
            -scale / p
        } else {
            scale / (1.0 - p)
        };
    }
    Ok((loss, grad))
}

/// Biomarker regularizer: runs the frozen thickness network on the
/// predicted choroid probability maps and penalizes `|B(C_pred) - target|`,
/// averaged over the batch.
///
/// Gradients flow into the probability maps only; the frozen network is
/// read, never written. An unfrozen network is rejected.
pub fn bio_regularizer_loss(
    pred_choroid_probs: &Array4<f64>,
    target_thickness: ArrayView1<f64>,
    frozen_bio_net: &BioRegressor,
) -> Result<f64, LossError> {
    Ok(bio_regularizer_loss_grad(pred_choroid_probs, target_thickness, frozen_bio_net)?.0)
}

/// [`bio_regularizer_loss`] plus the gradient w.r.t. the probability maps.
pub fn bio_regularizer_loss_grad(
    pred_choroid_probs: &Array4<f64>,
    target_thickness: ArrayView1<f64>,
    frozen_bio_net: &BioRegressor,
) -> Result<(f64, Array4<f64>), LossError> {
    if !frozen_bio_net.is_frozen() {
        return Err(LossError::NotFrozen);
    }
    let n = pred_choroid_probs.dim().0;
    if n != target_thickness.len() {
        return Err(LossError::BatchSizeMismatch(n, target_thickness.len()));
    }
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let (predicted, tape) = frozen_bio_net.forward_tape(pred_choroid_probs)?;
    let (loss, d_pred) = bio_mae_loss_grad(predicted.view(), target_thickness)?;
    let grad = frozen_bio_net.backward_input(&tape, &d_pred);
    Ok((loss, grad))
}

/// Weighted sum of the three objective components.
pub fn total_loss(
    l_multilayers: f64,
    l_choroid: f64,
    l_bio: f64,
    weights: &LossWeights,
) -> f64 {
    weights.w_multilayers * l_multilayers + weights.w_choroid * l_choroid + weights.w_bio * l_bio
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_bio_net, NetworkConfig};
    use ndarray::{arr1, Array2, Array3, Array4};
    use rand::{Rng, SeedableRng};

    fn labels(h: usize, w: usize, l: u8, f: impl Fn(usize, usize) -> u8) -> LayerLabelMap {
        LayerLabelMap::new(Array2::from_shape_fn((h, w), |(r, c)| f(r, c)), l).unwrap()
    }

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> ChoroidMask {
        ChoroidMask::new(Array2::from_shape_fn((h, w), |(r, c)| u8::from(f(r, c)))).unwrap()
    }

    #[test]
    fn mae_hand_examples() {
        assert_eq!(
            bio_mae_loss(arr1(&[3.0, 5.0]).view(), arr1(&[3.0, 5.0]).view()).unwrap(),
            0.0
        );
        assert_eq!(
            bio_mae_loss(arr1(&[3.0, 5.0]).view(), arr1(&[1.0, 9.0]).view()).unwrap(),
            3.0
        );
        assert_eq!(
            bio_mae_loss(arr1(&[7.5]).view(), arr1(&[7.0]).view()).unwrap(),
            0.5
        );
        assert!(bio_mae_loss(arr1(&[1.0]).view(), arr1(&[1.0, 2.0]).view()).is_err());
        assert!(bio_mae_loss(arr1(&[f64::NAN]).view(), arr1(&[1.0]).view()).is_err());
    }

    #[test]
    fn ce_uniform_and_closed_forms() {
        // Uniform 1/12 predictions score ln 12 for any labels.
        let l = 12usize;
        let probs = Array3::from_elem((l, 4, 4), 1.0 / l as f64);
        let gt = labels(4, 4, 12, |r, c| ((r + c) % l) as u8);
        let loss = multilayer_ce_loss(probs.view(), &gt).unwrap();
        assert!((loss - (l as f64).ln()).abs() < 1e-12);

        // One-hot-correct predictions score ~0 after clamping.
        let gt = labels(4, 4, 3, |r, _| (r % 3) as u8);
        let mut probs = Array3::<f64>::zeros((3, 4, 4));
        for r in 0..4 {
            for c in 0..4 {
                probs[[usize::from(gt.labels[[r, c]]), r, c]] = 1.0;
            }
        }
        let loss = multilayer_ce_loss(probs.view(), &gt).unwrap();
        assert!(loss >= 0.0 && loss < 1e-5, "{loss}");

        // Single pixel with true-class probability 0.5 scores ln 2.
        let gt = labels(1, 1, 2, |_, _| 0);
        let probs = Array3::from_elem((2, 1, 1), 0.5);
        let loss = multilayer_ce_loss(probs.view(), &gt).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_unnormalized_and_mismatched() {
        let gt = labels(2, 2, 3, |_, _| 0);
        let probs = Array3::from_elem((3, 2, 2), 0.5);
        assert!(matches!(
            multilayer_ce_loss(probs.view(), &gt),
            Err(LossError::NotNormalized(..))
        ));
        let probs = Array3::from_elem((4, 2, 2), 0.25);
        assert!(matches!(
            multilayer_ce_loss(probs.view(), &gt),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ce_is_minimized_by_the_one_hot_truth() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let gt = labels(4, 4, 5, |r, c| ((r * 3 + c) % 5) as u8);
        let mut one_hot = Array3::<f64>::zeros((5, 4, 4));
        for r in 0..4 {
            for c in 0..4 {
                one_hot[[usize::from(gt.labels[[r, c]]), r, c]] = 1.0;
            }
        }
        let best = multilayer_ce_loss(one_hot.view(), &gt).unwrap();
        for _ in 0..20 {
            // Random perturbation towards another distribution.
            let mut perturbed = one_hot.clone();
            for r in 0..4 {
                for c in 0..4 {
                    let alpha = rng.random_range(0.01..0.5);
                    let other = rng.random_range(0..5);
                    for k in 0..5 {
                        let toward = if k == other { 1.0 } else { 0.0 };
                        perturbed[[k, r, c]] =
                            (1.0 - alpha) * perturbed[[k, r, c]] + alpha * toward;
                    }
                }
            }
            let loss = multilayer_ce_loss(perturbed.view(), &gt).unwrap();
            assert!(loss > best, "perturbed {loss} not worse than {best}");
        }
    }

    #[test]
    fn bce_closed_forms() {
        let gt = mask(4, 4, |r, _| r < 2);
        let half = Array2::from_elem((4, 4), 0.5);
        let loss = choroid_bce_loss(half.view(), &gt).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        // Exact prediction scores ~0 post-clamp.
        let exact = Array2::from_shape_fn((4, 4), |(r, c)| f64::from(gt.mask[[r, c]]));
        let loss = choroid_bce_loss(exact.view(), &gt).unwrap();
        assert!(loss >= 0.0 && loss < 1e-5);

        // Single pixel, g = 1, p = 0.25 scores ln 4.
        let gt = mask(1, 1, |_, _| true);
        let p = Array2::from_elem((1, 1), 0.25);
        let loss = choroid_bce_loss(p.view(), &gt).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let w = LossWeights::default();
        assert!((total_loss(2.0, 3.0, 10.0, &w) - 5.1).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let only_bio = LossWeights {
            w_multilayers: 0.0,
            w_choroid: 0.0,
            w_bio: 1.0,
        };
        assert_eq!(total_loss(9.0, 9.0, 7.0, &only_bio), 7.0);
        // Linearity: doubling one weight doubles its contribution exactly.
        let double = LossWeights {
            w_bio: 0.02,
            ..LossWeights::default()
        };
        let base = total_loss(0.0, 0.0, 10.0, &w);
        assert_eq!(total_loss(0.0, 0.0, 10.0, &double), 2.0 * base);
    }

    fn bio_fixture() -> BioRegressor {
        let cfg = NetworkConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: 4,
            depth: 4,
            bio_head_width: 8,
        };
        build_bio_net(&cfg, 21).unwrap()
    }

    #[test]
    fn regularizer_rejects_unfrozen_and_is_self_consistent() {
        let mut net = bio_fixture();
        let probs = Array4::from_elem((1, 1, 16, 16), 0.5);
        let err = bio_regularizer_loss(&probs, arr1(&[10.0]).view(), &net);
        assert!(matches!(err, Err(LossError::NotFrozen)));

        net.freeze();
        // Target set to the network's own output: loss is exactly zero.
        let own = net.predict(&probs).unwrap();
        let loss = bio_regularizer_loss(&probs, own.view(), &net).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let step = 1e-4;
        let check = |analytic: f64, fd: f64, what: &str| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-3, "{what}: analytic {analytic} vs fd {fd} (rel {rel})");
        };

        // MAE, away from the kink.
        let pred = Array1::from_shape_fn(16, |_| rng.random_range(5.0..10.0));
        let target = Array1::from_shape_fn(16, |_| rng.random_range(15.0..20.0));
        let (_, grad) = bio_mae_loss_grad(pred.view(), target.view()).unwrap();
        for i in [0usize, 7, 15] {
            let mut p = pred.clone();
            p[i] += step;
            let up = bio_mae_loss(p.view(), target.view()).unwrap();
            p[i] -= 2.0 * step;
            let down = bio_mae_loss(p.view(), target.view()).unwrap();
            check(grad[i], (up - down) / (2.0 * step), "mae");
        }

        // BCE on probabilities comfortably inside (0, 1).
        let gt = mask(4, 4, |r, c| (r + c) % 2 == 0);
        let probs = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.2..0.8));
        let (_, grad) = choroid_bce_loss_grad(probs.view(), &gt).unwrap();
        for idx in [(0usize, 0usize), (1, 3), (3, 2)] {
            let mut p = probs.clone();
            p[idx] += step;
            let up = choroid_bce_loss(p.view(), &gt).unwrap();
            p[idx] -= 2.0 * step;
            let down = choroid_bce_loss(p.view(), &gt).unwrap();
            check(grad[idx], (up - down) / (2.0 * step), "bce");
        }

        // Categorical CE. Perturbing one entry breaks the sum-to-1
        // precondition at 1e-4, so this check uses a 1e-6 step, which f64
        // resolves cleanly.
        let ce_step = 1e-6;
        let gt = labels(4, 4, 4, |r, c| ((r + 2 * c) % 4) as u8);
        let mut probs = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0.1..1.0));
        for r in 0..4 {
            for c in 0..4 {
                let s: f64 = (0..4).map(|k| probs[[k, r, c]]).sum();
                for k in 0..4 {
                    probs[[k, r, c]] /= s;
                }
            }
        }
        let (_, grad) = multilayer_ce_loss_grad(probs.view(), &gt).unwrap();
        for idx in [(0usize, 0usize, 0usize), (2, 1, 3), (3, 3, 3)] {
            let label = usize::from(gt.labels[[idx.1, idx.2]]);
            let idx = (label, idx.1, idx.2); // only the true class has gradient
            let mut p = probs.clone();
            p[idx] += ce_step;
            let up = multilayer_ce_loss(p.view(), &gt).unwrap();
            p[idx] -= 2.0 * ce_step;
            let down = multilayer_ce_loss(p.view(), &gt).unwrap();
            check(grad[idx], (up - down) / (2.0 * ce_step), "ce");
        }

        // Regularizer through the frozen network on a 4x4 map.
        let mut net = bio_fixture();
        net.freeze();
        let probs = Array4::from_shape_fn((1, 1, 4, 4), |_| rng.random_range(0.2..0.8));
        let base = net.predict(&probs).unwrap()[0];
        let target = arr1(&[base + 5.0]); // keep |B(p) - t| away from the kink
        let (_, grad) = bio_regularizer_loss_grad(&probs, target.view(), &net).unwrap();
        for idx in [(0usize, 0usize, 0usize, 0usize), (0, 0, 2, 3), (0, 0, 3, 1)] {
            let mut p = probs.clone();
            p[idx] += step;
            let up = bio_regularizer_loss(&p, target.view(), &net).unwrap();
            p[idx] -= 2.0 * step;
            let down = bio_regularizer_loss(&p, target.view(), &net).unwrap();
            check(grad[idx], (up - down) / (2.0 * step), "bio-reg");
        }
    }

    #[test]
    fn ce_gradient_full_grid_finite_difference_sweep() {
        // Every entry of a small grid, not just spot checks.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let gt = labels(2, 2, 3, |r, c| ((r + c) % 3) as u8);
        let mut probs = Array3::from_shape_fn((3, 2, 2), |_| rng.random_range(0.1..1.0));
        for r in 0..2 {
            for c in 0..2 {
                let s: f64 = (0..3).map(|k| probs[[k, r, c]]).sum();
                for k in 0..3 {
                    probs[[k, r, c]] /= s;
                }
            }
        }
        let (_, grad) = multilayer_ce_loss_grad(probs.view(), &gt).unwrap();
        let step = 1e-6;
        for k in 0..3 {
            for r in 0..2 {
                for c in 0..2 {
                    let mut p = probs.clone();
                    p[[k, r, c]] += step;
                    let up = multilayer_ce_loss(p.view(), &gt).unwrap();
                    p[[k, r, c]] -= 2.0 * step;
                    let down = multilayer_ce_loss(p.view(), &gt).unwrap();
                    let fd = (up - down) / (2.0 * step);
                    let a = grad[[k, r, c]];
                    assert!(
                        (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-6),
                        "at ({k},{r},{c}): {a} vs {fd}"
                    );
                }
            }
        }
    }
}
