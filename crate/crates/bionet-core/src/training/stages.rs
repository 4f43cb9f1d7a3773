//! Stage implementations: biomarker pretraining, cascade training, and
//! model evaluation.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ChoroidMask, Sample};
use crate::losses::{
    bio_mae_loss_grad, bio_regularizer_loss_grad, choroid_bce_loss_grad,
    multilayer_seg_loss_grad,
};
use crate::metrics::{evaluate_dataset, MetricsReport};
use crate::nn::checkpoint::{load_bio, load_unet, save_unet};
use crate::nn::{
    build_bio_net, build_unet, ops, param_digest, Adam, BioRegressor, NetworkConfig, Params,
    SegHead, Unet,
};
use crate::phantom::splitmix64;

use super::{
    augment, lr_at, AblationMode, BioTargetKind, DecayUnit, EpochRecord, StageSchedule,
    TrainConfig, TrainError, TrainLog,
};

fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

fn check_uniform_dims(samples: &[Sample]) -> Result<(usize, usize), TrainError> {
    let (h, w) = (samples[0].image.height, samples[0].image.width);
    if samples
        .iter()
        .any(|s| (s.image.height, s.image.width) != (h, w))
    {
        return Err(TrainError::BadConfig(
            "samples in a split must share dimensions".into(),
        ));
    }
    Ok((h, w))
}

fn images_tensor(batch: &[Sample]) -> Array4<f64> {
    let (h, w) = (batch[0].image.height, batch[0].image.width);
    let mut x = Array4::<f64>::zeros((batch.len(), 1, h, w));
    for (i, sample) in batch.iter().enumerate() {
        x.slice_mut(s![i, 0, .., ..]).assign(&sample.image.pixels);
    }
    x
}

fn masks_tensor(batch: &[Sample]) -> Array4<f64> {
    let (h, w) = (batch[0].choroid.height, batch[0].choroid.width);
    let mut x = Array4::<f64>::zeros((batch.len(), 1, h, w));
    for (i, sample) in batch.iter().enumerate() {
        x.slice_mut(s![i, 0, .., ..])
            .assign(&sample.choroid.mask.mapv(f64::from));
    }
    x
}

fn thickness_targets(batch: &[Sample]) -> Array1<f64> {
    Array1::from_iter(batch.iter().map(|s| s.thickness.0))
}

/// Separable Gaussian blur; softens mask edges so the regressor sees maps
/// resembling the probabilities it gets in stage 2.
fn gaussian_blur2d(grid: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return grid.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = grid.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = (r as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * grid[[rr, c]];
            }
            tmp[[r, c]] = acc / norm;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = (c as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * tmp[[r, cc]];
            }
            out[[r, c]] = acc / norm;
        }
    }
    out
}

/// Pretrains the thickness regressor on (ground-truth mask -> thickness)
/// pairs with the mean-absolute-error objective, then freezes it.
pub fn train_bio_stage(
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<(BioRegressor, TrainLog), TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_uniform_dims(train)?;

    let net_cfg = NetworkConfig {
        in_channels: 1,
        out_channels: 1,
        base_width: config.base_width,
        depth: config.depth,
        bio_head_width: config.bio_head_width,
    };
    let mut net = build_bio_net(&net_cfg, derive_seed(config.seed, 0xB10))?;
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xB20));
    let mut log = TrainLog::new("stage1-bio");
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let lr = match config.decay_unit {
                DecayUnit::Epochs => lr_at(epoch, config),
                DecayUnit::Steps => lr_at(step, config),
            };
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&train[i], &config.augmentation, &mut rng))
                .collect();
            let mut inputs = masks_tensor(&batch);
            for i in 0..batch.len() {
                let blur = rng.random::<f64>() < config.mask_blur_prob;
                if blur && config.mask_blur_sigma > 0.0 {
                    let soft = gaussian_blur2d(
                        &inputs.slice(s![i, 0, .., ..]).to_owned(),
                        config.mask_blur_sigma,
                    );
                    inputs.slice_mut(s![i, 0, .., ..]).assign(&soft);
                }
            }
            let targets = thickness_targets(&batch);
            let (pred, tape) = net.forward_tape(&inputs)?;
            let (loss, d_pred) = bio_mae_loss_grad(pred.view(), targets.view())?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    stage: "stage1-bio",
                    epoch,
                });
            }
            net.zero_grads();
            let _ = net.backward_train(&tape, &d_pred);
            adam.step(&mut net, lr);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }

        let val_mae = (!val.is_empty())
            .then(|| validation_mae(&net, val, config.batch_size))
            .transpose()?;
        log.records.push(EpochRecord {
            epoch,
            lr: match config.decay_unit {
                DecayUnit::Epochs => lr_at(epoch, config),
                DecayUnit::Steps => lr_at(step.saturating_sub(1), config),
            },
            loss_multilayers: None,
            loss_choroid: None,
            loss_bio: Some(loss_sum / seen as f64),
            loss_total: loss_sum / seen as f64,
            val: None,
            val_thickness_mae: val_mae,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
    }

    net.freeze();
    Ok((net, log))
}

fn validation_mae(
    net: &BioRegressor,
    val: &[Sample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut abs_sum = 0.0;
    for chunk in val.chunks(batch_size) {
        let inputs = masks_tensor(chunk);
        let pred = net.predict(&inputs)?;
        for (i, sample) in chunk.iter().enumerate() {
            abs_sum += (pred[i] - sample.thickness.0).abs();
        }
    }
    Ok(abs_sum / val.len() as f64)
}

/// Trained networks of one stage-2 run.
pub struct ModelBundle {
    pub mode: AblationMode,
    pub u_g: Option<Unet>,
    pub u_c: Option<Unet>,
    pub num_classes: u8,
    pub choroid_class: u8,
}

/// Anything that can produce choroid masks for a list of samples.
pub trait ChoroidPredictor {
    fn predict_masks(&mut self, samples: &[Sample]) -> Result<Vec<ChoroidMask>, TrainError>;
}

/// Test predictor that returns the ground truth; evaluating it must yield a
/// perfect report.
pub struct OracleModel;

impl ChoroidPredictor for OracleModel {
    fn predict_masks(&mut self, samples: &[Sample]) -> Result<Vec<ChoroidMask>, TrainError> {
        Ok(samples.iter().map(|s| s.choroid.clone()).collect())
    }
}

fn binarize(probs: &Array4<f64>) -> Vec<ChoroidMask> {
    let (n, _, h, w) = probs.dim();
    (0..n)
        .map(|i| {
            let mask =
                Array2::from_shape_fn((h, w), |(r, c)| u8::from(probs[[i, 0, r, c]] > 0.5));
            ChoroidMask::new(mask).expect("thresholded map is binary")
        })
        .collect()
}

/// Inference pass for whichever networks a mode uses; returns the choroid
/// probability map `[N, 1, H, W]`.
fn predict_choroid_probs(
    mode: AblationMode,
    u_g: Option<&mut Unet>,
    u_c: Option<&mut Unet>,
    choroid_class: u8,
    depth: usize,
    images: &Array4<f64>,
) -> Result<Array4<f64>, TrainError> {
    let multiple = 1usize << depth;
    let (xp, (h, w)) = ops::pad_to_multiple(images, multiple);
    let cc = usize::from(choroid_class);
    let probs = match mode {
        AblationMode::Gms => {
            let net = u_g.expect("gms mode has a global net");
            let global = net.forward(xp, false)?;
            global.slice(s![.., cc..cc + 1, .., ..]).to_owned()
        }
        AblationMode::Unet | AblationMode::UnetBio => {
            let net = u_c.expect("local modes have a local net");
            net.forward(xp, false)?
        }
        AblationMode::UnetGms | AblationMode::Bionet => {
            let g_net = u_g.expect("cascade modes have a global net");
            let c_net = u_c.expect("cascade modes have a local net");
            let global = g_net.forward(xp.clone(), false)?;
            let local_in = ops::concat_channels(&xp, &global);
            c_net.forward(local_in, false)?
        }
    };
    Ok(ops::crop_hw(&probs, h, w))
}

impl ChoroidPredictor for ModelBundle {
    fn predict_masks(&mut self, samples: &[Sample]) -> Result<Vec<ChoroidMask>, TrainError> {
        let depth = self
            .u_g
            .as_ref()
            .or(self.u_c.as_ref())
            .map(|n| n.config.depth)
            .unwrap_or(4);
        let mut masks = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let images = images_tensor(chunk);
            let probs = predict_choroid_probs(
                self.mode,
                self.u_g.as_mut(),
                self.u_c.as_mut(),
                self.choroid_class,
                depth,
                &images,
            )?;
            masks.extend(binarize(&probs));
        }
        Ok(masks)
    }
}

/// Runs inference over a split, binarizes predicted probabilities at 0.5
/// and macro-averages the metric suite.
pub fn evaluate_model<P: ChoroidPredictor + ?Sized>(
    model: &mut P,
    samples: &[Sample],
) -> Result<MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_uniform_dims(samples)?;
    let preds = model.predict_masks(samples)?;
    let gts: Vec<ChoroidMask> = samples.iter().map(|s| s.choroid.clone()).collect();
    Ok(evaluate_dataset(&preds, &gts)?)
}

/// Jointly trains the networks selected by the ablation mode under the
/// weighted objective; the frozen biomarker network contributes the
/// regularizer term where the mode includes it and must come back with an
/// unchanged digest, otherwise training fails hard.
pub fn train_cascade_stage(
    train: &[Sample],
    val: &[Sample],
    frozen_bio: Option<&BioRegressor>,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainLog), TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_uniform_dims(train)?;
    let mode = config.ablation_mode;
    let bio = if mode.uses_bio() {
        let bio = frozen_bio.ok_or(TrainError::MissingBioNetwork(mode))?;
        if !bio.is_frozen() {
            return Err(TrainError::BioNotFrozen);
        }
        Some(bio)
    } else {
        None
    };
    let bio_digest_before = bio.map(param_digest);

    let num_classes = train[0].layers.num_classes;
    let choroid_class = train[0].choroid_class;
    let g_cfg = NetworkConfig {
        in_channels: 1,
        out_channels: usize::from(num_classes),
        base_width: config.base_width,
        depth: config.depth,
        bio_head_width: config.bio_head_width,
    };
    let c_cfg = NetworkConfig {
        in_channels: if mode.is_cascade() {
            1 + usize::from(num_classes)
        } else {
            1
        },
        out_channels: 1,
        ..g_cfg.clone()
    };

    let mut u_g = if mode.uses_global() {
        Some(build_unet(&g_cfg, SegHead::Softmax, derive_seed(config.seed, 0xC10))?)
    } else {
        None
    };
    let mut u_c = if mode.uses_local() {
        Some(build_unet(&c_cfg, SegHead::Sigmoid, derive_seed(config.seed, 0xC20))?)
    } else {
        None
    };
    let mut adam_g = u_g.as_ref().map(Adam::new);
    let mut adam_c = u_c.as_ref().map(Adam::new);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xC30));
    let mut log = TrainLog::new(format!("stage2-{mode}"));
    let weights = config.loss_weights;
    let multiple = 1usize << config.depth;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        // Sequential schedule: the global module trains alone first.
        let pretraining = config.schedule == StageSchedule::Sequential
            && mode.is_cascade()
            && epoch < config.pretrain_epochs;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // ml, choroid, bio, total
        let mut counts = (0usize, 0usize, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let lr = match config.decay_unit {
                DecayUnit::Epochs => lr_at(epoch, config),
                DecayUnit::Steps => lr_at(step, config),
            };
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&train[i], &config.augmentation, &mut rng))
                .collect();
            let n = batch.len();
            let nf = n as f64;
            let images = images_tensor(&batch);
            let (xp, (h, w)) = ops::pad_to_multiple(&images, multiple);
            let (hp, wp) = (xp.dim().2, xp.dim().3);

            let mut loss_ml = None;
            let mut loss_ch = None;
            let mut loss_bio = None;

            let train_global = mode.uses_global();
            let train_local = mode.uses_local() && !pretraining;

            // Forward.
            let global_probs = if train_global {
                let net = u_g.as_mut().expect("mode uses the global net");
                Some(net.forward(xp.clone(), true)?)
            } else {
                None
            };
            let choroid_probs = if train_local {
                let net = u_c.as_mut().expect("mode uses the local net");
                let input = if mode.is_cascade() {
                    ops::concat_channels(&xp, global_probs.as_ref().expect("cascade has globals"))
                } else {
                    xp.clone()
                };
                Some(ops::crop_hw(&net.forward(input, true)?, h, w))
            } else {
                None
            };

            // Losses and gradients w.r.t. the probability outputs.
            let mut d_global = global_probs
                .as_ref()
                .map(|g| Array4::<f64>::zeros(g.dim()));
            let mut d_choroid = choroid_probs
                .as_ref()
                .map(|c| Array4::<f64>::zeros(c.dim()));

            if let (Some(gp), Some(dg)) = (&global_probs, &mut d_global) {
                let cropped = ops::crop_hw(gp, h, w);
                let mut sum = 0.0;
                for (i, sample) in batch.iter().enumerate() {
                    let (l, g) = multilayer_seg_loss_grad(
                        config.multilayer_loss,
                        cropped.index_axis(Axis(0), i),
                        &sample.layers,
                    )?;
                    sum += l;
                    let scaled = g.mapv(|v| v * weights.w_multilayers / nf);
                    dg.slice_mut(s![i, .., ..h, ..w]).assign(&scaled);
                }
                loss_ml = Some(sum / nf);
            }

            if let (Some(cp), Some(dc)) = (&choroid_probs, &mut d_choroid) {
                let mut sum = 0.0;
                for (i, sample) in batch.iter().enumerate() {
                    let (l, g) = choroid_bce_loss_grad(
                        cp.slice(s![i, 0, .., ..]),
                        &sample.choroid,
                    )?;
                    sum += l;
                    let scaled = g.mapv(|v| v * weights.w_choroid / nf);
                    dc.slice_mut(s![i, 0, .., ..]).assign(&scaled);
                }
                loss_ch = Some(sum / nf);

                if let Some(bio) = bio {
                    let targets = match config.bio_target {
                        BioTargetKind::GroundTruth => thickness_targets(&batch),
                        BioTargetKind::BioOfGtMask => bio.predict(&masks_tensor(&batch))?,
                    };
                    let (lb, gb) = bio_regularizer_loss_grad(cp, targets.view(), bio)?;
                    *dc += &gb.mapv(|v| v * weights.w_bio);
                    loss_bio = Some(lb);
                }
            }

            let total = weights.w_multilayers * loss_ml.unwrap_or(0.0)
                + weights.w_choroid * loss_ch.unwrap_or(0.0)
                + weights.w_bio * loss_bio.unwrap_or(0.0);
            if !total.is_finite() {
                return Err(TrainError::Diverged {
                    stage: "stage2",
                    epoch,
                });
            }

            // Backward, local first so its gradient reaches the global net
            // through the concatenation.
            let mut d_global_full = d_global;
            if let Some(dc) = &d_choroid {
                let net = u_c.as_mut().expect("local gradient implies a local net");
                net.zero_grads();
                let d_in = net.backward(&ops::pad_grad_to(dc, hp, wp));
                if mode.is_cascade() {
                    let (_d_img, d_from_local) = ops::split_channels(&d_in, 1);
                    if let Some(dg) = &mut d_global_full {
                        *dg += &d_from_local;
                    }
                }
            }
            if let Some(dg) = &d_global_full {
                let net = u_g.as_mut().expect("global gradient implies a global net");
                net.zero_grads();
                let _ = net.backward(dg);
            }

            if let (Some(net), Some(adam)) = (u_g.as_mut(), adam_g.as_mut()) {
                if train_global {
                    adam.step(net, lr);
                }
            }
            if let (Some(net), Some(adam)) = (u_c.as_mut(), adam_c.as_mut()) {
                if train_local {
                    adam.step(net, lr);
                }
            }
            step += 1;

            if let Some(l) = loss_ml {
                sums.0 += l * nf;
                counts.0 += n;
            }
            if let Some(l) = loss_ch {
                sums.1 += l * nf;
                counts.1 += n;
            }
            if let Some(l) = loss_bio {
                sums.2 += l * nf;
                counts.2 += n;
            }
            sums.3 += total * nf;
            counts.3 += n;
        }

        // The frozen network must never move.
        if let (Some(bio), Some(before)) = (bio, &bio_digest_before) {
            if &param_digest(bio) != before {
                return Err(TrainError::FrozenNetworkChanged);
            }
        }

        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate_split(
                mode,
                u_g.as_mut(),
                u_c.as_mut(),
                choroid_class,
                config.depth,
                val,
                config.batch_size,
            )?)
        };
        let avg = |sum: f64, count: usize| (count > 0).then(|| sum / count as f64);
        log.records.push(EpochRecord {
            epoch,
            lr: match config.decay_unit {
                DecayUnit::Epochs => lr_at(epoch, config),
                DecayUnit::Steps => lr_at(step.saturating_sub(1), config),
            },
            loss_multilayers: avg(sums.0, counts.0),
            loss_choroid: avg(sums.1, counts.1),
            loss_bio: avg(sums.2, counts.2),
            loss_total: sums.3 / counts.3 as f64,
            val: val_report,
            val_thickness_mae: None,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
    }

    if let (Some(bio), Some(before)) = (bio, &bio_digest_before) {
        if &param_digest(bio) != before {
            return Err(TrainError::FrozenNetworkChanged);
        }
    }

    Ok((
        ModelBundle {
            mode,
            u_g,
            u_c,
            num_classes,
            choroid_class,
        },
        log,
    ))
}

fn evaluate_split(
    mode: AblationMode,
    mut u_g: Option<&mut Unet>,
    mut u_c: Option<&mut Unet>,
    choroid_class: u8,
    depth: usize,
    samples: &[Sample],
    batch_size: usize,
) -> Result<MetricsReport, TrainError> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let images = images_tensor(chunk);
        let probs = predict_choroid_probs(
            mode,
            u_g.as_deref_mut(),
            u_c.as_deref_mut(),
            choroid_class,
            depth,
            &images,
        )?;
        preds.extend(binarize(&probs));
    }
    let gts: Vec<ChoroidMask> = samples.iter().map(|s| s.choroid.clone()).collect();
    Ok(evaluate_dataset(&preds, &gts)?)
}

pub const BUNDLE_FILE: &str = "bundle.json";
pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BundleIndex {
    schema_version: u32,
    mode: AblationMode,
    num_classes: u8,
    choroid_class: u8,
    u_g: Option<String>,
    u_c: Option<String>,
}

pub fn save_bundle(dir: &Path, bundle: &ModelBundle) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::BundleIo {
        path: dir.to_path_buf(),
        source,
    })?;
    let stage = format!("stage2-{}", bundle.mode);
    if let Some(net) = &bundle.u_g {
        save_unet(&dir.join("u_g.ckpt"), net, &stage)?;
    }
    if let Some(net) = &bundle.u_c {
        save_unet(&dir.join("u_c.ckpt"), net, &stage)?;
    }
    let index = BundleIndex {
        schema_version: BUNDLE_SCHEMA_VERSION,
        mode: bundle.mode,
        num_classes: bundle.num_classes,
        choroid_class: bundle.choroid_class,
        u_g: bundle.u_g.as_ref().map(|_| "u_g.ckpt".to_string()),
        u_c: bundle.u_c.as_ref().map(|_| "u_c.ckpt".to_string()),
    };
    let path = dir.join(BUNDLE_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index).expect("serializes"))
        .map_err(|source| TrainError::BundleIo { path, source })
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle, TrainError> {
    let path = dir.join(BUNDLE_FILE);
    let bytes = std::fs::read(&path).map_err(|source| TrainError::BundleIo {
        path: path.clone(),
        source,
    })?;
    let index: BundleIndex =
        serde_json::from_slice(&bytes).map_err(|e| TrainError::CorruptBundle {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    if index.schema_version != BUNDLE_SCHEMA_VERSION {
        return Err(TrainError::CorruptBundle {
            path,
            reason: format!("schema {} unsupported", index.schema_version),
        });
    }
    let u_g = index
        .u_g
        .as_ref()
        .map(|f| load_unet(&dir.join(f)).map(|(net, _)| net))
        .transpose()?;
    let u_c = index
        .u_c
        .as_ref()
        .map(|f| load_unet(&dir.join(f)).map(|(net, _)| net))
        .transpose()?;
    Ok(ModelBundle {
        mode: index.mode,
        u_g,
        u_c,
        num_classes: index.num_classes,
        choroid_class: index.choroid_class,
    })
}

/// Convenience for tests and the CLI: load the frozen biomarker network,
/// failing if it is not actually frozen.
pub fn load_frozen_bio(path: &Path) -> Result<BioRegressor, TrainError> {
    let (net, _meta) = load_bio(path)?;
    if !net.is_frozen() {
        return Err(TrainError::BioNotFrozen);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn tiny_phantoms(n: usize, seed: u64) -> Vec<Sample> {
        let config = PhantomConfig {
            seed,
            height: 32,
            width: 32,
            num_layers: 4,
            choroid_class: 2,
            min_band_thickness: 2,
            choroid_thickness_range: (6.0, 12.0),
            boundary_smoothness: 9,
            ..PhantomConfig::default()
        };
        (0..n)
            .map(|i| generate_phantom(&config, i as u64).unwrap())
            .collect()
    }

    fn tiny_config(mode: AblationMode, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            base_width: 4,
            depth: 2,
            bio_head_width: 8,
            ablation_mode: mode,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bio_stage_trains_freezes_and_loss_trends_down() {
        let train = tiny_phantoms(8, 1);
        let val = tiny_phantoms(4, 2);
        let config = tiny_config(AblationMode::Bionet, 6);
        let (net, log) = train_bio_stage(&train, &val, &config).unwrap();
        assert!(net.is_frozen());
        assert_eq!(log.records.len(), 6);
        let first = log.records.first().unwrap().loss_total;
        let last = log.records.last().unwrap().loss_total;
        assert!(last <= first, "loss went {first} -> {last}");
        assert!(log.final_thickness_mae().unwrap().is_finite());
    }

    #[test]
    fn bio_stage_is_deterministic() {
        let train = tiny_phantoms(6, 3);
        let config = tiny_config(AblationMode::Bionet, 2);
        let (a, log_a) = train_bio_stage(&train, &[], &config).unwrap();
        let (b, log_b) = train_bio_stage(&train, &[], &config).unwrap();
        assert_eq!(param_digest(&a), param_digest(&b));
        assert!(log_a.same_numbers(&log_b));
    }

    #[test]
    fn cascade_stage_runs_every_mode_and_respects_gating() {
        let train = tiny_phantoms(6, 4);
        let val = tiny_phantoms(2, 5);
        let bio_config = tiny_config(AblationMode::Bionet, 1);
        let (bio, _) = train_bio_stage(&train, &[], &bio_config).unwrap();

        for mode in AblationMode::ALL {
            let config = tiny_config(mode, 1);
            let (bundle, log) =
                train_cascade_stage(&train, &val, Some(&bio), &config).unwrap();
            assert_eq!(bundle.mode, mode);
            assert_eq!(bundle.u_g.is_some(), mode.uses_global(), "{mode}");
            assert_eq!(bundle.u_c.is_some(), mode.uses_local(), "{mode}");
            let record = log.records.last().unwrap();
            assert_eq!(record.loss_multilayers.is_some(), mode.uses_global());
            assert_eq!(record.loss_choroid.is_some(), mode.uses_local());
            assert_eq!(record.loss_bio.is_some(), mode.uses_bio());
            assert!(record.val.as_ref().unwrap().dice.is_finite());
        }
    }

    #[test]
    fn bio_modes_require_a_frozen_network() {
        let train = tiny_phantoms(4, 6);
        let config = tiny_config(AblationMode::Bionet, 1);
        assert!(matches!(
            train_cascade_stage(&train, &[], None, &config),
            Err(TrainError::MissingBioNetwork(_))
        ));
        let unfrozen =
            build_bio_net(
                &NetworkConfig {
                    in_channels: 1,
                    out_channels: 1,
                    base_width: 4,
                    depth: 2,
                    bio_head_width: 8,
                },
                0,
            )
            .unwrap();
        assert!(matches!(
            train_cascade_stage(&train, &[], Some(&unfrozen), &config),
            Err(TrainError::BioNotFrozen)
        ));
    }

    #[test]
    fn frozen_digest_survives_a_cascade_run() {
        let train = tiny_phantoms(6, 8);
        let bio_config = tiny_config(AblationMode::Bionet, 1);
        let (bio, _) = train_bio_stage(&train, &[], &bio_config).unwrap();
        let before = param_digest(&bio);
        let config = tiny_config(AblationMode::Bionet, 2);
        let _ = train_cascade_stage(&train, &[], Some(&bio), &config).unwrap();
        assert_eq!(param_digest(&bio), before);
    }

    #[test]
    fn cascade_stage_is_deterministic() {
        let train = tiny_phantoms(6, 9);
        let val = tiny_phantoms(2, 10);
        let config = tiny_config(AblationMode::UnetGms, 2);
        let (bundle_a, log_a) = train_cascade_stage(&train, &val, None, &config).unwrap();
        let (bundle_b, log_b) = train_cascade_stage(&train, &val, None, &config).unwrap();
        assert!(log_a.same_numbers(&log_b));
        assert_eq!(
            param_digest(bundle_a.u_g.as_ref().unwrap()),
            param_digest(bundle_b.u_g.as_ref().unwrap())
        );
        assert_eq!(
            param_digest(bundle_a.u_c.as_ref().unwrap()),
            param_digest(bundle_b.u_c.as_ref().unwrap())
        );
    }

    #[test]
    fn oracle_model_evaluates_perfect() {
        let samples = tiny_phantoms(3, 11);
        let report = evaluate_model(&mut OracleModel, &samples).unwrap();
        assert_eq!(report.dice, 1.0);
        assert_eq!(report.iou, 1.0);
        assert_eq!(report.ausde_mean, Some(0.0));
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.sensitivity, 1.0);
    }

    #[test]
    fn untrained_bundle_produces_a_well_formed_report() {
        let samples = tiny_phantoms(3, 12);
        let config = tiny_config(AblationMode::Unet, 1);
        let c_cfg = NetworkConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: config.base_width,
            depth: config.depth,
            bio_head_width: config.bio_head_width,
        };
        let mut bundle = ModelBundle {
            mode: AblationMode::Unet,
            u_g: None,
            u_c: Some(build_unet(&c_cfg, SegHead::Sigmoid, 123).unwrap()),
            num_classes: 4,
            choroid_class: 2,
        };
        let report = evaluate_model(&mut bundle, &samples).unwrap();
        assert!((0.0..=1.0).contains(&report.dice));
        assert!((0.0..=1.0).contains(&report.iou));
        assert_eq!(report.n_samples, 3);
    }

    #[test]
    fn bundle_round_trip() {
        let train = tiny_phantoms(4, 13);
        let config = tiny_config(AblationMode::UnetGms, 1);
        let (bundle, _) = train_cascade_stage(&train, &[], None, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &bundle).unwrap();
        let mut loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.mode, bundle.mode);
        assert_eq!(
            param_digest(loaded.u_g.as_ref().unwrap()),
            param_digest(bundle.u_g.as_ref().unwrap())
        );
        // The loaded bundle must also run.
        let samples = tiny_phantoms(2, 14);
        let report = evaluate_model(&mut loaded, &samples).unwrap();
        assert_eq!(report.n_samples, 2);
    }

    #[test]
    fn sequential_schedule_pretrains_the_global_module() {
        let train = tiny_phantoms(4, 15);
        let config = TrainConfig {
            schedule: StageSchedule::Sequential,
            pretrain_epochs: 1,
            ..tiny_config(AblationMode::UnetGms, 2)
        };
        let (_, log) = train_cascade_stage(&train, &[], None, &config).unwrap();
        // First epoch has no local loss, second does.
        assert!(log.records[0].loss_choroid.is_none());
        assert!(log.records[1].loss_choroid.is_some());
    }
}
