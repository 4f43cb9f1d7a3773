//! Global-to-local cascade wiring.
//!
//! The global module segments the raw scan into the full layer map; its
//! probability output is concatenated with the original image (1 + L
//! channels) and fed to the local module, which predicts the choroid map.
//! Backpropagation runs end to end: the local loss reaches the global
//! module's parameters through the concatenation.

use ndarray::Array4;

use super::ops;
use super::unet::Unet;
use super::NetworkError;

/// Outputs of one cascade pass.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    /// `[N, L, H, W]` layer probabilities, summing to 1 per pixel.
    pub global_probs: Array4<f64>,
    /// `[N, 1, H, W]` choroid probability in (0, 1).
    pub choroid_prob: Array4<f64>,
}

pub struct Cascade {
    pub u_g: Unet,
    pub u_c: Unet,
    pad_cache: Option<(usize, usize, usize, usize)>,
}

impl Cascade {
    /// Wires two networks; the local module must accept the image channel
    /// plus one channel per global class.
    pub fn new(u_g: Unet, u_c: Unet) -> Result<Self, NetworkError> {
        let expected = u_g.in_channels() + u_g.out_channels();
        if u_c.in_channels() != expected {
            return Err(NetworkError::ChannelMismatch {
                expected,
                got: u_c.in_channels(),
            });
        }
        Ok(Self {
            u_g,
            u_c,
            pad_cache: None,
        })
    }

    fn multiple(&self) -> usize {
        1usize << self.u_g.config.depth.max(self.u_c.config.depth)
    }

    /// Full cascade pass. Inputs whose spatial dims are not divisible by
    /// the downsampling factor are zero-padded at this boundary and the
    /// outputs cropped back.
    pub fn forward(
        &mut self,
        image: &Array4<f64>,
        train: bool,
    ) -> Result<CascadeOutput, NetworkError> {
        let (xp, (h, w)) = ops::pad_to_multiple(image, self.multiple());
        let (hp, wp) = (xp.dim().2, xp.dim().3);
        let global = self.u_g.forward(xp.clone(), train)?;
        let local_in = ops::concat_channels(&xp, &global);
        let choroid = self.u_c.forward(local_in, train)?;
        self.pad_cache = train.then_some((h, w, hp, wp));
        Ok(CascadeOutput {
            global_probs: ops::crop_hw(&global, h, w),
            choroid_prob: ops::crop_hw(&choroid, h, w),
        })
    }

    /// Backpropagates gradients w.r.t. both cascade outputs. The local
    /// gradient reaches the global module through the channel split of the
    /// concatenated input; the image-channel gradient is discarded.
    pub fn backward(&mut self, d_global: &Array4<f64>, d_choroid: &Array4<f64>) {
        let (_, _, hp, wp) = self
            .pad_cache
            .take()
            .expect("backward without cached forward");
        let d_choroid = ops::pad_grad_to(d_choroid, hp, wp);
        let d_local_in = self.u_c.backward(&d_choroid);
        let (_d_image, d_global_from_local) =
            ops::split_channels(&d_local_in, self.u_g.in_channels());
        let mut d_global = ops::pad_grad_to(d_global, hp, wp);
        d_global += &d_global_from_local;
        let _ = self.u_g.backward(&d_global);
    }
}

/// One inference/training pass through a `(U_G, U_C)` pair without keeping
/// a cascade around.
pub fn cascade_forward(
    image: &Array4<f64>,
    u_g: &mut Unet,
    u_c: &mut Unet,
) -> Result<CascadeOutput, NetworkError> {
    let expected = u_g.in_channels() + u_g.out_channels();
    if u_c.in_channels() != expected {
        return Err(NetworkError::ChannelMismatch {
            expected,
            got: u_c.in_channels(),
        });
    }
    let multiple = 1usize << u_g.config.depth.max(u_c.config.depth);
    let (xp, (h, w)) = ops::pad_to_multiple(image, multiple);
    let global = u_g.forward(xp.clone(), false)?;
    let local_in = ops::concat_channels(&xp, &global);
    let choroid = u_c.forward(local_in, false)?;
    Ok(CascadeOutput {
        global_probs: ops::crop_hw(&global, h, w),
        choroid_prob: ops::crop_hw(&choroid, h, w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::unet::SegHead;
    use crate::nn::{build_unet, NetworkConfig};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn nets(num_classes: usize, base: usize, depth: usize) -> (Unet, Unet) {
        let g_cfg = NetworkConfig {
            in_channels: 1,
            out_channels: num_classes,
            base_width: base,
            depth,
            bio_head_width: 8,
        };
        let c_cfg = NetworkConfig {
            in_channels: 1 + num_classes,
            out_channels: 1,
            ..g_cfg.clone()
        };
        (
            build_unet(&g_cfg, SegHead::Softmax, 1).unwrap(),
            build_unet(&c_cfg, SegHead::Sigmoid, 2).unwrap(),
        )
    }

    #[test]
    fn shapes_and_normalization_contract() {
        let (u_g, u_c) = nets(12, 4, 2);
        assert_eq!(u_c.in_channels(), 13);
        let mut cascade = Cascade::new(u_g, u_c).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((2, 1, 32, 32), |_| rng.random_range(0.0..1.0));
        let out = cascade.forward(&x, false).unwrap();
        assert_eq!(out.global_probs.dim(), (2, 12, 32, 32));
        assert_eq!(out.choroid_prob.dim(), (2, 1, 32, 32));
        for n in 0..2 {
            for iy in 0..32 {
                for ix in 0..32 {
                    let s: f64 = (0..12).map(|c| out.global_probs[[n, c, iy, ix]]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
        assert!(out.choroid_prob.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_count_follows_num_classes() {
        let (u_g, u_c) = nets(3, 4, 2);
        assert_eq!(u_c.in_channels(), 4);
        assert!(Cascade::new(u_g, u_c).is_ok());

        let (u_g, _) = nets(3, 4, 2);
        let (_, u_c_wrong) = nets(5, 4, 2);
        assert!(matches!(
            Cascade::new(u_g, u_c_wrong),
            Err(NetworkError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn local_loss_reaches_global_parameters() {
        let (u_g, u_c) = nets(4, 4, 2);
        let mut cascade = Cascade::new(u_g, u_c).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.random_range(0.0..1.0));
        let out = cascade.forward(&x, true).unwrap();
        // Only the local output receives a gradient.
        let d_global = Array4::zeros(out.global_probs.dim());
        let d_choroid = Array4::from_elem(out.choroid_prob.dim(), 1.0);
        cascade.backward(&d_global, &d_choroid);
        let mut g_norm = 0.0;
        crate::nn::Params::visit_params_with_grads_mut(&mut cascade.u_g, &mut |_, _, g| {
            g_norm += g.iter().map(|v| v * v).sum::<f64>();
        });
        assert!(g_norm > 0.0, "global module received no gradient");
    }

    #[test]
    fn pads_and_crops_odd_sizes() {
        let (u_g, u_c) = nets(4, 4, 2);
        let mut cascade = Cascade::new(u_g, u_c).unwrap();
        let x = Array4::from_elem((1, 1, 18, 22), 0.5);
        let out = cascade.forward(&x, false).unwrap();
        assert_eq!(out.global_probs.dim(), (1, 4, 18, 22));
        assert_eq!(out.choroid_prob.dim(), (1, 1, 18, 22));
    }
}
