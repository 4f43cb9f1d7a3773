//! Encoder-decoder segmentation network with skip connections.
//!
//! `depth` down-blocks of two 3x3 convolutions each (channel-doubling, 2x
//! max-pool downsampling), mirrored up-blocks that upsample with a learned
//! 2x2 transposed convolution and concatenate the matching encoder feature,
//! and a final 1x1 convolution to the output channels. The head normalizes
//! per pixel: channel softmax for the multi-layer map, sigmoid for the
//! binary choroid map, so outputs are probabilities by architecture, not by
//! training.

use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ConvTranspose2x2, MaxPool2, Relu};
use super::ops;
use super::{NetworkConfig, NetworkError, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegHead {
    /// Per-pixel channel softmax; outputs sum to 1 across channels.
    Softmax,
    /// Independent per-pixel sigmoid in (0, 1).
    Sigmoid,
}

struct DoubleConv {
    c1: Conv2d,
    r1: Relu,
    c2: Conv2d,
    r2: Relu,
}

impl DoubleConv {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            r1: Relu::new(),
            c2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            r2: Relu::new(),
        }
    }

    fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        let x = self.r1.forward(self.c1.forward(x, train), train);
        self.r2.forward(self.c2.forward(x, train), train)
    }

    fn backward(&mut self, gy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let g = self.r2.backward(gy);
        let g = self.c2.backward(&g, accumulate);
        let g = self.r1.backward(&g);
        self.c1.backward(&g, accumulate)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.c1.visit_mut(&format!("{prefix}.c1"), f);
        self.c2.visit_mut(&format!("{prefix}.c2"), f);
    }

    fn visit_with_grads_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        self.c1.visit_with_grads_mut(&format!("{prefix}.c1"), f);
        self.c2.visit_with_grads_mut(&format!("{prefix}.c2"), f);
    }

    fn zero_grads(&mut self) {
        self.c1.zero_grads();
        self.c2.zero_grads();
    }
}

struct DownBlock {
    pool: MaxPool2,
    conv: DoubleConv,
}

struct UpBlock {
    up: ConvTranspose2x2,
    conv: DoubleConv,
}

impl UpBlock {
    /// Upsample the deep feature, concatenate the encoder skip, convolve.
    fn forward(&mut self, deep: Array4<f64>, skip: &Array4<f64>, train: bool) -> Array4<f64> {
        let up = self.up.forward(deep, train);
        let cat = ops::concat_channels(&up, skip);
        self.conv.forward(cat, train)
    }

    /// Returns gradients for the deep input and for the skip connection.
    fn backward(&mut self, gy: &Array4<f64>, accumulate: bool) -> (Array4<f64>, Array4<f64>) {
        let g_cat = self.conv.backward(gy, accumulate);
        let (g_up, g_skip) = ops::split_channels(&g_cat, self.up.out_channels());
        (self.up.backward(&g_up, accumulate), g_skip)
    }
}

pub struct Unet {
    pub config: NetworkConfig,
    pub head: SegHead,
    inc: DoubleConv,
    downs: Vec<DownBlock>,
    ups: Vec<UpBlock>,
    out: Conv2d,
    head_cache: Option<Array4<f64>>,
    frozen: bool,
}

impl Unet {
    pub fn new(config: &NetworkConfig, head: SegHead, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = config.base_width;
        let width = |level: usize| base << level;

        let inc = DoubleConv::new(config.in_channels, base, &mut rng);
        let downs = (0..config.depth)
            .map(|i| DownBlock {
                pool: MaxPool2::new(),
                conv: DoubleConv::new(width(i), width(i + 1), &mut rng),
            })
            .collect();
        // ups[i] lifts level i+1 back to level i; applied deepest-first.
        let ups = (0..config.depth)
            .map(|i| UpBlock {
                up: ConvTranspose2x2::new(width(i + 1), width(i), &mut rng),
                conv: DoubleConv::new(2 * width(i), width(i), &mut rng),
            })
            .collect();
        let out = Conv2d::new(base, config.out_channels, 1, 1, 0, &mut rng);
        Ok(Self {
            config: config.clone(),
            head,
            inc,
            downs,
            ups,
            out,
            head_cache: None,
            frozen: false,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<(), NetworkError> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(NetworkError::ChannelMismatch {
                expected: self.config.in_channels,
                got: c,
            });
        }
        let m = 1usize << self.config.depth;
        if h % m != 0 || w % m != 0 {
            return Err(NetworkError::IndivisibleDims {
                h,
                w,
                depth: self.config.depth,
            });
        }
        Ok(())
    }

    /// Runs the network and returns per-pixel probabilities.
    pub fn forward(&mut self, x: Array4<f64>, train: bool) -> Result<Array4<f64>, NetworkError> {
        self.check_input(&x)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        let mut h = self.inc.forward(x, train);
        for down in &mut self.downs {
            skips.push(h.clone());
            let pooled = down.pool.forward(&h, train);
            h = down.conv.forward(pooled, train);
        }
        for i in (0..self.ups.len()).rev() {
            let skip = skips.pop().expect("one skip per up block");
            h = self.ups[i].forward(h, &skip, train);
        }
        let logits = self.out.forward(h, train);
        let probs = match self.head {
            SegHead::Softmax => ops::softmax_channels(&logits),
            SegHead::Sigmoid => ops::sigmoid(logits),
        };
        self.head_cache = train.then(|| probs.clone());
        Ok(probs)
    }

    /// Backpropagates a gradient w.r.t. the output probabilities and
    /// returns the gradient w.r.t. the input. Parameter gradients
    /// accumulate unless the network is frozen.
    pub fn backward(&mut self, d_probs: &Array4<f64>) -> Array4<f64> {
        self.backward_parts(Some(d_probs), None)
    }

    /// Backward pass fed at two points: `d_probs` flows through the output
    /// normalization, `d_logits` adds directly onto the pre-normalization
    /// gradient. Cross-entropy losses feed the logit side as `p - target`,
    /// which stays bounded even where the head saturates and the
    /// probability-space gradient would vanish or explode.
    pub fn backward_parts(
        &mut self,
        d_probs: Option<&Array4<f64>>,
        d_logits: Option<&Array4<f64>>,
    ) -> Array4<f64> {
        let accumulate = !self.frozen;
        let probs = self
            .head_cache
            .take()
            .expect("backward without cached forward");
        let mut d_logits_total = match d_probs {
            Some(dp) => match self.head {
                SegHead::Softmax => ops::softmax_backward(dp, &probs),
                SegHead::Sigmoid => ops::sigmoid_backward(dp, &probs),
            },
            None => Array4::zeros(probs.raw_dim()),
        };
        if let Some(dl) = d_logits {
            d_logits_total += dl;
        }
        let d_logits = d_logits_total;
        let mut g = self.out.backward(&d_logits, accumulate);
        let mut skip_grads = Vec::with_capacity(self.ups.len());
        for up in &mut self.ups {
            let (gh, gs) = up.backward(&g, accumulate);
            skip_grads.push(gs);
            g = gh;
        }
        for i in (0..self.downs.len()).rev() {
            let down = &mut self.downs[i];
            let g_pool = down.conv.backward(&g, accumulate);
            g = down.pool.backward(&g_pool);
            g += &skip_grads[i];
        }
        self.inc.backward(&g, accumulate)
    }

    /// Marks every parameter non-trainable and records the digest at the
    /// freeze point.
    pub fn freeze(&mut self) -> String {
        self.frozen = true;
        super::param_digest(self)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

impl Params for Unet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.inc.visit("inc", f);
        for (i, down) in self.downs.iter().enumerate() {
            down.conv.visit(&format!("down{i}"), f);
        }
        for (i, up) in self.ups.iter().enumerate() {
            up.up.visit(&format!("up{i}.t"), f);
            up.conv.visit(&format!("up{i}.conv"), f);
        }
        self.out.visit("out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.inc.visit_mut("inc", f);
        for (i, down) in self.downs.iter_mut().enumerate() {
            down.conv.visit_mut(&format!("down{i}"), f);
        }
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.up.visit_mut(&format!("up{i}.t"), f);
            up.conv.visit_mut(&format!("up{i}.conv"), f);
        }
        self.out.visit_mut("out", f);
    }

    fn visit_params_with_grads_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        self.inc.visit_with_grads_mut("inc", f);
        for (i, down) in self.downs.iter_mut().enumerate() {
            down.conv.visit_with_grads_mut(&format!("down{i}"), f);
        }
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.up.visit_with_grads_mut(&format!("up{i}.t"), f);
            up.conv.visit_with_grads_mut(&format!("up{i}.conv"), f);
        }
        self.out.visit_with_grads_mut("out", f);
    }

    fn zero_grads(&mut self) {
        self.inc.zero_grads();
        for down in &mut self.downs {
            down.conv.zero_grads();
        }
        for up in &mut self.ups {
            up.up.zero_grads();
            up.conv.zero_grads();
        }
        self.out.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{param_count, param_digest};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn small_cfg(in_ch: usize, out_ch: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels: in_ch,
            out_channels: out_ch,
            base_width: 4,
            depth: 2,
            bio_head_width: 8,
        }
    }

    #[test]
    fn softmax_head_outputs_normalized_probabilities() {
        let mut net = Unet::new(&small_cfg(1, 12), SegHead::Softmax, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.random_range(0.0..1.0));
        let p = net.forward(x, false).unwrap();
        assert_eq!(p.dim(), (1, 12, 16, 16));
        for iy in 0..16 {
            for ix in 0..16 {
                let s: f64 = (0..12).map(|c| p[[0, c, iy, ix]]).sum();
                assert!((s - 1.0).abs() < 1e-5, "sum {s} at ({iy}, {ix})");
            }
        }
    }

    #[test]
    fn sigmoid_head_outputs_open_unit_interval() {
        let mut net = Unet::new(&small_cfg(13, 1), SegHead::Sigmoid, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((2, 13, 16, 16), |_| rng.random_range(-1.0..1.0));
        let p = net.forward(x, false).unwrap();
        assert_eq!(p.dim(), (2, 1, 16, 16));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_wrong_channels_and_indivisible_dims() {
        let mut net = Unet::new(&small_cfg(1, 12), SegHead::Softmax, 1).unwrap();
        let bad_c = Array4::<f64>::zeros((1, 2, 16, 16));
        assert!(matches!(
            net.forward(bad_c, false),
            Err(NetworkError::ChannelMismatch { .. })
        ));
        let bad_hw = Array4::<f64>::zeros((1, 1, 18, 16));
        assert!(matches!(
            net.forward(bad_hw, false),
            Err(NetworkError::IndivisibleDims { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let cfg = small_cfg(1, 3);
        let mut a = Unet::new(&cfg, SegHead::Softmax, 9).unwrap();
        let mut b = Unet::new(&cfg, SegHead::Softmax, 9).unwrap();
        assert_eq!(param_digest(&a), param_digest(&b));
        let x = Array4::from_elem((1, 1, 16, 16), 0.3);
        let ya = a.forward(x.clone(), false).unwrap();
        let yb = b.forward(x, false).unwrap();
        assert_eq!(ya, yb);
    }

    /// Parameter count of the default architecture, frozen as a regression
    /// constant after the first build.
    #[test]
    fn default_parameter_count_is_stable() {
        let net = Unet::new(&NetworkConfig::default(), SegHead::Softmax, 0).unwrap();
        assert_eq!(param_count(&net), 31_031_308);
    }

    #[test]
    fn batch_order_permutes_outputs_identically() {
        let mut net = Unet::new(&small_cfg(1, 2), SegHead::Sigmoid, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.random_range(0.0..1.0));
        let b = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.random_range(0.0..1.0));
        let ab = ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).unwrap();
        let ba = ndarray::concatenate(ndarray::Axis(0), &[b.view(), a.view()]).unwrap();
        let y_ab = net.forward(ab, false).unwrap();
        let y_ba = net.forward(ba, false).unwrap();
        assert_eq!(
            y_ab.index_axis(ndarray::Axis(0), 0),
            y_ba.index_axis(ndarray::Axis(0), 1)
        );
        assert_eq!(
            y_ab.index_axis(ndarray::Axis(0), 1),
            y_ba.index_axis(ndarray::Axis(0), 0)
        );
    }
}
