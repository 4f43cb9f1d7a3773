//! Thickness regression network.
//!
//! Four stride-2 conv blocks, global average pooling and a two-layer
//! regression head; a softplus output map keeps predicted thickness
//! non-negative. The forward pass returns an explicit tape instead of
//! mutating internal caches, so a frozen network can sit inside a loss term
//! and be evaluated (and differentiated w.r.t. its input) through `&self`
//! without ever being written to.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, Dense};
use super::ops;
use super::{NetworkConfig, NetworkError, Params};

const TRUNK_BLOCKS: usize = 4;

/// Starts the softplus head near a plausible thickness instead of zero, in
/// the regime where softplus is effectively linear.
const HEAD_BIAS_INIT: f64 = 25.0;

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

pub struct BioRegressor {
    pub config: NetworkConfig,
    convs: Vec<Conv2d>,
    fc1: Dense,
    fc2: Dense,
    frozen: bool,
}

/// Cached activations from one forward pass.
pub struct BioTape {
    conv_inputs: Vec<Array4<f64>>,
    relu_outputs: Vec<Array4<f64>>,
    gap_input_dim: (usize, usize, usize, usize),
    gap_out: Array2<f64>,
    fc1_relu: Array2<f64>,
    z: Array1<f64>,
}

/// Parameter gradients of one backward pass, in layer order.
pub struct BioGrads {
    convs: Vec<(Array4<f64>, Array1<f64>)>,
    fc1: (Array2<f64>, Array1<f64>),
    fc2: (Array2<f64>, Array1<f64>),
}

impl BioRegressor {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        if config.in_channels != 1 {
            return Err(NetworkError::BadConfig(
                "thickness regressor takes a single-channel input".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(TRUNK_BLOCKS);
        let mut c_in = 1;
        for i in 0..TRUNK_BLOCKS {
            let c_out = config.base_width << i;
            convs.push(Conv2d::new(c_in, c_out, 3, 2, 1, &mut rng));
            c_in = c_out;
        }
        let fc1 = Dense::new(c_in, config.bio_head_width, &mut rng);
        let mut fc2 = Dense::new(config.bio_head_width, 1, &mut rng);
        fc2.b[0] = HEAD_BIAS_INIT;
        Ok(Self {
            config: config.clone(),
            convs,
            fc1,
            fc2,
            frozen: false,
        })
    }

    /// Forward pass over a `[N, 1, H, W]` batch, returning one thickness per
    /// sample together with the tape needed for backprop.
    pub fn forward_tape(&self, x: &Array4<f64>) -> Result<(Array1<f64>, BioTape), NetworkError> {
        if x.dim().1 != 1 {
            return Err(NetworkError::ChannelMismatch {
                expected: 1,
                got: x.dim().1,
            });
        }
        let mut conv_inputs = Vec::with_capacity(TRUNK_BLOCKS);
        let mut relu_outputs = Vec::with_capacity(TRUNK_BLOCKS);
        let mut h = x.clone();
        for conv in &self.convs {
            conv_inputs.push(h.clone());
            let y = ops::conv2d_forward(&h, &conv.w, &conv.b, conv.stride, conv.pad);
            h = ops::relu(y);
            relu_outputs.push(h.clone());
        }
        let gap_input_dim = h.dim();
        let (n, c, hh, ww) = gap_input_dim;
        let mut gap_out = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                gap_out[[ni, ci]] =
                    h.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() / (hh * ww) as f64;
            }
        }
        let fc1_pre = self.fc1.forward(&gap_out);
        let fc1_relu = fc1_pre.mapv(|v| v.max(0.0));
        let z_mat = self.fc2.forward(&fc1_relu);
        let z = z_mat.index_axis(Axis(1), 0).to_owned();
        let y = z.mapv(softplus);
        Ok((
            y,
            BioTape {
                conv_inputs,
                relu_outputs,
                gap_input_dim,
                gap_out,
                fc1_relu,
                z,
            },
        ))
    }

    /// Predicted thickness per sample (inference only).
    pub fn predict(&self, x: &Array4<f64>) -> Result<Array1<f64>, NetworkError> {
        Ok(self.forward_tape(x)?.0)
    }

    fn backprop(
        &self,
        tape: &BioTape,
        d_out: &Array1<f64>,
        want_params: bool,
    ) -> (Array4<f64>, Option<BioGrads>) {
        // Softplus and the dense head.
        let dz = Array1::from_shape_fn(d_out.len(), |i| {
            d_out[i] * ops::sigmoid_scalar(tape.z[i])
        });
        let dz_mat = dz.insert_axis(Axis(1));
        let (g_fc1_relu, gw2, gb2) = self.fc2.backward(&tape.fc1_relu, &dz_mat);
        let mut g_fc1 = g_fc1_relu;
        ndarray::Zip::from(&mut g_fc1)
            .and(&tape.fc1_relu)
            .for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
        let (g_gap, gw1, gb1) = self.fc1.backward(&tape.gap_out, &g_fc1);

        // Spread the pooled gradient uniformly over the spatial grid.
        let (n, c, hh, ww) = tape.gap_input_dim;
        let scale = 1.0 / (hh * ww) as f64;
        let mut g = Array4::from_shape_fn((n, c, hh, ww), |(ni, ci, _, _)| {
            g_gap[[ni, ci]] * scale
        });

        let mut conv_grads = Vec::with_capacity(TRUNK_BLOCKS);
        for i in (0..TRUNK_BLOCKS).rev() {
            g = ops::relu_backward(&g, &tape.relu_outputs[i]);
            let conv = &self.convs[i];
            let (gx, grads) = ops::conv2d_backward(
                &tape.conv_inputs[i],
                &conv.w,
                &g,
                conv.stride,
                conv.pad,
                want_params,
            );
            if let Some(pair) = grads {
                conv_grads.push(pair);
            }
            g = gx;
        }
        conv_grads.reverse();
        let grads = want_params.then(|| BioGrads {
            convs: conv_grads,
            fc1: (gw1, gb1),
            fc2: (gw2, gb2),
        });
        (g, grads)
    }

    /// Gradient w.r.t. the input map only; never touches parameters. This
    /// is the path the biomarker regularizer uses on the frozen network.
    pub fn backward_input(&self, tape: &BioTape, d_out: &Array1<f64>) -> Array4<f64> {
        self.backprop(tape, d_out, false).0
    }

    /// Accumulates parameter gradients for a training step.
    pub fn backward_train(&mut self, tape: &BioTape, d_out: &Array1<f64>) -> Array4<f64> {
        assert!(!self.frozen, "training step on a frozen network");
        let (gx, grads) = self.backprop(tape, d_out, true);
        let grads = grads.expect("requested parameter gradients");
        for (conv, (gw, gb)) in self.convs.iter_mut().zip(grads.convs) {
            conv.gw += &gw;
            conv.gb += &gb;
        }
        self.fc1.gw += &grads.fc1.0;
        self.fc1.gb += &grads.fc1.1;
        self.fc2.gw += &grads.fc2.0;
        self.fc2.gb += &grads.fc2.1;
        gx
    }

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

impl Params for BioRegressor {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit(&format!("conv{i}"), f);
        }
        self.fc1.visit("fc1", f);
        self.fc2.visit("fc2", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_mut(&format!("conv{i}"), f);
        }
        self.fc1.visit_mut("fc1", f);
        self.fc2.visit_mut("fc2", f);
    }

    fn visit_params_with_grads_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_with_grads_mut(&format!("conv{i}"), f);
        }
        self.fc1.visit_with_grads_mut("fc1", f);
        self.fc2.visit_with_grads_mut("fc2", f);
    }

    fn zero_grads(&mut self) {
        for conv in &mut self.convs {
            conv.zero_grads();
        }
        self.fc1.zero_grads();
        self.fc2.zero_grads();
    }
}
