//! Parameter-owning layers with cached activations for backprop.
//!
//! `forward(.., train: true)` stores whatever the matching `backward` needs;
//! inference passes skip the caches. Parameter gradients accumulate into the
//! layer's own `gw`/`gb` buffers so an optimizer can visit them in a stable
//! order.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops;

/// He-normal initialization for a `[Cout, Cin, k, k]` kernel.
fn he_kernel(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
    fan_in: usize,
) -> Array4<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Array4::from_shape_fn(shape, |_| normal.sample(rng))
}

pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: he_kernel(rng, (c_out, c_in, k, k), c_in * k * k),
            b: Array1::zeros(c_out),
            gw: Array4::zeros((c_out, c_in, k, k)),
            gb: Array1::zeros(c_out),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        let y = ops::conv2d_forward(&x, &self.w, &self.b, self.stride, self.pad);
        self.cache = train.then_some(x);
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let x = self.cache.take().expect("backward without cached forward");
        let (gx, grads) =
            ops::conv2d_backward(&x, &self.w, gy, self.stride, self.pad, accumulate);
        if let Some((gw, gb)) = grads {
            self.gw += &gw;
            self.gb += &gb;
        }
        gx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }

    pub fn visit_with_grads_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        f(
            &format!("{prefix}.w"),
            self.w.view_mut().into_dyn(),
            self.gw.view().into_dyn(),
        );
        f(
            &format!("{prefix}.b"),
            self.b.view_mut().into_dyn(),
            self.gb.view().into_dyn(),
        );
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

/// 2x2 stride-2 transposed convolution (learned upsampling).
pub struct ConvTranspose2x2 {
    pub w: Array4<f64>, // [Cin, Cout, 2, 2]
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    cache: Option<Array4<f64>>,
}

impl ConvTranspose2x2 {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / (c_in * 4) as f64).sqrt()).expect("valid std");
        Self {
            w: Array4::from_shape_fn((c_in, c_out, 2, 2), |_| normal.sample(rng)),
            b: Array1::zeros(c_out),
            gw: Array4::zeros((c_in, c_out, 2, 2)),
            gb: Array1::zeros(c_out),
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        let y = ops::convt2x2_forward(&x, &self.w, &self.b);
        self.cache = train.then_some(x);
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let x = self.cache.take().expect("backward without cached forward");
        let (gx, grads) = ops::convt2x2_backward(&x, &self.w, gy, accumulate);
        if let Some((gw, gb)) = grads {
            self.gw += &gw;
            self.gb += &gb;
        }
        gx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }

    pub fn visit_with_grads_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        f(
            &format!("{prefix}.w"),
            self.w.view_mut().into_dyn(),
            self.gw.view().into_dyn(),
        );
        f(
            &format!("{prefix}.b"),
            self.b.view_mut().into_dyn(),
            self.gb.view().into_dyn(),
        );
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

pub struct Relu {
    mask: Option<Array4<u8>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: Array4<f64>, train: bool) -> Array4<f64> {
        if train {
            self.mask = Some(x.mapv(|v| u8::from(v > 0.0)));
        }
        ops::relu(x)
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.take().expect("backward without cached forward");
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&mask).for_each(|g, &m| {
            if m == 0 {
                *g = 0.0;
            }
        });
        gx
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

pub struct MaxPool2 {
    cache: Option<(Array4<u8>, usize, usize)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (h, w) = (x.dim().2, x.dim().3);
        let (y, arg) = ops::maxpool2_forward(x);
        self.cache = train.then_some((arg, h, w));
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let (arg, h, w) = self.cache.take().expect("backward without cached forward");
        ops::maxpool2_backward(gy, &arg, h, w)
    }
}

impl Default for MaxPool2 {
    fn default() -> Self {
        Self::new()
    }
}

/// Fully connected layer `y = x W^T + b` for the regression head.
pub struct Dense {
    pub w: Array2<f64>, // [out, in]
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Dense {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("valid std");
        Self {
            w: Array2::from_shape_fn((d_out, d_in), |_| normal.sample(rng)),
            b: Array1::zeros(d_out),
            gw: Array2::zeros((d_out, d_in)),
            gb: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Returns `(gx, gw, gb)`; the caller decides whether to accumulate.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        gy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let gx = gy.dot(&self.w);
        let gw = gy.t().dot(x);
        let gb = gy.sum_axis(ndarray::Axis(0));
        (gx, gw, gb)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }

    pub fn visit_with_grads_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        f(
            &format!("{prefix}.w"),
            self.w.view_mut().into_dyn(),
            self.gw.view().into_dyn(),
        );
        f(
            &format!("{prefix}.b"),
            self.b.view_mut().into_dyn(),
            self.gb.view().into_dyn(),
        );
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}
