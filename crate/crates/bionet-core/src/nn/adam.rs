//! Adaptive-moment optimizer with the method's canonical defaults.

use ndarray::ArrayD;

use super::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second-moment state per parameter tensor, aligned with the
/// network's visitation order.
pub struct Adam {
    t: u64,
    slots: Vec<(String, ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new<P: Params>(net: &P) -> Self {
        let mut slots = Vec::new();
        net.visit_params(&mut |name, view| {
            slots.push((
                name.to_string(),
                ArrayD::zeros(view.raw_dim()),
                ArrayD::zeros(view.raw_dim()),
            ));
        });
        Self { t: 0, slots }
    }

    /// Applies one update from the gradients currently accumulated in the
    /// network, then leaves the gradients untouched (callers zero them per
    /// batch).
    pub fn step<P: Params>(&mut self, net: &mut P, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut i = 0;
        let slots = &mut self.slots;
        net.visit_params_with_grads_mut(&mut |name, mut w, g| {
            let (slot_name, m, v) = &mut slots[i];
            debug_assert_eq!(slot_name, name, "parameter order changed");
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            });
            ndarray::Zip::from(&mut w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * (m / bc1) / ((v / bc2).sqrt() + EPSILON);
            });
            i += 1;
        });
        assert_eq!(i, slots.len(), "parameter count changed");
    }
}
