use super::params::{ParamId, ParamStore};

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Update every parameter in `ids` from its accumulated gradient and
    /// advance its step counter.
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let p = store.param_mut(id);
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let grad = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(grad) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(grad) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let lr = self.lr * p.lr_scale;
            let (m, v) = (p.m.data().to_vec(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(&m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
