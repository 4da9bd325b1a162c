use super::{ParamGroup, ParamStore};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn step(&self, store: &mut ParamStore, group: ParamGroup, lr: f64) {
        let ids: Vec<_> = store.ids_in(group).collect();
        for id in ids {
            let (w, g, buf) = store.momentum_parts(id);
            for ((wi, gi), bi) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = gi + self.weight_decay * *wi;
                *bi = self.momentum * *bi + d;
                *wi -= lr * *bi;
            }
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&self, store: &mut ParamStore, group: ParamGroup) {
        let ids: Vec<_> = store.ids_in(group).collect();
        for id in ids {
            let (w, g, st) = store.adam_parts(id);
            st.steps += 1;
            let bc1 = 1.0 - self.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(st.steps as i32);
            for i in 0..w.len() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                w[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
        }
    }
}

/// Rescales the gradients of `group` so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, group: ParamGroup, max_norm: f64) -> f64 {
    let norm = store.grad_norm(group);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        let ids: Vec<_> = store.ids_in(group).collect();
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microtensor::{Shape4, Tensor4};

    fn store_with(v: f64, g: f64) -> (ParamStore, crate::microtensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert("p", ParamGroup::Weights, Tensor4::scalar(v))
            .unwrap();
        s.grad_mut(id)[0] = g;
        (s, id)
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (mut s, id) = store_with(1.0, 0.5);
        let opt = SgdMomentum {
            momentum: 0.9,
            weight_decay: 0.1,
        };
        opt.step(&mut s, ParamGroup::Weights, 0.1);
        // d = 0.5 + 0.1 = 0.6; w = 1 - 0.06
        assert!((s.value(id).data()[0] - 0.94).abs() < 1e-15);
        opt.step(&mut s, ParamGroup::Weights, 0.1);
        // d = 0.5 + 0.094 = 0.594; buf = 0.54 + 0.594 = 1.134
        assert!((s.value(id).data()[0] - (0.94 - 0.1134)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let (mut s, id) = store_with(0.0, 3.0);
        Adam::new(0.003, 0.0).step(&mut s, ParamGroup::Weights);
        assert!((s.value(id).data()[0] + 0.003).abs() < 1e-10);
        // architecture group untouched
        let mut s2 = ParamStore::new();
        let a = s2
            .insert(
                "a",
                ParamGroup::Architecture,
                Tensor4::zeros(Shape4::scalar()),
            )
            .unwrap();
        s2.grad_mut(a)[0] = 1.0;
        Adam::new(0.1, 0.0).step(&mut s2, ParamGroup::Weights);
        assert_eq!(s2.value(a).data()[0], 0.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let (mut s, id) = store_with(0.0, 10.0);
        let before = clip_grad_norm(&mut s, ParamGroup::Weights, 5.0);
        assert_eq!(before, 10.0);
        assert!((s.grad(id)[0] - 5.0).abs() < 1e-15);
    }
}
