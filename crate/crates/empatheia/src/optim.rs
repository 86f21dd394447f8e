//! AdamW with decoupled weight decay over named parameters.

use indexmap::IndexMap;
use ndarray::Array2;

use crate::params::{GradMap, ParamStore};

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, Array2<f64>>,
    v: IndexMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update over every parameter present in `grads`. Weight decay is
    /// applied directly to the weights (not through the moment estimates).
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            ndarray::Zip::from(&mut *v).and(g).for_each(|ve, &ge| {
                *ve += (1.0 - self.beta2) * ge * ge;
            });
            let w = store.get_mut(name);
            ndarray::Zip::from(&mut *w)
                .and(&*m)
                .and(&*v)
                .for_each(|we, &me, &ve| {
                    let mhat = me / bc1;
                    let vhat = ve / bc2;
                    *we -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *we);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn descends_a_quadratic() {
        // f(w) = (w - 3)^2, df/dw = 2(w - 3)
        let mut store = ParamStore::new();
        store.insert("w", array![[0.0]]);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..400 {
            let w = store.get("w")[(0, 0)];
            let mut grads = GradMap::new();
            grads.insert("w".into(), array![[2.0 * (w - 3.0)]]);
            opt.step(&mut store, &grads);
        }
        assert!((store.get("w")[(0, 0)] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn weight_decay_shrinks_unused_weights() {
        let mut store = ParamStore::new();
        store.insert("w", array![[10.0]]);
        let mut opt = AdamW::new(0.01, 0.1);
        for _ in 0..100 {
            let mut grads = GradMap::new();
            grads.insert("w".into(), array![[0.0]]);
            opt.step(&mut store, &grads);
        }
        assert!(store.get("w")[(0, 0)].abs() < 10.0);
    }

    #[test]
    fn untouched_params_stay_bitwise_identical() {
        let mut store = ParamStore::new();
        store.insert("a", array![[1.5]]);
        store.insert("b", array![[2.5]]);
        let before = store.group_checksum("b");
        let mut opt = AdamW::new(0.1, 0.01);
        let mut grads = GradMap::new();
        grads.insert("a".into(), array![[1.0]]);
        opt.step(&mut store, &grads);
        assert_eq!(store.group_checksum("b"), before);
        assert_ne!(store.group_checksum("a"), store.group_checksum("b"));
    }
}
