use super::params::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its gradient buffer. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn minimises_a_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0, -2.0]), true).unwrap();
        let f = store.add("f", Tensor::vector(vec![1.0, 1.0]), false).unwrap();
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..300 {
            store.zero_grad();
            let grads = {
                let mut g = Graph::new();
                let a = g.param(&store, w);
                let b = g.param(&store, f);
                let s = g.mul(a, b).unwrap();
                let sq = g.square(s).unwrap();
                let l = g.mean(sq).unwrap();
                g.backward(l).unwrap()
            };
            store.accumulate(&grads);
            opt.step(&mut store);
        }
        assert!(store.value(w).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.value(f).data(), &[1.0, 1.0]);
    }
}
