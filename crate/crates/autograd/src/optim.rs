use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, one block per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restore state saved from [`Adam::steps_taken`] and [`Adam::moments`].
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<(), String> {
        let fits = |x: &[Vec<f64>]| x.len() == self.m.len() && x.iter().zip(&self.m).all(|(a, b)| a.len() == b.len());
        if !fits(&m) || !fits(&v) {
            return Err("optimizer state does not match the parameter layout".into());
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match optimizer state");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = &mut store.entry_mut(crate::nn::ParamId::nth(i)).value;
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                value[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", &[2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let p = store.bind(true);
            let loss = p[id].sub(&Tensor::new(vec![1.0, 0.5], &[2])).square().sum_all();
            let g = loss.backward();
            let grads = store.collect_grads(&p, &g);
            opt.step(&mut store, &grads);
        }
        let x = &store.entry(id).value;
        assert!((x[0] - 1.0).abs() < 1e-2 && (x[1] - 0.5).abs() < 1e-2, "{x:?}");
    }
}
