//! Parameter storage and the handful of layers the models are built from.
//!
//! Parameters live as plain `Vec<f64>` blocks in a [`ParamStore`]. A forward
//! pass first *binds* the store, turning every block into a leaf tensor
//! (tracked or constant), and layers look their weights up by [`ParamId`].

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{numel, Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    /// Id of the `i`-th parameter added to a store.
    pub fn nth(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> ParamId {
        assert_eq!(value.len(), numel(shape), "parameter value does not match shape");
        self.entries.push(ParamEntry { name: name.into(), shape: shape.to_vec(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Layout fingerprint: names and shapes, in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect()
    }

    /// Copy values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.layout() != other.layout() {
            return Err("parameter layout mismatch".into());
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }

    /// Turn every parameter into a leaf tensor. With `track = false` the
    /// tensors are constants and no gradient is recorded for them.
    pub fn bind(&self, track: bool) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                if track {
                    Tensor::leaf(e.value.clone(), &e.shape)
                } else {
                    Tensor::new(e.value.clone(), &e.shape)
                }
            })
            .collect();
        Bound { tensors }
    }

    /// Per-parameter gradients from a backward sweep over tensors bound from this store.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Vec<f64>> {
        assert_eq!(bound.tensors.len(), self.entries.len(), "bound set is from another store");
        bound.tensors.iter().map(|t| grads.get_or_zeros(t)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

/// Parameters of a store materialized as tensors for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Index<ParamId> for Bound {
    type Output = Tensor;
    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

/// Uniform `(-bound, bound)` values.
pub fn uniform_init<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn normal_init<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], uniform_init(rng, in_dim * out_dim, bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], vec![0.0; out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    /// `x`: `[.., in_dim]` of rank 2 or 3.
    pub fn forward(&self, p: &Bound, x: &Tensor) -> Tensor {
        let y = x.matmul(&p[self.weight]);
        match self.bias {
            Some(b) => y.add(&p[b]),
            None => y,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (3.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            uniform_init(rng, out_ch * fan_in, bound),
        );
        let bias = store.add(format!("{name}.bias"), &[out_ch], vec![0.0; out_ch]);
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Tensor {
        x.conv2d(&p[self.weight], Some(&p[self.bias]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.add(format!("{name}.table"), &[vocab, dim], normal_init(rng, vocab * dim, 1.0 / (dim as f64).sqrt()));
        Self { table, dim }
    }

    /// `[len, dim]` rows for `indices`.
    pub fn forward(&self, p: &Bound, indices: &[usize]) -> Tensor {
        p[self.table].index_select(indices)
    }
}

/// Gated recurrent unit with reset/update/candidate gates packed along the last axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), &[input, 3 * hidden], uniform_init(rng, input * 3 * hidden, bound));
        let w_hh = store.add(format!("{name}.w_hh"), &[hidden, 3 * hidden], uniform_init(rng, hidden * 3 * hidden, bound));
        let b_ih = store.add(format!("{name}.b_ih"), &[3 * hidden], vec![0.0; 3 * hidden]);
        let b_hh = store.add(format!("{name}.b_hh"), &[3 * hidden], vec![0.0; 3 * hidden]);
        Self { w_ih, w_hh, b_ih, b_hh, hidden }
    }

    /// `x`: `[B, input]`, `h`: `[B, hidden]` → new hidden state `[B, hidden]`.
    pub fn step(&self, p: &Bound, x: &Tensor, h: &Tensor) -> Tensor {
        let hd = self.hidden;
        let gi = x.matmul(&p[self.w_ih]).add(&p[self.b_ih]);
        let gh = h.matmul(&p[self.w_hh]).add(&p[self.b_hh]);
        let r = gi.narrow(1, 0, hd).add(&gh.narrow(1, 0, hd)).sigmoid();
        let z = gi.narrow(1, hd, hd).add(&gh.narrow(1, hd, hd)).sigmoid();
        let n = gi.narrow(1, 2 * hd, hd).add(&r.mul(&gh.narrow(1, 2 * hd, hd))).tanh();
        // h' = n + z * (h - n)
        n.add(&z.mul(&h.sub(&n)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_untracked_records_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, true);
        let p = store.bind(false);
        let x = Tensor::leaf(vec![1.0, 2.0, 3.0], &[1, 3]);
        let y = lin.forward(&p, &x).sum_all();
        let g = y.backward();
        assert!(g.get(&p[lin.weight]).is_none());
        assert!(g.get(&x).is_some());
    }

    #[test]
    fn gru_hidden_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, &mut rng, "g", 4, 5);
        let p = store.bind(false);
        let mut h = Tensor::zeros(&[2, 5]);
        for t in 0..20 {
            let x = Tensor::full(&[2, 4], 10.0 * (t as f64).sin());
            h = cell.step(&p, &x, &h);
        }
        assert!(h.data().iter().all(|v| v.abs() <= 1.0));
    }
}
