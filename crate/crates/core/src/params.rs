//! Named parameter tensors, Adam optimization, and small MLP helpers.
//!
//! All trainable state lives in a [`ParamStore`] keyed by stable string
//! names; every optimization step inserts the tensors as graph leaves,
//! builds the forward pass, and applies Adam updates from the accumulated
//! gradients. BTreeMap keys keep iteration order deterministic.

use crate::autodiff::{Graph, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Array2<f64>>,
    pub adam: BTreeMap<String, AdamState>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Insert every tensor as a trainable leaf of `g`.
    pub fn leaves(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect()
    }

    /// One Adam step over every parameter that received a gradient.
    /// `lr_of` maps a parameter name to its learning rate; returning 0
    /// freezes the parameter.
    pub fn adam_step(
        &mut self,
        g: &Graph,
        vars: &BTreeMap<String, Var>,
        lr_of: &dyn Fn(&str) -> f64,
    ) {
        for (name, var) in vars {
            let Some(grad) = g.grad(*var) else { continue };
            let lr = lr_of(name);
            if lr == 0.0 {
                continue;
            }
            let value = self.tensors.get_mut(name).expect("parameter vanished");
            let state = self.adam.entry(name.clone()).or_insert_with(|| AdamState {
                m: Array2::zeros(value.dim()),
                v: Array2::zeros(value.dim()),
                t: 0,
            });
            state.t += 1;
            state.m.zip_mut_with(grad, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            state.v.zip_mut_with(grad, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            ndarray::Zip::from(&mut *value)
                .and(&state.m)
                .and(&state.v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                });
        }
    }

    /// Order-independent checksum over all tensors (used by the freeze
    /// contracts in tracking/mapping).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.tensors {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.iter() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Two-layer MLP with ReLU hidden activation, parameters stored under
/// `{name}.w1`, `{name}.b1`, `{name}.w2`, `{name}.b2`.
pub fn init_mlp(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    let kaiming = |rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
    };
    store.insert(&format!("{name}.w1"), kaiming(rng, d_in, d_in, d_hidden));
    store.insert(&format!("{name}.b1"), Array2::zeros((1, d_hidden)));
    store.insert(&format!("{name}.w2"), kaiming(rng, d_hidden, d_hidden, d_out));
    store.insert(&format!("{name}.b2"), Array2::zeros((1, d_out)));
}

pub fn mlp_forward(g: &mut Graph, vars: &BTreeMap<String, Var>, name: &str, x: Var) -> Var {
    let w1 = vars[&format!("{name}.w1")];
    let b1 = vars[&format!("{name}.b1")];
    let w2 = vars[&format!("{name}.w2")];
    let b2 = vars[&format!("{name}.b2")];
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let out = g.matmul(h, w2);
    g.add_row(out, b2)
}

/// Names of the four tensors belonging to one MLP.
pub fn mlp_param_names(name: &str) -> [String; 4] {
    [
        format!("{name}.w1"),
        format!("{name}.b1"),
        format!("{name}.w2"),
        format!("{name}.b2"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", ndarray::arr2(&[[5.0, -3.0]]));
        for _ in 0..500 {
            let mut g = Graph::new();
            let vars = store.leaves(&mut g);
            let sq = g.square(vars["x"]);
            let l = g.sum_all(sq);
            g.backward(l);
            store.adam_step(&g, &vars, &|_| 0.05);
        }
        assert!(store.get("x").iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_freezes_and_checksum_stable() {
        let mut store = ParamStore::new();
        store.insert("x", ndarray::arr2(&[[5.0]]));
        let before = store.checksum();
        let mut g = Graph::new();
        let vars = store.leaves(&mut g);
        let sq = g.square(vars["x"]);
        let l = g.sum_all(sq);
        g.backward(l);
        store.adam_step(&g, &vars, &|_| 0.0);
        assert_eq!(store.checksum(), before);
    }

    #[test]
    fn mlp_zero_final_layer_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_mlp(&mut store, "net", 4, 8, 2, &mut rng);
        store.insert("net.w2", Array2::zeros((8, 2)));
        store.insert("net.b2", ndarray::arr2(&[[0.7, -0.3]]));
        let mut g = Graph::new();
        let vars = store.leaves(&mut g);
        let x = g.constant(Array2::from_elem((5, 4), 1.3));
        let y = mlp_forward(&mut g, &vars, "net", x);
        for r in 0..5 {
            assert_eq!(g.value(y)[[r, 0]], 0.7);
            assert_eq!(g.value(y)[[r, 1]], -0.3);
        }
    }
}
