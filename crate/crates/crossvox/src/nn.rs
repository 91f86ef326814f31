//! Parameter storage, initialization, the Adam optimizer and the learning
//! rate schedule shared by both trainable models.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};

/// Index of a tensor inside its owning [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
}

#[derive(Debug)]
struct NamedTensor {
    name: String,
    value: Array2<f64>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.tensors.push(NamedTensor { name, value });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0].value
    }

    /// Replace a tensor wholesale (used when tables grow for new speakers).
    pub fn replace(&mut self, id: ParamId, value: Array2<f64>) {
        self.tensors[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t.name.as_str(), &t.value))
    }

    pub fn total_elems(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Bind a parameter into a tape as a trainable node.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.param(id, self.value(id))
    }

    /// Bind as a constant so no gradient reaches the parameter.
    pub fn bind_frozen(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.leaf(self.value(id).clone())
    }
}

/// Gradient accumulator aligned with a store, zeroed between optimizer steps.
pub struct GradAccum {
    grads: Vec<Array2<f64>>,
}

impl GradAccum {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradAccum {
            grads: store
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.value.dim()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &Array2<f64>) {
        self.grads[id.0] += grad;
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Collect every parameter gradient reachable from `root` into this
    /// accumulator. Returns the root's scalar value for convenience.
    pub fn backward(&mut self, tape: &Tape, root: NodeId) -> f64 {
        let grads = tape.backward(root);
        for (pid, g) in tape.param_grads(&grads) {
            self.add(pid, g);
        }
        tape.scalar(root)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: store
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.value.dim()))
                .collect(),
            v: store
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.value.dim()))
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..store.tensors.len() {
            let g = &grads.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.tensors[i].value;
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Constant learning rate until `decay_start`, then per-step exponential
/// decay floored at `min_lr`. Steps are 1-based.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_start: u64,
    pub decay_factor: f64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.decay_start {
            self.initial
        } else {
            let decayed = self.initial * self.decay_factor.powi((step - self.decay_start) as i32);
            decayed.max(self.min_lr)
        }
    }
}

/// Glorot-uniform initialization for a weight matrix.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Small-scale uniform initialization for embedding tables.
pub fn table_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_elem((rows, cols), 1.0)
}

/// `x @ w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_single_step_matches_hand_computation() {
        // one parameter [1,1] with gradient g: after one step with fresh
        // moments, update = lr * g/|g| / (1 + eps/|g|) ~= lr * sign(g)
        let mut store = ParamStore::new();
        let p = store.add("w", array![[2.0]]);
        let mut grads = GradAccum::zeros_like(&store);
        grads.add(p, &array![[0.5]]);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(&store, cfg);
        adam.step(&mut store, &grads, 0.1);

        // hand-computed: m=0.05, v=0.00025; mhat=0.5, vhat=0.25
        // delta = 0.1 * 0.5 / (0.5 + 1e-8)
        let expected = 2.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(p)[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_decays_and_floors() {
        let sched = LrSchedule {
            initial: 1e-3,
            decay_start: 10,
            decay_factor: 0.5,
            min_lr: 1e-5,
        };
        assert_eq!(sched.lr_at(1), 1e-3);
        assert_eq!(sched.lr_at(10), 1e-3);
        assert!((sched.lr_at(11) - 5e-4).abs() < 1e-15);
        // deep into decay the floor binds
        assert_eq!(sched.lr_at(60), 1e-5);
        // monotone nonincreasing
        let mut prev = f64::INFINITY;
        for s in 1..100 {
            let lr = sched.lr_at(s);
            assert!(lr <= prev + 1e-18);
            assert!(lr >= 1e-5);
            prev = lr;
        }
    }

    #[test]
    fn grad_accum_collects_from_tape() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 2.0], [3.0, 4.0]]);
        let mut tape = Tape::new();
        let wn = store.bind(&mut tape, w);
        let x = tape.leaf(array![[1.0, 0.0]]);
        let y = tape.matmul(x, wn);
        let target = tape.leaf(array![[0.0, 0.0]]);
        let loss = tape.mse(y, target);
        let mut acc = GradAccum::zeros_like(&store);
        let val = acc.backward(&tape, loss);
        assert!(val > 0.0);
        // row 1 of w is unused by this input
        assert_eq!(acc.get(w)[[1, 0]], 0.0);
        assert!(acc.get(w)[[0, 0]].abs() > 0.0);
    }

    #[test]
    fn frozen_binding_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 2.0]]);
        let mut tape = Tape::new();
        let wn = store.bind_frozen(&mut tape, w);
        let x = tape.leaf(array![[3.0], [4.0]]);
        let y = tape.matmul(x, wn);
        let t = tape.leaf(Array2::zeros((2, 2)));
        let loss = tape.mse(y, t);
        let mut acc = GradAccum::zeros_like(&store);
        acc.backward(&tape, loss);
        assert!(acc.get(w).iter().all(|&g| g == 0.0));
    }
}
