//! Parameter storage, dense layers and the adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffValue, Matrix, Result as DiffResult, Tape};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Order-sensitive digest of the listed parameters' bit patterns.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in ids {
            for x in self.values[id.0].iter() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<DiffValue>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> DiffValue {
        self.vars[id.0]
    }

    /// Routes `id` through another node, e.g. a leaf owned by a gradient check.
    pub fn with(mut self, id: ParamId, var: DiffValue) -> Self {
        self.vars[id.0] = var;
        self
    }

    pub fn grads(&self, tape: &Tape, ids: &[ParamId]) -> Vec<Matrix> {
        ids.iter().map(|id| tape.grad(self.vars[id.0])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: DiffValue) -> DiffValue {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// `y = x·W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Matrix::from_fn(in_dim, out_dim, |_, _| rng.range(-bound, bound));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Matrix::zeros(in_dim, out_dim)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: DiffValue) -> DiffResult<DiffValue> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of [`Linear`] layers with a shared hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    /// Applied after the last layer as well when set.
    pub output: Activation,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, hidden, output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: DiffValue) -> DiffResult<DiffValue> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            let act = if i == last { self.output } else { self.hidden };
            x = act.apply(tape, x);
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Zeroes the final layer so the network outputs a constant zero.
    pub fn zero_last(&self, store: &mut ParamStore) {
        if let Some(l) = self.layers.last() {
            store.get_mut(l.weight).fill(0.0);
            store.get_mut(l.bias).fill(0.0);
        }
    }
}

/// First/second-moment gradient descent (β₁ = 0.9, β₂ = 0.999, ε = 1e-8 by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to `ids` given matching gradients.
    pub fn update(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &[Matrix]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        for (id, g) in ids.iter().zip(grads) {
            let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(g.nrows(), g.ncols()));
            *m = &*m * self.beta1 + g * (1.0 - self.beta1);
            let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(g.nrows(), g.ncols()));
            *v = &*v * self.beta2 + g.component_mul(g) * (1.0 - self.beta2);
            let m = self.first[id.0].as_ref().unwrap();
            let v = self.second[id.0].as_ref().unwrap();
            let p = store.get_mut(*id);
            for k in 0..p.len() {
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Serializable snapshot of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Column-major values.
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn snapshot(&self) -> Vec<StoredParam> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| StoredParam {
                name: n.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.as_slice().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from a snapshot with identical names and shapes.
    pub fn restore(&mut self, stored: &[StoredParam]) -> std::result::Result<(), String> {
        if stored.len() != self.values.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                stored.len()
            ));
        }
        for (i, s) in stored.iter().enumerate() {
            let v = &self.values[i];
            if s.name != self.names[i] || s.rows != v.nrows() || s.cols != v.ncols() || s.data.len() != s.rows * s.cols {
                return Err(format!("parameter {i} ({}) does not match {}", s.name, self.names[i]));
            }
        }
        for (i, s) in stored.iter().enumerate() {
            self.values[i] = Matrix::from_column_slice(s.rows, s.cols, &s.data);
        }
        Ok(())
    }
}
