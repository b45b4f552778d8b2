//! Parameter storage and the small dense building blocks shared by every encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Activation, Mat, Tape, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of every learnable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in ±1/sqrt(fan_in), fan_in = rows.
    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let value = Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn full(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Mat::from_elem((rows, cols), value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `x W (+ b)` on row vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.uniform(format!("{name}.weight"), d_in, d_out, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), 1, d_out));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Two-layer feed-forward block `d_in → d_ff → d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut impl Rng) -> Self {
        let (d_in, d_ff, d_out) = dims;
        Self {
            first: Linear::new(store, &format!("{name}.fc1"), d_in, d_ff, true, rng),
            second: Linear::new(store, &format!("{name}.fc2"), d_ff, d_out, true, rng),
            activation: Activation::Gelu,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.first.forward(tape, p, x);
        let h = tape.act(h, self.activation);
        self.second.forward(tape, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store.uniform("w", 16, 4, &mut rng);
        assert!(store.get(id).iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.find("w"), Some(id));
        assert_eq!(store.total_elements(), 64);
    }

    #[test]
    fn linear_forward_applies_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 2, 2, true, &mut rng);
        *store.get_mut(lin.weight) = array![[1.0, 2.0], [3.0, 4.0]];
        *store.get_mut(lin.bias.unwrap()) = array![[0.5, -0.5]];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(array![[1.0, 1.0]]);
        let y = lin.forward(&mut tape, &p, x);
        assert_eq!(tape.value(y), &array![[4.5, 5.5]]);
    }
}
