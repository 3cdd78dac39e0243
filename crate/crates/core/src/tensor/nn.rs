use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub const fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Fills every parameter whose name starts with `prefix`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for (name, t) in &mut self.entries {
            if name.starts_with(prefix) {
                t.data_mut().fill(value);
            }
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Affine map `x · W + b` on token-major input `[n, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new([input, output], w).expect("sized"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = *tape.shape(x).last().unwrap_or(&0);
        if width != self.input {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input, self.output],
            });
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Two-layer perceptron: linear, nonlinearity, linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
            activation,
        }
    }

    pub fn input(&self) -> usize {
        self.first.input
    }

    pub fn output(&self) -> usize {
        self.second.output
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Identity => h,
        };
        self.second.forward(tape, h)
    }

    /// Sets every weight and bias of both layers to `value`.
    pub fn fill(&self, store: &mut ParamStore, value: f64) {
        for id in [self.first.weight, self.first.bias, self.second.weight, self.second.bias] {
            store.get_mut(id).data_mut().fill(value);
        }
    }

    /// Makes the perceptron output the constant `value` in every channel.
    pub fn force_constant(&self, store: &mut ParamStore, value: f64) {
        self.fill(store, 0.0);
        store.get_mut(self.second.bias).data_mut().fill(value);
    }
}

/// Row-wise layer normalization with learned gain and offset.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([width], 1.0)),
            offset: store.add(format!("{name}.offset"), Tensor::zeros([width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, Self::EPS)?;
        let g = tape.param(self.gain);
        let b = tape.param(self.offset);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}
