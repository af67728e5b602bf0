//! Small building blocks shared by the encoders, projector and critic.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Param, Tape, Var};

/// Visits named parameters. Names are `/`-separated and stable; checkpoints
/// and optimizer state are keyed by them.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// `N(0, 1/fan_in)` weights.
pub fn fan_in_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    gaussian(rows, cols, (1.0 / rows as f64).sqrt(), rng)
}

/// Affine map `x W + b` acting on row vectors; `W` is `in×out`, `b` is `1×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(fan_in_init(input, output, rng)),
            bias: Param::new(Array2::zeros((1, output))),
        }
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array2<f64>) -> Self {
        assert_eq!(bias.dim(), (1, weight.ncols()), "bias must be 1×out");
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_parts(Array2::eye(dim), Array2::zeros((1, dim)))
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.matmul(tape.param(&self.weight))
            .add_row(tape.param(&self.bias))
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
