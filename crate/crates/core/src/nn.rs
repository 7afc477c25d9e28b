//! Parameter plumbing shared by the network modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor};

/// Anything that owns named parameter tensors.
pub trait Module {
    /// Calls `f` once per parameter, in a fixed order, with a unique dotted
    /// name under `prefix`.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded uniform in `[-bound, bound]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::raw(shape, data)
}

/// `x W + b`, with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, output: usize, bias: bool) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: uniform(rng, vec![input, output], bound),
            bias: bias.then(|| Tensor::zeros(vec![1, output])),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(vec![input, output]),
            bias: bias.then(|| Tensor::zeros(vec![1, output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => tape.add_row(&y, b),
            None => Ok(y),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Replaces every parameter with a fresh leaf on `tape`, returning the leaves
/// in visiting order.
pub fn bind<M: Module + ?Sized>(module: &mut M, tape: &mut Tape) -> Vec<Tensor> {
    let mut leaves = Vec::new();
    module.visit_params("", &mut |_, t| {
        *t = tape.leaf(t.detach());
        leaves.push(t.clone());
    });
    leaves
}

/// Strips tape membership from every parameter.
pub fn unbind<M: Module + ?Sized>(module: &mut M) {
    module.visit_params("", &mut |_, t| *t = t.detach());
}

/// Snapshot of `(name, value)` pairs in visiting order.
pub fn named_params<M: Module + ?Sized>(module: &mut M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, t| out.push((name, t.detach())));
    out
}

pub fn param_count<M: Module + ?Sized>(module: &mut M) -> usize {
    let mut n = 0;
    module.visit_params("", &mut |_, t| n += t.numel());
    n
}
