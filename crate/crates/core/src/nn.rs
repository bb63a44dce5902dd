//! Dense layers and perceptrons, usable both on a [`Tape`] and as plain
//! row-major inference kernels.

use diffmath::{gemm, Array, Gradients, Tape, Var, LEAKY_SLOPE};
use rand::Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn on_tape(self, t: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Tanh => t.tanh(x)?,
            Activation::Relu => t.relu(x)?,
            Activation::LeakyRelu => t.leaky_relu(x, LEAKY_SLOPE)?,
        })
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }
}

/// Anything holding named trainable arrays. Both visitors walk parameters in
/// the same order as the corresponding `bind` registers them.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }
}

/// Gradients of the registered parameters, in registration order.
pub fn collect_grads(grads: &Gradients, reg: &[Var]) -> Result<Vec<Array>> {
    reg.iter().map(|&v| grads.wrt(v).map_err(Into::into)).collect()
}

fn bind_array(t: &mut Tape, a: &Array, train: bool, reg: &mut Vec<Var>) -> Var {
    if train {
        let v = t.param(a.clone());
        reg.push(v);
        v
    } else {
        t.constant(a.clone())
    }
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array,
    pub bias: Array,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let k = 1.0 / (input as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-k..k)).collect();
        let b = (0..output).map(|_| rng.random_range(-k..k)).collect();
        Self {
            weight: Array::new(vec![input, output], w).expect("finite init"),
            bias: Array::new(vec![output], b).expect("finite init"),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array::zeros(&[input, output]), bias: Array::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, t: &mut Tape, train: bool, reg: &mut Vec<Var>) -> BoundLinear {
        BoundLinear {
            w: bind_array(t, &self.weight, train, reg),
            b: bind_array(t, &self.bias, train, reg),
        }
    }

    /// Plain forward over `n` rows.
    pub fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (i, o) = (self.input_dim(), self.output_dim());
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(self.bias.data());
        }
        gemm(n, i, o, x, false, self.weight.data(), false, &mut y, true);
        y
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    /// `x` is `[n, in]`.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let y = t.matmul(x, self.w)?;
        Ok(t.add(y, self.b)?)
    }
}

/// Fully connected network with one activation on hidden layers and another on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`. With `zero_last` the final layer starts at zero.
    pub fn new<R: Rng>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if zero_last && i == n - 1 {
                    Linear::zeros(dims[i], dims[i + 1])
                } else {
                    Linear::new(dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers, hidden, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn bind(&self, t: &mut Tape, train: bool, reg: &mut Vec<Var>) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(t, train, reg)).collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    pub fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward_rows(&h, n);
            let act = if i == last { self.output } else { self.hidden };
            if act != Activation::Identity {
                h.iter_mut().for_each(|v| *v = act.eval(*v));
            }
        }
        h
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl BoundMlp {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(t, h)?;
            h = if i == last { self.output } else { self.hidden }.on_tape(t, h)?;
        }
        Ok(h)
    }
}
