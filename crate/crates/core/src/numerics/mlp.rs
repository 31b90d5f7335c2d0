use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::matrix::{matmul, matmul_nt, matmul_tn, sigmoid, Matrix};
use crate::error::{Error, Result};

/// A trainable matrix together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Affine map `x · W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn zeros(name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), Matrix::zeros(input, output)),
            bias: Parameter::new(format!("{name}.bias"), Matrix::zeros(1, output)),
        }
    }

    /// Uniform initialisation in `±sqrt(gain / fan_in)`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(name, input, output);
        if input > 0 {
            let bound = (gain / input as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in layer.weight.value.data_mut() {
                *v = dist.sample(rng);
            }
        }
        layer
    }

    pub fn input_width(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_width() {
            return Err(Error::dim("Linear::forward", self.input_width(), x.cols()));
        }
        let mut out = matmul(x, &self.weight.value)?;
        out.add_row_vector(&self.bias.value)?;
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        if upstream.cols() != self.output_width() || upstream.rows() != x.rows() {
            return Err(Error::dim(
                "Linear::backward",
                format!("{}x{}", x.rows(), self.output_width()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        self.weight.grad.add_assign(&matmul_tn(x, upstream)?)?;
        self.bias.grad.add_assign(&upstream.column_sums())?;
        matmul_nt(upstream, &self.weight.value)
    }

    pub fn parameters(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// What follows the second linear layer of an [`Mlp2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalActivation {
    None,
    Sigmoid,
    /// `Sigmoid(ReLU(·))`; the output can never drop below 0.5.
    ReluSigmoid,
}

/// Activations kept from [`Mlp2::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    input: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    output_pre: Matrix,
    /// Value fed to the sigmoid (equals `output` when there is none).
    logits: Matrix,
    output: Matrix,
}

impl Mlp2Cache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Pre-sigmoid values, i.e. what a logit-space loss should consume.
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }
}

/// `final(Linear₂(ReLU(Linear₁(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: FinalActivation,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: FinalActivation,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::init(&format!("{name}.fc1"), input, hidden, 6.0, rng),
            second: Linear::init(&format!("{name}.fc2"), hidden, output, 3.0, rng),
            activation,
        }
    }

    pub fn zeros(
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: FinalActivation,
    ) -> Self {
        Self {
            first: Linear::zeros(&format!("{name}.fc1"), input, hidden),
            second: Linear::zeros(&format!("{name}.fc2"), hidden, output),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.first.input_width()
    }

    pub fn hidden_width(&self) -> usize {
        self.first.output_width()
    }

    pub fn output_width(&self) -> usize {
        self.second.output_width()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Mlp2Cache)> {
        if x.cols() != self.input_width() {
            return Err(Error::dim("Mlp2::forward", self.input_width(), x.cols()));
        }
        let hidden_pre = self.first.forward(x)?;
        let hidden = hidden_pre.map(|v| v.max(0.0));
        let output_pre = self.second.forward(&hidden)?;
        let logits = match self.activation {
            FinalActivation::ReluSigmoid => output_pre.map(|v| v.max(0.0)),
            _ => output_pre.clone(),
        };
        let output = match self.activation {
            FinalActivation::None => logits.clone(),
            FinalActivation::Sigmoid | FinalActivation::ReluSigmoid => logits.map(sigmoid),
        };
        let cache = Mlp2Cache {
            input: x.clone(),
            hidden_pre,
            hidden,
            output_pre,
            logits,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Backward pass from a gradient w.r.t. the network output.
    pub fn backward(&mut self, upstream: &Matrix, cache: &Mlp2Cache) -> Result<Matrix> {
        check_cache("Mlp2::backward", upstream, cache)?;
        let grad_logits = match self.activation {
            FinalActivation::None => upstream.clone(),
            FinalActivation::Sigmoid | FinalActivation::ReluSigmoid => {
                let mut g = upstream.clone();
                for (gv, &s) in g.data_mut().iter_mut().zip(cache.output.data()) {
                    *gv *= s * (1.0 - s);
                }
                g
            }
        };
        self.backward_logits(&grad_logits, cache)
    }

    /// Backward pass from a gradient w.r.t. the pre-sigmoid values
    /// ([`Mlp2Cache::logits`]).
    pub fn backward_logits(&mut self, grad_logits: &Matrix, cache: &Mlp2Cache) -> Result<Matrix> {
        check_cache("Mlp2::backward_logits", grad_logits, cache)?;
        let mut grad_pre = grad_logits.clone();
        if self.activation == FinalActivation::ReluSigmoid {
            relu_mask(&mut grad_pre, &cache.output_pre);
        }
        let mut grad_hidden = self.second.backward(&cache.hidden, &grad_pre)?;
        relu_mask(&mut grad_hidden, &cache.hidden_pre);
        self.first.backward(&cache.input, &grad_hidden)
    }

    pub fn parameters(&self) -> [&Parameter; 4] {
        [
            &self.first.weight,
            &self.first.bias,
            &self.second.weight,
            &self.second.bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.first.weight,
            &mut self.first.bias,
            &mut self.second.weight,
            &mut self.second.bias,
        ]
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut()
            .into_iter()
            .for_each(Parameter::zero_grad);
    }
}

fn check_cache(op: &'static str, grad: &Matrix, cache: &Mlp2Cache) -> Result<()> {
    if !grad.same_shape(&cache.output) {
        return Err(Error::Usage(format!(
            "{op}: gradient shape {:?} does not match the cached forward output {:?}",
            grad.shape(),
            cache.output.shape()
        )));
    }
    Ok(())
}

// Subgradient at exactly zero is zero.
fn relu_mask(grad: &mut Matrix, pre: &Matrix) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}
