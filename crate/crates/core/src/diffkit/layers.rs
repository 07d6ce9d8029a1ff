use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::Parameters;
use crate::error::{Error, Result};

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    /// Gradient per parameter, keyed by the parameter's name.
    pub params: BTreeMap<&'static str, Matrix>,
    /// Gradient with respect to the layer input.
    pub input: Matrix,
}

impl LayerGrad {
    pub fn param(&self, name: &str) -> &Matrix {
        &self.params[name]
    }
}

/// `x · W + b`, with `b` broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(Error::dim("linear_forward", w.rows(), x.cols()));
    }
    if b.len() != w.cols() {
        return Err(Error::dim("linear_forward bias", w.cols(), b.len()));
    }
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

/// Backward of [`linear_forward`]; parameter keys are `weight` and `bias`.
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LayerGrad> {
    if dy.rows() != x.rows() || dy.cols() != w.cols() {
        return Err(Error::dim(
            "linear_backward",
            format!("{}×{}", x.rows(), w.cols()),
            format!("{}×{}", dy.rows(), dy.cols()),
        ));
    }
    let dw = x.matmul_tn(dy)?;
    let db = Matrix::row_vector(&dy.col_sums());
    let dx = dy.matmul_nt(w)?;
    let mut params = BTreeMap::new();
    params.insert("weight", dw);
    params.insert("bias", db);
    Ok(LayerGrad { params, input: dx })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Matrix, kind: Activation) -> Matrix {
    x.map(|v| kind.apply(v))
}

/// Backward of [`activation`] given its output `y`.
pub fn activation_backward(y: &Matrix, dy: &Matrix, kind: Activation) -> Result<Matrix> {
    y.zip_map(dy, |yv, g| g * kind.derivative_from_output(yv))
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Vector-Jacobian product of softmax: given `p = softmax(s)` and `dL/dp`, returns `dL/ds`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, gi)| pi * (gi - inner)).collect()
}

/// `log Σ exp(v)` with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Two-layer perceptron: `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Forward intermediates kept for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Matrix,
    pub hidden: Matrix,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, output),
            b2: Matrix::zeros(1, output),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(input, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: glorot(hidden, output, rng),
            b2: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        let pre = linear_forward(x, &self.w1, self.b1.data())?;
        let hidden = activation(&pre, Activation::Relu);
        let out = linear_forward(&hidden, &self.w2, self.b2.data())?;
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, dout: &Matrix, grad: &mut Mlp) -> Result<Matrix> {
        let g2 = linear_backward(&cache.hidden, &self.w2, dout)?;
        grad.w2.add_assign(g2.param("weight"))?;
        grad.b2.add_assign(g2.param("bias"))?;
        let dpre = activation_backward(&cache.hidden, &g2.input, Activation::Relu)?;
        let g1 = linear_backward(&cache.input, &self.w1, &dpre)?;
        grad.w1.add_assign(g1.param("weight"))?;
        grad.b1.add_assign(g1.param("bias"))?;
        Ok(g1.input)
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Glorot/Xavier uniform initialisation.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction")
}
