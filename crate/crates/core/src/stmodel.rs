//! Spatio-temporal reconstruction: graph convolution per frame, a GRU per
//! cell over the window, and a linear read-out of the last hidden state.
//!
//! A flat linear model over the last frame stands in when the spatio-temporal
//! stack is ablated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::{
    activation, activation_backward, glorot, gru_backward, gru_forward, Activation, GruCache,
    GruParams, Matrix, Parameters,
};
use crate::error::{Error, Result};
use crate::graph::SparseMatrix;

/// Width of the graph-convolution output and the GRU state.
pub const ST_HIDDEN: usize = 16;

/// Appends the placement as a last column: row i becomes `[o_t[i], z[i]]`.
pub fn build_inputs(observation: &Matrix, z: &[f64]) -> Result<Matrix> {
    if observation.rows() != z.len() {
        return Err(Error::dim("build_inputs", observation.rows(), z.len()));
    }
    let zc = Matrix::col_vector(z);
    Matrix::hcat(&[observation, &zc])
}

/// `relu(Â · X · W)` together with `Â · X`, which the backward pass needs.
pub fn gcn_step(adj: &SparseMatrix, x: &Matrix, w: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.cols() != w.rows() {
        return Err(Error::dim("gcn_step", w.rows(), x.cols()));
    }
    let ax = adj.apply(x)?;
    let s = activation(&ax.matmul(w)?, Activation::Relu);
    Ok((s, ax))
}

/// Gradients of [`gcn_step`]: returns `(dL/dW, dL/dX)`.
pub fn gcn_backward(adj: &SparseMatrix, ax: &Matrix, s: &Matrix, w: &Matrix, ds: &Matrix) -> Result<(Matrix, Matrix)> {
    let dpre = activation_backward(s, ds, Activation::Relu)?;
    let dw = ax.matmul_tn(&dpre)?;
    let dx = adj.apply_transpose(&dpre.matmul_nt(w)?)?;
    Ok((dw, dx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StModel {
    /// Graph-convolution weights, (inputs) × hidden.
    pub gcn: Matrix,
    pub gru: GruParams,
    /// Read-out, hidden × 1.
    pub decoder_w: Matrix,
    pub decoder_b: Matrix,
}

impl StModel {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            gcn: Matrix::zeros(input, hidden),
            gru: GruParams::zeros(hidden, hidden),
            decoder_w: Matrix::zeros(hidden, 1),
            decoder_b: Matrix::zeros(1, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            gcn: glorot(input, hidden, rng),
            gru: GruParams::init(hidden, hidden, rng),
            decoder_w: glorot(hidden, 1, rng),
            decoder_b: Matrix::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gcn.rows()
    }
}

impl Parameters for StModel {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("gcn", &self.gcn)];
        out.extend(self.gru.tensors());
        out.push(("decoder_w", &self.decoder_w));
        out.push(("decoder_b", &self.decoder_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![("gcn", &mut self.gcn)];
        out.extend(self.gru.tensors_mut());
        out.push(("decoder_w", &mut self.decoder_w));
        out.push(("decoder_b", &mut self.decoder_b));
        out
    }
}

/// Single linear map from the flattened last input frame to every cell's depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// (N·inputs) × N.
    pub w: Matrix,
    pub b: Matrix,
}

impl LinearModel {
    pub fn zeros(n: usize, input: usize) -> Self {
        Self {
            w: Matrix::zeros(n * input, n),
            b: Matrix::zeros(1, n),
        }
    }

    pub fn init<R: Rng + ?Sized>(n: usize, input: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(n * input, n, rng),
            b: Matrix::zeros(1, n),
        }
    }
}

impl Parameters for LinearModel {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![("w", &mut self.w), ("b", &mut self.b)]
    }
}

/// The reconstruction network used by a pipeline variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reconstructor {
    SpatioTemporal(StModel),
    Linear(LinearModel),
}

impl Parameters for Reconstructor {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Reconstructor::SpatioTemporal(m) => m.tensors(),
            Reconstructor::Linear(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Reconstructor::SpatioTemporal(m) => m.tensors_mut(),
            Reconstructor::Linear(m) => m.tensors_mut(),
        }
    }
}

struct FrameCache {
    ax: Matrix,
    s: Matrix,
    gru: GruCache,
}

/// Forward intermediates of a rollout.
pub struct RolloutCache {
    frames: Vec<FrameCache>,
    last_hidden: Matrix,
    last_input: Option<Matrix>,
    n_frames: usize,
}

/// Runs the network over the input frames and returns the per-cell estimate.
pub fn rollout(adj: &SparseMatrix, inputs: &[Matrix], model: &Reconstructor) -> Result<(Vec<f64>, RolloutCache)> {
    let t_len = inputs.len();
    if t_len == 0 {
        return Err(Error::Argument("rollout needs at least one frame".into()));
    }
    let n = inputs[0].rows();
    if adj.dim() != n {
        return Err(Error::dim("rollout adjacency", n, adj.dim()));
    }
    match model {
        Reconstructor::SpatioTemporal(m) => {
            let mut h = Matrix::zeros(n, m.gru.hidden_dim());
            let mut frames = Vec::with_capacity(t_len);
            for x in inputs {
                if x.rows() != n {
                    return Err(Error::dim("rollout frame", n, x.rows()));
                }
                let (s, ax) = gcn_step(adj, x, &m.gcn)?;
                let (h_new, gru) = gru_forward(&s, &h, &m.gru)?;
                frames.push(FrameCache { ax, s, gru });
                h = h_new;
            }
            let mut y = h.matmul(&m.decoder_w)?;
            y.add_row_broadcast(m.decoder_b.data())?;
            y.ensure_finite("reconstruction")?;
            Ok((
                y.into_vec(),
                RolloutCache {
                    frames,
                    last_hidden: h,
                    last_input: None,
                    n_frames: t_len,
                },
            ))
        }
        Reconstructor::Linear(m) => {
            let last = &inputs[t_len - 1];
            if m.w.rows() != last.rows() * last.cols() || m.w.cols() != n {
                return Err(Error::dim("linear reconstructor", m.w.rows(), last.rows() * last.cols()));
            }
            let flat = Matrix::row_vector(last.data());
            let mut y = flat.matmul(&m.w)?;
            y.add_row_broadcast(m.b.data())?;
            y.ensure_finite("reconstruction")?;
            Ok((
                y.into_vec(),
                RolloutCache {
                    frames: Vec::new(),
                    last_hidden: Matrix::zeros(0, 0),
                    last_input: Some(flat),
                    n_frames: t_len,
                },
            ))
        }
    }
}

/// Backward of [`rollout`]: accumulates parameter gradients into `grad` and,
/// when `want_inputs`, returns `dL/dX_t` for every frame (empty otherwise).
pub fn rollout_backward(
    adj: &SparseMatrix,
    cache: &RolloutCache,
    model: &Reconstructor,
    dy: &[f64],
    grad: &mut Reconstructor,
    want_inputs: bool,
) -> Result<Vec<Matrix>> {
    match (model, grad) {
        (Reconstructor::SpatioTemporal(m), Reconstructor::SpatioTemporal(g)) => {
            let dyc = Matrix::col_vector(dy);
            g.decoder_w.add_assign(&cache.last_hidden.matmul_tn(&dyc)?)?;
            g.decoder_b.add_at(0, 0, dy.iter().sum());
            let mut dh = dyc.matmul_nt(&m.decoder_w)?;
            let mut dxs = vec![Matrix::zeros(0, 0); if want_inputs { cache.n_frames } else { 0 }];
            for (t, f) in cache.frames.iter().enumerate().rev() {
                let (ds, dh_prev) = gru_backward(&f.gru, &dh, &m.gru, &mut g.gru)?;
                let dpre = activation_backward(&f.s, &ds, Activation::Relu)?;
                g.gcn.add_assign(&f.ax.matmul_tn(&dpre)?)?;
                if want_inputs {
                    dxs[t] = adj.apply_transpose(&dpre.matmul_nt(&m.gcn)?)?;
                }
                dh = dh_prev;
            }
            Ok(dxs)
        }
        (Reconstructor::Linear(m), Reconstructor::Linear(g)) => {
            let flat = cache.last_input.as_ref().expect("linear cache keeps its input");
            let dyr = Matrix::row_vector(dy);
            g.w.add_assign(&flat.matmul_tn(&dyr)?)?;
            g.b.add_assign(&dyr)?;
            if !want_inputs {
                return Ok(Vec::new());
            }
            let n = dy.len();
            let width = flat.cols() / n;
            let dflat = dyr.matmul_nt(&m.w)?;
            let mut dxs = vec![Matrix::zeros(n, width); cache.n_frames];
            dxs[cache.n_frames - 1] = Matrix::from_vec(n, width, dflat.into_vec())?;
            Ok(dxs)
        }
        _ => Err(Error::Argument("gradient buffer does not match the model variant".into())),
    }
}

/// Mean squared error over cells.
pub fn reconstruction_loss(yhat: &[f64], y: &[f64]) -> Result<f64> {
    if yhat.len() != y.len() || y.is_empty() {
        return Err(Error::dim("reconstruction_loss", y.len(), yhat.len()));
    }
    Ok(yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Gradient of [`reconstruction_loss`] with respect to `yhat`.
pub fn reconstruction_loss_grad(yhat: &[f64], y: &[f64]) -> Vec<f64> {
    let scale = 2.0 / y.len() as f64;
    yhat.iter().zip(y).map(|(a, b)| scale * (a - b)).collect()
}
