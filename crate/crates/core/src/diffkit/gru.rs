//! Gated recurrent unit, batched over rows.
//!
//! Gate convention:
//!
//! ```text
//! u  = σ([x, h] W_z + b_z)          update gate
//! r  = σ([x, h] W_r + b_r)          reset gate
//! h̃  = tanh([x, r ⊙ h] W_h + b_h)
//! h' = (1 − u) ⊙ h + u ⊙ h̃
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{glorot, sigmoid};
use super::matrix::Matrix;
use super::params::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub b_z: Matrix,
    pub w_r: Matrix,
    pub b_r: Matrix,
    pub w_h: Matrix,
    pub b_h: Matrix,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Matrix::zeros(input + hidden, hidden);
        let b = || Matrix::zeros(1, hidden);
        Self {
            w_z: w(),
            b_z: b(),
            w_r: w(),
            b_r: b(),
            w_h: w(),
            b_h: b(),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        p.w_z = glorot(input + hidden, hidden, rng);
        p.w_r = glorot(input + hidden, hidden, rng);
        p.w_h = glorot(input + hidden, hidden, rng);
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.rows() - self.hidden_dim()
    }
}

impl Parameters for GruParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("w_z", &self.w_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("b_r", &self.b_r),
            ("w_h", &self.w_h),
            ("b_h", &self.b_h),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("w_z", &mut self.w_z),
            ("b_z", &mut self.b_z),
            ("w_r", &mut self.w_r),
            ("b_r", &mut self.b_r),
            ("w_h", &mut self.w_h),
            ("b_h", &mut self.b_h),
        ]
    }
}

/// Intermediates of one batched GRU step.
#[derive(Debug, Clone)]
pub struct GruCache {
    xh: Matrix,
    xrh: Matrix,
    h_prev: Matrix,
    update: Matrix,
    reset: Matrix,
    candidate: Matrix,
}

fn gate(input: &Matrix, w: &Matrix, b: &Matrix, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    let mut pre = input.matmul(w)?;
    pre.add_row_broadcast(b.data())?;
    Ok(pre.map(f))
}

/// One GRU step for every row of `x` (B × in) with previous state `h_prev` (B × H).
pub fn gru_forward(x: &Matrix, h_prev: &Matrix, p: &GruParams) -> Result<(Matrix, GruCache)> {
    let hidden = p.hidden_dim();
    if x.cols() != p.input_dim() {
        return Err(Error::dim("gru input", p.input_dim(), x.cols()));
    }
    if h_prev.cols() != hidden || h_prev.rows() != x.rows() {
        return Err(Error::dim(
            "gru state",
            format!("{}×{}", x.rows(), hidden),
            format!("{}×{}", h_prev.rows(), h_prev.cols()),
        ));
    }
    let xh = Matrix::hcat(&[x, h_prev])?;
    let update = gate(&xh, &p.w_z, &p.b_z, sigmoid)?;
    let reset = gate(&xh, &p.w_r, &p.b_r, sigmoid)?;
    let rh = reset.hadamard(h_prev)?;
    let xrh = Matrix::hcat(&[x, &rh])?;
    let candidate = gate(&xrh, &p.w_h, &p.b_h, f64::tanh)?;

    let mut h_new = Matrix::zeros(x.rows(), hidden);
    for (i, out) in h_new.data_mut().iter_mut().enumerate() {
        let u = update.data()[i];
        *out = (1.0 - u) * h_prev.data()[i] + u * candidate.data()[i];
    }
    Ok((
        h_new,
        GruCache {
            xh,
            xrh,
            h_prev: h_prev.clone(),
            update,
            reset,
            candidate,
        },
    ))
}

/// Single-vector convenience wrapper around [`gru_forward`].
pub fn gru_cell(x: &[f64], h_prev: &[f64], p: &GruParams) -> Result<Vec<f64>> {
    let (h, _) = gru_forward(&Matrix::row_vector(x), &Matrix::row_vector(h_prev), p)?;
    Ok(h.into_vec())
}

/// Backward of one GRU step. Accumulates parameter gradients into `grad`
/// and returns `(dL/dx, dL/dh_prev)`.
pub fn gru_backward(
    cache: &GruCache,
    dh_new: &Matrix,
    p: &GruParams,
    grad: &mut GruParams,
) -> Result<(Matrix, Matrix)> {
    let input = p.input_dim();
    let hidden = p.hidden_dim();
    let rows = dh_new.rows();

    let mut d_update_pre = Matrix::zeros(rows, hidden);
    let mut d_cand_pre = Matrix::zeros(rows, hidden);
    let mut dh_prev = Matrix::zeros(rows, hidden);
    for i in 0..rows * hidden {
        let g = dh_new.data()[i];
        let u = cache.update.data()[i];
        let c = cache.candidate.data()[i];
        let h = cache.h_prev.data()[i];
        d_update_pre.data_mut()[i] = g * (c - h) * u * (1.0 - u);
        d_cand_pre.data_mut()[i] = g * u * (1.0 - c * c);
        dh_prev.data_mut()[i] = g * (1.0 - u);
    }

    grad.w_h.add_assign(&cache.xrh.matmul_tn(&d_cand_pre)?)?;
    grad.b_h.add_assign(&Matrix::row_vector(&d_cand_pre.col_sums()))?;
    let dxrh = d_cand_pre.matmul_nt(&p.w_h)?;

    let mut dx = dxrh.columns(0, input);
    let mut d_reset_pre = Matrix::zeros(rows, hidden);
    for r in 0..rows {
        for c in 0..hidden {
            let drh = dxrh.get(r, input + c);
            let reset = cache.reset.get(r, c);
            let h = cache.h_prev.get(r, c);
            d_reset_pre.set(r, c, drh * h * reset * (1.0 - reset));
            dh_prev.add_at(r, c, drh * reset);
        }
    }

    grad.w_r.add_assign(&cache.xh.matmul_tn(&d_reset_pre)?)?;
    grad.b_r.add_assign(&Matrix::row_vector(&d_reset_pre.col_sums()))?;
    grad.w_z.add_assign(&cache.xh.matmul_tn(&d_update_pre)?)?;
    grad.b_z.add_assign(&Matrix::row_vector(&d_update_pre.col_sums()))?;

    let mut dxh = d_reset_pre.matmul_nt(&p.w_r)?;
    dxh.add_assign(&d_update_pre.matmul_nt(&p.w_z)?)?;
    for r in 0..rows {
        for c in 0..input {
            dx.add_at(r, c, dxh.get(r, c));
        }
        for c in 0..hidden {
            dh_prev.add_at(r, c, dxh.get(r, input + c));
        }
    }
    Ok((dx, dh_prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::check::{finite_diff_grad, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_params_halve_the_state() {
        let p = GruParams::zeros(1, 1);
        let h = gru_cell(&[0.3], &[1.0], &p).unwrap();
        assert_eq!(h, vec![0.5]);
    }

    #[test]
    fn zero_input_zero_state_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GruParams::init(3, 4, &mut rng);
        let h = gru_cell(&[0.0; 3], &[0.0; 4], &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = GruParams::zeros(2, 3);
        assert!(gru_cell(&[0.0], &[0.0; 3], &p).is_err());
        assert!(gru_cell(&[0.0; 2], &[0.0; 2], &p).is_err());
    }

    fn randomized(seed: u64) -> (GruParams, Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GruParams::init(3, 4, &mut rng);
        for (_, t) in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let x = random(5, 3, &mut rng);
        let h = random(5, 4, &mut rng);
        let w = random(5, 4, &mut rng);
        (p, x, h, w)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let (p, x, h, w) = randomized(seed);
            let loss = |p: &GruParams, x: &Matrix, h: &Matrix| {
                gru_forward(x, h, p).unwrap().0.hadamard(&w).unwrap().sum()
            };
            let (_, cache) = gru_forward(&x, &h, &p).unwrap();
            let mut grad = p.zeros_like();
            let (dx, dh) = gru_backward(&cache, &w, &p, &mut grad).unwrap();

            let fd_x = finite_diff_grad(|m| loss(&p, m, &h), &x, 1e-5);
            assert!(max_rel_error(&dx, &fd_x) < 1e-4);
            let fd_h = finite_diff_grad(|m| loss(&p, &x, m), &h, 1e-5);
            assert!(max_rel_error(&dh, &fd_h) < 1e-4);

            let names: Vec<&str> = p.tensors().iter().map(|(n, _)| *n).collect();
            for (k, name) in names.iter().enumerate() {
                let base = p.tensors()[k].1.clone();
                let fd = finite_diff_grad(
                    |m| {
                        let mut q = p.clone();
                        *q.tensors_mut()[k].1 = m.clone();
                        loss(&q, &x, &h)
                    },
                    &base,
                    1e-5,
                );
                let err = max_rel_error(grad.tensors()[k].1, &fd);
                assert!(err < 1e-4, "seed {seed} {name}: {err}");
            }
        }
    }
}
