//! Location scoring, perturb-and-MAP top-k sampling and the I-MLE gradient estimator.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::diffkit::{Matrix, Mlp, MlpCache};
use crate::error::{Error, Result};

/// Width of the scoring network's hidden layer.
pub const SCORE_HIDDEN: usize = 64;

/// Binary K-hot sensor configuration over N cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacementVector {
    flags: Vec<bool>,
}

impl PlacementVector {
    pub fn empty(n: usize) -> Self {
        Self { flags: vec![false; n] }
    }

    /// Indicator of `cells`; duplicates and out-of-range cells are rejected.
    pub fn from_indices(n: usize, cells: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n];
        for &c in cells {
            if c >= n {
                return Err(Error::Argument(format!("cell {c} out of range for {n} cells")));
            }
            if flags[c] {
                return Err(Error::Argument(format!("cell {c} listed twice")));
            }
            flags[c] = true;
        }
        Ok(Self { flags })
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn k(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.flags[cell]
    }

    pub fn indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImleConfig {
    /// Step from the scores toward the loss-informed target scores.
    pub lambda: f64,
    /// Number of Sum-of-Gamma entries that together approximate one Gumbel variable.
    pub sog_k: usize,
    /// Truncation of the Gamma series.
    pub s_terms: usize,
    /// Noise samples drawn per instance.
    pub samples: usize,
    /// Noise scale.
    pub temperature: f64,
}

impl Default for ImleConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            sog_k: 10,
            s_terms: 300,
            samples: 1,
            temperature: 1.0,
        }
    }
}

impl ImleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("imle lambda and temperature must be positive".into()));
        }
        if self.sog_k == 0 || self.s_terms == 0 || self.samples == 0 {
            return Err(Error::Config("imle sog_k, s_terms and samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scores every cell with a one-hidden-layer relu MLP; `x` is N×d.
pub fn score_locations(x: &Matrix, net: &Mlp) -> Result<(Vec<f64>, MlpCache)> {
    if x.cols() != net.input_dim() || net.output_dim() != 1 {
        return Err(Error::dim("score_locations", net.input_dim(), x.cols()));
    }
    let (out, cache) = net.forward(x)?;
    out.ensure_finite("scores")?;
    Ok((out.into_vec(), cache))
}

/// Accumulates `dL/dθ` into `grad`.
pub fn score_backward(net: &Mlp, cache: &MlpCache, dtheta: &[f64], grad: &mut Mlp) -> Result<()> {
    net.backward(cache, &Matrix::col_vector(dtheta), grad)?;
    Ok(())
}

/// Per-cell mean over a window of N×d feature frames.
pub fn temporal_mean(frames: &[Matrix]) -> Result<Matrix> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Argument("temporal_mean needs at least one frame".into()))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for f in frames {
        acc.add_assign(f)?;
    }
    acc.scale(1.0 / frames.len() as f64);
    Ok(acc)
}

/// Sum-of-Gamma perturbation noise.
///
/// Each entry is `(temp/κ)·(Σ_{i=1..s} Gamma(1/κ, κ/i) − ln s)`, so a sum of κ
/// independent entries approaches a Gumbel(0, temp) variable as `s` grows.
pub fn sample_sum_of_gamma<R: Rng + ?Sized>(
    n: usize,
    sog_k: usize,
    s_terms: usize,
    temp: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sog_k == 0 || s_terms == 0 {
        return Err(Error::Argument("sog_k and s_terms must be at least 1".into()));
    }
    if !(temp > 0.0) || !temp.is_finite() {
        return Err(Error::Argument(format!("temperature must be positive, got {temp}")));
    }
    let kappa = sog_k as f64;
    let terms: Vec<Gamma<f64>> = (1..=s_terms)
        .map(|i| Gamma::new(1.0 / kappa, kappa / i as f64).expect("positive shape and scale"))
        .collect();
    let shift = (s_terms as f64).ln();
    Ok((0..n)
        .map(|_| {
            let total: f64 = terms.iter().map(|g| g.sample(rng)).sum();
            temp / kappa * (total - shift)
        })
        .collect())
}

/// Indicator of the `k` largest scores; ties go to the lower index.
pub fn map_top_k(theta: &[f64], k: usize) -> Result<PlacementVector> {
    let n = theta.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k must lie in 1..={n}, got {k}")));
    }
    if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {i} is {}", theta[i])));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let by_score = |&a: &usize, &b: &usize| theta[b].total_cmp(&theta[a]).then(a.cmp(&b));
    if k < n {
        order.select_nth_unstable_by(k - 1, by_score);
    }
    let mut flags = vec![false; n];
    for &i in &order[..k] {
        flags[i] = true;
    }
    Ok(PlacementVector { flags })
}

/// MAP placement of perturbed scores `θ + ε`.
pub fn perturb_and_map(theta: &[f64], noise: &[f64], k: usize) -> Result<PlacementVector> {
    if theta.len() != noise.len() {
        return Err(Error::dim("perturb_and_map", theta.len(), noise.len()));
    }
    let perturbed: Vec<f64> = theta.iter().zip(noise).map(|(t, e)| t + e).collect();
    map_top_k(&perturbed, k)
}

/// Loss-informed target scores `θ − λ·∂L/∂z`.
pub fn imle_target(theta: &[f64], grad_z: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if theta.len() != grad_z.len() {
        return Err(Error::dim("imle_target", theta.len(), grad_z.len()));
    }
    Ok(theta.iter().zip(grad_z).map(|(t, g)| t - lambda * g).collect())
}

/// Surrogate score gradient `z − z′` from two MAP states under the same noise.
pub fn imle_gradient(z: &PlacementVector, z_target: &PlacementVector) -> Result<Vec<f64>> {
    if z.len() != z_target.len() {
        return Err(Error::dim("imle_gradient", z.len(), z_target.len()));
    }
    if z.k() != z_target.k() {
        return Err(Error::Argument(format!(
            "placements have different budgets ({} vs {})",
            z.k(),
            z_target.k()
        )));
    }
    Ok(z.flags
        .iter()
        .zip(&z_target.flags)
        .map(|(&a, &b)| a as i32 as f64 - b as i32 as f64)
        .collect())
}
