use super::matrix::Matrix;
use crate::error::{Error, Result};

/// A set of named trainable tensors with a stable ordering.
///
/// The same type doubles as its own gradient container.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    fn accumulate(&mut self, other: &Self) -> Result<()> {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s)?;
        }
        Ok(())
    }

    fn scale_all(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::dim("Parameters::load_flat", expected, flat.len()));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn ensure_finite(&self, context: &str) -> Result<()> {
        for (name, t) in self.tensors() {
            t.ensure_finite(&format!("{context}.{name}"))?;
        }
        Ok(())
    }
}
