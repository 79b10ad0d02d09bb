use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

pub const SIMPLEX_TOL: f64 = 1e-12;

/// A point on the unit simplex, indexed in uncertain-load node order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Accepts `w` if it is nonnegative and sums to one within [`SIMPLEX_TOL`].
    pub fn new(w: Vec<f64>) -> Result<Self> {
        check_simplex(&w)?;
        Ok(WeightVector(w))
    }

    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    pub fn vertex(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        WeightVector(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "weight {i} = {} is not a nonnegative number",
            w[i]
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Euclidean projection onto `{w >= 0, sum w = 1}` by sort-and-threshold.
pub fn project_simplex(v: &[f64]) -> Result<WeightVector> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot project an empty vector".into(),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // one correction pass keeps the sum within 1e-12 for long vectors
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 0.25 * SIMPLEX_TOL {
        let support = w.iter().filter(|x| **x > 0.0).count() as f64;
        let shift = (s - 1.0) / support;
        for x in w.iter_mut().filter(|x| **x > 0.0) {
            *x = (*x - shift).max(0.0);
        }
    }
    WeightVector::new(w)
}

/// Symmetric Dirichlet draw as normalized Gamma(alpha, 1) variates.
pub fn sample_dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Result<WeightVector> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dirichlet alpha must be > 0, got {alpha}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dirichlet dimension must be >= 1".into(),
        ));
    }
    loop {
        let g: Vec<f64> = (0..n).map(|_| rng.gamma(alpha)).collect::<Result<_>>()?;
        let s: f64 = g.iter().sum();
        if s > 0.0 && g.iter().all(|x| *x > 0.0) {
            let w = g.iter().map(|x| x / s).collect();
            if let Ok(w) = WeightVector::new(w) {
                return Ok(w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        let w = project_simplex(&[0.25; 4]).unwrap();
        assert_eq!(w.as_slice(), &[0.25; 4]);
        let w = project_simplex(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_is_error() {
        assert!(project_simplex(&[]).is_err());
        assert!(sample_dirichlet(0.0, 3, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn dirichlet_degenerate() {
        let w = sample_dirichlet(1.0, 1, &mut Rng::new(3)).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
    }
}
