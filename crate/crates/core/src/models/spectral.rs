//! Diagonal (spectral) models: scalar Ornstein-Uhlenbeck benchmarks and the
//! truncated heat equation on `[0, pi]` with Dirichlet boundary control.
//!
//! The state space is the span of the first `N` eigenvectors of the
//! generator; all coordinates are taken in that eigenbasis, so `e^{tA}` is a
//! diagonal exponential and the covariance `Q_t` has the per-mode closed form
//! `q_n(t) = g_n^2 (1 - e^{-2 lambda_n t}) / (2 lambda_n)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Configuration for [`SpectralModel::heat`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatConfig {
    pub n_modes: usize,
    /// Noise decay exponent: the noise operator is `(-A)^{-beta/2}` per mode.
    pub beta: f64,
    /// Exponent slack in the extension space `D((-A)^{-3/4-eps})`.
    pub eps: f64,
    /// Smoothness exponent of the projection directions.
    pub eta: f64,
    /// Projection directions as eigen-coefficient lists (orthonormalized).
    pub p_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarConfig {
    /// Drift rate: the generator is `A = -a`.
    pub a: f64,
    /// Noise amplitude.
    pub g: f64,
    /// Control coefficient.
    pub c: f64,
}

/// A diagonal model `A = -diag(lambda)`, `G = diag(g)`, control matrix `B`
/// and projection `P` spanned by orthonormal vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralModel {
    pub name: String,
    /// Strictly increasing positive eigenvalues of `-A`.
    pub lambdas: DVector<f64>,
    /// Per-mode noise amplitudes (diagonal of `G`).
    pub noise_g: DVector<f64>,
    /// Control operator coefficients, one column per control direction.
    pub control: DMatrix<f64>,
    /// Orthonormal projection basis, one row per direction (`N_P x N`).
    pub p_basis: DMatrix<f64>,
    /// The extension space weighs mode `n` by `lambda_n^{-hbar_exponent}`.
    pub hbar_exponent: f64,
    /// Smoothness exponent of the projection directions (metadata).
    pub eta: f64,
}

impl SpectralModel {
    /// Scalar OU benchmark: `dZ = -a Z dt + g dW`, control coefficient `c`,
    /// `P = I`.
    pub fn scalar(cfg: &ScalarConfig) -> Result<Self, CoreError> {
        if cfg.a <= 0.0 {
            return Err(CoreError::invalid("scalar model requires a > 0"));
        }
        Ok(SpectralModel {
            name: "scalar".into(),
            lambdas: DVector::from_element(1, cfg.a),
            noise_g: DVector::from_element(1, cfg.g),
            control: DMatrix::from_element(1, 1, cfg.c),
            p_basis: DMatrix::identity(1, 1),
            hbar_exponent: 0.0,
            eta: 0.0,
        })
    }

    /// Spectrally truncated heat equation on `[0, pi]` with Dirichlet
    /// boundary control at both endpoints.
    ///
    /// Eigenvalues are `lambda_n = n^2`; the control operator is
    /// `B = (-A) D` with `D` the harmonic (linear) extension of boundary
    /// data, which gives the coefficients
    /// `<D 1_{x=0}, e_n> = sqrt(2/pi)/n` and
    /// `<D 1_{x=pi}, e_n> = sqrt(2/pi) (-1)^{n+1}/n`.
    /// The noise operator is `(-A)^{-beta/2}`.
    pub fn heat(cfg: &HeatConfig) -> Result<Self, CoreError> {
        let n = cfg.n_modes;
        if n == 0 {
            return Err(CoreError::invalid("heat model requires at least one mode"));
        }
        if cfg.beta <= 0.0 {
            return Err(CoreError::invalid("heat model requires beta > 0"));
        }
        if !(0.0 < cfg.eps && cfg.eps < 0.25) {
            return Err(CoreError::invalid("heat model requires eps in (0, 1/4)"));
        }
        if cfg.eta <= 0.25 + cfg.eps {
            return Err(CoreError::invalid("heat model requires eta > 1/4 + eps"));
        }
        let lambdas = DVector::from_fn(n, |i, _| ((i + 1) * (i + 1)) as f64);
        let noise_g = lambdas.map(|l| l.powf(-cfg.beta / 2.0));
        let s = (2.0 / std::f64::consts::PI).sqrt();
        let mut control = DMatrix::zeros(n, 2);
        for i in 0..n {
            let nn = (i + 1) as f64;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            control[(i, 0)] = nn * s;
            control[(i, 1)] = nn * s * sign;
        }
        let p_basis = orthonormalize(&cfg.p_vectors, n)?;
        let model = SpectralModel {
            name: "heat".into(),
            lambdas,
            noise_g,
            control,
            p_basis,
            hbar_exponent: 0.75 + cfg.eps,
            eta: cfg.eta,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), CoreError> {
        let n = self.lambdas.len();
        if self.lambdas[0] <= 0.0
            || !(1..n).all(|i| self.lambdas[i] > self.lambdas[i - 1])
        {
            return Err(CoreError::invalid("eigenvalues must be strictly increasing and positive"));
        }
        let gram = &self.p_basis * self.p_basis.transpose();
        let err = (&gram - DMatrix::identity(gram.nrows(), gram.ncols())).norm();
        if err > 1e-10 {
            return Err(CoreError::invalid(format!(
                "projection basis not orthonormal (defect {err:.2e})"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn proj_dim(&self) -> usize {
        self.p_basis.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.control.ncols()
    }

    /// Coordinates of `e^{tA} x` in the eigenbasis.
    pub fn semigroup_coords(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        if t == 0.0 {
            return x.clone();
        }
        DVector::from_fn(x.len(), |i, _| x[i] * (-self.lambdas[i] * t).exp())
    }

    /// Feature coordinates of `P e^{tA} x`.
    pub fn projected_coords(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.p_basis * self.semigroup_coords(t, x)
    }

    /// `P e^{tA}` as an `N_P x N` matrix.
    pub fn proj_matrix(&self, t: f64) -> DMatrix<f64> {
        let mut m = self.p_basis.clone();
        for j in 0..m.ncols() {
            let f = (-self.lambdas[j] * t).exp();
            for i in 0..m.nrows() {
                m[(i, j)] *= f;
            }
        }
        m
    }

    /// Feature coordinates of `P e^{tA} C`, one column per control direction.
    pub fn control_projected(&self, t: f64) -> DMatrix<f64> {
        self.proj_matrix(t) * &self.control
    }

    /// Per-mode variance of `Q_t`.
    pub fn cov_diag(&self, t: f64) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            let l = self.lambdas[i];
            let g2 = self.noise_g[i] * self.noise_g[i];
            // (1 - e^{-2 l t}) / (2 l), stable for small l t
            g2 * (-(-2.0 * l * t).exp_m1()) / (2.0 * l)
        })
    }

    /// Full `Q_t` (diagonal).
    pub fn ou_cov_matrix(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.cov_diag(t))
    }

    /// `P Q_t P^*` in feature coordinates.
    pub fn proj_cov(&self, t: f64) -> DMatrix<f64> {
        let d = self.cov_diag(t);
        let mut scaled = self.p_basis.clone();
        for j in 0..scaled.ncols() {
            for i in 0..scaled.nrows() {
                scaled[(i, j)] *= d[j];
            }
        }
        scaled * self.p_basis.transpose()
    }

    /// Norm of the extension space `D((-A)^{-hbar_exponent})`.
    pub fn hbar_norm(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .zip(self.lambdas.iter())
            .map(|(&xi, &l)| {
                let w = l.powf(-self.hbar_exponent);
                (xi * w) * (xi * w)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Gram-Schmidt orthonormalization of coefficient lists.
fn orthonormalize(vectors: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>, CoreError> {
    if vectors.is_empty() {
        return Err(CoreError::invalid("at least one projection vector is required"));
    }
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        if v.len() != dim {
            return Err(CoreError::DimensionMismatch { expected: dim, got: v.len() });
        }
        let mut w = DVector::from_column_slice(v);
        for r in &rows {
            let c = r.dot(&w);
            w -= r * c;
        }
        let norm = w.norm();
        if norm < 1e-12 {
            return Err(CoreError::invalid("projection vectors are linearly dependent"));
        }
        rows.push(w / norm);
    }
    let mut m = DMatrix::zeros(rows.len(), dim);
    for (i, r) in rows.iter().enumerate() {
        m.set_row(i, &r.transpose());
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat_cfg(n: usize) -> HeatConfig {
        HeatConfig {
            n_modes: n,
            beta: 1.0,
            eps: 0.1,
            eta: 1.0,
            p_vectors: vec![{
                let mut v = vec![0.0; n];
                v[0] = 1.0;
                v
            }],
        }
    }

    #[test]
    fn first_dirichlet_eigenvalue_is_one() {
        let m = SpectralModel::heat(&heat_cfg(1)).unwrap();
        assert_eq!(m.lambdas[0], 1.0);
    }

    #[test]
    fn dirichlet_lift_coefficients_match_quadrature() {
        // <x/pi, e_n> where e_n = sqrt(2/pi) sin(nx), by Gauss-Legendre.
        let m = SpectralModel::heat(&heat_cfg(6)).unwrap();
        let s = (2.0 / std::f64::consts::PI).sqrt();
        let (xs, ws) = crate::numeric::gauss_legendre_on(64, 0.0, std::f64::consts::PI);
        for n in 1..=6 {
            let nn = n as f64;
            let quad: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(&x, &w)| w * (x / std::f64::consts::PI) * s * (nn * x).sin())
                .sum();
            let analytic = s * if n % 2 == 1 { 1.0 } else { -1.0 } / nn;
            assert!((quad - analytic).abs() < 1e-12, "mode {n}");
            // B coefficient = lambda_n * <D, e_n>
            assert!((m.control[(n - 1, 1)] - nn * nn * analytic).abs() < 1e-12);
        }
        // boundary input at x = 0: lift (1 - x/pi)
        for n in 1..=6 {
            let nn = n as f64;
            let quad: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(&x, &w)| w * (1.0 - x / std::f64::consts::PI) * s * (nn * x).sin())
                .sum();
            assert!((m.control[(n - 1, 0)] - nn * nn * quad).abs() < 1e-10, "mode {n}");
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let m = SpectralModel::heat(&heat_cfg(4)).unwrap();
        let p = m.p_basis.transpose() * &m.p_basis;
        assert!((&p * &p - &p).norm() < 1e-12);
    }

    #[test]
    fn gram_schmidt_rejects_dependent_vectors() {
        let mut cfg = heat_cfg(3);
        cfg.p_vectors = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]];
        assert!(SpectralModel::heat(&cfg).is_err());
    }

    #[test]
    fn covariance_closed_form_matches_example() {
        // heat mode n, beta = 1, t = 1 -> (1 - e^{-2 n^2}) / (2 n^4)
        let m = SpectralModel::heat(&heat_cfg(3)).unwrap();
        let d = m.cov_diag(1.0);
        for n in 1..=3 {
            let nn = (n * n) as f64;
            let expect = (1.0 - (-2.0 * nn).exp()) / (2.0 * nn * nn);
            assert!((d[n - 1] - expect).abs() < 1e-14);
        }
        assert!((d[0] - 0.43233235838169365).abs() < 1e-12);
    }

    #[test]
    fn trace_class_proxy_is_finite() {
        let m = SpectralModel::heat(&heat_cfg(50)).unwrap();
        let trace: f64 = m.cov_diag(1e9).iter().sum();
        assert!(trace.is_finite() && trace < 1.0);
    }
}
