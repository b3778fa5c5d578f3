//! Gaussian-measure engine for the Ornstein-Uhlenbeck semigroup: covariance
//! assembly, eigendecomposition-based sampling, pseudoinverse square roots
//! and Cameron-Martin densities, plus Monte-Carlo evaluation of the
//! transition semigroup `R_t`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::CoreError;
use crate::models::Model;
use crate::rng::{parallel_mc, rng_from};
use crate::spaces::{OperatorMatrix, QuadratureRule, SpaceTag, StateVector};

/// Relative symmetry tolerance for covariance matrices.
pub const SYM_TOL: f64 = 1e-10;
/// Eigenvalues below `-PSD_TOL * lambda_max` are an error; negative values
/// above that are clamped to zero.
pub const PSD_TOL: f64 = 1e-10;
/// Default relative eigenvalue cutoff for pseudoinverse square roots. `Q_t`
/// is severely ill-conditioned for small `t`, so this is configurable at
/// every call site that owns a cutoff.
pub const DEFAULT_CUTOFF: f64 = 1e-10;

/// Eigendecomposition of a symmetric PSD matrix with negative noise clamped.
#[derive(Debug, Clone)]
pub struct PsdDecomp {
    pub vectors: DMatrix<f64>,
    /// Clamped eigenvalues, descending.
    pub values: DVector<f64>,
}

impl PsdDecomp {
    pub fn new(mat: &DMatrix<f64>) -> Result<Self, CoreError> {
        let norm = mat.norm();
        if norm > 0.0 {
            let asym = (mat - mat.transpose()).norm() / norm;
            if asym > SYM_TOL {
                return Err(CoreError::NotSymmetric(asym));
            }
        }
        let sym = (mat + mat.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        if let Some(&min) = eig
            .eigenvalues
            .iter()
            .min_by(|a, b| a.partial_cmp(b).unwrap())
        {
            if min < -PSD_TOL * max.max(1e-300) && min < -1e-14 {
                return Err(CoreError::NotPsd { min_eig: min, scale: max });
            }
        }
        // sort descending, clamp
        let n = eig.eigenvalues.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let values = DVector::from_fn(n, |i, _| eig.eigenvalues[idx[i]].max(0.0));
        let mut vectors = DMatrix::zeros(n, n);
        for (col, &i) in idx.iter().enumerate() {
            vectors.set_column(col, &eig.eigenvectors.column(i));
        }
        Ok(PsdDecomp { vectors, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn lambda_max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Indices of eigenvalues above `cutoff * lambda_max`.
    pub fn retained(&self, cutoff: f64) -> Vec<usize> {
        let thresh = cutoff * self.lambda_max();
        (0..self.dim()).filter(|&i| self.values[i] > thresh).collect()
    }

    fn assemble(&self, f: impl Fn(f64) -> f64, keep: &[usize]) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for &i in keep {
            let v = self.vectors.column(i);
            out += v * v.transpose() * f(self.values[i]);
        }
        out
    }

    /// `M^{1/2}` on the retained span.
    pub fn sqrt(&self, cutoff: f64) -> DMatrix<f64> {
        self.assemble(|l| l.sqrt(), &self.retained(cutoff))
    }

    /// `M^{-1/2}` on the retained span, zero on the complement.
    pub fn inv_sqrt(&self, cutoff: f64) -> DMatrix<f64> {
        self.assemble(|l| 1.0 / l.sqrt(), &self.retained(cutoff))
    }

    /// Orthogonal projector onto the retained span.
    pub fn projector(&self, cutoff: f64) -> DMatrix<f64> {
        self.assemble(|_| 1.0, &self.retained(cutoff))
    }

    /// Relative least-squares defect of `y` against the retained span:
    /// `|(I - Pi) y| / |y|`.
    pub fn range_residual(&self, y: &DVector<f64>, cutoff: f64) -> f64 {
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (y - self.projector(cutoff) * y).norm() / norm
    }

    /// Frobenius-relative defect of all columns of `m` against the retained
    /// span.
    pub fn range_residual_matrix(&self, m: &DMatrix<f64>, cutoff: f64) -> f64 {
        let norm = m.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (m - self.projector(cutoff) * m).norm() / norm
    }

    /// Mean-zero draw from `N(0, M)`; degenerate directions carry no noise.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for i in 0..self.dim() {
            let l = self.values[i];
            if l > 0.0 {
                let xi: f64 = rng.sample(StandardNormal);
                x += self.vectors.column(i) * (l.sqrt() * xi);
            }
        }
        x
    }
}

/// Gaussian measure `N(mean, covariance)` with a cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    pub mean: StateVector,
    pub covariance: OperatorMatrix,
    pub eig: PsdDecomp,
}

impl GaussianMeasure {
    pub fn new(mean: StateVector, covariance: OperatorMatrix) -> Result<Self, CoreError> {
        if covariance.entries.nrows() != mean.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: mean.dim(),
                got: covariance.entries.nrows(),
            });
        }
        let eig = PsdDecomp::new(&covariance.entries)?;
        Ok(GaussianMeasure { mean, covariance, eig })
    }

    pub fn centered(covariance: DMatrix<f64>, space: SpaceTag) -> Result<Self, CoreError> {
        let n = covariance.nrows();
        GaussianMeasure::new(
            StateVector { coords: DVector::zeros(n), space },
            OperatorMatrix { entries: covariance, domain: space, codomain: space },
        )
    }

    /// One draw using the provided RNG. Degenerate directions (zero clamped
    /// eigenvalues) carry zero noise.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        &self.mean.coords + self.eig.draw(rng)
    }
}

/// `n` i.i.d. draws, deterministic in the seed.
pub fn sample_gaussian(measure: &GaussianMeasure, n: usize, seed: u64) -> Vec<StateVector> {
    let mut rng = rng_from(seed, &[]);
    (0..n)
        .map(|_| StateVector { coords: measure.draw(&mut rng), space: measure.mean.space })
        .collect()
}

/// Pseudoinverse square root `M^{-1/2}` of a symmetric PSD matrix: inverse
/// square root on eigenvalues above `cutoff * lambda_max`, zero elsewhere.
pub fn psd_sqrt_pseudoinverse(m: &OperatorMatrix, cutoff: f64) -> Result<OperatorMatrix, CoreError> {
    let eig = PsdDecomp::new(&m.entries)?;
    Ok(OperatorMatrix {
        entries: eig.inv_sqrt(cutoff),
        domain: m.codomain,
        codomain: m.domain,
    })
}

/// Cameron-Martin density of `N(y, Sigma)` against `N(0, Sigma)` evaluated
/// at `z`:
/// `exp(<Sigma^{-1/2} y, Sigma^{-1/2} z> - |Sigma^{-1/2} y|^2 / 2)`.
///
/// Fails if `y` lies outside the numerically retained range of
/// `Sigma^{1/2}`, which signals failure of the inclusion hypothesis.
pub fn cameron_martin_density(
    sigma: &OperatorMatrix,
    y: &StateVector,
    z: &StateVector,
    cutoff: f64,
) -> Result<f64, CoreError> {
    let eig = PsdDecomp::new(&sigma.entries)?;
    let a = eig.inv_sqrt(cutoff) * &y.coords;
    // residual of the least-squares solve Sigma^{1/2} a = y
    let y_norm = y.coords.norm();
    if y_norm > 0.0 {
        let resid = (eig.sqrt(cutoff) * &a - &y.coords).norm() / y_norm;
        if resid > 1e-6 {
            return Err(CoreError::RangeViolation { residual: resid, threshold: 1e-6 });
        }
    }
    let b = eig.inv_sqrt(cutoff) * &z.coords;
    Ok((a.dot(&b) - 0.5 * a.norm_squared()).exp())
}

/// Symmetric PSD approximation of `Q_t = int_0^t e^{sA} G G^* e^{sA^*} ds`.
///
/// Diagonal spectral models and the zero-drift delay model use the per-mode
/// closed form; a delay model with nonzero drift integrates
/// `e^{s a0} sigma sigma^T e^{s a0^T}` with the supplied rule.
pub fn ou_covariance(model: &Model, t: f64, rule: &QuadratureRule) -> Result<OperatorMatrix, CoreError> {
    if t <= 0.0 {
        return Err(CoreError::NegativeTime(t));
    }
    if rule.nodes.iter().any(|&s| s > t + 1e-12) {
        return Err(CoreError::invalid("quadrature nodes must lie in (0, t]"));
    }
    let entries = match model {
        Model::Spectral(m) => m.ou_cov_matrix(t),
        Model::Delay(m) => {
            if m.a0.iter().all(|&v| v == 0.0) {
                m.ou_cov_matrix(t)
            } else {
                let sst = &m.sigma * m.sigma.transpose();
                let mut q0 = DMatrix::zeros(m.n, m.n);
                for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
                    let e = m.exp_a0(s);
                    q0 += (&e * &sst * e.transpose()) * w;
                }
                let mut q = DMatrix::zeros(m.dim(), m.dim());
                q.view_mut((0, 0), (m.n, m.n)).copy_from(&q0);
                q
            }
        }
    };
    // PSD check: signals quadrature failure
    PsdDecomp::new(&entries)?;
    OperatorMatrix::new(entries, SpaceTag::H, SpaceTag::H)
}

/// Monte-Carlo estimate of `R_t[phi](x) = E phi(e^{tA} x + W_A(t))`.
///
/// `t = 0` returns `phi(x)` exactly with no sampling. Returns the estimate
/// and its standard error.
pub fn apply_transition<F>(
    model: &Model,
    phi: F,
    t: f64,
    x: &StateVector,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64), CoreError>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    if t < 0.0 {
        return Err(CoreError::NegativeTime(t));
    }
    if x.dim() != model.dim() {
        return Err(CoreError::DimensionMismatch { expected: model.dim(), got: x.dim() });
    }
    if t == 0.0 {
        return Ok((phi(&x.coords), 0.0));
    }
    let mean = model.semigroup_coords(t, &x.coords);
    let noise = GaussianMeasure::centered(model.ou_cov_matrix(t), SpaceTag::H)?;
    let stats = parallel_mc(n_mc, 1, seed, |rng, out| {
        let w = noise.draw(rng);
        out[0] = phi(&(&mean + w));
    });
    Ok((stats[0].mean(), stats[0].std_err()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ScalarConfig, SpectralModel};
    use nalgebra::{dmatrix, dvector};

    fn scalar_model() -> Model {
        Model::Spectral(SpectralModel::scalar(&ScalarConfig { a: 1.0, g: 1.0, c: 1.0 }).unwrap())
    }

    #[test]
    fn covariance_scalar_closed_forms() {
        let m = scalar_model();
        let rule = QuadratureRule::gauss_legendre(0.5);
        let q = ou_covariance(&m, 0.5, &rule).unwrap();
        let expect = (1.0 - (-1.0f64).exp()) / 2.0;
        assert!((q.entries[(0, 0)] - expect).abs() < 1e-14);
        assert!((expect - 0.31606027941427883).abs() < 1e-15);
    }

    #[test]
    fn covariance_zero_drift_is_linear_in_t() {
        // A = 0, G = 1 surrogate: use a tiny drift limit via the delay model
        let m = Model::Delay(crate::models::DelayModel::canonical(4));
        let rule = QuadratureRule::gauss_legendre(2.0);
        let q = ou_covariance(&m, 2.0, &rule).unwrap();
        assert!((q.entries[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_quadrature_matches_closed_form_with_drift() {
        let m = Model::Delay(
            crate::models::DelayModel::build(&crate::models::DelayConfig {
                a0: vec![vec![-1.0]],
                b0: vec![vec![1.0]],
                sigma: vec![vec![1.0]],
                d: 1.0,
                eps_delay: 0.5,
                m_lag: 4,
                atoms: vec![],
            })
            .unwrap(),
        );
        let rule = QuadratureRule::gauss_legendre(0.5);
        let q = ou_covariance(&m, 0.5, &rule).unwrap();
        let expect = (1.0 - (-1.0f64).exp()) / 2.0;
        assert!((q.entries[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn psd_sqrt_pseudoinverse_diagonal_case() {
        let m = OperatorMatrix::on_h(DMatrix::from_diagonal(&dvector![4.0, 0.0, 1.0]));
        let s = psd_sqrt_pseudoinverse(&m, 1e-12).unwrap();
        let expect = DMatrix::from_diagonal(&dvector![0.5, 0.0, 1.0]);
        assert!((&s.entries - expect).norm() < 1e-12);
        // identity -> identity
        let id = OperatorMatrix::on_h(DMatrix::identity(3, 3));
        let sid = psd_sqrt_pseudoinverse(&id, 1e-12).unwrap();
        assert!((&sid.entries - DMatrix::identity(3, 3)).norm() < 1e-12);
        // non-symmetric input rejected
        let bad = OperatorMatrix::on_h(dmatrix![1.0, 2.0; 0.0, 1.0]);
        assert!(psd_sqrt_pseudoinverse(&bad, 1e-12).is_err());
    }

    #[test]
    fn pseudoinverse_projector_identity_on_random_rank2() {
        // rank-2 PSD 4x4 built from two fixed directions
        let v1 = dvector![1.0, 2.0, -1.0, 0.5];
        let v2 = dvector![0.0, 1.0, 1.0, -2.0];
        let mat = &v1 * v1.transpose() * 3.0 + &v2 * v2.transpose() * 0.7;
        let eig = PsdDecomp::new(&mat).unwrap();
        let inv_sqrt = eig.inv_sqrt(1e-12);
        let projector = eig.projector(1e-12);
        assert!((&inv_sqrt * &mat * &inv_sqrt - &projector).norm() < 1e-8);
        assert_eq!(eig.retained(1e-12).len(), 2);
        // M^{1/2} M^{-1/2} = projector
        let sqrt = eig.sqrt(1e-12);
        assert!((&sqrt * &inv_sqrt - &projector).norm() < 1e-8);
    }

    #[test]
    fn sampling_degenerate_and_deterministic() {
        let mu = dvector![1.0, -2.0];
        let zero_cov = GaussianMeasure::new(
            StateVector::in_h(mu.clone()),
            OperatorMatrix::on_h(DMatrix::zeros(2, 2)),
        )
        .unwrap();
        for s in sample_gaussian(&zero_cov, 5, 9) {
            assert_eq!(s.coords, mu);
        }
        let meas = GaussianMeasure::centered(DMatrix::identity(2, 2), SpaceTag::H).unwrap();
        let a = sample_gaussian(&meas, 100, 7);
        let b = sample_gaussian(&meas, 100, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.coords, y.coords);
        }
        let c = sample_gaussian(&meas, 100, 8);
        assert!(a[0].coords != c[0].coords);
    }

    #[test]
    fn sample_variance_within_mc_tolerance() {
        let meas = GaussianMeasure::centered(DMatrix::identity(1, 1), SpaceTag::H).unwrap();
        let xs = sample_gaussian(&meas, 100_000, 123);
        let mean: f64 = xs.iter().map(|s| s.coords[0]).sum::<f64>() / xs.len() as f64;
        let var: f64 =
            xs.iter().map(|s| (s.coords[0] - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((0.97..=1.03).contains(&var), "sample variance {var}");
    }

    #[test]
    fn sample_covariance_matches_target() {
        let cov = dmatrix![2.0, 0.6; 0.6, 1.0];
        let meas = GaussianMeasure::centered(cov.clone(), SpaceTag::H).unwrap();
        let xs = sample_gaussian(&meas, 100_000, 5);
        let mut acc = DMatrix::zeros(2, 2);
        for s in &xs {
            acc += &s.coords * s.coords.transpose();
        }
        acc /= xs.len() as f64;
        let rel = (&acc - &cov).norm() / cov.norm();
        assert!(rel < 0.03, "relative covariance error {rel}");
    }

    #[test]
    fn cameron_martin_values() {
        let sigma = OperatorMatrix::on_h(DMatrix::identity(1, 1));
        let zero = StateVector::in_h(dvector![0.0]);
        let z = StateVector::in_h(dvector![0.7]);
        assert_eq!(cameron_martin_density(&sigma, &zero, &z, 1e-12).unwrap(), 1.0);
        let y = StateVector::in_h(dvector![1.0]);
        let at0 = StateVector::in_h(dvector![0.0]);
        let d = cameron_martin_density(&sigma, &y, &at0, 1e-12).unwrap();
        assert!((d - (-0.5f64).exp()).abs() < 1e-14);
        assert!((d - 0.6065306597126334).abs() < 1e-12);
    }

    #[test]
    fn cameron_martin_rejects_out_of_range() {
        let sigma = OperatorMatrix::on_h(DMatrix::from_diagonal(&dvector![1.0, 0.0]));
        let y = StateVector::in_h(dvector![0.0, 1.0]);
        let z = StateVector::in_h(dvector![0.0, 0.0]);
        match cameron_martin_density(&sigma, &y, &z, 1e-12) {
            Err(CoreError::RangeViolation { .. }) => {}
            other => panic!("expected range violation, got {other:?}"),
        }
    }

    #[test]
    fn cameron_martin_normalizes_under_base_measure() {
        // MC integral of the density under N(0, Sigma) is 1 within 2%
        let cov = dmatrix![1.5, 0.4; 0.4, 0.8];
        let sigma = OperatorMatrix::on_h(cov.clone());
        let meas = GaussianMeasure::centered(cov, SpaceTag::H).unwrap();
        let y = StateVector::in_h(dvector![0.5, -0.3]);
        let mut rng = rng_from(17, &[]);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = StateVector::in_h(meas.draw(&mut rng));
            acc += cameron_martin_density(&sigma, &y, &z, 1e-12).unwrap();
        }
        let integral = acc / n as f64;
        assert!((0.98..=1.02).contains(&integral), "integral {integral}");
    }

    #[test]
    fn transition_constant_and_odd_cases() {
        let m = scalar_model();
        let x = StateVector::in_h(dvector![1.0]);
        let (v, se) = apply_transition(&m, |_| 3.25, 0.8, &x, 2_000, 1).unwrap();
        assert_eq!(v, 3.25);
        assert_eq!(se, 0.0);
        // odd integrand, symmetric law around e^{-t} * 0 = 0
        let x0 = StateVector::in_h(dvector![0.0]);
        let (v, se) = apply_transition(&m, |y| y[0].clamp(-10.0, 10.0), 0.5, &x0, 50_000, 2).unwrap();
        assert!(v.abs() < 3.0 * se + 1e-3, "v={v} se={se}");
    }

    #[test]
    fn transition_matches_gaussian_characteristic_identity() {
        // E cos(m + s Z) = cos(m) e^{-s^2/2}
        let m = scalar_model();
        let x = StateVector::in_h(dvector![1.0]);
        let t = 0.5;
        let (v, se) = apply_transition(&m, |y| y[0].cos(), t, &x, 200_000, 3).unwrap();
        let mean = (-t).exp();
        let var = (1.0 - (-2.0 * t).exp()) / 2.0;
        let exact = mean.cos() * (-var / 2.0).exp();
        assert!((v - exact).abs() < 4.0 * se, "v={v} exact={exact} se={se}");
        // t = 0: exact evaluation
        let (v0, _) = apply_transition(&m, |y| y[0].cos(), 0.0, &x, 10, 4).unwrap();
        assert_eq!(v0, 1.0f64.cos());
    }
}
