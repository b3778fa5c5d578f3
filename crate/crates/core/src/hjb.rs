//! Mild HJB solver by contraction iteration.
//!
//! The forward unknown is `w(tau, .) = v(T - tau, .)`, the value function
//! indexed by time-to-horizon. One Picard step applies
//!
//! ```text
//! Gamma(w)(tau, x) = R_tau[phi](x)
//!     + int_0^tau R_{tau-s}[ H_min(grad_C w(s, .)) + l0(T-s, .) ](x) ds
//! ```
//!
//! on a tensor feature grid, with all expectations evaluated by Monte Carlo
//! on shared, seed-derived noise buffers so the iteration is a fixed
//! deterministic contraction of the discrete field. Values use the
//! transition semigroup directly; gradients use the base smoothing formula
//! for the terminal and running-cost parts and the convolution-lifted
//! formula for the Hamiltonian part.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::models::{upsilon_matrix, Model, TrajectoryGrid};
use crate::numeric::{beta_fn, endpoint_clustered_grid};
use crate::ou::{GaussianMeasure, PsdDecomp, DEFAULT_CUTOFF};
use crate::rng::{derive_seed, rng_from};
use crate::smoothing::{lambda_base, lambda_conv, LambdaOperator};
use crate::spaces::SpaceTag;

pub type FeatureFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type TimeFeatureFn = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;

/// Finite grid over a closed bounded control set `U`.
#[derive(Debug, Clone)]
pub struct ControlSet {
    /// Grid points, sorted lexicographically.
    pub points: Vec<DVector<f64>>,
}

impl ControlSet {
    pub fn new(mut points: Vec<DVector<f64>>) -> Result<Self, CoreError> {
        if points.is_empty() {
            return Err(CoreError::invalid("control set must be nonempty"));
        }
        points.sort_by(|a, b| a.iter().partial_cmp(b.iter()).unwrap());
        Ok(ControlSet { points })
    }

    /// Uniform grid on the interval `[lo, hi]` (one control dimension).
    pub fn interval(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 1 && hi >= lo);
        let points = if n == 1 {
            vec![DVector::from_element(1, 0.5 * (lo + hi))]
        } else {
            (0..n)
                .map(|i| DVector::from_element(1, lo + (hi - lo) * i as f64 / (n - 1) as f64))
                .collect()
        };
        ControlSet { points }
    }

    pub fn singleton(u: DVector<f64>) -> Self {
        ControlSet { points: vec![u] }
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Costs of the control problem. `ell0` takes the original (value-function)
/// time argument; `t^eta ell0` must be bounded with the recorded sup.
#[derive(Clone)]
pub struct CostSpec {
    pub ell0: TimeFeatureFn,
    pub eta: f64,
    pub ell0_sup: f64,
    pub ell1: FeatureFn,
    pub phi: FeatureFn,
    pub phi_sup: f64,
    pub controls: ControlSet,
}

impl CostSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(CoreError::invalid("cost exponent eta must lie in [0, 1)"));
        }
        if !self.ell0_sup.is_finite() || !self.phi_sup.is_finite() {
            return Err(CoreError::invalid("cost bounds must be finite"));
        }
        Ok(())
    }
}

/// Control grid with precomputed running costs; evaluates the minimum-value
/// Hamiltonian `H_min(p) = min_u <p, u> + l1(u)`.
#[derive(Debug, Clone)]
pub struct HamiltonianSpec {
    pub points: Vec<DVector<f64>>,
    pub ell1_values: Vec<f64>,
    /// Lipschitz constant of `H_min`: the largest control norm.
    pub lipschitz: f64,
}

impl HamiltonianSpec {
    pub fn new(controls: &ControlSet, ell1: &FeatureFn) -> Self {
        let ell1_values: Vec<f64> = controls.points.iter().map(|u| ell1(u)).collect();
        let lipschitz = controls.points.iter().map(|u| u.norm()).fold(0.0, f64::max);
        HamiltonianSpec { points: controls.points.clone(), ell1_values, lipschitz }
    }

    /// `min_u <p, u> + l1(u)` over the grid.
    pub fn hamiltonian_min(&self, p: &DVector<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for (u, &c) in self.points.iter().zip(&self.ell1_values) {
            let v = p.dot(u) + c;
            if v < best {
                best = v;
            }
        }
        best
    }

    /// Minimizing grid point; ties broken by the smallest lexicographic `u`
    /// (the points are kept lex-sorted, and strict improvement keeps the
    /// first minimizer).
    pub fn hamiltonian_argmin(&self, p: &DVector<f64>) -> &DVector<f64> {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (i, (u, &c)) in self.points.iter().zip(&self.ell1_values).enumerate() {
            let v = p.dot(u) + c;
            if v < best {
                best = v;
                arg = i;
            }
        }
        &self.points[arg]
    }
}

/// `L = max |u|`, the Lipschitz constant of the Hamiltonian.
pub fn lipschitz_constant(controls: &ControlSet) -> f64 {
    controls.points.iter().map(|u| u.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContractionCheck {
    pub factor: f64,
    pub ok: bool,
    /// Largest horizon at which the factor equals 1/2.
    pub t_star: f64,
}

/// Small-horizon contraction condition: the fixed-point map is a 1/2
/// contraction when
/// `L kappa (B(1-gamma, 1-gamma) + (1-gamma)^{-1}) T^{1-gamma} <= 1/2`,
/// with `B` the Euler beta function evaluated as the convolution integral
/// `int_0^t (t-s)^{-gamma} s^{-gamma} ds = t^{1-2gamma} B(1-gamma, 1-gamma)`.
pub fn check_contraction_horizon(l: f64, gamma: f64, kappa: f64, t: f64) -> ContractionCheck {
    assert!((0.0..1.0).contains(&gamma), "gamma must lie in (0, 1)");
    let coef = l * kappa * (beta_fn(1.0 - gamma, 1.0 - gamma) + 1.0 / (1.0 - gamma));
    let factor = coef * t.powf(1.0 - gamma);
    let t_star = if coef > 0.0 { (0.5 / coef).powf(1.0 / (1.0 - gamma)) } else { f64::INFINITY };
    ContractionCheck { factor, ok: factor <= 0.5, t_star }
}

/// Tensor product grid over feature space with multilinear interpolation and
/// clamped extrapolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub axes: Vec<Vec<f64>>,
}

impl FeatureGrid {
    pub fn regular(center: &[f64], halfwidth: &[f64], per_dim: usize) -> Self {
        assert!(per_dim >= 2);
        let axes = center
            .iter()
            .zip(halfwidth)
            .map(|(&c, &h)| {
                (0..per_dim)
                    .map(|i| c - h + 2.0 * h * i as f64 / (per_dim - 1) as f64)
                    .collect()
            })
            .collect();
        FeatureGrid { axes }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of the flat grid index (row-major, first axis slowest).
    pub fn point(&self, mut idx: usize) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(d);
        for k in (0..d).rev() {
            let n = self.axes[k].len();
            out[k] = self.axes[k][idx % n];
            idx /= n;
        }
        out
    }

    fn locate(&self, k: usize, x: f64) -> (usize, f64, bool) {
        let axis = &self.axes[k];
        let n = axis.len();
        if x <= axis[0] {
            return (0, 0.0, x < axis[0]);
        }
        if x >= axis[n - 1] {
            return (n - 2, 1.0, x > axis[n - 1]);
        }
        let i = axis.partition_point(|&v| v <= x) - 1;
        let i = i.min(n - 2);
        ((i), (x - axis[i]) / (axis[i + 1] - axis[i]), false)
    }

    /// Multilinear interpolation of `values` (flat, row-major) at `x`;
    /// queries outside the box are clamped and flagged.
    pub fn interpolate(&self, values: &[f64], x: &DVector<f64>) -> (f64, bool) {
        let d = self.dim();
        let mut base = Vec::with_capacity(d);
        let mut frac = Vec::with_capacity(d);
        let mut clamped = false;
        for k in 0..d {
            let (i, w, c) = self.locate(k, x[k]);
            base.push(i);
            frac.push(w);
            clamped |= c;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut idx = 0usize;
            for k in 0..d {
                let hi = (corner >> k) & 1 == 1;
                weight *= if hi { frac[k] } else { 1.0 - frac[k] };
                idx = idx * self.axes[k].len() + base[k] + usize::from(hi);
            }
            if weight != 0.0 {
                acc += weight * values[idx];
            }
        }
        (acc, clamped)
    }
}

/// Feature map of the value representation: the coordinates the solution
/// depends on. Spectral models project the state (`times = [0]`); the delay
/// model reads the projected trajectory at fixed positive times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMap {
    pub times: Vec<f64>,
}

impl FeatureMap {
    pub fn for_model(model: &Model, times: Option<Vec<f64>>) -> Result<Self, CoreError> {
        match model {
            Model::Spectral(_) => Ok(FeatureMap { times: vec![0.0] }),
            Model::Delay(d) => {
                let times = times.ok_or_else(|| {
                    CoreError::invalid("delay models require explicit feature times")
                })?;
                if times.is_empty() || times[0] <= 0.0 || !times.windows(2).all(|p| p[0] < p[1]) {
                    return Err(CoreError::invalid("feature times must be positive and increasing"));
                }
                if *times.last().unwrap() > d.d {
                    return Err(CoreError::invalid("feature times must lie within the delay horizon"));
                }
                Ok(FeatureMap { times })
            }
        }
    }

    pub fn dim(&self, model: &Model) -> usize {
        self.times.len() * model.proj_dim()
    }

    /// Stacked `P e^{t_f A}` rows: features of a state are `push * x`.
    pub fn push_matrix(&self, model: &Model) -> DMatrix<f64> {
        let np = model.proj_dim();
        let mut out = DMatrix::zeros(self.times.len() * np, model.dim());
        for (f, &tf) in self.times.iter().enumerate() {
            out.view_mut((f * np, 0), (np, model.dim()))
                .copy_from(&model.proj_matrix(tf));
        }
        out
    }

    /// Features of the deterministic flow `e^{elapsed A} x`.
    pub fn flow_features(&self, model: &Model, elapsed: f64, x: &DVector<f64>) -> DVector<f64> {
        let np = model.proj_dim();
        let mut out = DVector::zeros(self.times.len() * np);
        for (f, &tf) in self.times.iter().enumerate() {
            out.rows_mut(f * np, np)
                .copy_from(&model.projected_coords(tf + elapsed, x));
        }
        out
    }

    /// A canonical state realizing the given feature coordinates.
    pub fn state(&self, model: &Model, c: &DVector<f64>) -> Result<DVector<f64>, CoreError> {
        match model {
            Model::Spectral(m) => Ok(m.p_basis.transpose() * c),
            Model::Delay(d) => {
                let np = model.proj_dim();
                let blocks: Vec<DVector<f64>> =
                    (0..self.times.len()).map(|f| c.rows(f * np, np).into_owned()).collect();
                d.state_from_features(&self.times, &blocks)
            }
        }
    }
}

/// Discrete value field on `[0, T]`: slices of values and C-gradients over a
/// feature grid.
///
/// Slices are indexed by time-to-horizon `tau` (so `tau = 0` stores the
/// terminal data and carries no gradient); `v(t, .) = slice at tau = T - t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueField {
    pub taus: Vec<f64>,
    pub grid: FeatureGrid,
    pub feature_times: Vec<f64>,
    /// `values[i]` is the flat value array of slice `i`.
    pub values: Vec<Vec<f64>>,
    /// `gradients[i][k]` is the flat array of gradient component `k` at
    /// slice `i`; empty for slice 0.
    pub gradients: Vec<Vec<Vec<f64>>>,
    /// Gradient weight exponent of the solution space.
    pub gamma: f64,
}

impl ValueField {
    pub fn horizon(&self) -> f64 {
        *self.taus.last().unwrap()
    }

    pub fn control_dim(&self) -> usize {
        self.gradients.iter().map(|g| g.len()).max().unwrap_or(0)
    }

    /// Value and gradient at time-to-horizon `tau` and feature point `c`,
    /// linear in time, multilinear in features. Gradients below the first
    /// positive slice are clamped to it. Returns `(value, gradient, clamped)`.
    pub fn lookup(&self, tau: f64, c: &DVector<f64>) -> (f64, DVector<f64>, bool) {
        let m = self.control_dim();
        let taus = &self.taus;
        let n = taus.len();
        let tau = tau.clamp(taus[0], taus[n - 1]);
        let i = if tau >= taus[n - 1] {
            n - 2
        } else {
            taus.partition_point(|&v| v <= tau).saturating_sub(1).min(n - 2)
        };
        let wt = ((tau - taus[i]) / (taus[i + 1] - taus[i])).clamp(0.0, 1.0);
        let (v0, c0) = self.grid.interpolate(&self.values[i], c);
        let (v1, c1) = self.grid.interpolate(&self.values[i + 1], c);
        let value = v0 * (1.0 - wt) + v1 * wt;
        let mut grad = DVector::zeros(m);
        let mut clamped = c0 | c1;
        for k in 0..m {
            // slice 0 stores no gradient; clamp to the first positive slice
            let lo = if self.gradients[i].is_empty() { i + 1 } else { i };
            let (g0, d0) = self.grid.interpolate(&self.gradients[lo][k], c);
            let (g1, d1) = self.grid.interpolate(&self.gradients[i + 1][k], c);
            let w_eff = if lo == i { wt } else { 1.0 };
            grad[k] = g0 * (1.0 - w_eff) + g1 * w_eff;
            clamped |= d0 | d1;
        }
        (value, grad, clamped)
    }

    /// Discrete weighted norm of the difference of two fields:
    /// `sup e^{mu tau} |dv| + sup e^{mu tau} tau^gamma |dgrad|`.
    pub fn weighted_distance(&self, other: &ValueField, mu: f64) -> f64 {
        let mut sup_v = 0.0f64;
        let mut sup_g = 0.0f64;
        for (i, &tau) in self.taus.iter().enumerate() {
            let w = (mu * tau).exp();
            for (a, b) in self.values[i].iter().zip(&other.values[i]) {
                sup_v = sup_v.max(w * (a - b).abs());
            }
            if self.gradients[i].is_empty() {
                continue;
            }
            let tw = w * tau.powf(self.gamma);
            for k in 0..self.gradients[i].len() {
                for (a, b) in self.gradients[i][k].iter().zip(&other.gradients[i][k]) {
                    sup_g = sup_g.max(tw * (a - b).abs());
                }
            }
        }
        sup_v + sup_g
    }

    /// `max_tau tau^gamma max|grad|`: the discrete gradient-weight seminorm.
    pub fn gradient_weight_norm(&self) -> f64 {
        let mut sup = 0.0f64;
        for (i, &tau) in self.taus.iter().enumerate() {
            let tw = tau.powf(self.gamma);
            for comp in &self.gradients[i] {
                for &g in comp {
                    sup = sup.max(tw * g.abs());
                }
            }
        }
        sup
    }

    pub fn sup_value(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum WindowPolicy {
    Split,
    Weighted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub n_mc: usize,
    pub n_time: usize,
    pub grid_per_dim: usize,
    pub n_slices: usize,
    pub sub_nodes: usize,
    pub window_policy: WindowPolicy,
    /// Exponential weight for the equivalent norm; negative so later times
    /// are down-weighted. Chosen by bisection when absent.
    pub mu: Option<f64>,
    pub cutoff: f64,
    pub seed: u64,
    /// Feature times for delay models.
    pub feature_times: Option<Vec<f64>>,
    /// Explicit half-widths of the feature grid; default is five standard
    /// deviations of the horizon-time OU law per coordinate.
    pub grid_halfwidth: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-3,
            max_iter: 30,
            n_mc: 20_000,
            n_time: 9,
            grid_per_dim: 21,
            n_slices: 6,
            sub_nodes: 4,
            window_policy: WindowPolicy::Split,
            mu: None,
            cutoff: DEFAULT_CUTOFF,
            seed: 1,
            feature_times: None,
            grid_halfwidth: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationStat {
    pub norm_diff: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: Vec<IterationStat>,
    pub windows: usize,
    pub window_overlap_defect: f64,
    pub mu: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub lipschitz: f64,
    pub contraction: ContractionCheck,
    pub c_t: f64,
    pub out_of_box: usize,
    pub wall_time_s: f64,
}

/// Terminal data of one contraction window: the problem terminal cost, or
/// the start slice of the previously solved window.
enum TerminalData<'a> {
    Phi,
    Field { values: &'a [f64], gradients: &'a [Vec<f64>] },
}

/// Shared engine for one contraction window.
struct Engine<'a> {
    model: &'a Model,
    costs: &'a CostSpec,
    ham: &'a HamiltonianSpec,
    fmap: &'a FeatureMap,
    grid: &'a FeatureGrid,
    /// Canonical states of the grid points.
    states: &'a [DVector<f64>],
    /// Local slice times (time-to-window-start), slice 0 at 0.
    taus: Vec<f64>,
    /// Offset of this window's local time 0 from the global forward clock.
    window_start: f64,
    /// Global horizon `T`, for the running-cost time relabel.
    horizon: f64,
    gamma: f64,
    cfg: &'a SolverConfig,
    seed: u64,
}

struct SliceAssembly {
    /// Terminal-part smoothing operator at elapsed `tau` (window 1 only).
    base_op: Option<LambdaOperator>,
    /// Noise features for the terminal part (projected covariance at `tau`).
    term_eig: PsdDecomp,
    /// Full-state noise covariance eigen pairs per quadrature node.
    nodes: Vec<NodeAssembly>,
    /// Feature push `F W` of a full-state draw.
    fpush: DMatrix<f64>,
    /// Projection `P W` of a full-state draw.
    ppush: DMatrix<f64>,
}

struct NodeAssembly {
    s: f64,
    weight: f64,
    dt: f64,
    noise: GaussianMeasure,
    conv_op: LambdaOperator,
    u_mat: DMatrix<f64>,
    base_dt_op: LambdaOperator,
}

impl<'a> Engine<'a> {
    fn grid_states(
        model: &Model,
        fmap: &FeatureMap,
        grid: &FeatureGrid,
    ) -> Result<Vec<DVector<f64>>, CoreError> {
        (0..grid.len()).map(|p| fmap.state(model, &grid.point(p))).collect()
    }

    fn assemble_slice(&self, tau: f64, with_phi_gradient: bool) -> Result<SliceAssembly, CoreError> {
        let base_op = if with_phi_gradient {
            Some(lambda_base(self.model, tau, self.cfg.cutoff)?.0)
        } else {
            None
        };
        let term_eig = PsdDecomp::new(&self.model.proj_cov(tau))?;
        let fpush = self.fmap.push_matrix(self.model);
        let ppush = self.model.proj_matrix(0.0);
        let (s_nodes, s_weights) = endpoint_clustered_grid(tau, self.cfg.n_time);
        let mut nodes = Vec::with_capacity(s_nodes.len());
        for (&s, &wq) in s_nodes.iter().zip(&s_weights) {
            let dt = tau - s;
            let sub = TrajectoryGrid::midpoint(s.min(self.window_start + s), self.cfg.sub_nodes);
            let (conv_op, _) = lambda_conv(self.model, &sub, dt, self.cfg.cutoff)?;
            let u_mat = upsilon_matrix(self.model, &sub);
            let noise = GaussianMeasure::centered(self.model.ou_cov_matrix(dt), SpaceTag::H)?;
            let (base_dt_op, _) = lambda_base(self.model, dt, self.cfg.cutoff)?;
            nodes.push(NodeAssembly { s, weight: wq, dt, noise, conv_op, u_mat, base_dt_op });
        }
        Ok(SliceAssembly { base_op, term_eig, nodes, fpush, ppush })
    }

    /// One Picard application on this window. `terminal` supplies the data
    /// propagated by the semigroup part; `prev` is the current iterate read
    /// for the Hamiltonian. Slice 0 of the output repeats the terminal data.
    fn step(&self, prev: &ValueField, terminal: &TerminalData) -> Result<(ValueField, usize), CoreError> {
        let m = self.model.control_dim();
        let n_pts = self.grid.len();
        let mut values = Vec::with_capacity(self.taus.len());
        let mut gradients = Vec::with_capacity(self.taus.len());
        values.push(self.terminal_values(terminal));
        gradients.push(Vec::new());
        let clamp_count = std::sync::atomic::AtomicUsize::new(0);

        for (i, &tau) in self.taus.iter().enumerate().skip(1) {
            let with_phi_grad = matches!(terminal, TerminalData::Phi);
            let asm = self.assemble_slice(tau, with_phi_grad)?;
            let seed_slice = derive_seed(self.seed, &[i as u64]);

            // noise buffers shared by every grid point
            let term_noise: Vec<DVector<f64>> = {
                let mut rng = rng_from(seed_slice, &[0]);
                (0..self.cfg.n_mc).map(|_| asm.term_eig.draw(&mut rng)).collect()
            };
            // per-node buffers: (traj z, features FW, projection PW)
            let node_buffers: Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>)> = asm
                .nodes
                .iter()
                .enumerate()
                .map(|(q, node)| {
                    let mut rng = rng_from(seed_slice, &[1 + q as u64]);
                    let mut zs = Vec::with_capacity(self.cfg.n_mc);
                    let mut fws = Vec::with_capacity(self.cfg.n_mc);
                    let mut pws = Vec::with_capacity(self.cfg.n_mc);
                    for _ in 0..self.cfg.n_mc {
                        let w = node.noise.draw(&mut rng);
                        zs.push(&node.u_mat * &w);
                        fws.push(&asm.fpush * &w);
                        pws.push(&asm.ppush * &w);
                    }
                    (zs, fws, pws)
                })
                .collect();

            let results: Vec<(f64, DVector<f64>, usize)> = (0..n_pts)
                .into_par_iter()
                .map(|p| {
                    let state = &self.states[p];
                    let inv_n = 1.0 / self.cfg.n_mc as f64;
                    let mut clamped = 0usize;

                    // terminal part
                    let mut value = 0.0;
                    let mut grad = DVector::zeros(m);
                    match terminal {
                        TerminalData::Phi => {
                            let mean = self.model.projected_coords(tau, state);
                            let op = asm.base_op.as_ref().unwrap();
                            for y in &term_noise {
                                let v = (self.costs.phi)(&(&mean + y));
                                value += v;
                                grad.axpy(v, &(&op.weight_map * y), 1.0);
                            }
                        }
                        TerminalData::Field { values: tv, gradients: tg } => {
                            // R_tau[w_prev] and R_tau[grad w_prev]: the noise
                            // here must be the full-state law pushed through
                            // the feature map; reuse the first node buffer
                            // closest to dt = tau.
                            let mean = self.fmap.flow_features(self.model, tau, state);
                            let full = GaussianMeasure::centered(
                                self.model.ou_cov_matrix(tau),
                                SpaceTag::H,
                            )
                            .expect("covariance");
                            let mut rng = rng_from(seed_slice, &[900]);
                            for _ in 0..self.cfg.n_mc {
                                let w = full.draw(&mut rng);
                                let feats = &mean + &asm.fpush * w;
                                let (v, c) = self.grid.interpolate(tv, &feats);
                                clamped += usize::from(c);
                                value += v;
                                for k in 0..m {
                                    let (g, _) = self.grid.interpolate(&tg[k], &feats);
                                    grad[k] += g;
                                }
                            }
                        }
                    }
                    value *= inv_n;
                    grad *= inv_n;

                    // quadrature over s in (0, tau)
                    for (q, node) in asm.nodes.iter().enumerate() {
                        let (zs, fws, pws) = &node_buffers[q];
                        let fmean = self.fmap.flow_features(self.model, node.dt, state);
                        let pmean = self.model.projected_coords(node.dt, state);
                        // global forward time of the integrand slice and its
                        // original-time cost argument
                        let s_global = self.window_start + node.s;
                        let t_cost = (self.horizon - s_global).max(0.0);
                        let mut acc_v = 0.0;
                        let mut acc_g = DVector::zeros(m);
                        for j in 0..self.cfg.n_mc {
                            let feats = &fmean + &fws[j];
                            let (_, grad_w, c) = prev.lookup(node.s, &feats);
                            clamped += usize::from(c);
                            let h = self.ham.hamiltonian_min(&grad_w);
                            let l0 = (self.costs.ell0)(t_cost, &(&pmean + &pws[j]));
                            acc_v += h + l0;
                            acc_g.axpy(h, &(&node.conv_op.weight_map * &zs[j]), 1.0);
                            acc_g.axpy(l0, &(&node.base_dt_op.weight_map * &pws[j]), 1.0);
                        }
                        value += node.weight * acc_v * inv_n;
                        grad.axpy(node.weight * inv_n, &acc_g, 1.0);
                    }
                    (value, grad, clamped)
                })
                .collect();

            let mut vslice = Vec::with_capacity(n_pts);
            let mut gslice = vec![Vec::with_capacity(n_pts); m];
            for (v, g, c) in results {
                vslice.push(v);
                for k in 0..m {
                    gslice[k].push(g[k]);
                }
                clamp_count.fetch_add(c, std::sync::atomic::Ordering::Relaxed);
            }
            values.push(vslice);
            gradients.push(gslice);
        }
        Ok((
            ValueField {
                taus: self.taus.clone(),
                grid: self.grid.clone(),
                feature_times: self.fmap.times.clone(),
                values,
                gradients,
                gamma: self.gamma,
            },
            clamp_count.into_inner(),
        ))
    }

    fn terminal_values(&self, terminal: &TerminalData) -> Vec<f64> {
        match terminal {
            TerminalData::Phi => (0..self.grid.len())
                .map(|p| {
                    let c = self.grid.point(p);
                    let feats = self.phi_features(&c);
                    (self.costs.phi)(&feats)
                })
                .collect(),
            TerminalData::Field { values, .. } => values.to_vec(),
        }
    }

    /// The terminal cost reads the projection of the canonical state; for
    /// spectral models this is the feature point itself.
    fn phi_features(&self, c: &DVector<f64>) -> DVector<f64> {
        match self.model {
            Model::Spectral(_) => c.clone(),
            Model::Delay(d) => {
                let state = self.fmap.state(self.model, c).expect("grid state");
                d.x0_of(&state)
            }
        }
    }

    /// Initial iterate `w0 = R_tau[terminal]`: the Picard step with the
    /// Hamiltonian and running cost switched off.
    fn initial(&self, terminal: &TerminalData) -> Result<ValueField, CoreError> {
        let zero_costs = CostSpec {
            ell0: Arc::new(|_, _| 0.0),
            eta: 0.0,
            ell0_sup: 0.0,
            ell1: self.costs.ell1.clone(),
            phi: self.costs.phi.clone(),
            phi_sup: self.costs.phi_sup,
            controls: ControlSet::singleton(DVector::zeros(self.model.control_dim())),
        };
        let zero_ham = HamiltonianSpec {
            points: vec![DVector::zeros(self.model.control_dim())],
            ell1_values: vec![0.0],
            lipschitz: 0.0,
        };
        let sub = Engine { costs: &zero_costs, ham: &zero_ham, ..*self };
        // the dummy previous iterate is never read (H from a zero set is 0)
        let dummy = ValueField {
            taus: self.taus.clone(),
            grid: self.grid.clone(),
            feature_times: self.fmap.times.clone(),
            values: vec![vec![0.0; self.grid.len()]; self.taus.len()],
            gradients: {
                let mut g = vec![vec![vec![0.0; self.grid.len()]; self.model.control_dim()]; self.taus.len()];
                g[0] = Vec::new();
                g
            },
            gamma: self.gamma,
        };
        Ok(sub.step(&dummy, terminal)?.0)
    }
}

/// Fits `(kappa, gamma)` of the base smoothing bound on a log grid below
/// `t_hi`, reporting the max-ratio constant so the bound holds pointwise on
/// the probe set.
pub fn fit_smoothing_exponents(model: &Model, t_lo: f64, t_hi: f64, n: usize) -> Result<(f64, f64), CoreError> {
    let times: Vec<f64> =
        (0..n).map(|i| t_lo * (t_hi / t_lo).powf(i as f64 / (n - 1) as f64)).collect();
    let mut norms = Vec::with_capacity(n);
    for &t in &times {
        norms.push(lambda_base(model, t, DEFAULT_CUTOFF)?.0.norm);
    }
    let (_, gamma, _) = crate::numeric::fit_power_law(&times, &norms)
        .ok_or_else(|| CoreError::invalid("smoothing fit failed"))?;
    let gamma = gamma.clamp(1e-3, 0.999);
    let kappa = times
        .iter()
        .zip(&norms)
        .map(|(&t, &nm)| nm / t.powf(-gamma).max(1.0))
        .fold(0.0f64, f64::max);
    Ok((kappa, gamma))
}

/// Numerically computed contraction factor of the weighted norm for a given
/// `mu < 0`, by quadrature of the two convolution bounds over the slice grid.
fn weighted_factor(l: f64, kappa: f64, gamma: f64, taus: &[f64], mu: f64) -> f64 {
    let mut worst = 0.0f64;
    for &t in taus.iter().filter(|&&t| t > 0.0) {
        let (nodes, weights) = endpoint_clustered_grid(t, 33);
        let mut sup_part = 0.0;
        let mut grad_part = 0.0;
        for (&s, &w) in nodes.iter().zip(&weights) {
            sup_part += w * s.powf(-gamma) * (mu * (t - s)).exp();
            grad_part += w * (t - s).powf(-gamma) * s.powf(-gamma) * (mu * (t - s)).exp();
        }
        worst = worst.max(l * sup_part + l * kappa * t.powf(gamma) * grad_part);
    }
    worst
}

/// Mild-HJB solve: Picard iteration of the fixed-point map, with interval
/// splitting into half-overlapping windows of admissible length when the
/// horizon fails the small-horizon condition (policy `Split`), or a single
/// domain ran in an exponentially weighted norm (policy `Weighted`).
pub fn solve_hjb(
    model: &Model,
    costs: &CostSpec,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<(ValueField, ConvergenceReport), CoreError> {
    costs.validate()?;
    if horizon <= 0.0 {
        return Err(CoreError::invalid("horizon must be positive"));
    }
    let start = Instant::now();
    let ham = HamiltonianSpec::new(&costs.controls, &costs.ell1);
    let l = ham.lipschitz;
    let (kappa, gamma) = fit_smoothing_exponents(model, (horizon * 1e-3).min(1e-3), horizon, 12)?;
    let check = check_contraction_horizon(l, gamma, kappa, horizon);

    let fmap = FeatureMap::for_model(model, cfg.feature_times.clone())?;
    let dim_feat = fmap.dim(model);
    let halfwidth = match &cfg.grid_halfwidth {
        Some(h) => {
            if h.len() != dim_feat {
                return Err(CoreError::DimensionMismatch { expected: dim_feat, got: h.len() });
            }
            h.clone()
        }
        None => {
            let push = fmap.push_matrix(model);
            let cov = &push * model.ou_cov_matrix(horizon) * push.transpose();
            (0..dim_feat).map(|i| 5.0 * cov[(i, i)].max(1e-12).sqrt()).collect()
        }
    };
    let grid = FeatureGrid::regular(&vec![0.0; dim_feat], &halfwidth, cfg.grid_per_dim);
    let states = Engine::grid_states(model, &fmap, &grid)?;

    let single = check.ok || cfg.window_policy == WindowPolicy::Weighted || l == 0.0;
    let mut iterations: Vec<IterationStat> = Vec::new();
    let mut out_of_box = 0usize;
    let mut overlap_defect = 0.0f64;

    let taus_of = |a: f64, b: f64, slices: usize| -> Vec<f64> {
        (0..=slices).map(|i| a + (b - a) * i as f64 / slices as f64).collect()
    };

    let mut mu_used = 0.0;
    let (field, windows, converged) = if single {
        let mu = if check.ok || l == 0.0 {
            0.0
        } else {
            match cfg.mu {
                Some(m) => m.min(0.0),
                None => {
                    // bisect mu < 0 until the weighted factor drops below 1/2
                    let taus = taus_of(0.0, horizon, cfg.n_slices);
                    let mut lo = -1.0;
                    while weighted_factor(l, kappa, gamma, &taus, lo) > 0.5 && lo > -1e6 {
                        lo *= 2.0;
                    }
                    let mut hi = 0.0;
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if weighted_factor(l, kappa, gamma, &taus, mid) > 0.5 {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    lo
                }
            }
        };
        mu_used = mu;
        let engine = Engine {
            model,
            costs,
            ham: &ham,
            fmap: &fmap,
            grid: &grid,
            states,
            taus: taus_of(0.0, horizon, cfg.n_slices),
            window_start: 0.0,
            horizon,
            gamma,
            cfg,
            seed: derive_seed(cfg.seed, &[0]),
        };
        let (w, conv) =
            iterate_window(&engine, &TerminalData::Phi, mu, cfg, &mut iterations, &mut out_of_box)?;
        (w, 1, conv)
    } else {
        // half-overlapping windows of admissible length
        let t1 = (0.999 * check.t_star).min(horizon);
        let step = t1 / 2.0;
        let mut windows = Vec::new();
        let mut a = 0.0;
        loop {
            let b = (a + t1).min(horizon);
            windows.push((a, b));
            if b >= horizon {
                break;
            }
            a += step;
        }
        let mut all_converged = true;
        let mut global: Option<ValueField> = None;
        let mut prev_field: Option<ValueField> = None;
        for (widx, &(a, b)) in windows.iter().enumerate() {
            let slices = cfg.n_slices.max(2);
            let taus = taus_of(0.0, b - a, slices);
            let engine = Engine {
                model,
                costs,
                ham: &ham,
                fmap: &fmap,
                grid: &grid,
                states: Engine::grid_states(model, &fmap, &grid)?,
                taus,
                window_start: a,
                horizon,
                gamma,
                cfg,
                seed: derive_seed(cfg.seed, &[widx as u64]),
            };
            // terminal data: slice of the previous window at local time a
            let (term_values, term_grads);
            let terminal = if widx == 0 {
                TerminalData::Phi
            } else {
                let prev = prev_field.as_ref().unwrap();
                let local = a - windows[widx - 1].0;
                let (v, g) = slice_at(prev, local);
                term_values = v;
                term_grads = g;
                TerminalData::Field { values: &term_values, gradients: &term_grads }
            };
            let (w, conv) =
                iterate_window(&engine, &terminal, 0.0, cfg, &mut iterations, &mut out_of_box)?;
            all_converged &= conv;
            // overlap consistency and concatenation
            if let Some(g) = &mut global {
                overlap_defect = overlap_defect.max(merge_overlap(g, &w, a));
            } else {
                global = Some(offset_field(&w, a));
                prev_field = Some(w);
                continue;
            }
            merge_field(global.as_mut().unwrap(), &w, a);
            prev_field = Some(w);
        }
        (global.unwrap(), windows.len(), all_converged)
    };

    // a-priori sup bound through the contraction constants (exponential in
    // the number of windows, as the iterated estimate gives)
    let h0 = ham.hamiltonian_min(&DVector::zeros(model.control_dim())).abs();
    let eta = costs.eta;
    let per_window_c = costs.ell0_sup * horizon.powf(1.0 - eta) / (1.0 - eta) + h0 * horizon;
    let mut bound = costs.phi_sup;
    for _ in 0..windows {
        bound = 2.0 * (bound + per_window_c);
    }
    let c_t = bound / (costs.phi_sup + costs.ell0_sup).max(1e-300);

    let report = ConvergenceReport {
        converged,
        iterations,
        windows,
        window_overlap_defect: overlap_defect,
        mu: mu_used,
        gamma,
        kappa,
        lipschitz: l,
        contraction: check,
        c_t,
        out_of_box,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if !converged {
        return Err(CoreError::NonConvergence(format!(
            "
HJB iteration did not reach tol {} in {} iterations",
            cfg.tol, cfg.max_iter
        )));
    }
    Ok((field, report))
}

fn iterate_window(
    engine: &Engine,
    terminal: &TerminalData,
    mu: f64,
    cfg: &SolverConfig,
    iterations: &mut Vec<IterationStat>,
    out_of_box: &mut usize,
) -> Result<(ValueField, bool), CoreError> {
    let mut w = engine.initial(terminal)?;
    let mut last_diff: Option<f64> = None;
    let mut violations = 0usize;
    for _ in 0..cfg.max_iter {
        let (next, clamped) = engine.step(&w, terminal)?;
        *out_of_box += clamped;
        let diff = next.weighted_distance(&w, mu);
        let ratio = last_diff.map(|d| if d > 0.0 { diff / d } else { 0.0 });
        iterations.push(IterationStat { norm_diff: diff, ratio });
        if let Some(r) = ratio {
            if r > 1.0 {
                violations += 1;
                if violations >= 3 {
                    return Err(CoreError::NonConvergence(
                        "contraction ratio above 1 for 3 consecutive iterates".into(),
                    ));
                }
            } else {
                violations = 0;
            }
        }
        w = next;
        if diff <= cfg.tol {
            return Ok((w, true));
        }
        last_diff = Some(diff);
    }
    Ok((w, false))
}

/// Linear-in-time slice extraction (values and gradients) at local time
/// `tau` of a window field.
fn slice_at(field: &ValueField, tau: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n_pts = field.grid.len();
    let m = field.control_dim();
    let mut values = vec![0.0; n_pts];
    let mut grads = vec![vec![0.0; n_pts]; m];
    for p in 0..n_pts {
        let c = field.grid.point(p);
        let (v, g, _) = field.lookup(tau, &c);
        values[p] = v;
        for k in 0..m {
            grads[k][p] = g[k];
        }
    }
    (values, grads)
}

fn offset_field(w: &ValueField, a: f64) -> ValueField {
    let mut out = w.clone();
    out.taus = w.taus.iter().map(|&t| t + a).collect();
    out
}

/// Max value discrepancy between the already-merged global field and the new
/// window on their overlap.
fn merge_overlap(global: &ValueField, w: &ValueField, a: f64) -> f64 {
    let mut worst = 0.0f64;
    for (i, &tau) in w.taus.iter().enumerate() {
        let g_tau = tau + a;
        if g_tau > global.horizon() + 1e-12 {
            continue;
        }
        for p in 0..w.grid.len() {
            let c = w.grid.point(p);
            let (gv, _, _) = global.lookup(g_tau, &c);
            worst = worst.max((gv - w.values[i][p]).abs());
        }
    }
    worst
}

/// Appends the strictly-later part of the window to the global field; the
/// overlap keeps the newer window's slices.
fn merge_field(global: &mut ValueField, w: &ValueField, a: f64) {
    let keep: Vec<usize> = (0..global.taus.len())
        .filter(|&i| global.taus[i] < a + w.taus[1] - 1e-12)
        .collect();
    let mut taus: Vec<f64> = keep.iter().map(|&i| global.taus[i]).collect();
    let mut values: Vec<Vec<f64>> = keep.iter().map(|&i| global.values[i].clone()).collect();
    let mut gradients: Vec<Vec<Vec<f64>>> =
        keep.iter().map(|&i| global.gradients[i].clone()).collect();
    for (i, &tau) in w.taus.iter().enumerate().skip(1) {
        let g_tau = tau + a;
        if g_tau <= *taus.last().unwrap() + 1e-12 {
            continue;
        }
        taus.push(g_tau);
        values.push(w.values[i].clone());
        gradients.push(w.gradients[i].clone());
    }
    global.taus = taus;
    global.values = values;
    global.gradients = gradients;
}

/// Value and C-gradient at original time `t` and state `xbar`, read through
/// the feature map and multilinear interpolation.
pub fn evaluate_value(
    w: &ValueField,
    t: f64,
    xbar: &DVector<f64>,
    model: &Model,
) -> Result<(f64, DVector<f64>, bool), CoreError> {
    let horizon = w.horizon();
    if !(0.0..=horizon + 1e-12).contains(&t) {
        return Err(CoreError::invalid(format!("time {t} outside [0, {horizon}]")));
    }
    let fmap = FeatureMap { times: w.feature_times.clone() };
    let tau = (horizon - t).max(0.0);
    let feats = fmap.flow_features(model, 0.0, xbar);
    let (v, g, clamped) = w.lookup(tau, &feats);
    Ok((v, g, clamped))
}

/// Sup defect of the mild equation over probe points `(t, state)`,
/// recomputed with independent seeds.
pub fn mild_residual(
    w: &ValueField,
    model: &Model,
    costs: &CostSpec,
    probes: &[(f64, DVector<f64>)],
    n_mc: usize,
    seed: u64,
) -> Result<f64, CoreError> {
    let ham = HamiltonianSpec::new(&costs.controls, &costs.ell1);
    let horizon = w.horizon();
    let fmap = FeatureMap { times: w.feature_times.clone() };
    let fpush = fmap.push_matrix(model);
    let ppush = model.proj_matrix(0.0);
    let mut worst = 0.0f64;
    for (pi, (t, state)) in probes.iter().enumerate() {
        let tau = horizon - t;
        if tau <= 0.0 {
            continue;
        }
        let (lhs, _, _) = evaluate_value(w, *t, state, model)?;
        // terminal part
        let mean = model.projected_coords(tau, state);
        let term_eig = PsdDecomp::new(&model.proj_cov(tau))?;
        let mut rng = rng_from(seed, &[pi as u64, 0]);
        let mut rhs = 0.0;
        for _ in 0..n_mc {
            rhs += (costs.phi)(&(&mean + term_eig.draw(&mut rng)));
        }
        rhs /= n_mc as f64;
        // convolution part
        let (nodes, weights) = endpoint_clustered_grid(tau, 15);
        for (q, (&s, &wq)) in nodes.iter().zip(&weights).enumerate() {
            let dt = tau - s;
            let noise = GaussianMeasure::centered(model.ou_cov_matrix(dt), SpaceTag::H)?;
            let fmean = fmap.flow_features(model, dt, state);
            let pmean = model.projected_coords(dt, state);
            let t_cost = (horizon - s).max(0.0);
            let mut rng = rng_from(seed, &[pi as u64, 1 + q as u64]);
            let mut acc = 0.0;
            for _ in 0..n_mc {
                let wdraw = noise.draw(&mut rng);
                let feats = &fmean + &fpush * &wdraw;
                let (_, grad_w, _) = w.lookup(s, &feats);
                acc += ham.hamiltonian_min(&grad_w) + (costs.ell0)(t_cost, &(&pmean + &ppush * wdraw));
            }
            rhs += wq * acc / n_mc as f64;
        }
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ScalarConfig, SpectralModel};
    use nalgebra::dvector;

    fn scalar_model() -> Model {
        Model::Spectral(SpectralModel::scalar(&ScalarConfig { a: 1.0, g: 1.0, c: 1.0 }).unwrap())
    }

    fn cost_cos(controls: ControlSet) -> CostSpec {
        CostSpec {
            ell0: Arc::new(|_, _| 0.0),
            eta: 0.0,
            ell0_sup: 0.0,
            ell1: Arc::new(|_| 0.0),
            phi: Arc::new(|c| c[0].cos()),
            phi_sup: 1.0,
            controls,
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let u = ControlSet::interval(-1.0, 1.0, 2001);
        let ham = HamiltonianSpec::new(&u, &(Arc::new(|_: &DVector<f64>| 0.0) as FeatureFn));
        assert_eq!(ham.hamiltonian_min(&dvector![2.0]), -2.0);
        assert_eq!(ham.hamiltonian_min(&dvector![0.0]), 0.0);
        assert_eq!(ham.hamiltonian_argmin(&dvector![2.0])[0], -1.0);
        // ties broken by smallest lexicographic point
        assert_eq!(ham.hamiltonian_argmin(&dvector![0.0])[0], -1.0);

        let quad = HamiltonianSpec::new(
            &u,
            &(Arc::new(|u: &DVector<f64>| 0.5 * u[0] * u[0]) as FeatureFn),
        );
        let hm = quad.hamiltonian_min(&dvector![0.5]);
        assert!((hm - -0.125).abs() < 1e-12);
        assert!((quad.hamiltonian_argmin(&dvector![0.5])[0] - -0.5).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_lipschitz_property() {
        let u = ControlSet::interval(-1.0, 1.0, 201);
        let ham = HamiltonianSpec::new(&u, &(Arc::new(|_: &DVector<f64>| 0.0) as FeatureFn));
        assert_eq!(lipschitz_constant(&u), 1.0);
        assert_eq!(lipschitz_constant(&ControlSet::singleton(dvector![0.0])), 0.0);
        let mut rng = rng_from(2, &[]);
        for _ in 0..50 {
            let p = dvector![rand::Rng::gen_range(&mut rng, -3.0..3.0)];
            let q = dvector![rand::Rng::gen_range(&mut rng, -3.0..3.0)];
            let dh = (ham.hamiltonian_min(&p) - ham.hamiltonian_min(&q)).abs();
            assert!(dh <= 1.0 * (&p - &q).norm() + 1e-12);
        }
    }

    #[test]
    fn contraction_horizon_formula() {
        let zero = check_contraction_horizon(0.0, 0.5, 1.0, 1.0);
        assert_eq!(zero.factor, 0.0);
        assert!(zero.ok);
        assert!(zero.t_star.is_infinite());

        // gamma = 1/2, L kappa = 1: coefficient is pi + 2
        let c = check_contraction_horizon(1.0, 0.5, 1.0, 0.01);
        let coef = std::f64::consts::PI + 2.0;
        assert!((c.factor - coef * 0.1).abs() < 1e-12);
        // the defining equation of t_star gives factor exactly 1/2 there
        let at_star = check_contraction_horizon(1.0, 0.5, 1.0, c.t_star);
        assert!((at_star.factor - 0.5).abs() < 1e-9);
        assert!(check_contraction_horizon(1.0, 0.5, 1.0, 0.9 * c.t_star).ok);
    }

    #[test]
    fn feature_grid_interpolates_multilinearly() {
        let grid = FeatureGrid::regular(&[0.0, 0.0], &[1.0, 2.0], 5);
        assert_eq!(grid.len(), 25);
        // linear function reproduced exactly, including at midpoints
        let vals: Vec<f64> =
            (0..grid.len()).map(|p| {
                let c = grid.point(p);
                2.0 * c[0] - 0.5 * c[1] + 1.0
            }).collect();
        let (v, clamped) = grid.interpolate(&vals, &dvector![0.3, -0.7]);
        assert!((v - (2.0 * 0.3 + 0.35 + 1.0)).abs() < 1e-12);
        assert!(!clamped);
        // out-of-box queries clamp and flag
        let (v_edge, clamped) = grid.interpolate(&vals, &dvector![5.0, 0.0]);
        assert!((v_edge - (2.0 * 1.0 + 1.0)).abs() < 1e-12);
        assert!(clamped);
    }

    #[test]
    fn degenerate_solve_matches_transition_semigroup() {
        // U = {0}, l0 = 0: v(t, .) = R_{T-t}[phi]
        let model = scalar_model();
        let costs = cost_cos(ControlSet::singleton(dvector![0.0]));
        let cfg = SolverConfig {
            n_mc: 30_000,
            grid_per_dim: 9,
            n_slices: 4,
            seed: 11,
            ..SolverConfig::default()
        };
        let t_max = 0.5;
        let (w, report) = solve_hjb(&model, &costs, t_max, &cfg).unwrap();
        assert!(report.converged);
        assert_eq!(report.windows, 1);
        // one effective iteration: the first step is already the fixed point
        assert!(report.iterations.len() <= 2);
        for &x in &[-1.0, 0.0, 0.8] {
            let state = dvector![x];
            let (v, _, _) = evaluate_value(&w, 0.0, &state, &model).unwrap();
            let mean = (-t_max).exp() * x;
            let var = (1.0 - (-2.0 * t_max).exp()) / 2.0;
            let exact = mean.cos() * (-var / 2.0).exp();
            assert!((v - exact).abs() < 0.02, "x={x}: v={v} exact={exact}");
        }
        // final condition stored exactly
        let (v_t, _, _) = evaluate_value(&w, t_max, &dvector![0.4], &model).unwrap();
        assert!((v_t - 0.4f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_constant_running_cost() {
        // U = {0}, phi = 0, l0 = c: v(t, x) = c (T - t) to near machine
        // precision (constants are integrated exactly)
        let model = scalar_model();
        let costs = CostSpec {
            ell0: Arc::new(|_, _| 0.7),
            eta: 0.0,
            ell0_sup: 0.7,
            ell1: Arc::new(|_| 0.0),
            phi: Arc::new(|_| 0.0),
            phi_sup: 0.0,
            controls: ControlSet::singleton(dvector![0.0]),
        };
        let cfg = SolverConfig {
            n_mc: 400,
            grid_per_dim: 5,
            n_slices: 4,
            seed: 3,
            ..SolverConfig::default()
        };
        let t_max = 0.8;
        let (w, _) = solve_hjb(&model, &costs, t_max, &cfg).unwrap();
        for &t in &[0.0, 0.3, 0.8] {
            let (v, _, _) = evaluate_value(&w, t, &dvector![0.2], &model).unwrap();
            let exact = 0.7 * (t_max - t);
            assert!((v - exact).abs() <= 1e-6 * exact.max(1e-9), "t={t}: {v} vs {exact}");
        }
    }

    #[test]
    fn solver_contracts_on_scalar_benchmark() {
        let model = scalar_model();
        let costs = cost_cos(ControlSet::interval(-1.0, 1.0, 41));
        let check = check_contraction_horizon(1.0, 0.5, 1.0, 1.0);
        let horizon = 0.9 * check.t_star;
        let cfg = SolverConfig {
            n_mc: 4_000,
            grid_per_dim: 15,
            n_slices: 5,
            n_time: 7,
            seed: 5,
            ..SolverConfig::default()
        };
        let (_, report) = solve_hjb(&model, &costs, horizon, &cfg).unwrap();
        assert!(report.converged);
        assert!(report.contraction.ok);
        // measured ratios below the predicted factor plus slack
        let measured: Vec<f64> = report.iterations.iter().filter_map(|s| s.ratio).collect();
        assert!(!measured.is_empty());
        for r in &measured {
            assert!(*r <= report.contraction.factor + 0.1, "ratio {r}");
        }
    }

    #[test]
    fn window_split_engages_beyond_t_star() {
        let model = scalar_model();
        let costs = cost_cos(ControlSet::interval(-1.0, 1.0, 21));
        let cfg = SolverConfig {
            n_mc: 2_000,
            grid_per_dim: 9,
            n_slices: 4,
            n_time: 7,
            seed: 7,
            ..SolverConfig::default()
        };
        let horizon = 0.03;
        let (w, report) = solve_hjb(&model, &costs, horizon, &cfg).unwrap();
        assert!(report.windows > 1, "windows {}", report.windows);
        assert!((w.horizon() - horizon).abs() < 1e-12);
        assert!(report.window_overlap_defect < 5.0 * cfg.tol, "overlap {}", report.window_overlap_defect);
        // monotone slice grid
        assert!(w.taus.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn mild_residual_small_after_degenerate_solve() {
        let model = scalar_model();
        let costs = cost_cos(ControlSet::singleton(dvector![0.0]));
        let cfg = SolverConfig {
            n_mc: 30_000,
            grid_per_dim: 9,
            n_slices: 4,
            seed: 13,
            ..SolverConfig::default()
        };
        let (w, _) = solve_hjb(&model, &costs, 0.4, &cfg).unwrap();
        let probes = vec![(0.0, dvector![0.3]), (0.2, dvector![-0.5])];
        let defect = mild_residual(&w, &model, &costs, &probes, 30_000, 99).unwrap();
        assert!(defect < 0.02, "defect {defect}");
    }
}
