//! Small numerical kernels: Gauss-Legendre quadrature, log-log power fits,
//! the Euler beta function and geometric endpoint-clustered time grids.

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// computed by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n and its derivative at x.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to `(a, b)`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        x.iter().map(|&t| mid + half * t).collect(),
        w.iter().map(|&v| v * half).collect(),
    )
}

/// Natural log of the Gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Euler beta function `B(a, b)`.
pub fn beta_fn(a: f64, b: f64) -> f64 {
    (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)).exp()
}

/// Least-squares fit of `log y = log kappa - gamma * log t`.
///
/// Returns `(kappa, gamma, r_squared)`. Points with non-positive `y` are
/// rejected by returning `None`.
pub fn fit_power_law(t: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    assert_eq!(t.len(), y.len());
    if t.len() < 2 || y.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let n = t.len() as f64;
    let xs: Vec<f64> = t.iter().map(|&v| v.ln()).collect();
    let ys: Vec<f64> = y.iter().map(|&v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|&y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some((intercept.exp(), -slope, r2))
}

/// Quadrature nodes and weights on `(0, t)` clustered at both endpoints.
///
/// Intended for integrands with an integrable singularity at each end, such
/// as `s^{-eta} (t-s)^{-gamma}`. Half of the nodes accumulate quadratically
/// at `0`, half at `t` (a graded mesh); interior cells carry trapezoid
/// weights and the open endpoint cells rectangle closures, so the weights
/// sum to `t` exactly and constants integrate exactly.
pub fn endpoint_clustered_grid(t: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(t > 0.0 && n >= 2);
    let half = t / 2.0;
    let m = (n / 2).max(2);
    let mut nodes = Vec::with_capacity(2 * m);
    for i in 1..=m {
        let offset = half * (i as f64 / m as f64).powi(2);
        nodes.push(offset); // clustered at 0
        if offset < half {
            nodes.push(t - offset); // clustered at t
        }
    }
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup();
    let k = nodes.len();
    let mut weights = vec![0.0; k];
    weights[0] += nodes[0];
    weights[k - 1] += t - nodes[k - 1];
    for i in 0..k - 1 {
        let g = 0.5 * (nodes[i + 1] - nodes[i]);
        weights[i] += g;
        weights[i + 1] += g;
    }
    (nodes, weights)
}

/// Linear interpolation of tabulated `(xs, ys)` at `x`, clamped to the range.
pub fn lerp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - w) + ys[i + 1] * w
}
