//! Fits and noise-budget helpers: quadratic variance fits, exponential
//! approach fits, phase normalization, classical noise versus interrogation
//! time and the Wineland crossing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Weighted residual norm `sqrt(sum (r / sigma)^2)`.
    pub residual_norm: f64,
    pub iterations: usize,
}

impl FitResult {
    pub fn stderr(&self, i: usize) -> f64 {
        self.covariance[i][i].max(0.0).sqrt()
    }
}

/// Variance decomposition into shot, projection and classical parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub shot: f64,
    pub projection: f64,
    pub classical: f64,
    pub total: f64,
}

pub fn to_db(ratio: f64) -> Result<f64> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Domain(format!("cannot express {ratio} in dB")));
    }
    Ok(10.0 * ratio.log10())
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Squeezing parameter of a QND measurement free of classical noise,
/// `[(1 - eta)^2 (1 + kappa^2)]^-1`.
pub fn xi_lin(eta: f64, kappa_sq: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eta) || !(kappa_sq >= 0.0) {
        return Err(Error::Domain(format!("xi_lin needs eta in [0,1) and kappa^2 >= 0 (got {eta}, {kappa_sq})")));
    }
    Ok(1.0 / ((1.0 - eta).powi(2) * (1.0 + kappa_sq)))
}

/// `kappa^2` for which [`xi_lin`] equals `xi_lin_db` at shortening `eta`.
pub fn kappa_sq_for_xi_lin(xi_lin_db: f64, eta: f64) -> Result<f64> {
    let k = 1.0 / (from_db(xi_lin_db) * (1.0 - eta).powi(2)) - 1.0;
    if !(k >= 0.0) {
        return Err(Error::Domain(format!("no kappa^2 >= 0 gives {xi_lin_db} dB at eta = {eta}")));
    }
    Ok(k)
}

/// Weighted linear least squares `y ~ X a` with per-point standard errors.
pub fn weighted_linear_fit(design: &DMatrix<f64>, y: &[f64], sigma: &[f64]) -> Result<FitResult> {
    let (m, p) = design.shape();
    if y.len() != m || sigma.len() != m {
        return Err(Error::Fit("design, data and weights differ in length".into()));
    }
    if m < p {
        return Err(Error::InsufficientData(format!("{m} points for {p} parameters")));
    }
    if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Fit("standard errors must be positive and finite".into()));
    }
    let mut a = design.clone();
    let mut b = DVector::from_column_slice(y);
    for i in 0..m {
        a.row_mut(i).scale_mut(1.0 / sigma[i]);
        b[i] /= sigma[i];
    }
    // column scaling keeps polynomial designs well conditioned
    let scale: Vec<f64> = (0..p).map(|j| a.column(j).norm()).collect();
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Fit("rank-deficient design (zero column)".into()));
    }
    for (j, s) in scale.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(Error::Fit("rank-deficient design".into()));
    }
    let sol = svd.solve(&b, 0.0).map_err(|e| Error::Fit(e.to_string()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Fit("svd failed".into()))?;
    let mut cov = DMatrix::zeros(p, p);
    for k in 0..p {
        let s2 = svd.singular_values[k].powi(2);
        let row = v_t.row(k);
        cov += row.transpose() * row / s2;
    }
    let coefficients: Vec<f64> = (0..p).map(|j| sol[j] / scale[j]).collect();
    let covariance = (0..p).map(|i| (0..p).map(|j| cov[(i, j)] / (scale[i] * scale[j])).collect()).collect();
    let resid = &a * &sol - &b;
    Ok(FitResult { coefficients, covariance, residual_norm: resid.norm(), iterations: 1 })
}

/// Fits `var = a0 + a1 N + a2 N^2` to per-bin variances with their
/// standard errors. The terms read as shot, projection and classical noise.
pub fn quadratic_variance_fit(bins: &[(f64, f64, f64)]) -> Result<FitResult> {
    if bins.len() < 3 {
        return Err(Error::InsufficientData(format!("{} bins, need at least 3", bins.len())));
    }
    let design = DMatrix::from_fn(bins.len(), 3, |i, j| bins[i].0.powi(j as i32));
    let y: Vec<f64> = bins.iter().map(|b| b.1).collect();
    let s: Vec<f64> = bins.iter().map(|b| b.2).collect();
    weighted_linear_fit(&design, &y, &s)
}

/// Budget of a quadratic variance fit evaluated at atom number `n`.
pub fn quadratic_budget(fit: &FitResult, n: f64) -> NoiseBudget {
    let c = &fit.coefficients;
    let (shot, projection, classical) = (c[0], c[1] * n, c[2] * n * n);
    NoiseBudget { shot, projection, classical, total: shot + projection + classical }
}

fn exp_model(t: f64, b: f64, tau: f64) -> f64 {
    1.0 - b * (-t / tau).exp()
}

fn sse(points: &[(f64, f64)], b: f64, tau: f64) -> f64 {
    points.iter().map(|&(t, y)| (y - exp_model(t, b, tau)).powi(2)).sum()
}

/// Fits `xi(t) = 1 - B exp(-t / tau)` by damped Gauss-Newton, starting from
/// a log-linear fit of `1 - xi`. Coefficients are `[B, tau]`.
pub fn exp_approach_fit(points: &[(f64, f64)]) -> Result<FitResult> {
    const MAX_ITER: usize = 200;
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!("{} points, need at least 3", points.len())));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Fit("non-finite data".into()));
    }
    let usable: Vec<(f64, f64)> = points.iter().filter(|p| p.1 < 1.0).map(|p| (p.0, (1.0 - p.1).ln())).collect();
    if usable.len() < 2 {
        return Err(Error::Fit("need at least two points below unity to initialise".into()));
    }
    let n = usable.len() as f64;
    let mt = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = usable.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = usable.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    if !(stt > 0.0) {
        return Err(Error::Fit("all points share one abscissa".into()));
    }
    let slope = sty / stt;
    if !(slope < 0.0) || (slope * stt.sqrt()).abs() < 1e-12 * my.abs().max(1e-300) {
        return Err(Error::Fit("degenerate data: no exponential approach to unity".into()));
    }
    let mut tau = -1.0 / slope;
    let mut b = (my - slope * mt).exp();
    let mut cost = sse(points, b, tau);

    for iter in 1..=MAX_ITER {
        // normal equations of the linearised model
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for &(t, y) in points {
            let e = (-t / tau).exp();
            let j = [-e, -b * e * t / (tau * tau)];
            let r = y - exp_model(t, b, tau);
            for u in 0..2 {
                jtr[u] += j[u] * r;
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
        if !(det.abs() > 0.0) || !det.is_finite() {
            return Err(Error::Fit("singular Gauss-Newton system".into()));
        }
        let db = (jtj[1][1] * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let dt = (jtj[0][0] * jtr[1] - jtj[1][0] * jtr[0]) / det;

        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let (nb, nt) = (b + lambda * db, tau + lambda * dt);
            if nt > 0.0 {
                let c = sse(points, nb, nt);
                if c <= cost {
                    b = nb;
                    tau = nt;
                    cost = c;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        let rel = ((lambda * db) / b.abs().max(1e-300)).abs().max(((lambda * dt) / tau).abs());
        if !accepted || rel < 1e-8 {
            let dof = (points.len() as f64 - 2.0).max(1.0);
            let s2 = cost / dof;
            let cov = [[jtj[1][1] / det * s2, -jtj[0][1] / det * s2], [-jtj[1][0] / det * s2, jtj[0][0] / det * s2]];
            return Ok(FitResult {
                coefficients: vec![b, tau],
                covariance: cov.iter().map(|r| r.to_vec()).collect(),
                residual_norm: cost.sqrt(),
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence { iterations: MAX_ITER, best: vec![b, tau] })
}

/// Slope of the Ramsey signal in phase units, `A = chi (1 - eta) h N`.
pub fn phase_amplitude(chi: f64, eta: f64, contrast: f64, n_atoms: f64) -> Result<f64> {
    let a = chi * (1.0 - eta) * contrast * n_atoms;
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("phase normalization amplitude {a} is not positive")));
    }
    Ok(a)
}

/// Normalized phases `(phi2 / A, (phi2 - zeta phi1) / A)`.
pub fn normalize_phase(phi2: f64, phi1: Option<f64>, zeta: f64, amplitude: f64) -> Result<(f64, Option<f64>)> {
    if !(amplitude > 0.0) {
        return Err(Error::Domain("normalization amplitude must be positive".into()));
    }
    Ok((phi2 / amplitude, phi1.map(|p1| (phi2 - zeta * p1) / amplitude)))
}

/// One-parameter fit of `c T^2` to `(T, variance, sigma)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalFit {
    pub c: f64,
    pub c_err: f64,
    /// `sqrt(c) / (2 pi)`: rms cycle-to-cycle detuning in Hz.
    pub detuning_std_hz: f64,
    pub detuning_std_err_hz: f64,
}

pub fn classical_vs_t_fit(points: &[(f64, f64, f64)]) -> Result<ClassicalFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!("{} points, need at least 2", points.len())));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(t, v, s) in points {
        if !(s > 0.0) {
            return Err(Error::Fit("standard errors must be positive".into()));
        }
        let w = 1.0 / (s * s);
        num += w * t * t * v;
        den += w * t.powi(4);
    }
    if !(den > 0.0) {
        return Err(Error::Fit("all interrogation times are zero".into()));
    }
    let c = num / den;
    if c < 0.0 {
        return Err(Error::Fit(format!("negative classical coefficient {c}")));
    }
    let c_err = den.sqrt().recip();
    let tau = std::f64::consts::TAU;
    let sd = c.sqrt() / tau;
    let sd_err = if c > 0.0 { c_err / (2.0 * c.sqrt() * tau) } else { c_err.sqrt() / tau };
    Ok(ClassicalFit { c, c_err, detuning_std_hz: sd, detuning_std_err_hz: sd_err })
}

fn interpolate(curve: &[(f64, f64)], t: f64) -> f64 {
    let k = curve.partition_point(|p| p.0 <= t).clamp(1, curve.len() - 1);
    let (t0, v0) = curve[k - 1];
    let (t1, v1) = curve[k];
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

/// Smallest `T` at which the piecewise-linear curve rises to `level`,
/// found by bracketing on the grid and bisection inside the bracket.
pub fn first_crossing(curve: &[(f64, f64)], level: f64) -> Result<Option<f64>> {
    if curve.len() < 2 {
        return Err(Error::InsufficientData("crossing search needs at least two points".into()));
    }
    if curve.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Domain("curve abscissae must increase".into()));
    }
    if curve[0].1 >= level {
        return Ok((curve[0].1 == level).then_some(curve[0].0));
    }
    for w in curve.windows(2) {
        if w[1].1 == level {
            return Ok(Some(w[1].0));
        }
        if w[0].1 < level && w[1].1 > level {
            let (mut lo, mut hi) = (w[0].0, w[1].0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if interpolate(curve, mid) < level {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * hi.abs() {
                    break;
                }
            }
            return Ok(Some(0.5 * (lo + hi)));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinelandCrossing {
    /// Crossing of the full conditional curve with `1/N`.
    pub measured: Option<f64>,
    /// Crossing with classical noise removed.
    pub idealized: Option<f64>,
}

/// Interrogation times where the normalized conditional phase variance
/// reaches the standard quantum limit `1/N`.
pub fn wineland_crossing(
    curve: &[(f64, f64)],
    idealized_curve: &[(f64, f64)],
    n_atoms: f64,
) -> Result<WinelandCrossing> {
    if !(n_atoms > 0.0) {
        return Err(Error::Domain("atom number must be positive".into()));
    }
    Ok(WinelandCrossing {
        measured: first_crossing(curve, 1.0 / n_atoms)?,
        idealized: first_crossing(idealized_curve, 1.0 / n_atoms)?,
    })
}

/// Fit of `offset + A cos(theta - theta_hat)` to a fringe scan; returns
/// `(A, theta_hat, offset)` with `A >= 0` and `theta_hat` in `(-pi, pi]`.
pub fn fringe_fit(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 3 {
        return Err(Error::InsufficientData("fringe fit needs at least 3 points".into()));
    }
    let design = DMatrix::from_fn(points.len(), 3, |i, j| match j {
        0 => points[i].0.cos(),
        1 => points[i].0.sin(),
        _ => 1.0,
    });
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = weighted_linear_fit(&design, &y, &vec![1.0; points.len()])?;
    let (a, b, c) = (fit.coefficients[0], fit.coefficients[1], fit.coefficients[2]);
    Ok((a.hypot(b), b.atan2(a), c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn db_examples() {
        assert_eq!(to_db(1.0).unwrap(), 0.0);
        assert!((to_db(1.0 / 2.6).unwrap() + 4.1497).abs() < 1e-4);
        assert!(to_db(0.0).is_err() && to_db(-1.0).is_err());
        let x = xi_lin(0.14, 1.6).unwrap();
        assert!((x - 0.5201).abs() < 1e-4);
        assert!((to_db(x).unwrap() + 2.84).abs() < 0.005);
        let k = kappa_sq_for_xi_lin(-2.2, 0.135).unwrap();
        assert!((k - 1.22).abs() < 0.005);
        assert!((to_db(xi_lin(0.135, k).unwrap()).unwrap() + 2.2).abs() < 1e-12);
    }

    #[test]
    fn quadratic_fit_exact_polynomial() {
        let bins: Vec<(f64, f64, f64)> =
            (0..10).map(|i| 6e4 + 7e3 * i as f64).map(|n| (n, 1e-7 + 2e-12 * n, 1e-9)).collect();
        let f = quadratic_variance_fit(&bins).unwrap();
        assert!((f.coefficients[0] - 1e-7).abs() < 1e-18);
        assert!((f.coefficients[1] / 2e-12 - 1.0).abs() < 1e-9);
        assert!(f.coefficients[2].abs() < 1e-24);
        let budget = quadratic_budget(&f, 1e5);
        assert!((budget.total - (1e-7 + 2e-7)).abs() < 1e-16);

        let bins: Vec<(f64, f64, f64)> = (0..10)
            .map(|i| 6e4 + 7e3 * i as f64)
            .map(|n| (n, 1.3e-7 + 2.2e-12 * n + 4e-18 * n * n, 1e-9))
            .collect();
        let f = quadratic_variance_fit(&bins).unwrap();
        for (got, want) in f.coefficients.iter().zip([1.3e-7, 2.2e-12, 4e-18]) {
            assert!((got / want - 1.0).abs() < 1e-8, "{got} {want}");
        }
        assert!(quadratic_variance_fit(&bins[..2]).is_err());
        let same: Vec<_> = (0..5).map(|_| (1e5, 1.0, 0.1)).collect();
        assert!(matches!(quadratic_variance_fit(&same), Err(Error::Fit(_))));
    }

    #[test]
    fn exp_fit_examples() {
        let pts: Vec<(f64, f64)> =
            (1..=10).map(|k| 20e-6 * k as f64 - 10e-6).map(|t| (t, exp_model(t, 0.45, 670e-6))).collect();
        let f = exp_approach_fit(&pts).unwrap();
        assert!((f.coefficients[0] / 0.45 - 1.0).abs() < 1e-6);
        assert!((f.coefficients[1] / 670e-6 - 1.0).abs() < 1e-6);
        let flat: Vec<(f64, f64)> = (1..=5).map(|k| (k as f64, 0.6)).collect();
        assert!(matches!(exp_approach_fit(&flat), Err(Error::Fit(_))));
        assert!(exp_approach_fit(&pts[..2]).is_err());
    }

    #[test]
    fn exp_fit_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64)> = (1..=12)
            .map(|k| 50e-6 * k as f64)
            .map(|t| (t, exp_model(t, 0.5, 670e-6) + 0.002 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let f = exp_approach_fit(&pts).unwrap();
        assert!((f.coefficients[1] / 670e-6 - 1.0).abs() < 0.1);
        assert!(f.stderr(1) > 0.0);
    }

    #[test]
    fn normalization_examples() {
        let chi = 1.5e-6;
        let n = 1e5;
        let a = phase_amplitude(chi, 0.0, 1.0, n).unwrap();
        let (t2, t21) = normalize_phase(chi * n * 0.37, None, 0.0, a).unwrap();
        assert!((t2 - 0.37).abs() < 1e-15);
        assert!(t21.is_none());
        assert!(phase_amplitude(chi, 0.1, 0.0, n).is_err());
        // projection noise of a CSS: var(phi2) = chi^2 N  ->  var(tilde) = 1/N
        assert!((chi * chi * n / (a * a) - 1.0 / n).abs() < 1e-20);
        // shot noise maps to 1/(n2 A^2) and grows as h decays
        let s1 = (1.0 / 7e6) / phase_amplitude(chi, 0.1, 1.0, n).unwrap().powi(2);
        let s2 = (1.0 / 7e6) / phase_amplitude(chi, 0.1, 0.5, n).unwrap().powi(2);
        assert!((s2 / s1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn classical_fit_examples() {
        let c = (std::f64::consts::TAU * 7.5).powi(2);
        let pts: Vec<(f64, f64, f64)> =
            (0..16).map(|k| 10e-6 + 20e-6 * k as f64).map(|t| (t, c * t * t, 1e-7)).collect();
        let f = classical_vs_t_fit(&pts).unwrap();
        assert!((f.c / c - 1.0).abs() < 1e-12);
        assert!((f.detuning_std_hz - 7.5).abs() < 1e-10);
        let zero: Vec<(f64, f64, f64)> = pts.iter().map(|p| (p.0, 0.0, p.2)).collect();
        assert_eq!(classical_vs_t_fit(&zero).unwrap().c, 0.0);
        let neg: Vec<(f64, f64, f64)> = pts.iter().map(|p| (p.0, -1.0, p.2)).collect();
        assert!(classical_vs_t_fit(&neg).is_err());
        assert!(classical_vs_t_fit(&pts[..1]).is_err());
    }

    #[test]
    fn crossing_examples() {
        let n = 1e4;
        let below: Vec<(f64, f64)> = (0..5).map(|k| (k as f64, 0.5 / n)).collect();
        assert_eq!(first_crossing(&below, 1.0 / n).unwrap(), None);
        let grid: Vec<(f64, f64)> = vec![(10.0, 0.5 / n), (30.0, 1.0 / n), (50.0, 2.0 / n)];
        assert_eq!(first_crossing(&grid, 1.0 / n).unwrap(), Some(30.0));
        let lin: Vec<(f64, f64)> = vec![(10.0, 0.5 / n), (30.0, 0.9 / n), (50.0, 1.3 / n)];
        let t = first_crossing(&lin, 1.0 / n).unwrap().unwrap();
        assert!((t - 35.0).abs() < 1e-9);
        let w = wineland_crossing(&lin, &grid, n).unwrap();
        assert_eq!(w.idealized, Some(30.0));
        assert!(wineland_crossing(&lin, &grid, 0.0).is_err());
    }

    #[test]
    fn fringe_fit_recovers_phase() {
        let pts: Vec<(f64, f64)> = (0..24)
            .map(|k| (k as f64 * 15.0).to_radians())
            .map(|th| (th, 0.1 + 0.8 * (th - 0.3).cos()))
            .collect();
        let (a, ph, off) = fringe_fit(&pts).unwrap();
        assert!((a - 0.8).abs() < 1e-12 && (ph - 0.3).abs() < 1e-12 && (off - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn db_round_trip(x in 1e-12..1e12f64) {
            let back = from_db(to_db(x).unwrap());
            prop_assert!((back / x - 1.0).abs() < 1e-12);
        }

        #[test]
        fn normalization_is_linear(phi in -1.0..1.0f64, a in -10.0..10.0f64, amp in 1e-3..1.0f64) {
            let (x, _) = normalize_phase(a * phi, None, 0.0, amp).unwrap();
            let (y, _) = normalize_phase(phi, None, 0.0, amp).unwrap();
            prop_assert!((x - a * y).abs() <= 1e-12 * (1.0 + x.abs()));
        }

        #[test]
        fn weighted_fit_residuals_are_orthogonal(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bins: Vec<(f64, f64, f64)> = (0..10).map(|i| {
                let n = 5e4 + 8e3 * i as f64;
                let s = 1e-9 * (1.0 + rng.random::<f64>());
                (n, 1e-7 + 2e-12 * n + s * rng.sample::<f64, _>(StandardNormal), s)
            }).collect();
            let f = quadratic_variance_fit(&bins).unwrap();
            for j in 0..3 {
                let (mut dot, mut norm) = (0.0, 0.0);
                for &(n, v, s) in &bins {
                    let model = f.coefficients[0] + f.coefficients[1] * n + f.coefficients[2] * n * n;
                    let basis = n.powi(j) / s;
                    dot += basis * (v - model) / s;
                    norm += basis.abs() * (v.abs() / s);
                }
                prop_assert!(dot.abs() <= 1e-8 * norm);
            }
        }
    }
}
