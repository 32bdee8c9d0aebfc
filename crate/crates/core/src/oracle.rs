//! Exact symmetric-subspace simulation for small atom numbers, used to check
//! the Gaussian engine.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::measurement::{shot_variance, ProbeCalibration, ProbePulse};
use crate::sequencer::{Sequence, SequenceEvent};

pub const MAX_ATOMS: usize = 2000;

/// Pure state in the Dicke basis; `amplitudes[k]` belongs to `m = k - j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DickeState {
    pub j: f64,
    pub amplitudes: Vec<Complex64>,
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 || n > MAX_ATOMS {
        return Err(Error::Domain(format!("oracle atom number {n} outside 1..={MAX_ATOMS}")));
    }
    Ok(())
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let lf = |x: usize| (1..=x).map(|i| (i as f64).ln()).sum::<f64>();
    lf(n) - lf(k) - lf(n - k)
}

impl DickeState {
    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn m(&self, k: usize) -> f64 {
        k as f64 - self.j
    }

    /// `<m+1| J+ |m>` for the basis index `k` of `m`.
    fn ladder(&self, k: usize) -> f64 {
        let m = self.m(k);
        (self.j * (self.j + 1.0) - m * (m + 1.0)).max(0.0).sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// All atoms in the lower state, `m = -j`.
    pub fn spin_down(n: usize) -> Result<Self> {
        check_n(n)?;
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); n + 1];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self { j: n as f64 / 2.0, amplitudes })
    }

    /// `Jz` eigenstate `|m>`.
    pub fn eigenstate(n: usize, m: f64) -> Result<Self> {
        let mut s = Self::spin_down(n)?;
        let k = m + s.j;
        if !(k >= 0.0 && k <= n as f64 && k.fract() == 0.0) {
            return Err(Error::Domain(format!("m = {m} is not a level of j = {}", s.j)));
        }
        s.amplitudes[0] = Complex64::new(0.0, 0.0);
        s.amplitudes[k as usize] = Complex64::new(1.0, 0.0);
        Ok(s)
    }

    /// `(n . J) psi` for a real axis `n`.
    fn apply_generator(&self, axis: &Vector3<f64>, psi: &[Complex64], out: &mut [Complex64]) {
        let d = psi.len();
        let up = Complex64::new(axis.x, -axis.y) * 0.5;
        let down = Complex64::new(axis.x, axis.y) * 0.5;
        for k in 0..d {
            let mut acc = psi[k] * (axis.z * self.m(k));
            if k > 0 {
                acc += up * self.ladder(k - 1) * psi[k - 1];
            }
            if k + 1 < d {
                acc += down * self.ladder(k) * psi[k + 1];
            }
            out[k] = acc;
        }
    }
}

/// Coherent spin state along `+x`: binomial amplitudes.
pub fn dicke_css(n: usize) -> Result<DickeState> {
    check_n(n)?;
    let half = n as f64 / 2.0 * std::f64::consts::LN_2;
    let amplitudes = (0..=n).map(|k| Complex64::new((0.5 * ln_binomial(n, k) - half).exp(), 0.0)).collect();
    Ok(DickeState { j: n as f64 / 2.0, amplitudes })
}

/// Applies `exp(-i angle n.J)` to the state by a truncated Taylor series of
/// the tridiagonal generator, in sub-steps short enough for fast convergence.
pub fn dicke_rotate(state: &DickeState, axis: Vector3<f64>, angle: f64) -> Result<DickeState> {
    if (axis.norm() - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("rotation axis not normalised (|n| = {})", axis.norm())));
    }
    // rotations about z are diagonal
    if axis.x == 0.0 && axis.y == 0.0 {
        let amplitudes = state
            .amplitudes
            .iter()
            .enumerate()
            .map(|(k, a)| a * Complex64::from_polar(1.0, -angle * axis.z * state.m(k)))
            .collect();
        return Ok(DickeState { j: state.j, amplitudes });
    }
    let steps = ((angle.abs() * state.j.max(0.5)) / 0.5).ceil().max(1.0) as usize;
    let h = angle / steps as f64;
    let d = state.dim();
    let mut psi = state.amplitudes.clone();
    let mut term = vec![Complex64::new(0.0, 0.0); d];
    let mut next = vec![Complex64::new(0.0, 0.0); d];
    let minus_ih = Complex64::new(0.0, -h);
    for _ in 0..steps {
        term.copy_from_slice(&psi);
        let mut acc = psi.clone();
        for order in 1..60 {
            state.apply_generator(&axis, &term, &mut next);
            let f = minus_ih / order as f64;
            let mut tn = 0.0;
            for k in 0..d {
                term[k] = next[k] * f;
                acc[k] += term[k];
                tn += term[k].norm_sqr();
            }
            if tn.sqrt() < 1e-17 {
                break;
            }
        }
        psi = acc;
    }
    Ok(DickeState { j: state.j, amplitudes: psi })
}

/// Exact mean vector and symmetrised covariance of `(Jx, Jy, Jz)`.
pub fn dicke_moments(state: &DickeState) -> (Vector3<f64>, Matrix3<f64>) {
    let a = &state.amplitudes;
    let d = a.len();
    let jj = state.j * (state.j + 1.0);
    let (mut ez, mut ez2) = (0.0, 0.0);
    let mut jp = Complex64::new(0.0, 0.0);
    let mut jp2 = Complex64::new(0.0, 0.0);
    let mut jpz = Complex64::new(0.0, 0.0);
    for k in 0..d {
        let m = state.m(k);
        let p = a[k].norm_sqr();
        ez += m * p;
        ez2 += m * m * p;
        if k + 1 < d {
            let c = state.ladder(k);
            jp += a[k + 1].conj() * a[k] * c;
            // J+ Jz + Jz J+ on |m> gives c_m (2m + 1) |m+1>
            jpz += a[k + 1].conj() * a[k] * c * (2.0 * m + 1.0);
            if k + 2 < d {
                jp2 += a[k + 2].conj() * a[k] * c * state.ladder(k + 1);
            }
        }
    }
    let mean = Vector3::new(jp.re, jp.im, ez);
    let perp = jj - ez2;
    let exx = 0.5 * (jp2.re + perp);
    let eyy = 0.5 * (-jp2.re + perp);
    let exy = 0.5 * jp2.im;
    let exz = 0.5 * jpz.re;
    let eyz = 0.5 * jpz.im;
    let second = Matrix3::new(exx, exy, exz, exy, eyy, eyz, exz, eyz, ez2);
    (mean, second - mean * mean.transpose())
}

/// Gaussian Kraus update on a given outcome `phi` with readout `phi = 2 chi m + w`.
pub fn dicke_condition(state: &DickeState, phi: f64, chi: f64, sigma2: f64) -> Result<DickeState> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain("shot-noise variance must be positive".into()));
    }
    let logw: Vec<f64> = (0..state.dim()).map(|k| -(phi - 2.0 * chi * state.m(k)).powi(2) / (4.0 * sigma2)).collect();
    let top = logw
        .iter()
        .zip(&state.amplitudes)
        .filter(|(_, a)| a.norm_sqr() > 0.0)
        .map(|(w, _)| *w)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut amplitudes: Vec<Complex64> =
        state.amplitudes.iter().zip(&logw).map(|(a, w)| a * (w - top).exp()).collect();
    let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("outcome has zero likelihood".into()));
    }
    for a in amplitudes.iter_mut() {
        *a /= norm;
    }
    Ok(DickeState { j: state.j, amplitudes })
}

/// Samples a QND outcome and returns it with the post-measurement state.
pub fn dicke_weak_measure<R: Rng + ?Sized>(
    state: &DickeState,
    pulse: &ProbePulse,
    cal: &ProbeCalibration,
    rng: &mut R,
) -> Result<(f64, DickeState)> {
    let sigma2 = shot_variance(pulse, cal)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k_sel = state.dim() - 1;
    for (k, a) in state.amplitudes.iter().enumerate() {
        acc += a.norm_sqr();
        if u < acc {
            k_sel = k;
            break;
        }
    }
    let z: f64 = rng.sample(StandardNormal);
    let phi = 2.0 * cal.chi * state.m(k_sel) + sigma2.sqrt() * z;
    Ok((phi, dicke_condition(state, phi, cal.chi, sigma2)?))
}

/// Outcome-averaged posterior `var(Jz)` for the readout `phi = 2 chi m + w`,
/// integrating the outcome density on a fine grid.
pub fn mean_posterior_variance(state: &DickeState, chi: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !(chi > 0.0) {
        return Err(Error::Domain("need chi > 0 and positive shot-noise variance".into()));
    }
    let probs = state.probabilities();
    let ms: Vec<f64> = (0..state.dim()).map(|k| state.m(k)).collect();
    let support: Vec<usize> = (0..probs.len()).filter(|&k| probs[k] > 1e-300).collect();
    let lo = 2.0 * chi * ms[support[0]] - 10.0 * sigma2.sqrt();
    let hi = 2.0 * chi * ms[*support.last().unwrap()] + 10.0 * sigma2.sqrt();
    let mut points = ((hi - lo) / (sigma2.sqrt() / 40.0)).ceil() as usize;
    points = points.clamp(2000, 400_000);
    let h = (hi - lo) / points as f64;
    let norm = (2.0 * std::f64::consts::PI * sigma2).sqrt();
    let mut total = 0.0;
    for i in 0..=points {
        let phi = lo + h * i as f64;
        let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
        for &k in &support {
            let w = probs[k] * (-(phi - 2.0 * chi * ms[k]).powi(2) / (2.0 * sigma2)).exp();
            w0 += w;
            w1 += w * ms[k];
            w2 += w * ms[k] * ms[k];
        }
        if w0 > 0.0 {
            let var = w2 / w0 - (w1 / w0).powi(2);
            let weight = if i == 0 || i == points { 0.5 } else { 1.0 };
            total += weight * h * (w0 / norm) * var;
        }
    }
    Ok(total)
}

/// Runs the microwave and free-evolution events of a sequence on the exact
/// state at a fixed detuning (Hz). Probes are skipped: they only read out.
pub fn dicke_run_sequence(state: &DickeState, seq: &Sequence, detuning: f64) -> Result<DickeState> {
    let mut s = state.clone();
    for te in &seq.events {
        match te.event {
            SequenceEvent::MwPulse { area, phase, .. } => {
                s = dicke_rotate(&s, Vector3::new(phase.cos(), phase.sin(), 0.0), -area)?;
            }
            SequenceEvent::Wait { duration } => {
                s = dicke_rotate(&s, Vector3::z(), std::f64::consts::TAU * detuning * duration)?;
            }
            SequenceEvent::Probe { .. } => {}
        }
    }
    Ok(s)
}
