//! Classical noise: detuning jitter, fringe-contrast decay, motional
//! decorrelation of the probed `Jz` and slow drifts across loading cycles.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetuningModel {
    /// Mean microwave detuning, Hz.
    pub mean_detuning: f64,
    /// Cycle-to-cycle standard deviation of the detuning, Hz.
    pub std_per_cycle: f64,
}

impl Default for DetuningModel {
    fn default() -> Self {
        Self { mean_detuning: 0.0, std_per_cycle: 0.0 }
    }
}

impl DetuningModel {
    pub fn validate(&self) -> Result<()> {
        if !self.mean_detuning.is_finite() || !(self.std_per_cycle >= 0.0) {
            return Err(Error::Domain("detuning std must be >= 0 and mean finite".into()));
        }
        Ok(())
    }
}

/// Ramsey fringe contrast `h(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ContrastModel {
    /// `h(T) = exp(-T^2 / (2 tau_inh^2))`; an infinite `tau_inh` gives `h = 1`.
    Parametric { tau_inh: f64 },
    /// Piecewise-linear interpolation of `(T, h)` knots sorted by `T`.
    Table { points: Vec<(f64, f64)> },
}

impl Default for ContrastModel {
    fn default() -> Self {
        ContrastModel::Parametric { tau_inh: f64::INFINITY }
    }
}

impl ContrastModel {
    pub fn table(points: Vec<(f64, f64)>) -> Result<Self> {
        let m = ContrastModel::Table { points };
        m.validate()?;
        Ok(m)
    }

    /// Reads a two-column text table (`T` in seconds, `h`). Blank lines and
    /// lines starting with `#` are skipped; columns may be separated by
    /// whitespace or commas.
    pub fn load_table(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_table(&text)
    }

    pub fn parse_table(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            if cols.len() != 2 {
                return Err(Error::Config(format!("contrast table line {}: expected 2 columns", lineno + 1)));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("contrast table line {}: bad number `{s}`", lineno + 1)))
            };
            points.push((parse(cols[0])?, parse(cols[1])?));
        }
        Self::table(points)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ContrastModel::Parametric { tau_inh } => {
                if !(*tau_inh > 0.0) {
                    return Err(Error::Domain(format!("tau_inh must be positive, got {tau_inh}")));
                }
            }
            ContrastModel::Table { points } => {
                if points.is_empty() {
                    return Err(Error::Domain("contrast table is empty".into()));
                }
                for w in points.windows(2) {
                    if !(w[1].0 > w[0].0) {
                        return Err(Error::Domain("contrast table times must increase".into()));
                    }
                    if w[1].1 > w[0].1 {
                        return Err(Error::Domain("contrast table must be non-increasing".into()));
                    }
                }
                for &(t, h) in points {
                    if !(t >= 0.0) || !(0.0..=1.0).contains(&h) {
                        return Err(Error::Domain(format!("contrast knot ({t}, {h}) out of range")));
                    }
                    if t == 0.0 && h != 1.0 {
                        return Err(Error::Domain("contrast table must have h(0) = 1".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn fringe_contrast(t: f64, model: &ContrastModel) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("interrogation time {t} < 0")));
    }
    match model {
        ContrastModel::Parametric { tau_inh } => {
            if tau_inh.is_infinite() {
                Ok(1.0)
            } else {
                Ok((-t * t / (2.0 * tau_inh * tau_inh)).exp())
            }
        }
        ContrastModel::Table { points } => {
            if t == 0.0 && points[0].0 > 0.0 {
                return Ok(1.0);
            }
            let (lo, hi) = (points[0].0, points[points.len() - 1].0);
            if t < lo || t > hi {
                return Err(Error::Extrapolation { t, lo, hi });
            }
            let k = points.partition_point(|p| p.0 <= t);
            if k == 0 {
                return Ok(points[0].1);
            }
            let (t0, h0) = points[k - 1];
            if t0 == t || k == points.len() {
                return Ok(h0);
            }
            let (t1, h1) = points[k];
            Ok(h0 + (h1 - h0) * (t - t0) / (t1 - t0))
        }
    }
}

/// Decay of correlations between successive probe readouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    /// Correlation time, s. `f64::INFINITY` disables decorrelation.
    pub tau_decay: f64,
    /// Amplitude `B` of a fitted `1 - B exp(-t / tau)` curve, when known.
    pub fit_amplitude: Option<f64>,
}

impl Default for CorrelationModel {
    fn default() -> Self {
        Self { tau_decay: 670e-6, fit_amplitude: None }
    }
}

impl CorrelationModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_decay > 0.0) {
            return Err(Error::Domain(format!("tau_decay must be positive, got {}", self.tau_decay)));
        }
        Ok(())
    }

    /// Correlation coefficient across a lag `dt`.
    pub fn rho(&self, dt: f64) -> f64 {
        if self.tau_decay.is_infinite() {
            1.0
        } else {
            (-dt.abs() / self.tau_decay).exp()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    /// Fractional microwave pulse-area fluctuation, stationary std.
    pub pulse_area_drift_std: f64,
    /// Fractional trap intensity fluctuation, stationary std.
    pub trap_intensity_drift_std: f64,
    /// Additive phase offset of the interferometer, stationary std, rad.
    pub phase_offset_drift_std: f64,
    /// Deterministic phase offset added per cycle, rad.
    pub phase_offset_slope: f64,
    /// Correlation time of the drift processes, s.
    pub drift_correlation_time: f64,
    /// Differential light shift of the trap at nominal intensity, Hz.
    pub trap_light_shift: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            pulse_area_drift_std: 0.0,
            trap_intensity_drift_std: 0.0,
            phase_offset_drift_std: 0.0,
            phase_offset_slope: 0.0,
            drift_correlation_time: 600.0,
            trap_light_shift: -1700.0,
        }
    }
}

impl DriftModel {
    pub fn validate(&self) -> Result<()> {
        let stds = [self.pulse_area_drift_std, self.trap_intensity_drift_std, self.phase_offset_drift_std];
        if stds.iter().any(|s| !(*s >= 0.0)) || !(self.drift_correlation_time > 0.0) {
            return Err(Error::Domain("drift magnitudes must be >= 0 and correlation time > 0".into()));
        }
        if !self.phase_offset_slope.is_finite() || !self.trap_light_shift.is_finite() {
            return Err(Error::Domain("drift slope and light shift must be finite".into()));
        }
        Ok(())
    }
}

/// Slow drift state of one loading cycle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftState {
    pub pulse_area: f64,
    pub trap_intensity: f64,
    pub phase_offset: f64,
}

/// One step of a stationary Gaussian AR(1) process with std `sigma`.
pub fn ar1_step(prev: f64, rho: f64, sigma: f64, z: f64) -> f64 {
    rho * prev + (1.0 - rho * rho).max(0.0).sqrt() * sigma * z
}

/// Drift states for `n_cycles` consecutive cycles spaced by `cycle_time`.
pub fn drift_series<R: Rng + ?Sized>(
    model: &DriftModel,
    n_cycles: usize,
    cycle_time: f64,
    rng: &mut R,
) -> Vec<DriftState> {
    let rho = (-cycle_time / model.drift_correlation_time).exp();
    let mut out = Vec::with_capacity(n_cycles);
    let mut s = DriftState::default();
    for c in 0..n_cycles {
        let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        if c == 0 {
            s.pulse_area = model.pulse_area_drift_std * z[0];
            s.trap_intensity = model.trap_intensity_drift_std * z[1];
            s.phase_offset = model.phase_offset_drift_std * z[2];
        } else {
            s.pulse_area = ar1_step(s.pulse_area, rho, model.pulse_area_drift_std, z[0]);
            s.trap_intensity = ar1_step(s.trap_intensity, rho, model.trap_intensity_drift_std, z[1]);
            s.phase_offset = ar1_step(s.phase_offset, rho, model.phase_offset_drift_std, z[2]);
        }
        let mut with_slope = s;
        with_slope.phase_offset += model.phase_offset_slope * c as f64;
        out.push(with_slope);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModels {
    pub detuning: DetuningModel,
    pub contrast: ContrastModel,
    pub correlation: CorrelationModel,
    pub drift: DriftModel,
}

impl NoiseModels {
    pub fn validate(&self) -> Result<()> {
        self.detuning.validate()?;
        self.contrast.validate()?;
        self.correlation.validate()?;
        self.drift.validate()
    }

    /// Everything classical switched off: no detuning, no drift, no
    /// decorrelation, full contrast.
    pub fn quiet() -> Self {
        Self {
            detuning: DetuningModel::default(),
            contrast: ContrastModel::default(),
            correlation: CorrelationModel { tau_decay: f64::INFINITY, fit_amplitude: None },
            drift: DriftModel::default(),
        }
    }
}

/// Noise realization shared by all experiments of one loading cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleNoise {
    pub cycle_index: usize,
    /// Microwave detuning including the trap light-shift drift, Hz.
    pub detuning: f64,
    /// Multiplicative pulse-area factor.
    pub pulse_area_factor: f64,
    /// Interferometer phase offset, rad.
    pub phase_offset: f64,
    /// Coupling imbalance for the whole cycle, used when it is not redrawn per shot.
    pub delta_chi: f64,
}

pub fn sample_cycle_noise<R: Rng + ?Sized>(
    models: &NoiseModels,
    var_delta_chi: f64,
    cycle_index: usize,
    drift: &DriftState,
    rng: &mut R,
) -> CycleNoise {
    let z: f64 = rng.sample(StandardNormal);
    let zc: f64 = rng.sample(StandardNormal);
    CycleNoise {
        cycle_index,
        detuning: models.detuning.mean_detuning
            + models.detuning.std_per_cycle * z
            + models.drift.trap_light_shift * drift.trap_intensity,
        pulse_area_factor: 1.0 + drift.pulse_area,
        phase_offset: drift.phase_offset,
        delta_chi: var_delta_chi.sqrt() * zc,
    }
}

/// Probed `Jz` at the given times: zero-mean stationary Gaussian with
/// `cov(t_i, t_j) = prior_var exp(-|t_i - t_j| / tau_decay)`.
pub fn latent_jz_process<R: Rng + ?Sized>(
    prior_var: f64,
    times: &[f64],
    model: &CorrelationModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(prior_var >= 0.0) {
        return Err(Error::Domain(format!("prior variance {prior_var} < 0")));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("times must be sorted ascending".into()));
    }
    let sigma = prior_var.sqrt();
    let mut out = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let x = if i == 0 { sigma * z } else { ar1_step(out[i - 1], model.rho(t - times[i - 1]), sigma, z) };
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn std_of(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        c / (std_of(a) * std_of(b) * (n - 1.0))
    }

    #[test]
    fn cycle_noise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut models = NoiseModels::quiet();
        models.detuning.mean_detuning = 12.0;
        let d = DriftState::default();
        let c = sample_cycle_noise(&models, 0.0, 0, &d, &mut rng);
        assert_eq!(c.detuning, 12.0);
        assert_eq!(c.delta_chi, 0.0);

        models.detuning = DetuningModel { mean_detuning: 0.0, std_per_cycle: 7.5 };
        let xs: Vec<f64> = (0..10_000).map(|i| sample_cycle_noise(&models, 0.0, i, &d, &mut rng).detuning).collect();
        assert!((std_of(&xs) / 7.5 - 1.0).abs() < 0.02);
    }

    #[test]
    fn drift_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let quiet = DriftModel::default();
        let s = drift_series(&quiet, 50, 5.0, &mut rng);
        assert!(s.iter().all(|d| *d == DriftState::default()));

        let m = DriftModel { phase_offset_drift_std: 1e-3, drift_correlation_time: 50.0, ..quiet };
        let s = drift_series(&m, 200_000, 5.0, &mut rng);
        let x: Vec<f64> = s.iter().map(|d| d.phase_offset).collect();
        assert!((std_of(&x) / 1e-3 - 1.0).abs() < 0.05);
        let r = corr(&x[..x.len() - 1], &x[1..]);
        assert!((r - (-0.1f64).exp()).abs() < 0.01);

        let m = DriftModel { phase_offset_slope: 2e-4, ..quiet };
        let s = drift_series(&m, 10, 5.0, &mut rng);
        assert!((s[9].phase_offset - 18e-4).abs() < 1e-15);
    }

    #[test]
    fn contrast_examples() {
        let p = ContrastModel::Parametric { tau_inh: 200e-6 };
        assert_eq!(fringe_contrast(0.0, &p).unwrap(), 1.0);
        assert!((fringe_contrast(200e-6, &p).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(fringe_contrast(1.0, &ContrastModel::default()).unwrap(), 1.0);
        assert!(fringe_contrast(-1e-6, &p).is_err());
        assert!(ContrastModel::Parametric { tau_inh: 0.0 }.validate().is_err());

        let knots = vec![(0.0, 1.0), (10e-6, 0.98), (110e-6, 0.8), (310e-6, 0.3)];
        let t = ContrastModel::table(knots.clone()).unwrap();
        for &(tk, hk) in &knots {
            assert_eq!(fringe_contrast(tk, &t).unwrap(), hk);
        }
        assert!((fringe_contrast(60e-6, &t).unwrap() - 0.89).abs() < 1e-12);
        assert!(matches!(fringe_contrast(400e-6, &t), Err(Error::Extrapolation { .. })));
        assert!(ContrastModel::table(vec![(0.0, 1.0), (1e-5, 1.1)]).is_err());
        assert!(ContrastModel::table(vec![(0.0, 0.9)]).is_err());
        assert!(ContrastModel::table(vec![(0.0, 1.0), (1e-5, 0.5), (2e-5, 0.6)]).is_err());
    }

    #[test]
    fn contrast_table_from_text() {
        let t = ContrastModel::parse_table("# T h\n0 1\n1e-4, 0.7\n\n3e-4 0.2\n").unwrap();
        assert!((fringe_contrast(2e-4, &t).unwrap() - 0.45).abs() < 1e-12);
        assert!(ContrastModel::parse_table("0 1 2\n").is_err());
        assert!(ContrastModel::parse_table("0 x\n").is_err());

        let dir = tempfile_dir();
        let path = dir.join("h.txt");
        std::fs::write(&path, "0 1\n1e-4 0.5\n").unwrap();
        let t = ContrastModel::load_table(&path).unwrap();
        assert_eq!(fringe_contrast(1e-4, &t).unwrap(), 0.5);
        std::fs::remove_dir_all(dir).ok();
    }

    fn tempfile_dir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("simclock-noise-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn latent_process_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inf = CorrelationModel { tau_decay: f64::INFINITY, fit_amplitude: None };
        let x = latent_jz_process(3e4, &[0.0, 1e-5, 1.0], &inf, &mut rng).unwrap();
        assert!(x.iter().all(|v| *v == x[0]));

        let m = CorrelationModel::default();
        let trials = 100_000;
        let mut a = Vec::with_capacity(trials);
        let mut b = Vec::with_capacity(trials);
        for _ in 0..trials {
            let x = latent_jz_process(4.0, &[0.0, m.tau_decay], &m, &mut rng).unwrap();
            a.push(x[0]);
            b.push(x[1]);
        }
        let r = corr(&a, &b);
        assert!((r / (-1f64).exp() - 1.0).abs() < 0.03, "{r}");
        assert!((std_of(&b) / 2.0 - 1.0).abs() < 0.01);

        let single: Vec<f64> =
            (0..50_000).map(|_| latent_jz_process(9.0, &[0.3], &m, &mut rng).unwrap()[0]).collect();
        assert!((std_of(&single) / 3.0 - 1.0).abs() < 0.02);
        assert!(latent_jz_process(1.0, &[1.0, 0.0], &m, &mut rng).is_err());
    }

    #[test]
    fn latent_process_is_order_consistent() {
        // {t1, t2, t3} jointly versus {t1, t3} directly: same (t1, t3) moments
        let m = CorrelationModel { tau_decay: 300e-6, fit_amplitude: None };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let (mut a1, mut a3, mut b1, mut b3) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let x = latent_jz_process(1.0, &[0.0, 100e-6, 400e-6], &m, &mut rng).unwrap();
            a1.push(x[0]);
            a3.push(x[2]);
            let y = latent_jz_process(1.0, &[0.0, 400e-6], &m, &mut rng).unwrap();
            b1.push(y[0]);
            b3.push(y[1]);
        }
        let expected = (-400.0f64 / 300.0).exp();
        assert!((corr(&a1, &a3) - expected).abs() < 0.01);
        assert!((corr(&b1, &b3) - expected).abs() < 0.01);
        assert!((std_of(&a3) - std_of(&b3)).abs() < 0.01);
    }
}
