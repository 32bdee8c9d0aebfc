//! Dual-colour dispersive QND measurement of `Jz`.
//!
//! A probe pulse with `n` photons returns the phase
//! `phi = w + chi * 2 Jz + dchi * N`, where `w` is optical shot noise of
//! variance `s(beta) / n` and `dchi` is the per-shot coupling imbalance.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin::SpinMoments;

/// Selects the shot-noise prefactor `s` in `var(w) = s / n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShotPrefactor {
    /// `s = (beta^2 + 1) / (2 beta^2)`, from the interferometer output model.
    #[default]
    Eq5,
    /// `s = 1`, the form used when quoting `kappa^2`.
    Unit,
}

impl ShotPrefactor {
    pub fn value(self, beta: f64) -> f64 {
        match self {
            ShotPrefactor::Eq5 => (beta * beta + 1.0) / (2.0 * beta * beta),
            ShotPrefactor::Unit => 1.0,
        }
    }
}

/// Whether the coupling imbalance is redrawn for every probe pulse or held
/// for a whole loading cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaChiMode {
    #[default]
    PerShot,
    PerCycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeCalibration {
    /// Phase shift per atom, rad (equal for both colours).
    pub chi: f64,
    /// Effective coupling during the atom-number measurement, relative to `chi`.
    pub chi_bar_ratio: f64,
    /// Reference-to-probe field amplitude ratio of the interferometer.
    pub beta: f64,
    pub var_delta_chi: f64,
    pub shot_prefactor: ShotPrefactor,
    pub delta_chi_mode: DeltaChiMode,
    /// Multiplier on the backaction added to the conjugate quadrature.
    pub backaction_excess: f64,
}

impl Default for ProbeCalibration {
    fn default() -> Self {
        Self {
            chi: 1.49e-6,
            chi_bar_ratio: 1.0,
            beta: 13f64.sqrt(),
            var_delta_chi: 0.0,
            shot_prefactor: ShotPrefactor::Eq5,
            delta_chi_mode: DeltaChiMode::PerShot,
            backaction_excess: 10.0,
        }
    }
}

impl ProbeCalibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.chi > 0.0) {
            return Err(Error::Domain(format!("chi must be positive, got {}", self.chi)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.var_delta_chi >= 0.0) {
            return Err(Error::Domain("var_delta_chi must be >= 0".into()));
        }
        if !((self.chi_bar_ratio - 1.0).abs() <= 0.05 + 1e-12) {
            return Err(Error::Domain(format!(
                "chi_bar_ratio {} deviates from 1 by more than 5%",
                self.chi_bar_ratio
            )));
        }
        if !(self.backaction_excess >= 0.0) {
            return Err(Error::Domain("backaction_excess must be >= 0".into()));
        }
        Ok(())
    }

    pub fn shot_prefactor_value(&self) -> f64 {
        self.shot_prefactor.value(self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePulse {
    /// Total photon number of both colours.
    pub photons_total: f64,
    pub duration: f64,
    /// Start time within the sequence, s.
    pub timestamp: f64,
}

impl ProbePulse {
    pub fn new(photons_total: f64, duration: f64, timestamp: f64) -> Result<Self> {
        let p = Self { photons_total, duration, timestamp };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.photons_total >= 0.0) || !self.photons_total.is_finite() {
            return Err(Error::Domain(format!("photon number {} invalid", self.photons_total)));
        }
        if self.photons_total > 0.0 && !(self.duration > 0.0) {
            return Err(Error::Domain("probe with photons needs a positive duration".into()));
        }
        Ok(())
    }
}

/// Mean-spin shortening from spontaneous scattering, `eta = 1 - exp(-alpha n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceModel {
    /// Per-photon scattering coefficient (magnitude).
    pub alpha: f64,
}

impl DecoherenceModel {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    /// Coefficient giving shortening `eta` after `photons` photons.
    pub fn for_eta(eta: f64, photons: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) || !(photons > 0.0) {
            return Err(Error::Domain(format!("cannot invert eta = {eta} at n = {photons}")));
        }
        Self::new(-(-eta).ln_1p() / photons)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Atomic,
    AtomNumber,
    EmptyReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub phi: f64,
    pub pulse: ProbePulse,
    pub kind: OutcomeKind,
}

pub fn shot_variance(pulse: &ProbePulse, cal: &ProbeCalibration) -> Result<f64> {
    if !(pulse.photons_total > 0.0) {
        return Err(Error::InfiniteVariance("probe pulse carries no photons".into()));
    }
    Ok(cal.shot_prefactor_value() / pulse.photons_total)
}

pub fn decoherence_eta(photons: f64, model: &DecoherenceModel) -> Result<f64> {
    if !(photons >= 0.0) {
        return Err(Error::Domain(format!("photon number {photons} < 0")));
    }
    Ok(-(-model.alpha * photons).exp_m1())
}

/// Ratio of projection noise to shot noise in a single measurement,
/// `kappa^2 = chi^2 N n / s`.
pub fn kappa_squared(pulse: &ProbePulse, cal: &ProbeCalibration, n_atoms: f64) -> Result<f64> {
    if !(pulse.photons_total > 0.0) {
        return Err(Error::InfiniteVariance("probe pulse carries no photons".into()));
    }
    Ok(cal.chi * cal.chi * n_atoms * pulse.photons_total / cal.shot_prefactor_value())
}

/// Inverse of [`kappa_squared`]: the coupling that yields `kappa_sq`.
pub fn chi_for_kappa_squared(
    kappa_sq: f64,
    n_atoms: f64,
    photons: f64,
    shot_prefactor: ShotPrefactor,
    beta: f64,
) -> Result<f64> {
    if !(kappa_sq >= 0.0) || !(n_atoms > 0.0) || !(photons > 0.0) {
        return Err(Error::Domain("kappa inversion needs kappa^2 >= 0, N > 0, n > 0".into()));
    }
    Ok((kappa_sq * shot_prefactor.value(beta) / (n_atoms * photons)).sqrt())
}

/// Outcome for a given shot-noise draw `w`; [`sample_outcome`] draws `w`.
pub fn outcome_with_noise(
    latent_jz: f64,
    n_atoms: f64,
    pulse: &ProbePulse,
    cal: &ProbeCalibration,
    delta_chi_sample: f64,
    w: f64,
) -> PhaseOutcome {
    PhaseOutcome {
        phi: w + cal.chi * (2.0 * latent_jz) + delta_chi_sample * n_atoms,
        pulse: *pulse,
        kind: OutcomeKind::Atomic,
    }
}

pub fn sample_outcome<R: Rng + ?Sized>(
    latent_jz: f64,
    n_atoms: f64,
    pulse: &ProbePulse,
    cal: &ProbeCalibration,
    delta_chi_sample: f64,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    let sigma = shot_variance(pulse, cal)?.sqrt();
    let z: f64 = rng.sample(StandardNormal);
    Ok(outcome_with_noise(latent_jz, n_atoms, pulse, cal, delta_chi_sample, sigma * z))
}

/// Empty-interferometer shot: shot noise only.
pub fn sample_reference<R: Rng + ?Sized>(
    pulse: &ProbePulse,
    cal: &ProbeCalibration,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    let sigma = shot_variance(pulse, cal)?.sqrt();
    let z: f64 = rng.sample(StandardNormal);
    Ok(PhaseOutcome { phi: sigma * z, pulse: *pulse, kind: OutcomeKind::EmptyReference })
}

/// Kalman update of the state on a `Jz` readout.
///
/// The measurement is `phi / (2 chi) = Jz + v` with `var(v) = s / (4 chi^2 n)`.
/// After the update the quadrature conjugate to `Jz` (perpendicular to the
/// mean spin) receives the Heisenberg-limited backaction scaled by
/// `cal.backaction_excess`.
pub fn condition(
    state: &SpinMoments,
    outcome: &PhaseOutcome,
    pulse: &ProbePulse,
    cal: &ProbeCalibration,
) -> Result<SpinMoments> {
    let prior_var = state.var_z();
    if !(prior_var > 0.0) || !prior_var.is_finite() {
        return Err(Error::Domain(format!("prior var(Jz) = {prior_var} must be positive and finite")));
    }
    let meas_var = shot_variance(pulse, cal)? / (4.0 * cal.chi * cal.chi);
    let y = outcome.phi / (2.0 * cal.chi);

    let s = prior_var + meas_var;
    let gain: Vector3<f64> = state.cov.column(2) / s;
    let mean = state.mean + gain * (y - state.mean.z);
    let cov_z = state.cov.column(2).into_owned();
    let mut cov = state.cov - gain * cov_z.transpose();
    cov = (cov + cov.transpose()) * 0.5;

    let mut post = SpinMoments { mean, cov };
    if let Some(u) = post.conjugate_axis() {
        let transverse2 = (post.mean.x * post.mean.x + post.mean.y * post.mean.y).max(0.0);
        let floor_prior = transverse2 / (4.0 * prior_var);
        let floor_post = transverse2 / (4.0 * post.var_z().max(f64::MIN_POSITIVE));
        let added = cal.backaction_excess * (floor_post - floor_prior).max(0.0);
        if added > 0.0 && added.is_finite() {
            post.cov += u * u.transpose() * added;
        }
    }
    Ok(post)
}

/// Atom-number readout after pumping every atom into the upper level.
pub fn measure_atom_number<R: Rng + ?Sized>(
    n_atoms: f64,
    pulse: &ProbePulse,
    cal: &ProbeCalibration,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    let sigma = shot_variance(pulse, cal)?.sqrt();
    let z: f64 = rng.sample(StandardNormal);
    Ok(PhaseOutcome {
        phi: cal.chi * cal.chi_bar_ratio * n_atoms + sigma * z,
        pulse: *pulse,
        kind: OutcomeKind::AtomNumber,
    })
}

/// Atom number inferred from an atom-number phase assuming `chi_bar = chi`.
pub fn atom_number_from_phase(phi: f64, cal: &ProbeCalibration) -> f64 {
    phi / cal.chi
}
