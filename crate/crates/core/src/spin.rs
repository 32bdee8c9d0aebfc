//! Gaussian-moment description of the collective pseudo-spin.
//!
//! The state of `N` two-level atoms is summarised by the mean Bloch vector
//! `(<Jx>, <Jy>, <Jz>)` and the 3x3 covariance of the spin components, both in
//! spin units (hbar = 1). `Jz` is half the population difference.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on `|mean| <= N/2`, in units of `N`.
pub const DEFAULT_LENGTH_TOLERANCE: f64 = 1e-9;

const AXIS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinMoments {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// One atomic ensemble inside a loading cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomSample {
    pub n_atoms: f64,
    /// Position of the experiment within the cycle, 0..=3 for the recycled
    /// ensembles.
    pub experiment_index: usize,
    pub cycle_index: usize,
}

impl AtomSample {
    pub fn new(n_atoms: f64, experiment_index: usize, cycle_index: usize) -> Result<Self> {
        if !(n_atoms > 0.0) || !n_atoms.is_finite() {
            return Err(Error::Domain(format!("atom number must be positive, got {n_atoms}")));
        }
        Ok(Self { n_atoms, experiment_index, cycle_index })
    }
}

impl SpinMoments {
    pub fn new(mean: Vector3<f64>, cov: Matrix3<f64>) -> Self {
        Self { mean, cov }
    }

    /// All atoms in the lower clock level: `<Jz> = -N/2`, transverse
    /// variances `N/4`.
    pub fn spin_down(n_atoms: f64) -> Result<Self> {
        check_atoms(n_atoms)?;
        let q = n_atoms / 4.0;
        Ok(Self {
            mean: Vector3::new(0.0, 0.0, -n_atoms / 2.0),
            cov: Matrix3::from_diagonal(&Vector3::new(q, q, 0.0)),
        })
    }

    pub fn var_x(&self) -> f64 {
        self.cov[(0, 0)]
    }

    pub fn var_y(&self) -> f64 {
        self.cov[(1, 1)]
    }

    pub fn var_z(&self) -> f64 {
        self.cov[(2, 2)]
    }

    pub fn length(&self) -> f64 {
        self.mean.norm()
    }

    /// Checks symmetry, positive semidefiniteness and the length bound.
    pub fn check_invariants(&self, n_atoms: f64, length_tolerance: f64) -> Result<()> {
        let scale = self.cov.abs().max().max(1.0);
        if (self.cov - self.cov.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::Domain("covariance is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(self.cov).eigenvalues;
        if eig.min() < -1e-9 * scale {
            return Err(Error::Domain(format!("covariance not PSD, min eigenvalue {}", eig.min())));
        }
        if self.length() > n_atoms / 2.0 + length_tolerance * n_atoms.max(1.0) {
            return Err(Error::Domain(format!(
                "mean spin length {} exceeds N/2 = {}",
                self.length(),
                n_atoms / 2.0
            )));
        }
        Ok(())
    }

    /// Draws a zero-mean fluctuation vector with this state's covariance.
    pub fn sample_fluctuation<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        let eig = SymmetricEigen::new(self.cov);
        let mut out = Vector3::zeros();
        for k in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            let lambda = eig.eigenvalues[k].max(0.0);
            out += eig.eigenvectors.column(k) * (lambda.sqrt() * z);
        }
        out
    }

    /// Unit vector perpendicular to both the mean spin and `z`: the quadrature
    /// that carries measurement backaction when `Jz` is read out.
    pub fn conjugate_axis(&self) -> Option<Vector3<f64>> {
        let u = Vector3::z().cross(&self.mean);
        let n = u.norm();
        (n > 1e-300).then(|| u / n)
    }
}

fn check_atoms(n_atoms: f64) -> Result<()> {
    if !(n_atoms >= 0.0) || !n_atoms.is_finite() {
        return Err(Error::Domain(format!("atom number must be >= 0, got {n_atoms}")));
    }
    Ok(())
}

/// Coherent spin state polarised along +x.
pub fn make_css(n_atoms: f64) -> Result<SpinMoments> {
    check_atoms(n_atoms)?;
    let q = n_atoms / 4.0;
    Ok(SpinMoments {
        mean: Vector3::new(n_atoms / 2.0, 0.0, 0.0),
        cov: Matrix3::from_diagonal(&Vector3::new(0.0, q, q)),
    })
}

/// Active right-handed rotation of the state by `angle` about `axis`.
pub fn rotate(state: &SpinMoments, axis: Vector3<f64>, angle: f64) -> Result<SpinMoments> {
    if (axis.norm() - 1.0).abs() > AXIS_TOLERANCE {
        return Err(Error::Domain(format!("rotation axis not normalised (|n| = {})", axis.norm())));
    }
    let r = rotation_matrix(axis, angle);
    Ok(SpinMoments { mean: r * state.mean, cov: r * state.cov * r.transpose() })
}

pub(crate) fn rotation_matrix(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).into_inner()
}

/// Shortens the mean spin by `factor`; the covariance is left alone because
/// scattering adds no partition noise to `Jz`.
pub fn apply_contrast(state: &SpinMoments, factor: f64) -> Result<SpinMoments> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::Domain(format!("contrast factor {factor} outside [0, 1]")));
    }
    Ok(SpinMoments { mean: state.mean * factor, cov: state.cov })
}

/// Wineland parameter `xi = N var(Jz) / |<J>|^2`; values below one witness
/// metrologically useful entanglement.
pub fn squeezing_parameter(state: &SpinMoments, n_atoms: f64) -> Result<f64> {
    let len2 = state.mean.norm_squared();
    if !(len2 > 0.0) {
        return Err(Error::Degenerate("mean spin vector has zero length".into()));
    }
    Ok(state.var_z() * n_atoms / len2)
}
