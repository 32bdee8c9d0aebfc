//! Monte Carlo campaigns: loading cycles with recycled experiments, reference
//! shots on the empty interferometer, differential subtraction and the
//! ensemble estimators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::to_db;
use crate::error::{Error, Result};
use crate::measurement::{
    atom_number_from_phase, decoherence_eta, DecoherenceModel, ProbeCalibration, ProbePulse,
};
use crate::noise::{drift_series, fringe_contrast, sample_cycle_noise, NoiseModels};
use crate::sequencer::{
    build_ramsey_sequence, build_squeezing_sequence, quantize, run_reference, run_sequence, ProbeRole,
    QuantizationRule, Sequence, SequenceTiming, TrialContext,
};
use crate::spin::{AtomSample, SpinMoments};

/// Initial atom number per loading cycle and its decay across recycled
/// experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomNumberLaw {
    pub n0_mean: f64,
    /// Relative standard deviation of the loaded atom number.
    pub n0_rel_std: f64,
    /// Fraction kept from one experiment to the next; the last entry repeats.
    pub retention: Vec<f64>,
}

impl Default for AtomNumberLaw {
    fn default() -> Self {
        Self { n0_mean: 1.2e5, n0_rel_std: 0.1, retention: vec![1.0] }
    }
}

impl AtomNumberLaw {
    pub fn validate(&self) -> Result<()> {
        if !(self.n0_mean > 0.0) || !(self.n0_rel_std >= 0.0) {
            return Err(Error::Config("atom number mean must be > 0 and spread >= 0".into()));
        }
        if self.retention.is_empty() || self.retention.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config("retention factors must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn retention_at(&self, k: usize) -> f64 {
        self.retention[k.min(self.retention.len() - 1)]
    }

    /// Atom numbers of the experiments of one cycle.
    pub fn sample<R: Rng + ?Sized>(&self, experiments: usize, rng: &mut R) -> Vec<f64> {
        let mut n0;
        let mut tries = 0;
        loop {
            let z: f64 = rng.sample(StandardNormal);
            n0 = self.n0_mean * (1.0 + self.n0_rel_std * z);
            tries += 1;
            if n0 > 0.0 || tries > 64 {
                break;
            }
        }
        let n0 = n0.max(self.n0_mean * 1e-3);
        let mut out = Vec::with_capacity(experiments);
        let mut n = n0;
        for k in 0..experiments {
            out.push(n);
            n *= self.retention_at(k);
        }
        out
    }
}

/// The sequence run in every experiment, before the atom-number probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceSpec {
    /// pi/2 pulse followed by the first QND probe and `probe2_pulses` probes.
    Squeezing { probe1_photons: f64, probe2_photons: f64, probe2_pulses: usize },
    /// Ramsey sequence of free evolution `t`, optionally preceded by a QND
    /// probe, closed by a pulse of phase `theta2_deg`.
    Ramsey { t: f64, probe1_photons: Option<f64>, probe2_photons: f64, theta2_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub n_cycles: usize,
    pub experiments_per_cycle: usize,
    pub reference_shots: usize,
    /// Loading cycle period, s.
    pub cycle_time: f64,
    pub atom_number: AtomNumberLaw,
    pub sequence: SequenceSpec,
    pub probe_duration: f64,
    pub timing: SequenceTiming,
    /// Photons of the atom-number probe.
    pub atom_number_photons: f64,
    pub quantization: Option<QuantizationRule>,
    pub noise: NoiseModels,
    pub calibration: ProbeCalibration,
    pub decoherence: DecoherenceModel,
    pub seed: u64,
    pub workers: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            n_cycles: 1200,
            experiments_per_cycle: 4,
            reference_shots: 3,
            cycle_time: 5.0,
            atom_number: AtomNumberLaw::default(),
            sequence: SequenceSpec::Squeezing { probe1_photons: 6e6, probe2_photons: 6e6, probe2_pulses: 1 },
            probe_duration: 10e-6,
            timing: SequenceTiming::default(),
            atom_number_photons: 6e6,
            quantization: Some(QuantizationRule::default()),
            noise: NoiseModels::default(),
            calibration: ProbeCalibration::default(),
            decoherence: DecoherenceModel { alpha: 0.0 },
            seed: 1,
            workers: 1,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cycles < 2 {
            return Err(Error::Config("n_cycles must be >= 2 for differential subtraction".into()));
        }
        if self.experiments_per_cycle == 0 {
            return Err(Error::Config("experiments_per_cycle must be >= 1".into()));
        }
        if !(self.cycle_time > 0.0) || !(self.probe_duration > 0.0) {
            return Err(Error::Config("cycle_time and probe_duration must be positive".into()));
        }
        if !(self.timing.mw_duration > 0.0) || !(self.timing.gap > 0.0) {
            return Err(Error::Config("microwave duration and gap must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(self.atom_number_photons > 0.0) {
            return Err(Error::Config("atom-number probe needs photons".into()));
        }
        self.atom_number.validate()?;
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.calibration.validate().map_err(|e| Error::Config(e.to_string()))?;
        DecoherenceModel::new(self.decoherence.alpha).map_err(|e| Error::Config(e.to_string()))?;
        let seq = self.build_sequence()?;
        // contrast must be defined at every free-evolution time
        for te in &seq.events {
            if let crate::sequencer::SequenceEvent::Wait { duration } = te.event {
                fringe_contrast(duration, &self.noise.contrast)?;
            }
        }
        Ok(())
    }

    fn probe(&self, photons: f64) -> Result<ProbePulse> {
        ProbePulse::new(photons, self.probe_duration, 0.0)
    }

    /// The full per-experiment sequence, atom-number probe included.
    pub fn build_sequence(&self) -> Result<Sequence> {
        let seq = match &self.sequence {
            SequenceSpec::Squeezing { probe1_photons, probe2_photons, probe2_pulses } => {
                let p2 = vec![self.probe(*probe2_photons)?; *probe2_pulses];
                build_squeezing_sequence(self.probe(*probe1_photons)?, &p2, self.timing.gap, self.timing.mw_duration)?
            }
            SequenceSpec::Ramsey { t, probe1_photons, probe2_photons, theta2_deg } => {
                let p1 = probe1_photons.map(|n| self.probe(n)).transpose()?;
                build_ramsey_sequence(*t, p1, self.probe(*probe2_photons)?, *theta2_deg, &self.timing)?
            }
        };
        let seq = seq.with_probe(self.probe(self.atom_number_photons)?, ProbeRole::AtomNumber, self.timing.gap)?;
        match &self.quantization {
            Some(rule) => quantize(&seq, rule),
            None => Ok(seq),
        }
    }

    /// Shortening from the first QND probe.
    pub fn first_probe_eta(&self) -> Result<f64> {
        let photons = match &self.sequence {
            SequenceSpec::Squeezing { probe1_photons, .. } => *probe1_photons,
            SequenceSpec::Ramsey { probe1_photons, .. } => probe1_photons.unwrap_or(0.0),
        };
        decoherence_eta(photons, &self.decoherence)
    }

    /// Contrast at the free-evolution time of the sequence (1 without one).
    pub fn contrast(&self) -> Result<f64> {
        match &self.sequence {
            SequenceSpec::Squeezing { .. } => Ok(1.0),
            SequenceSpec::Ramsey { t, .. } => fringe_contrast(*t, &self.noise.contrast),
        }
    }
}

/// Outcomes of the QND probes of one shot.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Readout {
    pub phi1: Option<f64>,
    /// Per-pulse outcomes of the second measurement.
    pub sub_phi2: Vec<f64>,
    pub sub_photons: Vec<f64>,
}

impl Readout {
    /// Second-measurement phase combining the first `k` pulses, weighted by
    /// photon number.
    pub fn phi2_k(&self, k: usize) -> f64 {
        let k = k.min(self.sub_phi2.len());
        let w: f64 = self.sub_photons[..k].iter().sum();
        self.sub_phi2[..k].iter().zip(&self.sub_photons[..k]).map(|(p, n)| p * n).sum::<f64>() / w
    }

    pub fn phi2(&self) -> f64 {
        self.phi2_k(self.sub_phi2.len())
    }

    fn check_compatible(&self, other: &Readout) -> Result<()> {
        if self.phi1.is_some() != other.phi1.is_some() || self.sub_phi2.len() != other.sub_phi2.len() {
            return Err(Error::Pairing("records have different probe structure".into()));
        }
        Ok(())
    }

    fn difference(&self, other: &Readout) -> Readout {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Readout {
            phi1: self.phi1.zip(other.phi1).map(|(a, b)| (a - b) * s),
            sub_phi2: self.sub_phi2.iter().zip(&other.sub_phi2).map(|(a, b)| (a - b) * s).collect(),
            sub_photons: self.sub_photons.iter().zip(&other.sub_photons).map(|(a, b)| 0.5 * (a + b)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub sample: AtomSample,
    pub readout: Readout,
    pub phi_atom_number: f64,
    pub n_atoms_measured: f64,
    /// Start times of the atomic probes, s.
    pub timestamps: Vec<f64>,
    /// Diagnostics, excluded from the estimators.
    pub latent_jz: Vec<f64>,
    pub detuning: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub cycle_index: usize,
    pub shot_index: usize,
    pub readout: Readout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub records: Vec<TrialRecord>,
    pub references: Vec<ReferenceRecord>,
}

fn readout_from(probes: &[crate::sequencer::ProbeRecord]) -> Readout {
    let mut r = Readout::default();
    for p in probes {
        match p.role {
            ProbeRole::FirstQnd => r.phi1 = Some(p.outcome.phi),
            ProbeRole::SecondQnd => {
                r.sub_phi2.push(p.outcome.phi);
                r.sub_photons.push(p.outcome.pulse.photons_total);
            }
            _ => {}
        }
    }
    r
}

fn cycle_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the campaign. Each cycle draws from its own stream of the master
/// seed and slow drifts come from a separate stream, so records do not
/// depend on the worker count.
pub fn run_campaign(config: &CampaignConfig) -> Result<CampaignResult> {
    config.validate()?;
    let seq = config.build_sequence()?;
    let drifts = drift_series(&config.noise.drift, config.n_cycles, config.cycle_time, &mut cycle_rng(config.seed, 0));

    let run_cycle = |c: usize| -> Result<(Vec<TrialRecord>, Vec<ReferenceRecord>)> {
        let mut rng = cycle_rng(config.seed, c as u64 + 1);
        let cal = &config.calibration;
        let cycle = sample_cycle_noise(&config.noise, cal.var_delta_chi, c, &drifts[c], &mut rng);
        let atoms = config.atom_number.sample(config.experiments_per_cycle, &mut rng);
        let mut records = Vec::with_capacity(atoms.len());
        for (k, &n) in atoms.iter().enumerate() {
            let ctx = TrialContext { noise: &config.noise, cycle, decoherence: config.decoherence, n_atoms: n };
            let run = run_sequence(&SpinMoments::spin_down(n)?, &seq, &ctx, cal, &mut rng)?;
            let phi_n = run
                .probes
                .iter()
                .find(|p| p.role == ProbeRole::AtomNumber)
                .map(|p| p.outcome.phi)
                .ok_or_else(|| Error::Sequence("sequence lacks an atom-number probe".into()))?;
            let atomic: Vec<_> =
                run.probes.iter().filter(|p| matches!(p.role, ProbeRole::FirstQnd | ProbeRole::SecondQnd)).collect();
            records.push(TrialRecord {
                sample: AtomSample::new(n, k, c)?,
                readout: readout_from(&run.probes),
                phi_atom_number: phi_n,
                n_atoms_measured: atom_number_from_phase(phi_n, cal),
                timestamps: atomic.iter().map(|p| p.outcome.pulse.timestamp).collect(),
                latent_jz: atomic.iter().map(|p| p.latent_jz).collect(),
                detuning: cycle.detuning,
            });
        }
        let mut refs = Vec::with_capacity(config.reference_shots);
        for j in 0..config.reference_shots {
            let probes = run_reference(&seq, &cycle, cal, &mut rng)?;
            refs.push(ReferenceRecord { cycle_index: c, shot_index: j, readout: readout_from(&probes) });
        }
        Ok((records, refs))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let per_cycle: Vec<Result<_>> = pool.install(|| (0..config.n_cycles).into_par_iter().map(run_cycle).collect());

    let mut records = Vec::with_capacity(config.n_cycles * config.experiments_per_cycle);
    let mut references = Vec::with_capacity(config.n_cycles * config.reference_shots);
    for r in per_cycle {
        let (a, b) = r?;
        records.extend(a);
        references.extend(b);
    }
    Ok(CampaignResult { records, references })
}

/// Difference of two equivalent shots from consecutive cycles, scaled by
/// `1/sqrt(2)` so its variance is that of a single shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRecord {
    pub cycle_index: usize,
    pub experiment_index: usize,
    /// Mean measured atom number of the pair.
    pub n_atoms: f64,
    pub readout: Readout,
}

fn pair_consecutive<T, K: Ord + Copy>(
    items: &[T],
    key: impl Fn(&T) -> (usize, K),
) -> Result<Vec<(&T, &T)>> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by_key(|&i| {
        let (c, k) = key(&items[i]);
        (k, c)
    });
    let mut out = Vec::new();
    for w in idx.windows(2) {
        let (a, b) = (&items[w[0]], &items[w[1]]);
        let (ca, ka) = key(a);
        let (cb, kb) = key(b);
        if ka == kb && cb == ca + 1 {
            out.push((b, a));
        }
    }
    Ok(out)
}

/// Pairs experiment `k` of cycle `c + 1` with experiment `k` of cycle `c`
/// for every consecutive pair of cycles.
pub fn differential_subtract(records: &[TrialRecord]) -> Result<Vec<DiffRecord>> {
    let cycles: std::collections::BTreeSet<usize> = records.iter().map(|r| r.sample.cycle_index).collect();
    if cycles.len() < 2 {
        return Err(Error::Pairing("differential subtraction needs at least two cycles".into()));
    }
    let pairs = pair_consecutive(records, |r| (r.sample.cycle_index, r.sample.experiment_index))?;
    let mut out = Vec::with_capacity(pairs.len());
    for (b, a) in pairs {
        b.readout.check_compatible(&a.readout)?;
        out.push(DiffRecord {
            cycle_index: a.sample.cycle_index,
            experiment_index: a.sample.experiment_index,
            n_atoms: 0.5 * (a.n_atoms_measured + b.n_atoms_measured),
            readout: b.readout.difference(&a.readout),
        });
    }
    if out.is_empty() {
        return Err(Error::Pairing("no consecutive cycles share an experiment index".into()));
    }
    out.sort_by_key(|d| (d.cycle_index, d.experiment_index));
    Ok(out)
}

/// Same pairing for reference shots, keyed by shot index.
pub fn differential_subtract_references(refs: &[ReferenceRecord]) -> Result<Vec<Readout>> {
    let pairs = pair_consecutive(refs, |r| (r.cycle_index, r.shot_index))?;
    let mut out = Vec::with_capacity(pairs.len());
    for (b, a) in pairs {
        b.readout.check_compatible(&a.readout)?;
        out.push(b.readout.difference(&a.readout));
    }
    if out.is_empty() {
        return Err(Error::Pairing("no reference shots to pair".into()));
    }
    Ok(out)
}

/// Running first and second moments of `(phi1, phi2)`, mergeable across
/// workers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean1: f64,
    pub mean2: f64,
    pub c11: f64,
    pub c22: f64,
    pub c12: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean1;
        let dy = y - self.mean2;
        self.mean1 += dx / n;
        self.mean2 += dy / n;
        self.c11 += dx * (x - self.mean1);
        self.c22 += dy * (y - self.mean2);
        self.c12 += dx * (y - self.mean2);
    }

    pub fn merge(&self, o: &Moments) -> Moments {
        if self.n == 0 {
            return *o;
        }
        if o.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let d1 = o.mean1 - self.mean1;
        let d2 = o.mean2 - self.mean2;
        Moments {
            n: self.n + o.n,
            mean1: self.mean1 + d1 * nb / n,
            mean2: self.mean2 + d2 * nb / n,
            c11: self.c11 + o.c11 + d1 * d1 * na * nb / n,
            c22: self.c22 + o.c22 + d2 * d2 * na * nb / n,
            c12: self.c12 + o.c12 + d1 * d2 * na * nb / n,
        }
    }

    pub fn from_pairs(xs: impl IntoIterator<Item = (f64, f64)>) -> Moments {
        let mut m = Moments::default();
        for (x, y) in xs {
            m.push(x, y);
        }
        m
    }

    fn dof(&self) -> f64 {
        self.n as f64 - 1.0
    }
    pub fn var1(&self) -> f64 {
        self.c11 / self.dof()
    }
    pub fn var2(&self) -> f64 {
        self.c22 / self.dof()
    }
    pub fn cov12(&self) -> f64 {
        self.c12 / self.dof()
    }
}

/// Physical constants needed to turn phase variances into spin quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorContext {
    pub chi: f64,
    /// Shortening from the first QND probe.
    pub eta: f64,
    /// Fringe contrast at the interrogation time.
    pub contrast: f64,
    /// Shot-noise variance of the first and second measurement.
    pub shot1: f64,
    pub shot2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub n: u64,
    pub mean_atoms: f64,
    pub var_phi1: Option<f64>,
    pub var_phi2: f64,
    pub cov_phi12: Option<f64>,
    pub zeta: f64,
    pub conditional_variance: f64,
    /// One-sigma sampling error of the conditional variance.
    pub conditional_variance_err: f64,
    /// `(cond - shot2) / (chi^2 N)`: conditional projection noise relative to the CSS.
    pub projection_reduction: f64,
    pub projection_reduction_db: f64,
    /// Wineland parameter `N var(Jz) / <J>^2` with `<J> = (1 - eta) h N / 2`.
    pub xi: f64,
    pub xi_db: f64,
    pub kappa_sq_inferred: Option<f64>,
    pub xi_lin: Option<f64>,
    pub xi_lin_db: Option<f64>,
    pub zeta_is_minimum: bool,
}

/// One sample entering the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub n_atoms: f64,
    pub phi1: Option<f64>,
    pub phi2: f64,
}

/// Samples from differential records, combining the first `k` pulses of the
/// second measurement.
pub fn samples_k(diffs: &[DiffRecord], k: usize) -> Vec<Sample> {
    diffs
        .iter()
        .map(|d| Sample { n_atoms: d.n_atoms, phi1: d.readout.phi1, phi2: d.readout.phi2_k(k) })
        .collect()
}

pub fn samples(diffs: &[DiffRecord]) -> Vec<Sample> {
    diffs.iter().map(|d| Sample { n_atoms: d.n_atoms, phi1: d.readout.phi1, phi2: d.readout.phi2() }).collect()
}

/// Shot-noise variances `(shot1, shot2)` from paired reference shots, with
/// the second measurement combining `k` pulses.
pub fn reference_shot_noise(refs: &[Readout], k: usize) -> Result<(f64, f64)> {
    if refs.len() < 3 {
        return Err(Error::InsufficientData("need at least 3 reference pairs".into()));
    }
    let m = Moments::from_pairs(refs.iter().map(|r| (r.phi1.unwrap_or(0.0), r.phi2_k(k))));
    Ok((m.var1(), m.var2()))
}

fn db_or_nan(x: f64) -> f64 {
    to_db(x).unwrap_or(f64::NAN)
}

pub fn estimate(samples: &[Sample], ctx: &EstimatorContext) -> Result<EstimatorReport> {
    if samples.len() < 3 {
        return Err(Error::InsufficientData(format!("{} samples, need at least 3", samples.len())));
    }
    let has1 = samples[0].phi1.is_some();
    if samples.iter().any(|s| s.phi1.is_some() != has1) {
        return Err(Error::InsufficientData("mixed samples with and without a first measurement".into()));
    }
    let m = Moments::from_pairs(samples.iter().map(|s| (s.phi1.unwrap_or(0.0), s.phi2)));
    let mean_atoms = samples.iter().map(|s| s.n_atoms).sum::<f64>() / samples.len() as f64;
    let var2 = m.var2();
    if !(var2 > 0.0) {
        return Err(Error::Degenerate("var(phi2) is zero".into()));
    }
    let (zeta, cond, var1, cov12) = if has1 {
        let var1 = m.var1();
        if !(var1 > 0.0) {
            return Err(Error::Degenerate("var(phi1) is zero".into()));
        }
        let zeta = m.cov12() / var1;
        (zeta, var2 - m.cov12() * zeta, Some(var1), Some(m.cov12()))
    } else {
        (0.0, var2, None, None)
    };
    let cond_fn = |z: f64| var2 - 2.0 * z * m.cov12() + z * z * m.var1();
    let zeta_is_minimum = !has1 || {
        let scale = zeta.abs().max(1e-3);
        (-50..=50).filter(|&k| k != 0).all(|k| cond_fn(zeta + scale * 0.02 * k as f64) >= cond * (1.0 - 1e-6))
    };
    let dof = (samples.len() as f64 - if has1 { 2.0 } else { 1.0 }).max(1.0);
    let projection = ctx.chi * ctx.chi * mean_atoms;
    let reduction = (cond - ctx.shot2) / projection;
    let slope2 = ((1.0 - ctx.eta) * ctx.contrast).powi(2);
    let xi = reduction / slope2;
    let kappa = var1.map(|v| (v - ctx.shot1) / ctx.shot1);
    let xi_lin = kappa.map(|k| 1.0 / ((1.0 - ctx.eta).powi(2) * (1.0 + k)));
    Ok(EstimatorReport {
        n: m.n,
        mean_atoms,
        var_phi1: var1,
        var_phi2: var2,
        cov_phi12: cov12,
        zeta,
        conditional_variance: cond,
        conditional_variance_err: cond * (2.0 / dof).sqrt(),
        projection_reduction: reduction,
        projection_reduction_db: db_or_nan(reduction),
        xi,
        xi_db: db_or_nan(xi),
        kappa_sq_inferred: kappa,
        xi_lin,
        xi_lin_db: xi_lin.map(db_or_nan),
        zeta_is_minimum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    pub mean_atoms: f64,
    pub var_phi1: Option<f64>,
    pub var_phi2: f64,
    pub var_phi2_err: f64,
    pub conditional_variance: f64,
    pub conditional_variance_err: f64,
}

/// Equal-population bins sorted by atom number.
pub fn bin_by_atom_number(samples: &[Sample], n_bins: usize) -> Result<Vec<BinStats>> {
    if n_bins == 0 || samples.len() < 3 * n_bins {
        return Err(Error::InsufficientData(format!("{} samples for {n_bins} bins", samples.len())));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.n_atoms.total_cmp(&b.n_atoms));
    let total = sorted.len();
    let mut out = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let chunk = &sorted[b * total / n_bins..(b + 1) * total / n_bins];
        let m = Moments::from_pairs(chunk.iter().map(|s| (s.phi1.unwrap_or(0.0), s.phi2)));
        let has1 = chunk[0].phi1.is_some();
        let cond = if has1 && m.var1() > 0.0 { m.var2() - m.cov12() * m.cov12() / m.var1() } else { m.var2() };
        let count = chunk.len();
        let err = (2.0 / (count as f64 - 1.0)).sqrt();
        out.push(BinStats {
            count,
            mean_atoms: chunk.iter().map(|s| s.n_atoms).sum::<f64>() / count as f64,
            var_phi1: has1.then(|| m.var1()),
            var_phi2: m.var2(),
            var_phi2_err: m.var2() * err,
            conditional_variance: cond,
            conditional_variance_err: cond * err,
        });
    }
    Ok(out)
}

/// Estimator context for a campaign: configured coupling, first-probe
/// shortening, contrast and shot noise measured on the reference shots.
pub fn context_for(config: &CampaignConfig, refs: &[Readout], k: usize) -> Result<EstimatorContext> {
    let (shot1, shot2) = reference_shot_noise(refs, k)?;
    Ok(EstimatorContext {
        chi: config.calibration.chi,
        eta: config.first_probe_eta()?,
        contrast: config.contrast()?,
        shot1,
        shot2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::ShotPrefactor;
    use crate::noise::DriftModel;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> CampaignConfig {
        CampaignConfig {
            n_cycles: 40,
            atom_number: AtomNumberLaw { n0_mean: 1e5, n0_rel_std: 0.1, retention: vec![0.9] },
            calibration: ProbeCalibration { chi: 1.5e-6, shot_prefactor: ShotPrefactor::Unit, ..Default::default() },
            noise: NoiseModels::quiet(),
            ..Default::default()
        }
    }

    #[test]
    fn campaign_shape_and_determinism() {
        let cfg = CampaignConfig { n_cycles: 1200, ..small_config() };
        let a = run_campaign(&cfg).unwrap();
        assert_eq!(a.records.len(), 4800);
        assert_eq!(a.references.len(), 3600);
        let r = &a.records[5];
        assert_eq!((r.sample.cycle_index, r.sample.experiment_index), (1, 1));
        assert!((a.records[1].sample.n_atoms / a.records[0].sample.n_atoms - 0.9).abs() < 1e-12);
        assert_eq!(r.readout.sub_phi2.len(), 1);
        assert_eq!(r.timestamps.len(), 2);

        let small = small_config();
        let x = run_campaign(&small).unwrap();
        let y = run_campaign(&small).unwrap();
        assert_eq!(x, y);
        let z = run_campaign(&CampaignConfig { workers: 4, ..small.clone() }).unwrap();
        assert_eq!(x, z);
        assert!(run_campaign(&CampaignConfig { n_cycles: 1, ..small }).is_err());
    }

    #[test]
    fn noiseless_difference_is_shot_limited() {
        // perfect correlation and no decoherence: phi2 - phi1 carries shot noise only
        let cfg = CampaignConfig { n_cycles: 3000, experiments_per_cycle: 1, ..small_config() };
        let res = run_campaign(&cfg).unwrap();
        let d: Vec<f64> = res.records.iter().map(|r| r.readout.phi2() - r.readout.phi1.unwrap()).collect();
        let m = Moments::from_pairs(d.iter().map(|x| (*x, *x)));
        let shot = 2.0 / 6e6;
        assert!((m.var1() / shot - 1.0).abs() < 0.06, "{}", m.var1() / shot);
    }

    #[test]
    fn conditional_variance_matches_kalman_limit() {
        let n = 1.2e5;
        let chi = crate::measurement::chi_for_kappa_squared(1.6, n, 6e6, ShotPrefactor::Unit, 1.0).unwrap();
        let cfg = CampaignConfig {
            n_cycles: 4000,
            atom_number: AtomNumberLaw { n0_mean: n, n0_rel_std: 0.0, retention: vec![1.0] },
            calibration: ProbeCalibration { chi, shot_prefactor: ShotPrefactor::Unit, ..Default::default() },
            noise: NoiseModels::quiet(),
            ..Default::default()
        };
        let res = run_campaign(&cfg).unwrap();
        let diffs = differential_subtract(&res.records).unwrap();
        let refs = differential_subtract_references(&res.references).unwrap();
        let ctx = context_for(&cfg, &refs, 1).unwrap();
        let rep = estimate(&samples(&diffs), &ctx).unwrap();
        let expected = 1.0 / 6e6 + chi * chi * n / 2.6;
        assert!((rep.conditional_variance / expected - 1.0).abs() < 0.05);
        assert!(rep.zeta_is_minimum);
        assert!(rep.conditional_variance <= rep.var_phi2);
        assert!((rep.projection_reduction_db + 4.15).abs() < 0.4, "{}", rep.projection_reduction_db);
        assert!((rep.kappa_sq_inferred.unwrap() - 1.6).abs() < 0.15);
    }

    #[test]
    fn differential_subtraction_examples() {
        let cfg = small_config();
        let res = run_campaign(&cfg).unwrap();
        let mut same = res.records.clone();
        for r in same.iter_mut() {
            r.readout = res.records[r.sample.experiment_index].readout.clone();
        }
        let d = differential_subtract(&same).unwrap();
        assert_eq!(d.len(), 39 * 4);
        assert!(d.iter().all(|x| x.readout.phi2() == 0.0 && x.readout.phi1 == Some(0.0)));

        let one_cycle: Vec<_> = res.records.iter().filter(|r| r.sample.cycle_index == 0).cloned().collect();
        assert!(matches!(differential_subtract(&one_cycle), Err(Error::Pairing(_))));
        let mut broken = res.records.clone();
        broken[6].readout.sub_phi2.push(0.0);
        broken[6].readout.sub_photons.push(1.0);
        assert!(matches!(differential_subtract(&broken), Err(Error::Pairing(_))));
    }

    #[test]
    fn differential_subtraction_rejects_slow_drift() {
        let base = CampaignConfig { n_cycles: 2000, ..small_config() };
        let var_of = |cfg: &CampaignConfig| {
            let res = run_campaign(cfg).unwrap();
            let d = differential_subtract(&res.records).unwrap();
            Moments::from_pairs(d.iter().map(|x| (x.readout.phi1.unwrap(), x.readout.phi2()))).var2()
        };
        let quiet = var_of(&base);
        let mut drifted = base.clone();
        drifted.noise.drift = DriftModel { phase_offset_slope: 5e-5, ..DriftModel::default() };
        assert!((var_of(&drifted) / quiet - 1.0).abs() < 0.02);
        let mut slow = base.clone();
        slow.noise.drift = DriftModel { phase_offset_drift_std: 1e-3, drift_correlation_time: 1e5, ..DriftModel::default() };
        assert!((var_of(&slow) / quiet - 1.0).abs() < 0.02);
    }

    #[test]
    fn white_noise_difference_keeps_single_shot_variance() {
        let res = run_campaign(&CampaignConfig { n_cycles: 3000, experiments_per_cycle: 1, ..small_config() }).unwrap();
        let raw = Moments::from_pairs(res.records.iter().map(|r| (r.readout.phi1.unwrap(), r.readout.phi2())));
        let d = differential_subtract(&res.records).unwrap();
        let dm = Moments::from_pairs(d.iter().map(|x| (x.readout.phi1.unwrap(), x.readout.phi2())));
        // atom-number spread adds no mean signal here, so both agree
        assert!((dm.var2() / raw.var2() - 1.0).abs() < 0.07);
    }

    #[test]
    fn estimator_examples() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<Sample> = (0..20_000)
            .map(|_| Sample {
                n_atoms: 1e5,
                phi1: Some(rng.sample::<f64, _>(StandardNormal)),
                phi2: 2.0 * rng.sample::<f64, _>(StandardNormal),
            })
            .collect();
        let ctx = EstimatorContext { chi: 1e-3, eta: 0.0, contrast: 1.0, shot1: 0.5, shot2: 0.5 };
        let rep = estimate(&s, &ctx).unwrap();
        assert!(rep.zeta.abs() < 0.05);
        assert!((rep.conditional_variance / rep.var_phi2 - 1.0).abs() < 1e-3);
        assert!(estimate(&s[..2], &ctx).is_err());
        let flat: Vec<Sample> = s.iter().map(|x| Sample { phi2: 1.0, ..*x }).collect();
        assert!(matches!(estimate(&flat, &ctx), Err(Error::Degenerate(_))));
    }

    #[test]
    fn binning_examples() {
        let s: Vec<Sample> =
            (0..100).map(|i| Sample { n_atoms: 5e4, phi1: Some((i as f64).sin()), phi2: (i as f64).cos() }).collect();
        let one = bin_by_atom_number(&s, 1).unwrap();
        let m = Moments::from_pairs(s.iter().map(|x| (x.phi1.unwrap(), x.phi2)));
        assert!((one[0].var_phi2 - m.var2()).abs() < 1e-12);
        let ten = bin_by_atom_number(&s, 10).unwrap();
        assert!(ten.iter().all(|b| b.mean_atoms == 5e4 && b.count == 10));
        assert!((ten[0].var_phi2_err / ten[0].var_phi2 - (2.0f64 / 9.0).sqrt()).abs() < 1e-12);
        assert!(bin_by_atom_number(&s[..20], 10).is_err());
    }

    proptest! {
        #[test]
        fn moments_merge_is_order_independent(
            xs in proptest::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 2..200), split in 0usize..200,
        ) {
            let k = split.min(xs.len());
            let whole = Moments::from_pairs(xs.iter().copied());
            let a = Moments::from_pairs(xs[..k].iter().copied());
            let b = Moments::from_pairs(xs[k..].iter().copied());
            for m in [a.merge(&b), b.merge(&a)] {
                prop_assert_eq!(m.n, whole.n);
                let tol = 1e-10 * (1.0 + whole.c11.abs() + whole.c22.abs());
                prop_assert!((m.c11 - whole.c11).abs() < tol);
                prop_assert!((m.c22 - whole.c22).abs() < tol);
                prop_assert!((m.c12 - whole.c12).abs() < tol);
            }
        }

        #[test]
        fn zeta_minimises_conditional_variance(seed in 0u64..500, c in -2.0..2.0f64) {
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<Sample> = (0..200).map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Sample { n_atoms: 1.0, phi1: Some(a), phi2: c * a + b }
            }).collect();
            let ctx = EstimatorContext { chi: 1.0, eta: 0.0, contrast: 1.0, shot1: 0.1, shot2: 0.1 };
            let rep = estimate(&s, &ctx).unwrap();
            prop_assert!(rep.zeta_is_minimum);
            prop_assert!(rep.conditional_variance <= rep.var_phi2 * (1.0 + 1e-12));
        }
    }
}
