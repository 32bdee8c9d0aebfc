//! Experiment presets. Each one builds its campaigns from resolved
//! [`Settings`], runs them and reduces the records to a JSON summary, a
//! per-trial table and, where it applies, a noise-budget table.

use std::f64::consts::TAU;
use std::fmt;

use serde_json::{json, Map, Value as Json};

use crate::analysis::{
    classical_vs_t_fit, exp_approach_fit, fringe_fit, phase_amplitude, quadratic_budget, quadratic_variance_fit,
    to_db, weighted_linear_fit, wineland_crossing, xi_lin, ClassicalFit, FitResult,
};
use crate::config::{Preset, Settings};
use crate::engine::{
    bin_by_atom_number, context_for, differential_subtract, differential_subtract_references, estimate,
    run_campaign, samples, samples_k, CampaignConfig, CampaignResult, DiffRecord, EstimatorContext,
    EstimatorReport, Moments, Readout, SequenceSpec,
};
use crate::error::{Error, Result};
use crate::measurement::{
    condition, decoherence_eta, kappa_squared, DecoherenceModel, OutcomeKind, PhaseOutcome, ProbeCalibration,
    ProbePulse, ShotPrefactor,
};
use crate::noise::{fringe_contrast, sample_cycle_noise, DriftState, NoiseModels};
use crate::oracle::{dicke_css, dicke_moments, dicke_run_sequence, mean_posterior_variance, DickeState};
use crate::sequencer::{build_ear_sequence, run_sequence, ProbeRole, SequenceEvent, SequenceTiming, TrialContext};
use crate::spin::{make_css, SpinMoments};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Real(f64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as u64)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Real)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

/// Shortest decimal that reads back to the same `f64`; exponent form for
/// very small or very large magnitudes.
pub fn format_real(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Real(x) => f.write_str(&format_real(*x)),
            Cell::Text(s) => f.write_str(s),
            Cell::Empty => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: Json,
    pub records: Table,
    pub budget: Option<Table>,
}

/// dB value rounded to 0.01 dB; `null` when undefined.
fn db(x: f64) -> Json {
    if x.is_finite() {
        json!((x * 100.0).round() / 100.0)
    } else {
        Json::Null
    }
}

fn db_of(ratio: f64) -> Json {
    to_db(ratio).map(db).unwrap_or(Json::Null)
}

fn num(x: f64) -> Json {
    if x.is_finite() {
        json!(x)
    } else {
        Json::Null
    }
}

fn opt(x: Option<f64>) -> Json {
    x.map_or(Json::Null, num)
}

fn deg(rad: f64) -> f64 {
    rad / TAU * 360.0
}

fn us(t: f64) -> f64 {
    // readable microseconds without float noise from the division
    (t * 1e6 * 1e9).round() / 1e9
}

/// Runs the preset named in `settings`.
pub fn run(settings: &Settings) -> Result<RunOutput> {
    let mut out = match settings.preset {
        Preset::SqueezeScan => squeeze_scan(settings),
        Preset::PulseCountScan => pulse_count_scan(settings),
        Preset::DecoherenceFringe => decoherence_fringe(settings),
        Preset::FringeDecay => fringe_decay(settings),
        Preset::ClockSqueeze => clock_squeeze(settings),
        Preset::ClockNoiseBudget => clock_noise_budget(settings),
        Preset::OracleCheck => oracle_check(settings),
    }?;
    let mut head = Map::new();
    head.insert("schema_version".into(), json!(SCHEMA_VERSION));
    head.insert("preset".into(), json!(settings.preset.as_str()));
    head.insert("seed".into(), json!(settings.u64("seed")));
    if let Json::Object(body) = out.summary {
        head.extend(body);
    }
    out.summary = Json::Object(head);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shared pieces

/// One finished campaign with its differential records.
pub struct Campaign {
    pub config: CampaignConfig,
    pub result: CampaignResult,
    pub diffs: Vec<DiffRecord>,
    pub refs: Vec<Readout>,
}

impl Campaign {
    pub fn run(config: CampaignConfig) -> Result<Self> {
        let result = run_campaign(&config)?;
        let diffs = differential_subtract(&result.records)?;
        let refs = differential_subtract_references(&result.references)?;
        Ok(Campaign { config, result, diffs, refs })
    }

    pub fn pulses(&self) -> usize {
        self.diffs.first().map_or(0, |d| d.readout.sub_phi2.len())
    }

    pub fn context(&self, k: usize) -> Result<EstimatorContext> {
        context_for(&self.config, &self.refs, k)
    }

    /// Estimator over all differential records, second measurement of `k` pulses.
    pub fn report_k(&self, k: usize) -> Result<(EstimatorReport, EstimatorContext)> {
        let ctx = self.context(k)?;
        Ok((estimate(&samples_k(&self.diffs, k), &ctx)?, ctx))
    }

    pub fn report(&self) -> Result<(EstimatorReport, EstimatorContext)> {
        self.report_k(self.pulses())
    }
}

fn with_seed(mut cfg: CampaignConfig, offset: u64) -> CampaignConfig {
    cfg.seed = cfg.seed.wrapping_add(offset);
    cfg
}

fn ramsey(s: &Settings, t: f64, with_probe1: bool, theta2: f64) -> SequenceSpec {
    SequenceSpec::Ramsey {
        t,
        probe1_photons: with_probe1.then(|| s.real("probe1_photons")),
        probe2_photons: s.real("probe2_photons"),
        theta2_deg: deg(theta2),
    }
}

/// Start times of the atomic probes of a campaign's sequence.
fn probe_starts(cfg: &CampaignConfig) -> Result<(Option<f64>, Vec<f64>)> {
    let seq = cfg.build_sequence()?;
    let mut first = None;
    let mut second = Vec::new();
    for te in &seq.events {
        if let SequenceEvent::Probe { role, .. } = te.event {
            match role {
                ProbeRole::FirstQnd => first = Some(te.start),
                ProbeRole::SecondQnd => second.push(te.start),
                _ => {}
            }
        }
    }
    Ok((first, second))
}

/// Contrast decay time in use: the configured value, or the one that puts
/// the idealized clock's standard-quantum-limit crossing at
/// `wineland_target`.
pub fn contrast_tau(s: &Settings) -> Result<f64> {
    match s.real_or_auto("tau_inh") {
        Some(t) => Ok(t),
        None if s.text("contrast_mode") == "table" => Ok(f64::INFINITY),
        None => calibrate_tau_inh(s),
    }
}

/// Without classical noise the normalized conditional projection noise of
/// the clock is `r / ((1 - eta)^2 h(T)^2)` in units of `1/N`, with
/// `r = 1 - rho^2 kappa^2 / (1 + kappa^2)` and `rho` the motional
/// correlation between the two probes. Solving for `h(T) = 1` at the target
/// time gives the Gaussian decay time.
pub fn calibrate_tau_inh(s: &Settings) -> Result<f64> {
    let target = s.real("wineland_target");
    let cfg = s.campaign(ramsey(s, target, true, s.real("theta2")), f64::INFINITY)?;
    let (p1, p2) = probe_starts(&cfg)?;
    let lag = p2[0] - p1.expect("EAR sequence has a first probe");
    let pulse = ProbePulse::new(s.real("probe1_photons"), cfg.probe_duration, 0.0)?;
    let k2 = kappa_squared(&pulse, &cfg.calibration, s.real("n_atoms"))?;
    let eta = cfg.first_probe_eta()?;
    let rho = cfg.noise.correlation.rho(lag);
    let r = 1.0 - rho * rho * k2 / (1.0 + k2);
    let h = r.sqrt() / (1.0 - eta);
    if !(h < 1.0) {
        return Err(Error::Config(format!(
            "no contrast decay places the crossing at {} us: the clock is above the limit already (h would be {h})",
            us(target)
        )));
    }
    Ok(target / (-2.0 * h.ln()).sqrt())
}

fn estimator_json(r: &EstimatorReport, ctx: &EstimatorContext, subtract: bool) -> Json {
    let (s1, s2) = if subtract { (ctx.shot1, ctx.shot2) } else { (0.0, 0.0) };
    json!({
        "n": r.n,
        "mean_atoms": num(r.mean_atoms),
        "chi": num(ctx.chi),
        "eta": num(ctx.eta),
        "contrast": num(ctx.contrast),
        "shot_noise_phi1": num(ctx.shot1),
        "shot_noise_phi2": num(ctx.shot2),
        "shot_noise_subtracted": subtract,
        "var_phi1": opt(r.var_phi1.map(|v| v - s1)),
        "var_phi2": num(r.var_phi2 - s2),
        "cov_phi12": opt(r.cov_phi12),
        "zeta": num(r.zeta),
        "zeta_is_minimum": r.zeta_is_minimum,
        "conditional_variance": num(r.conditional_variance - s2),
        "conditional_variance_err": num(r.conditional_variance_err),
        "projection_reduction": num(r.projection_reduction),
        "projection_reduction_db": db(r.projection_reduction_db),
        "xi": num(r.xi),
        "xi_db": db(r.xi_db),
        "kappa_sq_inferred": opt(r.kappa_sq_inferred),
        "xi_lin": opt(r.xi_lin),
        "xi_lin_db": r.xi_lin_db.map_or(Json::Null, db),
    })
}

/// Per-trial rows of several campaigns, each tagged with leading columns.
fn records_table(tag_names: &[&str], campaigns: &[(Vec<Cell>, &Campaign)]) -> Table {
    let pulses = campaigns.iter().map(|(_, c)| c.pulses()).max().unwrap_or(0);
    let probes = campaigns
        .iter()
        .flat_map(|(_, c)| c.result.records.first())
        .map(|r| r.timestamps.len())
        .max()
        .unwrap_or(0);
    let mut header: Vec<String> = tag_names.iter().map(|s| s.to_string()).collect();
    for h in ["kind", "cycle", "experiment", "n_atoms_measured", "phi_atom_number", "phi1", "phi2"] {
        header.push(h.into());
    }
    header.extend((1..=pulses).map(|k| format!("phi2_pulse{k}")));
    header.extend((1..=probes).map(|k| format!("t_probe{k}")));
    header.extend(["n_atoms_true".to_string(), "detuning".to_string()]);

    let mut rows = Vec::new();
    for (tags, c) in campaigns {
        let pad = |v: &mut Vec<Cell>, n: usize, have: usize| v.extend((have..n).map(|_| Cell::Empty));
        let mut refs = c.result.references.iter().peekable();
        for (i, r) in c.result.records.iter().enumerate() {
            let mut row = tags.clone();
            row.extend([
                "atomic".into(),
                r.sample.cycle_index.into(),
                r.sample.experiment_index.into(),
                r.n_atoms_measured.into(),
                r.phi_atom_number.into(),
                r.readout.phi1.into(),
                r.readout.phi2().into(),
            ]);
            row.extend(r.readout.sub_phi2.iter().map(|&x| Cell::Real(x)));
            let have = row.len();
            pad(&mut row, tags.len() + 7 + pulses, have);
            row.extend(r.timestamps.iter().map(|&x| Cell::Real(x)));
            let have = row.len();
            pad(&mut row, tags.len() + 7 + pulses + probes, have);
            row.extend([r.sample.n_atoms.into(), r.detuning.into()]);
            rows.push(row);
            // reference shots follow the last experiment of their cycle
            let last_of_cycle = c.result.records.get(i + 1).is_none_or(|n| n.sample.cycle_index != r.sample.cycle_index);
            if last_of_cycle {
                while let Some(rf) = refs.next_if(|rf| rf.cycle_index == r.sample.cycle_index) {
                    let mut row = tags.clone();
                    row.extend([
                        "reference".into(),
                        rf.cycle_index.into(),
                        rf.shot_index.into(),
                        Cell::Empty,
                        Cell::Empty,
                        rf.readout.phi1.into(),
                        if rf.readout.sub_phi2.is_empty() { Cell::Empty } else { rf.readout.phi2().into() },
                    ]);
                    row.extend(rf.readout.sub_phi2.iter().map(|&x| Cell::Real(x)));
                    rows.push(row);
                }
            }
        }
    }
    for row in rows.iter_mut() {
        row.resize(header.len(), Cell::Empty);
    }
    Table { header, rows }
}

fn fit_json(f: &FitResult, names: &[&str]) -> Json {
    let mut m = Map::new();
    for (i, n) in names.iter().enumerate() {
        m.insert(n.to_string(), num(f.coefficients[i]));
        m.insert(format!("{n}_err"), num(f.stderr(i)));
    }
    m.insert("residual_norm".into(), num(f.residual_norm));
    m.insert("iterations".into(), json!(f.iterations));
    Json::Object(m)
}

// ---------------------------------------------------------------------------
// squeeze-scan

/// Variance of the second measurement and conditional variance against atom
/// number, with quadratic fits.
pub struct SqueezeAnalysis {
    pub report: EstimatorReport,
    pub context: EstimatorContext,
    pub bins: Vec<crate::engine::BinStats>,
    pub var_fit: FitResult,
    pub cond_fit: FitResult,
}

pub fn analyze_squeezing(c: &Campaign, n_bins: usize) -> Result<SqueezeAnalysis> {
    let (report, context) = c.report()?;
    let bins = bin_by_atom_number(&samples(&c.diffs), n_bins)?;
    let var_fit = quadratic_variance_fit(&bins.iter().map(|b| (b.mean_atoms, b.var_phi2, b.var_phi2_err)).collect::<Vec<_>>())?;
    let cond_fit = quadratic_variance_fit(
        &bins.iter().map(|b| (b.mean_atoms, b.conditional_variance, b.conditional_variance_err)).collect::<Vec<_>>(),
    )?;
    Ok(SqueezeAnalysis { report, context, bins, var_fit, cond_fit })
}

pub fn squeezing_campaign(s: &Settings) -> Result<CampaignConfig> {
    s.campaign(
        SequenceSpec::Squeezing {
            probe1_photons: s.real("probe1_photons"),
            probe2_photons: s.real("probe2_photons"),
            probe2_pulses: s.int("probe2_pulses"),
        },
        f64::INFINITY,
    )
}

fn squeeze_scan(s: &Settings) -> Result<RunOutput> {
    let c = Campaign::run(squeezing_campaign(s)?)?;
    let a = analyze_squeezing(&c, s.int("n_bins"))?;
    let chi2 = a.context.chi * a.context.chi;
    let quad = |f: &FitResult| {
        let mut j = fit_json(f, &["a0", "a1", "a2"]);
        j["a1_over_chi_sq"] = num(f.coefficients[1] / chi2);
        j["a2_over_err"] = num(f.coefficients[2] / f.stderr(2));
        j
    };
    let k2 = s.real("kappa_sq");
    let summary = json!({
        "n_cycles": c.config.n_cycles,
        "n_trials": c.result.records.len(),
        "estimator": estimator_json(&a.report, &a.context, s.flag("subtract_reference")),
        "quadratic_fit": { "var_phi2": quad(&a.var_fit), "conditional": quad(&a.cond_fit) },
        "model": {
            "kappa_sq": num(k2),
            "projection_reduction_db": db_of(1.0 / (1.0 + k2)),
            "xi_lin_db": xi_lin(a.context.eta, k2).map(db_of).unwrap_or(Json::Null),
        },
    });
    let mut budget = Table::new(&[
        "bin",
        "count",
        "mean_atoms",
        "var_phi2",
        "var_phi2_err",
        "conditional_variance",
        "conditional_variance_err",
        "fit_var_phi2",
        "fit_conditional",
        "shot",
        "projection",
        "classical",
    ]);
    for (i, b) in a.bins.iter().enumerate() {
        let nb = quadratic_budget(&a.var_fit, b.mean_atoms);
        let cf = quadratic_budget(&a.cond_fit, b.mean_atoms);
        budget.rows.push(vec![
            i.into(),
            b.count.into(),
            b.mean_atoms.into(),
            b.var_phi2.into(),
            b.var_phi2_err.into(),
            b.conditional_variance.into(),
            b.conditional_variance_err.into(),
            nb.total.into(),
            cf.total.into(),
            nb.shot.into(),
            nb.projection.into(),
            nb.classical.into(),
        ]);
    }
    Ok(RunOutput { summary, records: records_table(&[], &[(vec![], &c)]), budget: Some(budget) })
}

// ---------------------------------------------------------------------------
// pulse-count-scan

pub struct PulsePoint {
    pub pulses: usize,
    /// Duration of the second measurement, first pulse start to last pulse end.
    pub t2: f64,
    pub report: EstimatorReport,
}

pub struct PulseScan {
    pub points: Vec<PulsePoint>,
    pub fit: Result<FitResult>,
    /// Correlation of the first outcome with each single pulse of the
    /// second measurement, `(lag, cov)`.
    pub pulse_cov: Vec<(f64, f64, f64)>,
    /// Decay time of `pulse_cov` from a log-linear fit, with its error.
    pub correlation_tau: Result<(f64, f64)>,
}

pub fn analyze_pulse_scan(c: &Campaign) -> Result<PulseScan> {
    let (first, second) = probe_starts(&c.config)?;
    let first = first.ok_or_else(|| Error::Sequence("pulse scan needs a first measurement".into()))?;
    let mut points = Vec::new();
    for k in 1..=c.pulses() {
        let (report, _) = c.report_k(k)?;
        let t2 = second[k - 1] + c.config.probe_duration - second[0];
        points.push(PulsePoint { pulses: k, t2, report });
    }
    let fit = exp_approach_fit(&points.iter().map(|p| (p.t2, p.report.xi)).collect::<Vec<_>>());

    let mut pulse_cov = Vec::new();
    for (k, &start) in second.iter().enumerate() {
        let m = Moments::from_pairs(c.diffs.iter().map(|d| (d.readout.phi1.unwrap_or(0.0), d.readout.sub_phi2[k])));
        let n = m.n as f64;
        let cov = m.cov12();
        let err = ((m.var1() * m.var2() + cov * cov) / (n - 1.0)).sqrt();
        pulse_cov.push((start - first, cov, err));
    }
    let correlation_tau = (|| {
        if pulse_cov.len() < 2 || pulse_cov.iter().any(|p| !(p.1 > 0.0)) {
            return Err(Error::Fit("pulse covariances must be positive for a log-linear fit".into()));
        }
        let design = nalgebra::DMatrix::from_fn(pulse_cov.len(), 2, |i, j| if j == 0 { 1.0 } else { pulse_cov[i].0 });
        let y: Vec<f64> = pulse_cov.iter().map(|p| p.1.ln()).collect();
        let sig: Vec<f64> = pulse_cov.iter().map(|p| p.2 / p.1).collect();
        let f = weighted_linear_fit(&design, &y, &sig)?;
        let slope = f.coefficients[1];
        if !(slope < 0.0) {
            return Err(Error::Fit(format!("pulse covariances do not decay (slope {slope})")));
        }
        Ok((-1.0 / slope, f.stderr(1) / (slope * slope)))
    })();
    Ok(PulseScan { points, fit, pulse_cov, correlation_tau })
}

fn pulse_count_scan(s: &Settings) -> Result<RunOutput> {
    let c = Campaign::run(squeezing_campaign(s)?)?;
    let scan = analyze_pulse_scan(&c)?;
    let fit = match &scan.fit {
        Ok(f) => {
            let mut j = fit_json(f, &["b", "tau"]);
            j["tau_us"] = num(us(f.coefficients[1]));
            j
        }
        Err(e) => json!({ "error": e.to_string() }),
    };
    let corr = match &scan.correlation_tau {
        Ok((t, e)) => json!({ "tau_us": num(us(*t)), "tau_err_us": num(us(*e)) }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let points: Vec<Json> = scan
        .points
        .iter()
        .map(|p| json!({ "pulses": p.pulses, "t2_us": num(us(p.t2)), "xi": num(p.report.xi), "xi_db": db(p.report.xi_db) }))
        .collect();
    let summary = json!({
        "n_cycles": c.config.n_cycles,
        "n_trials": c.result.records.len(),
        "injected_tau_decay_us": num(us(c.config.noise.correlation.tau_decay)),
        "points": points,
        "xi_fit": fit,
        "pulse_correlation_fit": corr,
    });
    let mut budget = Table::new(&[
        "pulses",
        "t2",
        "xi",
        "projection_reduction",
        "conditional_variance",
        "conditional_variance_err",
        "pulse_lag",
        "pulse_covariance",
        "pulse_covariance_err",
    ]);
    for (p, pc) in scan.points.iter().zip(&scan.pulse_cov) {
        budget.rows.push(vec![
            p.pulses.into(),
            p.t2.into(),
            p.report.xi.into(),
            p.report.projection_reduction.into(),
            p.report.conditional_variance.into(),
            p.report.conditional_variance_err.into(),
            pc.0.into(),
            pc.1.into(),
            pc.2.into(),
        ]);
    }
    Ok(RunOutput { summary, records: records_table(&[], &[(vec![], &c)]), budget: Some(budget) })
}

// ---------------------------------------------------------------------------
// Ramsey fringes

fn theta_grid(s: &Settings) -> Result<Vec<f64>> {
    let m = s.int("theta2_points");
    if m < 3 {
        return Err(Error::Config("theta2_points must be at least 3".into()));
    }
    Ok((0..m).map(|j| TAU * j as f64 / m as f64).collect())
}

/// Mean of `phi2 / (chi N)` over the atomic records: `<Jz>` relative to
/// `N/2`.
fn normalized_mean(c: &Campaign) -> f64 {
    let chi = c.config.calibration.chi;
    let recs = &c.result.records;
    recs.iter().map(|r| r.readout.phi2() / (chi * r.n_atoms_measured)).sum::<f64>() / recs.len() as f64
}

/// Fringe over the final pulse phase: `(amplitude, phase in rad, offset)`.
pub struct Fringe {
    pub points: Vec<(f64, f64)>,
    pub amplitude: f64,
    pub phase: f64,
    pub offset: f64,
    pub campaigns: Vec<Campaign>,
}

pub fn fringe_scan(s: &Settings, t: f64, with_probe1: bool, tau_inh: f64, seed_offset: u64) -> Result<Fringe> {
    let thetas = theta_grid(s)?;
    let mut points = Vec::new();
    let mut campaigns = Vec::new();
    for (j, &th) in thetas.iter().enumerate() {
        let cfg = with_seed(s.campaign(ramsey(s, t, with_probe1, th), tau_inh)?, seed_offset + j as u64);
        let c = Campaign::run(cfg)?;
        points.push((th, normalized_mean(&c)));
        campaigns.push(c);
    }
    let (amplitude, phase, offset) = fringe_fit(&points)?;
    Ok(Fringe { points, amplitude, phase, offset, campaigns })
}

fn fringe_json(f: &Fringe) -> Json {
    json!({
        "amplitude": num(f.amplitude),
        "phase_deg": num(deg(f.phase)),
        "offset": num(f.offset),
        "theta2_deg": f.points.iter().map(|p| num(deg(p.0))).collect::<Vec<_>>(),
        "mean_jz_normalized": f.points.iter().map(|p| num(p.1)).collect::<Vec<_>>(),
    })
}

fn decoherence_fringe(s: &Settings) -> Result<RunOutput> {
    let tau = contrast_tau(s)?;
    let t = s.real("interrogation_time");
    let m = theta_grid(s)?.len() as u64;
    let bare = fringe_scan(s, t, false, tau, 0)?;
    let probed = fringe_scan(s, t, true, tau, m)?;
    let eta = 1.0 - probed.amplitude / bare.amplitude;
    let photons = s.real("probe1_photons");
    let model = s.decoherence()?;
    let summary = json!({
        "n_cycles": s.int("n_cycles"),
        "probe1_photons": num(photons),
        "without_probe": fringe_json(&bare),
        "with_probe": fringe_json(&probed),
        "eta_measured": num(eta),
        "alpha_inferred": num(-(-eta).ln_1p() / photons),
        "eta_model": num(decoherence_eta(photons, &model)?),
        "alpha_model": num(model.alpha),
        "phase_shift_deg": num(deg(probed.phase - bare.phase)),
    });
    let mut tagged = Vec::new();
    for (label, f) in [("without_probe", &bare), ("with_probe", &probed)] {
        for (c, p) in f.campaigns.iter().zip(&f.points) {
            tagged.push((vec![Cell::from(label), Cell::Real(deg(p.0))], c));
        }
    }
    Ok(RunOutput { summary, records: records_table(&["scan", "theta2_deg"], &tagged), budget: None })
}

fn fringe_decay(s: &Settings) -> Result<RunOutput> {
    let tau = contrast_tau(s)?;
    let ts = s.t_grid()?;
    let m = theta_grid(s)?.len() as u64;
    let model = s.noise_with_tau_inh(tau)?.contrast;
    let mut fringes = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        fringes.push(fringe_scan(s, t, false, tau, i as u64 * m)?);
    }
    // Gaussian decay: -2 ln h = T^2 / tau^2
    let (mut num_, mut den) = (0.0, 0.0);
    for (t, f) in ts.iter().zip(&fringes) {
        if f.amplitude > 0.0 && f.amplitude < 1.0 {
            num_ += t * t * (-2.0 * f.amplitude.ln());
            den += t.powi(4);
        }
    }
    let tau_fit = if num_ > 0.0 { (den / num_).sqrt() } else { f64::INFINITY };
    let mut points = Vec::new();
    for (t, f) in ts.iter().zip(&fringes) {
        points.push(json!({
            "t_us": num(us(*t)),
            "h_fit": num(f.amplitude),
            "h_model": num(fringe_contrast(*t, &model)?),
            "phase_deg": num(deg(f.phase)),
        }));
    }
    let summary = json!({
        "n_cycles": s.int("n_cycles"),
        "tau_inh_us": num(us(tau)),
        "tau_inh_fit_us": num(us(tau_fit)),
        "points": points,
    });
    let mut tagged = Vec::new();
    for (t, f) in ts.iter().zip(&fringes) {
        for (c, p) in f.campaigns.iter().zip(&f.points) {
            tagged.push((vec![Cell::Real(*t), Cell::Real(deg(p.0))], c));
        }
    }
    Ok(RunOutput { summary, records: records_table(&["interrogation_time", "theta2_deg"], &tagged), budget: None })
}

// ---------------------------------------------------------------------------
// clock-squeeze

/// The clock settings with every classical noise source switched off:
/// detuning, drifts, coupling imbalance and motional decorrelation.
pub fn zero_classical(s: &Settings) -> Settings {
    let mut q = s.clone();
    for (k, v) in [
        ("detuning_mean", "\"0 Hz\""),
        ("detuning_std", "\"0 Hz\""),
        ("pulse_area_drift_std", "0.0"),
        ("trap_intensity_drift_std", "0.0"),
        ("phase_offset_drift_std", "\"0 rad\""),
        ("phase_offset_slope", "\"0 rad\""),
        ("var_delta_chi", "0.0"),
        ("tau_decay", "\"inf\""),
    ] {
        q.set(k, v).expect("registered keys");
    }
    q
}

pub fn clock_campaign(s: &Settings, t: f64, tau_inh: f64) -> Result<CampaignConfig> {
    s.campaign(ramsey(s, t, true, s.real("theta2")), tau_inh)
}

/// Expected `xi` of the clock from the Gaussian model: conditional
/// projection noise plus detuning noise, over the squared signal slope.
pub fn clock_model_xi(cfg: &CampaignConfig, t: f64) -> Result<f64> {
    let (p1, p2) = probe_starts(cfg)?;
    let lag = p2[0] - p1.ok_or_else(|| Error::Sequence("clock sequence lacks a first probe".into()))?;
    let n = cfg.atom_number.n0_mean;
    let pulse = ProbePulse::new(match cfg.sequence {
        SequenceSpec::Ramsey { probe1_photons: Some(p), .. } => p,
        _ => return Err(Error::Sequence("clock sequence lacks a first probe".into())),
    }, cfg.probe_duration, 0.0)?;
    let k2 = kappa_squared(&pulse, &cfg.calibration, n)?;
    let rho = cfg.noise.correlation.rho(lag);
    let slope2 = ((1.0 - cfg.first_probe_eta()?) * cfg.contrast()?).powi(2);
    let d = &cfg.noise.detuning;
    let classical = slope2 * n * (TAU * t).powi(2) * d.std_per_cycle.powi(2);
    Ok((1.0 - rho * rho * k2 / (1.0 + k2) + classical) / slope2)
}

fn clock_squeeze(s: &Settings) -> Result<RunOutput> {
    let tau = contrast_tau(s)?;
    let t = s.real("interrogation_time");
    let subtract = s.flag("subtract_reference");
    let c = Campaign::run(clock_campaign(s, t, tau)?)?;
    let (r, ctx) = c.report()?;
    let mut summary = json!({
        "n_cycles": c.config.n_cycles,
        "n_trials": c.result.records.len(),
        "interrogation_time_us": num(us(t)),
        "tau_inh_us": num(us(tau)),
        "estimator": estimator_json(&r, &ctx, subtract),
        "var_ratio_phi2_phi1": opt(r.var_phi1.map(|v1| r.var_phi2 / v1)),
        "model": {
            "xi_db": db_of(clock_model_xi(&c.config, t)?),
            "xi_lin_db": xi_lin(ctx.eta, s.real("kappa_sq")).map(db_of).unwrap_or(Json::Null),
        },
    });
    let mut tagged = vec![(vec![Cell::from("noisy")], &c)];
    let quiet;
    if s.flag("quiet_companion") {
        let q = zero_classical(s);
        quiet = Campaign::run(with_seed(clock_campaign(&q, t, tau)?, 1))?;
        let (qr, qctx) = quiet.report()?;
        summary["quiet"] = estimator_json(&qr, &qctx, subtract);
        tagged.push((vec![Cell::from("quiet")], &quiet));
    }

    let chi2n = ctx.chi * ctx.chi * r.mean_atoms;
    let var1 = r.var_phi1.unwrap_or(f64::NAN);
    let mut budget = Table::new(&["component", "phi1", "phi2"]);
    let rows: [(&str, Cell, Cell); 5] = [
        ("shot", ctx.shot1.into(), ctx.shot2.into()),
        ("projection", chi2n.into(), chi2n.into()),
        ("classical", (var1 - ctx.shot1 - chi2n).into(), (r.var_phi2 - ctx.shot2 - chi2n).into()),
        ("total", var1.into(), r.var_phi2.into()),
        ("conditional", Cell::Empty, r.conditional_variance.into()),
    ];
    for (name, a, b) in rows {
        budget.rows.push(vec![name.into(), a, b]);
    }
    Ok(RunOutput { summary, records: records_table(&["run"], &tagged), budget: Some(budget) })
}

// ---------------------------------------------------------------------------
// clock-noise-budget

/// Normalized phase noise of the clock at one interrogation time, in units
/// of `1/A(T)^2`.
#[derive(Debug, Clone, Copy)]
pub struct BudgetPoint {
    pub t: f64,
    pub n: u64,
    pub mean_atoms: f64,
    pub contrast: f64,
    pub amplitude: f64,
    pub total: f64,
    pub total_err: f64,
    pub shot: f64,
    pub projection: f64,
    pub classical: f64,
    pub conditional: f64,
    pub conditional_err: f64,
}

pub struct ClockBudget {
    pub tau_inh: f64,
    pub points: Vec<BudgetPoint>,
    pub classical_fit: Result<ClassicalFit>,
    /// Crossings of the shot-subtracted conditional noise with `1/N`.
    pub measured_crossing: Option<f64>,
    pub idealized_crossing: Option<f64>,
    pub mean_atoms: f64,
}

impl ClockBudget {
    fn fitted_classical(&self, t: f64) -> f64 {
        self.classical_fit.as_ref().map_or(0.0, |f| f.c * t * t)
    }

    /// Conditional projection noise left once shot noise and the fitted
    /// classical term are removed.
    pub fn reduced_projection(&self, p: &BudgetPoint) -> f64 {
        p.conditional - p.shot - self.fitted_classical(p.t)
    }
}

pub fn clock_budget(s: &Settings) -> Result<(ClockBudget, Vec<Campaign>)> {
    let tau = contrast_tau(s)?;
    let mut points = Vec::new();
    let mut campaigns = Vec::new();
    for (i, &t) in s.t_grid()?.iter().enumerate() {
        let c = Campaign::run(with_seed(clock_campaign(s, t, tau)?, i as u64))?;
        let (r, ctx) = c.report()?;
        let a = phase_amplitude(ctx.chi, ctx.eta, ctx.contrast, r.mean_atoms)?;
        let a2 = a * a;
        let proj = ctx.chi * ctx.chi * r.mean_atoms;
        let rel = (2.0 / (r.n as f64 - 1.0)).sqrt();
        points.push(BudgetPoint {
            t,
            n: r.n,
            mean_atoms: r.mean_atoms,
            contrast: ctx.contrast,
            amplitude: a,
            total: r.var_phi2 / a2,
            total_err: r.var_phi2 * rel / a2,
            shot: ctx.shot2 / a2,
            projection: proj / a2,
            classical: (r.var_phi2 - ctx.shot2 - proj) / a2,
            conditional: r.conditional_variance / a2,
            conditional_err: r.conditional_variance_err / a2,
        });
        campaigns.push(c);
    }
    let classical_fit =
        classical_vs_t_fit(&points.iter().map(|p| (p.t, p.classical, p.total_err)).collect::<Vec<_>>());
    let mean_atoms = points.iter().map(|p| p.mean_atoms).sum::<f64>() / points.len() as f64;
    let mut budget = ClockBudget {
        tau_inh: tau,
        points,
        classical_fit,
        measured_crossing: None,
        idealized_crossing: None,
        mean_atoms,
    };
    let measured: Vec<(f64, f64)> = budget.points.iter().map(|p| (p.t, p.conditional - p.shot)).collect();
    let ideal: Vec<(f64, f64)> = budget.points.iter().map(|p| (p.t, budget.reduced_projection(p))).collect();
    if measured.len() >= 2 {
        let w = wineland_crossing(&measured, &ideal, mean_atoms)?;
        budget.measured_crossing = w.measured;
        budget.idealized_crossing = w.idealized;
    }
    Ok((budget, campaigns))
}

fn clock_noise_budget(s: &Settings) -> Result<RunOutput> {
    let (b, campaigns) = clock_budget(s)?;
    let fit = match &b.classical_fit {
        Ok(f) => json!({
            "c": num(f.c),
            "c_err": num(f.c_err),
            "detuning_std_hz": num(f.detuning_std_hz),
            "detuning_std_err_hz": num(f.detuning_std_err_hz),
        }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let summary = json!({
        "n_cycles": s.int("n_cycles"),
        "tau_inh_us": num(us(b.tau_inh)),
        "injected_detuning_std_hz": num(s.real("detuning_std")),
        "mean_atoms": num(b.mean_atoms),
        "classical_fit": fit,
        "wineland_crossing": {
            "level": num(1.0 / b.mean_atoms),
            "measured_us": opt(b.measured_crossing.map(us)),
            "idealized_us": opt(b.idealized_crossing.map(us)),
        },
    });
    let mut budget = Table::new(&[
        "interrogation_time",
        "n",
        "mean_atoms",
        "contrast",
        "amplitude",
        "total",
        "total_err",
        "shot",
        "projection",
        "classical",
        "conditional",
        "conditional_err",
        "classical_fit",
        "reduced_projection",
        "standard_quantum_limit",
    ]);
    for p in &b.points {
        budget.rows.push(vec![
            p.t.into(),
            Cell::Int(p.n),
            p.mean_atoms.into(),
            p.contrast.into(),
            p.amplitude.into(),
            p.total.into(),
            p.total_err.into(),
            p.shot.into(),
            p.projection.into(),
            p.classical.into(),
            p.conditional.into(),
            p.conditional_err.into(),
            b.fitted_classical(p.t).into(),
            b.reduced_projection(p).into(),
            (1.0 / b.mean_atoms).into(),
        ]);
    }
    let tagged: Vec<_> = campaigns.iter().map(|c| (vec![Cell::Real(clock_t(c))], c)).collect();
    Ok(RunOutput { summary, records: records_table(&["interrogation_time"], &tagged), budget: Some(budget) })
}

fn clock_t(c: &Campaign) -> f64 {
    match c.config.sequence {
        SequenceSpec::Ramsey { t, .. } => t,
        _ => f64::NAN,
    }
}

// ---------------------------------------------------------------------------
// oracle-check

#[derive(Debug, Clone, Copy)]
pub struct OracleRow {
    pub n_atoms: usize,
    pub kappa_sq: f64,
    /// Posterior `var(Jz)` relative to `N/4`.
    pub exact: f64,
    pub gaussian: f64,
    pub rel_err: f64,
    pub pass: bool,
}

/// Gaussian posterior `var(Jz)` after one probe of strength `kappa_sq` on a
/// coherent state along x, through the engine's conditioning update.
pub fn gaussian_posterior_variance(n_atoms: f64, kappa_sq: f64, chi: f64) -> Result<f64> {
    let cal = ProbeCalibration { chi, shot_prefactor: ShotPrefactor::Unit, ..Default::default() };
    let photons = kappa_sq / (chi * chi * n_atoms);
    let pulse = ProbePulse::new(photons, 10e-6, 0.0)?;
    let outcome = PhaseOutcome { phi: 0.0, pulse, kind: OutcomeKind::Atomic };
    Ok(condition(&make_css(n_atoms)?, &outcome, &pulse, &cal)?.var_z())
}

pub fn exact_posterior_variance(n_atoms: usize, kappa_sq: f64, chi: f64) -> Result<f64> {
    let sigma2 = chi * chi * n_atoms as f64 / kappa_sq;
    mean_posterior_variance(&dicke_css(n_atoms)?, chi, sigma2)
}

pub fn oracle_table(atoms: &[usize], kappas: &[f64], tolerance: f64) -> Result<Vec<OracleRow>> {
    let chi = 1e-3;
    let mut rows = Vec::new();
    for &n in atoms {
        for &k2 in kappas {
            let q = n as f64 / 4.0;
            let exact = exact_posterior_variance(n, k2, chi)? / q;
            let gaussian = gaussian_posterior_variance(n as f64, k2, chi)? / q;
            let rel_err = (gaussian - exact).abs() / exact;
            rows.push(OracleRow { n_atoms: n, kappa_sq: k2, exact, gaussian, rel_err, pass: rel_err < tolerance });
        }
    }
    Ok(rows)
}

/// True when, for every `kappa_sq`, the relative error shrinks as the atom
/// number grows.
pub fn errors_decrease_with_n(rows: &[OracleRow]) -> bool {
    let mut kappas: Vec<f64> = rows.iter().map(|r| r.kappa_sq).collect();
    kappas.dedup();
    kappas.iter().all(|k| {
        let mut errs: Vec<(usize, f64)> =
            rows.iter().filter(|r| r.kappa_sq == *k).map(|r| (r.n_atoms, r.rel_err)).collect();
        errs.sort_by_key(|e| e.0);
        errs.windows(2).all(|w| w[1].1 < w[0].1)
    })
}

/// Largest deviation, relative to `N/2`, of the final `<Jz>` of a noiseless
/// EAR sequence from `(N/2) sin(2 pi Delta T)`, for the Gaussian engine and
/// the exact state.
pub fn ear_mean_check(n_atoms: usize, t: f64, detunings: &[f64], timing: &SequenceTiming) -> Result<(f64, f64)> {
    let pulse = ProbePulse::new(6e6, 10e-6, 0.0)?;
    let seq = build_ear_sequence(t, Some(pulse), pulse, timing)?;
    let noise = NoiseModels::quiet();
    let cal = ProbeCalibration::default();
    let half = n_atoms as f64 / 2.0;
    let (mut gauss, mut exact) = (0.0f64, 0.0f64);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for &d in detunings {
        let want = half * (TAU * d * t).sin();
        let mut cycle = sample_cycle_noise(&noise, 0.0, 0, &DriftState::default(), &mut rng);
        cycle.detuning = d;
        let ctx = TrialContext { noise: &noise, cycle, decoherence: DecoherenceModel { alpha: 0.0 }, n_atoms: half * 2.0 };
        let run = run_sequence(&SpinMoments::spin_down(half * 2.0)?, &seq, &ctx, &cal, &mut rng)?;
        let jz = run
            .probes
            .iter()
            .find(|p| p.role == ProbeRole::SecondQnd)
            .map(|p| p.mean_jz)
            .ok_or_else(|| Error::Sequence("no second probe".into()))?;
        gauss = gauss.max((jz - want).abs() / half);
        let st = dicke_run_sequence(&DickeState::spin_down(n_atoms)?, &seq, d)?;
        exact = exact.max((dicke_moments(&st).0.z - want).abs() / half);
    }
    Ok((gauss, exact))
}

fn oracle_check(s: &Settings) -> Result<RunOutput> {
    let atoms: Vec<usize> = s
        .list("oracle_atoms")
        .iter()
        .map(|&x| if x >= 1.0 && x.fract() == 0.0 { Ok(x as usize) } else { Err(Error::Config(format!("oracle atom number {x} is not a positive integer"))) })
        .collect::<Result<_>>()?;
    let tol = s.real("oracle_tolerance");
    let rows = oracle_table(&atoms, s.list("oracle_kappa_sq"), tol)?;
    let decreasing = errors_decrease_with_n(&rows);
    let t = s.real("interrogation_time");
    let detunings = [0.0, 1234.5, -3000.0, 25000.0];
    let mut ear = Vec::new();
    for &n in &atoms {
        let (g, e) = ear_mean_check(n, t, &detunings, &s.timing())?;
        ear.push(json!({ "n_atoms": n, "gaussian_max_dev": num(g), "exact_max_dev": num(e), "pass": g < 1e-10 && e < 1e-10 }));
    }
    let ear_pass = ear.iter().all(|e| e["pass"] == json!(true));
    let all = rows.iter().all(|r| r.pass) && decreasing && ear_pass;
    let summary = json!({
        "tolerance": num(tol),
        "posterior_variance": rows.iter().map(|r| json!({
            "n_atoms": r.n_atoms,
            "kappa_sq": num(r.kappa_sq),
            "exact": num(r.exact),
            "gaussian": num(r.gaussian),
            "rel_err": num(r.rel_err),
            "pass": r.pass,
        })).collect::<Vec<_>>(),
        "error_decreases_with_n": decreasing,
        "ear_mean": ear,
        "all_pass": all,
    });
    let mut records = Table::new(&["n_atoms", "kappa_sq", "exact", "gaussian", "rel_err", "pass"]);
    for r in &rows {
        records.rows.push(vec![
            r.n_atoms.into(),
            r.kappa_sq.into(),
            r.exact.into(),
            r.gaussian.into(),
            r.rel_err.into(),
            if r.pass { "pass".into() } else { "fail".into() },
        ]);
    }
    Ok(RunOutput { summary, records, budget: None })
}
