//! Pulse sequences: construction, execution against a collective spin and
//! synthesizer-grid quantization.
//!
//! Microwave pulses are instantaneous rotations by `-area` about the in-plane
//! axis `(cos phase, sin phase, 0)`; with this convention a phase of 90°
//! takes `|down>` to `+x`, 0° maps `z` onto `+y` and 180° maps `y` onto `z`.
//! Free evolution rotates about `z` by `2 pi Delta T`. Time between events
//! that is not covered by a `Wait` is dead time without precession.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{
    self, DecoherenceModel, DeltaChiMode, OutcomeKind, PhaseOutcome, ProbeCalibration, ProbePulse,
};
use crate::noise::{fringe_contrast, CycleNoise, NoiseModels};
use crate::spin::{rotation_matrix, SpinMoments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeRole {
    FirstQnd,
    SecondQnd,
    AtomNumber,
    Reference,
}

impl ProbeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeRole::FirstQnd => "first_qnd",
            ProbeRole::SecondQnd => "second_qnd",
            ProbeRole::AtomNumber => "atom_number",
            ProbeRole::Reference => "reference",
        }
    }
}

impl FromStr for ProbeRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "first_qnd" => ProbeRole::FirstQnd,
            "second_qnd" => ProbeRole::SecondQnd,
            "atom_number" => ProbeRole::AtomNumber,
            "reference" => ProbeRole::Reference,
            _ => return Err(Error::Sequence(format!("unknown probe role `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceEvent {
    MwPulse { area: f64, phase: f64, duration: f64, detuning: f64 },
    Probe { pulse: ProbePulse, role: ProbeRole },
    Wait { duration: f64 },
}

impl SequenceEvent {
    pub fn duration(&self) -> f64 {
        match self {
            SequenceEvent::MwPulse { duration, .. } | SequenceEvent::Wait { duration } => *duration,
            SequenceEvent::Probe { pulse, .. } => pulse.duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    /// Start time within the sequence, s.
    pub start: f64,
    pub event: SequenceEvent,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sequence {
    pub events: Vec<TimedEvent>,
}

/// Durations of the fixed sequence elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceTiming {
    /// Duration of a microwave pi/2 pulse, s.
    pub mw_duration: f64,
    /// Dead time between a probe and a neighbouring pulse or probe, s.
    pub gap: f64,
}

impl Default for SequenceTiming {
    fn default() -> Self {
        Self { mw_duration: 7e-6, gap: 10e-6 }
    }
}

/// Appends events back to back, separated by optional gaps.
struct Builder {
    seq: Sequence,
    cursor: f64,
}

impl Builder {
    fn new() -> Self {
        Self { seq: Sequence::default(), cursor: 0.0 }
    }

    fn push(&mut self, mut event: SequenceEvent) {
        if let SequenceEvent::Probe { pulse, .. } = &mut event {
            pulse.timestamp = self.cursor;
        }
        self.seq.events.push(TimedEvent { start: self.cursor, event });
        self.cursor += event.duration();
    }

    fn mw(&mut self, phase_deg: f64, timing: &SequenceTiming) {
        self.push(SequenceEvent::MwPulse {
            area: FRAC_PI_2,
            phase: phase_deg.to_radians(),
            duration: timing.mw_duration,
            detuning: 0.0,
        });
    }

    fn gap(&mut self, gap: f64) {
        self.cursor += gap;
    }
}

/// pi/2 pulse, first QND probe, then the probes of the second measurement,
/// all separated by `gap`.
pub fn build_squeezing_sequence(
    probe1: ProbePulse,
    probe2_pulses: &[ProbePulse],
    gap: f64,
    mw_duration: f64,
) -> Result<Sequence> {
    if probe2_pulses.is_empty() {
        return Err(Error::Sequence("second measurement needs at least one probe pulse".into()));
    }
    let timing = SequenceTiming { mw_duration, gap };
    let mut b = Builder::new();
    b.mw(90.0, &timing);
    b.gap(gap);
    b.push(SequenceEvent::Probe { pulse: probe1, role: ProbeRole::FirstQnd });
    for p in probe2_pulses {
        b.gap(gap);
        b.push(SequenceEvent::Probe { pulse: *p, role: ProbeRole::SecondQnd });
    }
    b.seq.validate()?;
    Ok(b.seq)
}

/// Entanglement-assisted Ramsey sequence: pi/2 (90°), first probe, pi/2 (0°),
/// free evolution `T`, pi/2 (180°), second probe. Without `probe1` this is a
/// plain Ramsey sequence.
pub fn build_ear_sequence(
    t: f64,
    probe1: Option<ProbePulse>,
    probe2: ProbePulse,
    timing: &SequenceTiming,
) -> Result<Sequence> {
    build_ramsey_sequence(t, probe1, probe2, 180.0, timing)
}

/// As [`build_ear_sequence`] with a free final pulse phase, in degrees.
pub fn build_ramsey_sequence(
    t: f64,
    probe1: Option<ProbePulse>,
    probe2: ProbePulse,
    theta2_deg: f64,
    timing: &SequenceTiming,
) -> Result<Sequence> {
    if !(t > 0.0) {
        return Err(Error::Sequence(format!("interrogation time must be positive, got {t}")));
    }
    let mut b = Builder::new();
    b.mw(90.0, timing);
    b.gap(timing.gap);
    if let Some(p1) = probe1 {
        b.push(SequenceEvent::Probe { pulse: p1, role: ProbeRole::FirstQnd });
        b.gap(timing.gap);
    }
    b.mw(0.0, timing);
    b.push(SequenceEvent::Wait { duration: t });
    b.mw(theta2_deg, timing);
    b.gap(timing.gap);
    b.push(SequenceEvent::Probe { pulse: probe2, role: ProbeRole::SecondQnd });
    b.seq.validate()?;
    Ok(b.seq)
}

impl Sequence {
    pub fn end_time(&self) -> f64 {
        self.events.last().map(|e| e.start + e.event.duration()).unwrap_or(0.0)
    }

    /// Appends a probe after `gap` of dead time.
    pub fn with_probe(mut self, mut pulse: ProbePulse, role: ProbeRole, gap: f64) -> Result<Self> {
        let start = self.end_time() + gap;
        pulse.timestamp = start;
        self.events.push(TimedEvent { start, event: SequenceEvent::Probe { pulse, role } });
        self.validate()?;
        Ok(self)
    }

    pub fn probes(&self) -> impl Iterator<Item = (&ProbePulse, ProbeRole)> {
        self.events.iter().filter_map(|e| match &e.event {
            SequenceEvent::Probe { pulse, role } => Some((pulse, *role)),
            _ => None,
        })
    }

    pub fn mw_phases(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e.event {
                SequenceEvent::MwPulse { phase, .. } => Some(phase),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() {
            return Err(Error::Sequence("empty sequence".into()));
        }
        let mut seen_mw = false;
        let mut prev_end = f64::NEG_INFINITY;
        let mut prev_start = f64::NEG_INFINITY;
        for (i, te) in self.events.iter().enumerate() {
            if !te.start.is_finite() || !(te.start > prev_start) {
                return Err(Error::Sequence(format!("event {i}: start times must strictly increase")));
            }
            if te.start < prev_end - 1e-12 * prev_end.abs().max(1e-9) {
                return Err(Error::Sequence(format!("event {i} overlaps the previous one")));
            }
            let d = te.event.duration();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Sequence(format!("event {i}: duration must be positive")));
            }
            match &te.event {
                SequenceEvent::MwPulse { area, phase, detuning, .. } => {
                    if !(*area > 0.0 && *area <= TAU + 1e-12) {
                        return Err(Error::Sequence(format!("event {i}: pulse area {area} outside (0, 2pi]")));
                    }
                    if !phase.is_finite() || !detuning.is_finite() {
                        return Err(Error::Sequence(format!("event {i}: non-finite pulse parameter")));
                    }
                    seen_mw = true;
                }
                SequenceEvent::Probe { pulse, role } => {
                    pulse.validate().map_err(|e| Error::Sequence(format!("event {i}: {e}")))?;
                    if matches!(role, ProbeRole::FirstQnd | ProbeRole::SecondQnd) && !seen_mw {
                        return Err(Error::Sequence(format!(
                            "event {i}: atomic probe before any microwave pulse"
                        )));
                    }
                }
                SequenceEvent::Wait { .. } => {}
            }
            prev_start = te.start;
            prev_end = te.start + d;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Text format: one event per line, SI units.

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for te in &self.events {
            match &te.event {
                SequenceEvent::MwPulse { area, phase, duration, detuning } => writeln!(
                    f,
                    "mw start={} duration={} area={} phase={} detuning={}",
                    te.start, duration, area, phase, detuning
                )?,
                SequenceEvent::Probe { pulse, role } => writeln!(
                    f,
                    "probe start={} duration={} photons={} role={}",
                    te.start,
                    pulse.duration,
                    pulse.photons_total,
                    role.as_str()
                )?,
                SequenceEvent::Wait { duration } => writeln!(f, "wait start={} duration={}", te.start, duration)?,
            }
        }
        Ok(())
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap_or_default();
            let mut fields = std::collections::BTreeMap::new();
            for w in words {
                let (k, v) = w
                    .split_once('=')
                    .ok_or_else(|| Error::Sequence(format!("line {}: expected key=value, got `{w}`", lineno + 1)))?;
                fields.insert(k, v);
            }
            let num = |k: &str| -> Result<f64> {
                fields
                    .get(k)
                    .ok_or_else(|| Error::Sequence(format!("line {}: missing `{k}`", lineno + 1)))?
                    .parse::<f64>()
                    .map_err(|_| Error::Sequence(format!("line {}: bad number for `{k}`", lineno + 1)))
            };
            let start = num("start")?;
            let event = match kind {
                "mw" => SequenceEvent::MwPulse {
                    area: num("area")?,
                    phase: num("phase")?,
                    duration: num("duration")?,
                    detuning: num("detuning")?,
                },
                "probe" => {
                    let role = fields
                        .get("role")
                        .ok_or_else(|| Error::Sequence(format!("line {}: missing `role`", lineno + 1)))?
                        .parse()?;
                    let pulse = ProbePulse { photons_total: num("photons")?, duration: num("duration")?, timestamp: start };
                    SequenceEvent::Probe { pulse, role }
                }
                "wait" => SequenceEvent::Wait { duration: num("duration")? },
                other => return Err(Error::Sequence(format!("line {}: unknown event `{other}`", lineno + 1))),
            };
            events.push(TimedEvent { start, event });
        }
        let seq = Sequence { events };
        seq.validate()?;
        Ok(seq)
    }
}

// ---------------------------------------------------------------------------
// Quantization

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationRule {
    pub time_step: f64,
    pub phase_step: f64,
}

impl Default for QuantizationRule {
    fn default() -> Self {
        Self { time_step: 4e-9, phase_step: TAU / 65536.0 }
    }
}

fn snap(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// Rounds start times and durations to the time grid and phases to the
/// phase grid. A pulse area scales with its rounded duration. An event never
/// starts before the rounded end of its predecessor.
pub fn quantize(seq: &Sequence, rule: &QuantizationRule) -> Result<Sequence> {
    if !(rule.time_step > 0.0) || !(rule.phase_step > 0.0) {
        return Err(Error::Quantization("quantization steps must be positive".into()));
    }
    let ticks = |x: f64| (x / rule.time_step).round();
    let mut out = Vec::with_capacity(seq.events.len());
    let mut prev_end = f64::NEG_INFINITY;
    for te in &seq.events {
        let d = te.event.duration();
        let d_ticks = ticks(d);
        if d_ticks <= 0.0 {
            return Err(Error::Quantization(format!("duration {d} s rounds to zero")));
        }
        let s_ticks = ticks(te.start).max(prev_end);
        prev_end = s_ticks + d_ticks;
        let start = s_ticks * rule.time_step;
        let dq = d_ticks * rule.time_step;
        let event = match te.event {
            SequenceEvent::MwPulse { area, phase, duration, detuning } => SequenceEvent::MwPulse {
                area: area * (dq / duration),
                phase: snap(phase, rule.phase_step),
                duration: dq,
                detuning,
            },
            SequenceEvent::Probe { pulse, role } => {
                SequenceEvent::Probe { pulse: ProbePulse { duration: dq, timestamp: start, ..pulse }, role }
            }
            SequenceEvent::Wait { .. } => SequenceEvent::Wait { duration: dq },
        };
        out.push(TimedEvent { start, event });
    }
    let q = Sequence { events: out };
    q.validate().map_err(|e| Error::Quantization(e.to_string()))?;
    Ok(q)
}

// ---------------------------------------------------------------------------
// Execution

/// Cycle-level inputs to one trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialContext<'a> {
    pub noise: &'a NoiseModels,
    pub cycle: CycleNoise,
    pub decoherence: DecoherenceModel,
    pub n_atoms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub role: ProbeRole,
    pub outcome: PhaseOutcome,
    /// `Jz` seen by the probe (diagnostic only).
    pub latent_jz: f64,
    /// Mean `Jz` of the state when the probe started (diagnostic only).
    pub mean_jz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRun {
    pub probes: Vec<ProbeRecord>,
    /// Mean spin after the last event.
    pub final_mean: Vector3<f64>,
}

fn mw_rotation(area: f64, phase: f64) -> nalgebra::Matrix3<f64> {
    rotation_matrix(Vector3::new(phase.cos(), phase.sin(), 0.0), -area)
}

/// Runs one trial. Quantum fluctuations are carried by a sampled vector that
/// rotates with the state; each atomic probe reads `<Jz> + dJz`, and between
/// probes the fluctuation decorrelates as an AR(1) process with the
/// motional correlation time.
pub fn run_sequence<R: Rng + ?Sized>(
    initial: &SpinMoments,
    seq: &Sequence,
    ctx: &TrialContext<'_>,
    cal: &ProbeCalibration,
    rng: &mut R,
) -> Result<TrialRun> {
    seq.validate()?;
    let mut state = *initial;
    let mut delta = state.sample_fluctuation(rng);
    let mut last_probe: Option<f64> = None;
    let mut probes = Vec::new();

    for te in &seq.events {
        match te.event {
            SequenceEvent::MwPulse { area, phase, .. } => {
                let r = mw_rotation(area * ctx.cycle.pulse_area_factor, phase);
                state.mean = r * state.mean;
                state.cov = r * state.cov * r.transpose();
                delta = r * delta;
            }
            SequenceEvent::Wait { duration } => {
                let r = rotation_matrix(Vector3::z(), TAU * ctx.cycle.detuning * duration);
                state.mean = r * state.mean;
                state.cov = r * state.cov * r.transpose();
                delta = r * delta;
                let h = fringe_contrast(duration, &ctx.noise.contrast)?;
                state.mean.x *= h;
                state.mean.y *= h;
            }
            SequenceEvent::Probe { pulse, role } => {
                let offset = ctx.cycle.phase_offset;
                let record = match role {
                    ProbeRole::FirstQnd | ProbeRole::SecondQnd => {
                        if let Some(t_prev) = last_probe {
                            let rho = ctx.noise.correlation.rho(te.start - t_prev);
                            if rho < 1.0 {
                                let fresh = state.sample_fluctuation(rng);
                                delta = delta * rho + fresh * (1.0 - rho * rho).sqrt();
                            }
                        }
                        last_probe = Some(te.start);
                        let dchi = match cal.delta_chi_mode {
                            DeltaChiMode::PerShot => {
                                cal.var_delta_chi.sqrt() * rng.sample::<f64, _>(StandardNormal)
                            }
                            DeltaChiMode::PerCycle => ctx.cycle.delta_chi,
                        };
                        let jz = state.mean.z + delta.z;
                        let mut o = measurement::sample_outcome(jz, ctx.n_atoms, &pulse, cal, dchi, rng)?;
                        o.phi += offset;
                        ProbeRecord { role, outcome: o, latent_jz: jz, mean_jz: state.mean.z }
                    }
                    ProbeRole::AtomNumber => {
                        let mut o = measurement::measure_atom_number(ctx.n_atoms, &pulse, cal, rng)?;
                        o.phi += offset;
                        ProbeRecord { role, outcome: o, latent_jz: ctx.n_atoms / 2.0, mean_jz: state.mean.z }
                    }
                    ProbeRole::Reference => {
                        let mut o = measurement::sample_reference(&pulse, cal, rng)?;
                        o.phi += offset;
                        ProbeRecord { role, outcome: o, latent_jz: 0.0, mean_jz: state.mean.z }
                    }
                };
                if matches!(role, ProbeRole::FirstQnd | ProbeRole::SecondQnd) {
                    let eta = measurement::decoherence_eta(pulse.photons_total, &ctx.decoherence)?;
                    state.mean *= 1.0 - eta;
                }
                probes.push(record);
            }
        }
    }
    Ok(TrialRun { probes, final_mean: state.mean })
}

/// Empty-interferometer counterpart of a sequence: every probe returns shot
/// noise plus the cycle phase offset.
pub fn run_reference<R: Rng + ?Sized>(
    seq: &Sequence,
    cycle: &CycleNoise,
    cal: &ProbeCalibration,
    rng: &mut R,
) -> Result<Vec<ProbeRecord>> {
    let mut out = Vec::new();
    for (pulse, role) in seq.probes() {
        let mut o = measurement::sample_reference(pulse, cal, rng)?;
        o.phi += cycle.phase_offset;
        out.push(ProbeRecord { role, outcome: o, latent_jz: 0.0, mean_jz: 0.0 });
    }
    Ok(out)
}

/// Replays a sequence on the moments of a single trial, conditioning on the
/// recorded atomic outcomes with the Kalman update of the measurement
/// module. Returns the state just before each atomic probe and the final
/// state.
pub fn track_sequence(
    initial: &SpinMoments,
    seq: &Sequence,
    detuning: f64,
    noise: &NoiseModels,
    decoherence: &DecoherenceModel,
    cal: &ProbeCalibration,
    outcomes: &[PhaseOutcome],
) -> Result<(Vec<SpinMoments>, SpinMoments)> {
    seq.validate()?;
    let mut state = *initial;
    let mut k = 0;
    let mut before = Vec::new();
    for te in &seq.events {
        match te.event {
            SequenceEvent::MwPulse { area, phase, .. } => {
                let r = mw_rotation(area, phase);
                state = SpinMoments { mean: r * state.mean, cov: r * state.cov * r.transpose() };
            }
            SequenceEvent::Wait { duration } => {
                let r = rotation_matrix(Vector3::z(), TAU * detuning * duration);
                state = SpinMoments { mean: r * state.mean, cov: r * state.cov * r.transpose() };
                let h = fringe_contrast(duration, &noise.contrast)?;
                state.mean.x *= h;
                state.mean.y *= h;
            }
            SequenceEvent::Probe { pulse, role: ProbeRole::FirstQnd | ProbeRole::SecondQnd } => {
                let o = outcomes
                    .get(k)
                    .ok_or_else(|| Error::Sequence("fewer outcomes than atomic probes".into()))?;
                if o.kind != OutcomeKind::Atomic {
                    return Err(Error::Sequence(format!("outcome {k} is not an atomic readout")));
                }
                k += 1;
                before.push(state);
                state = measurement::condition(&state, o, &pulse, cal)?;
                let eta = measurement::decoherence_eta(pulse.photons_total, decoherence)?;
                state.mean *= 1.0 - eta;
            }
            SequenceEvent::Probe { .. } => {}
        }
    }
    if k != outcomes.len() {
        return Err(Error::Sequence("more outcomes than atomic probes".into()));
    }
    Ok((before, state))
}

/// Ideal phase-grid value of a phase in degrees, for readable tests.
pub fn degrees_on_grid(deg: f64, rule: &QuantizationRule) -> f64 {
    snap(deg.to_radians(), rule.phase_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{ContrastModel, CorrelationModel};
    use crate::spin::make_css;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn probe(n: f64) -> ProbePulse {
        ProbePulse::new(n, 10e-6, 0.0).unwrap()
    }

    fn quiet_cycle(detuning: f64) -> CycleNoise {
        CycleNoise { cycle_index: 0, detuning, pulse_area_factor: 1.0, phase_offset: 0.0, delta_chi: 0.0 }
    }

    fn no_decoherence() -> DecoherenceModel {
        DecoherenceModel::new(0.0).unwrap()
    }

    #[test]
    fn squeezing_sequence_examples() {
        let s = build_squeezing_sequence(probe(6e6), &[probe(6e6)], 10e-6, 7e-6).unwrap();
        assert_eq!(s.events.len(), 3);
        let (p1, role) = s.probes().next().unwrap();
        assert_eq!(role, ProbeRole::FirstQnd);
        assert_eq!(p1.photons_total, 6e6);
        assert_eq!(p1.duration, 10e-6);
        assert!((p1.timestamp - 17e-6).abs() < 1e-18);
        let s = build_squeezing_sequence(probe(6e6), &[probe(3e6), probe(3e6)], 10e-6, 7e-6).unwrap();
        let t: Vec<f64> = s.probes().map(|(p, _)| p.timestamp).collect();
        assert!((t[1] - t[0] - 20e-6).abs() < 1e-15 && (t[2] - t[0] - 40e-6).abs() < 1e-15);
        assert!(build_squeezing_sequence(probe(6e6), &[], 10e-6, 7e-6).is_err());
    }

    #[test]
    fn ear_sequence_examples() {
        let timing = SequenceTiming::default();
        let s = build_ear_sequence(10e-6, Some(probe(7.1e6)), probe(7.1e6), &timing).unwrap();
        assert_eq!(s.events.len(), 6);
        let ph = s.mw_phases();
        assert!((ph[0] - FRAC_PI_2).abs() < 1e-15 && ph[1] == 0.0 && (ph[2] - PI).abs() < 1e-15);
        assert!(matches!(s.events[3].event, SequenceEvent::Wait { duration } if duration == 10e-6));
        let t: Vec<f64> = s.probes().map(|(p, _)| p.timestamp).collect();
        assert!((t[1] - t[0] - 54e-6).abs() < 1e-15);

        let r = build_ear_sequence(10e-6, None, probe(7.1e6), &timing).unwrap();
        assert_eq!(r.probes().count(), 1);
        assert_eq!(r.events.len(), 5);
        assert!(build_ear_sequence(0.0, None, probe(1.0), &timing).is_err());
    }

    #[test]
    fn validation_rejects_malformed() {
        let bad = Sequence {
            events: vec![TimedEvent { start: 0.0, event: SequenceEvent::Probe { pulse: probe(1e6), role: ProbeRole::FirstQnd } }],
        };
        assert!(matches!(bad.validate(), Err(Error::Sequence(_))));
        let overlap = Sequence {
            events: vec![
                TimedEvent { start: 0.0, event: SequenceEvent::Wait { duration: 1e-5 } },
                TimedEvent { start: 5e-6, event: SequenceEvent::Wait { duration: 1e-5 } },
            ],
        };
        assert!(overlap.validate().is_err());
        let area = Sequence {
            events: vec![TimedEvent {
                start: 0.0,
                event: SequenceEvent::MwPulse { area: 7.0, phase: 0.0, duration: 1e-6, detuning: 0.0 },
            }],
        };
        assert!(area.validate().is_err());
        assert!(Sequence::default().validate().is_err());
    }

    fn noiseless_ear_jz(n: f64, detuning: f64, t: f64, eta_alpha: f64) -> (f64, f64) {
        let timing = SequenceTiming::default();
        let seq = build_ear_sequence(t, Some(probe(7.1e6)), probe(7.1e6), &timing).unwrap();
        let noise = NoiseModels::quiet();
        let decoherence = DecoherenceModel::new(eta_alpha).unwrap();
        let ctx = TrialContext { noise: &noise, cycle: quiet_cycle(detuning), decoherence, n_atoms: n };
        let cal = ProbeCalibration::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = run_sequence(&SpinMoments::spin_down(n).unwrap(), &seq, &ctx, &cal, &mut rng).unwrap();
        let eta = measurement::decoherence_eta(7.1e6, &decoherence).unwrap();
        (run.probes[1].mean_jz, (1.0 - eta) * n / 2.0 * (TAU * detuning * t).sin())
    }

    #[test]
    fn noiseless_ear_reproduces_fringe_formula() {
        for &(d, t) in &[(0.0, 10e-6), (250.0, 10e-6), (-1300.0, 90e-6), (40.0, 310e-6)] {
            let (got, want) = noiseless_ear_jz(9e4, d, t, 0.0);
            assert!((got - want).abs() < 1e-9 * 9e4, "{got} vs {want}");
            let (got, want) = noiseless_ear_jz(9e4, d, t, 2.042e-8);
            assert!((got - want).abs() < 1e-9 * 9e4);
        }
        // small-angle slope
        let (got, _) = noiseless_ear_jz(1e5, 1.0, 10e-6, 0.0);
        assert!((got / (5e4 * TAU * 1e-5) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn microwave_pulses_commute_with_population_difference_at_resonance() {
        // at zero detuning the first and second probe read the same Jz
        // fluctuation: with perfect correlation and no shot noise they agree
        let timing = SequenceTiming::default();
        let seq = build_ear_sequence(10e-6, Some(probe(1e30)), probe(1e30), &timing).unwrap();
        let noise = NoiseModels::quiet();
        let ctx = TrialContext { noise: &noise, cycle: quiet_cycle(0.0), decoherence: no_decoherence(), n_atoms: 1e4 };
        let cal = ProbeCalibration::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let run = run_sequence(&SpinMoments::spin_down(1e4).unwrap(), &seq, &ctx, &cal, &mut rng).unwrap();
            let (a, b) = (run.probes[0].outcome.phi, run.probes[1].outcome.phi);
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    fn fringe_point(theta2: f64, probe1: Option<ProbePulse>, alpha: f64, h: &ContrastModel) -> f64 {
        let timing = SequenceTiming::default();
        let seq = build_ramsey_sequence(50e-6, probe1, probe(1e6), theta2, &timing).unwrap();
        let noise = NoiseModels { contrast: h.clone(), ..NoiseModels::quiet() };
        let ctx = TrialContext {
            noise: &noise,
            cycle: quiet_cycle(0.0),
            decoherence: DecoherenceModel::new(alpha).unwrap(),
            n_atoms: 1e4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let run =
            run_sequence(&SpinMoments::spin_down(1e4).unwrap(), &seq, &ctx, &ProbeCalibration::default(), &mut rng)
                .unwrap();
        run.probes.last().unwrap().mean_jz
    }

    #[test]
    fn fringe_scan_has_sine_shape_and_probe_keeps_phase() {
        let h = ContrastModel::Parametric { tau_inh: 100e-6 };
        let h50 = fringe_contrast(50e-6, &h).unwrap();
        for k in 0..12 {
            let th = 30.0 * k as f64;
            let jz = fringe_point(th, None, 0.0, &h);
            assert!((jz - 5e3 * h50 * th.to_radians().sin()).abs() < 1e-9);
            let with_probe = fringe_point(th, Some(probe(5.9e6)), 2.39e-8, &h);
            let eta = 1.0 - (-2.39e-8f64 * 5.9e6).exp();
            assert!((with_probe - (1.0 - eta) * jz).abs() < 1e-9);
        }
    }

    #[test]
    fn probes_decorrelate_with_motion() {
        let gap = 10e-6;
        let seq = build_squeezing_sequence(probe(1e30), &[probe(1e30)], gap, 7e-6).unwrap();
        let noise = NoiseModels { correlation: CorrelationModel { tau_decay: 20e-6, fit_amplitude: None }, ..NoiseModels::quiet() };
        let ctx = TrialContext { noise: &noise, cycle: quiet_cycle(0.0), decoherence: no_decoherence(), n_atoms: 1e4 };
        let cal = ProbeCalibration::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..40_000 {
            let run = run_sequence(&SpinMoments::spin_down(1e4).unwrap(), &seq, &ctx, &cal, &mut rng).unwrap();
            a.push(run.probes[0].latent_jz);
            b.push(run.probes[1].latent_jz);
        }
        let n = a.len() as f64;
        let cab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n;
        let va: f64 = a.iter().map(|x| x * x).sum::<f64>() / n;
        let vb: f64 = b.iter().map(|x| x * x).sum::<f64>() / n;
        assert!((va / 2500.0 - 1.0).abs() < 0.03 && (vb / 2500.0 - 1.0).abs() < 0.03);
        assert!((cab / (va * vb).sqrt() - (-1.0f64).exp()).abs() < 0.02);
    }

    #[test]
    fn track_sequence_squeezes_first_probe() {
        let n = 1.2e5;
        let chi = measurement::chi_for_kappa_squared(1.6, n, 6e6, measurement::ShotPrefactor::Unit, 1.0).unwrap();
        let cal = ProbeCalibration { chi, shot_prefactor: measurement::ShotPrefactor::Unit, ..Default::default() };
        let seq = build_squeezing_sequence(probe(6e6), &[probe(6e6)], 10e-6, 7e-6).unwrap();
        let o = PhaseOutcome { phi: 0.0, pulse: probe(6e6), kind: OutcomeKind::Atomic };
        let (before, _) =
            track_sequence(&SpinMoments::spin_down(n).unwrap(), &seq, 0.0, &NoiseModels::quiet(), &no_decoherence(), &cal, &[o, o])
                .unwrap();
        assert!((before[0].var_z() - n / 4.0).abs() < 1e-6);
        assert!((before[1].var_z() - n / 4.0 / 2.6).abs() < 1e-6);
        assert!(track_sequence(&make_css(n).unwrap(), &seq, 0.0, &NoiseModels::quiet(), &no_decoherence(), &cal, &[o]).is_err());
    }

    #[test]
    fn quantize_examples() {
        let rule = QuantizationRule::default();
        assert_eq!(degrees_on_grid(90.0, &rule), 16384.0 * TAU / 65536.0);
        let mk = |d: f64| Sequence {
            events: vec![TimedEvent {
                start: 0.0,
                event: SequenceEvent::MwPulse { area: FRAC_PI_2, phase: FRAC_PI_2, duration: d, detuning: 0.0 },
            }],
        };
        let q = quantize(&mk(7e-6), &rule).unwrap();
        let SequenceEvent::MwPulse { duration, area, phase, .. } = q.events[0].event else { unreachable!() };
        assert_eq!((duration / 4e-9).round(), 1750.0);
        assert!((duration - 7e-6).abs() < 1e-18);
        assert!((area - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(phase, FRAC_PI_2);
        let q = quantize(&mk(10.001e-6), &rule).unwrap();
        let SequenceEvent::MwPulse { duration, .. } = q.events[0].event else { unreachable!() };
        assert_eq!((duration / 4e-9).round(), 2500.0);
        assert!((duration - 10e-6).abs() < 1e-18);
        assert!(matches!(quantize(&mk(1e-9), &rule), Err(Error::Quantization(_))));
    }

    #[test]
    fn text_round_trip_and_golden() {
        let s = build_ear_sequence(10e-6, Some(probe(7.1e6)), probe(7.1e6), &SequenceTiming::default()).unwrap();
        let q = quantize(&s, &QuantizationRule::default()).unwrap();
        let text = q.to_string();
        let back: Sequence = text.parse().unwrap();
        assert_eq!(back, q);
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("mw start=0 duration=0.000007"), "{first}");
        assert!(text.lines().nth(1).unwrap().ends_with("photons=7100000 role=first_qnd"));
        assert!("bogus start=0\n".parse::<Sequence>().is_err());
        assert!("wait start=0\n".parse::<Sequence>().is_err());
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(
            t in 1e-6..400e-6f64, phase in -7.0..7.0f64, mw in 1e-6..20e-6f64, gap in 1e-6..30e-6f64,
        ) {
            let timing = SequenceTiming { mw_duration: mw, gap };
            let s = build_ramsey_sequence(t, Some(probe(1e6)), probe(1e6), phase.to_degrees(), &timing).unwrap();
            let rule = QuantizationRule::default();
            let q1 = quantize(&s, &rule).unwrap();
            let q2 = quantize(&q1, &rule).unwrap();
            prop_assert_eq!(&q1, &q2);
            for te in &q1.events {
                let k = te.start / rule.time_step;
                prop_assert!((k - k.round()).abs() < 1e-6);
            }
            prop_assert!(q1.events.windows(2).all(|w| w[1].start > w[0].start));
        }
    }
}
