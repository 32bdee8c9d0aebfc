//! Run configuration: one flat table of keys resolved in layers, built-in
//! defaults first, then the preset, then a TOML file, then `key=value`
//! overrides.
//!
//! Durations, frequencies and angles are strings with a unit suffix
//! (`"670 us"`, `"7.5 Hz"`, `"180 deg"`). A bare number is rejected for
//! them, which keeps seconds and microseconds from being mixed up. Files may
//! group keys in tables; table names are only for reading and are dropped
//! when the file is flattened.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::{AtomNumberLaw, CampaignConfig, SequenceSpec};
use crate::error::{Error, Result};
use crate::measurement::{
    chi_for_kappa_squared, DecoherenceModel, DeltaChiMode, ProbeCalibration, ShotPrefactor,
};
use crate::noise::{ContrastModel, CorrelationModel, DetuningModel, DriftModel, NoiseModels};
use crate::sequencer::{QuantizationRule, SequenceTiming};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    SqueezeScan,
    PulseCountScan,
    DecoherenceFringe,
    FringeDecay,
    ClockSqueeze,
    ClockNoiseBudget,
    OracleCheck,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::SqueezeScan,
        Preset::PulseCountScan,
        Preset::DecoherenceFringe,
        Preset::FringeDecay,
        Preset::ClockSqueeze,
        Preset::ClockNoiseBudget,
        Preset::OracleCheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::SqueezeScan => "squeeze-scan",
            Preset::PulseCountScan => "pulse-count-scan",
            Preset::DecoherenceFringe => "decoherence-fringe",
            Preset::FringeDecay => "fringe-decay",
            Preset::ClockSqueeze => "clock-squeeze",
            Preset::ClockNoiseBudget => "clock-noise-budget",
            Preset::OracleCheck => "oracle-check",
        }
    }

    /// Values this preset sets on top of the built-in defaults, as TOML
    /// literals.
    fn overrides(self) -> &'static [(&'static str, &'static str)] {
        const CLOCK: &[(&str, &str)] = &[
            ("n_atoms", "9e4"),
            ("probe1_photons", "7.1e6"),
            ("probe2_photons", "7.1e6"),
            ("atom_number_photons", "7.1e6"),
            ("eta", "0.135"),
            ("kappa_sq", "1.218"),
            ("shot_prefactor", "\"unit\""),
            ("detuning_std", "\"7.5 Hz\""),
        ];
        match self {
            Preset::SqueezeScan => &[("shot_prefactor", "\"unit\"")],
            Preset::PulseCountScan => &[("shot_prefactor", "\"unit\""), ("probe2_pulses", "10")],
            Preset::DecoherenceFringe => &[
                ("probe1_photons", "5.9e6"),
                ("alpha", "2.39e-8"),
                ("n_cycles", "40"),
            ],
            Preset::FringeDecay => &[
                ("n_atoms", "9e4"),
                ("n_cycles", "40"),
                ("t_start", "\"10 us\""),
                ("t_stop", "\"350 us\""),
            ],
            Preset::ClockSqueeze => CLOCK,
            Preset::ClockNoiseBudget => CLOCK,
            Preset::OracleCheck => &[],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                Error::Config(format!("unknown preset `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Non-negative integer.
    Int,
    Real,
    /// A number, or `"auto"` to derive it from other keys.
    RealOrAuto,
    Duration,
    /// A duration, or `"auto"`.
    DurationOrAuto,
    Frequency,
    Angle,
    Bool,
    Choice(&'static [&'static str]),
    /// An array of numbers; a single number is read as a one-element array.
    RealList,
    Path,
}

pub struct KeySpec {
    pub name: &'static str,
    pub group: &'static str,
    pub kind: Kind,
    /// Default as a TOML literal.
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(group: &'static str, name: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { name, group, kind, default, doc }
}

use Kind::*;

pub const KEYS: &[KeySpec] = &[
    key("run", "seed", Int, "1", "master random seed"),
    key("run", "workers", Int, "1", "worker threads; results do not depend on it"),
    key("run", "n_cycles", Int, "1200", "loading cycles per campaign"),
    key("run", "experiments_per_cycle", Int, "4", "recycled experiments per loading cycle"),
    key("run", "reference_shots", Int, "3", "empty-interferometer shots per cycle"),
    key("run", "cycle_time", Duration, "\"5 s\"", "loading cycle period"),
    key("atoms", "n_atoms", Real, "1.2e5", "mean loaded atom number"),
    key("atoms", "n_atoms_rel_std", Real, "0.1", "relative spread of the loaded atom number"),
    key("atoms", "retention", RealList, "[1.0]", "fraction kept between recycled experiments; last entry repeats"),
    key("timing", "probe_duration", Duration, "\"10 us\"", "length of every probe pulse"),
    key("timing", "mw_duration", Duration, "\"7 us\"", "length of a pi/2 microwave pulse"),
    key("timing", "gap", Duration, "\"10 us\"", "dead time between consecutive events"),
    key("timing", "quantize", Bool, "true", "snap the sequence to the timing and phase grids"),
    key("timing", "time_step", Duration, "\"4 ns\"", "timing grid"),
    key("timing", "phase_step", Angle, "\"0.0054931640625 deg\"", "phase grid, 2 pi / 2^16 by default"),
    key("sequence", "probe1_photons", Real, "6e6", "photons in the first QND probe"),
    key("sequence", "probe2_photons", Real, "6e6", "photons in each pulse of the second measurement"),
    key("sequence", "probe2_pulses", Int, "1", "pulses forming the second measurement"),
    key("sequence", "atom_number_photons", Real, "6e6", "photons in the atom-number probe"),
    key("sequence", "interrogation_time", Duration, "\"10 us\"", "Ramsey free evolution time"),
    key("sequence", "theta2", Angle, "\"180 deg\"", "phase of the last microwave pulse"),
    key("probe", "kappa_sq", Real, "1.6", "projection to shot noise ratio of the first probe, sets chi when chi is auto"),
    key("probe", "chi", RealOrAuto, "\"auto\"", "coupling, rad per atom"),
    key("probe", "chi_bar_ratio", Real, "1.0", "atom-number coupling relative to chi"),
    key("probe", "beta", Real, "3.605551275463989", "probe color power ratio"),
    key("probe", "var_delta_chi", Real, "0.0", "variance of the coupling imbalance"),
    key("probe", "shot_prefactor", Choice(&["eq5", "unit"]), "\"eq5\"", "shot noise prefactor convention"),
    key("probe", "delta_chi_mode", Choice(&["per_shot", "per_cycle"]), "\"per_shot\"", "when the coupling imbalance is redrawn"),
    key("probe", "backaction_excess", Real, "10.0", "excess factor on the conjugate-axis backaction"),
    key("probe", "eta", Real, "0.14", "shortening of the first probe, sets alpha when alpha is auto"),
    key("probe", "alpha", RealOrAuto, "\"auto\"", "scattering coefficient per photon"),
    key("noise", "detuning_mean", Frequency, "\"0 Hz\"", "mean microwave detuning"),
    key("noise", "detuning_std", Frequency, "\"0 Hz\"", "cycle-to-cycle detuning spread"),
    key("noise", "contrast_mode", Choice(&["parametric", "table"]), "\"parametric\"", "fringe contrast model"),
    key("noise", "tau_inh", DurationOrAuto, "\"auto\"", "Gaussian contrast decay time; auto calibrates it to wineland_target"),
    key("noise", "contrast_table", Path, "\"\"", "two-column (T in s, h) table for the table contrast mode"),
    key("noise", "wineland_target", Duration, "\"90 us\"", "interrogation time where the idealized clock reaches the standard quantum limit"),
    key("noise", "tau_decay", Duration, "\"670 us\"", "motional correlation time of the probed Jz; \"inf\" disables"),
    key("noise", "pulse_area_drift_std", Real, "0.0", "fractional pulse-area drift"),
    key("noise", "trap_intensity_drift_std", Real, "0.0", "fractional trap intensity drift"),
    key("noise", "phase_offset_drift_std", Angle, "\"0 rad\"", "interferometer phase offset drift"),
    key("noise", "phase_offset_slope", Angle, "\"0 rad\"", "linear phase offset drift per cycle"),
    key("noise", "drift_correlation_time", Duration, "\"600 s\"", "correlation time of the slow drifts"),
    key("noise", "trap_light_shift", Frequency, "\"-1700 Hz\"", "differential light shift of the trap"),
    key("analysis", "n_bins", Int, "10", "atom-number bins"),
    key("analysis", "subtract_reference", Bool, "false", "report variances with the reference shot noise removed"),
    key("analysis", "quiet_companion", Bool, "true", "clock-squeeze: also run with classical noise zeroed"),
    key("scan", "t_start", Duration, "\"10 us\"", "first interrogation time of a scan"),
    key("scan", "t_stop", Duration, "\"310 us\"", "last interrogation time of a scan"),
    key("scan", "t_step", Duration, "\"20 us\"", "interrogation time step"),
    key("scan", "theta2_points", Int, "16", "final pulse phases per fringe"),
    key("oracle", "oracle_atoms", RealList, "[100, 400]", "atom numbers of the exact comparison"),
    key("oracle", "oracle_kappa_sq", RealList, "[0.5, 1.6, 4.0]", "measurement strengths of the exact comparison"),
    key("oracle", "oracle_tolerance", Real, "0.05", "relative tolerance of the posterior variance comparison"),
];

const GROUPS: &[&str] = &["run", "atoms", "timing", "sequence", "probe", "noise", "analysis", "scan", "oracle"];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    /// Numbers in SI units.
    Real(f64),
    Auto,
    Bool(bool),
    Text(String),
    List(Vec<f64>),
}

fn unit_factor(kind: Kind, unit: &str) -> Option<f64> {
    match kind {
        Duration | DurationOrAuto => match unit {
            "s" => Some(1.0),
            "ms" => Some(1e-3),
            "us" | "µs" => Some(1e-6),
            "ns" => Some(1e-9),
            _ => None,
        },
        Frequency => match unit {
            "Hz" => Some(1.0),
            "kHz" => Some(1e3),
            "MHz" => Some(1e6),
            "mHz" => Some(1e-3),
            _ => None,
        },
        Angle => match unit {
            "rad" => Some(1.0),
            "mrad" => Some(1e-3),
            "urad" => Some(1e-6),
            // degrees are handled separately so grid values stay exact
            "deg" => Some(f64::NAN),
            _ => None,
        },
        _ => None,
    }
}

fn unit_hint(kind: Kind) -> &'static str {
    match kind {
        Duration | DurationOrAuto => "s, ms, us or ns",
        Frequency => "Hz, kHz, MHz or mHz",
        _ => "rad, mrad, urad or deg",
    }
}

/// Parses `"<number> <unit>"` into SI units.
pub fn parse_quantity(name: &str, kind: Kind, text: &str) -> Result<f64> {
    let s = text.trim();
    if matches!(kind, Duration | DurationOrAuto) && (s == "inf" || s == "infinity") {
        return Ok(f64::INFINITY);
    }
    let split = s
        .char_indices()
        .find(|&(i, c)| c.is_alphabetic() && !(c == 'e' && s[i + 1..].starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+')))
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let (num, unit) = (s[..split].trim(), s[split..].trim());
    let bad = || Error::Config(format!("key `{name}`: cannot read `{text}`, expected a number with unit ({})", unit_hint(kind)));
    if unit.is_empty() {
        return Err(Error::Config(format!(
            "key `{name}`: `{text}` needs a unit ({}), e.g. \"10 us\"",
            unit_hint(kind)
        )));
    }
    let x: f64 = num.parse().map_err(|_| bad())?;
    let factor = unit_factor(kind, unit).ok_or_else(bad)?;
    if unit == "deg" {
        Ok(x / 360.0 * TAU)
    } else {
        Ok(x * factor)
    }
}

fn as_number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Integer(i) => Some(*i as f64),
        toml::Value::Float(x) => Some(*x),
        _ => None,
    }
}

/// Checks and converts a raw value for key `spec`.
fn convert(spec: &KeySpec, raw: &toml::Value) -> Result<Value> {
    let name = spec.name;
    let wrong = |what: &str| Error::Config(format!("key `{name}`: expected {what}, got `{raw}`"));
    let text = raw.as_str();
    match spec.kind {
        Int => match raw {
            toml::Value::Integer(i) if *i >= 0 => Ok(Value::Int(*i as u64)),
            _ => Err(wrong("a non-negative integer")),
        },
        Real => as_number(raw).filter(|x| x.is_finite()).map(Value::Real).ok_or_else(|| wrong("a number")),
        RealOrAuto => match text {
            Some("auto") => Ok(Value::Auto),
            _ => as_number(raw).filter(|x| x.is_finite()).map(Value::Real).ok_or_else(|| wrong("a number or \"auto\"")),
        },
        Duration | Frequency | Angle | DurationOrAuto => match (text, spec.kind) {
            (Some("auto"), DurationOrAuto) => Ok(Value::Auto),
            (Some(s), _) => parse_quantity(name, spec.kind, s).map(Value::Real),
            // a bare `inf` is unambiguous in any unit
            (None, Duration | DurationOrAuto) if raw.as_float() == Some(f64::INFINITY) => {
                Ok(Value::Real(f64::INFINITY))
            }
            (None, _) if as_number(raw).is_some() => Err(Error::Config(format!(
                "key `{name}`: bare number `{raw}` needs a unit ({}), e.g. \"10 us\"",
                unit_hint(spec.kind)
            ))),
            _ => Err(wrong("a quoted number with unit")),
        },
        Bool => raw.as_bool().map(Value::Bool).ok_or_else(|| wrong("true or false")),
        Choice(options) => match text {
            Some(s) if options.contains(&s) => Ok(Value::Text(s.to_string())),
            _ => Err(wrong(&format!("one of {}", options.join(", ")))),
        },
        RealList => match raw {
            toml::Value::Array(items) => items
                .iter()
                .map(|v| as_number(v).filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .map(Value::List)
                .ok_or_else(|| wrong("an array of numbers")),
            _ => as_number(raw).map(|x| Value::List(vec![x])).ok_or_else(|| wrong("an array of numbers")),
        },
        Path => text.map(|s| Value::Text(s.to_string())).ok_or_else(|| wrong("a quoted path")),
    }
}

fn parse_literal(literal: &str) -> Option<toml::Value> {
    let table: toml::Table = toml::from_str(&format!("v = {literal}")).ok()?;
    table.get("v").cloned()
}

/// Collects leaf keys from a parsed file, descending into tables.
fn flatten(table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        match v {
            toml::Value::Table(t) => flatten(t, out),
            _ => out.push((k.clone(), v.clone())),
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub preset: Preset,
    values: BTreeMap<&'static str, Value>,
}

impl Settings {
    /// Built-in defaults with the preset applied.
    pub fn for_preset(preset: Preset) -> Self {
        let mut values = BTreeMap::new();
        for spec in KEYS {
            let raw = parse_literal(spec.default).expect("default literals are valid TOML");
            values.insert(spec.name, convert(spec, &raw).expect("defaults are valid"));
        }
        let mut s = Settings { preset, values };
        for (k, lit) in preset.overrides() {
            s.set_raw(k, &parse_literal(lit).expect("preset literals are valid TOML")).expect("preset overrides are valid");
        }
        s
    }

    fn set_raw(&mut self, name: &str, raw: &toml::Value) -> Result<()> {
        let spec = key_spec(name).ok_or_else(|| Error::UnknownKey(name.to_string()))?;
        self.values.insert(spec.name, convert(spec, raw)?);
        Ok(())
    }

    /// Applies a TOML document. A `preset` key, if present, must name this
    /// run's preset.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut flat = Vec::new();
        flatten(&table, &mut flat);
        let mut seen = std::collections::BTreeSet::new();
        for (k, _) in &flat {
            if !seen.insert(k.as_str()) {
                return Err(Error::Config(format!("key `{k}` given twice")));
            }
        }
        for (k, v) in flat {
            if k == "preset" {
                let named = v.as_str().ok_or_else(|| Error::Config("`preset` must be a string".into()))?;
                if named != self.preset.as_str() {
                    return Err(Error::Config(format!(
                        "config file is for preset `{named}`, not `{}`",
                        self.preset
                    )));
                }
                continue;
            }
            self.set_raw(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_toml(&text)
    }

    /// Applies `key=value`. The value is read as a TOML literal and, failing
    /// that, as a bare string, so `tau_decay=670us` and `shot_prefactor=unit`
    /// both work.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let raw = parse_literal(v).unwrap_or_else(|| toml::Value::String(v.to_string()));
        self.set_raw(k, &raw)
    }

    /// Defaults, preset, optional file and overrides, in that order.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = Self::for_preset(preset);
        if let Some(p) = file {
            s.apply_file(p)?;
        }
        for o in overrides {
            s.apply_override(o)?;
        }
        Ok(s)
    }

    fn get(&self, name: &str) -> &Value {
        self.values.get(name).unwrap_or_else(|| panic!("`{name}` is not a registered key"))
    }

    pub fn int(&self, name: &str) -> usize {
        match self.get(name) {
            Value::Int(i) => *i as usize,
            v => panic!("`{name}` is not an integer: {v:?}"),
        }
    }

    pub fn u64(&self, name: &str) -> u64 {
        match self.get(name) {
            Value::Int(i) => *i,
            v => panic!("`{name}` is not an integer: {v:?}"),
        }
    }

    pub fn real(&self, name: &str) -> f64 {
        match self.get(name) {
            Value::Real(x) => *x,
            v => panic!("`{name}` is not a number: {v:?}"),
        }
    }

    /// `None` for `"auto"`.
    pub fn real_or_auto(&self, name: &str) -> Option<f64> {
        match self.get(name) {
            Value::Real(x) => Some(*x),
            Value::Auto => None,
            v => panic!("`{name}` is not a number: {v:?}"),
        }
    }

    pub fn flag(&self, name: &str) -> bool {
        match self.get(name) {
            Value::Bool(b) => *b,
            v => panic!("`{name}` is not a flag: {v:?}"),
        }
    }

    pub fn text(&self, name: &str) -> &str {
        match self.get(name) {
            Value::Text(s) => s,
            v => panic!("`{name}` is not text: {v:?}"),
        }
    }

    pub fn list(&self, name: &str) -> &[f64] {
        match self.get(name) {
            Value::List(v) => v,
            v => panic!("`{name}` is not a list: {v:?}"),
        }
    }

    /// Sets a key from its TOML literal; for presets and tests.
    pub fn set(&mut self, name: &str, literal: &str) -> Result<()> {
        let raw = parse_literal(literal).ok_or_else(|| Error::Config(format!("bad literal `{literal}`")))?;
        self.set_raw(name, &raw)
    }

    /// The resolved configuration as TOML. Loading it back with the same
    /// preset reproduces these settings exactly.
    pub fn to_toml(&self) -> String {
        let mut out = format!("preset = \"{}\"\n", self.preset);
        for group in GROUPS {
            out.push_str(&format!("\n[{group}]\n"));
            for spec in KEYS.iter().filter(|k| k.group == *group) {
                out.push_str(&format!("{} = {}\n", spec.name, literal(spec.kind, self.get(spec.name))));
            }
        }
        out
    }

    // ---- typed views ---------------------------------------------------

    pub fn shot_prefactor(&self) -> ShotPrefactor {
        match self.text("shot_prefactor") {
            "unit" => ShotPrefactor::Unit,
            _ => ShotPrefactor::Eq5,
        }
    }

    pub fn timing(&self) -> SequenceTiming {
        SequenceTiming { mw_duration: self.real("mw_duration"), gap: self.real("gap") }
    }

    pub fn quantization(&self) -> Option<QuantizationRule> {
        self.flag("quantize")
            .then(|| QuantizationRule { time_step: self.real("time_step"), phase_step: self.real("phase_step") })
    }

    /// Probe calibration; an automatic `chi` gives `kappa_sq` at the mean
    /// atom number and the first-probe photon number.
    pub fn calibration(&self) -> Result<ProbeCalibration> {
        let mut cal = ProbeCalibration {
            chi: 0.0,
            chi_bar_ratio: self.real("chi_bar_ratio"),
            beta: self.real("beta"),
            var_delta_chi: self.real("var_delta_chi"),
            shot_prefactor: self.shot_prefactor(),
            delta_chi_mode: match self.text("delta_chi_mode") {
                "per_cycle" => DeltaChiMode::PerCycle,
                _ => DeltaChiMode::PerShot,
            },
            backaction_excess: self.real("backaction_excess"),
        };
        cal.chi = match self.real_or_auto("chi") {
            Some(c) => c,
            None => chi_for_kappa_squared(
                self.real("kappa_sq"),
                self.real("n_atoms"),
                self.real("probe1_photons"),
                cal.shot_prefactor,
                cal.beta,
            )
            .map_err(|e| Error::Config(e.to_string()))?,
        };
        cal.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cal)
    }

    /// Scattering model; an automatic `alpha` gives shortening `eta` at the
    /// first-probe photon number.
    pub fn decoherence(&self) -> Result<DecoherenceModel> {
        match self.real_or_auto("alpha") {
            Some(a) => DecoherenceModel::new(a),
            None => DecoherenceModel::for_eta(self.real("eta"), self.real("probe1_photons")),
        }
        .map_err(|e| Error::Config(e.to_string()))
    }

    /// Noise models with the contrast decay time as given; `tau_inh = auto`
    /// is resolved by the caller.
    pub fn noise_with_tau_inh(&self, tau_inh: f64) -> Result<NoiseModels> {
        let contrast = match self.text("contrast_mode") {
            "table" => {
                let path = self.text("contrast_table");
                if path.is_empty() {
                    return Err(Error::Config("contrast_mode = \"table\" needs contrast_table".into()));
                }
                ContrastModel::load_table(&PathBuf::from(path))?
            }
            _ => ContrastModel::Parametric { tau_inh },
        };
        let noise = NoiseModels {
            detuning: DetuningModel {
                mean_detuning: self.real("detuning_mean"),
                std_per_cycle: self.real("detuning_std"),
            },
            contrast,
            correlation: CorrelationModel { tau_decay: self.real("tau_decay"), fit_amplitude: None },
            drift: DriftModel {
                pulse_area_drift_std: self.real("pulse_area_drift_std"),
                trap_intensity_drift_std: self.real("trap_intensity_drift_std"),
                phase_offset_drift_std: self.real("phase_offset_drift_std"),
                phase_offset_slope: self.real("phase_offset_slope"),
                drift_correlation_time: self.real("drift_correlation_time"),
                trap_light_shift: self.real("trap_light_shift"),
            },
        };
        noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(noise)
    }

    /// Campaign for `sequence` with everything but the contrast decay time
    /// taken from the settings.
    pub fn campaign(&self, sequence: SequenceSpec, tau_inh: f64) -> Result<CampaignConfig> {
        let cfg = CampaignConfig {
            n_cycles: self.int("n_cycles"),
            experiments_per_cycle: self.int("experiments_per_cycle"),
            reference_shots: self.int("reference_shots"),
            cycle_time: self.real("cycle_time"),
            atom_number: AtomNumberLaw {
                n0_mean: self.real("n_atoms"),
                n0_rel_std: self.real("n_atoms_rel_std"),
                retention: self.list("retention").to_vec(),
            },
            sequence,
            probe_duration: self.real("probe_duration"),
            timing: self.timing(),
            atom_number_photons: self.real("atom_number_photons"),
            quantization: self.quantization(),
            noise: self.noise_with_tau_inh(tau_inh)?,
            calibration: self.calibration()?,
            decoherence: self.decoherence()?,
            seed: self.u64("seed"),
            workers: self.int("workers"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Interrogation times `t_start, t_start + t_step, ... <= t_stop`.
    pub fn t_grid(&self) -> Result<Vec<f64>> {
        let (a, b, step) = (self.real("t_start"), self.real("t_stop"), self.real("t_step"));
        if !(a > 0.0 && b >= a && step > 0.0) || !b.is_finite() {
            return Err(Error::Config("scan needs 0 < t_start <= t_stop and t_step > 0".into()));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| a + step * i as f64).collect())
    }
}

fn literal(kind: Kind, v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Auto => "\"auto\"".into(),
        Value::Bool(b) => b.to_string(),
        Value::Text(s) => format!("{s:?}"),
        Value::List(xs) => format!("[{}]", xs.iter().map(|x| float(*x)).collect::<Vec<_>>().join(", ")),
        Value::Real(x) => match kind {
            Duration | DurationOrAuto if x.is_infinite() => "\"inf\"".into(),
            Duration | DurationOrAuto => format!("\"{x} s\""),
            Frequency => format!("\"{x} Hz\""),
            Angle => format!("\"{x} rad\""),
            _ => float(*x),
        },
    }
}

/// TOML float literal that reads back to the same value.
fn float(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeeze_scan_lab_defaults() {
        let s = Settings::resolve(Preset::SqueezeScan, None, &[]).unwrap();
        assert_eq!(s.int("n_cycles"), 1200);
        assert_eq!(s.int("experiments_per_cycle"), 4);
        assert_eq!(s.real("probe1_photons"), 6e6);
        assert!((s.real("probe_duration") - 10e-6).abs() < 1e-18);
        let cal = s.calibration().unwrap();
        assert!((cal.chi / 1.4907e-6 - 1.0).abs() < 1e-4, "{}", cal.chi);
        let eta = crate::measurement::decoherence_eta(6e6, &s.decoherence().unwrap()).unwrap();
        assert!((eta - 0.14).abs() < 1e-12);
    }

    #[test]
    fn units_are_required_and_converted() {
        let mut s = Settings::for_preset(Preset::SqueezeScan);
        s.apply_override("tau_decay=670us").unwrap();
        assert!((s.real("tau_decay") - 670e-6).abs() < 1e-18);
        s.apply_override("tau_decay=\"0.5 ms\"").unwrap();
        assert!((s.real("tau_decay") - 5e-4).abs() < 1e-18);
        s.apply_override("detuning_std=7.5Hz").unwrap();
        assert_eq!(s.real("detuning_std"), 7.5);
        s.apply_override("theta2=90deg").unwrap();
        assert_eq!(s.real("theta2"), std::f64::consts::FRAC_PI_2);
        s.apply_override("tau_decay=inf").unwrap();
        assert!(s.real("tau_decay").is_infinite());
        s.apply_override("cycle_time=1.5e0 s").unwrap();
        assert_eq!(s.real("cycle_time"), 1.5);

        let e = s.apply_override("tau_decay=670").unwrap_err();
        assert!(e.to_string().contains("unit"), "{e}");
        assert!(s.apply_override("tau_decay=670 parsecs").is_err());
        assert!(s.apply_override("n_cycles=-3").is_err());
        assert!(s.apply_override("shot_prefactor=eq7").is_err());
        assert!(s.apply_override("n_cycles").is_err());
        // default phase grid is exactly 2 pi / 2^16
        assert_eq!(s.real("phase_step"), TAU / 65536.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut s = Settings::for_preset(Preset::ClockSqueeze);
        match s.apply_override("n_cycels=10") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "n_cycels"),
            other => panic!("{other:?}"),
        }
        match s.apply_toml("[noise]\ntau_decai = \"1 ms\"\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "tau_decai"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layering_order() {
        let dir = std::env::temp_dir().join(format!("simclock-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "[run]\nn_cycles = 50\nseed = 9\n[atoms]\nretention = 0.7\n").unwrap();
        let s = Settings::resolve(Preset::ClockSqueeze, Some(&path), &["n_cycles=10".into()]).unwrap();
        assert_eq!(s.int("n_cycles"), 10);
        assert_eq!(s.u64("seed"), 9);
        assert_eq!(s.list("retention"), &[0.7]);
        // preset value survives where nothing overrides it
        assert_eq!(s.real("n_atoms"), 9e4);
        std::fs::remove_dir_all(&dir).unwrap();

        let empty = Settings::resolve(Preset::SqueezeScan, None, &[]).unwrap();
        let mut from_empty_file = Settings::for_preset(Preset::SqueezeScan);
        from_empty_file.apply_toml("").unwrap();
        assert_eq!(empty, from_empty_file);
    }

    #[test]
    fn resolved_echo_round_trips() {
        for preset in Preset::ALL {
            let mut s = Settings::for_preset(preset);
            s.apply_override("tau_decay=\"671.3 us\"").unwrap();
            s.apply_override("retention=[0.9, 0.8]").unwrap();
            s.apply_override("chi=1.234e-6").unwrap();
            let text = s.to_toml();
            let mut back = Settings::for_preset(preset);
            back.apply_toml(&text).unwrap();
            assert_eq!(s, back, "{preset}");
        }
        let s = Settings::for_preset(Preset::SqueezeScan);
        let mut other = Settings::for_preset(Preset::ClockSqueeze);
        assert!(other.apply_toml(&s.to_toml()).is_err());
    }

    #[test]
    fn every_preset_resolves_to_a_campaign() {
        use crate::engine::SequenceSpec;
        for preset in Preset::ALL {
            let s = Settings::for_preset(preset);
            let seq = SequenceSpec::Ramsey {
                t: s.real("interrogation_time"),
                probe1_photons: Some(s.real("probe1_photons")),
                probe2_photons: s.real("probe2_photons"),
                theta2_deg: s.real("theta2") / TAU * 360.0,
            };
            s.campaign(seq, 2e-4).unwrap();
        }
        assert_eq!("clock-squeeze".parse::<Preset>().unwrap(), Preset::ClockSqueeze);
        assert!("clock".parse::<Preset>().is_err());
    }

    #[test]
    fn t_grid_matches_scan() {
        let s = Settings::for_preset(Preset::ClockNoiseBudget);
        let g = s.t_grid().unwrap();
        assert_eq!(g.len(), 16);
        assert!((g[15] - 310e-6).abs() < 1e-15);
        let s = Settings::for_preset(Preset::FringeDecay);
        assert_eq!(s.t_grid().unwrap().len(), 18);
    }
}
