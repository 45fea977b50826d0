//! Run configuration: physical parameters, electrode geometry, per-protocol
//! sweep definitions, seed, and output settings, loaded from TOML.
//!
//! Every physical quantity in a config file may be written either as a bare
//! number in SI base units or as a string with a unit suffix (`"4.80 GHz"`,
//! `"30.2 ns"`, `"828 uW"`); all values are normalized to SI at parse time
//! and the rest of the crate only ever sees Hz, seconds, watts and volts.
//! Sweeps may be written as an explicit array or as an inclusive
//! `"lo:hi:step"` range string. Unknown keys and wrong-dimension suffixes
//! are rejected with the offending key path.

use std::collections::BTreeSet;
use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::experiments::OpticalConfig;
use crate::fields::ElectrodeGeometry;
use crate::hamiltonian::NvParams;

/// Environment variable naming the directory searched for config files given
/// by bare name instead of path.
pub const CONFIG_DIR_ENV: &str = "NV0_CONFIG_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation error: {0}")]
    Validation(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config file not found: {0} (also searched ${CONFIG_DIR_ENV})")]
    NotFound(String),
}

// ---------------------------------------------------------------------------
// Unit-suffixed quantities
// ---------------------------------------------------------------------------

/// A physical dimension with its accepted unit suffixes and SI scale factors.
pub trait Dimension {
    /// Human name used in error messages.
    const NAME: &'static str;
    /// Base SI unit, assumed for bare numbers.
    const BASE: &'static str;
    /// Accepted suffixes and their multipliers into the base unit.
    const UNITS: &'static [(&'static str, f64)];
}

macro_rules! dimension {
    ($ty:ident, $name:literal, $base:literal, $units:expr) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub struct $ty;
        impl Dimension for $ty {
            const NAME: &'static str = $name;
            const BASE: &'static str = $base;
            const UNITS: &'static [(&'static str, f64)] = $units;
        }
    };
}

dimension!(
    FreqDim,
    "frequency",
    "Hz",
    &[("Hz", 1.0), ("kHz", 1e3), ("MHz", 1e6), ("GHz", 1e9)]
);
dimension!(
    TimeDim,
    "time",
    "s",
    &[
        ("s", 1.0),
        ("ms", 1e-3),
        ("us", 1e-6),
        ("\u{00b5}s", 1e-6),
        ("ns", 1e-9),
        ("ps", 1e-12),
    ]
);
dimension!(
    PowerDim,
    "power",
    "W",
    &[
        ("W", 1.0),
        ("mW", 1e-3),
        ("uW", 1e-6),
        ("\u{00b5}W", 1e-6),
        ("nW", 1e-9),
    ]
);
dimension!(
    VoltDim,
    "voltage",
    "V",
    &[("V", 1.0), ("kV", 1e3), ("mV", 1e-3)]
);

fn parse_with_units<D: Dimension>(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    // split a trailing alphabetic (or micro-sign) suffix off the number
    let split = s
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_alphabetic() || *c == '\u{00b5}')
        .last()
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let (num, suffix) = s.split_at(split);
    let num = num.trim();
    let suffix = suffix.trim();
    let value: f64 = num.parse().map_err(|_| {
        format!("cannot parse {s:?} as a {} value", D::NAME)
    })?;
    for &(unit, scale) in D::UNITS {
        if suffix == unit {
            return Ok(value * scale);
        }
    }
    // a recognizable suffix from another dimension makes for a clearer error
    let known: &[&[(&str, f64)]] = &[FreqDim::UNITS, TimeDim::UNITS, PowerDim::UNITS, VoltDim::UNITS];
    for table in known {
        if table.iter().any(|&(u, _)| u == suffix) {
            return Err(format!(
                "unit mismatch: got {suffix:?} where a {} ({}) was expected",
                D::NAME,
                D::BASE
            ));
        }
    }
    Err(format!(
        "unknown unit suffix {suffix:?} for a {} value (accepted: {})",
        D::NAME,
        D::UNITS
            .iter()
            .map(|&(u, _)| u)
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

/// A scalar quantity of dimension `D`, stored in SI base units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qty<D: Dimension>(pub f64, PhantomData<D>);

impl<D: Dimension> Qty<D> {
    pub fn new(si_value: f64) -> Self {
        Qty(si_value, PhantomData)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl<D: Dimension> FromStr for Qty<D> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_with_units::<D>(s).map(Qty::new)
    }
}

impl<D: Dimension> Serialize for Qty<D> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.0)
    }
}

struct QtyVisitor<D: Dimension>(PhantomData<D>);

impl<'de, D: Dimension> Visitor<'de> for QtyVisitor<D> {
    type Value = Qty<D>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "a {} as a number in {} or a string with a unit suffix",
            D::NAME,
            D::BASE
        )
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
        Ok(Qty::new(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
        Ok(Qty::new(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
        Ok(Qty::new(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
        v.parse().map_err(E::custom)
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Qty<D> {
    fn deserialize<De: Deserializer<'de>>(deserializer: De) -> Result<Self, De::Error> {
        deserializer.deserialize_any(QtyVisitor(PhantomData))
    }
}

pub type Freq = Qty<FreqDim>;
pub type TimeQty = Qty<TimeDim>;
pub type PowerQty = Qty<PowerDim>;
pub type VoltQty = Qty<VoltDim>;

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// A sweep of dimension `D`: either explicit values or an inclusive
/// `lo:hi:step` range, normalized to SI values at parse time.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep<D: Dimension> {
    pub values: Vec<f64>,
    marker: PhantomData<D>,
}

impl<D: Dimension> Sweep<D> {
    pub fn from_values(values: Vec<f64>) -> Self {
        Sweep {
            values,
            marker: PhantomData,
        }
    }

    /// Expand an inclusive `lo:hi:step` range; each element may carry a unit
    /// suffix of the sweep's dimension.
    pub fn from_range_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!(
                "sweep range must be lo:hi:step, got {s:?}"
            ));
        }
        let lo = parse_with_units::<D>(parts[0])?;
        let hi = parse_with_units::<D>(parts[1])?;
        let step = parse_with_units::<D>(parts[2])?;
        if !(step > 0.0) || !step.is_finite() {
            return Err(format!("sweep step must be > 0, got {step}"));
        }
        if !(hi >= lo) {
            return Err(format!("sweep needs hi >= lo, got {lo}:{hi}"));
        }
        // inclusive endpoint, tolerant of floating-point step accumulation
        let n = ((hi - lo) / step + 0.5 * step.signum() * 1e-9).floor() as usize;
        let mut values = Vec::with_capacity(n + 1);
        for i in 0..=n {
            values.push(lo + step * i as f64);
        }
        if let Some(last) = values.last_mut() {
            if (*last - hi).abs() <= 1e-9 * step {
                *last = hi;
            }
        }
        Ok(Sweep::from_values(values))
    }
}

impl<D: Dimension> FromStr for Sweep<D> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sweep::from_range_str(s)
    }
}

impl<D: Dimension> Serialize for Sweep<D> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.values.serialize(serializer)
    }
}

struct SweepVisitor<D: Dimension>(PhantomData<D>);

impl<'de, D: Dimension> Visitor<'de> for SweepVisitor<D> {
    type Value = Sweep<D>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "a {} sweep: an array of values or a \"lo:hi:step\" range string",
            D::NAME
        )
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
        Sweep::from_range_str(v).map_err(E::custom)
    }

    fn visit_seq<A: de::SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
        let mut values = Vec::new();
        while let Some(q) = seq.next_element::<Qty<D>>()? {
            values.push(q.value());
        }
        Ok(Sweep::from_values(values))
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Sweep<D> {
    fn deserialize<De: Deserializer<'de>>(deserializer: De) -> Result<Self, De::Error> {
        deserializer.deserialize_any(SweepVisitor(PhantomData))
    }
}

// ---------------------------------------------------------------------------
// Config sections
// ---------------------------------------------------------------------------

/// Physical parameters as they appear in a config file. Differs from the
/// in-memory parameter struct only in accepting unit suffixes and the
/// coherence time written either as `tphi` or as `t2_star`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsSection {
    pub lambda_so: Freq,
    pub eps_perp: Freq,
    /// Axial electric susceptibility, Hz/(V/m).
    pub d_par: f64,
    /// Transverse electric susceptibility, Hz/(V/m).
    pub d_perp: f64,
    pub t1: TimeQty,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tphi: Option<TimeQty>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t2_star: Option<TimeQty>,
    pub optical_linewidth_fwhm: Freq,
    /// Radiative decay rate of the excited level, 1/s.
    pub gamma_rad: f64,
    /// Measured orbital resonance; omit to use 2*sqrt(lambda^2 + eps_perp^2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resonance: Option<Freq>,
    /// Angle between the strain eigenaxis and the NV-frame x axis, rad.
    pub strain_axis_angle: f64,
}

impl Default for ParamsSection {
    fn default() -> Self {
        let p = NvParams::measured_defaults();
        ParamsSection {
            lambda_so: Freq::new(p.lambda_so),
            eps_perp: Freq::new(p.eps_perp),
            d_par: p.d_par,
            d_perp: p.d_perp,
            t1: TimeQty::new(p.t1),
            tphi: None,
            t2_star: None,
            optical_linewidth_fwhm: Freq::new(p.optical_linewidth_fwhm),
            gamma_rad: p.gamma_rad,
            resonance: p.resonance_override.map(Freq::new),
            strain_axis_angle: p.strain_axis_angle,
        }
    }
}

impl ParamsSection {
    pub fn to_nv_params(&self) -> Result<NvParams, ConfigError> {
        let tphi = match (self.tphi, self.t2_star) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Validation(
                    "params: give either tphi or t2_star, not both".into(),
                ))
            }
            (Some(tphi), None) => tphi.value(),
            (None, Some(t2)) => {
                let t1 = self.t1.value();
                let inv = 1.0 / t2.value() - 1.0 / (2.0 * t1);
                if !(inv > 0.0) {
                    return Err(ConfigError::Validation(format!(
                        "params: t2_star = {} s is not reachable with t1 = {} s \
                         (needs t2_star < 2*t1)",
                        t2.value(),
                        t1
                    )));
                }
                1.0 / inv
            }
            // neither given: the stock dephasing time
            (None, None) => NvParams::measured_defaults().tphi,
        };
        let params = NvParams {
            lambda_so: self.lambda_so.value(),
            eps_perp: self.eps_perp.value(),
            d_par: self.d_par,
            d_perp: self.d_perp,
            t1: self.t1.value(),
            tphi,
            optical_linewidth_fwhm: self.optical_linewidth_fwhm.value(),
            gamma_rad: self.gamma_rad,
            resonance_override: self.resonance.map(|f| f.value()),
            strain_axis_angle: self.strain_axis_angle,
        };
        params
            .validate()
            .map_err(|e| ConfigError::Validation(e.to_string()))?;
        Ok(params)
    }
}

/// Laser pump/readout settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticalSection {
    pub duration: TimeQty,
    /// Optical pumping rate out of the lower orbital branch, 1/s.
    pub pump_rate: f64,
    /// Fraction of radiative decay returning to the pumped branch.
    pub branching_back: f64,
    pub bin_width: TimeQty,
}

impl Default for OpticalSection {
    fn default() -> Self {
        let o = OpticalConfig::default();
        OpticalSection {
            duration: TimeQty::new(o.duration),
            pump_rate: o.pump_rate,
            branching_back: o.branching_back,
            bin_width: TimeQty::new(o.bin_width),
        }
    }
}

impl OpticalSection {
    pub fn to_optical_config(&self) -> OpticalConfig {
        OpticalConfig {
            duration: self.duration.value(),
            pump_rate: self.pump_rate,
            branching_back: self.branching_back,
            bin_width: self.bin_width.value(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Directory for emitted artifacts; default is the working directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            format: OutputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PleSection {
    pub electrode: String,
    pub volts: Sweep<VoltDim>,
}

impl Default for PleSection {
    fn default() -> Self {
        PleSection {
            electrode: "dc".into(),
            volts: Sweep::from_range_str("-50:50:1").expect("static range"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T1Section {
    pub delays: Sweep<TimeDim>,
}

impl Default for T1Section {
    fn default() -> Self {
        T1Section {
            // starting past the fast optical transient isolates the orbital
            // relaxation exponential
            delays: Sweep::from_range_str("100ns:850ns:25ns").expect("static range"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OderSection {
    pub power: PowerQty,
    /// Absolute microwave frequency sweep; omit to scan `span` around the
    /// configured resonance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freqs: Option<Sweep<FreqDim>>,
    pub span: Freq,
    pub step: Freq,
    /// Gauss-Hermite node count for the inhomogeneous average (odd, >= 3).
    pub nodes: usize,
}

impl Default for OderSection {
    fn default() -> Self {
        OderSection {
            power: PowerQty::new(1e-7),
            freqs: None,
            span: Freq::new(300e6),
            step: Freq::new(5e6),
            nodes: 101,
        }
    }
}

impl OderSection {
    /// The microwave frequencies actually scanned.
    pub fn frequencies(&self, resonance: f64) -> Vec<f64> {
        match &self.freqs {
            Some(sweep) => sweep.values.clone(),
            None => {
                let half = 0.5 * self.span.value();
                let step = self.step.value();
                let n = (half / step).round() as i64;
                (-n..=n).map(|i| resonance + step * i as f64).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RabiSection {
    pub power: PowerQty,
    pub widths: Sweep<TimeDim>,
}

impl Default for RabiSection {
    fn default() -> Self {
        RabiSection {
            power: PowerQty::new(828e-6),
            widths: Sweep::from_range_str("0ns:50ns:1.25ns").expect("static range"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplittingSection {
    pub powers: Sweep<PowerDim>,
    /// Laser detuning sweep relative to the undriven optical line.
    pub freqs: Sweep<FreqDim>,
}

impl Default for SplittingSection {
    fn default() -> Self {
        SplittingSection {
            powers: Sweep::from_range_str("0.02:0.2:0.02").expect("static range"),
            freqs: Sweep::from_range_str("-1.5GHz:1.5GHz:25MHz").expect("static range"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RamseySection {
    pub power: PowerQty,
    pub detuning: Freq,
    pub delays: Sweep<TimeDim>,
}

impl Default for RamseySection {
    fn default() -> Self {
        RamseySection {
            power: PowerQty::new(828e-6),
            detuning: Freq::new(58e6),
            delays: Sweep::from_range_str("0ns:100ns:1.25ns").expect("static range"),
        }
    }
}

fn default_noise_brightness() -> f64 {
    1e4
}

/// Complete run configuration for the command-line tool.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub params: ParamsSection,
    pub geometry: ElectrodeGeometry,
    pub optical: OpticalSection,
    /// Poisson-noise seed; omit for noiseless output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Expected photon count at unit signal when Poisson noise is on.
    #[serde(default = "default_noise_brightness")]
    pub noise_brightness: f64,
    pub output: OutputSection,
    pub ple: PleSection,
    pub t1: T1Section,
    pub oder: OderSection,
    pub rabi: RabiSection,
    pub splitting: SplittingSection,
    pub ramsey: RamseySection,
}

impl Default for ElectrodeGeometry {
    fn default() -> Self {
        ElectrodeGeometry::measured_defaults()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: ParamsSection::default(),
            geometry: ElectrodeGeometry::default(),
            optical: OpticalSection::default(),
            seed: None,
            noise_brightness: default_noise_brightness(),
            output: OutputSection::default(),
            ple: PleSection::default(),
            t1: T1Section::default(),
            oder: OderSection::default(),
            rabi: RabiSection::default(),
            splitting: SplittingSection::default(),
            ramsey: RamseySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    /// Resolve a `--config` argument: absent or `"default"` yields built-in
    /// defaults; otherwise the argument is tried as a path, then as a name
    /// (with and without `.toml`) under the directory named by
    /// `NV0_CONFIG_DIR`.
    pub fn resolve(arg: Option<&str>) -> Result<Self, ConfigError> {
        let arg = match arg {
            None | Some("default") => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                return Ok(cfg);
            }
            Some(a) => a,
        };
        let direct = Path::new(arg);
        if direct.is_file() {
            return Self::load(direct);
        }
        if let Ok(dir) = std::env::var(CONFIG_DIR_ENV) {
            for candidate in [
                PathBuf::from(&dir).join(arg),
                PathBuf::from(&dir).join(format!("{arg}.toml")),
            ] {
                if candidate.is_file() {
                    return Self::load(&candidate);
                }
            }
        }
        Err(ConfigError::NotFound(arg.to_string()))
    }

    /// Check cross-field invariants: parameters and geometry are physical,
    /// referenced electrodes exist, sweeps are nonempty.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params.to_nv_params()?;
        self.geometry
            .validate()
            .map_err(|e| ConfigError::Validation(e.to_string()))?;
        let names: BTreeSet<_> = self.geometry.electrodes.keys().cloned().collect();
        for (what, electrode) in [("ple.electrode", self.ple.electrode.as_str()), ("drive", "ac")]
        {
            if !names.contains(electrode) {
                return Err(ConfigError::Validation(format!(
                    "{what}: electrode {electrode:?} not in geometry (have: {})",
                    names.iter().cloned().collect::<Vec<_>>().join(", ")
                )));
            }
        }
        let sweeps: [(&str, usize); 6] = [
            ("ple.volts", self.ple.volts.values.len()),
            ("t1.delays", self.t1.delays.values.len()),
            (
                "oder frequencies",
                self.oder.frequencies(1.0).len(),
            ),
            ("rabi.widths", self.rabi.widths.values.len()),
            ("splitting.powers", self.splitting.powers.values.len()),
            ("ramsey.delays", self.ramsey.delays.values.len()),
        ];
        for (name, len) in sweeps {
            if len == 0 {
                return Err(ConfigError::Validation(format!("{name}: sweep is empty")));
            }
        }
        if self.splitting.freqs.values.is_empty() {
            return Err(ConfigError::Validation(
                "splitting.freqs: sweep is empty".into(),
            ));
        }
        if self.oder.nodes < 3 || self.oder.nodes % 2 == 0 {
            return Err(ConfigError::Validation(format!(
                "oder.nodes must be odd and >= 3, got {}",
                self.oder.nodes
            )));
        }
        if !(self.oder.power.value() >= 0.0)
            || !(self.rabi.power.value() >= 0.0)
            || !(self.ramsey.power.value() > 0.0)
        {
            return Err(ConfigError::Validation(
                "drive powers must be nonnegative (ramsey strictly positive)".into(),
            ));
        }
        if self.splitting.powers.values.iter().any(|&p| p < 0.0) {
            return Err(ConfigError::Validation(
                "splitting.powers must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}
