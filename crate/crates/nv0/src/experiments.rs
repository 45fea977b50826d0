//! Canned reproductions of the measurement protocols, each emitting a
//! [`Dataset`]: dc Stark shift of the optical lines, orbital T1 recovery,
//! optically detected electrical resonance, Autler-Townes splitting power
//! map, Rabi time scan, and Ramsey interference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::dynamics::{
    collapse_set, drive_hamiltonian, evolve, inhomogeneous_average, pulse_rabi_frequency,
    steady_state, DensityState, DynamicsError, OpticalPumping, PulseSequence, Segment,
};
use crate::estimation::{dominant_frequency, fit, models, FitError, FitResult};
use crate::fields::{self, ElectrodeGeometry, FieldError};
use crate::hamiltonian::{self, HamiltonianError, NvParams};
use crate::linalg::{BasisTag, OperatorMatrix};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error("empty sweep: {0}")]
    EmptySweep(&'static str),
    #[error("dataset parse error at line {line}: {what}")]
    Parse { line: usize, what: String },
}

/// One named column of a scan result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub label: String,
    pub unit: String,
    pub values: Vec<f64>,
}

/// x-y(s) scan data with metadata. 2D maps carry one column per sweep line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x_label: String,
    pub x_unit: String,
    pub x: Vec<f64>,
    pub columns: Vec<Column>,
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(x_label: &str, x_unit: &str, x: Vec<f64>) -> Self {
        Dataset {
            x_label: x_label.to_string(),
            x_unit: x_unit.to_string(),
            x,
            columns: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn push_column(&mut self, label: &str, unit: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.x.len(), "column length mismatch");
        self.columns.push(Column {
            label: label.to_string(),
            unit: unit.to_string(),
            values,
        });
    }

    pub fn column(&self, label: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.label == label)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    /// CSV form: `# key = value` metadata lines, a header row of
    /// `label [unit]` cells, then one row per x value. Floats use shortest
    /// round-trip formatting, so parse(to_csv()) reproduces the dataset
    /// exactly and re-serializing is byte-identical.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        let header: Vec<String> = std::iter::once(format!("{} [{}]", self.x_label, self.x_unit))
            .chain(self.columns.iter().map(|c| format!("{} [{}]", c.label, c.unit)))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, &x) in self.x.iter().enumerate() {
            let mut row = vec![format!("{x}")];
            for c in &self.columns {
                row.push(format!("{}", c.values[i]));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(s: &str) -> Result<Self, ExperimentError> {
        let mut meta = BTreeMap::new();
        let mut lines = s.lines().enumerate().peekable();
        while let Some((_, line)) = lines.peek() {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once(" = ") {
                    meta.insert(k.to_string(), v.to_string());
                }
                lines.next();
            } else {
                break;
            }
        }
        let (hline, header) = lines.next().ok_or(ExperimentError::Parse {
            line: 0,
            what: "missing header".into(),
        })?;
        let parse_cell = |cell: &str| -> (String, String) {
            match cell.rfind(" [") {
                Some(pos) if cell.ends_with(']') => (
                    cell[..pos].to_string(),
                    cell[pos + 2..cell.len() - 1].to_string(),
                ),
                _ => (cell.to_string(), String::new()),
            }
        };
        let cells: Vec<&str> = header.split(',').collect();
        if cells.is_empty() {
            return Err(ExperimentError::Parse {
                line: hline + 1,
                what: "empty header".into(),
            });
        }
        let (x_label, x_unit) = parse_cell(cells[0]);
        let col_specs: Vec<(String, String)> = cells[1..].iter().map(|c| parse_cell(c)).collect();
        let mut x = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); col_specs.len()];
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != col_specs.len() + 1 {
                return Err(ExperimentError::Parse {
                    line: lineno + 1,
                    what: format!("expected {} cells, got {}", col_specs.len() + 1, vals.len()),
                });
            }
            let parse = |v: &str| -> Result<f64, ExperimentError> {
                v.parse().map_err(|e| ExperimentError::Parse {
                    line: lineno + 1,
                    what: format!("bad number {v:?}: {e}"),
                })
            };
            x.push(parse(vals[0])?);
            for (j, v) in vals[1..].iter().enumerate() {
                cols[j].push(parse(v)?);
            }
        }
        let columns = col_specs
            .into_iter()
            .zip(cols)
            .map(|((label, unit), values)| Column {
                label,
                unit,
                values,
            })
            .collect();
        Ok(Dataset {
            x_label,
            x_unit,
            x,
            columns,
            meta,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }
}

/// Poisson shot noise on count-like columns; rate * brightness is the
/// expected photon number per point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub seed: u64,
    pub brightness: f64,
}

fn apply_poisson(values: &mut [f64], noise: &NoiseModel, stream: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15));
    for v in values.iter_mut() {
        let mean = (*v * noise.brightness).max(0.0);
        if mean > 0.0 {
            let pois = Poisson::new(mean).expect("positive mean");
            *v = pois.sample(&mut rng) / noise.brightness;
        }
    }
}

/// Laser pump/readout settings shared by the pulsed protocols.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OpticalConfig {
    pub duration: f64,
    pub pump_rate: f64,
    pub branching_back: f64,
    pub bin_width: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        OpticalConfig {
            duration: 500e-9,
            pump_rate: 3e8,
            branching_back: 0.1,
            bin_width: 30e-9,
        }
    }
}

impl OpticalConfig {
    fn readout(&self) -> Segment {
        Segment::Readout {
            duration: self.duration,
            pump_rate: self.pump_rate,
            branching_back: self.branching_back,
            bin_width: self.bin_width,
        }
    }

    fn bins_per_readout(&self) -> usize {
        (self.duration / self.bin_width).ceil().max(1.0) as usize
    }

    /// Ratio of the background-subtracted first-bin amplitudes of the second
    /// and first readouts. The late bins of each readout sit at the steady
    /// pumping floor (T1 refill keeps a constant photoluminescence rate), so
    /// first - last isolates the part proportional to the initial ground
    /// population.
    fn readout_contrast(&self, counts_rate: &[f64]) -> f64 {
        let n = self.bins_per_readout();
        let a = counts_rate[0] - counts_rate[n - 1];
        let b = counts_rate[n] - counts_rate[2 * n - 1];
        b / a
    }
}

/// Integration step for the pulsed protocols: comfortably inside the
/// stability bound and the optical rates.
fn protocol_dt(params: &NvParams, max_rabi: f64, optical: &OpticalConfig) -> f64 {
    let mut scale = params.t1.min(params.tphi);
    if max_rabi > 0.0 {
        scale = scale.min(1.0 / max_rabi);
    }
    let bound = scale / 20.0;
    bound
        .min(0.1 / optical.pump_rate.max(1.0))
        .min(0.1 / params.gamma_rad)
}

fn meta_common(ds: &mut Dataset, protocol: &str, params: &NvParams) {
    ds.set_meta("protocol", protocol);
    ds.set_meta("lambda_so_hz", params.lambda_so);
    ds.set_meta("eps_perp_hz", params.eps_perp);
    ds.set_meta("d_par_hz_per_v_m", params.d_par);
    ds.set_meta("d_perp_hz_per_v_m", params.d_perp);
    ds.set_meta("t1_s", params.t1);
    ds.set_meta("tphi_s", params.tphi);
    ds.set_meta("resonance_hz", params.resonance());
}

/// dc Stark scan of the two optical transition frequencies (relative to the
/// zero-splitting line center) and their difference, versus applied voltage.
pub fn ple_scan(
    params: &NvParams,
    geom: &ElectrodeGeometry,
    electrode: &str,
    volts: &[f64],
) -> Result<Dataset, ExperimentError> {
    if volts.is_empty() {
        return Err(ExperimentError::EmptySweep("volts"));
    }
    params.validate()?;
    let mut f_lower = Vec::with_capacity(volts.len());
    let mut f_upper = Vec::with_capacity(volts.len());
    let mut diff = Vec::with_capacity(volts.len());
    for &v in volts {
        let lab = fields::electrode_field(geom, electrode, v)?;
        let nv = fields::lab_to_nv(&lab, geom)?;
        let (e_plus, e_minus, _) = hamiltonian::eigen_closed_form(params, &nv)?;
        // transition from the lower ground branch (energy E-) sits at the
        // higher optical frequency
        f_lower.push(-e_minus);
        f_upper.push(-e_plus);
        diff.push(e_plus - e_minus);
    }
    let mut ds = Dataset::new("voltage", "V", volts.to_vec());
    ds.push_column("f_branch0", "Hz", f_lower);
    ds.push_column("f_branch1", "Hz", f_upper);
    ds.push_column("difference", "Hz", diff);
    meta_common(&mut ds, "ple", params);
    ds.set_meta("electrode", electrode);
    let nv_per_volt = fields::lab_to_nv(&fields::electrode_field(geom, electrode, 1.0)?, geom)?;
    ds.set_meta("ex_per_volt_v_m", nv_per_volt.e_x);
    ds.set_meta("ey_per_volt_v_m", nv_per_volt.e_y);
    ds.set_meta("ez_per_volt_v_m", nv_per_volt.e_z);
    Ok(ds)
}

/// Pump-wait-read protocol: the ratio of first-bin photoluminescence rates
/// of the two readout pulses versus the wait time.
pub fn t1_protocol(
    params: &NvParams,
    delays: &[f64],
    optical: &OpticalConfig,
    noise: Option<&NoiseModel>,
) -> Result<Dataset, ExperimentError> {
    if delays.is_empty() {
        return Err(ExperimentError::EmptySweep("delays"));
    }
    params.validate()?;
    let geom = ElectrodeGeometry::measured_defaults(); // no microwave segment; geometry unused
    let dt = protocol_dt(params, 0.0, optical);
    let ratios: Vec<Result<f64, ExperimentError>> = delays
        .par_iter()
        .map(|&delay| {
            let seq = PulseSequence::new(vec![
                optical.readout(),
                Segment::Wait { duration: delay },
                optical.readout(),
            ]);
            let (_, trace) = evolve(&DensityState::thermal_ground(), &seq, params, &geom, dt)?;
            Ok(optical.readout_contrast(&trace.counts_rate))
        })
        .collect();
    let mut y = Vec::with_capacity(delays.len());
    for r in ratios {
        y.push(r?);
    }
    if let Some(nm) = noise {
        apply_poisson(&mut y, nm, 1);
    }
    let mut ds = Dataset::new("delay", "s", delays.to_vec());
    ds.push_column("ratio", "", y);
    meta_common(&mut ds, "t1", params);
    ds.set_meta("pump_rate_hz", optical.pump_rate);
    ds.set_meta("readout_duration_s", optical.duration);
    if let Some(nm) = noise {
        ds.set_meta("seed", nm.seed);
    }
    Ok(ds)
}

fn radiative_collapses(params: &NvParams, branching_back: f64) -> Vec<(OperatorMatrix, f64)> {
    vec![
        (
            OperatorMatrix::ketbra(3, 0, 2, BasisTag::Levels012),
            params.gamma_rad * branching_back,
        ),
        (
            OperatorMatrix::ketbra(3, 1, 2, BasisTag::Levels012),
            params.gamma_rad * (1.0 - branching_back),
        ),
    ]
}

/// Optically detected electrical resonance: continuous weak readout with a
/// simultaneous microwave drive, photoluminescence from the steady state per
/// drive frequency, averaged over the inhomogeneous splitting distribution.
pub fn oder_scan(
    params: &NvParams,
    geom: &ElectrodeGeometry,
    drive_power: f64,
    freqs: &[f64],
    optical: &OpticalConfig,
    n_nodes: usize,
    noise: Option<&NoiseModel>,
) -> Result<Dataset, ExperimentError> {
    if freqs.is_empty() {
        return Err(ExperimentError::EmptySweep("freqs"));
    }
    params.validate()?;
    let rabi = pulse_rabi_frequency(params, geom, "ac", drive_power)?;
    let resonance = params.resonance();
    let base = collapse_set(
        params,
        Some(OpticalPumping {
            pump_rate: optical.pump_rate,
            branching_back: optical.branching_back,
        }),
    )?;
    let run = |offset: f64| -> Vec<f64> {
        freqs
            .par_iter()
            .map(|&f| {
                let delta = resonance + offset - f;
                let h = drive_hamiltonian(delta, rabi, 0.0);
                match steady_state(&h, &base) {
                    Ok(ss) => params.gamma_rad * ss.population(2),
                    Err(_) => f64::NAN,
                }
            })
            .collect()
    };
    let mut y = inhomogeneous_average(run, params.optical_linewidth_fwhm, n_nodes)?;
    if let Some(nm) = noise {
        apply_poisson(&mut y, nm, 2);
    }
    let mut ds = Dataset::new("drive_frequency", "Hz", freqs.to_vec());
    ds.push_column("pl_rate", "Hz", y);
    meta_common(&mut ds, "oder", params);
    ds.set_meta("drive_power_w", drive_power);
    ds.set_meta("rabi_frequency_hz", rabi);
    ds.set_meta("n_nodes", n_nodes);
    if let Some(nm) = noise {
        ds.set_meta("seed", nm.seed);
    }
    Ok(ds)
}

/// Gaussian optical line profile, peak 1.
fn line_profile(detuning: f64, fwhm: f64) -> f64 {
    if fwhm <= 0.0 {
        return 1.0;
    }
    let sigma2 = fwhm * fwhm / (8.0 * std::f64::consts::LN_2);
    (-detuning * detuning / (2.0 * sigma2)).exp()
}

/// Photoluminescence spectrum against the laser detuning under a resonant
/// drive of the given Rabi frequency. The drive dresses the ground
/// branches, so the optical line splits into a doublet at +-f_R/2; optical
/// excitation is modeled as incoherent pumping out of each dressed state
/// weighted by its |0> content and the spectral line profile.
fn dressed_spectrum(
    params: &NvParams,
    rabi: f64,
    optical_detunings: &[f64],
    optical: &OpticalConfig,
) -> Result<Vec<f64>, ExperimentError> {
    let h = drive_hamiltonian(0.0, rabi, 0.0);
    // diagonalize the ground 2x2 block only; the excited level sits at zero
    // energy in the rotating frame and must not be mistaken for a dressed
    // ground state
    let mut ground = OperatorMatrix::zeros(2, BasisTag::Levels012);
    for i in 0..2 {
        for j in 0..2 {
            ground[(i, j)] = h[(i, j)];
        }
    }
    let (evals, vecs) = crate::linalg::hermitian_eig(&ground)?;
    let base = collapse_set(params, None)?;
    let fwhm = params.optical_linewidth_fwhm;
    optical_detunings
        .par_iter()
        .map(|&det| {
            let mut collapses = base.clone();
            collapses.extend(radiative_collapses(params, optical.branching_back));
            for k in 0..2 {
                // dressed ground state |g_k> at energy evals[k]
                let weight = vecs[(0, k)].norm_sqr();
                let rate = optical.pump_rate * weight * line_profile(det - evals[k], fwhm);
                if rate <= 0.0 {
                    continue;
                }
                let mut op = OperatorMatrix::zeros(3, BasisTag::Levels012);
                for i in 0..2 {
                    op[(2, i)] = vecs[(i, k)].conj();
                }
                collapses.push((op, rate));
            }
            let ss = steady_state(&h, &collapses)?;
            Ok(params.gamma_rad * ss.population(2))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SplittingScan {
    /// 2D PL map: x = laser detuning, one column per power.
    pub map: Dataset,
    /// Extracted peak separation vs sqrt(power); unresolved points carry
    /// resolved = 0 and are excluded from the slope fit.
    pub splitting: Dataset,
    /// Linear fit of separation (Hz) against sqrt(P) in sqrt(W).
    pub slope_fit: FitResult,
}

/// Autler-Townes splitting map: for each microwave power, the dressed-state
/// doublet in the optical line; peak separations from a two-Gaussian fit and
/// a linear fit of separation versus sqrt(power).
pub fn splitting_map(
    params: &NvParams,
    geom: &ElectrodeGeometry,
    powers: &[f64],
    freqs: &[f64],
    optical: &OpticalConfig,
    noise: Option<&NoiseModel>,
) -> Result<SplittingScan, ExperimentError> {
    if powers.is_empty() {
        return Err(ExperimentError::EmptySweep("powers"));
    }
    if freqs.is_empty() {
        return Err(ExperimentError::EmptySweep("freqs"));
    }
    params.validate()?;
    let mut map = Dataset::new("laser_detuning", "Hz", freqs.to_vec());
    meta_common(&mut map, "splitting_map", params);

    let mut sqrt_p = Vec::new();
    let mut separations = Vec::new();
    let mut resolved_flags = Vec::new();
    for (pi, &power) in powers.iter().enumerate() {
        let rabi = pulse_rabi_frequency(params, geom, "ac", power)?;
        let mut spec = dressed_spectrum(params, rabi, freqs, optical)?;
        if let Some(nm) = noise {
            apply_poisson(&mut spec, nm, 100 + pi as u64);
        }
        // two-Gaussian fit; graceful when the peaks merge
        let max = spec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = spec.iter().cloned().fold(f64::INFINITY, f64::min);
        let guess_sep = rabi.max((freqs[freqs.len() - 1] - freqs[0]) / 20.0);
        let model = models::double_gaussian_line();
        let guess = [
            max - min,
            -0.5 * guess_sep,
            max - min,
            0.5 * guess_sep,
            params.optical_linewidth_fwhm.max(guess_sep / 4.0),
            min,
        ];
        let fitres = fit(&model, freqs, &spec, &guess)?;
        let sep = (fitres.theta[3] - fitres.theta[1]).abs();
        let fwhm_fit = fitres.theta[4].abs();
        // resolved only when two genuine peaks of comparable weight sit at
        // least a linewidth apart with a real valley between them; a merged
        // line either fits as one strong Gaussian plus a stray low-amplitude
        // one or shows no dip at the fitted midpoint
        let (a1, a2) = (fitres.theta[0], fitres.theta[2]);
        let balanced = a1 > 0.0 && a2 > 0.0 && a1.min(a2) >= 0.2 * a1.max(a2);
        let nearest = |f: f64| -> Option<f64> {
            let lo = freqs[0].min(freqs[freqs.len() - 1]);
            let hi = freqs[0].max(freqs[freqs.len() - 1]);
            if f < lo || f > hi {
                return None;
            }
            freqs
                .iter()
                .zip(&spec)
                .min_by(|x, y| (x.0 - f).abs().total_cmp(&(y.0 - f).abs()))
                .map(|(_, &v)| v)
        };
        let offset = fitres.theta[5];
        let valley = match (
            nearest(fitres.theta[1]),
            nearest(fitres.theta[3]),
            nearest(0.5 * (fitres.theta[1] + fitres.theta[3])),
        ) {
            (Some(p1), Some(p2), Some(mid)) => {
                let floor = (p1 - offset).min(p2 - offset);
                floor > 0.0 && (mid - offset) < 0.9 * floor
            }
            _ => false,
        };
        let resolved = fitres.converged && balanced && valley && sep >= fwhm_fit;
        map.push_column(&format!("pl_power_{pi}"), "Hz", spec);
        sqrt_p.push(power.sqrt());
        separations.push(sep);
        resolved_flags.push(if resolved { 1.0 } else { 0.0 });
    }
    map.set_meta("powers_w", format!("{powers:?}"));

    let fit_x: Vec<f64> = sqrt_p
        .iter()
        .zip(&resolved_flags)
        .filter(|(_, &r)| r > 0.0)
        .map(|(&x, _)| x)
        .collect();
    let fit_y: Vec<f64> = separations
        .iter()
        .zip(&resolved_flags)
        .filter(|(_, &r)| r > 0.0)
        .map(|(&y, _)| y)
        .collect();
    let slope_guess = if !fit_x.is_empty() {
        fit_y[fit_y.len() - 1] / fit_x[fit_x.len() - 1].max(1e-12)
    } else {
        1.0
    };
    let slope_fit = fit(&models::linear_origin(), &fit_x, &fit_y, &[slope_guess])?;

    let mut splitting = Dataset::new("sqrt_power", "sqrt(W)", sqrt_p);
    splitting.push_column("separation", "Hz", separations);
    splitting.push_column("resolved", "", resolved_flags);
    meta_common(&mut splitting, "splitting", params);
    splitting.set_meta("slope_hz_per_sqrt_w", slope_fit.theta[0]);

    Ok(SplittingScan {
        map,
        splitting,
        slope_fit,
    })
}

/// Rabi time scan: pump, resonant microwave pulse of variable width, read.
/// Counts are normalized to the first readout.
pub fn rabi_scan(
    params: &NvParams,
    geom: &ElectrodeGeometry,
    power: f64,
    widths: &[f64],
    optical: &OpticalConfig,
    noise: Option<&NoiseModel>,
) -> Result<Dataset, ExperimentError> {
    if widths.is_empty() {
        return Err(ExperimentError::EmptySweep("widths"));
    }
    params.validate()?;
    let rabi = pulse_rabi_frequency(params, geom, "ac", power)?;
    let dt = protocol_dt(params, rabi, optical);
    let results: Vec<Result<f64, ExperimentError>> = widths
        .par_iter()
        .map(|&w| {
            let seq = PulseSequence::new(vec![
                optical.readout(),
                Segment::MicrowavePulse {
                    duration: w,
                    power,
                    frequency: params.resonance(),
                    phase: 0.0,
                    electrode: "ac".into(),
                },
                optical.readout(),
            ]);
            let (_, trace) = evolve(&DensityState::thermal_ground(), &seq, params, geom, dt)?;
            Ok(optical.readout_contrast(&trace.counts_rate))
        })
        .collect();
    let mut y = Vec::with_capacity(widths.len());
    for r in results {
        y.push(r?);
    }
    if let Some(nm) = noise {
        apply_poisson(&mut y, nm, 3);
    }
    let mut ds = Dataset::new("pulse_width", "s", widths.to_vec());
    ds.push_column("ratio", "", y);
    meta_common(&mut ds, "rabi", params);
    ds.set_meta("drive_power_w", power);
    ds.set_meta("rabi_frequency_hz", rabi);
    if let Some(nm) = noise {
        ds.set_meta("seed", nm.seed);
    }
    Ok(ds)
}

/// Ramsey interference: two pi/2 pulses separated by a variable free
/// precession time, with the drive detuned from the orbital resonance.
pub fn ramsey_scan(
    params: &NvParams,
    geom: &ElectrodeGeometry,
    power: f64,
    detuning: f64,
    delays: &[f64],
    optical: &OpticalConfig,
    noise: Option<&NoiseModel>,
) -> Result<Dataset, ExperimentError> {
    if delays.is_empty() {
        return Err(ExperimentError::EmptySweep("delays"));
    }
    params.validate()?;
    let rabi = pulse_rabi_frequency(params, geom, "ac", power)?;
    let f_drive = params.resonance() - detuning;
    let pi_half = 1.0 / (4.0 * rabi);
    let dt = protocol_dt(params, rabi, optical);
    let pulse = |dur: f64| Segment::MicrowavePulse {
        duration: dur,
        power,
        frequency: f_drive,
        phase: 0.0,
        electrode: "ac".into(),
    };
    // phase cycling: repeat each point with the second pulse phase-shifted
    // by pi and take the difference, which cancels every incoherent
    // background (populations and leftover excited-state decay are identical
    // in both halves) and leaves a pure damped fringe
    let results: Vec<Result<f64, ExperimentError>> = delays
        .par_iter()
        .map(|&tau| {
            let mut halves = [0.0; 2];
            for (k, phase2) in [0.0, std::f64::consts::PI].iter().enumerate() {
                let mut second = pulse(pi_half);
                if let Segment::MicrowavePulse { phase, .. } = &mut second {
                    *phase = *phase2;
                }
                let seq = PulseSequence::new(vec![
                    optical.readout(),
                    pulse(pi_half),
                    Segment::Wait { duration: tau },
                    second,
                    optical.readout(),
                ]);
                let (_, trace) = evolve(&DensityState::thermal_ground(), &seq, params, geom, dt)?;
                halves[k] = optical.readout_contrast(&trace.counts_rate);
            }
            Ok(halves[0] - halves[1])
        })
        .collect();
    let mut y = Vec::with_capacity(delays.len());
    for r in results {
        y.push(r?);
    }
    if let Some(nm) = noise {
        apply_poisson(&mut y, nm, 4);
    }
    let mut ds = Dataset::new("free_precession", "s", delays.to_vec());
    ds.push_column("ratio", "", y);
    meta_common(&mut ds, "ramsey", params);
    ds.set_meta("drive_power_w", power);
    ds.set_meta("detuning_hz", detuning);
    ds.set_meta("pi_half_width_s", pi_half);
    if let Some(nm) = noise {
        ds.set_meta("seed", nm.seed);
    }
    Ok(ds)
}

/// Unattended fit of a protocol dataset with the matching model and
/// heuristic initial guesses. Returns None for protocols without a canned
/// single-curve model (the splitting map fits internally).
pub fn auto_fit(ds: &Dataset) -> Result<Option<FitResult>, ExperimentError> {
    let protocol = ds.meta.get("protocol").map(String::as_str).unwrap_or("");
    let x = &ds.x;
    match protocol {
        "t1" => {
            let y = &ds.column("ratio").expect("t1 has ratio column").values;
            let y0 = y[0];
            let y_end = y[y.len() - 1];
            let b = y_end - 1.0;
            let a = 1.0 + b - y0;
            let span = x[x.len() - 1] - x[0];
            let model = models::t1_recovery();
            let res = fit(&model, x, y, &[a, span / 5.0, b])?;
            Ok(Some(res))
        }
        "rabi" | "ramsey" => {
            let y = &ds.column("ratio").expect("ratio column").values;
            let span = (x[x.len() - 1] - x[0]).max(1e-12);
            let dx = span / (x.len() as f64 - 1.0).max(1.0);
            let f0 = dominant_frequency(x, y, 0.5 / span, 0.45 / dx);
            let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let model = models::damped_sine();
            // multi-start on the phase; keep the best converged fit
            let mut best: Option<FitResult> = None;
            for k in 0..4 {
                let phase = k as f64 * std::f64::consts::FRAC_PI_2;
                let guess = [
                    0.5 * (max - min),
                    2.0 * std::f64::consts::PI * f0,
                    phase,
                    span / 2.0,
                    mean,
                ];
                if let Ok(res) = fit(&model, x, y, &guess) {
                    let better = match &best {
                        None => true,
                        Some(b) => res.residual_norm < b.residual_norm,
                    };
                    if better {
                        best = Some(res);
                    }
                }
            }
            Ok(best)
        }
        "oder" => {
            // driving the resonance removes population from the bright state,
            // so the feature is a dip in the photoluminescence rate
            let y = &ds.column("pl_rate").expect("pl_rate column").values;
            let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let dip = max - mean < mean - min;
            let extremum = if dip { min } else { max };
            let center = x[y
                .iter()
                .enumerate()
                .find(|(_, &v)| v == extremum)
                .map(|(i, _)| i)
                .unwrap_or(0)];
            let span = x[x.len() - 1] - x[0];
            let (amp, offset) = if dip { (min - max, max) } else { (max - min, min) };
            let model = models::gaussian_line();
            let res = fit(&model, x, y, &[amp, center, span / 5.0, offset])?;
            Ok(Some(res))
        }
        "ple" => {
            let y = &ds.column("difference").expect("difference column").values;
            let ex: f64 = ds
                .meta
                .get("ex_per_volt_v_m")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0.0);
            let ey: f64 = ds
                .meta
                .get("ey_per_volt_v_m")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0.0);
            let lambda: f64 = ds
                .meta
                .get("lambda_so_hz")
                .and_then(|s| s.parse().ok())
                .unwrap_or(4.80e9);
            let model = models::splitting_hyperbola(ex, ey).with_fixed(&["lambda"]);
            let min_diff = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let eps_guess = ((min_diff / 2.0).powi(2) - lambda * lambda)
                .max(0.0)
                .sqrt()
                .max(0.01 * lambda);
            let res = fit(&model, x, y, &[lambda, eps_guess, 1e3])?;
            Ok(Some(res))
        }
        _ => Ok(None),
    }
}
