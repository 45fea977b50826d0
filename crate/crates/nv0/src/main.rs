//! Command-line front end: runs the canned measurement protocols from a TOML
//! run configuration, auto-fits the resulting datasets, and writes the
//! artifacts as CSV or JSON. Exit status 0 on success, 2 on configuration or
//! validation failure, 1 on runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nv0_orbital::config::{
    ConfigError, Freq, OutputFormat, PowerQty, RunConfig, Sweep, TimeDim, VoltDim,
};
use nv0_orbital::config::{FreqDim, PowerDim};
use nv0_orbital::experiments::{self, Dataset, NoiseModel, OpticalConfig};
use nv0_orbital::fields::{self, FieldVectorLab};
use nv0_orbital::hamiltonian::{self, NvParams};
use nv0_orbital::linalg::{hermitian_eig, OperatorMatrix};
use nv0_orbital::{DensityState, ElectrodeGeometry, FitResult, PulseSequence, Segment};

#[derive(Parser)]
#[command(
    name = "nv0",
    about = "Simulation and fitting toolkit for the NV0 orbital doublet",
    version
)]
struct Cli {
    /// Config file path, a name resolved under $NV0_CONFIG_DIR, or "default".
    #[arg(long, global = true)]
    config: Option<String>,

    /// Poisson-noise seed (overrides the config; omit for noiseless output).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file for the primary dataset (fit report goes next to it).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output format for datasets.
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// dc Stark shift of the two optical branches versus electrode voltage.
    PleScan(PleArgs),
    /// Orbital relaxation: pump, wait, read; ratio of readout amplitudes.
    T1(T1Args),
    /// Optically detected electrical resonance: PL versus drive frequency.
    Oder(OderArgs),
    /// Rabi oscillation versus resonant microwave pulse width.
    Rabi(RabiArgs),
    /// Autler-Townes doublet versus drive power, with separation-vs-sqrt(P) fit.
    SplittingMap(SplittingArgs),
    /// Ramsey fringes versus free-precession delay at a set detuning.
    Ramsey(RamseyArgs),
    /// Fit a previously emitted protocol CSV.
    Fit(FitArgs),
    /// Run the built-in physics invariant checks against the active config.
    Validate,
}

#[derive(Args)]
struct PleArgs {
    /// Voltage sweep, lo:hi:step (unit suffixes allowed).
    #[arg(long, allow_hyphen_values = true)]
    volts: Option<Sweep<VoltDim>>,
    /// Electrode to sweep.
    #[arg(long)]
    electrode: Option<String>,
}

#[derive(Args)]
struct T1Args {
    /// Wait-time sweep, lo:hi:step (e.g. 100ns:850ns:25ns).
    #[arg(long)]
    delays: Option<Sweep<TimeDim>>,
}

#[derive(Args)]
struct OderArgs {
    /// Microwave drive power (e.g. 100nW).
    #[arg(long)]
    power: Option<PowerQty>,
    /// Absolute drive-frequency sweep, lo:hi:step (e.g. 12.69GHz:12.99GHz:5MHz).
    #[arg(long)]
    freqs: Option<Sweep<FreqDim>>,
}

#[derive(Args)]
struct RabiArgs {
    /// Microwave drive power (e.g. 828uW).
    #[arg(long)]
    power: Option<PowerQty>,
    /// Pulse-width sweep, lo:hi:step (e.g. 0ns:50ns:1.25ns).
    #[arg(long)]
    widths: Option<Sweep<TimeDim>>,
}

#[derive(Args)]
struct SplittingArgs {
    /// Drive-power sweep, lo:hi:step (e.g. 0.02:0.2:0.02).
    #[arg(long)]
    powers: Option<Sweep<PowerDim>>,
    /// Laser-detuning sweep relative to the undriven line, lo:hi:step.
    #[arg(long, allow_hyphen_values = true)]
    freqs: Option<Sweep<FreqDim>>,
}

#[derive(Args)]
struct RamseyArgs {
    /// Microwave drive power for the pi/2 pulses.
    #[arg(long)]
    power: Option<PowerQty>,
    /// Drive detuning from the orbital resonance (e.g. 58MHz).
    #[arg(long)]
    detuning: Option<Freq>,
    /// Free-precession delay sweep, lo:hi:step.
    #[arg(long)]
    delays: Option<Sweep<TimeDim>>,
}

#[derive(Args)]
struct FitArgs {
    /// CSV file previously emitted by one of the scan subcommands.
    #[arg(long)]
    data: PathBuf,
    /// Override the protocol recorded in the file's metadata.
    #[arg(long)]
    protocol: Option<String>,
}

/// Runtime failure after configuration was accepted (exit 1).
#[derive(Debug)]
struct RunError(String);

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl<E: std::error::Error> From<E> for RunError {
    fn from(e: E) -> Self {
        RunError(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::resolve(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Outcome::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Outcome::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum Outcome {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for Outcome {
    fn from(e: ConfigError) -> Self {
        Outcome::Validation(e.to_string())
    }
}

impl From<RunError> for Outcome {
    fn from(e: RunError) -> Self {
        Outcome::Runtime(e.0)
    }
}

struct OutputPlan {
    base: PathBuf,
    format: OutputFormat,
}

impl OutputPlan {
    fn new(cli: &Cli, cfg: &RunConfig, protocol: &str) -> Self {
        let format = cli.format.unwrap_or(cfg.output.format);
        let base = match &cli.out {
            Some(p) => p.clone(),
            None => {
                let dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("."));
                dir.join(format!("{protocol}.{}", format.extension()))
            }
        };
        OutputPlan { base, format }
    }

    fn sibling(&self, suffix: &str, ext: &str) -> PathBuf {
        let stem = self
            .base
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        self.base.with_file_name(format!("{stem}{suffix}.{ext}"))
    }

    fn write_dataset(&self, ds: &Dataset, path: &Path) -> Result<(), RunError> {
        let text = match self.format {
            OutputFormat::Csv => ds.to_csv_string(),
            OutputFormat::Json => ds.to_json_string(),
        };
        std::fs::write(path, text)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_fit(&self, fit: &FitResult, path: &Path) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(fit)?;
        text.push('\n');
        std::fs::write(path, text)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn print_fit_summary(fit: &FitResult) {
    println!(
        "fit: {} ({}, {} iterations, residual norm {:.3e})",
        fit.model,
        if fit.converged {
            "converged"
        } else {
            "not converged"
        },
        fit.n_iterations,
        fit.residual_norm
    );
    for i in 0..fit.names.len() {
        let unit = if fit.units[i].is_empty() {
            String::new()
        } else {
            format!(" {}", fit.units[i])
        };
        println!(
            "  {:<12} = {:.6e}{unit} (stderr {:.2e})",
            fit.names[i], fit.theta[i], fit.stderr[i]
        );
    }
}

fn run(cli: &Cli, mut cfg: RunConfig) -> Result<(), Outcome> {
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    let params = cfg.params.to_nv_params()?;
    let geom = cfg.geometry.clone();
    let optical = cfg.optical.to_optical_config();
    let noise = cfg.seed.map(|seed| NoiseModel {
        seed,
        brightness: cfg.noise_brightness,
    });

    match &cli.command {
        Command::PleScan(args) => {
            if let Some(v) = &args.volts {
                cfg.ple.volts = v.clone();
            }
            if let Some(e) = &args.electrode {
                cfg.ple.electrode = e.clone();
            }
            cfg.validate()?;
            let ds = experiments::ple_scan(&params, &geom, &cfg.ple.electrode, &cfg.ple.volts.values)
                .map_err(RunError::from)?;
            emit_with_fit(cli, &cfg, "ple", &ds)?;
        }
        Command::T1(args) => {
            if let Some(d) = &args.delays {
                cfg.t1.delays = d.clone();
            }
            cfg.validate()?;
            let ds = experiments::t1_protocol(&params, &cfg.t1.delays.values, &optical, noise.as_ref())
                .map_err(RunError::from)?;
            emit_with_fit(cli, &cfg, "t1", &ds)?;
        }
        Command::Oder(args) => {
            if let Some(p) = args.power {
                cfg.oder.power = p;
            }
            if let Some(f) = &args.freqs {
                cfg.oder.freqs = Some(f.clone());
            }
            cfg.validate()?;
            let freqs = cfg.oder.frequencies(params.resonance());
            let ds = experiments::oder_scan(
                &params,
                &geom,
                cfg.oder.power.value(),
                &freqs,
                &optical,
                cfg.oder.nodes,
                noise.as_ref(),
            )
            .map_err(RunError::from)?;
            emit_with_fit(cli, &cfg, "oder", &ds)?;
        }
        Command::Rabi(args) => {
            if let Some(p) = args.power {
                cfg.rabi.power = p;
            }
            if let Some(w) = &args.widths {
                cfg.rabi.widths = w.clone();
            }
            cfg.validate()?;
            let ds = experiments::rabi_scan(
                &params,
                &geom,
                cfg.rabi.power.value(),
                &cfg.rabi.widths.values,
                &optical,
                noise.as_ref(),
            )
            .map_err(RunError::from)?;
            emit_with_fit(cli, &cfg, "rabi", &ds)?;
        }
        Command::SplittingMap(args) => {
            if let Some(p) = &args.powers {
                cfg.splitting.powers = p.clone();
            }
            if let Some(f) = &args.freqs {
                cfg.splitting.freqs = f.clone();
            }
            cfg.validate()?;
            let scan = experiments::splitting_map(
                &params,
                &geom,
                &cfg.splitting.powers.values,
                &cfg.splitting.freqs.values,
                &optical,
                noise.as_ref(),
            )
            .map_err(RunError::from)?;
            let plan = OutputPlan::new(cli, &cfg, "splitting_map");
            plan.write_dataset(&scan.map, &plan.base)?;
            plan.write_dataset(
                &scan.splitting,
                &plan.sibling("_splitting", plan.format.extension()),
            )?;
            plan.write_fit(&scan.slope_fit, &plan.sibling("_fit", "json"))?;
            print_fit_summary(&scan.slope_fit);
        }
        Command::Ramsey(args) => {
            if let Some(p) = args.power {
                cfg.ramsey.power = p;
            }
            if let Some(d) = args.detuning {
                cfg.ramsey.detuning = d;
            }
            if let Some(ds) = &args.delays {
                cfg.ramsey.delays = ds.clone();
            }
            cfg.validate()?;
            let ds = experiments::ramsey_scan(
                &params,
                &geom,
                cfg.ramsey.power.value(),
                cfg.ramsey.detuning.value(),
                &cfg.ramsey.delays.values,
                &optical,
                noise.as_ref(),
            )
            .map_err(RunError::from)?;
            emit_with_fit(cli, &cfg, "ramsey", &ds)?;
        }
        Command::Fit(args) => {
            let text = std::fs::read_to_string(&args.data).map_err(RunError::from)?;
            let mut ds = Dataset::from_csv_str(&text).map_err(RunError::from)?;
            if let Some(p) = &args.protocol {
                ds.set_meta("protocol", p);
            }
            match experiments::auto_fit(&ds).map_err(RunError::from)? {
                Some(fit) => {
                    let plan = OutputPlan::new(cli, &cfg, "fit");
                    let path = match &cli.out {
                        Some(p) => p.clone(),
                        None => args.data.with_extension("fit.json"),
                    };
                    plan.write_fit(&fit, &path)?;
                    print_fit_summary(&fit);
                }
                None => {
                    return Err(Outcome::Runtime(format!(
                        "no fit model for protocol {:?}",
                        ds.meta.get("protocol").cloned().unwrap_or_default()
                    )))
                }
            }
        }
        Command::Validate => {
            cfg.validate()?;
            let failures = run_invariant_suite(&params, &geom, &optical);
            if failures > 0 {
                return Err(Outcome::Validation(format!(
                    "{failures} invariant check(s) failed"
                )));
            }
            println!("all invariant checks passed");
        }
    }
    Ok(())
}

fn emit_with_fit(cli: &Cli, cfg: &RunConfig, protocol: &str, ds: &Dataset) -> Result<(), Outcome> {
    let plan = OutputPlan::new(cli, cfg, protocol);
    plan.write_dataset(ds, &plan.base)?;
    if let Some(fit) = experiments::auto_fit(ds).map_err(RunError::from)? {
        plan.write_fit(&fit, &plan.sibling("_fit", "json"))?;
        print_fit_summary(&fit);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Invariant suite for `validate`
// ---------------------------------------------------------------------------

fn check(name: &str, ok: bool, detail: &str) -> u32 {
    if ok {
        println!("ok   {name}");
        0
    } else {
        println!("FAIL {name}: {detail}");
        1
    }
}

fn run_invariant_suite(params: &NvParams, geom: &ElectrodeGeometry, optical: &OpticalConfig) -> u32 {
    let mut failures = 0;

    // microwave voltage amplitude for 1 uW into the line impedance
    match fields::power_to_amplitude(geom, 1e-6) {
        Ok(v) => {
            failures += check(
                "power-to-amplitude (1 uW -> 20.0 mV)",
                (v - 0.020).abs() / 0.020 < 2.5e-3,
                &format!("got {v} V"),
            );
        }
        Err(e) => failures += check("power-to-amplitude", false, &e.to_string()),
    }

    // closed-form eigenvalues against numerical diagonalization, and the
    // mixing identities, over deterministic pseudo-random parameter draws
    let mut worst_eig = 0.0f64;
    let mut worst_mix = 0.0f64;
    let mut state = 0x243f6a8885a308d3u64;
    let mut uniform = || {
        // xorshift; deterministic and dependency-free
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..200 {
        let p = NvParams {
            lambda_so: 1e9 + 9e9 * uniform(),
            eps_perp: 1e8 + 8e9 * uniform(),
            resonance_override: None,
            ..params.clone()
        };
        let e_nv = nv0_orbital::FieldVectorNv {
            e_x: 2e5 * (uniform() - 0.5),
            e_y: 2e5 * (uniform() - 0.5),
            e_z: 2e5 * (uniform() - 0.5),
        };
        let (e_plus, e_minus, mix) = match hamiltonian::eigen_closed_form(&p, &e_nv) {
            Ok(r) => r,
            Err(e) => {
                failures += check("closed-form eigenvalues", false, &e.to_string());
                continue;
            }
        };
        let h = hamiltonian::h_strain_dc(&p, &e_nv, 0.0).expect("valid params");
        let (evals, _) = hermitian_eig(&h).expect("2x2 diagonalization");
        let scale = e_plus.abs().max(e_minus.abs());
        worst_eig = worst_eig
            .max((evals[1] - e_plus).abs() / scale)
            .max((evals[0] - e_minus).abs() / scale);
        let norm = mix.alpha.norm_sqr() + mix.beta.norm_sqr();
        let (e_perp, _) = p.strain_axes_components(&e_nv);
        let ex = p.eps_perp + p.d_perp * e_perp;
        let expected = p.lambda_so / (p.lambda_so * p.lambda_so + ex * ex).sqrt();
        let imbalance_err = if e_nv.e_y.abs() < f64::EPSILON {
            (mix.population_imbalance() - expected).abs()
        } else {
            0.0 // the two-axis identity is exercised with e_y = 0 below
        };
        worst_mix = worst_mix.max((norm - 1.0).abs()).max(imbalance_err);
        // same draw restricted to the strain axis, where the imbalance
        // identity |alpha|^2 - |beta|^2 = lambda / sqrt(lambda^2 + ex^2)
        // holds exactly
        let e_axis = nv0_orbital::FieldVectorNv {
            e_y: 0.0,
            ..e_nv
        };
        if let Ok((_, _, mix2)) = hamiltonian::eigen_closed_form(&p, &e_axis) {
            let ex2 = p.eps_perp + p.d_perp * e_axis.e_x;
            let expected2 = p.lambda_so / (p.lambda_so * p.lambda_so + ex2 * ex2).sqrt();
            worst_mix = worst_mix.max((mix2.population_imbalance() - expected2).abs());
        }
    }
    failures += check(
        "closed-form vs numeric eigenvalues (200 draws, 1e-9 relative)",
        worst_eig < 1e-9,
        &format!("worst relative error {worst_eig:.3e}"),
    );
    failures += check(
        "mixing normalization and imbalance identities (1e-10)",
        worst_mix < 1e-10,
        &format!("worst deviation {worst_mix:.3e}"),
    );

    // lab->NV rotation preserves vector norms
    let mut worst_norm = 0.0f64;
    for (name, per_volt) in &geom.electrodes {
        let lab = FieldVectorLab {
            e_x: per_volt[0],
            e_y: per_volt[1],
            e_z: per_volt[2],
        };
        match fields::lab_to_nv(&lab, geom) {
            Ok(nv) => {
                worst_norm = worst_norm.max((nv.norm() - lab.norm()).abs() / lab.norm());
            }
            Err(e) => {
                failures += check(&format!("lab->NV rotation ({name})"), false, &e.to_string());
            }
        }
    }
    failures += check(
        "lab->NV rotation is norm-preserving (1e-12)",
        worst_norm < 1e-12,
        &format!("worst relative error {worst_norm:.3e}"),
    );

    // density-matrix invariants along a driven, dissipative evolution
    let power = 828e-6;
    match drive_trace_check(params, geom, optical, power) {
        Ok(()) => failures += check("density-matrix invariants under drive", true, ""),
        Err(msg) => failures += check("density-matrix invariants under drive", false, &msg),
    }

    failures
}

fn drive_trace_check(
    params: &NvParams,
    geom: &ElectrodeGeometry,
    optical: &OpticalConfig,
    power: f64,
) -> Result<(), String> {
    use nv0_orbital::dynamics::{evolve, pulse_rabi_frequency};
    let rabi = pulse_rabi_frequency(params, geom, "ac", power).map_err(|e| e.to_string())?;
    let seq = PulseSequence::new(vec![
        Segment::Readout {
            duration: optical.duration,
            pump_rate: optical.pump_rate,
            branching_back: optical.branching_back,
            bin_width: optical.bin_width,
        },
        Segment::MicrowavePulse {
            duration: 2.0 / rabi,
            power,
            frequency: params.resonance(),
            phase: 0.0,
            electrode: "ac".into(),
        },
    ]);
    let dt = (1.0 / rabi / 40.0).min(0.05 / optical.pump_rate);
    let (state, _) = evolve(&DensityState::thermal_ground(), &seq, params, geom, dt)
        .map_err(|e| e.to_string())?;
    // evolve() already enforces trace/hermiticity/positivity per step; this
    // re-checks the final state explicitly
    state
        .check_invariants(seq.total_duration())
        .map_err(|e| e.to_string())?;
    let m: &OperatorMatrix = state.matrix();
    let trace = m.trace();
    if (trace.re - 1.0).abs() > 1e-9 || trace.im.abs() > 1e-12 {
        return Err(format!("trace deviates: {trace}"));
    }
    Ok(())
}
