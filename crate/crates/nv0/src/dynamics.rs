//! Open-system evolution of the effective three-level system: ground
//! orbital branches |0>, |1> and the optically excited level |2>.
//!
//! All integration happens in the rotating frame of the microwave drive so
//! the GHz-scale splitting never enters the integrator; only the detuning
//! does. Optical coherences are dropped: the laser enters as incoherent
//! pump and decay rates.

use num_complex::Complex64;
use thiserror::Error;

use crate::fields::{self, ElectrodeGeometry, FieldError, FieldVectorNv};
use crate::hamiltonian::{self, HamiltonianError, NvParams};
use crate::linalg::{hermitian_eig, BasisTag, LinalgError, OperatorMatrix};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("time step {dt:.3e} s exceeds the stability bound {bound:.3e} s")]
    StepTooLarge { dt: f64, bound: f64 },
    #[error("density-matrix invariant breached at t = {time:.3e} s: {what}")]
    InvariantBreach { time: f64, what: String },
    #[error("invalid pulse sequence: {0}")]
    BadSequence(String),
    #[error("quadrature node count {0} must be odd and >= 3")]
    BadNodeCount(usize),
    #[error("steady-state system is singular")]
    SingularSteadyState,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// 3x3 density matrix over the levels |0>, |1>, |2>.
#[derive(Debug, Clone)]
pub struct DensityState {
    rho: OperatorMatrix,
}

impl DensityState {
    pub fn new(rho: OperatorMatrix) -> Result<Self, DynamicsError> {
        let state = DensityState { rho };
        state.check_invariants(0.0)?;
        Ok(state)
    }

    /// Thermal mixture of the two ground branches.
    pub fn thermal_ground() -> Self {
        let mut rho = OperatorMatrix::zeros(3, BasisTag::Levels012);
        rho[(0, 0)] = Complex64::new(0.5, 0.0);
        rho[(1, 1)] = Complex64::new(0.5, 0.0);
        DensityState { rho }
    }

    pub fn pure(level: usize) -> Self {
        let mut rho = OperatorMatrix::zeros(3, BasisTag::Levels012);
        rho[(level, level)] = Complex64::new(1.0, 0.0);
        DensityState { rho }
    }

    pub fn matrix(&self) -> &OperatorMatrix {
        &self.rho
    }

    pub fn population(&self, level: usize) -> f64 {
        self.rho[(level, level)].re
    }

    pub fn coherence(&self, i: usize, j: usize) -> Complex64 {
        self.rho[(i, j)]
    }

    pub fn check_invariants(&self, time: f64) -> Result<(), DynamicsError> {
        let breach = |what: String| Err(DynamicsError::InvariantBreach { time, what });
        let asym = self.rho.max_asymmetry();
        if asym > 1e-10 {
            return breach(format!("hermiticity violated by {asym:.3e}"));
        }
        let tr = self.rho.trace();
        if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
            return breach(format!("trace = {tr} deviates from 1"));
        }
        let (evals, _) = hermitian_eig(&self.rho)?;
        if evals[0] < -1e-8 {
            return breach(format!("minimum eigenvalue {:.3e} < -1e-8", evals[0]));
        }
        Ok(())
    }
}

/// One step of a measurement protocol.
#[derive(Debug, Clone)]
pub enum Segment {
    /// Resonant optical pumping |0> -> |2> with radiative branching back.
    OpticalPump {
        duration: f64,
        pump_rate: f64,
        branching_back: f64,
    },
    /// Microwave electric-field pulse on the orbital transition.
    MicrowavePulse {
        duration: f64,
        power: f64,
        frequency: f64,
        phase: f64,
        electrode: String,
    },
    Wait { duration: f64 },
    /// Optical pumping with time-binned photoluminescence recording.
    Readout {
        duration: f64,
        pump_rate: f64,
        branching_back: f64,
        bin_width: f64,
    },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match self {
            Segment::OpticalPump { duration, .. }
            | Segment::MicrowavePulse { duration, .. }
            | Segment::Wait { duration }
            | Segment::Readout { duration, .. } => *duration,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PulseSequence {
    pub segments: Vec<Segment>,
}

impl PulseSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        PulseSequence { segments }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.duration() >= 0.0) {
                return Err(DynamicsError::BadSequence(format!(
                    "segment {i} has negative duration {}",
                    seg.duration()
                )));
            }
            match seg {
                Segment::OpticalPump { pump_rate, branching_back, .. }
                | Segment::Readout { pump_rate, branching_back, .. } => {
                    if !(*pump_rate >= 0.0) {
                        return Err(DynamicsError::BadSequence(format!(
                            "segment {i} has negative pump rate"
                        )));
                    }
                    if !(0.0..=1.0).contains(branching_back) {
                        return Err(DynamicsError::BadSequence(format!(
                            "segment {i} branching_back {branching_back} outside [0, 1]"
                        )));
                    }
                }
                Segment::MicrowavePulse { power, frequency, .. } => {
                    if !(*power >= 0.0) {
                        return Err(DynamicsError::BadSequence(format!(
                            "segment {i} has negative power"
                        )));
                    }
                    if !(*frequency > 0.0) {
                        return Err(DynamicsError::BadSequence(format!(
                            "segment {i} has non-positive drive frequency"
                        )));
                    }
                }
                Segment::Wait { .. } => {}
            }
            if let Segment::Readout { bin_width, .. } = seg {
                if !(*bin_width > 0.0) {
                    return Err(DynamicsError::BadSequence(format!(
                        "segment {i} bin_width must be > 0"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration()).sum()
    }
}

/// Expected photon detection rate per time bin during optical segments.
#[derive(Debug, Clone, Default)]
pub struct PlTrace {
    pub bin_times: Vec<f64>,
    pub counts_rate: Vec<f64>,
}

/// Optical pump parameters for collapse-operator construction.
#[derive(Debug, Clone, Copy)]
pub struct OpticalPumping {
    pub pump_rate: f64,
    pub branching_back: f64,
}

/// Collapse operators with rates for the three-level system:
/// orbital decay |0><1| at 1/T1, pure dephasing diag(1,-1,0)/sqrt(2) at
/// 1/Tphi (free-induction coherence then decays at 1/T2* = 1/(2 T1) +
/// 1/Tphi), and, when pumping, |2><0| at the pump rate plus radiative decay
/// out of |2> split by the branching ratio.
pub fn collapse_set(
    params: &NvParams,
    optical: Option<OpticalPumping>,
) -> Result<Vec<(OperatorMatrix, f64)>, DynamicsError> {
    params.validate()?;
    let mut out = Vec::new();
    out.push((
        OperatorMatrix::ketbra(3, 0, 1, BasisTag::Levels012),
        1.0 / params.t1,
    ));
    let mut deph = OperatorMatrix::zeros(3, BasisTag::Levels012);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    deph[(0, 0)] = Complex64::new(inv_sqrt2, 0.0);
    deph[(1, 1)] = Complex64::new(-inv_sqrt2, 0.0);
    out.push((deph, 1.0 / params.tphi));
    if let Some(opt) = optical {
        out.push((
            OperatorMatrix::ketbra(3, 2, 0, BasisTag::Levels012),
            opt.pump_rate,
        ));
        out.push((
            OperatorMatrix::ketbra(3, 0, 2, BasisTag::Levels012),
            params.gamma_rad * opt.branching_back,
        ));
        out.push((
            OperatorMatrix::ketbra(3, 1, 2, BasisTag::Levels012),
            params.gamma_rad * (1.0 - opt.branching_back),
        ));
    }
    Ok(out)
}

/// drho/dt = -i 2 pi [H, rho] + sum gamma (L rho L^dag - 1/2 {L^dag L, rho})
/// with H in Hz.
pub fn lindblad_rhs(
    h: &OperatorMatrix,
    collapses: &[(OperatorMatrix, f64)],
    rho: &OperatorMatrix,
) -> OperatorMatrix {
    let comm = h.matmul(rho).sub(&rho.matmul(h));
    let mut out = comm.scale(Complex64::new(0.0, -TWO_PI));
    for (l, gamma) in collapses {
        let ldag = l.adjoint();
        let ldl = ldag.matmul(l);
        let jump = l.matmul(rho).matmul(&ldag);
        let anti = ldl.matmul(rho).add(&rho.matmul(&ldl)).scale_re(0.5);
        out = out.add(&jump.sub(&anti).scale_re(*gamma));
    }
    out
}

fn rk4_step(
    h: &OperatorMatrix,
    collapses: &[(OperatorMatrix, f64)],
    rho: &OperatorMatrix,
    dt: f64,
) -> OperatorMatrix {
    let k1 = lindblad_rhs(h, collapses, rho);
    let k2 = lindblad_rhs(h, collapses, &rho.add(&k1.scale_re(0.5 * dt)));
    let k3 = lindblad_rhs(h, collapses, &rho.add(&k2.scale_re(0.5 * dt)));
    let k4 = lindblad_rhs(h, collapses, &rho.add(&k3.scale_re(dt)));
    let mut next = rho.add(
        &k1.add(&k2.scale_re(2.0))
            .add(&k3.scale_re(2.0))
            .add(&k4)
            .scale_re(dt / 6.0),
    );
    // fold rounding drift back onto the hermitian manifold
    let herm = next.add(&next.adjoint()).scale_re(0.5);
    next = herm;
    next
}

/// Rabi frequency d_perp * E_perp'' for a drive of the given power on the
/// named electrode.
pub fn pulse_rabi_frequency(
    params: &NvParams,
    geom: &ElectrodeGeometry,
    electrode: &str,
    power: f64,
) -> Result<f64, DynamicsError> {
    let volts = fields::power_to_amplitude(geom, power)?;
    let per_volt = fields::electrode_field(geom, electrode, volts)?;
    let e_nv = fields::lab_to_nv(&per_volt, geom)?;
    let (_, _, mix) = hamiltonian::eigen_closed_form(
        params,
        &FieldVectorNv {
            e_x: 0.0,
            e_y: 0.0,
            e_z: 0.0,
        },
    )?;
    Ok(params.d_perp * fields::effective_drive(&e_nv, &mix))
}

/// Frame Hamiltonian during free evolution: in the rotating frame of a drive
/// at `f_drive`, level |1> sits at +delta/2 and |0> at -delta/2 with
/// delta = resonance - f_drive.
pub fn free_hamiltonian(delta: f64) -> OperatorMatrix {
    let mut h = OperatorMatrix::zeros(3, BasisTag::Levels012);
    h[(0, 0)] = Complex64::new(-0.5 * delta, 0.0);
    h[(1, 1)] = Complex64::new(0.5 * delta, 0.0);
    h
}

/// Drive Hamiltonian in its own rotating frame.
pub fn drive_hamiltonian(delta: f64, rabi: f64, phase: f64) -> OperatorMatrix {
    let mut h = free_hamiltonian(delta);
    let g = Complex64::from_polar(0.5 * rabi, phase);
    h[(0, 1)] = g;
    h[(1, 0)] = g.conj();
    h
}

/// Evolve a state through a pulse sequence with a fixed-step 4th-order
/// integrator, recording photoluminescence during optical segments.
///
/// The whole sequence is integrated in the rotating frame of the first
/// microwave segment (lab-static frame when there is none), so Ramsey phase
/// accumulates consistently across Wait segments.
pub fn evolve(
    rho0: &DensityState,
    seq: &PulseSequence,
    params: &NvParams,
    geom: &ElectrodeGeometry,
    dt: f64,
) -> Result<(DensityState, PlTrace), DynamicsError> {
    params.validate()?;
    seq.validate()?;
    rho0.check_invariants(0.0)?;

    // rotating-frame reference: the first microwave segment's frequency
    let frame_freq = seq.segments.iter().find_map(|s| match s {
        Segment::MicrowavePulse { frequency, .. } => Some(*frequency),
        _ => None,
    });
    let delta = frame_freq.map(|f| params.resonance() - f).unwrap_or(0.0);

    // stability bound: dt <= min(T1, Tphi, 1/f_R)/20 over all pulses
    let mut min_scale = params.t1.min(params.tphi);
    let mut pulse_rabis = Vec::new();
    for seg in &seq.segments {
        if let Segment::MicrowavePulse { power, electrode, .. } = seg {
            let fr = pulse_rabi_frequency(params, geom, electrode, *power)?;
            if fr > 0.0 {
                min_scale = min_scale.min(1.0 / fr);
            }
            pulse_rabis.push(fr);
        }
    }
    let bound = min_scale / 20.0;
    if dt > bound {
        return Err(DynamicsError::StepTooLarge { dt, bound });
    }

    let mut rho = rho0.clone();
    let mut trace = PlTrace::default();
    let mut t_abs = 0.0f64;
    let mut pulse_idx = 0usize;

    // the branching ratio is a property of the emitter; dark segments keep
    // the radiative decay channels (zero pump rate) with the branching of
    // the most recent optical segment so leftover excited population relaxes
    let mut last_branching = 0.5;
    for seg in &seq.segments {
        let duration = seg.duration();
        if duration == 0.0 {
            if let Segment::MicrowavePulse { .. } = seg {
                pulse_idx += 1;
            }
            continue;
        }
        if let Segment::OpticalPump { branching_back, .. }
        | Segment::Readout { branching_back, .. } = seg
        {
            last_branching = *branching_back;
        }
        let dark = Some(OpticalPumping {
            pump_rate: 0.0,
            branching_back: last_branching,
        });
        let (h, collapses) = match seg {
            Segment::Wait { .. } => (free_hamiltonian(delta), collapse_set(params, dark)?),
            Segment::OpticalPump {
                pump_rate,
                branching_back,
                ..
            }
            | Segment::Readout {
                pump_rate,
                branching_back,
                ..
            } => (
                free_hamiltonian(delta),
                collapse_set(
                    params,
                    Some(OpticalPumping {
                        pump_rate: *pump_rate,
                        branching_back: *branching_back,
                    }),
                )?,
            ),
            Segment::MicrowavePulse {
                frequency, phase, ..
            } => {
                let rabi = pulse_rabis[pulse_idx];
                pulse_idx += 1;
                let seg_delta = params.resonance() - *frequency;
                (
                    drive_hamiltonian(seg_delta, rabi, *phase),
                    collapse_set(params, dark)?,
                )
            }
        };

        let n_steps = (duration / dt).ceil().max(1.0) as usize;
        let dt_seg = duration / n_steps as f64;

        // PL binning setup
        let bin_width = match seg {
            Segment::Readout { bin_width, .. } => Some(*bin_width),
            Segment::OpticalPump { duration, .. } => Some(*duration),
            _ => None,
        };
        let mut bin_acc: Vec<(f64, usize)> = Vec::new();
        if let Some(bw) = bin_width {
            let n_bins = (duration / bw).ceil().max(1.0) as usize;
            bin_acc = vec![(0.0, 0); n_bins];
        }

        for step in 0..n_steps {
            if let Some(bw) = bin_width {
                let t_local = (step as f64 + 0.5) * dt_seg;
                let idx = ((t_local / bw) as usize).min(bin_acc.len() - 1);
                let rate = params.gamma_rad * rho.population(2);
                bin_acc[idx].0 += rate;
                bin_acc[idx].1 += 1;
            }
            let next = rk4_step(&h, &collapses, rho.matrix(), dt_seg);
            rho = DensityState { rho: next };
            rho.check_invariants(t_abs + (step + 1) as f64 * dt_seg)?;
        }

        if let Some(bw) = bin_width {
            for (i, (sum, count)) in bin_acc.iter().enumerate() {
                if *count > 0 {
                    trace.bin_times.push(t_abs + (i as f64 + 0.5) * bw);
                    trace.counts_rate.push(sum / *count as f64);
                }
            }
        }
        t_abs += duration;
    }
    Ok((rho, trace))
}

/// Steady state of drho/dt = 0 under a fixed Hamiltonian and collapse set,
/// with unit trace. The 9x9 linear system is assembled by applying the same
/// right-hand side used by the integrator to each matrix unit.
pub fn steady_state(
    h: &OperatorMatrix,
    collapses: &[(OperatorMatrix, f64)],
) -> Result<DensityState, DynamicsError> {
    let n = 3usize;
    let dim = n * n;
    // column j = vec(RHS(E_j)) where E_j is the j-th matrix unit
    let mut a = vec![Complex64::new(0.0, 0.0); dim * dim];
    for j in 0..dim {
        let unit = {
            let mut m = OperatorMatrix::zeros(n, BasisTag::Levels012);
            m[(j / n, j % n)] = Complex64::new(1.0, 0.0);
            m
        };
        let col = lindblad_rhs(h, collapses, &unit);
        for i in 0..dim {
            a[i * dim + j] = col[(i / n, i % n)];
        }
    }
    // normalize the generator scale so the trace row does not unbalance pivoting
    let scale = a.iter().map(|c| c.norm()).fold(0.0f64, f64::max).max(1.0);
    // replace the row for entry (0,0) with the trace constraint
    let mut b = vec![Complex64::new(0.0, 0.0); dim];
    for j in 0..dim {
        a[j] = if j % (n + 1) == 0 {
            Complex64::new(scale, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    b[0] = Complex64::new(scale, 0.0);

    solve_complex(dim, &mut a, &mut b)?;

    let mut rho = OperatorMatrix::zeros(n, BasisTag::Levels012);
    for i in 0..dim {
        rho[(i / n, i % n)] = b[i];
    }
    // fold numerical asymmetry back
    let herm = rho.add(&rho.adjoint()).scale_re(0.5);
    DensityState::new(herm)
}

/// Gaussian elimination with partial pivoting, in place.
fn solve_complex(n: usize, a: &mut [Complex64], b: &mut [Complex64]) -> Result<(), DynamicsError> {
    for col in 0..n {
        let (pivot, pmax) = (col..n)
            .map(|r| (r, a[r * n + col].norm()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pmax < 1e-300 {
            return Err(DynamicsError::SingularSteadyState);
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
            }
            b.swap(pivot, col);
        }
        let diag = a[col * n + col];
        for r in (col + 1)..n {
            let factor = a[r * n + col] / diag;
            if factor.norm() == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a[col * n + j];
                a[r * n + j] -= factor * v;
            }
            let bv = b[col];
            b[r] -= factor * bv;
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in (col + 1)..n {
            acc -= a[col * n + j] * b[j];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Gauss-Hermite nodes and weights for n points; weights are normalized to
/// sum to 1 (probability weights of a standard Gaussian), nodes are in units
/// of sqrt(2)*sigma.
/// QL with implicit shifts for a symmetric tridiagonal matrix. `d` holds the
/// diagonal (eigenvalues on return), `e` the subdiagonal, and `first` a row
/// vector that accumulates the applied rotations (pass the first unit vector
/// to obtain the first component of every eigenvector).
fn symtri_eig(d: &mut [f64], e: &mut [f64], first: &mut [f64]) -> Result<(), ()> {
    let n = d.len();
    let mut e = {
        let mut v = e.to_vec();
        v.push(0.0);
        v
    };
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(());
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                // accumulate the rotation on the tracked row
                let fi = first[i + 1];
                first[i + 1] = s * first[i] + c * fi;
                first[i] = c * first[i] - s * fi;
            }
            if r == 0.0 && m > l + 1 {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
    if n < 3 || n % 2 == 0 {
        return Err(DynamicsError::BadNodeCount(n));
    }
    // Golub-Welsch: nodes are the eigenvalues of the symmetric tridiagonal
    // Jacobi matrix of the Hermite recurrence (off-diagonal sqrt(k/2));
    // the weight of each node is the squared first component of its
    // eigenvector. Stable at high order, unlike Newton on the polynomial.
    let mut d = vec![0.0f64; n];
    let mut e: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let mut first = vec![0.0f64; n];
    first[0] = 1.0;
    symtri_eig(&mut d, &mut e, &mut first)
        .map_err(|_| DynamicsError::BadNodeCount(n))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let mut nodes: Vec<f64> = order.iter().map(|&j| d[j]).collect();
    let mut weights: Vec<f64> = order.iter().map(|&j| first[j] * first[j]).collect();
    // enforce the exact +-x symmetry of the roots; the middle root of an odd
    // rule is exactly zero
    for j in 0..n / 2 {
        let x = 0.5 * (nodes[n - 1 - j] - nodes[j]);
        nodes[j] = -x;
        nodes[n - 1 - j] = x;
        let w = 0.5 * (weights[j] + weights[n - 1 - j]);
        weights[j] = w;
        weights[n - 1 - j] = w;
    }
    nodes[n / 2] = 0.0;
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok((nodes, weights))
}

/// Average an observable vector over a Gaussian distribution of detuning
/// offsets with the given FWHM, by Gauss-Hermite quadrature. The node count
/// must be odd so fwhm -> 0 degenerates exactly to a single run.
pub fn inhomogeneous_average<F>(
    run: F,
    fwhm: f64,
    n_nodes: usize,
) -> Result<Vec<f64>, DynamicsError>
where
    F: Fn(f64) -> Vec<f64>,
{
    if n_nodes < 3 || n_nodes % 2 == 0 {
        return Err(DynamicsError::BadNodeCount(n_nodes));
    }
    if fwhm == 0.0 {
        return Ok(run(0.0));
    }
    let sigma = fwhm / (8.0 * std::f64::consts::LN_2).sqrt();
    let (nodes, weights) = gauss_hermite(n_nodes)?;
    let mut acc: Option<Vec<f64>> = None;
    for (x, w) in nodes.iter().zip(&weights) {
        let offset = std::f64::consts::SQRT_2 * sigma * x;
        let vals = run(offset);
        match &mut acc {
            None => acc = Some(vals.iter().map(|v| w * v).collect()),
            Some(a) => {
                assert_eq!(a.len(), vals.len(), "observable length changed across nodes");
                for (ai, vi) in a.iter_mut().zip(&vals) {
                    *ai += w * vi;
                }
            }
        }
    }
    Ok(acc.expect("at least one node"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::NvParams;

    fn params() -> NvParams {
        NvParams {
            lambda_so: 4.80e9,
            eps_perp: 4.06e9,
            d_par: 1.08e4,
            d_perp: 9.61e3,
            t1: 137e-9,
            tphi: 33.9e-9,
            optical_linewidth_fwhm: 130e6,
            gamma_rad: 5.0e7,
            resonance_override: Some(12.84e9),
            strain_axis_angle: 0.0,
        }
    }

    fn geom() -> ElectrodeGeometry {
        ElectrodeGeometry::measured_defaults()
    }

    #[test]
    fn collapse_rates() {
        let set = collapse_set(&params(), None).unwrap();
        assert_eq!(set.len(), 2);
        // T1 = 137 ns -> 7.30 MHz decay rate
        assert!((set[0].1 - 7.30e6).abs() < 5e3);
        assert!((set[1].1 - 1.0 / 33.9e-9).abs() < 1.0);
        let with_opt = collapse_set(
            &params(),
            Some(OpticalPumping {
                pump_rate: 1e8,
                branching_back: 0.3,
            }),
        )
        .unwrap();
        assert_eq!(with_opt.len(), 5);
        assert!((with_opt[3].1 - 0.3 * 5.0e7).abs() < 1e-6);
        assert!((with_opt[4].1 - 0.7 * 5.0e7).abs() < 1e-6);
    }

    #[test]
    fn empty_sequence_is_identity() {
        let rho0 = DensityState::thermal_ground();
        let (rho, trace) = evolve(
            &rho0,
            &PulseSequence::default(),
            &params(),
            &geom(),
            1e-10,
        )
        .unwrap();
        assert!(rho.matrix().sub(rho0.matrix()).max_abs() < 1e-15);
        assert!(trace.bin_times.is_empty());
    }

    #[test]
    fn wait_relaxation_matches_rate_equation() {
        // rho0 = |1><1|, wait 600 ns with T1 = 137 ns:
        // rho00 = 1 - exp(-600/137) = 0.98748
        let p = params();
        let seq = PulseSequence::new(vec![Segment::Wait { duration: 600e-9 }]);
        let (rho, _) = evolve(&DensityState::pure(1), &seq, &p, &geom(), 1e-9).unwrap();
        let expected = 1.0 - (-600.0f64 / 137.0).exp();
        assert!((expected - 0.9875).abs() < 1e-4);
        assert!((rho.population(0) - expected).abs() < 1e-6);
    }

    #[test]
    fn resonant_pulse_transfers_population() {
        // f_R = 87.8 MHz for 5.7 ns: rho11 = sin^2(pi * f_R * t) ~ 1.0
        let mut p = params();
        // suppress dissipation to isolate the coherent rotation
        p.t1 = 1.0;
        p.tphi = 1.0;
        let g = geom();
        // pick the power that gives exactly 87.8 MHz
        let f_target = 87.8e6;
        let f_at_1w = pulse_rabi_frequency(&p, &g, "ac", 1.0).unwrap();
        let power = (f_target / f_at_1w).powi(2);
        let fr = pulse_rabi_frequency(&p, &g, "ac", power).unwrap();
        assert!((fr - f_target).abs() < 1.0);
        let seq = PulseSequence::new(vec![Segment::MicrowavePulse {
            duration: 5.7e-9,
            power,
            frequency: p.resonance(),
            phase: 0.0,
            electrode: "ac".into(),
        }]);
        let (rho, _) = evolve(&DensityState::pure(0), &seq, &p, &g, 2e-11).unwrap();
        let expected = (std::f64::consts::PI * f_target * 5.7e-9).sin().powi(2);
        assert!(expected > 0.999);
        assert!((rho.population(1) - expected).abs() < 1e-4);

        // with the real dissipation the contrast loss over a 5.7 ns pulse is
        // bounded by ~t/(2 Tphi) + t/(2 T1) ~ 10%
        let p_full = params();
        let (rho2, _) = evolve(&DensityState::pure(0), &seq, &p_full, &g, 2e-11).unwrap();
        assert!(rho2.population(1) > 0.9);
        assert!((rho2.population(1) - expected).abs() < 0.1);
    }

    #[test]
    fn coherence_decays_at_t2_star() {
        let p = params();
        let mut rho = OperatorMatrix::zeros(3, BasisTag::Levels012);
        rho[(0, 0)] = Complex64::new(0.5, 0.0);
        rho[(1, 1)] = Complex64::new(0.5, 0.0);
        rho[(0, 1)] = Complex64::new(0.5, 0.0);
        rho[(1, 0)] = Complex64::new(0.5, 0.0);
        let rho0 = DensityState::new(rho).unwrap();
        let t = 40e-9;
        let seq = PulseSequence::new(vec![Segment::Wait { duration: t }]);
        let (out, _) = evolve(&rho0, &seq, &p, &geom(), 5e-10).unwrap();
        let expected = 0.5 * (-t / p.t2_star()).exp();
        assert!((out.coherence(0, 1).norm() - expected).abs() < 1e-3 * expected.max(1e-3));
    }

    #[test]
    fn lifetime_limited_coherence_decays_at_half_t1_rate() {
        let mut p = params();
        p.tphi = 1e3; // effectively no pure dephasing
        let mut rho = OperatorMatrix::zeros(3, BasisTag::Levels012);
        rho[(0, 0)] = Complex64::new(0.5, 0.0);
        rho[(1, 1)] = Complex64::new(0.5, 0.0);
        rho[(0, 1)] = Complex64::new(0.5, 0.0);
        rho[(1, 0)] = Complex64::new(0.5, 0.0);
        let rho0 = DensityState::new(rho).unwrap();
        let t = 150e-9;
        let seq = PulseSequence::new(vec![Segment::Wait { duration: t }]);
        let (out, _) = evolve(&rho0, &seq, &p, &geom(), 1e-9).unwrap();
        let expected = 0.5 * (-t / (2.0 * p.t1)).exp();
        let got = out.coherence(0, 1).norm();
        assert!((got - expected).abs() < 0.01 * expected);
    }

    #[test]
    fn step_size_guard() {
        let p = params();
        let seq = PulseSequence::new(vec![Segment::Wait { duration: 1e-6 }]);
        match evolve(&DensityState::pure(0), &seq, &p, &geom(), 1e-8) {
            Err(DynamicsError::StepTooLarge { bound, .. }) => {
                assert!((bound - 33.9e-9 / 20.0).abs() < 1e-12);
            }
            other => panic!("expected step-size rejection, got {other:?}"),
        }
    }

    #[test]
    fn readout_records_pl_bins() {
        let p = params();
        let seq = PulseSequence::new(vec![Segment::Readout {
            duration: 400e-9,
            pump_rate: 5e7,
            branching_back: 0.5,
            bin_width: 50e-9,
        }]);
        let (_, trace) = evolve(&DensityState::thermal_ground(), &seq, &p, &geom(), 1e-9).unwrap();
        assert_eq!(trace.bin_times.len(), 8);
        assert!(trace.counts_rate.iter().all(|&r| r >= 0.0));
        // pumping empties |0>: late bins darker than the first
        assert!(trace.counts_rate[7] < trace.counts_rate[0]);
    }

    #[test]
    fn steady_state_matches_long_time_evolution() {
        let p = params();
        let collapses = collapse_set(
            &p,
            Some(OpticalPumping {
                pump_rate: 2e7,
                branching_back: 0.5,
            }),
        )
        .unwrap();
        let h = drive_hamiltonian(10e6, 20e6, 0.0);
        let ss = steady_state(&h, &collapses).unwrap();
        // propagate long enough to relax
        let mut rho = DensityState::thermal_ground().matrix().clone();
        let dt = 5e-10;
        let steps = (3e-6 / dt) as usize;
        for _ in 0..steps {
            rho = rk4_step(&h, &collapses, &rho, dt);
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (rho[(i, j)] - ss.matrix()[(i, j)]).norm() < 1e-6,
                    "entry ({i},{j}) mismatch"
                );
            }
        }
    }

    #[test]
    fn gauss_hermite_weights_and_moments() {
        for n in [3, 7, 15, 41] {
            let (nodes, weights) = gauss_hermite(n).unwrap();
            let sum: f64 = weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // middle node exactly zero
            assert_eq!(nodes[n / 2], 0.0);
            // second moment of x in units of sqrt2*sigma is 1/2
            let m2: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
            assert!((m2 - 0.5).abs() < 1e-10, "n={n}: m2={m2}");
        }
        assert!(gauss_hermite(4).is_err());
        assert!(gauss_hermite(1).is_err());
    }

    #[test]
    fn inhomogeneous_average_limits() {
        // fwhm = 0: identical to a single run
        let run = |d: f64| vec![d * d + 1.0];
        let avg = inhomogeneous_average(run, 0.0, 7).unwrap();
        assert_eq!(avg, vec![1.0]);
        // constant observable unchanged
        let avg = inhomogeneous_average(|_| vec![3.5], 130e6, 11).unwrap();
        assert!((avg[0] - 3.5).abs() < 1e-12);
        // variance of the Gaussian reproduced
        let fwhm = 130e6;
        let sigma = fwhm / (8.0f64 * std::f64::consts::LN_2).sqrt();
        let avg = inhomogeneous_average(|d| vec![d * d], fwhm, 21).unwrap();
        assert!((avg[0] - sigma * sigma).abs() < 1e-6 * sigma * sigma);
        assert!(inhomogeneous_average(|_| vec![0.0], 1.0, 4).is_err());
    }
}
