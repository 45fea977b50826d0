//! Hamiltonian builders for the NV0 ground-state orbital doublet.
//!
//! All Hamiltonians are in cyclic frequency units (Hz). The orbital basis is
//! |+>, |->; the spin-up 2x2 block carries the strain and electric-field
//! physics. Closed-form eigenvalues and mixing coefficients of the strain+dc
//! problem are provided alongside the numeric path so each can check the
//! other.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::FieldVectorNv;
use crate::linalg::{BasisTag, OperatorMatrix};

#[derive(Debug, Error)]
pub enum HamiltonianError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate orbital doublet: lambda^2 + eps_x^2 + eps_y^2 = {radicand:.3e} Hz^2, eigenvectors undefined")]
    Degenerate { radicand: f64 },
}

/// Physical parameter record for one NV0 center.
///
/// Susceptibilities are in Hz per (V/m); times in seconds; frequencies in Hz.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvParams {
    /// Spin-orbit parameter lambda; zero-field splitting is 2*sqrt(lambda^2 + eps_perp^2).
    pub lambda_so: f64,
    /// Perpendicular strain eps_perp.
    pub eps_perp: f64,
    /// Axial electric susceptibility d_parallel, Hz/(V/m).
    pub d_par: f64,
    /// Transverse electric susceptibility d_perp, Hz/(V/m).
    pub d_perp: f64,
    /// Orbital relaxation time T1, s.
    pub t1: f64,
    /// Pure dephasing time Tphi, s.
    pub tphi: f64,
    /// Inhomogeneous Gaussian FWHM of the optical/orbital line, Hz.
    pub optical_linewidth_fwhm: f64,
    /// Radiative decay rate of the optically excited level, Hz.
    #[serde(default = "default_gamma_rad")]
    pub gamma_rad: f64,
    /// User-set orbital resonance frequency, Hz. When absent, the formula
    /// value 2*sqrt(lambda^2 + eps_perp^2) is used. The measured resonance
    /// can differ from the formula value (e.g. a stray static field), so
    /// both are exposed.
    #[serde(default)]
    pub resonance_override: Option<f64>,
    /// Angle between the strain eigenaxis and the NV-frame x axis, rad.
    /// The strain axis defines x by default.
    #[serde(default)]
    pub strain_axis_angle: f64,
}

fn default_gamma_rad() -> f64 {
    5.0e7 // 1/(20 ns), order of the NV0 excited-state lifetime
}

impl NvParams {
    /// Defaults taken from a measured single center: lambda = 4.80 GHz,
    /// eps_perp = 4.06 GHz, d_par = 1.08 MHz/(V/cm), d_perp = 961 kHz/(V/cm),
    /// T1 = 137 ns, T2* = 30.2 ns, optical linewidth 130 MHz.
    pub fn measured_defaults() -> Self {
        let t1 = 137e-9;
        let t2_star = 30.2e-9;
        // 1/T2* = 1/(2 T1) + 1/Tphi
        let tphi = 1.0 / (1.0 / t2_star - 1.0 / (2.0 * t1));
        NvParams {
            lambda_so: 4.80e9,
            eps_perp: 4.06e9,
            d_par: 1.08e6 / 100.0,  // 1.08 MHz/(V/cm) -> Hz/(V/m)
            d_perp: 961e3 / 100.0,  // 961 kHz/(V/cm) -> Hz/(V/m)
            t1,
            tphi,
            optical_linewidth_fwhm: 130e6,
            gamma_rad: default_gamma_rad(),
            resonance_override: Some(12.84e9),
            strain_axis_angle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), HamiltonianError> {
        let bad = |msg: String| Err(HamiltonianError::InvalidParams(msg));
        if !(self.lambda_so > 0.0) {
            return bad(format!("lambda_so must be > 0, got {}", self.lambda_so));
        }
        if !(self.eps_perp >= 0.0) {
            return bad(format!("eps_perp must be >= 0, got {}", self.eps_perp));
        }
        if !(self.t1 > 0.0) {
            return bad(format!("t1 must be > 0, got {}", self.t1));
        }
        if !(self.tphi > 0.0) {
            return bad(format!("tphi must be > 0, got {}", self.tphi));
        }
        if !(self.optical_linewidth_fwhm >= 0.0) {
            return bad(format!(
                "optical_linewidth_fwhm must be >= 0, got {}",
                self.optical_linewidth_fwhm
            ));
        }
        if !(self.gamma_rad > 0.0) {
            return bad(format!("gamma_rad must be > 0, got {}", self.gamma_rad));
        }
        for (name, v) in [("d_par", self.d_par), ("d_perp", self.d_perp)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        let t2 = self.t2_star();
        if !(t2 > 0.0 && t2 <= 2.0 * self.t1 * (1.0 + 1e-12)) {
            return bad(format!("derived T2* = {t2} out of range (0, 2*T1]"));
        }
        Ok(())
    }

    /// T2* from 1/T2* = 1/(2 T1) + 1/Tphi.
    pub fn t2_star(&self) -> f64 {
        1.0 / (1.0 / (2.0 * self.t1) + 1.0 / self.tphi)
    }

    /// Zero-field orbital splitting 2*sqrt(lambda^2 + eps_perp^2), Hz.
    pub fn splitting_zero_field(&self) -> f64 {
        2.0 * (self.lambda_so * self.lambda_so + self.eps_perp * self.eps_perp).sqrt()
    }

    /// Orbital resonance frequency used by the drive protocols: the
    /// user-set override when present, else the formula value.
    pub fn resonance(&self) -> f64 {
        self.resonance_override
            .unwrap_or_else(|| self.splitting_zero_field())
    }

    /// (E_perp, E_perp') along the strain-relative axes from an NV-frame
    /// field, honoring `strain_axis_angle`.
    pub fn strain_axes_components(&self, e_nv: &FieldVectorNv) -> (f64, f64) {
        let (s, c) = self.strain_axis_angle.sin_cos();
        (
            e_nv.e_x * c + e_nv.e_y * s,
            -e_nv.e_x * s + e_nv.e_y * c,
        )
    }
}

/// Normalized mixing coefficients of the strain+field eigenbasis:
/// |+'> = alpha |+> + beta |->, |-'> = -conj(beta) |+> + conj(alpha) |->.
#[derive(Debug, Clone, Copy)]
pub struct MixingCoefficients {
    pub alpha: Complex64,
    pub beta: Complex64,
    /// 2*sqrt(lambda^2 + (eps_perp + d_perp E_perp)^2 + (d_perp E_perp')^2), Hz.
    pub splitting: f64,
}

impl MixingCoefficients {
    /// |alpha|^2 - |beta|^2, the weight entering the effective drive field.
    pub fn population_imbalance(&self) -> f64 {
        self.alpha.norm_sqr() - self.beta.norm_sqr()
    }
}

/// Full 4x4 spin-orbit Hamiltonian 2*lambda*Lz*Sz in the ordering
/// |+ up>, |- up>, |+ down>, |- down>: diag(+lambda, -lambda, -lambda, +lambda).
pub fn h0_full(params: &NvParams) -> Result<OperatorMatrix, HamiltonianError> {
    params.validate()?;
    let l = params.lambda_so;
    let mut m = OperatorMatrix::zeros(4, BasisTag::PlusMinus);
    for (i, sign) in [1.0, -1.0, -1.0, 1.0].into_iter().enumerate() {
        m[(i, i)] = Complex64::new(sign * l, 0.0);
    }
    Ok(m)
}

/// Spin-up 2x2 block of the strain + dc field Hamiltonian in the |+>, |->
/// basis:
///   lambda Lz + d_par Ez I + (eps_perp + d_perp E_perp)(L+ + L-)
///   + (eps_perp' + d_perp E_perp')(-i L+ + i L-)
/// The hydrostatic strain term (global shift) is dropped.
pub fn h_strain_dc(
    params: &NvParams,
    e_nv: &FieldVectorNv,
    eps_perp_prime: f64,
) -> Result<OperatorMatrix, HamiltonianError> {
    params.validate()?;
    if !(e_nv.e_x.is_finite() && e_nv.e_y.is_finite() && e_nv.e_z.is_finite()) {
        return Err(HamiltonianError::InvalidParams(
            "field components must be finite".into(),
        ));
    }
    let (e_perp, e_perp_prime) = params.strain_axes_components(e_nv);
    let lam = params.lambda_so;
    let shift = params.d_par * e_nv.e_z;
    let ex = params.eps_perp + params.d_perp * e_perp;
    let ey = eps_perp_prime + params.d_perp * e_perp_prime;
    let mut m = OperatorMatrix::zeros(2, BasisTag::PlusMinus);
    m[(0, 0)] = Complex64::new(lam + shift, 0.0);
    m[(1, 1)] = Complex64::new(-lam + shift, 0.0);
    m[(0, 1)] = Complex64::new(ex, -ey);
    m[(1, 0)] = Complex64::new(ex, ey);
    Ok(m)
}

/// Closed-form eigenvalues and normalized eigenvectors of the strain+dc
/// block: E_pm = d_par Ez +- sqrt(lambda^2 + eps_x^2 + eps_y^2) with
/// eps_x = eps_perp + d_perp E_perp and eps_y = d_perp E_perp'.
pub fn eigen_closed_form(
    params: &NvParams,
    e_nv: &FieldVectorNv,
) -> Result<(f64, f64, MixingCoefficients), HamiltonianError> {
    params.validate()?;
    let (e_perp, e_perp_prime) = params.strain_axes_components(e_nv);
    let lam = params.lambda_so;
    let ex = params.eps_perp + params.d_perp * e_perp;
    let ey = params.d_perp * e_perp_prime;
    let radicand = lam * lam + ex * ex + ey * ey;
    if radicand < 1e-30 {
        return Err(HamiltonianError::Degenerate { radicand });
    }
    let r = radicand.sqrt();
    let shift = params.d_par * e_nv.e_z;
    let w = Complex64::new(ex, ey);
    let (alpha, beta) = if w.norm() <= 1e-15 * r {
        // pure spin-orbit splitting: eigenstates are |+>, |->
        (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
    } else {
        // unnormalized |+'> = [(lambda + r)/w, 1]
        let u = Complex64::new(lam + r, 0.0) / w;
        let n = (u.norm_sqr() + 1.0).sqrt();
        (u / n, Complex64::new(1.0 / n, 0.0))
    };
    let mix = MixingCoefficients {
        alpha,
        beta,
        splitting: 2.0 * r,
    };
    Ok((shift + r, shift - r, mix))
}

/// Rotating-frame drive Hamiltonian in the primed basis under the RWA:
/// Delta*Lz + g*(L+ + L-) with Delta = sqrt(lambda^2 + eps_perp^2) - f_drive
/// and g = d_perp * E0 / 2. The factor 1/2 is the RWA convention for a
/// cosine drive of amplitude E0, so the on-resonance population-oscillation
/// (Rabi) frequency is f_R = 2 g = d_perp * E0.
pub fn rwa_drive(
    params: &NvParams,
    e_drive_perp_eff: f64,
    f_drive: f64,
) -> Result<OperatorMatrix, HamiltonianError> {
    params.validate()?;
    if !(f_drive > 0.0) {
        return Err(HamiltonianError::InvalidParams(format!(
            "f_drive must be > 0, got {f_drive}"
        )));
    }
    let delta = (params.lambda_so * params.lambda_so + params.eps_perp * params.eps_perp).sqrt()
        - f_drive;
    let g = params.d_perp * e_drive_perp_eff / 2.0;
    let mut m = OperatorMatrix::zeros(2, BasisTag::Primed);
    m[(0, 0)] = Complex64::new(delta, 0.0);
    m[(1, 1)] = Complex64::new(-delta, 0.0);
    m[(0, 1)] = Complex64::new(g, 0.0);
    m[(1, 0)] = Complex64::new(g, 0.0);
    Ok(m)
}
