//! Small dense complex-matrix kernel for dimensions 2-4.
//!
//! Hamiltonians are stored in cyclic frequency units (Hz); the 2*pi enters
//! only inside [`propagator`] and the master-equation right-hand side.

use num_complex::Complex64;
use thiserror::Error;

/// Basis label carried by every operator so that matrices built in different
/// orbital bases cannot be mixed up silently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTag {
    /// Strain eigenstates |ex>, |ey>.
    Exy,
    /// Circular orbital basis |+>, |->.
    PlusMinus,
    /// Strain+field eigenbasis |+'>, |-'>.
    Primed,
    /// Effective levels |0>, |1>, |2> used by the dynamics engine.
    Levels012,
}

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix dimension {0} unsupported (expected 2, 3 or 4)")]
    BadDim(usize),
    #[error("entry count {got} does not match dim {dim} (expected {})", dim * dim)]
    BadEntryCount { dim: usize, got: usize },
    #[error("matrix is not hermitian: max asymmetry |M - M^dag| = {max_asymmetry:.3e} exceeds {tol:.3e}")]
    NotHermitian { max_asymmetry: f64, tol: f64 },
    #[error("negative evolution time {0} s")]
    NegativeTime(f64),
    #[error("jacobi sweep failed to converge after {0} sweeps")]
    NoConvergence(usize),
}

const HERMITICITY_TOL: f64 = 1e-12;
const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 60;

/// Row-major complex matrix of dimension 2, 3 or 4 with a basis tag.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    dim: usize,
    entries: Vec<Complex64>,
    basis: BasisTag,
}

impl OperatorMatrix {
    pub fn from_entries(
        dim: usize,
        entries: Vec<Complex64>,
        basis: BasisTag,
    ) -> Result<Self, LinalgError> {
        if !(2..=4).contains(&dim) {
            return Err(LinalgError::BadDim(dim));
        }
        if entries.len() != dim * dim {
            return Err(LinalgError::BadEntryCount {
                dim,
                got: entries.len(),
            });
        }
        Ok(Self {
            dim,
            entries,
            basis,
        })
    }

    pub fn zeros(dim: usize, basis: BasisTag) -> Self {
        Self::from_entries(dim, vec![Complex64::new(0.0, 0.0); dim * dim], basis)
            .expect("dim checked by caller")
    }

    pub fn identity(dim: usize, basis: BasisTag) -> Self {
        let mut m = Self::zeros(dim, basis);
        for i in 0..dim {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    /// |i><j| in the given dimension.
    pub fn ketbra(dim: usize, i: usize, j: usize, basis: BasisTag) -> Self {
        let mut m = Self::zeros(dim, basis);
        m[(i, j)] = Complex64::new(1.0, 0.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn basis(&self) -> BasisTag {
        self.basis
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.dim, self.basis);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[(i, j)] = self[(j, i)].conj();
            }
        }
        out
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            *e *= c;
        }
        out
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(Complex64::new(c, 0.0))
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        let mut out = self.clone();
        for (e, o) in out.entries.iter_mut().zip(&other.entries) {
            *e += o;
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale_re(-1.0))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        let n = self.dim;
        let mut out = Self::zeros(n, self.basis);
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    acc += self[(i, k)] * other[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise deviation from M = M^dag.
    pub fn max_asymmetry(&self) -> f64 {
        let mut max = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                max = max.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        max
    }

    pub fn is_hermitian(&self) -> bool {
        self.max_asymmetry() <= HERMITICITY_TOL * self.max_abs().max(1.0)
    }

    fn require_hermitian(&self) -> Result<(), LinalgError> {
        let tol = HERMITICITY_TOL * self.max_abs().max(1.0);
        let asym = self.max_asymmetry();
        if asym > tol {
            Err(LinalgError::NotHermitian {
                max_asymmetry: asym,
                tol,
            })
        } else {
            Ok(())
        }
    }
}

impl std::ops::Index<(usize, usize)> for OperatorMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.entries[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for OperatorMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        let d = self.dim;
        &mut self.entries[i * d + j]
    }
}

/// Eigendecomposition of a hermitian matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come out ascending; eigenvectors are the matching orthonormal
/// columns of the returned matrix.
pub fn hermitian_eig(m: &OperatorMatrix) -> Result<(Vec<f64>, OperatorMatrix), LinalgError> {
    m.require_hermitian()?;
    let n = m.dim;
    let mut a = m.clone();
    // symmetrize exactly so rounding in the input does not leak into the sweep
    for i in 0..n {
        for j in 0..n {
            let h = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = h;
            a[(j, i)] = h.conj();
        }
    }
    let mut v = OperatorMatrix::identity(n, m.basis);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let tol = JACOBI_TOL * scale;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].norm());
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let mag = apq.norm();
                if mag <= tol * 1e-2 {
                    continue;
                }
                let phase = apq / mag; // e^{i phi}
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let tau = (app - aqq) / (2.0 * mag);
                let t = if tau == 0.0 {
                    1.0
                } else {
                    tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // columns: B = A*U with U[p][p]=c, U[q][p]=s e^{-i phi},
                // U[p][q]=-s e^{i phi}, U[q][q]=c
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = aip * c + aiq * s * phase.conj();
                    a[(i, q)] = -aip * s * phase + aiq * c;
                }
                // rows: A' = U^dag * B
                for j in 0..n {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = apj * c + aqj * s * phase;
                    a[(q, j)] = -apj * s * phase.conj() + aqj * c;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip * c + viq * s * phase.conj();
                    v[(i, q)] = -vip * s * phase + viq * c;
                }
            }
        }
    }
    if !converged {
        // one more off-diagonal check after the final sweep
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].norm());
            }
        }
        if off > tol {
            return Err(LinalgError::NoConvergence(MAX_SWEEPS));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    order.sort_by(|&i, &j| evals[i].total_cmp(&evals[j]));

    let sorted: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut vecs = OperatorMatrix::zeros(n, m.basis);
    for (newcol, &oldcol) in order.iter().enumerate() {
        for i in 0..n {
            vecs[(i, newcol)] = v[(i, oldcol)];
        }
    }
    Ok((sorted, vecs))
}

/// Closed-form eigenvalues of a hermitian 2x2 matrix, ascending.
/// Kept as an independent cross-check of the Jacobi path.
pub fn eig2_closed_form(m: &OperatorMatrix) -> Result<(f64, f64), LinalgError> {
    if m.dim != 2 {
        return Err(LinalgError::BadDim(m.dim));
    }
    m.require_hermitian()?;
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let b = m[(0, 1)].norm();
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    Ok((mean - r, mean + r))
}

/// Unitary propagator U = exp(-i 2 pi H t) for H in Hz and t in seconds,
/// computed through the eigendecomposition of H.
pub fn propagator(h: &OperatorMatrix, t: f64) -> Result<OperatorMatrix, LinalgError> {
    if t < 0.0 {
        return Err(LinalgError::NegativeTime(t));
    }
    let (evals, v) = hermitian_eig(h)?;
    let n = h.dim;
    let mut u = OperatorMatrix::zeros(n, h.basis);
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                let phase = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * evals[k] * t);
                acc += v[(i, k)] * phase * v[(j, k)].conj();
            }
            u[(i, j)] = acc;
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn mat2(e: [[Complex64; 2]; 2]) -> OperatorMatrix {
        OperatorMatrix::from_entries(
            2,
            vec![e[0][0], e[0][1], e[1][0], e[1][1]],
            BasisTag::PlusMinus,
        )
        .unwrap()
    }

    fn sigma_x() -> OperatorMatrix {
        mat2([[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]])
    }

    #[test]
    fn eig_diagonal() {
        let m = mat2([[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(2.0, 0.0)]]);
        let (evals, vecs) = hermitian_eig(&m).unwrap();
        assert!((evals[0] - 1.0).abs() < 1e-12);
        assert!((evals[1] - 2.0).abs() < 1e-12);
        assert!((vecs[(0, 0)].norm() - 1.0).abs() < 1e-12);
        assert!((vecs[(1, 1)].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_sigma_x() {
        let (evals, vecs) = hermitian_eig(&sigma_x()).unwrap();
        assert!((evals[0] + 1.0).abs() < 1e-12);
        assert!((evals[1] - 1.0).abs() < 1e-12);
        // eigenvectors (1, -1)/sqrt2 and (1, 1)/sqrt2 up to phase
        for k in 0..2 {
            let ratio = vecs[(1, k)] / vecs[(0, k)];
            assert!((ratio.re - if k == 0 { -1.0 } else { 1.0 }).abs() < 1e-10);
            assert!(ratio.im.abs() < 1e-10);
            let norm = vecs[(0, k)].norm_sqr() + vecs[(1, k)].norm_sqr();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eig_spin_orbit_strain_block() {
        // [[lambda, eps], [eps, -lambda]] with lambda = 4.80 GHz, eps = 4.06 GHz
        // -> eigenvalues +-sqrt(lambda^2 + eps^2) = +-6.2863... GHz
        let lam = 4.80e9;
        let eps = 4.06e9;
        let m = mat2([[c(lam, 0.0), c(eps, 0.0)], [c(eps, 0.0), c(-lam, 0.0)]]);
        let (evals, _) = hermitian_eig(&m).unwrap();
        let expected = (lam * lam + eps * eps).sqrt(); // 6.2867798 GHz
        assert!((expected - 6.2867798e9).abs() < 1e3);
        assert!((evals[0] + expected).abs() < 1e-9 * expected);
        assert!((evals[1] - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let m = mat2([[c(0.0, 0.0), c(1.0, 0.0)], [c(2.0, 0.0), c(0.0, 0.0)]]);
        let err = hermitian_eig(&m).unwrap_err();
        match err {
            LinalgError::NotHermitian { max_asymmetry, .. } => {
                assert!((max_asymmetry - 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn eig_complex_4x4_residual() {
        // hermitian 4x4 with complex off-diagonals
        let e = |re, im| c(re, im);
        let m = OperatorMatrix::from_entries(
            4,
            vec![
                e(1.0, 0.0),
                e(0.5, 0.2),
                e(-0.3, 0.7),
                e(0.1, -0.4),
                e(0.5, -0.2),
                e(-2.0, 0.0),
                e(0.9, 0.1),
                e(0.0, 0.6),
                e(-0.3, -0.7),
                e(0.9, -0.1),
                e(0.4, 0.0),
                e(-1.1, 0.3),
                e(0.1, 0.4),
                e(0.0, -0.6),
                e(-1.1, -0.3),
                e(3.0, 0.0),
            ],
            BasisTag::PlusMinus,
        )
        .unwrap();
        let (evals, vecs) = hermitian_eig(&m).unwrap();
        let norm = m.frobenius_norm();
        // residual M v = E v
        for k in 0..4 {
            for i in 0..4 {
                let mut mv = c(0.0, 0.0);
                for j in 0..4 {
                    mv += m[(i, j)] * vecs[(j, k)];
                }
                assert!((mv - vecs[(i, k)] * evals[k]).norm() < 1e-10 * norm);
            }
        }
        // orthonormality
        for a in 0..4 {
            for b in 0..4 {
                let mut dot = c(0.0, 0.0);
                for i in 0..4 {
                    dot += vecs[(i, a)].conj() * vecs[(i, b)];
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - c(expect, 0.0)).norm() < 1e-10);
            }
        }
        // ascending and trace
        assert!(evals.windows(2).all(|w| w[0] <= w[1]));
        let sum: f64 = evals.iter().sum();
        assert!((sum - m.trace().re).abs() < 1e-10 * norm.max(1.0));
    }

    #[test]
    fn eig_matches_2x2_closed_form() {
        let m = mat2([[c(1.3, 0.0), c(0.4, -0.9)], [c(0.4, 0.9), c(-2.1, 0.0)]]);
        let (evals, _) = hermitian_eig(&m).unwrap();
        let (lo, hi) = eig2_closed_form(&m).unwrap();
        assert!((evals[0] - lo).abs() < 1e-12);
        assert!((evals[1] - hi).abs() < 1e-12);
    }

    #[test]
    fn propagator_zero_time_is_identity() {
        let u = propagator(&sigma_x(), 0.0).unwrap();
        let id = OperatorMatrix::identity(2, BasisTag::PlusMinus);
        assert!(u.sub(&id).max_abs() < 1e-12);
    }

    #[test]
    fn propagator_full_sigma_z_period() {
        // H = (f/2) sigma_z, t = 1/f -> U = -I
        let f = 10e6;
        let m = mat2([
            [c(0.5 * f, 0.0), c(0.0, 0.0)],
            [c(0.0, 0.0), c(-0.5 * f, 0.0)],
        ]);
        let u = propagator(&m, 1.0 / f).unwrap();
        let minus_id = OperatorMatrix::identity(2, BasisTag::PlusMinus).scale_re(-1.0);
        assert!(u.sub(&minus_id).max_abs() < 1e-10);
    }

    /// Fixed-step RK4 on the Schrodinger equation, independent of the
    /// eigendecomposition path.
    fn rk4_schrodinger(h: &OperatorMatrix, psi0: [Complex64; 2], t: f64, steps: usize) -> [Complex64; 2] {
        let dt = t / steps as f64;
        let two_pi = 2.0 * std::f64::consts::PI;
        let rhs = |psi: [Complex64; 2]| {
            let mut out = [c(0.0, 0.0); 2];
            for i in 0..2 {
                let mut acc = c(0.0, 0.0);
                for j in 0..2 {
                    acc += h[(i, j)] * psi[j];
                }
                out[i] = acc * c(0.0, -two_pi);
            }
            out
        };
        let mut psi = psi0;
        for _ in 0..steps {
            let k1 = rhs(psi);
            let k2 = rhs([psi[0] + k1[0] * 0.5 * dt, psi[1] + k1[1] * 0.5 * dt]);
            let k3 = rhs([psi[0] + k2[0] * 0.5 * dt, psi[1] + k2[1] * 0.5 * dt]);
            let k4 = rhs([psi[0] + k3[0] * dt, psi[1] + k3[1] * dt]);
            for i in 0..2 {
                psi[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
            }
        }
        psi
    }

    #[test]
    fn propagator_rabi_transfer_matches_rk4_oracle() {
        // H = g sigma_x with g = 50 MHz, t = 5 ns:
        // |<1|U|0>|^2 = sin^2(2 pi g t) = sin^2(pi * 0.5) = 1
        let g = 50e6;
        let t = 5e-9;
        let h = sigma_x().scale_re(g);
        let u = propagator(&h, t).unwrap();
        let p10 = u[(1, 0)].norm_sqr();
        let expected = (2.0 * std::f64::consts::PI * g * t).sin().powi(2);
        assert!((expected - 1.0).abs() < 1e-10);
        assert!((p10 - expected).abs() < 1e-9);

        let psi = rk4_schrodinger(&h, [c(1.0, 0.0), c(0.0, 0.0)], t, 20_000);
        assert!((psi[1].norm_sqr() - p10).abs() < 1e-8);
    }

    #[test]
    fn propagator_composes_and_is_unitary() {
        let m = mat2([[c(3.0e6, 0.0), c(1.0e6, -2.0e6)], [c(1.0e6, 2.0e6), c(-0.5e6, 0.0)]]);
        let t1 = 13e-9;
        let t2 = 29e-9;
        let u1 = propagator(&m, t1).unwrap();
        let u2 = propagator(&m, t2).unwrap();
        let u12 = propagator(&m, t1 + t2).unwrap();
        assert!(u12.sub(&u1.matmul(&u2)).max_abs() < 1e-9);
        let prod = u1.matmul(&u1.adjoint());
        assert!(prod.sub(&OperatorMatrix::identity(2, BasisTag::PlusMinus)).max_abs() < 1e-10);
    }

    #[test]
    fn propagator_rejects_negative_time() {
        assert!(propagator(&sigma_x(), -1e-9).is_err());
    }
}
