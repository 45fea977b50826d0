//! Nonlinear least squares (Levenberg-Marquardt with finite-difference
//! Jacobians) and the fit-model library used by the measurement protocols.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("not enough data: {n} points for {p} free parameters")]
    NotEnoughData { n: usize, p: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown model {name:?}; known models: {known:?}")]
    UnknownModel { name: String, known: Vec<String> },
    #[error("bootstrap needs >= 100 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("bootstrap aborted: {failed} of {total} refits failed to converge")]
    BootstrapFailed { failed: usize, total: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub unit: String,
}

/// A named x -> y(theta) evaluation rule with an optional fixed-parameter
/// mask.
#[derive(Clone)]
pub struct FitModel {
    pub name: String,
    pub params: Vec<ParamSpec>,
    pub fixed: Vec<bool>,
    eval: Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for FitModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FitModel")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("fixed", &self.fixed)
            .finish()
    }
}

impl FitModel {
    pub fn new<F>(name: &str, params: &[(&str, &str)], eval: F) -> Self
    where
        F: Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    {
        FitModel {
            name: name.to_string(),
            params: params
                .iter()
                .map(|(n, u)| ParamSpec {
                    name: n.to_string(),
                    unit: u.to_string(),
                })
                .collect(),
            fixed: vec![false; params.len()],
            eval: Arc::new(eval),
        }
    }

    pub fn with_fixed(mut self, names: &[&str]) -> Self {
        for (i, p) in self.params.iter().enumerate() {
            if names.contains(&p.name.as_str()) {
                self.fixed[i] = true;
            }
        }
        self
    }

    pub fn eval(&self, theta: &[f64], x: f64) -> f64 {
        (self.eval)(theta, x)
    }

    pub fn n_free(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub model: String,
    pub names: Vec<String>,
    pub units: Vec<String>,
    pub theta: Vec<f64>,
    /// Standard errors from the covariance diagonal (zero for fixed params).
    pub stderr: Vec<f64>,
    /// Full covariance over all parameters; rows/cols of fixed params are zero.
    pub covariance: Vec<Vec<f64>>,
    pub residual_norm: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub message: String,
}

const MAX_ITER: usize = 200;
const COST_RTOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-8;
const FD_REL_STEP: f64 = 1e-6;
const FD_ABS_FLOOR: f64 = 1e-12;

fn residuals(model: &FitModel, x: &[f64], y: &[f64], theta: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| model.eval(theta, xi) - yi)
        .collect()
}

fn jacobian(model: &FitModel, x: &[f64], theta: &[f64], free: &[usize]) -> Vec<Vec<f64>> {
    let base: Vec<f64> = x.iter().map(|&xi| model.eval(theta, xi)).collect();
    // columns over free parameters
    free.iter()
        .map(|&j| {
            let step = (theta[j].abs() * FD_REL_STEP).max(FD_ABS_FLOOR);
            let mut th = theta.to_vec();
            th[j] += step;
            x.iter()
                .enumerate()
                .map(|(i, &xi)| (model.eval(&th, xi) - (base[i])) / step)
                .collect()
        })
        .collect()
}

fn solve_sym(n: usize, a: &mut [f64], b: &mut [f64]) -> bool {
    // Gaussian elimination with partial pivoting; returns false if singular
    for col in 0..n {
        let (pivot, pmax) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pmax < 1e-300 {
            return false;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
            }
            b.swap(pivot, col);
        }
        for r in (col + 1)..n {
            let f = a[r * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in (col + 1)..n {
            acc -= a[col * n + j] * b[j];
        }
        b[col] = acc / a[col * n + col];
    }
    true
}

fn invert_sym(n: usize, a: &[f64]) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        let mut m = a.to_vec();
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        if !solve_sym(n, &mut m, &mut e) {
            return None;
        }
        for row in 0..n {
            inv[row * n + col] = e[row];
        }
    }
    Some(inv)
}

/// Levenberg-Marquardt minimization of sum((model(theta, x_i) - y_i)^2).
///
/// Fixed parameters (per the model mask) are carried through at their
/// initial values. Covariance comes from (J^T J)^-1 scaled by the residual
/// variance at the optimum.
pub fn fit(model: &FitModel, x: &[f64], y: &[f64], theta0: &[f64]) -> Result<FitResult, FitError> {
    assert_eq!(x.len(), y.len(), "x/y length mismatch");
    assert_eq!(theta0.len(), model.params.len(), "theta0 length mismatch");
    if theta0.iter().any(|t| !t.is_finite()) {
        return Err(FitError::NonFinite("theta0"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite("data"));
    }
    let free: Vec<usize> = (0..theta0.len()).filter(|&i| !model.fixed[i]).collect();
    let p = free.len();
    let n = x.len();
    if n < p {
        return Err(FitError::NotEnoughData { n, p });
    }

    let mut theta = theta0.to_vec();
    let mut r = residuals(model, x, y, &theta);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda: Option<f64> = None;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");
    let mut iterations = 0;

    for iter in 0..MAX_ITER {
        iterations = iter + 1;
        let jac = jacobian(model, x, &theta, &free);
        // normal equations
        let mut jtj = vec![0.0; p * p];
        let mut jtr = vec![0.0; p];
        for a in 0..p {
            for b in a..p {
                let dot: f64 = jac[a].iter().zip(&jac[b]).map(|(u, v)| u * v).sum();
                jtj[a * p + b] = dot;
                jtj[b * p + a] = dot;
            }
            jtr[a] = jac[a].iter().zip(&r).map(|(u, v)| u * v).sum();
        }
        let max_diag = (0..p).map(|i| jtj[i * p + i]).fold(0.0f64, f64::max);
        let lam = lambda.get_or_insert(1e-3 * max_diag.max(1e-300));

        // scale-invariant gradient test: cosine of the angle between each
        // Jacobian column and the residual vector
        let r_norm = cost.sqrt();
        let grad_cos = (0..p)
            .map(|i| {
                let col_norm = jtj[i * p + i].sqrt();
                if col_norm > 0.0 && r_norm > 0.0 {
                    jtr[i].abs() / (col_norm * r_norm)
                } else {
                    0.0
                }
            })
            .fold(0.0f64, f64::max);
        if grad_cos <= GRAD_TOL {
            converged = true;
            message = "gradient below tolerance".into();
            break;
        }

        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..p {
                a[i * p + i] += *lam;
            }
            let mut step: Vec<f64> = jtr.iter().map(|g| -g).collect();
            if !solve_sym(p, &mut a, &mut step) {
                *lam *= 10.0;
                continue;
            }
            let mut trial = theta.clone();
            for (k, &j) in free.iter().enumerate() {
                trial[j] += step[k];
            }
            let r_trial = residuals(model, x, y, &trial);
            let cost_trial: f64 = r_trial.iter().map(|v| v * v).sum();
            if cost_trial.is_finite() && cost_trial < cost {
                let rel_change = (cost - cost_trial) / cost.max(1e-300);
                theta = trial;
                r = r_trial;
                cost = cost_trial;
                *lam = (*lam / 10.0).max(1e-300);
                improved = true;
                if rel_change < COST_RTOL {
                    converged = true;
                    message = "relative cost change below tolerance".into();
                }
                break;
            }
            *lam *= 10.0;
            if *lam > 1e30 {
                break;
            }
        }
        if converged {
            break;
        }
        if !improved {
            // even heavily damped (near-gradient-descent) steps fail to
            // reduce the cost, so we are at a numerical stationary point
            converged = cost.is_finite();
            message = "no downhill step found; local minimum".into();
            break;
        }
    }

    // covariance at the optimum
    let jac = jacobian(model, x, &theta, &free);
    let mut jtj = vec![0.0; p * p];
    for a in 0..p {
        for b in a..p {
            let dot: f64 = jac[a].iter().zip(&jac[b]).map(|(u, v)| u * v).sum();
            jtj[a * p + b] = dot;
            jtj[b * p + a] = dot;
        }
    }
    let dof = (n.saturating_sub(p)).max(1) as f64;
    let sigma2 = cost / dof;
    let np = theta0.len();
    let mut covariance = vec![vec![0.0; np]; np];
    let mut stderr = vec![0.0; np];
    if let Some(inv) = invert_sym(p, &jtj) {
        for a in 0..p {
            for b in 0..p {
                covariance[free[a]][free[b]] = sigma2 * inv[a * p + b];
            }
            stderr[free[a]] = covariance[free[a]][free[a]].max(0.0).sqrt();
        }
    }

    Ok(FitResult {
        model: model.name.clone(),
        names: model.params.iter().map(|p| p.name.clone()).collect(),
        units: model.params.iter().map(|p| p.unit.clone()).collect(),
        theta,
        stderr,
        covariance,
        residual_norm: cost.sqrt(),
        n_iterations: iterations,
        converged,
        message,
    })
}

pub mod models {
    use super::FitModel;

    /// y = 1 - a exp(-t/T1) + b
    pub fn t1_recovery() -> FitModel {
        FitModel::new(
            "t1_recovery",
            &[("a", ""), ("t1", "s"), ("b", "")],
            |th, t| 1.0 - th[0] * (-t / th[1]).exp() + th[2],
        )
    }

    /// y = A sin(omega t + phi) exp(-t/T2*) + B, omega in rad/s
    pub fn damped_sine() -> FitModel {
        FitModel::new(
            "damped_sine",
            &[
                ("amplitude", ""),
                ("omega", "rad/s"),
                ("phase", "rad"),
                ("t2_star", "s"),
                ("offset", ""),
            ],
            |th, t| th[0] * (th[1] * t + th[2]).sin() * (-t / th[3]).exp() + th[4],
        )
    }

    /// Gaussian with amplitude, center, FWHM, offset.
    pub fn gaussian_line() -> FitModel {
        FitModel::new(
            "gaussian_line",
            &[
                ("amplitude", ""),
                ("center", "Hz"),
                ("fwhm", "Hz"),
                ("offset", ""),
            ],
            |th, x| {
                let sigma2 = th[2] * th[2] / (8.0 * std::f64::consts::LN_2);
                th[0] * (-(x - th[1]) * (x - th[1]) / (2.0 * sigma2)).exp() + th[3]
            },
        )
    }

    /// Sum of two Gaussians sharing a width, plus offset; used for
    /// resolving a split line.
    pub fn double_gaussian_line() -> FitModel {
        FitModel::new(
            "double_gaussian_line",
            &[
                ("amplitude1", ""),
                ("center1", "Hz"),
                ("amplitude2", ""),
                ("center2", "Hz"),
                ("fwhm", "Hz"),
                ("offset", ""),
            ],
            |th, x| {
                let sigma2 = th[4] * th[4] / (8.0 * std::f64::consts::LN_2);
                let g = |a: f64, c: f64| a * (-(x - c) * (x - c) / (2.0 * sigma2)).exp();
                g(th[0], th[1]) + g(th[2], th[3]) + th[5]
            },
        )
    }

    /// Branch difference 2 sqrt(lambda^2 + (eps_perp + d_perp Ex V)^2 +
    /// (d_perp Ey V)^2) with the per-volt NV-frame transverse fields baked
    /// in; x is the applied voltage. lambda is typically held fixed.
    pub fn splitting_hyperbola(ex_per_volt: f64, ey_per_volt: f64) -> FitModel {
        FitModel::new(
            "splitting_hyperbola",
            &[
                ("lambda", "Hz"),
                ("eps_perp", "Hz"),
                ("d_perp", "Hz/(V/m)"),
            ],
            move |th, v| {
                let ex = th[1] + th[2] * ex_per_volt * v;
                let ey = th[2] * ey_per_volt * v;
                2.0 * (th[0] * th[0] + ex * ex + ey * ey).sqrt()
            },
        )
    }

    /// y = s * x
    pub fn linear_origin() -> FitModel {
        FitModel::new("linear_origin", &[("slope", "")], |th, x| th[0] * x)
    }
}

/// The named models available to the CLI `fit` subcommand. The splitting
/// hyperbola is built against the provided per-volt transverse NV-frame
/// field components.
pub fn model_library(ex_per_volt: f64, ey_per_volt: f64) -> Vec<FitModel> {
    vec![
        models::t1_recovery(),
        models::damped_sine(),
        models::gaussian_line(),
        models::double_gaussian_line(),
        models::splitting_hyperbola(ex_per_volt, ey_per_volt),
        models::linear_origin(),
    ]
}

pub fn find_model(library: &[FitModel], name: &str) -> Result<FitModel, FitError> {
    library
        .iter()
        .find(|m| m.name == name)
        .cloned()
        .ok_or_else(|| FitError::UnknownModel {
            name: name.to_string(),
            known: library.iter().map(|m| m.name.clone()).collect(),
        })
}

/// Frequency (Hz) of the dominant oscillation in (t, y): periodogram grid
/// search with two refinement passes. Used for unattended initial guesses.
pub fn dominant_frequency(t: &[f64], y: &[f64], f_min: f64, f_max: f64) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let power = |f: f64| {
        let mut re = 0.0;
        let mut im = 0.0;
        for (&ti, &yi) in t.iter().zip(y) {
            let ph = 2.0 * std::f64::consts::PI * f * ti;
            re += (yi - mean) * ph.cos();
            im += (yi - mean) * ph.sin();
        }
        re * re + im * im
    };
    let mut lo = f_min;
    let mut hi = f_max;
    let mut best = 0.5 * (lo + hi);
    for _ in 0..3 {
        let n = 400;
        let mut best_p = f64::NEG_INFINITY;
        for k in 0..=n {
            let f = lo + (hi - lo) * k as f64 / n as f64;
            let p = power(f);
            if p > best_p {
                best_p = p;
                best = f;
            }
        }
        let span = (hi - lo) / n as f64 * 4.0;
        lo = (best - span).max(f_min);
        hi = (best + span).min(f_max);
    }
    best
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapIntervals {
    pub names: Vec<String>,
    pub lower_2p5: Vec<f64>,
    pub upper_97p5: Vec<f64>,
    pub n_resamples: usize,
    pub n_failed: usize,
}

/// Residual-resampling bootstrap around the given fit optimum. Deterministic
/// under a fixed seed: resample k draws from a stream seeded with
/// (seed, k).
pub fn bootstrap(
    model: &FitModel,
    x: &[f64],
    y: &[f64],
    theta_hat: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapIntervals, FitError> {
    if n_resamples < 100 {
        return Err(FitError::TooFewResamples(n_resamples));
    }
    let fitted: Vec<f64> = x.iter().map(|&xi| model.eval(theta_hat, xi)).collect();
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(yi, fi)| yi - fi).collect();
    let n = x.len();

    let results: Vec<Option<Vec<f64>>> = (0..n_resamples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let y_star: Vec<f64> = fitted
                .iter()
                .map(|&fi| fi + resid[rng.gen_range(0..n)])
                .collect();
            match fit(model, x, &y_star, theta_hat) {
                Ok(res) if res.converged => Some(res.theta),
                _ => None,
            }
        })
        .collect();

    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed * 5 > n_resamples {
        return Err(FitError::BootstrapFailed {
            failed,
            total: n_resamples,
        });
    }
    let ok: Vec<&Vec<f64>> = results.iter().flatten().collect();
    let np = theta_hat.len();
    let mut lower = vec![0.0; np];
    let mut upper = vec![0.0; np];
    for j in 0..np {
        let mut vals: Vec<f64> = ok.iter().map(|t| t[j]).collect();
        vals.sort_by(f64::total_cmp);
        let pick = |q: f64| {
            let idx = ((vals.len() - 1) as f64 * q).round() as usize;
            vals[idx]
        };
        lower[j] = pick(0.025);
        upper[j] = pick(0.975);
    }
    Ok(BootstrapIntervals {
        names: model.params.iter().map(|p| p.name.clone()).collect(),
        lower_2p5: lower,
        upper_97p5: upper,
        n_resamples,
        n_failed: failed,
    })
}
