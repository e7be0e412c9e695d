//! W-entropy at `τ = 1/2`, an upper estimate of μ, the coupled entropy
//! evolution and empirical Sobolev constants along a flow.
//!
//! With `dμ = 2π w dx` and the Kähler conventions `Δ = ½ L / w`,
//! `|∇f|² = (1 - x²) f_x² / (2w)`:
//!
//! `W(g, f) = (1/2π) ∫ e^{-f} (R + |∇f|² + f - 2) dμ` on `∫ e^{-f} dμ = 2π`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{KrfError, Result};
use crate::flow::FlowTrajectory;
use crate::geometry::{MetricState, ScalarField, TWO_PI};
use crate::ode::{self, ErrorNorm, StepController};
use crate::spectral::{legendre_derivative, GridSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Default tolerance on `|∫ e^{-f} dμ - 2π|`.
pub const CONSTRAINT_TOL: f64 = 1e-6;

/// `|∫ e^{-f} dμ - 2π|`.
pub fn constraint_residual(state: &MetricState, f: &ScalarField) -> f64 {
    let e: Vec<f64> = f.values().iter().map(|v| (-v).exp()).collect();
    (state.integrate_values(&e) - TWO_PI).abs()
}

/// Both expressions of W: the direct one and the form in
/// `F = e^{-f/2} (2π)^{-1/2}`, `∫(RF² + 4|∇F|² - F² log F²) dμ - 2 - log 2π`.
pub fn w_forms(state: &MetricState, f: &ScalarField) -> Result<(f64, f64)> {
    f.check_grid(state.grid())?;
    let residual = constraint_residual(state, f);
    if !(residual <= CONSTRAINT_TOL) {
        return Err(KrfError::ConstraintViolated { residual });
    }
    let fv = f.values();
    let grad = state.gradient_sq_values(fv);
    let direct: Vec<f64> = fv
        .iter()
        .zip(&grad)
        .zip(state.r())
        .map(|((f, g), r)| (-f).exp() * (r + g + f - 2.0))
        .collect();
    let w = state.integrate_values(&direct) / TWO_PI;

    let big: Vec<f64> = fv.iter().map(|f| (-0.5 * f).exp() / TWO_PI.sqrt()).collect();
    let grad_big = state.gradient_sq_values(&big);
    let f_form: Vec<f64> = big
        .iter()
        .zip(&grad_big)
        .zip(state.r())
        .map(|((b, g), r)| r * b * b + 4.0 * g - b * b * (b * b).ln())
        .collect();
    Ok((w, state.integrate_values(&f_form) - 2.0 - LN_2PI))
}

/// `W(g, f, 1/2)`; fails if the two forms disagree beyond 1e-8.
pub fn w_functional(state: &MetricState, f: &ScalarField) -> Result<f64> {
    let (w, alt) = w_forms(state, f)?;
    if (w - alt).abs() > 1e-8 * w.abs().max(1.0) {
        return Err(KrfError::InvariantViolation(format!("W forms disagree: {w} vs {alt}")));
    }
    Ok(w)
}

/// W evaluated at the Ricci potential, which always satisfies the constraint.
pub fn ricci_entropy(state: &MetricState) -> Result<f64> {
    w_functional(state, &ScalarField::new(state.grid(), state.u().to_vec())?)
}

/// `(1/2π) ∫ e^{-f} (|Ric + ∇∇̄f - ω|² + |∇∇f|²) dμ`.
///
/// In one complex dimension the first norm is `(R + Δf - 1)²`. The second
/// uses `f_{;zz} = f_zz - ∂_z log g_{zz̄} f_z`, which for S¹-invariant `f`
/// becomes `|∇∇f|² = ((1 - x²)/2)² (f_xx - (w_x/w) f_x)² / w²`.
pub fn entropy_rate_integrand(state: &MetricState, f: &ScalarField) -> Result<f64> {
    f.check_grid(state.grid())?;
    let grid = state.grid();
    let modal = f.modal();
    let d1 = legendre_derivative(&modal);
    let fx = grid.to_nodal(&d1);
    let fxx = grid.to_nodal(&legendre_derivative(&d1));
    let wx = grid.derivative(state.w());
    let lap = state.laplacian_values(f.values());
    let vals: Vec<f64> = (0..grid.modes())
        .map(|i| {
            let x = grid.nodes()[i];
            let w = state.w()[i];
            let trace = state.r()[i] + lap[i] - 1.0;
            let hess = 0.5 * (1.0 - x * x) * (fxx[i] - wx[i] / w * fx[i]) / w;
            (-f.values()[i]).exp() * (trace * trace + hess * hess)
        })
        .collect();
    Ok(state.integrate_values(&vals) / TWO_PI)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyRecord {
    pub t: f64,
    pub w: f64,
    pub constraint_residual: f64,
    /// Finite-difference `dW/dt`.
    pub dw_dt: f64,
    /// Monotonicity integrand at `t`.
    pub integrand: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledOptions {
    pub record_times: Vec<f64>,
    pub fd_step: f64,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        CoupledOptions { record_times: (0..=8).map(|k| k as f64 / 8.0).collect(), fd_step: 2.5e-4 }
    }
}

/// Five-point stencil `t + k h` (one-sided at the ends) used for the
/// fourth-order `dW/dt`. Passing these as flow snapshot times makes the
/// metric exact there rather than interpolated.
pub fn stencil(t: f64, h: f64, t_end: f64) -> Vec<f64> {
    let offsets: [f64; 5] = if t - 2.0 * h < 0.0 {
        [0.0, 1.0, 2.0, 3.0, 4.0]
    } else if t + 2.0 * h > t_end {
        [-4.0, -3.0, -2.0, -1.0, 0.0]
    } else {
        [-2.0, -1.0, 0.0, 1.0, 2.0]
    };
    offsets.iter().map(|k| t + k * h).collect()
}

pub fn stencil_times(opts: &CoupledOptions, t_end: f64) -> Vec<f64> {
    let mut out: Vec<f64> = opts.record_times.iter().flat_map(|&t| stencil(t, opts.fd_step, t_end)).collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn curvature_from_w(grid: &GridSpec, w: &[f64]) -> Vec<f64> {
    let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let l = grid.to_nodal(&grid.legendre_operator(&grid.to_modal(&lw)));
    l.iter().zip(w).map(|(l, w)| (1.0 - 0.5 * l) / w).collect()
}

/// Coupled entropy evolution along `traj`.
///
/// `∂_t f = -Δf + |∇f|² - R + 1` is backward parabolic, so it is solved as
/// the conjugate heat equation `∂_t v = -Δv + (R - 1) v` for `v = e^{-f}`
/// backwards from the terminal datum `f_end` at `traj.t_end()`.
pub fn coupled_w_series(
    traj: &FlowTrajectory,
    f_end: &ScalarField,
    opts: &CoupledOptions,
    ctrl: &StepController,
) -> Result<Vec<EntropyRecord>> {
    let grid = traj.grid().clone();
    f_end.check_grid(&grid)?;
    let t_end = traj.t_end();
    let h = opts.fd_step;
    if !(h > 0.0) || opts.record_times.iter().any(|&t| !(0.0..=t_end).contains(&t)) || 4.0 * h > t_end {
        return Err(KrfError::InvalidArgument("record times must lie in the trajectory span".into()));
    }
    let last = traj.state_at(t_end)?;
    let residual = constraint_residual(&last, f_end);
    if !(residual <= CONSTRAINT_TOL) {
        return Err(KrfError::ConstraintViolated { residual });
    }
    let times = stencil_times(opts, t_end);
    let stops: Vec<f64> = times.iter().map(|t| t_end - t).collect();
    let v0: Vec<f64> = f_end.values().iter().map(|f| (-f).exp()).collect();
    let mut rhs = |tau: f64, v: &[f64]| -> Result<Vec<f64>> {
        let w = traj.w_at((t_end - tau).max(0.0))?;
        let r = curvature_from_w(&grid, &w);
        let lv = grid.to_nodal(&grid.legendre_operator(&grid.to_modal(v)));
        Ok((0..v.len()).map(|i| 0.5 * lv[i] / w[i] - (r[i] - 1.0) * v[i]).collect())
    };
    let mut hits: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut sink = |tau: f64, v: &[f64], _: &[f64], stop: bool| -> Result<()> {
        if stop || tau == 0.0 {
            hits.push((t_end - tau, v.to_vec()));
        }
        Ok(())
    };
    ode::integrate(ctrl, 0.0, v0, t_end, &stops, ErrorNorm::Mixed, &mut rhs, &mut |_, _| Ok(()), &mut sink)?;

    let lookup = |t: f64| -> Result<(MetricState, ScalarField)> {
        let (_, v) = hits
            .iter()
            .find(|(s, _)| (s - t).abs() <= 1e-12)
            .ok_or_else(|| KrfError::InvariantViolation(format!("no conjugate solution at t = {t}")))?;
        let f = ScalarField::new(&grid, v.iter().map(|v| -v.ln()).collect())?;
        Ok((traj.state_at(t)?, f))
    };
    let mut out = Vec::with_capacity(opts.record_times.len());
    for &t in &opts.record_times {
        let st = stencil(t, h, t_end);
        let mut ws = [0.0; 5];
        for (k, &s) in st.iter().enumerate() {
            let (state, f) = lookup(s)?;
            ws[k] = w_functional(&state, &f)?;
        }
        let coef: [f64; 5] = if st[2] == t {
            [1.0, -8.0, 0.0, 8.0, -1.0]
        } else if st[0] == t {
            [-25.0, 48.0, -36.0, 16.0, -3.0]
        } else {
            [3.0, -16.0, 36.0, -48.0, 25.0]
        };
        let dw_dt = coef.iter().zip(&ws).map(|(c, w)| c * w).sum::<f64>() / (12.0 * h);
        let (state, f) = lookup(t)?;
        out.push(EntropyRecord {
            t,
            w: w_functional(&state, &f)?,
            constraint_residual: constraint_residual(&state, &f),
            dw_dt,
            integrand: entropy_rate_integrand(&state, &f)?,
        });
    }
    Ok(out)
}

/// An upper estimate of `μ(g, 1/2)`.
#[derive(Debug, Clone)]
pub struct MuEstimate {
    pub value: f64,
    pub iterations: usize,
    /// Objective after every accepted iterate, starting with the initial one.
    pub history: Vec<f64>,
    pub minimizer: ScalarField,
    /// Always true: descent only bounds the infimum from above.
    pub upper_bound: bool,
}

pub const MU_ITERATIONS: usize = 500;

/// Discrete `∫(RF² + 4|∇F|² - F² log F²) dμ - 2 - log 2π` with the Dirichlet
/// term written as `-4∫FΔF dμ` so its nodal gradient is exact.
fn f_energy(state: &MetricState, big: &[f64]) -> f64 {
    let lap = state.laplacian_values(big);
    let vals: Vec<f64> = (0..big.len())
        .map(|i| {
            let b = big[i];
            state.r()[i] * b * b - 4.0 * b * lap[i] - b * b * (b * b).ln()
        })
        .collect();
    state.integrate_values(&vals) - 2.0 - LN_2PI
}

fn normalize(state: &MetricState, big: &mut [f64]) {
    let sq: Vec<f64> = big.iter().map(|b| b * b).collect();
    let n = state.integrate_values(&sq).sqrt();
    big.iter_mut().for_each(|b| *b /= n);
}

/// Projected, preconditioned gradient descent with Armijo backtracking on
/// the unit sphere of `L²(dμ)`, starting from the Ricci potential.
pub fn mu_estimate(state: &MetricState) -> Result<MuEstimate> {
    mu_estimate_with(state, MU_ITERATIONS)
}

pub fn mu_estimate_with(state: &MetricState, max_iter: usize) -> Result<MuEstimate> {
    let grid = state.grid().clone();
    let n = grid.modes();
    let mut big: Vec<f64> = state.u().iter().map(|u| (-0.5 * u).exp() / TWO_PI.sqrt()).collect();
    normalize(state, &mut big);
    let mut energy = f_energy(state, &big);
    let mut history = vec![energy];
    let mut iterations = 0;
    while iterations < max_iter {
        let lap = state.laplacian_values(&big);
        let g: Vec<f64> = (0..n)
            .map(|i| {
                let b = big[i];
                2.0 * (state.r()[i] * b - 4.0 * lap[i] - b * (b * b).ln() - b)
            })
            .collect();
        let gf: Vec<f64> = g.iter().zip(&big).map(|(g, b)| g * b).collect();
        let along = state.integrate_values(&gf);
        let gt: Vec<f64> = g.iter().zip(&big).map(|(g, b)| g - along * b).collect();
        let wg: Vec<f64> = gt.iter().zip(state.w()).map(|(g, w)| g * w).collect();
        let mut c = grid.to_modal(&wg);
        for (k, ck) in c.iter_mut().enumerate() {
            let kk = (k * (k + 1)) as f64;
            *ck /= -2.0 * (1.0 + 2.0 * kk);
        }
        let mut d = grid.to_nodal(&c);
        let df: Vec<f64> = d.iter().zip(&big).map(|(d, b)| d * b).collect();
        let beta = state.integrate_values(&df);
        d.iter_mut().zip(&big).for_each(|(d, b)| *d -= beta * b);
        let slope_vals: Vec<f64> = gt.iter().zip(&d).map(|(g, d)| g * d).collect();
        let slope = state.integrate_values(&slope_vals);
        if !(slope < -1e-15) {
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let mut trial: Vec<f64> = big.iter().zip(&d).map(|(b, d)| b + alpha * d).collect();
            if trial.iter().all(|v| *v > 0.0) {
                normalize(state, &mut trial);
                let e = f_energy(state, &trial);
                if e <= energy + 1e-4 * alpha * slope {
                    accepted = Some((trial, e));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, e)) => {
                big = trial;
                energy = e;
                history.push(e);
                iterations += 1;
            }
            None if slope < -1e-8 => return Err(KrfError::DescentStalled { iterations }),
            None => break,
        }
    }
    let f = ScalarField::new(&grid, big.iter().map(|b| -(TWO_PI * b * b).ln()).collect())?;
    let value = w_functional(state, &f)?;
    Ok(MuEstimate { value, iterations, history, minimizer: f, upper_bound: true })
}

/// Test-function family for the Sobolev probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SobolevEnsemble {
    /// Constants and `P_k` for `k = 1..=max_degree` are always included.
    pub max_degree: usize,
    pub random: usize,
    pub seed: u64,
}

impl Default for SobolevEnsemble {
    fn default() -> Self {
        SobolevEnsemble { max_degree: 6, random: 16, seed: 7 }
    }
}

impl SobolevEnsemble {
    /// Modal coefficients of every member.
    pub fn members(&self, modes: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut one = vec![0.0; modes];
        one[0] = 1.0;
        out.push(one);
        for k in 1..=self.max_degree.min(modes - 1) {
            let mut c = vec![0.0; modes];
            c[k] = 1.0;
            out.push(c);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for _ in 0..self.random {
            let mut c = vec![0.0; modes];
            for (k, ck) in c.iter_mut().enumerate().take(12.min(modes)) {
                *ck = normal.sample(&mut rng) / (1.0 + k as f64).powi(2);
            }
            out.push(c);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SobolevProbe {
    pub n0: f64,
    pub c0: f64,
    pub a_emp: f64,
    pub ensemble: SobolevEnsemble,
    /// `(t, worst ratio over the ensemble)`.
    pub per_time: Vec<(f64, f64)>,
}

impl SobolevProbe {
    /// `(max - min) / max` of the per-time worst ratios.
    pub fn variation(&self) -> f64 {
        let max = self.per_time.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let min = self.per_time.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        (max - min) / max
    }
}

/// `(∫|φ|^{2n₀/(n₀-2)} dμ)^{(n₀-2)/n₀} / ∫(4|∇φ|² + (R + C₀)φ²) dμ`.
pub fn sobolev_ratio(state: &MetricState, phi: &[f64], n0: f64, c0: f64) -> f64 {
    let q = 2.0 * n0 / (n0 - 2.0);
    let pow: Vec<f64> = phi.iter().map(|v| v.abs().powf(q)).collect();
    let lhs = state.integrate_values(&pow).powf(2.0 / q);
    let grad = state.gradient_sq_values(phi);
    let rhs: Vec<f64> = (0..phi.len()).map(|i| 4.0 * grad[i] + (state.r()[i] + c0) * phi[i] * phi[i]).collect();
    lhs / state.integrate_values(&rhs)
}

pub fn sobolev_probe(traj: &FlowTrajectory, ensemble: &SobolevEnsemble, n0: f64, times: &[f64]) -> Result<SobolevProbe> {
    if !(n0 > 2.0) {
        return Err(KrfError::InvalidArgument(format!("n0 = {n0} must exceed 2")));
    }
    let c0 = (-traj.initial().r_min()).max(0.0) + 1.0;
    let grid = traj.grid();
    let members: Vec<Vec<f64>> = ensemble.members(grid.modes()).iter().map(|c| grid.to_nodal(c)).collect();
    let mut per_time = Vec::with_capacity(times.len());
    for &t in times {
        let state = traj.state_at(t)?;
        let worst = members
            .par_iter()
            .map(|phi| sobolev_ratio(&state, phi, n0, c0))
            .reduce(|| f64::NEG_INFINITY, f64::max);
        if !worst.is_finite() {
            return Err(KrfError::InvariantViolation(format!("non-finite Sobolev ratio at t = {t}")));
        }
        per_time.push((t, worst));
    }
    let a_emp = per_time.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(SobolevProbe { n0, c0, a_emp, ensemble: ensemble.clone(), per_time })
}
