//! Prescribed curvature on the moment interval and its realization as a state.
//!
//! With `τ = v' - 1` and `φ(τ) = v''`, curvature is `R = -φ''(τ)`. Given `K`,
//! `φ` is recovered by integrating twice from `τ = -1`; closure at `τ = 1`
//! needs `∫K = 2` and `∫(1 - τ)K = 2`, i.e. Legendre coefficients `k₀ = 1`,
//! `k₁ = 0`. The profile fixes `s(τ) = ∫_0^τ dσ/φ`, and since `v' = 1 + τ`
//! and `v₀' = 1 + x`, the density ratio is `w = dτ/dx`. The potential then
//! follows from `½ L f = w - 1`.

use std::sync::Arc;

use super::{MetricState, Tolerances};
use crate::error::{KrfError, Result};
use crate::spectral::{
    gauss_legendre, legendre_all, legendre_antiderivative, legendre_series, GridSpec,
};

/// Curvature `K(τ)` on [-1, 1] as a Legendre series, with its lower bound `R₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureProfile {
    coeffs: Vec<f64>,
    r0: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ProfileOptions {
    /// Project onto the closure constraints (and clip to `R₀`) first.
    pub project: bool,
    pub tol: Tolerances,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { project: true, tol: Tolerances::default() }
    }
}

impl CurvatureProfile {
    pub fn from_coefficients(mut coeffs: Vec<f64>, r0: f64) -> Result<Self> {
        if !(r0 > 0.0) || coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(KrfError::InvalidArgument("profile needs R0 > 0 and finite coefficients".into()));
        }
        if coeffs.len() < 2 {
            coeffs.resize(2, 0.0);
        }
        Ok(CurvatureProfile { coeffs, r0 })
    }

    /// L² projection of `k` onto Legendre degree `≤ degree`.
    pub fn from_fn<F: Fn(f64) -> f64>(degree: usize, r0: f64, k: F) -> Result<Self> {
        let rule = gauss_legendre(degree + 8);
        let mut coeffs = vec![0.0; degree + 1];
        for (&t, &wt) in rule.nodes.iter().zip(&rule.weights) {
            let kv = k(t);
            for (j, p) in legendre_all(degree, t).into_iter().enumerate() {
                coeffs[j] += (2.0 * j as f64 + 1.0) / 2.0 * wt * kv * p;
            }
        }
        Self::from_coefficients(coeffs, r0)
    }

    pub fn round() -> Self {
        CurvatureProfile { coeffs: vec![1.0, 0.0], r0: 1.0 }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn lower_bound(&self) -> f64 {
        self.r0
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, tau: f64) -> f64 {
        legendre_series(&self.coeffs, tau)
    }

    /// `∫ K dτ`.
    pub fn integral(&self) -> f64 {
        2.0 * self.coeffs[0]
    }

    /// `∫ (1 - τ) K dτ`.
    pub fn first_moment(&self) -> f64 {
        2.0 * self.coeffs[0] - 2.0 / 3.0 * self.coeffs[1]
    }

    pub fn closure_residual(&self) -> f64 {
        (self.integral() - 2.0).abs().max((self.first_moment() - 2.0).abs())
    }

    /// Minimum over a dense Chebyshev sample including the endpoints.
    pub fn min_value(&self) -> f64 {
        let n = 8 * self.coeffs.len() + 64;
        let ts: Vec<f64> = (0..=n).map(|i| (std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
        let ks: Vec<f64> = ts.iter().map(|&t| self.eval(t)).collect();
        let mut min = ks.iter().copied().fold(f64::INFINITY, f64::min);
        // polish every sampled local minimum; the sample spacing alone can
        // miss the true minimum by O(K'' h²)
        for i in 0..=n {
            let left = if i > 0 { ks[i - 1] } else { f64::INFINITY };
            let right = if i < n { ks[i + 1] } else { f64::INFINITY };
            if ks[i] <= left && ks[i] <= right {
                let a = ts[(i + 1).min(n)];
                let b = ts[i.saturating_sub(1)];
                min = min.min(self.golden_min(a, b));
            }
        }
        min
    }

    fn golden_min(&self, mut a: f64, mut b: f64) -> f64 {
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - r * (b - a);
        let mut d = a + r * (b - a);
        let (mut fc, mut fd) = (self.eval(c), self.eval(d));
        for _ in 0..80 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - r * (b - a);
                fc = self.eval(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + r * (b - a);
                fd = self.eval(d);
            }
        }
        fc.min(fd).min(self.eval(a)).min(self.eval(b))
    }

    /// Orthogonal projection onto the closure constraints, then up to two
    /// clip-and-reproject passes to enforce `K ≥ R₀`.
    pub fn projected(&self) -> Result<Self> {
        let mut c = self.coeffs.clone();
        c[0] = 1.0;
        c[1] = 0.0;
        for _ in 0..2 {
            let cur = CurvatureProfile { coeffs: c.clone(), r0: self.r0 };
            if cur.min_value() >= self.r0 {
                break;
            }
            let degree = c.len() - 1;
            let rule = gauss_legendre(2 * degree + 8);
            let mut fit = vec![0.0; degree + 1];
            for (&t, &wt) in rule.nodes.iter().zip(&rule.weights) {
                let kv = cur.eval(t).max(self.r0);
                for (j, p) in legendre_all(degree, t).into_iter().enumerate() {
                    fit[j] += (2.0 * j as f64 + 1.0) / 2.0 * wt * kv * p;
                }
            }
            fit[0] = 1.0;
            fit[1] = 0.0;
            c = fit;
        }
        let out = CurvatureProfile { coeffs: c, r0: self.r0 };
        let min = out.min_value();
        if min <= 0.0 {
            return Err(KrfError::ProfileInfeasible(format!("K reaches {min:e} after projection")));
        }
        if min < self.r0 - 1e-9 {
            return Err(KrfError::ProfileInfeasible(format!(
                "min K = {min} stays below R0 = {} after two clipping passes",
                self.r0
            )));
        }
        Ok(out)
    }

    /// `φ₀(τ) - φ(τ) = ∫_{-1}^{τ} (τ - σ)(K(σ) - 1) dσ`, integrated from the
    /// nearer endpoint so it keeps relative accuracy where it vanishes.
    fn phi_defect(&self, tau: f64) -> f64 {
        let rule = gauss_legendre(self.coeffs.len() / 2 + 3);
        if tau <= 0.0 {
            rule.mapped(-1.0, tau).integrate(|s| (tau - s) * (self.eval(s) - 1.0))
        } else {
            rule.mapped(tau, 1.0).integrate(|s| (s - tau) * (self.eval(s) - 1.0))
        }
    }

    /// Momentum profile `φ(τ)`.
    pub fn phi(&self, tau: f64) -> f64 {
        0.5 * (1.0 + tau) * (1.0 - tau) - self.phi_defect(tau)
    }

    /// `1/φ - 1/φ₀`, which stays bounded at both ends.
    fn g(&self, tau: f64) -> f64 {
        let phi0 = 0.5 * (1.0 + tau) * (1.0 - tau);
        let d = self.phi_defect(tau);
        d / (phi0 * (phi0 - d))
    }

    /// Legendre series of `1/φ - 1/φ₀`, refined until the tail is negligible.
    fn g_series(&self) -> Vec<f64> {
        let mut n = (8 * self.coeffs.len()).max(96);
        loop {
            let rule = gauss_legendre(n);
            let mut c = vec![0.0; n];
            for (&t, &wt) in rule.nodes.iter().zip(&rule.weights) {
                let gv = self.g(t);
                for (j, p) in legendre_all(n - 1, t).into_iter().enumerate() {
                    c[j] += (2.0 * j as f64 + 1.0) / 2.0 * wt * gv * p;
                }
            }
            let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let tail = c[n - 8..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if tail <= 1e-14 * scale || n >= 2048 {
                let keep = c.iter().rposition(|v| v.abs() > 1e-17 * scale).unwrap_or(0) + 1;
                c.truncate(keep);
                return c;
            }
            n *= 2;
        }
    }
}

/// Realizes a curvature profile as a metric on `grid`.
pub fn state_from_curvature_profile(
    profile: &CurvatureProfile,
    grid: &Arc<GridSpec>,
    opts: ProfileOptions,
) -> Result<MetricState> {
    let prof = if opts.project {
        profile.projected()?
    } else {
        let residual = profile.closure_residual();
        if residual > opts.tol.closure {
            return Err(KrfError::ClosureViolation { residual });
        }
        let min = profile.min_value();
        if min <= 0.0 {
            return Err(KrfError::ProfileInfeasible(format!("K reaches {min:e}")));
        }
        profile.clone()
    };

    let g = prof.g_series();
    let big_g = legendre_antiderivative(&g);
    let g_mid = legendre_series(&big_g, 0.0);
    let g_hat = |t: f64| legendre_series(&big_g, t) - g_mid;
    let bound: f64 = big_g.iter().map(|c| c.abs()).sum::<f64>() + g_mid.abs();

    let nodes = grid.nodes();
    let n = nodes.len();
    let mut w = vec![0.0; n];
    w[0] = (-g_hat(-1.0)).exp();
    w[n - 1] = g_hat(1.0).exp();
    for i in 1..n - 1 {
        let x = nodes[i];
        let s = ((1.0 + x) / (1.0 - x)).ln();
        // 2y + Ĝ(tanh y) = s, monotone in y
        let (mut lo, mut hi) = (0.5 * (s - bound) - 1.0, 0.5 * (s + bound) + 1.0);
        let mut y = 0.5 * s;
        for _ in 0..200 {
            let tau = y.tanh();
            let val = 2.0 * y + g_hat(tau) - s;
            if val > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let slope = 2.0 + legendre_series(&g, tau) * (1.0 - tau * tau);
            let mut next = y - val / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - y).abs() <= 1e-15 * y.abs().max(1.0);
            y = next;
            if done {
                break;
            }
        }
        let tau = y.tanh();
        let ratio = (0.5 * s).cosh() / y.cosh();
        let gt = legendre_series(&g, tau);
        w[i] = ratio * ratio / (1.0 + 0.5 * gt / (y.cosh() * y.cosh()));
    }

    let wm = grid.to_modal(&w);
    let (mut f, _) = grid.solve_legendre_operator(&wm);
    f.iter_mut().for_each(|c| *c *= 2.0);
    f[0] = -legendre_series(&f, 0.0);
    let state = MetricState::with_tolerances(grid, f, opts.tol)?;

    let residual = state
        .moment_coordinate()
        .iter()
        .zip(state.r())
        .map(|(&t, &r)| (prof.eval(t.clamp(-1.0, 1.0)) - r).abs())
        .fold(0.0, f64::max);
    if !(residual <= opts.tol.profile) {
        return Err(KrfError::ProfileMismatch { residual });
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scalar_curvature;

    #[test]
    fn constant_profile_gives_round_state() {
        let grid = GridSpec::new(48).unwrap();
        let st = state_from_curvature_profile(&CurvatureProfile::round(), &grid, Default::default())
            .unwrap();
        assert!(st.potential().iter().all(|f| f.abs() < 1e-8));
    }

    #[test]
    fn bump_profile_round_trips() {
        let grid = GridSpec::new(64).unwrap();
        let raw = CurvatureProfile::from_fn(4, 0.5, |t| 1.0 + 0.2 * (t * t - 1.0 / 3.0) * 3.0).unwrap();
        let st = state_from_curvature_profile(&raw, &grid, Default::default()).unwrap();
        let r = scalar_curvature(&st).unwrap();
        let prof = raw.projected().unwrap();
        for (t, rv) in st.moment_coordinate().iter().zip(r.values()) {
            assert!((prof.eval(*t) - rv).abs() < 1e-6);
        }
    }

    #[test]
    fn momentum_profile_from_double_quadrature() {
        // independent oracle: integrate φ'' = -K twice by adaptive Simpson-free
        // Gauss panels and compare with the closed-form defect evaluation
        let prof = CurvatureProfile::from_coefficients(vec![1.0, 0.0, 0.3, -0.1, 0.05], 0.2).unwrap();
        let rule = gauss_legendre(20);
        for &t in &[-0.99, -0.5, 0.0, 0.3, 0.97] {
            let phi_prime = |s: f64| 1.0 - rule.mapped(-1.0, s).integrate(|q| prof.eval(q));
            let phi = rule.mapped(-1.0, t).integrate(phi_prime);
            assert!((phi - prof.phi(t)).abs() < 1e-13, "{t}: {phi} vs {}", prof.phi(t));
        }
        assert!(prof.phi(1.0).abs() < 1e-14);
    }

    #[test]
    fn unprojected_profile_with_bad_mass_is_rejected() {
        let grid = GridSpec::new(32).unwrap();
        let prof = CurvatureProfile::from_coefficients(vec![0.9, 0.0], 0.5).unwrap();
        assert!((prof.integral() - 1.8).abs() < 1e-15);
        let opts = ProfileOptions { project: false, ..Default::default() };
        assert!(matches!(
            state_from_curvature_profile(&prof, &grid, opts),
            Err(KrfError::ClosureViolation { .. })
        ));
    }

    #[test]
    fn projection_enforces_closure() {
        let prof = CurvatureProfile::from_coefficients(vec![1.3, 0.4, 0.1], 0.5).unwrap();
        let p = prof.projected().unwrap();
        assert!(p.closure_residual() < 1e-15);
        assert!(p.min_value() >= 0.5 - 1e-9);
    }

    #[test]
    fn infeasible_profile_is_reported() {
        let prof = CurvatureProfile::from_coefficients(vec![1.0, 0.0, 3.0], 0.9).unwrap();
        assert!(matches!(prof.projected(), Err(KrfError::ProfileInfeasible(_))));
    }

    #[test]
    fn asymmetric_profile_round_trips() {
        let grid = GridSpec::new(96).unwrap();
        let prof = CurvatureProfile::from_coefficients(vec![1.0, 0.0, 0.2, 0.15, -0.1], 0.4).unwrap();
        assert!(prof.min_value() > 0.4);
        let st = state_from_curvature_profile(&prof, &grid, Default::default()).unwrap();
        let err = st
            .moment_coordinate()
            .iter()
            .zip(st.r())
            .map(|(t, r)| (prof.eval(*t) - r).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }
}
