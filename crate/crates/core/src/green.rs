//! Green function of the real Laplacian with its pole at `x = -1`.
//!
//! Convention: `-Δ_real Γ = δ - 1/V` with `∫ Γ dμ = 0`, where
//! `Δ_real = 2Δ = L / w`. Rotation invariance reduces this to the flux law
//! `4π ∂_s Γ = -(1 - A/V)` with `A` the area below the level `s`. Writing
//! `Γ = -(1/4π) log((1+x)/2) + Γ_reg`, the regular part has the smooth flux
//! `∂_x Γ_reg = -(1/2π) ((1+x)/2 - A/V) / (1 - x²)`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{KrfError, Result};
use crate::geometry::{meridian_distance, MetricState, ScalarField, TWO_PI};
use crate::spectral::{gauss_legendre, legendre_all, legendre_antiderivative, legendre_series, log_moment, GridSpec};

const INV_4PI: f64 = 1.0 / (4.0 * PI);

#[derive(Debug, Clone)]
pub struct GreenProfile {
    grid: Arc<GridSpec>,
    /// Legendre series of `Γ_reg`, mean normalization included.
    regular: Vec<f64>,
    /// Nodal values of `Γ`; the pole node holds `+∞`.
    values: Vec<f64>,
    /// `∫ Γ dμ` after normalization (roundoff only).
    mean_residual: f64,
}

fn singular(x: f64) -> f64 {
    -INV_4PI * (0.5 * (1.0 + x)).ln()
}

impl GreenProfile {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn regular_coefficients(&self) -> &[f64] {
        &self.regular
    }

    pub fn eval(&self, x: f64) -> f64 {
        singular(x) + legendre_series(&self.regular, x)
    }

    /// `Γ` at `x = y - 1`, accurate for tiny `y`.
    pub fn eval_from_pole(&self, y: f64) -> f64 {
        -INV_4PI * (0.5 * y).ln() + legendre_series(&self.regular, y - 1.0)
    }

    pub fn mean_residual(&self) -> f64 {
        self.mean_residual
    }

    /// Minimum over the grid (the pole excluded).
    pub fn min(&self) -> f64 {
        self.values[1..].iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn green_profile(state: &MetricState) -> Result<GreenProfile> {
    let grid = state.grid();
    let n = grid.modes();
    // W(x) = ∫_{-1}^x w, so A/V = W/2
    let big_w = legendre_antiderivative(&grid.to_modal(state.w()));
    let rule = gauss_legendre(n + 8);
    let mut flux = vec![0.0; n];
    for (&x, &wt) in rule.nodes.iter().zip(&rule.weights) {
        let g = -(0.5 * (1.0 + x) - 0.5 * legendre_series(&big_w, x)) / ((1.0 - x * x) * TWO_PI);
        for (k, p) in legendre_all(n - 1, x).into_iter().enumerate() {
            flux[k] += (2.0 * k as f64 + 1.0) / 2.0 * wt * g * p;
        }
    }
    let mut regular = legendre_antiderivative(&flux);
    regular.truncate(n);

    // ∫ Γ_sing dμ = 2π ∫ -(1/4π) log((1+x)/2) w dx, exactly from log moments
    let w_modal = grid.to_modal(state.w());
    let sing_mass: f64 = -0.5 * w_modal.iter().enumerate().map(|(k, c)| c * log_moment(k)).sum::<f64>();
    let reg_nodal = grid.to_nodal(&regular);
    let reg_mass = state.integrate_values(&reg_nodal);
    regular[0] -= (sing_mass + reg_mass) / state.volume();

    let reg_nodal = grid.to_nodal(&regular);
    let values: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(&reg_nodal)
        .map(|(&x, r)| if x == -1.0 { f64::INFINITY } else { singular(x) + r })
        .collect();
    let mean_residual = sing_mass + state.integrate_values(&reg_nodal);
    Ok(GreenProfile { grid: grid.clone(), regular, values, mean_residual })
}

/// `sup |Δ_real Γ - 1/V|` over the nodes away from the pole.
pub fn equation_residual(gp: &GreenProfile, state: &MetricState) -> Result<f64> {
    state.check_grid(&gp.grid)?;
    let lreg = gp.grid.to_nodal(&gp.grid.legendre_operator(&gp.regular));
    Ok(state
        .w()
        .iter()
        .zip(&lreg)
        .skip(1)
        .map(|(w, l)| ((INV_4PI + l) / w - 1.0 / state.volume()).abs())
        .fold(0.0, f64::max))
}

/// `sup |4π ∂_s Γ + 1 - A/V|` at the nodes.
pub fn flux_residual(gp: &GreenProfile, state: &MetricState) -> Result<f64> {
    state.check_grid(&gp.grid)?;
    let grid = &gp.grid;
    let dreg = grid.to_nodal(&crate::spectral::legendre_derivative(&gp.regular));
    let big_w = legendre_antiderivative(&grid.to_modal(state.w()));
    Ok(grid
        .nodes()
        .iter()
        .zip(&dreg)
        .map(|(&x, d)| {
            let gamma_s = -(1.0 - x) / (8.0 * PI) + 0.5 * (1.0 - x * x) * d;
            let area_frac = TWO_PI * legendre_series(&big_w, x) / state.volume();
            (4.0 * PI * gamma_s + 1.0 - area_frac).abs()
        })
        .fold(0.0, f64::max))
}

/// Fitted constants of `-C < Γ ≤ C |log d| + C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogBoundFit {
    pub c_lower: f64,
    pub c_log: f64,
}

pub fn log_bound_fit(gp: &GreenProfile, state: &MetricState) -> Result<LogBoundFit> {
    state.check_grid(&gp.grid)?;
    let c_lower = -gp.min();
    let mut c_log = 0.0f64;
    for (&x, &g) in gp.grid.nodes().iter().zip(&gp.values).skip(1) {
        let d = meridian_distance(state, -1.0, x)?;
        c_log = c_log.max(g / (d.ln().abs() + 1.0));
    }
    Ok(LogBoundFit { c_lower, c_log })
}

/// Least-squares slope of `Γ` against `log(1/d)` at points
/// `1 + x = 10^{-k}`, `k = 4..=10`, approaching the pole.
pub fn near_pole_slope(gp: &GreenProfile, state: &MetricState) -> Result<f64> {
    let mut pts = Vec::new();
    for k in 4..=10 {
        let x = -1.0 + 10f64.powi(-k);
        let d = meridian_distance(state, -1.0, x)?;
        pts.push(((1.0 / d).ln(), gp.eval(x)));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>())
}

/// `∫ Γ G dμ` for `G = -Δ_real F`, evaluated as `-2π ∫ Γ (L F) dx` with the
/// logarithmic part integrated exactly.
fn green_pairing(gp: &GreenProfile, lf_modal: &[f64]) -> f64 {
    let sing: f64 = -INV_4PI * lf_modal.iter().enumerate().map(|(k, c)| c * log_moment(k)).sum::<f64>();
    let rule = gauss_legendre(gp.regular.len() + lf_modal.len());
    let reg = rule.integrate(|x| legendre_series(&gp.regular, x) * legendre_series(lf_modal, x));
    -TWO_PI * (sing + reg)
}

/// Residual of the Green representation
/// `F(pole) = (1/V) ∫ F dμ + ∫ Γ (-Δ_real F) dμ`.
pub fn mean_value_bound(state: &MetricState, field: &ScalarField) -> Result<f64> {
    let gp = green_profile(state)?;
    mean_value_residual(&gp, state, field)
}

pub fn mean_value_residual(gp: &GreenProfile, state: &MetricState, field: &ScalarField) -> Result<f64> {
    field.check_grid(&gp.grid)?;
    state.check_grid(&gp.grid)?;
    let modal = field.modal();
    let lf = gp.grid.legendre_operator(&modal);
    let pole = legendre_series(&modal, -1.0);
    let mean = state.integrate_values(field.values()) / state.volume();
    Ok(pole - mean - green_pairing(gp, &lf))
}

/// The mean-value inequality `(1/V) ∫ u ≤ u(pole) + 2(1 + C₀) B V` with
/// `B = C_lower` and `R ≥ -C₀`. Returns `(lhs, rhs)`.
pub fn mean_value_inequality(gp: &GreenProfile, state: &MetricState, c0: f64) -> Result<(f64, f64)> {
    let b = log_bound_fit(gp, state)?.c_lower;
    let lhs = state.integrate_values(state.u()) / state.volume();
    let rhs = state.eval_u(-1.0) + 2.0 * (1.0 + c0) * b * state.volume();
    Ok((lhs, rhs))
}

/// `∫ |Γ|^p dμ`, integrated on geometric panels toward the pole.
pub fn lp_integral(gp: &GreenProfile, state: &MetricState, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(KrfError::InvalidArgument(format!("p must be at least 1, got {p}")));
    }
    let rule = gauss_legendre(gp.regular.len().max(24) + 8);
    let mut total = 0.0;
    let mut hi = 2.0f64;
    // panels [2·10^{-k-1}, 2·10^{-k}] in 1+x, then the bulk
    let mut edges = vec![2.0];
    for k in 1..=20 {
        edges.push(2.0 * 10f64.powi(-k));
    }
    for &lo in &edges[1..] {
        total += rule
            .mapped(lo, hi)
            .integrate(|y| gp.eval_from_pole(y).abs().powf(p) * state.eval_w(y - 1.0));
        hi = lo;
    }
    Ok(TWO_PI * total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perturbed(grid: &Arc<GridSpec>) -> MetricState {
        let mut c = vec![0.0; grid.modes()];
        c[1] = 0.08;
        c[2] = 0.15;
        c[3] = -0.05;
        c[6] = 0.01;
        MetricState::from_coefficients(grid, c).unwrap()
    }

    #[test]
    fn round_profile_matches_closed_form() {
        let grid = GridSpec::new(64).unwrap();
        let st = MetricState::round(&grid);
        let gp = green_profile(&st).unwrap();
        for &x in grid.nodes().iter().skip(1) {
            let s = ((1.0 + x) / (1.0 - x)).ln();
            let exact = -((s.exp() / (1.0 + s.exp())).ln() + 1.0) / (4.0 * PI);
            let exact = if s > 30.0 { -1.0 / (4.0 * PI) } else { exact };
            assert!((gp.eval(x) - exact).abs() < 1e-8, "{x}");
        }
        assert!((gp.min() + 1.0 / (4.0 * PI)).abs() < 1e-10);
        assert!(gp.mean_residual().abs() < 1e-9);
        let fit = log_bound_fit(&gp, &st).unwrap();
        assert!((fit.c_lower - 1.0 / (4.0 * PI)).abs() < 1e-10);
        let slope = near_pole_slope(&gp, &st).unwrap();
        assert!((slope * 2.0 * PI - 1.0).abs() < 0.02, "{slope}");
    }

    #[test]
    fn regular_part_matches_potential_oracle() {
        // Γ_reg = f/(8π) + const
        let grid = GridSpec::new(64).unwrap();
        let st = perturbed(&grid);
        let gp = green_profile(&st).unwrap();
        let diffs: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| legendre_series(gp.regular_coefficients(), x) - st.eval_f(x) / (8.0 * PI))
            .collect();
        let spread = diffs.iter().fold(f64::NEG_INFINITY, |m: f64, d| m.max(*d))
            - diffs.iter().fold(f64::INFINITY, |m: f64, d| m.min(*d));
        assert!(spread < 1e-12, "{spread}");
        assert!(gp.mean_residual().abs() < 1e-9);
        assert!(equation_residual(&gp, &st).unwrap() < 1e-7);
        assert!(flux_residual(&gp, &st).unwrap() < 1e-10);
    }

    #[test]
    fn representation_identity() {
        let grid = GridSpec::new(64).unwrap();
        let round = MetricState::round(&grid);
        let p2 = ScalarField::from_fn(&grid, |x| 0.5 * (3.0 * x * x - 1.0)).unwrap();
        assert!(mean_value_bound(&round, &p2).unwrap().abs() < 1e-7);
        let c = ScalarField::constant(&grid, 2.5);
        assert!(mean_value_bound(&round, &c).unwrap().abs() < 1e-12);
        let st = perturbed(&grid);
        let u = ScalarField::new(&grid, st.u().to_vec()).unwrap();
        assert!(mean_value_bound(&st, &u).unwrap().abs() < 1e-6);
        let gp = green_profile(&st).unwrap();
        let c0 = (-st.r_min()).max(0.0) + 1.0;
        let (lhs, rhs) = mean_value_inequality(&gp, &st, c0).unwrap();
        assert!(lhs <= rhs);
    }

    #[test]
    fn lp_norms_are_finite_and_increase() {
        let grid = GridSpec::new(32).unwrap();
        let st = MetricState::round(&grid);
        let gp = green_profile(&st).unwrap();
        // ∫ Γ dμ = 0 check through the same panels
        let rule = gauss_legendre(40);
        let mut signed = 0.0;
        let mut hi = 2.0f64;
        for k in 1..=20 {
            let lo = 2.0 * 10f64.powi(-k);
            signed += rule.mapped(lo, hi).integrate(|y| gp.eval_from_pole(y));
            hi = lo;
        }
        assert!((TWO_PI * signed).abs() < 1e-9);
        let mut prev = 0.0;
        for p in [1.0, 2.0, 4.0, 8.0] {
            let v = (lp_integral(&gp, &st, p).unwrap() / st.volume()).powf(1.0 / p);
            assert!(v.is_finite() && v >= prev * (1.0 - 1e-12));
            prev = v;
        }
    }
}
