//! Rotation-invariant Kähler metrics on the Riemann sphere.
//!
//! Conventions (used by every other module):
//! * `s = log|z|²`, grid variable `x = tanh(s/2)`; the poles are `x = ±1`.
//! * background potential `v₀(s) = 2 log(1 + e^s)`, so `v₀'' = (1 - x²)/2`.
//! * a state is `v = v₀ + f` with `f` a Legendre series in `x`; the density
//!   ratio is `w = v''/v₀'' = 1 + ½ L f` where `L = d/dx (1 - x²) d/dx`.
//! * `R = -(log v'')_ss / v'' = (1 - ½ L log w) / w` (Gaussian curvature).
//! * `Δ F = F_ss / v'' = ½ L F / w` (half the Laplace-Beltrami operator).
//! * `dμ = v'' ds dθ = 2π w dx`, total volume `4π`.
//! * `|∇F|² = F_s² / v'' = (1 - x²) F_x² / (2w)`.
//! * meridian arc length `dℓ = sqrt(v''/2) ds = sqrt(w / (1 - x²)) dx`.
//! * Ricci potential `u` solves `Δu = 1 - R` with `∫ e^{-u} dμ = 2π`;
//!   `h` solves `Δh = R - 1` with `∫ e^{h} dμ = 2π`.

mod profile;

pub use profile::{state_from_curvature_profile, CurvatureProfile, ProfileOptions};

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{KrfError, Result};
use crate::spectral::{gauss_legendre, legendre_derivative, legendre_series, GridSpec};

pub const FOUR_PI: f64 = 4.0 * PI;
pub const TWO_PI: f64 = 2.0 * PI;

/// Numerical tolerances of the geometry layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub vol: f64,
    pub gb: f64,
    pub pde: f64,
    pub norm: f64,
    pub w_floor: f64,
    pub profile: f64,
    pub closure: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            vol: 1e-8,
            gb: 1e-8,
            pde: 1e-7,
            norm: 1e-7,
            w_floor: 1e-10,
            profile: 1e-6,
            closure: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Parity {
    Even,
    Odd,
    Mixed,
}

/// Nodal values on a collocation grid.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: &Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.modes() {
            return Err(KrfError::GridMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KrfError::InvalidArgument("non-finite field value".into()));
        }
        Ok(ScalarField { grid: grid.clone(), values })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: &Arc<GridSpec>, f: F) -> Result<Self> {
        Self::new(grid, grid.nodes().iter().map(|&x| f(x)).collect())
    }

    pub fn from_modal(grid: &Arc<GridSpec>, coeffs: &[f64]) -> Result<Self> {
        let mut c = coeffs.to_vec();
        c.resize(grid.modes(), 0.0);
        Self::new(grid, grid.to_nodal(&c))
    }

    pub fn constant(grid: &Arc<GridSpec>, c: f64) -> Self {
        ScalarField { grid: grid.clone(), values: vec![c; grid.modes()] }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn modal(&self) -> Vec<f64> {
        self.grid.to_modal(&self.values)
    }

    /// Evaluates the interpolating polynomial at an arbitrary x.
    pub fn eval(&self, x: f64) -> f64 {
        legendre_series(&self.modal(), x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Parity in x, read off the odd/even Legendre coefficients.
    pub fn parity(&self) -> Parity {
        let c = self.modal();
        let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let odd = c.iter().skip(1).step_by(2).fold(0.0f64, |m, v| m.max(v.abs()));
        let even = c.iter().step_by(2).fold(0.0f64, |m, v| m.max(v.abs()));
        if odd <= 1e-12 * scale {
            Parity::Even
        } else if even <= 1e-12 * scale {
            Parity::Odd
        } else {
            Parity::Mixed
        }
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if self.grid.same_as(grid) {
            Ok(())
        } else {
            Err(KrfError::GridMismatch)
        }
    }
}

/// An S¹-invariant Kähler metric in the class of the round metric, as a
/// Legendre series for the potential offset `f`, plus cached fields.
#[derive(Debug, Clone)]
pub struct MetricState {
    grid: Arc<GridSpec>,
    tol: Tolerances,
    coeffs: Vec<f64>,
    f: Vec<f64>,
    f_x: Vec<f64>,
    f_xx: Vec<f64>,
    w: Vec<f64>,
    w_modal: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    u_modal: Vec<f64>,
    h: Vec<f64>,
    volume: f64,
    total_curvature: f64,
    poisson_residual: f64,
}

impl MetricState {
    pub fn round(grid: &Arc<GridSpec>) -> MetricState {
        Self::from_coefficients(grid, vec![0.0; grid.modes()])
            .expect("round metric satisfies every invariant")
    }

    pub fn from_coefficients(grid: &Arc<GridSpec>, coeffs: Vec<f64>) -> Result<MetricState> {
        Self::with_tolerances(grid, coeffs, Tolerances::default())
    }

    /// Builds a state from modal coefficients of `f`, computing every cache
    /// and enforcing positivity, volume, Gauss-Bonnet and the Poisson residual.
    pub fn with_tolerances(
        grid: &Arc<GridSpec>,
        mut coeffs: Vec<f64>,
        tol: Tolerances,
    ) -> Result<MetricState> {
        if coeffs.len() > grid.modes() {
            return Err(KrfError::GridMismatch);
        }
        coeffs.resize(grid.modes(), 0.0);
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(KrfError::InvalidArgument("non-finite potential coefficient".into()));
        }
        let f = grid.to_nodal(&coeffs);
        let w_modal = half_legendre_plus_one(grid, &coeffs);
        let w = grid.to_nodal(&w_modal);
        let min_w = w.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min_w > tol.w_floor) {
            return Err(KrfError::PositivityLoss { min_w });
        }
        let d1 = legendre_derivative(&coeffs);
        let f_x = grid.to_nodal(&d1);
        let f_xx = grid.to_nodal(&legendre_derivative(&d1));

        let log_w: Vec<f64> = w.iter().map(|v| v.ln()).collect();
        let l_log_w = grid.to_nodal(&grid.legendre_operator(&grid.to_modal(&log_w)));
        let r: Vec<f64> = w.iter().zip(&l_log_w).map(|(wi, li)| (1.0 - 0.5 * li) / wi).collect();

        let volume = TWO_PI * grid.quad(&w);
        let rw: Vec<f64> = r.iter().zip(&w).map(|(a, b)| a * b).collect();
        let total_curvature = TWO_PI * grid.quad(&rw);
        if (volume - FOUR_PI).abs() > tol.vol {
            return Err(KrfError::InvariantViolation(format!("volume {volume} != 4π")));
        }
        if (total_curvature - FOUR_PI).abs() > tol.gb {
            return Err(KrfError::InvariantViolation(format!(
                "∫R dμ = {total_curvature} != 4π"
            )));
        }

        // Δu = 1 - R  <=>  L u = 2 w (1 - R)
        let rhs: Vec<f64> = w.iter().zip(&r).map(|(wi, ri)| 2.0 * wi * (1.0 - ri)).collect();
        let (mut u_modal, _) = grid.solve_legendre_operator(&grid.to_modal(&rhs));
        let mut u = grid.to_nodal(&u_modal);
        let lu = grid.to_nodal(&grid.legendre_operator(&u_modal));
        let poisson_residual = lu
            .iter()
            .zip(w.iter().zip(&r))
            .map(|(l, (wi, ri))| (0.5 * l / wi - (1.0 - ri)).abs())
            .fold(0.0, f64::max);
        if !(poisson_residual <= tol.pde) {
            return Err(KrfError::SolveFailure { residual: poisson_residual });
        }
        let mass: f64 = TWO_PI * grid.quad(&mul(&u.iter().map(|v| (-v).exp()).collect::<Vec<_>>(), &w));
        let shift = (mass / TWO_PI).ln();
        u.iter_mut().for_each(|v| *v += shift);
        u_modal[0] += shift;
        let eh: Vec<f64> = u.iter().map(|v| (-v).exp()).collect();
        let h_shift = (TWO_PI / (TWO_PI * grid.quad(&mul(&eh, &w)))).ln();
        let h = u.iter().map(|v| -v + h_shift).collect();

        Ok(MetricState {
            grid: grid.clone(),
            tol,
            coeffs,
            f,
            f_x,
            f_xx,
            w,
            w_modal,
            r,
            u,
            u_modal,
            h,
            volume,
            total_curvature,
            poisson_residual,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if self.grid.same_as(grid) {
            Ok(())
        } else {
            Err(KrfError::GridMismatch)
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn potential(&self) -> &[f64] {
        &self.f
    }

    /// `df/dx` at the nodes.
    pub fn potential_dx(&self) -> &[f64] {
        &self.f_x
    }

    pub fn potential_dxx(&self) -> &[f64] {
        &self.f_xx
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn u_modal(&self) -> &[f64] {
        &self.u_modal
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn total_curvature(&self) -> f64 {
        self.total_curvature
    }

    pub fn poisson_residual(&self) -> f64 {
        self.poisson_residual
    }

    pub fn r_min(&self) -> f64 {
        self.r.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn r_max(&self) -> f64 {
        self.r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn w_min(&self) -> f64 {
        self.w.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn eval_f(&self, x: f64) -> f64 {
        legendre_series(&self.coeffs, x)
    }

    pub fn eval_w(&self, x: f64) -> f64 {
        legendre_series(&self.w_modal, x)
    }

    pub fn eval_u(&self, x: f64) -> f64 {
        legendre_series(&self.u_modal, x)
    }

    /// Moment coordinate `τ = v'(s) - 1 = x + ½(1 - x²) f_x` at the nodes.
    pub fn moment_coordinate(&self) -> Vec<f64> {
        self.grid
            .nodes()
            .iter()
            .zip(&self.f_x)
            .map(|(x, fx)| x + 0.5 * (1.0 - x * x) * fx)
            .collect()
    }

    /// `2π Σ ω_i F_i w_i`, i.e. `∫ F dμ`.
    pub fn integrate_values(&self, values: &[f64]) -> f64 {
        TWO_PI * self.grid.weights().iter().zip(values).zip(&self.w).map(|((a, b), c)| a * b * c).sum::<f64>()
    }

    /// Measure-weighted mean and standard deviation of nodal data.
    pub fn mean_and_spread(&self, values: &[f64]) -> (f64, f64) {
        let mean = self.integrate_values(values) / self.volume;
        let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        (mean, (self.integrate_values(&sq) / self.volume).max(0.0).sqrt())
    }

    pub fn laplacian_values(&self, values: &[f64]) -> Vec<f64> {
        let lf = self.grid.to_nodal(&self.grid.legendre_operator(&self.grid.to_modal(values)));
        lf.iter().zip(&self.w).map(|(l, w)| 0.5 * l / w).collect()
    }

    pub fn gradient_sq_values(&self, values: &[f64]) -> Vec<f64> {
        let fx = self.grid.derivative(values);
        self.grid
            .nodes()
            .iter()
            .zip(fx.iter().zip(&self.w))
            .map(|(x, (d, w))| (1.0 - x * x) * d * d / (2.0 * w))
            .collect()
    }
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Modal coefficients of `1 + ½ L f`.
fn half_legendre_plus_one(grid: &GridSpec, coeffs: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = grid.legendre_operator(coeffs).iter().map(|c| 0.5 * c).collect();
    w[0] += 1.0;
    w
}

pub fn round_state(grid: &Arc<GridSpec>) -> MetricState {
    MetricState::round(grid)
}

pub fn density_ratio(state: &MetricState) -> Result<ScalarField> {
    let min_w = state.w_min();
    if !(min_w > state.tol.w_floor) {
        return Err(KrfError::PositivityLoss { min_w });
    }
    ScalarField::new(&state.grid, state.w.clone())
}

pub fn scalar_curvature(state: &MetricState) -> Result<ScalarField> {
    density_ratio(state)?;
    ScalarField::new(&state.grid, state.r.clone())
}

pub fn laplacian(state: &MetricState, field: &ScalarField) -> Result<ScalarField> {
    field.check_grid(&state.grid)?;
    ScalarField::new(&state.grid, state.laplacian_values(&field.values))
}

pub fn integrate(state: &MetricState, field: &ScalarField) -> Result<f64> {
    field.check_grid(&state.grid)?;
    Ok(state.integrate_values(&field.values))
}

/// Below this density ratio the meridian integrand is treated as degenerate.
pub const DEGENERATE_W: f64 = 1e-8;

/// Arc length along a meridian between `x1` and `x2` (any points of [-1, 1]).
///
/// With `x = cos θ` the line element becomes `sqrt(w(cos θ)) dθ`, which is
/// smooth up to the poles.
pub fn meridian_distance(state: &MetricState, x1: f64, x2: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x1) || !(-1.0..=1.0).contains(&x2) {
        return Err(KrfError::InvalidArgument(format!("points {x1}, {x2} outside [-1, 1]")));
    }
    let (t1, t2) = (x1.acos(), x2.acos());
    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
    if hi - lo == 0.0 {
        return Ok(0.0);
    }
    let rule = gauss_legendre(state.grid.modes().max(32) + 16).mapped(lo, hi);
    let mut total = 0.0;
    for (&t, &wt) in rule.nodes.iter().zip(&rule.weights) {
        let w = state.eval_w(t.cos());
        if w <= DEGENERATE_W {
            return Err(KrfError::DegenerateMetric { min_w: w });
        }
        total += wt * w.sqrt();
    }
    if state.w_min() <= DEGENERATE_W {
        return Err(KrfError::DegenerateMetric { min_w: state.w_min() });
    }
    Ok(total)
}

/// Pole-to-pole meridian length, the diameter proxy.
pub fn diameter_proxy(state: &MetricState) -> Result<f64> {
    meridian_distance(state, -1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::legendre;

    fn p2_state(grid: &Arc<GridSpec>, eps: f64) -> MetricState {
        let mut c = vec![0.0; grid.modes()];
        c[2] = eps;
        MetricState::from_coefficients(grid, c).unwrap()
    }

    #[test]
    fn round_state_closed_forms() {
        let grid = GridSpec::new(64).unwrap();
        let st = round_state(&grid);
        assert!(st.r().iter().all(|r| (r - 1.0).abs() < 1e-10));
        assert!((st.volume() - FOUR_PI).abs() < 1e-12);
        assert!((diameter_proxy(&st).unwrap() - PI).abs() < 1e-8);
        assert!((meridian_distance(&st, -1.0, 0.0).unwrap() - PI / 2.0).abs() < 1e-8);
        assert!(st.u().iter().all(|u| (u - 2f64.ln()).abs() < 1e-12));
        assert!(st.h().iter().all(|h| (h + 2f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn density_ratio_linearizes_with_halved_eigenvalue() {
        let grid = GridSpec::new(32).unwrap();
        let eps = 1e-4;
        let st = p2_state(&grid, eps);
        let w = density_ratio(&st).unwrap();
        for (&x, &wi) in grid.nodes().iter().zip(w.values()) {
            let p2 = legendre(2, x).0;
            assert!((wi - (1.0 - 3.0 * eps * p2)).abs() < 1e-12);
        }
    }

    #[test]
    fn too_large_potential_is_rejected() {
        let grid = GridSpec::new(32).unwrap();
        let mut c = vec![0.0; 32];
        c[2] = 0.5; // w = 1 - 1.5 P2 < 0 at the poles
        assert!(matches!(
            MetricState::from_coefficients(&grid, c),
            Err(KrfError::PositivityLoss { .. })
        ));
    }

    #[test]
    fn curvature_matches_finite_difference_in_s() {
        // R = -(log v'')_ss / v'' evaluated by central differences in s.
        let grid = GridSpec::new(48).unwrap();
        let mut c = vec![0.0; 48];
        c[1] = 0.05;
        c[2] = 0.08;
        c[3] = -0.03;
        let st = MetricState::from_coefficients(&grid, c.clone()).unwrap();
        let vpp = |s: f64| {
            let x = (s / 2.0).tanh();
            let w = st.eval_w(x);
            0.5 * (1.0 - x * x) * w
        };
        let h = 1e-3;
        for (i, &x) in grid.nodes().iter().enumerate() {
            if x.abs() > 0.95 {
                continue;
            }
            let s = ((1.0 + x) / (1.0 - x)).ln();
            let lp = |s: f64| vpp(s).ln();
            let d2 = (lp(s + h) - 2.0 * lp(s) + lp(s - h)) / (h * h);
            let r = -d2 / vpp(s);
            assert!((r - st.r()[i]).abs() < 1e-5, "x={x}: {r} vs {}", st.r()[i]);
        }
    }

    #[test]
    fn laplacian_of_legendre_modes_on_round() {
        let grid = GridSpec::new(32).unwrap();
        let st = round_state(&grid);
        for k in 0..6 {
            let f = ScalarField::from_fn(&grid, |x| legendre(k, x).0).unwrap();
            let lf = laplacian(&st, &f).unwrap();
            let lam = -((k * (k + 1)) as f64) / 2.0;
            for (a, b) in lf.values().iter().zip(f.values()) {
                assert!((a - lam * b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn divergence_theorem_and_gauss_bonnet() {
        let grid = GridSpec::new(64).unwrap();
        let mut c = vec![0.0; 64];
        c[1] = 0.1;
        c[2] = -0.12;
        c[5] = 0.02;
        let st = MetricState::from_coefficients(&grid, c).unwrap();
        let f = ScalarField::from_fn(&grid, |x| (2.0 * x).sin() + x * x * x).unwrap();
        let lf = laplacian(&st, &f).unwrap();
        assert!(integrate(&st, &lf).unwrap().abs() < 1e-9 * f.sup_norm());
        assert!((st.total_curvature() - FOUR_PI).abs() < 1e-10);
        assert!((st.volume() - FOUR_PI).abs() < 1e-12);
    }

    #[test]
    fn ricci_potential_has_closed_form() {
        // u = f + log w + const, from u_ss = v'' + (log v'')_ss.
        let grid = GridSpec::new(64).unwrap();
        let mut c = vec![0.0; 64];
        c[2] = 0.1;
        c[3] = 0.04;
        let st = MetricState::from_coefficients(&grid, c).unwrap();
        let closed: Vec<f64> = st.potential().iter().zip(st.w()).map(|(f, w)| f + w.ln()).collect();
        let offset = st.u()[0] - closed[0];
        for (a, b) in st.u().iter().zip(&closed) {
            assert!((a - b - offset).abs() < 1e-10);
        }
        let mass = st.integrate_values(&st.u().iter().map(|u| (-u).exp()).collect::<Vec<_>>());
        assert!((mass - TWO_PI).abs() < 1e-10);
    }

    #[test]
    fn spectral_convergence_under_mode_doubling() {
        let build = |n: usize| {
            let grid = GridSpec::new(n).unwrap();
            let mut c = vec![0.0; n];
            c[2] = 0.1;
            c[4] = -0.02;
            MetricState::from_coefficients(&grid, c).unwrap()
        };
        let (a, b) = (build(48), build(96));
        for (i, &x) in a.grid().nodes().iter().enumerate() {
            let rb = ScalarField::new(b.grid(), b.r().to_vec()).unwrap().eval(x);
            assert!((a.r()[i] - rb).abs() < 1e-8);
            assert!((a.w()[i] - b.eval_w(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn even_data_stay_even() {
        let grid = GridSpec::new(32).unwrap();
        let st = p2_state(&grid, 0.1);
        for vals in [st.r(), st.u(), st.potential(), st.w()] {
            let fld = ScalarField::new(&grid, vals.to_vec()).unwrap();
            assert_eq!(fld.parity(), Parity::Even);
        }
    }

    #[test]
    fn meridian_distance_flags_degenerate_metric() {
        let grid = GridSpec::new(32).unwrap();
        let tol = Tolerances { w_floor: 1e-14, pde: 1.0, ..Tolerances::default() };
        // w = 1 - 1.5·ε·P2·2 with ε tuned so w(±1) ≈ 1e-9
        let eps = (1.0 - 1e-9) / 3.0;
        let mut c = vec![0.0; 32];
        c[2] = eps;
        let st = MetricState::with_tolerances(&grid, c, tol).unwrap();
        assert!(matches!(
            meridian_distance(&st, -1.0, 1.0),
            Err(KrfError::DegenerateMetric { .. })
        ));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let g1 = GridSpec::new(16).unwrap();
        let g2 = GridSpec::new(24).unwrap();
        let st = round_state(&g1);
        let f = ScalarField::constant(&g2, 1.0);
        assert_eq!(laplacian(&st, &f).unwrap_err(), KrfError::GridMismatch);
    }
}
