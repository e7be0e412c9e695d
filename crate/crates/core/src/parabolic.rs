//! Heat equation `∂F = Δ_{g(t)} F + a F` along a flow and the Moser-type
//! sup bound `sup F(·, t) ≤ C t^{-(n₀+2)/(2p)} (∫₀¹∫ F^p dμ dt)^{1/p}`.

use std::sync::Arc;

use crate::error::{KrfError, Result};
use crate::flow::FlowTrajectory;
use crate::geometry::{ScalarField, TWO_PI};
use crate::ode::{self, hermite, ErrorNorm, StepController, StepLog};
use crate::spectral::GridSpec;

/// Dyadic sampling times `2^{-k}`, `k = 0..=10`, in increasing order.
pub fn dyadic_times() -> Vec<f64> {
    (0..=10).rev().map(|k| 0.5f64.powi(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatParams {
    /// Zeroth-order coefficient `a ≥ 0`.
    pub a: f64,
    pub p: f64,
    /// Sobolev exponent, `n₀ > 2` in real dimension 2.
    pub n0: f64,
}

impl Default for HeatParams {
    fn default() -> Self {
        HeatParams { a: 0.0, p: 2.0, n0: 3.0 }
    }
}

impl HeatParams {
    pub fn exponent(&self) -> f64 {
        (self.n0 + 2.0) / (2.0 * self.p)
    }
}

#[derive(Debug, Clone)]
struct Knot {
    t: f64,
    values: Vec<f64>,
    deriv: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeatRun<'a> {
    traj: &'a FlowTrajectory,
    grid: Arc<GridSpec>,
    params: HeatParams,
    knots: Vec<Knot>,
    log: StepLog,
}

/// Solves the heat equation on `[0, 1]` along `traj` from `f0 ≥ 0`.
pub fn evolve_heat<'a>(
    traj: &'a FlowTrajectory,
    f0: &ScalarField,
    params: HeatParams,
    ctrl: &StepController,
) -> Result<HeatRun<'a>> {
    let grid = traj.grid().clone();
    f0.check_grid(&grid)?;
    if traj.t_end() < 1.0 - 1e-12 {
        return Err(KrfError::InvalidArgument(format!("trajectory ends at {} < 1", traj.t_end())));
    }
    if !(params.a >= 0.0) || !(params.p > 0.0) || !(params.n0 > 2.0) {
        return Err(KrfError::InvalidArgument(format!("invalid heat parameters {params:?}")));
    }
    if f0.min() < 0.0 {
        return Err(KrfError::InvalidArgument(format!("initial data must be nonnegative, min {}", f0.min())));
    }
    let floor = -1e-8 * f0.sup_norm();
    let mut stops = dyadic_times();
    stops.extend(traj.step_times().into_iter().filter(|&t| t > 0.0 && t < 1.0));

    let mut rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let w = traj.w_at(t)?;
        let lf = grid.to_nodal(&grid.legendre_operator(&grid.to_modal(y)));
        Ok(lf.iter().zip(&w).zip(y).map(|((l, w), f)| 0.5 * l / w + params.a * f).collect())
    };
    let mut knots = Vec::new();
    let mut sink = |t: f64, y: &[f64], dy: &[f64], _stop: bool| -> Result<()> {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        if min < floor {
            return Err(KrfError::NegativityDetected { t, min });
        }
        knots.push(Knot { t, values: y.to_vec(), deriv: dy.to_vec() });
        Ok(())
    };
    let log = ode::integrate(
        ctrl,
        0.0,
        f0.values().to_vec(),
        1.0,
        &stops,
        ErrorNorm::Relative,
        &mut rhs,
        &mut |_, _| Ok(()),
        &mut sink,
    )?;
    Ok(HeatRun { traj, grid, params, knots, log })
}

impl<'a> HeatRun<'a> {
    pub fn params(&self) -> HeatParams {
        self.params
    }

    pub fn step_log(&self) -> &StepLog {
        &self.log
    }

    pub fn times(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.t).collect()
    }

    /// Nodal `F(t)` by Hermite interpolation between accepted steps.
    pub fn values_at(&self, t: f64) -> Result<Vec<f64>> {
        let hi = self.knots.partition_point(|k| k.t < t);
        if hi == 0 {
            if (t - self.knots[0].t).abs() <= 1e-14 {
                return Ok(self.knots[0].values.clone());
            }
            return Err(KrfError::InvalidArgument(format!("t = {t} before the run")));
        }
        if hi == self.knots.len() {
            let last = &self.knots[hi - 1];
            if (t - last.t).abs() <= 1e-12 {
                return Ok(last.values.clone());
            }
            return Err(KrfError::InvalidArgument(format!("t = {t} after the run")));
        }
        let (a, b) = (&self.knots[hi - 1], &self.knots[hi]);
        Ok(hermite(a.t, &a.values, &a.deriv, b.t, &b.values, &b.deriv, t))
    }

    pub fn field_at(&self, t: f64) -> Result<ScalarField> {
        ScalarField::new(&self.grid, self.values_at(t)?)
    }

    pub fn sup_at(&self, t: f64) -> Result<f64> {
        Ok(self.values_at(t)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// `∫ F dμ(t)`.
    pub fn mass_at(&self, t: f64) -> Result<f64> {
        let f = self.values_at(t)?;
        let w = self.traj.w_at(t)?;
        Ok(TWO_PI * self.grid.weights().iter().zip(&f).zip(&w).map(|((q, f), w)| q * f * w).sum::<f64>())
    }

    fn slice_lp(&self, values: &[f64], t: f64, p: f64) -> Result<f64> {
        let w = self.traj.w_at(t)?;
        Ok(TWO_PI
            * self
                .grid
                .weights()
                .iter()
                .zip(values)
                .zip(&w)
                .map(|((q, f), w)| q * f.max(0.0).powf(p) * w)
                .sum::<f64>())
    }

    /// Cumulative `∫₀^t ∫ F^p dμ dt` at every accepted step (two-point Gauss
    /// in time on each step, with the Hermite interpolant of `F`).
    pub fn accumulator(&self, p: f64) -> Result<Vec<(f64, f64)>> {
        let g = 0.5 / 3f64.sqrt();
        let mut total = 0.0;
        let mut out = vec![(self.knots[0].t, 0.0)];
        for pair in self.knots.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let h = b.t - a.t;
            for node in [0.5 - g, 0.5 + g] {
                let t = a.t + node * h;
                let f = hermite(a.t, &a.values, &a.deriv, b.t, &b.values, &b.deriv, t);
                total += 0.5 * h * self.slice_lp(&f, t, p)?;
            }
            out.push((b.t, total));
        }
        Ok(out)
    }

    /// `∫₀¹ ∫ F^p dμ dt`.
    pub fn spacetime_integral(&self, p: f64) -> Result<f64> {
        Ok(self.accumulator(p)?.last().map(|x| x.1).unwrap_or(0.0))
    }
}

/// `max_k sup_x F(x, 2^{-k}) t^{(n₀+2)/(2p)} / (∫₀¹∫F^p dμ dt)^{1/p}`.
pub fn moser_ratio(run: &HeatRun) -> Result<f64> {
    let p = run.params.p;
    let denom = run.spacetime_integral(p)?.powf(1.0 / p);
    if !(denom > 0.0) {
        return Err(KrfError::ZeroDenominator);
    }
    let e = run.params.exponent();
    let mut best = f64::NEG_INFINITY;
    for t in dyadic_times() {
        best = best.max(run.sup_at(t)? * t.powf(e) / denom);
    }
    Ok(best)
}
