//! Potential form of the normalized Kähler-Ricci flow.
//!
//! With `f` the potential relative to the round background the flow reads
//! `∂f/∂s = log w + f - k` where `k = log w + f + h` is evaluated on the
//! initial state and frozen. The flow's `h` is normalized by
//! `∫ e^h dμ = Vol`, which differs from the `∫ e^h dμ = 2π` field cached on
//! [`MetricState`] by the constant `log 2`; with this choice the round metric
//! is an exact fixed point and `c_s` vanishes along it.

use std::f64::consts::LN_2;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{KrfError, Result};
use crate::geometry::{MetricState, ScalarField, Tolerances, TWO_PI};
use crate::ode::{self, hermite, hermite_derivative, ErrorNorm, StepController, StepLog};
use crate::spectral::GridSpec;

/// The Ricci potential `u` (`∫ e^{-u} dμ = 2π`) and `h = -u + const`
/// (`∫ e^{h} dμ = 2π`) with the residual of `Δu = 1 - R`.
#[derive(Debug, Clone)]
pub struct RicciPotential {
    pub u: ScalarField,
    pub h: ScalarField,
    pub residual: f64,
}

pub fn ricci_potential(state: &MetricState) -> Result<RicciPotential> {
    let grid = state.grid();
    let lu = state.laplacian_values(state.u());
    let residual = lu
        .iter()
        .zip(state.r())
        .map(|(l, r)| (l - (1.0 - r)).abs())
        .fold(0.0, f64::max);
    if !(residual <= state.tolerances().pde) {
        return Err(KrfError::SolveFailure { residual });
    }
    Ok(RicciPotential {
        u: ScalarField::new(grid, state.u().to_vec())?,
        h: ScalarField::new(grid, state.h().to_vec())?,
        residual,
    })
}

/// `h` in the flow normalization `∫ e^h dμ = Vol`.
pub fn flow_h(state: &MetricState) -> Vec<f64> {
    state.h().iter().map(|h| h + LN_2).collect()
}

/// `a = -(1/2π) ∫ e^{-u} u dμ`.
pub fn flow_constant_a(state: &MetricState) -> f64 {
    let vals: Vec<f64> = state.u().iter().map(|u| (-u).exp() * u).collect();
    -state.integrate_values(&vals) / TWO_PI
}

/// `|∇F|² = F_s² / v''`.
pub fn gradient_field(state: &MetricState, field: &ScalarField) -> Result<ScalarField> {
    field.check_grid(state.grid())?;
    ScalarField::new(state.grid(), state.gradient_sq_values(field.values()))
}

/// Right side of the potential flow with its gauge constant frozen.
#[derive(Debug, Clone)]
pub struct PotentialFlow {
    grid: Arc<GridSpec>,
    gauge: f64,
    tol: Tolerances,
}

impl PotentialFlow {
    /// Freezes `k = log w + f + h` of `initial`.
    pub fn new(initial: &MetricState) -> PotentialFlow {
        let h = flow_h(initial);
        let field: Vec<f64> = initial
            .w()
            .iter()
            .zip(initial.potential())
            .zip(&h)
            .map(|((w, f), h)| w.ln() + f + h)
            .collect();
        let (gauge, _) = initial.mean_and_spread(&field);
        PotentialFlow { grid: initial.grid().clone(), gauge, tol: initial.tolerances() }
    }

    pub fn gauge(&self) -> f64 {
        self.gauge
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// Nodal density ratio of a coefficient vector.
    fn nodal_w(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut wm: Vec<f64> = self.grid.legendre_operator(coeffs).iter().map(|c| 0.5 * c).collect();
        wm[0] += 1.0;
        self.grid.to_nodal(&wm)
    }

    fn min_w(&self, coeffs: &[f64]) -> f64 {
        self.nodal_w(coeffs).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Modal `∂f/∂s`.
    pub fn rhs(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let w = self.nodal_w(coeffs);
        let f = self.grid.to_nodal(coeffs);
        let mut out = Vec::with_capacity(w.len());
        for (wi, fi) in w.iter().zip(&f) {
            if !(*wi > self.tol.w_floor) {
                return Err(KrfError::PositivityLoss { min_w: *wi });
            }
            out.push(wi.ln() + fi - self.gauge);
        }
        Ok(self.grid.to_modal(&out))
    }

    fn guard(&self, ctrl: &StepController, old: &[f64], new: &[f64]) -> std::result::Result<(), String> {
        let (wo, wn) = (self.min_w(old), self.min_w(new));
        if !(wn > self.tol.w_floor) {
            return Err(format!("min w {wn:e} below floor"));
        }
        if wn < ctrl.guard * wo {
            return Err(format!("min w dropped from {wo:e} to {wn:e}"));
        }
        Ok(())
    }

    /// One attempt of size `dt`; rejection is an error carrying the
    /// controller's suggested step.
    pub fn step(&self, state: &MetricState, dt: f64, ctrl: &StepController) -> Result<MetricState> {
        ctrl.validate()?;
        state.check_grid(&self.grid)?;
        let y = state.coefficients();
        let k1 = self.rhs(y)?;
        let mut rhs = |_t: f64, c: &[f64]| self.rhs(c);
        let att = match ode::dopri_attempt(&mut rhs, 0.0, y, &k1, dt, ctrl.tol, ErrorNorm::Curvature) {
            Ok(att) => att,
            Err(e) => {
                return Err(KrfError::StepRejected { dt, suggested: dt / 4.0, reason: e.to_string() })
            }
        };
        if !(att.err <= 1.0) {
            let suggested = if att.err.is_finite() { dt * (0.9 * att.err.powf(-0.2)).max(0.2) } else { dt / 5.0 };
            return Err(KrfError::StepRejected { dt, suggested, reason: format!("error estimate {:.3e}", att.err) });
        }
        if let Err(reason) = self.guard(ctrl, y, &att.y) {
            return Err(KrfError::StepRejected { dt, suggested: dt / 2.0, reason });
        }
        MetricState::with_tolerances(&self.grid, att.y, self.tol)
    }

    /// Integrates from `initial` to `t_end`, storing snapshots at `t = 0`,
    /// each requested time in `(0, t_end]` and `t_end`.
    pub fn run(
        &self,
        initial: &MetricState,
        t_end: f64,
        ctrl: &StepController,
        snapshot_times: &[f64],
    ) -> Result<FlowTrajectory> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(KrfError::InvalidArgument(format!("t_end must be positive, got {t_end}")));
        }
        initial.check_grid(&self.grid)?;
        let mut stops: Vec<f64> = snapshot_times.iter().copied().filter(|&t| t > 0.0 && t <= t_end).collect();
        stops.push(t_end);
        stops.sort_by(f64::total_cmp);
        stops.dedup();

        let f0 = initial.coefficients().to_vec();
        let mut knots: Vec<Knot> = Vec::new();
        let mut snapshots: Vec<FlowSnapshot> = Vec::new();
        let mut conservation = 0.0f64;
        let mut rhs = |_t: f64, c: &[f64]| self.rhs(c);
        let mut guard = |old: &[f64], new: &[f64]| self.guard(ctrl, old, new);
        let mut sink = |t: f64, y: &[f64], dy: &[f64], stop: bool| -> Result<()> {
            knots.push(Knot { t, coeffs: y.to_vec(), deriv: dy.to_vec() });
            if stop || t == 0.0 {
                let state = MetricState::with_tolerances(&self.grid, y.to_vec(), self.tol)?;
                conservation = conservation.max(conservation_error(&state));
                snapshots.push(FlowSnapshot::new(t, state, dy.to_vec(), &f0));
            } else {
                conservation = conservation.max(self.cheap_conservation_error(y));
            }
            Ok(())
        };
        let log = ode::integrate(ctrl, 0.0, f0.clone(), t_end, &stops, ErrorNorm::Curvature, &mut rhs, &mut guard, &mut sink)?;
        Ok(FlowTrajectory {
            grid: self.grid.clone(),
            gauge: self.gauge,
            ctrl: *ctrl,
            snapshots,
            knots,
            log,
            conservation,
            tol: self.tol,
        })
    }

    /// `max(|Vol - 4π|, |∫R dμ - 4π|)` without assembling a full state.
    fn cheap_conservation_error(&self, coeffs: &[f64]) -> f64 {
        let w = self.nodal_w(coeffs);
        let log_w: Vec<f64> = w.iter().map(|v| v.ln()).collect();
        let l_log_w = self.grid.to_nodal(&self.grid.legendre_operator(&self.grid.to_modal(&log_w)));
        let vol = TWO_PI * self.grid.quad(&w);
        let rw: Vec<f64> = l_log_w.iter().map(|l| 1.0 - 0.5 * l).collect();
        let gb = TWO_PI * self.grid.quad(&rw);
        (vol - 2.0 * TWO_PI).abs().max((gb - 2.0 * TWO_PI).abs())
    }
}

fn conservation_error(state: &MetricState) -> f64 {
    let four_pi = 2.0 * TWO_PI;
    (state.volume() - four_pi).abs().max((state.total_curvature() - four_pi).abs())
}

/// One step of the flow from `state`, with the gauge frozen at `state`.
pub fn step(state: &MetricState, dt: f64, ctrl: &StepController) -> Result<MetricState> {
    PotentialFlow::new(state).step(state, dt, ctrl)
}

/// Runs the flow from `initial`; see [`PotentialFlow::run`].
pub fn run(initial: &MetricState, t_end: f64, ctrl: &StepController, snapshot_times: &[f64]) -> Result<FlowTrajectory> {
    PotentialFlow::new(initial).run(initial, t_end, ctrl, snapshot_times)
}

/// Scalar diagnostics of one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord {
    pub t: f64,
    pub a: f64,
    pub c: f64,
    pub c_residual: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub sup_grad_u_sq: f64,
    pub volume: f64,
    pub total_curvature: f64,
    pub w_entropy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FlowSnapshot {
    pub t: f64,
    pub state: MetricState,
    /// Modal `∂f/∂s` from the flow right side.
    pub df_ds: Vec<f64>,
    /// Nodal `f(s) - f(0)`.
    pub f_rel: Vec<f64>,
    pub record: FlowRecord,
}

impl FlowSnapshot {
    fn new(t: f64, state: MetricState, df_ds: Vec<f64>, f0: &[f64]) -> FlowSnapshot {
        let grid = state.grid().clone();
        let diff: Vec<f64> = state.coefficients().iter().zip(f0).map(|(a, b)| a - b).collect();
        let f_rel = grid.to_nodal(&diff);
        let dfn = grid.to_nodal(&df_ds);
        let field: Vec<f64> = dfn.iter().zip(flow_h(&state)).map(|(d, h)| d + h).collect();
        let (c, c_residual) = state.mean_and_spread(&field);
        let grad = state.gradient_sq_values(state.u());
        let record = FlowRecord {
            t,
            a: flow_constant_a(&state),
            c,
            c_residual,
            r_min: state.r_min(),
            r_max: state.r_max(),
            sup_grad_u_sq: grad.into_iter().fold(0.0, f64::max),
            volume: state.volume(),
            total_curvature: state.total_curvature(),
            w_entropy: None,
        };
        FlowSnapshot { t, state, df_ds, f_rel, record }
    }
}

#[derive(Debug, Clone)]
struct Knot {
    t: f64,
    coeffs: Vec<f64>,
    deriv: Vec<f64>,
}

/// Snapshots plus the dense record of every accepted step.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    grid: Arc<GridSpec>,
    gauge: f64,
    ctrl: StepController,
    snapshots: Vec<FlowSnapshot>,
    knots: Vec<Knot>,
    log: StepLog,
    conservation: f64,
    tol: Tolerances,
}

impl FlowTrajectory {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn gauge(&self) -> f64 {
        self.gauge
    }

    pub fn controller(&self) -> &StepController {
        &self.ctrl
    }

    pub fn snapshots(&self) -> &[FlowSnapshot] {
        &self.snapshots
    }

    pub fn initial(&self) -> &MetricState {
        &self.snapshots[0].state
    }

    pub fn last(&self) -> &FlowSnapshot {
        self.snapshots.last().expect("trajectory has a t = 0 snapshot")
    }

    pub fn t_end(&self) -> f64 {
        self.last().t
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn records(&self) -> Vec<FlowRecord> {
        self.snapshots.iter().map(|s| s.record.clone()).collect()
    }

    pub fn step_log(&self) -> &StepLog {
        &self.log
    }

    /// Largest `|Vol - 4π|` or `|∫R dμ - 4π|` over every accepted step.
    pub fn conservation_error(&self) -> f64 {
        self.conservation
    }

    /// Snapshot stored at `t` (exact match up to 1e-12).
    pub fn snapshot_at(&self, t: f64) -> Option<&FlowSnapshot> {
        self.snapshots.iter().find(|s| (s.t - t).abs() <= 1e-12)
    }

    pub fn set_entropy(&mut self, index: usize, value: f64) {
        self.snapshots[index].record.w_entropy = Some(value);
    }

    /// Edits the stored diagnostics in place, e.g. to build synthetic
    /// trajectories with injected faults. States are left untouched.
    pub fn map_records(&mut self, mut f: impl FnMut(&mut FlowRecord)) {
        self.snapshots.iter_mut().for_each(|s| f(&mut s.record));
    }

    fn bracket(&self, t: f64) -> Result<(usize, usize)> {
        let (t0, t1) = (self.knots[0].t, self.knots[self.knots.len() - 1].t);
        if !(t >= t0 - 1e-14 && t <= t1 + 1e-14) {
            return Err(KrfError::InvalidArgument(format!("t = {t} outside [{t0}, {t1}]")));
        }
        let hi = self.knots.partition_point(|k| k.t < t).clamp(1, self.knots.len() - 1);
        Ok((hi - 1, hi))
    }

    /// Dense-output coefficients of `f` at time `t` (cubic Hermite between
    /// accepted steps).
    pub fn coefficients_at(&self, t: f64) -> Result<Vec<f64>> {
        if self.knots.len() == 1 {
            return Ok(self.knots[0].coeffs.clone());
        }
        let (i, j) = self.bracket(t)?;
        let (a, b) = (&self.knots[i], &self.knots[j]);
        Ok(hermite(a.t, &a.coeffs, &a.deriv, b.t, &b.coeffs, &b.deriv, t))
    }

    /// Dense-output `∂f/∂s` at time `t`.
    pub fn derivative_at(&self, t: f64) -> Result<Vec<f64>> {
        if self.knots.len() == 1 {
            return Ok(self.knots[0].deriv.clone());
        }
        let (i, j) = self.bracket(t)?;
        let (a, b) = (&self.knots[i], &self.knots[j]);
        Ok(hermite_derivative(a.t, &a.coeffs, &a.deriv, b.t, &b.coeffs, &b.deriv, t))
    }

    /// Nodal density ratio at time `t`.
    pub fn w_at(&self, t: f64) -> Result<Vec<f64>> {
        let c = self.coefficients_at(t)?;
        let mut wm: Vec<f64> = self.grid.legendre_operator(&c).iter().map(|v| 0.5 * v).collect();
        wm[0] += 1.0;
        Ok(self.grid.to_nodal(&wm))
    }

    pub fn state_at(&self, t: f64) -> Result<MetricState> {
        MetricState::with_tolerances(&self.grid, self.coefficients_at(t)?, self.tol)
    }

    /// Times of every accepted step, including `t = 0`.
    pub fn step_times(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.t).collect()
    }
}

/// `(s, c_s, constancy residual)` for every snapshot.
pub fn c_s_series(traj: &FlowTrajectory) -> Vec<(f64, f64, f64)> {
    traj.snapshots.iter().map(|s| (s.t, s.record.c, s.record.c_residual)).collect()
}

/// Smallest `C` with `|c_s| ≤ C (e^s - 1)` over the stored snapshots.
pub fn c_s_growth_constant(series: &[(f64, f64, f64)]) -> f64 {
    series
        .iter()
        .filter(|(s, _, _)| *s > 0.0)
        .map(|(s, c, _)| c.abs() / s.exp_m1())
        .fold(0.0, f64::max)
}

/// The field `c_s - f_s`, whose exponential is the ratio of the Hermitian
/// metrics `ω_s e^{h_s}` and `ω e^{h}`.
pub fn hermitian_log_ratio(traj: &FlowTrajectory, s: f64) -> Result<ScalarField> {
    let snap = traj
        .snapshot_at(s)
        .ok_or_else(|| KrfError::InvalidArgument(format!("no snapshot stored at s = {s}")))?;
    let vals = snap.f_rel.iter().map(|f| snap.record.c - f).collect();
    ScalarField::new(&traj.grid, vals)
}

/// One snapshot of the unnormalized flow `ĝ(ŝ) = (1 - ŝ) g(t)`, `t = -log(1 - ŝ)`.
#[derive(Debug, Clone)]
pub struct UnnormalizedSample {
    pub s: f64,
    pub t: f64,
    pub scale: f64,
    pub r: Vec<f64>,
    pub volume: f64,
}

pub fn to_unnormalized(traj: &FlowTrajectory) -> Vec<UnnormalizedSample> {
    traj.snapshots
        .iter()
        .map(|snap| {
            let scale = (-snap.t).exp();
            UnnormalizedSample {
                s: -(-snap.t).exp_m1(),
                t: snap.t,
                scale,
                r: snap.state.r().iter().map(|r| r / scale).collect(),
                volume: scale * snap.state.volume(),
            }
        })
        .collect()
}
