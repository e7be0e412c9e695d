//! Estimate-by-estimate checks over flow trajectories, blow-up exponent
//! fits and Bergman lower-bound scans over random ensembles.
//!
//! Every uniform constant becomes a fitted finite number; where the bound
//! has an explicit form (`R₀ - t/4`, `C(e^s - 1)`, `t^{-(n₀+2)/2}`) it is
//! checked as an inequality with a small slack.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bergman::{bergman_kernel, flow_equivalence};
use crate::error::{KrfError, Result};
use crate::flow::{self, c_s_growth_constant, c_s_series, hermitian_log_ratio, FlowTrajectory};
use crate::geometry::{
    diameter_proxy, meridian_distance, state_from_curvature_profile, CurvatureProfile, MetricState, ProfileOptions,
    FOUR_PI,
};
use crate::ode::StepController;
use crate::parabolic::dyadic_times;
use crate::spectral::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub n0: f64,
    pub slack_abs: f64,
    pub slack_rel: f64,
    /// Bound on `|Vol - 4π|` and `|∫R dμ - 4π|`.
    pub conservation_tol: f64,
    /// Constants moving more than this under refinement are unstable.
    pub stability_tol: f64,
    pub levels: Vec<usize>,
    /// Disabled check names; an empty list runs everything.
    pub disabled: Vec<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            n0: 3.0,
            slack_abs: 1e-6,
            slack_rel: 0.01,
            conservation_tol: 1e-7,
            stability_tol: 0.25,
            levels: vec![1, 2],
            disabled: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// The estimate being tested, in words.
    pub anchor: String,
    pub values: BTreeMap<String, f64>,
    pub bound: Option<f64>,
    pub passed: bool,
    /// Largest relative change of the fitted constants under refinement.
    pub stability: Option<f64>,
    pub stable: Option<bool>,
    pub note: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub modes: usize,
    pub dt_init: f64,
    pub dt_max: f64,
    pub tol: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub schema: u32,
    pub meta: RunMeta,
    pub checks: Vec<CheckResult>,
}

pub const REPORT_SCHEMA: u32 = 1;

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Output of one check before refinement comparison.
struct Outcome {
    values: Vec<(&'static str, f64)>,
    /// Keys of `values` that are fitted constants.
    fitted: Vec<&'static str>,
    bound: Option<f64>,
    passed: bool,
    note: Option<String>,
}

impl Outcome {
    fn finite(values: Vec<(&'static str, f64)>, fitted: Vec<&'static str>) -> Outcome {
        let passed = values.iter().all(|v| v.1.is_finite());
        Outcome { values, fitted, bound: None, passed, note: None }
    }

    fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|v| v.0 == key).map(|v| v.1)
    }
}

type CheckFn = fn(&FlowTrajectory, &VerifyOptions) -> Result<Outcome>;

const CHECKS: [(&str, &str, CheckFn); 17] = [
    ("a_scalar_lower_bound", "R(x,t) >= min(R_min(0), 0)", check_scalar_lower),
    ("b_rmin_decay", "R_min(t) >= R0 - t/4 for t <= R0", check_rmin_decay),
    ("c_potential_lower_bound", "Ricci potential u bounded below", check_u_lower),
    ("d_gradient_laplacian", "|grad u|^2 <= H (u + B), |lap u| <= K (u + B)", check_gradient),
    ("e_quadratic_growth", "u, R, |grad u|^2 <= C (dist^2 + 1) from the minimum of u", check_quadratic),
    ("f_h_upper_bound", "h <= C", check_h_upper),
    ("g_potential_bounds", "|f_s| <= C sqrt(s), C(1 - e^s) <= f_s <= C e^s", check_potential),
    ("h_cs_growth", "|c_s| <= C (e^s - 1), c_s spatially constant", check_cs),
    ("i_hermitian_equivalence", "Hermitian metrics and Bergman kernels equivalent along the flow", check_equivalence),
    ("j_h_lp_bounds", "||h||_{L^p} <= C_p for p = 1, 2, 4, 8", check_lp),
    ("k_curvature_l1", "int |R| dmu bounded (Gauss-Bonnet exact when R >= 0)", check_l1),
    ("l_gradient_integral", "int_0^1 int |grad u|^2 dmu dt <= int_0^1 int |u| |R - 1| dmu dt", check_grad_integral),
    ("m_ricci_l4", "int_{1/2}^1 int |Ric|^4 dmu dt bounded", check_l4),
    ("n_diameter", "diameter bounded on [1/2, 1]", check_diameter),
    ("o_blowup_shape", "sup|R|, sup|grad u|^2 <= C t^{-(n0+2)/2}", check_blowup),
    ("volume", "|Vol - 4 pi| <= tol at every step", check_volume),
    ("gauss_bonnet", "|int R dmu - 4 pi| <= tol at every step", check_gauss_bonnet),
];

/// Names of every available check, sorted.
pub fn check_names() -> Vec<&'static str> {
    let mut v: Vec<&str> = CHECKS.iter().map(|c| c.0).collect();
    v.sort();
    v
}

fn rel_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Runs every enabled check on `traj`. With `refined` (the same initial
/// data at doubled modes and halved steps) each check also gets a
/// refinement-stability verdict. Errors inside a check are recorded, never
/// returned.
pub fn run_checks(
    traj: &FlowTrajectory,
    opts: &VerifyOptions,
    refined: Option<&FlowTrajectory>,
    meta: (String, u64),
) -> VerificationReport {
    let mut checks = Vec::new();
    for (name, anchor, f) in CHECKS {
        if opts.disabled.iter().any(|d| d == name) {
            continue;
        }
        let mut result = CheckResult {
            name: name.to_string(),
            anchor: anchor.to_string(),
            values: BTreeMap::new(),
            bound: None,
            passed: false,
            stability: None,
            stable: None,
            note: None,
            error: None,
        };
        match f(traj, opts) {
            Err(e) => result.error = Some(e.to_string()),
            Ok(out) => {
                result.values = out.values.iter().map(|(k, v)| (k.to_string(), *v)).collect();
                result.bound = out.bound;
                result.note = out.note.clone();
                result.passed = out.passed;
                if result.values.values().any(|v| !v.is_finite()) {
                    result.passed = false;
                    result.error = Some("non-finite value".into());
                    // keep the JSON free of NaN/inf
                    result.values.values_mut().for_each(|v| {
                        if !v.is_finite() {
                            *v = f64::MAX.copysign(*v);
                        }
                    });
                }
                if let Some(r) = refined {
                    match f(r, opts) {
                        Ok(fine) => {
                            let change = out
                                .fitted
                                .iter()
                                .map(|k| rel_change(out.get(k).unwrap_or(0.0), fine.get(k).unwrap_or(0.0)))
                                .fold(0.0, f64::max);
                            let stable = change <= opts.stability_tol;
                            result.stability = Some(if change.is_finite() { change } else { f64::MAX });
                            result.stable = Some(stable);
                            result.passed &= stable;
                        }
                        Err(e) => {
                            result.stable = Some(false);
                            result.passed = false;
                            result.error = Some(format!("refined run: {e}"));
                        }
                    }
                }
            }
        }
        checks.push(result);
    }
    checks.sort_by(|a, b| a.name.cmp(&b.name));
    let ctrl = traj.controller();
    VerificationReport {
        schema: REPORT_SCHEMA,
        meta: RunMeta {
            config_hash: meta.0,
            seed: meta.1,
            modes: traj.grid().modes(),
            dt_init: ctrl.dt_init,
            dt_max: ctrl.dt_max,
            tol: ctrl.tol,
            t_end: traj.t_end(),
        },
        checks,
    }
}

fn states(traj: &FlowTrajectory) -> impl Iterator<Item = (f64, &MetricState)> {
    traj.snapshots().iter().map(|s| (s.t, &s.state))
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::INFINITY, f64::min)
}

fn check_scalar_lower(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let r0 = traj.initial().r_min();
    let min_r = min_of(states(traj).map(|(_, s)| s.r_min()));
    let bound = r0.min(0.0) - o.slack_abs;
    Ok(Outcome {
        values: vec![("r_min_initial", r0), ("r_min_overall", min_r)],
        fitted: vec![],
        bound: Some(bound),
        passed: min_r >= bound,
        note: None,
    })
}

fn check_rmin_decay(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let r0 = traj.initial().r_min();
    if r0 <= 0.0 {
        return Ok(Outcome {
            values: vec![("r_min_initial", r0)],
            fitted: vec![],
            bound: None,
            passed: true,
            note: Some("not applicable: initial curvature not positive".into()),
        });
    }
    let margin = min_of(
        states(traj)
            .filter(|(t, _)| *t <= r0.min(traj.t_end()) + 1e-12)
            .map(|(t, s)| s.r_min() - (r0 - 0.25 * t)),
    );
    Ok(Outcome {
        values: vec![("r_min_initial", r0), ("margin", margin)],
        fitted: vec![],
        bound: Some(-o.slack_abs),
        passed: margin >= -o.slack_abs,
        note: None,
    })
}

fn check_u_lower(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    let inf_u = min_of(states(traj).map(|(_, s)| min_of(s.u().iter().copied())));
    Ok(Outcome::finite(vec![("inf_u", inf_u), ("c_lower", -inf_u)], vec!["c_lower"]))
}

fn check_gradient(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    let inf_u = min_of(states(traj).map(|(_, s)| min_of(s.u().iter().copied())));
    let b = 1.0 - inf_u;
    let mut h_hat = 0.0f64;
    let mut k_hat = 0.0f64;
    for (_, s) in states(traj) {
        let grad = s.gradient_sq_values(s.u());
        for (i, g) in grad.iter().enumerate() {
            let base = s.u()[i] + b;
            h_hat = h_hat.max(g / base);
            k_hat = k_hat.max((1.0 - s.r()[i]).abs() / base);
        }
    }
    Ok(Outcome::finite(vec![("b", b), ("h_hat", h_hat), ("k_hat", k_hat)], vec!["h_hat", "k_hat"]))
}

fn check_quadratic(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    let mut c_hat = 0.0f64;
    for (t, s) in states(traj) {
        if t == 0.0 {
            continue;
        }
        let u = s.u();
        // ties resolve to the smallest index
        let imin = (0..u.len()).fold(0, |best, i| if u[i] < u[best] { i } else { best });
        let x_hat = s.grid().nodes()[imin];
        let grad = s.gradient_sq_values(u);
        for (i, &x) in s.grid().nodes().iter().enumerate() {
            let d = meridian_distance(s, x_hat, x)?;
            let q = u[i].max(s.r()[i]).max(grad[i]);
            c_hat = c_hat.max(q / (d * d + 1.0));
        }
    }
    Ok(Outcome::finite(vec![("c_hat", c_hat)], vec!["c_hat"]))
}

fn check_h_upper(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    let sup_h = max_of(states(traj).map(|(_, s)| max_of(s.h().iter().copied())));
    Ok(Outcome::finite(vec![("sup_h", sup_h)], vec!["sup_h"]))
}

/// `(sup |f_s|/√s over s ≤ 1, C in f_s ≥ -C(e^s - 1), C in f_s ≤ C e^s)`.
pub fn potential_constants(traj: &FlowTrajectory) -> (f64, f64, f64) {
    let mut sqrt_c = 0.0f64;
    let mut low = 0.0f64;
    let mut up = 0.0f64;
    for snap in traj.snapshots().iter().filter(|s| s.t > 0.0) {
        let (lo, hi) = (min_of(snap.f_rel.iter().copied()), max_of(snap.f_rel.iter().copied()));
        if snap.t <= 1.0 + 1e-12 {
            sqrt_c = sqrt_c.max(lo.abs().max(hi.abs()) / snap.t.sqrt());
        }
        low = low.max(-lo / snap.t.exp_m1());
        up = up.max(hi / snap.t.exp());
    }
    (sqrt_c, low, up)
}

fn check_potential(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    let (a, b, c) = potential_constants(traj);
    Ok(Outcome::finite(
        vec![("c_sqrt", a), ("c_lower", b), ("c_upper", c)],
        vec!["c_sqrt", "c_lower", "c_upper"],
    ))
}

fn check_cs(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let series = c_s_series(traj);
    let c = c_s_growth_constant(&series);
    let residual = max_of(series.iter().map(|s| s.2));
    let bound = o.slack_abs;
    Ok(Outcome {
        values: vec![("c_hat", c), ("max_residual", residual)],
        fitted: vec!["c_hat"],
        bound: Some(bound),
        passed: c.is_finite() && residual <= bound,
        note: None,
    })
}

fn check_equivalence(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let mut values = Vec::new();
    let mut passed = true;
    let mut sup_log = 0.0f64;
    for s in [0.5, 1.0] {
        if traj.snapshot_at(s).is_none() {
            continue;
        }
        let lr = hermitian_log_ratio(traj, s)?;
        sup_log = sup_log.max(lr.sup_norm());
    }
    values.push(("sup_log_ratio", sup_log));
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut ident = 0.0f64;
    for &l in &o.levels {
        for s in [0.5, 1.0] {
            if traj.snapshot_at(s).is_none() {
                continue;
            }
            let eq = flow_equivalence(traj, s, l)?;
            lo = lo.min(eq.min_ratio);
            hi = hi.max(eq.max_ratio);
            ident = ident.max(eq.identity_residual);
            let tol = 1e-6;
            passed &= eq.min_ratio >= eq.lower_bound * (1.0 - tol) && eq.max_ratio <= eq.upper_bound * (1.0 + tol);
        }
    }
    if lo.is_infinite() {
        return Ok(Outcome {
            values,
            fitted: vec!["sup_log_ratio"],
            bound: None,
            passed: true,
            note: Some("no snapshots at s = 1/2 or 1".into()),
        });
    }
    values.extend([("min_kernel_ratio", lo), ("max_kernel_ratio", hi), ("identity_residual", ident)]);
    passed &= ident <= 1e-6 && lo > 0.0 && hi.is_finite();
    Ok(Outcome {
        values,
        fitted: vec!["sup_log_ratio", "min_kernel_ratio", "max_kernel_ratio"],
        bound: Some(1e-6),
        passed,
        note: None,
    })
}

fn check_lp(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    let mut out = Vec::new();
    for (key, p) in [("c_p1", 1.0), ("c_p2", 2.0), ("c_p4", 4.0), ("c_p8", 8.0)] {
        let c = max_of(states(traj).map(|(_, s)| {
            let v: Vec<f64> = flow::flow_h(s).iter().map(|h| h.abs().powf(p)).collect();
            s.integrate_values(&v).powf(1.0 / p)
        }));
        out.push((key, c));
    }
    let keys = out.iter().map(|v| v.0).collect();
    Ok(Outcome::finite(out, keys))
}

fn check_l1(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let mut l1 = 0.0f64;
    let mut dev = 0.0f64;
    let mut nonneg = true;
    for (_, s) in states(traj) {
        let a: Vec<f64> = s.r().iter().map(|r| r.abs()).collect();
        let v = s.integrate_values(&a);
        l1 = l1.max(v);
        if s.r_min() >= 0.0 {
            dev = dev.max((v - FOUR_PI).abs());
        } else {
            nonneg = false;
        }
    }
    let bound = o.conservation_tol;
    Ok(Outcome {
        values: vec![("max_l1", l1), ("gauss_bonnet_deviation", dev)],
        fitted: vec!["max_l1"],
        bound: Some(bound),
        passed: l1.is_finite() && dev <= bound,
        note: (!nonneg).then(|| "negative curvature present; exactness tested only where R >= 0".into()),
    })
}

/// Composite Simpson over `n` (even) panels of `g(t)` on `[a, b]`.
fn simpson(a: f64, b: f64, n: usize, mut g: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = (b - a) / n as f64;
    let mut total = g(a)? + g(b)?;
    for i in 1..n {
        total += if i % 2 == 1 { 4.0 } else { 2.0 } * g(a + i as f64 * h)?;
    }
    Ok(total * h / 3.0)
}

fn check_grad_integral(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let end = traj.t_end().min(1.0);
    let lhs = simpson(0.0, end, 32, |t| {
        let s = traj.state_at(t)?;
        Ok(s.integrate_values(&s.gradient_sq_values(s.u())))
    })?;
    let rhs = simpson(0.0, end, 32, |t| {
        let s = traj.state_at(t)?;
        let v: Vec<f64> = s.u().iter().zip(s.r()).map(|(u, r)| u.abs() * (r - 1.0).abs()).collect();
        Ok(s.integrate_values(&v))
    })?;
    let bound = rhs * (1.0 + o.slack_rel) + o.slack_abs;
    Ok(Outcome {
        values: vec![("integral", lhs), ("green_chain_bound", rhs)],
        fitted: vec!["integral"],
        bound: Some(bound),
        passed: lhs <= bound,
        note: None,
    })
}

fn check_l4(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    if traj.t_end() < 1.0 - 1e-12 {
        return Err(KrfError::InvalidArgument("trajectory must reach t = 1".into()));
    }
    let v = simpson(0.5, 1.0, 16, |t| {
        let s = traj.state_at(t)?;
        let r4: Vec<f64> = s.r().iter().map(|r| r.powi(4)).collect();
        Ok(s.integrate_values(&r4))
    })?;
    Ok(Outcome::finite(vec![("ricci_l4", v)], vec!["ricci_l4"]))
}

fn check_diameter(traj: &FlowTrajectory, _: &VerifyOptions) -> Result<Outcome> {
    if traj.t_end() < 1.0 - 1e-12 {
        return Err(KrfError::InvalidArgument("trajectory must reach t = 1".into()));
    }
    let mut d = 0.0f64;
    for k in 0..=8 {
        let t = 0.5 + k as f64 / 16.0;
        d = d.max(diameter_proxy(&traj.state_at(t)?)?);
    }
    Ok(Outcome::finite(vec![("max_diameter", d)], vec!["max_diameter"]))
}

fn dyadic_sups(traj: &FlowTrajectory) -> Vec<(f64, f64, f64)> {
    dyadic_times()
        .into_iter()
        .filter_map(|t| traj.snapshot_at(t))
        .map(|s| {
            let sup_r = max_of(s.state.r().iter().map(|r| r.abs()));
            (s.t, sup_r, s.record.sup_grad_u_sq)
        })
        .collect()
}

fn check_blowup(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let e = 0.5 * (o.n0 + 2.0);
    let samples = dyadic_sups(traj);
    let c_r = max_of(samples.iter().map(|s| s.1 * s.0.powf(e)));
    let c_g = max_of(samples.iter().map(|s| s.2 * s.0.powf(e)));
    let mut values = vec![("c_r", c_r), ("c_grad", c_g)];
    let mut passed = c_r.is_finite() && c_g.is_finite();
    let bound = e * (1.0 + o.slack_rel) + o.slack_abs;
    if let Ok(fit) = fit_member(traj) {
        values.push(("alpha_r", fit.alpha_r));
        values.push(("alpha_grad", fit.alpha_grad));
        passed &= fit.alpha_r <= bound && fit.alpha_grad <= bound;
    }
    Ok(Outcome { values, fitted: vec!["c_r", "c_grad"], bound: Some(bound), passed, note: None })
}

/// Snapshot records plus the per-step tracker, which covers volume and
/// total curvature together.
fn check_volume(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let recs = max_of(traj.records().iter().map(|r| (r.volume - FOUR_PI).abs()));
    let dev = recs.max(traj.conservation_error());
    Ok(Outcome {
        values: vec![("max_deviation", dev)],
        fitted: vec![],
        bound: Some(o.conservation_tol),
        passed: dev <= o.conservation_tol,
        note: None,
    })
}

fn check_gauss_bonnet(traj: &FlowTrajectory, o: &VerifyOptions) -> Result<Outcome> {
    let recs = max_of(traj.records().iter().map(|r| (r.total_curvature - FOUR_PI).abs()));
    let dev = recs.max(traj.conservation_error());
    Ok(Outcome {
        values: vec![("max_deviation", dev)],
        fitted: vec![],
        bound: Some(o.conservation_tol),
        passed: dev <= o.conservation_tol,
        note: None,
    })
}

/// Fitted log-log decay exponents of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentFit {
    /// `α` in `sup|R| ~ t^{-α}`.
    pub alpha_r: f64,
    /// `α` in `sup|∇u|² ~ t^{-α}`.
    pub alpha_grad: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupFit {
    pub members: Vec<ExponentFit>,
    pub max_alpha_r: f64,
    pub max_alpha_grad: f64,
}

/// Least-squares slope of `log v` against `log t`, negated. Quantities that
/// vanish to rounding (below 1e-20) have exponent 0.
pub fn loglog_exponent(samples: &[(f64, f64)]) -> f64 {
    if samples.iter().all(|s| s.1.abs() < 1e-20) {
        return 0.0;
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|&(t, v)| (t.ln(), v.abs().max(1e-300).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}

fn fit_member(traj: &FlowTrajectory) -> Result<ExponentFit> {
    let s = dyadic_sups(traj);
    if s.len() < 4 {
        return Err(KrfError::InsufficientSamples { found: s.len() });
    }
    let r: Vec<(f64, f64)> = s.iter().map(|x| (x.0, x.1)).collect();
    let g: Vec<(f64, f64)> = s.iter().map(|x| (x.0, x.2)).collect();
    Ok(ExponentFit { alpha_r: loglog_exponent(&r), alpha_grad: loglog_exponent(&g), samples: s.len() })
}

/// Fits `α` for `sup|R|` and `sup|∇u|²` over the dyadic snapshots of each
/// trajectory.
pub fn blowup_exponent(trajs: &[FlowTrajectory]) -> Result<BlowupFit> {
    let members = trajs.iter().map(fit_member).collect::<Result<Vec<_>>>()?;
    Ok(BlowupFit {
        max_alpha_r: max_of(members.iter().map(|m| m.alpha_r)),
        max_alpha_grad: max_of(members.iter().map(|m| m.alpha_grad)),
        members,
    })
}

/// Random curvature-bounded ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSpec {
    pub count: usize,
    /// Lower curvature bound `R₀` of every member.
    pub r0: f64,
    pub seed: u64,
    /// Amplitude of the random Legendre coefficients of `K - 1`.
    pub roughness: f64,
    /// Highest Legendre degree of the curvature profile.
    pub max_degree: usize,
    pub levels: Vec<usize>,
    pub horizon: f64,
    pub modes: usize,
    pub ctrl: StepController,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            count: 20,
            r0: 0.5,
            seed: 1,
            roughness: 0.5,
            max_degree: 6,
            levels: vec![1, 2, 3, 4],
            horizon: 1.0,
            modes: 64,
            ctrl: StepController::default(),
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(KrfError::InvalidArgument("ensemble needs at least one member".into()));
        }
        if !(self.r0 > 0.0 && self.r0 <= 1.0) {
            return Err(KrfError::InvalidArgument(format!("R0 = {} must lie in (0, 1]", self.r0)));
        }
        if !(self.roughness >= 0.0) || self.max_degree < 2 {
            return Err(KrfError::InvalidArgument("roughness must be >= 0 and max_degree >= 2".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(KrfError::InvalidArgument("horizon must be positive".into()));
        }
        GridSpec::new(self.modes)?;
        self.ctrl.validate()
    }

    /// Same ensemble at doubled modes with the refined controller.
    pub fn refined(&self) -> EnsembleSpec {
        EnsembleSpec { modes: 2 * self.modes, ctrl: self.ctrl.refined(), ..self.clone() }
    }
}

/// Curvature profile of member `index`: `K = 1 + λ Σ_{k≥2} a_k P_k` with
/// `a_k ~ N(0, roughness² / (k - 1))` from a per-member stream, and `λ ≤ 1`
/// the largest blend factor keeping `min K ≥ R₀`.
pub fn sample_profile(spec: &EnsembleSpec, index: usize) -> Result<(CurvatureProfile, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut c = vec![0.0; spec.max_degree + 1];
    c[0] = 1.0;
    for (k, ck) in c.iter_mut().enumerate().skip(2) {
        *ck = spec.roughness * normal.sample(&mut rng) / ((k - 1) as f64).sqrt();
    }
    let raw = CurvatureProfile::from_coefficients(c.clone(), spec.r0)?;
    let min = raw.min_value();
    let mut lambda = if min < spec.r0 { (1.0 - spec.r0) / (1.0 - min) } else { 1.0 };
    // stay strictly inside the admissible set
    lambda = (lambda * (1.0 - 1e-9)).min(1.0);
    let blended: Vec<f64> = c.iter().enumerate().map(|(k, v)| if k == 0 { 1.0 } else { lambda * v }).collect();
    Ok((CurvatureProfile::from_coefficients(blended, spec.r0)?, lambda))
}

/// Snapshot times used for ensemble members: the dyadic times and a
/// uniform grid of step 1/32 up to the horizon.
pub fn member_snapshot_times(horizon: f64) -> Vec<f64> {
    let mut t: Vec<f64> = dyadic_times().into_iter().filter(|&t| t <= horizon).collect();
    let n = (32.0 * horizon).floor() as usize;
    t.extend((1..=n).map(|k| k as f64 / 32.0));
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

pub fn member_state(spec: &EnsembleSpec, index: usize) -> Result<MetricState> {
    let (profile, _) = sample_profile(spec, index)?;
    let grid = GridSpec::new(spec.modes)?;
    state_from_curvature_profile(&profile, &grid, ProfileOptions::default())
}

pub fn member_trajectory(spec: &EnsembleSpec, index: usize) -> Result<FlowTrajectory> {
    let state = member_state(spec, index)?;
    flow::run(&state, spec.horizon, &spec.ctrl, &member_snapshot_times(spec.horizon))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleRow {
    pub member: usize,
    pub level: usize,
    pub inf_rho_0: f64,
    pub inf_rho_half: f64,
    pub inf_rho_1: f64,
    /// Extremes of `ρ_{ω_s}/ρ_ω` over `s ∈ {1/2, 1}`.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub bound_lower: f64,
    pub bound_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberSummary {
    pub member: usize,
    pub lambda: f64,
    /// `min_t R_min(t)`.
    pub min_r: f64,
    /// `min_{t ≤ R₀} R_min(t) - (R₀ - t/4)`.
    pub rmin_margin: f64,
    pub sqrt_constant: f64,
    pub cs_constant: f64,
    pub conservation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub level: usize,
    pub min_inf_rho_0: f64,
    pub min_inf_rho_1: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleTable {
    pub spec: EnsembleSpec,
    pub rows: Vec<EnsembleRow>,
    pub members: Vec<MemberSummary>,
    pub summary: Vec<SummaryRow>,
    /// `(member, error)` for members that were skipped.
    pub failures: Vec<(usize, String)>,
}

fn scan_member(spec: &EnsembleSpec, index: usize) -> Result<(MemberSummary, Vec<EnsembleRow>)> {
    let (_, lambda) = sample_profile(spec, index)?;
    let traj = member_trajectory(spec, index)?;
    let r0 = spec.r0;
    let min_r = min_of(traj.snapshots().iter().map(|s| s.state.r_min()));
    let rmin_margin = min_of(
        traj.snapshots()
            .iter()
            .filter(|s| s.t <= r0.min(spec.horizon) + 1e-12)
            .map(|s| s.state.r_min() - (r0 - 0.25 * s.t)),
    );
    let summary = MemberSummary {
        member: index,
        lambda,
        min_r,
        rmin_margin,
        sqrt_constant: potential_constants(&traj).0,
        cs_constant: c_s_growth_constant(&c_s_series(&traj)),
        conservation: traj.conservation_error(),
    };
    let mut rows = Vec::new();
    let at = |t: f64| traj.snapshot_at(t).map(|s| &s.state);
    for &l in &spec.levels {
        let inf = |st: Option<&MetricState>| -> Result<f64> {
            match st {
                Some(s) => Ok(bergman_kernel(s, l)?.rho.min()),
                None => Ok(f64::NAN),
            }
        };
        let mut row = EnsembleRow {
            member: index,
            level: l,
            inf_rho_0: inf(Some(traj.initial()))?,
            inf_rho_half: inf(at(0.5))?,
            inf_rho_1: inf(at(1.0))?,
            ratio_min: f64::INFINITY,
            ratio_max: 0.0,
            bound_lower: f64::INFINITY,
            bound_upper: 0.0,
        };
        for s in [0.5, 1.0] {
            if at(s).is_none() {
                continue;
            }
            let eq = flow_equivalence(&traj, s, l)?;
            row.ratio_min = row.ratio_min.min(eq.min_ratio);
            row.ratio_max = row.ratio_max.max(eq.max_ratio);
            row.bound_lower = row.bound_lower.min(eq.lower_bound);
            row.bound_upper = row.bound_upper.max(eq.upper_bound);
        }
        rows.push(row);
    }
    Ok((summary, rows))
}

/// Flows every member to the horizon and tabulates Bergman lower bounds and
/// kernel equivalence constants. Members run in parallel; output order is
/// by member index, so the table is independent of scheduling.
pub fn ensemble_scan(spec: &EnsembleSpec) -> Result<EnsembleTable> {
    spec.validate()?;
    let results: Vec<Result<(MemberSummary, Vec<EnsembleRow>)>> =
        (0..spec.count).into_par_iter().map(|i| scan_member(spec, i)).collect();
    let mut rows = Vec::new();
    let mut members = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((m, rs)) => {
                members.push(m);
                rows.extend(rs);
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    let summary = spec
        .levels
        .iter()
        .map(|&l| {
            let sel: Vec<&EnsembleRow> = rows.iter().filter(|r| r.level == l).collect();
            SummaryRow {
                level: l,
                min_inf_rho_0: min_of(sel.iter().map(|r| r.inf_rho_0)),
                min_inf_rho_1: min_of(sel.iter().map(|r| r.inf_rho_1)),
                min_ratio: min_of(sel.iter().map(|r| r.ratio_min)),
                max_ratio: max_of(sel.iter().map(|r| r.ratio_max)),
            }
        })
        .collect();
    Ok(EnsembleTable { spec: spec.clone(), rows, members, summary, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ctrl() -> StepController {
        StepController { dt_init: 1e-4, dt_min: 1e-10, dt_max: 0.05, tol: 1e-10, guard: 0.5 }
    }

    fn round_traj(modes: usize) -> FlowTrajectory {
        let grid = GridSpec::new(modes).unwrap();
        flow::run(&MetricState::round(&grid), 1.0, &ctrl(), &member_snapshot_times(1.0)).unwrap()
    }

    #[test]
    fn kahler_einstein_passes_everything() {
        let traj = round_traj(24);
        let report = run_checks(&traj, &VerifyOptions::default(), None, ("x".into(), 0));
        assert!(report.all_passed(), "{:?}", report.failures());
        assert_eq!(report.checks.len(), CHECKS.len());
        let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, check_names());
        let g = report.get("o_blowup_shape").unwrap();
        assert!(g.values["c_grad"] < 1e-20);
        assert!(g.values["alpha_r"].abs() < 1e-8);
    }

    #[test]
    fn injected_volume_drift_fails_only_volume() {
        let mut traj = round_traj(16);
        traj.map_records(|r| r.volume += 1e-3 * r.t);
        let report = run_checks(&traj, &VerifyOptions::default(), None, ("x".into(), 0));
        assert_eq!(report.failures(), vec!["volume"]);
    }

    #[test]
    fn report_is_sorted_and_disabled_checks_are_skipped() {
        let traj = round_traj(16);
        let opts = VerifyOptions { disabled: vec!["e_quadratic_growth".into()], ..Default::default() };
        let report = run_checks(&traj, &opts, None, ("x".into(), 0));
        assert!(report.get("e_quadratic_growth").is_none());
        assert!(report.checks.windows(2).all(|w| w[0].name < w[1].name));
    }

    #[test]
    fn exponent_fit_oracle() {
        let samples: Vec<(f64, f64)> = dyadic_times().into_iter().map(|t| (t, 3.0 * t.powf(-1.7))).collect();
        assert!((loglog_exponent(&samples) - 1.7).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = samples.iter().map(|s| (s.0, 0.0)).collect();
        assert_eq!(loglog_exponent(&flat), 0.0);
    }

    #[test]
    fn too_few_dyadic_samples() {
        let grid = GridSpec::new(16).unwrap();
        let traj = flow::run(&MetricState::round(&grid), 1.0, &ctrl(), &[0.25, 0.5]).unwrap();
        assert!(matches!(blowup_exponent(&[traj]), Err(KrfError::InsufficientSamples { found: 3 })));
    }

    #[test]
    fn round_ensemble_closed_form() {
        let spec = EnsembleSpec {
            count: 5,
            roughness: 0.0,
            levels: vec![1],
            modes: 16,
            ctrl: ctrl(),
            ..Default::default()
        };
        let table = ensemble_scan(&spec).unwrap();
        assert!(table.failures.is_empty());
        for r in &table.rows {
            assert!((r.inf_rho_0 - 3.0 / (4.0 * PI)).abs() < 1e-10);
            assert!((r.inf_rho_1 - 3.0 / (4.0 * PI)).abs() < 1e-10);
        }
    }

    #[test]
    fn sampler_respects_lower_bound_and_is_reproducible() {
        let spec = EnsembleSpec { roughness: 2.0, r0: 0.3, max_degree: 10, ..Default::default() };
        for i in 0..10 {
            let (p, lambda) = sample_profile(&spec, i).unwrap();
            assert!(p.min_value() >= 0.3 - 1e-9 && lambda <= 1.0);
            assert!(p.closure_residual() < 1e-14);
            assert_eq!(sample_profile(&spec, i).unwrap().0, p);
        }
    }

    #[test]
    fn small_ensemble_scan() {
        let spec = EnsembleSpec { count: 3, levels: vec![1, 2], modes: 32, ctrl: ctrl(), ..Default::default() };
        let a = ensemble_scan(&spec).unwrap();
        assert!(a.failures.is_empty(), "{:?}", a.failures);
        for m in &a.members {
            assert!(m.rmin_margin >= -1e-6, "{m:?}");
            assert!(m.min_r > 0.0);
        }
        for r in &a.rows {
            assert!(r.ratio_min >= r.bound_lower * (1.0 - 1e-6));
            assert!(r.ratio_max <= r.bound_upper * (1.0 + 1e-6));
        }
        assert!(a.summary.iter().all(|s| s.min_inf_rho_0 > 0.0 && s.min_inf_rho_1 > 0.0));
        assert_eq!(a, ensemble_scan(&spec).unwrap());
    }

    #[test]
    fn perturbed_report_is_refinement_stable() {
        let spec = EnsembleSpec { count: 1, modes: 32, ctrl: ctrl(), levels: vec![1], ..Default::default() };
        let coarse = member_trajectory(&spec, 0).unwrap();
        let fine = member_trajectory(&spec.refined(), 0).unwrap();
        let opts = VerifyOptions { levels: vec![1], ..Default::default() };
        let report = run_checks(&coarse, &opts, Some(&fine), ("x".into(), 1));
        for c in &report.checks {
            assert!(c.stable.unwrap(), "{} moved {:?}", c.name, c.stability);
            assert!(c.stability.unwrap() < 0.1);
        }
        assert!(report.all_passed(), "{:?}", report.failures());
    }
}
