//! Dormand-Prince 5(4) with PI step-size control, FSAL reuse and cubic
//! Hermite dense output.

use serde::Serialize;

use crate::error::{KrfError, Result};

/// Step-size policy shared by the flow and the heat/entropy solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepController {
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    /// Mixed absolute/relative tolerance of the embedded error estimate.
    pub tol: f64,
    /// A step is rejected when it shrinks the positivity margin below this
    /// fraction of its previous value.
    pub guard: f64,
}

impl Default for StepController {
    fn default() -> Self {
        StepController { dt_init: 1e-4, dt_min: 1e-8, dt_max: 0.05, tol: 1e-10, guard: 0.5 }
    }
}

impl StepController {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt_min > 0.0
            && self.dt_min <= self.dt_init
            && self.dt_init <= self.dt_max
            && self.tol > 0.0
            && self.guard > 0.0
            && self.guard <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(KrfError::InvalidArgument(format!("inconsistent step controller {self:?}")))
        }
    }

    /// Halved step bounds and a tenfold tighter tolerance.
    pub fn refined(&self) -> StepController {
        StepController {
            dt_init: self.dt_init / 2.0,
            dt_min: self.dt_min,
            dt_max: self.dt_max / 2.0,
            tol: self.tol / 10.0,
            guard: self.guard,
        }
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// How the embedded error estimate is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ErrorNorm {
    /// Componentwise `tol (1 + |y_i|)`.
    Mixed,
    /// `tol ‖y‖_∞`, so the step sequence is invariant under `y → λ y`.
    Relative,
    /// `Mixed` divided by `(1 + i(i+1)/2)²` for Legendre coefficient `i` of
    /// a potential, so the error is measured in curvature units.
    Curvature,
}

pub(crate) struct Attempt {
    pub y: Vec<f64>,
    pub dy: Vec<f64>,
    pub err: f64,
}

/// One Dormand-Prince step of size `h` from `(t, y)` with `k1 = f(t, y)`.
pub(crate) fn dopri_attempt<F>(
    rhs: &mut F,
    t: f64,
    y: &[f64],
    k1: &[f64],
    h: f64,
    tol: f64,
    norm: ErrorNorm,
) -> Result<Attempt>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    k.push(k1.to_vec());
    let mut tmp = vec![0.0; n];
    for stage in 1..7 {
        for i in 0..n {
            let mut acc = y[i];
            for (j, kj) in k.iter().enumerate() {
                acc += h * A[stage][j] * kj[i];
            }
            tmp[i] = acc;
        }
        k.push(rhs(t + C[stage] * h, &tmp)?);
    }
    // stage 7 was evaluated at the 5th-order solution (FSAL)
    let y_new = tmp;
    let sup = y.iter().chain(&y_new).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut sum = 0.0;
    for i in 0..n {
        let mut e = 0.0;
        for (j, kj) in k.iter().enumerate() {
            e += E[j] * kj[i];
        }
        let scale = match norm {
            ErrorNorm::Mixed => tol + tol * y[i].abs().max(y_new[i].abs()),
            ErrorNorm::Relative => tol * sup.max(f64::MIN_POSITIVE),
            ErrorNorm::Curvature => {
                let ev = 1.0 + 0.5 * (i * (i + 1)) as f64;
                (tol + tol * y[i].abs().max(y_new[i].abs())) / (ev * ev)
            }
        };
        sum += (h * e / scale).powi(2);
    }
    let err = (sum / n as f64).sqrt();
    let dy = k.pop().unwrap();
    Ok(Attempt { y: y_new, dy, err })
}

/// Cubic Hermite interpolation between `(t0, y0, d0)` and `(t1, y1, d1)`.
pub fn hermite(t0: f64, y0: &[f64], d0: &[f64], t1: f64, y1: &[f64], d1: &[f64], t: f64) -> Vec<f64> {
    let h = t1 - t0;
    if h == 0.0 {
        return y0.to_vec();
    }
    let th = (t - t0) / h;
    let h00 = (1.0 + 2.0 * th) * (1.0 - th).powi(2);
    let h10 = th * (1.0 - th).powi(2);
    let h01 = th * th * (3.0 - 2.0 * th);
    let h11 = th * th * (th - 1.0);
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * h * d0[i] + h01 * y1[i] + h11 * h * d1[i])
        .collect()
}

/// Time derivative of the Hermite interpolant.
pub fn hermite_derivative(t0: f64, y0: &[f64], d0: &[f64], t1: f64, y1: &[f64], d1: &[f64], t: f64) -> Vec<f64> {
    let h = t1 - t0;
    if h == 0.0 {
        return d0.to_vec();
    }
    let th = (t - t0) / h;
    let g00 = 6.0 * th * (th - 1.0) / h;
    let g10 = (1.0 - th) * (1.0 - 3.0 * th);
    let g01 = -g00;
    let g11 = th * (3.0 * th - 2.0);
    (0..y0.len())
        .map(|i| g00 * y0[i] + g10 * d0[i] + g01 * y1[i] + g11 * d1[i])
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLog {
    pub accepted: usize,
    pub rejected: usize,
    /// `(t, dt, reason)` of every rejected attempt.
    pub rejections: Vec<(f64, f64, String)>,
}

/// Integrates `y' = rhs(t, y)` from `t0` to `t_end`, landing exactly on each
/// time in `stops`. `guard` may veto an accepted candidate (positivity);
/// `sink` sees every accepted point with its derivative and whether it is a
/// stop.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate<F, G, S>(
    ctrl: &StepController,
    t0: f64,
    y0: Vec<f64>,
    t_end: f64,
    stops: &[f64],
    norm: ErrorNorm,
    rhs: &mut F,
    guard: &mut G,
    sink: &mut S,
) -> Result<StepLog>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    G: FnMut(&[f64], &[f64]) -> std::result::Result<(), String>,
    S: FnMut(f64, &[f64], &[f64], bool) -> Result<()>,
{
    ctrl.validate()?;
    let mut sorted: Vec<f64> = stops.to_vec();
    sorted.sort_by(f64::total_cmp);
    let is_stop = |t: f64| sorted.binary_search_by(|s| s.total_cmp(&t)).is_ok();
    let mut targets: Vec<f64> = sorted.iter().copied().filter(|&s| s > t0 && s < t_end).collect();
    targets.push(t_end);
    targets.dedup();

    let (safe, beta, fac_min, fac_max): (f64, f64, f64, f64) = (0.9, 0.04, 0.2, 10.0);
    let expo = 0.2 - beta * 0.75;
    let mut facold: f64 = 1e-4;

    let mut log = StepLog::default();
    let mut t = t0;
    let mut y = y0;
    let mut dy = rhs(t, &y)?;
    sink(t, &y, &dy, is_stop(t0))?;
    let mut h = ctrl.dt_init.min(ctrl.dt_max);
    let mut idx = 0;
    while idx < targets.len() {
        let target = targets[idx];
        let mut h_try = h.min(ctrl.dt_max);
        let hits = target - t <= h_try * (1.0 + 1e-12);
        if hits {
            h_try = target - t;
        }
        let attempt = dopri_attempt(rhs, t, &y, &dy, h_try, ctrl.tol, norm);
        let reject = |log: &mut StepLog, reason: String| {
            log.rejected += 1;
            log.rejections.push((t, h_try, reason));
        };
        match attempt {
            Err(e) => {
                reject(&mut log, format!("stage failure: {e}"));
                h = h_try * 0.25;
            }
            Ok(att) if !(att.err <= 1.0) => {
                let fac11 = if att.err.is_finite() { att.err.powf(expo) } else { f64::INFINITY };
                reject(&mut log, format!("error estimate {:.3e}", att.err));
                h = h_try / (1.0 / fac_min).min(fac11 / safe);
            }
            Ok(att) => match guard(&y, &att.y) {
                Err(reason) => {
                    reject(&mut log, reason);
                    h = h_try * 0.5;
                }
                Ok(()) => {
                    let fac11 = att.err.powf(expo);
                    let fac = (fac11 / facold.powf(beta) / safe).clamp(1.0 / fac_max, 1.0 / fac_min);
                    facold = att.err.max(1e-4);
                    let proposal = h_try / fac;
                    t = if hits { target } else { t + h_try };
                    y = att.y;
                    dy = att.dy;
                    log.accepted += 1;
                    sink(t, &y, &dy, hits && is_stop(target))?;
                    if hits {
                        idx += 1;
                        h = proposal.max(h);
                    } else {
                        h = proposal;
                    }
                }
            },
        }
        if h < ctrl.dt_min && idx < targets.len() && targets[idx] - t > ctrl.dt_min {
            return Err(KrfError::DtUnderflow { t });
        }
        h = h.max(ctrl.dt_min);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_to_high_accuracy() {
        let ctrl = StepController { dt_init: 1e-3, dt_min: 1e-10, dt_max: 0.1, tol: 1e-12, guard: 0.5 };
        let mut rhs = |_t: f64, y: &[f64]| Ok(vec![-2.0 * y[0], y[0]]);
        let mut last = (0.0, vec![]);
        let mut hits = vec![];
        let log = integrate(
            &ctrl,
            0.0,
            vec![1.0, 0.0],
            1.0,
            &[0.25, 0.5],
            ErrorNorm::Mixed,
            &mut rhs,
            &mut |_, _| Ok(()),
            &mut |t, y, _, stop| {
                if stop {
                    hits.push(t);
                }
                last = (t, y.to_vec());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(hits, vec![0.25, 0.5]);
        assert_eq!(last.0, 1.0);
        assert!((last.1[0] - (-2.0f64).exp()).abs() < 1e-10);
        assert!((last.1[1] - 0.5 * (1.0 - (-2.0f64).exp())).abs() < 1e-10);
        assert!(log.accepted > 0);
    }

    #[test]
    fn hermite_reproduces_cubics() {
        let p = |t: f64| 1.0 + 2.0 * t - t * t + 0.5 * t * t * t;
        let dp = |t: f64| 2.0 - 2.0 * t + 1.5 * t * t;
        let (t0, t1) = (0.3, 0.9);
        for &t in &[0.3, 0.5, 0.77, 0.9] {
            let v = hermite(t0, &[p(t0)], &[dp(t0)], t1, &[p(t1)], &[dp(t1)], t)[0];
            assert!((v - p(t)).abs() < 1e-14);
            let d = hermite_derivative(t0, &[p(t0)], &[dp(t0)], t1, &[p(t1)], &[dp(t1)], t)[0];
            assert!((d - dp(t)).abs() < 1e-13);
        }
    }

    #[test]
    fn underflow_is_reported() {
        let ctrl = StepController { dt_init: 1e-3, dt_min: 1e-6, dt_max: 0.1, tol: 1e-10, guard: 0.5 };
        let mut rhs = |t: f64, _y: &[f64]| {
            if t > 0.01 {
                Err(KrfError::PositivityLoss { min_w: -1.0 })
            } else {
                Ok(vec![1.0])
            }
        };
        let out = integrate(&ctrl, 0.0, vec![0.0], 1.0, &[], ErrorNorm::Mixed, &mut rhs, &mut |_, _| Ok(()), &mut |_, _, _, _| Ok(()));
        assert!(matches!(out, Err(KrfError::DtUnderflow { .. })));
    }
}
