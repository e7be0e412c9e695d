//! Bergman kernels of `O(2l)` (the `l`-th power of the anticanonical bundle)
//! over a rotation-invariant metric.
//!
//! For the monomial section `z^j` the pointwise squared norm is
//! `e^{js - l v(s)}`, which in the grid variable is
//! `(1+x)^j (1-x)^{2l-j} q(x)` with the smooth factor `q = e^{-l f} / 4^l`.
//! The alternative Hermitian metric built from the volume form and `e^h`
//! gives `q = (w/2)^l e^{l h}`, which differs by a constant factor. Since
//! `dμ = 2π w dx`, every Gram entry is a Gauss-Jacobi integral of `q w`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{KrfError, Result};
use crate::flow::{flow_h, FlowTrajectory};
use crate::geometry::{MetricState, ScalarField, TWO_PI};
use crate::spectral::{gauss_jacobi, legendre_series};

pub const DEFAULT_MAX_LEVEL: usize = 16;

/// Which Hermitian metric on the anticanonical bundle weights sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HermitianChoice {
    /// `e^{-l v}` from the Kähler potential.
    #[default]
    Potential,
    /// `(ω e^{h})^l` with `h` in the flow normalization.
    VolumeForm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BergmanOptions {
    pub max_level: usize,
    pub choice: HermitianChoice,
    /// Relative tolerance for the quadrature refinement test.
    pub quad_tol: f64,
}

impl Default for BergmanOptions {
    fn default() -> Self {
        BergmanOptions { max_level: DEFAULT_MAX_LEVEL, choice: HermitianChoice::Potential, quad_tol: 1e-11 }
    }
}

/// Diagonal L² norms `G_j` of the monomials `z^j`, `j = 0..=2l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionGram {
    pub level: usize,
    pub norms: Vec<f64>,
    pub choice: HermitianChoice,
    /// Gauss-Jacobi points used for each entry.
    pub points: usize,
    /// Largest relative change between the two quadrature levels.
    pub quad_error: f64,
}

impl SectionGram {
    pub fn dimension(&self) -> usize {
        2 * self.level + 1
    }
}

#[derive(Debug, Clone)]
pub struct BergmanField {
    pub level: usize,
    pub rho: ScalarField,
    pub eta: ScalarField,
    /// `∫ ρ dμ`, which should equal `2l + 1`.
    pub trace: f64,
    pub gram: SectionGram,
}

fn check_level(l: usize, opts: &BergmanOptions) -> Result<()> {
    if l == 0 || l > opts.max_level {
        Err(KrfError::LevelOutOfRange { level: l, max: opts.max_level })
    } else {
        Ok(())
    }
}

/// Smooth factor `q(x)` of the chosen Hermitian metric at arbitrary `x`.
fn smooth_factor(state: &MetricState, l: usize, choice: HermitianChoice) -> impl Fn(f64) -> f64 + '_ {
    let lf = l as f64;
    // offset between the nodal flow-normalized h and the interpolant of -u
    let h_shift = flow_h(state)[0] + state.u()[0];
    move |x: f64| match choice {
        HermitianChoice::Potential => (-lf * state.eval_f(x) - lf * 4f64.ln()).exp(),
        HermitianChoice::VolumeForm => {
            let w = state.eval_w(x);
            let h = -legendre_series(state.u_modal(), x) + h_shift;
            (lf * ((0.5 * w).ln() + h)).exp()
        }
    }
}

/// Nodal smooth factor, using cached nodal data.
fn nodal_factor(state: &MetricState, l: usize, choice: HermitianChoice) -> Vec<f64> {
    let lf = l as f64;
    match choice {
        HermitianChoice::Potential => {
            state.potential().iter().map(|f| (-lf * f - lf * 4f64.ln()).exp()).collect()
        }
        HermitianChoice::VolumeForm => state
            .w()
            .iter()
            .zip(flow_h(state))
            .map(|(w, h)| (lf * ((0.5 * w).ln() + h)).exp())
            .collect(),
    }
}

/// `2π ∫ (1-x)^α (1+x)^β q w dx` on an `n`-point Gauss-Jacobi rule.
fn jacobi_integral(n: usize, alpha: f64, beta: f64, qw: &dyn Fn(f64) -> f64) -> f64 {
    TWO_PI * gauss_jacobi(n, alpha, beta).integrate(qw)
}

pub fn gram_diagonal(state: &MetricState, l: usize) -> Result<SectionGram> {
    gram_diagonal_with(state, l, &BergmanOptions::default())
}

pub fn gram_diagonal_with(state: &MetricState, l: usize, opts: &BergmanOptions) -> Result<SectionGram> {
    check_level(l, opts)?;
    let q = smooth_factor(state, l, opts.choice);
    let qw = |x: f64| q(x) * state.eval_w(x);
    let n1 = state.grid().modes() + 2 * l + 16;
    let n2 = n1 + n1 / 2;
    let mut norms = Vec::with_capacity(2 * l + 1);
    let mut quad_error = 0.0f64;
    for j in 0..=2 * l {
        let (alpha, beta) = ((2 * l - j) as f64, j as f64);
        let coarse = jacobi_integral(n1, alpha, beta, &qw);
        let fine = jacobi_integral(n2, alpha, beta, &qw);
        let err = ((coarse - fine) / fine).abs();
        if !(err <= opts.quad_tol) || !(fine > 0.0) {
            return Err(KrfError::QuadratureFailure { level: l, error: err });
        }
        quad_error = quad_error.max(err);
        norms.push(fine);
    }
    Ok(SectionGram { level: l, norms, choice: opts.choice, points: n2, quad_error })
}

/// `|z^j|²` at each node without the smooth factor: `(1+x)^j (1-x)^{2l-j}`.
fn monomial_weights(state: &MetricState, l: usize, j: usize) -> Vec<f64> {
    state
        .grid()
        .nodes()
        .iter()
        .map(|x| (1.0 + x).powi(j as i32) * (1.0 - x).powi((2 * l - j) as i32))
        .collect()
}

/// Values `e_j(x) = ‖z^j‖(x) / sqrt(G_j)` of the orthonormal basis at θ = 0.
fn orthonormal_values(state: &MetricState, gram: &SectionGram) -> Vec<Vec<f64>> {
    let q = nodal_factor(state, gram.level, gram.choice);
    (0..gram.dimension())
        .map(|j| {
            monomial_weights(state, gram.level, j)
                .iter()
                .zip(&q)
                .map(|(m, q)| (m * q / gram.norms[j]).sqrt())
                .collect()
        })
        .collect()
}

pub fn bergman_kernel(state: &MetricState, l: usize) -> Result<BergmanField> {
    bergman_kernel_with(state, l, &BergmanOptions::default())
}

pub fn bergman_kernel_with(state: &MetricState, l: usize, opts: &BergmanOptions) -> Result<BergmanField> {
    let gram = gram_diagonal_with(state, l, opts)?;
    let e = orthonormal_values(state, &gram);
    let n = state.grid().modes();
    let rho: Vec<f64> = (0..n).map(|i| e.iter().map(|ej| ej[i] * ej[i]).sum()).collect();
    let eta = peak_values(&e, n);
    let trace = state.integrate_values(&rho);
    let grid = state.grid();
    Ok(BergmanField {
        level: l,
        rho: ScalarField::new(grid, rho)?,
        eta: ScalarField::new(grid, eta)?,
        trace,
        gram,
    })
}

/// `sup ‖S(x)‖²` over unit sections, attained by the peak section
/// `a = e(x) / |e(x)|`, evaluated explicitly.
fn peak_values(e: &[Vec<f64>], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let norm = e.iter().map(|ej| ej[i] * ej[i]).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let value: f64 = e.iter().map(|ej| ej[i] / norm * ej[i]).sum();
            value * value
        })
        .collect()
}

pub fn eta(state: &MetricState, l: usize) -> Result<ScalarField> {
    Ok(bergman_kernel(state, l)?.eta)
}

/// `‖Σ a_j e_j(x)‖²` for a section with coefficients `a` in the orthonormal
/// basis; used to probe the extremal property.
pub fn section_density(field: &BergmanField, state: &MetricState, coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() != field.gram.dimension() {
        return Err(KrfError::InvalidArgument("coefficient count must be 2l + 1".into()));
    }
    let e = orthonormal_values(state, &field.gram);
    Ok((0..state.grid().modes())
        .map(|i| {
            let v: f64 = coeffs.iter().zip(&e).map(|(a, ej)| a * ej[i]).sum();
            v * v
        })
        .collect())
}

/// Pointwise `(min, max)` of `ρ_a / ρ_b`.
pub fn kernel_ratio(a: &MetricState, b: &MetricState, l: usize) -> Result<(f64, f64)> {
    b.check_grid(a.grid())?;
    let ra = bergman_kernel(a, l)?;
    let rb = bergman_kernel(b, l)?;
    Ok(ratio_extremes(ra.rho.values(), rb.rho.values()))
}

fn ratio_extremes(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter()
        .zip(b)
        .map(|(x, y)| x / y)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
}

/// Kernel equivalence between `t = 0` and a stored time `s` of a flow,
/// together with the bound implied by the Hermitian log ratio `c_s - f_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceCheck {
    pub level: usize,
    pub s: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// `e^{l inf(c_s - f_s)} min_j G_j(0)/G_j(s)`.
    pub lower_bound: f64,
    /// `e^{l sup(c_s - f_s)} max_j G_j(0)/G_j(s)`.
    pub upper_bound: f64,
    /// `sup |log(q_s / q_0) - l (c_s - f_s)|` for the volume-form weights.
    pub identity_residual: f64,
}

pub fn flow_equivalence(traj: &FlowTrajectory, s: f64, l: usize) -> Result<EquivalenceCheck> {
    let snap = traj
        .snapshot_at(s)
        .ok_or_else(|| KrfError::InvalidArgument(format!("no snapshot stored at s = {s}")))?;
    let s0 = traj.initial();
    let st = &snap.state;
    let opts = BergmanOptions { choice: HermitianChoice::VolumeForm, ..Default::default() };
    let k0 = bergman_kernel_with(s0, l, &opts)?;
    let ks = bergman_kernel_with(st, l, &opts)?;
    let (min_ratio, max_ratio) = ratio_extremes(ks.rho.values(), k0.rho.values());
    let log_ratio = crate::flow::hermitian_log_ratio(traj, s)?;
    let (lo, hi) = (log_ratio.min(), log_ratio.max());
    let gr: Vec<f64> = k0.gram.norms.iter().zip(&ks.gram.norms).map(|(a, b)| a / b).collect();
    let gmin = gr.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = gr.iter().copied().fold(0.0, f64::max);
    let lf = l as f64;
    let (q0, qs) = (nodal_factor(s0, l, opts.choice), nodal_factor(st, l, opts.choice));
    let identity_residual = q0
        .iter()
        .zip(&qs)
        .zip(log_ratio.values())
        .map(|((a, b), r)| ((b / a).ln() - lf * r).abs())
        .fold(0.0, f64::max);
    Ok(EquivalenceCheck {
        level: l,
        s,
        min_ratio,
        max_ratio,
        lower_bound: (lf * lo).exp() * gmin,
        upper_bound: (lf * hi).exp() * gmax,
        identity_residual,
    })
}

/// Kernel computed from the full (not assumed diagonal) Gram matrix of a
/// randomly mixed monomial basis, orthonormalized by Cholesky.
///
/// Off-diagonal entries carry the angular factor `e^{i(j-k)θ}`, integrated
/// by the trapezoidal rule, and radial factors with half-integer exponents.
pub fn bergman_kernel_dense(state: &MetricState, l: usize, seed: u64) -> Result<Vec<f64>> {
    let opts = BergmanOptions::default();
    check_level(l, &opts)?;
    let dim = 2 * l + 1;
    let q = smooth_factor(state, l, opts.choice);
    let qw = |x: f64| q(x) * state.eval_w(x);
    let n = state.grid().modes() + 2 * l + 24;
    let n_theta = 2 * dim + 1;
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        for k in 0..dim {
            let angular: f64 = (0..n_theta)
                .map(|m| ((j as f64 - k as f64) * TWO_PI * m as f64 / n_theta as f64).cos())
                .sum::<f64>()
                / n_theta as f64;
            if angular.abs() < 1e-12 {
                continue;
            }
            let beta = 0.5 * (j + k) as f64;
            let alpha = 2.0 * l as f64 - beta;
            gram[(j, k)] = angular * jacobi_integral(n, alpha, beta, &qw);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let u = z.qr().q();
    let mixed = &u * &gram * u.transpose();
    let chol = mixed
        .cholesky()
        .ok_or_else(|| KrfError::InvalidArgument("mixed Gram matrix is not positive definite".into()))?;
    let qn = nodal_factor(state, l, opts.choice);
    let nodes = state.grid().nodes();
    let mut rho = Vec::with_capacity(nodes.len());
    for (i, x) in nodes.iter().enumerate() {
        let e = DVector::from_fn(dim, |j, _| ((1.0 + x).powi(j as i32) * (1.0 - x).powi((2 * l - j) as i32) * qn[i]).sqrt());
        let v = chol.l().solve_lower_triangular(&(&u * e)).expect("Cholesky factor is nonsingular");
        rho.push(v.norm_squared());
    }
    Ok(rho)
}

/// Residuals of `Δ‖S‖² = ‖∇S‖² - l ‖S‖²` for `S = z^j`: the sup norm on the
/// grid and `|∫‖∇S‖² dμ - l ∫‖S‖² dμ|`.
pub fn section_identity_residual(state: &MetricState, l: usize, j: usize) -> Result<(f64, f64)> {
    if j > 2 * l {
        return Err(KrfError::InvalidArgument(format!("section index {j} exceeds 2l = {}", 2 * l)));
    }
    check_level(l, &BergmanOptions::default())?;
    let lf = l as f64;
    let q = nodal_factor(state, l, HermitianChoice::Potential);
    let nodes = state.grid().nodes();
    let norm_sq: Vec<f64> = monomial_weights(state, l, j).iter().zip(&q).map(|(m, q)| m * q).collect();
    // ‖∇S‖² = (j - l(1+τ))² ‖S‖² / v'' with v'' = w (1-x²)/2, written
    // without the removable 0/0 at the poles
    let grad_sq: Vec<f64> = nodes
        .iter()
        .zip(state.potential_dx())
        .zip(state.w())
        .zip(&q)
        .map(|(((&x, &fx), &w), &qi)| {
            let core = if j == 0 {
                let a = 1.0 + 0.5 * (1.0 - x) * fx;
                lf * lf * (1.0 + x) * a * a * (1.0 - x).powi(2 * l as i32 - 1)
            } else if j == 2 * l {
                let b = 1.0 - 0.5 * (1.0 + x) * fx;
                lf * lf * (1.0 - x) * b * b * (1.0 + x).powi(2 * l as i32 - 1)
            } else {
                let tau = x + 0.5 * (1.0 - x * x) * fx;
                (j as f64 - lf * (1.0 + tau)).powi(2)
                    * (1.0 + x).powi(j as i32 - 1)
                    * (1.0 - x).powi((2 * l - j) as i32 - 1)
            };
            2.0 * core * qi / w
        })
        .collect();
    let lap = state.laplacian_values(&norm_sq);
    let sup = lap
        .iter()
        .zip(&grad_sq)
        .zip(&norm_sq)
        .map(|((d, g), n)| (d - g + lf * n).abs())
        .fold(0.0, f64::max);
    let integrated = (state.integrate_values(&grad_sq) - lf * state.integrate_values(&norm_sq)).abs();
    Ok((sup, integrated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::GridSpec;
    use std::sync::Arc;
    use std::f64::consts::PI;

    fn binom(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    fn perturbed(grid: &Arc<GridSpec>) -> MetricState {
        let mut c = vec![0.0; grid.modes()];
        c[1] = 0.07;
        c[2] = 0.12;
        c[3] = -0.04;
        c[5] = 0.01;
        MetricState::from_coefficients(grid, c).unwrap()
    }

    #[test]
    fn round_gram_is_beta_integral() {
        let grid = GridSpec::new(32).unwrap();
        let st = MetricState::round(&grid);
        let g = gram_diagonal(&st, 1).unwrap();
        let expect = [4.0 * PI / 3.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];
        for (a, b) in g.norms.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        for l in 1..=8 {
            let g = gram_diagonal(&st, l).unwrap();
            for j in 0..=2 * l {
                let exact = 4.0 * PI / ((2 * l + 1) as f64 * binom(2 * l, j));
                assert!((g.norms[j] / exact - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_metric_has_symmetric_gram() {
        let grid = GridSpec::new(48).unwrap();
        let mut c = vec![0.0; 48];
        c[2] = 0.1;
        c[4] = -0.03;
        let st = MetricState::from_coefficients(&grid, c).unwrap();
        let g = gram_diagonal(&st, 3).unwrap();
        for j in 0..=6 {
            assert!(g.norms[j] > 0.0);
            assert!((g.norms[j] - g.norms[6 - j]).abs() < 1e-9 * g.norms[j].max(1.0));
        }
    }

    #[test]
    fn round_kernel_is_constant() {
        let grid = GridSpec::new(64).unwrap();
        let st = MetricState::round(&grid);
        for l in 1..=8 {
            let k = bergman_kernel(&st, l).unwrap();
            let target = (2 * l + 1) as f64 / (4.0 * PI);
            assert!(k.rho.values().iter().all(|r| (r - target).abs() < 1e-8));
            assert!((k.trace - (2 * l + 1) as f64).abs() < 1e-8);
        }
        let k = bergman_kernel(&st, 1).unwrap();
        assert!(k.eta.values().iter().all(|e| (e - 3.0 / (4.0 * PI)).abs() < 1e-9));
    }

    #[test]
    fn trace_and_potential_shift_invariance() {
        let grid = GridSpec::new(64).unwrap();
        let st = perturbed(&grid);
        let mut shifted = st.coefficients().to_vec();
        shifted[0] += 0.37;
        let st2 = MetricState::from_coefficients(&grid, shifted).unwrap();
        for l in 1..=4 {
            let a = bergman_kernel(&st, l).unwrap();
            let b = bergman_kernel(&st2, l).unwrap();
            assert!((a.trace - (2 * l + 1) as f64).abs() < 1e-8);
            for (x, y) in a.rho.values().iter().zip(b.rho.values()) {
                assert!((x - y).abs() < 1e-10 * x);
            }
        }
    }

    #[test]
    fn eta_equals_rho_and_dominates_random_sections() {
        let grid = GridSpec::new(48).unwrap();
        let st = perturbed(&grid);
        let k = bergman_kernel(&st, 3).unwrap();
        let n = k.gram.dimension() as f64;
        for (r, e) in k.rho.values().iter().zip(k.eta.values()) {
            assert!((r - e).abs() < 1e-9 * r.max(1.0));
            assert!(r / n <= *e + 1e-12 && *e <= r + 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut a: Vec<f64> = (0..7).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.iter_mut().for_each(|v| *v /= norm);
            let dens = section_density(&k, &st, &a).unwrap();
            for (d, e) in dens.iter().zip(k.eta.values()) {
                assert!(*d <= e + 1e-12);
            }
        }
    }

    #[test]
    fn dense_path_matches_diagonal() {
        let grid = GridSpec::new(48).unwrap();
        let st = perturbed(&grid);
        for l in [1, 2, 4] {
            let diag = bergman_kernel(&st, l).unwrap();
            let dense = bergman_kernel_dense(&st, l, 11).unwrap();
            for (a, b) in diag.rho.values().iter().zip(&dense) {
                assert!((a - b).abs() < 1e-8 * a.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hermitian_choice_does_not_change_rho() {
        let grid = GridSpec::new(64).unwrap();
        let st = perturbed(&grid);
        let opts = BergmanOptions { choice: HermitianChoice::VolumeForm, ..Default::default() };
        for l in 1..=4 {
            let a = bergman_kernel(&st, l).unwrap();
            let b = bergman_kernel_with(&st, l, &opts).unwrap();
            for (x, y) in a.rho.values().iter().zip(b.rho.values()) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn section_identity_holds() {
        let grid = GridSpec::new(64).unwrap();
        let round = MetricState::round(&grid);
        let (sup, int) = section_identity_residual(&round, 1, 1).unwrap();
        assert!(sup < 1e-7 && int < 1e-8);
        let (sup, _) = section_identity_residual(&round, 1, 0).unwrap();
        assert!(sup < 1e-7);
        let st = perturbed(&grid);
        for l in 1..=4 {
            for j in 0..=2 * l {
                let (sup, int) = section_identity_residual(&st, l, j).unwrap();
                assert!(int < 1e-8, "l={l} j={j}: {int}");
                assert!(sup < 1e-6, "l={l} j={j}: {sup}");
            }
        }
    }

    #[test]
    fn flow_equivalence_respects_hermitian_bound() {
        let grid = GridSpec::new(48).unwrap();
        let st = perturbed(&grid);
        let ctrl = crate::ode::StepController { dt_init: 1e-4, dt_min: 1e-9, dt_max: 0.05, tol: 1e-10, guard: 0.5 };
        let traj = crate::flow::run(&st, 1.0, &ctrl, &[0.5]).unwrap();
        for l in 1..=3 {
            for s in [0.5, 1.0] {
                let chk = flow_equivalence(&traj, s, l).unwrap();
                assert!(chk.identity_residual < 1e-6, "{}", chk.identity_residual);
                assert!(chk.max_ratio <= chk.upper_bound * (1.0 + 1e-6));
                assert!(chk.min_ratio >= chk.lower_bound * (1.0 - 1e-6));
                assert!(chk.max_ratio.is_finite() && chk.min_ratio > 0.0);
            }
        }
    }

    #[test]
    fn level_bounds() {
        let grid = GridSpec::new(16).unwrap();
        let st = MetricState::round(&grid);
        assert!(matches!(gram_diagonal(&st, 0), Err(KrfError::LevelOutOfRange { .. })));
        assert!(matches!(gram_diagonal(&st, 17), Err(KrfError::LevelOutOfRange { .. })));
        let (lo, hi) = kernel_ratio(&st, &st, 2).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
    }
}
