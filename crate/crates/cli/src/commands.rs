//! Subcommands. Heavy work may fan out over rayon; every file is written
//! from the calling thread.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use krflab::bergman::bergman_kernel;
use krflab::entropy::{coupled_w_series, mu_estimate, ricci_entropy, stencil_times, CoupledOptions, EntropyRecord};
use krflab::flow::{self, FlowTrajectory};
use krflab::geometry::{
    meridian_distance, state_from_curvature_profile, CurvatureProfile, MetricState, ProfileOptions, ScalarField,
};
use krflab::green::{
    equation_residual, flux_residual, green_profile, log_bound_fit, mean_value_inequality, mean_value_residual,
    near_pole_slope, GreenProfile,
};
use krflab::ode::StepController;
use krflab::spectral::GridSpec;
use krflab::verify::{
    blowup_exponent, ensemble_scan, member_snapshot_times, member_trajectory, run_checks, BlowupFit, EnsembleTable,
    VerificationReport,
};
use krflab::KrfError;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, Format, RunConfig};
use crate::snapshot::{self, Snapshot, SnapshotError};
use crate::svg::{Plot, Series};

/// Version of every CSV and JSON layout written here.
pub const SCHEMA: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Snapshot(SnapshotError),
    Numerical(KrfError),
    Io(io::Error),
    ChecksFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) | CliError::Snapshot(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Snapshot(e) => write!(f, "{e}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
            CliError::Io(e) => write!(f, "io: {e}"),
            CliError::ChecksFailed(names) => write!(f, "failed checks: {}", names.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<SnapshotError> for CliError {
    fn from(e: SnapshotError) -> Self {
        match e {
            SnapshotError::Io(e) => CliError::Io(e),
            e => CliError::Snapshot(e),
        }
    }
}

impl From<KrfError> for CliError {
    fn from(e: KrfError) -> Self {
        CliError::Numerical(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub struct Ctx {
    pub cfg: RunConfig,
    pub quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        let p = self.path(name);
        fs::write(&p, contents)?;
        self.note(format!("wrote {}", p.display()));
        Ok(())
    }

    fn write_if(&self, fmt: Format, name: &str, contents: impl FnOnce() -> CliResult<String>) -> CliResult<()> {
        if self.cfg.wants(fmt) {
            self.write(name, &contents()?)?;
        }
        Ok(())
    }
}

/// Initial metric: the curvature profile when one is given, else the
/// modal potential (round when empty).
pub fn initial_state(cfg: &RunConfig, modes: usize) -> krflab::Result<MetricState> {
    let grid = GridSpec::new(modes)?;
    if cfg.initial_profile.is_empty() {
        MetricState::from_coefficients(&grid, cfg.initial_potential.clone())
    } else {
        let p = CurvatureProfile::from_coefficients(cfg.initial_profile.clone(), cfg.initial_r0)?;
        state_from_curvature_profile(&p, &grid, ProfileOptions::default())
    }
}

fn load_state(cfg: &RunConfig, snapshot: Option<&Path>) -> CliResult<(MetricState, f64)> {
    match snapshot {
        Some(p) => {
            let s = Snapshot::load(p)?;
            Ok((s.state()?, s.t))
        }
        None => Ok((initial_state(cfg, cfg.modes)?, 0.0)),
    }
}

fn merged_times(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = a.iter().chain(b).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn sup_abs_r(state: &MetricState) -> f64 {
    state.r_max().abs().max(state.r_min().abs())
}

fn csv_header(kind: &str, columns: &str) -> String {
    format!("# krflab {kind} schema {SCHEMA}\n{columns}\n")
}

pub fn simulate_trajectory(cfg: &RunConfig) -> krflab::Result<FlowTrajectory> {
    let state = initial_state(cfg, cfg.modes)?;
    flow::run(&state, cfg.t_end, &cfg.controller(), &cfg.snapshot_times)
}

pub fn diagnostics_csv(traj: &FlowTrajectory) -> krflab::Result<String> {
    let mut s = csv_header("diagnostics", "t,R_min,R_max,sup_grad_u_sq,vol,a,c_s,c_s_residual,W");
    for snap in traj.snapshots() {
        let r = &snap.record;
        let w = ricci_entropy(&snap.state)?;
        s.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.t, r.r_min, r.r_max, r.sup_grad_u_sq, r.volume, r.a, r.c, r.c_residual, w
        ));
    }
    Ok(s)
}

pub fn simulate(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    ctx.note(format!("simulate: {} modes to t = {}", cfg.modes, cfg.t_end));
    let traj = simulate_trajectory(cfg)?;
    ctx.write_if(Format::Csv, "diagnostics.csv", || Ok(diagnostics_csv(&traj)?))?;
    let hash = cfg.hash();
    let dir = cfg.out_dir.join("snapshots");
    fs::create_dir_all(&dir)?;
    for snap in traj.snapshots() {
        if snap.t == 0.0 || cfg.snapshot_times.contains(&snap.t) || snap.t == traj.t_end() {
            Snapshot::of_state(&snap.state, snap.t, &hash).save(&dir.join(snapshot::file_name(snap.t)))?;
        }
    }
    ctx.note(format!("wrote snapshots to {}", dir.display()));
    Ok(())
}

pub fn bergman_csv(state: &MetricState, levels: &[usize]) -> krflab::Result<String> {
    let mut s = csv_header("bergman", "x,l,rho,eta");
    for &l in levels {
        let field = bergman_kernel(state, l)?;
        for ((x, rho), eta) in state.grid().nodes().iter().zip(field.rho.values()).zip(field.eta.values()) {
            s.push_str(&format!("{x:?},{l},{rho:?},{eta:?}\n"));
        }
        let eta_total = state.integrate_values(field.eta.values());
        s.push_str(&format!("integral,{l},{:?},{:?}\n", field.trace, eta_total));
    }
    Ok(s)
}

pub fn bergman(ctx: &Ctx, snapshot: Option<&Path>) -> CliResult<()> {
    let (state, t) = load_state(&ctx.cfg, snapshot)?;
    ctx.note(format!("bergman: levels {:?} at t = {t}", ctx.cfg.levels));
    ctx.write_if(Format::Csv, "bergman.csv", || Ok(bergman_csv(&state, &ctx.cfg.levels)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct BlowupSection {
    pub bound: f64,
    pub fit: Option<BlowupFit>,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyDocument {
    pub schema: u32,
    pub report: VerificationReport,
    pub blowup: BlowupSection,
    pub ensemble: Option<EnsembleTable>,
}

impl VerifyDocument {
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self.report.failures().into_iter().map(String::from).collect();
        if !self.blowup.passed {
            out.push("blowup_exponent".into());
        }
        if let Some(t) = &self.ensemble {
            for (i, e) in &t.failures {
                out.push(format!("ensemble member {i}: {e}"));
            }
            if t.summary.iter().any(|r| !(r.min_inf_rho_0 > 0.0 && r.min_inf_rho_1 > 0.0)) {
                out.push("ensemble_lower_bound".into());
            }
        }
        out
    }
}

/// Flow used by `verify`: dyadic and 1/32-grid snapshot times plus the
/// configured ones.
pub fn verify_trajectory(cfg: &RunConfig, modes: usize, ctrl: &StepController) -> krflab::Result<FlowTrajectory> {
    let state = initial_state(cfg, modes)?;
    let times = merged_times(&member_snapshot_times(cfg.t_end), &cfg.snapshot_times);
    flow::run(&state, cfg.t_end, ctrl, &times)
}

/// Runs the verification suite; the returned document serializes
/// identically for identical configurations.
pub fn verify_document(cfg: &RunConfig) -> CliResult<(VerifyDocument, FlowTrajectory)> {
    if cfg.t_end < 1.0 {
        return Err(ConfigError { line: 0, message: "verify needs flow.t_end >= 1".into() }.into());
    }
    let ctrl = cfg.controller();
    let traj = verify_trajectory(cfg, cfg.modes, &ctrl)?;
    let refined = if cfg.refine { Some(verify_trajectory(cfg, 2 * cfg.modes, &ctrl.refined())?) } else { None };
    let opts = cfg.verify_options();
    let report = run_checks(&traj, &opts, refined.as_ref(), (cfg.hash(), cfg.seed));

    let (ensemble, members) = if cfg.run_ensemble {
        let spec = cfg.ensemble_spec();
        let table = ensemble_scan(&spec)?;
        let members: Vec<FlowTrajectory> = (0..spec.count)
            .into_par_iter()
            .map(|i| member_trajectory(&spec, i))
            .collect::<Vec<_>>()
            .into_iter()
            .filter_map(|r| r.ok())
            .collect();
        (Some(table), members)
    } else {
        (None, Vec::new())
    };

    let bound = 0.5 * (cfg.n0 + 2.0);
    let mut all = vec![traj.clone()];
    all.extend(members);
    let blowup = match blowup_exponent(&all) {
        Ok(fit) => BlowupSection {
            bound,
            passed: fit.max_alpha_r <= bound + cfg.slack_abs && fit.max_alpha_grad <= bound + cfg.slack_abs,
            fit: Some(fit),
            error: None,
        },
        Err(e) => BlowupSection { bound, fit: None, passed: false, error: Some(e.to_string()) },
    };
    Ok((VerifyDocument { schema: SCHEMA, report, blowup, ensemble }, traj))
}

pub fn verify_json(doc: &VerifyDocument) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(doc)?;
    s.push('\n');
    Ok(s)
}

/// `sup |R|` and `sup |∇u|²` against `t` on log axes, with a dashed
/// `C t^{-e}` guide through the largest `sup |R| t^e`.
pub fn sup_plot(r: &[(f64, f64)], grad: &[(f64, f64)], exponent: f64) -> Plot {
    let c = r.iter().map(|&(t, v)| v * t.powf(exponent)).fold(0.0, f64::max);
    let guide: Vec<(f64, f64)> = r.iter().map(|&(t, _)| (t, c * t.powf(-exponent))).collect();
    Plot::new("curvature and gradient sup norms", "t", "sup")
        .log_log()
        .with(Series::new("sup |R|", r.to_vec()))
        .with(Series::new("sup |grad u|^2", grad.to_vec()))
        .with(Series::new(format!("C t^-{exponent}"), guide).dashed())
}

pub fn entropy_plot(points: &[(f64, f64)]) -> Plot {
    Plot::new("W entropy along the flow", "t", "W").with(Series::new("W", points.to_vec()))
}

fn ratio_plot(traj: &FlowTrajectory, levels: &[usize]) -> krflab::Result<Plot> {
    let start = traj.initial();
    let end = &traj.last().state;
    let mut plot = Plot::new("Bergman kernel ratio at the final time", "x", "rho_t / rho_0");
    for &l in levels {
        let a = bergman_kernel(start, l)?;
        let b = bergman_kernel(end, l)?;
        let pts = start
            .grid()
            .nodes()
            .iter()
            .zip(a.rho.values().iter().zip(b.rho.values()))
            .map(|(&x, (r0, r1))| (x, r1 / r0))
            .collect();
        plot = plot.with(Series::new(format!("l = {l}"), pts));
    }
    Ok(plot)
}

/// `(x, d, |log d|, Γ)` at every node but the pole.
pub fn green_samples(gp: &GreenProfile, state: &MetricState) -> krflab::Result<Vec<(f64, f64, f64, f64)>> {
    let mut out = Vec::new();
    for (&x, &g) in gp.grid().nodes().iter().zip(gp.values()) {
        if x == -1.0 {
            continue;
        }
        let d = meridian_distance(state, -1.0, x)?;
        out.push((x, d, d.ln().abs(), g));
    }
    Ok(out)
}

fn green_plot(samples: &[(f64, f64, f64, f64)]) -> Plot {
    Plot::new("Green function from the pole", "|log d|", "Gamma")
        .with(Series::new("Gamma", samples.iter().map(|s| (s.2, s.3)).collect()))
}

pub fn verify(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    ctx.note(format!("verify: {} modes, refine = {}, ensemble = {}", cfg.modes, cfg.refine, cfg.run_ensemble));
    let (doc, traj) = verify_document(cfg)?;
    ctx.write_if(Format::Json, "report.json", || verify_json(&doc))?;
    if cfg.wants(Format::Svg) {
        let snaps: Vec<_> = traj.snapshots().iter().filter(|s| s.t > 0.0).collect();
        let r: Vec<(f64, f64)> = snaps.iter().map(|s| (s.t, sup_abs_r(&s.state))).collect();
        let g: Vec<(f64, f64)> = snaps.iter().map(|s| (s.t, s.record.sup_grad_u_sq)).collect();
        ctx.write("sup_curvature.svg", &sup_plot(&r, &g, 0.5 * (cfg.n0 + 2.0)).render())?;
        ctx.write("kernel_ratio.svg", &ratio_plot(&traj, &cfg.levels)?.render())?;
        let state = traj.initial();
        let gp = green_profile(state)?;
        ctx.write("green.svg", &green_plot(&green_samples(&gp, state)?).render())?;
        let w = traj
            .snapshots()
            .iter()
            .map(|s| Ok((s.t, ricci_entropy(&s.state)?)))
            .collect::<krflab::Result<Vec<_>>>()?;
        ctx.write("entropy.svg", &entropy_plot(&w).render())?;
    }
    let failures = doc.failures();
    if failures.is_empty() {
        ctx.note("verify: all checks passed");
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failures))
    }
}

pub fn ensemble_csvs(table: &EnsembleTable) -> (String, String, String) {
    let mut rows =
        csv_header("ensemble", "member,l,inf_rho_0,inf_rho_half,inf_rho_1,ratio_min,ratio_max,bound_lower,bound_upper");
    for r in &table.rows {
        rows.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.member,
            r.level,
            r.inf_rho_0,
            r.inf_rho_half,
            r.inf_rho_1,
            r.ratio_min,
            r.ratio_max,
            r.bound_lower,
            r.bound_upper
        ));
    }
    let mut members =
        csv_header("ensemble members", "member,lambda,min_R,rmin_margin,sqrt_constant,cs_constant,conservation");
    for m in &table.members {
        members.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            m.member, m.lambda, m.min_r, m.rmin_margin, m.sqrt_constant, m.cs_constant, m.conservation
        ));
    }
    let mut summary = csv_header("ensemble summary", "l,min_inf_rho_0,min_inf_rho_1,min_ratio,max_ratio");
    for s in &table.summary {
        summary.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            s.level, s.min_inf_rho_0, s.min_inf_rho_1, s.min_ratio, s.max_ratio
        ));
    }
    (rows, members, summary)
}

pub fn ensemble(ctx: &Ctx) -> CliResult<()> {
    let spec = ctx.cfg.ensemble_spec();
    ctx.note(format!("ensemble: {} members, R0 = {}, seed {}", spec.count, spec.r0, spec.seed));
    let table = ensemble_scan(&spec)?;
    if ctx.cfg.wants(Format::Csv) {
        let (rows, members, summary) = ensemble_csvs(&table);
        ctx.write("ensemble.csv", &rows)?;
        ctx.write("ensemble_members.csv", &members)?;
        ctx.write("ensemble_summary.csv", &summary)?;
    }
    ctx.write_if(Format::Json, "ensemble.json", || {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: u32,
            config_hash: String,
            ensemble: &'a EnsembleTable,
        }
        let mut s = serde_json::to_string_pretty(&Doc { schema: SCHEMA, config_hash: ctx.cfg.hash(), ensemble: &table })?;
        s.push('\n');
        Ok(s)
    })?;
    let mut failures: Vec<String> = table.failures.iter().map(|(i, e)| format!("member {i}: {e}")).collect();
    for s in &table.summary {
        if !(s.min_inf_rho_0 > 0.0 && s.min_inf_rho_1 > 0.0) {
            failures.push(format!("lower bound at l = {}", s.level));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failures))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GreenSummary {
    pub schema: u32,
    pub t: f64,
    pub c_lower: f64,
    pub c_log: f64,
    pub near_pole_slope: f64,
    pub equation_residual: f64,
    pub flux_residual: f64,
    pub mean_residual: f64,
    /// Green representation residual for the Ricci potential.
    pub representation_residual: f64,
    pub mean_value_lhs: f64,
    pub mean_value_rhs: f64,
}

pub fn green_summary(state: &MetricState, t: f64) -> krflab::Result<(GreenSummary, GreenProfile)> {
    let gp = green_profile(state)?;
    let fit = log_bound_fit(&gp, state)?;
    let u = ScalarField::new(state.grid(), state.u().to_vec())?;
    let c0 = (-state.r_min()).max(0.0);
    let (lhs, rhs) = mean_value_inequality(&gp, state, c0)?;
    let summary = GreenSummary {
        schema: SCHEMA,
        t,
        c_lower: fit.c_lower,
        c_log: fit.c_log,
        near_pole_slope: near_pole_slope(&gp, state)?,
        equation_residual: equation_residual(&gp, state)?,
        flux_residual: flux_residual(&gp, state)?,
        mean_residual: gp.mean_residual(),
        representation_residual: mean_value_residual(&gp, state, &u)?,
        mean_value_lhs: lhs,
        mean_value_rhs: rhs,
    };
    Ok((summary, gp))
}

pub fn green(ctx: &Ctx, snapshot: Option<&Path>) -> CliResult<()> {
    let (state, t) = load_state(&ctx.cfg, snapshot)?;
    ctx.note(format!("green: pole at x = -1, t = {t}"));
    let (summary, gp) = green_summary(&state, t)?;
    let samples = green_samples(&gp, &state)?;
    ctx.write_if(Format::Csv, "green.csv", || {
        let mut s = csv_header("green", "x,d,abs_log_d,gamma");
        for (x, d, l, g) in &samples {
            s.push_str(&format!("{x:?},{d:?},{l:?},{g:?}\n"));
        }
        Ok(s)
    })?;
    ctx.write_if(Format::Json, "green.json", || Ok(serde_json::to_string_pretty(&summary)? + "\n"))?;
    ctx.write_if(Format::Svg, "green.svg", || Ok(green_plot(&samples).render()))
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropySummary {
    pub schema: u32,
    pub records: Vec<EntropyRecord>,
    pub min_dw_dt: f64,
    pub max_rate_mismatch: f64,
    pub mu_initial: Option<f64>,
    pub mu_final: Option<f64>,
    pub mu_error: Option<String>,
}

pub fn entropy_summary(cfg: &RunConfig) -> krflab::Result<EntropySummary> {
    let opts = CoupledOptions {
        record_times: (0..=8).map(|k| cfg.t_end * k as f64 / 8.0).collect(),
        ..Default::default()
    };
    let state = initial_state(cfg, cfg.modes)?;
    let ctrl = cfg.controller();
    let traj = flow::run(&state, cfg.t_end, &ctrl, &stencil_times(&opts, cfg.t_end))?;
    let last = &traj.last().state;
    let f_end = ScalarField::new(last.grid(), last.u().to_vec())?;
    let records = coupled_w_series(&traj, &f_end, &opts, &ctrl)?;
    let min_dw_dt = records.iter().map(|r| r.dw_dt).fold(f64::INFINITY, f64::min);
    let max_rate_mismatch = records
        .iter()
        .map(|r| (r.dw_dt - r.integrand).abs() / r.integrand.abs().max(1e-12))
        .fold(0.0, f64::max);
    let (mu_initial, mu_final, mu_error) = match (mu_estimate(&state), mu_estimate(last)) {
        (Ok(a), Ok(b)) => (Some(a.value), Some(b.value), None),
        (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
    };
    Ok(EntropySummary { schema: SCHEMA, records, min_dw_dt, max_rate_mismatch, mu_initial, mu_final, mu_error })
}

pub fn entropy(ctx: &Ctx) -> CliResult<()> {
    ctx.note(format!("entropy: coupled flow to t = {}", ctx.cfg.t_end));
    let summary = entropy_summary(&ctx.cfg)?;
    ctx.write_if(Format::Csv, "entropy.csv", || {
        let mut s = csv_header("entropy", "t,W,constraint_residual,dW_dt,integrand");
        for r in &summary.records {
            s.push_str(&format!(
                "{:?},{:?},{:?},{:?},{:?}\n",
                r.t, r.w, r.constraint_residual, r.dw_dt, r.integrand
            ));
        }
        Ok(s)
    })?;
    ctx.write_if(Format::Json, "entropy.json", || Ok(serde_json::to_string_pretty(&summary)? + "\n"))?;
    ctx.write_if(Format::Svg, "entropy.svg", || {
        Ok(entropy_plot(&summary.records.iter().map(|r| (r.t, r.w)).collect::<Vec<_>>()).render())
    })?;
    if summary.min_dw_dt < -ctx.cfg.slack_abs {
        return Err(CliError::ChecksFailed(vec![format!("entropy decreased: min dW/dt = {:e}", summary.min_dw_dt)]));
    }
    Ok(())
}

/// Columns of a diagnostics CSV, keyed by header name.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<String> = lines.next().ok_or("empty csv")?.split(',').map(String::from).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(format!("row {} has {} fields, expected {}", n + 1, fields.len(), header.len()));
        }
        for (c, f) in cols.iter_mut().zip(fields) {
            c.push(f.parse().map_err(|_| format!("row {}: bad number `{f}`", n + 1))?);
        }
    }
    Ok((header, cols))
}

pub fn plot(ctx: &Ctx) -> CliResult<()> {
    let path = ctx.path("diagnostics.csv");
    let text = fs::read_to_string(&path)?;
    let (header, cols) =
        read_csv(&text).map_err(|m| CliError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()))))?;
    let col = |name: &str| -> CliResult<&Vec<f64>> {
        header.iter().position(|h| h == name).map(|i| &cols[i]).ok_or_else(|| {
            CliError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("diagnostics.csv lacks column {name}")))
        })
    };
    let t = col("t")?;
    let zip = |v: &Vec<f64>| -> Vec<(f64, f64)> { t.iter().copied().zip(v.iter().copied()).collect() };
    let (rmin, rmax, grad, w) = (col("R_min")?, col("R_max")?, col("sup_grad_u_sq")?, col("W")?);
    let sup_r: Vec<f64> = rmin.iter().zip(rmax).map(|(a, b)| a.abs().max(b.abs())).collect();
    let bounds = Plot::new("scalar curvature range", "t", "R")
        .with(Series::new("R_min", zip(rmin)))
        .with(Series::new("R_max", zip(rmax)));
    ctx.write("curvature_range.svg", &bounds.render())?;
    let positive = |v: Vec<(f64, f64)>| -> Vec<(f64, f64)> { v.into_iter().filter(|p| p.0 > 0.0).collect() };
    ctx.write("sup_curvature.svg", &sup_plot(&positive(zip(&sup_r)), &positive(zip(grad)), 0.5 * (ctx.cfg.n0 + 2.0)).render())?;
    ctx.write("entropy.svg", &entropy_plot(&zip(w)).render())?;
    Ok(())
}
