//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use krflab::ode::StepController;
use krflab::parabolic::dyadic_times;
use krflab::verify::{check_names, EnsembleSpec, VerifyOptions};
use sha2::{Digest, Sha256};

/// A configuration error; `line` is 0 for command-line overrides and
/// cross-field checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "config line {}: {}", self.line, self.message)
        } else {
            write!(f, "config: {}", self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub modes: usize,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub tol: f64,
    pub t_end: f64,
    pub snapshot_times: Vec<f64>,
    /// Modal coefficients of the initial potential (round if empty).
    pub initial_potential: Vec<f64>,
    /// Legendre coefficients of a prescribed initial curvature profile;
    /// takes precedence over `initial_potential` when non-empty.
    pub initial_profile: Vec<f64>,
    pub initial_r0: f64,
    pub ensemble_count: usize,
    pub ensemble_r0: f64,
    pub seed: u64,
    pub roughness: f64,
    pub max_degree: usize,
    pub horizon: f64,
    pub levels: Vec<usize>,
    pub enabled: Vec<String>,
    pub n0: f64,
    pub slack_abs: f64,
    pub slack_rel: f64,
    pub conservation_tol: f64,
    pub stability_tol: f64,
    pub refine: bool,
    pub run_ensemble: bool,
    pub out_dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = StepController::default();
        RunConfig {
            modes: 64,
            dt_init: c.dt_init,
            dt_min: c.dt_min,
            dt_max: c.dt_max,
            tol: c.tol,
            t_end: 1.0,
            snapshot_times: default_snapshot_times(1.0),
            initial_potential: Vec::new(),
            initial_profile: Vec::new(),
            initial_r0: 0.1,
            ensemble_count: 20,
            ensemble_r0: 0.5,
            seed: 1,
            roughness: 0.5,
            max_degree: 6,
            horizon: 1.0,
            levels: vec![1, 2, 3, 4],
            enabled: check_names().into_iter().map(String::from).collect(),
            n0: 3.0,
            slack_abs: 1e-6,
            slack_rel: 0.01,
            conservation_tol: 1e-7,
            stability_tol: 0.25,
            refine: false,
            run_ensemble: false,
            out_dir: PathBuf::from("krflab-out"),
            formats: vec![Format::Csv, Format::Json, Format::Svg],
        }
    }
}

/// Dyadic times plus multiples of 1/16 up to `t_end`.
pub fn default_snapshot_times(t_end: f64) -> Vec<f64> {
    let mut t: Vec<f64> = dyadic_times().into_iter().filter(|&t| t <= t_end).collect();
    t.extend((1..=(16.0 * t_end).floor() as usize).map(|k| k as f64 / 16.0));
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

const KEYS: &[&str] = &[
    "bergman.levels",
    "checks.conservation_tol",
    "checks.enabled",
    "checks.ensemble",
    "checks.n0",
    "checks.refine",
    "checks.slack_abs",
    "checks.slack_rel",
    "checks.stability_tol",
    "ensemble.R0",
    "ensemble.count",
    "ensemble.horizon",
    "ensemble.max_degree",
    "ensemble.roughness",
    "ensemble.seed",
    "flow.dt_init",
    "flow.dt_max",
    "flow.dt_min",
    "flow.snapshot_times",
    "flow.t_end",
    "flow.tol",
    "grid.modes",
    "initial.potential",
    "initial.profile",
    "initial.r0",
    "output.dir",
    "output.formats",
];

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError { line, message: message.into() }
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.parse().map_err(|_| err(line, format!("{key}: `{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(err(line, format!("{key}: value must be finite")));
    }
    Ok(x)
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| err(line, format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_f64_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    list(v).map(|x| parse_f64(line, key, x)).collect()
}

fn fmt_list<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut explicit_snapshots = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{body}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(line, format!("unknown key `{key}`")));
            }
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(err(line, format!("duplicate key `{key}` (first set on line {prev})")));
            }
            if key == "flow.snapshot_times" {
                explicit_snapshots = true;
            }
            cfg.set(line, key, value)?;
        }
        if !explicit_snapshots {
            cfg.snapshot_times = default_snapshot_times(cfg.t_end);
        }
        cfg.validate(&seen)?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "grid.modes" => self.modes = parse_usize(line, key, v)?,
            "flow.dt_init" => self.dt_init = parse_f64(line, key, v)?,
            "flow.dt_min" => self.dt_min = parse_f64(line, key, v)?,
            "flow.dt_max" => self.dt_max = parse_f64(line, key, v)?,
            "flow.tol" => self.tol = parse_f64(line, key, v)?,
            "flow.t_end" => self.t_end = parse_f64(line, key, v)?,
            "flow.snapshot_times" => self.snapshot_times = parse_f64_list(line, key, v)?,
            "initial.potential" => self.initial_potential = parse_f64_list(line, key, v)?,
            "initial.profile" => self.initial_profile = parse_f64_list(line, key, v)?,
            "initial.r0" => self.initial_r0 = parse_f64(line, key, v)?,
            "ensemble.count" => self.ensemble_count = parse_usize(line, key, v)?,
            "ensemble.R0" => self.ensemble_r0 = parse_f64(line, key, v)?,
            "ensemble.seed" => self.seed = v.parse().map_err(|_| err(line, format!("{key}: `{v}` is not a seed")))?,
            "ensemble.roughness" => self.roughness = parse_f64(line, key, v)?,
            "ensemble.max_degree" => self.max_degree = parse_usize(line, key, v)?,
            "ensemble.horizon" => self.horizon = parse_f64(line, key, v)?,
            "bergman.levels" => {
                self.levels = list(v).map(|x| parse_usize(line, key, x)).collect::<Result<_, _>>()?;
            }
            "checks.enabled" => {
                self.enabled = if v == "all" {
                    check_names().into_iter().map(String::from).collect()
                } else {
                    let names = check_names();
                    let mut out = Vec::new();
                    for n in list(v) {
                        if !names.contains(&n) {
                            return Err(err(line, format!("unknown check `{n}`")));
                        }
                        out.push(n.to_string());
                    }
                    out
                };
            }
            "checks.n0" => self.n0 = parse_f64(line, key, v)?,
            "checks.slack_abs" => self.slack_abs = parse_f64(line, key, v)?,
            "checks.slack_rel" => self.slack_rel = parse_f64(line, key, v)?,
            "checks.conservation_tol" => self.conservation_tol = parse_f64(line, key, v)?,
            "checks.stability_tol" => self.stability_tol = parse_f64(line, key, v)?,
            "checks.refine" => self.refine = parse_bool(line, key, v)?,
            "checks.ensemble" => self.run_ensemble = parse_bool(line, key, v)?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            "output.formats" => {
                self.formats = list(v)
                    .map(|f| match f {
                        "csv" => Ok(Format::Csv),
                        "json" => Ok(Format::Json),
                        "svg" => Ok(Format::Svg),
                        _ => Err(err(line, format!("unknown output format `{f}`"))),
                    })
                    .collect::<Result<_, _>>()?;
            }
            _ => unreachable!("key list and setter out of sync: {key}"),
        }
        Ok(())
    }

    fn validate(&self, lines: &BTreeMap<String, usize>) -> Result<(), ConfigError> {
        let at = |key: &str| lines.get(key).copied().unwrap_or(0);
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(err(at(key), format!("{key}: {msg}"))) };
        check((4..=2048).contains(&self.modes), "grid.modes", "must lie in 4..=2048")?;
        check(self.dt_min > 0.0, "flow.dt_min", "must be positive")?;
        check(self.dt_init >= self.dt_min, "flow.dt_init", "must be at least flow.dt_min")?;
        check(self.dt_max >= self.dt_init, "flow.dt_max", "must be at least flow.dt_init")?;
        check(self.tol > 0.0 && self.tol < 1.0, "flow.tol", "must lie in (0, 1)")?;
        check(self.t_end > 0.0 && self.t_end <= 100.0, "flow.t_end", "must lie in (0, 100]")?;
        check(
            self.snapshot_times.iter().all(|&t| t > 0.0 && t <= self.t_end),
            "flow.snapshot_times",
            "times must lie in (0, flow.t_end]",
        )?;
        check(self.initial_potential.len() <= self.modes, "initial.potential", "more coefficients than grid.modes")?;
        check(self.initial_r0 > 0.0, "initial.r0", "must be positive")?;
        check(self.ensemble_r0 > 0.0 && self.ensemble_r0 <= 1.0, "ensemble.R0", "must lie in (0, 1]")?;
        check(self.ensemble_count >= 1, "ensemble.count", "must be at least 1")?;
        check(self.roughness >= 0.0, "ensemble.roughness", "must be non-negative")?;
        check((2..=64).contains(&self.max_degree), "ensemble.max_degree", "must lie in 2..=64")?;
        check(self.horizon >= 1.0 && self.horizon <= 100.0, "ensemble.horizon", "must lie in [1, 100]")?;
        check(!self.levels.is_empty() && self.levels.iter().all(|&l| (1..=16).contains(&l)), "bergman.levels", "levels must lie in 1..=16")?;
        check(self.n0 > 2.0, "checks.n0", "must exceed 2")?;
        check(self.slack_abs >= 0.0 && self.slack_rel >= 0.0, "checks.slack_abs", "slacks must be non-negative")?;
        check(self.conservation_tol > 0.0, "checks.conservation_tol", "must be positive")?;
        check(self.stability_tol > 0.0, "checks.stability_tol", "must be positive")?;
        check(!self.formats.is_empty(), "output.formats", "at least one format")?;
        Ok(())
    }

    /// Re-validates after command-line overrides.
    pub fn revalidate(&self) -> Result<(), ConfigError> {
        self.validate(&BTreeMap::new())
    }

    pub fn controller(&self) -> StepController {
        StepController { dt_init: self.dt_init, dt_min: self.dt_min, dt_max: self.dt_max, tol: self.tol, guard: 0.5 }
    }

    pub fn ensemble_spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            count: self.ensemble_count,
            r0: self.ensemble_r0,
            seed: self.seed,
            roughness: self.roughness,
            max_degree: self.max_degree,
            levels: self.levels.clone(),
            horizon: self.horizon,
            modes: self.modes,
            ctrl: self.controller(),
        }
    }

    pub fn verify_options(&self) -> VerifyOptions {
        let disabled = check_names()
            .into_iter()
            .filter(|n| !self.enabled.iter().any(|e| e == n))
            .map(String::from)
            .collect();
        VerifyOptions {
            n0: self.n0,
            slack_abs: self.slack_abs,
            slack_rel: self.slack_rel,
            conservation_tol: self.conservation_tol,
            stability_tol: self.stability_tol,
            levels: self.levels.clone(),
            disabled,
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    /// Every key with its effective value, sorted; the input of the hash.
    pub fn canonical(&self) -> String {
        let fmts: Vec<&str> = self
            .formats
            .iter()
            .map(|f| match f {
                Format::Csv => "csv",
                Format::Json => "json",
                Format::Svg => "svg",
            })
            .collect();
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("bergman.levels", fmt_list(&self.levels));
        m.insert("checks.conservation_tol", self.conservation_tol.to_string());
        m.insert("checks.enabled", self.enabled.join(","));
        m.insert("checks.ensemble", self.run_ensemble.to_string());
        m.insert("checks.n0", self.n0.to_string());
        m.insert("checks.refine", self.refine.to_string());
        m.insert("checks.slack_abs", self.slack_abs.to_string());
        m.insert("checks.slack_rel", self.slack_rel.to_string());
        m.insert("checks.stability_tol", self.stability_tol.to_string());
        m.insert("ensemble.R0", self.ensemble_r0.to_string());
        m.insert("ensemble.count", self.ensemble_count.to_string());
        m.insert("ensemble.horizon", self.horizon.to_string());
        m.insert("ensemble.max_degree", self.max_degree.to_string());
        m.insert("ensemble.roughness", self.roughness.to_string());
        m.insert("ensemble.seed", self.seed.to_string());
        m.insert("flow.dt_init", self.dt_init.to_string());
        m.insert("flow.dt_max", self.dt_max.to_string());
        m.insert("flow.dt_min", self.dt_min.to_string());
        m.insert("flow.snapshot_times", fmt_list(&self.snapshot_times));
        m.insert("flow.t_end", self.t_end.to_string());
        m.insert("flow.tol", self.tol.to_string());
        m.insert("grid.modes", self.modes.to_string());
        m.insert("initial.potential", fmt_list(&self.initial_potential));
        m.insert("initial.profile", fmt_list(&self.initial_profile));
        m.insert("initial.r0", self.initial_r0.to_string());
        m.insert("output.dir", self.out_dir.display().to_string());
        m.insert("output.formats", fmts.join(","));
        debug_assert_eq!(m.len(), KEYS.len());
        m.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical form, excluding the output directory so
    /// reruns into different directories hash alike.
    pub fn hash(&self) -> String {
        let canon: String = self.canonical().lines().filter(|l| !l.starts_with("output.dir")).map(|l| format!("{l}\n")).collect();
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_comments() {
        let cfg = RunConfig::parse("# a comment\n\ngrid.modes = 32   # trailing\nflow.t_end = 2\n").unwrap();
        assert_eq!(cfg.modes, 32);
        assert_eq!(cfg.t_end, 2.0);
        assert_eq!(*cfg.snapshot_times.last().unwrap(), 2.0);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("grid.modes = 32\n\nflow.bogus = 1\n").unwrap_err();
        assert_eq!(e.line, 3);
        let e = RunConfig::parse("grid.modes = 32\nflow.t_end = 0\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.to_string().contains("flow.t_end"));
        let e = RunConfig::parse("grid.modes = x\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = RunConfig::parse("grid.modes = 8\ngrid.modes = 9\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = RunConfig::parse("just words\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn canonical_round_trips_and_hash_ignores_out_dir() {
        let cfg = RunConfig::parse("grid.modes = 48\ninitial.potential = 0, 0.1, -0.02\nchecks.refine = true\n").unwrap();
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        let mut moved = cfg.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        assert_eq!(cfg.hash(), moved.hash());
        let mut other = cfg.clone();
        other.seed = 99;
        assert_ne!(cfg.hash(), other.hash());
    }
}
