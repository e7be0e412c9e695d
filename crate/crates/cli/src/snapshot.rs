//! Plain-text snapshot files: a `KRFLAB1` header, a few `key = value`
//! lines, then one modal coefficient of `f` per line.
//!
//! Floats are written with `{:?}`, the shortest decimal that parses back to
//! the same bits.

use std::fmt;
use std::fs;
use std::path::Path;

use krflab::geometry::MetricState;
use krflab::spectral::GridSpec;

pub const MAGIC: &str = "KRFLAB1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum SnapshotError {
    Io(std::io::Error),
    VersionMismatch(String),
    Malformed { line: usize, message: String },
}

impl fmt::Display for SnapshotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnapshotError::Io(e) => write!(f, "snapshot: {e}"),
            SnapshotError::VersionMismatch(found) => {
                write!(f, "snapshot version mismatch: expected {MAGIC} version {VERSION}, found `{found}`")
            }
            SnapshotError::Malformed { line, message } => write!(f, "snapshot line {line}: {message}"),
        }
    }
}

impl std::error::Error for SnapshotError {}

impl From<std::io::Error> for SnapshotError {
    fn from(e: std::io::Error) -> Self {
        SnapshotError::Io(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub config_hash: String,
    pub coefficients: Vec<f64>,
}

impl Snapshot {
    pub fn of_state(state: &MetricState, t: f64, config_hash: &str) -> Snapshot {
        Snapshot { t, config_hash: config_hash.to_string(), coefficients: state.coefficients().to_vec() }
    }

    pub fn modes(&self) -> usize {
        self.coefficients.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MAGIC}\nversion = {VERSION}\nmodes = {}\nt = {:?}\nconfig_hash = {}\ncoefficients\n",
            self.modes(),
            self.t,
            self.config_hash
        );
        for c in &self.coefficients {
            s.push_str(&format!("{c:?}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Snapshot, SnapshotError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let first = lines.next().map(|(_, l)| l).unwrap_or("");
        if first != MAGIC {
            return Err(SnapshotError::VersionMismatch(first.chars().take(32).collect()));
        }
        let mut field = |key: &str| -> Result<(usize, String), SnapshotError> {
            let (n, l) = lines
                .next()
                .ok_or(SnapshotError::Malformed { line: 0, message: format!("missing `{key}`") })?;
            let v = l
                .strip_prefix(key)
                .and_then(|r| r.trim_start().strip_prefix('='))
                .ok_or_else(|| SnapshotError::Malformed { line: n, message: format!("expected `{key} = ...`") })?;
            Ok((n, v.trim().to_string()))
        };
        let (_, version) = field("version")?;
        if version != VERSION.to_string() {
            return Err(SnapshotError::VersionMismatch(format!("{MAGIC} version {version}")));
        }
        let (n, modes) = field("modes")?;
        let modes: usize =
            modes.parse().map_err(|_| SnapshotError::Malformed { line: n, message: "bad mode count".into() })?;
        let (n, t) = field("t")?;
        let t: f64 = t.parse().map_err(|_| SnapshotError::Malformed { line: n, message: "bad time".into() })?;
        let (_, config_hash) = field("config_hash")?;
        match lines.next() {
            Some((_, "coefficients")) => {}
            Some((n, _)) => return Err(SnapshotError::Malformed { line: n, message: "expected `coefficients`".into() }),
            None => return Err(SnapshotError::Malformed { line: 0, message: "missing coefficients".into() }),
        }
        let mut coefficients = Vec::with_capacity(modes);
        for (n, l) in lines {
            if l.is_empty() {
                continue;
            }
            let c: f64 =
                l.parse().map_err(|_| SnapshotError::Malformed { line: n, message: format!("bad coefficient `{l}`") })?;
            coefficients.push(c);
        }
        if coefficients.len() != modes {
            return Err(SnapshotError::Malformed {
                line: 0,
                message: format!("expected {modes} coefficients, found {}", coefficients.len()),
            });
        }
        Ok(Snapshot { t, config_hash, coefficients })
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot, SnapshotError> {
        Snapshot::parse(&fs::read_to_string(path)?)
    }

    pub fn state(&self) -> krflab::Result<MetricState> {
        let grid = GridSpec::new(self.modes())?;
        MetricState::from_coefficients(&grid, self.coefficients.clone())
    }
}

/// File name for the snapshot at time `t`.
pub fn file_name(t: f64) -> String {
    format!("snapshot_t{t:.6}.krf")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_bit_exact() {
        let s = Snapshot {
            t: 0.1 + 0.2,
            config_hash: "abc".into(),
            coefficients: vec![0.0, -1e-300, 1.0 / 3.0, f64::MIN_POSITIVE, 2.5e17],
        };
        let back = Snapshot::parse(&s.to_text()).unwrap();
        assert_eq!(back.t.to_bits(), s.t.to_bits());
        for (a, b) in back.coefficients.iter().zip(&s.coefficients) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_header_is_a_version_mismatch() {
        let s = Snapshot { t: 1.0, config_hash: "h".into(), coefficients: vec![0.0; 4] };
        let text = s.to_text().replacen(MAGIC, "KRFLAB0", 1);
        assert!(matches!(Snapshot::parse(&text), Err(SnapshotError::VersionMismatch(_))));
        let text = s.to_text().replacen("version = 1", "version = 2", 1);
        assert!(matches!(Snapshot::parse(&text), Err(SnapshotError::VersionMismatch(_))));
        let text = s.to_text().replacen("modes = 4", "modes = 5", 1);
        assert!(matches!(Snapshot::parse(&text), Err(SnapshotError::Malformed { .. })));
    }
}
