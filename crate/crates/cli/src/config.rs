//! Flat key = value run configuration with section prefixes.
//!
//! Files contain one `section.key = value` pair per line, `#` comments and
//! blank lines. Command-line flags override file keys. Every run writes the
//! effective configuration back to its output directory so results can be
//! reproduced bit-for-bit.

use sdhdg::problem::Discretization;
use sdhdg::timeloop::TimeScheme;
use sdhdg::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Which scenario a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleId {
    Example1,
    Example2,
    Example3,
    Custom,
}

impl ExampleId {
    pub fn parse(s: &str) -> Result<ExampleId> {
        match s {
            "example1" => Ok(ExampleId::Example1),
            "example2" => Ok(ExampleId::Example2),
            "example3" => Ok(ExampleId::Example3),
            "custom" => Ok(ExampleId::Custom),
            other => Err(Error::Config(format!(
                "unknown example '{other}' (expected example1|example2|example3|custom)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExampleId::Example1 => "example1",
            ExampleId::Example2 => "example2",
            ExampleId::Example3 => "example3",
            ExampleId::Custom => "custom",
        }
    }
}

/// Fully resolved run parameters.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub example: ExampleId,
    pub k_f: usize,
    pub k_c: usize,
    pub n: usize,
    pub scheme: TimeScheme,
    /// None: use the convergence-study rule 0.1 h^{k_f}/(k_f+1).
    pub dt: Option<f64>,
    pub t_end: f64,
    pub kappa: f64,
    pub heterogeneous_kappa: bool,
    pub mu: f64,
    pub quarter_power: Option<(f64, f64)>,
    pub alpha: Option<f64>,
    pub phi: f64,
    pub beta_s: Option<f64>,
    pub beta_tr: Option<f64>,
    pub condense: bool,
    pub conservation_report: bool,
    pub mean_constraint: bool,
    /// Whether flow.k_c was set explicitly (otherwise the compatible
    /// pairing k_c = k_f - 1 is requested, which needs k_f >= 2).
    pub k_c_explicit: bool,
    pub out_dir: PathBuf,
    pub resolutions: Vec<usize>,
    /// Snapshot times for `simulate`.
    pub snapshots: Vec<f64>,
}

impl RunConfig {
    pub fn defaults(example: ExampleId) -> RunConfig {
        let base = RunConfig {
            example,
            k_f: 2,
            k_c: 1,
            n: 8,
            scheme: TimeScheme::Bdf3,
            dt: None,
            t_end: 0.1,
            kappa: 1.0,
            heterogeneous_kappa: false,
            mu: 1.0,
            quarter_power: None,
            alpha: None,
            phi: 1.0,
            beta_s: None,
            beta_tr: None,
            condense: true,
            conservation_report: true,
            mean_constraint: true,
            out_dir: PathBuf::from("out"),
            resolutions: vec![4, 8, 16],
            snapshots: Vec::new(),
            k_c_explicit: false,
        };
        match example {
            ExampleId::Example1 | ExampleId::Custom => base,
            ExampleId::Example2 => RunConfig {
                k_f: 3,
                k_c: 2,
                quarter_power: Some((0.9, 1.3)),
                ..base
            },
            // The published heterogeneous-plume parameters; the desk-scale
            // variant is obtained with --n 40 --dt 2e-3 --t-end 3.
            ExampleId::Example3 => RunConfig {
                k_f: 3,
                k_c: 2,
                n: 80,
                dt: Some(1e-3),
                t_end: 15.0,
                heterogeneous_kappa: true,
                quarter_power: Some((0.9, 1.3)),
                alpha: Some(0.5),
                phi: 0.4,
                mean_constraint: false,
                snapshots: vec![3.0, 6.0, 9.0, 12.0, 15.0],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n % 2 != 0 {
            return Err(Error::Config(format!(
                "mesh.n must be even and at least 2 (so the interface is a mesh line), got {}",
                self.n
            )));
        }
        if self.k_c < 1 {
            return Err(Error::Config("flow.k_c must be at least 1".into()));
        }
        if !self.k_c_explicit && self.k_f < 2 {
            return Err(Error::Config(
                "the compatible pairing k_c = k_f - 1 requires k_f >= 2 in 2D                  (set flow.k_c explicitly to override)"
                    .into(),
            ));
        }
        if self.k_c + 1 == self.k_f && self.k_f < 2 {
            return Err(Error::Config(
                "the compatible pairing k_c = k_f - 1 requires k_f >= 2 in 2D".into(),
            ));
        }
        for &n in &self.resolutions {
            if n < 2 || n % 2 != 0 {
                return Err(Error::Config(format!("resolution {n} must be even and >= 2")));
            }
        }
        Ok(())
    }

    /// Discretization parameters with penalty defaults 6 k^2.
    pub fn discretization(&self) -> Result<Discretization> {
        let mut disc = Discretization::with_degrees(self.k_f, self.k_c)?;
        if let Some(b) = self.beta_s {
            disc.beta_s = b;
        }
        if let Some(b) = self.beta_tr {
            disc.beta_tr = b;
        }
        disc.condense = self.condense;
        Ok(disc)
    }

    /// Effective time step: explicit, or the study rule.
    pub fn effective_dt(&self, n: usize) -> f64 {
        self.dt.unwrap_or_else(|| {
            let h = 1.0 / n as f64;
            0.1 * h.powi(self.k_f as i32) / (self.k_f as f64 + 1.0)
        })
    }

    /// Output directory, honoring the SDHDG_OUT root.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os("SDHDG_OUT") {
            Some(root) if self.out_dir.is_relative() => Path::new(&root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    /// Key = value echo sufficient to reproduce the run.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "example = {}", self.example.name());
        let _ = writeln!(s, "mesh.n = {}", self.n);
        let _ = writeln!(s, "flow.k_f = {}", self.k_f);
        let _ = writeln!(s, "flow.k_c = {}", self.k_c);
        let _ = writeln!(s, "flow.beta_s = {}", self.beta_s.unwrap_or(6.0 * (self.k_f * self.k_f) as f64));
        let _ = writeln!(s, "flow.beta_tr = {}", self.beta_tr.unwrap_or(6.0 * (self.k_c * self.k_c) as f64));
        let _ = writeln!(
            s,
            "time.scheme = {}",
            match self.scheme {
                TimeScheme::BE => "be",
                TimeScheme::Bdf3 => "bdf3",
            }
        );
        let _ = writeln!(s, "time.dt = {:e}", self.effective_dt(self.n));
        let _ = writeln!(s, "time.t_end = {}", self.t_end);
        if self.heterogeneous_kappa {
            let _ = writeln!(s, "coeff.kappa = heterogeneous");
        } else {
            let _ = writeln!(s, "coeff.kappa = {:e}", self.kappa);
        }
        match self.quarter_power {
            Some((mu0, mu1)) => {
                let _ = writeln!(s, "coeff.mu = quarter_power");
                let _ = writeln!(s, "coeff.mu0 = {mu0}");
                let _ = writeln!(s, "coeff.mu1 = {mu1}");
            }
            None => {
                let _ = writeln!(s, "coeff.mu = {:e}", self.mu);
            }
        }
        if let Some(a) = self.alpha {
            let _ = writeln!(s, "coeff.alpha = {a}");
        }
        let _ = writeln!(s, "coeff.phi = {}", self.phi);
        let _ = writeln!(s, "solver.condense = {}", self.condense);
        let _ = writeln!(s, "solver.mean_constraint = {}", self.mean_constraint);
        let _ = writeln!(s, "output.conservation_report = {}", self.conservation_report);
        let _ = writeln!(
            s,
            "run.resolutions = {}",
            self.resolutions.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
        );
        if !self.snapshots.is_empty() {
            let _ = writeln!(
                s,
                "output.snapshots = {}",
                self.snapshots.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
            );
        }
        s
    }

    /// Apply one key = value pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid number '{v}' for key '{key}'")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid integer '{v}' for key '{key}'")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean '{v}' for key '{key}'"))),
            }
        };
        match key {
            "example" => self.example = ExampleId::parse(value)?,
            "mesh.n" => self.n = parse_usize(value)?,
            "flow.k_f" => {
                self.k_f = parse_usize(value)?;
                self.k_c = self.k_f.saturating_sub(1).max(1);
            }
            "flow.k_c" => {
                self.k_c = parse_usize(value)?;
                self.k_c_explicit = true;
            }
            "flow.beta_s" => self.beta_s = Some(parse_f64(value)?),
            "flow.beta_tr" => self.beta_tr = Some(parse_f64(value)?),
            "time.scheme" => {
                self.scheme = match value {
                    "be" | "bdf1" => TimeScheme::BE,
                    "bdf3" => TimeScheme::Bdf3,
                    _ => return Err(Error::Config(format!("unknown scheme '{value}'"))),
                }
            }
            "time.dt" => self.dt = Some(parse_f64(value)?),
            "time.t_end" => self.t_end = parse_f64(value)?,
            "coeff.kappa" => {
                if value == "heterogeneous" {
                    self.heterogeneous_kappa = true;
                } else {
                    self.heterogeneous_kappa = false;
                    self.kappa = parse_f64(value)?;
                }
            }
            "coeff.mu" => {
                if value == "quarter_power" {
                    self.quarter_power.get_or_insert((0.9, 1.3));
                } else {
                    self.quarter_power = None;
                    self.mu = parse_f64(value)?;
                }
            }
            "coeff.mu0" => {
                let q = self.quarter_power.get_or_insert((0.9, 1.3));
                q.0 = parse_f64(value)?;
            }
            "coeff.mu1" => {
                let q = self.quarter_power.get_or_insert((0.9, 1.3));
                q.1 = parse_f64(value)?;
            }
            "coeff.alpha" => self.alpha = Some(parse_f64(value)?),
            "coeff.phi" => self.phi = parse_f64(value)?,
            "solver.condense" => self.condense = parse_bool(value)?,
            "solver.mean_constraint" => self.mean_constraint = parse_bool(value)?,
            "output.conservation_report" => self.conservation_report = parse_bool(value)?,
            "output.dir" => self.out_dir = PathBuf::from(value),
            "run.resolutions" => {
                self.resolutions = value
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("invalid resolution '{v}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "output.snapshots" => {
                self.snapshots = value
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("invalid snapshot time '{v}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }
}

/// Parse a configuration file into key/value pairs (insertion order kept by
/// sorted map for deterministic echo).
pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
    let mut pairs = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{path:?}:{}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(pairs)
}

/// Build a configuration from an optional file plus overrides; the example
/// key is applied first so its defaults do not clobber explicit settings.
pub fn build_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = file {
        pairs.extend(parse_file(path)?);
    }
    pairs.extend(overrides.iter().cloned());

    let example = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "example")
        .map(|(_, v)| ExampleId::parse(v))
        .transpose()?
        .unwrap_or(ExampleId::Example1);
    let mut config = RunConfig::defaults(example);
    for (k, v) in &pairs {
        if k == "example" {
            continue;
        }
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let dir = std::env::temp_dir().join("sdhdg_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("min.cfg");
        std::fs::write(&path, "example = example1\nflow.k_f = 2\nmesh.n = 8\n").unwrap();
        let cfg = build_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.k_c, 1);
        let disc = cfg.discretization().unwrap();
        assert_eq!(disc.beta_s, 24.0);
        assert_eq!(disc.beta_tr, 6.0);
        // dt rule: 0.1 h^2 / 3.
        let dt = cfg.effective_dt(8);
        assert!((dt - 0.1 / 64.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_degree_combination_rejected() {
        let mut cfg = RunConfig::defaults(ExampleId::Example1);
        cfg.set("flow.k_f", "1").unwrap();
        // Without an explicit k_c the compatible pairing is requested,
        // which needs k_f >= 2 in 2D.
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("k_f >= 2"));
    }

    #[test]
    fn example3_defaults() {
        let cfg = RunConfig::defaults(ExampleId::Example3);
        assert_eq!(cfg.quarter_power, Some((0.9, 1.3)));
        assert_eq!(cfg.phi, 0.4);
        assert_eq!(cfg.alpha, Some(0.5));
        assert_eq!(cfg.n, 80);
        assert_eq!(cfg.dt, Some(1e-3));
        assert_eq!(cfg.t_end, 15.0);
        assert!(cfg.heterogeneous_kappa);
        assert!(!cfg.mean_constraint);
    }

    #[test]
    fn unknown_keys_and_odd_n_rejected() {
        let mut cfg = RunConfig::defaults(ExampleId::Example1);
        assert!(cfg.set("nope.key", "1").is_err());
        cfg.set("mesh.n", "7").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn echo_roundtrip() {
        let cfg = RunConfig::defaults(ExampleId::Example3);
        let echo = cfg.echo();
        // Every echoed key must parse back.
        let dir = std::env::temp_dir().join("sdhdg_cfg_echo");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("echo.cfg");
        std::fs::write(&path, &echo).unwrap();
        let cfg2 = build_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg2.n, cfg.n);
        assert_eq!(cfg2.t_end, cfg.t_end);
        assert_eq!(cfg2.quarter_power, cfg.quarter_power);
    }
}
