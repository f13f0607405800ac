//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and falls back to the default listed in [`KEYS`]. Unknown or repeated keys
//! are errors. Command-line overrides are applied after the file.

use crate::environment::GeneratorModel;
use crate::ergodic::holder_radii;
use crate::lattice::TorusShape;
use crate::solver::{SolverOptions, DENSE_SITE_LIMIT};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

/// Recognized keys with their defaults and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dimension", "2", "lattice dimension d"),
    ("side", "16", "torus side L"),
    ("a", "1", "lower ellipticity bound"),
    ("b", "2", "upper ellipticity bound"),
    ("model", "iid-uniform", "conductance law"),
    ("seed", "0", "first seed"),
    ("seeds", "1", "number of consecutive seeds"),
    ("y", "e1", "target mean vector, comma separated, or e1..ed"),
    ("tol", "1e-10", "relative CG residual target"),
    ("max_iter", "auto", "CG iteration cap, auto = 20 L d"),
    ("jacobi", "true", "Jacobi preconditioning"),
    ("radii", "auto", "sublinearity radii, comma separated"),
    ("holder_radius", "8", "outer radius R of the oscillation fit"),
    ("poincare_fields", "100", "random fields per seed in the Poincare batch"),
    ("poincare_radii", "auto", "radii of the Poincare batch"),
    ("lemma2_extent", "50", "scan m in [-extent, extent]^d"),
    ("lemma2_max_n", "10", "scan n in 1..=max_n"),
    ("walk_steps", "1000", "walk horizon k"),
    ("walk_count", "1000", "number of walks"),
    ("walk_csv", "false", "write per-walk CSV"),
    ("check_tol", "1e-8", "threshold on harmonicity and martingale residuals"),
    ("out", "out", "output directory"),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    Duplicate(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Guard(String),
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

fn split_pair(text: &str) -> Option<(String, String)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// Raw key/value pairs before typing.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = split_pair(line).ok_or_else(|| ConfigError::Syntax { line: k + 1, text: line.to_string() })?;
            if !is_known(&key) {
                return Err(ConfigError::UnknownKey(key));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(Self { values })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !is_known(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_override(&mut self, text: &str) -> Result<(), ConfigError> {
        let (key, value) = split_pair(text).ok_or_else(|| ConfigError::Syntax { line: 0, text: text.to_string() })?;
        self.set(&key, &value)
    }

    fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| {
            KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d).expect("known key")
        })
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value { key: key.to_string(), value: value.to_string(), reason: reason.to_string() }
}

fn scalar<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let v = raw.get(key);
    v.parse::<T>().map_err(|e| bad(key, v, e))
}

fn list<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<Option<Vec<T>>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let v = raw.get(key);
    if v == "auto" {
        return Ok(None);
    }
    v.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| bad(key, v, e)))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Fully typed experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dimension: usize,
    pub side: usize,
    pub bounds: (f64, f64),
    pub model: GeneratorModel,
    pub seed: u64,
    pub seeds: u64,
    pub y: Vec<f64>,
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub jacobi: bool,
    pub radii: Vec<usize>,
    pub holder_radius: usize,
    pub poincare_fields: usize,
    pub poincare_radii: Vec<usize>,
    pub lemma2_extent: i64,
    pub lemma2_max_n: u64,
    pub walk_steps: usize,
    pub walk_count: u64,
    pub walk_csv: bool,
    pub check_tol: f64,
    pub out: PathBuf,
}

/// Powers of two below the guard, followed by the guard itself.
fn default_radii(limit: usize) -> Vec<usize> {
    let mut radii: Vec<usize> = std::iter::successors(Some(1usize), |r| Some(r * 2)).take_while(|&r| r < limit).collect();
    if limit >= 1 {
        radii.push(limit);
    }
    radii
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let dimension: usize = scalar(raw, "dimension")?;
        let side: usize = scalar(raw, "side")?;
        let shape = TorusShape::new(dimension, side).map_err(|e| ConfigError::Guard(e.to_string()))?;
        let model_text = raw.get("model");
        let model: GeneratorModel = model_text.parse().map_err(|e| bad("model", model_text, e))?;
        let y_text = raw.get("y");
        let y = match y_text.strip_prefix('e').and_then(|k| k.parse::<usize>().ok()) {
            Some(k) if (1..=dimension).contains(&k) => (0..dimension).map(|i| if i + 1 == k { 1.0 } else { 0.0 }).collect(),
            Some(_) => return Err(bad("y", y_text, "basis index out of range")),
            None => list::<f64>(raw, "y")?.ok_or_else(|| bad("y", y_text, "auto is not allowed"))?,
        };
        let max_iter = match raw.get("max_iter") {
            "auto" => None,
            _ => Some(scalar(raw, "max_iter")?),
        };
        let limit = shape.max_radius();
        let cfg = Self {
            dimension,
            side,
            bounds: (scalar(raw, "a")?, scalar(raw, "b")?),
            model,
            seed: scalar(raw, "seed")?,
            seeds: scalar(raw, "seeds")?,
            y,
            tol: scalar(raw, "tol")?,
            max_iter,
            jacobi: scalar(raw, "jacobi")?,
            radii: list(raw, "radii")?.unwrap_or_else(|| default_radii(limit)),
            holder_radius: scalar(raw, "holder_radius")?,
            poincare_fields: scalar(raw, "poincare_fields")?,
            poincare_radii: list(raw, "poincare_radii")?.unwrap_or_else(|| (1..limit).collect()),
            lemma2_extent: scalar(raw, "lemma2_extent")?,
            lemma2_max_n: scalar(raw, "lemma2_max_n")?,
            walk_steps: scalar(raw, "walk_steps")?,
            walk_count: scalar(raw, "walk_count")?,
            walk_csv: scalar(raw, "walk_csv")?,
            check_tol: scalar(raw, "check_tol")?,
            out: PathBuf::from(raw.get("out")),
        };
        cfg.validate_common()?;
        Ok(cfg)
    }

    pub fn shape(&self) -> TorusShape {
        TorusShape::new(self.dimension, self.side).expect("validated shape")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).map(|k| self.seed.wrapping_add(k)).collect()
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { tol: self.tol, max_iter: self.max_iter, jacobi: self.jacobi }
    }

    fn validate_common(&self) -> Result<(), ConfigError> {
        let (a, b) = self.bounds;
        if !(a > 0.0 && a < b && b.is_finite()) {
            return Err(ConfigError::Guard(format!("bounds must satisfy 0 < a < b, got ({a}, {b})")));
        }
        self.model.check_range(a, b).map_err(|e| ConfigError::Guard(e.to_string()))?;
        if self.seeds == 0 {
            return Err(bad("seeds", "0", "need at least one seed"));
        }
        if self.y.len() != self.dimension || self.y.iter().any(|v| !v.is_finite()) {
            return Err(bad("y", &join(&self.y), format!("need {} finite components", self.dimension)));
        }
        for (key, v) in [("tol", self.tol), ("check_tol", self.check_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, &v.to_string(), "must be positive"));
            }
        }
        if self.max_iter == Some(0) {
            return Err(bad("max_iter", "0", "must be positive"));
        }
        Ok(())
    }

    fn radius_guard(&self, what: &str, radius: usize, needed: usize) -> Result<(), ConfigError> {
        let limit = self.shape().max_radius();
        if needed > limit {
            return Err(ConfigError::Guard(format!(
                "{what} {radius} needs radius {needed} on the torus but the guard is L/2-1 = {limit} (L = {})",
                self.side
            )));
        }
        Ok(())
    }

    pub fn validate_sublinearity(&self) -> Result<(), ConfigError> {
        if self.radii.is_empty() || self.radii[0] == 0 || self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("radii", &join(&self.radii), "must be positive and strictly increasing"));
        }
        let last = *self.radii.last().unwrap();
        self.radius_guard("sublinearity radius", last, last)
    }

    pub fn validate_holder(&self) -> Result<(), ConfigError> {
        if holder_radii(self.holder_radius).len() < 4 {
            return Err(bad("holder_radius", &self.holder_radius.to_string(), "need four distinct fit radii"));
        }
        self.radius_guard("holder radius", self.holder_radius, 2 * self.holder_radius)
    }

    pub fn validate_poincare(&self) -> Result<(), ConfigError> {
        if self.poincare_radii.contains(&0) {
            return Err(bad("poincare_radii", &join(&self.poincare_radii), "radii must be positive"));
        }
        for &r in &self.poincare_radii {
            self.radius_guard("poincare radius", r, r + 1)?;
        }
        Ok(())
    }

    pub fn validate_dense(&self) -> Result<(), ConfigError> {
        let sites = self.shape().site_count();
        if sites > DENSE_SITE_LIMIT {
            return Err(ConfigError::Guard(format!("dense oracle limited to {DENSE_SITE_LIMIT} sites, torus has {sites}")));
        }
        Ok(())
    }

    pub fn validate_lemma2(&self) -> Result<(), ConfigError> {
        if self.lemma2_extent < 0 {
            return Err(bad("lemma2_extent", &self.lemma2_extent.to_string(), "must be non-negative"));
        }
        if self.lemma2_max_n == 0 {
            return Err(bad("lemma2_max_n", "0", "must be at least 1"));
        }
        Ok(())
    }

    pub fn validate_walk(&self) -> Result<(), ConfigError> {
        if self.walk_count == 0 {
            return Err(bad("walk_count", "0", "need at least one walk"));
        }
        Ok(())
    }

    /// Resolved configuration, one `key=value` line per key in [`KEYS`] order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let max_iter = self.max_iter.map_or("auto".to_string(), |m| m.to_string());
        let pairs: [(&str, String); 22] = [
            ("dimension", self.dimension.to_string()),
            ("side", self.side.to_string()),
            ("a", self.bounds.0.to_string()),
            ("b", self.bounds.1.to_string()),
            ("model", self.model.to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", self.seeds.to_string()),
            ("y", join(&self.y)),
            ("tol", format!("{:e}", self.tol)),
            ("max_iter", max_iter),
            ("jacobi", self.jacobi.to_string()),
            ("radii", join(&self.radii)),
            ("holder_radius", self.holder_radius.to_string()),
            ("poincare_fields", self.poincare_fields.to_string()),
            ("poincare_radii", join(&self.poincare_radii)),
            ("lemma2_extent", self.lemma2_extent.to_string()),
            ("lemma2_max_n", self.lemma2_max_n.to_string()),
            ("walk_steps", self.walk_steps.to_string()),
            ("walk_count", self.walk_count.to_string()),
            ("walk_csv", self.walk_csv.to_string()),
            ("check_tol", format!("{:e}", self.check_tol)),
            ("out", self.out.display().to_string()),
        ];
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// SHA-256 of the canonical text without the output directory, so that
    /// runs differing only in where they write share a hash.
    pub fn hash(&self) -> String {
        let text: String = self.canonical().lines().filter(|l| !l.starts_with("out=")).map(|l| format!("{l}\n")).collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
