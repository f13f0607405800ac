//! Stationary elliptic random conductance environments on the torus.
//!
//! Edge `[n, n + e_i]` carries conductance `c_i(n)`. Fields are generated from
//! a counter-based stream so that the value on each `(site, direction)` pair is
//! a pure function of `(seed, direction, site)`: direction `i` selects ChaCha8
//! stream `i`, and site `s` reads the 64-bit word at word position `2 s`.

use crate::format::{self, FormatError, Header, Reader, HEADER_LEN};
use crate::lattice::{ShapeError, TorusShape};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"RCM1";

/// Identifier of the pseudo-random algorithm, recorded in run metadata.
pub const RNG_ALGORITHM: &str =
    "chacha8 (rand_chacha 0.9): seed_from_u64(seed), stream = direction or walk index, u64 word at position 2*site";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("bounds must satisfy 0 < a < b, got ({0}, {1})")]
    Bounds(f64, f64),
    #[error("model {model} has values outside the open interval ({a}, {b})")]
    ModelRange { model: String, a: f64, b: f64 },
    #[error("direction {dir} out of range for dimension {dim}")]
    Direction { dir: usize, dim: usize },
    #[error("conductance {value} at site {site}, direction {dir} violates ellipticity ({a}, {b})")]
    Ellipticity { site: usize, dir: usize, value: f64, a: f64, b: f64 },
    #[error("expected {expected} conductance arrays of length {len}")]
    FieldShape { expected: usize, len: usize },
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Law of the conductances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeneratorModel {
    /// Every edge carries the same value.
    Constant(f64),
    /// Independent uniform values filling the bounds.
    IidUniform,
    /// Independent values, `high` with probability `p` and `low` otherwise.
    IidTwoPoint { p: f64, low: f64, high: f64 },
    /// Independent fair coin between the two ellipticity extremes.
    CheckerboardRandom,
    /// Box average over `[-r, r]^d` of independent uniforms, rescaled to the bounds.
    SmoothCorrelated { radius: usize },
}

/// Model identifier persisted in file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Constant,
    IidUniform,
    IidTwoPoint,
    CheckerboardRandom,
    SmoothCorrelated,
    /// Hand-built field, not produced by a generator.
    Custom,
}

impl ModelKind {
    pub fn id(self) -> u8 {
        match self {
            ModelKind::Constant => 0,
            ModelKind::IidUniform => 1,
            ModelKind::IidTwoPoint => 2,
            ModelKind::CheckerboardRandom => 3,
            ModelKind::SmoothCorrelated => 4,
            ModelKind::Custom => 255,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => ModelKind::Constant,
            1 => ModelKind::IidUniform,
            2 => ModelKind::IidTwoPoint,
            3 => ModelKind::CheckerboardRandom,
            4 => ModelKind::SmoothCorrelated,
            255 => ModelKind::Custom,
            _ => return None,
        })
    }
}

impl GeneratorModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            GeneratorModel::Constant(_) => ModelKind::Constant,
            GeneratorModel::IidUniform => ModelKind::IidUniform,
            GeneratorModel::IidTwoPoint { .. } => ModelKind::IidTwoPoint,
            GeneratorModel::CheckerboardRandom => ModelKind::CheckerboardRandom,
            GeneratorModel::SmoothCorrelated { .. } => ModelKind::SmoothCorrelated,
        }
    }

    /// Checks that every value the model can produce lies strictly inside `(a, b)`.
    pub fn check_range(&self, a: f64, b: f64) -> Result<(), EnvError> {
        let inside = |v: f64| v > a && v < b;
        let ok = match *self {
            GeneratorModel::Constant(c) => inside(c),
            GeneratorModel::IidTwoPoint { p, low, high } => {
                (0.0..=1.0).contains(&p) && inside(low) && inside(high)
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(EnvError::ModelRange { model: self.to_string(), a, b })
        }
    }
}

impl fmt::Display for GeneratorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorModel::Constant(c) => write!(f, "constant:{c}"),
            GeneratorModel::IidUniform => write!(f, "iid-uniform"),
            GeneratorModel::IidTwoPoint { p, low, high } => write!(f, "iid-two-point:{p}:{low}:{high}"),
            GeneratorModel::CheckerboardRandom => write!(f, "checkerboard-random"),
            GeneratorModel::SmoothCorrelated { radius } => write!(f, "smooth-correlated:{radius}"),
        }
    }
}

impl FromStr for GeneratorModel {
    type Err = EnvError;

    /// Parses `constant:C`, `iid-uniform`, `iid-two-point:P:LOW:HIGH`,
    /// `checkerboard-random` or `smooth-correlated:R`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EnvError::UnknownModel(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| parts.get(i).and_then(|p| p.trim().parse::<f64>().ok()).ok_or_else(bad);
        match (parts[0], parts.len()) {
            ("constant", 2) => Ok(GeneratorModel::Constant(num(1)?)),
            ("iid-uniform", 1) => Ok(GeneratorModel::IidUniform),
            ("iid-two-point", 4) => Ok(GeneratorModel::IidTwoPoint { p: num(1)?, low: num(2)?, high: num(3)? }),
            ("checkerboard-random", 1) => Ok(GeneratorModel::CheckerboardRandom),
            ("smooth-correlated", 2) => {
                let radius = parts[1].trim().parse::<usize>().map_err(|_| bad())?;
                Ok(GeneratorModel::SmoothCorrelated { radius })
            }
            _ => Err(bad()),
        }
    }
}

/// Uniform draw in `[0, 1)` for `(seed, stream, site)`, computed by seeking.
pub fn site_uniform(seed: u64, stream: u64, site: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * site as u128);
    unit_interval(rng.next_u64())
}

#[inline]
pub(crate) fn unit_interval(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential draws for sites `0..count` on one stream; equal to
/// [`site_uniform`] at every site.
fn stream_uniforms(seed: u64, stream: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count).map(|_| unit_interval(rng.next_u64())).collect()
}

/// Conductance field `c_1, ..., c_d` on the torus with ellipticity bounds `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    shape: TorusShape,
    conductances: Vec<Vec<f64>>,
    bounds: (f64, f64),
    model: ModelKind,
    seed: u64,
}

fn check_bounds(a: f64, b: f64) -> Result<(), EnvError> {
    if a > 0.0 && a < b && b.is_finite() {
        Ok(())
    } else {
        Err(EnvError::Bounds(a, b))
    }
}

impl Environment {
    pub fn generate(
        shape: TorusShape,
        model: GeneratorModel,
        bounds: (f64, f64),
        seed: u64,
    ) -> Result<Self, EnvError> {
        let (a, b) = bounds;
        check_bounds(a, b)?;
        model.check_range(a, b)?;
        let eps = 1e-12 * (b - a);
        let (lo, hi) = (a + eps, b - eps);
        let n = shape.site_count();
        let conductances = (0..shape.dim())
            .map(|dir| {
                let stream = dir as u64;
                match model {
                    GeneratorModel::Constant(c) => vec![c; n],
                    GeneratorModel::IidUniform => stream_uniforms(seed, stream, n)
                        .into_iter()
                        .map(|u| lo + (hi - lo) * u)
                        .collect(),
                    GeneratorModel::IidTwoPoint { p, low, high } => stream_uniforms(seed, stream, n)
                        .into_iter()
                        .map(|u| if u < p { high } else { low })
                        .collect(),
                    GeneratorModel::CheckerboardRandom => stream_uniforms(seed, stream, n)
                        .into_iter()
                        .map(|u| if u < 0.5 { hi } else { lo })
                        .collect(),
                    GeneratorModel::SmoothCorrelated { radius } => {
                        box_average(&shape, stream_uniforms(seed, stream, n), radius)
                            .into_iter()
                            .map(|u| lo + (hi - lo) * u.clamp(0.0, 1.0))
                            .collect()
                    }
                }
            })
            .collect();
        let env = Self { shape, conductances, bounds, model: model.kind(), seed };
        env.check_ellipticity()?;
        Ok(env)
    }

    /// Environment from explicit conductance arrays (one per direction).
    pub fn from_fields(
        shape: TorusShape,
        conductances: Vec<Vec<f64>>,
        bounds: (f64, f64),
    ) -> Result<Self, EnvError> {
        Self::assemble(shape, conductances, bounds, ModelKind::Custom, 0)
    }

    fn assemble(
        shape: TorusShape,
        conductances: Vec<Vec<f64>>,
        bounds: (f64, f64),
        model: ModelKind,
        seed: u64,
    ) -> Result<Self, EnvError> {
        check_bounds(bounds.0, bounds.1)?;
        let n = shape.site_count();
        if conductances.len() != shape.dim() || conductances.iter().any(|c| c.len() != n) {
            return Err(EnvError::FieldShape { expected: shape.dim(), len: n });
        }
        let env = Self { shape, conductances, bounds, model, seed };
        env.check_ellipticity()?;
        Ok(env)
    }

    #[inline]
    pub fn shape(&self) -> TorusShape {
        self.shape
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    #[inline]
    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn model(&self) -> ModelKind {
        self.model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Conductance array of one direction, in site order.
    pub fn field(&self, dir: usize) -> &[f64] {
        &self.conductances[dir]
    }

    /// `c_dir` at linear site index `site`.
    #[inline]
    pub fn c(&self, dir: usize, site: usize) -> f64 {
        self.conductances[dir][site]
    }

    /// Conductance of the edge `[n, n + e_dir]`; `site` is reduced mod L.
    pub fn conductance(&self, site: &[i64], dir: usize) -> Result<f64, EnvError> {
        if dir >= self.dim() {
            return Err(EnvError::Direction { dir, dim: self.dim() });
        }
        Ok(self.c(dir, self.shape.index(site)))
    }

    /// Normalization `sum_i (c_i(n) + c_i(n - e_i))` at a linear site index.
    #[inline]
    pub fn bar_c_at(&self, site: usize) -> f64 {
        (0..self.dim())
            .map(|i| self.c(i, site) + self.c(i, self.shape.backward(site, i)))
            .sum()
    }

    pub fn bar_c(&self, site: &[i64]) -> f64 {
        self.bar_c_at(self.shape.index(site))
    }

    pub fn bar_c_field(&self) -> Vec<f64> {
        (0..self.shape.site_count()).map(|s| self.bar_c_at(s)).collect()
    }

    /// The environment seen from `shift`: `c'_i(n) = c_i(n + shift)`.
    pub fn shifted(&self, shift: &[i64]) -> Environment {
        let n = self.shape.site_count();
        let conductances = self
            .conductances
            .iter()
            .map(|field| (0..n).map(|s| field[self.shape.translate(s, shift)]).collect())
            .collect();
        Environment { conductances, ..self.clone() }
    }

    /// Full scan of `a < c_i(n) < b`.
    pub fn check_ellipticity(&self) -> Result<(), EnvError> {
        let (a, b) = self.bounds;
        for (dir, field) in self.conductances.iter().enumerate() {
            if let Some((site, &value)) = field.iter().enumerate().find(|(_, &v)| !(v > a && v < b)) {
                return Err(EnvError::Ellipticity { site, dir, value, a, b });
            }
        }
        Ok(())
    }

    pub fn header(&self, magic: [u8; 4]) -> Header {
        Header { magic, shape: self.shape, bounds: self.bounds, seed: self.seed, model_id: self.model.id() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dim() * self.shape.site_count());
        self.header(MAGIC).encode(&mut out);
        for field in &self.conductances {
            format::push_f64s(&mut out, field);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvError> {
        let header = Header::decode(bytes, MAGIC)?;
        let shape = header.shape;
        let n = shape.site_count();
        format::check_len(bytes, HEADER_LEN + 8 * shape.dim() * n)?;
        let model = ModelKind::from_id(header.model_id)
            .ok_or_else(|| FormatError::Invalid(format!("unknown model id {}", header.model_id)))?;
        let mut r = Reader::at(bytes, HEADER_LEN);
        let conductances = (0..shape.dim()).map(|_| r.f64s(n)).collect();
        Self::assemble(shape, conductances, header.bounds, model, header.seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        Ok(format::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        Self::from_bytes(&format::read_file(path)?)
    }
}

/// Periodic box average over `[-r, r]^d`, one axis at a time.
fn box_average(shape: &TorusShape, mut values: Vec<f64>, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return values;
    }
    let width = (2 * radius + 1) as f64;
    for dir in 0..shape.dim() {
        let averaged = (0..values.len())
            .map(|s| {
                let mut fwd = s;
                let mut bwd = s;
                let mut acc = values[s];
                for _ in 0..radius {
                    fwd = shape.forward(fwd, dir);
                    bwd = shape.backward(bwd, dir);
                    acc += values[fwd] + values[bwd];
                }
                acc / width
            })
            .collect();
        values = averaged;
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: usize, l: usize) -> TorusShape {
        TorusShape::new(d, l).unwrap()
    }

    #[test]
    fn constant_field() {
        let env = Environment::generate(shape(2, 4), GeneratorModel::Constant(1.0), (0.5, 2.0), 7).unwrap();
        let all: Vec<f64> = (0..2).flat_map(|i| env.field(i).to_vec()).collect();
        assert_eq!(all.len(), 32);
        assert!(all.iter().all(|&c| c == 1.0));
        for s in 0..16 {
            assert_eq!(env.bar_c_at(s), 4.0);
        }
        assert_eq!(env.conductance(&[4, 0], 1).unwrap(), env.conductance(&[0, 0], 1).unwrap());
    }

    #[test]
    fn two_point_values_and_determinism() {
        let model = GeneratorModel::IidTwoPoint { p: 0.5, low: 1.0, high: 2.0 };
        let e1 = Environment::generate(shape(1, 8), model, (0.5, 3.0), 1).unwrap();
        let e2 = Environment::generate(shape(1, 8), model, (0.5, 3.0), 1).unwrap();
        assert_eq!(e1.field(0).len(), 8);
        assert!(e1.field(0).iter().all(|&c| c == 1.0 || c == 2.0));
        assert_eq!(e1.to_bytes(), e2.to_bytes());
    }

    #[test]
    fn uniform_mean_law_of_large_numbers() {
        let env = Environment::generate(shape(2, 64), GeneratorModel::IidUniform, (1.0, 2.0), 42).unwrap();
        let all: Vec<f64> = (0..2).flat_map(|i| env.field(i).to_vec()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean - 1.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn rejects_bad_bounds_and_ranges() {
        let s = shape(2, 4);
        assert!(matches!(
            Environment::generate(s, GeneratorModel::IidUniform, (2.0, 2.0), 0),
            Err(EnvError::Bounds(..))
        ));
        assert!(matches!(
            Environment::generate(s, GeneratorModel::IidUniform, (0.0, 2.0), 0),
            Err(EnvError::Bounds(..))
        ));
        assert!(matches!(
            Environment::generate(s, GeneratorModel::Constant(2.0), (1.0, 2.0), 0),
            Err(EnvError::ModelRange { .. })
        ));
        let two = GeneratorModel::IidTwoPoint { p: 0.5, low: 1.0, high: 4.0 };
        assert!(Environment::generate(s, two, (1.0, 5.0), 0).is_err());
    }

    #[test]
    fn direct_indexing_and_bar_c() {
        let env = Environment::from_fields(shape(1, 2), vec![vec![3.0, 5.0]], (1.0, 10.0)).unwrap();
        assert_eq!(env.conductance(&[1], 0).unwrap(), 5.0);
        assert_eq!(env.bar_c(&[0]), 8.0);
        assert!(matches!(env.conductance(&[0], 1), Err(EnvError::Direction { .. })));
    }

    #[test]
    fn seeking_matches_sequential_generation() {
        let env = Environment::generate(shape(2, 16), GeneratorModel::IidUniform, (1.0, 2.0), 99).unwrap();
        let (lo, hi) = (1.0 + 1e-12, 2.0 - 1e-12);
        for &(site, dir) in &[(0usize, 0usize), (17, 1), (255, 0), (128, 1)] {
            let u = site_uniform(99, dir as u64, site);
            let expected = lo + (hi - lo) * u;
            assert_eq!(env.c(dir, site), expected);
        }
    }

    #[test]
    fn all_models_are_elliptic() {
        let models = [
            GeneratorModel::IidUniform,
            GeneratorModel::CheckerboardRandom,
            GeneratorModel::SmoothCorrelated { radius: 2 },
            GeneratorModel::IidTwoPoint { p: 0.3, low: 1.5, high: 2.5 },
        ];
        for (k, model) in models.into_iter().enumerate() {
            for d in 1..=3 {
                let env = Environment::generate(shape(d, 8), model, (1.0, 3.0), k as u64).unwrap();
                env.check_ellipticity().unwrap();
                let min_bar = env.bar_c_field().into_iter().fold(f64::INFINITY, f64::min);
                assert!(min_bar > 2.0 * d as f64 * 1.0);
            }
        }
    }

    #[test]
    fn checkerboard_takes_extreme_levels() {
        let env = Environment::generate(shape(2, 8), GeneratorModel::CheckerboardRandom, (1.0, 4.0), 3).unwrap();
        let eps = 3e-12;
        let field = env.field(0);
        assert!(field.iter().all(|&c| (c - 1.0 - eps).abs() < 1e-15 || (c - 4.0 + eps).abs() < 1e-15));
        assert!(field.iter().any(|&c| c < 2.0) && field.iter().any(|&c| c > 2.0));
    }

    #[test]
    fn stationarity_of_shifted_view() {
        let env = Environment::generate(shape(2, 8), GeneratorModel::IidUniform, (1.0, 2.0), 5).unwrap();
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 23) as i64 - 11
        };
        for _ in 0..100 {
            let n = [next(), next()];
            let m = [next(), next()];
            let view = env.shifted(&m);
            for dir in 0..2 {
                let direct = env.conductance(&[n[0] + m[0], n[1] + m[1]], dir).unwrap();
                assert_eq!(direct, view.conductance(&n, dir).unwrap());
            }
        }
    }

    #[test]
    fn model_strings_roundtrip() {
        for text in ["constant:1.5", "iid-uniform", "iid-two-point:0.5:1:4", "checkerboard-random", "smooth-correlated:3"] {
            let model: GeneratorModel = text.parse().unwrap();
            assert_eq!(model.to_string(), text);
        }
        assert!("iid-gaussian".parse::<GeneratorModel>().is_err());
    }

    #[test]
    fn load_rejects_corruption() {
        let env = Environment::generate(shape(2, 4), GeneratorModel::IidUniform, (1.0, 2.0), 11).unwrap();
        let bytes = env.to_bytes();
        assert_eq!(Environment::from_bytes(&bytes).unwrap(), env);
        assert!(Environment::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Environment::from_bytes(&bad_magic), Err(EnvError::Format(FormatError::Magic { .. }))));
        let mut equal_bounds = bytes.clone();
        equal_bounds[24..32].copy_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(Environment::from_bytes(&equal_bounds), Err(EnvError::Bounds(..))));
        let mut bad_version = bytes;
        bad_version[4] = 2;
        assert!(matches!(Environment::from_bytes(&bad_version), Err(EnvError::Format(FormatError::Version(2)))));
    }
}
