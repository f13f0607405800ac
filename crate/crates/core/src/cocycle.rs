//! Degree-1 cocycles stored by their edge increments `f_i = S_{e_i}`.
//!
//! `S_n` is never tabulated: it is recomputed by summing increments along a
//! lattice path, `+f_i(p)` for a step `p -> p + e_i` and `-f_i(p - e_i)` for a
//! step `p -> p - e_i`, with the environment read modulo L.

use crate::environment::{Environment, ModelKind};
use crate::format::{self, FormatError, Header, Reader, HEADER_LEN};
use crate::lattice::{LatticeBox, TorusShape};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CCF1";

#[derive(Debug, Error)]
pub enum CocycleError {
    #[error("path from {base:?} ends at {found:?}, expected {expected:?}")]
    PathEndpoint { base: Vec<i64>, expected: Vec<i64>, found: Vec<i64> },
    #[error("step direction {dir} out of range for dimension {dim}")]
    Direction { dir: usize, dim: usize },
    #[error("expected {dim} increment arrays of length {len}")]
    FieldShape { dim: usize, len: usize },
    #[error("stored mean vector disagrees with the increments by {0:e}")]
    MeanMismatch(f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// One signed unit step `+e_dir` or `-e_dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub dir: usize,
    pub forward: bool,
}

/// Ordered list of unit steps; the empty path is allowed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathSpec {
    pub steps: Vec<Step>,
}

impl PathSpec {
    pub fn new(steps: Vec<Step>) -> Self {
        Self { steps }
    }

    /// Coordinate 1 fully adjusted first, then coordinate 2, and so on.
    pub fn canonical(displacement: &[i64]) -> Self {
        let steps = displacement
            .iter()
            .enumerate()
            .flat_map(|(dir, &n)| {
                std::iter::repeat_n(Step { dir, forward: n > 0 }, n.unsigned_abs() as usize)
            })
            .collect();
        Self { steps }
    }

    /// Same displacement with coordinates adjusted in descending order.
    pub fn reversed_order(displacement: &[i64]) -> Self {
        let mut steps = Vec::new();
        for (dir, &n) in displacement.iter().enumerate().rev() {
            steps.extend(std::iter::repeat_n(Step { dir, forward: n > 0 }, n.unsigned_abs() as usize));
        }
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Net displacement; `None` if a step direction is not below `dim`.
    pub fn displacement(&self, dim: usize) -> Option<Vec<i64>> {
        let mut out = vec![0i64; dim];
        for step in &self.steps {
            *out.get_mut(step.dir)? += if step.forward { 1 } else { -1 };
        }
        Some(out)
    }
}

/// Closed field of edge increments with its spatial mean vector `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CocycleField {
    shape: TorusShape,
    increments: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl CocycleField {
    /// Wraps raw increments; closedness is not enforced here, see
    /// [`CocycleField::closedness_residual`].
    pub fn new(shape: TorusShape, increments: Vec<Vec<f64>>) -> Result<Self, CocycleError> {
        let n = shape.site_count();
        if increments.len() != shape.dim() || increments.iter().any(|f| f.len() != n) {
            return Err(CocycleError::FieldShape { dim: shape.dim(), len: n });
        }
        let mean = increments.iter().map(|f| spatial_mean(f)).collect();
        Ok(Self { shape, increments, mean })
    }

    pub fn constant(shape: TorusShape, y: &[f64]) -> Self {
        assert_eq!(y.len(), shape.dim());
        let n = shape.site_count();
        Self { shape, increments: y.iter().map(|&v| vec![v; n]).collect(), mean: y.to_vec() }
    }

    /// `f_i(n) = g(n + e_i) - g(n)`.
    pub fn coboundary(shape: TorusShape, g: &[f64]) -> Self {
        assert_eq!(g.len(), shape.site_count());
        let increments = (0..shape.dim())
            .map(|dir| (0..g.len()).map(|s| g[shape.forward(s, dir)] - g[s]).collect())
            .collect();
        Self::new(shape, increments).expect("coboundary has the torus shape")
    }

    #[inline]
    pub fn shape(&self) -> TorusShape {
        self.shape
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn increments(&self, dir: usize) -> &[f64] {
        &self.increments[dir]
    }

    #[inline]
    pub fn f(&self, dir: usize, site: usize) -> f64 {
        self.increments[dir][site]
    }

    /// Spatial average of each increment array.
    pub fn mean_vector(&self) -> &[f64] {
        &self.mean
    }

    /// Increment picked up by one step leaving torus site `site`.
    #[inline]
    pub fn step_increment(&self, site: usize, step: Step) -> f64 {
        if step.forward {
            self.f(step.dir, site)
        } else {
            -self.f(step.dir, self.shape.backward(site, step.dir))
        }
    }

    /// `S_n` along the canonical path from the origin.
    pub fn evaluate(&self, n: &[i64]) -> f64 {
        let origin = vec![0i64; self.dim()];
        self.evaluate_from(&origin, n)
    }

    /// `S_n ∘ T_base`, the sum along the canonical path from `base` to `base + n`.
    pub fn evaluate_from(&self, base: &[i64], n: &[i64]) -> f64 {
        self.sum_path(self.shape.index(base), &PathSpec::canonical(n))
    }

    /// Sum along an explicit path, which must connect `base` to `base + n`.
    pub fn evaluate_along(&self, base: &[i64], n: &[i64], path: &PathSpec) -> Result<f64, CocycleError> {
        let found = path
            .displacement(self.dim())
            .ok_or_else(|| CocycleError::Direction {
                dir: path.steps.iter().map(|s| s.dir).max().unwrap_or(0),
                dim: self.dim(),
            })?;
        if found != n {
            return Err(CocycleError::PathEndpoint { base: base.to_vec(), expected: n.to_vec(), found });
        }
        Ok(self.sum_path(self.shape.index(base), path))
    }

    fn sum_path(&self, mut site: usize, path: &PathSpec) -> f64 {
        let mut total = 0.0;
        for &step in &path.steps {
            total += self.step_increment(site, step);
            site = if step.forward {
                self.shape.forward(site, step.dir)
            } else {
                self.shape.backward(site, step.dir)
            };
        }
        total
    }

    /// Max over sites and pairs `i < j` of
    /// `|f_i(n) + f_j(n + e_i) - f_j(n) - f_i(n + e_j)|`.
    pub fn closedness_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            for j in i + 1..self.dim() {
                for s in 0..self.shape.site_count() {
                    let defect = self.f(i, s) + self.f(j, self.shape.forward(s, i))
                        - self.f(j, s)
                        - self.f(i, self.shape.forward(s, j));
                    worst = worst.max(defect.abs());
                }
            }
        }
        worst
    }

    /// Potential `n -> S_n` on the cube `[-h, h]^d`, built by extending the
    /// canonical path one step at a time. Agrees with [`CocycleField::evaluate`]
    /// point by point.
    pub fn potential_box(&self, half_width: usize) -> LatticeBox {
        let d = self.dim();
        let h = half_width as i64;
        let width = 2 * half_width + 1;
        let mut values = vec![0.0; width.pow(d as u32)];
        let scratch = LatticeBox::from_raw(d, half_width, vec![0.0; values.len()]);
        let mut point = vec![0i64; d];
        for k in 0..d {
            let prefixes = width.pow(k as u32);
            for t in 1..=h {
                for sign in [1i64, -1] {
                    for p in 0..prefixes {
                        let mut rest = p;
                        for c in point.iter_mut().take(k) {
                            *c = (rest % width) as i64 - h;
                            rest /= width;
                        }
                        for c in point.iter_mut().skip(k + 1) {
                            *c = 0;
                        }
                        point[k] = sign * (t - 1);
                        let prev = values[scratch.offset(&point)];
                        let site = self.shape.index(&point);
                        let step = Step { dir: k, forward: sign > 0 };
                        let inc = self.step_increment(site, step);
                        point[k] = sign * t;
                        values[scratch.offset(&point)] = prev + inc;
                    }
                }
            }
        }
        LatticeBox::from_raw(d, half_width, values)
    }

    pub fn to_bytes(&self, provenance: Option<&Environment>) -> Vec<u8> {
        let header = match provenance {
            Some(env) => env.header(MAGIC),
            None => Header { magic: MAGIC, shape: self.shape, bounds: (0.0, 0.0), seed: 0, model_id: ModelKind::Custom.id() },
        };
        let mut out = Vec::new();
        header.encode(&mut out);
        format::push_f64s(&mut out, &self.mean);
        for field in &self.increments {
            format::push_f64s(&mut out, field);
        }
        out
    }

    /// Decodes a `CCF1` payload, returning the field and its stored header.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Header), CocycleError> {
        let header = Header::decode(bytes, MAGIC)?;
        let shape = header.shape;
        let (d, n) = (shape.dim(), shape.site_count());
        format::check_len(bytes, HEADER_LEN + 8 * d + 8 * d * n)?;
        let mut r = Reader::at(bytes, HEADER_LEN);
        let stored_mean = r.f64s(d);
        let increments = (0..d).map(|_| r.f64s(n)).collect();
        let field = Self::new(shape, increments)?;
        let gap = field
            .mean
            .iter()
            .zip(&stored_mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(gap <= 1e-12) {
            return Err(CocycleError::MeanMismatch(gap));
        }
        Ok((field, header))
    }

    pub fn save(&self, path: &Path, provenance: Option<&Environment>) -> Result<(), CocycleError> {
        Ok(format::write_file(path, &self.to_bytes(provenance))?)
    }

    pub fn load(path: &Path) -> Result<(Self, Header), CocycleError> {
        Self::from_bytes(&format::read_file(path)?)
    }
}

pub(crate) fn spatial_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: usize, l: usize) -> TorusShape {
        TorusShape::new(d, l).unwrap()
    }

    fn pseudo_random(len: usize, mut state: u64) -> Vec<f64> {
        (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    /// Gradient of a random potential plus a constant mean: closed, mean `y`.
    fn random_closed(s: TorusShape, y: &[f64], seed: u64) -> CocycleField {
        let g = pseudo_random(s.site_count(), seed);
        let cob = CocycleField::coboundary(s, &g);
        let increments = (0..s.dim())
            .map(|i| cob.increments(i).iter().map(|v| v + y[i]).collect())
            .collect();
        CocycleField::new(s, increments).unwrap()
    }

    #[test]
    fn zero_displacement_is_zero() {
        let f = random_closed(shape(2, 5), &[0.3, -0.2], 1);
        assert_eq!(f.evaluate(&[0, 0]), 0.0);
    }

    #[test]
    fn constant_increments_evaluate_linearly() {
        let f = CocycleField::constant(shape(3, 4), &[0.5, -1.0, 2.0]);
        assert_eq!(f.evaluate(&[3, -2, 5]), 1.5 + 2.0 + 10.0);
        assert_eq!(f.closedness_residual(), 0.0);
        assert_eq!(f.mean_vector(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn path_independence_on_closed_field() {
        let f = random_closed(shape(2, 7), &[1.0, 0.25], 9);
        let n = [3, -2];
        let canonical = f.evaluate_along(&[0, 0], &n, &PathSpec::canonical(&n)).unwrap();
        let reversed = f.evaluate_along(&[0, 0], &n, &PathSpec::reversed_order(&n)).unwrap();
        assert!((canonical - reversed).abs() <= 1e-10);
    }

    #[test]
    fn path_endpoint_mismatch_is_an_error() {
        let f = CocycleField::constant(shape(2, 4), &[1.0, 0.0]);
        let path = PathSpec::canonical(&[1, 1]);
        assert!(matches!(
            f.evaluate_along(&[0, 0], &[1, 0], &path),
            Err(CocycleError::PathEndpoint { .. })
        ));
        let bad = PathSpec::new(vec![Step { dir: 4, forward: true }]);
        assert!(matches!(f.evaluate_along(&[0, 0], &[1, 0], &bad), Err(CocycleError::Direction { .. })));
    }

    #[test]
    fn coboundary_differences() {
        let f = CocycleField::coboundary(shape(1, 4), &[0.0, 1.0, 0.0, 2.0]);
        assert_eq!(f.increments(0), &[1.0, -1.0, 2.0, -2.0]);
        assert_eq!(f.mean_vector(), &[0.0]);
        let flat = CocycleField::coboundary(shape(2, 3), &[4.0; 9]);
        assert!(flat.increments(0).iter().chain(flat.increments(1)).all(|&v| v == 0.0));
    }

    #[test]
    fn coboundary_is_closed_with_zero_mean() {
        let s = shape(3, 5);
        let g = pseudo_random(s.site_count(), 77);
        let f = CocycleField::coboundary(s, &g);
        assert!(f.closedness_residual() <= 1e-12);
        assert!(f.mean_vector().iter().all(|m| m.abs() <= 1e-12));
        // S_n = g(n) - g(0)
        for n in [[1i64, 2, -3], [7, -4, 0], [-6, -6, 11]] {
            let expected = g[s.index(&n)] - g[0];
            assert!((f.evaluate(&n) - expected).abs() <= 1e-10);
        }
    }

    #[test]
    fn fake_field_has_defect_at_wrap() {
        let s = shape(2, 6);
        let f1: Vec<f64> = (0..s.site_count()).map(|site| s.coord(site, 1) as f64).collect();
        let f = CocycleField::new(s, vec![f1, vec![0.0; s.site_count()]]).unwrap();
        // defect f_1(n) - f_1(n + e_2) = n_2 - (n_2 + 1 mod L), equal to L - 1 at n_2 = L - 1
        assert!(f.closedness_residual() >= 1.0);
        assert_eq!(f.closedness_residual(), 5.0);
    }

    #[test]
    fn torus_period_identity() {
        let y = [0.7, -1.3];
        let f = random_closed(shape(2, 6), &y, 3);
        for (i, &yi) in y.iter().enumerate() {
            let mut n = vec![0; 2];
            n[i] = 6;
            assert!((f.evaluate(&n) - 6.0 * yi).abs() <= 1e-9);
            assert!((f.mean_vector()[i] - yi).abs() <= 1e-12);
        }
    }

    #[test]
    fn potential_box_matches_path_sums() {
        let f = random_closed(shape(3, 4), &[0.5, 0.0, -1.0], 21);
        let pot = f.potential_box(3);
        for n in crate::lattice::ball_points(3, 3) {
            assert_eq!(pot.get(&n), f.evaluate(&n), "n = {n:?}");
        }
    }

    #[test]
    fn bytes_roundtrip_and_validation() {
        let f = random_closed(shape(2, 4), &[1.0, 0.0], 5);
        let bytes = f.to_bytes(None);
        let (back, header) = CocycleField::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(header.model_id, ModelKind::Custom.id());
        assert!(CocycleField::from_bytes(&bytes[..40]).is_err());
        let mut tampered = bytes;
        tampered[HEADER_LEN + 6] ^= 0x08;
        assert!(matches!(CocycleField::from_bytes(&tampered), Err(CocycleError::MeanMismatch(_))));
    }
}
