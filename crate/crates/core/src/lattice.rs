//! Periodic lattice geometry: the torus `Z_L^d`, site linearization, taxicab
//! balls and dense boxes of lattice values on `Z^d`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("lattice dimension must be at least 1")]
    ZeroDimension,
    #[error("torus side must be at least 2, got {0}")]
    SideTooSmall(usize),
    #[error("torus with side {side} in dimension {dim} has too many sites")]
    TooLarge { dim: usize, side: usize },
}

/// Dimension and side of the periodized lattice `Z_L^d`.
///
/// Sites are linearized as `s = sum_j n_j * L^j` (first coordinate fastest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusShape {
    dim: usize,
    side: usize,
}

impl TorusShape {
    pub fn new(dim: usize, side: usize) -> Result<Self, ShapeError> {
        if dim == 0 {
            return Err(ShapeError::ZeroDimension);
        }
        if side < 2 {
            return Err(ShapeError::SideTooSmall(side));
        }
        let mut count: usize = 1;
        for _ in 0..dim {
            count = count
                .checked_mul(side)
                .filter(|&c| c <= u32::MAX as usize)
                .ok_or(ShapeError::TooLarge { dim, side })?;
        }
        Ok(Self { dim, side })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn site_count(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    #[inline]
    pub fn stride(&self, dir: usize) -> usize {
        self.side.pow(dir as u32)
    }

    /// Largest radius whose taxicab ball does not wrap onto itself.
    pub fn max_radius(&self) -> usize {
        (self.side / 2).saturating_sub(1)
    }

    /// Linear index of an arbitrary lattice point, reduced mod L per coordinate.
    pub fn index(&self, point: &[i64]) -> usize {
        debug_assert_eq!(point.len(), self.dim);
        let l = self.side as i64;
        point
            .iter()
            .rev()
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(l) as usize)
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        let mut rest = site;
        (0..self.dim)
            .map(|_| {
                let c = rest % self.side;
                rest /= self.side;
                c
            })
            .collect()
    }

    #[inline]
    pub fn coord(&self, site: usize, dir: usize) -> usize {
        (site / self.stride(dir)) % self.side
    }

    /// Site `s + e_dir` on the torus.
    #[inline]
    pub fn forward(&self, site: usize, dir: usize) -> usize {
        let stride = self.stride(dir);
        if (site / stride) % self.side == self.side - 1 {
            site + stride - self.side * stride
        } else {
            site + stride
        }
    }

    /// Site `s - e_dir` on the torus.
    #[inline]
    pub fn backward(&self, site: usize, dir: usize) -> usize {
        let stride = self.stride(dir);
        if (site / stride).is_multiple_of(self.side) {
            site + self.side * stride - stride
        } else {
            site - stride
        }
    }

    /// Torus site reached from `site` by the lattice displacement `shift`.
    pub fn translate(&self, site: usize, shift: &[i64]) -> usize {
        let mut point: Vec<i64> = self.coords(site).into_iter().map(|c| c as i64).collect();
        for (p, s) in point.iter_mut().zip(shift) {
            *p += s;
        }
        self.index(&point)
    }
}

/// Precomputed `s + e_i` and `s - e_i` tables for every direction.
#[derive(Debug, Clone)]
pub struct Neighbors {
    forward: Vec<Vec<u32>>,
    backward: Vec<Vec<u32>>,
}

impl Neighbors {
    pub fn new(shape: &TorusShape) -> Self {
        let n = shape.site_count();
        let table = |step: fn(&TorusShape, usize, usize) -> usize| {
            (0..shape.dim())
                .map(|dir| (0..n).map(|s| step(shape, s, dir) as u32).collect())
                .collect()
        };
        Self { forward: table(TorusShape::forward), backward: table(TorusShape::backward) }
    }

    #[inline]
    pub fn forward(&self, site: usize, dir: usize) -> usize {
        self.forward[dir][site] as usize
    }

    #[inline]
    pub fn backward(&self, site: usize, dir: usize) -> usize {
        self.backward[dir][site] as usize
    }
}

/// Taxicab norm `|n| = sum |n_i|`.
pub fn taxicab(point: &[i64]) -> i64 {
    point.iter().map(|c| c.abs()).sum()
}

/// Number of lattice points with `|n| <= radius` in dimension `dim`.
pub fn ball_size(dim: usize, radius: usize) -> usize {
    // |B_R| = sum_k 2^k C(d,k) C(R,k)
    let mut total = 0usize;
    let mut binom_d = 1usize;
    let mut binom_r = 1usize;
    for k in 0..=dim.min(radius) {
        if k > 0 {
            binom_d = binom_d * (dim - k + 1) / k;
            binom_r = binom_r * (radius - k + 1) / k;
        }
        total += (1usize << k) * binom_d * binom_r;
    }
    total
}

/// All lattice points of the taxicab ball of the given radius, in
/// lexicographic order (first coordinate slowest).
pub fn ball_points(dim: usize, radius: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::with_capacity(ball_size(dim, radius));
    let mut current = vec![0i64; dim];
    fill_ball(&mut current, 0, radius as i64, &mut out);
    out
}

fn fill_ball(current: &mut Vec<i64>, axis: usize, budget: i64, out: &mut Vec<Vec<i64>>) {
    if axis == current.len() {
        out.push(current.clone());
        return;
    }
    for c in -budget..=budget {
        current[axis] = c;
        fill_ball(current, axis + 1, budget - c.abs(), out);
    }
    current[axis] = 0;
}

/// Lattice points with `|n| == radius` exactly.
pub fn sphere_points(dim: usize, radius: usize) -> Vec<Vec<i64>> {
    ball_points_filtered(dim, radius, |p| taxicab(p) == radius as i64)
}

fn ball_points_filtered(dim: usize, radius: usize, keep: impl Fn(&[i64]) -> bool) -> Vec<Vec<i64>> {
    ball_points(dim, radius).into_iter().filter(|p| keep(p)).collect()
}

/// Dense array of values on the cube `[-h, h]^d` of `Z^d`.
///
/// Used for functions on the infinite lattice that are not periodic, such as
/// the potential `n -> S_n` of a cocycle with nonzero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeBox {
    dim: usize,
    half_width: usize,
    values: Vec<f64>,
}

impl LatticeBox {
    pub fn from_fn(dim: usize, half_width: usize, mut f: impl FnMut(&[i64]) -> f64) -> Self {
        let width = 2 * half_width + 1;
        let count = width.pow(dim as u32);
        let mut values = Vec::with_capacity(count);
        let mut point = vec![-(half_width as i64); dim];
        for _ in 0..count {
            values.push(f(&point));
            for c in point.iter_mut() {
                if *c < half_width as i64 {
                    *c += 1;
                    break;
                }
                *c = -(half_width as i64);
            }
        }
        Self { dim, half_width, values }
    }

    pub(crate) fn from_raw(dim: usize, half_width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), (2 * half_width + 1).pow(dim as u32));
        Self { dim, half_width, values }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn contains(&self, point: &[i64]) -> bool {
        point.iter().all(|c| c.unsigned_abs() as usize <= self.half_width)
    }

    #[inline]
    pub(crate) fn offset(&self, point: &[i64]) -> usize {
        let width = 2 * self.half_width + 1;
        point
            .iter()
            .rev()
            .fold(0usize, |acc, &c| acc * width + (c + self.half_width as i64) as usize)
    }

    /// Value at `point`; panics when the point lies outside the box.
    pub fn get(&self, point: &[i64]) -> f64 {
        assert!(self.contains(point), "point {point:?} outside box of half-width {}", self.half_width);
        self.values[self.offset(point)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_guards() {
        assert_eq!(TorusShape::new(0, 4), Err(ShapeError::ZeroDimension));
        assert_eq!(TorusShape::new(2, 1), Err(ShapeError::SideTooSmall(1)));
        assert!(TorusShape::new(40, 256).is_err());
        assert_eq!(TorusShape::new(3, 4).unwrap().site_count(), 64);
    }

    #[test]
    fn index_first_coordinate_fastest() {
        let shape = TorusShape::new(2, 4).unwrap();
        assert_eq!(shape.index(&[1, 0]), 1);
        assert_eq!(shape.index(&[0, 1]), 4);
        assert_eq!(shape.index(&[4, 0]), 0);
        assert_eq!(shape.index(&[-1, -1]), 15);
        assert_eq!(shape.coords(7), vec![3, 1]);
    }

    #[test]
    fn neighbours_wrap() {
        let shape = TorusShape::new(3, 5).unwrap();
        for s in 0..shape.site_count() {
            for dir in 0..3 {
                let f = shape.forward(s, dir);
                assert_eq!(shape.backward(f, dir), s);
                let mut shift = vec![0; 3];
                shift[dir] = 1;
                assert_eq!(f, shape.translate(s, &shift));
            }
        }
    }

    #[test]
    fn ball_sizes_match_enumeration() {
        for dim in 1..=3 {
            for r in 0..=7 {
                assert_eq!(ball_points(dim, r).len(), ball_size(dim, r), "d={dim} R={r}");
            }
        }
        assert_eq!(ball_size(2, 3), 25);
        assert_eq!(sphere_points(2, 3).len(), 12);
    }

    #[test]
    fn box_offsets_roundtrip() {
        let b = LatticeBox::from_fn(2, 3, |p| (p[0] * 10 + p[1]) as f64);
        assert_eq!(b.get(&[-3, 2]), -28.0);
        assert_eq!(b.get(&[3, -3]), 27.0);
        assert!(!b.contains(&[4, 0]));
    }
}
