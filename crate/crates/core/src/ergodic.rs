//! Quantitative diagnostics for the pointwise ergodic theorem of harmonic
//! cocycles: sublinearity profiles, averages along rational directions, the
//! discrete Poincaré inequality on taxicab balls, oscillation decay of
//! harmonic functions, the Wiener-average oscillation constant and the
//! approximation of lattice points by multiples of short vectors.

use crate::cocycle::CocycleField;
use crate::environment::Environment;
use crate::lattice::{ball_points, ball_size, sphere_points, taxicab, LatticeBox, TorusShape};
use serde::Serialize;
use std::fmt::Write as _;
use thiserror::Error;

/// Residual allowed on the node law before a field is treated as non-harmonic.
pub const HARMONIC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErgodicError {
    #[error("radius {radius} exceeds the torus guard {limit} (side {side})")]
    RadiusTooLarge { radius: usize, limit: usize, side: usize },
    #[error("radii must be positive and strictly increasing")]
    BadRadii,
    #[error("direction vector must be nonzero")]
    ZeroDirection,
    #[error("multiplier must be at least 1")]
    ZeroMultiplier,
    #[error("field is not harmonic: node-law residual {0:e}")]
    NotHarmonic(f64),
    #[error("field is constant on the ball: oscillation exponent undefined")]
    ConstantField,
    #[error("oscillation vanishes at radius {0}")]
    DegenerateOscillation(usize),
    #[error("need at least 4 distinct fit radii, got {0}")]
    TooFewRadii(usize),
    #[error("lattice box of half-width {have} does not cover radius {need}")]
    BoxTooSmall { have: usize, need: usize },
}

fn guard(shape: &TorusShape, radius: usize) -> Result<(), ErgodicError> {
    let limit = shape.max_radius();
    if radius > limit {
        return Err(ErgodicError::RadiusTooLarge { radius, limit, side: shape.side() });
    }
    Ok(())
}

/// Largest radius for which balls are enumerated exhaustively.
pub fn exact_ball_limit(dim: usize) -> usize {
    match dim {
        1 => usize::MAX,
        2 => 128,
        3 => 24,
        _ => 8,
    }
}

/// `M(R) = max_{|n| <= R} |S_n - <n, y>| / R`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SublinearityProfile {
    pub radii: Vec<usize>,
    pub values: Vec<f64>,
    /// Set where the ball was not enumerated: the value is the maximum over
    /// the sphere `|n| = R` and all smaller scanned radii, a lower bound.
    pub shell_only: Vec<bool>,
}

impl SublinearityProfile {
    pub fn value_at(&self, radius: usize) -> Option<f64> {
        self.radii.iter().position(|&r| r == radius).map(|k| self.values[k])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("R,M_R,shell_only\n");
        for ((r, m), shell) in self.radii.iter().zip(&self.values).zip(&self.shell_only) {
            writeln!(out, "{r},{m:e},{shell}").unwrap();
        }
        out
    }
}

fn linear_part(y: &[f64], n: &[i64]) -> f64 {
    y.iter().zip(n).map(|(yi, &ni)| yi * ni as f64).sum()
}

pub fn sublinearity_profile(
    field: &CocycleField,
    y: &[f64],
    radii: &[usize],
) -> Result<SublinearityProfile, ErgodicError> {
    if radii.is_empty() || radii[0] == 0 || radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ErgodicError::BadRadii);
    }
    let shape = field.shape();
    let d = shape.dim();
    guard(&shape, *radii.last().unwrap())?;
    let limit = exact_ball_limit(d);
    let exact_top = radii.iter().copied().filter(|&r| r <= limit).max().unwrap_or(0);

    // max deviation on each sphere |n| = k, k <= exact_top
    let mut sphere_max = vec![0.0f64; exact_top + 1];
    if exact_top > 0 {
        let pot = field.potential_box(exact_top);
        for n in ball_points(d, exact_top) {
            let k = taxicab(&n) as usize;
            let dev = (pot.get(&n) - linear_part(y, &n)).abs();
            sphere_max[k] = sphere_max[k].max(dev);
        }
        for k in 1..sphere_max.len() {
            sphere_max[k] = sphere_max[k].max(sphere_max[k - 1]);
        }
    }
    let mut values = Vec::with_capacity(radii.len());
    let mut shell_only = Vec::with_capacity(radii.len());
    // beyond the exact limit: shell maximum combined with everything seen so far
    let mut running = sphere_max.last().copied().unwrap_or(0.0);
    for &r in radii {
        if r <= limit {
            values.push(sphere_max[r] / r as f64);
            shell_only.push(false);
        } else {
            running = sphere_points(d, r)
                .iter()
                .map(|n| (field.evaluate(n) - linear_part(y, n)).abs())
                .fold(running, f64::max);
            values.push(running / r as f64);
            shell_only.push(true);
        }
    }
    Ok(SublinearityProfile { radii: radii.to_vec(), values, shell_only })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectionalAverage {
    /// `S_{k n} / (k |n|)`.
    pub value: f64,
    /// `<n, y> / |n|`, the predicted limit.
    pub limit: f64,
    /// The summation path crosses the torus period in some coordinate.
    pub wraps: bool,
}

pub fn directional_average(field: &CocycleField, n: &[i64], k: u64) -> Result<DirectionalAverage, ErgodicError> {
    let norm = taxicab(n);
    if norm == 0 {
        return Err(ErgodicError::ZeroDirection);
    }
    if k == 0 {
        return Err(ErgodicError::ZeroMultiplier);
    }
    let k = k as i64;
    let target: Vec<i64> = n.iter().map(|c| c * k).collect();
    let side = field.shape().side() as i64;
    let scale = (k * norm) as f64;
    Ok(DirectionalAverage {
        value: field.evaluate(&target) / scale,
        limit: linear_part(field.mean_vector(), n) / norm as f64,
        wraps: target.iter().any(|c| c.abs() >= side),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoincareCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Both sides of the Poincaré inequality on the ball of radius `radius`
/// centered at the origin:
/// `sum_{|n|<=R} |u - mean_R u|^2 <= 4 R^2 sum_{|n|<=R+1} sum_i (|d_i u|^2 + |d*_i u|^2)`.
pub fn poincare_check(shape: &TorusShape, u: &[f64], radius: usize) -> Result<PoincareCheck, ErgodicError> {
    assert_eq!(u.len(), shape.site_count());
    if radius == 0 {
        return Err(ErgodicError::BadRadii);
    }
    guard(shape, radius + 1)?;
    let d = shape.dim();
    let inner: Vec<f64> = ball_points(d, radius).iter().map(|n| u[shape.index(n)]).collect();
    let mean = inner.iter().sum::<f64>() / inner.len() as f64;
    let lhs = inner.iter().map(|v| (v - mean).powi(2)).sum();
    let mut energy = 0.0;
    for n in ball_points(d, radius + 1) {
        let s = shape.index(&n);
        for i in 0..d {
            energy += (u[shape.forward(s, i)] - u[s]).powi(2) + (u[shape.backward(s, i)] - u[s]).powi(2);
        }
    }
    let rhs = 4.0 * (radius * radius) as f64 * energy;
    Ok(PoincareCheck { lhs, rhs, holds: lhs <= rhs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderEstimate {
    pub alpha_hat: f64,
    /// Prefactor with `osc(B_r) ~ c_hat (r / R)^alpha_hat`.
    pub c_hat: f64,
    pub radius: usize,
    /// Coefficient of determination of the log-log fit.
    pub fit_quality: f64,
    pub radii: Vec<usize>,
    pub oscillations: Vec<f64>,
}

impl HolderEstimate {
    /// `(r, osc)` rows followed by a `#`-prefixed JSON footer with the fit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,osc\n");
        for (r, o) in self.radii.iter().zip(&self.oscillations) {
            writeln!(out, "{r},{o:e}").unwrap();
        }
        let footer = serde_json::json!({
            "alpha_hat": self.alpha_hat,
            "C_hat": self.c_hat,
            "R": self.radius,
            "fit_quality": self.fit_quality,
        });
        writeln!(out, "# {footer}").unwrap();
        out
    }
}

/// Node-law residual `max |A u|` over the ball of radius `radius`, with the
/// environment read modulo L.
pub fn box_harmonicity_residual(env: &Environment, u: &LatticeBox, radius: usize) -> Result<f64, ErgodicError> {
    if u.half_width() < radius + 1 {
        return Err(ErgodicError::BoxTooSmall { have: u.half_width(), need: radius + 1 });
    }
    let shape = env.shape();
    let d = env.dim();
    let mut worst: f64 = 0.0;
    let mut nb = vec![0i64; d];
    for n in ball_points(d, radius) {
        let s = shape.index(&n);
        let centre = u.get(&n);
        let mut div = 0.0;
        for i in 0..d {
            nb.copy_from_slice(&n);
            nb[i] += 1;
            div += env.c(i, s) * (u.get(&nb) - centre);
            nb[i] -= 2;
            div -= env.c(i, shape.backward(s, i)) * (centre - u.get(&nb));
        }
        worst = worst.max(div.abs());
    }
    Ok(worst)
}

/// Fit radii `{R/8, R/4, R/2, R}`, rounded and deduplicated.
pub fn holder_radii(radius: usize) -> Vec<usize> {
    let mut radii: Vec<usize> = [8.0, 4.0, 2.0, 1.0]
        .iter()
        .map(|div| ((radius as f64 / div).round() as usize).max(1))
        .collect();
    radii.dedup();
    radii
}

/// Oscillation exponent of a harmonic function from `osc(B_r) = max - min`
/// over nested balls, by least squares on `log osc` against `log r`.
pub fn holder_exponent(env: &Environment, u: &LatticeBox, radius: usize) -> Result<HolderEstimate, ErgodicError> {
    let shape = env.shape();
    guard(&shape, 2 * radius)?;
    let residual = box_harmonicity_residual(env, u, 2 * radius)?;
    if !(residual <= HARMONIC_TOLERANCE) {
        return Err(ErgodicError::NotHarmonic(residual));
    }
    let radii = holder_radii(radius);
    if radii.len() < 4 {
        return Err(ErgodicError::TooFewRadii(radii.len()));
    }
    let d = env.dim();
    let mut lo = vec![f64::INFINITY; radius + 1];
    let mut hi = vec![f64::NEG_INFINITY; radius + 1];
    for n in ball_points(d, radius) {
        let k = taxicab(&n) as usize;
        let v = u.get(&n);
        lo[k] = lo[k].min(v);
        hi[k] = hi[k].max(v);
    }
    for k in 1..=radius {
        lo[k] = lo[k].min(lo[k - 1]);
        hi[k] = hi[k].max(hi[k - 1]);
    }
    let oscillations: Vec<f64> = radii.iter().map(|&r| hi[r] - lo[r]).collect();
    if *oscillations.last().unwrap() == 0.0 {
        return Err(ErgodicError::ConstantField);
    }
    if let Some(k) = oscillations.iter().position(|&o| o == 0.0) {
        return Err(ErgodicError::DegenerateOscillation(radii[k]));
    }
    let xs: Vec<f64> = radii.iter().map(|&r| (r as f64).ln()).collect();
    let ys: Vec<f64> = oscillations.iter().map(|o| o.ln()).collect();
    let (slope, intercept, r2) = least_squares(&xs, &ys);
    Ok(HolderEstimate {
        alpha_hat: slope,
        c_hat: (intercept + slope * (radius as f64).ln()).exp(),
        radius,
        fit_quality: r2,
        radii,
        oscillations,
    })
}

/// Slope, intercept and coefficient of determination.
fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    (slope, intercept, r2)
}

/// `C'(R) / R` with the unknown regularity constants set to one:
/// `C'(R)^2 = (4R)^2 / |B_4R| * 4 sum_{|n|<=4R+1} sum_i (f_i(n)^2 + f_i(n-e_i)^2)`.
pub fn oscillation_constant_stat(field: &CocycleField, radius: usize) -> Result<f64, ErgodicError> {
    if radius == 0 {
        return Err(ErgodicError::BadRadii);
    }
    let shape = field.shape();
    guard(&shape, 4 * radius + 1)?;
    let d = shape.dim();
    let mut sum = 0.0;
    for n in ball_points(d, 4 * radius + 1) {
        let s = shape.index(&n);
        for i in 0..d {
            sum += field.f(i, s).powi(2) + field.f(i, shape.backward(s, i)).powi(2);
        }
    }
    let r4 = (4 * radius) as f64;
    let c_prime = (r4 * r4 / ball_size(d, 4 * radius) as f64 * 4.0 * sum).sqrt();
    Ok(c_prime / radius as f64)
}

/// A point `l = k v` with `|v| = n` and `k = floor(|m| / n)` such that
/// `|l| <= |m|` and `|l - m| <= n + d |m| / n`.
///
/// `v` floors the coordinates of `|m_i| n / |m|` (in exact integer arithmetic),
/// adds one to the first `K = n - sum floor` coordinates and restores the
/// signs of `m` (zero coordinates count as positive).
pub fn nearest_multiple(m: &[i64], n: u64) -> Result<Vec<i64>, ErgodicError> {
    if n == 0 {
        return Err(ErgodicError::ZeroMultiplier);
    }
    let norm = taxicab(m) as u64;
    let k = norm / n;
    if k == 0 {
        return Ok(vec![0; m.len()]);
    }
    let mut v: Vec<u64> = m
        .iter()
        .map(|&c| ((c.unsigned_abs() as u128 * n as u128) / norm as u128) as u64)
        .collect();
    let deficit = n - v.iter().sum::<u64>();
    debug_assert!((deficit as usize) < m.len().max(1));
    for c in v.iter_mut().take(deficit as usize) {
        *c += 1;
    }
    Ok(m.iter()
        .zip(&v)
        .map(|(&mi, &vi)| {
            let signed = vi as i64 * k as i64;
            if mi < 0 {
                -signed
            } else {
                signed
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::GeneratorModel;
    use crate::solver::{kunnemann_cocycle, SolverOptions};

    fn shape(d: usize, l: usize) -> TorusShape {
        TorusShape::new(d, l).unwrap()
    }

    #[test]
    fn constant_field_has_flat_profile() {
        let f = CocycleField::constant(shape(2, 20), &[1.0, 0.5]);
        let p = sublinearity_profile(&f, &[1.0, 0.5], &[1, 2, 4, 9]).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coboundary_profile_bound() {
        let s = shape(2, 24);
        let g: Vec<f64> = (0..s.site_count()).map(|k| ((k * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let f = CocycleField::coboundary(s, &g);
        let radii: Vec<usize> = (1..=11).collect();
        let p = sublinearity_profile(&f, &[0.0, 0.0], &radii).unwrap();
        for (r, m) in p.radii.iter().zip(&p.values) {
            assert!(*m <= 2.0 * gmax / *r as f64 + 1e-12);
        }
        for w in p.radii.iter().zip(&p.values).collect::<Vec<_>>().windows(2) {
            assert!(*w[1].0 as f64 * w[1].1 >= *w[0].0 as f64 * w[0].1);
        }
    }

    #[test]
    fn profile_radius_guard() {
        let f = CocycleField::constant(shape(2, 16), &[1.0, 0.0]);
        assert!(matches!(
            sublinearity_profile(&f, &[1.0, 0.0], &[2, 8]),
            Err(ErgodicError::RadiusTooLarge { radius: 8, limit: 7, .. })
        ));
        assert_eq!(sublinearity_profile(&f, &[1.0, 0.0], &[3, 3]), Err(ErgodicError::BadRadii));
    }

    #[test]
    fn directional_average_full_period() {
        let env = Environment::generate(shape(2, 12), GeneratorModel::IidUniform, (1.0, 2.0), 4).unwrap();
        let y = [0.8, -0.3];
        let f = kunnemann_cocycle(&env, &y, &SolverOptions::default()).unwrap();
        let full = directional_average(&f, &[1, 0], 12).unwrap();
        assert!((full.value - 0.8).abs() <= 1e-9);
        let diag = directional_average(&f, &[1, 1], 12).unwrap();
        assert!((diag.value - (y[0] + y[1]) / 2.0).abs() <= 1e-9);
        assert!(diag.wraps);
        let c = CocycleField::constant(shape(2, 12), &y);
        for k in 1..30 {
            let avg = directional_average(&c, &[2, -1], k).unwrap();
            assert!((avg.value - (2.0 * 0.8 + 0.3) / 3.0).abs() <= 1e-12);
        }
        assert_eq!(directional_average(&c, &[0, 0], 3), Err(ErgodicError::ZeroDirection));
    }

    #[test]
    fn poincare_hand_example() {
        let s = shape(1, 16);
        let mut u = vec![0.0; 16];
        u[0] = 1.0;
        let check = poincare_check(&s, &u, 1).unwrap();
        assert!((check.lhs - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(check.rhs, 16.0);
        assert!(check.holds);
        let flat = poincare_check(&s, &[2.0; 16], 3).unwrap();
        assert_eq!((flat.lhs, flat.rhs, flat.holds), (0.0, 0.0, true));
        assert!(poincare_check(&s, &u, 7).is_err());
    }

    #[test]
    fn holder_affine_and_constant() {
        let env = Environment::generate(shape(2, 40), GeneratorModel::Constant(1.0), (0.5, 2.0), 0).unwrap();
        let affine = LatticeBox::from_fn(2, 17, |n| n[0] as f64);
        let est = holder_exponent(&env, &affine, 8).unwrap();
        assert!((est.alpha_hat - 1.0).abs() <= 0.05);
        assert!(est.fit_quality > 0.99);
        let flat = LatticeBox::from_fn(2, 17, |_| 3.0);
        assert_eq!(holder_exponent(&env, &flat, 8), Err(ErgodicError::ConstantField));
        let bumpy = LatticeBox::from_fn(2, 17, |n| (n[0] * n[0]) as f64);
        assert!(matches!(holder_exponent(&env, &bumpy, 8), Err(ErgodicError::NotHarmonic(_))));
        assert!(matches!(holder_exponent(&env, &affine, 10), Err(ErgodicError::RadiusTooLarge { .. })));
    }

    #[test]
    fn holder_radii_grid() {
        assert_eq!(holder_radii(64), vec![8, 16, 32, 64]);
        assert_eq!(holder_radii(8), vec![1, 2, 4, 8]);
        assert_eq!(holder_radii(4), vec![1, 2, 4]);
    }

    #[test]
    fn oscillation_stat_constant_closed_form() {
        let f = CocycleField::constant(shape(2, 64), &[1.0, 0.0]);
        for r in 1..=7 {
            let expected = (128.0 * ball_size(2, 4 * r + 1) as f64 / ball_size(2, 4 * r) as f64).sqrt();
            let got = oscillation_constant_stat(&f, r).unwrap();
            assert!((got - expected).abs() <= 1e-12 * expected);
        }
        assert!(oscillation_constant_stat(&f, 8).is_err());
    }

    #[test]
    fn oscillation_stat_is_homogeneous() {
        let env = Environment::generate(shape(2, 24), GeneratorModel::IidUniform, (1.0, 2.0), 8).unwrap();
        let f = kunnemann_cocycle(&env, &[1.0, 0.0], &SolverOptions::default()).unwrap();
        let scaled = CocycleField::new(
            f.shape(),
            (0..2).map(|i| f.increments(i).iter().map(|v| -2.5 * v).collect()).collect(),
        )
        .unwrap();
        let a = oscillation_constant_stat(&f, 2).unwrap();
        let b = oscillation_constant_stat(&scaled, 2).unwrap();
        assert!((b - 2.5 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn oscillation_stat_stays_bounded_on_a_radius_grid() {
        let env = Environment::generate(shape(2, 264), GeneratorModel::IidUniform, (1.0, 2.0), 1).unwrap();
        let f = kunnemann_cocycle(&env, &[1.0, 0.0], &SolverOptions::default()).unwrap();
        let first = oscillation_constant_stat(&f, 4).unwrap();
        for r in [8, 16, 32] {
            assert!(oscillation_constant_stat(&f, r).unwrap() <= 2.0 * first);
        }
        let profile = sublinearity_profile(&f, &[1.0, 0.0], &[1, 2, 4, 8, 16, 32, 64, 130]).unwrap();
        for w in profile.radii.iter().zip(&profile.values).collect::<Vec<_>>().windows(2) {
            assert!(*w[1].0 as f64 * w[1].1 >= *w[0].0 as f64 * w[0].1);
        }
        assert_eq!(profile.shell_only, vec![false, false, false, false, false, false, false, true]);
        let diag = directional_average(&f, &[1, 1], 264).unwrap();
        assert!((diag.value - 0.5).abs() <= 1e-9);
    }

    #[test]
    fn nearest_multiple_examples() {
        assert_eq!(nearest_multiple(&[7], 2).unwrap(), vec![6]);
        assert_eq!(nearest_multiple(&[3, -1], 5).unwrap(), vec![0, 0]);
        assert_eq!(nearest_multiple(&[0, 0], 3).unwrap(), vec![0, 0]);
        assert_eq!(nearest_multiple(&[1], 0), Err(ErgodicError::ZeroMultiplier));
        let l = nearest_multiple(&[-5, 12, 0], 4).unwrap();
        assert_eq!(taxicab(&l), 16);
    }
}
