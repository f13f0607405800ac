//! Periodic cell problem for the harmonic corrector.
//!
//! The operator is `A u(n) = sum_i [c_i(n) (u(n+e_i) - u(n)) - c_i(n-e_i) (u(n) - u(n-e_i))]`,
//! the divergence of the Ohmic current. `A` is symmetric negative semidefinite
//! with the constants as kernel, and `A u / bar_c` is the walk generator.
//!
//! For each coordinate `j` the corrector `chi^(j)` is the mean-zero solution of
//! `A chi^(j) = -div(c_j e_j)`, and the harmonic cocycle with mean `y` has
//! increments `f_i = y_i + sum_j y_j (chi^(j)(n+e_i) - chi^(j)(n))`.

use crate::cocycle::{spatial_mean, CocycleField};
use crate::environment::Environment;
use crate::format::{self, FormatError, Header, Reader, HEADER_LEN};
use crate::lattice::{Neighbors, TorusShape};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"COR1";

/// Largest torus handled by [`dense_oracle_solve`].
pub const DENSE_SITE_LIMIT: usize = 4096;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("CG did not converge for direction {direction}: best relative residual {best_residual:e} after {iterations} iterations")]
    NotConverged { direction: usize, iterations: usize, best_residual: f64 },
    #[error("right-hand side has nonzero sum {0:e}")]
    InconsistentRhs(f64),
    #[error("dense oracle limited to {limit} sites, torus has {sites}")]
    TooLarge { sites: usize, limit: usize },
    #[error("dense system is singular")]
    Singular,
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("corrector set has {found} directions, environment needs {expected}")]
    MissingCorrector { expected: usize, found: usize },
    #[error("corrector shape does not match the environment")]
    ShapeMismatch,
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative residual target `|r|_2 / |b|_2`.
    pub tol: f64,
    /// Defaults to `20 L d`.
    pub max_iter: Option<usize>,
    /// Jacobi preconditioning with diagonal `bar_c`.
    pub jacobi: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: None, jacobi: true }
    }
}

impl SolverOptions {
    pub fn max_iter_for(&self, shape: &TorusShape) -> usize {
        self.max_iter.unwrap_or(20 * shape.side() * shape.dim())
    }
}

/// Mean-zero correctors `chi^(j)`, one per coordinate direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSolution {
    pub shape: TorusShape,
    pub chi: Vec<Vec<f64>>,
    pub residual_l2: Vec<f64>,
    pub iterations: Vec<usize>,
    pub tol: f64,
}

impl CorrectorSolution {
    /// Harmonic cocycle with mean vector `y`.
    pub fn cocycle(&self, y: &[f64]) -> CocycleField {
        let d = self.shape.dim();
        assert_eq!(y.len(), d);
        let n = self.shape.site_count();
        let increments = (0..d)
            .map(|i| {
                (0..n)
                    .map(|s| {
                        let fwd = self.shape.forward(s, i);
                        y[i] + y
                            .iter()
                            .zip(&self.chi)
                            .map(|(&yj, chi)| yj * (chi[fwd] - chi[s]))
                            .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        CocycleField::new(self.shape, increments).expect("corrector has the torus shape")
    }

    /// Max-norm distance between corresponding correctors.
    pub fn max_gap(&self, other: &CorrectorSolution) -> f64 {
        self.chi
            .iter()
            .zip(&other.chi)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self, provenance: &Environment) -> Vec<u8> {
        let mut out = Vec::new();
        provenance.header(MAGIC).encode(&mut out);
        for chi in &self.chi {
            format::push_f64s(&mut out, chi);
        }
        for (res, iters) in self.residual_l2.iter().zip(&self.iterations) {
            out.extend_from_slice(&res.to_le_bytes());
            out.extend_from_slice(&(*iters as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.tol.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Header), SolverError> {
        let header = Header::decode(bytes, MAGIC)?;
        let shape = header.shape;
        let (d, n) = (shape.dim(), shape.site_count());
        format::check_len(bytes, HEADER_LEN + 8 * d * n + 16 * d + 8)?;
        let mut r = Reader::at(bytes, HEADER_LEN);
        let chi = (0..d).map(|_| r.f64s(n)).collect();
        let mut residual_l2 = Vec::with_capacity(d);
        let mut iterations = Vec::with_capacity(d);
        for _ in 0..d {
            residual_l2.push(r.f64());
            iterations.push(r.u64() as usize);
        }
        let tol = r.f64();
        Ok((Self { shape, chi, residual_l2, iterations, tol }, header))
    }

    pub fn save(&self, path: &Path, provenance: &Environment) -> Result<(), SolverError> {
        Ok(format::write_file(path, &self.to_bytes(provenance))?)
    }

    pub fn load(path: &Path) -> Result<(Self, Header), SolverError> {
        Self::from_bytes(&format::read_file(path)?)
    }
}

/// `A u`, or the generator `A u / bar_c` when `weighted` is set.
pub fn apply_operator(env: &Environment, u: &[f64], weighted: bool) -> Vec<f64> {
    let shape = env.shape();
    assert_eq!(u.len(), shape.site_count());
    (0..u.len())
        .map(|s| {
            let div: f64 = (0..env.dim())
                .map(|i| {
                    let fwd = shape.forward(s, i);
                    let bwd = shape.backward(s, i);
                    env.c(i, s) * (u[fwd] - u[s]) - env.c(i, bwd) * (u[s] - u[bwd])
                })
                .sum();
            if weighted {
                div / env.bar_c_at(s)
            } else {
                div
            }
        })
        .collect()
}

/// Right-hand side `g^(j) = c_j(n) - c_j(n - e_j)` of `(-A) chi^(j) = g^(j)`.
fn cell_rhs(env: &Environment, j: usize) -> Vec<f64> {
    let shape = env.shape();
    (0..shape.site_count())
        .map(|s| env.c(j, s) - env.c(j, shape.backward(s, j)))
        .collect()
}

/// `-A` with cached neighbour tables.
struct CellOperator<'a> {
    env: &'a Environment,
    nb: Neighbors,
    diag: Vec<f64>,
}

impl<'a> CellOperator<'a> {
    fn new(env: &'a Environment) -> Self {
        Self { env, nb: Neighbors::new(&env.shape()), diag: env.bar_c_field() }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let d = self.env.dim();
        for (s, o) in out.iter_mut().enumerate() {
            let us = u[s];
            let mut acc = self.diag[s] * us;
            for i in 0..d {
                let fwd = self.nb.forward(s, i);
                let bwd = self.nb.backward(s, i);
                acc -= self.env.c(i, s) * u[fwd] + self.env.c(i, bwd) * u[bwd];
            }
            *o = acc;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_mean_zero(v: &mut [f64]) {
    let m = spatial_mean(v);
    v.iter_mut().for_each(|x| *x -= m);
}

struct CgOutcome {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
}

/// Preconditioned CG for `(-A) x = b` restricted to mean-zero fields.
fn projected_cg(op: &CellOperator, b: &[f64], x0: &[f64], tol: f64, max_iter: usize, jacobi: bool) -> CgOutcome {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return CgOutcome { x: vec![0.0; n], residual: 0.0, iterations: 0, converged: true };
    }
    let precondition = |r: &[f64], z: &mut [f64]| {
        if jacobi {
            for ((zi, ri), di) in z.iter_mut().zip(r).zip(&op.diag) {
                *zi = ri / di;
            }
        } else {
            z.copy_from_slice(r);
        }
        project_mean_zero(z);
    };
    let true_residual = |x: &[f64], r: &mut [f64]| {
        op.apply(x, r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        project_mean_zero(r);
        dot(r, r).sqrt() / b_norm
    };

    let mut x = x0.to_vec();
    project_mean_zero(&mut x);
    let mut r = vec![0.0; n];
    let mut rel = true_residual(&x, &mut r);
    let mut best = rel;
    let mut best_x = x.clone();
    if rel <= tol {
        return CgOutcome { x, residual: rel, iterations: 0, converged: true };
    }
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];

    for it in 1..=max_iter {
        op.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            break;
        }
        let alpha = rz / pq;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * q[k];
        }
        project_mean_zero(&mut x);
        project_mean_zero(&mut r);
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= tol {
            // guard against drift of the recursive residual
            rel = true_residual(&x, &mut r);
            if rel < best {
                best = rel;
                best_x.copy_from_slice(&x);
            }
            if rel <= tol {
                return CgOutcome { x, residual: rel, iterations: it, converged: true };
            }
            precondition(&r, &mut z);
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
            continue;
        }
        if rel < best {
            best = rel;
            best_x.copy_from_slice(&x);
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    let final_rel = true_residual(&best_x, &mut r);
    CgOutcome { x: best_x, residual: final_rel, iterations: max_iter, converged: final_rel <= tol }
}

/// Correctors for all `d` basis directions, starting CG from zero.
pub fn solve_correctors(env: &Environment, opts: &SolverOptions) -> Result<CorrectorSolution, SolverError> {
    let zeros = vec![vec![0.0; env.shape().site_count()]; env.dim()];
    solve_correctors_from(env, opts, &zeros)
}

/// Correctors with explicit CG starting fields (one per direction).
pub fn solve_correctors_from(
    env: &Environment,
    opts: &SolverOptions,
    initial: &[Vec<f64>],
) -> Result<CorrectorSolution, SolverError> {
    if !(opts.tol > 0.0) {
        return Err(SolverError::Tolerance(opts.tol));
    }
    let shape = env.shape();
    if initial.len() != env.dim() || initial.iter().any(|x| x.len() != shape.site_count()) {
        return Err(SolverError::ShapeMismatch);
    }
    let op = CellOperator::new(env);
    let max_iter = opts.max_iter_for(&shape);
    let mut sol = CorrectorSolution {
        shape,
        chi: Vec::with_capacity(env.dim()),
        residual_l2: Vec::with_capacity(env.dim()),
        iterations: Vec::with_capacity(env.dim()),
        tol: opts.tol,
    };
    for (j, x0) in initial.iter().enumerate() {
        let rhs = cell_rhs(env, j);
        let total: f64 = rhs.iter().sum();
        let scale: f64 = rhs.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        if total.abs() > 1e-12 * scale {
            return Err(SolverError::InconsistentRhs(total));
        }
        let out = projected_cg(&op, &rhs, x0, opts.tol, max_iter, opts.jacobi);
        if !out.converged {
            return Err(SolverError::NotConverged {
                direction: j,
                iterations: out.iterations,
                best_residual: out.residual,
            });
        }
        sol.chi.push(out.x);
        sol.residual_l2.push(out.residual);
        sol.iterations.push(out.iterations);
    }
    Ok(sol)
}

/// Harmonic cocycle with mean `y` for the given environment.
pub fn kunnemann_cocycle(env: &Environment, y: &[f64], opts: &SolverOptions) -> Result<CocycleField, SolverError> {
    Ok(solve_correctors(env, opts)?.cocycle(y))
}

/// Direct solve of the same cell problem: `-A` bordered by the mean-zero
/// constraint row and column, factored by LU.
pub fn dense_oracle_solve(env: &Environment) -> Result<CorrectorSolution, SolverError> {
    let shape = env.shape();
    let n = shape.site_count();
    if n > DENSE_SITE_LIMIT {
        return Err(SolverError::TooLarge { sites: n, limit: DENSE_SITE_LIMIT });
    }
    let mut m = DMatrix::<f64>::zeros(n + 1, n + 1);
    for s in 0..n {
        for i in 0..env.dim() {
            let fwd = shape.forward(s, i);
            let c = env.c(i, s);
            m[(s, s)] += c;
            m[(fwd, fwd)] += c;
            m[(s, fwd)] -= c;
            m[(fwd, s)] -= c;
        }
        m[(s, n)] = 1.0;
        m[(n, s)] = 1.0;
    }
    let lu = m.lu();
    let mut chi = Vec::with_capacity(env.dim());
    for j in 0..env.dim() {
        let mut rhs = DVector::<f64>::zeros(n + 1);
        for (k, v) in cell_rhs(env, j).into_iter().enumerate() {
            rhs[k] = v;
        }
        let x = lu.solve(&rhs).ok_or(SolverError::Singular)?;
        chi.push(x.as_slice()[..n].to_vec());
    }
    let residual_l2 = chi
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let rhs = cell_rhs(env, j);
            let ax = apply_operator(env, x, false);
            let num: f64 = ax.iter().zip(&rhs).map(|(a, g)| (a + g).powi(2)).sum::<f64>().sqrt();
            let den = dot(&rhs, &rhs).sqrt();
            if den == 0.0 {
                0.0
            } else {
                num / den
            }
        })
        .collect();
    Ok(CorrectorSolution { shape, chi, residual_l2, iterations: vec![0; env.dim()], tol: 0.0 })
}

/// Node law defect `max_n |sum_i [c_i(n-e_i) f_i(n-e_i) - c_i(n) f_i(n)]|`.
pub fn harmonicity_residual(env: &Environment, field: &CocycleField) -> f64 {
    let shape = env.shape();
    assert_eq!(shape, field.shape());
    (0..shape.site_count())
        .map(|s| {
            (0..env.dim())
                .map(|i| {
                    let bwd = shape.backward(s, i);
                    env.c(i, bwd) * field.f(i, bwd) - env.c(i, s) * field.f(i, s)
                })
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// Homogenized conductivity tensor from the corrected-gradient energy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveTensor {
    pub dim: usize,
    pub side: usize,
    /// Row-major `d x d`.
    pub matrix: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl EffectiveTensor {
    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.matrix[j * self.dim + k]
    }

    pub fn symmetry_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        for j in 0..self.dim {
            for k in 0..self.dim {
                gap = gap.max((self.get(j, k) - self.get(k, j)).abs());
            }
        }
        gap
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.matrix);
        let sym = (&m + m.transpose()) * 0.5;
        let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Entrywise mean over several realizations; seeds are concatenated.
    pub fn average(tensors: &[EffectiveTensor]) -> Option<EffectiveTensor> {
        let first = tensors.first()?;
        if tensors.iter().any(|t| t.dim != first.dim || t.side != first.side) {
            return None;
        }
        let count = tensors.len() as f64;
        let matrix = (0..first.matrix.len())
            .map(|k| tensors.iter().map(|t| t.matrix[k]).sum::<f64>() / count)
            .collect();
        let seeds = tensors.iter().flat_map(|t| t.seeds.iter().copied()).collect();
        Some(EffectiveTensor { dim: first.dim, side: first.side, matrix, seeds })
    }
}

/// `(A_hom)_jk = L^-d sum_n sum_i c_i (delta_ij + d_i chi^j)(delta_ik + d_i chi^k)`.
pub fn effective_tensor(env: &Environment, sol: &CorrectorSolution) -> Result<EffectiveTensor, SolverError> {
    let shape = env.shape();
    let d = env.dim();
    if sol.chi.len() != d {
        return Err(SolverError::MissingCorrector { expected: d, found: sol.chi.len() });
    }
    if sol.shape != shape {
        return Err(SolverError::ShapeMismatch);
    }
    let n = shape.site_count();
    let mut matrix = vec![0.0; d * d];
    let mut grad = vec![0.0; d];
    for s in 0..n {
        for i in 0..d {
            let fwd = shape.forward(s, i);
            for (j, g) in grad.iter_mut().enumerate() {
                *g = if i == j { 1.0 } else { 0.0 } + sol.chi[j][fwd] - sol.chi[j][s];
            }
            let c = env.c(i, s);
            for j in 0..d {
                for k in 0..d {
                    matrix[j * d + k] += c * grad[j] * grad[k];
                }
            }
        }
    }
    matrix.iter_mut().for_each(|v| *v /= n as f64);
    Ok(EffectiveTensor { dim: d, side: shape.side(), matrix, seeds: vec![env.seed()] })
}

/// Arithmetic mean of `c_dir` over the torus (upper energy bound).
pub fn arithmetic_mean(env: &Environment, dir: usize) -> f64 {
    spatial_mean(env.field(dir))
}

/// Harmonic mean of `c_dir` over the torus (lower energy bound).
pub fn harmonic_mean(env: &Environment, dir: usize) -> f64 {
    let field = env.field(dir);
    field.len() as f64 / field.iter().map(|c| 1.0 / c).sum::<f64>()
}

/// JSON record for an averaged effective tensor.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveRecord {
    pub d: usize,
    #[serde(rename = "L")]
    pub side: usize,
    pub a: f64,
    pub b: f64,
    pub model: String,
    pub seeds: Vec<u64>,
    #[serde(rename = "A_hom")]
    pub a_hom: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
}
