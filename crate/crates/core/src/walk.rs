//! Random walk among the conductances and the martingale `Y_k = S_{X_k}`.
//!
//! From `n` the walk jumps to `n + e_i` with probability `c_i(n) / bar_c(n)`
//! and to `n - e_i` with probability `c_i(n - e_i) / bar_c(n)`. Walks live on
//! the unwrapped lattice `Z^d`; the environment is read modulo L.
//!
//! Every step consumes one ChaCha8 word pair and picks the move by inverse CDF
//! over the fixed order `+e_1, -e_1, ..., +e_d, -e_d`. Walk `w` of an ensemble
//! with seed `s` uses stream `w` of `seed_from_u64(s)`.

use crate::cocycle::{CocycleField, Step};
use crate::environment::{unit_interval, Environment};
use crate::lattice::{taxicab, Neighbors};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;

#[inline]
fn move_step(index: usize) -> Step {
    Step { dir: index / 2, forward: index.is_multiple_of(2) }
}

/// The `2d` jump probabilities at a site, in move order.
pub fn transition_probabilities(env: &Environment, site: &[i64]) -> Vec<f64> {
    let shape = env.shape();
    let s = shape.index(site);
    let bar = env.bar_c_at(s);
    (0..env.dim())
        .flat_map(|i| [env.c(i, s) / bar, env.c(i, shape.backward(s, i)) / bar])
        .collect()
}

/// Generator in conditional-expectation form: `E[u(X_{k+1}) - u(X_k) | X_k = n]`.
pub fn apply_generator(env: &Environment, u: &[f64]) -> Vec<f64> {
    let shape = env.shape();
    assert_eq!(u.len(), shape.site_count());
    (0..u.len())
        .map(|s| {
            let bar = env.bar_c_at(s);
            (0..env.dim())
                .map(|i| {
                    let fwd = shape.forward(s, i);
                    let bwd = shape.backward(s, i);
                    env.c(i, s) / bar * (u[fwd] - u[s]) + env.c(i, bwd) / bar * (u[bwd] - u[s])
                })
                .sum()
        })
        .collect()
}

/// `max_n |E[Y_{k+1} - Y_k | X_k = n]|` computed from the jump kernel and the
/// cocycle increments.
pub fn martingale_residual(env: &Environment, field: &CocycleField) -> f64 {
    let shape = env.shape();
    assert_eq!(shape, field.shape());
    (0..shape.site_count())
        .map(|s| {
            let bar = env.bar_c_at(s);
            (0..env.dim())
                .map(|i| {
                    let bwd = shape.backward(s, i);
                    env.c(i, s) / bar * field.f(i, s) - env.c(i, bwd) / bar * field.f(i, bwd)
                })
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// Reversibility defect with respect to `pi = bar_c`:
/// `max |bar_c(n) P(n -> n+e_i) - bar_c(n+e_i) P(n+e_i -> n)|`.
pub fn detailed_balance_residual(env: &Environment) -> f64 {
    let shape = env.shape();
    let mut worst: f64 = 0.0;
    for s in 0..shape.site_count() {
        let here = env.bar_c_at(s);
        for i in 0..env.dim() {
            let fwd = shape.forward(s, i);
            let there = env.bar_c_at(fwd);
            let out_flow = here * (env.c(i, s) / here);
            let back_flow = there * (env.c(i, shape.backward(fwd, i)) / there);
            worst = worst.max((out_flow - back_flow).abs());
        }
    }
    worst
}

/// Inverse-CDF choice of a move index from a uniform draw in `[0, 1)`.
pub fn sample_move(probabilities: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probabilities.len() - 1
}

/// Per-site kernel tables for repeated sampling.
struct Kernel {
    moves: usize,
    probs: Vec<f64>,
    targets: Vec<u32>,
}

impl Kernel {
    fn new(env: &Environment) -> Self {
        let shape = env.shape();
        let nb = Neighbors::new(&shape);
        let moves = 2 * env.dim();
        let n = shape.site_count();
        let mut probs = Vec::with_capacity(n * moves);
        let mut targets = Vec::with_capacity(n * moves);
        for s in 0..n {
            let bar = env.bar_c_at(s);
            for i in 0..env.dim() {
                let bwd = nb.backward(s, i);
                probs.push(env.c(i, s) / bar);
                probs.push(env.c(i, bwd) / bar);
                targets.push(nb.forward(s, i) as u32);
                targets.push(bwd as u32);
            }
        }
        Self { moves, probs, targets }
    }

    #[inline]
    fn draw(&self, site: usize, rng: &mut ChaCha8Rng) -> usize {
        let u = unit_interval(rng.next_u64());
        sample_move(&self.probs[site * self.moves..(site + 1) * self.moves], u)
    }
}

fn walk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkTrajectory {
    pub start: Vec<i64>,
    pub steps: Vec<Step>,
    pub seed: u64,
    pub stream: u64,
}

impl WalkTrajectory {
    /// Unwrapped positions `X_0, ..., X_k`.
    pub fn positions(&self) -> Vec<Vec<i64>> {
        let mut current = self.start.clone();
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(current.clone());
        for step in &self.steps {
            current[step.dir] += if step.forward { 1 } else { -1 };
            out.push(current.clone());
        }
        out
    }

    pub fn end(&self) -> Vec<i64> {
        let mut end = self.start.clone();
        for step in &self.steps {
            end[step.dir] += if step.forward { 1 } else { -1 };
        }
        end
    }
}

/// Trajectory of `steps` jumps on stream 0 of `seed`.
pub fn simulate(env: &Environment, start: &[i64], steps: usize, seed: u64) -> WalkTrajectory {
    simulate_stream(env, start, steps, seed, 0)
}

pub fn simulate_stream(env: &Environment, start: &[i64], steps: usize, seed: u64, stream: u64) -> WalkTrajectory {
    let kernel = Kernel::new(env);
    let mut rng = walk_rng(seed, stream);
    let mut site = env.shape().index(start);
    let moves = (0..steps)
        .map(|_| {
            let m = kernel.draw(site, &mut rng);
            site = kernel.targets[site * kernel.moves + m] as usize;
            move_step(m)
        })
        .collect();
    WalkTrajectory { start: start.to_vec(), steps: moves, seed, stream }
}

/// Endpoint of one walk of an ensemble together with `Y_k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WalkEnd {
    pub index: u64,
    pub y: f64,
    pub position: Vec<i64>,
}

/// Walks from the origin, one ChaCha8 stream per walk index.
pub fn simulate_ensemble(env: &Environment, field: &CocycleField, steps: usize, n_walks: u64, seed: u64) -> Vec<WalkEnd> {
    assert_eq!(env.shape(), field.shape());
    let kernel = Kernel::new(env);
    let shape = env.shape();
    let d = env.dim();
    // increment of Y for each (site, move)
    let increments: Vec<f64> = (0..shape.site_count())
        .flat_map(|s| (0..2 * d).map(move |m| (s, m)))
        .map(|(s, m)| field.step_increment(s, move_step(m)))
        .collect();
    (0..n_walks)
        .into_par_iter()
        .map(|index| {
            let mut rng = walk_rng(seed, index);
            let mut site = 0usize;
            let mut position = vec![0i64; d];
            let mut y = 0.0;
            for _ in 0..steps {
                let m = kernel.draw(site, &mut rng);
                let slot = site * kernel.moves + m;
                y += increments[slot];
                position[m / 2] += if m.is_multiple_of(2) { 1 } else { -1 };
                site = kernel.targets[slot] as usize;
            }
            WalkEnd { index, y, position }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WalkEnsembleStats {
    pub k: usize,
    pub n_walks: u64,
    #[serde(rename = "mean_Y")]
    pub mean_y: f64,
    #[serde(rename = "var_Y")]
    pub var_y: f64,
    pub var_over_k: f64,
    /// `|m4 / m2^2 - 3|` of the centred `Y_k`; NaN for a degenerate ensemble.
    pub normality_stat: f64,
    /// `max_w |Y_k - X_k^(1)| / max(1, |X_k|)`.
    pub max_sublinear_gap: f64,
    pub seed: u64,
}

impl WalkEnsembleStats {
    pub fn from_ends(k: usize, seed: u64, ends: &[WalkEnd]) -> Self {
        assert!(!ends.is_empty());
        let n = ends.len() as f64;
        let mean = ends.iter().map(|e| e.y).sum::<f64>() / n;
        let m2 = ends.iter().map(|e| (e.y - mean).powi(2)).sum::<f64>() / n;
        let m4 = ends.iter().map(|e| (e.y - mean).powi(4)).sum::<f64>() / n;
        let normality_stat = if m2 > 0.0 { (m4 / (m2 * m2) - 3.0).abs() } else { f64::NAN };
        let max_sublinear_gap = ends
            .iter()
            .map(|e| (e.y - e.position[0] as f64).abs() / (taxicab(&e.position).max(1) as f64))
            .fold(0.0, f64::max);
        Self {
            k,
            n_walks: ends.len() as u64,
            mean_y: mean,
            var_y: m2,
            var_over_k: if k == 0 { 0.0 } else { m2 / k as f64 },
            normality_stat,
            max_sublinear_gap,
            seed,
        }
    }

    /// `|mean_Y| <= 3 sqrt(var_Y / n_walks)`.
    pub fn mean_within_three_sigma(&self) -> bool {
        self.mean_y.abs() <= 3.0 * (self.var_y / self.n_walks as f64).sqrt()
    }
}

/// Ensemble statistics of `Y_k` for walks started at the origin.
pub fn clt_ensemble(env: &Environment, field: &CocycleField, k: usize, n_walks: u64, seed: u64) -> WalkEnsembleStats {
    assert!(n_walks >= 1);
    WalkEnsembleStats::from_ends(k, seed, &simulate_ensemble(env, field, k, n_walks, seed))
}

/// Per-walk CSV: `walk,Y_k,x1,...,xd`.
pub fn ends_to_csv(ends: &[WalkEnd]) -> String {
    let d = ends.first().map_or(0, |e| e.position.len());
    let mut out = String::from("walk,Y_k");
    for i in 1..=d {
        write!(out, ",x{i}").unwrap();
    }
    out.push('\n');
    for e in ends {
        write!(out, "{},{:e}", e.index, e.y).unwrap();
        for c in &e.position {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::GeneratorModel;
    use crate::lattice::TorusShape;
    use crate::solver::{apply_operator, harmonicity_residual, kunnemann_cocycle, SolverOptions};

    fn shape(d: usize, l: usize) -> TorusShape {
        TorusShape::new(d, l).unwrap()
    }

    fn uniform(d: usize, l: usize, seed: u64) -> Environment {
        Environment::generate(shape(d, l), GeneratorModel::IidUniform, (1.0, 2.0), seed).unwrap()
    }

    #[test]
    fn symmetric_walk_probabilities() {
        let env = Environment::generate(shape(2, 4), GeneratorModel::Constant(1.0), (0.5, 2.0), 0).unwrap();
        assert_eq!(transition_probabilities(&env, &[1, 3]), vec![0.25; 4]);
        let hand = Environment::from_fields(shape(1, 2), vec![vec![3.0, 5.0]], (1.0, 6.0)).unwrap();
        assert_eq!(transition_probabilities(&hand, &[0]), vec![3.0 / 8.0, 5.0 / 8.0]);
    }

    #[test]
    fn kernel_sums_to_one() {
        let env = uniform(2, 32, 1);
        for s in 0..env.shape().site_count() {
            let p = transition_probabilities(&env, &env.shape().coords(s).iter().map(|&c| c as i64).collect::<Vec<_>>());
            assert!(p.iter().all(|&v| v > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn generator_forms_agree() {
        let env = uniform(2, 9, 3);
        let u: Vec<f64> = (0..81).map(|k| (k as f64 * 0.91).sin() * 3.0).collect();
        let expectation = apply_generator(&env, &u);
        let divergence = apply_operator(&env, &u, true);
        for (a, b) in expectation.iter().zip(&divergence) {
            assert!((a - b).abs() <= 1e-13);
        }
        let flat = Environment::generate(shape(1, 4), GeneratorModel::Constant(1.0), (0.5, 2.0), 0).unwrap();
        assert_eq!(apply_generator(&flat, &[0.0, 1.0, 0.0, 0.0]), vec![0.5, -1.0, 0.5, 0.0]);
        assert_eq!(apply_generator(&env, &[1.25; 81]), vec![0.0; 81]);
    }

    #[test]
    fn detailed_balance_holds() {
        let hand = Environment::from_fields(shape(1, 2), vec![vec![3.0, 5.0]], (1.0, 6.0)).unwrap();
        // flow 0 -> 1 across edge [0, 1]: bar_c(0) * 3/8 = 3, and back: bar_c(1) * c(0)/bar_c(1) = 3
        assert_eq!(8.0 * transition_probabilities(&hand, &[0])[0], 3.0);
        assert_eq!(8.0 * transition_probabilities(&hand, &[1])[1], 3.0);
        assert!(detailed_balance_residual(&uniform(3, 6, 2)) <= 1e-12);
        let flat = Environment::generate(shape(2, 4), GeneratorModel::Constant(1.5), (1.0, 2.0), 0).unwrap();
        assert_eq!(detailed_balance_residual(&flat), 0.0);
    }

    #[test]
    fn martingale_residual_of_corrector() {
        let env = uniform(2, 16, 5);
        let f = kunnemann_cocycle(&env, &[1.0, 0.0], &SolverOptions::default()).unwrap();
        assert!(martingale_residual(&env, &f) <= 1e-8);
        let naive = CocycleField::constant(env.shape(), &[1.0, 0.0]);
        let residual = martingale_residual(&env, &naive);
        assert!(residual > 0.0);
        let min_bar = env.bar_c_field().into_iter().fold(f64::INFINITY, f64::min);
        assert!(residual <= harmonicity_residual(&env, &naive) / min_bar + 1e-15);
    }

    #[test]
    fn trajectory_is_deterministic_and_connected() {
        let env = uniform(2, 8, 7);
        let a = simulate(&env, &[2, -3], 500, 11);
        let b = simulate(&env, &[2, -3], 500, 11);
        assert_eq!(a, b);
        assert_ne!(a, simulate(&env, &[2, -3], 500, 12));
        let pos = a.positions();
        assert_eq!(pos.len(), 501);
        assert_eq!(pos[0], vec![2, -3]);
        for w in pos.windows(2) {
            assert_eq!(taxicab(&[w[1][0] - w[0][0], w[1][1] - w[0][1]]), 1);
        }
        assert_eq!(simulate(&env, &[0, 0], 0, 1).positions(), vec![vec![0, 0]]);
    }

    #[test]
    fn move_frequencies_of_simple_walk() {
        let env = Environment::generate(shape(2, 8), GeneratorModel::Constant(1.0), (0.5, 2.0), 0).unwrap();
        let traj = simulate(&env, &[0, 0], 100_000, 2024);
        let mut counts = [0usize; 4];
        for s in &traj.steps {
            counts[2 * s.dir + usize::from(!s.forward)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() <= 0.01, "{counts:?}");
        }
    }

    #[test]
    fn ensemble_matches_single_walks() {
        let env = uniform(2, 8, 9);
        let f = kunnemann_cocycle(&env, &[1.0, 0.0], &SolverOptions::default()).unwrap();
        let ends = simulate_ensemble(&env, &f, 40, 5, 77);
        for e in &ends {
            let traj = simulate_stream(&env, &[0, 0], 40, 77, e.index);
            assert_eq!(traj.end(), e.position);
            let y = f.evaluate(&e.position);
            assert!((y - e.y).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_environment_reduction() {
        let env = Environment::generate(shape(2, 16), GeneratorModel::Constant(2.0), (1.0, 3.0), 0).unwrap();
        let f = kunnemann_cocycle(&env, &[1.0, 0.0], &SolverOptions::default()).unwrap();
        let ends = simulate_ensemble(&env, &f, 200, 300, 5);
        assert!(ends.iter().all(|e| e.y == e.position[0] as f64));
        let stats = WalkEnsembleStats::from_ends(0, 5, &simulate_ensemble(&env, &f, 0, 10, 5));
        assert_eq!((stats.mean_y, stats.var_y, stats.var_over_k), (0.0, 0.0, 0.0));
    }

    #[test]
    fn conditional_increment_is_centred() {
        let env = uniform(2, 8, 13);
        let f = kunnemann_cocycle(&env, &[1.0, 0.0], &SolverOptions::default()).unwrap();
        for site in [[0i64, 0], [3, 5], [7, 1]] {
            let s = env.shape().index(&site);
            let probs = transition_probabilities(&env, &site);
            let mut rng = walk_rng(99, s as u64);
            let samples = 20_000;
            let incs: Vec<f64> = (0..samples)
                .map(|_| f.step_increment(s, move_step(sample_move(&probs, unit_interval(rng.next_u64())))))
                .collect();
            let mean = incs.iter().sum::<f64>() / samples as f64;
            let var = incs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples as f64;
            assert!(mean.abs() <= 4.0 * (var / samples as f64).sqrt(), "site {site:?}: {mean}");
        }
    }
}
