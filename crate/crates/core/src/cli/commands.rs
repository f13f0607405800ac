use super::config::{ConfigError, ExperimentConfig};
use super::{Check, Outcome, RunError};
use crate::cocycle::CocycleField;
use crate::environment::Environment;
use crate::ergodic::{
    directional_average, holder_exponent, nearest_multiple, oscillation_constant_stat, poincare_check,
    sublinearity_profile, ErgodicError, HARMONIC_TOLERANCE,
};
use crate::lattice::{taxicab, TorusShape};
use crate::solver::{
    arithmetic_mean, dense_oracle_solve, effective_tensor, harmonic_mean, harmonicity_residual, solve_correctors,
    solve_correctors_from, CorrectorSolution, EffectiveRecord, EffectiveTensor,
};
use crate::walk::{detailed_balance_residual, ends_to_csv, martingale_residual, simulate_ensemble, WalkEnsembleStats};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::path::PathBuf;

/// Gathers artifacts written into the output directory.
pub(super) struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: PathBuf,
    pub artifacts: Vec<String>,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.out.join(name);
        std::fs::write(&path, bytes).map_err(|source| RunError::Io { path, source })?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable payload");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn env(&self, seed: u64) -> Result<Environment, RunError> {
        let c = self.cfg;
        Environment::generate(c.shape(), c.model, c.bounds, seed).map_err(|e| ConfigError::Guard(e.to_string()).into())
    }

    fn solve(&self, env: &Environment) -> Result<CorrectorSolution, RunError> {
        Ok(solve_correctors(env, &self.cfg.solver_options())?)
    }

    /// Residual thresholds scale with the size of the target mean.
    fn y_scale(&self) -> f64 {
        self.cfg.y.iter().fold(1.0f64, |m, v| m.max(v.abs()))
    }
}

fn guard_error(e: ErgodicError) -> RunError {
    RunError::Config(ConfigError::Guard(e.to_string()))
}

/// Field with independent uniform values in `[-1, 1)`, one ChaCha8 stream per index.
pub fn random_field(shape: &TorusShape, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..shape.site_count())
        .map(|_| 2.0 * crate::environment::unit_interval(rng.next_u64()) - 1.0)
        .collect()
}

pub(super) fn gen_env(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    let (a, b) = ctx.cfg.bounds;
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let file = format!("env_{seed}.rcm");
        ctx.write(&file, &env.to_bytes())?;
        let mut fields = Vec::new();
        let mut violations = 0usize;
        for i in 0..env.dim() {
            let f = env.field(i);
            violations += f.iter().filter(|&&c| !(c > a && c < b)).count();
            fields.push(json!({
                "min": f.iter().copied().fold(f64::INFINITY, f64::min),
                "max": f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                "arithmetic_mean": arithmetic_mean(&env, i),
                "harmonic_mean": harmonic_mean(&env, i),
            }));
        }
        checks.push(Check::at_most(format!("ellipticity violations seed {seed}"), violations as f64, 0.0));
        results.push(json!({ "seed": seed, "file": file, "directions": fields }));
    }
    Ok(Outcome { results: Value::Array(results), checks })
}

pub(super) fn solve(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let sol = ctx.solve(&env)?;
        let field = sol.cocycle(&ctx.cfg.y);
        let cor = format!("corrector_{seed}.cor");
        let ccf = format!("cocycle_{seed}.ccf");
        ctx.write(&cor, &sol.to_bytes(&env))?;
        ctx.write(&ccf, &field.to_bytes(Some(&env)))?;
        let worst = sol.residual_l2.iter().copied().fold(0.0, f64::max);
        checks.push(Check::at_most(format!("relative residual seed {seed}"), worst, ctx.cfg.tol));
        results.push(json!({
            "seed": seed,
            "corrector": cor,
            "cocycle": ccf,
            "residual_l2": sol.residual_l2,
            "iterations": sol.iterations,
        }));
    }
    Ok(Outcome { results: Value::Array(results), checks })
}

pub(super) fn verify(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    ctx.cfg.validate_poincare()?;
    let scale = ctx.y_scale();
    let shape = ctx.cfg.shape();
    let y = ctx.cfg.y.clone();
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let field = ctx.solve(&env)?.cocycle(&y);
        let closedness = field.closedness_residual();
        let harmonicity = harmonicity_residual(&env, &field);
        let martingale = martingale_residual(&env, &field);
        let balance = detailed_balance_residual(&env);
        let mean_gap = field.mean_vector().iter().zip(&y).map(|(m, t)| (m - t).abs()).fold(0.0, f64::max);
        let period_gap = period_identity_gap(&field, &y);
        let (mut cases, mut violations) = (0usize, 0usize);
        for index in 0..ctx.cfg.poincare_fields as u64 {
            let u = random_field(&shape, seed, index);
            for &r in &ctx.cfg.poincare_radii {
                cases += 1;
                if !poincare_check(&shape, &u, r).map_err(guard_error)?.holds {
                    violations += 1;
                }
            }
        }
        checks.extend([
            Check::at_most(format!("closedness seed {seed}"), closedness, 1e-10 * scale),
            Check::at_most(format!("harmonicity seed {seed}"), harmonicity, ctx.cfg.check_tol * scale),
            Check::at_most(format!("martingale seed {seed}"), martingale, ctx.cfg.check_tol * scale),
            Check::at_most(format!("detailed balance seed {seed}"), balance, 1e-12),
            Check::at_most(format!("mean recovery seed {seed}"), mean_gap, 1e-12 * scale),
            Check::at_most(format!("torus period seed {seed}"), period_gap, 1e-9 * scale * shape.side() as f64),
            Check::at_most(format!("poincare violations seed {seed}"), violations as f64, 0.0),
        ]);
        results.push(json!({
            "seed": seed,
            "closedness": closedness,
            "harmonicity": harmonicity,
            "martingale": martingale,
            "detailed_balance": balance,
            "mean_gap": mean_gap,
            "torus_period_gap": period_gap,
            "poincare_cases": cases,
            "poincare_violations": violations,
        }));
    }
    Ok(Outcome { results: Value::Array(results), checks })
}

/// `max_i |S_{L e_i} - L y_i|`.
fn period_identity_gap(field: &CocycleField, y: &[f64]) -> f64 {
    let side = field.shape().side() as i64;
    (0..field.dim())
        .map(|i| {
            let mut n = vec![0i64; field.dim()];
            n[i] = side;
            (field.evaluate(&n) - side as f64 * y[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Basis vectors and the all-ones diagonal.
fn test_directions(d: usize) -> Vec<Vec<i64>> {
    let mut dirs: Vec<Vec<i64>> = (0..d).map(|i| (0..d).map(|j| i64::from(i == j)).collect()).collect();
    if d > 1 {
        dirs.push(vec![1; d]);
    }
    dirs
}

pub(super) fn sublinearity(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    ctx.cfg.validate_sublinearity()?;
    let y = ctx.cfg.y.clone();
    let side = ctx.cfg.side as u64;
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let field = ctx.solve(&env)?.cocycle(&y);
        let profile = sublinearity_profile(&field, &y, &ctx.cfg.radii).map_err(guard_error)?;
        let file = format!("sublinearity_{seed}.csv");
        ctx.write(&file, profile.to_csv().as_bytes())?;
        let max_dev = (0..field.dim())
            .flat_map(|i| {
                let yi = y[i];
                field.increments(i).iter().map(move |f| (f - yi).abs())
            })
            .fold(0.0, f64::max);
        let mut averages = Vec::new();
        for n in test_directions(field.dim()) {
            let avg = directional_average(&field, &n, side).map_err(guard_error)?;
            let gap = (avg.value - avg.limit).abs();
            checks.push(Check::at_most(format!("full-period average {n:?} seed {seed}"), gap, 1e-9));
            averages.push(json!({ "n": n, "k": side, "value": avg.value, "limit": avg.limit, "gap": gap }));
        }
        let last = *profile.values.last().unwrap();
        results.push(json!({
            "seed": seed,
            "file": file,
            "radii": profile.radii,
            "M": profile.values,
            "shell_only": profile.shell_only,
            "max_increment_deviation": max_dev,
            "last_over_max_deviation": if max_dev > 0.0 { last / max_dev } else { 0.0 },
            "directional_averages": averages,
        }));
    }
    Ok(Outcome { results: Value::Array(results), checks })
}

pub(super) fn holder(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    ctx.cfg.validate_holder()?;
    let radius = ctx.cfg.holder_radius;
    let y = ctx.cfg.y.clone();
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let field = ctx.solve(&env)?.cocycle(&y);
        let potential = field.potential_box(2 * radius + 1);
        let oscillation_stat = oscillation_constant_stat(&field, radius).ok();
        match holder_exponent(&env, &potential, radius) {
            Ok(est) => {
                let file = format!("holder_{seed}.csv");
                ctx.write(&file, est.to_csv().as_bytes())?;
                checks.push(Check::at_most(format!("fit available seed {seed}"), 0.0, 0.0));
                results.push(json!({
                    "seed": seed,
                    "file": file,
                    "estimate": est,
                    "oscillation_constant_stat": oscillation_stat,
                }));
            }
            Err(e @ (ErgodicError::NotHarmonic(_) | ErgodicError::ConstantField | ErgodicError::DegenerateOscillation(_))) => {
                checks.push(Check::at_most(format!("fit available seed {seed}"), 1.0, 0.0));
                results.push(json!({ "seed": seed, "error": e.to_string(), "harmonic_tolerance": HARMONIC_TOLERANCE }));
            }
            Err(e) => return Err(guard_error(e)),
        }
    }
    Ok(Outcome { results: Value::Array(results), checks })
}

/// Exhaustive scan of [`nearest_multiple`] over `[-extent, extent]^d x {1..max_n}`.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct Lemma2Scan {
    pub dimension: usize,
    pub extent: i64,
    pub max_n: u64,
    pub cases: u64,
    pub violations: u64,
    pub k_zero_cases: u64,
    pub worst_excess: f64,
}

pub fn lemma2_scan(dimension: usize, extent: i64, max_n: u64) -> Lemma2Scan {
    let mut scan = Lemma2Scan { dimension, extent, max_n, worst_excess: f64::NEG_INFINITY, ..Default::default() };
    let width = (2 * extent + 1) as u64;
    let total = width.pow(dimension as u32);
    let mut m = vec![0i64; dimension];
    for code in 0..total {
        let mut c = code;
        for v in m.iter_mut() {
            *v = (c % width) as i64 - extent;
            c /= width;
        }
        let norm = taxicab(&m);
        for n in 1..=max_n {
            scan.cases += 1;
            let l = nearest_multiple(&m, n).expect("n >= 1");
            let k = norm as u64 / n;
            if k == 0 {
                scan.k_zero_cases += 1;
            }
            let diff: Vec<i64> = l.iter().zip(&m).map(|(a, b)| a - b).collect();
            // |l - m| <= n + |m| d / n, compared after multiplying by n
            let lhs = taxicab(&diff) as i128 * n as i128;
            let rhs = (n * n) as i128 + norm as i128 * dimension as i128;
            let on_lattice = k == 0 && l.iter().all(|&v| v == 0)
                || k > 0 && l.iter().all(|&v| v % k as i64 == 0) && taxicab(&l) as u64 == k * n;
            scan.worst_excess = scan.worst_excess.max((lhs - rhs) as f64 / n as f64);
            if taxicab(&l) > norm || lhs > rhs || !on_lattice {
                scan.violations += 1;
            }
        }
    }
    scan
}

pub(super) fn lemma2(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    ctx.cfg.validate_lemma2()?;
    let scan = lemma2_scan(ctx.cfg.dimension, ctx.cfg.lemma2_extent, ctx.cfg.lemma2_max_n);
    ctx.write_json("lemma2.json", &scan)?;
    let checks = vec![
        Check::at_most("lemma2 violations", scan.violations as f64, 0.0),
        Check::at_least("k=0 branch cases", scan.k_zero_cases as f64, 1.0),
    ];
    Ok(Outcome { results: serde_json::to_value(&scan).unwrap(), checks })
}

pub(super) fn walk_clt(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    ctx.cfg.validate_walk()?;
    let d = ctx.cfg.dimension;
    let e1: Vec<f64> = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    if ctx.cfg.y != e1 {
        return Err(ConfigError::Guard("walk-clt needs y = e1".to_string()).into());
    }
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let field = ctx.solve(&env)?.cocycle(&e1);
        let residual = martingale_residual(&env, &field);
        checks.push(Check::at_most(format!("martingale seed {seed}"), residual, ctx.cfg.check_tol));
        let ends = simulate_ensemble(&env, &field, ctx.cfg.walk_steps, ctx.cfg.walk_count, seed);
        let stats = WalkEnsembleStats::from_ends(ctx.cfg.walk_steps, seed, &ends);
        ctx.write_json(&format!("walk_clt_{seed}.json"), &stats)?;
        if ctx.cfg.walk_csv {
            ctx.write(&format!("walks_{seed}.csv"), ends_to_csv(&ends).as_bytes())?;
        }
        results.push(json!({
            "seed": seed,
            "martingale_residual": residual,
            "stats": stats,
            "mean_within_three_sigma": stats.mean_within_three_sigma(),
        }));
    }
    Ok(Outcome { results: Value::Array(results), checks })
}

pub(super) fn sigma_eff(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    let (a, b) = ctx.cfg.bounds;
    let mut tensors: Vec<EffectiveTensor> = Vec::new();
    let mut residuals = Vec::new();
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let sol = ctx.solve(&env)?;
        let t = effective_tensor(&env, &sol)?;
        let vr = (0..env.dim())
            .map(|j| (harmonic_mean(&env, j) - t.get(j, j)).max(t.get(j, j) - arithmetic_mean(&env, j)))
            .fold(f64::NEG_INFINITY, f64::max);
        let ev = t.eigenvalues();
        let spectrum = (a - ev[0]).max(ev[ev.len() - 1] - b);
        checks.extend([
            Check::at_most(format!("symmetry seed {seed}"), t.symmetry_gap(), 1e-12),
            Check::at_most(format!("Voigt-Reuss excess seed {seed}"), vr, 1e-10),
            Check::at_most(format!("spectrum outside [a, b] seed {seed}"), spectrum, 0.0),
        ]);
        results.push(json!({ "seed": seed, "A_hom": t.matrix, "eigenvalues": ev }));
        residuals.push(sol.residual_l2.clone());
        tensors.push(t);
    }
    let mean = EffectiveTensor::average(&tensors).expect("at least one seed");
    let record = EffectiveRecord {
        d: ctx.cfg.dimension,
        side: ctx.cfg.side,
        a,
        b,
        model: ctx.cfg.model.to_string(),
        seeds: mean.seeds.clone(),
        a_hom: mean.matrix.clone(),
        residuals,
    };
    ctx.write_json("effective_tensor.json", &record)?;
    Ok(Outcome { results: json!({ "per_seed": results, "mean_A_hom": mean.matrix }), checks })
}

pub(super) fn oracle_check(ctx: &mut Ctx) -> Result<Outcome, RunError> {
    ctx.cfg.validate_dense()?;
    let shape = ctx.cfg.shape();
    let mut results = Vec::new();
    let mut checks = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let env = ctx.env(seed)?;
        let cg = ctx.solve(&env)?;
        let dense = dense_oracle_solve(&env)?;
        let start: Vec<Vec<f64>> = (0..shape.dim()).map(|j| random_field(&shape, seed, 1000 + j as u64)).collect();
        let other = solve_correctors_from(&env, &ctx.cfg.solver_options(), &start)?;
        let gap = cg.max_gap(&dense);
        let uniqueness = cg.max_gap(&other);
        checks.extend([
            Check::at_most(format!("CG vs dense seed {seed}"), gap, 1e-9),
            Check::at_most(format!("uniqueness seed {seed}"), uniqueness, 1e-8),
        ]);
        results.push(json!({
            "seed": seed,
            "cg_dense_gap": gap,
            "uniqueness_gap": uniqueness,
            "cg_iterations": cg.iterations,
            "dense_residual_l2": dense.residual_l2,
        }));
    }
    Ok(Outcome { results: Value::Array(results), checks })
}
