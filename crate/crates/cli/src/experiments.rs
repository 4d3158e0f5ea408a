//! Named experiment recipes. Every experiment draws its own sub-seed from
//! the config seed and its name, so experiments are order-independent and
//! never share state.

use std::sync::Arc;

use anyhow::{anyhow, bail, Result};

use levy_bsde::bsde::{
    solve_bsde, solve_bsde_by_picard, stability_gap, BsdeSolution, SchemeParams,
    TerminalFunctional,
};
use levy_bsde::chaos::{integrate_m1, integrate_m2, m_integral, Kernel1, Kernel2, MarkRect, MeasureSpec};
use levy_bsde::generator::{truncate_g_alpha, GFunction, Generator};
use levy_bsde::levy::{
    cameron_martin_shift, coarsen_batch, girsanov_density, sample_paths, shift_batch,
    CameronMartinDirection, LevyModel, Path, PathBatch,
};
use levy_bsde::malliavin::{
    brownian_fd_derivative, build_derivative_problem, chain_rule_brownian, jump_derivative,
    representation_residual, sample_base_points, solve_derivative_bsde, FunctionalWithDw,
    MalliavinField, ParametricFunctional,
};
use levy_bsde::oracles::{
    closed_form_linear, gronwall_check, tree_backward, tree_from_model, XiKind,
};
use levy_bsde::regression::BasisSpec;
use levy_bsde::stats;

use crate::config::{self, Config, ExperimentCfg};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowKind {
    Data,
    Check,
}

/// One CSV row; check rows carry a verdict and appear in the summary.
#[derive(Debug, Clone)]
pub struct Row {
    pub kind: RowKind,
    pub label: String,
    pub value: f64,
    pub target: Option<f64>,
    pub tolerance: Option<f64>,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub pass: Option<bool>,
}

impl Row {
    pub fn data(label: impl Into<String>, value: f64) -> Self {
        Row {
            kind: RowKind::Data,
            label: label.into(),
            value,
            target: None,
            tolerance: None,
            se: None,
            z: None,
            pass: None,
        }
    }

    /// Statistical check: passes iff `z <= tolerance` (standard errors).
    pub fn z_check(label: impl Into<String>, value: f64, target: f64, se: f64, tol_se: f64) -> Self {
        let z = stats::z_score(value, target, se);
        Row {
            kind: RowKind::Check,
            label: label.into(),
            value,
            target: Some(target),
            tolerance: Some(tol_se),
            se: Some(se),
            z: Some(z),
            pass: Some(z <= tol_se),
        }
    }

    /// Deterministic check: passes iff `|value - target| <= tolerance`.
    pub fn abs_check(label: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Row {
            kind: RowKind::Check,
            label: label.into(),
            value,
            target: Some(target),
            tolerance: Some(tolerance),
            se: None,
            z: None,
            pass: Some((value - target).abs() <= tolerance),
        }
    }

    /// Bound check: passes iff `value <= tolerance`.
    pub fn upper_check(label: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Row {
            kind: RowKind::Check,
            label: label.into(),
            value,
            target: None,
            tolerance: Some(tolerance),
            se: None,
            z: None,
            pass: Some(value <= tolerance),
        }
    }

    /// Interval check: passes iff `low <= value <= high` (tolerance = high).
    pub fn range_check(label: impl Into<String>, value: f64, low: f64, high: f64) -> Self {
        Row {
            kind: RowKind::Check,
            label: label.into(),
            value,
            target: Some(low),
            tolerance: Some(high),
            se: None,
            z: None,
            pass: Some(value >= low && value <= high),
        }
    }
}

pub struct ExperimentOutput {
    pub name: String,
    pub kind: String,
    pub rows: Vec<Row>,
    /// Full CSV body for layouts other than the uniform row table.
    pub special_csv: Option<String>,
}

impl ExperimentOutput {
    pub fn checks(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.kind == RowKind::Check)
    }

    pub fn all_passed(&self) -> bool {
        self.checks().all(|r| r.pass == Some(true))
    }

    pub fn csv_body(&self) -> String {
        if let Some(special) = &self.special_csv {
            return special.clone();
        }
        let mut out = String::from("row,label,value,target,tolerance,se,z,verdict\n");
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for row in &self.rows {
            let kind = match row.kind {
                RowKind::Data => "data",
                RowKind::Check => "check",
            };
            let verdict = match row.pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "",
            };
            out.push_str(&format!(
                "{kind},{},{},{},{},{},{},{verdict}\n",
                row.label,
                row.value,
                fmt(row.target),
                fmt(row.tolerance),
                fmt(row.se),
                fmt(row.z),
            ));
        }
        out
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

pub struct RunCtx {
    pub model: LevyModel,
    pub scheme: SchemeParams,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

impl RunCtx {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(RunCtx {
            model: cfg.model()?,
            scheme: cfg.scheme(),
            steps: cfg.scheme.steps,
            paths: cfg.scheme.paths,
            seed: cfg.scheme.seed,
        })
    }

    fn sub_seed(&self, name: &str) -> u64 {
        self.seed ^ fnv1a(name)
    }

    fn batch(&self, name: &str, steps: usize, paths: usize) -> Result<PathBatch> {
        Ok(sample_paths(&self.model, steps, paths, self.sub_seed(name))?)
    }
}

/// The nonlinear Lipschitz driver `f = sin(y) + z/2 + w/2` shared by the
/// triangle, Picard and stability recipes.
fn sin_generator() -> Generator {
    Generator::new(
        |_, y: f64, z: f64, w: f64| y.sin() + 0.5 * z + 0.5 * w,
        1.5f64.sqrt(),
        GFunction::Identity,
    )
    .with_partials(|_, y: f64, _, _| (y.cos(), 0.5, 0.5))
}

pub fn run_experiment(exp: &ExperimentCfg, ctx: &RunCtx) -> Result<ExperimentOutput> {
    let rows_output = |rows: Vec<Row>| ExperimentOutput {
        name: exp.name.clone(),
        kind: exp.kind.clone(),
        rows,
        special_csv: None,
    };
    match exp.kind.as_str() {
        "export_paths" => {
            let p: config::ExportPathsParams = exp.params_as()?;
            let batch = ctx.batch(&exp.name, p.steps, p.paths)?;
            let mut buf = Vec::new();
            batch.write_csv(&mut buf)?;
            Ok(ExperimentOutput {
                name: exp.name.clone(),
                kind: exp.kind.clone(),
                rows: Vec::new(),
                special_csv: Some(String::from_utf8(buf).expect("csv is utf8")),
            })
        }
        "export_solution" => {
            let p: config::ExportSolutionParams = exp.params_as()?;
            let batch = ctx.batch(&exp.name, p.steps, p.paths)?;
            let sol = solve_bsde(
                &TerminalFunctional::terminal_value(),
                &Generator::linear(p.alpha),
                &batch,
                &ctx.scheme,
            )?;
            let mut buf = Vec::new();
            sol.write_csv(&batch, &mut buf)?;
            Ok(ExperimentOutput {
                name: exp.name.clone(),
                kind: exp.kind.clone(),
                rows: Vec::new(),
                special_csv: Some(String::from_utf8(buf).expect("csv is utf8")),
            })
        }
        "jump_exactness" => {
            let p: config::JumpExactnessParams = exp.params_as()?;
            let batch = ctx.batch(&exp.name, p.steps, p.paths)?;
            let xi = TerminalFunctional::exp_terminal();
            let horizon = ctx.model.horizon;
            let rs: Vec<f64> = (1..=5).map(|k| horizon * k as f64 / 6.0).collect();
            let vs = [1.0, -1.0, 0.5, -0.5];
            let mut worst: f64 = 0.0;
            for path in &batch.paths {
                for &r in &rs {
                    for &v in &vs {
                        let got = jump_derivative(&xi, path, &batch.grid, r, v)?;
                        let expected = path.terminal().exp() * (v.exp() - 1.0);
                        worst = worst.max((got - expected).abs() / expected.abs());
                    }
                }
            }
            let rows = vec![Row::upper_check("max_rel_error", worst, p.tolerance_rel)];
            Ok(rows_output(rows))
        }
        "isometry" => {
            let p: config::IsometryParams = exp.params_as()?;
            let batch = ctx.batch(&exp.name, p.steps, p.paths)?;
            let spec = MeasureSpec::from_model(&ctx.model);
            let marks: Vec<f64> = batch.marks();
            let n = batch.grid.n_steps();
            let kernels: Vec<Kernel1> = p
                .kernels
                .iter()
                .map(|name| match name.as_str() {
                    "mark0_indicator" => {
                        Ok(Kernel1::indicator(&batch.grid, &spec, 0..n, &[0.0]))
                    }
                    "mark_linear" => Ok(Kernel1::from_fn(&batch.grid, &spec, |_, x| x)),
                    "split_window" => Ok(Kernel1::from_fn(&batch.grid, &spec, |t, x| {
                        if t < batch.grid.horizon() / 2.0 {
                            1.0 + x
                        } else {
                            0.0
                        }
                    })),
                    other => bail!("unknown isometry kernel '{other}'"),
                })
                .collect::<Result<_>>()?;
            let mut first_marks = vec![0.0];
            let mut second_marks = vec![0.0];
            for (i, m) in marks.iter().enumerate() {
                if i % 2 == 0 {
                    first_marks.push(*m);
                } else {
                    second_marks.push(*m);
                }
            }
            let k2 = Kernel2::new(
                &batch.grid,
                vec![(
                    1.0,
                    MarkRect::new(0..n / 2, first_marks),
                    MarkRect::new(n / 2..n, second_marks),
                )],
            )?;
            let mut rows = Vec::new();
            for (idx, kernel) in kernels.iter().enumerate() {
                let target = m_integral(kernel, &spec)?.quadratic;
                let sq: Vec<f64> =
                    batch.map_paths(|path| integrate_m1(kernel, path, &ctx.model).unwrap().powi(2));
                rows.push(Row::data(format!("kernel{idx}_norm_target"), target));
                rows.push(Row::z_check(
                    format!("kernel{idx}_isometry"),
                    stats::mean(&sq),
                    target,
                    stats::standard_error(&sq),
                    p.tolerance_se,
                ));
                let cross: Vec<f64> = batch.map_paths(|path| {
                    integrate_m1(kernel, path, &ctx.model).unwrap()
                        * integrate_m2(&k2, path, &ctx.model, &spec).unwrap()
                });
                rows.push(Row::z_check(
                    format!("kernel{idx}_orthogonality"),
                    stats::mean(&cross),
                    0.0,
                    stats::standard_error(&cross),
                    p.tolerance_se,
                ));
            }
            Ok(rows_output(rows))
        }
        "girsanov" => {
            let p: config::GirsanovParams = exp.params_as()?;
            let shifted = ctx.batch(&format!("{}/shifted", exp.name), p.steps, p.paths)?;
            let weighted = ctx.batch(&format!("{}/weighted", exp.name), p.steps, p.paths)?;
            let dir = CameronMartinDirection::from_fn(&shifted.grid, |t| 0.5 + 0.5 * t);
            let functionals: [(&str, Arc<dyn Fn(&Path) -> f64 + Send + Sync>); 3] = [
                ("terminal", Arc::new(|p: &Path| p.terminal())),
                ("terminal_sq", Arc::new(|p: &Path| p.terminal().powi(2))),
                ("supremum", Arc::new(|p: &Path| p.supremum())),
            ];
            let mut rows = Vec::new();
            for (name, f) in &functionals {
                let sigma = ctx.model.sigma;
                let lhs: Vec<f64> = shifted.map_paths(|path| {
                    f(&cameron_martin_shift(path, &shifted.grid, sigma, &dir, 1.0).unwrap())
                });
                let rhs: Vec<f64> = weighted.map_paths(|path| {
                    f(path) * girsanov_density(path, &weighted.grid, &dir).shift_weight()
                });
                let se = (stats::standard_error(&lhs).powi(2)
                    + stats::standard_error(&rhs).powi(2))
                .sqrt();
                rows.push(Row::data(format!("{name}_shifted_mean"), stats::mean(&lhs)));
                rows.push(Row::data(format!("{name}_weighted_mean"), stats::mean(&rhs)));
                rows.push(Row::z_check(
                    format!("{name}_match"),
                    stats::mean(&lhs),
                    stats::mean(&rhs),
                    se,
                    p.tolerance_se,
                ));
            }
            Ok(rows_output(rows))
        }
        "martingale_bsde" => {
            let p: config::MartingaleBsdeParams = exp.params_as()?;
            let batch = ctx.batch(
                &exp.name,
                p.steps.unwrap_or(ctx.steps),
                p.paths.unwrap_or(ctx.paths),
            )?;
            let xi = TerminalFunctional::terminal_value();
            let sol = solve_bsde(&xi, &Generator::zero(), &batch, &ctx.scheme)?;
            let terminal = xi.values(&batch);
            let target_y0 = ctx.model.horizon * ctx.model.mean_rate();
            let mut rows = vec![
                Row::data("y0", sol.y0(&batch)),
                Row::z_check(
                    "y0_vs_mean_rate",
                    sol.y0(&batch),
                    target_y0,
                    stats::standard_error(&terminal),
                    p.tolerance_se,
                ),
            ];
            let z_target = if ctx.scheme.z_as_m_channel { 1.0 } else { ctx.model.sigma };
            rows.push(Row::upper_check(
                "rel_l2_z",
                relative_l2(&batch, |pp, i| sol.z[pp][i], z_target),
                p.tolerance_rel,
            ));
            for (j, ch) in batch.channels.iter().enumerate() {
                rows.push(Row::upper_check(
                    format!("rel_l2_u_{}", ch.mark),
                    relative_l2(&batch, |pp, i| sol.u_at(pp, i, j), ch.mark),
                    p.tolerance_rel,
                ));
            }
            Ok(rows_output(rows))
        }
        "linear_sweep" => {
            let p: config::LinearSweepParams = exp.params_as()?;
            if p.levels < 2 {
                bail!("linear_sweep needs at least 2 levels");
            }
            let steps = p.steps.unwrap_or(ctx.steps);
            let coarsest = 1usize << (p.levels - 1);
            if !steps.is_multiple_of(coarsest) {
                bail!("steps = {steps} not divisible by 2^(levels-1) = {coarsest}");
            }
            let fine = ctx.batch(&exp.name, steps, p.paths.unwrap_or(ctx.paths))?;
            let cf = closed_form_linear(&ctx.model, p.alpha, XiKind::TerminalValue);
            let target = cf.y0();
            let xi = TerminalFunctional::terminal_value();
            let gen = Generator::linear(p.alpha);
            let factor = (p.alpha * ctx.model.horizon).exp();
            let known_mean = ctx.model.horizon * ctx.model.mean_rate();
            let mut errors = Vec::new();
            let mut rows = vec![Row::data("closed_form_y0", target)];
            for level in (0..p.levels).rev() {
                let batch = if level == 0 {
                    fine.clone()
                } else {
                    coarsen_batch(&fine, 1 << level)?
                };
                let sol = solve_bsde(&xi, &gen, &batch, &ctx.scheme)?;
                let xt: Vec<f64> = batch.map_paths(|path| path.terminal());
                let y0_cv = sol.y0(&batch) + factor * (known_mean - stats::mean(&xt));
                let dt = batch.grid.dt(0);
                rows.push(Row::data(format!("y0_dt_{dt}"), y0_cv));
                rows.push(Row::data(format!("error_dt_{dt}"), (y0_cv - target).abs()));
                errors.push((y0_cv - target).abs());
            }
            let finest_rel = errors.last().unwrap() / target.abs();
            rows.push(Row::upper_check("finest_rel_error", finest_rel, p.tolerance_rel));
            for k in 0..errors.len() - 1 {
                rows.push(Row::range_check(
                    format!("error_ratio_level{k}"),
                    errors[k] / errors[k + 1],
                    p.ratio_low,
                    p.ratio_high,
                ));
            }
            Ok(rows_output(rows))
        }
        "tree_equivalence" => {
            let p: config::TreeEquivalenceParams = exp.params_as()?;
            let tree = tree_from_model(&ctx.model, p.tree_steps)?;
            let batch = tree.enumerate_batch()?;
            let xi = TerminalFunctional::terminal_value();
            let gen = Generator::linear(p.alpha);
            let prepared = gen.prepare(&batch)?;
            let exact = tree_backward(&tree, &batch, &xi, &prepared)?;
            let scheme = SchemeParams {
                basis: BasisSpec::Indicator,
                picard_tol: 1e-14,
                max_picard_iters: 500,
                z_as_m_channel: ctx.scheme.z_as_m_channel,
            };
            let regressed = solve_bsde(&xi, &gen, &batch, &scheme)?;
            let mut rows = vec![
                Row::data("tree_y0", exact.y0(&batch)),
                Row::data("regression_y0", regressed.y0(&batch)),
                Row::abs_check(
                    "y0_match",
                    regressed.y0(&batch),
                    exact.y0(&batch),
                    p.tolerance_abs,
                ),
                Row::abs_check(
                    "z0_match",
                    regressed.z0(&batch),
                    exact.z0(&batch),
                    p.tolerance_abs,
                ),
            ];
            for j in 0..batch.channels.len() {
                rows.push(Row::abs_check(
                    format!("u0_match_{}", batch.channels[j].mark),
                    regressed.u0(&batch, j),
                    exact.u0(&batch, j),
                    p.tolerance_abs,
                ));
            }
            Ok(rows_output(rows))
        }
        "derivative_triangle" => {
            let p: config::DerivativeTriangleParams = exp.params_as()?;
            let batch = ctx.batch(
                &exp.name,
                p.steps.unwrap_or(ctx.steps),
                p.paths.unwrap_or(ctx.paths),
            )?;
            let xi = TerminalFunctional::terminal_value();
            let gen = sin_generator();
            let base = solve_bsde(&xi, &gen, &batch, &ctx.scheme)?;
            let points = sample_base_points(&batch, p.n_r, false);
            let mut rows = Vec::new();
            let mut worst: f64 = 0.0;
            for pt in &points {
                let prob =
                    build_derivative_problem(&base, &xi, &gen, &batch, pt.r_index, pt.mark)?;
                let deriv = solve_derivative_bsde(&prob, &ctx.scheme)?;
                let shifted = shift_batch(&batch, batch.grid.t(pt.r_index), pt.mark)?;
                let resolve = solve_bsde(&xi, &gen, &shifted, &ctx.scheme)?;
                let gap = triangle_gap(&deriv, &resolve, &base, &batch, pt.r_index);
                worst = worst.max(gap);
                rows.push(Row::data(
                    format!("gap_r{}_v{}", batch.grid.t(pt.r_index), pt.mark),
                    gap,
                ));
            }
            rows.push(Row::upper_check("max_triangle_gap", worst, p.tolerance_rel));
            Ok(rows_output(rows))
        }
        "chain_rule" => {
            let p: config::ChainRuleParams = exp.params_as()?;
            if ctx.model.sigma <= 0.0 {
                bail!("chain_rule needs a Brownian component");
            }
            let batch = ctx.batch(&exp.name, p.steps, p.paths)?;
            let dir = CameronMartinDirection::from_fn(&batch.grid, |t| 1.0 - 0.5 * t);
            let f = ParametricFunctional {
                eval: Arc::new(|path: &Path, y: &[f64]| path.terminal_brownian() * y[0]),
                partial_y: Some(Arc::new(|path: &Path, _| vec![path.terminal_brownian()])),
                dw_field: Some(Arc::new(|_, y: &[f64], _| y[0])),
            };
            let g = FunctionalWithDw {
                eval: Arc::new(|path: &Path| path.terminal_brownian()),
                dw: Arc::new(|_, _| 1.0),
            };
            let composite =
                TerminalFunctional::new(|path: &Path| path.terminal_brownian().powi(2));
            let us: Vec<f64> = (0..=p.halvings).map(|k| p.u0 / (1 << k) as f64).collect();
            let mut errs = vec![Vec::new(); us.len()];
            for path in &batch.paths {
                let field = chain_rule_brownian(&f, std::slice::from_ref(&g), path, &batch.grid)?;
                let pairing: f64 = field
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * dir.h()[i] * batch.grid.dt(i))
                    .sum();
                let fd = brownian_fd_derivative(
                    &composite,
                    path,
                    &batch.grid,
                    ctx.model.sigma,
                    &dir,
                    &us,
                )?;
                for (k, q) in fd.quotients.iter().enumerate() {
                    errs[k].push((q - pairing).abs());
                }
            }
            let mean_errs: Vec<f64> = errs.iter().map(|e| stats::mean(e)).collect();
            let mut rows: Vec<Row> = mean_errs
                .iter()
                .zip(&us)
                .map(|(e, u)| Row::data(format!("fd_error_u_{u}"), *e))
                .collect();
            for k in 0..mean_errs.len() - 1 {
                rows.push(Row::range_check(
                    format!("error_ratio_{k}"),
                    mean_errs[k] / mean_errs[k + 1],
                    p.ratio_low,
                    p.ratio_high,
                ));
            }
            Ok(rows_output(rows))
        }
        "representation" => {
            let p: config::RepresentationParams = exp.params_as()?;
            let gen = Generator::new(|_, _, _, _| 0.0, 0.0, GFunction::Identity)
                .with_partials(|_, _, _, _| (0.0, 0.0, 0.0));
            let (batch, scheme) = match p.mode.as_str() {
                "tree" => {
                    let steps = p.tree_steps.ok_or_else(|| {
                        anyhow!("representation mode 'tree' needs tree_steps")
                    })?;
                    let tree = tree_from_model(&ctx.model, steps)?;
                    (
                        tree.enumerate_batch()?,
                        SchemeParams {
                            basis: BasisSpec::Indicator,
                            picard_tol: 1e-14,
                            max_picard_iters: 500,
                            z_as_m_channel: ctx.scheme.z_as_m_channel,
                        },
                    )
                }
                "monte_carlo" => (
                    ctx.batch(
                        &exp.name,
                        p.steps.unwrap_or(ctx.steps),
                        p.paths.unwrap_or(ctx.paths),
                    )?,
                    ctx.scheme.clone(),
                ),
                other => bail!("unknown representation mode '{other}'"),
            };
            let xi = TerminalFunctional::terminal_value();
            let base = solve_bsde(&xi, &gen, &batch, &scheme)?;
            let points = sample_base_points(&batch, p.n_r, true);
            let mut solutions = Vec::new();
            for pt in &points {
                let prob =
                    build_derivative_problem(&base, &xi, &gen, &batch, pt.r_index, pt.mark)?;
                solutions.push(solve_derivative_bsde(&prob, &scheme)?);
            }
            let field = MalliavinField::of_solutions(points, solutions);
            let rep = representation_residual(&base, &field, &batch, &gen, &scheme)?;
            let mut buf = Vec::new();
            rep.write_csv(p.tolerance_rel, &mut buf)?;
            let mut special = String::from_utf8(buf).expect("csv is utf8");
            let mut rows = Vec::new();
            if let Some(z) = rep.residual_z {
                special.push_str(&format!(
                    ",0,Z_aggregate,{z},{},{},{}\n",
                    batch.n_paths(),
                    p.tolerance_rel,
                    z <= p.tolerance_rel
                ));
                rows.push(Row::upper_check("residual_z", z, p.tolerance_rel));
            }
            if let Some(u) = rep.residual_u {
                special.push_str(&format!(
                    ",,U_aggregate,{u},{},{},{}\n",
                    batch.n_paths(),
                    p.tolerance_rel,
                    u <= p.tolerance_rel
                ));
                rows.push(Row::upper_check("residual_u", u, p.tolerance_rel));
            }
            Ok(ExperimentOutput {
                name: exp.name.clone(),
                kind: exp.kind.clone(),
                rows,
                special_csv: Some(special),
            })
        }
        "picard_gronwall" => {
            let p: config::PicardGronwallParams = exp.params_as()?;
            let batch = ctx.batch(
                &exp.name,
                p.steps.unwrap_or(ctx.steps),
                p.paths.unwrap_or(ctx.paths),
            )?;
            let xi = TerminalFunctional::terminal_value();
            let gen = sin_generator();
            let sol = solve_bsde_by_picard(&xi, &gen, &batch, &ctx.scheme, 0.0, p.iterations)?;
            let mut gaps = vec![0.0];
            gaps.extend(&sol.picard_gaps);
            let mut c_terms = vec![0.0; gaps.len() - 1];
            c_terms[0] = gaps[1];
            let verdict = gronwall_check(&gaps, ctx.scheme.picard_tol, &c_terms)?;
            let mut rows: Vec<Row> = sol
                .picard_gaps
                .iter()
                .enumerate()
                .map(|(n, g)| Row::data(format!("gap_sq_{}", n + 1), *g))
                .collect();
            rows.push(Row::abs_check(
                "hypothesis_ok",
                if verdict.hypothesis_ok { 1.0 } else { 0.0 },
                1.0,
                0.5,
            ));
            rows.push(Row::upper_check(
                "tail_max_gap_sq",
                verdict.tail_max,
                verdict.conclusion_bound,
            ));
            Ok(rows_output(rows))
        }
        "stability" => {
            let p: config::StabilityParams = exp.params_as()?;
            if p.magnitudes.len() < 2 {
                bail!("stability needs at least two perturbation magnitudes");
            }
            let batch = ctx.batch(
                &exp.name,
                p.steps.unwrap_or(ctx.steps),
                p.paths.unwrap_or(ctx.paths),
            )?;
            let xi = TerminalFunctional::terminal_value();
            let gen = sin_generator();
            let base = solve_bsde(&xi, &gen, &batch, &ctx.scheme)?;
            let xi_vals = xi.values(&batch);
            let mut rows = Vec::new();
            let mut ratios = Vec::new();
            for &delta in &p.magnitudes {
                let xi_pert = TerminalFunctional::new(move |path: &Path| {
                    path.terminal() + delta * path.terminal().cos()
                });
                let sol = solve_bsde(&xi_pert, &gen, &batch, &ctx.scheme)?;
                let rep = stability_gap(
                    &base,
                    &sol,
                    &xi_vals,
                    &xi_pert.values(&batch),
                    &gen,
                    &gen,
                    &batch,
                )?;
                rows.push(Row::data(format!("lhs_delta_{delta}"), rep.lhs));
                rows.push(Row::data(format!("rhs_delta_{delta}"), rep.rhs));
                rows.push(Row::data(format!("ratio_delta_{delta}"), rep.ratio()));
                ratios.push(rep.ratio());
            }
            let spread = ratios.iter().cloned().fold(0.0_f64, f64::max)
                / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            rows.push(Row::upper_check("ratio_spread", spread, p.tolerance_factor));
            Ok(rows_output(rows))
        }
        "utility" => {
            let p: config::UtilityParams = exp.params_as()?;
            let batch = ctx.batch(
                &exp.name,
                p.steps.unwrap_or(ctx.steps),
                p.paths.unwrap_or(ctx.paths),
            )?;
            let xi = TerminalFunctional::cos_terminal();
            let alpha = p.alpha;
            let raw_gen =
                Generator::new(|_, _, _, w: f64| w, 1.0, GFunction::Utility { alpha });
            let raw = solve_bsde(&xi, &raw_gen, &batch, &ctx.scheme)?;
            let y_sup = raw
                .y
                .iter()
                .flat_map(|row| row.iter())
                .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
            let trunc = truncate_g_alpha(alpha, y_sup);
            let lipschitz = trunc.lipschitz;
            let trunc_gen =
                Generator::new(|_, _, _, w: f64| w, 1.0, GFunction::Truncated(trunc));
            let truncated = solve_bsde(&xi, &trunc_gen, &batch, &ctx.scheme)?;
            let mut max_diff = 0.0_f64;
            let mut u_sup = 0.0_f64;
            for pp in 0..batch.n_paths() {
                for i in 0..=batch.grid.n_steps() {
                    max_diff = max_diff.max((raw.y[pp][i] - truncated.y[pp][i]).abs());
                }
                for i in 0..batch.grid.n_steps() {
                    max_diff = max_diff.max((raw.z[pp][i] - truncated.z[pp][i]).abs());
                }
                for (a, b) in raw.u[pp].iter().zip(&truncated.u[pp]) {
                    max_diff = max_diff.max((a - b).abs());
                    u_sup = u_sup.max(a.abs());
                }
            }
            let rows = vec![
                Row::data("y_sup", y_sup),
                Row::data("u_sup", u_sup),
                Row::data("truncation_lipschitz", lipschitz),
                Row::upper_check("truncation_agreement_rel", max_diff / y_sup, p.tolerance_rel),
                Row::upper_check("u_bound", u_sup, 2.0 * y_sup + p.bound_tolerance),
            ];
            Ok(rows_output(rows))
        }
        other => bail!("unknown experiment kind '{other}'"),
    }
}

/// `sqrt(sum_i dt E(a_i - b)^2 / (T b^2))`.
fn relative_l2(batch: &PathBatch, values: impl Fn(usize, usize) -> f64, b: f64) -> f64 {
    let n = batch.grid.n_steps();
    let mut num = 0.0;
    for i in 0..n {
        let dt = batch.grid.dt(i);
        for (pp, w) in batch.weights.iter().enumerate() {
            let d = values(pp, i) - b;
            num += w * dt * d * d;
        }
    }
    (num / (batch.grid.horizon() * b * b)).sqrt()
}

fn triangle_gap(
    deriv: &BsdeSolution,
    resolve: &BsdeSolution,
    base: &BsdeSolution,
    batch: &PathBatch,
    r_index: usize,
) -> f64 {
    let n = batch.grid.n_steps();
    let (mut num, mut den) = (0.0, 0.0);
    for (pp, w) in batch.weights.iter().enumerate() {
        for i in r_index..=n {
            let dt = if i < n { batch.grid.dt(i) } else { batch.grid.dt(i - 1) };
            let reference = resolve.y[pp][i] - base.y[pp][i];
            let d = deriv.y[pp][i] - reference;
            num += w * dt * d * d;
            den += w * dt * reference * reference;
        }
    }
    (num / den).sqrt()
}
