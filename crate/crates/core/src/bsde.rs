//! Backward solver for BSDEs with jump controls.
//!
//! Per step, conditional expectations are estimated by global weighted least
//! squares on the declared basis; the controls come out of increment
//! regressions
//!
//! ```text
//! Z_i  ~ E[(Y_{i+1} - E_i Y_{i+1}) dW_i | features] / dt
//! U_i(x_j) ~ E[(Y_{i+1} - E_i Y_{i+1}) dN~_i(j) | features] / (w_j dt)
//! ```
//!
//! (the conditional-mean control variate leaves the estimand unchanged and
//! suppresses the Monte Carlo variance), and the value is the per-path fixed
//! point of `y = E_i[Y_{i+1}] + dt f_g(t_i, y, Z_i, U_i)`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{BatchDriver, Generator};
use crate::levy::{Path, PathBatch};
use crate::regression::{self, BasisSpec, FeatureMatrix, CONDITION_WARN_THRESHOLD};

/// Evaluator of the mark-0 derivative channel, `(path, r_index) -> D_{r,0} xi`.
pub type Mark0Evaluator = Arc<dyn Fn(&Path, usize) -> f64 + Send + Sync>;

/// Scheme knobs. `picard_tol` / `max_picard_iters` control the per-step
/// fixed point; the basis describes the regression features.
#[derive(Debug, Clone)]
pub struct SchemeParams {
    pub basis: BasisSpec,
    pub picard_tol: f64,
    pub max_picard_iters: usize,
    /// When set, the stored `Z` is the mark-0 channel of `M` (the
    /// dW-integrand divided by sigma) instead of the dW-integrand itself.
    pub z_as_m_channel: bool,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            basis: BasisSpec::Polynomial { degree: 3 },
            picard_tol: 1e-10,
            max_picard_iters: 50,
            z_as_m_channel: false,
        }
    }
}

impl SchemeParams {
    pub fn with_basis(mut self, basis: BasisSpec) -> Self {
        self.basis = basis;
        self
    }
}

/// Terminal condition: a functional of the path, with optional metadata and
/// an optional mark-0 (Brownian channel) derivative evaluator.
#[derive(Clone)]
pub struct TerminalFunctional {
    pub eval: Arc<dyn Fn(&Path) -> f64 + Send + Sync>,
    /// Set when the functional is a smooth function of `X_T` only; enables
    /// closed-form oracles.
    pub smooth_of_terminal: bool,
    /// Mark-0 channel of the Malliavin derivative.
    pub d0: Option<Mark0Evaluator>,
}

impl TerminalFunctional {
    pub fn new(eval: impl Fn(&Path) -> f64 + Send + Sync + 'static) -> Self {
        TerminalFunctional {
            eval: Arc::new(eval),
            smooth_of_terminal: false,
            d0: None,
        }
    }

    pub fn with_d0(mut self, d0: impl Fn(&Path, usize) -> f64 + Send + Sync + 'static) -> Self {
        self.d0 = Some(Arc::new(d0));
        self
    }

    /// `xi = X_T`; the mark-0 channel of its derivative is 1.
    pub fn terminal_value() -> Self {
        let mut f = Self::new(|p: &Path| p.terminal()).with_d0(|_, _| 1.0);
        f.smooth_of_terminal = true;
        f
    }

    /// `xi = exp(X_T)`; mark-0 channel `exp(X_T)`.
    pub fn exp_terminal() -> Self {
        let mut f =
            Self::new(|p: &Path| p.terminal().exp()).with_d0(|p: &Path, _| p.terminal().exp());
        f.smooth_of_terminal = true;
        f
    }

    /// `xi = cos(X_T)`; bounded, mark-0 channel `-sin(X_T)`.
    pub fn cos_terminal() -> Self {
        let mut f =
            Self::new(|p: &Path| p.terminal().cos()).with_d0(|p: &Path, _| -p.terminal().sin());
        f.smooth_of_terminal = true;
        f
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c).with_d0(|_, _| 0.0)
    }

    /// `xi = sup of X on the grid`.
    pub fn supremum() -> Self {
        Self::new(|p: &Path| p.supremum())
    }

    pub fn values(&self, batch: &PathBatch) -> Vec<f64> {
        batch.paths.iter().map(|p| (self.eval)(p)).collect()
    }
}

/// Solution grids plus solver diagnostics. `u` is laid out per path as
/// `step * n_marks + mark_index`.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub marks: Vec<f64>,
    pub basis: BasisSpec,
    /// Squared global Picard gaps, appended per `picard_step`.
    pub picard_gaps: Vec<f64>,
    pub max_condition: f64,
    /// Steps whose regression condition number exceeded the warn threshold.
    pub condition_warnings: Vec<(usize, f64)>,
    /// Worst observed contraction ratio of the inner fixed point.
    pub max_inner_ratio: f64,
    pub max_inner_iterations: usize,
}

impl BsdeSolution {
    pub fn zeros(batch: &PathBatch, basis: BasisSpec) -> Self {
        let n = batch.grid.n_steps();
        let marks = batch.marks();
        BsdeSolution {
            y: vec![vec![0.0; n + 1]; batch.n_paths()],
            z: vec![vec![0.0; n]; batch.n_paths()],
            u: vec![vec![0.0; n * marks.len()]; batch.n_paths()],
            marks,
            basis,
            picard_gaps: Vec::new(),
            max_condition: 1.0,
            condition_warnings: Vec::new(),
            max_inner_ratio: 0.0,
            max_inner_iterations: 0,
        }
    }

    pub fn u_at(&self, path: usize, step: usize, mark_index: usize) -> f64 {
        self.u[path][step * self.marks.len() + mark_index]
    }

    /// Batch-weighted `Y_0` estimate (features are degenerate at t = 0, so
    /// the step-0 regression already averaged; this reads it off path 0's
    /// cell via the weighted mean for robustness).
    pub fn y0(&self, batch: &PathBatch) -> f64 {
        self.y
            .iter()
            .zip(&batch.weights)
            .map(|(row, w)| w * row[0])
            .sum()
    }

    pub fn z0(&self, batch: &PathBatch) -> f64 {
        self.z
            .iter()
            .zip(&batch.weights)
            .map(|(row, w)| w * row[0])
            .sum()
    }

    pub fn u0(&self, batch: &PathBatch, mark_index: usize) -> f64 {
        self.u
            .iter()
            .zip(&batch.weights)
            .map(|(row, w)| w * row[mark_index])
            .sum()
    }

    /// `sum_i dt E|Y_i - other.Y_i|^2` plus the matching `Z` and `U` terms;
    /// the squared distance used for Picard gap records.
    pub fn squared_distance(&self, other: &BsdeSolution, batch: &PathBatch) -> f64 {
        let n = batch.grid.n_steps();
        let marks = self.marks.len();
        let mut total = 0.0;
        for (p, w) in batch.weights.iter().enumerate() {
            for i in 0..n {
                let dt = batch.grid.dt(i);
                let dy = self.y[p][i] - other.y[p][i];
                let dz = self.z[p][i] - other.z[p][i];
                total += w * dt * (dy * dy + dz * dz);
                for j in 0..marks {
                    let du = self.u[p][i * marks + j] - other.u[p][i * marks + j];
                    total += w * dt * batch.channels[j].weight * du * du;
                }
            }
        }
        total
    }

    /// CSV export: `path_id,t,y,z,u_<mark>...`; the terminal row leaves the
    /// control columns empty.
    pub fn write_csv(&self, batch: &PathBatch, out: &mut impl std::io::Write) -> std::io::Result<()> {
        write!(out, "path_id,t,y,z")?;
        for m in &self.marks {
            write!(out, ",u_{m}")?;
        }
        writeln!(out)?;
        let n = batch.grid.n_steps();
        for p in 0..self.y.len() {
            for i in 0..=n {
                write!(out, "{},{},{}", p, batch.grid.t(i), self.y[p][i])?;
                if i < n {
                    write!(out, ",{}", self.z[p][i])?;
                    for j in 0..self.marks.len() {
                        write!(out, ",{}", self.u[p][i * self.marks.len() + j])?;
                    }
                } else {
                    for _ in 0..=self.marks.len() {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

struct StepFits {
    mean: Vec<f64>,
    z: Vec<f64>,
    u: Vec<Vec<f64>>,
    condition: f64,
}

/// Regression estimates at one step: conditional mean of `y_next`, and the
/// increment projections for the controls.
fn fit_step(
    driver: &dyn BatchDriver,
    batch: &PathBatch,
    scheme: &SchemeParams,
    step: usize,
    y_next: &[f64],
) -> Result<StepFits> {
    let n_paths = batch.n_paths();
    let dt = batch.grid.dt(step);
    let mut feats = Vec::with_capacity(n_paths * driver.feature_width());
    driver.fill_features(batch, step, &mut feats);
    let fm = FeatureMatrix::new(&feats, driver.feature_width());

    let mean_fit = regression::fit(&scheme.basis, fm, y_next, &batch.weights)?;
    let mean = mean_fit.predict_all(fm);
    let mut condition = mean_fit.condition;

    // centered responses for the control extractions
    let centered: Vec<f64> = y_next.iter().zip(&mean).map(|(y, m)| y - m).collect();

    let sigma = batch.model.sigma;
    let z = if sigma > 0.0 {
        let resp: Vec<f64> = batch
            .paths
            .iter()
            .zip(&centered)
            .map(|(p, c)| c * p.brownian_increments[step] / dt)
            .collect();
        let fit = regression::fit(&scheme.basis, fm, &resp, &batch.weights)?;
        condition = condition.max(fit.condition);
        let mut preds = fit.predict_all(fm);
        if scheme.z_as_m_channel {
            for v in &mut preds {
                *v /= sigma;
            }
        }
        preds
    } else {
        vec![0.0; n_paths]
    };

    let mut u = Vec::with_capacity(batch.channels.len());
    for (j, ch) in batch.channels.iter().enumerate() {
        if ch.weight <= 0.0 {
            u.push(vec![0.0; n_paths]);
            continue;
        }
        let resp: Vec<f64> = batch
            .paths
            .iter()
            .zip(&centered)
            .map(|(p, c)| c * batch.compensated_count(p, step, j) / (ch.weight * dt))
            .collect();
        let fit = regression::fit(&scheme.basis, fm, &resp, &batch.weights)?;
        condition = condition.max(fit.condition);
        u.push(fit.predict_all(fm));
    }

    Ok(StepFits {
        mean,
        z,
        u,
        condition,
    })
}

struct InnerOutcome {
    y: Vec<f64>,
    max_ratio: f64,
    max_iters: usize,
}

/// Solves `y = mean + dt f(t_i, y, z, u)` per path.
fn inner_fixed_point(
    driver: &dyn BatchDriver,
    batch: &PathBatch,
    scheme: &SchemeParams,
    step: usize,
    fits: &StepFits,
) -> Result<InnerOutcome> {
    let dt = batch.grid.dt(step);
    let n_marks = batch.channels.len();
    let results: Vec<Result<(f64, f64, usize)>> = (0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut u_p = vec![0.0; n_marks];
            for (j, val) in u_p.iter_mut().enumerate() {
                *val = fits.u[j][p];
            }
            let mut y = fits.mean[p];
            let mut prev_delta = f64::INFINITY;
            let mut worst_ratio = 0.0_f64;
            for it in 0..scheme.max_picard_iters {
                let next = fits.mean[p] + dt * driver.eval(batch, p, step, y, fits.z[p], &u_p);
                let delta = (next - y).abs();
                y = next;
                if delta <= scheme.picard_tol {
                    return Ok((y, worst_ratio, it + 1));
                }
                if prev_delta.is_finite() && prev_delta > 0.0 {
                    worst_ratio = worst_ratio.max(delta / prev_delta);
                }
                prev_delta = delta;
            }
            Err(Error::Contraction {
                step,
                residual: prev_delta,
                iters: scheme.max_picard_iters,
            })
        })
        .collect();

    let mut y = Vec::with_capacity(batch.n_paths());
    let mut max_ratio = 0.0_f64;
    let mut max_iters = 0;
    for r in results {
        let (yi, ratio, iters) = r?;
        y.push(yi);
        max_ratio = max_ratio.max(ratio);
        max_iters = max_iters.max(iters);
    }
    Ok(InnerOutcome {
        y,
        max_ratio,
        max_iters,
    })
}

/// Backward solve from `terminal` down to `start_step`; grid points below
/// `start_step` are zero-filled (used by derivative equations, which vanish
/// before their base time).
pub(crate) fn backward_solve(
    terminal: &[f64],
    driver: &dyn BatchDriver,
    batch: &PathBatch,
    scheme: &SchemeParams,
    start_step: usize,
) -> Result<BsdeSolution> {
    let n = batch.grid.n_steps();
    let n_paths = batch.n_paths();
    if terminal.len() != n_paths {
        return Err(Error::Shape(format!(
            "{} terminal values for {} paths",
            terminal.len(),
            n_paths
        )));
    }
    let mut sol = BsdeSolution::zeros(batch, scheme.basis.clone());
    for (p, &xi) in terminal.iter().enumerate() {
        sol.y[p][n] = xi;
    }
    let mut y_next: Vec<f64> = terminal.to_vec();
    for step in (start_step..n).rev() {
        let fits = fit_step(driver, batch, scheme, step, &y_next)?;
        if fits.condition > CONDITION_WARN_THRESHOLD {
            sol.condition_warnings.push((step, fits.condition));
        }
        sol.max_condition = sol.max_condition.max(fits.condition);
        let inner = inner_fixed_point(driver, batch, scheme, step, &fits)?;
        sol.max_inner_ratio = sol.max_inner_ratio.max(inner.max_ratio);
        sol.max_inner_iterations = sol.max_inner_iterations.max(inner.max_iters);
        let n_marks = batch.channels.len();
        for p in 0..n_paths {
            sol.y[p][step] = inner.y[p];
            sol.z[p][step] = fits.z[p];
            for j in 0..n_marks {
                sol.u[p][step * n_marks + j] = fits.u[j][p];
            }
        }
        y_next = inner.y;
    }
    Ok(sol)
}

/// Solves the BSDE with terminal condition `xi` and generator `gen` on the
/// batch by the backward one-step scheme (explicit in the controls, implicit
/// in `Y` through the inner fixed point).
pub fn solve_bsde(
    xi: &TerminalFunctional,
    gen: &Generator,
    batch: &PathBatch,
    scheme: &SchemeParams,
) -> Result<BsdeSolution> {
    if batch.n_paths() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let prepared = gen.prepare(batch)?;
    let terminal = xi.values(batch);
    backward_solve(&terminal, &prepared, batch, scheme, 0)
}

/// One global Picard iteration: plugs the previous solution into the
/// generator, re-projects conditionally step by step, re-extracts the
/// controls from the increment regressions, and records the squared gap
/// to the previous iterate.
pub fn picard_step(
    prev: &BsdeSolution,
    xi: &TerminalFunctional,
    gen: &Generator,
    batch: &PathBatch,
    scheme: &SchemeParams,
) -> Result<BsdeSolution> {
    let prepared = gen.prepare(batch)?;
    picard_step_driver(prev, &xi.values(batch), &prepared, batch, scheme)
}

pub(crate) fn picard_step_driver(
    prev: &BsdeSolution,
    terminal: &[f64],
    driver: &dyn BatchDriver,
    batch: &PathBatch,
    scheme: &SchemeParams,
) -> Result<BsdeSolution> {
    let n = batch.grid.n_steps();
    let n_paths = batch.n_paths();
    let n_marks = batch.channels.len();
    if prev.y.len() != n_paths || prev.y[0].len() != n + 1 {
        return Err(Error::GridMismatch(
            "previous iterate lives on a different batch or grid".into(),
        ));
    }
    let mut sol = BsdeSolution::zeros(batch, scheme.basis.clone());
    sol.picard_gaps = prev.picard_gaps.clone();
    for (p, &v) in terminal.iter().enumerate() {
        sol.y[p][n] = v;
    }
    let mut y_next: Vec<f64> = terminal.to_vec();
    for step in (0..n).rev() {
        let dt = batch.grid.dt(step);
        let fits = fit_step(driver, batch, scheme, step, &y_next)?;
        if fits.condition > CONDITION_WARN_THRESHOLD {
            sol.condition_warnings.push((step, fits.condition));
        }
        sol.max_condition = sol.max_condition.max(fits.condition);
        // explicit update along the previous iterate
        let y_now: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let u_prev = &prev.u[p][step * n_marks..(step + 1) * n_marks];
                fits.mean[p]
                    + dt * driver.eval(batch, p, step, prev.y[p][step], prev.z[p][step], u_prev)
            })
            .collect();
        for (p, &y) in y_now.iter().enumerate() {
            sol.y[p][step] = y;
            sol.z[p][step] = fits.z[p];
            for j in 0..n_marks {
                sol.u[p][step * n_marks + j] = fits.u[j][p];
            }
        }
        y_next = y_now;
    }
    sol.picard_gaps.push(sol.squared_distance(prev, batch));
    Ok(sol)
}

/// Iterates `picard_step` from the zero solution until the squared gap falls
/// below `gap_tol` (or `max_iters`), recording every gap.
pub fn solve_bsde_by_picard(
    xi: &TerminalFunctional,
    gen: &Generator,
    batch: &PathBatch,
    scheme: &SchemeParams,
    gap_tol: f64,
    max_iters: usize,
) -> Result<BsdeSolution> {
    let prepared = gen.prepare(batch)?;
    let terminal = xi.values(batch);
    let mut current = BsdeSolution::zeros(batch, scheme.basis.clone());
    for _ in 0..max_iters {
        let next = picard_step_driver(&current, &terminal, &prepared, batch, scheme)?;
        let done = *next.picard_gaps.last().unwrap() <= gap_tol;
        current = next;
        if done {
            break;
        }
    }
    Ok(current)
}

/// Empirical two-sided data of the stability comparison.
#[derive(Debug, Clone, Copy)]
pub struct StabilityReport {
    /// `||Y-Y'||_S^2 + ||Z-Z'||^2 + ||U-U'||^2`.
    pub lhs: f64,
    /// `||xi-xi'||^2 + int ||f_g - f'_g||^2` along the first solution.
    pub rhs: f64,
}

impl StabilityReport {
    pub fn ratio(&self) -> f64 {
        self.lhs / self.rhs
    }
}

/// Computes both sides of the stability comparison for two solved BSDEs on
/// the same batch; the generator difference is evaluated along the first
/// solution.
pub fn stability_gap(
    sol: &BsdeSolution,
    sol_prime: &BsdeSolution,
    xi: &[f64],
    xi_prime: &[f64],
    gen: &Generator,
    gen_prime: &Generator,
    batch: &PathBatch,
) -> Result<StabilityReport> {
    let n = batch.grid.n_steps();
    let n_marks = batch.channels.len();
    let prepared = gen.prepare(batch)?;
    let prepared_prime = gen_prime.prepare(batch)?;

    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (p, w) in batch.weights.iter().enumerate() {
        let mut sup_sq = 0.0_f64;
        for i in 0..=n {
            let d = sol.y[p][i] - sol_prime.y[p][i];
            sup_sq = sup_sq.max(d * d);
        }
        lhs += w * sup_sq;
        for i in 0..n {
            let dt = batch.grid.dt(i);
            let dz = sol.z[p][i] - sol_prime.z[p][i];
            lhs += w * dt * dz * dz;
            for j in 0..n_marks {
                let du = sol.u[p][i * n_marks + j] - sol_prime.u[p][i * n_marks + j];
                lhs += w * dt * batch.channels[j].weight * du * du;
            }
            let u_row = &sol.u[p][i * n_marks..(i + 1) * n_marks];
            let f = prepared.eval(batch, p, i, sol.y[p][i], sol.z[p][i], u_row);
            let f_prime = prepared_prime.eval(batch, p, i, sol.y[p][i], sol.z[p][i], u_row);
            rhs += w * dt * (f - f_prime) * (f - f_prime);
        }
        let dxi = xi[p] - xi_prime[p];
        rhs += w * dxi * dxi;
    }
    Ok(StabilityReport { lhs, rhs })
}
