//! Malliavin derivative fields of path functionals and of BSDE solutions,
//! computed three independent ways and cross-checked:
//!
//! * jump directions (`v != 0`): the exact pathwise difference
//!   `D_{r,v} xi = xi(X + v 1_{[r,T]}) - xi(X)`;
//! * the Brownian direction (`v = 0`): Cameron–Martin finite differences and
//!   supplied analytic channels;
//! * the derivative BSDE, solved with the same backward machinery and zero
//!   enforced before the base time.
//!
//! Convention: the stored `v = 0` values are mark-0 chaos channels, so the
//! dW-integrand is `sigma * channel`. At `sigma = 1` the two coincide.

use std::sync::Arc;

use crate::bsde::{backward_solve, BsdeSolution, SchemeParams, TerminalFunctional};
use crate::error::{Error, Result};
use crate::forward::first_variation;
use crate::generator::{g_nu, BatchDriver, Generator, PreparedGenerator};
use crate::grid::TimeGrid;
use crate::levy::{shift_batch, shift_path, CameronMartinDirection, Path, PathBatch};
use crate::levy::cameron_martin_shift;
use crate::regression::{self, FeatureMatrix};

/// A derivative base point: grid index of `r` and the direction mark
/// (`0.0` selects the Brownian channel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasePoint {
    pub r_index: usize,
    pub mark: f64,
}

impl BasePoint {
    pub fn is_brownian(&self) -> bool {
        self.mark == 0.0
    }
}

/// Coarse sub-grid x node-set sampling of base points: `n_r` evenly spaced
/// grid indices per channel, jump marks from the batch, plus the Brownian
/// channel when requested.
pub fn sample_base_points(batch: &PathBatch, n_r: usize, include_brownian: bool) -> Vec<BasePoint> {
    let n = batch.grid.n_steps();
    let n_r = n_r.clamp(1, n);
    let mut points = Vec::new();
    for k in 0..n_r {
        let r_index = k * n / n_r;
        if include_brownian && batch.model.sigma > 0.0 {
            points.push(BasePoint { r_index, mark: 0.0 });
        }
        for c in &batch.channels {
            points.push(BasePoint {
                r_index,
                mark: c.mark,
            });
        }
    }
    points
}

/// Exact jump-direction derivative of a terminal functional:
/// `xi(X + v 1_{[r,T]}) - xi(X)`. Deterministic given the path; no Monte
/// Carlo error beyond the functional's own grid discretization.
pub fn jump_derivative(
    xi: &TerminalFunctional,
    path: &Path,
    grid: &TimeGrid,
    r: f64,
    v: f64,
) -> Result<f64> {
    if v == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let shifted = shift_path(path, grid, r, v)?;
    Ok((xi.eval)(&shifted) - (xi.eval)(path))
}

/// Finite-difference quotients of a functional along a Cameron–Martin
/// direction, one per step size, plus the analytic pairing
/// `<D^W xi, h> = sum_i sigma d0(t_i) h_i dt_i` when the functional carries
/// a mark-0 channel.
#[derive(Debug, Clone)]
pub struct FdQuotients {
    pub us: Vec<f64>,
    pub quotients: Vec<f64>,
    pub analytic_pairing: Option<f64>,
}

pub fn brownian_fd_derivative(
    xi: &TerminalFunctional,
    path: &Path,
    grid: &TimeGrid,
    sigma: f64,
    dir: &CameronMartinDirection,
    us: &[f64],
) -> Result<FdQuotients> {
    if us.iter().any(|&u| u == 0.0) {
        return Err(Error::Parameter("step sizes must be nonzero".into()));
    }
    if us.windows(2).any(|w| w[1].abs() >= w[0].abs()) {
        return Err(Error::Parameter(
            "step sizes must decrease in magnitude".into(),
        ));
    }
    let base = (xi.eval)(path);
    let quotients = us
        .iter()
        .map(|&u| {
            let shifted = cameron_martin_shift(path, grid, sigma, dir, u)?;
            Ok(((xi.eval)(&shifted) - base) / u)
        })
        .collect::<Result<Vec<f64>>>()?;
    let analytic_pairing = xi.d0.as_ref().map(|d0| {
        dir.h()
            .iter()
            .enumerate()
            .map(|(i, h)| sigma * d0(path, i) * h * grid.dt(i))
            .sum()
    });
    Ok(FdQuotients {
        us: us.to_vec(),
        quotients,
        analytic_pairing,
    })
}

#[allow(clippy::large_enum_variant)]
enum DerivKind {
    Jump {
        shifted_batch: PathBatch,
        shifted_prepared: PreparedGenerator,
    },
    Brownian {
        /// `(D_{r,0} f_g)` along the base solution, `[path][step]`
        /// (mark-0 channel units); zero for deterministic drivers.
        d0_term: Vec<Vec<f64>>,
    },
}

/// The derivative BSDE of one base point: terminal `D_{r,v} xi` and the
/// driver `F_{r,v}`, holding references to the base solution.
pub struct DerivativeProblem<'a> {
    pub point: BasePoint,
    pub terminal: Vec<f64>,
    /// `L_{f,g} = L_f (1 + L_g ||g1||)` metadata of the driver.
    pub lipschitz: f64,
    base: &'a BsdeSolution,
    batch: &'a PathBatch,
    prepared: PreparedGenerator,
    kind: DerivKind,
}

/// Assembles the derivative problem at `(r, v)`.
///
/// `v != 0`: terminal by exact path difference; driver
/// `f_g(X + v 1_{[r,T]}, s, Y+y, Z+z, U+u) - f_g(X, s, Y, Z, U)`.
///
/// `v = 0`: terminal from the functional's mark-0 channel; driver
/// `(D_{r,0} f_g)(s, Y, Z, U) + df_y y + df_z z + df_w [g'(U) u]_nu`.
pub fn build_derivative_problem<'a>(
    base: &'a BsdeSolution,
    xi: &TerminalFunctional,
    gen: &Generator,
    batch: &'a PathBatch,
    r_index: usize,
    v: f64,
) -> Result<DerivativeProblem<'a>> {
    if r_index > batch.grid.n_steps() {
        return Err(Error::TimeOutOfRange {
            t: r_index as f64,
            horizon: batch.grid.n_steps() as f64,
        });
    }
    let r = batch.grid.t(r_index);
    let prepared = gen.prepare(batch)?;
    let lipschitz = gen.composite_lipschitz(&prepared.nodes);

    if v != 0.0 {
        let shifted_batch = shift_batch(batch, r, v)?;
        let shifted_prepared = gen.prepare(&shifted_batch)?;
        let terminal: Vec<f64> = shifted_batch
            .paths
            .iter()
            .zip(&batch.paths)
            .map(|(s, p)| (xi.eval)(s) - (xi.eval)(p))
            .collect();
        Ok(DerivativeProblem {
            point: BasePoint { r_index, mark: v },
            terminal,
            lipschitz,
            base,
            batch,
            prepared,
            kind: DerivKind::Jump {
                shifted_batch,
                shifted_prepared,
            },
        })
    } else {
        if batch.model.sigma == 0.0 {
            return Err(Error::Capability(
                "model has no Brownian component; the v = 0 channel is empty".into(),
            ));
        }
        let d0 = xi.d0.as_ref().ok_or_else(|| {
            Error::Capability("terminal functional lacks a mark-0 derivative evaluator".into())
        })?;
        if gen.partials.is_none() {
            return Err(Error::Capability(
                "generator lacks partial derivatives needed for the v = 0 driver".into(),
            ));
        }
        let terminal: Vec<f64> = batch.paths.iter().map(|p| d0(p, r_index)).collect();
        let d0_term = brownian_driver_field(gen, &prepared, base, batch, r_index)?;
        Ok(DerivativeProblem {
            point: BasePoint { r_index, mark: 0.0 },
            terminal,
            lipschitz,
            base,
            batch,
            prepared,
            kind: DerivKind::Brownian { d0_term },
        })
    }
}

/// `(D_{r,0} f_g)(s, Y, Z, U)` along the base solution: zero for
/// deterministic drivers; for forward-process drivers
/// `f_psi(s, Psi_s, G) * D_{r,0} Psi_s` with the first variation divided by
/// sigma (channel units).
fn brownian_driver_field(
    gen: &Generator,
    prepared: &PreparedGenerator,
    base: &BsdeSolution,
    batch: &PathBatch,
    r_index: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = batch.grid.n_steps();
    let Some(fc) = &gen.forward else {
        return Ok(vec![vec![0.0; n]; batch.n_paths()]);
    };
    let f_psi = fc.f_psi.as_ref().ok_or_else(|| {
        Error::Capability(
            "forward driver lacks the partial derivative in its state slot".into(),
        )
    })?;
    let forward_paths = prepared
        .forward_paths
        .as_ref()
        .expect("forward component prepared");
    let sigma = batch.model.sigma;
    let n_marks = batch.channels.len();
    let mut out = Vec::with_capacity(batch.n_paths());
    for (p, path) in batch.paths.iter().enumerate() {
        let psi = &forward_paths[p];
        let fv = first_variation(&fc.spec, path, &batch.grid, &batch.channels, psi, r_index)?;
        let mut row = vec![0.0; n];
        for (s, item) in row.iter_mut().enumerate().skip(r_index) {
            let u_row = &base.u[p][s * n_marks..(s + 1) * n_marks];
            let w = g_nu(&gen.g, gen.g1.as_ref(), &prepared.nodes, u_row)?;
            *item = f_psi(batch.grid.t(s), psi[s], base.y[p][s], base.z[p][s], w)
                * (fv[s] / sigma);
        }
        out.push(row);
    }
    Ok(out)
}

impl BatchDriver for DerivativeProblem<'_> {
    fn eval(&self, batch: &PathBatch, p: usize, step: usize, y: f64, z: f64, u: &[f64]) -> f64 {
        let n_marks = batch.channels.len();
        let base_u = &self.base.u[p][step * n_marks..(step + 1) * n_marks];
        let base_y = self.base.y[p][step];
        let base_z = self.base.z[p][step];
        let gen = &self.prepared.generator;
        match &self.kind {
            DerivKind::Jump {
                shifted_batch,
                shifted_prepared,
            } => {
                let ctx_shift = shifted_prepared.ctx(shifted_batch, p, step);
                let ctx_base = self.prepared.ctx(self.batch, p, step);
                let mut w_shift = 0.0;
                let mut w_base = 0.0;
                for (j, &(mark, weight)) in self.prepared.nodes.iter().enumerate() {
                    let g1v = (gen.g1)(mark);
                    w_shift += weight * gen.g.eval(base_u[j] + u[j]) * g1v;
                    w_base += weight * gen.g.eval(base_u[j]) * g1v;
                }
                (gen.f)(&ctx_shift, base_y + y, base_z + z, w_shift)
                    - (gen.f)(&ctx_base, base_y, base_z, w_base)
            }
            DerivKind::Brownian { d0_term } => {
                let ctx = self.prepared.ctx(self.batch, p, step);
                let mut w_base = 0.0;
                let mut gu = 0.0;
                for (j, &(mark, weight)) in self.prepared.nodes.iter().enumerate() {
                    let g1v = (gen.g1)(mark);
                    w_base += weight * gen.g.eval(base_u[j]) * g1v;
                    gu += weight * gen.g.deriv(base_u[j]) * u[j] * g1v;
                }
                let (fy, fz, fw) =
                    gen.partials.as_ref().expect("checked at build")(&ctx, base_y, base_z, w_base);
                d0_term[p][step] + fy * y + fz * z + fw * gu
            }
        }
    }

    fn y_lipschitz(&self) -> f64 {
        self.prepared.generator.lipschitz_l_f
    }

    fn feature_width(&self) -> usize {
        self.prepared.feature_width()
    }

    fn fill_features(&self, batch: &PathBatch, step: usize, out: &mut Vec<f64>) {
        self.prepared.fill_features(batch, step, out);
    }
}

impl DerivativeProblem<'_> {
    /// Driver value at the origin `(y, z, u) = 0`, per (path, step); the
    /// quantity dominated by `L_f |Phi| + Gamma` with `Phi = 0`.
    pub fn origin_driver_value(&self, p: usize, step: usize) -> f64 {
        let zeros = vec![0.0; self.batch.channels.len()];
        self.eval(self.batch, p, step, 0.0, 0.0, &zeros)
    }

    /// Checks `|F_{r,v}(s, 0, 0, 0)| <= Gamma(r, v)` on every (path, step at
    /// or after r) when the generator declares a dominating field.
    pub fn check_gamma_domination(&self) -> Result<()> {
        let Some(gamma) = &self.prepared.generator.gamma_bound else {
            return Ok(());
        };
        let r = self.batch.grid.t(self.point.r_index);
        let bound = gamma(r, self.point.mark);
        for p in 0..self.batch.n_paths() {
            for step in self.point.r_index..self.batch.grid.n_steps() {
                let val = self.origin_driver_value(p, step).abs();
                if val > bound + 1e-9 {
                    return Err(Error::Parameter(format!(
                        "driver origin value {val} exceeds declared Gamma({r}, {}) = {bound}",
                        self.point.mark
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Solves the derivative BSDE with the shared backward machinery, enforcing
/// zero on grid points before the base time.
pub fn solve_derivative_bsde(
    prob: &DerivativeProblem,
    scheme: &SchemeParams,
) -> Result<BsdeSolution> {
    backward_solve(
        &prob.terminal,
        prob,
        prob.batch,
        scheme,
        prob.point.r_index,
    )
}

/// Solves the derivative equation continued below the base time instead of
/// zero-enforced: the continuation at `t < r` is the data-sensitivity field
/// whose pairing against `h` at `t = 0` matches the Cameron–Martin finite
/// difference of `Y_0`. (The zero-enforced solve is the Malliavin
/// derivative; the two coincide on `[r, T]`.)
pub fn solve_derivative_bsde_continued(
    prob: &DerivativeProblem,
    scheme: &SchemeParams,
) -> Result<BsdeSolution> {
    backward_solve(&prob.terminal, prob, prob.batch, scheme, 0)
}

/// Derivative values of a functional or of a BSDE solution, indexed by base
/// point.
pub struct MalliavinField {
    pub points: Vec<BasePoint>,
    pub values: FieldValues,
    /// Convention record: `v = 0` entries are mark-0 chaos channels, so the
    /// dW-integrand is `sigma * value`.
    pub mark0_is_channel: bool,
}

pub enum FieldValues {
    /// `D_{r,v} xi` per base point per path.
    Scalar(Vec<Vec<f64>>),
    /// Derivative-BSDE solutions per base point.
    Bsde(Vec<BsdeSolution>),
}

impl MalliavinField {
    /// Evaluates the derivative of a terminal functional at every base point:
    /// exact differences for jump channels, the supplied channel for `v = 0`.
    pub fn of_functional(
        xi: &TerminalFunctional,
        batch: &PathBatch,
        points: &[BasePoint],
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(points.len());
        for pt in points {
            let r = batch.grid.t(pt.r_index);
            let row: Vec<f64> = if pt.is_brownian() {
                let d0 = xi.d0.as_ref().ok_or_else(|| {
                    Error::Capability("terminal functional lacks a mark-0 evaluator".into())
                })?;
                batch.paths.iter().map(|p| d0(p, pt.r_index)).collect()
            } else {
                batch
                    .paths
                    .iter()
                    .map(|p| jump_derivative(xi, p, &batch.grid, r, pt.mark))
                    .collect::<Result<_>>()?
            };
            values.push(row);
        }
        Ok(MalliavinField {
            points: points.to_vec(),
            values: FieldValues::Scalar(values),
            mark0_is_channel: true,
        })
    }

    pub fn of_solutions(points: Vec<BasePoint>, solutions: Vec<BsdeSolution>) -> Self {
        MalliavinField {
            points,
            values: FieldValues::Bsde(solutions),
            mark0_is_channel: true,
        }
    }

    /// Monte Carlo estimate of `E xi^2 + int int E (D_{r,v} xi)^2 m(dr, dv)`
    /// on the sampled base-point set (each point carries the `m`-mass of its
    /// sub-grid cell x channel).
    pub fn d12_norm_estimate(&self, batch: &PathBatch, xi_values: &[f64]) -> Result<f64> {
        let FieldValues::Scalar(values) = &self.values else {
            return Err(Error::Coverage(
                "norm estimate needs a scalar derivative field".into(),
            ));
        };
        let mut per_channel_count = std::collections::BTreeMap::new();
        for pt in &self.points {
            *per_channel_count.entry(pt.mark.to_bits()).or_insert(0usize) += 1;
        }
        let horizon = batch.grid.horizon();
        let sigma_sq = batch.model.sigma * batch.model.sigma;
        let mut total: f64 = xi_values
            .iter()
            .zip(&batch.weights)
            .map(|(x, w)| w * x * x)
            .sum();
        for (pt, row) in self.points.iter().zip(values) {
            let n_r = per_channel_count[&pt.mark.to_bits()] as f64;
            let mu_weight = if pt.is_brownian() {
                sigma_sq
            } else {
                batch
                    .channels
                    .iter()
                    .find(|c| c.mark == pt.mark)
                    .map(|c| c.weight)
                    .ok_or(Error::UnknownMark(pt.mark))?
            };
            let cell_mass = mu_weight * horizon / n_r;
            let mean_sq: f64 = row
                .iter()
                .zip(&batch.weights)
                .map(|(d, w)| w * d * d)
                .sum();
            total += cell_mass * mean_sq;
        }
        Ok(total)
    }
}

/// One row of the representation check `p(D_{r,v} Y_r) vs Z_r or U_r(v)`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualRow {
    pub r: f64,
    pub v: f64,
    pub residual: f64,
    pub sample_size: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
    /// Aggregated relative residual of the Brownian channel.
    pub residual_z: Option<f64>,
    /// Aggregated relative residual over the jump channels.
    pub residual_u: Option<f64>,
}

impl ResidualReport {
    /// CSV layout: `r,v,kind,residual,sample_size,tolerance,pass`.
    pub fn write_csv(
        &self,
        tolerance: f64,
        out: &mut impl std::io::Write,
    ) -> std::io::Result<()> {
        writeln!(out, "r,v,kind,residual,sample_size,tolerance,pass")?;
        for row in &self.rows {
            let kind = if row.v == 0.0 { "Z" } else { "U" };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.r,
                row.v,
                kind,
                row.residual,
                row.sample_size,
                tolerance,
                row.residual <= tolerance
            )?;
        }
        Ok(())
    }
}

/// Checks the representation of the controls as predictable projections of
/// the derivative field: approximates `D_{r,v} Y_{r+}` by the first grid
/// value at or after `r`, projects it on the step-`r` features by
/// regression, and reports the relative `L2` distance to `Z_r` (with the
/// sigma convention applied) or to `U_r(v)`.
pub fn representation_residual(
    base: &BsdeSolution,
    field: &MalliavinField,
    batch: &PathBatch,
    gen: &Generator,
    scheme: &SchemeParams,
) -> Result<ResidualReport> {
    let FieldValues::Bsde(solutions) = &field.values else {
        return Err(Error::Coverage(
            "representation check needs derivative-BSDE fields".into(),
        ));
    };
    if solutions.len() != field.points.len() {
        return Err(Error::Coverage(format!(
            "{} solutions for {} base points",
            solutions.len(),
            field.points.len()
        )));
    }
    let prepared = gen.prepare(batch)?;
    let n_marks = batch.channels.len();
    let sigma_factor = if scheme.z_as_m_channel {
        1.0
    } else {
        batch.model.sigma
    };
    let mut rows = Vec::new();
    let mut agg = std::collections::BTreeMap::new(); // channel -> (num, den)
    for (pt, sol) in field.points.iter().zip(solutions) {
        let i_r = pt.r_index;
        if i_r >= batch.grid.n_steps() {
            return Err(Error::Coverage(format!(
                "base point at r = T has no control value (index {i_r})"
            )));
        }
        // right limit at r: the first grid value at or after r
        let vals: Vec<f64> = (0..batch.n_paths()).map(|p| sol.y[p][i_r]).collect();
        // predictable projection by regression on the step-r features
        let mut feats = Vec::with_capacity(batch.n_paths() * prepared.feature_width());
        prepared.fill_features(batch, i_r, &mut feats);
        let fm = FeatureMatrix::new(&feats, prepared.feature_width());
        let fit = regression::fit(&scheme.basis, fm, &vals, &batch.weights)?;
        let projected = fit.predict_all(fm);

        let (mut num, mut den) = (0.0, 0.0);
        for (p, w) in batch.weights.iter().enumerate() {
            let target = if pt.is_brownian() {
                base.z[p][i_r]
            } else {
                let j = batch
                    .channels
                    .iter()
                    .position(|c| c.mark == pt.mark)
                    .ok_or(Error::UnknownMark(pt.mark))?;
                base.u[p][i_r * n_marks + j]
            };
            let estimate = if pt.is_brownian() {
                sigma_factor * projected[p]
            } else {
                projected[p]
            };
            num += w * (estimate - target) * (estimate - target);
            den += w * target * target;
        }
        let key = if pt.is_brownian() { 0u8 } else { 1u8 };
        let e = agg.entry(key).or_insert((0.0, 0.0));
        e.0 += num;
        e.1 += den;
        rows.push(ResidualRow {
            r: batch.grid.t(i_r),
            v: pt.mark,
            residual: if den > 0.0 {
                (num / den).sqrt()
            } else {
                num.sqrt()
            },
            sample_size: batch.n_paths(),
        });
    }
    let ratio = |k: u8| {
        agg.get(&k)
            .map(|(num, den)| if *den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
    };
    Ok(ResidualReport {
        rows,
        residual_z: ratio(0),
        residual_u: ratio(1),
    })
}

pub type ParametricEvalFn = Arc<dyn Fn(&Path, &[f64]) -> f64 + Send + Sync>;
pub type ParametricGradFn = Arc<dyn Fn(&Path, &[f64]) -> Vec<f64> + Send + Sync>;
pub type ParametricDwFn = Arc<dyn Fn(&Path, &[f64], usize) -> f64 + Send + Sync>;
pub type DwFieldFn = Arc<dyn Fn(&Path, usize) -> f64 + Send + Sync>;

/// A random function `F(omega, y)` with its `y`-gradient and an optional
/// path-derivative field (dW-integrand of `D^W F(., y)` at each grid index).
#[derive(Clone)]
pub struct ParametricFunctional {
    pub eval: ParametricEvalFn,
    pub partial_y: Option<ParametricGradFn>,
    pub dw_field: Option<ParametricDwFn>,
}

/// A functional with a known or estimated Brownian derivative field
/// (dW-integrand at each grid index).
#[derive(Clone)]
pub struct FunctionalWithDw {
    pub eval: Arc<dyn Fn(&Path) -> f64 + Send + Sync>,
    pub dw: DwFieldFn,
}

/// Assembles the chain-rule field
/// `D^W F(., G) = (D^W F)(., G) + sum_k dF/dy_k (., G) D^W G_k`
/// on the grid for one path (dW-integrand units). The consumer validates it
/// against Cameron–Martin finite differences of the composite.
pub fn chain_rule_brownian(
    f: &ParametricFunctional,
    gs: &[FunctionalWithDw],
    path: &Path,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let partial_y = f.partial_y.as_ref().ok_or_else(|| {
        Error::Capability("parametric functional lacks its y-gradient".into())
    })?;
    let g_values: Vec<f64> = gs.iter().map(|g| (g.eval)(path)).collect();
    let grad = partial_y(path, &g_values);
    if grad.len() != gs.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} inner functionals",
            grad.len(),
            gs.len()
        )));
    }
    let n = grid.n_steps();
    let mut field = vec![0.0; n];
    for (i, item) in field.iter_mut().enumerate() {
        let own = match &f.dw_field {
            Some(dw) => dw(path, &g_values, i),
            None => 0.0,
        };
        let chain: f64 = grad
            .iter()
            .zip(gs)
            .map(|(gk, g)| gk * (g.dw)(path, i))
            .sum();
        *item = own + chain;
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::generator::GFunction;
    use crate::levy::{sample_paths, JumpComponent, LevyModel};
    use crate::oracles::{closed_form_linear, XiKind};

    fn model() -> LevyModel {
        LevyModel::new(
            0.0,
            1.0,
            vec![
                JumpComponent::point(1.0, 1.0),
                JumpComponent::point(1.0, -1.0),
            ],
            1.0,
        )
    }

    #[test]
    fn jump_derivative_of_terminal_value_is_v() {
        let m = model();
        let batch = sample_paths(&m, 10, 32, 3).unwrap();
        let xi = TerminalFunctional::terminal_value();
        for p in &batch.paths {
            for (r, v) in [(0.0, 1.0), (0.35, -1.0), (1.0, 0.5)] {
                let d = jump_derivative(&xi, p, &batch.grid, r, v).unwrap();
                assert!((d - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jump_derivative_of_exponential_is_exact_per_path() {
        let m = model();
        let batch = sample_paths(&m, 10, 64, 4).unwrap();
        let xi = TerminalFunctional::exp_terminal();
        for p in &batch.paths {
            let d = jump_derivative(&xi, p, &batch.grid, 0.5, 0.8).unwrap();
            let expected = p.terminal().exp() * (0.8f64.exp() - 1.0);
            assert!((d - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn jump_derivative_of_supremum_stays_in_lipschitz_band() {
        let m = model();
        let batch = sample_paths(&m, 10, 64, 5).unwrap();
        let xi = TerminalFunctional::supremum();
        for p in &batch.paths {
            for v in [0.6, -0.6] {
                let d = jump_derivative(&xi, p, &batch.grid, 0.3, v).unwrap();
                assert!(d.abs() <= v.abs() + 1e-12);
                if v > 0.0 {
                    assert!(d >= -1e-12);
                } else {
                    assert!(d <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn jump_derivative_rejects_zero_direction_and_is_deterministic() {
        let m = model();
        let batch = sample_paths(&m, 6, 8, 6).unwrap();
        let xi = TerminalFunctional::terminal_value();
        assert!(matches!(
            jump_derivative(&xi, &batch.paths[0], &batch.grid, 0.2, 0.0),
            Err(Error::ZeroDirection)
        ));
        let a = jump_derivative(&xi, &batch.paths[0], &batch.grid, 0.2, 1.0).unwrap();
        let b = jump_derivative(&xi, &batch.paths[0], &batch.grid, 0.2, 1.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn fd_quotient_of_linear_functional_is_exact() {
        let m = LevyModel::brownian(1.0, 1.0);
        let batch = sample_paths(&m, 8, 4, 7).unwrap();
        let dir = CameronMartinDirection::constant(&batch.grid, 1.0);
        // xi = sigma W_T = X_T here
        let xi = TerminalFunctional::terminal_value();
        for p in &batch.paths {
            let fd =
                brownian_fd_derivative(&xi, p, &batch.grid, m.sigma, &dir, &[0.5, 0.25]).unwrap();
            for q in &fd.quotients {
                assert!((q - 1.0).abs() < 1e-12);
            }
            assert!((fd.analytic_pairing.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_error_of_quadratic_functional_halves_with_u() {
        let m = LevyModel::brownian(1.0, 1.0);
        let batch = sample_paths(&m, 8, 16, 8).unwrap();
        let dir = CameronMartinDirection::constant(&batch.grid, 1.0);
        let xi = TerminalFunctional::new(|p: &Path| p.terminal_brownian().powi(2));
        for p in &batch.paths {
            let fd = brownian_fd_derivative(&xi, p, &batch.grid, m.sigma, &dir, &[0.2, 0.1, 0.05])
                .unwrap();
            let target = 2.0 * p.terminal_brownian(); // <2 W_T 1, 1> over [0,1]
            let errs: Vec<f64> = fd.quotients.iter().map(|q| (q - target).abs()).collect();
            // error is exactly u * g_h(T)^2 here: ratios are 2
            assert!((errs[0] / errs[1] - 2.0).abs() < 1e-6);
            assert!((errs[1] / errs[2] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_quotient_of_constant_is_zero() {
        let m = LevyModel::brownian(1.0, 1.0);
        let batch = sample_paths(&m, 8, 2, 9).unwrap();
        let dir = CameronMartinDirection::constant(&batch.grid, 1.0);
        let xi = TerminalFunctional::constant(4.0);
        let fd = brownian_fd_derivative(&xi, &batch.paths[0], &batch.grid, 1.0, &dir, &[0.1])
            .unwrap();
        assert_eq!(fd.quotients[0], 0.0);
    }

    #[test]
    fn derivative_problem_zero_driver_keeps_terminal_field() {
        // f = 0, xi = X_T, v = 1: field is 1 from r on, Z = U = 0
        let m = model();
        let batch = sample_paths(&m, 10, 2000, 11).unwrap();
        let scheme = SchemeParams::default();
        let xi = TerminalFunctional::terminal_value();
        let gen = Generator::zero();
        let base = solve_bsde(&xi, &gen, &batch, &scheme).unwrap();
        let r_index = 4;
        let prob = build_derivative_problem(&base, &xi, &gen, &batch, r_index, 1.0).unwrap();
        let sol = solve_derivative_bsde(&prob, &scheme).unwrap();
        for p in 0..batch.n_paths() {
            for i in 0..r_index {
                assert_eq!(sol.y[p][i], 0.0);
                assert_eq!(sol.z[p][i], 0.0);
            }
            for i in r_index..=10 {
                assert!((sol.y[p][i] - 1.0).abs() < 1e-9, "field at ({p}, {i})");
            }
            for i in r_index..10 {
                assert!(sol.z[p][i].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn derivative_problem_linear_driver_matches_closed_form() {
        let m = model();
        let alpha = 0.5;
        let batch = sample_paths(&m, 10, 2000, 12).unwrap();
        let scheme = SchemeParams::default();
        let xi = TerminalFunctional::terminal_value();
        let gen = Generator::linear(alpha);
        let base = solve_bsde(&xi, &gen, &batch, &scheme).unwrap();
        let cf = closed_form_linear(&m, alpha, XiKind::TerminalValue);
        let r_index = 3;
        let v = -1.0;
        let prob = build_derivative_problem(&base, &xi, &gen, &batch, r_index, v).unwrap();
        let sol = solve_derivative_bsde(&prob, &scheme).unwrap();
        // Y^{r,v}_t = v e^{alpha (T - t)}: a first-order-in-dt discretization
        let dt = batch.grid.dt(0);
        for i in r_index..=10 {
            let t = batch.grid.t(i);
            let target = v * cf.jump_derivative_per_unit(t);
            let got = sol.y[0][i];
            assert!(
                (got - target).abs() <= 0.8 * alpha * alpha * dt + 1e-9,
                "t = {t}: {got} vs {target}"
            );
        }
    }

    #[test]
    fn derivative_problem_linear_driver_is_linear_in_y_exactly() {
        // f = alpha y deterministic: jump driver becomes alpha (Y + y) - alpha Y
        let m = model();
        let batch = sample_paths(&m, 6, 64, 13).unwrap();
        let scheme = SchemeParams::default();
        let gen = Generator::linear(0.7);
        let xi = TerminalFunctional::terminal_value();
        let base = solve_bsde(&xi, &gen, &batch, &scheme).unwrap();
        let prob = build_derivative_problem(&base, &xi, &gen, &batch, 2, 1.0).unwrap();
        let zeros = vec![0.0; batch.channels.len()];
        for p in [0usize, 5, 20] {
            for step in 2..6 {
                let f0 = prob.eval(&batch, p, step, 0.0, 0.0, &zeros);
                let f1 = prob.eval(&batch, p, step, 1.3, 0.0, &zeros);
                assert!((f1 - f0 - 0.7 * 1.3).abs() < 1e-12);
                assert!(f0.abs() < 1e-12); // (D f) = 0 for deterministic f
            }
        }
    }

    #[test]
    fn continued_brownian_field_pairs_to_cameron_martin_fd_of_y0() {
        // first-order agreement between <sigma * continued field at t = 0, h>
        // and the finite-difference quotient of Y_0 under batch-wide shifts
        let m = model();
        let alpha = 0.4;
        let batch = sample_paths(&m, 10, 4000, 23).unwrap();
        let scheme = SchemeParams::default();
        let xi = TerminalFunctional::exp_terminal();
        let gen = Generator::linear(alpha);
        let base = solve_bsde(&xi, &gen, &batch, &scheme).unwrap();

        // continued v = 0 fields on every grid step, paired against h = 1
        let mut pairing = 0.0;
        for r_index in 0..batch.grid.n_steps() {
            let prob = build_derivative_problem(&base, &xi, &gen, &batch, r_index, 0.0).unwrap();
            let sol = solve_derivative_bsde_continued(&prob, &scheme).unwrap();
            let at_zero: f64 = sol
                .y
                .iter()
                .zip(&batch.weights)
                .map(|(row, w)| w * row[0])
                .sum();
            pairing += m.sigma * at_zero * batch.grid.dt(r_index);
        }

        let dir = CameronMartinDirection::constant(&batch.grid, 1.0);
        let quotient = |u: f64| {
            let moved = PathBatch {
                grid: batch.grid.clone(),
                model: batch.model.clone(),
                channels: batch.channels.clone(),
                paths: batch
                    .paths
                    .iter()
                    .map(|p| cameron_martin_shift(p, &batch.grid, m.sigma, &dir, u).unwrap())
                    .collect(),
                weights: batch.weights.clone(),
                seed: batch.seed,
            };
            let sol = solve_bsde(&xi, &gen, &moved, &scheme).unwrap();
            (sol.y0(&moved) - base.y0(&batch)) / u
        };
        let errs: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&u| (quotient(u) - pairing).abs())
            .collect();
        assert!(
            errs[0] / errs[1] > 1.5 && errs[1] / errs[2] > 1.5,
            "errors {errs:?} do not shrink at first order (pairing {pairing})"
        );
    }

    #[test]
    fn brownian_derivative_problem_requires_capabilities() {
        let m = model();
        let batch = sample_paths(&m, 6, 64, 14).unwrap();
        let scheme = SchemeParams::default();
        let xi_plain = TerminalFunctional::new(|p: &Path| p.terminal());
        let gen_plain = Generator::new(|_, y, _, _| y, 1.0, GFunction::Identity);
        let base = solve_bsde(&xi_plain, &gen_plain, &batch, &scheme).unwrap();
        // missing d0 on the terminal
        assert!(matches!(
            build_derivative_problem(&base, &xi_plain, &gen_plain, &batch, 2, 0.0),
            Err(Error::Capability(_))
        ));
        // missing partials on the generator
        let xi = TerminalFunctional::terminal_value();
        assert!(matches!(
            build_derivative_problem(&base, &xi, &gen_plain, &batch, 2, 0.0),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn gamma_domination_holds_for_declared_bound() {
        // |f(X + v 1) - f(X)| for f = sin(X_t) is bounded by |v|
        let m = model();
        let batch = sample_paths(&m, 8, 128, 15).unwrap();
        let scheme = SchemeParams::default();
        let gen = Generator::new(
            |ctx, y, _, _| (ctx.path.values[ctx.step]).sin() + 0.5 * y,
            1.2,
            GFunction::Identity,
        )
        .with_gamma_bound(|_, v| v.abs().min(2.0));
        let xi = TerminalFunctional::terminal_value();
        let base = solve_bsde(&xi, &gen, &batch, &scheme).unwrap();
        let prob = build_derivative_problem(&base, &xi, &gen, &batch, 2, 1.0).unwrap();
        prob.check_gamma_domination().unwrap();
    }

    #[test]
    fn scalar_field_norm_estimate_is_finite() {
        let m = model();
        let batch = sample_paths(&m, 10, 500, 16).unwrap();
        let xi = TerminalFunctional::exp_terminal();
        let points = sample_base_points(&batch, 5, true);
        let field = MalliavinField::of_functional(&xi, &batch, &points).unwrap();
        let norm = field
            .d12_norm_estimate(&batch, &xi.values(&batch))
            .unwrap();
        assert!(norm.is_finite() && norm > 0.0);
    }

    #[test]
    fn chain_rule_identity_composition_returns_inner_field() {
        let m = LevyModel::brownian(1.0, 1.0);
        let batch = sample_paths(&m, 8, 4, 17).unwrap();
        let f = ParametricFunctional {
            eval: Arc::new(|_, y: &[f64]| y[0]),
            partial_y: Some(Arc::new(|_, _| vec![1.0])),
            dw_field: None,
        };
        let g = FunctionalWithDw {
            eval: Arc::new(|p: &Path| p.terminal_brownian()),
            dw: Arc::new(|_, _| 1.0),
        };
        for p in &batch.paths {
            let field = chain_rule_brownian(&f, &[g.clone()], p, &batch.grid).unwrap();
            assert!(field.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn chain_rule_constant_in_y_returns_own_field() {
        let m = LevyModel::brownian(1.0, 1.0);
        let batch = sample_paths(&m, 8, 4, 18).unwrap();
        let f = ParametricFunctional {
            eval: Arc::new(|p: &Path, _| p.terminal_brownian()),
            partial_y: Some(Arc::new(|_, _| vec![0.0])),
            dw_field: Some(Arc::new(|_, _, _| 1.0)),
        };
        let g = FunctionalWithDw {
            eval: Arc::new(|p: &Path| p.terminal_brownian().powi(2)),
            dw: Arc::new(|p: &Path, _| 2.0 * p.terminal_brownian()),
        };
        for p in &batch.paths {
            let field = chain_rule_brownian(&f, &[g.clone()], p, &batch.grid).unwrap();
            assert!(field.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn chain_rule_missing_gradient_is_capability_error() {
        let m = LevyModel::brownian(1.0, 1.0);
        let batch = sample_paths(&m, 4, 1, 19).unwrap();
        let f = ParametricFunctional {
            eval: Arc::new(|_, y: &[f64]| y[0]),
            partial_y: None,
            dw_field: None,
        };
        let g = FunctionalWithDw {
            eval: Arc::new(|p: &Path| p.terminal_brownian()),
            dw: Arc::new(|_, _| 1.0),
        };
        assert!(matches!(
            chain_rule_brownian(&f, &[g], &batch.paths[0], &batch.grid),
            Err(Error::Capability(_))
        ));
    }
}
