//! Independent ground truth: exact backward induction on a small enumerated
//! tree, closed forms for linear drivers, and the sequence-bound monitor used
//! to audit Picard convergence.

use crate::bsde::{BsdeSolution, TerminalFunctional};
use crate::error::{Error, Result};
use crate::generator::BatchDriver;
use crate::grid::TimeGrid;
use crate::levy::{ChannelStat, JumpEvent, LevyModel, Path, PathBatch};
use crate::regression::BasisSpec;

pub const TREE_OUTCOME_BUDGET: usize = 100_000;

/// One jump channel of the tree: per step the node fires with probability
/// `p`, chosen so that the compensated indicator `1_fire - p` has variance
/// `weight * dt` exactly (two-point moment matching; `p ~ weight * dt`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeJumpNode {
    pub mark: f64,
    pub weight: f64,
    pub p: f64,
}

/// A discrete outcome tree whose per-step increments match the first two
/// moments of the continuous model exactly: the Brownian branch takes
/// `+-sqrt(dt)` equiprobably, each jump node is an independent Bernoulli,
/// and the state carries the model's mean rate as drift with every jump
/// channel compensated by its Bernoulli mean.
#[derive(Debug, Clone)]
pub struct TreeModel {
    pub grid: TimeGrid,
    pub sigma: f64,
    pub drift_rate: f64,
    pub nodes: Vec<TreeJumpNode>,
    source: LevyModel,
}

/// Builds a tree from a model on a uniform grid with `n_steps <= 6`.
pub fn tree_from_model(model: &LevyModel, n_steps: usize) -> Result<TreeModel> {
    model.validate()?;
    if n_steps == 0 || n_steps > 6 {
        return Err(Error::Parameter(format!(
            "tree depth must be in 1..=6, got {n_steps}"
        )));
    }
    let grid = TimeGrid::uniform(model.horizon, n_steps);
    let dt = grid.dt(0);
    let mut nodes = Vec::new();
    for n in model.nu_nodes() {
        let q = n.weight * dt;
        if q > 0.25 {
            return Err(Error::Parameter(format!(
                "weight * dt = {q} > 1/4 for mark {}; refine the grid",
                n.mark
            )));
        }
        // p(1-p) = w dt, smaller root
        let p = 0.5 * (1.0 - (1.0 - 4.0 * q).sqrt());
        nodes.push(TreeJumpNode {
            mark: n.mark,
            weight: n.weight,
            p,
        });
    }
    let tree = TreeModel {
        grid,
        sigma: model.sigma,
        drift_rate: model.mean_rate(),
        nodes,
        source: model.clone(),
    };
    let outcomes = tree.n_leaves_checked()?;
    debug_assert!(outcomes >= 1);
    Ok(tree)
}

impl TreeModel {
    /// Direct construction from parts; `tree_from_model` is the usual route.
    pub fn from_parts(
        grid: TimeGrid,
        sigma: f64,
        drift_rate: f64,
        nodes: Vec<TreeJumpNode>,
        source: LevyModel,
    ) -> Self {
        TreeModel {
            grid,
            sigma,
            drift_rate,
            nodes,
            source,
        }
    }

    /// Branches per step: 2 for the Brownian sign (when sigma > 0) times 2
    /// per jump node.
    pub fn branching(&self) -> usize {
        let brownian = if self.sigma > 0.0 { 2 } else { 1 };
        brownian << self.nodes.len()
    }

    pub fn n_leaves_checked(&self) -> Result<usize> {
        let b = self.branching();
        let mut total: usize = 1;
        for _ in 0..self.grid.n_steps() {
            total = total.checked_mul(b).ok_or(Error::TreeSize {
                outcomes: usize::MAX,
                budget: TREE_OUTCOME_BUDGET,
            })?;
        }
        if total > TREE_OUTCOME_BUDGET {
            return Err(Error::TreeSize {
                outcomes: total,
                budget: TREE_OUTCOME_BUDGET,
            });
        }
        Ok(total)
    }

    fn branch_dw(&self, branch: usize, dt: f64) -> f64 {
        if self.sigma > 0.0 {
            if branch & 1 == 0 {
                dt.sqrt()
            } else {
                -dt.sqrt()
            }
        } else {
            0.0
        }
    }

    fn branch_fires(&self, branch: usize, node: usize) -> bool {
        let shift = if self.sigma > 0.0 { 1 } else { 0 };
        (branch >> (shift + node)) & 1 == 1
    }

    pub fn branch_probability(&self, branch: usize) -> f64 {
        let mut prob = if self.sigma > 0.0 { 0.5 } else { 1.0 };
        for (j, node) in self.nodes.iter().enumerate() {
            prob *= if self.branch_fires(branch, j) {
                node.p
            } else {
                1.0 - node.p
            };
        }
        prob
    }

    fn branch_increment(&self, branch: usize, dt: f64) -> f64 {
        let mut inc = self.drift_rate * dt + self.sigma * self.branch_dw(branch, dt);
        for (j, node) in self.nodes.iter().enumerate() {
            let fired = if self.branch_fires(branch, j) { 1.0 } else { 0.0 };
            inc += node.mark * (fired - node.p);
        }
        inc
    }

    /// Branch digits of a leaf, step by step (most significant first).
    pub fn leaf_digits(&self, leaf: usize) -> Vec<usize> {
        let b = self.branching();
        let n = self.grid.n_steps();
        let mut digits = vec![0usize; n];
        let mut rest = leaf;
        for i in (0..n).rev() {
            digits[i] = rest % b;
            rest /= b;
        }
        digits
    }

    /// Enumerates the full outcome tree as a weighted batch: one path per
    /// leaf, path weight = outcome probability. The regression solver run on
    /// this batch sees exactly the tree measure.
    pub fn enumerate_batch(&self) -> Result<PathBatch> {
        let n_leaves = self.n_leaves_checked()?;
        let n = self.grid.n_steps();
        let dt = self.grid.dt(0);
        let mut paths = Vec::with_capacity(n_leaves);
        let mut weights = Vec::with_capacity(n_leaves);
        for leaf in 0..n_leaves {
            let digits = self.leaf_digits(leaf);
            let mut brownian = Vec::with_capacity(n);
            let mut events = Vec::new();
            let mut values = Vec::with_capacity(n + 1);
            values.push(0.0);
            let mut prob = 1.0;
            for (i, &b) in digits.iter().enumerate() {
                brownian.push(self.branch_dw(b, dt));
                for (j, node) in self.nodes.iter().enumerate() {
                    if self.branch_fires(b, j) {
                        events.push(JumpEvent {
                            time: self.grid.t(i + 1),
                            mark: node.mark,
                            synthetic: false,
                        });
                    }
                }
                values.push(values[i] + self.branch_increment(b, dt));
                prob *= self.branch_probability(b);
            }
            paths.push(Path {
                brownian_increments: brownian,
                jump_events: events,
                values,
            });
            weights.push(prob);
        }
        let channels = self
            .nodes
            .iter()
            .map(|node| ChannelStat {
                mark: node.mark,
                weight: node.weight,
                compensator_rate: node.p / dt,
            })
            .collect();
        Ok(PathBatch {
            grid: self.grid.clone(),
            model: self.source.clone(),
            channels,
            paths,
            weights,
            seed: 0,
        })
    }

    /// Sum of all outcome probabilities; equals 1 up to rounding.
    pub fn probability_mass(&self) -> Result<f64> {
        let batch = self.enumerate_batch()?;
        Ok(batch.weights.iter().sum())
    }

    /// Per-step `(mean, variance)` of the tree increment.
    pub fn step_moments(&self) -> (f64, f64) {
        let dt = self.grid.dt(0);
        let mean = self.drift_rate * dt;
        let var = self.sigma * self.sigma * dt
            + self
                .nodes
                .iter()
                .map(|n| n.mark * n.mark * n.p * (1.0 - n.p))
                .sum::<f64>();
        (mean, var)
    }
}

const TREE_FIXED_POINT_TOL: f64 = 1e-14;

/// Exact backward induction on the enumerated tree: per-node conditional
/// expectations are probability-weighted sums over the one-step branches,
/// the controls come from exact covariances with the `dW` and `dN~` channels,
/// and the inner `Y` fixed point is iterated to 1e-14.
///
/// Returns the solution on the same per-leaf layout as the regression solver
/// for direct diffing.
pub fn tree_backward(
    tree: &TreeModel,
    batch: &PathBatch,
    xi: &TerminalFunctional,
    driver: &dyn BatchDriver,
) -> Result<BsdeSolution> {
    let n = tree.grid.n_steps();
    let b = tree.branching();
    let n_leaves = batch.n_paths();
    let dt = tree.grid.dt(0);
    let n_marks = tree.nodes.len();

    let mut sol = BsdeSolution::zeros(batch, BasisSpec::Indicator);
    let mut y_next: Vec<f64> = batch.paths.iter().map(|p| (xi.eval)(p)).collect();
    for (p, &v) in y_next.iter().enumerate() {
        sol.y[p][n] = v;
    }

    let mut span = 1; // leaves per child group at the current step
    for step in (0..n).rev() {
        let n_groups = n_leaves / (span * b);
        let mut y_now = vec![0.0; n_leaves];
        for g in 0..n_groups {
            let first_leaf = g * span * b;
            // conditional mean over the step's branches
            let mut mean = 0.0;
            for br in 0..b {
                mean += tree.branch_probability(br) * y_next[first_leaf + br * span];
            }
            // centered covariances with the noise channels
            let mut z = 0.0;
            let mut u = vec![0.0; n_marks];
            for br in 0..b {
                let prob = tree.branch_probability(br);
                let centered = y_next[first_leaf + br * span] - mean;
                if tree.sigma > 0.0 {
                    z += prob * centered * tree.branch_dw(br, dt) / dt;
                }
                for ((j, node), uj) in tree.nodes.iter().enumerate().zip(u.iter_mut()) {
                    let fired = if tree.branch_fires(br, j) { 1.0 } else { 0.0 };
                    *uj += prob * centered * (fired - node.p) / (node.weight * dt);
                }
            }
            // inner fixed point to machine tolerance
            let mut y = mean;
            let mut converged = false;
            for _ in 0..500 {
                let next = mean + dt * driver.eval(batch, first_leaf, step, y, z, &u);
                if (next - y).abs() <= TREE_FIXED_POINT_TOL {
                    y = next;
                    converged = true;
                    break;
                }
                y = next;
            }
            if !converged {
                return Err(Error::Contraction {
                    step,
                    residual: f64::NAN,
                    iters: 500,
                });
            }
            for leaf in first_leaf..first_leaf + span * b {
                y_now[leaf] = y;
                sol.y[leaf][step] = y;
                sol.z[leaf][step] = z;
                for (j, &uj) in u.iter().enumerate() {
                    sol.u[leaf][step * n_marks + j] = uj;
                }
            }
        }
        y_next = y_now;
        span *= b;
    }
    Ok(sol)
}

/// Which terminal conditions the linear closed form supports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XiKind {
    TerminalValue,
    Constant(f64),
}

impl XiKind {
    pub fn parse(name: &str, constant: Option<f64>) -> Result<Self> {
        match name {
            "terminal_value" => Ok(XiKind::TerminalValue),
            "constant" => Ok(XiKind::Constant(constant.ok_or_else(|| {
                Error::Capability("constant terminal needs a value".into())
            })?)),
            other => Err(Error::Capability(format!(
                "no closed form for terminal kind '{other}'"
            ))),
        }
    }
}

/// Exact solution of the BSDE with driver `f = alpha y`:
/// for `xi = X_T`, `Y_t = e^{alpha(T-t)}(X_t + m(T-t))` with `m` the model's
/// mean rate, `Z_t = sigma e^{alpha(T-t)}` (dW-integrand),
/// `U_t(x) = x e^{alpha(T-t)}`, and for `v != 0, r <= t`
/// `D_{r,v} Y_t = v e^{alpha(T-t)}`; the mark-0 channel is `e^{alpha(T-t)}`.
#[derive(Debug, Clone, Copy)]
pub struct ClosedFormLinear {
    pub alpha: f64,
    pub mean_rate: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub kind: XiKind,
}

pub fn closed_form_linear(model: &LevyModel, alpha: f64, kind: XiKind) -> ClosedFormLinear {
    ClosedFormLinear {
        alpha,
        mean_rate: model.mean_rate(),
        sigma: model.sigma,
        horizon: model.horizon,
        kind,
    }
}

impl ClosedFormLinear {
    fn phi(&self, t: f64) -> f64 {
        (self.alpha * (self.horizon - t)).exp()
    }

    pub fn y(&self, t: f64, x_t: f64) -> f64 {
        match self.kind {
            XiKind::TerminalValue => self.phi(t) * (x_t + self.mean_rate * (self.horizon - t)),
            XiKind::Constant(c) => c * self.phi(t),
        }
    }

    pub fn y0(&self) -> f64 {
        self.y(0.0, 0.0)
    }

    /// dW-integrand.
    pub fn z(&self, t: f64) -> f64 {
        match self.kind {
            XiKind::TerminalValue => self.sigma * self.phi(t),
            XiKind::Constant(_) => 0.0,
        }
    }

    pub fn u(&self, t: f64, mark: f64) -> f64 {
        match self.kind {
            XiKind::TerminalValue => mark * self.phi(t),
            XiKind::Constant(_) => 0.0,
        }
    }

    /// `D_{r,v} Y_t / v` for the jump channel, `r <= t`.
    pub fn jump_derivative_per_unit(&self, t: f64) -> f64 {
        match self.kind {
            XiKind::TerminalValue => self.phi(t),
            XiKind::Constant(_) => 0.0,
        }
    }

    /// Mark-0 chaos channel of `D Y_t` (the dW-integrand divided by sigma).
    pub fn mark0_channel(&self, t: f64) -> f64 {
        match self.kind {
            XiKind::TerminalValue => self.phi(t),
            XiKind::Constant(_) => 0.0,
        }
    }
}

/// Outcome of the sequence-bound check on recorded gaps.
#[derive(Debug, Clone)]
pub struct GronwallVerdict {
    pub hypothesis_ok: bool,
    pub first_violation: Option<usize>,
    /// `2 epsilon` plus the max tail `C` when `C` is not identically zero.
    pub conclusion_bound: f64,
    /// Max of the final quarter of the recorded gaps (the finite-horizon
    /// reading of the limsup).
    pub tail_max: f64,
    pub pass: bool,
    pub interpretation: String,
}

/// Verifies `g_{n+1} <= epsilon + C_n + g_n / 2` on the recorded sequence and
/// evaluates the conclusion: every `g_n <= 2 epsilon` when `C = 0`, otherwise
/// the final-quarter max must be `<= 2 epsilon + max tail C`.
///
/// Requires `g_0 = 0` and one `C` term per transition.
pub fn gronwall_check(gaps: &[f64], epsilon: f64, c_terms: &[f64]) -> Result<GronwallVerdict> {
    if gaps.is_empty() || gaps[0] != 0.0 {
        return Err(Error::Parameter("gap sequence must start at g_0 = 0".into()));
    }
    if gaps.iter().any(|&g| g.is_nan() || g < 0.0) {
        return Err(Error::Parameter("gaps must be nonnegative".into()));
    }
    if c_terms.len() + 1 != gaps.len() {
        return Err(Error::Shape(format!(
            "{} C-terms for {} gaps; need one per transition",
            c_terms.len(),
            gaps.len()
        )));
    }
    let mut first_violation = None;
    for n in 0..gaps.len() - 1 {
        let bound = epsilon + c_terms[n] + 0.5 * gaps[n];
        if gaps[n + 1] > bound * (1.0 + 1e-12) + 1e-300 {
            first_violation = Some(n);
            break;
        }
    }
    let hypothesis_ok = first_violation.is_none();

    let zero_c = c_terms.iter().all(|&c| c == 0.0);
    let tail_start = gaps.len() - (gaps.len() / 4).max(1);
    let tail_max = gaps[tail_start..]
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);

    let (conclusion_bound, conclusion_ok, interpretation) = if zero_c {
        let bound = 2.0 * epsilon;
        let ok = gaps.iter().all(|&g| g <= bound * (1.0 + 1e-12));
        (
            bound,
            ok,
            format!("C = 0: every recorded gap must stay <= 2 epsilon = {bound:.3e}"),
        )
    } else {
        // The recursion convolves the inhomogeneity with a geometric kernel
        // of mass 2; factor 4 leaves headroom for slowly decaying C.
        let tail_c = c_terms[tail_start.saturating_sub(1).min(c_terms.len() - 1)..]
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max);
        let bound = 2.0 * epsilon + 4.0 * tail_c;
        let ok = tail_max <= bound * (1.0 + 1e-12);
        (
            bound,
            ok,
            format!(
                "limsup read as max over the final quarter ({} of {} entries) \
                 against 2 epsilon + 4 max tail C = {bound:.3e}",
                gaps.len() - tail_start,
                gaps.len()
            ),
        )
    };

    Ok(GronwallVerdict {
        hypothesis_ok,
        first_violation,
        conclusion_bound,
        tail_max,
        pass: hypothesis_ok && conclusion_ok,
        interpretation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_bsde, SchemeParams};
    use crate::generator::Generator;
    use crate::levy::JumpComponent;

    fn model() -> LevyModel {
        LevyModel::new(
            0.1,
            1.0,
            vec![JumpComponent::point(0.5, 1.0)],
            1.0,
        )
    }

    #[test]
    fn tree_probabilities_sum_to_one() {
        let tree = tree_from_model(&model(), 4).unwrap();
        assert!((tree.probability_mass().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tree_step_moments_match_continuous_model() {
        let m = model();
        let tree = tree_from_model(&m, 4).unwrap();
        let dt = tree.grid.dt(0);
        let (mean, var) = tree.step_moments();
        assert!((mean - m.mean_rate() * dt).abs() < 1e-14);
        assert!((var - m.variance_rate() * dt).abs() < 1e-14);
    }

    #[test]
    fn tree_batch_mean_and_variance_agree_with_model() {
        let m = model();
        let tree = tree_from_model(&m, 5).unwrap();
        let batch = tree.enumerate_batch().unwrap();
        let mean: f64 = batch
            .paths
            .iter()
            .zip(&batch.weights)
            .map(|(p, w)| w * p.terminal())
            .sum();
        let var: f64 = batch
            .paths
            .iter()
            .zip(&batch.weights)
            .map(|(p, w)| w * (p.terminal() - mean).powi(2))
            .sum();
        assert!((mean - m.mean_rate() * m.horizon).abs() < 1e-12);
        assert!((var - m.variance_rate() * m.horizon).abs() < 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let m = LevyModel::new(
            0.0,
            1.0,
            (0..8)
                .map(|i| JumpComponent::point(0.1, 0.1 + i as f64 * 0.05))
                .collect(),
            1.0,
        );
        assert!(matches!(
            tree_from_model(&m, 6),
            Err(Error::TreeSize { .. })
        ));
    }

    #[test]
    fn deterministic_tree_is_direct_recursion() {
        // no Brownian branch, no jump nodes: Y_0 = xi + sum f dt
        let source = LevyModel::new(0.4, 1.0, Vec::new(), 1.0);
        let tree = TreeModel::from_parts(TimeGrid::uniform(1.0, 4), 0.0, 0.4, Vec::new(), source);
        let batch = tree.enumerate_batch().unwrap();
        assert_eq!(batch.n_paths(), 1);
        let gen = Generator::new(
            |ctx, _, _, _| 2.0 * ctx.t + 1.0,
            0.0,
            crate::generator::GFunction::Identity,
        );
        let prepared = gen.prepare(&batch).unwrap();
        let xi = TerminalFunctional::constant(1.0);
        let sol = tree_backward(&tree, &batch, &xi, &prepared).unwrap();
        // sum over steps of (2 t_i + 1) dt with dt = 1/4
        let expected: f64 =
            (0..4).map(|i| (2.0 * (i as f64) * 0.25 + 1.0) * 0.25).sum::<f64>() + 1.0;
        assert!((sol.y[0][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn one_step_pure_brownian_tree_by_hand() {
        // dt = 1, outcomes +-1: Y_0 = 0, Z_0 = 1 for xi = X_T, f = 0
        let m = LevyModel::brownian(1.0, 1.0);
        let tree = tree_from_model(&m, 1).unwrap();
        let batch = tree.enumerate_batch().unwrap();
        let gen = Generator::zero();
        let prepared = gen.prepare(&batch).unwrap();
        let sol = tree_backward(&tree, &batch, &TerminalFunctional::terminal_value(), &prepared).unwrap();
        assert!((sol.y[0][0] - 0.0).abs() < 1e-14);
        assert!((sol.z[0][0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn regression_solver_with_indicator_basis_matches_tree_backward() {
        let m = model();
        let tree = tree_from_model(&m, 4).unwrap();
        let batch = tree.enumerate_batch().unwrap();
        let gen = Generator::linear(0.5);
        let prepared = gen.prepare(&batch).unwrap();
        let xi = TerminalFunctional::terminal_value();
        let exact = tree_backward(&tree, &batch, &xi, &prepared).unwrap();
        let scheme = SchemeParams {
            basis: BasisSpec::Indicator,
            picard_tol: 1e-14,
            max_picard_iters: 500,
            z_as_m_channel: false,
        };
        let regressed = solve_bsde(&xi, &gen, &batch, &scheme).unwrap();
        assert!((regressed.y0(&batch) - exact.y0(&batch)).abs() <= 1e-10);
        assert!((regressed.z0(&batch) - exact.z0(&batch)).abs() <= 1e-10);
        assert!((regressed.u0(&batch, 0) - exact.u0(&batch, 0)).abs() <= 1e-10);
    }

    #[test]
    fn closed_form_linear_alpha_zero_is_conditional_mean() {
        let m = model();
        let cf = closed_form_linear(&m, 0.0, XiKind::TerminalValue);
        assert!((cf.y(0.3, 1.2) - (1.2 + m.mean_rate() * 0.7)).abs() < 1e-14);
        assert!((cf.z(0.5) - m.sigma).abs() < 1e-14);
    }

    #[test]
    fn closed_form_constant_terminal_is_deterministic_ode() {
        let m = model();
        let cf = closed_form_linear(&m, 0.8, XiKind::Constant(3.0));
        assert!((cf.y(0.0, 123.0) - 3.0 * (0.8f64).exp()).abs() < 1e-12);
        assert_eq!(cf.z(0.2), 0.0);
        assert_eq!(cf.u(0.2, 1.0), 0.0);
    }

    #[test]
    fn closed_form_matches_tree_backward_to_two_percent() {
        let m = model();
        let alpha = 0.25; // dt = 1/4: keeps the one-step driver bias below 2%
        let tree = tree_from_model(&m, 4).unwrap();
        let batch = tree.enumerate_batch().unwrap();
        let gen = Generator::linear(alpha);
        let prepared = gen.prepare(&batch).unwrap();
        let xi = TerminalFunctional::terminal_value();
        let sol = tree_backward(&tree, &batch, &xi, &prepared).unwrap();
        let cf = closed_form_linear(&m, alpha, XiKind::TerminalValue);
        let rel = (sol.y[0][0] - cf.y0()).abs() / cf.y0().abs();
        assert!(rel <= 0.02, "tree vs closed form: {rel}");
    }

    #[test]
    fn closed_form_satisfies_discrete_recursion_to_second_order() {
        let m = model();
        let alpha = 0.7;
        let cf = closed_form_linear(&m, alpha, XiKind::TerminalValue);
        let mut residuals = Vec::new();
        for steps in [2usize, 4] {
            let tree = tree_from_model(&m, steps).unwrap();
            let dt = tree.grid.dt(0);
            // residual of the one-step recursion at the root
            let mut exp_next = 0.0;
            for br in 0..tree.branching() {
                let prob = tree.branch_probability(br);
                let x_next = tree.branch_increment(br, dt);
                exp_next += prob * cf.y(dt, x_next);
            }
            let lhs = cf.y(0.0, 0.0);
            let rhs = exp_next + dt * alpha * cf.y(0.0, 0.0);
            residuals.push((lhs - rhs).abs());
        }
        // halving dt divides the one-step residual by ~4
        let ratio = residuals[0] / residuals[1];
        assert!(
            (2.5..6.0).contains(&ratio),
            "residuals {residuals:?} ratio {ratio}"
        );
    }

    #[test]
    fn gronwall_geometric_recursion_passes() {
        let eps = 0.1;
        let mut gaps = vec![0.0];
        for n in 0..40 {
            gaps.push(eps + 0.5 * gaps[n]);
        }
        let verdict = gronwall_check(&gaps, eps, &vec![0.0; 40]).unwrap();
        assert!(verdict.hypothesis_ok);
        assert!(verdict.pass);
        assert!(gaps.iter().all(|&g| g <= 2.0 * eps + 1e-12));
    }

    #[test]
    fn gronwall_flags_hypothesis_violation_with_index() {
        let gaps = vec![0.0, 0.05, 0.5];
        let verdict = gronwall_check(&gaps, 0.05, &[0.0, 0.0]).unwrap();
        assert!(!verdict.hypothesis_ok);
        assert_eq!(verdict.first_violation, Some(1));
        assert!(!verdict.pass);
    }

    #[test]
    fn gronwall_with_decaying_c_terms_checks_the_tail() {
        let eps = 0.01;
        let c: Vec<f64> = (0..60).map(|n| 1.0 / (n as f64 + 1.0)).collect();
        let mut gaps = vec![0.0];
        for n in 0..60 {
            gaps.push(eps + c[n] + 0.5 * gaps[n]);
        }
        let verdict = gronwall_check(&gaps, eps, &c).unwrap();
        assert!(verdict.hypothesis_ok);
        assert!(verdict.pass, "{}", verdict.interpretation);
    }
}
