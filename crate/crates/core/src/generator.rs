//! BSDE drivers `f_g(h, s, y, z, u) = f(h, s, y, z, [g(u)]_nu)` with the jump
//! aggregate `[g(u)]_nu = int g(u(x)) g1(x) nu(dx)` evaluated as an exact sum
//! over the shared quadrature nodes.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::forward::{simulate_forward, ForwardSdeSpec};
use crate::levy::{Path, PathBatch};

/// Evaluation context handed to driver closures.
pub struct StepCtx<'a> {
    pub path: &'a Path,
    pub path_index: usize,
    pub step: usize,
    pub t: f64,
    /// Forward-process trajectory of this path, when the generator carries one.
    pub forward: Option<&'a [f64]>,
}

impl StepCtx<'_> {
    /// State of the forward process at the current step.
    pub fn forward_state(&self) -> f64 {
        self.forward.expect("driver has no forward component")[self.step]
    }
}

/// The scalar function `g` of the jump aggregate, with its derivative and a
/// Lipschitz bound (`infinity` when only locally Lipschitz).
#[derive(Clone)]
pub enum GFunction {
    Identity,
    /// `g^alpha(x) = (e^{alpha x} - alpha x - 1)/alpha`; locally Lipschitz only.
    Utility { alpha: f64 },
    Truncated(TruncatedGAlpha),
    Custom {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        df: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        lipschitz: f64,
    },
}

impl GFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            GFunction::Identity => x,
            GFunction::Utility { alpha } => utility_g(*alpha, x),
            GFunction::Truncated(t) => t.eval(x),
            GFunction::Custom { f, .. } => f(x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            GFunction::Identity => 1.0,
            GFunction::Utility { alpha } => (alpha * x).exp_m1(),
            GFunction::Truncated(t) => t.deriv(x),
            GFunction::Custom { df, .. } => df(x),
        }
    }

    /// Global bound on `|g'|`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            GFunction::Identity => 1.0,
            GFunction::Utility { .. } => f64::INFINITY,
            GFunction::Truncated(t) => t.lipschitz,
            GFunction::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

fn utility_g(alpha: f64, x: f64) -> f64 {
    ((alpha * x).exp_m1() - alpha * x) / alpha
}

/// `C^1` truncation of the utility function: equals `g^alpha` on `[-2K, 2K]`,
/// supported inside `[-3K, 3K]`, blended by cubic Hermite polynomials on the
/// collars so the function stays `C^1` at the seams.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedGAlpha {
    pub alpha: f64,
    pub k: f64,
    /// Global Lipschitz constant of the truncated function.
    pub lipschitz: f64,
}

/// Builds the truncation; `alpha > 0`, `k > 0`.
pub fn truncate_g_alpha(alpha: f64, k: f64) -> TruncatedGAlpha {
    assert!(alpha > 0.0 && k > 0.0);
    let inner_max = ((alpha * 2.0 * k).exp_m1()).abs().max(((-alpha * 2.0 * k).exp_m1()).abs());
    let right = hermite_to_zero(alpha, 2.0 * k, 3.0 * k);
    let left = hermite_to_zero(alpha, -2.0 * k, -3.0 * k);
    let lipschitz = inner_max.max(right).max(left);
    TruncatedGAlpha { alpha, k, lipschitz }
}

/// Max |p'| of the Hermite cubic that joins `g^alpha` at `a` (value and slope)
/// to zero (value and slope) at `b`.
fn hermite_to_zero(alpha: f64, a: f64, b: f64) -> f64 {
    let (fa, da) = (utility_g(alpha, a), (alpha * a).exp_m1());
    let len = b - a;
    // p(s) = fa h00(s) + da len h10(s), s in [0,1]
    // p'(s)/len: h00' = 6s^2 - 6s, h10' = 3s^2 - 4s + 1
    let dp = |s: f64| (fa * (6.0 * s * s - 6.0 * s) + da * len * (3.0 * s * s - 4.0 * s + 1.0)) / len;
    let c2 = 6.0 * fa + 3.0 * da * len;
    let c1 = -6.0 * fa - 4.0 * da * len;
    let mut worst = dp(0.0).abs().max(dp(1.0).abs());
    if c2 != 0.0 {
        let vertex = -c1 / (2.0 * c2);
        if (0.0..=1.0).contains(&vertex) {
            worst = worst.max(dp(vertex).abs());
        }
    }
    worst
}

impl TruncatedGAlpha {
    fn collar(&self, x: f64) -> Option<(f64, f64)> {
        // Returns (a, b) of the collar containing x, oriented from the seam
        // at 2K (or -2K) toward the outer zero at 3K (or -3K).
        if x > 2.0 * self.k && x < 3.0 * self.k {
            Some((2.0 * self.k, 3.0 * self.k))
        } else if x < -2.0 * self.k && x > -3.0 * self.k {
            Some((-2.0 * self.k, -3.0 * self.k))
        } else {
            None
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x.abs() <= 2.0 * self.k {
            return utility_g(self.alpha, x);
        }
        if x.abs() >= 3.0 * self.k {
            return 0.0;
        }
        let (a, b) = self.collar(x).unwrap();
        let (fa, da) = (utility_g(self.alpha, a), (self.alpha * a).exp_m1());
        let len = b - a;
        let s = (x - a) / len;
        let h00 = 2.0 * s * s * s - 3.0 * s * s + 1.0;
        let h10 = s * s * s - 2.0 * s * s + s;
        fa * h00 + da * len * h10
    }

    pub fn deriv(&self, x: f64) -> f64 {
        if x.abs() <= 2.0 * self.k {
            return (self.alpha * x).exp_m1();
        }
        if x.abs() >= 3.0 * self.k {
            return 0.0;
        }
        let (a, b) = self.collar(x).unwrap();
        let (fa, da) = (utility_g(self.alpha, a), (self.alpha * a).exp_m1());
        let len = b - a;
        let s = (x - a) / len;
        (fa * (6.0 * s * s - 6.0 * s) + da * len * (3.0 * s * s - 4.0 * s + 1.0)) / len
    }
}

/// `[g(u)]_nu = sum_j w_j g(u_j) g1(x_j)` on quadrature nodes `(x_j, w_j)`.
pub fn g_nu(
    g: &GFunction,
    g1: &(dyn Fn(f64) -> f64 + Sync),
    nodes: &[(f64, f64)],
    u: &[f64],
) -> Result<f64> {
    if nodes.len() != u.len() {
        return Err(Error::Shape(format!(
            "{} quadrature nodes but {} u-values",
            nodes.len(),
            u.len()
        )));
    }
    Ok(nodes
        .iter()
        .zip(u)
        .map(|(&(x, w), &uj)| w * g.eval(uj) * g1(x))
        .sum())
}

pub type DriverFn = Arc<dyn Fn(&StepCtx, f64, f64, f64) -> f64 + Send + Sync>;
pub type ForwardPartialFn = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type PartialsFn = Arc<dyn Fn(&StepCtx, f64, f64, f64) -> (f64, f64, f64) + Send + Sync>;
pub type GammaFieldFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Forward-process component of a driver `f(s, Psi_s, y, z, w)`.
#[derive(Clone)]
pub struct ForwardComponent {
    pub spec: ForwardSdeSpec,
    /// Partial derivative of the driver in its forward-state slot,
    /// `(t, psi, y, z, w) -> d f / d psi`, needed for the mark-0 derivative
    /// field of the driver.
    pub f_psi: Option<ForwardPartialFn>,
}

/// The driver `f` with the jump-aggregate machinery and its Lipschitz
/// metadata. `f` receives `(ctx, y, z, w)` where `w` is the aggregated
/// jump slot `[g(u)]_nu`.
#[derive(Clone)]
pub struct Generator {
    pub f: DriverFn,
    pub lipschitz_l_f: f64,
    pub g: GFunction,
    pub g1: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub partials: Option<PartialsFn>,
    /// Dominating field `Gamma(r, v)` for the derivative-driver diagnostics.
    pub gamma_bound: Option<GammaFieldFn>,
    pub forward: Option<ForwardComponent>,
}

impl Generator {
    pub fn new(
        f: impl Fn(&StepCtx, f64, f64, f64) -> f64 + Send + Sync + 'static,
        lipschitz_l_f: f64,
        g: GFunction,
    ) -> Self {
        Generator {
            f: Arc::new(f),
            lipschitz_l_f,
            g,
            g1: Arc::new(|_| 1.0),
            partials: None,
            gamma_bound: None,
            forward: None,
        }
    }

    pub fn zero() -> Self {
        Generator::new(|_, _, _, _| 0.0, 0.0, GFunction::Identity)
    }

    /// `f = alpha y`, with partial derivatives attached.
    pub fn linear(alpha: f64) -> Self {
        Generator::new(move |_, y, _, _| alpha * y, alpha.abs(), GFunction::Identity)
            .with_partials(move |_, _, _, _| (alpha, 0.0, 0.0))
    }

    pub fn with_g1(mut self, g1: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.g1 = Arc::new(g1);
        self
    }

    pub fn with_partials(
        mut self,
        partials: impl Fn(&StepCtx, f64, f64, f64) -> (f64, f64, f64) + Send + Sync + 'static,
    ) -> Self {
        self.partials = Some(Arc::new(partials));
        self
    }

    pub fn with_gamma_bound(mut self, gamma: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.gamma_bound = Some(Arc::new(gamma));
        self
    }

    pub fn with_forward(mut self, spec: ForwardSdeSpec) -> Self {
        self.forward = Some(ForwardComponent { spec, f_psi: None });
        self
    }

    pub fn with_forward_and_partial(
        mut self,
        spec: ForwardSdeSpec,
        f_psi: impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.forward = Some(ForwardComponent {
            spec,
            f_psi: Some(Arc::new(f_psi)),
        });
        self
    }

    /// `||g1||_{L2(nu)}` on the node set.
    pub fn g1_norm(&self, nodes: &[(f64, f64)]) -> f64 {
        nodes
            .iter()
            .map(|&(x, w)| {
                let v = (self.g1)(x);
                w * v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `L_{f,g} = L_f (1 + L_g ||g1||)`, the Lipschitz constant of `f_g` in
    /// `(y, z, u)`.
    pub fn composite_lipschitz(&self, nodes: &[(f64, f64)]) -> f64 {
        self.lipschitz_l_f * (1.0 + self.g.lipschitz() * self.g1_norm(nodes))
    }

    /// `f_g(ctx, y, z, u) = f(ctx, y, z, [g(u)]_nu)`.
    pub fn eval_fg(&self, ctx: &StepCtx, nodes: &[(f64, f64)], y: f64, z: f64, u: &[f64]) -> Result<f64> {
        let w = g_nu(&self.g, self.g1.as_ref(), nodes, u)?;
        Ok((self.f)(ctx, y, z, w))
    }

    /// Sampled check of the declared Lipschitz constant and derivative bound:
    /// probes random argument pairs on paths of the batch.
    pub fn check_lipschitz(&self, batch: &PathBatch, n_probes: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let forward_paths = self.prepare(batch)?.forward_paths;
        for _ in 0..n_probes {
            let pid = rng.gen_range(0..batch.n_paths());
            let step = rng.gen_range(0..batch.grid.n_steps());
            let ctx = StepCtx {
                path: &batch.paths[pid],
                path_index: pid,
                step,
                t: batch.grid.t(step),
                forward: forward_paths.as_ref().map(|f| f[pid].as_slice()),
            };
            let eta: [f64; 3] = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let eta2: [f64; 3] = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let diff = ((self.f)(&ctx, eta[0], eta[1], eta[2])
                - (self.f)(&ctx, eta2[0], eta2[1], eta2[2]))
            .abs();
            let dist = ((eta[0] - eta2[0]).powi(2)
                + (eta[1] - eta2[1]).powi(2)
                + (eta[2] - eta2[2]).powi(2))
            .sqrt();
            if diff > self.lipschitz_l_f * dist + 1e-9 {
                return Err(Error::Parameter(format!(
                    "driver violates declared Lipschitz constant {} (observed ratio {})",
                    self.lipschitz_l_f,
                    diff / dist
                )));
            }
            // |g'| <= L_g on a probe grid
            let lg = self.g.lipschitz();
            if lg.is_finite() {
                let x = rng.gen_range(-5.0..5.0);
                if self.g.deriv(x).abs() > lg + 1e-9 {
                    return Err(Error::Parameter(format!(
                        "g' exceeds declared bound {lg} at {x}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-batch preparation: simulates the forward process on every path
    /// when the generator carries one.
    pub fn prepare(&self, batch: &PathBatch) -> Result<PreparedGenerator> {
        let forward_paths = match &self.forward {
            None => None,
            Some(fc) => Some(
                batch
                    .paths
                    .iter()
                    .map(|p| simulate_forward(&fc.spec, p, &batch.grid, &batch.channels))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(PreparedGenerator {
            generator: self.clone(),
            forward_paths,
            nodes: batch.channels.iter().map(|c| (c.mark, c.weight)).collect(),
        })
    }
}

/// A generator bound to a batch (forward trajectories and quadrature nodes
/// precomputed).
pub struct PreparedGenerator {
    pub generator: Generator,
    pub forward_paths: Option<Vec<Vec<f64>>>,
    pub nodes: Vec<(f64, f64)>,
}

impl PreparedGenerator {
    pub fn ctx<'a>(&'a self, batch: &'a PathBatch, path_index: usize, step: usize) -> StepCtx<'a> {
        StepCtx {
            path: &batch.paths[path_index],
            path_index,
            step,
            t: batch.grid.t(step),
            forward: self.forward_paths.as_ref().map(|f| f[path_index].as_slice()),
        }
    }
}

/// Driver interface used by the backward solver: evaluates the generator (or
/// a derivative-equation driver) at one `(path, step)` with the jump control
/// as a per-node vector, and declares the regression features that make the
/// solution adapted.
pub trait BatchDriver: Sync {
    fn eval(&self, batch: &PathBatch, path_index: usize, step: usize, y: f64, z: f64, u: &[f64]) -> f64;

    /// Lipschitz constant in `y` for the inner fixed point.
    fn y_lipschitz(&self) -> f64;

    fn feature_width(&self) -> usize {
        1
    }

    /// Appends the step-`step` feature vector of every path (row major).
    fn fill_features(&self, batch: &PathBatch, step: usize, out: &mut Vec<f64>) {
        for p in &batch.paths {
            out.push(p.values[step]);
        }
    }
}

impl BatchDriver for PreparedGenerator {
    fn eval(&self, batch: &PathBatch, path_index: usize, step: usize, y: f64, z: f64, u: &[f64]) -> f64 {
        let ctx = self.ctx(batch, path_index, step);
        let w = g_nu(&self.generator.g, self.generator.g1.as_ref(), &self.nodes, u)
            .expect("node count fixed by the batch");
        (self.generator.f)(&ctx, y, z, w)
    }

    fn y_lipschitz(&self) -> f64 {
        self.generator.lipschitz_l_f
    }

    fn feature_width(&self) -> usize {
        if self.forward_paths.is_some() {
            2
        } else {
            1
        }
    }

    fn fill_features(&self, batch: &PathBatch, step: usize, out: &mut Vec<f64>) {
        match &self.forward_paths {
            None => {
                for p in &batch.paths {
                    out.push(p.values[step]);
                }
            }
            Some(fwd) => {
                for (p, psi) in batch.paths.iter().zip(fwd) {
                    out.push(p.values[step]);
                    out.push(psi[step]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_nu_linear_quadrature() {
        // g = id, g1 = 1, nodes +-1 with weights 1: u = (3, 1) -> 4
        let nodes = [(1.0, 1.0), (-1.0, 1.0)];
        let val = g_nu(&GFunction::Identity, &|_| 1.0, &nodes, &[3.0, 1.0]).unwrap();
        assert_eq!(val, 4.0);
    }

    #[test]
    fn g_nu_rejects_shape_mismatch() {
        let nodes = [(1.0, 1.0)];
        assert!(matches!(
            g_nu(&GFunction::Identity, &|_| 1.0, &nodes, &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn utility_g_vanishes_at_zero_for_any_alpha() {
        for alpha in [0.3, 1.0, 2.5] {
            let g = GFunction::Utility { alpha };
            assert_eq!(g.eval(0.0), 0.0);
            let nodes = [(1.0, 1.0), (-1.0, 1.0)];
            assert_eq!(g_nu(&g, &|_| 1.0, &nodes, &[0.0, 0.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn quadrature_refinement_converges_for_smooth_u() {
        // dense nu as a double-exponential density, u smooth in the mark
        let density = |x: f64| 0.5 * (-x.abs() * 2.0).exp() * 2.0;
        let build = |n: usize| {
            let comp = crate::levy::JumpComponent::from_density(1.0, density, 0.05, 3.0, n);
            comp.sizes
                .iter()
                .map(|&(x, p)| (x, p * comp.intensity))
                .collect::<Vec<_>>()
        };
        let g = GFunction::Identity;
        let u_of = |nodes: &[(f64, f64)]| nodes.iter().map(|&(x, _)| (x * 1.3).sin()).collect::<Vec<_>>();

        let coarse = build(40);
        let fine = build(80);
        let reference = build(400); // 10x the coarse resolution
        let v_c = g_nu(&g, &|_| 1.0, &coarse, &u_of(&coarse)).unwrap();
        let v_f = g_nu(&g, &|_| 1.0, &fine, &u_of(&fine)).unwrap();
        let v_r = g_nu(&g, &|_| 1.0, &reference, &u_of(&reference)).unwrap();
        let tol = 2.0 * (v_c - v_r).abs();
        assert!((v_f - v_r).abs() < tol, "refinement did not improve: {v_c} {v_f} {v_r}");
    }

    #[test]
    fn truncation_matches_utility_inside_and_vanishes_outside() {
        let k = 1.5;
        let trunc = truncate_g_alpha(1.0, k);
        for x in [-3.0, -1.0, 0.0, 0.7, 2.9] {
            assert_eq!(trunc.eval(x), utility_g(1.0, x), "x = {x}");
        }
        for x in [4.5, -4.5, 6.0] {
            assert_eq!(trunc.eval(x), 0.0);
            assert_eq!(trunc.deriv(x), 0.0);
        }
    }

    #[test]
    fn truncation_derivative_agrees_with_centered_differences() {
        let trunc = truncate_g_alpha(1.0, 1.0);
        // probes inside the collar and near (not at) the seams
        for x in [2.1, 2.5, 2.9, -2.1, -2.6, -2.95, 1.9, -1.9] {
            let mut prev_err = f64::INFINITY;
            for &h in &[1e-3, 5e-4, 2.5e-4] {
                let fd = (trunc.eval(x + h) - trunc.eval(x - h)) / (2.0 * h);
                let err = (fd - trunc.deriv(x)).abs();
                assert!(err <= prev_err * 0.3 + 1e-12, "x={x} h={h}: {err} vs {prev_err}");
                prev_err = err;
            }
        }
    }

    #[test]
    fn truncation_reports_valid_global_lipschitz_constant() {
        let trunc = truncate_g_alpha(0.8, 2.0);
        let l = trunc.lipschitz;
        let mut x = -7.0;
        while x <= 7.0 {
            assert!(trunc.deriv(x).abs() <= l + 1e-10, "x = {x}");
            x += 0.001;
        }
    }

    #[test]
    fn composite_lipschitz_combines_f_and_g() {
        let gen = Generator::new(|_, y, _, w| y + w, 2.0_f64.sqrt(), GFunction::Identity);
        let nodes = [(1.0, 1.0), (-1.0, 1.0)];
        let expected = 2.0_f64.sqrt() * (1.0 + 2.0_f64.sqrt());
        assert!((gen.composite_lipschitz(&nodes) - expected).abs() < 1e-12);
    }
}
