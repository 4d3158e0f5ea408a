//! Lévy path simulation and deterministic path perturbations.
//!
//! A path is stored as Brownian increments on the grid plus an exact list of
//! jump events `(time, size)`; grid values are rebuilt from the decomposition
//! `X_t = gamma t + sigma W_t + (jumps) - (compensator of compensated marks)`.
//! Jump-size laws are finite discrete distributions, so the Lévy measure is a
//! finite sum of point masses and all `nu`-integrals are exact sums over the
//! shared node set.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// One compound-Poisson component: arrival intensity per unit time and a
/// finite discrete jump-size law `(size, probability)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpComponent {
    pub intensity: f64,
    pub sizes: Vec<(f64, f64)>,
}

impl JumpComponent {
    pub fn new(intensity: f64, sizes: Vec<(f64, f64)>) -> Self {
        JumpComponent { intensity, sizes }
    }

    /// Single deterministic jump size.
    pub fn point(intensity: f64, size: f64) -> Self {
        JumpComponent::new(intensity, vec![(size, 1.0)])
    }

    /// Discretizes a density on `[a, b]` onto `n` equal-width cells
    /// (midpoint size, cell mass as probability weight, renormalized).
    pub fn from_density(intensity: f64, density: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> Self {
        let h = (b - a) / n as f64;
        let mut sizes: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let x = a + (i as f64 + 0.5) * h;
                (x, density(x) * h)
            })
            .collect();
        let total: f64 = sizes.iter().map(|(_, p)| p).sum();
        for s in &mut sizes {
            s.1 /= total;
        }
        JumpComponent::new(intensity, sizes)
    }

    fn validate(&self) -> Result<()> {
        if !self.intensity.is_finite() || self.intensity < 0.0 {
            return Err(Error::Parameter(format!(
                "jump intensity must be finite and >= 0, got {}",
                self.intensity
            )));
        }
        if self.sizes.is_empty() {
            return Err(Error::Sampler("jump-size law has no atoms".into()));
        }
        let mut total = 0.0;
        for &(x, p) in &self.sizes {
            if !x.is_finite() || x == 0.0 {
                return Err(Error::Sampler(format!("jump size must be finite and nonzero, got {x}")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Sampler(format!("jump probability must be >= 0, got {p}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Sampler(format!("jump probabilities sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// The process law: triplet `(gamma, sigma, nu)` with a finite-activity jump
/// part, a small-jump cutoff and the time horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyModel {
    /// Drift per unit time.
    pub gamma: f64,
    /// Brownian scale, `>= 0`.
    pub sigma: f64,
    pub components: Vec<JumpComponent>,
    /// Jumps with `|size| < truncation_epsilon` are dropped, along with their
    /// compensator contribution. Documented bias for infinite-activity laws
    /// represented by finitely many components.
    pub truncation_epsilon: f64,
    /// Horizon `T > 0`.
    pub horizon: f64,
}

/// One retained mark of the Lévy measure: `weight = nu({mark})`.
/// `compensated_in_x` records whether the mark enters the state compensated
/// (`|mark| <= 1`) or uncompensated (`|mark| > 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuNode {
    pub mark: f64,
    pub weight: f64,
    pub compensated_in_x: bool,
}

impl LevyModel {
    pub fn new(gamma: f64, sigma: f64, components: Vec<JumpComponent>, horizon: f64) -> Self {
        LevyModel {
            gamma,
            sigma,
            components,
            truncation_epsilon: 0.0,
            horizon,
        }
    }

    pub fn brownian(sigma: f64, horizon: f64) -> Self {
        LevyModel::new(0.0, sigma, Vec::new(), horizon)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.gamma, self.sigma, self.truncation_epsilon, self.horizon] {
            if !v.is_finite() {
                return Err(Error::Parameter(format!("non-finite model parameter {v}")));
            }
        }
        if self.sigma < 0.0 {
            return Err(Error::Parameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.horizon <= 0.0 {
            return Err(Error::Parameter(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if self.truncation_epsilon < 0.0 {
            return Err(Error::Parameter("truncation_epsilon must be >= 0".into()));
        }
        for c in &self.components {
            c.validate()?;
        }
        let activity: f64 = self.components.iter().map(|c| c.intensity).sum();
        if self.sigma == 0.0 && activity == 0.0 {
            return Err(Error::Parameter(
                "degenerate model: need sigma > 0 or positive jump intensity".into(),
            ));
        }
        Ok(())
    }

    fn retained(&self, size: f64) -> bool {
        size.abs() >= self.truncation_epsilon
    }

    /// Retained marks with merged `nu`-weights, sorted by mark value.
    pub fn nu_nodes(&self) -> Vec<NuNode> {
        let mut nodes: Vec<NuNode> = Vec::new();
        for c in &self.components {
            for &(x, p) in &c.sizes {
                if !self.retained(x) {
                    continue;
                }
                let w = c.intensity * p;
                if let Some(n) = nodes.iter_mut().find(|n| n.mark == x) {
                    n.weight += w;
                } else {
                    nodes.push(NuNode {
                        mark: x,
                        weight: w,
                        compensated_in_x: x.abs() <= 1.0,
                    });
                }
            }
        }
        nodes.sort_by(|a, b| a.mark.total_cmp(&b.mark));
        nodes
    }

    /// `gamma + sum of intensity * E[jump 1_{|jump|>1}]`; compensated marks
    /// contribute zero mean.
    pub fn mean_rate(&self) -> f64 {
        self.gamma
            + self
                .nu_nodes()
                .iter()
                .filter(|n| !n.compensated_in_x)
                .map(|n| n.weight * n.mark)
                .sum::<f64>()
    }

    /// Per-unit-time variance `sigma^2 + sum w_j x_j^2` over retained marks.
    pub fn variance_rate(&self) -> f64 {
        self.sigma * self.sigma
            + self
                .nu_nodes()
                .iter()
                .map(|n| n.weight * n.mark * n.mark)
                .sum::<f64>()
    }

    /// Drift correction from compensated marks: `sum_{|x|<=1} w_j x_j`.
    pub fn x_compensator_rate(&self) -> f64 {
        self.nu_nodes()
            .iter()
            .filter(|n| n.compensated_in_x)
            .map(|n| n.weight * n.mark)
            .sum()
    }
}

/// One jump event. `synthetic` marks events inserted by `shift_path`; they
/// perturb the state but are excluded from the compensated noise channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: f64,
    pub synthetic: bool,
}

/// A single trajectory on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Gaussian increments of `W` per step (not scaled by `sigma`).
    pub brownian_increments: Vec<f64>,
    /// Jump events sorted by time, times in `(0, T]` for sampled paths.
    pub jump_events: Vec<JumpEvent>,
    /// Cumulative values of `X` at the grid points, `values[0] = 0` for
    /// sampled paths.
    pub values: Vec<f64>,
}

impl Path {
    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn supremum(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `W_{t_i}` at every grid point.
    pub fn brownian_path(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.brownian_increments.len() + 1);
        w.push(0.0);
        let mut acc = 0.0;
        for dw in &self.brownian_increments {
            acc += dw;
            w.push(acc);
        }
        w
    }

    pub fn terminal_brownian(&self) -> f64 {
        self.brownian_increments.iter().sum()
    }

    /// Sum of non-synthetic jump marks up to and including `t_i`, per grid point.
    pub fn cumulative_jump_sums(&self, grid: &TimeGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.times().len()];
        for ev in self.jump_events.iter().filter(|e| !e.synthetic) {
            if let Some(step) = grid.step_containing(ev.time) {
                out[step + 1] += ev.mark;
            }
        }
        for i in 1..out.len() {
            out[i] += out[i - 1];
        }
        out
    }

    /// Count of non-synthetic events with the given mark in `(t_i, t_{i+1}]`.
    pub fn jump_count_in_step(&self, grid: &TimeGrid, step: usize, mark: f64) -> usize {
        let (lo, hi) = (grid.t(step), grid.t(step + 1));
        self.jump_events
            .iter()
            .filter(|e| !e.synthetic && e.mark == mark && e.time > lo && e.time <= hi)
            .count()
    }
}

/// Per-mark noise-channel bookkeeping for a batch. For Lévy batches the
/// compensator rate equals the `nu`-weight (Poisson counts); enumerated tree
/// batches override the compensator with the Bernoulli mean while the
/// variance-matched weight stays the model weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStat {
    pub mark: f64,
    /// `nu({mark})`; the quadrature weight and the variance rate of the
    /// compensated count.
    pub weight: f64,
    /// Mean jump count per unit time, used to center the count channel.
    pub compensator_rate: f64,
}

/// A batch of simulated trajectories, immutable after construction.
///
/// `weights` are path probabilities (uniform for Monte Carlo batches, exact
/// outcome probabilities for enumerated tree batches), summing to 1.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub grid: TimeGrid,
    pub model: LevyModel,
    pub channels: Vec<ChannelStat>,
    pub paths: Vec<Path>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn marks(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.mark).collect()
    }

    /// Compensated count increment of mark channel `j` over step `i`:
    /// `#jumps - compensator_rate * dt`.
    pub fn compensated_count(&self, path: &Path, step: usize, channel: usize) -> f64 {
        let c = &self.channels[channel];
        path.jump_count_in_step(&self.grid, step, c.mark) as f64
            - c.compensator_rate * self.grid.dt(step)
    }

    /// Evaluates a functional on every path.
    pub fn map_paths<F: Fn(&Path) -> f64 + Sync>(&self, f: F) -> Vec<f64> {
        self.paths.par_iter().map(&f).collect()
    }

    /// CSV export: one row per path per grid point with columns
    /// `path_id,t,x,w,jump_sum`.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "path_id,t,x,w,jump_sum")?;
        for (pid, path) in self.paths.iter().enumerate() {
            let w = path.brownian_path();
            let jumps = path.cumulative_jump_sums(&self.grid);
            for (i, &t) in self.grid.times().iter().enumerate() {
                writeln!(out, "{},{},{},{},{}", pid, t, path.values[i], w[i], jumps[i])?;
            }
        }
        Ok(())
    }
}

/// Rebuilds grid values from increments and events:
/// `values[i+1] - values[i] = gamma dt + sigma dW + jumps in step - compensator dt`.
fn build_values(
    grid: &TimeGrid,
    gamma: f64,
    sigma: f64,
    x_compensator_rate: f64,
    brownian_increments: &[f64],
    jump_events: &[JumpEvent],
) -> Vec<f64> {
    let n = grid.n_steps();
    let mut jump_in_step = vec![0.0; n];
    for ev in jump_events {
        if let Some(step) = grid.step_containing(ev.time) {
            jump_in_step[step] += ev.mark;
        }
    }
    let mut values = Vec::with_capacity(n + 1);
    values.push(0.0);
    for i in 0..n {
        let dt = grid.dt(i);
        let inc = gamma * dt + sigma * brownian_increments[i] + jump_in_step[i]
            - x_compensator_rate * dt;
        values.push(values[i] + inc);
    }
    values
}

/// Simulates a batch of paths. Deterministic given the seed: each path draws
/// from its own counter-based substream, so the result does not depend on the
/// number of worker threads.
pub fn sample_paths(
    model: &LevyModel,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    model.validate()?;
    if n_steps < 1 || n_paths < 1 {
        return Err(Error::Parameter("n_steps and n_paths must be >= 1".into()));
    }
    let grid = TimeGrid::uniform(model.horizon, n_steps);
    let comp_rate = model.x_compensator_rate();
    let channels: Vec<ChannelStat> = model
        .nu_nodes()
        .iter()
        .map(|n| ChannelStat {
            mark: n.mark,
            weight: n.weight,
            compensator_rate: n.weight,
        })
        .collect();

    let paths: Vec<Path> = (0..n_paths)
        .into_par_iter()
        .map(|pid| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(pid as u64);
            sample_one(model, &grid, comp_rate, &mut rng)
        })
        .collect::<Result<_>>()?;

    Ok(PathBatch {
        grid,
        model: model.clone(),
        channels,
        paths,
        weights: vec![1.0 / n_paths as f64; n_paths],
        seed,
    })
}

fn sample_one(
    model: &LevyModel,
    grid: &TimeGrid,
    comp_rate: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Path> {
    let n = grid.n_steps();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut brownian = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = std_normal.sample(rng);
        brownian.push(z * grid.dt(i).sqrt());
    }

    let horizon = grid.horizon();
    let mut events: Vec<JumpEvent> = Vec::new();
    for comp in &model.components {
        if comp.intensity == 0.0 {
            continue;
        }
        let pois = Poisson::new(comp.intensity * horizon)
            .map_err(|e| Error::Sampler(format!("invalid Poisson rate: {e}")))?;
        let count = pois.sample(rng) as usize;
        for _ in 0..count {
            // (0, T]: flip the unit uniform away from 0.
            let time = horizon * (1.0 - rng.gen::<f64>());
            let mark = sample_size(&comp.sizes, rng)?;
            if mark.abs() >= model.truncation_epsilon {
                events.push(JumpEvent {
                    time,
                    mark,
                    synthetic: false,
                });
            }
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));

    let values = build_values(grid, model.gamma, model.sigma, comp_rate, &brownian, &events);
    Ok(Path {
        brownian_increments: brownian,
        jump_events: events,
        values,
    })
}

fn sample_size(sizes: &[(f64, f64)], rng: &mut ChaCha12Rng) -> Result<f64> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(x, p) in sizes {
        acc += p;
        if u < acc {
            return Ok(x);
        }
    }
    // Guard against accumulated rounding at u ~ 1.
    sizes
        .last()
        .map(|&(x, _)| x)
        .ok_or_else(|| Error::Sampler("empty jump-size law".into()))
}

/// The pathwise perturbation `X + v 1_{[r,T]}`: inserts a synthetic jump event
/// `(r, v)` and raises every grid value at `t_i >= r` by `v`. The input path
/// is unmodified.
pub fn shift_path(path: &Path, grid: &TimeGrid, r: f64, v: f64) -> Result<Path> {
    if !(0.0..=grid.horizon()).contains(&r) {
        return Err(Error::TimeOutOfRange {
            t: r,
            horizon: grid.horizon(),
        });
    }
    let mut shifted = path.clone();
    let pos = shifted
        .jump_events
        .partition_point(|e| e.time <= r);
    shifted.jump_events.insert(
        pos,
        JumpEvent {
            time: r,
            mark: v,
            synthetic: true,
        },
    );
    let from = grid.first_index_at_or_after(r)?;
    for val in &mut shifted.values[from..] {
        *val += v;
    }
    Ok(shifted)
}

/// Restricts a batch to every `factor`-th grid point: Brownian increments
/// are summed per coarse step, jump events are kept verbatim, and values are
/// the exact restriction of the fine values. Used for common-random-number
/// time-step sweeps.
pub fn coarsen_batch(batch: &PathBatch, factor: usize) -> Result<PathBatch> {
    let n = batch.grid.n_steps();
    if factor == 0 || !n.is_multiple_of(factor) {
        return Err(Error::GridMismatch(format!(
            "coarsening factor {factor} does not divide {n} steps"
        )));
    }
    let times: Vec<f64> = (0..=n / factor)
        .map(|i| batch.grid.t(i * factor))
        .collect();
    let grid = TimeGrid::from_times(times)?;
    let paths = batch
        .paths
        .iter()
        .map(|p| {
            let brownian = (0..n / factor)
                .map(|i| p.brownian_increments[i * factor..(i + 1) * factor].iter().sum())
                .collect();
            let values = (0..=n / factor).map(|i| p.values[i * factor]).collect();
            Path {
                brownian_increments: brownian,
                jump_events: p.jump_events.clone(),
                values,
            }
        })
        .collect();
    Ok(PathBatch {
        grid,
        model: batch.model.clone(),
        channels: batch.channels.clone(),
        paths,
        weights: batch.weights.clone(),
        seed: batch.seed,
    })
}

/// Shifts every path of the batch at the same base point `(r, v)`.
pub fn shift_batch(batch: &PathBatch, r: f64, v: f64) -> Result<PathBatch> {
    let paths = batch
        .paths
        .iter()
        .map(|p| shift_path(p, &batch.grid, r, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathBatch {
        grid: batch.grid.clone(),
        model: batch.model.clone(),
        channels: batch.channels.clone(),
        paths,
        weights: batch.weights.clone(),
        seed: batch.seed,
    })
}

/// A Cameron–Martin direction: `h` as step values on the grid and its running
/// integral `g_h(t) = int_0^t h(s) ds`, exact for the step representation.
#[derive(Debug, Clone, PartialEq)]
pub struct CameronMartinDirection {
    h: Vec<f64>,
    g_h: Vec<f64>,
}

impl CameronMartinDirection {
    pub fn from_step_values(grid: &TimeGrid, h: Vec<f64>) -> Result<Self> {
        if h.len() != grid.n_steps() {
            return Err(Error::GridMismatch(format!(
                "direction has {} step values, grid has {} steps",
                h.len(),
                grid.n_steps()
            )));
        }
        let mut g_h = Vec::with_capacity(h.len() + 1);
        g_h.push(0.0);
        for (i, hi) in h.iter().enumerate() {
            g_h.push(g_h[i] + hi * grid.dt(i));
        }
        Ok(CameronMartinDirection { h, g_h })
    }

    pub fn from_fn(grid: &TimeGrid, h: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n_steps()).map(|i| h(grid.t(i))).collect();
        Self::from_step_values(grid, values).unwrap()
    }

    pub fn constant(grid: &TimeGrid, c: f64) -> Self {
        Self::from_fn(grid, |_| c)
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// `g_h` at every grid point; `g_h(0) = 0`.
    pub fn running_integral(&self) -> &[f64] {
        &self.g_h
    }

    /// `||h||^2 = sum h_i^2 dt_i`, the quadrature used everywhere.
    pub fn norm_sq(&self, grid: &TimeGrid) -> f64 {
        self.h
            .iter()
            .enumerate()
            .map(|(i, hi)| hi * hi * grid.dt(i))
            .sum()
    }

    /// Left-endpoint Riemann sum `int h dW = sum h(t_i) dW_i`.
    pub fn wiener_integral(&self, path: &Path) -> f64 {
        self.h
            .iter()
            .zip(&path.brownian_increments)
            .map(|(h, dw)| h * dw)
            .sum()
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.h.len() != grid.n_steps() {
            return Err(Error::GridMismatch(format!(
                "direction has {} step values, grid has {} steps",
                self.h.len(),
                grid.n_steps()
            )));
        }
        Ok(())
    }
}

/// Translates the Brownian component only: `dW_i -> dW_i + u * dg_h(i)`;
/// jump events are untouched and values gain `sigma * u * g_h(t_i)`.
pub fn cameron_martin_shift(
    path: &Path,
    grid: &TimeGrid,
    sigma: f64,
    dir: &CameronMartinDirection,
    u: f64,
) -> Result<Path> {
    dir.check_grid(grid)?;
    let mut shifted = path.clone();
    for i in 0..grid.n_steps() {
        let dg = dir.g_h[i + 1] - dir.g_h[i];
        shifted.brownian_increments[i] += u * dg;
        shifted.values[i + 1] += sigma * u * dir.g_h[i + 1];
    }
    Ok(shifted)
}

/// The two Girsanov factors of a Cameron–Martin direction along a path.
#[derive(Debug, Clone, Copy)]
pub struct GirsanovDensity {
    /// `int h dW`, left-endpoint sum on the grid.
    pub wiener_integral: f64,
    /// `||h||^2`.
    pub h_norm_sq: f64,
}

impl GirsanovDensity {
    /// `exp{int h dW - 1/2 ||h||^2}`: the change-of-variables weight with
    /// `E[F(W + g_h)] = E[F(W) * shift_weight]`.
    pub fn shift_weight(&self) -> f64 {
        (self.wiener_integral - 0.5 * self.h_norm_sq).exp()
    }

    /// `exp{-1/2 ||h||^2 - int h dW}`: the Radon–Nikodym density of the law
    /// of the shifted configuration (the reciprocal-shift convention).
    pub fn pushforward_density(&self) -> f64 {
        (-0.5 * self.h_norm_sq - self.wiener_integral).exp()
    }
}

/// Evaluates both Girsanov factors; strictly positive by construction.
pub fn girsanov_density(path: &Path, grid: &TimeGrid, dir: &CameronMartinDirection) -> GirsanovDensity {
    debug_assert_eq!(dir.h.len(), grid.n_steps());
    GirsanovDensity {
        wiener_integral: dir.wiener_integral(path),
        h_norm_sq: dir.norm_sq(grid),
    }
}
