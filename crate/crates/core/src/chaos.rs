//! The random measure `M(dt,dx) = sigma dW delta_0(dx) + N~(dt,dx)`, its
//! control measure `m = lambda (x) mu` with `mu = sigma^2 delta_0 + nu`, and
//! multiple stochastic integrals of order one and two against simple kernels.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::{LevyModel, Path};

/// The mark-space measure `mu = sigma^2 delta_0 + nu` together with the
/// horizon, so that `m([0,T] x R) = T (sigma^2 + nu(R))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSpec {
    pub sigma_sq: f64,
    /// `(mark, nu-weight)` pairs, marks nonzero.
    pub nu: Vec<(f64, f64)>,
    pub horizon: f64,
}

impl MeasureSpec {
    pub fn from_model(model: &LevyModel) -> Self {
        MeasureSpec {
            sigma_sq: model.sigma * model.sigma,
            nu: model.nu_nodes().iter().map(|n| (n.mark, n.weight)).collect(),
            horizon: model.horizon,
        }
    }

    /// All marks including the Brownian mark 0, with their `mu`-weights.
    pub fn marks_with_weights(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, self.sigma_sq)];
        out.extend(self.nu.iter().copied());
        out
    }

    pub fn mu_weight(&self, mark: f64) -> Result<f64> {
        if mark == 0.0 {
            return Ok(self.sigma_sq);
        }
        self.nu
            .iter()
            .find(|(m, _)| *m == mark)
            .map(|(_, w)| *w)
            .ok_or(Error::UnknownMark(mark))
    }

    pub fn total_mass(&self) -> f64 {
        self.horizon * (self.sigma_sq + self.nu.iter().map(|(_, w)| w).sum::<f64>())
    }
}

/// Order-1 simple kernel: piecewise constant on grid cells x marks.
/// `values[step][mark_index]` with marks indexed as in
/// `MeasureSpec::marks_with_weights` (mark 0 first).
#[derive(Debug, Clone)]
pub struct Kernel1 {
    pub grid: TimeGrid,
    pub marks: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Kernel1 {
    pub fn from_fn(grid: &TimeGrid, spec: &MeasureSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let marks: Vec<f64> = spec.marks_with_weights().iter().map(|(m, _)| *m).collect();
        let values = (0..grid.n_steps())
            .map(|i| marks.iter().map(|&x| f(grid.t(i), x)).collect())
            .collect();
        Kernel1 {
            grid: grid.clone(),
            marks,
            values,
        }
    }

    /// Indicator of `[t_a, t_b) x marks` (grid-aligned time window).
    pub fn indicator(
        grid: &TimeGrid,
        spec: &MeasureSpec,
        steps: std::ops::Range<usize>,
        marks_in: &[f64],
    ) -> Self {
        Self::from_fn(grid, spec, |t, x| {
            let in_time = t >= grid.t(steps.start) && t < grid.t(steps.end);
            if in_time && marks_in.contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    fn mark_index(&self, mark: f64) -> Result<usize> {
        self.marks
            .iter()
            .position(|&m| m == mark)
            .ok_or(Error::UnknownMark(mark))
    }

    pub fn value_at(&self, step: usize, mark_index: usize) -> f64 {
        self.values[step][mark_index]
    }

    pub fn scale(&self, a: f64) -> Kernel1 {
        let mut k = self.clone();
        for row in &mut k.values {
            for v in row {
                *v *= a;
            }
        }
        k
    }

    pub fn add(&self, other: &Kernel1) -> Kernel1 {
        let mut k = self.clone();
        for (row, orow) in k.values.iter_mut().zip(&other.values) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
        k
    }
}

/// `int f d m` and `int f^2 d m` for an order-1 simple kernel, as exact sums
/// over grid cells x marks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MIntegrals {
    pub linear: f64,
    pub quadratic: f64,
}

pub fn m_integral(kernel: &Kernel1, spec: &MeasureSpec) -> Result<MIntegrals> {
    let weights: Vec<f64> = kernel
        .marks
        .iter()
        .map(|&m| spec.mu_weight(m))
        .collect::<Result<_>>()?;
    let (mut linear, mut quadratic) = (0.0, 0.0);
    for (i, row) in kernel.values.iter().enumerate() {
        let dt = kernel.grid.dt(i);
        for (v, w) in row.iter().zip(&weights) {
            linear += v * dt * w;
            quadratic += v * v * dt * w;
        }
    }
    Ok(MIntegrals { linear, quadratic })
}

/// First-order integral against `M` along a path:
/// `sigma sum_i f(t_i, 0) dW_i + sum_{jumps (s,x)} f(s, x) - int int f dt nu(dx)`.
pub fn integrate_m1(kernel: &Kernel1, path: &Path, model: &LevyModel) -> Result<f64> {
    let zero_idx = kernel.mark_index(0.0)?;
    let mut total = 0.0;
    for (i, dw) in path.brownian_increments.iter().enumerate() {
        total += model.sigma * kernel.values[i][zero_idx] * dw;
    }
    for ev in path.jump_events.iter().filter(|e| !e.synthetic) {
        let step = kernel
            .grid
            .step_containing(ev.time)
            .ok_or(Error::TimeOutOfRange {
                t: ev.time,
                horizon: kernel.grid.horizon(),
            })?;
        let j = kernel.mark_index(ev.mark)?;
        total += kernel.values[step][j];
    }
    for node in model.nu_nodes() {
        let j = kernel.mark_index(node.mark)?;
        for (i, row) in kernel.values.iter().enumerate() {
            total -= row[j] * node.weight * kernel.grid.dt(i);
        }
    }
    Ok(total)
}

/// A measurable rectangle `[t_a, t_b) x {marks}` of `[0,T] x R`, time bounds
/// aligned to the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkRect {
    pub steps: std::ops::Range<usize>,
    pub marks: Vec<f64>,
}

impl MarkRect {
    pub fn new(steps: std::ops::Range<usize>, marks: Vec<f64>) -> Self {
        MarkRect { steps, marks }
    }

    fn disjoint_from(&self, other: &MarkRect) -> bool {
        let time_overlap = self.steps.start < other.steps.end && other.steps.start < self.steps.end;
        let mark_overlap = self.marks.iter().any(|m| other.marks.contains(m));
        !(time_overlap && mark_overlap)
    }

    fn intersect(&self, other: &MarkRect) -> MarkRect {
        MarkRect {
            steps: self.steps.start.max(other.steps.start)..self.steps.end.min(other.steps.end),
            marks: self
                .marks
                .iter()
                .copied()
                .filter(|m| other.marks.contains(m))
                .collect(),
        }
    }

    fn m_mass(&self, grid: &TimeGrid, spec: &MeasureSpec) -> Result<f64> {
        if self.steps.start >= self.steps.end {
            return Ok(0.0);
        }
        let span = grid.t(self.steps.end) - grid.t(self.steps.start);
        let mut mu = 0.0;
        for &m in &self.marks {
            mu += spec.mu_weight(m)?;
        }
        Ok(span * mu)
    }
}

/// Order-2 simple kernel: `f = sum_k a_k 1_{B1^k} (x) 1_{B2^k}` with `B1^k`
/// and `B2^k` disjoint within each term.
#[derive(Debug, Clone)]
pub struct Kernel2 {
    pub grid: TimeGrid,
    pub terms: Vec<(f64, MarkRect, MarkRect)>,
}

impl Kernel2 {
    pub fn new(grid: &TimeGrid, terms: Vec<(f64, MarkRect, MarkRect)>) -> Result<Self> {
        for (k, (_, b1, b2)) in terms.iter().enumerate() {
            if !b1.disjoint_from(b2) {
                return Err(Error::Kernel(format!(
                    "rectangles of product term {k} overlap"
                )));
            }
        }
        Ok(Kernel2 {
            grid: grid.clone(),
            terms,
        })
    }
}

/// `I_2(f) = sum_k a_k M(B1^k) M(B2^k)`, each factor an order-1 integral of
/// an indicator kernel.
pub fn integrate_m2(
    kernel: &Kernel2,
    path: &Path,
    model: &LevyModel,
    spec: &MeasureSpec,
) -> Result<f64> {
    let mut total = 0.0;
    for (a, b1, b2) in &kernel.terms {
        let k1 = Kernel1::indicator(&kernel.grid, spec, b1.steps.clone(), &b1.marks);
        let k2 = Kernel1::indicator(&kernel.grid, spec, b2.steps.clone(), &b2.marks);
        total += a * integrate_m1(&k1, path, model)? * integrate_m1(&k2, path, model)?;
    }
    Ok(total)
}

/// `||f~||^2` of the symmetrization of an order-2 simple kernel:
/// `1/2 sum_{k,l} a_k a_l [ m(B1 n B1') m(B2 n B2') + m(B1 n B2') m(B2 n B1') ]`.
pub fn symmetrized_norm_sq(kernel: &Kernel2, spec: &MeasureSpec) -> Result<f64> {
    let g = &kernel.grid;
    let mut total = 0.0;
    for (a, b1, b2) in &kernel.terms {
        for (c, d1, d2) in &kernel.terms {
            let direct = b1.intersect(d1).m_mass(g, spec)? * b2.intersect(d2).m_mass(g, spec)?;
            let swapped = b1.intersect(d2).m_mass(g, spec)? * b2.intersect(d1).m_mass(g, spec)?;
            total += 0.5 * a * c * (direct + swapped);
        }
    }
    Ok(total)
}
