//! Forward SDE driven by the Lévy path:
//! `dPsi = b(Psi) ds + sigma(Psi) dW + beta(Psi_-, x) dN~`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::{ChannelStat, Path};

pub type StateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type JumpCoeffFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Coefficients of the forward equation. The optional derivative closures are
/// needed only for the Brownian first-variation process.
#[derive(Clone)]
pub struct ForwardSdeSpec {
    pub b: StateFn,
    pub sigma_fn: StateFn,
    pub beta: JumpCoeffFn,
    pub psi0: f64,
    pub b_prime: Option<StateFn>,
    pub sigma_prime: Option<StateFn>,
    /// `d beta / d psi` as a function of `(psi, x)`.
    pub beta_psi: Option<JumpCoeffFn>,
    /// Declared bound with `|beta(psi, x)| <= c_beta * (1 and |x|)`.
    pub c_beta: Option<f64>,
}

impl ForwardSdeSpec {
    pub fn new(
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_fn: impl Fn(f64) -> f64 + Send + Sync + 'static,
        beta: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        psi0: f64,
    ) -> Self {
        ForwardSdeSpec {
            b: Arc::new(b),
            sigma_fn: Arc::new(sigma_fn),
            beta: Arc::new(beta),
            psi0,
            b_prime: None,
            sigma_prime: None,
            beta_psi: None,
            c_beta: None,
        }
    }

    pub fn with_derivatives(
        mut self,
        b_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        beta_psi: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.b_prime = Some(Arc::new(b_prime));
        self.sigma_prime = Some(Arc::new(sigma_prime));
        self.beta_psi = Some(Arc::new(beta_psi));
        self
    }

    pub fn with_beta_bound(mut self, c_beta: f64) -> Self {
        self.c_beta = Some(c_beta);
        self
    }

    /// Checks `|beta(psi, x)| <= c_beta (1 and |x|)` on sampled arguments
    /// when a bound is declared.
    pub fn check_beta_bound(&self, probes: &[(f64, f64)]) -> Result<()> {
        let Some(c) = self.c_beta else { return Ok(()) };
        for &(psi, x) in probes {
            let bound = c * x.abs().min(1.0);
            let val = (self.beta)(psi, x).abs();
            if val > bound + 1e-12 {
                return Err(Error::Parameter(format!(
                    "beta({psi}, {x}) = {val} exceeds declared bound {bound}"
                )));
            }
        }
        Ok(())
    }
}

/// Euler–Maruyama trajectory of `Psi` on the grid. Per step: drift,
/// diffusion against the path's Brownian increment, exact jump terms
/// `beta(Psi_pre-jump, x)` over the step's events, and the compensator
/// `-dt * sum_j c_j beta(Psi_i, x_j)` over the mark channels.
pub fn simulate_forward(
    spec: &ForwardSdeSpec,
    path: &Path,
    grid: &TimeGrid,
    channels: &[ChannelStat],
) -> Result<Vec<f64>> {
    let n = grid.n_steps();
    let mut psi = Vec::with_capacity(n + 1);
    psi.push(spec.psi0);
    let mut ev_idx = 0;
    for i in 0..n {
        let dt = grid.dt(i);
        let cur = psi[i];
        let mut next = cur
            + (spec.b)(cur) * dt
            + (spec.sigma_fn)(cur) * path.brownian_increments[i]
            - dt * channels
                .iter()
                .map(|c| c.compensator_rate * (spec.beta)(cur, c.mark))
                .sum::<f64>();
        // Jumps act on the pre-jump state, in time order within the step.
        let hi = grid.t(i + 1);
        while ev_idx < path.jump_events.len() && path.jump_events[ev_idx].time <= hi {
            let ev = &path.jump_events[ev_idx];
            if ev.time > grid.t(i) {
                next += (spec.beta)(next, ev.mark);
            }
            ev_idx += 1;
        }
        if !next.is_finite() {
            return Err(Error::Divergence {
                step: i,
                value: next,
            });
        }
        psi.push(next);
    }
    Ok(psi)
}

/// Brownian first-variation process along a simulated trajectory: the
/// dW-integrand `D^W_r Psi_t`, zero for `t < r`, started at
/// `sigma_fn(Psi_r)` and propagated with the linearized coefficients.
pub fn first_variation(
    spec: &ForwardSdeSpec,
    path: &Path,
    grid: &TimeGrid,
    channels: &[ChannelStat],
    psi: &[f64],
    r_index: usize,
) -> Result<Vec<f64>> {
    let (Some(b_prime), Some(sigma_prime), Some(beta_psi)) =
        (&spec.b_prime, &spec.sigma_prime, &spec.beta_psi)
    else {
        return Err(Error::Capability(
            "forward spec lacks coefficient derivatives needed for the first variation".into(),
        ));
    };
    let n = grid.n_steps();
    let mut d = vec![0.0; n + 1];
    d[r_index] = (spec.sigma_fn)(psi[r_index]);
    for i in r_index..n {
        let dt = grid.dt(i);
        let cur = psi[i];
        let mut next = d[i]
            + b_prime(cur) * d[i] * dt
            + sigma_prime(cur) * d[i] * path.brownian_increments[i]
            - dt * channels
                .iter()
                .map(|c| c.compensator_rate * beta_psi(cur, c.mark))
                .sum::<f64>()
                * d[i];
        let (lo, hi) = (grid.t(i), grid.t(i + 1));
        for ev in &path.jump_events {
            if ev.time > lo && ev.time <= hi {
                next += beta_psi(cur, ev.mark) * next;
            }
        }
        d[i + 1] = next;
    }
    Ok(d)
}
