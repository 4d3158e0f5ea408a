use crate::error::{Error, Result};

/// Strictly increasing time grid `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Self {
        assert!(horizon > 0.0 && n_steps >= 1);
        let times = (0..=n_steps)
            .map(|i| horizon * i as f64 / n_steps as f64)
            .collect();
        TimeGrid { times }
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::Parameter(
                "grid must start at 0 and contain at least one step".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("grid times must be strictly increasing".into()));
        }
        Ok(TimeGrid { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }

    /// Index of the step `(t_i, t_{i+1}]` containing `t`, for `t` in `(0, T]`.
    pub fn step_containing(&self, t: f64) -> Option<usize> {
        if t <= 0.0 || t > self.horizon() {
            return None;
        }
        // partition_point: first index with times[i] >= t; t in (t_{i-1}, t_i].
        let i = self.times.partition_point(|&s| s < t);
        Some(i - 1)
    }

    /// Index of the first grid point `>= t`.
    pub fn first_index_at_or_after(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.horizon()).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(self.times.partition_point(|&s| s < t))
    }

    /// Exact grid index of `t`, if `t` is a grid point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&s| s < t);
        (i < self.times.len() && self.times[i] == t).then_some(i)
    }
}
