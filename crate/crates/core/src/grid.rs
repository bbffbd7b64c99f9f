use crate::error::{Result, SvieError};

/// Uniform discretization of `[t0, T]` with `N` steps of size `h = (T - t0) / N`.
///
/// Triangular fields live on index pairs `(i, j)` with `j < i <= N`; pyramidal
/// tensors on `(i, j, k)` with `k <= min(i, j)`. All quadrature in this crate
/// is left-rectangle with weight `h` and the diagonal excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n: usize,
    pub h: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(SvieError::InvalidGrid(format!(
                "need finite t0 < T, got t0={t0}, T={t_end}"
            )));
        }
        if n == 0 {
            return Err(SvieError::InvalidGrid("step count N must be positive".into()));
        }
        let h = (t_end - t0) / n as f64;
        Ok(Self { t0, t_end, n, h })
    }

    /// Node `t_i = t0 + i h`.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n);
        self.t0 + i as f64 * self.h
    }

    /// Grid with the same span and doubled step count. Nodes of `self` are
    /// the even nodes of the refinement.
    pub fn refine(&self) -> Self {
        Self {
            t0: self.t0,
            t_end: self.t_end,
            n: 2 * self.n,
            h: self.h / 2.0,
        }
    }
}
