//! Uniform grids shared by the cost map and the planner.

use serde::{Deserialize, Serialize};

/// Evenly spaced grid of `n >= 1` points over `[lo, hi]`.
///
/// A single-point grid (`n == 1`) is allowed and has zero spacing; it shows up
/// as the degenerate travel-time axis at the anchor step of a planner solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    lo: f64,
    step: f64,
    n: usize,
}

impl UniformGrid {
    pub fn from_range(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 1, "grid needs at least one point");
        assert!(hi >= lo, "grid range is inverted: [{lo}, {hi}]");
        let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
        Self { lo, step, n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.step * (self.n - 1) as f64
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn value(&self, i: usize) -> f64 {
        debug_assert!(i < self.n);
        self.lo + self.step * i as f64
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.value(i))
    }

    fn tol(&self) -> f64 {
        1e-9 * (1.0 + self.lo.abs().max(self.hi().abs()))
    }

    /// Lower bracket index and fractional weight for interpolation.
    ///
    /// Returns `None` when `x` falls outside the grid hull (beyond a small
    /// relative tolerance). The weight is the fraction toward index `i + 1`.
    pub fn bracket(&self, x: f64) -> Option<(usize, f64)> {
        let tol = self.tol();
        if x < self.lo - tol || x > self.hi() + tol {
            return None;
        }
        if self.n == 1 || self.step == 0.0 {
            return Some((0, 0.0));
        }
        let raw = (x - self.lo) / self.step;
        let mut i = raw.floor() as isize;
        if i < 0 {
            i = 0;
        }
        let mut i = i as usize;
        if i >= self.n - 1 {
            i = self.n - 2;
        }
        let w = ((x - self.value(i)) / self.step).clamp(0.0, 1.0);
        Some((i, w))
    }

    /// Index of the grid point closest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        if self.n == 1 || self.step == 0.0 {
            return 0;
        }
        let raw = ((x - self.lo) / self.step).round();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.n - 1)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let tol = self.tol();
        x >= self.lo - tol && x <= self.hi() + tol
    }
}
