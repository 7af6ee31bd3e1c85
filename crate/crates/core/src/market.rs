//! Market coefficients, the portfolio constraint and one-step price/wealth dynamics.

use crate::error::{check_len, Error, Result};
use crate::levy::JumpGrid;
use crate::scalar::{lit, Scalar};

/// Deterministic, piecewise-constant function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient<T> {
    Constant(T),
    /// `values[k]` applies on `[breakpoints[k-1], breakpoints[k])`; needs one more value than breakpoints.
    Piecewise { breakpoints: Vec<T>, values: Vec<T> },
}

impl<T: Scalar> Coefficient<T> {
    pub fn piecewise(breakpoints: Vec<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != breakpoints.len() + 1 {
            return Err(Error::param(format!(
                "piecewise coefficient needs {} values for {} breakpoints, got {}",
                breakpoints.len() + 1,
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("breakpoints must be strictly increasing"));
        }
        Ok(Coefficient::Piecewise { breakpoints, values })
    }

    pub fn at(&self, t: T) -> T {
        match self {
            Coefficient::Constant(v) => *v,
            Coefficient::Piecewise { breakpoints, values } => {
                values[breakpoints.partition_point(|&b| b <= t)]
            }
        }
    }

    pub fn pieces(&self) -> &[T] {
        match self {
            Coefficient::Constant(v) => std::slice::from_ref(v),
            Coefficient::Piecewise { values, .. } => values,
        }
    }

    fn breakpoints(&self) -> &[T] {
        match self {
            Coefficient::Constant(_) => &[],
            Coefficient::Piecewise { breakpoints, .. } => breakpoints,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.pieces().windows(2).all(|w| w[0] == w[1])
    }
}

impl<T> From<T> for Coefficient<T> {
    fn from(v: T) -> Self {
        Coefficient::Constant(v)
    }
}

/// Closed interval `[lo, hi]` of admissible positions, containing zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSet<T> {
    lo: T,
    hi: T,
}

impl<T: Scalar> ConstraintSet<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::param("constraint.lo and constraint.hi must be finite"));
        }
        if lo > hi {
            return Err(Error::param(format!("constraint.lo ({lo}) exceeds constraint.hi ({hi})")));
        }
        if lo > T::zero() {
            return Err(Error::param(format!("constraint.lo ({lo}) must be <= 0")));
        }
        if hi < T::zero() {
            return Err(Error::param(format!("constraint.hi ({hi}) must be >= 0")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> T {
        self.lo
    }

    pub fn hi(&self) -> T {
        self.hi
    }

    pub fn contains(&self, pi: T) -> bool {
        pi >= self.lo && pi <= self.hi
    }

    pub fn project(&self, pi: T) -> T {
        pi.max(self.lo).min(self.hi)
    }

    /// `max |π|` over the set.
    pub fn radius(&self) -> T {
        self.lo.abs().max(self.hi.abs())
    }
}

/// Coefficients frozen at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientsAt<T> {
    pub b: T,
    pub sigma: T,
    pub beta: Vec<T>,
    pub theta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketSpec<T> {
    pub b: Coefficient<T>,
    pub sigma: Coefficient<T>,
    /// One coefficient per atom of `grid`.
    pub beta: Vec<Coefficient<T>>,
    pub grid: JumpGrid<T>,
    pub alpha: T,
    pub horizon: T,
    pub constraint: ConstraintSet<T>,
}

impl<T: Scalar> MarketSpec<T> {
    pub fn new(
        b: Coefficient<T>,
        sigma: Coefficient<T>,
        beta: Vec<Coefficient<T>>,
        grid: JumpGrid<T>,
        alpha: T,
        horizon: T,
        constraint: ConstraintSet<T>,
    ) -> Result<Self> {
        check_len(grid.len(), beta.len())?;
        if !(alpha > T::zero()) || !alpha.is_finite() {
            return Err(Error::param("alpha must be positive"));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::param("horizon T must be positive"));
        }
        if b.pieces().iter().any(|v| !v.is_finite()) {
            return Err(Error::param("drift b must be finite"));
        }
        if sigma.pieces().iter().any(|v| !v.is_finite()) {
            return Err(Error::param("volatility sigma must be finite"));
        }
        if sigma.pieces().iter().any(|v| *v == T::zero()) {
            return Err(Error::SingularCoefficient("sigma vanishes on part of the horizon".into()));
        }
        for (j, c) in beta.iter().enumerate() {
            if c.pieces().iter().any(|v| !(*v > -T::one()) || !v.is_finite()) {
                return Err(Error::param(format!("beta for atom {j} must be finite and > -1")));
            }
        }
        Ok(Self { b, sigma, beta, grid, alpha, horizon, constraint })
    }

    /// Market with constant coefficients.
    pub fn constant(b: T, sigma: T, beta: &[T], grid: JumpGrid<T>, alpha: T, horizon: T, constraint: ConstraintSet<T>) -> Result<Self> {
        Self::new(
            b.into(),
            sigma.into(),
            beta.iter().map(|&v| v.into()).collect(),
            grid,
            alpha,
            horizon,
            constraint,
        )
    }

    pub fn n_atoms(&self) -> usize {
        self.grid.len()
    }

    pub fn theta(&self, t: T) -> Result<T> {
        let s = self.sigma.at(t);
        if s == T::zero() {
            return Err(Error::SingularCoefficient(format!("sigma({t}) = 0")));
        }
        Ok(self.b.at(t) / s)
    }

    pub fn coefficients_at(&self, t: T) -> Result<CoefficientsAt<T>> {
        Ok(CoefficientsAt {
            b: self.b.at(t),
            sigma: self.sigma.at(t),
            beta: self.beta.iter().map(|c| c.at(t)).collect(),
            theta: self.theta(t)?,
        })
    }

    /// Instants in `[0, T]` at which every distinct piece is visited.
    fn sample_times(&self) -> Vec<T> {
        let mut ts = vec![T::zero()];
        let all = std::iter::once(&self.b).chain(std::iter::once(&self.sigma)).chain(self.beta.iter());
        for c in all {
            ts.extend(c.breakpoints().iter().copied().filter(|&t| t > T::zero() && t < self.horizon));
        }
        ts
    }

    /// `sup_t |θ_t|` over the horizon.
    pub fn theta_sup(&self) -> T {
        self.sample_times()
            .into_iter()
            .map(|t| self.theta(t).map(|v| v.abs()).unwrap_or(T::infinity()))
            .fold(T::zero(), T::max)
    }

    pub fn sigma_sup(&self) -> T {
        self.sample_times().into_iter().map(|t| self.sigma.at(t).abs()).fold(T::zero(), T::max)
    }

    pub fn b_sup(&self) -> T {
        self.sample_times().into_iter().map(|t| self.b.at(t).abs()).fold(T::zero(), T::max)
    }

    /// `sup_{t,j} |β_t(x_j)|`.
    pub fn beta_sup(&self) -> T {
        self.sample_times()
            .into_iter()
            .flat_map(|t| self.beta.iter().map(move |c| c.at(t).abs()))
            .fold(T::zero(), T::max)
    }

    pub fn is_time_constant(&self) -> bool {
        self.b.is_constant() && self.sigma.is_constant() && self.beta.iter().all(|c| c.is_constant())
    }

    /// Whether θ takes a single value over the horizon.
    pub fn theta_is_constant(&self) -> bool {
        let ts = self.sample_times();
        let first = self.theta(ts[0]).ok();
        ts.iter().all(|&t| self.theta(t).ok() == first)
    }

    /// Compensated relative price move `ΔS/S` over one step.
    pub fn relative_return(&self, t: T, dt: T, dw: T, jump: Option<usize>) -> Result<T> {
        let comp: T = self.grid.atoms().iter().zip(&self.beta).map(|(a, c)| a.w * c.at(t)).sum();
        let jump_part = match jump {
            None => T::zero(),
            Some(j) if j < self.beta.len() => self.beta[j].at(t),
            Some(j) => return Err(Error::Shape { expected: self.beta.len(), actual: j + 1 }),
        };
        Ok(self.b.at(t) * dt + self.sigma.at(t) * dw + jump_part - dt * comp)
    }

    pub fn step_price(&self, s_prev: T, t: T, dt: T, dw: T, jump: Option<usize>) -> Result<T> {
        if !(s_prev > T::zero()) {
            return Err(Error::param("price must be positive"));
        }
        if !(dt > T::zero()) {
            return Err(Error::param("dt must be positive"));
        }
        let factor = T::one() + self.relative_return(t, dt, dw, jump)?;
        if !(factor > T::zero()) {
            let n = (self.horizon / dt).ceil().to_usize().unwrap_or(1).max(1);
            return Err(Error::StepSize {
                reason: format!("price factor {factor} is not positive"),
                suggested_steps: self.suggest_steps(n),
            });
        }
        Ok(s_prev * factor)
    }

    /// `X + π ΔS/S`; π must lie in the constraint set.
    pub fn step_wealth(&self, x_prev: T, pi: T, t: T, dt: T, dw: T, jump: Option<usize>) -> Result<T> {
        if !self.constraint.contains(pi) {
            return Err(Error::Admissibility(format!(
                "position {pi} outside [{}, {}]",
                self.constraint.lo(),
                self.constraint.hi()
            )));
        }
        Ok(x_prev + pi * self.relative_return(t, dt, dw, jump)?)
    }

    fn step_ok(&self, n_steps: usize) -> bool {
        let dt = self.horizon / lit(n_steps as f64);
        let sq = dt.sqrt();
        let mass = self.grid.total_mass();
        (0..n_steps).all(|i| {
            let t = dt * lit(i as f64);
            let beta_max = self.beta.iter().map(|c| c.at(t).abs()).fold(T::zero(), T::max);
            if !(dt * (self.b.at(t).abs() + mass * beta_max) < T::one()) {
                return false;
            }
            let jumps = std::iter::once(None).chain((0..self.beta.len()).map(Some));
            jumps.into_iter().all(|jump| {
                [sq, -sq].iter().all(|&dw| {
                    self.relative_return(t, dt, dw, jump).map(|r| T::one() + r > T::zero()).unwrap_or(false)
                })
            })
        })
    }

    fn suggest_steps(&self, n_steps: usize) -> usize {
        let mut hi = n_steps.max(1);
        while !self.step_ok(hi) {
            if hi > 1 << 30 {
                return hi;
            }
            hi *= 2;
        }
        let mut lo = n_steps.max(1);
        if self.step_ok(lo) {
            return lo;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.step_ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// Rejects grids whose step would allow a nonpositive price factor.
    pub fn check_step_size(&self, n_steps: usize) -> Result<()> {
        if n_steps == 0 {
            return Err(Error::param("n_steps must be at least 1"));
        }
        if self.step_ok(n_steps) {
            Ok(())
        } else {
            Err(Error::StepSize {
                reason: format!("{n_steps} steps leave a nonpositive price factor"),
                suggested_steps: self.suggest_steps(n_steps),
            })
        }
    }
}
