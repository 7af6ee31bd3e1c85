//! The utility-maximization generator, its truncations and re-anchored variants.

use std::cmp::Ordering;

use crate::error::{check_len, Error, Result};
use crate::levy::{check_exponent, g_raw, UFunction};
use crate::market::{CoefficientsAt, MarketSpec};
use crate::minimize::minimize_over_c;
use crate::scalar::{exprel, lit, Scalar};

/// Default bracket width for the inner minimization over positions.
pub const INNER_TOL: f64 = 1e-9;

/// C¹ cutoff: 1 on `|z| ≤ level`, 0 on `|z| ≥ level + 1`, cubic smoothstep between.
pub fn rho<T: Scalar>(level: T, z: T) -> T {
    let s = z.abs() - level;
    if s <= T::zero() {
        T::one()
    } else if s >= T::one() {
        T::zero()
    } else {
        T::one() - s * s * (lit::<T>(3.0) - lit::<T>(2.0) * s)
    }
}

/// Which member of the generator family to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    /// Quadratic term cut by `ρ_m(z)`, jumps restricted to `|x| ≥ 1/m` and capped by `ρ_M(u)`.
    Level(u32),
    /// No truncation.
    Exact,
}

impl Truncation {
    fn rank(self) -> u64 {
        match self {
            Truncation::Level(m) => m as u64,
            Truncation::Exact => u64::MAX,
        }
    }
}

impl PartialOrd for Truncation {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Truncation {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl std::fmt::Display for Truncation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Truncation::Level(m) => write!(f, "{m}"),
            Truncation::Exact => write!(f, "exact"),
        }
    }
}

/// Generator family member bound to a market.
#[derive(Debug, Clone)]
pub struct Generator<'a, T> {
    market: &'a MarketSpec<T>,
    truncation: Truncation,
    m_cap: T,
    tol: T,
}

/// Per-atom jump term after truncation: effective weight, `u_j`, `β_j`.
struct JumpTerm<T> {
    w: T,
    u: T,
    beta: T,
}

impl<'a, T: Scalar> Generator<'a, T> {
    /// Untruncated generator.
    pub fn exact(market: &'a MarketSpec<T>) -> Self {
        Self { market, truncation: Truncation::Exact, m_cap: T::infinity(), tol: lit(INNER_TOL) }
    }

    /// Truncated generator; `m_cap` is the level of the cutoff applied to `u`.
    pub fn truncated(market: &'a MarketSpec<T>, m: u32, m_cap: T) -> Result<Self> {
        if m == 0 {
            return Err(Error::param("truncation level must be at least 1"));
        }
        if !(m_cap > T::zero()) {
            return Err(Error::param("jump cap M must be positive"));
        }
        Ok(Self { market, truncation: Truncation::Level(m), m_cap, tol: lit(INNER_TOL) })
    }

    pub fn new(market: &'a MarketSpec<T>, truncation: Truncation, m_cap: T) -> Result<Self> {
        match truncation {
            Truncation::Exact => Ok(Self::exact(market)),
            Truncation::Level(m) => Self::truncated(market, m, m_cap),
        }
    }

    pub fn with_tolerance(mut self, tol: T) -> Result<Self> {
        if !(tol > T::zero()) {
            return Err(Error::param("minimization tolerance must be positive"));
        }
        self.tol = tol;
        Ok(self)
    }

    pub fn market(&self) -> &'a MarketSpec<T> {
        self.market
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn m_cap(&self) -> T {
        self.m_cap
    }

    fn jump_terms(&self, c: &CoefficientsAt<T>, u: &[T]) -> Result<Vec<JumpTerm<T>>> {
        check_len(self.market.n_atoms(), u.len())?;
        let alpha = self.market.alpha;
        let set = &self.market.constraint;
        let mut terms = Vec::with_capacity(u.len());
        for (j, (atom, &uj)) in self.market.grid.atoms().iter().zip(u).enumerate() {
            let w = match self.truncation {
                Truncation::Exact => atom.w,
                Truncation::Level(m) if self.market.grid.kept_at(j, m) => atom.w * rho(self.m_cap, uj),
                Truncation::Level(_) => T::zero(),
            };
            if w == T::zero() {
                continue;
            }
            let beta = c.beta[j];
            check_exponent(alpha * (uj - set.lo() * beta).max(uj - set.hi() * beta))?;
            terms.push(JumpTerm { w, u: uj, beta });
        }
        Ok(terms)
    }

    fn quad_weight(&self, z: T) -> T {
        match self.truncation {
            Truncation::Exact => T::one(),
            Truncation::Level(m) => rho(lit(m as f64), z),
        }
    }

    /// Minimizer and value of `π ↦ ρ(z)(α/2)|πσ − z − θ/α|² + Σ w g_α(u − πβ)`.
    pub fn inner(&self, t: T, z: T, u: &[T]) -> Result<(T, T)> {
        let c = self.market.coefficients_at(t)?;
        self.inner_at(&c, z, u)
    }

    fn inner_at(&self, c: &CoefficientsAt<T>, z: T, u: &[T]) -> Result<(T, T)> {
        let alpha = self.market.alpha;
        let half_alpha = alpha / lit(2.0);
        let target = z + c.theta / alpha;
        let qw = self.quad_weight(z);
        let terms = self.jump_terms(c, u)?;
        let sigma = c.sigma;
        let objective = |pi: T| {
            let d = pi * sigma - target;
            let mut v = qw * half_alpha * d * d;
            for term in &terms {
                v = v + term.w * g_raw(alpha, term.u - pi * term.beta);
            }
            v
        };
        let set = &self.market.constraint;
        let seed = set.project(target / sigma);
        if terms.iter().all(|term| term.beta == T::zero()) {
            let pi = if qw > T::zero() { seed } else { T::zero() };
            return Ok((pi, objective(pi)));
        }
        minimize_over_c(objective, set, self.tol, Some(seed))
    }

    /// `f(t, z, u)` (or its truncation), together with the minimizing position.
    pub fn eval_with_argmin(&self, t: T, z: T, u: &[T]) -> Result<(T, T)> {
        let c = self.market.coefficients_at(t)?;
        let (pi, inf) = self.inner_at(&c, z, u)?;
        Ok((inf - c.theta * z - c.theta * c.theta / (lit::<T>(2.0) * self.market.alpha), pi))
    }

    pub fn eval(&self, t: T, z: T, u: &[T]) -> Result<T> {
        self.eval_with_argmin(t, z, u).map(|(v, _)| v)
    }

    /// `f(t, −θ/α, 0)`, evaluated through the generator.
    pub fn baseline(&self, t: T) -> Result<T> {
        let theta = self.market.theta(t)?;
        self.eval(t, -theta / self.market.alpha, &vec![T::zero(); self.market.n_atoms()])
    }

    /// `f(t, z − θ/α, u) − f(t, −θ/α, 0)`.
    pub fn eval_shifted(&self, t: T, z: T, u: &[T]) -> Result<T> {
        let shift = self.market.theta(t)? / self.market.alpha;
        Ok(self.eval(t, z - shift, u)? - self.baseline(t)?)
    }

    /// `f(t, (z + z̄) − θ/α, u + ū) − f(t, z̄ − θ/α, ū)`.
    pub fn eval_anchored(&self, t: T, z: T, u: &[T], anchor_z: T, anchor_u: &[T]) -> Result<T> {
        check_len(u.len(), anchor_u.len())?;
        let shift = self.market.theta(t)? / self.market.alpha;
        let moved: Vec<T> = u.iter().zip(anchor_u).map(|(a, b)| *a + *b).collect();
        Ok(self.eval(t, (z + anchor_z) - shift, &moved)? - self.eval(t, anchor_z - shift, anchor_u)?)
    }

    /// Per-atom increment coefficients controlling `f(z,u) − f(z,u′)` from above.
    pub fn gamma(&self, t: T, u: &[T], u_prime: &[T]) -> Result<Vec<T>> {
        check_len(self.market.n_atoms(), u.len())?;
        check_len(self.market.n_atoms(), u_prime.len())?;
        let c = self.market.coefficients_at(t)?;
        let alpha = self.market.alpha;
        let set = &self.market.constraint;
        let mut out = Vec::with_capacity(u.len());
        for j in 0..u.len() {
            let dq = |pi: T| -> Result<T> {
                let a = u[j] - pi * c.beta[j];
                let b = u_prime[j] - pi * c.beta[j];
                check_exponent(alpha * a.max(b))?;
                Ok((alpha * b).exp() * exprel(alpha * (a - b)) - T::one())
            };
            // The quotient is monotone in π, so the endpoints carry the extremes.
            let (at_lo, at_hi) = (dq(set.lo())?, dq(set.hi())?);
            out.push(if u[j] >= u_prime[j] { at_lo.max(at_hi) } else { at_lo.min(at_hi) });
        }
        Ok(out)
    }

    /// `(f(z,u) − f(z′,u))/(z − z′)`, zero on the diagonal.
    pub fn lambda_slope(&self, t: T, z: T, z_prime: T, u: &[T]) -> Result<T> {
        if z == z_prime {
            return Ok(T::zero());
        }
        Ok((self.eval(t, z, u)? - self.eval(t, z_prime, u)?) / (z - z_prime))
    }

    /// Lipschitz constant of the shifted truncated generator in `(z, ‖u‖_{L²(n)})`.
    pub fn lipschitz_bound(&self) -> T {
        let Truncation::Level(m) = self.truncation else {
            return T::infinity();
        };
        let mk = self.market;
        let alpha = mk.alpha;
        let p = mk.constraint.radius();
        let theta = mk.theta_sup();
        let reach = p * mk.sigma_sup() + lit::<T>(m as f64 + 1.0) + theta / alpha;
        let l_z = alpha * reach + lit::<T>(0.75) * alpha * reach * reach + theta;
        let y_max = self.m_cap + T::one() + p * mk.beta_sup();
        let e = (alpha * y_max).min(T::exp_guard()).exp();
        let l_atom = e + lit::<T>(1.5) * (e / alpha).max(y_max);
        let mass: T = (0..mk.n_atoms()).filter(|&j| mk.grid.kept_at(j, m)).map(|j| mk.grid.atoms()[j].w).sum();
        l_z + mass.sqrt() * l_atom
    }
}

/// Bounds for the a priori estimates, given the sup of the terminal condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriConstants<T> {
    /// `2 exp(T sup θ² / 2)`, a bound on the S² norm of the density process.
    pub density_norm: T,
    /// `T sup θ² / α`.
    pub drift_budget: T,
    pub lower: T,
    pub upper: T,
}

/// Which generator the solution being bounded belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// `f̃` and its truncated/re-anchored variants: `−θz ≤ f̃ ≤ θ²/α + α|z|² + |u|_{2α}`.
    Shifted,
    /// `f` itself: `−θz − θ²/(2α) ≤ f ≤ (α/2)|z|² + |u|_α`.
    Original,
}

pub fn apriori_constants<T: Scalar>(market: &MarketSpec<T>, terminal_sup: T, family: Family) -> AprioriConstants<T> {
    let th2 = market.theta_sup() * market.theta_sup();
    let density_norm = lit::<T>(2.0) * (market.horizon * th2 / lit(2.0)).exp();
    let drift_budget = market.horizon * th2 / market.alpha;
    let (lower, upper) = match family {
        Family::Shifted => (-density_norm * terminal_sup, terminal_sup + drift_budget),
        Family::Original => (-density_norm * terminal_sup - drift_budget / lit(2.0), terminal_sup),
    };
    AprioriConstants { density_norm, drift_budget, lower, upper }
}

/// Cap `M = 2(|C₁| + C₂)` for the `u`-cutoff, from the shifted-family bounds.
pub fn jump_cap<T: Scalar>(market: &MarketSpec<T>, terminal_sup: T) -> T {
    let c = apriori_constants(market, terminal_sup, Family::Shifted);
    let m = lit::<T>(2.0) * (c.lower.abs() + c.upper);
    m.max(T::one())
}

/// Envelope `α(sup|π| sup|σ| + |z| + |z′|)` for the z-slope of `f`.
pub fn slope_envelope<T: Scalar>(market: &MarketSpec<T>, z: T, z_prime: T) -> T {
    market.alpha * (market.constraint.radius() * market.sigma_sup() + z.abs() + z_prime.abs())
}

/// `f(t, z, u)`.
pub fn f_eval<T: Scalar>(market: &MarketSpec<T>, t: T, z: T, u: &UFunction<T>) -> Result<(T, T)> {
    Generator::exact(market).eval_with_argmin(t, z, u.values())
}

/// `f̃(t, z, u) = f(t, z − θ/α, u) − f(t, −θ/α, 0)`.
pub fn f_tilde_eval<T: Scalar>(market: &MarketSpec<T>, t: T, z: T, u: &UFunction<T>) -> Result<T> {
    Generator::exact(market).eval_shifted(t, z, u.values())
}

/// Truncated generator `f^m`.
pub fn f_m_eval<T: Scalar>(market: &MarketSpec<T>, m: u32, m_cap: T, t: T, z: T, u: &UFunction<T>) -> Result<T> {
    Generator::truncated(market, m, m_cap)?.eval(t, z, u.values())
}

/// `f^{1,m}(t, z, u) = f^m(t, z − θ/α, u) − f(t, −θ/α, 0)`.
pub fn f_1m_eval<T: Scalar>(market: &MarketSpec<T>, m: u32, m_cap: T, t: T, z: T, u: &UFunction<T>) -> Result<T> {
    let shift = market.theta(t)? / market.alpha;
    let base = Generator::exact(market).baseline(t)?;
    Ok(Generator::truncated(market, m, m_cap)?.eval(t, z - shift, u.values())? - base)
}

/// `f^{k,m}` re-anchored at `(z̄, ū)`; anchors are required.
pub fn f_km_eval<T: Scalar>(
    market: &MarketSpec<T>,
    m: u32,
    m_cap: T,
    t: T,
    z: T,
    u: &UFunction<T>,
    anchors: Option<(T, &UFunction<T>)>,
) -> Result<T> {
    let (az, au) = anchors.ok_or_else(|| Error::Configuration("re-anchored generator needs anchors".into()))?;
    Generator::truncated(market, m, m_cap)?.eval_anchored(t, z, u.values(), az, au.values())
}

/// Per-atom `γ_t(u, u′)`.
pub fn gamma_eval<T: Scalar>(market: &MarketSpec<T>, t: T, u: &UFunction<T>, u_prime: &UFunction<T>) -> Result<UFunction<T>> {
    Generator::exact(market).gamma(t, u.values(), u_prime.values()).map(UFunction)
}

pub fn lambda_slope<T: Scalar>(market: &MarketSpec<T>, t: T, z: T, z_prime: T, u: &UFunction<T>) -> Result<T> {
    Generator::exact(market).lambda_slope(t, z, z_prime, u.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::{g_alpha, l2_norm_sq, u_alpha_norm, JumpGrid};
    use crate::market::{Coefficient, ConstraintSet};
    use proptest::prelude::*;

    fn set(lo: f64, hi: f64) -> ConstraintSet<f64> {
        ConstraintSet::new(lo, hi).unwrap()
    }

    fn no_jumps(alpha: f64, b: f64, sigma: f64, c: ConstraintSet<f64>) -> MarketSpec<f64> {
        MarketSpec::constant(b, sigma, &[], JumpGrid::empty(), alpha, 1.0, c).unwrap()
    }

    fn jumpy(c: ConstraintSet<f64>) -> MarketSpec<f64> {
        let g = JumpGrid::from_pairs(&[(0.05, 2.0), (-0.4, 1.0), (1.5, 0.5)]).unwrap();
        MarketSpec::new(
            Coefficient::piecewise(vec![0.5], vec![0.1, 0.25]).unwrap(),
            Coefficient::piecewise(vec![0.3], vec![0.8, 1.1]).unwrap(),
            vec![0.02.into(), (-0.3).into(), 0.6.into()],
            g,
            1.3,
            1.0,
            c,
        )
        .unwrap()
    }

    /// Brute-force `f` by scanning positions at `step`.
    fn f_grid(m: &MarketSpec<f64>, t: f64, z: f64, u: &[f64], step: f64) -> f64 {
        let c = m.coefficients_at(t).unwrap();
        let a = m.alpha;
        let n = ((m.constraint.hi() - m.constraint.lo()) / step).round() as usize;
        let mut best = f64::INFINITY;
        for k in 0..=n {
            let pi = (m.constraint.lo() + k as f64 * step).min(m.constraint.hi());
            let d = pi * c.sigma - z - c.theta / a;
            let mut v = a / 2.0 * d * d;
            for (j, at) in m.grid.atoms().iter().enumerate() {
                v += at.w * g_alpha(a, u[j] - pi * c.beta[j]).unwrap();
            }
            best = best.min(v);
        }
        best - c.theta * z - c.theta * c.theta / (2.0 * a)
    }

    #[test]
    fn rho_shape() {
        assert_eq!(rho(2.0, 1.5), 1.0);
        assert_eq!(rho(2.0, -2.0), 1.0);
        assert_eq!(rho(2.0, 3.0), 0.0);
        assert!((rho(2.0f64, 2.5) - 0.5).abs() < 1e-15);
        let mut z: f64 = 2.0;
        while z < 3.0 {
            assert!(rho(2.0, z + 0.01) <= rho(2.0, z));
            assert!(((rho(2.0, z + 1e-6) - rho(2.0, z)) / 1e-6).abs() <= 1.5 + 1e-5);
            z += 0.01;
        }
    }

    #[test]
    fn truncation_order() {
        assert!(Truncation::Level(3) < Truncation::Level(5));
        assert!(Truncation::Level(u32::MAX) < Truncation::Exact);
    }

    #[test]
    fn f_examples() {
        let m = no_jumps(1.0, 0.0, 1.0, set(-1.0, 1.0));
        assert_eq!(f_eval(&m, 0.0, 0.0, &UFunction(vec![])).unwrap().0, 0.0);
        let m = no_jumps(1.0, 0.2, 1.0, set(-10.0, 10.0));
        let (v, pi) = f_eval(&m, 0.0, 0.5, &UFunction(vec![])).unwrap();
        assert!((v + 0.12).abs() < 1e-12);
        assert!((pi - 0.7).abs() < 1e-12);
        assert!((f_grid(&m, 0.0, 0.5, &[], 1e-4) + 0.12).abs() < 1e-8);
        let m = no_jumps(1.0, 1.0, 1.0, set(-0.5, 0.5));
        let (v, _) = f_eval(&m, 0.0, -1.0, &UFunction(vec![])).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f_matches_grid_search_with_jumps() {
        let m = jumpy(set(-1.0, 2.0));
        for &(t, z, ref u) in &[(0.1, 0.3, vec![0.1, -0.2, 0.4]), (0.7, -1.1, vec![-0.5, 0.8, -0.1]), (0.4, 2.0, vec![0.0, 0.0, 0.0])] {
            let v = Generator::exact(&m).eval(t, z, u).unwrap();
            let g = f_grid(&m, t, z, u, 1e-4);
            assert!(v <= g + 1e-12 && g - v < 1e-6, "{v} vs {g}");
        }
    }

    #[test]
    fn f_tilde_examples() {
        let m = jumpy(set(-1.0, 2.0));
        assert_eq!(f_tilde_eval(&m, 0.6, 0.0, &UFunction::zeros(3)).unwrap(), 0.0);
        let m = no_jumps(1.0, 0.2, 1.0, set(-10.0, 10.0));
        assert!((f_tilde_eval(&m, 0.0, 0.5, &UFunction(vec![])).unwrap() + 0.1).abs() < 1e-12);
    }

    #[test]
    fn baseline_is_half_theta_squared_over_alpha() {
        let m = no_jumps(2.0, 0.6, 1.5, set(-1.0, 1.0));
        let theta: f64 = 0.4;
        assert!((Generator::exact(&m).baseline(0.0).unwrap() - theta * theta / 4.0).abs() < 1e-14);
    }

    #[test]
    fn f_m_examples() {
        let m = jumpy(set(-1.0, 2.0));
        let u = [0.1, -0.2, 0.4];
        let exact = Generator::exact(&m).eval(0.2, 0.3, &u).unwrap();
        let full = f_m_eval(&m, 20, 5.0, 0.2, 0.3, &UFunction(u.to_vec())).unwrap();
        assert_eq!(exact, full);
        let m = no_jumps(1.0, 0.0, 1.0, set(0.0, 2.0));
        assert_eq!(f_m_eval(&m, 2, 5.0, 0.0, 3.5, &UFunction(vec![])).unwrap(), 0.0);
    }

    #[test]
    fn anchored_identities() {
        let m = jumpy(set(-1.0, 2.0));
        let zero = UFunction::zeros(3);
        for mm in [1, 3, 20] {
            assert_eq!(f_1m_eval(&m, mm, 4.0, 0.4, 0.0, &zero).unwrap(), 0.0);
            let anchor = UFunction(vec![0.2, -0.1, 0.3]);
            assert_eq!(f_km_eval(&m, mm, 4.0, 0.4, 0.0, &zero, Some((0.7, &anchor))).unwrap(), 0.0);
            let u = UFunction(vec![0.3, 0.1, -0.2]);
            let a = f_km_eval(&m, mm, 4.0, 0.4, 0.5, &u, Some((0.0, &zero))).unwrap();
            let b = f_1m_eval(&m, mm, 4.0, 0.4, 0.5, &u).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
        assert!(matches!(f_km_eval(&m, 2, 4.0, 0.4, 0.0, &zero, None), Err(Error::Configuration(_))));
    }

    #[test]
    fn gamma_examples() {
        let m = MarketSpec::constant(0.1, 1.0, &[0.0], JumpGrid::from_pairs(&[(1.0, 1.0)]).unwrap(), 1.0, 1.0, set(-1.0, 1.0))
            .unwrap();
        assert_eq!(gamma_eval(&m, 0.0, &UFunction(vec![0.0]), &UFunction(vec![0.0])).unwrap().0, vec![0.0]);
        let g = gamma_eval(&m, 0.0, &UFunction(vec![1.0]), &UFunction(vec![0.0])).unwrap().0[0];
        // Midpoint quadrature of ∫_0^1 (e^λ − 1) dλ.
        let n = 100_000;
        let quad: f64 = (0..n).map(|k| ((k as f64 + 0.5) / n as f64).exp() - 1.0).sum::<f64>() / n as f64;
        assert!((g - quad).abs() < 1e-9);
        assert!((g - (std::f64::consts::E - 2.0)).abs() < 1e-14);
    }

    #[test]
    fn gamma_endpoints_match_search() {
        let m = jumpy(set(-1.0, 2.0));
        let u = [0.3, -0.4, 0.2];
        let up = [-0.1, 0.2, 0.2];
        let g = Generator::exact(&m).gamma(0.1, &u, &up).unwrap();
        let c = m.coefficients_at(0.1).unwrap();
        for j in 0..3 {
            let mut ext = if u[j] >= up[j] { f64::NEG_INFINITY } else { f64::INFINITY };
            for k in 0..=3000 {
                let pi = -1.0 + k as f64 * 1e-3;
                let (a, b) = (u[j] - pi * c.beta[j], up[j] - pi * c.beta[j]);
                let dq = if a == b {
                    (m.alpha * a).exp() - 1.0
                } else {
                    (g_alpha(m.alpha, a).unwrap() - g_alpha(m.alpha, b).unwrap()) / (a - b)
                };
                ext = if u[j] >= up[j] { ext.max(dq) } else { ext.min(dq) };
            }
            assert!((g[j] - ext).abs() < 1e-9, "atom {j}: {} vs {ext}", g[j]);
        }
    }

    #[test]
    fn lambda_examples() {
        let m = no_jumps(1.0, 0.2, 1.0, set(-10.0, 10.0));
        assert_eq!(lambda_slope(&m, 0.0, 0.3, 0.3, &UFunction(vec![])).unwrap(), 0.0);
        let s = lambda_slope(&m, 0.0, 0.3, -0.5, &UFunction(vec![])).unwrap();
        assert!((s + 0.2).abs() < 1e-12);
    }

    #[test]
    fn merton_positions() {
        let gen = |c| {
            let m = no_jumps(1.0, 0.2, 1.0, c);
            Generator::exact(&m).eval_with_argmin(0.0, 0.0, &[]).unwrap().1
        };
        assert!((gen(set(0.0, 0.3)) - 0.2).abs() < 1e-9);
        assert!((gen(set(0.0, 0.1)) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn overflow_is_reported() {
        let m = MarketSpec::constant(0.1, 1.0, &[0.5], JumpGrid::from_pairs(&[(1.0, 1.0)]).unwrap(), 1.0, 1.0, set(-1.0, 1.0))
            .unwrap();
        assert!(matches!(Generator::exact(&m).eval(0.0, 0.0, &[800.0]), Err(Error::Parameter(_))));
    }

    fn arb_point() -> impl Strategy<Value = (f64, f64, Vec<f64>)> {
        (0.0..1.0f64, -3.0..3.0f64, prop::collection::vec(-1.5..1.5f64, 3))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn growth_sandwich((t, z, u) in arb_point(), wide in any::<bool>()) {
            let m = jumpy(if wide { set(-5.0, 5.0) } else { set(0.0, 0.5) });
            let th = m.theta(t).unwrap();
            let f = Generator::exact(&m).eval(t, z, &u).unwrap();
            let ua = u_alpha_norm(m.alpha, &UFunction(u.clone()), &m.grid).unwrap();
            prop_assert!(-th * z - th * th / (2.0 * m.alpha) <= f + 1e-10);
            prop_assert!(f <= m.alpha / 2.0 * z * z + ua + 1e-10);
            prop_assert!(f_tilde_eval(&m, t, z, &UFunction(u)).unwrap() >= -th * z - 1e-10);
        }

        #[test]
        fn increment_control_in_u((t, z, u) in arb_point(), up in prop::collection::vec(-1.5..1.5f64, 3)) {
            let m = jumpy(set(-1.0, 2.0));
            let g = Generator::exact(&m);
            let gam = g.gamma(t, &u, &up).unwrap();
            let lhs = g.eval(t, z, &u).unwrap() - g.eval(t, z, &up).unwrap();
            let rhs: f64 = m.grid.atoms().iter().enumerate().map(|(j, a)| a.w * gam[j] * (u[j] - up[j])).sum();
            prop_assert!(lhs <= rhs + 1e-9);
            let k: f64 = 1.5;
            let reach = k + m.constraint.radius() * m.beta_sup();
            for &v in &gam {
                prop_assert!(v >= -1.0 + (-m.alpha * reach).exp() - 1e-12);
                prop_assert!(v <= (m.alpha * reach).exp() - 1.0 + 1e-12);
            }
        }

        #[test]
        fn gamma_exact_quotient_without_exposure(u in -2.0..2.0f64, up in -2.0..2.0f64) {
            let m = MarketSpec::constant(0.1, 1.0, &[0.0], JumpGrid::from_pairs(&[(1.0, 1.0)]).unwrap(), 1.4, 1.0, set(-1.0, 1.0)).unwrap();
            let g = Generator::exact(&m).gamma(0.0, &[u], &[up]).unwrap()[0];
            let diff = g_alpha(1.4, u).unwrap() - g_alpha(1.4, up).unwrap();
            prop_assert!((g * (u - up) - diff).abs() <= 1e-12 * (1.0 + diff.abs()));
        }

        #[test]
        fn slope_identity_and_envelope((t, z, u) in arb_point(), zp in -3.0..3.0f64) {
            let m = jumpy(set(-1.0, 2.0));
            let g = Generator::exact(&m);
            let s = g.lambda_slope(t, z, zp, &u).unwrap();
            let diff = g.eval(t, z, &u).unwrap() - g.eval(t, zp, &u).unwrap();
            prop_assert!((s * (z - zp) - diff).abs() <= 1e-12 * (1.0 + diff.abs()));
            if (z - zp).abs() > 1e-3 {
                prop_assert!(s.abs() <= slope_envelope(&m, z, zp) + 1e-6);
            }
        }

        #[test]
        fn truncations_increase_to_the_full_generator((t, z, u) in arb_point()) {
            let m = jumpy(set(-1.0, 2.0));
            let cap = 4.0;
            let mut prev = f64::NEG_INFINITY;
            for mm in [1u32, 2, 5, 20] {
                let v = f_1m_eval(&m, mm, cap, t, z, &UFunction(u.clone())).unwrap();
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
            let tilde = f_tilde_eval(&m, t, z, &UFunction(u.clone())).unwrap();
            prop_assert!(prev <= tilde + 1e-12);
            let th = m.theta(t).unwrap();
            if (z - th / m.alpha).abs() <= 20.0 {
                prop_assert!((prev - tilde).abs() < 1e-12);
            }
        }

        #[test]
        fn truncated_generator_is_lipschitz((t, z, u) in arb_point(), zp in -3.0..3.0f64, up in prop::collection::vec(-1.5..1.5f64, 3), mm in 1u32..6) {
            let m = jumpy(set(-1.0, 2.0));
            let g = Generator::truncated(&m, mm, 3.0).unwrap();
            let a = f_1m_eval(&m, mm, 3.0, t, z, &UFunction(u.clone())).unwrap();
            let b = f_1m_eval(&m, mm, 3.0, t, zp, &UFunction(up.clone())).unwrap();
            let du = UFunction(u).sub(&UFunction(up));
            let dist = (z - zp).abs() + l2_norm_sq(&du, &m.grid).unwrap().sqrt();
            prop_assert!((a - b).abs() <= g.lipschitz_bound() * dist + 1e-9);
        }
    }
}
