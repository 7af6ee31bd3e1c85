//! Exponential-utility maximization on top of the quadratic BSDE: value,
//! optimal positions, and checks of the optimality structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::generator::Generator;
use crate::lattice::{Lattice, LatticeMode};
use crate::levy::check_exponent;
use crate::market::{ConstraintSet, MarketSpec};
use crate::scalar::{lit, Scalar};
use crate::solver::BsdeSolution;

/// `−exp(−α(x − Ȳ₀))`.
pub fn value_function<T: Scalar>(y_bar_0: T, x: T, alpha: T) -> Result<T> {
    if !(alpha > T::zero()) {
        return Err(Error::param("alpha must be positive"));
    }
    let e = -alpha * (x - y_bar_0);
    check_exponent(e)?;
    Ok(-e.exp())
}

/// A position per node, held over the following step.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyTable<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> StrategyTable<T> {
    pub fn constant(lattice: &Lattice<T>, pi: T) -> Self {
        Self { values: (0..lattice.n_steps()).map(|i| vec![pi; lattice.num_nodes(i)]).collect() }
    }

    /// Independent uniform draws in the constraint set at every node.
    pub fn random(lattice: &Lattice<T>, set: &ConstraintSet<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (set.lo().to_f64().unwrap_or(0.0), set.hi().to_f64().unwrap_or(0.0));
        let values = (0..lattice.n_steps())
            .map(|i| {
                (0..lattice.num_nodes(i))
                    .map(|_| if hi > lo { set.project(lit(rng.random_range(lo..=hi))) } else { set.lo() })
                    .collect()
            })
            .collect();
        Self { values }
    }

    fn check(&self, lattice: &Lattice<T>, set: &ConstraintSet<T>) -> Result<()> {
        check_len(lattice.n_steps(), self.values.len())?;
        for (i, row) in self.values.iter().enumerate() {
            check_len(lattice.num_nodes(i), row.len())?;
            if let Some((k, pi)) = row.iter().enumerate().find(|(_, p)| !set.contains(**p)) {
                return Err(Error::Admissibility(format!(
                    "position {pi} at step {i} node {k} outside [{}, {}]",
                    set.lo(),
                    set.hi()
                )));
            }
        }
        Ok(())
    }
}

/// `n` seeded random strategies.
pub fn random_strategies<T: Scalar>(lattice: &Lattice<T>, set: &ConstraintSet<T>, n: usize, seed: u64) -> Vec<StrategyTable<T>> {
    (0..n).map(|s| StrategyTable::random(lattice, set, seed.wrapping_add(s as u64))).collect()
}

/// Minimizer of the inner objective at each node's `(Z̄, Ū)`.
pub fn optimal_strategy<T: Scalar>(
    solution: &BsdeSolution<T>,
    market: &MarketSpec<T>,
    lattice: &Lattice<T>,
) -> Result<StrategyTable<T>> {
    check_len(lattice.n_steps(), solution.n_steps())?;
    let gen = Generator::exact(market);
    let values = (0..lattice.n_steps())
        .map(|i| {
            let t = lattice.time(i);
            (0..lattice.num_nodes(i))
                .into_par_iter()
                .with_min_len(256)
                .map(|k| gen.eval_with_argmin(t, solution.z[i][k], solution.u_at(i, k)).map(|(_, pi)| pi))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    Ok(StrategyTable { values })
}

/// `α(−πb − f + (α/2)|πσ − Z̄|² + Σ w g_α(Ū − πβ))·dt` per node.
pub fn a_process<T: Scalar>(
    strategy: &StrategyTable<T>,
    solution: &BsdeSolution<T>,
    market: &MarketSpec<T>,
    lattice: &Lattice<T>,
) -> Result<Vec<Vec<T>>> {
    strategy.check(lattice, &market.constraint)?;
    check_len(lattice.n_steps(), solution.n_steps())?;
    let gen = Generator::exact(market);
    let alpha = market.alpha;
    let half = lit::<T>(0.5);
    let dt = lattice.dt();
    (0..lattice.n_steps())
        .map(|i| {
            let t = lattice.time(i);
            let c = market.coefficients_at(t)?;
            (0..lattice.num_nodes(i))
                .map(|k| {
                    let pi = strategy.values[i][k];
                    let z = solution.z[i][k];
                    let u = solution.u_at(i, k);
                    let f = gen.eval(t, z, u)?;
                    let d = pi * c.sigma - z;
                    let mut obj = -pi * c.b + half * alpha * d * d;
                    for (j, atom) in market.grid.atoms().iter().enumerate() {
                        obj = obj + atom.w * crate::levy::g_alpha(alpha, u[j] - pi * c.beta[j])?;
                    }
                    Ok(alpha * (obj - f) * dt)
                })
                .collect()
        })
        .collect()
}

/// How the one-step supermartingale gaps were computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapMode {
    /// Wealth propagated along the tree; gaps are `R_i − E[R_{i+1} | node]`.
    TreeExact,
    /// Gaps divided by `|R_i|`, which removes the dependence on past wealth.
    Normalized,
}

/// One-step gaps `R_i − E[R_{i+1} | node]` with `R = −exp(−αX + αȲ)`.
///
/// Nonnegative gaps mean the supermartingale inequality holds at that node.
pub fn supermartingale_gaps<T: Scalar>(
    strategy: &StrategyTable<T>,
    solution: &BsdeSolution<T>,
    market: &MarketSpec<T>,
    lattice: &Lattice<T>,
    x: T,
) -> Result<(GapMode, Vec<Vec<T>>)> {
    strategy.check(lattice, &market.constraint)?;
    let alpha = market.alpha;
    let nb = lattice.n_branches();
    let returns = branch_returns(market, lattice)?;
    let mode = match lattice.mode() {
        LatticeMode::Tree => GapMode::TreeExact,
        LatticeMode::Markov => GapMode::Normalized,
    };
    let wealth = match mode {
        GapMode::TreeExact => Some(wealth_on_tree(strategy, &returns, lattice, x)?),
        GapMode::Normalized => None,
    };
    let mut out = Vec::with_capacity(lattice.n_steps());
    let mut growth = vec![T::zero(); nb];
    for i in 0..lattice.n_steps() {
        let mut row = Vec::with_capacity(lattice.num_nodes(i));
        for k in 0..lattice.num_nodes(i) {
            let pi = strategy.values[i][k];
            let y = solution.y[i][k];
            for (b, g) in growth.iter_mut().enumerate() {
                let c = lattice.child(i, k, b);
                let e = alpha * (solution.y[i + 1][c] - y) - alpha * pi * returns[i][b];
                check_exponent(e)?;
                *g = e.exp();
            }
            let ratio = lattice.conditional_expectation(&growth)? - T::one();
            let scale = match &wealth {
                Some(w) => {
                    let e = alpha * (y - w[i][k]);
                    check_exponent(e)?;
                    e.exp()
                }
                None => T::one(),
            };
            row.push(scale * ratio);
        }
        out.push(row);
    }
    Ok((mode, out))
}

fn branch_returns<T: Scalar>(market: &MarketSpec<T>, lattice: &Lattice<T>) -> Result<Vec<Vec<T>>> {
    let dt = lattice.dt();
    (0..lattice.n_steps())
        .map(|i| {
            let t = lattice.time(i);
            (0..lattice.n_branches())
                .map(|b| market.relative_return(t, dt, lattice.branch_dw(b), lattice.branch_jump(b)))
                .collect()
        })
        .collect()
}

fn wealth_on_tree<T: Scalar>(strategy: &StrategyTable<T>, returns: &[Vec<T>], lattice: &Lattice<T>, x: T) -> Result<Vec<Vec<T>>> {
    let nb = lattice.n_branches();
    let mut out = vec![vec![x]];
    for i in 0..lattice.n_steps() {
        let next: Vec<T> = (0..lattice.num_nodes(i + 1))
            .map(|c| {
                let (k, b) = (c / nb, c % nb);
                out[i][k] + strategy.values[i][k] * returns[i][b]
            })
            .collect();
        out.push(next);
    }
    Ok(out)
}

/// Largest `exp(−αX^π)` on the tree against `exp(α(|x| + r Σ_i max_b |ΔS/S|))`,
/// with `r` the radius of the constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrabilityProxy {
    pub max_value: f64,
    pub bound: f64,
    pub ok: bool,
}

pub fn integrability_proxy<T: Scalar>(
    strategy: &StrategyTable<T>,
    market: &MarketSpec<T>,
    lattice: &Lattice<T>,
    x: T,
) -> Result<IntegrabilityProxy> {
    strategy.check(lattice, &market.constraint)?;
    let alpha = market.alpha;
    let returns = branch_returns(market, lattice)?;
    let envelope: T = returns.iter().map(|r| r.iter().fold(T::zero(), |m, v| m.max(v.abs()))).sum();
    let bound_exp = alpha * (x.abs() + market.constraint.radius() * envelope);
    check_exponent(bound_exp)?;
    let worst = match lattice.mode() {
        LatticeMode::Tree => {
            let w = wealth_on_tree(strategy, &returns, lattice, x)?;
            w.iter().flatten().fold(T::neg_infinity(), |m, v| m.max(-alpha * *v))
        }
        // Recombining states carry no wealth; bound the one-step losses instead.
        LatticeMode::Markov => {
            let mut s = -alpha * x;
            for (i, r) in returns.iter().enumerate() {
                let worst_step = strategy.values[i]
                    .iter()
                    .flat_map(|pi| r.iter().map(move |v| -alpha * *pi * *v))
                    .fold(T::neg_infinity(), T::max);
                s = s + worst_step.max(T::zero());
            }
            s
        }
    };
    check_exponent(worst)?;
    let (max_value, bound) = (worst.exp(), bound_exp.exp());
    Ok(IntegrabilityProxy {
        max_value: max_value.to_f64().unwrap_or(f64::NAN),
        bound: bound.to_f64().unwrap_or(f64::NAN),
        ok: max_value <= bound * (T::one() + T::epsilon() * lit(64.0)),
    })
}

/// Sample mean and standard error of `−exp(−α(X_T − B̄))` over sampled paths.
pub fn terminal_utility_mc<T: Scalar>(
    strategy: &StrategyTable<T>,
    solution: &BsdeSolution<T>,
    market: &MarketSpec<T>,
    lattice: &Lattice<T>,
    x: T,
    paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    strategy.check(lattice, &market.constraint)?;
    if paths == 0 {
        return Err(Error::param("paths must be positive"));
    }
    let returns = branch_returns(market, lattice)?;
    let alpha = market.alpha;
    let n = lattice.n_steps();
    let samples: Vec<f64> = lattice
        .sample_paths(paths, seed)
        .par_iter()
        .map(|p| {
            let nodes = lattice.follow(p);
            let mut w = x;
            for (i, &b) in p.branches.iter().enumerate() {
                w = w + strategy.values[i][nodes[i]] * returns[i][b as usize];
            }
            let e = -alpha * (w - solution.y[n][nodes[n]]);
            check_exponent(e)?;
            Ok(-e.exp().to_f64().unwrap_or(f64::NAN))
        })
        .collect::<Result<_>>()?;
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let se = if samples.len() > 1 {
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyVerdict {
    pub id: String,
    pub estimate: f64,
    pub se: f64,
    /// Optimal strategy: within 3 SE of `V(x)`. Others: at most `V(x) + 3 SE`.
    pub verdict: bool,
    /// Smallest one-step gap over nodes.
    pub worst_gap: f64,
    /// Smallest increment of the compensator.
    pub a_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    #[serde(rename = "V_formula")]
    pub v_formula: f64,
    #[serde(rename = "V_mc_estimate")]
    pub v_mc_estimate: f64,
    #[serde(rename = "V_mc_se")]
    pub v_mc_se: f64,
    pub per_strategy: Vec<StrategyVerdict>,
    #[serde(rename = "A_max_abs_optimal")]
    pub a_max_abs_optimal: f64,
    /// Smallest one-step gap over the non-optimal strategies and all nodes.
    pub supermartingale_worst_gap: f64,
    /// Largest `|gap|` under the optimal strategy.
    pub martingale_worst_gap: f64,
    pub gap_mode: GapMode,
    pub integrability: Vec<IntegrabilityProxy>,
    pub paths: usize,
    pub seed: u64,
}

impl OptimalityReport {
    pub fn mc_verdicts_pass(&self) -> bool {
        self.per_strategy.iter().all(|s| s.verdict)
    }
}

fn min_of<T: Scalar>(rows: &[Vec<T>]) -> f64 {
    rows.iter().flatten().fold(T::infinity(), |m, v| m.min(*v)).to_f64().unwrap_or(f64::NAN)
}

/// Runs every optimality check for the optimal strategy and the given ones.
pub fn verify_optimality<T: Scalar>(
    market: &MarketSpec<T>,
    lattice: &Lattice<T>,
    solution: &BsdeSolution<T>,
    x: T,
    strategies: &[StrategyTable<T>],
    paths: usize,
    seed: u64,
) -> Result<OptimalityReport> {
    for s in strategies {
        s.check(lattice, &market.constraint)?;
    }
    let v = value_function(solution.y0(), x, market.alpha)?;
    let v_f = v.to_f64().unwrap_or(f64::NAN);
    let optimal = optimal_strategy(solution, market, lattice)?;
    let a_opt = a_process(&optimal, solution, market, lattice)?;
    let a_max_abs_optimal = a_opt.iter().flatten().fold(T::zero(), |m, v| m.max(v.abs())).to_f64().unwrap_or(f64::NAN);
    let (gap_mode, opt_gaps) = supermartingale_gaps(&optimal, solution, market, lattice, x)?;
    let martingale_worst_gap = opt_gaps.iter().flatten().fold(T::zero(), |m, v| m.max(v.abs())).to_f64().unwrap_or(f64::NAN);

    let (est, se) = terminal_utility_mc(&optimal, solution, market, lattice, x, paths, seed)?;
    let mut per_strategy = vec![StrategyVerdict {
        id: "optimal".into(),
        estimate: est,
        se,
        verdict: (est - v_f).abs() <= 3.0 * se,
        worst_gap: min_of(&opt_gaps),
        a_min: min_of(&a_opt),
    }];
    let mut integrability = vec![integrability_proxy(&optimal, market, lattice, x)?];
    let mut worst = f64::INFINITY;
    for (id, s) in strategies.iter().enumerate() {
        let (_, gaps) = supermartingale_gaps(s, solution, market, lattice, x)?;
        let g = min_of(&gaps);
        worst = worst.min(g);
        let a = a_process(s, solution, market, lattice)?;
        let (e, se) = terminal_utility_mc(s, solution, market, lattice, x, paths, seed)?;
        per_strategy.push(StrategyVerdict {
            id: format!("strategy-{id}"),
            estimate: e,
            se,
            verdict: e <= v_f + 3.0 * se,
            worst_gap: g,
            a_min: min_of(&a),
        });
        integrability.push(integrability_proxy(s, market, lattice, x)?);
    }
    Ok(OptimalityReport {
        v_formula: v_f,
        v_mc_estimate: est,
        v_mc_se: se,
        per_strategy,
        a_max_abs_optimal,
        supermartingale_worst_gap: worst,
        martingale_worst_gap,
        gap_mode,
        integrability,
        paths,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{solve_quadratic, CascadeConfig};
    use crate::generator::Truncation;
    use crate::levy::JumpGrid;

    fn merton(lo: f64, hi: f64) -> MarketSpec<f64> {
        MarketSpec::constant(0.2, 1.0, &[], JumpGrid::empty(), 1.0, 1.0, ConstraintSet::new(lo, hi).unwrap()).unwrap()
    }

    fn solved(m: &MarketSpec<f64>, n: usize, mode: LatticeMode) -> (Lattice<f64>, BsdeSolution<f64>) {
        let l = Lattice::build(n, &m.grid, m.horizon, mode).unwrap();
        let b = vec![0.0; l.num_nodes(n)];
        let q = solve_quadratic(&l, m, &b, &CascadeConfig::new(vec![Truncation::Exact])).unwrap();
        (l, q.solution)
    }

    #[test]
    fn value_function_values() {
        assert!((value_function(0.0, 1.0, 1.0).unwrap() + (-1.0f64).exp()).abs() < 1e-15);
        assert!((value_function(-0.02, 1.0, 1.0).unwrap() + (-1.02f64).exp()).abs() < 1e-15);
        assert!(value_function(0.0, -1000.0, 1.0).is_err());
        assert!(value_function(0.0, 2.0, 1.0).unwrap() > value_function(0.0, 1.0, 1.0).unwrap());
        assert!(value_function(0.5, 1.0, 1.0).unwrap() < value_function(0.0, 1.0, 1.0).unwrap());
    }

    #[test]
    fn merton_positions() {
        for ((lo, hi), want) in [((-5.0, 5.0), 0.2), ((0.0, 0.1), 0.1)] {
            let m = merton(lo, hi);
            let (l, s) = solved(&m, 6, LatticeMode::Tree);
            let pi = optimal_strategy(&s, &m, &l).unwrap();
            // Grid search for the constrained quadratic argmin.
            let grid_best = (0..=100_000)
                .map(|k| lo + (hi - lo) * k as f64 / 100_000.0)
                .min_by(|a, b| ((a - 0.2f64).powi(2)).partial_cmp(&(b - 0.2f64).powi(2)).unwrap())
                .unwrap();
            assert!((grid_best - want).abs() < 1e-4);
            assert!(pi.values.iter().flatten().all(|p| (p - want).abs() < 1e-9), "{:?}", pi.values[0]);
        }
    }

    #[test]
    fn compensator_signs() {
        let m = merton(-1.0, 1.0);
        let (l, s) = solved(&m, 6, LatticeMode::Tree);
        let opt = optimal_strategy(&s, &m, &l).unwrap();
        let a = a_process(&opt, &s, &m, &l).unwrap();
        assert!(a.iter().flatten().all(|v| v.abs() <= 1e-12));
        let bumped = StrategyTable::constant(&l, 0.25);
        let a = a_process(&bumped, &s, &m, &l).unwrap();
        assert!(a.iter().flatten().all(|v| *v > 1e-6));
        for r in random_strategies(&l, &m.constraint, 5, 3) {
            assert!(a_process(&r, &s, &m, &l).unwrap().iter().flatten().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn out_of_set_strategy_rejected() {
        let m = merton(0.0, 0.1);
        let (l, s) = solved(&m, 3, LatticeMode::Tree);
        let bad = StrategyTable::constant(&l, 0.5);
        assert!(matches!(a_process(&bad, &s, &m, &l), Err(Error::Admissibility(_))));
        assert!(matches!(verify_optimality(&m, &l, &s, 1.0, &[bad], 10, 1), Err(Error::Admissibility(_))));
    }

    #[test]
    fn degenerate_market_zero_strategy() {
        let m = MarketSpec::constant(0.0, 1.0, &[], JumpGrid::empty(), 1.0, 1.0, ConstraintSet::new(-1.0, 1.0).unwrap())
            .unwrap();
        let (l, s) = solved(&m, 8, LatticeMode::Tree);
        assert!(s.y.iter().flatten().all(|v| *v == 0.0));
        let opt = optimal_strategy(&s, &m, &l).unwrap();
        assert!(opt.values.iter().flatten().all(|p| *p == 0.0));
        let (est, se) = terminal_utility_mc(&opt, &s, &m, &l, 1.0, 100, 9).unwrap();
        assert!((est + (-1.0f64).exp()).abs() < 1e-15 && se < 1e-15, "{est} {se}");
    }

    #[test]
    fn random_strategies_are_seeded_and_admissible() {
        let m = merton(-0.5, 1.5);
        let l = Lattice::build(4, &m.grid, 1.0, LatticeMode::Tree).unwrap();
        let a = random_strategies(&l, &m.constraint, 3, 11);
        assert_eq!(a, random_strategies(&l, &m.constraint, 3, 11));
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|s| s.check(&l, &m.constraint).is_ok()));
    }

    #[test]
    fn integrability_bound_holds() {
        let m = merton(-2.0, 2.0);
        let (l, _) = solved(&m, 8, LatticeMode::Tree);
        for s in random_strategies(&l, &m.constraint, 4, 5) {
            let p = integrability_proxy(&s, &m, &l, 0.5).unwrap();
            assert!(p.ok && p.max_value.is_finite(), "{p:?}");
        }
    }
}
