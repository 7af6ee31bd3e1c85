//! Backward induction on the lattice: explicit in `(Z, U)`, implicit in `Y`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::generator::{apriori_constants, Family, Generator};
use crate::lattice::Lattice;
use crate::levy::{equivalence_constant, g_raw, check_exponent};
use crate::market::MarketSpec;
use crate::scalar::{lit, Scalar};

/// Where a driver is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeContext<T> {
    pub time_index: usize,
    pub node: usize,
    pub t: T,
}

/// Generator of a BSDE as seen by the solver.
pub trait Driver<T: Scalar>: Sync {
    fn eval(&self, ctx: &NodeContext<T>, y: T, z: T, u: &[T]) -> Result<T>;

    /// Whether `eval` reads `y`; if not, no fixed-point iteration is run.
    fn depends_on_y(&self) -> bool {
        false
    }
}

/// Driver from a closure `(t, y, z, u) -> value`.
pub struct FnDriver<F> {
    f: F,
    uses_y: bool,
}

impl<F> FnDriver<F> {
    pub fn new(f: F) -> Self {
        Self { f, uses_y: false }
    }

    pub fn with_y(f: F) -> Self {
        Self { f, uses_y: true }
    }
}

impl<T, F> Driver<T> for FnDriver<F>
where
    T: Scalar,
    F: Fn(T, T, T, &[T]) -> T + Sync,
{
    fn eval(&self, ctx: &NodeContext<T>, y: T, z: T, u: &[T]) -> Result<T> {
        Ok((self.f)(ctx.t, y, z, u))
    }

    fn depends_on_y(&self) -> bool {
        self.uses_y
    }
}

impl<T: Scalar> Driver<T> for Generator<'_, T> {
    fn eval(&self, ctx: &NodeContext<T>, _y: T, z: T, u: &[T]) -> Result<T> {
        Generator::eval(self, ctx.t, z, u)
    }
}

/// `f(t, z − θ/α, u) − f(t, −θ/α, 0)` with the baseline cached per time index.
pub struct ShiftedDriver<'a, T> {
    gen: Generator<'a, T>,
    baseline: Vec<T>,
    shift: Vec<T>,
}

impl<'a, T: Scalar> ShiftedDriver<'a, T> {
    pub fn new(gen: Generator<'a, T>, lattice: &Lattice<T>) -> Result<Self> {
        let mut baseline = Vec::with_capacity(lattice.n_steps());
        let mut shift = Vec::with_capacity(lattice.n_steps());
        for i in 0..lattice.n_steps() {
            let t = lattice.time(i);
            baseline.push(gen.baseline(t)?);
            shift.push(gen.market().theta(t)? / gen.market().alpha);
        }
        Ok(Self { gen, baseline, shift })
    }
}

impl<T: Scalar> Driver<T> for ShiftedDriver<'_, T> {
    fn eval(&self, ctx: &NodeContext<T>, _y: T, z: T, u: &[T]) -> Result<T> {
        let i = ctx.time_index;
        Ok(self.gen.eval(ctx.t, z - self.shift[i], u)? - self.baseline[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    pub picard_tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        Self { picard_tol: lit(1e-10), max_iter: 200 }
    }
}

/// Per-node `(Y, Z, U)` on a lattice, with the driver values used at each node.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution<T> {
    /// `n + 1` slices.
    pub y: Vec<Vec<T>>,
    /// `n` slices.
    pub z: Vec<Vec<T>>,
    /// `n` slices, node-major with `n_atoms` values per node.
    pub u: Vec<Vec<T>>,
    /// Driver value at each non-terminal node.
    pub drift: Vec<Vec<T>>,
    pub n_atoms: usize,
    /// Largest fixed-point iteration count over nodes.
    pub iterations: usize,
    /// Largest one-step residual over nodes.
    pub residual: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionSummary {
    #[serde(rename = "Y_0")]
    pub y0: f64,
    #[serde(rename = "sup_abs_Y")]
    pub sup_abs_y: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl<T: Scalar> BsdeSolution<T> {
    pub fn n_steps(&self) -> usize {
        self.y.len() - 1
    }

    pub fn y0(&self) -> T {
        self.y[0][0]
    }

    pub fn u_at(&self, i: usize, node: usize) -> &[T] {
        &self.u[i][node * self.n_atoms..(node + 1) * self.n_atoms]
    }

    pub fn sup_abs_y(&self) -> T {
        self.y.iter().flatten().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            y0: self.y0().to_f64().unwrap_or(f64::NAN),
            sup_abs_y: self.sup_abs_y().to_f64().unwrap_or(f64::NAN),
            residual: self.residual.to_f64().unwrap_or(f64::NAN),
            iterations: self.iterations,
        }
    }

    /// Solution with no steps: only the terminal slice.
    pub fn terminal_only(terminal: Vec<T>, n_atoms: usize) -> Self {
        Self { y: vec![terminal], z: vec![], u: vec![], drift: vec![], n_atoms, iterations: 0, residual: T::zero() }
    }
}

struct NodeOut<T> {
    y: T,
    z: T,
    u: Vec<T>,
    f: T,
    iters: usize,
    residual: T,
}

fn solve_node<T: Scalar, D: Driver<T> + ?Sized>(
    driver: &D,
    ctx: NodeContext<T>,
    e: T,
    z: T,
    u: Vec<T>,
    dt: T,
    opts: &SolverOptions<T>,
) -> Result<NodeOut<T>> {
    if !driver.depends_on_y() {
        let f = driver.eval(&ctx, e, z, &u)?;
        let y = e + f * dt;
        return Ok(NodeOut { y, z, residual: (y - e - f * dt).abs(), u, f, iters: 1 });
    }
    let mut y = e;
    let mut damping = T::one();
    let mut last_step = T::infinity();
    for it in 1..=opts.max_iter {
        let f = driver.eval(&ctx, y, z, &u)?;
        let step = e + f * dt - y;
        if !step.is_finite() {
            break;
        }
        if step.abs() <= opts.picard_tol {
            let y_new = y + step;
            let f_new = driver.eval(&ctx, y_new, z, &u)?;
            let residual = (y_new - e - f_new * dt).abs();
            if residual <= opts.picard_tol {
                return Ok(NodeOut { y: y_new, z, u, f: f_new, iters: it, residual });
            }
        }
        if step.abs() >= last_step {
            damping = lit(0.5);
        }
        last_step = step.abs();
        y = y + damping * step;
    }
    Err(Error::Convergence {
        time_index: ctx.time_index,
        node: ctx.node,
        residual: last_step.to_f64().unwrap_or(f64::NAN),
    })
}

/// Solves `Y_i = E[Y_{i+1}] + f(t_i, Y_i, Z_i, U_i) dt` backwards from `terminal`.
pub fn solve<T, D>(lattice: &Lattice<T>, driver: &D, terminal: &[T], opts: &SolverOptions<T>) -> Result<BsdeSolution<T>>
where
    T: Scalar,
    D: Driver<T> + ?Sized,
{
    let n = lattice.n_steps();
    check_len(lattice.num_nodes(n), terminal.len())?;
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("terminal values must be finite"));
    }
    if !(opts.picard_tol > T::zero()) || opts.max_iter == 0 {
        return Err(Error::param("picard_tol must be positive and max_iter at least 1"));
    }
    let j = lattice.n_atoms();
    let dt = lattice.dt();
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n];
    let mut u = vec![Vec::new(); n];
    let mut drift = vec![Vec::new(); n];
    y[n] = terminal.to_vec();
    let mut iterations = 0;
    let mut residual = T::zero();
    for i in (0..n).rev() {
        let t = lattice.time(i);
        let next = &y[i + 1];
        let outs: Vec<NodeOut<T>> = (0..lattice.num_nodes(i))
            .into_par_iter()
            .with_min_len(256)
            .map_init(Vec::new, |buf, node| {
                lattice.gather(i, node, next, buf);
                let p = lattice.project(buf)?;
                solve_node(driver, NodeContext { time_index: i, node, t }, p.e, p.z, p.u, dt, opts)
            })
            .collect::<Result<_>>()?;
        let mut ys = Vec::with_capacity(outs.len());
        let mut zs = Vec::with_capacity(outs.len());
        let mut us = Vec::with_capacity(outs.len() * j);
        let mut fs = Vec::with_capacity(outs.len());
        for o in outs {
            ys.push(o.y);
            zs.push(o.z);
            us.extend(o.u);
            fs.push(o.f);
            iterations = iterations.max(o.iters);
            residual = residual.max(o.residual);
        }
        y[i] = ys;
        z[i] = zs;
        u[i] = us;
        drift[i] = fs;
    }
    Ok(BsdeSolution { y, z, u, drift, n_atoms: j, iterations, residual })
}

/// Largest `|Y_i − E[Y_{i+1}] − f(t_i, Y_i, Z_i, U_i) dt|`, using the stored `(Z, U)`.
pub fn picard_residual<T, D>(solution: &BsdeSolution<T>, lattice: &Lattice<T>, driver: &D) -> Result<T>
where
    T: Scalar,
    D: Driver<T> + ?Sized,
{
    let n = lattice.n_steps();
    check_len(n, solution.n_steps())?;
    let dt = lattice.dt();
    let mut worst = T::zero();
    for i in 0..n {
        let t = lattice.time(i);
        let next = &solution.y[i + 1];
        let slice_worst = (0..lattice.num_nodes(i))
            .into_par_iter()
            .with_min_len(256)
            .map_init(Vec::new, |buf, node| {
                lattice.gather(i, node, next, buf);
                let e = lattice.conditional_expectation(buf)?;
                let yi = solution.y[i][node];
                let ctx = NodeContext { time_index: i, node, t };
                let f = driver.eval(&ctx, yi, solution.z[i][node], solution.u_at(i, node))?;
                Ok((yi - e - f * dt).abs())
            })
            .try_reduce(T::zero, |a, b| Ok(a.max(b)))?;
        worst = worst.max(slice_worst);
    }
    Ok(worst)
}

/// Outcome of one bound check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub passed: bool,
    /// Smallest slack over nodes; negative means violated.
    pub worst_margin: f64,
    /// `(time_index, node)` attaining the worst margin.
    pub worst_node: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriReport {
    pub lower: f64,
    pub upper: f64,
    pub checks: Vec<BoundCheck>,
}

impl AprioriReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Worst<T> {
    margin: T,
    node: Option<(usize, usize)>,
}

impl<T: Scalar> Worst<T> {
    fn new() -> Self {
        Self { margin: T::infinity(), node: None }
    }

    fn see(&mut self, margin: T, at: (usize, usize)) {
        if margin < self.margin || margin.is_nan() {
            self.margin = margin;
            self.node = Some(at);
        }
    }

    fn finish(self, name: &str, slack: T) -> BoundCheck {
        let margin = if self.node.is_none() { T::zero() } else { self.margin };
        BoundCheck {
            name: name.to_string(),
            passed: margin >= -slack,
            worst_margin: margin.to_f64().unwrap_or(f64::NAN),
            worst_node: self.node,
        }
    }
}

/// Checks the a priori estimates on a solution whose terminal sup is `terminal_sup`.
///
/// `value_bounds`: `C₁ ≤ Y ≤ C₂`. `jump_sup`: `|U|_{L∞(n)} ≤ 2|Y|_∞`.
/// `equivalence`: `C⁻¹‖U‖² ≤ |U|_α ≤ C‖U‖²` per node and summed over the lattice.
/// `conditional_upper`/`conditional_lower`: the node-wise exponential and
/// second-moment bounds.
pub fn check_apriori<T: Scalar>(
    solution: &BsdeSolution<T>,
    lattice: &Lattice<T>,
    market: &MarketSpec<T>,
    terminal_sup: T,
    family: Family,
) -> Result<AprioriReport> {
    let n = lattice.n_steps();
    check_len(n, solution.n_steps())?;
    check_len(market.n_atoms(), solution.n_atoms)?;
    let slack: T = lit(1e-9);
    let alpha = market.alpha;
    let consts = apriori_constants(market, terminal_sup, family);
    let y_sup = solution.sup_abs_y();
    let k_equiv = lit::<T>(2.0) * y_sup;
    let c_equiv = equivalence_constant(alpha, k_equiv)?;
    let weights: Vec<T> = market.grid.weights().collect();
    let probs = lattice.node_probabilities();

    let mut lower = Worst::new();
    let mut upper = Worst::new();
    for (i, slice) in solution.y.iter().enumerate() {
        for (k, &y) in slice.iter().enumerate() {
            lower.see(y - consts.lower, (i, k));
            upper.see(consts.upper - y, (i, k));
        }
    }

    let mut jump = Worst::new();
    let mut equiv = Worst::new();
    let (mut sum_ua, mut sum_l2) = (T::zero(), T::zero());
    for i in 0..n {
        for k in 0..lattice.num_nodes(i) {
            let u = solution.u_at(i, k);
            let mut linf = T::zero();
            let mut l2 = T::zero();
            let mut ua = T::zero();
            for (w, &v) in weights.iter().zip(u) {
                if *w > T::zero() {
                    linf = linf.max(v.abs());
                }
                check_exponent(alpha * v)?;
                l2 = l2 + *w * v * v;
                ua = ua + *w * g_raw(alpha, v);
            }
            jump.see(lit::<T>(2.0) * y_sup - linf, (i, k));
            let scale = T::one() + ua.abs();
            equiv.see(((c_equiv * l2 - ua).min(ua - l2 / c_equiv)) / scale, (i, k));
            let pw = probs[i][k] * lattice.dt();
            sum_ua = sum_ua + pw * ua;
            sum_l2 = sum_l2 + pw * l2;
        }
    }
    let aggregate = (c_equiv * sum_l2 - sum_ua).min(sum_ua - sum_l2 / c_equiv) / (T::one() + sum_ua);
    equiv.see(aggregate, (0, 0));

    // Node-wise log E[exp(K(B + a))] and E[B²], by backward recursion.
    let k_exp = lit::<T>(2.0) * alpha;
    let budget = match family {
        Family::Shifted => consts.drift_budget,
        Family::Original => T::zero(),
    };
    let mut log_exp: Vec<T> = solution.y[n].iter().map(|&b| k_exp * (b + budget)).collect();
    let mut second: Vec<T> = solution.y[n].iter().map(|&b| b * b).collect();
    let mut cond_up = Worst::new();
    let mut cond_lo = Worst::new();
    let shift_lo = match family {
        Family::Shifted => T::zero(),
        Family::Original => consts.drift_budget / lit(2.0),
    };
    let mut buf = Vec::new();
    for i in (0..=n).rev() {
        if i < n {
            let mut le = Vec::with_capacity(lattice.num_nodes(i));
            let mut sm = Vec::with_capacity(lattice.num_nodes(i));
            for k in 0..lattice.num_nodes(i) {
                lattice.gather(i, k, &log_exp, &mut buf);
                let top = buf.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
                let s: T = buf.iter().zip(lattice.law().probs()).map(|(v, p)| *p * (*v - top).exp()).sum();
                le.push(top + s.ln());
                lattice.gather(i, k, &second, &mut buf);
                sm.push(lattice.conditional_expectation(&buf)?);
            }
            log_exp = le;
            second = sm;
        }
        for (k, &y) in solution.y[i].iter().enumerate() {
            cond_up.see(log_exp[k] / k_exp - y, (i, k));
            cond_lo.see(y + consts.density_norm * second[k].sqrt() + shift_lo, (i, k));
        }
    }

    Ok(AprioriReport {
        lower: consts.lower.to_f64().unwrap_or(f64::NAN),
        upper: consts.upper.to_f64().unwrap_or(f64::NAN),
        checks: vec![
            lower.finish("value_lower", slack),
            upper.finish("value_upper", slack),
            jump.finish("jump_sup", slack),
            equiv.finish("equivalence", slack),
            cond_up.finish("conditional_upper", slack),
            cond_lo.finish("conditional_lower", slack),
        ],
    })
}
