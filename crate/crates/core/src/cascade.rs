//! Splitting a bounded terminal condition into `N` small pieces, solving the
//! re-anchored truncated BSDEs one piece at a time, and transporting the sum
//! back to the original generator.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::generator::{jump_cap, Family, Generator, Truncation};
use crate::lattice::{Lattice, LatticeMode};
use crate::levy::equivalence_constant;
use crate::market::MarketSpec;
use crate::scalar::{lit, Scalar};
use crate::solver::{check_apriori, picard_residual, solve, AprioriReport, BsdeSolution, Driver, NodeContext, SolverOptions};

/// Splitting counts above this are flagged as impractical.
pub const LARGE_N: usize = 10_000;

/// Which smallness condition on `M_B/N` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageKind {
    First,
    Later,
}

/// `min{1/(32α), 1/(16C)}` for the first stage, `min{1/(32α), 1/(24C)}` afterwards.
pub fn splitting_threshold<T: Scalar>(alpha: T, c: T, stage: StageKind) -> T {
    let k = match stage {
        StageKind::First => lit::<T>(16.0),
        StageKind::Later => lit::<T>(24.0),
    };
    (T::one() / (lit::<T>(32.0) * alpha)).min(T::one() / (k * c))
}

/// Smallest `N ≥ 1` with `M_B/N` at most the stage threshold.
pub fn compute_n<T: Scalar>(m_b: T, alpha: T, c: T, stage: StageKind) -> Result<usize> {
    if !(m_b >= T::zero()) || !m_b.is_finite() {
        return Err(Error::param("terminal bound M_B must be finite and nonnegative"));
    }
    if !(alpha > T::zero()) || !(c > T::zero()) {
        return Err(Error::param("alpha and the equivalence constant must be positive"));
    }
    let thr = splitting_threshold(alpha, c, stage);
    let fits = |n: usize| m_b / lit::<T>(n as f64) <= thr;
    let mut n = (m_b / thr).ceil().to_usize().ok_or_else(|| Error::param("splitting count overflows"))?.max(1);
    while !fits(n) {
        n += 1;
    }
    while n > 1 && fits(n - 1) {
        n -= 1;
    }
    Ok(n)
}

/// Three levels: the coarsest cut, the level that keeps every atom, no truncation.
pub fn default_schedule<T: Scalar>(market: &MarketSpec<T>) -> Vec<Truncation> {
    let full = market.grid.exhausting_level().max(2);
    vec![Truncation::Level(1), Truncation::Level(full), Truncation::Exact]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig<T> {
    pub m_schedule: Vec<Truncation>,
    pub n_override: Option<usize>,
    pub solver: SolverOptions<T>,
    pub keep_stage_solutions: bool,
}

impl<T: Scalar> CascadeConfig<T> {
    pub fn new(m_schedule: Vec<Truncation>) -> Self {
        Self { m_schedule, n_override: None, solver: SolverOptions::default(), keep_stage_solutions: false }
    }

    fn validate(&self, market: &MarketSpec<T>) -> Result<()> {
        if self.m_schedule.is_empty() {
            return Err(Error::Configuration("m_schedule must not be empty".into()));
        }
        if self.m_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Configuration("m_schedule must be strictly increasing".into()));
        }
        match self.m_schedule.last() {
            Some(Truncation::Level(m)) if *m < market.grid.exhausting_level() => {
                Err(Error::Configuration(format!("last truncation level {m} does not keep every atom")))
            }
            _ => Ok(()),
        }
        .and_then(|_| match self.n_override {
            Some(0) => Err(Error::Configuration("N_override must be positive".into())),
            _ => Ok(()),
        })
    }
}

/// Running sums `(Z̄, Ū)` with the cached values `f^m(t, Z̄ − θ/α, Ū)`.
#[derive(Debug, Clone)]
pub struct Anchors<T> {
    pub z: Vec<Vec<T>>,
    pub u: Vec<Vec<T>>,
    pub baseline: Vec<Vec<T>>,
    n_atoms: usize,
}

fn shifts<T: Scalar>(lattice: &Lattice<T>, market: &MarketSpec<T>) -> Result<Vec<T>> {
    (0..lattice.n_steps()).map(|i| Ok(market.theta(lattice.time(i))? / market.alpha)).collect()
}

impl<T: Scalar> Anchors<T> {
    pub fn zero(lattice: &Lattice<T>, gen: &Generator<'_, T>) -> Result<Self> {
        let j = lattice.n_atoms();
        let n = lattice.n_steps();
        let mut a = Self {
            z: (0..n).map(|i| vec![T::zero(); lattice.num_nodes(i)]).collect(),
            u: (0..n).map(|i| vec![T::zero(); lattice.num_nodes(i) * j]).collect(),
            baseline: Vec::new(),
            n_atoms: j,
        };
        a.refresh(lattice, gen)?;
        Ok(a)
    }

    fn refresh(&mut self, lattice: &Lattice<T>, gen: &Generator<'_, T>) -> Result<()> {
        let shift = shifts(lattice, gen.market())?;
        let j = self.n_atoms;
        self.baseline = (0..lattice.n_steps())
            .map(|i| {
                let t = lattice.time(i);
                (0..lattice.num_nodes(i))
                    .into_par_iter()
                    .with_min_len(256)
                    .map(|k| gen.eval(t, self.z[i][k] - shift[i], &self.u[i][k * j..(k + 1) * j]))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Adds a stage solution to the running sums and re-evaluates the baseline.
    pub fn advance(&mut self, stage: &BsdeSolution<T>, lattice: &Lattice<T>, gen: &Generator<'_, T>) -> Result<()> {
        for i in 0..lattice.n_steps() {
            for (a, d) in self.z[i].iter_mut().zip(&stage.z[i]) {
                *a = *a + *d;
            }
            for (a, d) in self.u[i].iter_mut().zip(&stage.u[i]) {
                *a = *a + *d;
            }
        }
        self.refresh(lattice, gen)
    }
}

/// `f^m(t, (z + Z̄) − θ/α, u + Ū) − f^m(t, Z̄ − θ/α, Ū)` at each node.
pub struct AnchoredDriver<'a, 'm, T> {
    gen: &'a Generator<'m, T>,
    anchors: &'a Anchors<T>,
    shift: Vec<T>,
}

impl<'a, 'm, T: Scalar> AnchoredDriver<'a, 'm, T> {
    pub fn new(gen: &'a Generator<'m, T>, anchors: &'a Anchors<T>, lattice: &Lattice<T>) -> Result<Self> {
        Ok(Self { gen, anchors, shift: shifts(lattice, gen.market())? })
    }
}

impl<T: Scalar> Driver<T> for AnchoredDriver<'_, '_, T> {
    fn eval(&self, ctx: &NodeContext<T>, _y: T, z: T, u: &[T]) -> Result<T> {
        let (i, k) = (ctx.time_index, ctx.node);
        let j = self.anchors.n_atoms;
        let au = &self.anchors.u[i][k * j..(k + 1) * j];
        let moved: Vec<T> = u.iter().zip(au).map(|(a, b)| *a + *b).collect();
        let v = self.gen.eval(ctx.t, (z + self.anchors.z[i][k]) - self.shift[i], &moved)?;
        Ok(v - self.anchors.baseline[i][k])
    }
}

/// Solves one piece `(f^{k,m}, B/N)` against the given anchors.
pub fn run_stage<T: Scalar>(
    k: usize,
    lattice: &Lattice<T>,
    gen: &Generator<'_, T>,
    anchors: &Anchors<T>,
    piece: &[T],
    opts: &SolverOptions<T>,
) -> Result<BsdeSolution<T>> {
    let driver = AnchoredDriver::new(gen, anchors, lattice)?;
    solve(lattice, &driver, piece, opts).map_err(|e| Error::Stage { stage: k, source: Box::new(e) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub level: String,
    #[serde(rename = "Y_0")]
    pub y0: f64,
    #[serde(rename = "sup_abs_Y")]
    pub sup_abs_y: f64,
    pub bound_ok: bool,
    pub residual: f64,
    /// `Σ E|Z^m − Z^last|² dt`.
    pub z_gap: f64,
    /// `Σ E‖U^m − U^last‖²_{L²(n)} dt`.
    pub u_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub levels: Vec<LevelRecord>,
    /// Worst `|Σ_{i≤k} f^{(i)} − f̃(Z̄^k, Ū^k)|` over nodes.
    pub telescoping: f64,
    /// Worst one-step residual of the running sum against `(f̃, kB/N)`.
    pub assembled_residual: f64,
    #[serde(rename = "running_Y_0")]
    pub running_y0: f64,
    /// Smallest `Y^{m'} − Y^{m}` over consecutive levels and nodes (first stage only).
    pub monotone_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeTrace {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_first")]
    pub n_first: usize,
    #[serde(rename = "N_later")]
    pub n_later: usize,
    pub threshold_first: f64,
    pub threshold_later: f64,
    #[serde(rename = "M_B")]
    pub m_b: f64,
    pub equivalence_constant: f64,
    pub jump_cap: f64,
    pub stage_bound: f64,
    pub schedule: Vec<String>,
    /// True when `N` was overridden below the sufficient value.
    pub heuristic: bool,
    pub warnings: Vec<String>,
    pub stages: Vec<StageRecord>,
}

impl CascadeTrace {
    pub fn bounds_ok(&self) -> bool {
        self.stages.iter().all(|s| s.levels.iter().all(|l| l.bound_ok))
    }

    pub fn worst_telescoping(&self) -> f64 {
        self.stages.iter().map(|s| s.telescoping).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct CascadeOutcome<T> {
    pub trace: CascadeTrace,
    /// Sum of the last-level stage solutions: a solution of `(f̃, B)`.
    pub solution: BsdeSolution<T>,
    /// Last-level stage solutions, when requested.
    pub stage_solutions: Vec<BsdeSolution<T>>,
    /// Per level, the first-stage solution (kept for monotonicity checks).
    pub first_stage: Vec<BsdeSolution<T>>,
}

fn f64_of<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn l2_gaps<T: Scalar>(a: &BsdeSolution<T>, b: &BsdeSolution<T>, lattice: &Lattice<T>, probs: &[Vec<T>], weights: &[T]) -> (T, T) {
    let j = weights.len();
    let (mut zg, mut ug) = (T::zero(), T::zero());
    for i in 0..lattice.n_steps() {
        for k in 0..lattice.num_nodes(i) {
            let p = probs[i][k] * lattice.dt();
            let dz = a.z[i][k] - b.z[i][k];
            zg = zg + p * dz * dz;
            for (jj, w) in weights.iter().enumerate() {
                let du = a.u[i][k * j + jj] - b.u[i][k * j + jj];
                ug = ug + p * *w * du * du;
            }
        }
    }
    (zg, ug)
}

/// Runs the full splitting scheme for `(f̃, B)`.
pub fn run_cascade<T: Scalar>(
    lattice: &Lattice<T>,
    market: &MarketSpec<T>,
    terminal: &[T],
    config: &CascadeConfig<T>,
) -> Result<CascadeOutcome<T>> {
    let n_steps = lattice.n_steps();
    check_len(lattice.num_nodes(n_steps), terminal.len())?;
    check_len(market.n_atoms(), lattice.n_atoms())?;
    config.validate(market)?;
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("terminal values must be finite"));
    }
    let alpha = market.alpha;
    let m_b = terminal.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let c_equiv = equivalence_constant(alpha, lit::<T>(2.0) * m_b)?;
    let n_first = compute_n(m_b, alpha, c_equiv, StageKind::First)?;
    let n_later = compute_n(m_b, alpha, c_equiv, StageKind::Later)?;
    let required = n_first.max(n_later);
    let n = config.n_override.unwrap_or(required);
    let mut warnings = Vec::new();
    let heuristic = n < required;
    if heuristic {
        warnings.push(format!("N = {n} is below the sufficient splitting count {required}; results are heuristic"));
    }
    if n > LARGE_N {
        warnings.push(format!("splitting count N = {n} exceeds {LARGE_N}; consider N_override"));
    }
    let m_cap = jump_cap(market, m_b);
    let gens: Vec<Generator<'_, T>> =
        config.m_schedule.iter().map(|&tr| Generator::new(market, tr, m_cap)).collect::<Result<_>>()?;
    let last = gens.len() - 1;
    let n_t = lit::<T>(n as f64);
    let piece: Vec<T> = terminal.iter().map(|&b| b / n_t).collect();
    let stage_bound = m_b / n_t;
    let bound_slack = stage_bound * T::epsilon() * lit(64.0) + T::min_positive_value();

    let mut anchors: Vec<Anchors<T>> = gens.iter().map(|g| Anchors::zero(lattice, g)).collect::<Result<_>>()?;
    let initial_baseline = anchors[last].baseline.clone();
    let probs = lattice.node_probabilities();
    let weights: Vec<T> = market.grid.weights().collect();
    let j = lattice.n_atoms();

    let mut sum_y: Vec<Vec<T>> = (0..=n_steps).map(|i| vec![T::zero(); lattice.num_nodes(i)]).collect();
    let mut sum_f: Vec<Vec<T>> = (0..n_steps).map(|i| vec![T::zero(); lattice.num_nodes(i)]).collect();
    let mut stages = Vec::with_capacity(n);
    let mut stage_solutions = Vec::new();
    let mut first_stage = Vec::new();
    let mut iterations = 0;

    for k in 1..=n {
        let mut sols = Vec::with_capacity(gens.len());
        for (l, gen) in gens.iter().enumerate() {
            sols.push(run_stage(k, lattice, gen, &anchors[l], &piece, &config.solver)?);
        }
        let mut levels = Vec::with_capacity(gens.len());
        for (l, sol) in sols.iter().enumerate() {
            let sup = sol.sup_abs_y();
            let (zg, ug) = l2_gaps(sol, &sols[last], lattice, &probs, &weights);
            levels.push(LevelRecord {
                level: config.m_schedule[l].to_string(),
                y0: f64_of(sol.y0()),
                sup_abs_y: f64_of(sup),
                bound_ok: sup <= stage_bound + bound_slack,
                residual: f64_of(sol.residual),
                z_gap: f64_of(zg),
                u_gap: f64_of(ug),
            });
        }
        let monotone_gap = (k == 1).then(|| {
            sols.windows(2)
                .flat_map(|w| w[1].y.iter().flatten().zip(w[0].y.iter().flatten()).map(|(a, b)| *a - *b))
                .fold(T::infinity(), T::min)
        });
        for (l, sol) in sols.iter().enumerate() {
            anchors[l].advance(sol, lattice, &gens[l])?;
        }
        let stage = sols.pop().expect("schedule is not empty");
        if k == 1 {
            first_stage = sols;
            first_stage.push(stage.clone());
        }
        iterations = iterations.max(stage.iterations);
        for (acc, v) in sum_y.iter_mut().zip(&stage.y) {
            for (a, b) in acc.iter_mut().zip(v) {
                *a = *a + *b;
            }
        }
        for (acc, v) in sum_f.iter_mut().zip(&stage.drift) {
            for (a, b) in acc.iter_mut().zip(v) {
                *a = *a + *b;
            }
        }
        // Telescoping: the summed stage drifts against f̃ re-evaluated at the running sums.
        let mut telescoping = T::zero();
        let mut assembled = T::zero();
        let mut buf = Vec::new();
        for i in 0..n_steps {
            for node in 0..lattice.num_nodes(i) {
                let tilde = anchors[last].baseline[i][node] - initial_baseline[i][node];
                telescoping = telescoping.max((sum_f[i][node] - tilde).abs());
                lattice.gather(i, node, &sum_y[i + 1], &mut buf);
                let e = lattice.conditional_expectation(&buf)?;
                assembled = assembled.max((sum_y[i][node] - e - tilde * lattice.dt()).abs());
            }
        }
        stages.push(StageRecord {
            stage: k,
            levels,
            telescoping: f64_of(telescoping),
            assembled_residual: f64_of(assembled),
            running_y0: f64_of(sum_y[0][0]),
            monotone_gap: monotone_gap.map(f64_of),
        });
        if config.keep_stage_solutions {
            stage_solutions.push(stage);
        }
    }

    let top = &anchors[last];
    let drift: Vec<Vec<T>> = (0..n_steps)
        .map(|i| top.baseline[i].iter().zip(&initial_baseline[i]).map(|(a, b)| *a - *b).collect())
        .collect();
    let mut solution = BsdeSolution {
        y: sum_y,
        z: top.z.clone(),
        u: top.u.clone(),
        drift,
        n_atoms: j,
        iterations,
        residual: T::zero(),
    };
    solution.residual = if n_steps == 0 {
        T::zero()
    } else {
        let frozen = FrozenDrift { drift: &solution.drift };
        picard_residual(&solution, lattice, &frozen)?
    };
    let trace = CascadeTrace {
        n,
        n_first,
        n_later,
        threshold_first: f64_of(splitting_threshold(alpha, c_equiv, StageKind::First)),
        threshold_later: f64_of(splitting_threshold(alpha, c_equiv, StageKind::Later)),
        m_b: f64_of(m_b),
        equivalence_constant: f64_of(c_equiv),
        jump_cap: f64_of(m_cap),
        stage_bound: f64_of(stage_bound),
        schedule: config.m_schedule.iter().map(ToString::to_string).collect(),
        heuristic,
        warnings,
        stages,
    };
    Ok(CascadeOutcome { trace, solution, stage_solutions, first_stage })
}

/// Driver that replays stored per-node values.
struct FrozenDrift<'a, T> {
    drift: &'a [Vec<T>],
}

impl<T: Scalar> Driver<T> for FrozenDrift<'_, T> {
    fn eval(&self, ctx: &NodeContext<T>, _y: T, _z: T, _u: &[T]) -> Result<T> {
        Ok(self.drift[ctx.time_index][ctx.node])
    }
}

/// Agreement tolerance for path quantities meeting at a recombined node.
fn recombine_tol<T: Scalar>() -> T {
    T::epsilon() * lit(1024.0)
}

/// `S_i = Σ_{s<i} [f(t_s, −θ/α, 0) dt + (θ_s/α) ΔW_s]` at every node.
pub fn path_shift<T: Scalar>(lattice: &Lattice<T>, market: &MarketSpec<T>) -> Result<Vec<Vec<T>>> {
    let gen = Generator::exact(market);
    let dt = lattice.dt();
    let per_step: Vec<(T, T)> = (0..lattice.n_steps())
        .map(|i| {
            let t = lattice.time(i);
            Ok((gen.baseline(t)? * dt, market.theta(t)? / market.alpha))
        })
        .collect::<Result<_>>()?;
    let tol = recombine_tol::<T>();
    lattice.forward_accumulate(
        T::zero(),
        |s, i, b| Ok(*s + per_step[i].0 + per_step[i].1 * lattice.branch_dw(b)),
        |a, b| (*a - *b).abs() <= tol * (T::one() + a.abs()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// From `(f̃, B)` to `(f, B̄)`.
    Forward,
    /// From `(f, B̄)` back to `(f̃, B)`.
    Inverse,
}

/// Additive change of variables `Ȳ = Y − S`, `Z̄ = Z − θ/α`, `Ū = U`.
pub fn change_of_variables<T: Scalar>(
    solution: &BsdeSolution<T>,
    direction: Direction,
    lattice: &Lattice<T>,
    market: &MarketSpec<T>,
) -> Result<BsdeSolution<T>> {
    check_len(lattice.n_steps(), solution.n_steps())?;
    let shift = path_shift(lattice, market)?;
    let gen = Generator::exact(market);
    let sign = match direction {
        Direction::Forward => -T::one(),
        Direction::Inverse => T::one(),
    };
    let mut out = solution.clone();
    for (ys, ss) in out.y.iter_mut().zip(&shift) {
        for (y, s) in ys.iter_mut().zip(ss) {
            *y = *y + sign * *s;
        }
    }
    for i in 0..lattice.n_steps() {
        let t = lattice.time(i);
        let th = market.theta(t)? / market.alpha;
        let base = gen.baseline(t)?;
        for z in out.z[i].iter_mut() {
            *z = *z + sign * th;
        }
        for f in out.drift[i].iter_mut() {
            *f = *f - sign * base;
        }
    }
    Ok(out)
}

/// `max_node |exp(αȲ) − exp(αY) Π_{s<i} exp(−θ_s ΔW_s − θ_s² dt/2)| / exp(αȲ)`.
pub fn exp_identity_gap<T: Scalar>(
    tilde: &BsdeSolution<T>,
    bar: &BsdeSolution<T>,
    lattice: &Lattice<T>,
    market: &MarketSpec<T>,
) -> Result<T> {
    let dt = lattice.dt();
    let thetas: Vec<T> = (0..lattice.n_steps()).map(|i| market.theta(lattice.time(i))).collect::<Result<_>>()?;
    let tol = recombine_tol::<T>();
    let log_density = lattice.forward_accumulate(
        T::zero(),
        |s, i, b| Ok(*s - thetas[i] * lattice.branch_dw(b) - thetas[i] * thetas[i] * dt / lit(2.0)),
        |a, b| (*a - *b).abs() <= tol * (T::one() + a.abs()),
    )?;
    let alpha = market.alpha;
    let mut worst = T::zero();
    for i in 0..=lattice.n_steps() {
        for k in 0..lattice.num_nodes(i) {
            let lhs = (alpha * bar.y[i][k]).exp();
            let rhs = (alpha * tilde.y[i][k]).exp() * log_density[i][k].exp();
            worst = worst.max((lhs - rhs).abs() / lhs);
        }
    }
    Ok(worst)
}

/// `E|Π exp(−θΔW − θ²dt/2) − Π(1 − θΔW)|` at the horizon: the gap between the
/// exponential density and the discrete stochastic exponential.
pub fn stochastic_exponential_gap<T: Scalar>(lattice: &Lattice<T>, market: &MarketSpec<T>) -> Result<T> {
    let dt = lattice.dt();
    let thetas: Vec<T> = (0..lattice.n_steps()).map(|i| market.theta(lattice.time(i))).collect::<Result<_>>()?;
    let tol = recombine_tol::<T>();
    let pairs = lattice.forward_accumulate(
        (T::one(), T::one()),
        |s, i, b| {
            let dw = lattice.branch_dw(b);
            let th = thetas[i];
            Ok((s.0 * (-th * dw - th * th * dt / lit(2.0)).exp(), s.1 * (T::one() - th * dw)))
        },
        |a, b| (a.0 - b.0).abs() <= tol * a.0.abs() && (a.1 - b.1).abs() <= tol * (T::one() + a.1.abs()),
    )?;
    let probs = lattice.node_probabilities();
    let n = lattice.n_steps();
    Ok(pairs[n].iter().zip(&probs[n]).map(|(s, p)| *p * (s.0 - s.1).abs()).sum())
}

/// `B ∧ n`.
pub fn truncate_terminal<T: Scalar>(values: &[T], n: u32) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::param("truncation level n must be at least 1"));
    }
    let cap = lit::<T>(n as f64);
    Ok(values.iter().map(|&b| b.min(cap)).collect())
}

/// Solution of `(f, B̄)` with everything used to build it.
#[derive(Debug, Clone)]
pub struct QuadraticSolution<T> {
    /// `(Ȳ, Z̄, Ū)` for `(f, B̄)`.
    pub solution: BsdeSolution<T>,
    /// `(Y, Z, U)` for `(f̃, B)`.
    pub tilde: BsdeSolution<T>,
    /// Pathwise shift `S_i`.
    pub shift: Vec<Vec<T>>,
    /// Terminal condition `B = B̄ + S_n` of the shifted problem.
    pub terminal: Vec<T>,
    /// Constant removed from `B` before splitting.
    pub offset: T,
    pub trace: CascadeTrace,
    /// One-step residual of `(Ȳ, Z̄, Ū)` against `f`.
    pub residual: T,
    pub apriori_shifted: AprioriReport,
    pub apriori_original: AprioriReport,
}

/// Solves the quadratic BSDE `(f, B̄)` through the shifted problem `(f̃, B)`.
pub fn solve_quadratic<T: Scalar>(
    lattice: &Lattice<T>,
    market: &MarketSpec<T>,
    b_bar: &[T],
    config: &CascadeConfig<T>,
) -> Result<QuadraticSolution<T>> {
    let n = lattice.n_steps();
    check_len(lattice.num_nodes(n), b_bar.len())?;
    if b_bar.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("terminal values must be finite"));
    }
    if lattice.mode() == LatticeMode::Markov && !market.theta_is_constant() {
        return Err(Error::Configuration("markov mode needs a time-constant market price of risk".into()));
    }
    let shift = path_shift(lattice, market)?;
    let terminal: Vec<T> = b_bar.iter().zip(&shift[n]).map(|(b, s)| *b + *s).collect();
    let offset = terminal.iter().fold(T::infinity(), |m, v| m.min(*v));
    let reduced: Vec<T> = terminal.iter().map(|v| *v - offset).collect();
    let outcome = run_cascade(lattice, market, &reduced, config)?;
    let mut tilde = outcome.solution;
    for v in tilde.y.iter_mut().flatten() {
        *v = *v + offset;
    }
    let solution = change_of_variables(&tilde, Direction::Forward, lattice, market)?;
    let residual = if n == 0 {
        T::zero()
    } else {
        match config.m_schedule.last() {
            Some(Truncation::Exact) => picard_residual(&solution, lattice, &Generator::exact(market))?,
            _ => picard_residual(&solution, lattice, &FrozenDrift { drift: &solution.drift })?,
        }
    };
    let sup = |v: &[T]| v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let apriori_shifted = check_apriori(&tilde, lattice, market, sup(&terminal), Family::Shifted)?;
    let apriori_original = check_apriori(&solution, lattice, market, sup(b_bar), Family::Original)?;
    Ok(QuadraticSolution {
        solution,
        tilde,
        shift,
        terminal,
        offset,
        trace: outcome.trace,
        residual,
        apriori_shifted,
        apriori_original,
    })
}
