//! Shared fixtures and independent oracles for the integration and acceptance tests.
#![allow(dead_code)]

use jumpbsde::lattice::{Lattice, LatticeMode};
use jumpbsde::levy::JumpGrid;
use jumpbsde::market::{Coefficient, ConstraintSet, MarketSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain description of a constant-coefficient market, read by the oracles.
#[derive(Debug, Clone)]
pub struct Plain {
    pub b: f64,
    pub sigma: f64,
    pub beta: Vec<f64>,
    pub atoms: Vec<(f64, f64)>,
    pub alpha: f64,
    pub horizon: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Plain {
    pub fn market(&self) -> MarketSpec<f64> {
        MarketSpec::constant(
            self.b,
            self.sigma,
            &self.beta,
            JumpGrid::from_pairs(&self.atoms).unwrap(),
            self.alpha,
            self.horizon,
            ConstraintSet::new(self.lo, self.hi).unwrap(),
        )
        .unwrap()
    }

    pub fn theta(&self) -> f64 {
        self.b / self.sigma
    }
}

pub fn merton() -> Plain {
    Plain { b: 0.2, sigma: 1.0, beta: vec![], atoms: vec![], alpha: 1.0, horizon: 1.0, lo: -1.0, hi: 1.0 }
}

pub fn one_jump(lo: f64, hi: f64) -> Plain {
    Plain { b: 0.1, sigma: 0.3, beta: vec![0.2], atoms: vec![(0.5, 1.0)], alpha: 1.0, horizon: 1.0, lo, hi }
}

/// Random market, optionally with time-dependent coefficients, always with `0 ∈ C`.
pub fn random_market(rng: &mut ChaCha8Rng) -> MarketSpec<f64> {
    let n_atoms = rng.random_range(0..=3usize);
    let atoms: Vec<(f64, f64)> = (0..n_atoms)
        .map(|_| {
            let x: f64 = rng.random_range(0.05..1.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (sign * x, rng.random_range(0.1..2.0))
        })
        .collect();
    let horizon = rng.random_range(0.5..2.0);
    let coef = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Coefficient<f64> {
        if rng.random::<bool>() {
            Coefficient::Constant(rng.random_range(lo..hi))
        } else {
            let cut = horizon * rng.random_range(0.2..0.8);
            Coefficient::piecewise(vec![cut], vec![rng.random_range(lo..hi), rng.random_range(lo..hi)]).unwrap()
        }
    };
    let b = coef(rng, -0.5, 0.5);
    let sigma = coef(rng, 0.2, 1.5);
    let beta = (0..n_atoms).map(|_| coef(rng, -0.5, 0.5)).collect();
    let lo = -rng.random_range(0.0..2.0);
    let hi = rng.random_range(0.0..2.0);
    MarketSpec::new(
        b,
        sigma,
        beta,
        JumpGrid::from_pairs(&atoms).unwrap(),
        rng.random_range(0.3..3.0),
        horizon,
        ConstraintSet::new(lo, hi).unwrap(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(e^{αy} − 1 − αy)/α`, computed directly.
pub fn g_direct(alpha: f64, y: f64) -> f64 {
    ((alpha * y).exp() - 1.0 - alpha * y) / alpha
}

/// `f(z, u)` by exhaustive search over a uniform π grid of step `dpi`.
pub fn f_grid(p: &Plain, z: f64, u: &[f64], dpi: f64) -> f64 {
    let th = p.theta();
    let k = ((p.hi - p.lo) / dpi).round() as usize;
    let mut best = f64::INFINITY;
    for i in 0..=k {
        let pi = (p.lo + i as f64 * dpi).min(p.hi);
        let d = pi * p.sigma - z - th / p.alpha;
        let mut v = 0.5 * p.alpha * d * d;
        for (j, (_, w)) in p.atoms.iter().enumerate() {
            v += w * g_direct(p.alpha, u[j] - pi * p.beta[j]);
        }
        best = best.min(v);
    }
    best - th * z - th * th / (2.0 * p.alpha)
}

/// Branch code `b`: sign `b % 2` (0 is up), jump slot `b / 2` (0 is none).
pub fn branch_prob(p: &Plain, dt: f64, b: usize) -> f64 {
    let mass: f64 = p.atoms.iter().map(|a| a.1).sum();
    match b / 2 {
        0 => 0.5 * (1.0 - dt * mass),
        j => 0.5 * p.atoms[j - 1].1 * dt,
    }
}

/// Stock price after following `branches` from `s0`.
pub fn price_along(p: &Plain, s0: f64, dt: f64, branches: &[usize]) -> f64 {
    let comp: f64 = p.atoms.iter().zip(&p.beta).map(|(a, b)| a.1 * b).sum();
    branches.iter().fold(s0, |s, &b| {
        let dw = if b % 2 == 0 { dt.sqrt() } else { -dt.sqrt() };
        let jump = if b / 2 == 0 { 0.0 } else { p.beta[b / 2 - 1] };
        s * (1.0 + p.b * dt + p.sigma * dw + jump - comp * dt)
    })
}

/// Backward induction for `(f, B̄)` on the full tree, with `f` from a π grid.
///
/// Returns values per slice indexed by the base-`nb` digits of the branch path.
pub fn dp_oracle(p: &Plain, n: usize, dpi: f64, terminal: impl Fn(&[usize]) -> f64) -> Vec<Vec<f64>> {
    let nb = 2 * (p.atoms.len() + 1);
    let dt = p.horizon / n as f64;
    let sq = dt.sqrt();
    let decode = |mut k: usize, len: usize| {
        let mut d = vec![0; len];
        for slot in d.iter_mut().rev() {
            *slot = k % nb;
            k /= nb;
        }
        d
    };
    let mut out = vec![Vec::new(); n + 1];
    out[n] = (0..nb.pow(n as u32)).map(|k| terminal(&decode(k, n))).collect();
    for i in (0..n).rev() {
        let next = out[i + 1].clone();
        out[i] = (0..nb.pow(i as u32))
            .map(|k| {
                let ch: Vec<f64> = (0..nb).map(|b| next[k * nb + b]).collect();
                let e: f64 = (0..nb).map(|b| branch_prob(p, dt, b) * ch[b]).sum();
                let z: f64 =
                    (0..nb).map(|b| branch_prob(p, dt, b) * ch[b] * if b % 2 == 0 { sq } else { -sq }).sum::<f64>() / dt;
                let u: Vec<f64> = (1..=p.atoms.len())
                    .map(|j| 0.5 * ((ch[2 * j] - ch[0]) + (ch[2 * j + 1] - ch[1])))
                    .collect();
                e + f_grid(p, z, &u, dpi) * dt
            })
            .collect();
    }
    out
}

/// Stock price at each node, computed through the library.
pub fn lattice_prices(m: &MarketSpec<f64>, l: &Lattice<f64>, s0: f64) -> Vec<Vec<f64>> {
    let dt = l.dt();
    l.forward_accumulate(
        s0,
        |s, i, b| m.step_price(*s, l.time(i), dt, l.branch_dw(b), l.branch_jump(b)),
        |a, b| (a - b).abs() <= 1e-12 * a.abs(),
    )
    .unwrap()
}

pub fn tree(m: &MarketSpec<f64>, n: usize) -> Lattice<f64> {
    Lattice::build(n, &m.grid, m.horizon, LatticeMode::Tree).unwrap()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
