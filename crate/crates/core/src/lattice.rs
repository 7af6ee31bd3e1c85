//! Discrete noise for the backward scheme: binomial Brownian steps combined with
//! at most one jump per step.
//!
//! Branch `b` of a node carries the Brownian sign `b % 2` (0 is up) and the jump
//! slot `b / 2` (0 is no jump, `j + 1` is atom `j`).

use std::collections::HashMap;

use num_traits::Num;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::levy::JumpGrid;
use crate::market::MarketSpec;
use crate::scalar::{lit, Scalar};

/// Largest step count accepted in tree mode.
pub const MAX_TREE_STEPS: usize = 20;
/// Largest total node count accepted in either mode.
pub const MAX_NODES: usize = 1 << 23;

const SAMPLE_CHUNK: usize = 4096;

/// Branch probabilities of one step, generic so exact arithmetic can be used.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLaw<R> {
    probs: Vec<R>,
}

impl<R: Num + Clone + PartialOrd> BranchLaw<R> {
    /// `½(1 − dt Σw)` per sign for no jump, `½ w_j dt` per sign for atom `j`.
    pub fn new(dt: R, weights: &[R]) -> Result<Self> {
        let two = R::one() + R::one();
        let half = R::one() / two.clone();
        let mass = weights.iter().cloned().fold(R::zero(), |a, w| a + w);
        let jump_prob = dt.clone() * mass;
        if jump_prob > half || dt <= R::zero() {
            return Err(Error::param("jump probability per step must lie in [0, 1/2]"));
        }
        let mut probs = Vec::with_capacity(2 * (weights.len() + 1));
        let stay = half.clone() * (R::one() - jump_prob);
        probs.push(stay.clone());
        probs.push(stay);
        for w in weights {
            let p = half.clone() * w.clone() * dt.clone();
            probs.push(p.clone());
            probs.push(p);
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[R] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `Σ_b p_b v_b`.
    pub fn expectation(&self, values: &[R]) -> R {
        self.probs.iter().zip(values).fold(R::zero(), |a, (p, v)| a + p.clone() * v.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeMode {
    /// Non-recombining: every branch sequence is its own node.
    Tree,
    /// Recombining on (up moves, jumps per atom).
    Markov,
}

/// State of a node in Markov mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MarkovState {
    pub ups: u32,
    pub jumps: Vec<u32>,
}

#[derive(Debug, Clone)]
struct MarkovIndex {
    states: Vec<Vec<MarkovState>>,
    /// `children[i][node * nb + b]`.
    children: Vec<Vec<usize>>,
}

/// Expectation, Brownian and jump components of a one-step martingale increment.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub e: T,
    pub z: T,
    pub u: Vec<T>,
}

/// One sampled branch sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub branches: Vec<u16>,
    pub seed: u64,
    pub index: u64,
}

impl Path {
    pub fn dw<T: Scalar>(&self, lattice: &Lattice<T>, i: usize) -> T {
        lattice.branch_dw(self.branches[i] as usize)
    }

    pub fn jump<T: Scalar>(&self, lattice: &Lattice<T>, i: usize) -> Option<usize> {
        lattice.branch_jump(self.branches[i] as usize)
    }
}

#[derive(Debug, Clone)]
pub struct Lattice<T> {
    n_steps: usize,
    horizon: T,
    dt: T,
    sqrt_dt: T,
    mode: LatticeMode,
    n_atoms: usize,
    law: BranchLaw<T>,
    slice_sizes: Vec<usize>,
    markov: Option<MarkovIndex>,
}

impl<T: Scalar> Lattice<T> {
    pub fn build(n_steps: usize, grid: &JumpGrid<T>, horizon: T, mode: LatticeMode) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::param("n_steps must be at least 1"));
        }
        if !(horizon > T::zero()) {
            return Err(Error::param("horizon must be positive"));
        }
        let dt = horizon / lit(n_steps as f64);
        let mass = grid.total_mass();
        if dt * mass > lit(0.5) {
            let need = (horizon * mass / lit::<T>(0.5)).ceil().to_usize().unwrap_or(usize::MAX);
            return Err(Error::StepSize {
                reason: format!("jump probability {} per step exceeds 1/2", dt * mass),
                suggested_steps: need.max(n_steps + 1),
            });
        }
        let weights: Vec<T> = grid.weights().collect();
        let law = BranchLaw::new(dt, &weights)?;
        let nb = law.len();
        let mut lattice = Self {
            n_steps,
            horizon,
            dt,
            sqrt_dt: dt.sqrt(),
            mode,
            n_atoms: grid.len(),
            law,
            slice_sizes: Vec::new(),
            markov: None,
        };
        match mode {
            LatticeMode::Tree => {
                if n_steps > MAX_TREE_STEPS {
                    return Err(Error::Configuration(format!(
                        "tree mode allows at most {MAX_TREE_STEPS} steps; use markov mode"
                    )));
                }
                let mut total = 0usize;
                let mut size = 1usize;
                for i in 0..=n_steps {
                    if i > 0 {
                        size = size.saturating_mul(nb);
                    }
                    total = total.saturating_add(size);
                    if total > MAX_NODES {
                        return Err(Error::Configuration(format!(
                            "tree with {nb} branches and {n_steps} steps exceeds {MAX_NODES} nodes; use markov mode"
                        )));
                    }
                    lattice.slice_sizes.push(size);
                }
            }
            LatticeMode::Markov => lattice.build_markov()?,
        }
        Ok(lattice)
    }

    fn build_markov(&mut self) -> Result<()> {
        let nb = self.n_branches();
        let mut states = vec![vec![MarkovState { ups: 0, jumps: vec![0; self.n_atoms] }]];
        let mut children = Vec::with_capacity(self.n_steps);
        let mut total = 1usize;
        for i in 0..self.n_steps {
            let mut index: HashMap<MarkovState, usize> = HashMap::new();
            let mut next = Vec::new();
            let mut kids = Vec::with_capacity(states[i].len() * nb);
            for s in &states[i] {
                for b in 0..nb {
                    let mut c = s.clone();
                    if b % 2 == 0 {
                        c.ups += 1;
                    }
                    if let Some(j) = self.branch_jump(b) {
                        c.jumps[j] += 1;
                    }
                    let id = *index.entry(c.clone()).or_insert_with(|| {
                        next.push(c);
                        next.len() - 1
                    });
                    kids.push(id);
                }
            }
            total += next.len();
            if total > MAX_NODES {
                return Err(Error::Configuration(format!("markov lattice exceeds {MAX_NODES} nodes")));
            }
            states.push(next);
            children.push(kids);
        }
        self.slice_sizes = states.iter().map(Vec::len).collect();
        self.markov = Some(MarkovIndex { states, children });
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn sqrt_dt(&self) -> T {
        self.sqrt_dt
    }

    pub fn mode(&self) -> LatticeMode {
        self.mode
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_branches(&self) -> usize {
        self.law.len()
    }

    pub fn law(&self) -> &BranchLaw<T> {
        &self.law
    }

    pub fn time(&self, i: usize) -> T {
        if i == self.n_steps {
            self.horizon
        } else {
            self.dt * lit(i as f64)
        }
    }

    pub fn num_nodes(&self, i: usize) -> usize {
        self.slice_sizes[i]
    }

    pub fn total_nodes(&self) -> usize {
        self.slice_sizes.iter().sum()
    }

    pub fn branch_dw(&self, b: usize) -> T {
        if b.is_multiple_of(2) {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }

    pub fn branch_jump(&self, b: usize) -> Option<usize> {
        (b / 2).checked_sub(1)
    }

    /// Index in slice `i + 1` of branch `b` out of `node`.
    pub fn child(&self, i: usize, node: usize, b: usize) -> usize {
        let nb = self.n_branches();
        match &self.markov {
            None => node * nb + b,
            Some(mk) => mk.children[i][node * nb + b],
        }
    }

    /// Values of `next` (slice `i + 1`) at the children of `node`, in branch order.
    pub fn gather(&self, i: usize, node: usize, next: &[T], out: &mut Vec<T>) {
        let nb = self.n_branches();
        out.clear();
        match &self.markov {
            None => out.extend_from_slice(&next[node * nb..(node + 1) * nb]),
            Some(mk) => out.extend(mk.children[i][node * nb..(node + 1) * nb].iter().map(|&c| next[c])),
        }
    }

    /// Parent index and branch label of `node` in slice `i` (tree mode only).
    pub fn parent(&self, i: usize, node: usize) -> Option<(usize, usize)> {
        if i == 0 || self.markov.is_some() {
            return None;
        }
        let nb = self.n_branches();
        Some((node / nb, node % nb))
    }

    /// Branch labels leading to `node` in slice `i` (tree mode only).
    pub fn branch_path(&self, i: usize, node: usize) -> Option<Vec<usize>> {
        if self.markov.is_some() {
            return None;
        }
        let nb = self.n_branches();
        let mut labels = vec![0; i];
        let mut k = node;
        for slot in labels.iter_mut().rev() {
            *slot = k % nb;
            k /= nb;
        }
        Some(labels)
    }

    pub fn markov_state(&self, i: usize, node: usize) -> Option<&MarkovState> {
        self.markov.as_ref().map(|mk| &mk.states[i][node])
    }

    /// Probability of reaching each node.
    pub fn node_probabilities(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::one()]];
        for i in 0..self.n_steps {
            let mut next = vec![T::zero(); self.num_nodes(i + 1)];
            for (node, &p) in out[i].iter().enumerate() {
                for (b, &q) in self.law.probs().iter().enumerate() {
                    let c = self.child(i, node, b);
                    next[c] = next[c] + p * q;
                }
            }
            out.push(next);
        }
        out
    }

    /// Propagates a quantity from the root along branches.
    ///
    /// In Markov mode every parent of a recombined node must agree according to `agree`.
    pub fn forward_accumulate<S, F, A>(&self, init: S, step: F, agree: A) -> Result<Vec<Vec<S>>>
    where
        S: Clone + Send + Sync,
        F: Fn(&S, usize, usize) -> Result<S> + Sync,
        A: Fn(&S, &S) -> bool,
    {
        let nb = self.n_branches();
        let mut out: Vec<Vec<S>> = vec![vec![init]];
        for i in 0..self.n_steps {
            let prev = &out[i];
            let next = match &self.markov {
                None => (0..self.num_nodes(i + 1))
                    .into_par_iter()
                    .with_min_len(1024)
                    .map(|k| step(&prev[k / nb], i, k % nb))
                    .collect::<Result<Vec<S>>>()?,
                Some(_) => {
                    let mut slots: Vec<Option<S>> = vec![None; self.num_nodes(i + 1)];
                    for (node, s) in prev.iter().enumerate() {
                        for b in 0..nb {
                            let c = self.child(i, node, b);
                            let v = step(s, i, b)?;
                            match &slots[c] {
                                None => slots[c] = Some(v),
                                Some(old) if agree(old, &v) => {}
                                Some(_) => {
                                    return Err(Error::Configuration(format!(
                                        "path-dependent quantity at step {} node {c} does not recombine",
                                        i + 1
                                    )))
                                }
                            }
                        }
                    }
                    slots.into_iter().map(|s| s.expect("every markov node has a parent")).collect()
                }
            };
            out.push(next);
        }
        Ok(out)
    }

    /// `Σ_b p_b v_b` over the children values of one node.
    pub fn conditional_expectation(&self, child_values: &[T]) -> Result<T> {
        check_len(self.n_branches(), child_values.len())?;
        Ok(self.law.expectation(child_values))
    }

    /// `E[V dW]/dt`.
    pub fn brownian_projection(&self, child_values: &[T]) -> Result<T> {
        check_len(self.n_branches(), child_values.len())?;
        let s: T = child_values
            .iter()
            .zip(self.law.probs())
            .enumerate()
            .map(|(b, (v, p))| if b % 2 == 0 { *p * *v } else { -(*p * *v) })
            .sum();
        Ok(s / self.sqrt_dt)
    }

    /// Per-atom jump amplitude, averaged over the Brownian sign.
    pub fn jump_projection(&self, child_values: &[T]) -> Result<Vec<T>> {
        check_len(self.n_branches(), child_values.len())?;
        let half: T = lit(0.5);
        Ok((0..self.n_atoms)
            .map(|j| {
                let b = 2 * (j + 1);
                half * ((child_values[b] - child_values[0]) + (child_values[b + 1] - child_values[1]))
            })
            .collect())
    }

    pub fn project(&self, child_values: &[T]) -> Result<Projection<T>> {
        Ok(Projection {
            e: self.conditional_expectation(child_values)?,
            z: self.brownian_projection(child_values)?,
            u: self.jump_projection(child_values)?,
        })
    }

    /// Independent branch sequences drawn with the lattice probabilities.
    pub fn sample_paths(&self, count: usize, seed: u64) -> Vec<Path> {
        let cumulative: Vec<f64> = self
            .law
            .probs()
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.to_f64().unwrap_or(0.0);
                Some(*acc)
            })
            .collect();
        let chunks = count.div_ceil(SAMPLE_CHUNK);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let lo = c * SAMPLE_CHUNK;
                let hi = (lo + SAMPLE_CHUNK).min(count);
                let cumulative = &cumulative;
                (lo..hi)
                    .map(move |index| {
                        let branches = (0..self.n_steps)
                            .map(|_| {
                                let x: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                                cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1) as u16
                            })
                            .collect();
                        Path { branches, seed, index: index as u64 }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Underlying price at every node, starting from `s0`.
    pub fn prices(&self, market: &MarketSpec<T>, s0: T) -> Result<Vec<Vec<T>>> {
        let dt = self.dt;
        let tol = T::epsilon() * lit(1024.0);
        self.forward_accumulate(
            s0,
            |s, i, b| market.step_price(*s, self.time(i), dt, self.branch_dw(b), self.branch_jump(b)),
            |a, b| (*a - *b).abs() <= tol * a.abs(),
        )
    }

    /// Node index at every slice along `path`.
    pub fn follow(&self, path: &Path) -> Vec<usize> {
        let mut nodes = Vec::with_capacity(self.n_steps + 1);
        let mut k = 0;
        nodes.push(k);
        for (i, &b) in path.branches.iter().enumerate() {
            k = self.child(i, k, b as usize);
            nodes.push(k);
        }
        nodes
    }
}
