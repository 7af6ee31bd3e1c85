//! JSON run configuration.

use std::path::PathBuf;

use jumpbsde::cascade::{default_schedule, CascadeConfig};
use jumpbsde::generator::Truncation;
use jumpbsde::lattice::{Lattice, LatticeMode};
use jumpbsde::levy::{Atom, JumpGrid};
use jumpbsde::market::{Coefficient, ConstraintSet, MarketSpec};
use jumpbsde::solver::SolverOptions;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketBlock,
    pub lattice: LatticeBlock,
    pub terminal: TerminalBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub cascade: CascadeBlock,
    pub mc: Option<McBlock>,
    #[serde(default)]
    pub output: OutputBlock,
    /// Starting wealth `x` for the optimize subcommand.
    #[serde(default)]
    pub initial_wealth: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CoefficientBlock {
    Constant(f64),
    Piecewise { breakpoints: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomBlock {
    pub x: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    pub b: CoefficientBlock,
    pub sigma: CoefficientBlock,
    #[serde(default)]
    pub beta: Vec<CoefficientBlock>,
    #[serde(default)]
    pub grid: Vec<AtomBlock>,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub constraint: ConstraintBlock,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModeBlock {
    Tree,
    Markov,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeBlock {
    pub n_steps: usize,
    pub mode: ModeBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum TerminalBlock {
    Constant { value: f64 },
    /// `min(scale (S_T − strike)⁺, cap)`.
    Call {
        s0: f64,
        strike: f64,
        #[serde(default = "one")]
        scale: f64,
        cap: Option<f64>,
    },
    /// One value per terminal node.
    Table { values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    SolverOptions::<f64>::default().picard_tol
}

fn default_iter() -> usize {
    SolverOptions::<f64>::default().max_iter
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self { picard_tol: default_tol(), max_iter: default_iter() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LevelBlock {
    Level(u32),
    Named(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeBlock {
    pub m_schedule: Option<Vec<LevelBlock>>,
    #[serde(rename = "N_override")]
    pub n_override: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    pub paths: usize,
    pub seed: u64,
    /// Number of random comparison strategies.
    #[serde(default = "twenty")]
    pub strategies: usize,
}

fn twenty() -> usize {
    20
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_dir(), formats: default_formats() }
    }
}

/// Parses a configuration, reporting the JSON path of any schema violation.
pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })
}

fn at(path: &str) -> impl Fn(jumpbsde::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{path}: {e}"))
}

impl CoefficientBlock {
    fn build(&self, path: &str) -> Result<Coefficient<f64>, CliError> {
        match self {
            Self::Constant(v) => Ok(Coefficient::Constant(*v)),
            Self::Piecewise { breakpoints, values } => {
                Coefficient::piecewise(breakpoints.clone(), values.clone()).map_err(at(path))
            }
        }
    }
}

impl RunConfig {
    pub fn market(&self) -> Result<MarketSpec<f64>, CliError> {
        let m = &self.market;
        let constraint = ConstraintSet::new(m.constraint.lo, m.constraint.hi).map_err(at("market.constraint"))?;
        let grid = JumpGrid::new(m.grid.iter().map(|a| Atom { x: a.x, w: a.w }).collect()).map_err(at("market.grid"))?;
        let beta = m
            .beta
            .iter()
            .enumerate()
            .map(|(j, c)| c.build(&format!("market.beta[{j}]")))
            .collect::<Result<Vec<_>, _>>()?;
        MarketSpec::new(
            m.b.build("market.b")?,
            m.sigma.build("market.sigma")?,
            beta,
            grid,
            m.alpha,
            m.horizon,
            constraint,
        )
        .map_err(at("market"))
    }

    pub fn lattice(&self, market: &MarketSpec<f64>) -> Result<Lattice<f64>, CliError> {
        let mode = match self.lattice.mode {
            ModeBlock::Tree => LatticeMode::Tree,
            ModeBlock::Markov => LatticeMode::Markov,
        };
        market.check_step_size(self.lattice.n_steps).map_err(at("lattice.n_steps"))?;
        Lattice::build(self.lattice.n_steps, &market.grid, market.horizon, mode).map_err(at("lattice"))
    }

    pub fn terminal(&self, market: &MarketSpec<f64>, lattice: &Lattice<f64>) -> Result<Vec<f64>, CliError> {
        let n = lattice.n_steps();
        let count = lattice.num_nodes(n);
        match &self.terminal {
            TerminalBlock::Constant { value } => Ok(vec![*value; count]),
            TerminalBlock::Call { s0, strike, scale, cap } => {
                let prices = lattice.prices(market, *s0).map_err(at("terminal.params"))?;
                let cap = cap.unwrap_or(f64::INFINITY);
                Ok(prices[n].iter().map(|s| (scale * (s - strike).max(0.0)).min(cap)).collect())
            }
            TerminalBlock::Table { values } if values.len() == count => Ok(values.clone()),
            TerminalBlock::Table { values } => Err(CliError::Config(format!(
                "terminal.params.values: expected {count} terminal values, got {}",
                values.len()
            ))),
        }
    }

    pub fn solver(&self) -> SolverOptions<f64> {
        SolverOptions { picard_tol: self.solver.picard_tol, max_iter: self.solver.max_iter }
    }

    pub fn cascade(&self, market: &MarketSpec<f64>) -> Result<CascadeConfig<f64>, CliError> {
        let schedule = match &self.cascade.m_schedule {
            None => default_schedule(market),
            Some(levels) => levels
                .iter()
                .enumerate()
                .map(|(i, l)| match l {
                    LevelBlock::Level(m) if *m >= 1 => Ok(Truncation::Level(*m)),
                    LevelBlock::Named(s) if s == "exact" => Ok(Truncation::Exact),
                    _ => Err(CliError::Config(format!(
                        "cascade.m_schedule[{i}]: expected a positive integer or \"exact\""
                    ))),
                })
                .collect::<Result<_, _>>()?,
        };
        let mut cfg = CascadeConfig::new(schedule);
        cfg.n_override = self.cascade.n_override;
        cfg.solver = self.solver();
        Ok(cfg)
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}
