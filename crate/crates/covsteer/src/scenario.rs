//! Scenario files: loading, validation, discretization, and result export.
//!
//! A scenario is a TOML document (schema in `docs/scenario-format.md`)
//! describing the agents, obstacles, neighbor graph, safety margins, risk
//! level, and algorithm settings of one steering problem. Loading produces a
//! fully validated [`Scenario`] with continuous-time dynamics already
//! discretized; [`Scenario::to_file`] converts back to the normalized file
//! form, in which every default is explicit and re-loading reproduces the
//! same scenario.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgoKind, AlgorithmConfig, InitPolicy, PccMode};
use crate::consensus::Topology;
use crate::constraints::Obstacle;
use crate::dynamics::{discretize_dynamics, discretize_noise, AgentSpec};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// A validated steering problem: discrete-time agents, obstacle set,
/// neighbor graph, margins, risk level, and algorithm settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub horizon: usize,
    /// Feedback band width (number of past disturbance blocks each control
    /// step may react to).
    pub gamma: usize,
    pub seed: u64,
    /// Discretization step the dynamics were derived with, if any.
    pub dt: Option<f64>,
    /// Total per-constraint violation probability bound.
    pub eps: f64,
    /// Each agent's share of a pair's risk budget; shares of any two
    /// neighbors sum to at most one.
    pub risk_shares: Vec<f64>,
    pub agents: Vec<AgentSpec>,
    pub obstacles: Vec<Obstacle>,
    pub topology: Topology,
    /// Symmetric matrix of inter-agent margins; entry `(i, j)` is the
    /// clearance the pair must keep (diagonal unused).
    pub pair_margins: DMatrix<f64>,
    pub algorithm: AlgorithmConfig,
}

impl Scenario {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Common position dimension of all agents.
    pub fn q_dim(&self) -> usize {
        self.agents[0].q_dim()
    }

    /// Per-agent risk level `eps_i = share_i * eps`.
    pub fn agent_eps(&self, i: usize) -> f64 {
        self.risk_shares[i] * self.eps
    }

    /// Margin for the pair `(i, j)`.
    pub fn pair_margin(&self, i: usize, j: usize) -> f64 {
        self.pair_margins[(i, j)]
    }

    /// Position of an agent's start mean.
    pub fn start_position(&self, i: usize) -> DVector<f64> {
        &self.agents[i].p_sel * &self.agents[i].mu_s
    }

    /// Structural checks beyond what the per-agent validation covers; every
    /// error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let count = self.agents.len();
        if count == 0 {
            return Err(Error::Invalid("agents: at least one agent is required".into()));
        }
        for (i, spec) in self.agents.iter().enumerate() {
            spec.validate().map_err(|e| Error::Invalid(format!("agents[{i}]: {e}")))?;
            if spec.horizon() != self.horizon {
                return Err(Error::Invalid(format!(
                    "agents[{i}]: horizon {} does not match scenario horizon {}",
                    spec.horizon(),
                    self.horizon
                )));
            }
        }
        let q = self.agents[0].q_dim();
        for (i, spec) in self.agents.iter().enumerate() {
            if spec.q_dim() != q {
                return Err(Error::Invalid(format!(
                    "agents[{i}]: position dimension {} differs from agent 0's {q}",
                    spec.q_dim()
                )));
            }
        }
        if self.gamma < 1 || self.gamma > self.horizon {
            return Err(Error::Invalid(format!(
                "gamma: must lie in [1, horizon]; got {} with horizon {}",
                self.gamma, self.horizon
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Invalid(format!(
                "risk.eps: must lie in (0, 0.5), got {}",
                self.eps
            )));
        }
        if self.risk_shares.len() != count {
            return Err(Error::Invalid(format!(
                "risk shares: expected one per agent ({count}), got {}",
                self.risk_shares.len()
            )));
        }
        for (i, &share) in self.risk_shares.iter().enumerate() {
            if !(share > 0.0 && share < 1.0) {
                return Err(Error::Invalid(format!(
                    "agents[{i}].risk_share: must lie in (0, 1), got {share}"
                )));
            }
        }
        for (k, obs) in self.obstacles.iter().enumerate() {
            if obs.center.len() != q {
                return Err(Error::Invalid(format!(
                    "obstacles[{k}].center: expected {q} coordinates, got {}",
                    obs.center.len()
                )));
            }
        }
        if self.topology.num_agents() != count {
            return Err(Error::Invalid(format!(
                "topology: sized for {} agents, scenario has {count}",
                self.topology.num_agents()
            )));
        }
        if self.pair_margins.nrows() != count || self.pair_margins.ncols() != count {
            return Err(Error::Invalid(format!(
                "margins: pair matrix must be {count}x{count}"
            )));
        }
        for i in 0..count {
            for j in 0..count {
                if i == j {
                    continue;
                }
                if (self.pair_margins[(i, j)] - self.pair_margins[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Invalid(format!(
                        "margins: pair value for ({i}, {j}) is not symmetric"
                    )));
                }
                if !self.topology.is_edge(i, j) {
                    continue;
                }
                if !(self.pair_margins[(i, j)] > 0.0) {
                    return Err(Error::Invalid(format!(
                        "margins: pair ({i}, {j}) needs a positive margin"
                    )));
                }
                if self.risk_shares[i] + self.risk_shares[j] > 1.0 + 1e-12 {
                    return Err(Error::Invalid(format!(
                        "risk shares of neighbors ({i}, {j}) sum to {} > 1",
                        self.risk_shares[i] + self.risk_shares[j]
                    )));
                }
            }
        }
        self.algorithm.validate(count)?;
        Ok(())
    }

    /// Converts back to the normalized file form. Requires time-invariant
    /// stage matrices (the file format states each matrix once).
    pub fn to_file(&self) -> Result<ScenarioFile> {
        let mut agents = Vec::with_capacity(self.agents.len());
        for (i, spec) in self.agents.iter().enumerate() {
            let invariant = |seq: &[DMatrix<f64>]| seq.windows(2).all(|w| w[0] == w[1]);
            if !invariant(&spec.a_seq)
                || !invariant(&spec.b_seq)
                || !invariant(&spec.w_seq)
                || !invariant(&spec.q_seq)
                || !invariant(&spec.r_seq)
            {
                return Err(Error::Invalid(format!(
                    "agents[{i}]: time-varying stage matrices cannot be written to a scenario file"
                )));
            }
            let q_dim = spec.q_dim();
            let canonical = canonical_selector(q_dim, spec.n());
            let q_mat = &spec.q_seq[0];
            agents.push(AgentFile {
                a_cont: None,
                b_cont: None,
                w_cont: None,
                a: Some(to_rows(&spec.a_seq[0])),
                b: Some(to_rows(&spec.b_seq[0])),
                w: Some(to_rows(&spec.w_seq[0])),
                mu_s: spec.mu_s.iter().copied().collect(),
                sigma_s: to_rows(&spec.sigma_s),
                mu_f: spec.mu_f.iter().copied().collect(),
                sigma_f: to_rows(&spec.sigma_f),
                q: if q_mat.iter().all(|&v| v == 0.0) { None } else { Some(to_rows(q_mat)) },
                r: to_rows(&spec.r_seq[0]),
                position_dim: if spec.p_sel == canonical { Some(q_dim) } else { None },
                p_sel: if spec.p_sel == canonical { None } else { Some(to_rows(&spec.p_sel)) },
                risk_share: Some(self.risk_shares[i]),
                r_hat: self.algorithm.r_hat.get(i).copied(),
            });
        }

        let count = self.agents.len();
        let (pair, overrides) = if count < 2 {
            (None, Vec::new())
        } else {
            let mut base = f64::INFINITY;
            for i in 0..count {
                for j in 0..count {
                    if i != j {
                        base = base.min(self.pair_margins[(i, j)]);
                    }
                }
            }
            let mut overrides = Vec::new();
            for i in 0..count {
                for j in i + 1..count {
                    if self.pair_margins[(i, j)] != base {
                        overrides.push(PairMarginFile { i, j, value: self.pair_margins[(i, j)] });
                    }
                }
            }
            (Some(base), overrides)
        };

        Ok(ScenarioFile {
            format_version: FORMAT_VERSION,
            name: Some(self.name.clone()),
            horizon: self.horizon,
            dt: self.dt,
            gamma: Some(self.gamma),
            seed: Some(self.seed),
            risk: RiskFile { eps: self.eps },
            margins: MarginsFile {
                obstacle: None,
                pair,
                pair_overrides: overrides,
            },
            topology: TopologyFile {
                kind: TopologyKind::Explicit,
                radius: None,
                neighbors: Some(
                    (0..count).map(|i| self.topology.neighbors(i).to_vec()).collect(),
                ),
            },
            algorithm: AlgorithmFile {
                kind: Some(self.algorithm.kind),
                rounds: Some(self.algorithm.rounds),
                rho_v: Some(self.algorithm.rho_v),
                rho_k: Some(self.algorithm.rho_k),
                rho_r: Some(self.algorithm.rho_r),
                r_hat: None,
                pcc_mode: Some(self.algorithm.pcc_mode),
                init: Some(self.algorithm.init),
                stop_tol: Some(self.algorithm.stop_tol),
                fixed_rounds: Some(self.algorithm.fixed_rounds),
                tau: Some(self.algorithm.tau),
            },
            agents,
            obstacles: self
                .obstacles
                .iter()
                .map(|o| ObstacleFile {
                    center: o.center.iter().copied().collect(),
                    radius: Some(o.radius),
                })
                .collect(),
        })
    }

    /// Normalized TOML text of the scenario (the resolved-config dump).
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.to_file()?)
            .map_err(|e| Error::Parse(format!("serialize scenario: {e}")))
    }
}

/// Loads and validates a scenario file.
pub fn load(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let file: ScenarioFile = toml::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    file.resolve()
}

/// Raw file form of a scenario: everything optional carries its default in
/// [`ScenarioFile::resolve`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub risk: RiskFile,
    #[serde(default)]
    pub margins: MarginsFile,
    #[serde(default)]
    pub topology: TopologyFile,
    #[serde(default)]
    pub algorithm: AlgorithmFile,
    pub agents: Vec<AgentFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<ObstacleFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskFile {
    pub eps: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginsFile {
    /// Default obstacle clearance for obstacles without an explicit radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<f64>,
    /// Uniform inter-agent clearance (required with two or more agents).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_overrides: Vec<PairMarginFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMarginFile {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    #[default]
    Complete,
    Explicit,
    Proximity,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    #[serde(default)]
    pub kind: TopologyKind,
    /// Connection radius on start-mean positions (proximity only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Per-agent neighbor lists (explicit only); the agent itself is
    /// implied and may be omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbors: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<AlgoKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_r: Option<f64>,
    /// Uniform fixed confidence radius; per-agent `r_hat` overrides it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pcc_mode: Option<PccMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_rounds: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_cont: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_cont: Option<Vec<Vec<f64>>>,
    /// Continuous-time noise intensity; discretized together with the
    /// dynamics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_cont: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Vec<f64>>>,
    pub mu_s: Vec<f64>,
    pub sigma_s: Vec<Vec<f64>>,
    pub mu_f: Vec<f64>,
    pub sigma_f: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    pub r: Vec<Vec<f64>>,
    /// Positions are the first `position_dim` state coordinates (defaults
    /// to half the state dimension).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position_dim: Option<usize>,
    /// Full position selector row-by-row; overrides `position_dim`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_sel: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_share: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_hat: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleFile {
    pub center: Vec<f64>,
    /// Clearance radius; falls back to `margins.obstacle`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

impl ScenarioFile {
    /// Validates, fills defaults, and discretizes into a [`Scenario`].
    pub fn resolve(&self) -> Result<Scenario> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "format_version: expected {FORMAT_VERSION}, got {}",
                self.format_version
            )));
        }
        if self.agents.is_empty() {
            return Err(Error::Invalid("agents: at least one agent is required".into()));
        }
        let horizon = self.horizon;
        let count = self.agents.len();

        let mut agents = Vec::with_capacity(count);
        let mut risk_shares = Vec::with_capacity(count);
        let mut r_hat_per_agent = Vec::with_capacity(count);
        for (i, agent) in self.agents.iter().enumerate() {
            let field = |name: &str| format!("agents[{i}].{name}");
            let (a, b, w) = resolve_dynamics(agent, self.dt, i)?;
            let n = a.nrows();
            let mu_s = to_vector(&field("mu_s"), &agent.mu_s);
            let mu_f = to_vector(&field("mu_f"), &agent.mu_f);
            let sigma_s = to_matrix(&field("sigma_s"), &agent.sigma_s)?;
            let sigma_f = to_matrix(&field("sigma_f"), &agent.sigma_f)?;
            let r = to_matrix(&field("r"), &agent.r)?;
            let q = match &agent.q {
                Some(rows) => to_matrix(&field("q"), rows)?,
                None => DMatrix::zeros(n, n),
            };
            let p_sel = match (&agent.p_sel, agent.position_dim) {
                (Some(rows), _) => to_matrix(&field("p_sel"), rows)?,
                (None, dim) => {
                    let q_dim = match dim {
                        Some(d) => d,
                        None if n % 2 == 0 => n / 2,
                        None => {
                            return Err(Error::Invalid(format!(
                                "{}: state dimension {n} is odd; set position_dim or p_sel",
                                field("position_dim")
                            )))
                        }
                    };
                    if q_dim == 0 || q_dim > n {
                        return Err(Error::Invalid(format!(
                            "{}: must lie in [1, {n}], got {q_dim}",
                            field("position_dim")
                        )));
                    }
                    canonical_selector(q_dim, n)
                }
            };
            let spec = AgentSpec {
                a_seq: vec![a; horizon],
                b_seq: vec![b; horizon],
                w_seq: vec![w; horizon],
                mu_s,
                sigma_s,
                mu_f,
                sigma_f,
                q_seq: vec![q; horizon + 1],
                r_seq: vec![r; horizon],
                p_sel,
            };
            spec.validate().map_err(|e| Error::Invalid(format!("agents[{i}]: {e}")))?;
            agents.push(spec);
            risk_shares.push(agent.risk_share.unwrap_or(0.5));
            r_hat_per_agent.push(agent.r_hat.or(self.algorithm.r_hat));
        }

        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for (k, obs) in self.obstacles.iter().enumerate() {
            let radius = obs.radius.or(self.margins.obstacle).ok_or_else(|| {
                Error::Invalid(format!(
                    "obstacles[{k}].radius: not set and margins.obstacle is missing"
                ))
            })?;
            let center = to_vector(&format!("obstacles[{k}].center"), &obs.center);
            obstacles.push(
                Obstacle::new(center, radius)
                    .map_err(|e| Error::Invalid(format!("obstacles[{k}]: {e}")))?,
            );
        }

        let topology = match self.topology.kind {
            TopologyKind::Complete => Topology::complete(count),
            TopologyKind::Explicit => {
                let lists = self.topology.neighbors.as_ref().ok_or_else(|| {
                    Error::Invalid("topology.neighbors: required for explicit topology".into())
                })?;
                if lists.len() != count {
                    return Err(Error::Invalid(format!(
                        "topology.neighbors: expected {count} lists, got {}",
                        lists.len()
                    )));
                }
                let mut lists = lists.clone();
                for (i, list) in lists.iter_mut().enumerate() {
                    if !list.contains(&i) {
                        list.push(i);
                    }
                }
                Topology::new(lists).map_err(|e| Error::Invalid(format!("topology: {e}")))?
            }
            TopologyKind::Proximity => {
                let radius = self.topology.radius.ok_or_else(|| {
                    Error::Invalid("topology.radius: required for proximity topology".into())
                })?;
                if !(radius > 0.0) {
                    return Err(Error::Invalid(format!(
                        "topology.radius: must be positive, got {radius}"
                    )));
                }
                let points: Vec<DVector<f64>> =
                    agents.iter().map(|s| &s.p_sel * &s.mu_s).collect();
                Topology::from_proximity(&points, radius)
                    .map_err(|e| Error::Invalid(format!("topology: {e}")))?
            }
        };

        let mut pair_margins = DMatrix::zeros(count, count);
        if count >= 2 {
            let base = self.margins.pair.ok_or_else(|| {
                Error::Invalid("margins.pair: required for scenarios with two or more agents".into())
            })?;
            if !(base > 0.0) {
                return Err(Error::Invalid(format!(
                    "margins.pair: must be positive, got {base}"
                )));
            }
            for i in 0..count {
                for j in 0..count {
                    if i != j {
                        pair_margins[(i, j)] = base;
                    }
                }
            }
            for (idx, over) in self.margins.pair_overrides.iter().enumerate() {
                let field = format!("margins.pair_overrides[{idx}]");
                if over.i >= count || over.j >= count || over.i == over.j {
                    return Err(Error::Invalid(format!(
                        "{field}: pair ({}, {}) is not a valid agent pair",
                        over.i, over.j
                    )));
                }
                if !(over.value > 0.0) {
                    return Err(Error::Invalid(format!(
                        "{field}.value: must be positive, got {}",
                        over.value
                    )));
                }
                pair_margins[(over.i, over.j)] = over.value;
                pair_margins[(over.j, over.i)] = over.value;
            }
        }

        let mut algorithm = AlgorithmConfig::new(self.algorithm.kind.unwrap_or(AlgoKind::Fcc));
        if let Some(rounds) = self.algorithm.rounds {
            algorithm.rounds = rounds;
        }
        if let Some(v) = self.algorithm.rho_v {
            algorithm.rho_v = v;
        }
        if let Some(v) = self.algorithm.rho_k {
            algorithm.rho_k = v;
        }
        if let Some(v) = self.algorithm.rho_r {
            algorithm.rho_r = v;
        }
        if let Some(v) = self.algorithm.pcc_mode {
            algorithm.pcc_mode = v;
        }
        if let Some(v) = self.algorithm.init {
            algorithm.init = v;
        }
        if let Some(v) = self.algorithm.stop_tol {
            algorithm.stop_tol = v;
        }
        if let Some(v) = self.algorithm.fixed_rounds {
            algorithm.fixed_rounds = v;
        }
        if let Some(v) = self.algorithm.tau {
            algorithm.tau = v;
        }
        let with_radius = r_hat_per_agent.iter().filter(|r| r.is_some()).count();
        algorithm.r_hat = if with_radius == count {
            r_hat_per_agent.into_iter().map(|r| r.unwrap()).collect()
        } else if with_radius == 0 {
            Vec::new()
        } else {
            let missing = r_hat_per_agent.iter().position(|r| r.is_none()).unwrap();
            return Err(Error::Invalid(format!(
                "agents[{missing}].r_hat: set for some agents but missing here"
            )));
        };

        let scenario = Scenario {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            horizon,
            gamma: self.gamma.unwrap_or(horizon),
            seed: self.seed.unwrap_or(0),
            dt: self.dt,
            eps: self.risk.eps,
            risk_shares,
            agents,
            obstacles,
            topology,
            pair_margins,
            algorithm,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

fn resolve_dynamics(
    agent: &AgentFile,
    dt: Option<f64>,
    index: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let disc = [&agent.a, &agent.b, &agent.w];
    let cont = [&agent.a_cont, &agent.b_cont, &agent.w_cont];
    let disc_count = disc.iter().filter(|o| o.is_some()).count();
    let cont_count = cont.iter().filter(|o| o.is_some()).count();
    match (disc_count, cont_count) {
        (3, 0) => Ok((
            to_matrix(&format!("agents[{index}].a"), agent.a.as_ref().unwrap())?,
            to_matrix(&format!("agents[{index}].b"), agent.b.as_ref().unwrap())?,
            to_matrix(&format!("agents[{index}].w"), agent.w.as_ref().unwrap())?,
        )),
        (0, 3) => {
            let dt = dt.ok_or_else(|| {
                Error::Invalid(format!(
                    "dt: required because agents[{index}] uses continuous-time dynamics"
                ))
            })?;
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Invalid(format!("dt: must be positive, got {dt}")));
            }
            let a_cont = to_matrix(&format!("agents[{index}].a_cont"), agent.a_cont.as_ref().unwrap())?;
            let b_cont = to_matrix(&format!("agents[{index}].b_cont"), agent.b_cont.as_ref().unwrap())?;
            let w_cont = to_matrix(&format!("agents[{index}].w_cont"), agent.w_cont.as_ref().unwrap())?;
            let (a, b) = discretize_dynamics(&a_cont, &b_cont, dt)
                .map_err(|e| Error::Invalid(format!("agents[{index}]: {e}")))?;
            let w = discretize_noise(&a_cont, &w_cont, dt)
                .map_err(|e| Error::Invalid(format!("agents[{index}]: {e}")))?;
            Ok((a, b, w))
        }
        _ => Err(Error::Invalid(format!(
            "agents[{index}]: provide either a, b, w or a_cont, b_cont, w_cont (not a mix)"
        ))),
    }
}

fn canonical_selector(q_dim: usize, n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n).rows(0, q_dim).into_owned()
}

fn to_vector(_field: &str, values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

fn to_matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Invalid(format!("{field}: matrix must not be empty")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Invalid(format!(
            "{field}: rows must all have the same nonzero length"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn to_rows(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..mat.nrows()).map(|i| mat.row(i).iter().copied().collect()).collect()
}

/// Generates a square-grid scenario: `count` planar double integrators in
/// rows of `ceil(sqrt(count))`, all translating right by three grid cells,
/// with proximity topology over orthogonal and diagonal grid neighbors.
/// Used by the benchmark sweep, where problem size matters more than
/// geometric difficulty.
pub fn grid_scenario(count: usize, kind: AlgoKind, rounds: usize) -> Result<Scenario> {
    if count == 0 {
        return Err(Error::Invalid("grid scenario needs at least one agent".into()));
    }
    let spacing = 2.5;
    let cols = (count as f64).sqrt().ceil() as usize;
    let dt = 0.05;
    let (a, b) = discretize_dynamics(
        &DMatrix::from_fn(4, 4, |i, j| if j == i + 2 { 1.0 } else { 0.0 }),
        &DMatrix::from_fn(4, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 }),
        dt,
    )?;
    let w_cont = DMatrix::from_diagonal(&DVector::from_vec(vec![0.02, 0.02, 0.2, 0.2]));
    let w = discretize_noise(
        &DMatrix::from_fn(4, 4, |i, j| if j == i + 2 { 1.0 } else { 0.0 }),
        &w_cont,
        dt,
    )?;
    let sigma = {
        let mut s = DMatrix::zeros(4, 4);
        s[(0, 0)] = 0.04;
        s[(1, 1)] = 0.04;
        s[(2, 2)] = 0.25;
        s[(3, 3)] = 0.25;
        s
    };
    let horizon = 30;
    let mut agents = Vec::with_capacity(count);
    for idx in 0..count {
        let (row, col) = (idx / cols, idx % cols);
        let start = DVector::from_vec(vec![col as f64 * spacing, row as f64 * spacing, 0.0, 0.0]);
        let mut target = start.clone();
        target[0] += 3.0 * spacing;
        agents.push(AgentSpec {
            a_seq: vec![a.clone(); horizon],
            b_seq: vec![b.clone(); horizon],
            w_seq: vec![w.clone(); horizon],
            mu_s: start,
            sigma_s: sigma.clone(),
            mu_f: target,
            sigma_f: sigma.clone(),
            q_seq: vec![DMatrix::zeros(4, 4); horizon + 1],
            r_seq: vec![DMatrix::identity(2, 2) * 0.01; horizon],
            p_sel: canonical_selector(2, 4),
        });
    }
    let points: Vec<DVector<f64>> = agents.iter().map(|s| &s.p_sel * &s.mu_s).collect();
    let topology = Topology::from_proximity(&points, spacing * 1.45)?;
    let mut pair_margins = DMatrix::zeros(count, count);
    for i in 0..count {
        for j in 0..count {
            if i != j {
                pair_margins[(i, j)] = 0.4;
            }
        }
    }
    let mut algorithm = AlgorithmConfig::new(kind);
    algorithm.rounds = rounds;
    algorithm.r_hat = vec![0.75; count];
    let scenario = Scenario {
        name: format!("grid_{count}"),
        horizon,
        gamma: horizon,
        seed: 0,
        dt: Some(dt),
        eps: 3e-3,
        risk_shares: vec![0.5; count],
        agents,
        obstacles: Vec::new(),
        topology,
        pair_margins,
        algorithm,
    };
    scenario.validate()?;
    Ok(scenario)
}
