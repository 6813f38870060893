//! Consensus engine for the distributed solvers.
//!
//! Agents own blocks of decision variables and keep working copies of every
//! neighbor's blocks. A round alternates between local proximal solves, an
//! exchange of copies to their owners, a per-owner averaging step that forms
//! the global (consensus) value, a broadcast of the new globals, and a dual
//! ascent step on the copy/global gaps. The engine tracks residuals, an
//! optional message log for locality audits, and an optional iterate history
//! that feeds the descent monitor.
//!
//! All cross-agent reductions run in a fixed order so that residual
//! sequences are bit-identical regardless of how many worker threads execute
//! the local solves.

use crate::conic::SolveStatus;
use crate::error::{Error, Result};
use nalgebra::DVector;
use rayon::prelude::*;
use std::time::Instant;

/// Fixed communication graph. `neighbors[i]` is the set of agents whose
/// variables agent `i` couples with (always including `i` itself);
/// `holders[i]` is the derived set of agents that keep a copy of agent `i`'s
/// variables, i.e. `j` holds `i` exactly when `i` is a neighbor of `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
    holders: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds the graph from explicit neighbor sets. Each set is sorted and
    /// deduplicated; every agent must list itself.
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(Error::Invalid("topology needs at least one agent".into()));
        }
        let mut sorted = Vec::with_capacity(n);
        for (i, mut set) in neighbors.into_iter().enumerate() {
            set.sort_unstable();
            set.dedup();
            if let Some(&bad) = set.iter().find(|&&j| j >= n) {
                return Err(Error::Invalid(format!(
                    "agent {i} lists neighbor {bad}, but only {n} agents exist"
                )));
            }
            if set.binary_search(&i).is_err() {
                return Err(Error::Invalid(format!(
                    "agent {i} must appear in its own neighbor set"
                )));
            }
            sorted.push(set);
        }
        let mut holders = vec![Vec::new(); n];
        for (j, set) in sorted.iter().enumerate() {
            for &i in set {
                holders[i].push(j);
            }
        }
        // Holder lists come out sorted because j runs in increasing order.
        Ok(Self { neighbors: sorted, holders })
    }

    /// All-to-all graph on `n` agents.
    pub fn complete(n: usize) -> Self {
        let all: Vec<usize> = (0..n).collect();
        Self::new(vec![all; n]).expect("complete graph is always valid")
    }

    /// Connects agents whose reference points lie within `radius` of each
    /// other (plus every agent to itself).
    pub fn from_proximity(points: &[DVector<f64>], radius: f64) -> Result<Self> {
        if radius < 0.0 {
            return Err(Error::Invalid(format!("proximity radius must be >= 0; got {radius}")));
        }
        let n = points.len();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            neighbors[i].push(i);
            for j in i + 1..n {
                if (&points[i] - &points[j]).norm() <= radius {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        Self::new(neighbors)
    }

    pub fn num_agents(&self) -> usize {
        self.neighbors.len()
    }

    /// Agents whose variables agent `i` holds copies of (sorted, contains `i`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Agents holding a copy of agent `i`'s variables (sorted, contains `i`).
    pub fn holders(&self, i: usize) -> &[usize] {
        &self.holders[i]
    }

    /// Position of `owner` within `neighbors(holder)`, if present.
    pub fn copy_position(&self, holder: usize, owner: usize) -> Option<usize> {
        self.neighbors[holder].binary_search(&owner).ok()
    }

    /// Whether a message between the two agents travels along a graph edge.
    pub fn is_edge(&self, a: usize, b: usize) -> bool {
        self.copy_position(a, b).is_some() || self.copy_position(b, a).is_some()
    }
}

/// One consensus variable family (for example feed-forward controls, gain
/// coordinates, or ball radii), with a per-owner block length and its own
/// penalty weight.
#[derive(Clone, Debug)]
pub struct Channel {
    /// Diagnostic label, also used in exported residual columns.
    pub name: String,
    /// Block length per owning agent.
    pub lens: Vec<usize>,
    /// Augmented-Lagrangian penalty for this family.
    pub rho: f64,
    /// Whether the family enters the relinearized constraint rows. The
    /// descent monitor weights these blocks with its proximal constant.
    pub nonlinear: bool,
}

impl Channel {
    pub fn new(name: &str, lens: Vec<usize>, rho: f64, nonlinear: bool) -> Result<Self> {
        if rho <= 0.0 {
            return Err(Error::Invalid(format!("channel {name}: penalty must be > 0; got {rho}")));
        }
        Ok(Self { name: name.to_string(), lens, rho, nonlinear })
    }
}

/// Copies, globals, and duals for every channel.
///
/// Layout: `copies[c][h][t]` is holder `h`'s copy of channel `c` of the
/// agent at `topology.neighbors(h)[t]`; `duals` mirrors that layout;
/// `globals[c][i]` is the consensus value of channel `c` owned by agent `i`.
#[derive(Clone, Debug)]
pub struct ConsensusState {
    pub round: usize,
    pub copies: Vec<Vec<Vec<DVector<f64>>>>,
    pub duals: Vec<Vec<Vec<DVector<f64>>>>,
    pub globals: Vec<Vec<DVector<f64>>>,
}

impl ConsensusState {
    /// All-zero state shaped for the given channels and graph.
    pub fn zeros(channels: &[Channel], topology: &Topology) -> Result<Self> {
        let n = topology.num_agents();
        for ch in channels {
            if ch.lens.len() != n {
                return Err(Error::Dimension(format!(
                    "channel {}: {} block lengths for {} agents",
                    ch.name,
                    ch.lens.len(),
                    n
                )));
            }
        }
        let copies = channels
            .iter()
            .map(|ch| {
                (0..n)
                    .map(|h| {
                        topology
                            .neighbors(h)
                            .iter()
                            .map(|&owner| DVector::zeros(ch.lens[owner]))
                            .collect()
                    })
                    .collect()
            })
            .collect::<Vec<Vec<Vec<DVector<f64>>>>>();
        let duals = copies.clone();
        let globals = channels
            .iter()
            .map(|ch| (0..n).map(|i| DVector::zeros(ch.lens[i])).collect())
            .collect();
        Ok(Self { round: 0, copies, duals, globals })
    }

    /// Checks that the copy and dual layouts mirror the neighbor sets and
    /// block lengths exactly.
    pub fn validate(&self, channels: &[Channel], topology: &Topology) -> Result<()> {
        let n = topology.num_agents();
        for (c, ch) in channels.iter().enumerate() {
            for side in [&self.copies, &self.duals] {
                if side[c].len() != n {
                    return Err(Error::Dimension(format!(
                        "channel {}: holder count {} != {}",
                        ch.name,
                        side[c].len(),
                        n
                    )));
                }
                for (h, held) in side[c].iter().enumerate() {
                    let owners = topology.neighbors(h);
                    if held.len() != owners.len() {
                        return Err(Error::Dimension(format!(
                            "channel {}: agent {h} holds {} copies but has {} neighbors",
                            ch.name,
                            held.len(),
                            owners.len()
                        )));
                    }
                    for (t, &owner) in owners.iter().enumerate() {
                        if held[t].len() != ch.lens[owner] {
                            return Err(Error::Dimension(format!(
                                "channel {}: copy of agent {owner} held by {h} has length {} != {}",
                                ch.name,
                                held[t].len(),
                                ch.lens[owner]
                            )));
                        }
                    }
                }
            }
            for i in 0..n {
                if self.globals[c][i].len() != channels[c].lens[i] {
                    return Err(Error::Dimension(format!(
                        "channel {}: global block {i} has length {} != {}",
                        ch.name,
                        self.globals[c][i].len(),
                        ch.lens[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total copy-space dimension (used to scale stopping tolerances).
    pub fn copy_dimension(&self) -> usize {
        self.copies
            .iter()
            .map(|per_holder| {
                per_holder
                    .iter()
                    .map(|blocks| blocks.iter().map(DVector::len).sum::<usize>())
                    .sum::<usize>()
            })
            .sum()
    }

    /// Averaging step: every owner's global becomes the arithmetic mean of
    /// the copies its holders produced, summed in ascending holder order.
    pub fn global_update(&mut self, topology: &Topology) {
        for c in 0..self.globals.len() {
            for i in 0..topology.num_agents() {
                let holders = topology.holders(i);
                let mut acc = DVector::zeros(self.globals[c][i].len());
                for &h in holders {
                    let t = topology
                        .copy_position(h, i)
                        .expect("holder lists derive from neighbor lists");
                    acc += &self.copies[c][h][t];
                }
                acc /= holders.len() as f64;
                self.globals[c][i] = acc;
            }
        }
    }

    /// Verifies the averaging step against its normal equations: the copy
    /// deviations from each global must sum to (numerically) zero.
    pub fn verify_global_optimality(&self, topology: &Topology) -> Result<()> {
        for c in 0..self.globals.len() {
            for i in 0..topology.num_agents() {
                let mut grad = DVector::zeros(self.globals[c][i].len());
                let mut scale = 1.0f64;
                for &h in topology.holders(i) {
                    let t = topology.copy_position(h, i).expect("consistent topology");
                    grad += &self.copies[c][h][t] - &self.globals[c][i];
                    scale = scale.max(self.copies[c][h][t].amax());
                }
                if grad.amax() > 1e-9 * scale.max(1.0) {
                    return Err(Error::Numerical(format!(
                        "averaging step violated its normal equations for agent {i} \
                         (gradient norm {:.3e})",
                        grad.amax()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dual ascent on every copy/global gap: `y += rho (copy - global)`.
    pub fn dual_update(&mut self, channels: &[Channel], topology: &Topology) {
        for (c, ch) in channels.iter().enumerate() {
            for h in 0..topology.num_agents() {
                for (t, &owner) in topology.neighbors(h).iter().enumerate() {
                    let gap = &self.copies[c][h][t] - &self.globals[c][owner];
                    self.duals[c][h][t] += gap * ch.rho;
                }
            }
        }
    }

    /// Primal and dual residuals. The dual residual compares the current
    /// globals against `prev_globals` (their values before the averaging
    /// step), lifted back into copy space.
    pub fn residuals(
        &self,
        channels: &[Channel],
        topology: &Topology,
        prev_globals: &[Vec<DVector<f64>>],
    ) -> ResidualReport {
        let mut per_channel = Vec::with_capacity(channels.len());
        for (c, ch) in channels.iter().enumerate() {
            let mut primal_sq = 0.0;
            for h in 0..topology.num_agents() {
                for (t, &owner) in topology.neighbors(h).iter().enumerate() {
                    primal_sq += (&self.copies[c][h][t] - &self.globals[c][owner]).norm_squared();
                }
            }
            let mut dual_sq = 0.0;
            for (i, prev) in prev_globals[c].iter().enumerate() {
                let copies_of_i = topology.holders(i).len() as f64;
                dual_sq += copies_of_i * (&self.globals[c][i] - prev).norm_squared();
            }
            per_channel.push(ChannelResidual {
                name: ch.name.clone(),
                primal: primal_sq.sqrt(),
                dual: ch.rho * dual_sq.sqrt(),
            });
        }
        let primal = per_channel.iter().map(|r| r.primal * r.primal).sum::<f64>().sqrt();
        let dual = per_channel.iter().map(|r| r.dual * r.dual).sum::<f64>().sqrt();
        ResidualReport { per_channel, primal, dual }
    }
}

/// Residual pair for one channel.
#[derive(Clone, Debug)]
pub struct ChannelResidual {
    pub name: String,
    pub primal: f64,
    pub dual: f64,
}

/// Residuals for one round, per channel and aggregated.
#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub per_channel: Vec<ChannelResidual>,
    pub primal: f64,
    pub dual: f64,
}

/// Outcome of one agent's local solve.
#[derive(Clone, Debug)]
pub struct LocalSolveStats {
    pub agent: usize,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub solve_seconds: f64,
}

/// Everything measured during one round.
#[derive(Clone, Debug)]
pub struct RoundDiagnostics {
    /// Round number, starting at 1 for the first completed round.
    pub round: usize,
    pub per_channel: Vec<ChannelResidual>,
    pub primal_res: f64,
    pub dual_res: f64,
    pub solves: Vec<LocalSolveStats>,
    /// Per-agent movement of the linearization geometry since last round.
    pub lin_shifts: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Immutable per-agent view handed to the local solver. It exposes exactly
/// the data the agent is allowed to read: its own blocks and its neighbors'.
pub struct LocalView<'a> {
    pub agent: usize,
    pub round: usize,
    /// Owners of the blocks below, in `topology.neighbors(agent)` order.
    pub owners: &'a [usize],
    /// `globals[c][t]` is the consensus value of channel `c`, owner `owners[t]`.
    pub globals: Vec<Vec<&'a DVector<f64>>>,
    /// Duals held by this agent, same layout as `globals`.
    pub duals: Vec<Vec<&'a DVector<f64>>>,
    /// This agent's copies from the previous round, same layout.
    pub copies: Vec<Vec<&'a DVector<f64>>>,
}

/// New copies produced by one local solve, `copies[c][t]` shaped like the
/// view it answers.
pub struct LocalUpdate {
    pub copies: Vec<Vec<DVector<f64>>>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
}

/// The algorithm-specific subproblem. `relinearize` runs once per round on
/// the coordinator thread and may mutate solver-held geometry;
/// `solve_local` runs once per agent, possibly concurrently, and must be a
/// pure function of the view and the solver's per-agent data.
pub trait LocalSolver: Sync {
    /// Refreshes linearization geometry from the per-agent views and returns
    /// each agent's shift norm relative to the previous round's geometry.
    fn relinearize(&mut self, views: &[LocalView]) -> Result<Vec<f64>>;

    /// Solves agent `view.agent`'s proximal subproblem.
    fn solve_local(&self, view: &LocalView) -> Result<LocalUpdate>;
}

/// How a round reacts to a local solver that stopped on its iteration limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxIterPolicy {
    /// Keep the returned iterate and attach a warning to the diagnostics.
    AcceptWithWarning,
    /// Abort the round with an error.
    Abort,
}

/// Engine configuration.
#[derive(Clone, Debug)]
pub struct EngineSettings {
    pub on_max_iter: MaxIterPolicy,
    /// Record stacked iterates each round for the descent monitor.
    pub record_history: bool,
    /// Record every simulated message for locality audits.
    pub record_messages: bool,
    /// Re-verify the averaging step each round (defaults to debug builds).
    pub check_averaging: bool,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            on_max_iter: MaxIterPolicy::AcceptWithWarning,
            record_history: false,
            record_messages: false,
            check_averaging: cfg!(debug_assertions),
        }
    }
}

/// What a simulated message carried.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageKind {
    /// A holder sends its copy of the owner's block to the owner.
    CopyToOwner,
    /// An owner broadcasts its fresh global block to a holder.
    GlobalBroadcast,
}

/// One simulated point-to-point message.
#[derive(Clone, Copy, Debug)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub kind: MessageKind,
    pub channel: usize,
    pub len: usize,
}

/// Log of all simulated traffic, for locality audits.
#[derive(Clone, Debug, Default)]
pub struct MessageLog {
    messages: Vec<Message>,
}

impl MessageLog {
    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    /// Errors if any recorded message crossed a non-edge of the graph.
    pub fn audit(&self, topology: &Topology) -> Result<()> {
        for msg in &self.messages {
            if !topology.is_edge(msg.from, msg.to) {
                return Err(Error::Invalid(format!(
                    "message from {} to {} crosses a non-edge",
                    msg.from, msg.to
                )));
            }
        }
        Ok(())
    }
}

/// Stacked iterates recorded after one round, in fixed holder-major order.
#[derive(Clone, Debug)]
pub struct RoundRecord {
    /// Stacked duals per channel (copy space).
    pub y: Vec<DVector<f64>>,
    /// Stacked copies per channel (copy space).
    pub x: Vec<DVector<f64>>,
    /// Globals lifted into copy space per channel.
    pub cz: Vec<DVector<f64>>,
}

/// Per-round iterate history for the descent monitor.
#[derive(Clone, Debug, Default)]
pub struct RunHistory {
    pub rounds: Vec<RoundRecord>,
}

/// Descent-monitor output.
#[derive(Clone, Debug)]
pub struct LyapunovReport {
    /// Surrogate value per recorded round (1-indexed rounds).
    pub values: Vec<f64>,
    /// Rounds whose value rose above the previous round by more than `tol`.
    pub violations: Vec<usize>,
    /// Running sums of the squared primal-gap norms.
    pub residual_partial_sums: Vec<f64>,
}

/// Evaluates the descent surrogate over a recorded run against its final
/// iterate: a penalty-weighted distance of the duals and lifted globals to
/// the reference, plus the primal gap weighted on the relinearized blocks.
pub fn lyapunov_monitor(
    history: &RunHistory,
    channels: &[Channel],
    tau: f64,
    tol: f64,
) -> Result<LyapunovReport> {
    let rounds = &history.rounds;
    if rounds.len() < 2 {
        return Err(Error::Invalid(format!(
            "descent monitor needs at least 2 recorded rounds; got {}",
            rounds.len()
        )));
    }
    let reference = rounds.last().expect("nonempty history");
    let mut values = Vec::with_capacity(rounds.len());
    let mut residual_partial_sums = Vec::with_capacity(rounds.len());
    let mut running = 0.0;
    for record in rounds {
        let mut v = 0.0;
        let mut gap_sq = 0.0;
        for (c, ch) in channels.iter().enumerate() {
            v += (&record.y[c] - &reference.y[c]).norm_squared() / ch.rho;
            let dz = (&record.cz[c] - &reference.cz[c]).norm_squared();
            v += ch.rho * dz;
            let r_sq = (&record.x[c] - &record.cz[c]).norm_squared();
            if ch.nonlinear {
                v += tau * (r_sq + dz);
            }
            gap_sq += r_sq;
        }
        values.push(v);
        running += gap_sq;
        residual_partial_sums.push(running);
    }
    let violations = values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] + tol)
        .map(|(idx, _)| idx + 2)
        .collect();
    Ok(LyapunovReport { values, violations, residual_partial_sums })
}

/// Early-stopping rule: both aggregate residuals under a dimension-scaled
/// tolerance, or the round budget exhausted.
#[derive(Clone, Copy, Debug)]
pub struct StopRule {
    pub tol: f64,
    pub max_rounds: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { tol: 1e-3, max_rounds: 30 }
    }
}

impl StopRule {
    /// Whether the run may stop after a round with these diagnostics.
    pub fn satisfied(&self, diagnostics: &RoundDiagnostics, copy_dim: usize) -> bool {
        let threshold = self.tol * (copy_dim as f64).sqrt();
        diagnostics.primal_res < threshold && diagnostics.dual_res < threshold
    }
}

/// Where the local solves run. Results are collected in agent order, so the
/// choice only affects wall-clock time, never values.
pub enum Executor {
    /// Plain loop on the coordinator thread.
    Sequential,
    /// The process-wide thread pool.
    Global,
    /// A dedicated pool with a fixed thread count.
    Pool(rayon::ThreadPool),
}

impl Executor {
    /// Maps a `--parallelism` style knob: 1 runs sequentially, 0 uses the
    /// default pool width, anything else builds a dedicated pool.
    pub fn with_parallelism(threads: usize) -> Result<Self> {
        match threads {
            0 => Ok(Self::Global),
            1 => Ok(Self::Sequential),
            t => rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map(Self::Pool)
                .map_err(|e| Error::Invalid(format!("thread pool: {e}"))),
        }
    }

    fn map_agents<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Self::Sequential => (0..n).map(f).collect(),
            Self::Global => (0..n).into_par_iter().map(f).collect(),
            Self::Pool(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}

/// The round coordinator: owns the graph, channel layout, state, and the
/// optional history/message instrumentation.
pub struct ConsensusEngine {
    pub topology: Topology,
    pub channels: Vec<Channel>,
    pub state: ConsensusState,
    pub settings: EngineSettings,
    pub log: MessageLog,
    pub history: RunHistory,
}

impl ConsensusEngine {
    pub fn new(
        topology: Topology,
        channels: Vec<Channel>,
        settings: EngineSettings,
    ) -> Result<Self> {
        let state = ConsensusState::zeros(&channels, &topology)?;
        Ok(Self {
            topology,
            channels,
            state,
            settings,
            log: MessageLog::default(),
            history: RunHistory::default(),
        })
    }

    /// Restricted views for every agent, borrowing the current state.
    fn views(&self) -> Vec<LocalView<'_>> {
        let n = self.topology.num_agents();
        (0..n)
            .map(|agent| {
                let owners = self.topology.neighbors(agent);
                LocalView {
                    agent,
                    round: self.state.round,
                    owners,
                    globals: (0..self.channels.len())
                        .map(|c| owners.iter().map(|&o| &self.state.globals[c][o]).collect())
                        .collect(),
                    duals: (0..self.channels.len())
                        .map(|c| self.state.duals[c][agent].iter().collect())
                        .collect(),
                    copies: (0..self.channels.len())
                        .map(|c| self.state.copies[c][agent].iter().collect())
                        .collect(),
                }
            })
            .collect()
    }

    fn check_update_shape(&self, agent: usize, update: &LocalUpdate) -> Result<()> {
        let owners = self.topology.neighbors(agent);
        if update.copies.len() != self.channels.len() {
            return Err(Error::Dimension(format!(
                "agent {agent} returned {} channels, engine has {}",
                update.copies.len(),
                self.channels.len()
            )));
        }
        for (c, ch) in self.channels.iter().enumerate() {
            if update.copies[c].len() != owners.len() {
                return Err(Error::Dimension(format!(
                    "agent {agent} returned {} copies on channel {}, expected {}",
                    update.copies[c].len(),
                    ch.name,
                    owners.len()
                )));
            }
            for (t, &owner) in owners.iter().enumerate() {
                if update.copies[c][t].len() != ch.lens[owner] {
                    return Err(Error::Dimension(format!(
                        "agent {agent} returned a copy of agent {owner} with length {} \
                         on channel {}, expected {}",
                        update.copies[c][t].len(),
                        ch.name,
                        ch.lens[owner]
                    )));
                }
            }
        }
        Ok(())
    }

    fn record_exchange(&mut self) {
        if !self.settings.record_messages {
            return;
        }
        for c in 0..self.channels.len() {
            for i in 0..self.topology.num_agents() {
                // Holder lists are cloned up front because recording borrows
                // the log mutably.
                let holders: Vec<usize> = self.topology.holders(i).to_vec();
                let len = self.state.globals[c][i].len();
                for &h in &holders {
                    if h != i {
                        self.log.messages.push(Message {
                            from: h,
                            to: i,
                            kind: MessageKind::CopyToOwner,
                            channel: c,
                            len,
                        });
                        self.log.messages.push(Message {
                            from: i,
                            to: h,
                            kind: MessageKind::GlobalBroadcast,
                            channel: c,
                            len,
                        });
                    }
                }
            }
        }
    }

    fn record_history(&mut self) {
        if !self.settings.record_history {
            return;
        }
        let n = self.topology.num_agents();
        let mut y = Vec::with_capacity(self.channels.len());
        let mut x = Vec::with_capacity(self.channels.len());
        let mut cz = Vec::with_capacity(self.channels.len());
        for c in 0..self.channels.len() {
            let mut y_parts = Vec::new();
            let mut x_parts = Vec::new();
            let mut cz_parts = Vec::new();
            for h in 0..n {
                for (t, &owner) in self.topology.neighbors(h).iter().enumerate() {
                    y_parts.extend(self.state.duals[c][h][t].iter().copied());
                    x_parts.extend(self.state.copies[c][h][t].iter().copied());
                    cz_parts.extend(self.state.globals[c][owner].iter().copied());
                }
            }
            y.push(DVector::from_vec(y_parts));
            x.push(DVector::from_vec(x_parts));
            cz.push(DVector::from_vec(cz_parts));
        }
        self.history.rounds.push(RoundRecord { y, x, cz });
    }

    /// Executes one full round: relinearize, solve locally (possibly in
    /// parallel), route copies to owners, average, broadcast, dual ascent.
    pub fn run_round<S: LocalSolver>(
        &mut self,
        solver: &mut S,
        executor: &Executor,
    ) -> Result<RoundDiagnostics> {
        let n = self.topology.num_agents();
        let lin_shifts = {
            let views = self.views();
            let shifts = solver.relinearize(&views)?;
            if shifts.len() != n {
                return Err(Error::Dimension(format!(
                    "relinearize returned {} shifts for {} agents",
                    shifts.len(),
                    n
                )));
            }

            let results: Vec<Result<(LocalUpdate, f64)>> = executor.map_agents(n, |agent| {
                let started = Instant::now();
                let update = solver.solve_local(&views[agent])?;
                Ok((update, started.elapsed().as_secs_f64()))
            });
            drop(views);

            let mut solves = Vec::with_capacity(n);
            let mut warnings = Vec::new();
            for (agent, result) in results.into_iter().enumerate() {
                let (update, seconds) = result?;
                self.check_update_shape(agent, &update)?;
                if update.status == SolveStatus::MaxIter {
                    let note = format!(
                        "agent {agent} hit the local iteration limit at round {}",
                        self.state.round + 1
                    );
                    match self.settings.on_max_iter {
                        MaxIterPolicy::AcceptWithWarning => warnings.push(note),
                        MaxIterPolicy::Abort => return Err(Error::Solver(note)),
                    }
                }
                solves.push(LocalSolveStats {
                    agent,
                    status: update.status,
                    iterations: update.iterations,
                    objective: update.objective,
                    solve_seconds: seconds,
                });
                for (c, blocks) in update.copies.into_iter().enumerate() {
                    self.state.copies[c][agent] = blocks;
                }
            }
            (shifts, solves, warnings)
        };
        let (shifts, solves, warnings) = lin_shifts;

        self.record_exchange();
        let prev_globals = self.state.globals.clone();
        self.state.global_update(&self.topology);
        if self.settings.check_averaging {
            self.state.verify_global_optimality(&self.topology)?;
        }
        let residuals = self.state.residuals(&self.channels, &self.topology, &prev_globals);
        self.state.dual_update(&self.channels, &self.topology);
        self.state.round += 1;
        self.record_history();

        Ok(RoundDiagnostics {
            round: self.state.round,
            per_channel: residuals.per_channel,
            primal_res: residuals.primal,
            dual_res: residuals.dual,
            solves,
            lin_shifts: shifts,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha12Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn random_state(
        channels: &[Channel],
        topology: &Topology,
        rng: &mut ChaCha12Rng,
    ) -> ConsensusState {
        let mut state = ConsensusState::zeros(channels, topology).unwrap();
        for c in 0..channels.len() {
            for h in 0..topology.num_agents() {
                for t in 0..topology.neighbors(h).len() {
                    state.copies[c][h][t] =
                        DVector::from_fn(state.copies[c][h][t].len(), |_, _| randn(rng));
                }
            }
        }
        state
    }

    fn line_graph(n: usize) -> Topology {
        let neighbors = (0..n)
            .map(|i| {
                let mut set = vec![i];
                if i > 0 {
                    set.push(i - 1);
                }
                if i + 1 < n {
                    set.push(i + 1);
                }
                set
            })
            .collect();
        Topology::new(neighbors).unwrap()
    }

    #[test]
    fn topology_validates_and_derives_holders() {
        let err = Topology::new(vec![vec![1], vec![0, 1]]);
        assert!(err.is_err(), "an agent missing from its own set is rejected");
        let err = Topology::new(vec![vec![0, 5]]);
        assert!(err.is_err(), "out-of-range neighbor is rejected");

        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = 2 + rng.random_range(0..6);
            let sets: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut set = vec![i];
                    for j in 0..n {
                        if j != i && rng.random_bool(0.4) {
                            set.push(j);
                        }
                    }
                    set
                })
                .collect();
            let topo = Topology::new(sets.clone()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let j_holds_i = topo.holders(i).contains(&j);
                    let i_in_vj = topo.neighbors(j).contains(&i);
                    assert_eq!(j_holds_i, i_in_vj);
                }
            }
        }

        let complete = Topology::complete(4);
        for i in 0..4 {
            assert_eq!(complete.neighbors(i), &[0, 1, 2, 3]);
            assert_eq!(complete.holders(i), &[0, 1, 2, 3]);
        }

        let points = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![5.0, 0.0]),
        ];
        let prox = Topology::from_proximity(&points, 1.5).unwrap();
        assert_eq!(prox.neighbors(0), &[0, 1]);
        assert_eq!(prox.neighbors(1), &[0, 1]);
        assert_eq!(prox.neighbors(2), &[2]);
    }

    #[test]
    fn averaging_examples() {
        let topology = Topology::complete(2);
        let channels = vec![Channel::new("v", vec![1, 1], 1.0, true).unwrap()];
        let mut state = ConsensusState::zeros(&channels, &topology).unwrap();
        // Both agents hold copies of agent 0's scalar: 1.0 and 3.0.
        state.copies[0][0][0] = DVector::from_vec(vec![1.0]);
        state.copies[0][1][0] = DVector::from_vec(vec![3.0]);
        state.global_update(&topology);
        assert_abs_diff_eq!(state.globals[0][0][0], 2.0, epsilon = 1e-15);

        // A singleton holder set passes the copy through untouched.
        let lonely = Topology::new(vec![vec![0], vec![1]]).unwrap();
        let channels = vec![Channel::new("v", vec![1, 1], 1.0, true).unwrap()];
        let mut state = ConsensusState::zeros(&channels, &lonely).unwrap();
        state.copies[0][1][0] = DVector::from_vec(vec![-7.5]);
        state.global_update(&lonely);
        assert_abs_diff_eq!(state.globals[0][1][0], -7.5, epsilon = 1e-15);
    }

    #[test]
    fn averaging_matches_least_squares_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let topology = line_graph(4);
        let channels = vec![
            Channel::new("v", vec![3, 2, 4, 1], 1.0, true).unwrap(),
            Channel::new("gains", vec![2, 2, 2, 2], 0.5, false).unwrap(),
        ];
        let mut state = random_state(&channels, &topology, &mut rng);
        state.global_update(&topology);
        state.verify_global_optimality(&topology).unwrap();

        for (c, ch) in channels.iter().enumerate() {
            for i in 0..4 {
                // The mean minimizes the sum of squared gaps; check against
                // the stationarity condition directly.
                let mut grad = DVector::zeros(ch.lens[i]);
                for &h in topology.holders(i) {
                    let t = topology.copy_position(h, i).unwrap();
                    grad += &state.copies[c][h][t] - &state.globals[c][i];
                }
                assert!(grad.amax() < 1e-12);
            }
        }

        // A corrupted global fails the optimality check.
        state.globals[0][1][0] += 1e-3;
        assert!(state.verify_global_optimality(&topology).is_err());
    }

    #[test]
    fn dual_update_examples() {
        let topology = Topology::complete(2);
        let channels = vec![Channel::new("v", vec![1, 1], 2.0, true).unwrap()];
        let mut state = ConsensusState::zeros(&channels, &topology).unwrap();
        // Copies equal to globals: duals unchanged.
        state.dual_update(&channels, &topology);
        for h in 0..2 {
            for t in 0..2 {
                assert_eq!(state.duals[0][h][t][0], 0.0);
            }
        }
        // Scalar dual ascent: y = 0 + 2 * 0.5 = 1.
        state.copies[0][0][0] = DVector::from_vec(vec![0.5]);
        state.dual_update(&channels, &topology);
        assert_abs_diff_eq!(state.duals[0][0][0][0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dual_sums_vanish_after_full_rounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let topology = line_graph(5);
        let channels = vec![
            Channel::new("v", vec![4; 5], 1.0, true).unwrap(),
            Channel::new("radii", vec![2; 5], 10.0, false).unwrap(),
        ];
        let mut state = ConsensusState::zeros(&channels, &topology).unwrap();
        for _round in 0..4 {
            for (c, ch) in channels.iter().enumerate() {
                for h in 0..5 {
                    for t in 0..topology.neighbors(h).len() {
                        state.copies[c][h][t] =
                            DVector::from_fn(ch.lens[0], |_, _| randn(&mut rng));
                    }
                }
            }
            state.global_update(&topology);
            state.dual_update(&channels, &topology);
            for (c, ch) in channels.iter().enumerate() {
                for i in 0..5 {
                    let mut sum = DVector::zeros(ch.lens[i]);
                    for &h in topology.holders(i) {
                        let t = topology.copy_position(h, i).unwrap();
                        sum += &state.duals[c][h][t];
                    }
                    assert!(sum.amax() < 1e-10, "dual sum for owner {i} must stay zero");
                }
            }
        }
    }

    #[test]
    fn residual_examples_and_recomputation() {
        let topology = Topology::complete(2);
        let channels = vec![Channel::new("v", vec![2, 2], 1.5, true).unwrap()];
        let mut state = ConsensusState::zeros(&channels, &topology).unwrap();
        let prev = state.globals.clone();
        // Consensus state: both residuals zero.
        let report = state.residuals(&channels, &topology, &prev);
        assert_eq!(report.primal, 0.0);
        assert_eq!(report.dual, 0.0);

        // One disagreeing copy of magnitude delta: primal equals |delta|.
        let delta = 0.37;
        state.copies[0][1][0][1] = delta;
        let report = state.residuals(&channels, &topology, &prev);
        assert_abs_diff_eq!(report.primal, delta, epsilon = 1e-15);

        // Random state: independent naive recomputation agrees to 1e-12.
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let topology = line_graph(4);
        let channels = vec![
            Channel::new("v", vec![3; 4], 1.0, true).unwrap(),
            Channel::new("gains", vec![5; 4], 2.0, false).unwrap(),
        ];
        let mut state = random_state(&channels, &topology, &mut rng);
        let prev: Vec<Vec<DVector<f64>>> = (0..channels.len())
            .map(|c| {
                (0..4)
                    .map(|i| DVector::from_fn(channels[c].lens[i], |_, _| randn(&mut rng)))
                    .collect()
            })
            .collect();
        state.global_update(&topology);
        let report = state.residuals(&channels, &topology, &prev);

        let mut primal_sq = 0.0;
        let mut dual_sq = 0.0;
        for (c, ch) in channels.iter().enumerate() {
            for h in 0..4 {
                for (t, &owner) in topology.neighbors(h).iter().enumerate() {
                    primal_sq += (&state.copies[c][h][t] - &state.globals[c][owner])
                        .norm_squared();
                    dual_sq += ch.rho
                        * ch.rho
                        * (&state.globals[c][owner] - &prev[c][owner]).norm_squared();
                }
            }
        }
        assert_abs_diff_eq!(report.primal, primal_sq.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(report.dual, dual_sq.sqrt(), epsilon = 1e-12);
    }

    /// Quadratic toy solver: each agent pulls every copy toward a target of
    /// its own, balanced against the proximal consensus terms.
    struct QuadraticSolver {
        /// targets[agent][t] for owner views.owners[t]
        targets: Vec<Vec<DVector<f64>>>,
        rho: f64,
    }

    impl LocalSolver for QuadraticSolver {
        fn relinearize(&mut self, views: &[LocalView]) -> Result<Vec<f64>> {
            Ok(vec![0.0; views.len()])
        }

        fn solve_local(&self, view: &LocalView) -> Result<LocalUpdate> {
            // argmin 0.5 ||x - a||^2 + y' x + rho/2 ||x - z||^2
            //   => x = (a + rho z - y) / (1 + rho)
            let copies = vec![
                (0..view.owners.len())
                    .map(|t| {
                        let a = &self.targets[view.agent][t];
                        let z = view.globals[0][t];
                        let y = view.duals[0][t];
                        (a + z * self.rho - y) / (1.0 + self.rho)
                    })
                    .collect::<Vec<_>>(),
            ];
            Ok(LocalUpdate {
                copies,
                status: SolveStatus::Optimal,
                iterations: 1,
                objective: 0.0,
            })
        }
    }

    fn quadratic_setup(
        topology: &Topology,
        dim: usize,
        rho: f64,
        seed: u64,
    ) -> (Vec<Channel>, QuadraticSolver) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = topology.num_agents();
        let channels = vec![Channel::new("v", vec![dim; n], rho, true).unwrap()];
        let targets = (0..n)
            .map(|agent| {
                topology
                    .neighbors(agent)
                    .iter()
                    .map(|_| DVector::from_fn(dim, |_, _| randn(&mut rng)))
                    .collect()
            })
            .collect();
        (channels, QuadraticSolver { targets, rho })
    }

    #[test]
    fn single_agent_reaches_consensus_in_one_round() {
        let topology = Topology::complete(1);
        let (channels, mut solver) = quadratic_setup(&topology, 3, 1.0, 35);
        let mut engine =
            ConsensusEngine::new(topology, channels, EngineSettings::default()).unwrap();
        let diag = engine.run_round(&mut solver, &Executor::Sequential).unwrap();
        assert!(diag.primal_res < 1e-15, "one holder averages to itself");
        assert_eq!(diag.round, 1);
    }

    #[test]
    fn residuals_decrease_on_convex_problem() {
        let topology = Topology::complete(2);
        let (channels, mut solver) = quadratic_setup(&topology, 4, 1.0, 36);
        let mut engine =
            ConsensusEngine::new(topology, channels, EngineSettings::default()).unwrap();
        let mut last_primal = f64::INFINITY;
        let mut last_dual = f64::INFINITY;
        for round in 0..30 {
            let diag = engine.run_round(&mut solver, &Executor::Sequential).unwrap();
            if round >= 1 {
                assert!(
                    diag.primal_res < last_primal,
                    "round {round}: primal {} !< {last_primal}",
                    diag.primal_res
                );
                assert!(
                    diag.dual_res < last_dual,
                    "round {round}: dual {} !< {last_dual}",
                    diag.dual_res
                );
            }
            last_primal = diag.primal_res;
            last_dual = diag.dual_res;
        }
        assert!(last_primal < 1e-8 && last_dual < 1e-8);

        // The fixed point matches the closed-form consensus optimum: the
        // mean of the per-agent targets for each owned block.
        for i in 0..2 {
            let mut mean = DVector::zeros(4);
            for agent in 0..2 {
                mean += &solver.targets[agent][i];
            }
            mean /= 2.0;
            assert!((&engine.state.globals[0][i] - mean).amax() < 1e-6);
        }
    }

    #[test]
    fn stop_rule_scales_with_dimension() {
        let diag = RoundDiagnostics {
            round: 3,
            per_channel: Vec::new(),
            primal_res: 0.05,
            dual_res: 0.02,
            solves: Vec::new(),
            lin_shifts: Vec::new(),
            warnings: Vec::new(),
        };
        let rule = StopRule::default();
        // threshold = 1e-3 * sqrt(10000) = 0.1
        assert!(rule.satisfied(&diag, 10_000));
        assert!(!rule.satisfied(&diag, 100));
    }

    #[test]
    fn locality_audit_sees_only_graph_edges() {
        let topology = line_graph(4);
        let (channels, mut solver) = quadratic_setup(&topology, 2, 1.0, 37);
        let settings = EngineSettings { record_messages: true, ..Default::default() };
        let mut engine = ConsensusEngine::new(topology, channels, settings).unwrap();
        for _ in 0..3 {
            engine.run_round(&mut solver, &Executor::Sequential).unwrap();
        }
        assert!(!engine.log.messages().is_empty());
        engine.log.audit(&engine.topology).unwrap();

        // Views expose neighbor blocks only.
        let views = engine.views();
        for (agent, view) in views.iter().enumerate() {
            assert_eq!(view.owners, engine.topology.neighbors(agent));
        }

        // A fabricated long-range message fails the audit.
        let mut log = engine.log.clone();
        log.messages.push(Message {
            from: 0,
            to: 3,
            kind: MessageKind::CopyToOwner,
            channel: 0,
            len: 2,
        });
        assert!(log.audit(&engine.topology).is_err());
    }

    #[test]
    fn executors_give_bitwise_identical_residuals() {
        let make_run = |executor: &Executor| -> Vec<(u64, u64)> {
            let topology = line_graph(6);
            let (channels, mut solver) = quadratic_setup(&topology, 3, 1.0, 38);
            let mut engine =
                ConsensusEngine::new(topology, channels, EngineSettings::default()).unwrap();
            (0..8)
                .map(|_| {
                    let diag = engine.run_round(&mut solver, executor).unwrap();
                    (diag.primal_res.to_bits(), diag.dual_res.to_bits())
                })
                .collect()
        };
        let sequential = make_run(&Executor::Sequential);
        let two = make_run(&Executor::with_parallelism(2).unwrap());
        let four = make_run(&Executor::with_parallelism(4).unwrap());
        assert_eq!(sequential, two);
        assert_eq!(sequential, four);
    }

    struct StubSolver {
        status: SolveStatus,
        wrong_shape: bool,
    }

    impl LocalSolver for StubSolver {
        fn relinearize(&mut self, views: &[LocalView]) -> Result<Vec<f64>> {
            Ok(vec![0.0; views.len()])
        }

        fn solve_local(&self, view: &LocalView) -> Result<LocalUpdate> {
            let len = if self.wrong_shape { 1 } else { 0 };
            let copies = vec![view
                .owners
                .iter()
                .enumerate()
                .map(|(t, _)| {
                    DVector::zeros(view.copies[0][t].len() + len)
                })
                .collect()];
            Ok(LocalUpdate {
                copies,
                status: self.status,
                iterations: 99,
                objective: 0.0,
            })
        }
    }

    #[test]
    fn iteration_limit_policy_warns_or_aborts() {
        let topology = Topology::complete(2);
        let channels = vec![Channel::new("v", vec![2, 2], 1.0, true).unwrap()];
        let mut solver = StubSolver { status: SolveStatus::MaxIter, wrong_shape: false };

        let mut engine = ConsensusEngine::new(
            topology.clone(),
            channels.clone(),
            EngineSettings { on_max_iter: MaxIterPolicy::AcceptWithWarning, ..Default::default() },
        )
        .unwrap();
        let diag = engine.run_round(&mut solver, &Executor::Sequential).unwrap();
        assert_eq!(diag.warnings.len(), 2);

        let mut engine = ConsensusEngine::new(
            topology,
            channels,
            EngineSettings { on_max_iter: MaxIterPolicy::Abort, ..Default::default() },
        )
        .unwrap();
        assert!(engine.run_round(&mut solver, &Executor::Sequential).is_err());
    }

    #[test]
    fn malformed_copies_are_a_protocol_violation() {
        let topology = Topology::complete(2);
        let channels = vec![Channel::new("v", vec![2, 2], 1.0, true).unwrap()];
        let mut solver = StubSolver { status: SolveStatus::Optimal, wrong_shape: true };
        let mut engine =
            ConsensusEngine::new(topology, channels, EngineSettings::default()).unwrap();
        let err = engine.run_round(&mut solver, &Executor::Sequential);
        assert!(err.is_err());
    }

    #[test]
    fn descent_monitor_on_converged_run() {
        let topology = Topology::complete(2);
        let (channels, mut solver) = quadratic_setup(&topology, 3, 1.0, 39);
        let settings = EngineSettings { record_history: true, ..Default::default() };
        let mut engine = ConsensusEngine::new(topology, channels.clone(), settings).unwrap();
        for _ in 0..40 {
            engine.run_round(&mut solver, &Executor::Sequential).unwrap();
        }
        let report = lyapunov_monitor(&engine.history, &channels, 1.0, 1e-9).unwrap();
        assert!(report.violations.is_empty(), "violations: {:?}", report.violations);
        assert!(report.values.last().unwrap() < &1e-12, "reference is the endpoint");
        // Partial sums of the squared primal gaps are non-decreasing and
        // converge (the tail contributes almost nothing).
        let sums = &report.residual_partial_sums;
        for w in sums.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let total = sums.last().unwrap();
        assert!(total - sums[sums.len() / 2] < 1e-6);
    }

    #[test]
    fn descent_monitor_flags_injected_fault() {
        let topology = Topology::complete(2);
        let (channels, mut solver) = quadratic_setup(&topology, 3, 1.0, 40);
        let settings = EngineSettings { record_history: true, ..Default::default() };
        let mut engine = ConsensusEngine::new(topology, channels.clone(), settings).unwrap();
        for _ in 0..12 {
            engine.run_round(&mut solver, &Executor::Sequential).unwrap();
        }
        // Corrupt the recorded duals of round 5 (index 4).
        engine.history.rounds[4].y[0][0] += 50.0;
        let report = lyapunov_monitor(&engine.history, &channels, 1.0, 1e-6).unwrap();
        assert!(report.violations.contains(&5), "violations: {:?}", report.violations);
    }

    #[test]
    fn descent_monitor_needs_two_rounds() {
        let topology = Topology::complete(1);
        let (channels, mut solver) = quadratic_setup(&topology, 2, 1.0, 41);
        let settings = EngineSettings { record_history: true, ..Default::default() };
        let mut engine = ConsensusEngine::new(topology, channels.clone(), settings).unwrap();
        engine.run_round(&mut solver, &Executor::Sequential).unwrap();
        assert!(lyapunov_monitor(&engine.history, &channels, 1.0, 1e-6).is_err());
    }
}
