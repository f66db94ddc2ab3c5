//! Discrete-time simulation of agents carrying resources to consumers.
//!
//! Agents are single integrators: each step moves them by `u * dt` and clamps
//! them to the box. An agent inside a consumer's interaction disc releases
//! instantaneous resources immediately (the `min` of supply and demand per
//! matching resource) and keeps persistent demands covered for as long as it
//! stays inside.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    Persistent,
    Instantaneous,
}

impl ResourceKind {
    /// Scalar encoding fed to the networks.
    pub fn code(self) -> f64 {
        match self {
            ResourceKind::Persistent => 1.0,
            ResourceKind::Instantaneous => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consumer {
    pub position: Vec<f64>,
    pub demand: Vec<f64>,
    pub kinds: Vec<ResourceKind>,
    pub radius: f64,
}

impl Consumer {
    pub fn contains(&self, p: &[f64]) -> bool {
        sq_dist(&self.position, p) <= self.radius * self.radius
    }

    /// Sum of the remaining instantaneous demand.
    pub fn instantaneous_demand(&self) -> f64 {
        self.demand
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == ResourceKind::Instantaneous)
            .map(|(d, _)| d)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub position: Vec<f64>,
    pub supply: Vec<f64>,
    pub kinds: Vec<ResourceKind>,
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for ((x, lo), hi) in p.iter_mut().zip(&self.lo).zip(&self.hi) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.lo).zip(&self.hi).all(|((x, lo), hi)| *lo <= *x && *x <= *hi)
    }

    /// Maps a point of the box affinely onto [-1, 1] per axis.
    pub fn normalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .map(|((x, lo), hi)| 2.0 * (x - lo) / (hi - lo) - 1.0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agents: Vec<Agent>,
    pub consumers: Vec<Consumer>,
    pub time: u64,
    pub bounds: Bounds,
    /// Per-axis bound on velocity commands.
    pub max_speed: f64,
}

/// What happened at the consumers during one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepletionReport {
    /// `released[i][m]`: instantaneous quantity agent i handed to consumer m.
    pub released: Vec<Vec<f64>>,
    /// Agent i sat inside an area with matching supply for a positive persistent demand.
    pub covering_persistent: Vec<bool>,
    /// Consumer m had at least one agent releasing to it or covering it.
    pub covered: Vec<bool>,
    /// Consumer m's instantaneous demand reached zero during this step.
    pub completed: Vec<bool>,
}

impl DepletionReport {
    pub fn empty(num_agents: usize, num_consumers: usize) -> Self {
        Self {
            released: vec![vec![0.0; num_consumers]; num_agents],
            covering_persistent: vec![false; num_agents],
            covered: vec![false; num_consumers],
            completed: vec![false; num_consumers],
        }
    }

    pub fn released_by_agent(&self, i: usize) -> f64 {
        self.released[i].iter().sum()
    }
}

/// What agent i is allowed to see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Normalized to [-1, 1] per axis.
    pub own_position: Vec<f64>,
    pub own_supply: Vec<f64>,
    pub own_kinds: Vec<ResourceKind>,
    /// Consumer snapshots with normalized positions.
    pub consumers: Vec<Consumer>,
}

/// Communication graph: row-normalized adjacency with self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct CommGraph {
    pub support: Array2<f64>,
    /// Neighbors within range, excluding the agent itself.
    pub neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let mut support = Array2::zeros((n, n));
        for (i, nb) in neighbors.iter().enumerate() {
            let w = 1.0 / (nb.len() + 1) as f64;
            support[[i, i]] = w;
            for &j in nb {
                support[[i, j]] = w;
            }
        }
        Self { support, neighbors }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_neighbors(vec![Vec::new(); n])
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

fn uniform_point(rng: &mut ChaCha8Rng, bounds: &Bounds) -> Vec<f64> {
    bounds.lo.iter().zip(&bounds.hi).map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect()
}

fn uniform_in(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Samples a fresh episode. Deterministic in `(config, seed)`.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<WorldState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Bounds::cube(config.dim, config.bounds[0], config.bounds[1]);
    let r = config.num_resources;

    let kinds: Vec<ResourceKind> = (0..r)
        .map(|_| {
            if rng.random_bool(config.persistent_prob) {
                ResourceKind::Persistent
            } else {
                ResourceKind::Instantaneous
            }
        })
        .collect();

    let min_sep_sq = (2.0 * config.consumer_radius).powi(2);
    let mut positions: Vec<Vec<f64>> = Vec::with_capacity(config.num_consumers);
    let mut attempts = 0;
    while positions.len() < config.num_consumers {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Config(format!(
                "cannot place {} consumers {} apart inside {:?}",
                config.num_consumers,
                2.0 * config.consumer_radius,
                config.bounds
            )));
        }
        let p = uniform_point(&mut rng, &bounds);
        if positions.iter().all(|q| sq_dist(q, &p) >= min_sep_sq) {
            positions.push(p);
        }
    }

    let consumers: Vec<Consumer> = positions
        .into_iter()
        .map(|position| Consumer {
            position,
            demand: (0..r).map(|_| uniform_in(&mut rng, config.demand_range)).collect(),
            kinds: kinds.clone(),
            radius: config.consumer_radius,
        })
        .collect();

    let mut agents: Vec<Agent> = (0..config.num_agents)
        .map(|_| Agent {
            position: uniform_point(&mut rng, &bounds),
            supply: (0..r).map(|_| uniform_in(&mut rng, config.supply_range)).collect(),
            kinds: kinds.clone(),
        })
        .collect();

    let total_demand: f64 = consumers.iter().flat_map(|c| &c.demand).sum();
    let total_supply: f64 = agents.iter().flat_map(|a| &a.supply).sum();
    if total_supply > total_demand {
        let scale = total_demand / total_supply;
        for a in &mut agents {
            for s in &mut a.supply {
                *s *= scale;
            }
        }
    }

    Ok(WorldState { agents, consumers, time: 0, bounds, max_speed: config.max_speed })
}

impl WorldState {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_consumers(&self) -> usize {
        self.consumers.len()
    }

    pub fn num_resources(&self) -> usize {
        self.consumers.first().map_or(0, |c| c.demand.len())
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn total_demand(&self) -> f64 {
        self.consumers.iter().flat_map(|c| &c.demand).sum()
    }

    pub fn total_supply(&self) -> f64 {
        self.agents.iter().flat_map(|a| &a.supply).sum()
    }

    /// Advances the world by one step of length `dt`.
    pub fn step(&self, actions: &Array2<f64>, dt: f64) -> Result<(WorldState, DepletionReport)> {
        let (n_agents, dim) = (self.num_agents(), self.dim());
        if actions.dim() != (n_agents, dim) {
            return Err(Error::Dimension(format!(
                "actions have shape {:?}, expected ({n_agents}, {dim})",
                actions.dim()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        let mut next = self.clone();
        next.time += 1;
        for (agent, u) in next.agents.iter_mut().zip(actions.rows()) {
            for (p, v) in agent.position.iter_mut().zip(u.iter()) {
                let v = if v.is_finite() { v.clamp(-self.max_speed, self.max_speed) } else { 0.0 };
                *p += v * dt;
            }
            self.bounds.clamp(&mut agent.position);
        }
        let report = next.deplete();
        Ok((next, report))
    }

    /// Applies releases for the current positions and returns what happened.
    fn deplete(&mut self) -> DepletionReport {
        let (n_agents, n_cons) = (self.num_agents(), self.num_consumers());
        let mut report = DepletionReport::empty(n_agents, n_cons);
        let inst_before: Vec<f64> = self.consumers.iter().map(Consumer::instantaneous_demand).collect();

        for i in 0..n_agents {
            let mut inside: Vec<(f64, usize)> = self
                .consumers
                .iter()
                .enumerate()
                .filter(|(_, c)| c.contains(&self.agents[i].position))
                .map(|(m, c)| (sq_dist(&c.position, &self.agents[i].position), m))
                .collect();
            inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

            for (_, m) in inside {
                let agent = &mut self.agents[i];
                let consumer = &mut self.consumers[m];
                for l in 0..consumer.demand.len() {
                    if agent.kinds[l] != consumer.kinds[l] || agent.supply[l] <= 0.0 || consumer.demand[l] <= 0.0 {
                        continue;
                    }
                    match consumer.kinds[l] {
                        ResourceKind::Instantaneous => {
                            let q = agent.supply[l].min(consumer.demand[l]);
                            agent.supply[l] -= q;
                            consumer.demand[l] -= q;
                            report.released[i][m] += q;
                        }
                        ResourceKind::Persistent => {
                            report.covering_persistent[i] = true;
                        }
                    }
                    report.covered[m] = true;
                }
            }
        }

        for (m, c) in self.consumers.iter().enumerate() {
            report.completed[m] = inst_before[m] > 0.0 && c.instantaneous_demand() <= 0.0;
        }
        report
    }

    pub fn observe(&self, i: usize) -> Result<Observation> {
        let agent = self.agents.get(i).ok_or(Error::Index { index: i, len: self.num_agents() })?;
        Ok(Observation {
            own_position: self.bounds.normalize(&agent.position),
            own_supply: agent.supply.clone(),
            own_kinds: agent.kinds.clone(),
            consumers: self
                .consumers
                .iter()
                .map(|c| Consumer { position: self.bounds.normalize(&c.position), ..c.clone() })
                .collect(),
        })
    }

    pub fn observe_all(&self) -> Vec<Observation> {
        (0..self.num_agents()).map(|i| self.observe(i).expect("index in range")).collect()
    }

    /// Agents within distance `radius` (inclusive) are neighbors.
    pub fn comm_graph(&self, radius: f64) -> CommGraph {
        let n = self.num_agents();
        let r2 = radius * radius;
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && sq_dist(&self.agents[i].position, &self.agents[j].position) <= r2)
                    .collect()
            })
            .collect();
        CommGraph::from_neighbors(neighbors)
    }

    /// Euclidean agent-to-consumer distances, N x M.
    pub fn distance_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.num_agents(), self.num_consumers()), |(i, m)| {
            dist(&self.agents[i].position, &self.consumers[m].position)
        })
    }

    pub fn supply_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.num_agents(), self.num_resources()), |(i, l)| self.agents[i].supply[l])
    }

    pub fn demand_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.num_consumers(), self.num_resources()), |(m, l)| self.consumers[m].demand[l])
    }

    pub fn positions(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.position.clone()).collect()
    }
}
