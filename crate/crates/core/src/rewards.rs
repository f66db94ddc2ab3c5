//! Per-agent reward terms.

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentMatrix;
use crate::config::RewardGains;
use crate::world::{sq_dist, CommGraph, DepletionReport, WorldState};
use crate::{Error, Result};

/// Reward terms of one agent for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentReward {
    /// Progress toward, or presence in, the assigned consumer area.
    pub in_area: f64,
    /// Proportional to the instantaneous quantity released.
    pub release: f64,
    /// Fixed bonus while covering a persistent demand.
    pub persistent: f64,
    /// Bonus for contributing to a consumer whose instantaneous demand hit zero.
    pub completion: f64,
    /// Sum over close neighbors.
    pub collision: f64,
    /// Team term: every consumer is served this step.
    pub coverage: f64,
    /// Team term: total demand decrease.
    pub global: f64,
}

impl AgentReward {
    pub fn total(&self) -> f64 {
        self.in_area + self.release + self.persistent + self.completion + self.collision + self.coverage + self.global
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub agents: Vec<AgentReward>,
    /// `totals[i] == agents[i].total()`.
    pub totals: Vec<f64>,
}

fn check_shapes(prev: &WorldState, next: &WorldState) -> Result<()> {
    let same = prev.num_agents() == next.num_agents()
        && prev.num_consumers() == next.num_consumers()
        && prev.num_resources() == next.num_resources();
    if same {
        Ok(())
    } else {
        Err(Error::Dimension("consecutive states differ in shape".into()))
    }
}

/// Decrease of the summed demand between two consecutive states.
pub fn global_demand_reward(prev: &WorldState, next: &WorldState) -> Result<f64> {
    check_shapes(prev, next)?;
    Ok(prev
        .consumers
        .iter()
        .zip(&next.consumers)
        .flat_map(|(a, b)| a.demand.iter().zip(&b.demand).map(|(x, y)| x - y))
        .sum())
}

/// `gain` when every consumer was served this step, 0 otherwise (also with no consumers).
pub fn coverage_reward(report: &DepletionReport, gains: &RewardGains) -> f64 {
    if !report.covered.is_empty() && report.covered.iter().all(|&c| c) {
        gains.coverage
    } else {
        0.0
    }
}

/// `-gamma * d_ij^2` summed over neighbors closer than `sqrt(eps_col)`.
pub fn collision_penalty(state: &WorldState, graph: &CommGraph, gains: &RewardGains) -> Vec<f64> {
    graph
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            nbrs.iter()
                .map(|&j| sq_dist(&state.agents[i].position, &state.agents[j].position))
                .filter(|&d2| d2 < gains.eps_col)
                .map(|d2| -gains.collision * d2)
                .sum()
        })
        .collect()
}

/// In-area bonus, or the decrease of squared distance to the assigned consumer.
pub fn assignment_shaping(prev: &WorldState, next: &WorldState, a: &AssignmentMatrix, gains: &RewardGains) -> Result<Vec<f64>> {
    check_shapes(prev, next)?;
    if a.num_agents() != next.num_agents() || a.num_consumers() != next.num_consumers() {
        return Err(Error::ConstraintViolation(format!(
            "assignment is {}x{}, world has {} agents and {} consumers",
            a.num_agents(),
            a.num_consumers(),
            next.num_agents(),
            next.num_consumers()
        )));
    }
    Ok((0..next.num_agents())
        .map(|i| {
            let p = &next.agents[i].position;
            let target = &next.consumers[a.target(i)];
            if target.contains(p) {
                gains.in_area
            } else {
                sq_dist(&prev.agents[i].position, &target.position) - sq_dist(p, &target.position)
            }
        })
        .collect())
}

/// Per agent `(release, completion, persistent)` terms.
pub fn release_rewards(report: &DepletionReport, gains: &RewardGains) -> Vec<(f64, f64, f64)> {
    report
        .released
        .iter()
        .zip(&report.covering_persistent)
        .map(|(row, &covering)| {
            let released: f64 = row.iter().sum();
            let completed = row.iter().zip(&report.completed).any(|(&q, &done)| q > 0.0 && done);
            (
                gains.release * released,
                if completed { gains.completion } else { 0.0 },
                if covering { gains.persistent } else { 0.0 },
            )
        })
        .collect()
}

pub fn total_reward(
    prev: &WorldState,
    next: &WorldState,
    graph: &CommGraph,
    a: &AssignmentMatrix,
    report: &DepletionReport,
    gains: &RewardGains,
) -> Result<RewardBreakdown> {
    let global = global_demand_reward(prev, next)?;
    let coverage = coverage_reward(report, gains);
    let shaping = assignment_shaping(prev, next, a, gains)?;
    let collision = collision_penalty(next, graph, gains);
    let release = release_rewards(report, gains);
    let agents: Vec<AgentReward> = (0..next.num_agents())
        .map(|i| AgentReward {
            in_area: shaping[i],
            release: release[i].0,
            completion: release[i].1,
            persistent: release[i].2,
            collision: collision[i],
            coverage,
            global,
        })
        .collect();
    let totals = agents.iter().map(AgentReward::total).collect();
    Ok(RewardBreakdown { agents, totals })
}
