//! One environment instance with its reward bookkeeping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentMatrix, AssignmentProblem};
use crate::config::{EnvConfig, RewardGains};
use crate::rewards::{total_reward, AgentReward, RewardBreakdown};
use crate::world::{reset, CommGraph, DepletionReport, Observation, WorldState};
use crate::{Error, Result};

/// Result of advancing an [`Episode`] by one step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub rewards: RewardBreakdown,
    pub report: DepletionReport,
    /// The fixed horizon was reached.
    pub done: bool,
}

/// One line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub time: u64,
    pub positions: Vec<Vec<f64>>,
    pub supplies: Vec<Vec<f64>>,
    pub demands: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Shaping target of every agent.
    pub assignment: Vec<usize>,
    pub rewards: Vec<AgentReward>,
    pub totals: Vec<f64>,
    /// Recurrent state per agent, when the controller has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Vec<Vec<f64>>>,
}

/// Environment plus the shaping assignment, re-solved every
/// `gains.reassign_every` steps.
#[derive(Clone, Debug)]
pub struct Episode {
    env: EnvConfig,
    gains: RewardGains,
    state: WorldState,
    assignment: AssignmentMatrix,
    steps: usize,
}

impl Episode {
    pub fn new(env: &EnvConfig, gains: &RewardGains, seed: u64) -> Result<Self> {
        let state = reset(env, seed)?;
        Self::from_state(env, gains, state)
    }

    pub fn from_state(env: &EnvConfig, gains: &RewardGains, state: WorldState) -> Result<Self> {
        let assignment = AssignmentProblem::from_world(&state)?.solve_exact()?.assignment;
        Ok(Self { env: env.clone(), gains: gains.clone(), state, assignment, steps: 0 })
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn assignment(&self) -> &AssignmentMatrix {
        &self.assignment
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn done(&self) -> bool {
        self.steps >= self.env.episode_steps
    }

    pub fn graph(&self) -> CommGraph {
        self.state.comm_graph(self.env.comm_radius)
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.state.observe_all()
    }

    pub fn step(&mut self, actions: &Array2<f64>) -> Result<StepOutcome> {
        if self.done() {
            return Err(Error::Config("episode already finished".into()));
        }
        let every = self.gains.reassign_every.max(1);
        if self.steps > 0 && self.steps % every == 0 {
            self.assignment = AssignmentProblem::from_world(&self.state)?.solve_exact()?.assignment;
        }
        let (next, report) = self.state.step(actions, self.env.dt)?;
        let graph = next.comm_graph(self.env.comm_radius);
        let rewards = total_reward(&self.state, &next, &graph, &self.assignment, &report, &self.gains)?;
        self.state = next;
        self.steps += 1;
        Ok(StepOutcome { rewards, report, done: self.done() })
    }

    /// Trace line for the step that just produced `outcome` from `actions`.
    pub fn record(&self, episode: usize, actions: &Array2<f64>, outcome: &StepOutcome, state: Option<&Array2<f64>>) -> StepRecord {
        let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
        StepRecord {
            episode,
            time: self.state.time,
            positions: self.state.positions(),
            supplies: self.state.agents.iter().map(|a| a.supply.clone()).collect(),
            demands: self.state.consumers.iter().map(|c| c.demand.clone()).collect(),
            actions: rows(actions),
            assignment: self.assignment.choices().to_vec(),
            rewards: outcome.rewards.agents.clone(),
            totals: outcome.rewards.totals.clone(),
            state: state.map(rows),
        }
    }
}
