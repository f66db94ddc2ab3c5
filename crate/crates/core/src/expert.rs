//! Centralized baseline: exact assignment plus proportional navigation with
//! pairwise repulsion.

use ndarray::Array2;

use crate::assignment::{AssignmentMatrix, AssignmentProblem};
use crate::world::{sq_dist, DepletionReport, WorldState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertGains {
    pub k_p: f64,
    pub k_rep: f64,
    /// Repulsion acts between agents whose squared distance is below this.
    pub eps_safe: f64,
}

/// `u_i = k_p (d_{a_i} - p_i) + k_rep sum_{j close} (p_i - p_j) / |p_i - p_j|^2`,
/// clamped per axis to the world speed limit. Coincident pairs exert no force.
pub fn expert_actions(state: &WorldState, a: &AssignmentMatrix, gains: &ExpertGains) -> Result<Array2<f64>> {
    let (n, dim) = (state.num_agents(), state.dim());
    if a.num_agents() != n || a.num_consumers() != state.num_consumers() {
        return Err(Error::ConstraintViolation(format!(
            "assignment is {}x{}, world has {n} agents and {} consumers",
            a.num_agents(),
            a.num_consumers(),
            state.num_consumers()
        )));
    }
    let mut u = Array2::zeros((n, dim));
    for i in 0..n {
        let p = &state.agents[i].position;
        let target = &state.consumers[a.target(i)].position;
        for k in 0..dim {
            u[[i, k]] = gains.k_p * (target[k] - p[k]);
        }
        for j in (0..n).filter(|&j| j != i) {
            let q = &state.agents[j].position;
            let d2 = sq_dist(p, q);
            if d2 > 0.0 && d2 < gains.eps_safe {
                for k in 0..dim {
                    u[[i, k]] += gains.k_rep * (p[k] - q[k]) / d2;
                }
            }
        }
    }
    u.mapv_inplace(|v| v.clamp(-state.max_speed, state.max_speed));
    Ok(u)
}

/// Keeps the expert's assignment, re-solving it whenever a consumer's
/// instantaneous demand is used up.
#[derive(Clone, Debug)]
pub struct ExpertController {
    gains: ExpertGains,
    assignment: AssignmentMatrix,
}

impl ExpertController {
    pub fn new(state: &WorldState, gains: ExpertGains) -> Result<Self> {
        let assignment = AssignmentProblem::from_world(state)?.solve_exact()?.assignment;
        Ok(Self { gains, assignment })
    }

    pub fn assignment(&self) -> &AssignmentMatrix {
        &self.assignment
    }

    pub fn act(&self, state: &WorldState) -> Result<Array2<f64>> {
        expert_actions(state, &self.assignment, &self.gains)
    }

    /// Call with the state and report produced by the last step.
    pub fn update(&mut self, state: &WorldState, report: &DepletionReport) -> Result<()> {
        if report.completed.iter().any(|&c| c) {
            self.assignment = AssignmentProblem::from_world(state)?.solve_exact()?.assignment;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Agent, Bounds, Consumer, ResourceKind};

    const GAINS: ExpertGains = ExpertGains { k_p: 1.0, k_rep: 0.05, eps_safe: 0.01 };

    fn world(agents: &[[f64; 2]], consumers: &[[f64; 2]]) -> WorldState {
        let kinds = vec![ResourceKind::Instantaneous];
        WorldState {
            agents: agents.iter().map(|p| Agent { position: p.to_vec(), supply: vec![0.5], kinds: kinds.clone() }).collect(),
            consumers: consumers
                .iter()
                .map(|p| Consumer { position: p.to_vec(), demand: vec![1.0], kinds: kinds.clone(), radius: 0.25 })
                .collect(),
            time: 0,
            bounds: Bounds::cube(2, -2.0, 2.0),
            max_speed: 10.0,
        }
    }

    #[test]
    fn at_target_without_neighbors_is_still() {
        let s = world(&[[0.3, 0.3], [-0.5, -0.5]], &[[0.3, 0.3], [-0.5, -0.5]]);
        let a = AssignmentMatrix::new(vec![0, 1], 2).unwrap();
        assert_eq!(expert_actions(&s, &a, &GAINS).unwrap(), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn unit_offset_gives_unit_command() {
        let s = world(&[[0.0, 0.0]], &[[1.0, 0.0]]);
        let a = AssignmentMatrix::new(vec![0], 1).unwrap();
        let u = expert_actions(&s, &a, &GAINS).unwrap();
        assert_eq!(u.row(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn repulsion_is_antisymmetric() {
        let s = world(&[[0.02, 0.01], [-0.03, 0.0]], &[[0.0, 0.0]]);
        let a = AssignmentMatrix::new(vec![0, 0], 1).unwrap();
        let total = expert_actions(&s, &a, &GAINS).unwrap();
        let attract = expert_actions(&s, &a, &ExpertGains { k_rep: 0.0, ..GAINS }).unwrap();
        let rep = &total - &attract;
        assert!(rep.row(0).iter().any(|v| v.abs() > 0.1));
        for k in 0..2 {
            assert!((rep[[0, k]] + rep[[1, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn commands_are_clamped() {
        let mut s = world(&[[0.0, 0.0]], &[[1.5, -1.5]]);
        s.max_speed = 1.0;
        let a = AssignmentMatrix::new(vec![0], 1).unwrap();
        assert_eq!(expert_actions(&s, &a, &GAINS).unwrap().row(0).to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn rejects_mismatched_assignment() {
        let s = world(&[[0.0, 0.0]], &[[1.0, 0.0]]);
        let a = AssignmentMatrix::new(vec![0, 0], 1).unwrap();
        assert!(matches!(expert_actions(&s, &a, &GAINS), Err(Error::ConstraintViolation(_))));
    }

    #[test]
    fn single_agent_distance_strictly_decreases() {
        for dt_kp in [0.05, 0.5, 1.0, 1.9] {
            let mut s = world(&[[-1.5, 1.2]], &[[1.0, -0.8]]);
            s.agents[0].supply = vec![0.0];
            let a = AssignmentMatrix::new(vec![0], 1).unwrap();
            let gains = ExpertGains { k_p: dt_kp / 0.05, ..GAINS };
            let mut last = sq_dist(&s.agents[0].position, &s.consumers[0].position);
            while !s.consumers[0].contains(&s.agents[0].position) {
                let (next, _) = s.step(&expert_actions(&s, &a, &gains).unwrap(), 0.05).unwrap();
                let d = sq_dist(&next.agents[0].position, &next.consumers[0].position);
                assert!(d < last, "dt*k_p = {dt_kp}");
                last = d;
                s = next;
            }
        }
    }

    #[test]
    fn controller_resolves_after_completion() {
        let s = world(&[[0.0, 0.0], [0.9, 0.9]], &[[0.0, 0.0], [1.0, 1.0]]);
        let mut ctl = ExpertController::new(&s, GAINS).unwrap();
        assert_eq!(ctl.assignment().choices(), &[0, 1]);
        let mut report = DepletionReport::empty(2, 2);
        let before = ctl.assignment().clone();
        ctl.update(&s, &report).unwrap();
        assert_eq!(ctl.assignment(), &before);
        report.completed[0] = true;
        let mut done = s.clone();
        done.consumers[0].demand = vec![0.0];
        ctl.update(&done, &report).unwrap();
        let expected = AssignmentProblem::from_world(&done).unwrap().solve_exact().unwrap().assignment;
        assert_eq!(ctl.assignment(), &expected);
    }
}
