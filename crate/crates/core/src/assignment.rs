//! Agent-to-consumer assignment.
//!
//! Minimizes `l1 + l2` over binary matrices `a` (N x M) with exactly one
//! consumer per agent and at least one agent per consumer, where
//!
//! ```text
//! l1 = || de - a^T so ||_F^2
//! l2 = || (d_pd o (sum_l so_l (x) 1_M) + so (1/de)^T) o a ||_1
//! ```
//!
//! [`AssignmentProblem::solve_exact`] is a depth-first branch-and-bound over the
//! per-agent consumer choice; [`AssignmentProblem::solve_oracle`] enumerates
//! every candidate and exists for testing.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::world::WorldState;
use crate::{Error, Result};

/// Demands below this are replaced before taking reciprocals.
pub const DEMAND_FLOOR: f64 = 1e-6;
/// Candidate cap for exhaustive enumeration.
pub const ORACLE_BUDGET: u64 = 1_000_000;
pub const DEFAULT_NODE_BUDGET: u64 = 50_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentProblem {
    /// Agent-to-consumer distances, N x M.
    pub distances: Array2<f64>,
    /// Agent supplies, N x r.
    pub supply: Array2<f64>,
    /// Consumer demands, M x r.
    pub demand: Array2<f64>,
}

/// Binary N x M assignment stored as the chosen consumer per agent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    choice: Vec<usize>,
    num_consumers: usize,
}

impl AssignmentMatrix {
    /// Every consumer index must be `< num_consumers` and used at least once.
    pub fn new(choice: Vec<usize>, num_consumers: usize) -> Result<Self> {
        let mut count = vec![0usize; num_consumers];
        for (i, &m) in choice.iter().enumerate() {
            if m >= num_consumers {
                return Err(Error::ConstraintViolation(format!(
                    "agent {i} assigned to consumer {m} of {num_consumers}"
                )));
            }
            count[m] += 1;
        }
        if let Some(m) = count.iter().position(|&c| c == 0) {
            return Err(Error::ConstraintViolation(format!("consumer {m} has no agent")));
        }
        Ok(Self { choice, num_consumers })
    }

    pub fn from_binary(a: &Array2<u8>) -> Result<Self> {
        let mut choice = Vec::with_capacity(a.nrows());
        for (i, row) in a.rows().into_iter().enumerate() {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, v)| **v != 0).map(|(m, _)| m).collect();
            if ones.len() != 1 || row[ones[0]] != 1 {
                return Err(Error::ConstraintViolation(format!(
                    "row {i} must contain exactly one 1, found {row}"
                )));
            }
            choice.push(ones[0]);
        }
        Self::new(choice, a.ncols())
    }

    pub fn to_binary(&self) -> Array2<u8> {
        let mut a = Array2::zeros((self.choice.len(), self.num_consumers));
        for (i, &m) in self.choice.iter().enumerate() {
            a[[i, m]] = 1;
        }
        a
    }

    pub fn target(&self, agent: usize) -> usize {
        self.choice[agent]
    }

    pub fn choices(&self) -> &[usize] {
        &self.choice
    }

    pub fn num_agents(&self) -> usize {
        self.choice.len()
    }

    pub fn num_consumers(&self) -> usize {
        self.num_consumers
    }

    /// Agents assigned to consumer `m`.
    pub fn group(&self, m: usize) -> Vec<usize> {
        self.choice.iter().enumerate().filter(|(_, &c)| c == m).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub assignment: AssignmentMatrix,
    pub objective: f64,
    /// Search nodes (branch-and-bound) or candidates (enumeration) visited.
    pub visited: u64,
    /// Candidates satisfying both constraints (enumeration only).
    pub feasible: u64,
}

impl AssignmentProblem {
    pub fn new(distances: Array2<f64>, supply: Array2<f64>, demand: Array2<f64>) -> Result<Self> {
        let (n, m) = distances.dim();
        if supply.nrows() != n || demand.nrows() != m || supply.ncols() != demand.ncols() {
            return Err(Error::Dimension(format!(
                "distances {:?}, supply {:?}, demand {:?} are inconsistent",
                distances.dim(),
                supply.dim(),
                demand.dim()
            )));
        }
        if distances.iter().chain(supply.iter()).chain(demand.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dimension("problem entries must be finite".into()));
        }
        Ok(Self { distances, supply, demand })
    }

    pub fn from_world(state: &WorldState) -> Result<Self> {
        Self::new(state.distance_matrix(), state.supply_matrix(), state.demand_matrix())
    }

    pub fn num_agents(&self) -> usize {
        self.distances.nrows()
    }

    pub fn num_consumers(&self) -> usize {
        self.distances.ncols()
    }

    pub fn num_resources(&self) -> usize {
        self.supply.ncols()
    }

    /// Per-entry `l2` cost of assigning agent i to consumer m.
    pub fn pair_costs(&self) -> Array2<f64> {
        let (n, m) = self.distances.dim();
        let r = self.num_resources();
        Array2::from_shape_fn((n, m), |(i, j)| {
            let total: f64 = self.supply.row(i).sum();
            let ratio: f64 = (0..r).map(|l| self.supply[[i, l]] / self.demand[[j, l]].max(DEMAND_FLOOR)).sum();
            (self.distances[[i, j]] * total + ratio).abs()
        })
    }

    fn check(&self, a: &AssignmentMatrix) -> Result<()> {
        if a.num_agents() != self.num_agents() || a.num_consumers() != self.num_consumers() {
            return Err(Error::ConstraintViolation(format!(
                "assignment is {}x{}, problem is {}x{}",
                a.num_agents(),
                a.num_consumers(),
                self.num_agents(),
                self.num_consumers()
            )));
        }
        Ok(())
    }

    /// `(l1, l2)` for a feasible assignment.
    pub fn objective_terms(&self, a: &AssignmentMatrix) -> Result<(f64, f64)> {
        self.check(a)?;
        let (m, r) = self.demand.dim();
        let mut load = Array2::<f64>::zeros((m, r));
        for (i, &c) in a.choices().iter().enumerate() {
            for l in 0..r {
                load[[c, l]] += self.supply[[i, l]];
            }
        }
        let l1 = self.demand.iter().zip(load.iter()).map(|(d, s)| (d - s) * (d - s)).sum();
        let costs = self.pair_costs();
        let l2 = a.choices().iter().enumerate().map(|(i, &c)| costs[[i, c]]).sum();
        Ok((l1, l2))
    }

    pub fn objective(&self, a: &AssignmentMatrix) -> Result<f64> {
        let (l1, l2) = self.objective_terms(a)?;
        Ok(l1 + l2)
    }

    fn require_feasible(&self) -> Result<()> {
        if self.num_consumers() == 0 || self.num_agents() < self.num_consumers() {
            return Err(Error::Infeasible(format!(
                "{} agents cannot cover {} consumers",
                self.num_agents(),
                self.num_consumers()
            )));
        }
        Ok(())
    }

    /// Exhaustive enumeration over all `M^N` row-stochastic binary matrices.
    pub fn solve_oracle(&self) -> Result<Solution> {
        self.require_feasible()?;
        let (n, m) = (self.num_agents(), self.num_consumers());
        let candidates = (m as u64).checked_pow(n as u32).filter(|c| *c <= ORACLE_BUDGET).ok_or_else(|| {
            Error::BudgetExceeded(format!("{m}^{n} candidates exceed the enumeration budget"))
        })?;
        let mut choice = vec![0usize; n];
        let mut best: Option<(f64, AssignmentMatrix)> = None;
        let mut feasible = 0;
        for _ in 0..candidates {
            if let Ok(a) = AssignmentMatrix::new(choice.clone(), m) {
                feasible += 1;
                let obj = self.objective(&a)?;
                if best.as_ref().is_none_or(|(b, _)| obj <= *b) {
                    best = Some((obj, a));
                }
            }
            // odometer increment, last agent fastest: lexicographic order
            for k in (0..n).rev() {
                choice[k] += 1;
                if choice[k] < m {
                    break;
                }
                choice[k] = 0;
            }
        }
        let (objective, assignment) = best.expect("N >= M guarantees a feasible candidate");
        Ok(Solution { assignment, objective, visited: candidates, feasible })
    }

    pub fn solve_exact(&self) -> Result<Solution> {
        self.solve_exact_with_budget(DEFAULT_NODE_BUDGET)
    }

    /// Branch-and-bound. Ties resolve to the row-major lexicographically
    /// smallest binary matrix, which is the largest choice vector; this
    /// matches [`Self::solve_oracle`].
    pub fn solve_exact_with_budget(&self, max_nodes: u64) -> Result<Solution> {
        self.require_feasible()?;
        let (n, m) = (self.num_agents(), self.num_consumers());
        let r = self.num_resources();
        let costs = self.pair_costs();
        let nonneg_supply = self.supply.iter().all(|v| *v >= 0.0);
        // suffix[k] = sum over agents >= k of their cheapest pair cost
        let mut suffix = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let cheapest = costs.row(i).iter().copied().fold(f64::INFINITY, f64::min);
            suffix[i] = suffix[i + 1] + cheapest;
        }

        let mut search = Search {
            problem: self,
            costs: &costs,
            suffix: &suffix,
            nonneg_supply,
            n,
            m,
            r,
            load: Array2::zeros((m, r)),
            count: vec![0; m],
            choice: vec![0; n],
            best: None,
            nodes: 0,
            max_nodes,
        };
        search.descend(0, 0.0)?;
        let (objective, choice) = search.best.expect("N >= M guarantees a feasible leaf");
        let nodes = search.nodes;
        Ok(Solution { assignment: AssignmentMatrix::new(choice, m)?, objective, visited: nodes, feasible: 0 })
    }
}

struct Search<'a> {
    problem: &'a AssignmentProblem,
    costs: &'a Array2<f64>,
    suffix: &'a [f64],
    nonneg_supply: bool,
    n: usize,
    m: usize,
    r: usize,
    load: Array2<f64>,
    count: Vec<usize>,
    choice: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
    nodes: u64,
    max_nodes: u64,
}

impl Search<'_> {
    fn lower_bound(&self, depth: usize, partial_l2: f64) -> f64 {
        let mut bound = partial_l2 + self.suffix[depth];
        if self.nonneg_supply {
            // loads only grow, so any current overshoot is permanent
            for (s, d) in self.load.iter().zip(self.problem.demand.iter()) {
                if s > d {
                    bound += (s - d) * (s - d);
                }
            }
        }
        bound
    }

    fn prunes(&self, bound: f64) -> bool {
        match &self.best {
            Some((best, _)) => bound > best + 1e-12 * best.abs().max(1.0),
            None => false,
        }
    }

    fn descend(&mut self, depth: usize, partial_l2: f64) -> Result<()> {
        self.nodes += 1;
        if self.nodes > self.max_nodes {
            return Err(Error::BudgetExceeded(format!("branch-and-bound exceeded {} nodes", self.max_nodes)));
        }
        if depth == self.n {
            let a = AssignmentMatrix::new(self.choice.clone(), self.m)?;
            let obj = self.problem.objective(&a)?;
            let better = match &self.best {
                None => true,
                Some((b, c)) => obj < *b || (obj == *b && self.choice > *c),
            };
            if better {
                self.best = Some((obj, self.choice.clone()));
            }
            return Ok(());
        }
        let empty = self.count.iter().filter(|&&c| c == 0).count();
        let remaining = self.n - depth;
        for c in 0..self.m {
            // every still-empty consumer needs one of the remaining agents
            let empty_after = empty - usize::from(self.count[c] == 0);
            if empty_after > remaining - 1 {
                continue;
            }
            self.choice[depth] = c;
            self.count[c] += 1;
            for l in 0..self.r {
                self.load[[c, l]] += self.problem.supply[[depth, l]];
            }
            let l2 = partial_l2 + self.costs[[depth, c]];
            if !self.prunes(self.lower_bound(depth + 1, l2)) {
                self.descend(depth + 1, l2)?;
            }
            for l in 0..self.r {
                self.load[[c, l]] -= self.problem.supply[[depth, l]];
            }
            self.count[c] -= 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize, r: usize) -> AssignmentProblem {
        AssignmentProblem::new(
            Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..2.8)),
            Array2::from_shape_fn((n, r), |_| rng.random_range(0.0..1.5)),
            Array2::from_shape_fn((m, r), |_| rng.random_range(0.0..1.5)),
        )
        .unwrap()
    }

    #[test]
    fn single_pair_objective() {
        // l1 = (1 - 1)^2 = 0, l2 = 0 * 1 + 1 / 1 = 1
        let p = AssignmentProblem::new(array![[0.0]], array![[1.0]], array![[1.0]]).unwrap();
        let a = AssignmentMatrix::new(vec![0], 1).unwrap();
        assert_eq!(p.objective_terms(&a).unwrap(), (0.0, 1.0));
        let sol = p.solve_exact().unwrap();
        assert_eq!(sol.assignment.to_binary(), array![[1u8]]);
        assert_eq!(sol.objective, 1.0);
    }

    #[test]
    fn zero_supply_objective() {
        let de = array![[0.5, 2.0], [1.0, 0.0]];
        let p = AssignmentProblem::new(array![[0.3, 0.7], [0.2, 0.9]], Array2::zeros((2, 2)), de.clone()).unwrap();
        let a = AssignmentMatrix::new(vec![1, 0], 2).unwrap();
        let (l1, l2) = p.objective_terms(&a).unwrap();
        assert_eq!(l1, de.iter().map(|v| v * v).sum::<f64>());
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn zero_row_is_a_violation() {
        assert!(matches!(
            AssignmentMatrix::from_binary(&array![[1u8, 0], [0, 0]]),
            Err(Error::ConstraintViolation(_))
        ));
        assert!(matches!(
            AssignmentMatrix::from_binary(&array![[1u8, 0], [1, 0]]),
            Err(Error::ConstraintViolation(_))
        ));
        assert!(matches!(AssignmentMatrix::new(vec![0, 2], 2), Err(Error::ConstraintViolation(_))));
    }

    #[test]
    fn adjacent_pairs_assign_identity() {
        let p = AssignmentProblem::new(array![[0.0, 1.0], [1.0, 0.0]], array![[1.0], [1.0]], array![[1.0], [1.0]])
            .unwrap();
        let sol = p.solve_exact().unwrap();
        assert_eq!(sol.assignment.to_binary(), array![[1u8, 0], [0, 1]]);
        // identity: l1 = 0, l2 = 1 + 1; swapped: l2 = 2 + 2
        assert_eq!(sol.objective, 2.0);
        assert_eq!(p.solve_oracle().unwrap().objective, 2.0);
    }

    #[test]
    fn enumeration_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_problem(&mut rng, 2, 2, 1).solve_oracle().unwrap();
        assert_eq!((s.visited, s.feasible), (4, 2));
        let s = random_problem(&mut rng, 3, 2, 1).solve_oracle().unwrap();
        assert_eq!((s.visited, s.feasible), (8, 6));
    }

    #[test]
    fn infeasible_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_problem(&mut rng, 1, 2, 1);
        assert!(matches!(p.solve_exact(), Err(Error::Infeasible(_))));
        assert!(matches!(p.solve_oracle(), Err(Error::Infeasible(_))));
        let big = random_problem(&mut rng, 13, 3, 1);
        assert!(matches!(big.solve_oracle(), Err(Error::BudgetExceeded(_))));
        assert!(matches!(big.solve_exact_with_budget(10), Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn zero_demand_is_guarded() {
        let p = AssignmentProblem::new(array![[0.1], [0.2]], array![[1.0], [0.0]], array![[0.0]]).unwrap();
        let sol = p.solve_exact().unwrap();
        assert!(sol.objective.is_finite());
        assert!((sol.objective - (1.0 + 0.1 + 1.0 / DEMAND_FLOOR)).abs() < 1e-6);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let p = AssignmentProblem::new(Array2::zeros((3, 2)), Array2::zeros((3, 1)), Array2::zeros((2, 1))).unwrap();
        // [[0,1],[0,1],[1,0]] is the smallest feasible binary matrix read row-major
        assert_eq!(p.solve_exact().unwrap().assignment.choices(), &[1, 1, 0]);
        assert_eq!(p.solve_oracle().unwrap().assignment.choices(), &[1, 1, 0]);
    }

    proptest! {
        #[test]
        fn exact_matches_oracle(seed in 0u64..10_000, n in 1usize..7, m in 1usize..4, r in 1usize..3) {
            prop_assume!(n >= m);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, n, m, r);
            let exact = p.solve_exact().unwrap();
            let oracle = p.solve_oracle().unwrap();
            prop_assert_eq!(exact.objective, oracle.objective);
            prop_assert_eq!(exact.assignment, oracle.assignment);
        }

        #[test]
        fn objective_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 5, 3, 2);
            let sol = p.solve_exact().unwrap();
            let perm = [3usize, 0, 4, 1, 2];
            let q = AssignmentProblem::new(
                p.distances.select(ndarray::Axis(0), &perm),
                p.supply.select(ndarray::Axis(0), &perm),
                p.demand.clone(),
            ).unwrap();
            let choice: Vec<usize> = perm.iter().map(|&i| sol.assignment.target(i)).collect();
            let permuted = AssignmentMatrix::new(choice, 3).unwrap();
            let lhs = q.objective(&permuted).unwrap();
            prop_assert!((lhs - sol.objective).abs() <= 1e-12 * sol.objective.abs().max(1.0));
            prop_assert!((q.solve_exact().unwrap().objective - sol.objective).abs() <= 1e-12 * sol.objective.abs().max(1.0));
        }

        #[test]
        fn exact_cover_has_zero_mismatch(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let supply = Array2::from_shape_fn((4, 2), |_| rng.random_range(0.0..1.0));
            let a = AssignmentMatrix::new(vec![0, 1, 0, 1], 2).unwrap();
            let mut demand = Array2::zeros((2, 2));
            for i in 0..4 { for l in 0..2 { demand[[a.target(i), l]] += supply[[i, l]]; } }
            let p = AssignmentProblem::new(Array2::zeros((4, 2)), supply, demand).unwrap();
            prop_assert_eq!(p.objective_terms(&a).unwrap().0, 0.0);
        }
    }
}
