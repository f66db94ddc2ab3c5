//! Log-norms, contraction rates and cluster detection over state trajectories.

use serde::{Deserialize, Serialize};

use crate::neuro::tape::{jacobian_row, Mat};
use crate::{Error, Result};

/// Largest `N * F` accepted by the contraction-rate routines.
pub const CONTRACTION_CAP: usize = 1 << 22;
/// Spreads at or below this are treated as converged.
pub const SPREAD_FLOOR: f64 = 1e-10;

/// `max_i (x_ii + sum_{j != i} |x_ij|)`.
pub fn log_norm_inf(x: &Mat) -> Result<f64> {
    if x.nrows() != x.ncols() || x.is_empty() {
        return Err(Error::Dimension(format!("log-norm needs a non-empty square matrix, got {:?}", x.dim())));
    }
    Ok(x.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(j, v)| if i == j { *v } else { v.abs() }).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max))
}

fn check_terms(tau: &[f64], a: &Mat, s: &Mat, f: &Mat) -> Result<(usize, usize)> {
    let (n, width) = (s.nrows(), tau.len());
    if a.dim() != (width, width) || s.ncols() != n || f.dim() != (n, width) {
        return Err(Error::Dimension(format!(
            "tau {width}, A {:?}, S {:?}, f {:?} are inconsistent",
            a.dim(),
            s.dim(),
            f.dim()
        )));
    }
    if n * width > CONTRACTION_CAP {
        return Err(Error::BudgetExceeded(format!("N*F = {} exceeds {CONTRACTION_CAP}", n * width)));
    }
    Ok((n, width))
}

/// `mu_inf(diag(tau (x) 1_N) + A^T (x) S + diag(vec f))` over vec(x) ordered
/// feature-major, evaluated row by row without forming the `NF x NF` matrix.
pub fn contraction_rate(tau: &[f64], a: &Mat, s: &Mat, f: &Mat) -> Result<f64> {
    let (n, width) = check_terms(tau, a, s, f)?;
    let mut best = f64::NEG_INFINITY;
    for q in 0..width {
        let col_abs: f64 = a.column(q).iter().map(|v| v.abs()).sum();
        for i in 0..n {
            let row_abs: f64 = s.row(i).iter().map(|v| v.abs()).sum();
            let diag = tau[q] + f[[i, q]] + a[[q, q]] * s[[i, i]];
            best = best.max(diag + col_abs * row_abs - a[[q, q]].abs() * s[[i, i]].abs());
        }
    }
    Ok(best)
}

/// `mu_inf` of the Jacobian `-(diag(tau (x) 1_N + vec f) + A^T (x) S)` of the
/// state dynamics. Negative values certify that two trajectories driven by the
/// same `f` and `S` approach each other at least at that rate.
pub fn jacobian_log_norm(tau: &[f64], a: &Mat, s: &Mat, f: &Mat) -> Result<f64> {
    let (n, width) = check_terms(tau, a, s, f)?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        let f_row = f.row(i).to_vec();
        for q in 0..width {
            best = best.max(jacobian_row(tau, a, s, &f_row, q, i));
        }
    }
    Ok(best)
}

/// `x_|`-ordered Kronecker product `A^T (x) S`.
pub fn kron_transpose(a: &Mat, s: &Mat) -> Mat {
    let (width, n) = (a.nrows(), s.nrows());
    Mat::from_shape_fn((width * n, width * n), |(r, c)| a[[c / n, r / n]] * s[[r % n, c % n]])
}

fn max_abs_diff(x: &Mat, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut root = i;
    while parent[root] != root {
        root = parent[root];
    }
    let mut k = i;
    while parent[k] != root {
        let next = parent[k];
        parent[k] = root;
        k = next;
    }
    root
}

/// Groups agents whose states stay within `tol` (infinity norm) of each other
/// over the last `window` snapshots, closed transitively. Clusters are sorted
/// by their smallest member.
pub fn detect_clusters(trajectory: &[Mat], tol: f64, window: usize) -> Result<Vec<Vec<usize>>> {
    if window == 0 || trajectory.len() < window {
        return Err(Error::Config(format!("need at least {window} > 0 snapshots, got {}", trajectory.len())));
    }
    let n = trajectory[0].nrows();
    let tail = &trajectory[trajectory.len() - window..];
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if tail.iter().all(|x| max_abs_diff(x, i, j) <= tol) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(i);
    }
    Ok(clusters)
}

/// Largest pairwise infinity-norm gap inside `members` at one snapshot.
pub fn cluster_spread(x: &Mat, members: &[usize]) -> f64 {
    let mut spread: f64 = 0.0;
    for (k, &i) in members.iter().enumerate() {
        for &j in &members[k + 1..] {
            spread = spread.max(max_abs_diff(x, i, j));
        }
    }
    spread
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Slope of `ln(spread)` against time; negative when the cluster contracts.
    pub rate: f64,
    /// Root-mean-square residual of the log-linear fit.
    pub residual: f64,
    pub points: usize,
}

/// Least-squares fit of `ln(spread_t) = c + rate * t` for every cluster with
/// at least two members, over the snapshots before the spread first reaches
/// the numerical floor. Singletons yield `None`.
pub fn cluster_decay_fit(trajectory: &[Mat], clusters: &[Vec<usize>], dt: f64) -> Result<Vec<Option<DecayFit>>> {
    clusters
        .iter()
        .enumerate()
        .map(|(k, members)| {
            if members.len() < 2 {
                return Ok(None);
            }
            let points: Vec<(f64, f64)> = trajectory
                .iter()
                .map(|x| cluster_spread(x, members))
                .take_while(|&s| s > SPREAD_FLOOR)
                .enumerate()
                .map(|(t, s)| (t as f64 * dt, s.ln()))
                .collect();
            fit_line(&points)
                .map(Some)
                .ok_or_else(|| Error::DegenerateFit(format!("cluster {k} has {} usable spread samples", points.len())))
        })
        .collect()
}

fn fit_line(points: &[(f64, f64)]) -> Option<DecayFit> {
    if points.len() < 3 {
        return None;
    }
    let count = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / count;
    let stt: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sty: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    if stt <= 0.0 {
        return None;
    }
    let rate = sty / stt;
    let sse: f64 = points.iter().map(|p| (p.1 - mean_y - rate * (p.0 - mean_t)).powi(2)).sum();
    Some(DecayFit { rate, residual: (sse / count).sqrt(), points: points.len() })
}

/// Spread of per-agent values around their group means and of the group means themselves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpread {
    /// `sqrt(mean_i (v_i - mean_{g(i)})^2)`.
    pub within: f64,
    /// `sqrt(mean_i (mean_{g(i)} - mean)^2)`.
    pub between: f64,
}

pub fn group_spread(values: &[f64], group: &[usize]) -> Result<GroupSpread> {
    if values.len() != group.len() || values.is_empty() {
        return Err(Error::Dimension(format!("{} values for {} group labels", values.len(), group.len())));
    }
    let groups = group.iter().max().map_or(0, |g| g + 1);
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for (&v, &g) in values.iter().zip(group) {
        sum[g] += v;
        count[g] += 1;
    }
    let means: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let n = values.len() as f64;
    let overall = values.iter().sum::<f64>() / n;
    let within = values.iter().zip(group).map(|(v, &g)| (v - means[g]).powi(2)).sum::<f64>() / n;
    let between = group.iter().map(|&g| (means[g] - overall).powi(2)).sum::<f64>() / n;
    Ok(GroupSpread { within: within.sqrt(), between: between.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuro::dynamics::{self, OdeParams};
    use crate::neuro::gradcheck::random_mat;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag_plus(tau: &[f64], f: &Mat, mut m: Mat, sign: f64) -> Mat {
        let n = f.nrows();
        for q in 0..tau.len() {
            for i in 0..n {
                m[[q * n + i, q * n + i]] += tau[q] + f[[i, q]];
            }
        }
        m * sign
    }

    #[test]
    fn log_norm_examples() {
        assert_eq!(log_norm_inf(&Mat::eye(2)).unwrap(), 1.0);
        assert_eq!(log_norm_inf(&array![[-2.0, 1.0], [0.0, -3.0]]).unwrap(), -1.0);
        assert_eq!(log_norm_inf(&Mat::from_diag(&ndarray::arr1(&[0.5, 3.0, -1.0]))).unwrap(), 3.0);
        assert!(log_norm_inf(&Mat::zeros((2, 3))).is_err());
    }

    #[test]
    fn contraction_rate_examples() {
        let s = Mat::eye(1);
        assert_eq!(contraction_rate(&[0.0], &Mat::zeros((1, 1)), &s, &Mat::zeros((1, 1))).unwrap(), 0.0);
        assert_eq!(contraction_rate(&[1.0, 2.0], &Mat::zeros((2, 2)), &s, &Mat::zeros((1, 2))).unwrap(), 2.0);
        assert!(matches!(
            contraction_rate(&[1.0], &Mat::zeros((2, 2)), &s, &Mat::zeros((1, 1))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rates_match_dense_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, width) = (4, 3);
            let raw = random_mat(&mut rng, width, width, 0.7);
            let a = raw.t().dot(&raw);
            let s = random_mat(&mut rng, n, n, 0.5);
            let f = random_mat(&mut rng, n, width, 1.0).mapv(f64::abs);
            let tau: Vec<f64> = random_mat(&mut rng, 1, width, 1.0).iter().map(|v| v.abs()).collect();
            let k = kron_transpose(&a, &s);
            let verbatim = log_norm_inf(&diag_plus(&tau, &f, k.clone(), 1.0)).unwrap();
            assert!((contraction_rate(&tau, &a, &s, &f).unwrap() - verbatim).abs() < 1e-12);
            let jac = log_norm_inf(&diag_plus(&tau, &f, k, -1.0)).unwrap();
            assert!((jacobian_log_norm(&tau, &a, &s, &f).unwrap() - jac).abs() < 1e-12);
        }
    }

    #[test]
    fn kronecker_layout_matches_vectorized_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, width) = (3, 2);
        let a = random_mat(&mut rng, width, width, 1.0);
        let s = random_mat(&mut rng, n, n, 1.0);
        let x = random_mat(&mut rng, n, width, 1.0);
        let sxa = s.dot(&x).dot(&a);
        let vec_x: Vec<f64> = (0..width).flat_map(|q| x.column(q).to_vec()).collect();
        let prod = kron_transpose(&a, &s).dot(&ndarray::arr1(&vec_x));
        for q in 0..width {
            for i in 0..n {
                assert!((prod[q * n + i] - sxa[[i, q]]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn log_norm_bounded_by_induced_norm(values in prop::collection::vec(-10.0f64..10.0, 9)) {
            let x = Mat::from_shape_vec((3, 3), values).unwrap();
            let norm = x.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            prop_assert!(log_norm_inf(&x).unwrap() <= norm + 1e-12);
        }

        #[test]
        fn clusters_invariant_to_relabeling(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers = random_mat(&mut rng, 3, 2, 1.0);
            let labels: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % 3).collect();
            let traj: Vec<Mat> = (0..5)
                .map(|_| Mat::from_shape_fn((6, 2), |(i, k)| centers[[labels[i], k]]))
                .collect();
            let perm = [4usize, 2, 5, 0, 1, 3];
            let permuted: Vec<Mat> = traj.iter().map(|x| x.select(ndarray::Axis(0), &perm)).collect();
            let mut base: Vec<Vec<usize>> = detect_clusters(&traj, 1e-3, 5).unwrap();
            let mut relabeled: Vec<Vec<usize>> = detect_clusters(&permuted, 1e-3, 5)
                .unwrap()
                .into_iter()
                .map(|c| { let mut c: Vec<usize> = c.into_iter().map(|k| perm[k]).collect(); c.sort(); c })
                .collect();
            base.sort();
            relabeled.sort();
            prop_assert_eq!(base, relabeled);
        }
    }

    #[test]
    fn cluster_examples() {
        let same: Vec<Mat> = (0..5).map(|t| Mat::from_elem((4, 2), t as f64 * 0.1)).collect();
        assert_eq!(detect_clusters(&same, 1e-3, 3).unwrap(), vec![vec![0, 1, 2, 3]]);
        let split: Vec<Mat> = (0..5).map(|_| array![[0.0, 0.0], [0.5, 0.5]]).collect();
        assert_eq!(detect_clusters(&split, 1e-3, 5).unwrap(), vec![vec![0], vec![1]]);
        assert!(detect_clusters(&split, 1e-3, 6).is_err());
        // chain 0-1-2 closes transitively even though |x0 - x2| > tol
        let chain: Vec<Mat> = vec![array![[0.0], [0.0008], [0.0016]]];
        assert_eq!(detect_clusters(&chain, 1e-3, 1).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn simulated_two_group_rollout_has_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let width = 4;
        // block-diagonal support with constant row sums inside each block
        let mut s = Mat::zeros((6, 6));
        for block in [0..3, 3..6] {
            for i in block.clone() {
                for j in block.clone() {
                    s[[i, j]] = 1.0 / 3.0;
                }
            }
        }
        let f_a = random_mat(&mut rng, 1, width, 1.0).mapv(|v| v.abs() + 0.5);
        let f_b = random_mat(&mut rng, 1, width, 1.0).mapv(|v| v.abs() + 0.5);
        let f = Mat::from_shape_fn((6, width), |(i, q)| if i < 3 { f_a[[0, q]] } else { f_b[[0, q]] });
        let p = OdeParams::from_raw(&[0.2; 4], &random_mat(&mut rng, width, width, 0.3), &[0.9, -0.4, 0.6, -0.8]);
        let x0 = random_mat(&mut rng, 6, width, 0.5);
        let traj = dynamics::rollout(&x0, &f, &s, &p, 0.05, 600).unwrap();
        let clusters = detect_clusters(&traj, 1e-3, 20).unwrap();
        assert_eq!(clusters, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        for fit in cluster_decay_fit(&traj, &clusters, 0.05).unwrap() {
            assert!(fit.unwrap().rate < 0.0);
        }
    }

    #[test]
    fn decay_fit_recovers_known_rate() {
        let dt = 0.05;
        let traj: Vec<Mat> = (0..200)
            .map(|t| {
                let gap = 0.8 * (-0.5 * t as f64 * dt).exp();
                array![[0.1, 0.0], [0.1 + gap, -gap], [0.7, 0.7]]
            })
            .collect();
        let fits = cluster_decay_fit(&traj, &[vec![0, 1], vec![2]], dt).unwrap();
        let fit = fits[0].unwrap();
        assert!((fit.rate + 0.5).abs() < 0.05, "rate {}", fit.rate);
        assert!(fit.residual < 1e-6);
        assert!(fits[1].is_none());
    }

    #[test]
    fn converged_input_is_degenerate() {
        let traj: Vec<Mat> = (0..10).map(|_| Mat::from_elem((2, 3), 0.25)).collect();
        assert!(matches!(cluster_decay_fit(&traj, &[vec![0, 1]], 0.05), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn group_spread_examples() {
        let g = group_spread(&[1.0, 1.0, 3.0, 3.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(g, GroupSpread { within: 0.0, between: 1.0 });
        let g = group_spread(&[0.0, 2.0], &[0, 0]).unwrap();
        assert_eq!(g, GroupSpread { within: 1.0, between: 0.0 });
    }
}
