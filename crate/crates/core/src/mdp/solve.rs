//! Forward planning: value iteration and exact policy evaluation.

use super::{FiniteMdp, RewardTable};
use crate::error::Result;
use crate::linalg::{self, LuSolver};

/// Optimal Q-values by value iteration, starting from `Q = R`.
pub fn value_iteration(mdp: &FiniteMdp, reward: &RewardTable, tol: f64) -> Vec<f64> {
    value_iteration_from(mdp, reward, tol, &reward.values)
}

/// Value iteration from a warm start. Stops once successive iterates differ by
/// less than `tol` in sup norm, which bounds the Bellman residual of the
/// returned table by `discount * tol`.
pub fn value_iteration_from(mdp: &FiniteMdp, reward: &RewardTable, tol: f64, init: &[f64]) -> Vec<f64> {
    assert!(tol > 0.0, "tolerance must be positive");
    assert_eq!(init.len(), mdp.n_pairs());
    assert_eq!(reward.values.len(), mdp.n_pairs());
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let cont = mdp.continuation();
    let mut q = init.to_vec();
    let mut v = vec![0.0; mdp.n_states()];
    let mut next = vec![0.0; q.len()];
    loop {
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        let mut delta: f64 = 0.0;
        for (i, out) in next.iter_mut().enumerate() {
            let ev: f64 = cont.row(i).map(|(j, p)| p * v[j]).sum();
            *out = reward.values[i] + gamma * ev;
            delta = delta.max((*out - q[i]).abs());
        }
        std::mem::swap(&mut q, &mut next);
        if delta < tol {
            return q;
        }
    }
}

/// Greedy action per state, lowest index on ties.
pub fn greedy_policy(q: &[f64], n_actions: usize) -> Vec<usize> {
    q.chunks(n_actions).map(linalg::argmax).collect()
}

/// Exact evaluation of a deterministic policy: solves
/// `(I - gamma P_pi) V = b` and its transpose.
///
/// Deterministic dynamics under the policy form a functional graph (one
/// successor per state, none for terminals), which is solved in linear time
/// by walking trees into their cycles. Anything else falls back to dense LU.
#[derive(Debug, Clone)]
pub struct PolicyEvaluator {
    policy: Vec<usize>,
    gamma: f64,
    kind: EvalKind,
}

#[derive(Debug, Clone)]
enum EvalKind {
    Functional(Vec<Option<usize>>),
    Dense(LuSolver),
}

impl PolicyEvaluator {
    pub fn new(mdp: &FiniteMdp, policy: &[usize]) -> Result<Self> {
        assert_eq!(policy.len(), mdp.n_states());
        let n = mdp.n_states();
        let gamma = mdp.discount();
        let cont = mdp.continuation();
        let succ: Vec<Vec<(usize, f64)>> = (0..n).map(|s| cont.row(mdp.sa(s, policy[s])).collect()).collect();
        let kind = if succ.iter().all(|r| r.len() <= 1) {
            EvalKind::Functional(succ.iter().map(|r| r.first().map(|(j, _)| *j)).collect())
        } else {
            let mut a = vec![0.0; n * n];
            for (s, row) in succ.iter().enumerate() {
                a[s * n + s] += 1.0;
                for &(j, p) in row {
                    a[s * n + j] -= gamma * p;
                }
            }
            EvalKind::Dense(LuSolver::new(n, &a)?)
        };
        Ok(PolicyEvaluator {
            policy: policy.to_vec(),
            gamma,
            kind,
        })
    }

    pub fn policy(&self) -> &[usize] {
        &self.policy
    }

    /// `V = (I - gamma P_pi)^{-1} b`
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        match &self.kind {
            EvalKind::Dense(lu) => lu.solve(b),
            EvalKind::Functional(next) => solve_functional(next, self.gamma, b),
        }
    }

    /// `x = (I - gamma P_pi)^{-T} g`
    pub fn solve_transpose(&self, g: &[f64]) -> Vec<f64> {
        match &self.kind {
            EvalKind::Dense(lu) => lu.solve_transpose(g),
            EvalKind::Functional(next) => solve_functional_transpose(next, self.gamma, g),
        }
    }
}

fn solve_functional(next: &[Option<usize>], gamma: f64, b: &[f64]) -> Vec<f64> {
    const NEW: u8 = 0;
    const ON_PATH: u8 = 1;
    const DONE: u8 = 2;
    let n = next.len();
    let mut v = vec![0.0; n];
    let mut mark = vec![NEW; n];
    let mut path = Vec::new();
    for start in 0..n {
        if mark[start] == DONE {
            continue;
        }
        path.clear();
        let mut cur = Some(start);
        // walk until we hit a solved node, a terminal, or our own path
        while let Some(s) = cur {
            if mark[s] != NEW {
                break;
            }
            mark[s] = ON_PATH;
            path.push(s);
            cur = next[s];
        }
        let mut tail = match cur {
            Some(s) if mark[s] == ON_PATH => {
                // cycle: s = path[k], ..., path[end] -> s
                let k = path.iter().position(|&x| x == s).expect("node is on the path");
                let cycle = &path[k..];
                let len = cycle.len();
                let mut acc = 0.0;
                let mut disc = 1.0;
                for &c in cycle {
                    acc += disc * b[c];
                    disc *= gamma;
                }
                v[cycle[0]] = acc / (1.0 - disc);
                for i in (1..len).rev() {
                    let c = cycle[i];
                    let nxt = cycle[(i + 1) % len];
                    v[c] = b[c] + gamma * v[nxt];
                }
                for &c in cycle {
                    mark[c] = DONE;
                }
                path.truncate(k);
                Some(s)
            }
            other => other,
        };
        for &s in path.iter().rev() {
            v[s] = b[s] + tail.map_or(0.0, |t| gamma * v[t]);
            mark[s] = DONE;
            tail = Some(s);
        }
    }
    v
}

fn solve_functional_transpose(next: &[Option<usize>], gamma: f64, g: &[f64]) -> Vec<f64> {
    let n = next.len();
    let mut indeg = vec![0usize; n];
    for t in next.iter().flatten() {
        indeg[*t] += 1;
    }
    let mut acc = g.to_vec();
    let mut x = vec![0.0; n];
    let mut solved = vec![false; n];
    let mut queue: Vec<usize> = (0..n).filter(|&s| indeg[s] == 0).collect();
    while let Some(s) = queue.pop() {
        x[s] = acc[s];
        solved[s] = true;
        if let Some(t) = next[s] {
            acc[t] += gamma * x[s];
            indeg[t] -= 1;
            if indeg[t] == 0 {
                queue.push(t);
            }
        }
    }
    // what is left are disjoint cycles
    for start in 0..n {
        if solved[start] {
            continue;
        }
        let mut cycle = vec![start];
        let mut cur = next[start].expect("cycle nodes have successors");
        while cur != start {
            cycle.push(cur);
            cur = next[cur].expect("cycle nodes have successors");
        }
        // x(c_{i+1}) = acc(c_{i+1}) + gamma x(c_i)
        let len = cycle.len();
        let mut sum = 0.0;
        let mut disc = 1.0;
        for i in 0..len {
            let c = cycle[(len - i) % len];
            sum += disc * acc[c];
            disc *= gamma;
        }
        x[start] = sum / (1.0 - disc);
        for i in 1..len {
            x[cycle[i]] = acc[cycle[i]] + gamma * x[cycle[i - 1]];
        }
        for &c in &cycle {
            solved[c] = true;
        }
    }
    x
}

/// `Q(s,a) = R(s,a) + gamma * sum_s' p(s'|s,a) V(s')` over non-terminal rows.
pub fn policy_q_values(mdp: &FiniteMdp, reward: &RewardTable, v: &[f64]) -> Vec<f64> {
    let gamma = mdp.discount();
    let cont = mdp.continuation();
    (0..mdp.n_pairs())
        .map(|i| reward.values[i] + gamma * cont.row(i).map(|(j, p)| p * v[j]).sum::<f64>())
        .collect()
}

/// Optimal Q-values whose bits depend only on the reward: value iteration
/// (optionally warm-started) locates the optimal policy, which is then
/// evaluated exactly and improved until stable.
pub fn optimal_q(mdp: &FiniteMdp, reward: &RewardTable, warm: Option<&[f64]>, tol: f64) -> Result<(Vec<f64>, PolicyEvaluator)> {
    let approx = match warm {
        Some(w) => value_iteration_from(mdp, reward, tol, w),
        None => value_iteration(mdp, reward, tol),
    };
    let mut policy = greedy_policy(&approx, mdp.n_actions());
    for _ in 0..1000 {
        let eval = PolicyEvaluator::new(mdp, &policy)?;
        let r_pi: Vec<f64> = (0..mdp.n_states()).map(|s| reward.get(s, policy[s])).collect();
        let v = eval.solve(&r_pi);
        let q = policy_q_values(mdp, reward, &v);
        let improved = greedy_policy(&q, mdp.n_actions());
        // only switch on a strict improvement so ties cannot cycle
        let stable = (0..mdp.n_states()).all(|s| {
            let na = mdp.n_actions();
            q[s * na + improved[s]] <= q[s * na + policy[s]]
        });
        if stable {
            // ties between optimal actions would otherwise leave the policy,
            // and the low bits of q, dependent on the starting point
            let canonical = near_greedy_policy(&q, mdp.n_actions());
            if canonical == policy {
                return Ok((q, eval));
            }
            let eval = PolicyEvaluator::new(mdp, &canonical)?;
            let r_pi: Vec<f64> = (0..mdp.n_states()).map(|s| reward.get(s, canonical[s])).collect();
            let v = eval.solve(&r_pi);
            return Ok((policy_q_values(mdp, reward, &v), eval));
        }
        policy = improved;
    }
    unreachable!("policy iteration terminates on finite MDPs")
}

/// Lowest action within a small relative tolerance of the best.
fn near_greedy_policy(q: &[f64], n_actions: usize) -> Vec<usize> {
    let scale = 1.0 + q.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    q.chunks(n_actions)
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|x| *x >= best - 1e-10 * scale).unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_gridworld, gridworld_by_size, Cell};

    fn residual(mdp: &FiniteMdp, r: &RewardTable, q: &[f64]) -> f64 {
        let na = mdp.n_actions();
        let v: Vec<f64> = q.chunks(na).map(|c| c.iter().copied().fold(f64::MIN, f64::max)).collect();
        let tq = policy_q_values(mdp, r, &v);
        tq.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn myopic_returns_reward() {
        let g = gridworld_by_size(3).unwrap();
        let m = g.mdp.with_discount(0.0).unwrap();
        assert_eq!(value_iteration(&m, &g.reward, 1e-9), g.reward.values);
    }

    #[test]
    fn two_cell_chain_fixed_point() {
        // entering the terminal cell is rewarded by the cell's own reward; put
        // the +5 on the (left, right) pair to match the hand iteration
        let g = build_gridworld(2, 1, &[(Cell::new(0, 1), 0.0)], &[], 0.0, 0.5).unwrap();
        let mut r = RewardTable::from_state_rewards(&[0.0, 0.0], 4);
        r.values[3] = 5.0;
        let q = value_iteration(&g.mdp, &r, 1e-12);
        // V(left) = 5; every other move from the left cell stays there:
        // Q(left, left) = 0 + 0.5 * V(left) = 2.5; the terminal is worth 0
        assert!((q[3] - 5.0).abs() < 1e-9);
        assert!((q[2] - 2.5).abs() < 1e-9);
        assert!(q[4..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn terminal_rows_equal_reward_and_residual_small() {
        let g = gridworld_by_size(6).unwrap();
        let q = value_iteration(&g.mdp, &g.reward, 1e-8);
        for s in 0..g.n_states() {
            if g.mdp.is_terminal(s) {
                for a in 0..4 {
                    assert_eq!(q[g.mdp.sa(s, a)], g.reward.get(s, a));
                }
            }
        }
        assert!(residual(&g.mdp, &g.reward, &q) < 1e-8);
    }

    #[test]
    fn greedy_route_avoids_hazard() {
        // brute force over all 4^9 deterministic policies of the 3x3 world
        let g = gridworld_by_size(3).unwrap();
        let q = value_iteration(&g.mdp, &g.reward, 1e-10);
        let mut best = f64::NEG_INFINITY;
        let mut best_policy = vec![];
        for code in 0..4usize.pow(9) {
            let pol: Vec<usize> = (0..9).map(|s| (code >> (2 * s)) & 3).collect();
            let eval = PolicyEvaluator::new(&g.mdp, &pol).unwrap();
            let rp: Vec<f64> = (0..9).map(|s| g.reward.get(s, pol[s])).collect();
            let v = eval.solve(&rp);
            if v[0] > best + 1e-12 {
                best = v[0];
                best_policy = pol;
            }
        }
        let greedy = greedy_policy(&q, 4);
        let vi_v0 = q[..4].iter().copied().fold(f64::MIN, f64::max);
        assert!((best - vi_v0).abs() < 1e-8);
        // follow the greedy route from the start; it must not enter state 1
        let mut s = 0;
        for _ in 0..9 {
            if g.mdp.is_terminal(s) {
                break;
            }
            s = (0..9).find(|&j| g.mdp.prob(s, greedy[s], j) > 0.0).unwrap();
            assert_ne!(s, 1);
        }
        assert_eq!(s, 2);
        assert_eq!(best_policy[0], greedy[0]);
    }

    #[test]
    fn functional_solver_matches_lu() {
        let g = gridworld_by_size(6).unwrap();
        let m = &g.mdp;
        let n = m.n_states();
        // a policy with wall bumps (self loops) and 2-cycles
        let policy: Vec<usize> = (0..n).map(|s| (s * 7 + 3) % 4).collect();
        let eval = PolicyEvaluator::new(m, &policy).unwrap();
        let mut a = vec![0.0; n * n];
        for s in 0..n {
            a[s * n + s] += 1.0;
            for (j, p) in m.continuation().row(m.sa(s, policy[s])) {
                a[s * n + j] -= m.discount() * p;
            }
        }
        let lu = LuSolver::new(n, &a).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        for (x, y) in eval.solve(&b).iter().zip(lu.solve(&b)) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in eval.solve_transpose(&b).iter().zip(lu.solve_transpose(&b)) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn optimal_q_is_independent_of_warm_start() {
        let g = gridworld_by_size(6).unwrap();
        let (cold, _) = optimal_q(&g.mdp, &g.reward, None, 1e-6).unwrap();
        let warm_init: Vec<f64> = (0..g.mdp.n_pairs()).map(|i| (i as f64).cos() * 3.0).collect();
        let (warm, _) = optimal_q(&g.mdp, &g.reward, Some(&warm_init), 1e-6).unwrap();
        assert_eq!(cold, warm);
        assert!(residual(&g.mdp, &g.reward, &cold) < 1e-10);
    }
}
