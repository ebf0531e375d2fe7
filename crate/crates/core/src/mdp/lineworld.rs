use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{optimal_q, Demonstration, FiniteMdp, RewardTable, Transition};
use crate::error::Result;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineAction {
    Left = 0,
    Right = 1,
}

/// Where episodes begin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartDistribution {
    Fixed(f64),
    /// Uniform over the `step` lattice in `[low, high]`.
    Lattice { low: f64, high: f64 },
}

/// One-dimensional walk towards a goal region.
#[derive(Debug, Clone, PartialEq)]
pub struct LineWorld {
    pub step: f64,
    pub goal: f64,
    pub goal_radius: f64,
    pub goal_reward: f64,
    pub horizon: usize,
    pub discount: f64,
    pub start: StartDistribution,
}

impl Default for LineWorld {
    fn default() -> Self {
        LineWorld {
            step: 0.1,
            goal: 0.8,
            goal_radius: 0.1,
            goal_reward: 1.0,
            horizon: 40,
            discount: 0.9,
            start: StartDistribution::Lattice { low: -1.0, high: 0.5 },
        }
    }
}

const LOW: f64 = -1.0;
const HIGH: f64 = 1.0;
// positions are snapped so that repeated 0.1 steps land on the lattice
const SNAP: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    ((x / SNAP).round() * SNAP).clamp(LOW, HIGH)
}

#[derive(Debug, Clone)]
pub struct LineRollout {
    pub demo: Demonstration<f64>,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl LineRollout {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    pub fn std_return(&self) -> f64 {
        let m = self.mean_return();
        let n = self.returns.len().max(1) as f64;
        (self.returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n).sqrt()
    }
}

impl LineWorld {
    pub const N_ACTIONS: usize = 2;

    pub fn in_goal(&self, x: f64) -> bool {
        // the boundary itself is outside, hence the slack
        (x - self.goal).abs() < self.goal_radius - SNAP
    }

    /// `(next position, reward, done)` ignoring the horizon.
    pub fn step(&self, x: f64, action: usize) -> (f64, f64, bool) {
        let dx = if action == LineAction::Left as usize { -self.step } else { self.step };
        let next = snap(x + dx);
        if self.in_goal(next) {
            (next, self.goal_reward, true)
        } else {
            (next, 0.0, false)
        }
    }

    pub fn features(&self, x: f64) -> Vec<f64> {
        vec![x]
    }

    fn sample_start(&self, rng: &mut impl Rng) -> f64 {
        match self.start {
            StartDistribution::Fixed(x) => snap(x),
            StartDistribution::Lattice { low, high } => {
                let n = ((high - low) / self.step + SNAP).floor() as usize + 1;
                let i = rng.random_range(0..n);
                snap(low + i as f64 * self.step)
            }
        }
    }

    /// Finite counterpart on `n_points` evenly spaced positions with nearest-point
    /// dynamics; goal points are terminal and carry the goal reward.
    pub fn discretize(&self, n_points: usize) -> Result<(FiniteMdp, RewardTable, Vec<f64>)> {
        assert!(n_points >= 2);
        let grid: Vec<f64> = (0..n_points)
            .map(|i| LOW + (HIGH - LOW) * i as f64 / (n_points - 1) as f64)
            .collect();
        let nearest = |x: f64| -> usize {
            let t = (x - LOW) / (HIGH - LOW) * (n_points - 1) as f64;
            (t.round() as usize).min(n_points - 1)
        };
        let na = Self::N_ACTIONS;
        let mut transitions = vec![0.0; n_points * na * n_points];
        let mut terminal = vec![false; n_points];
        let mut reward = vec![0.0; n_points];
        for (s, &x) in grid.iter().enumerate() {
            if self.in_goal(x) {
                terminal[s] = true;
                reward[s] = self.goal_reward;
            }
        }
        for (s, &x) in grid.iter().enumerate() {
            for a in 0..na {
                let next = if terminal[s] { s } else { nearest(self.step(x, a).0) };
                transitions[(s * na + a) * n_points + next] = 1.0;
            }
        }
        let non_goal = terminal.iter().filter(|t| !**t).count() as f64;
        let initial = terminal.iter().map(|t| if *t { 0.0 } else { 1.0 / non_goal }).collect();
        let mdp = FiniteMdp::new(n_points, na, transitions, self.discount, terminal, initial)?;
        Ok((mdp, RewardTable::from_state_rewards(&reward, na), grid))
    }
}

/// Runs `n_episodes` episodes of `policy(x) -> action probabilities`.
///
/// Each action draw and each start draw uses the episode RNG, so results are
/// fixed by `seed`. The returned demonstration records `alpha = 0`; callers
/// that know the rationality of `policy` should overwrite it.
pub fn lineworld_rollout<F>(world: &LineWorld, policy: F, n_episodes: usize, seed: u64) -> LineRollout
where
    F: Fn(f64) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::new();
    let mut returns = Vec::with_capacity(n_episodes);
    let mut lengths = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut x = world.sample_start(&mut rng);
        let mut total = 0.0;
        let mut t = 0;
        while t < world.horizon {
            let probs = policy(x);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut action = probs.len() - 1;
            for (a, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    action = a;
                    break;
                }
            }
            let (next, r, done) = world.step(x, action);
            transitions.push(Transition { state: x, action, next_state: next });
            total += r;
            t += 1;
            x = next;
            if done {
                break;
            }
        }
        returns.push(total);
        lengths.push(t);
    }
    LineRollout {
        demo: Demonstration::new("lineworld", 0.0, seed, transitions),
        returns,
        lengths,
    }
}

/// Boltzmann expert over value iteration on a 41-point discretization.
/// Returns a policy closure usable with [`lineworld_rollout`].
pub fn lineworld_expert(world: &LineWorld, alpha: f64) -> Result<impl Fn(f64) -> Vec<f64> + Clone + Send + Sync> {
    let n_points = 41;
    let (mdp, reward, _) = world.discretize(n_points)?;
    let (q, _) = optimal_q(&mdp, &reward, None, 1e-12)?;
    Ok(move |x: f64| {
        let t = (x - LOW) / (HIGH - LOW) * (n_points - 1) as f64;
        let s = (t.round() as usize).min(n_points - 1);
        linalg::softmax(&q[s * 2..s * 2 + 2], alpha)
    })
}
