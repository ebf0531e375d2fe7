use serde::{Deserialize, Serialize};

use super::{FiniteMdp, RewardTable};
use crate::error::{Error, Result};

/// Grid cell, row 0 at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
}

/// A gridworld with its true (state-only) reward.
#[derive(Debug, Clone)]
pub struct Gridworld {
    pub width: usize,
    pub height: usize,
    pub mdp: FiniteMdp,
    pub reward: RewardTable,
    pub goals: Vec<(Cell, f64)>,
    pub hazards: Vec<(Cell, f64)>,
}

impl Gridworld {
    /// States are numbered left-to-right, top-to-bottom.
    pub fn state(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn cell(&self, state: usize) -> Cell {
        Cell::new(state / self.width, state % self.width)
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    /// One-hot state features.
    pub fn one_hot_features(&self) -> Vec<Vec<f64>> {
        let n = self.n_states();
        (0..n)
            .map(|s| (0..n).map(|j| if j == s { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}

/// Deterministic four-action gridworld.
///
/// Moving into a wall leaves the agent in place, goal cells are terminal, and
/// the agent always starts in the top-left cell. Rewards depend on the state
/// only and are replicated across actions.
pub fn build_gridworld(
    width: usize,
    height: usize,
    goal_cells: &[(Cell, f64)],
    hazard_cells: &[(Cell, f64)],
    step_reward: f64,
    discount: f64,
) -> Result<Gridworld> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidModel("empty grid".into()));
    }
    for (cell, _) in goal_cells.iter().chain(hazard_cells) {
        if cell.row >= height || cell.col >= width {
            return Err(Error::CellOutOfBounds {
                row: cell.row,
                col: cell.col,
                width,
                height,
            });
        }
    }
    let n = width * height;
    let idx = |r: usize, c: usize| r * width + c;
    let mut terminal = vec![false; n];
    let mut state_reward = vec![step_reward; n];
    for (cell, r) in hazard_cells {
        state_reward[idx(cell.row, cell.col)] = *r;
    }
    for (cell, r) in goal_cells {
        let s = idx(cell.row, cell.col);
        state_reward[s] = *r;
        terminal[s] = true;
    }

    let n_actions = Action::ALL.len();
    let mut transitions = vec![0.0; n * n_actions * n];
    for r in 0..height {
        for c in 0..width {
            let s = idx(r, c);
            for action in Action::ALL {
                let next = if terminal[s] {
                    s
                } else {
                    match action {
                        Action::Up if r > 0 => idx(r - 1, c),
                        Action::Down if r + 1 < height => idx(r + 1, c),
                        Action::Left if c > 0 => idx(r, c - 1),
                        Action::Right if c + 1 < width => idx(r, c + 1),
                        _ => s,
                    }
                };
                transitions[(s * n_actions + action as usize) * n + next] = 1.0;
            }
        }
    }
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    let mdp = FiniteMdp::new(n, n_actions, transitions, discount, terminal, initial)?;
    Ok(Gridworld {
        width,
        height,
        mdp,
        reward: RewardTable::from_state_rewards(&state_reward, n_actions),
        goals: goal_cells.to_vec(),
        hazards: hazard_cells.to_vec(),
    })
}

/// The square gridworlds addressed by the `gridworldNxN` ids.
///
/// All of them put a +10 terminal goal in the top-right corner and a -30
/// hazard immediately left of it; the larger ones scatter extra hazards.
pub fn gridworld_by_size(n: usize) -> Result<Gridworld> {
    let hazards: Vec<Cell> = match n {
        3 => vec![Cell::new(0, 1)],
        6 => vec![Cell::new(0, 4), Cell::new(2, 1), Cell::new(3, 3)],
        12 => vec![
            Cell::new(0, 10),
            Cell::new(2, 3),
            Cell::new(4, 8),
            Cell::new(6, 5),
            Cell::new(8, 2),
            Cell::new(9, 9),
        ],
        other => {
            return Err(Error::InvalidModel(format!("no predefined {other}x{other} gridworld")));
        }
    };
    let hazards: Vec<(Cell, f64)> = hazards.into_iter().map(|c| (c, -30.0)).collect();
    build_gridworld(n, n, &[(Cell::new(0, n - 1), 10.0)], &hazards, 0.0, 0.9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_three_layout() {
        let g = gridworld_by_size(3).unwrap();
        assert_eq!(g.mdp.initial_dist()[0], 1.0);
        assert!(g.mdp.is_terminal(2));
        assert_eq!(g.reward.state_rewards(), vec![0.0, -30.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // bumping into the top wall stays put
        assert_eq!(g.mdp.prob(0, Action::Up as usize, 0), 1.0);
        assert_eq!(g.mdp.prob(0, Action::Right as usize, 1), 1.0);
        assert!(g.mdp.is_deterministic());
    }

    #[test]
    fn single_cell_self_loops() {
        let g = build_gridworld(1, 1, &[], &[], 0.0, 0.9).unwrap();
        assert!(!g.mdp.is_terminal(0));
        for a in 0..4 {
            assert_eq!(g.mdp.prob(0, a, 0), 1.0);
        }
    }

    #[test]
    fn two_cells_right_move_reaches_goal() {
        let g = build_gridworld(2, 1, &[(Cell::new(0, 1), 5.0)], &[], 0.0, 0.5).unwrap();
        assert_eq!(g.mdp.prob(0, Action::Right as usize, 1), 1.0);
        assert!(g.mdp.is_terminal(1));
    }

    #[test]
    fn out_of_bounds_cell() {
        let err = build_gridworld(3, 3, &[(Cell::new(3, 0), 1.0)], &[], 0.0, 0.9).unwrap_err();
        assert!(matches!(err, Error::CellOutOfBounds { row: 3, .. }));
    }
}
