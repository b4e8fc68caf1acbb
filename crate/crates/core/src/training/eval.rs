use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envs::{rollout_reaches_goal, OccupancyGrid, PlanningSample};
use crate::error::Result;
use crate::planners::{self, ModelParams, PlannerSpec, NUM_ACTIONS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Rollout horizon is `horizon_factor · m` steps.
    pub horizon_factor: usize,
    /// Maps up to this size start from every free cell.
    pub full_start_limit: usize,
    /// Start cells sampled per grid on larger maps.
    pub sampled_starts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon_factor: 4,
            full_start_limit: 20,
            sampled_starts: 100,
            seed: 0,
        }
    }
}

/// Greedy action per cell, lowest index on ties.
pub fn greedy_actions(logits: &Tensor) -> Vec<u8> {
    let plane = logits.numel() / NUM_ACTIONS;
    let d = logits.data();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for a in 1..NUM_ACTIONS {
                if d[a * plane + i] > d[best * plane + i] {
                    best = a;
                }
            }
            best as u8
        })
        .collect()
}

/// Free non-goal start cells for grid number `index` of an evaluation set.
pub fn start_cells(grid: &OccupancyGrid, cfg: &EvalConfig, index: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<_> = (0..grid.size)
        .flat_map(|r| (0..grid.size).map(move |c| (r, c)))
        .filter(|&(r, c)| grid.is_free(r, c) && (r, c) != grid.goal)
        .collect();
    if grid.size > cfg.full_start_limit {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        cells.shuffle(&mut rng);
        cells.truncate(cfg.sampled_starts);
    }
    cells
}

/// `(successes, starts)` for one grid under a fixed action map.
pub fn rollout_counts(grid: &OccupancyGrid, actions: &[u8], cfg: &EvalConfig, index: usize) -> (usize, usize) {
    let starts = start_cells(grid, cfg, index);
    let horizon = cfg.horizon_factor * grid.size;
    let ok = starts
        .iter()
        .filter(|&&s| rollout_reaches_goal(grid, actions, s, horizon).is_some())
        .count();
    (ok, starts.len())
}

/// Success rate of the given action maps, pooled over all (grid, start) pairs.
pub fn success_of_actions(samples: &[PlanningSample], actions: &[Vec<u8>], cfg: &EvalConfig) -> f64 {
    let (ok, total) = samples
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(i, (s, a))| rollout_counts(&s.grid, a, cfg, i))
        .fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    if total == 0 {
        0.0
    } else {
        ok as f64 / total as f64
    }
}

/// Greedy-rollout success rate of a planner.
pub fn evaluate_success(
    spec: &PlannerSpec,
    params: &ModelParams,
    samples: &[PlanningSample],
    cfg: &EvalConfig,
) -> Result<f64> {
    let actions = samples
        .par_iter()
        .map(|s| {
            let (logits, _) = planners::plan(spec, params, &s.grid.observation())?;
            Ok(greedy_actions(&logits))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(success_of_actions(samples, &actions, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{bfs_expert, generate_maze};
    use proptest::prelude::*;

    #[test]
    fn expert_actions_always_succeed() {
        let samples: Vec<_> = (0..20)
            .map(|s| bfs_expert(&generate_maze(15, s, 0.3).unwrap()))
            .collect();
        let actions: Vec<_> = samples.iter().map(|s| s.expert_action.clone()).collect();
        assert_eq!(success_of_actions(&samples, &actions, &EvalConfig::default()), 1.0);
        let big: Vec<_> = (0..5)
            .map(|s| bfs_expert(&generate_maze(27, s, 0.3).unwrap()))
            .collect();
        let actions: Vec<_> = big.iter().map(|s| s.expert_action.clone()).collect();
        assert_eq!(success_of_actions(&big, &actions, &EvalConfig::default()), 1.0);
    }

    #[test]
    fn zero_logits_walk_north() {
        let grid = OccupancyGrid::open(3, (0, 0));
        let sample = bfs_expert(&grid);
        let actions = greedy_actions(&Tensor::zeros(&[4, 3, 3]));
        assert!(actions.iter().all(|&a| a == 0));
        // only (1,0) and (2,0) of the eight free non-goal cells lie below the goal
        assert_eq!(
            success_of_actions(&[sample], &[actions], &EvalConfig::default()),
            2.0 / 8.0
        );
    }

    #[test]
    fn large_maps_sample_starts() {
        let grid = generate_maze(27, 3, 0.3).unwrap();
        let cfg = EvalConfig::default();
        let a = start_cells(&grid, &cfg, 0);
        assert_eq!(a.len(), 100);
        assert_eq!(a, start_cells(&grid, &cfg, 0));
        assert_ne!(a, start_cells(&grid, &cfg, 1));
        assert!(a.iter().all(|&(r, c)| grid.is_free(r, c) && (r, c) != grid.goal));
    }

    proptest! {
        #[test]
        fn rescaling_logits_keeps_actions(
            vals in proptest::collection::vec(-5.0f64..5.0, 4 * 25),
            scale in 0.01f64..100.0,
        ) {
            let logits = Tensor::from_vec(&[4, 5, 5], vals).unwrap();
            prop_assert_eq!(greedy_actions(&logits), greedy_actions(&logits.scale(scale)));
        }
    }
}
