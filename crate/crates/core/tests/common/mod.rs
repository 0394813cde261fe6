//! Test-side oracles, independent of the library's implementation paths.

use icrl_core::env::{Action, MapSpec};
use rand::Rng;

/// Exact value iteration on a known map (the library never sees the map
/// this way; the agent only observes tiles).
pub fn value_iteration(spec: &MapSpec, gamma: f64) -> Vec<[f64; 4]> {
    let tiles = spec.tiles();
    let mut q = vec![[0.0f64; 4]; tiles];
    loop {
        let mut next = q.clone();
        let mut delta: f64 = 0.0;
        for s in 0..tiles {
            if s == spec.goal() || spec.is_hole(s) {
                continue;
            }
            for a in Action::ALL {
                let sp = spec.step_tile(s, a);
                let reward = if sp == spec.goal() { 1.0 } else { 0.0 };
                let bootstrap = if sp == spec.goal() || spec.is_hole(sp) {
                    0.0
                } else {
                    q[sp].iter().cloned().fold(f64::MIN, f64::max)
                };
                let y = reward + gamma * bootstrap;
                delta = delta.max((y - next[s][a.index()]).abs());
                next[s][a.index()] = y;
            }
        }
        q = next;
        if delta < 1e-13 {
            return q;
        }
    }
}

/// Direct uniform-random-policy simulation: success probability per episode
/// on one map. Uses nothing from the evaluation harness.
pub fn random_policy_success<R: Rng>(spec: &MapSpec, episodes: usize, rng: &mut R) -> f64 {
    let mut wins = 0usize;
    for _ in 0..episodes {
        let mut tile = spec.start();
        for _ in 0..spec.max_steps() {
            let action = Action::ALL[rng.random_range(0..4)];
            tile = spec.step_tile(tile, action);
            if tile == spec.goal() {
                wins += 1;
                break;
            }
            if spec.is_hole(tile) {
                break;
            }
        }
    }
    wins as f64 / episodes as f64
}
