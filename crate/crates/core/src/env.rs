//! Deterministic parametric Frozen Lake: a grid POMDP where the agent sees
//! only tile numbers and the map (size, holes, goal) stays hidden. Moving
//! into the goal pays 1.0 and ends the episode; moving into a hole ends it
//! with 0.0; moves off an edge leave the position unchanged.

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// Hard cap on board area: the token vocabulary carries one state token per
/// tile index 0..=48, i.e. boards up to 7x7.
pub const MAX_TILES: usize = 49;
pub const MIN_SIDE: usize = 2;
pub const MAX_SIDE: usize = 7;

/// The four moves, with fixed canonical indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Validation(format!("action index {i} out of range")))
    }

    pub fn word(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

/// Tile-number observation; row-major, `tile = row * width + col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub tile: usize,
}

/// One Frozen Lake parameterization. Construction validates every invariant,
/// including BFS solvability, so a `MapSpec` in hand is always playable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapSpec {
    width: usize,
    height: usize,
    start: usize,
    goal: usize,
    holes: BTreeSet<usize>,
    max_steps: usize,
}

impl MapSpec {
    pub fn new(
        width: usize,
        height: usize,
        start: usize,
        goal: usize,
        holes: impl IntoIterator<Item = usize>,
    ) -> Result<MapSpec> {
        let holes: BTreeSet<usize> = holes.into_iter().collect();
        let tiles = width * height;
        if !(MIN_SIDE..=MAX_SIDE).contains(&width) || !(MIN_SIDE..=MAX_SIDE).contains(&height) {
            return Err(Error::Validation(format!(
                "map sides must be in [{MIN_SIDE},{MAX_SIDE}], got {width}x{height}"
            )));
        }
        if tiles > MAX_TILES {
            return Err(Error::Validation(format!(
                "map has {tiles} tiles, vocabulary supports at most {MAX_TILES}"
            )));
        }
        if start >= tiles || goal >= tiles {
            return Err(Error::Validation(format!(
                "start {start} / goal {goal} out of range for {tiles} tiles"
            )));
        }
        if start == goal {
            return Err(Error::Validation("start equals goal".to_string()));
        }
        if holes.contains(&start) {
            return Err(Error::Validation("start is a hole".to_string()));
        }
        if holes.contains(&goal) {
            return Err(Error::Validation("goal is a hole".to_string()));
        }
        if let Some(&bad) = holes.iter().find(|&&h| h >= tiles) {
            return Err(Error::Validation(format!(
                "hole {bad} out of range for {tiles} tiles"
            )));
        }
        let spec = MapSpec {
            width,
            height,
            start,
            goal,
            holes,
            max_steps: 4 * width * height,
        };
        if spec.bfs_path(start, goal).is_none() {
            return Err(Error::Validation(
                "no hole-free path from start to goal".to_string(),
            ));
        }
        Ok(spec)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn start(&self) -> usize {
        self.start
    }
    pub fn goal(&self) -> usize {
        self.goal
    }
    pub fn holes(&self) -> &BTreeSet<usize> {
        &self.holes
    }
    pub fn max_steps(&self) -> usize {
        self.max_steps
    }
    pub fn tiles(&self) -> usize {
        self.width * self.height
    }

    pub fn is_hole(&self, tile: usize) -> bool {
        self.holes.contains(&tile)
    }

    /// Target tile for an action; edge moves are no-ops.
    pub fn step_tile(&self, tile: usize, action: Action) -> usize {
        let (row, col) = (tile / self.width, tile % self.width);
        let (nr, nc) = match action {
            Action::Up => (row.saturating_sub(1), col),
            Action::Down => ((row + 1).min(self.height - 1), col),
            Action::Left => (row, col.saturating_sub(1)),
            Action::Right => (row, (col + 1).min(self.width - 1)),
        };
        nr * self.width + nc
    }

    /// Shortest hole-free path `from -> to` (inclusive), if one exists.
    pub fn bfs_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let tiles = self.tiles();
        let mut prev = vec![usize::MAX; tiles];
        let mut seen = vec![false; tiles];
        let mut queue = std::collections::VecDeque::new();
        seen[from] = true;
        queue.push_back(from);
        while let Some(t) = queue.pop_front() {
            if t == to {
                let mut path = vec![to];
                let mut cur = to;
                while cur != from {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for a in Action::ALL {
                let n = self.step_tile(t, a);
                if !seen[n] && !self.is_hole(n) {
                    seen[n] = true;
                    prev[n] = t;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    /// Stable 64-bit content hash (FNV-1a over the defining fields), used to
    /// enforce train/eval disjointness.
    pub fn spec_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        eat(self.width as u64);
        eat(self.height as u64);
        eat(self.start as u64);
        eat(self.goal as u64);
        for &hole in &self.holes {
            eat(hole as u64);
        }
        h
    }

    /// Flat `key = value` text form with stable ordering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "start = {}", self.start);
        let _ = writeln!(s, "goal = {}", self.goal);
        let holes: Vec<String> = self.holes.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "holes = {}", holes.join(", "));
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        s
    }

    pub fn from_text(text: &str) -> Result<MapSpec> {
        let mut width = None;
        let mut height = None;
        let mut start = None;
        let mut goal = None;
        let mut holes: Vec<usize> = Vec::new();
        let mut max_steps = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("map line missing '=': {line:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Format(format!("bad integer {v:?} for key {key}")))
            };
            match key {
                "width" => width = Some(parse(value)?),
                "height" => height = Some(parse(value)?),
                "start" => start = Some(parse(value)?),
                "goal" => goal = Some(parse(value)?),
                "max_steps" => max_steps = Some(parse(value)?),
                "holes" => {
                    for part in value.split(',') {
                        let part = part.trim();
                        if !part.is_empty() {
                            holes.push(parse(part)?);
                        }
                    }
                }
                other => {
                    return Err(Error::Format(format!("unknown map key {other:?}")));
                }
            }
        }
        let missing = |k: &str| Error::Format(format!("map text missing key {k}"));
        let spec = MapSpec::new(
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
            start.ok_or_else(|| missing("start"))?,
            goal.ok_or_else(|| missing("goal"))?,
            holes,
        )?;
        if let Some(ms) = max_steps {
            if ms != spec.max_steps {
                return Err(Error::Validation(format!(
                    "max_steps {ms} does not equal 4 * width * height = {}",
                    spec.max_steps
                )));
            }
        }
        Ok(spec)
    }
}

/// Outcome of one transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub next_obs: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Live episode state. Single-owner mutable; the spec inside is immutable.
#[derive(Clone, Debug)]
pub struct EnvState {
    spec: MapSpec,
    current: usize,
    steps_taken: usize,
}

/// Starts an episode at the map's start tile.
pub fn reset(spec: &MapSpec) -> (EnvState, Observation) {
    let state = EnvState {
        spec: spec.clone(),
        current: spec.start,
        steps_taken: 0,
    };
    let obs = Observation { tile: spec.start };
    (state, obs)
}

impl EnvState {
    pub fn spec(&self) -> &MapSpec {
        &self.spec
    }

    pub fn current(&self) -> Observation {
        Observation { tile: self.current }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn is_done(&self) -> bool {
        self.current == self.spec.goal
            || self.spec.is_hole(self.current)
            || self.steps_taken >= self.spec.max_steps
    }

    /// One deterministic transition.
    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::Contract(
                "step called on a finished episode".to_string(),
            ));
        }
        let next = self.spec.step_tile(self.current, action);
        self.current = next;
        self.steps_taken += 1;
        let reached_goal = next == self.spec.goal;
        let terminated = reached_goal || self.spec.is_hole(next);
        let truncated = !terminated && self.steps_taken >= self.spec.max_steps;
        Ok(StepResult {
            next_obs: Observation { tile: next },
            reward: if reached_goal { 1.0 } else { 0.0 },
            terminated,
            truncated,
        })
    }
}

/// Writes maps as blank-line-separated text blocks.
pub fn write_maps_file(path: &std::path::Path, maps: &[MapSpec]) -> Result<()> {
    let blocks: Vec<String> = maps.iter().map(|m| m.to_text()).collect();
    std::fs::write(path, blocks.join("\n"))?;
    Ok(())
}

pub fn read_maps_file(path: &std::path::Path) -> Result<Vec<MapSpec>> {
    let text = std::fs::read_to_string(path)?;
    text.split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(MapSpec::from_text)
        .collect()
}

/// Rejection-samples a solvable map: sides uniform in `size_range`, start
/// and goal distinct uniform tiles, each remaining tile a hole with
/// probability `hole_prob`. Gives up after 1,000 consecutive rejections.
pub fn generate_map<R: Rng>(
    rng: &mut R,
    size_range: (usize, usize),
    hole_prob: f64,
) -> Result<MapSpec> {
    let (lo, hi) = size_range;
    if !(MIN_SIDE..=MAX_SIDE).contains(&lo) || !(MIN_SIDE..=MAX_SIDE).contains(&hi) || lo > hi {
        return Err(Error::Validation(format!(
            "size range [{lo},{hi}] out of [{MIN_SIDE},{MAX_SIDE}]"
        )));
    }
    if !(0.0..1.0).contains(&hole_prob) {
        return Err(Error::Validation(format!(
            "hole_prob must be in [0,1), got {hole_prob}"
        )));
    }
    for _ in 0..1000 {
        let width = rng.random_range(lo..=hi);
        let height = rng.random_range(lo..=hi);
        let tiles = width * height;
        if tiles > MAX_TILES {
            continue;
        }
        let start = rng.random_range(0..tiles);
        let goal = rng.random_range(0..tiles);
        if start == goal {
            continue;
        }
        let holes: Vec<usize> = (0..tiles)
            .filter(|&t| t != start && t != goal && rng.random_bool(hole_prob))
            .collect();
        if let Ok(spec) = MapSpec::new(width, height, start, goal, holes) {
            return Ok(spec);
        }
    }
    Err(Error::Generation(
        "1,000 consecutive map rejections".to_string(),
    ))
}
