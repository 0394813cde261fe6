//! End-to-end experiment runners: unseen in-distribution maps,
//! out-of-distribution sizes, behavior stitching from scripted context,
//! data-quality tiers, and silent non-stationary map switches. Each emits
//! per-trial records, aggregate CSVs and SVG plots.

mod svg;

pub use svg::{render_curves, render_trajectory, validate_episode, CurveSeries};

use crate::datagen::{
    self, build_maps_and_pools, dataset_from_pools, DatagenConfig, Episode, EpisodeStep,
    QualityTier,
};
use crate::env::{generate_map, Action, MapSpec};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_csv, run_trial, trial_records_jsonl, AggregateCurve, BatchOutcome, EpsilonSchedule,
    TrialPhase, TrialRecord,
};
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{train, TrainConfig};
use crate::util::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

pub const NONSTATIONARY_SWITCH: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    UnseenInDist,
    OutOfDist,
    Stitching,
    DataQuality,
    NonStationary,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "unseen" => Self::UnseenInDist,
            "ood" => Self::OutOfDist,
            "stitch" => Self::Stitching,
            "quality" => Self::DataQuality,
            "nonstat" => Self::NonStationary,
            other => {
                return Err(Error::Validation(format!(
                    "unknown experiment kind {other:?} (unseen|ood|stitch|quality|nonstat)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::UnseenInDist => "unseen",
            Self::OutOfDist => "ood",
            Self::Stitching => "stitch",
            Self::DataQuality => "quality",
            Self::NonStationary => "nonstat",
        }
    }
}

/// Paper-scale settings follow the reported setups; the desk profile
/// shrinks map sizes so episodes fit the tiny model's context window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Validation(format!(
                "unknown profile {other:?} (paper|desk)"
            ))),
        }
    }

    pub fn in_dist_sizes(self) -> (usize, usize) {
        match self {
            Self::Paper => (3, 5),
            Self::Desk => (3, 4),
        }
    }

    pub fn ood_sizes(self) -> (usize, usize) {
        match self {
            Self::Paper => (6, 7),
            Self::Desk => (5, 5),
        }
    }

    pub fn hole_prob(self) -> f64 {
        match self {
            Self::Paper => 0.2,
            Self::Desk => 0.25,
        }
    }
}

/// Per-kind run shape. Invariants follow the reported setups; the desk
/// profile scales trial counts down to commodity-CPU budgets.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub n_maps: usize,
    pub trials: usize,
    pub episodes: usize,
    pub alpha_sweep: Vec<f64>,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn defaults(kind: ExperimentKind, profile: Profile, seed: u64) -> Self {
        let (n_maps, trials, episodes) = match (kind, profile) {
            (ExperimentKind::UnseenInDist, Profile::Paper) => (50, 1, 30),
            (ExperimentKind::UnseenInDist, Profile::Desk) => (20, 20, 30),
            (ExperimentKind::OutOfDist, Profile::Paper) => (50, 1, 30),
            (ExperimentKind::OutOfDist, Profile::Desk) => (20, 10, 30),
            (ExperimentKind::Stitching, _) => (3, 5, 5),
            (ExperimentKind::DataQuality, Profile::Paper) => (50, 1, 30),
            (ExperimentKind::DataQuality, Profile::Desk) => (12, 10, 30),
            (ExperimentKind::NonStationary, Profile::Paper) => (50, 50, 60),
            (ExperimentKind::NonStationary, Profile::Desk) => (20, 20, 60),
        };
        Self {
            kind,
            n_maps,
            trials,
            episodes,
            alpha_sweep: vec![0.1, 0.01],
            seed,
        }
    }
}

/// Shared evaluation context: the trained maps (for disjointness checks),
/// the context window capacity and the size/hole profile.
pub struct EvalContext<'a> {
    pub train_maps: &'a [MapSpec],
    pub capacity: usize,
    pub profile: Profile,
}

impl EvalContext<'_> {
    pub fn train_hashes(&self) -> HashSet<u64> {
        self.train_maps.iter().map(|m| m.spec_hash()).collect()
    }
}

/// Errors when any evaluation map hash collides with a training map hash.
pub fn check_disjoint(eval_maps: &[MapSpec], train_hashes: &HashSet<u64>) -> Result<()> {
    for m in eval_maps {
        if train_hashes.contains(&m.spec_hash()) {
            return Err(Error::Validation(format!(
                "evaluation map {:016x} appears in the training set",
                m.spec_hash()
            )));
        }
    }
    Ok(())
}

/// Generates `n` fresh maps disjoint from the training set (and from each
/// other), at the given sizes.
pub fn generate_eval_maps(
    n: usize,
    sizes: (usize, usize),
    hole_prob: f64,
    train_hashes: &HashSet<u64>,
    seed: u64,
) -> Result<Vec<MapSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(n);
    let mut seen = train_hashes.clone();
    let mut attempts = 0;
    while maps.len() < n {
        attempts += 1;
        if attempts > n * 1000 {
            return Err(Error::Generation(format!(
                "could not generate {n} evaluation maps disjoint from training"
            )));
        }
        let m = generate_map(&mut rng, sizes, hole_prob)?;
        if seen.insert(m.spec_hash()) {
            maps.push(m);
        }
    }
    Ok(maps)
}

/// A labeled model variant (one per Polyak alpha in the sweep).
pub struct ModelVariant<'a> {
    pub label: String,
    pub params: &'a ModelParams<f32>,
    pub cfg: &'a ModelConfig,
}

/// One experiment's output bundle, ready to be written to a directory.
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub curves: Vec<(String, AggregateCurve)>,
    pub records: Vec<(String, Vec<TrialRecord>)>,
    pub eval_maps: Vec<MapSpec>,
    pub switch_at: Option<usize>,
    pub notes: String,
    pub extra_svgs: Vec<(String, String)>,
}

impl ExperimentReport {
    pub fn plot_svg(&self, title: &str) -> String {
        let series: Vec<CurveSeries> = self
            .curves
            .iter()
            .map(|(label, c)| CurveSeries {
                label: label.clone(),
                mean: &c.mean,
                stderr: Some(&c.stderr),
            })
            .collect();
        render_curves(title, &series, self.switch_at)
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        for (label, curve) in &self.curves {
            std::fs::write(out.join(format!("curve_{label}.csv")), aggregate_csv(curve))?;
        }
        for (label, records) in &self.records {
            std::fs::write(
                out.join(format!("records_{label}.jsonl")),
                trial_records_jsonl(records),
            )?;
        }
        if !self.eval_maps.is_empty() {
            let blocks: Vec<String> = self.eval_maps.iter().map(|m| m.to_text()).collect();
            std::fs::write(out.join("eval_maps.txt"), blocks.join("\n"))?;
        }
        std::fs::write(
            out.join("plot.svg"),
            self.plot_svg(&format!("{} ({})", title_for(self.kind), self.kind.name())),
        )?;
        for (name, svg) in &self.extra_svgs {
            std::fs::write(out.join(name), svg)?;
        }
        if !self.notes.is_empty() {
            std::fs::write(out.join("summary.txt"), &self.notes)?;
        }
        Ok(())
    }
}

fn title_for(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::UnseenInDist => "Unseen Environments",
        ExperimentKind::OutOfDist => "Unseen Out-Of-Distribution Environments",
        ExperimentKind::Stitching => "Behavior Stitching",
        ExperimentKind::DataQuality => "Effects of Varying Data Quality",
        ExperimentKind::NonStationary => "Adaptation to Non-Stationary Environment",
    }
}

/// Unseen in-distribution maps: fresh maps from the training distribution,
/// one aggregate curve per model variant.
pub fn run_unseen(
    variants: &[ModelVariant<'_>],
    ctx: &EvalContext<'_>,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    let hashes = ctx.train_hashes();
    let maps = generate_eval_maps(
        spec.n_maps,
        ctx.profile.in_dist_sizes(),
        ctx.profile.hole_prob(),
        &hashes,
        derive_seed(spec.seed, 21),
    )?;
    check_disjoint(&maps, &hashes)?;
    eval_variants(variants, &maps, ctx, spec, None)
}

/// Out-of-distribution maps: strictly larger than anything trained on.
pub fn run_ood(
    variants: &[ModelVariant<'_>],
    ctx: &EvalContext<'_>,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    let hashes = ctx.train_hashes();
    let sizes = ctx.profile.ood_sizes();
    let max_train_side = ctx
        .train_maps
        .iter()
        .map(|m| m.width().max(m.height()))
        .max()
        .unwrap_or(0);
    if sizes.0 <= max_train_side {
        return Err(Error::Validation(format!(
            "OOD sizes start at {} but training maps reach {max_train_side}",
            sizes.0
        )));
    }
    let maps = generate_eval_maps(
        spec.n_maps,
        sizes,
        ctx.profile.hole_prob(),
        &hashes,
        derive_seed(spec.seed, 22),
    )?;
    check_disjoint(&maps, &hashes)?;
    eval_variants(variants, &maps, ctx, spec, None)
}

fn eval_variants(
    variants: &[ModelVariant<'_>],
    maps: &[MapSpec],
    ctx: &EvalContext<'_>,
    spec: &ExperimentSpec,
    switch_at: Option<usize>,
) -> Result<ExperimentReport> {
    let mut curves = Vec::new();
    let mut records = Vec::new();
    for variant in variants {
        let out: BatchOutcome = crate::eval::run_batch(
            variant.params,
            variant.cfg,
            maps,
            spec.episodes,
            spec.trials,
            EpsilonSchedule::default(),
            derive_seed(spec.seed, 23),
            ctx.capacity,
        )?;
        curves.push((variant.label.clone(), out.aggregate));
        records.push((variant.label.clone(), out.records));
    }
    Ok(ExperimentReport {
        kind: spec.kind,
        curves,
        records,
        eval_maps: maps.to_vec(),
        switch_at,
        notes: String::new(),
        extra_svgs: Vec::new(),
    })
}

/// Two scripted trajectories that cross: one from the start tile into a
/// hole, one from elsewhere to the goal. Neither alone reaches the goal
/// when replayed from the start.
#[derive(Clone, Debug)]
pub struct StitchScenario {
    pub map: MapSpec,
    pub context_episodes: [Episode; 2],
    pub hole_path: Vec<usize>,
    pub goal_path: Vec<usize>,
}

fn action_between(spec: &MapSpec, from: usize, to: usize) -> Result<Action> {
    for a in Action::ALL {
        if spec.step_tile(from, a) == to && from != to {
            return Ok(a);
        }
    }
    Err(Error::Validation(format!(
        "tiles {from} and {to} are not one move apart"
    )))
}

fn episode_from_tiles(spec: &MapSpec, tiles: &[usize], map_id: u32) -> Result<Episode> {
    let mut steps = Vec::with_capacity(tiles.len() - 1);
    for w in tiles.windows(2) {
        steps.push(EpisodeStep {
            obs: w[0],
            reward: 0.0,
            action: action_between(spec, w[0], w[1])?,
        });
    }
    let final_obs = *tiles.last().expect("path has tiles");
    let final_reward = if final_obs == spec.goal() { 1.0 } else { 0.0 };
    Ok(Episode {
        map_id,
        steps,
        final_obs,
        final_reward,
        success: final_reward == 1.0,
    })
}

/// Replays an action sequence from the start tile; true if it hits the goal.
fn replay_reaches_goal(spec: &MapSpec, actions: &[Action]) -> bool {
    let mut cur = spec.start();
    for &a in actions {
        cur = spec.step_tile(cur, a);
        if cur == spec.goal() {
            return true;
        }
        if spec.is_hole(cur) {
            return false;
        }
    }
    false
}

/// Searches (deterministically in `seed`) for a map and two crossing paths
/// satisfying every scenario invariant.
pub fn generate_stitch_scenario(seed: u64, sizes: (usize, usize)) -> Result<StitchScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5000 {
        let Ok(map) = generate_map(&mut rng, sizes, 0.3) else {
            continue;
        };
        if map.holes().is_empty() {
            continue;
        }
        // Hole path: walk to a tile adjacent to a hole, then step in.
        let holes: Vec<usize> = map.holes().iter().copied().collect();
        let &hole = &holes[rng.random_range(0..holes.len())];
        let neighbors: Vec<usize> = Action::ALL
            .iter()
            .map(|&a| map.step_tile(hole, a))
            .filter(|&t| t != hole && !map.is_hole(t))
            .collect();
        if neighbors.is_empty() {
            continue;
        }
        let via = neighbors[rng.random_range(0..neighbors.len())];
        let Some(mut hole_path) = map.bfs_path(map.start(), via) else {
            continue;
        };
        hole_path.push(hole);
        if hole_path.len() < 3 {
            continue;
        }
        // Goal path from a non-start tile, crossing the hole path.
        let tiles = map.tiles();
        let candidates: Vec<usize> = (0..tiles)
            .filter(|&t| t != map.start() && t != map.goal() && !map.is_hole(t))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let from = candidates[rng.random_range(0..candidates.len())];
        let Some(goal_path) = map.bfs_path(from, map.goal()) else {
            continue;
        };
        if goal_path.len() < 3 {
            continue;
        }
        let crosses = goal_path
            .iter()
            .any(|t| hole_path[..hole_path.len() - 1].contains(t));
        if !crosses {
            continue;
        }
        let ep_hole = episode_from_tiles(&map, &hole_path, 0)?;
        let ep_goal = episode_from_tiles(&map, &goal_path, 0)?;
        // The goal trajectory must not be blindly replayable from the start.
        let actions: Vec<Action> = ep_goal.steps.iter().map(|s| s.action).collect();
        if replay_reaches_goal(&map, &actions) {
            continue;
        }
        return Ok(StitchScenario {
            map,
            context_episodes: [ep_hole.clone(), ep_goal.clone()],
            hole_path,
            goal_path,
        });
    }
    Err(Error::Generation(
        "no stitch scenario found in 5,000 attempts".to_string(),
    ))
}

/// Per-scenario stitching outcome.
pub struct StitchOutcome {
    pub scenario: StitchScenario,
    pub successes: Vec<bool>,
    pub uses_both_paths: Vec<bool>,
    pub trial_episodes: Vec<Episode>,
}

/// True if the trajectory visits at least one tile from each scripted path.
pub fn uses_both_paths(ep: &Episode, scenario: &StitchScenario) -> bool {
    let visited: HashSet<usize> = ep
        .steps
        .iter()
        .map(|s| s.obs)
        .chain(std::iter::once(ep.final_obs))
        .collect();
    let hits_hole_path = scenario.hole_path.iter().any(|t| visited.contains(t));
    let hits_goal_path = scenario.goal_path.iter().any(|t| visited.contains(t));
    hits_hole_path && hits_goal_path
}

/// Preloads the two scripted episodes, then runs greedy-only inference
/// episodes with the context persisting across them (the context IS the
/// experience; a random warm-up would confound the test).
pub fn run_stitching(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    scenario: &StitchScenario,
    trials: usize,
    capacity: usize,
    seed: u64,
) -> Result<StitchOutcome> {
    let phases = [TrialPhase {
        spec: scenario.map.clone(),
        episodes: trials,
    }];
    let result = run_trial(
        params,
        cfg,
        &phases,
        EpsilonSchedule { warmup_episodes: 0 },
        seed,
        capacity,
        &scenario.context_episodes,
    )?;
    let successes: Vec<bool> = result.rewards.iter().map(|&r| r == 1.0).collect();
    let uses: Vec<bool> = result
        .episodes
        .iter()
        .map(|ep| uses_both_paths(ep, scenario))
        .collect();
    Ok(StitchOutcome {
        scenario: scenario.clone(),
        successes,
        uses_both_paths: uses,
        trial_episodes: result.episodes,
    })
}

/// Runs `spec.n_maps` scenarios and renders context + trial trajectories.
pub fn run_stitching_experiment(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    ctx: &EvalContext<'_>,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    let mut notes = String::new();
    let mut extra_svgs = Vec::new();
    let mut best: Option<(usize, usize)> = None;
    let mut all_succ_curves = Vec::new();
    for i in 0..spec.n_maps {
        let scenario = generate_stitch_scenario(derive_seed(spec.seed, 31 + i as u64), (4, 5))?;
        let out = run_stitching(
            params,
            cfg,
            &scenario,
            spec.trials,
            ctx.capacity,
            derive_seed(spec.seed, 41 + i as u64),
        )?;
        let n_succ = out.successes.iter().filter(|&&s| s).count();
        let n_stitched = out
            .successes
            .iter()
            .zip(&out.uses_both_paths)
            .filter(|&(&s, &u)| s && u)
            .count();
        let _ = writeln!(
            notes,
            "scenario {i}: {n_succ}/{} trials reached the goal, {n_stitched} used tiles from both scripted paths",
            spec.trials
        );
        extra_svgs.push((
            format!("stitch_{i}_context_hole.svg"),
            render_trajectory(&scenario.map, &scenario.context_episodes[0])?,
        ));
        extra_svgs.push((
            format!("stitch_{i}_context_goal.svg"),
            render_trajectory(&scenario.map, &scenario.context_episodes[1])?,
        ));
        for (j, ep) in out.trial_episodes.iter().enumerate() {
            extra_svgs.push((
                format!("stitch_{i}_trial_{j}.svg"),
                render_trajectory(&scenario.map, ep)?,
            ));
        }
        all_succ_curves.push((
            format!("scenario_{i}"),
            AggregateCurve {
                mean: out.successes.iter().map(|&s| f64::from(s as u8)).collect(),
                stderr: vec![0.0; out.successes.len()],
                n: 1,
            },
        ));
        if best.map(|(s, _)| n_succ > s).unwrap_or(true) {
            best = Some((n_succ, i));
        }
    }
    if let Some((s, i)) = best {
        let _ = writeln!(notes, "best scenario: {i} with {s}/{} successes", spec.trials);
    }
    Ok(ExperimentReport {
        kind: spec.kind,
        curves: all_succ_curves,
        records: Vec::new(),
        eval_maps: Vec::new(),
        switch_at: None,
        notes,
        extra_svgs,
    })
}

/// Configuration for the data-quality experiment: one shared pool build,
/// three tiered datasets, three trainings, three evaluations.
pub struct QualityRunConfig {
    pub datagen: DatagenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub struct QualityOutcome {
    pub report: ExperimentReport,
    /// (tier, observed success fraction, expected fraction) verified before
    /// any training ran.
    pub ratio_checks: Vec<(QualityTier, f64, f64)>,
}

/// Observed vs expected success fraction of the episodes drawn into sets.
fn verify_tier_ratio(
    pools: &[Vec<Episode>],
    sets: &[datagen::EpisodeSet],
    tier: QualityTier,
) -> (f64, f64) {
    let (ws, wf) = tier.weights();
    let mut drawn = 0usize;
    let mut drawn_success = 0usize;
    let mut expected_sum = 0.0;
    for set in sets {
        let pool = &pools[set.map_id as usize];
        let ns = pool.iter().filter(|e| e.success).count() as f64;
        let nf = pool.len() as f64 - ns;
        let expected = ws * ns / (ws * ns + wf * nf);
        for ep in &set.episodes {
            drawn += 1;
            drawn_success += ep.success as usize;
            expected_sum += expected;
        }
    }
    (
        drawn_success as f64 / drawn as f64,
        expected_sum / drawn as f64,
    )
}

/// Trains three models that differ only in dataset tier and evaluates each
/// on the same unseen maps.
pub fn run_quality(
    qcfg: &QualityRunConfig,
    ctx_profile: Profile,
    spec: &ExperimentSpec,
    capacity: usize,
) -> Result<QualityOutcome> {
    let (maps, pools) = build_maps_and_pools(&qcfg.datagen)?;
    let mut ratio_checks = Vec::new();
    let mut curves = Vec::new();
    let mut records = Vec::new();
    let mut eval_maps_out = Vec::new();
    for tier in [QualityTier::High, QualityTier::Mid, QualityTier::Low] {
        let mut dg = qcfg.datagen.clone();
        dg.tier = tier;
        // Ratio verification on the exact sets that will be trained on.
        let mut set_rng = ChaCha8Rng::seed_from_u64(derive_seed(dg.seed, 2));
        let sets = datagen::build_sets(&pools, tier, &mut set_rng, dg.sets)?;
        let (observed, expected) = verify_tier_ratio(&pools, &sets, tier);
        ratio_checks.push((tier, observed, expected));

        let dataset = dataset_from_pools(&dg, maps.clone(), &pools)?;
        let outcome = train::<f32>(&dataset, &qcfg.model, &qcfg.train, None)?;
        let ctx = EvalContext {
            train_maps: &maps,
            capacity,
            profile: ctx_profile,
        };
        let eval_spec = ExperimentSpec {
            kind: ExperimentKind::DataQuality,
            ..spec.clone()
        };
        let variant = ModelVariant {
            label: format!("{}-quality", tier.name()),
            params: &outcome.params,
            cfg: &qcfg.model,
        };
        let report = eval_variants(&[variant], &eval_maps_for_quality(&ctx, &eval_spec)?, &ctx, &eval_spec, None)?;
        eval_maps_out = report.eval_maps.clone();
        curves.extend(report.curves);
        records.extend(report.records);
    }
    let mut notes = String::new();
    for (tier, obs, exp) in &ratio_checks {
        let _ = writeln!(
            notes,
            "{} tier: drawn success fraction {obs:.4}, expected {exp:.4}",
            tier.name()
        );
    }
    for (label, curve) in &curves {
        let _ = writeln!(notes, "{label}: fitted slope {:+.5} per episode", slope(&curve.mean));
    }
    Ok(QualityOutcome {
        report: ExperimentReport {
            kind: ExperimentKind::DataQuality,
            curves,
            records,
            eval_maps: eval_maps_out,
            switch_at: None,
            notes,
            extra_svgs: Vec::new(),
        },
        ratio_checks,
    })
}

fn eval_maps_for_quality(ctx: &EvalContext<'_>, spec: &ExperimentSpec) -> Result<Vec<MapSpec>> {
    generate_eval_maps(
        spec.n_maps,
        ctx.profile.in_dist_sizes(),
        ctx.profile.hole_prob(),
        &ctx.train_hashes(),
        derive_seed(spec.seed, 24),
    )
}

/// Least-squares slope of a curve against the episode index.
pub fn slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in values.iter().enumerate() {
        num += (i as f64 - mx) * (y - my);
        den += (i as f64 - mx) * (i as f64 - mx);
    }
    num / den
}

/// Silent map switch mid-trial: per trial two distinct solvable maps whose
/// hole layout and goal both differ; the agent gets no signal at the swap.
pub fn run_nonstationary(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    ctx: &EvalContext<'_>,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    let hashes = ctx.train_hashes();
    if spec.episodes <= NONSTATIONARY_SWITCH {
        return Err(Error::Validation(format!(
            "non-stationary trials need more than {NONSTATIONARY_SWITCH} episodes"
        )));
    }
    let second_phase = spec.episodes - NONSTATIONARY_SWITCH;
    let trials: Vec<crate::eval::TrialResult> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let pair_seed = derive_seed(spec.seed, 51 + t as u64);
            let (a, b) = map_pair(pair_seed, ctx.profile, &hashes)?;
            run_trial(
                params,
                cfg,
                &[
                    TrialPhase {
                        spec: a,
                        episodes: NONSTATIONARY_SWITCH,
                    },
                    TrialPhase {
                        spec: b,
                        episodes: second_phase,
                    },
                ],
                EpsilonSchedule::default(),
                derive_seed(spec.seed, 61 + t as u64),
                ctx.capacity,
                &[],
            )
        })
        .collect::<Result<_>>()?;
    let curve = crate::eval::aggregate(&trials);
    let records: Vec<TrialRecord> = trials
        .iter()
        .enumerate()
        .map(|(i, t)| TrialRecord {
            trial: i,
            spec_hash: "pair".to_string(),
            seed: t.seed,
            rewards: t.rewards.clone(),
        })
        .collect();
    Ok(ExperimentReport {
        kind: spec.kind,
        curves: vec![("nonstat".to_string(), curve)],
        records: vec![("nonstat".to_string(), records)],
        eval_maps: Vec::new(),
        switch_at: Some(NONSTATIONARY_SWITCH),
        notes: String::new(),
        extra_svgs: Vec::new(),
    })
}

/// Two distinct maps differing in hole layout and goal position.
fn map_pair(
    seed: u64,
    profile: Profile,
    train_hashes: &HashSet<u64>,
) -> Result<(MapSpec, MapSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = profile.in_dist_sizes();
    for _ in 0..1000 {
        let a = generate_map(&mut rng, sizes, profile.hole_prob())?;
        let b = generate_map(&mut rng, sizes, profile.hole_prob())?;
        if a.spec_hash() == b.spec_hash()
            || train_hashes.contains(&a.spec_hash())
            || train_hashes.contains(&b.spec_hash())
        {
            continue;
        }
        if a.holes() == b.holes() || a.goal() == b.goal() {
            continue;
        }
        return Ok((a, b));
    }
    Err(Error::Generation(
        "could not build a non-stationary map pair".to_string(),
    ))
}

/// Rebuilds plot.svg from the aggregate CSVs stored in a directory.
pub fn report_from_csvs(dir: &Path) -> Result<String> {
    let mut entries: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("curve_") && n.ends_with(".csv"))
        .collect();
    names.sort();
    for name in names {
        let text = std::fs::read_to_string(dir.join(&name))?;
        let mut mean = Vec::new();
        let mut err = Vec::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 {
                return Err(Error::Format(format!("bad curve row {line:?} in {name}")));
            }
            mean.push(
                cols[1]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad mean in {name}: {line:?}")))?,
            );
            err.push(
                cols[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad stderr in {name}: {line:?}")))?,
            );
        }
        let label = name
            .trim_start_matches("curve_")
            .trim_end_matches(".csv")
            .to_string();
        entries.push((label, mean, err));
    }
    if entries.is_empty() {
        return Err(Error::Validation(format!(
            "no curve_*.csv files in {}",
            dir.display()
        )));
    }
    let series: Vec<CurveSeries> = entries
        .iter()
        .map(|(label, mean, err)| CurveSeries {
            label: label.clone(),
            mean,
            stderr: Some(err),
        })
        .collect();
    let svg = render_curves("Stored Curves", &series, None);
    std::fs::write(dir.join("plot.svg"), &svg)?;
    Ok(svg)
}
