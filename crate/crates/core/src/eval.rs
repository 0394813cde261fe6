//! Online evaluation: the frozen model plays live environments while its
//! context accumulates every episode of the trial. Early episodes are mostly
//! uniform-random (epsilon warm-up); whatever happens, the full trajectory
//! enters the context, so later episodes can condition on it.

use crate::codec::{Token, Vocab};
use crate::datagen::{Episode, EpisodeStep};
use crate::env::{reset, Action, MapSpec};
use crate::error::{Error, Result};
use crate::model::{infer_q, IncrementalState, ModelConfig, ModelParams};
use crate::numerics::Real;
use crate::trainer::argmax4;
use crate::util::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Probability that the transformer (rather than a uniform draw) chooses
/// the action: `min(e / warmup_episodes, 1)` for 1-indexed episode `e`.
/// `warmup_episodes = 0` means the model always chooses.
#[derive(Clone, Copy, Debug)]
pub struct EpsilonSchedule {
    pub warmup_episodes: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            warmup_episodes: 20,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, episode: usize) -> f64 {
        if self.warmup_episodes == 0 {
            return 1.0;
        }
        (episode as f64 / self.warmup_episodes as f64).min(1.0)
    }
}

/// Token window shared across the episodes of one trial. Eviction drops
/// oldest whole episodes; only when a single live episode alone would
/// overflow the window does it drop that episode's oldest steps (structure
/// is preserved either way, and the buffer never fails).
pub struct ContextBuffer {
    tokens: Vec<Token>,
    episode_starts: Vec<usize>,
    capacity: usize,
}

/// Worst-case tokens appended per environment step: action query (3) +
/// action tail (2) + observation block (5) + reward block (5) + EOT (1).
pub const STEP_TOKEN_BUDGET: usize = 16;

impl ContextBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 64 {
            return Err(Error::Validation(format!(
                "context capacity {capacity} is too small to hold a step"
            )));
        }
        Ok(Self {
            tokens: Vec::with_capacity(capacity),
            episode_starts: Vec::new(),
            capacity,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episode_count(&self) -> usize {
        self.episode_starts.len()
    }

    pub fn begin_episode(&mut self) {
        self.episode_starts.push(self.tokens.len());
    }

    pub fn push(&mut self, tokens: &[Token]) {
        debug_assert!(self.tokens.len() + tokens.len() <= self.capacity);
        self.tokens.extend_from_slice(tokens);
    }

    /// Makes room for `incoming` tokens. Returns true if anything was
    /// evicted (callers must then rebuild their decoder state).
    pub fn ensure_room(&mut self, incoming: usize) -> bool {
        if self.tokens.len() + incoming <= self.capacity {
            return false;
        }
        // Evict down to 3/4 capacity so rebuilds are amortized.
        let goal = (self.capacity * 3) / 4;
        let mut evicted = false;
        while self.episode_starts.len() > 1 && self.tokens.len() + incoming > goal {
            let cut = self.episode_starts[1];
            self.tokens.drain(..cut);
            self.episode_starts.remove(0);
            for s in &mut self.episode_starts {
                *s -= cut;
            }
            evicted = true;
        }
        if self.tokens.len() + incoming > self.capacity {
            evicted |= self.evict_current_episode_steps(incoming);
        }
        evicted
    }

    /// Drops the oldest whole steps of the (single) live episode, keeping
    /// `BOT` followed by an observation block so the stream stays parseable.
    fn evict_current_episode_steps(&mut self, incoming: usize) -> bool {
        let start = *self.episode_starts.first().unwrap_or(&0);
        debug_assert_eq!(self.episode_starts.len(), 1);
        let goal = (self.capacity * 3) / 4;
        let mut cut_end = None;
        let mut at = start + 1; // skip BOT; blocks are 5-aligned after it
        while at + 5 <= self.tokens.len() {
            let role = self.tokens[at + 1];
            at += 5;
            if role == Vocab::ROLE_ACTION {
                let remaining = self.tokens.len() - (at - (start + 1));
                cut_end = Some(at);
                if remaining + incoming <= goal {
                    break;
                }
            }
        }
        match cut_end {
            Some(end) => {
                self.tokens.drain(start + 1..end);
                true
            }
            None => false,
        }
    }
}

/// Argmax over the four Q-values at the end of a context that stops at an
/// action block's EHI. Ties break toward the lowest action index.
pub fn greedy_action<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    context: &ContextBuffer,
) -> Result<Action> {
    if context.is_empty() || context.tokens[context.len() - 1] != Vocab::EHI {
        return Err(Error::Contract(
            "context must end at an action block EHI".to_string(),
        ));
    }
    let q = infer_q(params, cfg, context.tokens(), &[context.len() - 1])?;
    Action::from_index(argmax4(&q[0]))
}

/// One trial's outcomes: per-episode cumulative reward (0 or 1 in this
/// game), step counts, how many actions the model chose, and the recorded
/// episodes themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub rewards: Vec<f64>,
    pub steps: Vec<usize>,
    pub model_chosen: Vec<usize>,
    pub episodes: Vec<Episode>,
    pub seed: u64,
}

/// A map plus how many episodes to run on it before moving to the next
/// phase (the non-stationary experiment swaps maps silently mid-trial).
#[derive(Clone, Debug)]
pub struct TrialPhase {
    pub spec: MapSpec,
    pub episodes: usize,
}

/// Runs one trial: episodes play out phase by phase while the context
/// persists across episodes (and across phase switches). `preload` episodes
/// are encoded into the context before any interaction happens.
pub fn run_trial<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    phases: &[TrialPhase],
    schedule: EpsilonSchedule,
    seed: u64,
    capacity: usize,
    preload: &[Episode],
) -> Result<TrialResult> {
    let capacity = capacity.min(cfg.max_context);
    let mut ctx = ContextBuffer::new(capacity)?;
    let mut inc = IncrementalState::<F>::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for ep in preload {
        let ts = crate::codec::encode_episode(ep)?;
        if ctx.len() + ts.len() > capacity {
            return Err(Error::Validation(format!(
                "preloaded episodes need {} tokens, capacity is {capacity}",
                ctx.len() + ts.len()
            )));
        }
        ctx.begin_episode();
        ctx.push(&ts.tokens);
        inc.append(params, &ts.tokens)?;
    }

    let total_episodes: usize = phases.iter().map(|p| p.episodes).sum();
    let mut result = TrialResult {
        rewards: Vec::with_capacity(total_episodes),
        steps: Vec::with_capacity(total_episodes),
        model_chosen: Vec::with_capacity(total_episodes),
        episodes: Vec::with_capacity(total_episodes),
        seed,
    };

    let mut episode_index = 0usize;
    for phase in phases {
        for _ in 0..phase.episodes {
            episode_index += 1;
            let eps = schedule.value(episode_index);
            let (mut env, obs) = reset(&phase.spec);
            let mut steps: Vec<EpisodeStep> = Vec::new();
            let mut cur = obs.tile;
            let mut model_chosen = 0usize;

            let mut pending: Vec<Token> = vec![Vocab::BOT];
            obs_block(&mut pending, cur)?;
            if ctx.ensure_room(pending.len() + STEP_TOKEN_BUDGET) {
                rebuild(&mut inc, params, &ctx)?;
            }
            ctx.begin_episode();
            ctx.push(&pending);
            inc.append(params, &pending)?;

            let (final_obs, final_reward) = loop {
                if ctx.ensure_room(STEP_TOKEN_BUDGET) {
                    rebuild(&mut inc, params, &ctx)?;
                }
                let query = [Vocab::SHI, Vocab::ROLE_ACTION, Vocab::EHI];
                ctx.push(&query);
                inc.append(params, &query)?;

                let action = if rng.random_bool(eps) {
                    model_chosen += 1;
                    let q = inc.q_last(params)?;
                    Action::from_index(argmax4(&q))?
                } else {
                    Action::from_index(rng.random_range(0..4))?
                };
                let tail = [Vocab::action(action), Vocab::EID];
                ctx.push(&tail);
                inc.append(params, &tail)?;

                let r = env.step(action)?;
                steps.push(EpisodeStep {
                    obs: cur,
                    reward: 0.0,
                    action,
                });
                cur = r.next_obs.tile;

                let mut blocks = Vec::with_capacity(11);
                obs_block(&mut blocks, cur)?;
                if r.reward != 0.0 {
                    reward_block(&mut blocks);
                }
                let done = r.terminated || r.truncated;
                if done {
                    blocks.push(Vocab::EOT);
                }
                ctx.push(&blocks);
                inc.append(params, &blocks)?;
                if done {
                    break (cur, r.reward);
                }
            };

            result.rewards.push(final_reward);
            result.steps.push(steps.len());
            result.model_chosen.push(model_chosen);
            result.episodes.push(Episode {
                map_id: crate::datagen::UNKNOWN_MAP,
                steps,
                final_obs,
                final_reward,
                success: final_reward == 1.0,
            });
        }
    }
    Ok(result)
}

fn obs_block(out: &mut Vec<Token>, tile: usize) -> Result<()> {
    out.extend_from_slice(&[
        Vocab::SHI,
        Vocab::ROLE_OBSERVATION,
        Vocab::EHI,
        Vocab::state(tile)?,
        Vocab::EID,
    ]);
    Ok(())
}

fn reward_block(out: &mut Vec<Token>) {
    out.extend_from_slice(&[
        Vocab::SHI,
        Vocab::ROLE_REWARD,
        Vocab::EHI,
        Vocab::REWARD,
        Vocab::EID,
    ]);
}

fn rebuild<F: Real>(
    inc: &mut IncrementalState<F>,
    params: &ModelParams<F>,
    ctx: &ContextBuffer,
) -> Result<()> {
    inc.reset();
    inc.append(params, ctx.tokens())
}

/// Mean per-episode reward across trials, with the standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateCurve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: usize,
}

pub fn aggregate(trials: &[TrialResult]) -> AggregateCurve {
    let n = trials.len();
    let episodes = trials.first().map(|t| t.rewards.len()).unwrap_or(0);
    let mut mean = vec![0.0; episodes];
    let mut stderr = vec![0.0; episodes];
    for e in 0..episodes {
        let vals: Vec<f64> = trials.iter().map(|t| t.rewards[e]).collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        mean[e] = m;
        if n > 1 {
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            stderr[e] = (var / n as f64).sqrt();
        }
    }
    AggregateCurve { mean, stderr, n }
}

pub fn aggregate_csv(curve: &AggregateCurve) -> String {
    let mut s = String::from("episode,mean_reward,stderr,n\n");
    for (e, (m, se)) in curve.mean.iter().zip(&curve.stderr).enumerate() {
        s.push_str(&format!("{},{},{},{}\n", e + 1, m, se, curve.n));
    }
    s
}

/// One JSONL line per trial.
#[derive(Clone, Debug, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub spec_hash: String,
    pub seed: u64,
    pub rewards: Vec<f64>,
}

pub fn trial_records_jsonl(records: &[TrialRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub struct BatchOutcome {
    pub aggregate: AggregateCurve,
    pub per_spec: Vec<AggregateCurve>,
    pub records: Vec<TrialRecord>,
    pub trials: Vec<TrialResult>,
}

/// Evaluates `trials_per_spec` trials on every map, in parallel, each trial
/// on its own derived rng stream. Aggregation is an ordered reduction, so
/// the outcome is independent of worker count.
pub fn run_batch<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    specs: &[MapSpec],
    n_episodes: usize,
    trials_per_spec: usize,
    schedule: EpsilonSchedule,
    base_seed: u64,
    capacity: usize,
) -> Result<BatchOutcome> {
    if specs.is_empty() {
        return Err(Error::Validation("no evaluation maps".to_string()));
    }
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..trials_per_spec).map(move |t| (s, t)))
        .collect();
    let trials: Vec<TrialResult> = jobs
        .par_iter()
        .map(|&(s, t)| {
            let seed = derive_seed(base_seed, (s * 100_000 + t) as u64);
            run_trial(
                params,
                cfg,
                &[TrialPhase {
                    spec: specs[s].clone(),
                    episodes: n_episodes,
                }],
                schedule,
                seed,
                capacity,
                &[],
            )
        })
        .collect::<Result<_>>()?;

    let per_spec: Vec<AggregateCurve> = (0..specs.len())
        .map(|s| aggregate(&trials[s * trials_per_spec..(s + 1) * trials_per_spec]))
        .collect();
    let records: Vec<TrialRecord> = jobs
        .iter()
        .zip(&trials)
        .enumerate()
        .map(|(i, (&(s, _), trial))| TrialRecord {
            trial: i,
            spec_hash: format!("{:016x}", specs[s].spec_hash()),
            seed: trial.seed,
            rewards: trial.rewards.clone(),
        })
        .collect();
    Ok(BatchOutcome {
        aggregate: aggregate(&trials),
        per_spec,
        records,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: Vocab::SIZE,
            max_context: 256,
            dropout: 0.0,
        }
    }

    fn spec3() -> MapSpec {
        MapSpec::new(3, 3, 0, 8, [4]).unwrap()
    }

    #[test]
    fn epsilon_schedule_shape() {
        let s = EpsilonSchedule::default();
        assert!((s.value(1) - 0.05).abs() < 1e-12);
        assert!((s.value(10) - 0.5).abs() < 1e-12);
        assert!((s.value(20) - 1.0).abs() < 1e-12);
        assert_eq!(s.value(25), 1.0);
        let always = EpsilonSchedule { warmup_episodes: 0 };
        assert_eq!(always.value(1), 1.0);
        // Monotone non-decreasing.
        for e in 1..40 {
            assert!(s.value(e + 1) >= s.value(e));
        }
    }

    #[test]
    fn greedy_action_argmax_and_tie_breaks() {
        // Pure argmax checks against the same rule the runner uses.
        assert_eq!(argmax4(&[0.1, 0.5, 0.2, 0.0]), Action::Down.index());
        assert_eq!(argmax4(&[0.3, 0.3, 0.1, 0.0]), Action::Up.index());
        assert_eq!(argmax4(&[0.0, 0.0, 0.0, 0.0]), Action::Up.index());
    }

    #[test]
    fn greedy_action_requires_ehi_suffix() {
        let cfg = tiny_cfg();
        let params = init::<f32>(&cfg, 1).unwrap();
        let mut ctx = ContextBuffer::new(64).unwrap();
        ctx.begin_episode();
        ctx.push(&[Vocab::BOT]);
        assert!(greedy_action(&params, &cfg, &ctx).is_err());
        ctx.push(&[Vocab::SHI, Vocab::ROLE_ACTION, Vocab::EHI]);
        let a = greedy_action(&params, &cfg, &ctx).unwrap();
        assert_eq!(a, Action::Up); // zero head, tie-break to Up
    }

    #[test]
    fn trial_has_expected_lengths_and_is_deterministic() {
        let cfg = tiny_cfg();
        let params = init::<f32>(&cfg, 2).unwrap();
        let phases = [TrialPhase {
            spec: spec3(),
            episodes: 30,
        }];
        let t1 = run_trial(&params, &cfg, &phases, EpsilonSchedule::default(), 9, 256, &[]).unwrap();
        let t2 = run_trial(&params, &cfg, &phases, EpsilonSchedule::default(), 9, 256, &[]).unwrap();
        assert_eq!(t1.rewards.len(), 30);
        assert_eq!(t1, t2);
        for (r, ep) in t1.rewards.iter().zip(&t1.episodes) {
            assert!(*r == 0.0 || *r == 1.0);
            assert_eq!(ep.success, *r == 1.0);
            assert!(ep.steps.len() <= spec3().max_steps());
        }
        // Different seed gives a different rollout (overwhelmingly likely).
        let t3 = run_trial(&params, &cfg, &phases, EpsilonSchedule::default(), 10, 256, &[]).unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn model_choice_fraction_tracks_epsilon() {
        // Aggregate the runner's own model-chosen counters over many trials
        // and check the binomial 3-sigma band at a few episode indices.
        let cfg = tiny_cfg();
        let params = init::<f32>(&cfg, 3).unwrap();
        let phases = [TrialPhase {
            spec: spec3(),
            episodes: 20,
        }];
        let mut chosen = vec![0usize; 20];
        let mut total = vec![0usize; 20];
        for trial in 0..120 {
            let t = run_trial(
                &params,
                &cfg,
                &phases,
                EpsilonSchedule::default(),
                1000 + trial,
                256,
                &[],
            )
            .unwrap();
            for e in 0..20 {
                chosen[e] += t.model_chosen[e];
                total[e] += t.steps[e];
            }
        }
        for e in [1usize, 5, 10, 20] {
            let p = e as f64 / 20.0;
            let n = total[e - 1] as f64;
            let got = chosen[e - 1] as f64 / n;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!(
                (got - p).abs() <= 3.0 * sigma + 1e-9,
                "episode {e}: fraction {got}, want {p} +/- {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn context_eviction_drops_whole_episodes_and_never_fails() {
        let cfg = tiny_cfg();
        let params = init::<f32>(&cfg, 4).unwrap();
        // Capacity much smaller than 30 episodes of traffic forces evictions.
        let phases = [TrialPhase {
            spec: spec3(),
            episodes: 30,
        }];
        let t = run_trial(&params, &cfg, &phases, EpsilonSchedule::default(), 5, 128, &[]).unwrap();
        assert_eq!(t.rewards.len(), 30);
    }

    #[test]
    fn oversized_single_episode_evicts_steps_but_keeps_structure() {
        let mut ctx = ContextBuffer::new(64).unwrap();
        ctx.begin_episode();
        ctx.push(&[Vocab::BOT]);
        let mut tokens = Vec::new();
        obs_block(&mut tokens, 0).unwrap();
        ctx.push(&tokens);
        // Keep appending steps until eviction has to bite into the episode.
        for i in 0..40 {
            let evicted = ctx.ensure_room(STEP_TOKEN_BUDGET);
            let mut step = vec![Vocab::SHI, Vocab::ROLE_ACTION, Vocab::EHI];
            step.push(Vocab::action(Action::ALL[i % 4]));
            step.push(Vocab::EID);
            obs_block(&mut step, (i + 1) % 9).unwrap();
            ctx.push(&step);
            if evicted {
                // Still starts with BOT followed by an observation block.
                assert_eq!(ctx.tokens()[0], Vocab::BOT);
                assert_eq!(ctx.tokens()[1], Vocab::SHI);
                assert_eq!(ctx.tokens()[2], Vocab::ROLE_OBSERVATION);
            }
            assert!(ctx.len() <= ctx.capacity());
        }
        assert_eq!(ctx.episode_count(), 1);
    }

    #[test]
    fn preload_counts_as_episodes_in_context() {
        let cfg = tiny_cfg();
        let params = init::<f32>(&cfg, 6).unwrap();
        let ep = Episode {
            map_id: 0,
            steps: vec![EpisodeStep {
                obs: 0,
                reward: 0.0,
                action: Action::Right,
            }],
            final_obs: 1,
            final_reward: 0.0,
            success: false,
        };
        let phases = [TrialPhase {
            spec: spec3(),
            episodes: 1,
        }];
        let schedule = EpsilonSchedule { warmup_episodes: 0 };
        let t = run_trial(
            &params,
            &cfg,
            &phases,
            schedule,
            1,
            256,
            &[ep.clone(), ep],
        )
        .unwrap();
        assert_eq!(t.rewards.len(), 1);
        // All actions model-chosen under the always-greedy schedule.
        assert_eq!(t.model_chosen[0], t.steps[0]);
    }

    #[test]
    fn aggregate_of_single_trial_is_its_curve() {
        let cfg = tiny_cfg();
        let params = init::<f32>(&cfg, 7).unwrap();
        let out = run_batch(
            &params,
            &cfg,
            &[spec3()],
            5,
            1,
            EpsilonSchedule::default(),
            42,
            256,
        )
        .unwrap();
        assert_eq!(out.aggregate.mean, out.trials[0].rewards);
        assert_eq!(out.aggregate.n, 1);
        assert!(out.aggregate.mean.iter().all(|&m| (0.0..=1.0).contains(&m)));
        let csv = aggregate_csv(&out.aggregate);
        assert!(csv.starts_with("episode,mean_reward,stderr,n\n"));
        assert_eq!(csv.lines().count(), 6);
        let jsonl = trial_records_jsonl(&out.records);
        assert_eq!(jsonl.lines().count(), 1);
        assert!(jsonl.contains("\"spec_hash\""));
    }
}
