//! Role-delimited episode serialization.
//!
//! Every episode is `BOT`-prefixed and `EOT`-terminated. Each block is a
//! five-token group `SHI role EHI payload EID`; a step emits an observation
//! block, a reward block only when the incoming reward is nonzero, then an
//! action block. The Q-head reads at the `EHI` of each action block: that is
//! the last token before the action is emitted, so the causal context there
//! is the full history.

use crate::datagen::{Episode, EpisodeStep, UNKNOWN_MAP};
use crate::env::Action;
use crate::error::{Error, Result};

pub type Token = u16;

pub const CODEC_VERSION: u32 = 1;

/// Fixed, versioned token id assignment. 6 specials + 3 roles + 49 state
/// tokens + 4 action words + 1 reward token = 63 ids.
pub struct Vocab;

impl Vocab {
    pub const PAD: Token = 0;
    pub const BOT: Token = 1;
    pub const EOT: Token = 2;
    pub const SHI: Token = 3;
    pub const EHI: Token = 4;
    pub const EID: Token = 5;
    pub const ROLE_OBSERVATION: Token = 6;
    pub const ROLE_ACTION: Token = 7;
    pub const ROLE_REWARD: Token = 8;
    pub const STATE_BASE: Token = 9;
    pub const STATE_COUNT: Token = 49;
    pub const ACTION_BASE: Token = 58;
    pub const REWARD: Token = 62;
    pub const SIZE: usize = 63;

    pub fn state(tile: usize) -> Result<Token> {
        if tile >= Self::STATE_COUNT as usize {
            return Err(Error::Validation(format!(
                "tile {tile} has no state token (max {})",
                Self::STATE_COUNT - 1
            )));
        }
        Ok(Self::STATE_BASE + tile as Token)
    }

    pub fn action(a: Action) -> Token {
        Self::ACTION_BASE + a.index() as Token
    }

    pub fn as_state(token: Token) -> Option<usize> {
        (Self::STATE_BASE..Self::STATE_BASE + Self::STATE_COUNT)
            .contains(&token)
            .then(|| (token - Self::STATE_BASE) as usize)
    }

    pub fn as_action(token: Token) -> Option<Action> {
        (Self::ACTION_BASE..Self::ACTION_BASE + 4)
            .contains(&token)
            .then(|| Action::from_index((token - Self::ACTION_BASE) as usize).unwrap())
    }

    pub fn surface(token: Token) -> String {
        match token {
            Self::PAD => "<|pad|>".to_string(),
            Self::BOT => "<|begin_of_text|>".to_string(),
            Self::EOT => "<|end_of_text|>".to_string(),
            Self::SHI => "<|start_header_id|>".to_string(),
            Self::EHI => "<|end_header_id|>".to_string(),
            Self::EID => "<|eot_id|>".to_string(),
            Self::ROLE_OBSERVATION => "observation".to_string(),
            Self::ROLE_ACTION => "action".to_string(),
            Self::ROLE_REWARD => "reward".to_string(),
            Self::REWARD => "1.0".to_string(),
            t => {
                if let Some(tile) = Self::as_state(t) {
                    tile.to_string()
                } else if let Some(a) = Self::as_action(t) {
                    a.word().to_string()
                } else {
                    format!("<unknown:{t}>")
                }
            }
        }
    }

    /// Debug export: one `id<TAB>surface` line per token id.
    pub fn table_text() -> String {
        (0..Self::SIZE as Token)
            .map(|t| format!("{t}\t{}\n", Self::surface(t)))
            .collect()
    }
}

/// Where an action was taken inside a token stream, with enough metadata to
/// build Bellman targets without re-reading the episode structs.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionPosition {
    /// Index of the action block's EHI token (the Q-head read position).
    pub pos: usize,
    pub action: Action,
    /// Episode ordinal within this stream.
    pub episode_index: usize,
    /// True for the last action of its episode (terminated or truncated).
    pub is_terminal: bool,
    /// Environment reward received after this action.
    pub reward_after: f64,
    /// Observation tile the agent saw when choosing this action.
    pub obs_tile: usize,
}

/// Token ids plus the action-position index and per-token loss mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub action_positions: Vec<ActionPosition>,
    pub loss_mask: Vec<u8>,
}

/// One entry per action position, aligned with the Bellman target rule:
/// non-terminal actions bootstrap from the next action position of the same
/// episode; terminal actions regress to the reward alone.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTargetEntry {
    pub pos: usize,
    pub next_pos: Option<usize>,
    pub reward_after: f64,
    pub is_terminal: bool,
    pub action: Action,
    pub obs_tile: usize,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends another stream, shifting its positions and episode indices.
    pub fn extend(&mut self, other: &TokenStream) {
        let offset = self.tokens.len();
        let ep_offset = self
            .action_positions
            .last()
            .map(|ap| ap.episode_index + 1)
            .unwrap_or(0);
        self.tokens.extend_from_slice(&other.tokens);
        self.loss_mask.extend_from_slice(&other.loss_mask);
        self.action_positions
            .extend(other.action_positions.iter().map(|ap| ActionPosition {
                pos: ap.pos + offset,
                episode_index: ap.episode_index + ep_offset,
                ..ap.clone()
            }));
    }

    /// Re-derives the stream metadata from raw tokens (used when loading
    /// token files from disk). Inverse of serialization by construction.
    pub fn from_tokens(tokens: Vec<Token>) -> Result<TokenStream> {
        let (_, positions, mask) = parse_stream(&tokens)?;
        Ok(TokenStream {
            tokens,
            action_positions: positions,
            loss_mask: mask,
        })
    }
}

fn push_block(tokens: &mut Vec<Token>, role: Token, payload: Token) {
    tokens.extend_from_slice(&[Vocab::SHI, role, Vocab::EHI, payload, Vocab::EID]);
}

/// Serializes one episode. The action-prediction position of step `t` is the
/// EHI of its action block.
pub fn encode_episode(ep: &Episode) -> Result<TokenStream> {
    let mut tokens = Vec::with_capacity(ep.steps.len() * 10 + 12);
    let mut positions = Vec::with_capacity(ep.steps.len());
    tokens.push(Vocab::BOT);
    let n = ep.steps.len();
    for (i, step) in ep.steps.iter().enumerate() {
        push_block(&mut tokens, Vocab::ROLE_OBSERVATION, Vocab::state(step.obs)?);
        if step.reward != 0.0 {
            push_block(&mut tokens, Vocab::ROLE_REWARD, Vocab::REWARD);
        }
        let ehi_pos = tokens.len() + 2;
        push_block(&mut tokens, Vocab::ROLE_ACTION, Vocab::action(step.action));
        let reward_after = if i + 1 < n {
            ep.steps[i + 1].reward
        } else {
            ep.final_reward
        };
        positions.push(ActionPosition {
            pos: ehi_pos,
            action: step.action,
            episode_index: 0,
            is_terminal: i + 1 == n,
            reward_after,
            obs_tile: step.obs,
        });
    }
    push_block(
        &mut tokens,
        Vocab::ROLE_OBSERVATION,
        Vocab::state(ep.final_obs)?,
    );
    if ep.final_reward != 0.0 {
        push_block(&mut tokens, Vocab::ROLE_REWARD, Vocab::REWARD);
    }
    tokens.push(Vocab::EOT);
    let mut loss_mask = vec![0u8; tokens.len()];
    for ap in &positions {
        loss_mask[ap.pos] = 1;
    }
    Ok(TokenStream {
        tokens,
        action_positions: positions,
        loss_mask,
    })
}

/// Parses concatenated episodes back out of a token stream. A PAD suffix is
/// allowed; PAD anywhere else is an error.
pub fn decode(tokens: &[Token]) -> Result<Vec<Episode>> {
    parse_stream(tokens).map(|(eps, _, _)| eps)
}

/// Builds the per-action bootstrap layout for a stream: each non-terminal
/// action points at the next action position of the same episode.
pub fn action_targets_layout(ts: &TokenStream) -> Vec<ActionTargetEntry> {
    let aps = &ts.action_positions;
    aps.iter()
        .enumerate()
        .map(|(i, ap)| {
            let next_pos = if ap.is_terminal {
                None
            } else {
                aps.get(i + 1)
                    .filter(|n| n.episode_index == ap.episode_index)
                    .map(|n| n.pos)
            };
            ActionTargetEntry {
                pos: ap.pos,
                next_pos,
                reward_after: ap.reward_after,
                is_terminal: ap.is_terminal,
                action: ap.action,
                obs_tile: ap.obs_tile,
            }
        })
        .collect()
}

struct Parser<'a> {
    tokens: &'a [Token],
    at: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.at,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.at).copied()
    }

    fn next(&mut self, what: &str) -> Result<Token> {
        let t = self
            .peek()
            .ok_or_else(|| self.err(format!("stream ended, expected {what}")))?;
        self.at += 1;
        Ok(t)
    }

    fn expect(&mut self, token: Token, what: &str) -> Result<()> {
        let got = self.next(what)?;
        if got != token {
            self.at -= 1;
            return Err(self.err(format!(
                "expected {what} ({}), found {}",
                Vocab::surface(token),
                Vocab::surface(got)
            )));
        }
        Ok(())
    }

    /// One `SHI role EHI payload EID` block. Returns (role, payload,
    /// payload EHI position).
    fn block(&mut self) -> Result<(Token, Token, usize)> {
        self.expect(Vocab::SHI, "block start SHI")?;
        let role = self.next("role token")?;
        if !matches!(
            role,
            Vocab::ROLE_OBSERVATION | Vocab::ROLE_ACTION | Vocab::ROLE_REWARD
        ) {
            self.at -= 1;
            return Err(self.err(format!("expected a role, found {}", Vocab::surface(role))));
        }
        let ehi_pos = self.at;
        self.expect(Vocab::EHI, "EHI")?;
        let payload = self.next("block payload")?;
        let valid = match role {
            Vocab::ROLE_OBSERVATION => Vocab::as_state(payload).is_some(),
            Vocab::ROLE_ACTION => Vocab::as_action(payload).is_some(),
            _ => payload == Vocab::REWARD,
        };
        if !valid {
            self.at -= 1;
            return Err(self.err(format!(
                "payload {} does not match role {}",
                Vocab::surface(payload),
                Vocab::surface(role)
            )));
        }
        self.expect(Vocab::EID, "EID")?;
        Ok((role, payload, ehi_pos))
    }
}

fn parse_stream(tokens: &[Token]) -> Result<(Vec<Episode>, Vec<ActionPosition>, Vec<u8>)> {
    let mut p = Parser { tokens, at: 0 };
    let mut episodes = Vec::new();
    let mut positions: Vec<ActionPosition> = Vec::new();
    let mut mask = vec![0u8; tokens.len()];

    while let Some(t) = p.peek() {
        if t == Vocab::PAD {
            if let Some(bad) = tokens[p.at..].iter().position(|&x| x != Vocab::PAD) {
                p.at += bad;
                return Err(p.err("non-PAD token after padding began"));
            }
            break;
        }
        p.expect(Vocab::BOT, "BOT")?;
        let episode_index = episodes.len();
        let mut steps: Vec<EpisodeStep> = Vec::new();
        let mut ep_positions: Vec<(usize, Action, usize)> = Vec::new();
        let (final_obs, final_reward) = loop {
            let (role, payload, _) = p.block()?;
            if role != Vocab::ROLE_OBSERVATION {
                p.at -= 5;
                return Err(p.err(format!(
                    "expected observation block, found role {}",
                    Vocab::surface(role)
                )));
            }
            let obs = Vocab::as_state(payload).expect("validated by block()");
            let mut reward = 0.0;
            if p.peek() == Some(Vocab::SHI) {
                // Look ahead at the role to distinguish reward/action blocks.
                let save = p.at;
                let (role, _, _) = p.block()?;
                if role == Vocab::ROLE_REWARD {
                    reward = 1.0;
                } else {
                    p.at = save;
                }
            }
            match p.peek() {
                Some(Vocab::EOT) => {
                    p.at += 1;
                    break (obs, reward);
                }
                Some(Vocab::SHI) => {
                    let (role, payload, ehi_pos) = p.block()?;
                    if role != Vocab::ROLE_ACTION {
                        p.at -= 5;
                        return Err(p.err(format!(
                            "expected action block or EOT, found role {}",
                            Vocab::surface(role)
                        )));
                    }
                    let action = Vocab::as_action(payload).expect("validated by block()");
                    steps.push(EpisodeStep {
                        obs,
                        reward,
                        action,
                    });
                    ep_positions.push((ehi_pos, action, obs));
                }
                _ => return Err(p.err("expected action block or EOT")),
            }
        };
        let n = ep_positions.len();
        for (i, (pos, action, obs_tile)) in ep_positions.into_iter().enumerate() {
            let reward_after = if i + 1 < n {
                steps[i + 1].reward
            } else {
                final_reward
            };
            mask[pos] = 1;
            positions.push(ActionPosition {
                pos,
                action,
                episode_index,
                is_terminal: i + 1 == n,
                reward_after,
                obs_tile,
            });
        }
        episodes.push(Episode {
            map_id: UNKNOWN_MAP,
            steps,
            final_obs,
            final_reward,
            success: final_reward == 1.0,
        });
    }
    Ok((episodes, positions, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_map, reset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_step_goal_episode() -> Episode {
        Episode {
            map_id: 0,
            steps: vec![EpisodeStep {
                obs: 0,
                reward: 0.0,
                action: Action::Right,
            }],
            final_obs: 1,
            final_reward: 1.0,
            success: true,
        }
    }

    #[test]
    fn one_step_episode_layout_is_frozen() {
        let ts = encode_episode(&one_step_goal_episode()).unwrap();
        let v = |t: Token| t;
        let expected = vec![
            v(Vocab::BOT),
            Vocab::SHI,
            Vocab::ROLE_OBSERVATION,
            Vocab::EHI,
            Vocab::state(0).unwrap(),
            Vocab::EID,
            Vocab::SHI,
            Vocab::ROLE_ACTION,
            Vocab::EHI,
            Vocab::action(Action::Right),
            Vocab::EID,
            Vocab::SHI,
            Vocab::ROLE_OBSERVATION,
            Vocab::EHI,
            Vocab::state(1).unwrap(),
            Vocab::EID,
            Vocab::SHI,
            Vocab::ROLE_REWARD,
            Vocab::EHI,
            Vocab::REWARD,
            Vocab::EID,
            Vocab::EOT,
        ];
        assert_eq!(ts.tokens, expected);
        assert_eq!(ts.action_positions.len(), 1);
        assert_eq!(ts.action_positions[0].pos, 8);
        assert!(ts.action_positions[0].is_terminal);
        assert_eq!(ts.action_positions[0].reward_after, 1.0);
        assert_eq!(ts.loss_mask.iter().map(|&m| m as usize).sum::<usize>(), 1);
        assert_eq!(ts.loss_mask[8], 1);
    }

    #[test]
    fn zero_reward_transitions_emit_no_reward_block() {
        let ep = Episode {
            map_id: 0,
            steps: vec![
                EpisodeStep {
                    obs: 0,
                    reward: 0.0,
                    action: Action::Down,
                },
                EpisodeStep {
                    obs: 3,
                    reward: 0.0,
                    action: Action::Down,
                },
            ],
            final_obs: 6,
            final_reward: 0.0,
            success: false,
        };
        let ts = encode_episode(&ep).unwrap();
        assert!(!ts.tokens.contains(&Vocab::ROLE_REWARD));
        assert_eq!(ts.tokens.len(), 1 + 2 * 10 + 5 + 1);
    }

    fn random_episode(rng: &mut ChaCha8Rng) -> Episode {
        let spec = generate_map(rng, (3, 5), 0.2).unwrap();
        let (mut state, obs) = reset(&spec);
        let mut steps = Vec::new();
        let mut cur = obs.tile;
        let (final_obs, final_reward) = loop {
            let action = Action::from_index(rng.random_range(0..4)).unwrap();
            let r = state.step(action).unwrap();
            steps.push(EpisodeStep {
                obs: cur,
                reward: 0.0, // frozen lake pays only on entering the goal
                action,
            });
            cur = r.next_obs.tile;
            if r.terminated || r.truncated {
                break (r.next_obs.tile, r.reward);
            }
        };
        Episode {
            map_id: 7,
            steps,
            final_obs,
            final_reward,
            success: final_reward == 1.0,
        }
    }

    #[test]
    fn decode_encode_round_trip_over_random_rollouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let ep = random_episode(&mut rng);
            let ts = encode_episode(&ep).unwrap();
            let back = decode(&ts.tokens).unwrap();
            assert_eq!(back.len(), 1);
            assert!(ep.same_trajectory(&back[0]), "round trip changed episode");
            // Mask marks exactly the action positions.
            let mask_sum: usize = ts.loss_mask.iter().map(|&m| m as usize).sum();
            assert_eq!(mask_sum, ep.steps.len());
            assert!(ts.tokens.iter().all(|&t| (t as usize) < Vocab::SIZE));
            assert!(!ts.tokens.contains(&Vocab::PAD));
            // Action positions strictly increase with >= one block between.
            for w in ts.action_positions.windows(2) {
                assert!(w[1].pos >= w[0].pos + 10);
            }
        }
    }

    #[test]
    fn decode_all_pad_is_empty() {
        assert_eq!(decode(&[Vocab::PAD; 16]).unwrap().len(), 0);
        assert_eq!(decode(&[]).unwrap().len(), 0);
    }

    #[test]
    fn decode_two_concatenated_episodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (a, b) = (random_episode(&mut rng), random_episode(&mut rng));
        let mut ts = encode_episode(&a).unwrap();
        ts.extend(&encode_episode(&b).unwrap());
        let back = decode(&ts.tokens).unwrap();
        assert_eq!(back.len(), 2);
        assert!(a.same_trajectory(&back[0]));
        assert!(b.same_trajectory(&back[1]));
        let layout = action_targets_layout(&ts);
        assert_eq!(layout.len(), a.steps.len() + b.steps.len());
        // No entry bootstraps across the episode boundary.
        for (i, entry) in layout.iter().enumerate() {
            if let Some(np) = entry.next_pos {
                assert_eq!(
                    ts.action_positions[i].episode_index,
                    ts.action_positions[i + 1].episode_index
                );
                assert_eq!(np, ts.action_positions[i + 1].pos);
            }
        }
    }

    #[test]
    fn deleted_eid_is_a_parse_error_with_offset() {
        let ts = encode_episode(&one_step_goal_episode()).unwrap();
        let mut tokens = ts.tokens.clone();
        tokens.remove(5); // the EID that closes the first observation block
        match decode(&tokens) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pad_inside_stream_is_rejected() {
        let ts = encode_episode(&one_step_goal_episode()).unwrap();
        let mut tokens = ts.tokens.clone();
        tokens.insert(0, Vocab::PAD);
        assert!(matches!(decode(&tokens), Err(Error::Parse { .. })));
    }

    #[test]
    fn three_action_layout_matches_hand_enumeration() {
        // Two episodes: 3 actions ending in goal, then 1 action into a hole.
        let ep1 = Episode {
            map_id: 0,
            steps: vec![
                EpisodeStep {
                    obs: 0,
                    reward: 0.0,
                    action: Action::Down,
                },
                EpisodeStep {
                    obs: 3,
                    reward: 0.0,
                    action: Action::Down,
                },
                EpisodeStep {
                    obs: 6,
                    reward: 0.0,
                    action: Action::Right,
                },
            ],
            final_obs: 7,
            final_reward: 1.0,
            success: true,
        };
        let ep2 = Episode {
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
        let mut ts = encode_episode(&ep1).unwrap();
        ts.extend(&encode_episode(&ep2).unwrap());
        let layout = action_targets_layout(&ts);
        // Hand-enumerated: ep1 blocks at 1..6(obs),6..11(act),11..16(obs),
        // 16..21(act),21..26(obs),26..31(act),31..36(obs),36..41(rew),41 EOT.
        let expected = vec![
            ActionTargetEntry {
                pos: 8,
                next_pos: Some(18),
                reward_after: 0.0,
                is_terminal: false,
                action: Action::Down,
                obs_tile: 0,
            },
            ActionTargetEntry {
                pos: 18,
                next_pos: Some(28),
                reward_after: 0.0,
                is_terminal: false,
                action: Action::Down,
                obs_tile: 3,
            },
            ActionTargetEntry {
                pos: 28,
                next_pos: None,
                reward_after: 1.0,
                is_terminal: true,
                action: Action::Right,
                obs_tile: 6,
            },
            ActionTargetEntry {
                pos: 42 + 8,
                next_pos: None,
                reward_after: 0.0,
                is_terminal: true,
                action: Action::Right,
                obs_tile: 0,
            },
        ];
        assert_eq!(layout, expected);
    }

    #[test]
    fn from_tokens_rebuilds_identical_metadata() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let mut ts = encode_episode(&random_episode(&mut rng)).unwrap();
            ts.extend(&encode_episode(&random_episode(&mut rng)).unwrap());
            let rebuilt = TokenStream::from_tokens(ts.tokens.clone()).unwrap();
            assert_eq!(rebuilt, ts);
        }
    }

    #[test]
    fn vocab_table_has_63_distinct_ids() {
        let table = Vocab::table_text();
        assert_eq!(table.lines().count(), 63);
        assert_eq!(Vocab::SIZE, 63);
        assert_eq!(Vocab::REWARD, 62);
        assert_eq!(Vocab::as_state(Vocab::STATE_BASE + 48), Some(48));
        assert_eq!(Vocab::as_state(Vocab::STATE_BASE + 49), None);
    }
}
