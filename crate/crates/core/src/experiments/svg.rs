//! Deterministic SVG rendering: trajectory boards in the style of the
//! Frozen Lake figures, and reward curves with standard-error bands.

use crate::datagen::Episode;
use crate::env::MapSpec;
use crate::error::{Error, Result};
use std::fmt::Write as _;

const CELL: usize = 40;
const MARGIN: usize = 20;
const PALETTE: [&str; 4] = ["#0b6e4f", "#2b4162", "#fa9f42", "#721817"];

/// Validates that an episode is playable on the map: tiles in range, each
/// transition consistent with the grid dynamics, no action taken from a
/// hole, and reward 1.0 exactly when the final tile is the goal.
pub fn validate_episode(spec: &MapSpec, ep: &Episode) -> Result<()> {
    let tiles = spec.tiles();
    let mut chain: Vec<usize> = ep.steps.iter().map(|s| s.obs).collect();
    chain.push(ep.final_obs);
    if let Some(&bad) = chain.iter().find(|&&t| t >= tiles) {
        return Err(Error::Validation(format!(
            "episode tile {bad} out of range for {tiles}-tile map"
        )));
    }
    for (i, step) in ep.steps.iter().enumerate() {
        if spec.is_hole(step.obs) {
            return Err(Error::Validation(format!(
                "episode acts from hole tile {}",
                step.obs
            )));
        }
        let next = chain[i + 1];
        if spec.step_tile(step.obs, step.action) != next {
            return Err(Error::Validation(format!(
                "transition {} -{:?}-> {} is not grid-consistent",
                step.obs, step.action, next
            )));
        }
    }
    if (ep.final_reward == 1.0) != (ep.final_obs == spec.goal()) {
        return Err(Error::Validation(
            "final reward inconsistent with final tile".to_string(),
        ));
    }
    Ok(())
}

fn center(spec: &MapSpec, tile: usize) -> (usize, usize) {
    let (row, col) = (tile / spec.width(), tile % spec.width());
    (
        MARGIN + col * CELL + CELL / 2,
        MARGIN + row * CELL + CELL / 2,
    )
}

/// Grid with start/goal/holes plus the episode's stepped path. Byte-stable
/// for identical inputs.
pub fn render_trajectory(spec: &MapSpec, ep: &Episode) -> Result<String> {
    validate_episode(spec, ep)?;
    let (w, h) = (spec.width(), spec.height());
    let (vw, vh) = (2 * MARGIN + w * CELL, 2 * MARGIN + h * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{vw}" height="{vh}" viewBox="0 0 {vw} {vh}">"##
    );
    let _ = writeln!(
        s,
        r##"<defs><marker id="arrow" viewBox="0 0 10 10" refX="8" refY="5" markerWidth="5" markerHeight="5" orient="auto-start-reverse"><path d="M 0 0 L 10 5 L 0 10 z" fill="#0b6e4f"/></marker></defs>"##
    );
    for tile in 0..spec.tiles() {
        let (row, col) = (tile / w, tile % w);
        let fill = if tile == spec.goal() {
            "#ffd700"
        } else if spec.is_hole(tile) {
            "#2b4162"
        } else if tile == spec.start() {
            "#a8d5a2"
        } else {
            "#e8f0f7"
        };
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#888888"/>"##,
            MARGIN + col * CELL,
            MARGIN + row * CELL
        );
        let (cx, cy) = center(spec, tile);
        let _ = writeln!(
            s,
            r##"<text x="{cx}" y="{}" font-size="9" fill="#555555" text-anchor="middle">{tile}</text>"##,
            cy + CELL / 2 - 6
        );
    }
    if !ep.steps.is_empty() {
        let mut chain: Vec<usize> = ep.steps.iter().map(|st| st.obs).collect();
        chain.push(ep.final_obs);
        for win in chain.windows(2) {
            let (x1, y1) = center(spec, win[0]);
            let (x2, y2) = center(spec, win[1]);
            if win[0] == win[1] {
                // Edge bounce: mark with a small circle instead of an arrow.
                let _ = writeln!(
                    s,
                    r##"<circle cx="{x1}" cy="{y1}" r="4" fill="none" stroke="#0b6e4f" stroke-width="2"/>"##
                );
            } else {
                let _ = writeln!(
                    s,
                    r##"<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="#0b6e4f" stroke-width="2.5" stroke-opacity="0.85" marker-end="url(#arrow)"/>"##
                );
            }
        }
        let (sx, sy) = center(spec, chain[0]);
        let _ = writeln!(s, r##"<circle cx="{sx}" cy="{sy}" r="5" fill="#0b6e4f"/>"##);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One named curve with optional standard-error band.
pub struct CurveSeries<'a> {
    pub label: String,
    pub mean: &'a [f64],
    pub stderr: Option<&'a [f64]>,
}

/// Reward-vs-episode line plot, y fixed to [0,1]. `switch_at` draws the
/// non-stationary experiment's dashed environment-change marker.
pub fn render_curves(title: &str, series: &[CurveSeries<'_>], switch_at: Option<usize>) -> String {
    let (vw, vh) = (480usize, 320usize);
    let (left, right, top, bottom) = (50usize, 20usize, 36usize, 40usize);
    let pw = vw - left - right;
    let ph = vh - top - bottom;
    let n = series.iter().map(|s| s.mean.len()).max().unwrap_or(1).max(2);
    let x_of = |e: f64| left as f64 + (e - 1.0) / (n as f64 - 1.0) * pw as f64;
    let y_of = |v: f64| top as f64 + (1.0 - v.clamp(0.0, 1.0)) * ph as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{vw}" height="{vh}" viewBox="0 0 {vw} {vh}">"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{}" y="20" font-size="14" text-anchor="middle" font-family="sans-serif">{title}</text>"##,
        vw / 2
    );
    // Gridlines and y ticks.
    for i in 0..=5 {
        let v = i as f64 * 0.2;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#cccccc" stroke-dasharray="4,3"/>"##,
            left + pw
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{:.1}" font-size="10" text-anchor="end" font-family="sans-serif">{v:.1}</text>"##,
            left - 6,
            y + 3.5
        );
    }
    // X ticks at 1 and every 10.
    let mut xticks = vec![1usize];
    xticks.extend((10..=n).step_by(10));
    for &e in &xticks {
        let x = x_of(e as f64);
        let _ = writeln!(
            s,
            r##"<text x="{x:.1}" y="{}" font-size="10" text-anchor="middle" font-family="sans-serif">{e}</text>"##,
            top + ph + 16
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-size="11" text-anchor="middle" font-family="sans-serif">Episode</text>"##,
        left + pw / 2,
        vh - 8
    );
    let _ = writeln!(
        s,
        r##"<text x="14" y="{}" font-size="11" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 14 {})">Cumulative Reward</text>"##,
        top + ph / 2,
        top + ph / 2
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>"##
    );

    if let Some(sw) = switch_at {
        let x = x_of(sw as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{}" stroke="#000000" stroke-width="1.5" stroke-dasharray="6,4"/>"##,
            top + ph
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{}" font-size="10" font-family="sans-serif">Environment Change</text>"##,
            x + 4.0,
            top + 12
        );
    }

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(err) = ser.stderr {
            let mut band = String::new();
            for (e, (m, se)) in ser.mean.iter().zip(err).enumerate() {
                let _ = write!(band, "{:.1},{:.1} ", x_of(e as f64 + 1.0), y_of(m + se));
            }
            for (e, (m, se)) in ser.mean.iter().zip(err).enumerate().rev() {
                let _ = write!(band, "{:.1},{:.1} ", x_of(e as f64 + 1.0), y_of(m - se));
            }
            let _ = writeln!(
                s,
                r##"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"##,
                band.trim_end()
            );
        }
        let pts: Vec<String> = ser
            .mean
            .iter()
            .enumerate()
            .map(|(e, m)| format!("{:.1},{:.1}", x_of(e as f64 + 1.0), y_of(*m)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"##,
            pts.join(" ")
        );
        let ly = top + 14 + i * 14;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"##,
            left + 8,
            left + 28
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-size="10" font-family="sans-serif">{}</text>"##,
            left + 32,
            ly + 3,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::EpisodeStep;
    use crate::env::Action;

    fn spec() -> MapSpec {
        MapSpec::new(3, 3, 0, 8, [4]).unwrap()
    }

    fn episode(steps: Vec<(usize, Action)>, final_obs: usize, final_reward: f64) -> Episode {
        Episode {
            map_id: 0,
            steps: steps
                .into_iter()
                .map(|(obs, action)| EpisodeStep {
                    obs,
                    reward: 0.0,
                    action,
                })
                .collect(),
            final_obs,
            final_reward,
            success: final_reward == 1.0,
        }
    }

    #[test]
    fn empty_episode_renders_grid_only() {
        let ep = episode(vec![], 0, 0.0);
        let svg = render_trajectory(&spec(), &ep).unwrap();
        assert!(svg.contains("<rect"));
        assert!(!svg.contains("<line x1"));
    }

    #[test]
    fn one_step_episode_has_single_arrow() {
        let ep = episode(vec![(0, Action::Right)], 1, 0.0);
        let svg = render_trajectory(&spec(), &ep).unwrap();
        assert_eq!(svg.matches("marker-end").count(), 1);
    }

    #[test]
    fn rendering_is_byte_deterministic() {
        let ep = episode(vec![(0, Action::Down), (3, Action::Down), (6, Action::Right), (7, Action::Right)], 8, 1.0);
        let a = render_trajectory(&spec(), &ep).unwrap();
        let b = render_trajectory(&spec(), &ep).unwrap();
        assert_eq!(a.into_bytes(), b.into_bytes());
    }

    #[test]
    fn inconsistent_episode_is_rejected() {
        // Claims to move 0 -> 5, which no single action does.
        let bad = Episode {
            map_id: 0,
            steps: vec![EpisodeStep {
                obs: 0,
                reward: 0.0,
                action: Action::Right,
            }],
            final_obs: 5,
            final_reward: 0.0,
            success: false,
        };
        assert!(render_trajectory(&spec(), &bad).is_err());
        // Acting from a hole is rejected too.
        let from_hole = episode(vec![(4, Action::Right)], 5, 0.0);
        assert!(render_trajectory(&spec(), &from_hole).is_err());
    }

    #[test]
    fn curves_svg_contains_series_and_marker()
    {
        let mean = vec![0.1, 0.3, 0.5, 0.7];
        let err = vec![0.05; 4];
        let svg = render_curves(
            "Test",
            &[CurveSeries {
                label: "alpha = 0.1".to_string(),
                mean: &mean,
                stderr: Some(&err),
            }],
            Some(3),
        );
        assert!(svg.contains("polyline"));
        assert!(svg.contains("polygon"));
        assert!(svg.contains("Environment Change"));
        assert!(svg.contains("alpha = 0.1"));
    }
}
