//! Robot state, the Align/Escape/Follow mode machine and hierarchical indexing.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bounds, Vec2};
use crate::world::Observation;

/// Two threat positions closer than this are the same threat.
pub const THREAT_MATCH_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwarmError {
    #[error("robot {robot}: commanded speed {speed} exceeds the limit {max_speed}")]
    SpeedLimit {
        robot: RobotId,
        speed: f64,
        max_speed: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RobotId(pub usize);

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Align,
    Escape,
    Follow,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Align => "align",
            Mode::Escape => "escape",
            Mode::Follow => "follow",
        }
    }

    /// Whether `self -> to` is an edge of the mode graph.
    pub fn can_transition_to(self, to: Mode) -> bool {
        matches!(
            (self, to),
            (Mode::Align, Mode::Escape)
                | (Mode::Align, Mode::Follow)
                | (Mode::Follow, Mode::Escape)
                | (Mode::Escape, Mode::Follow)
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionCause {
    ThreatDetected,
    NeighborEscaping,
    NewThreatSwap,
}

impl TransitionCause {
    pub fn as_str(self) -> &'static str {
        match self {
            TransitionCause::ThreatDetected => "threat_detected",
            TransitionCause::NeighborEscaping => "neighbor_escaping",
            TransitionCause::NewThreatSwap => "new_threat_swap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeEvent {
    pub robot: RobotId,
    pub from: Mode,
    pub to: Mode,
    pub cause: TransitionCause,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub id: RobotId,
    pub position: Vec2,
    /// Radians.
    pub heading: f64,
    pub speed: f64,
    pub mode: Mode,
    pub hierarchy: Option<u32>,
    pub alpha_attract: f64,
    pub alpha_repulse: f64,
    /// Threat positions this robot has detected itself; never shrinks.
    pub known_threats: Vec<Vec2>,
    /// Neighbor modes from the previous observation, sorted by id.
    pub seen_modes: Vec<(RobotId, Mode)>,
}

impl RobotState {
    pub fn new(id: RobotId, position: Vec2) -> Self {
        Self {
            id,
            position,
            heading: 0.0,
            speed: 0.0,
            mode: Mode::Align,
            hierarchy: None,
            alpha_attract: 0.5,
            alpha_repulse: 0.5,
            known_threats: Vec::new(),
            seen_modes: Vec::new(),
        }
    }

    pub fn knows_threat(&self, position: Vec2) -> bool {
        self.known_threats
            .iter()
            .any(|t| t.distance(position) <= THREAT_MATCH_TOLERANCE)
    }

    fn previously_seen(&self, id: RobotId) -> Option<Mode> {
        self.seen_modes
            .binary_search_by_key(&id, |&(i, _)| i)
            .ok()
            .map(|i| self.seen_modes[i].1)
    }
}

/// Outcome of one mode update for one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub mode: Mode,
    pub events: Vec<ModeEvent>,
    /// Threats detected for the first time this tick.
    pub new_threats: Vec<Vec2>,
}

/// Applies the mode rules in priority order:
///
/// 1. an unknown threat in view sends Align/Follow robots to Escape (an
///    Escape robot records it and stays);
/// 2. an Escape robot that sees no threat but watches a neighbor switch
///    from Follow to Escape hands over and becomes Follow;
/// 3. an Align robot that sees any Escape/Follow neighbor becomes Follow.
pub fn transition_mode(robot: &RobotState, obs: &Observation, tick: u64) -> Transition {
    let mut new_threats: Vec<Vec2> = Vec::new();
    for &t in &obs.threats_seen {
        let seen_before = robot.knows_threat(t)
            || new_threats
                .iter()
                .any(|n| n.distance(t) <= THREAT_MATCH_TOLERANCE);
        if !seen_before {
            new_threats.push(t);
        }
    }

    let event = |to: Mode, cause: TransitionCause| ModeEvent {
        robot: robot.id,
        from: robot.mode,
        to,
        cause,
        tick,
    };

    let next = match robot.mode {
        Mode::Align | Mode::Follow if !new_threats.is_empty() => {
            Some((Mode::Escape, TransitionCause::ThreatDetected))
        }
        Mode::Escape if new_threats.is_empty() && obs.threats_seen.is_empty() => {
            let handover = obs.neighbors.iter().any(|n| {
                n.mode == Mode::Escape && robot.previously_seen(n.id) == Some(Mode::Follow)
            });
            handover.then_some((Mode::Follow, TransitionCause::NewThreatSwap))
        }
        Mode::Align => obs
            .neighbors
            .iter()
            .any(|n| matches!(n.mode, Mode::Escape | Mode::Follow))
            .then_some((Mode::Follow, TransitionCause::NeighborEscaping)),
        _ => None,
    };

    match next {
        Some((to, cause)) => Transition {
            mode: to,
            events: vec![event(to, cause)],
            new_threats,
        },
        None => Transition {
            mode: robot.mode,
            events: Vec::new(),
            new_threats,
        },
    }
}

/// Hierarchical indices: Escape robots are 1, every other robot is one
/// more than the smallest index it can see, iterated synchronously to a
/// fixed point. `observations[i]` belongs to `robots[i]`.
pub fn assign_hierarchy(robots: &[RobotState], observations: &[Observation]) -> Vec<Option<u32>> {
    assert_eq!(robots.len(), observations.len());
    let index_of = |id: RobotId| robots.iter().position(|r| r.id == id);
    let adjacency: Vec<Vec<usize>> = observations
        .iter()
        .map(|o| o.neighbors.iter().filter_map(|n| index_of(n.id)).collect())
        .collect();

    let mut current: Vec<Option<u32>> = robots
        .iter()
        .map(|r| (r.mode == Mode::Escape).then_some(1))
        .collect();
    for _ in 0..robots.len() {
        let next: Vec<Option<u32>> = robots
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.mode == Mode::Escape {
                    return Some(1);
                }
                adjacency[i]
                    .iter()
                    .filter_map(|&j| current[j])
                    .min()
                    .map(|h| h + 1)
            })
            .collect();
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Omnidirectional motion: the heading is applied instantly and the new
/// position is clamped to the workspace.
pub fn kinematic_step(
    robot: &RobotState,
    heading: f64,
    speed: f64,
    dt: f64,
    max_speed: f64,
    bounds: &Bounds,
) -> Result<RobotState, SwarmError> {
    if !(0.0..=max_speed).contains(&speed) {
        return Err(SwarmError::SpeedLimit {
            robot: robot.id,
            speed,
            max_speed,
        });
    }
    let mut next = robot.clone();
    if speed > 0.0 {
        next.position = bounds.clamp(robot.position + Vec2::from_angle(heading) * (speed * dt));
    }
    next.heading = heading;
    next.speed = speed;
    Ok(next)
}

/// Mean distance to all observed neighbors, `None` when there are none.
pub fn avr_distance(robot: &RobotState, obs: &Observation) -> Option<f64> {
    if obs.neighbors.is_empty() {
        return None;
    }
    let total: f64 = obs
        .neighbors
        .iter()
        .map(|n| n.position.distance(robot.position))
        .sum();
    Some(total / obs.neighbors.len() as f64)
}
