//! Virtual forces read off shunting fields.
//!
//! Attraction steers toward the neighboring cell of highest activity in a
//! field excited at the leader's cell; repulsion steers toward the
//! neighboring cell of lowest non-negative activity in a field excited at
//! threats or crowding neighbors. Obstacle cells carry negative activity and
//! are never selected.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bounds, Vec2};
use crate::grid::{ActivityGrid, Cell, GridError, GridSpec, ShuntingParams};
use crate::swarm::{avr_distance, RobotState};
use crate::world::{grid_to_world, world_to_grid, NeighborSighting, Observation, WorldError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForceError {
    #[error("no indexed neighbor in view to follow")]
    NoLeader,
    #[error("every neighbor of cell {0} has negative activity")]
    BoxedIn(Cell),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceParams {
    #[serde(rename = "C_A")]
    pub attract_gain: f64,
    #[serde(rename = "C_R")]
    pub repulse_gain: f64,
    /// Desired spacing between neighbors.
    #[serde(rename = "R_d")]
    pub desired_distance: f64,
    /// Threat distance at which an escape is complete.
    #[serde(rename = "d_s")]
    pub safe_distance: f64,
    /// Adaptation stride.
    #[serde(rename = "U")]
    pub stride: f64,
    /// Half-width, in cells, of a Follow robot's local field.
    pub window_radius: usize,
    /// Scale applied to the summed negative neighbor activity before it is
    /// added to the average neighbor distance.
    #[serde(rename = "k_act")]
    pub activity_scale: f64,
}

impl Default for ForceParams {
    fn default() -> Self {
        Self {
            attract_gain: 1.0,
            repulse_gain: 1.0,
            desired_distance: 3.0,
            safe_distance: 20.0,
            stride: 0.05,
            window_radius: 8,
            activity_scale: 10.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid force parameter {name} = {value}: {reason}")]
pub struct ForceParamError {
    pub name: &'static str,
    pub value: f64,
    pub reason: String,
}

impl ForceParams {
    /// `min_window` is the window radius needed to cover the sensing range.
    pub fn validate(&self, min_window: usize) -> Result<(), ForceParamError> {
        let err = |name, value, reason: &str| {
            Err(ForceParamError {
                name,
                value,
                reason: reason.to_string(),
            })
        };
        if !(self.attract_gain > 0.0) {
            return err("C_A", self.attract_gain, "must be positive");
        }
        if !(self.repulse_gain > 0.0) {
            return err("C_R", self.repulse_gain, "must be positive");
        }
        if !(self.desired_distance > 0.0) {
            return err("R_d", self.desired_distance, "must be positive");
        }
        if !(self.safe_distance > self.desired_distance) {
            return err("d_s", self.safe_distance, "must exceed R_d");
        }
        if !(self.stride > 0.0 && self.stride < 0.5) {
            return err("U", self.stride, "must lie in (0, 0.5)");
        }
        if self.window_radius < min_window {
            return err(
                "window_radius",
                self.window_radius as f64,
                &format!("must be at least {min_window} to cover the sensing range"),
            );
        }
        if !(self.activity_scale >= 0.0 && self.activity_scale.is_finite()) {
            return err("k_act", self.activity_scale, "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceKind {
    Attractive,
    RepulsiveFollow,
    RepulsiveEscape,
    Resultant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualForce {
    pub vector: Vec2,
    pub kind: ForceKind,
}

impl VirtualForce {
    pub fn zero(kind: ForceKind) -> Self {
        Self {
            vector: Vec2::ZERO,
            kind,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.vector.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Attractive,
    Repulsive,
}

/// How a Follow robot updates its attraction/repulsion balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Average neighbor distance plus nearby negative activity.
    Neurodynamic,
    /// Average neighbor distance only.
    DistanceBased,
    /// Weights never change.
    FixedRatio,
}

impl AdaptationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationMode::Neurodynamic => "neurodynamic",
            AdaptationMode::DistanceBased => "distance_based",
            AdaptationMode::FixedRatio => "fixed_ratio",
        }
    }
}

impl std::str::FromStr for AdaptationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neurodynamic" => Ok(AdaptationMode::Neurodynamic),
            "distance_based" => Ok(AdaptationMode::DistanceBased),
            "fixed_ratio" => Ok(AdaptationMode::FixedRatio),
            other => Err(format!(
                "unknown adaptation mode '{other}' (expected neurodynamic, distance_based or fixed_ratio)"
            )),
        }
    }
}

/// A shunting field over a rectangular window of the workspace lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalField {
    origin: Cell,
    grid: ActivityGrid,
}

impl LocalField {
    /// Window of half-width `radius` around `center`, clipped to the
    /// workspace lattice; `None` covers the whole lattice.
    pub fn new(world: &GridSpec, center: Cell, radius: Option<usize>) -> Self {
        let (origin, spec) = match radius {
            None => (Cell::new(0, 0), *world),
            Some(r) => {
                let c0 = center.col.saturating_sub(r);
                let r0 = center.row.saturating_sub(r);
                let c1 = (center.col + r).min(world.width - 1);
                let r1 = (center.row + r).min(world.height - 1);
                (
                    Cell::new(c0, r0),
                    GridSpec {
                        width: (c1 - c0 + 1).max(2),
                        height: (r1 - r0 + 1).max(2),
                        spacing: world.spacing,
                    },
                )
            }
        };
        // A clipped window may have been widened to the minimum lattice size.
        let origin = Cell::new(
            origin.col.min(world.width - spec.width),
            origin.row.min(world.height - spec.height),
        );
        Self {
            origin,
            grid: ActivityGrid::new(spec),
        }
    }

    pub fn grid(&self) -> &ActivityGrid {
        &self.grid
    }

    pub fn origin(&self) -> Cell {
        self.origin
    }

    pub fn to_local(&self, cell: Cell) -> Option<Cell> {
        let col = cell.col.checked_sub(self.origin.col)?;
        let row = cell.row.checked_sub(self.origin.row)?;
        let local = Cell::new(col, row);
        self.grid.spec().contains(local).then_some(local)
    }

    pub fn to_world(&self, local: Cell) -> Cell {
        Cell::new(local.col + self.origin.col, local.row + self.origin.row)
    }

    pub fn activity(&self, cell: Cell) -> Option<f64> {
        self.to_local(cell).map(|c| self.grid.activity(c))
    }

    /// Stamps the cells that fall inside the window; the rest are ignored.
    pub fn stamp(&mut self, sources: &[Cell], obstacles: &[Cell], magnitude: f64) -> Result<(), GridError> {
        let s: Vec<Cell> = sources.iter().filter_map(|&c| self.to_local(c)).collect();
        let o: Vec<Cell> = obstacles.iter().filter_map(|&c| self.to_local(c)).collect();
        self.grid.stamp_inputs(&s, &o, magnitude)
    }

    pub fn relax(&mut self, params: &ShuntingParams) -> Result<f64, GridError> {
        self.grid.relax(params)
    }

    fn local(&self, cell: Cell) -> Result<Cell, ForceError> {
        self.to_local(cell).ok_or_else(|| {
            ForceError::Grid(GridError::OutOfGrid {
                cell,
                width: self.grid.spec().width,
                height: self.grid.spec().height,
            })
        })
    }

    pub fn command_max(&self, cell: Cell) -> Result<Cell, ForceError> {
        command_neuron_max(&self.grid, self.local(cell)?).map(|c| self.to_world(c))
    }

    pub fn command_min(&self, cell: Cell) -> Result<Cell, ForceError> {
        command_neuron_min(&self.grid, self.local(cell)?).map(|c| self.to_world(c))
    }

    pub fn ranked(&self, cell: Cell, kind: FieldKind) -> Result<Vec<Cell>, ForceError> {
        let local = self.local(cell)?;
        let ranked = match kind {
            FieldKind::Attractive => ranked_max(&self.grid, local)?,
            FieldKind::Repulsive => ranked_min(&self.grid, local)?,
        };
        Ok(ranked.into_iter().map(|c| self.to_world(c)).collect())
    }

    /// The neighbor with the highest activity, negative or not.
    pub fn least_inhibited(&self, cell: Cell) -> Option<(Cell, f64)> {
        let local = self.to_local(cell)?;
        self.grid
            .spec()
            .neighbors(local)
            .map(|c| (self.to_world(c), self.grid.activity(c)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| (b.0.row, b.0.col).cmp(&(a.0.row, a.0.col))))
    }

    /// Sum of `[x]-` over the lateral neighbors of `cell`.
    pub fn negative_neighbor_activity(&self, cell: Cell) -> f64 {
        match self.to_local(cell) {
            Some(local) => self
                .grid
                .spec()
                .neighbors(local)
                .map(|n| (-self.grid.activity(n)).max(0.0))
                .sum(),
            None => 0.0,
        }
    }
}

/// Everything a robot needs to turn its observation into fields.
#[derive(Debug, Clone, Copy)]
pub struct FieldContext<'a> {
    pub bounds: &'a Bounds,
    pub grid: &'a GridSpec,
    pub shunting: &'a ShuntingParams,
    pub forces: &'a ForceParams,
}

impl FieldContext<'_> {
    pub fn cell_of(&self, p: Vec2) -> Result<Cell, WorldError> {
        world_to_grid(self.bounds.clamp(p), self.bounds, self.grid)
    }

    pub fn world_of(&self, cell: Cell) -> Vec2 {
        grid_to_world(cell, self.bounds, self.grid)
    }
}

/// The neighbor a Follow robot tracks: lowest hierarchy below its own,
/// then closest, then lowest id.
pub fn select_leader<'o>(robot: &RobotState, obs: &'o Observation) -> Option<&'o NeighborSighting> {
    let own = robot.hierarchy?;
    obs.neighbors
        .iter()
        .filter(|n| n.hierarchy.is_some_and(|h| h < own))
        .min_by(|a, b| {
            a.hierarchy
                .cmp(&b.hierarchy)
                .then_with(|| {
                    a.position
                        .distance(robot.position)
                        .total_cmp(&b.position.distance(robot.position))
                })
                .then_with(|| a.id.cmp(&b.id))
        })
}

/// Builds and relaxes the field a robot steers by.
///
/// Escape robots get a repulsive field over the whole workspace excited at
/// every threat they know of. Follow robots get a window around their own
/// cell: attractive fields are excited at the leader, repulsive ones at
/// neighbors closer than the desired distance. Observed obstacle cells are
/// inhibited in every case.
pub fn build_local_field(
    obs: &Observation,
    kind: FieldKind,
    robot: &RobotState,
    ctx: &FieldContext<'_>,
) -> Result<LocalField, ForceError> {
    use crate::swarm::Mode;

    let center = ctx.cell_of(robot.position)?;
    let escape = robot.mode == Mode::Escape;
    let radius = (!escape).then_some(ctx.forces.window_radius);
    let mut field = LocalField::new(ctx.grid, center, radius);

    let sources: Vec<Cell> = match (kind, escape) {
        (FieldKind::Attractive, _) => {
            let leader = select_leader(robot, obs).ok_or(ForceError::NoLeader)?;
            vec![ctx.cell_of(leader.position)?]
        }
        (FieldKind::Repulsive, true) => robot
            .known_threats
            .iter()
            .chain(&obs.threats_seen)
            .map(|&t| ctx.cell_of(t))
            .collect::<Result<_, _>>()?,
        (FieldKind::Repulsive, false) => close_neighbors(robot, obs, ctx.forces.desired_distance)
            .map(|n| ctx.cell_of(n.position))
            .collect::<Result<_, _>>()?,
    };
    field.stamp(&sources, &obs.obstacle_cells, ctx.shunting.input_magnitude)?;
    field.relax(ctx.shunting)?;
    Ok(field)
}

/// Neighbors within the repulsion range `0 < d <= desired`.
pub fn close_neighbors<'o>(
    robot: &RobotState,
    obs: &'o Observation,
    desired: f64,
) -> impl Iterator<Item = &'o NeighborSighting> {
    let p = robot.position;
    obs.neighbors.iter().filter(move |n| {
        let d = n.position.distance(p);
        d > 0.0 && d <= desired
    })
}

fn source_distance(grid: &ActivityGrid, cell: Cell) -> f64 {
    grid.sources()
        .iter()
        .map(|&s| s.distance(cell))
        .min_by(f64::total_cmp)
        .unwrap_or(0.0)
}

/// Neighbor of `cell` with the highest activity. Ties go to the cell
/// nearest a stamped source, then to row-major order.
pub fn command_neuron_max(field: &ActivityGrid, cell: Cell) -> Result<Cell, ForceError> {
    first_or_boxed(ranked_max(field, cell)?, cell)
}

/// Neighbor of `cell` with the lowest non-negative activity. Ties go to the
/// cell farthest from the stamped sources, then to row-major order.
pub fn command_neuron_min(field: &ActivityGrid, cell: Cell) -> Result<Cell, ForceError> {
    first_or_boxed(ranked_min(field, cell)?, cell)
}

/// Non-negative neighbors in `command_neuron_max` preference order.
pub fn ranked_max(field: &ActivityGrid, cell: Cell) -> Result<Vec<Cell>, ForceError> {
    rank_neighbors(field, cell, |(ca, xa, da), (cb, xb, db)| {
        xb.total_cmp(&xa)
            .then_with(|| da.total_cmp(&db))
            .then_with(|| (ca.row, ca.col).cmp(&(cb.row, cb.col)))
    })
}

/// Non-negative neighbors in `command_neuron_min` preference order.
pub fn ranked_min(field: &ActivityGrid, cell: Cell) -> Result<Vec<Cell>, ForceError> {
    rank_neighbors(field, cell, |(ca, xa, da), (cb, xb, db)| {
        xa.total_cmp(&xb)
            .then_with(|| db.total_cmp(&da))
            .then_with(|| (ca.row, ca.col).cmp(&(cb.row, cb.col)))
    })
}

fn first_or_boxed(ranked: Vec<Cell>, cell: Cell) -> Result<Cell, ForceError> {
    ranked.first().copied().ok_or(ForceError::BoxedIn(cell))
}

fn rank_neighbors(
    field: &ActivityGrid,
    cell: Cell,
    order: impl Fn((Cell, f64, f64), (Cell, f64, f64)) -> Ordering,
) -> Result<Vec<Cell>, ForceError> {
    let mut candidates: Vec<(Cell, f64, f64)> = field
        .neighbor_activities(cell)?
        .into_iter()
        .filter(|&(_, x)| x >= 0.0)
        .map(|(c, x)| (c, x, source_distance(field, c)))
        .collect();
    candidates.sort_by(|&a, &b| order(a, b));
    Ok(candidates.into_iter().map(|(c, _, _)| c).collect())
}

fn unit_force(target: Vec2, current: Vec2, gain: f64) -> Vec2 {
    (target - current).normalized().map_or(Vec2::ZERO, |u| u * gain)
}

/// `C_A` times the unit vector from the robot's position to the command neuron.
pub fn attractive_force(p_att: Vec2, p_c: Vec2, gain: f64) -> VirtualForce {
    VirtualForce {
        vector: unit_force(p_att, p_c, gain),
        kind: ForceKind::Attractive,
    }
}

/// Neighbor repulsion, active only while `0 < distance <= desired`.
pub fn repulsive_force_follow(
    p_rep: Vec2,
    p_c: Vec2,
    gain: f64,
    distance: f64,
    desired: f64,
) -> VirtualForce {
    let vector = if distance > 0.0 && distance <= desired {
        unit_force(p_rep, p_c, gain)
    } else {
        Vec2::ZERO
    };
    VirtualForce {
        vector,
        kind: ForceKind::RepulsiveFollow,
    }
}

/// Threat repulsion, active only while `0 < distance <= safe`.
pub fn repulsive_force_escape(
    p_rep: Vec2,
    p_c: Vec2,
    gain: f64,
    distance: f64,
    safe: f64,
) -> VirtualForce {
    let vector = if distance > 0.0 && distance <= safe {
        unit_force(p_rep, p_c, gain)
    } else {
        Vec2::ZERO
    };
    VirtualForce {
        vector,
        kind: ForceKind::RepulsiveEscape,
    }
}

/// The adaptation signal compared against the desired distance, or `None`
/// when the robot sees no neighbors.
pub fn adaptation_signal(
    robot: &RobotState,
    obs: &Observation,
    field: Option<(&LocalField, Cell)>,
    params: &ForceParams,
    mode: AdaptationMode,
) -> Option<f64> {
    let avr = avr_distance(robot, obs)?;
    Some(match (mode, field) {
        (AdaptationMode::Neurodynamic, Some((f, cell))) => {
            avr + params.activity_scale * f.negative_neighbor_activity(cell)
        }
        _ => avr,
    })
}

/// One stride of the attraction/repulsion balance, kept on the simplex.
pub fn step_weights(alpha_attract: f64, signal: f64, params: &ForceParams) -> (f64, f64) {
    let delta = if signal > params.desired_distance {
        params.stride
    } else {
        -params.stride
    };
    let a = (alpha_attract + delta).clamp(0.0, 1.0);
    (a, 1.0 - a)
}

/// Neighbor-distance plus negative-activity weight update.
pub fn adapt_weights(
    robot: &RobotState,
    obs: &Observation,
    field: &LocalField,
    cell: Cell,
    params: &ForceParams,
) -> (f64, f64) {
    adapt_with(robot, obs, Some((field, cell)), params, AdaptationMode::Neurodynamic)
}

/// Baseline update driven by the average neighbor distance alone.
pub fn distance_based_adapt(robot: &RobotState, obs: &Observation, params: &ForceParams) -> (f64, f64) {
    adapt_with(robot, obs, None, params, AdaptationMode::DistanceBased)
}

pub fn adapt_with(
    robot: &RobotState,
    obs: &Observation,
    field: Option<(&LocalField, Cell)>,
    params: &ForceParams,
    mode: AdaptationMode,
) -> (f64, f64) {
    if mode == AdaptationMode::FixedRatio {
        return (robot.alpha_attract, robot.alpha_repulse);
    }
    match adaptation_signal(robot, obs, field, params, mode) {
        Some(s) => step_weights(robot.alpha_attract, s, params),
        None => (robot.alpha_attract, robot.alpha_repulse),
    }
}

/// Weighted sum of attractive and repulsive components.
pub fn resultant_force(
    attractive: &[VirtualForce],
    repulsive: &[VirtualForce],
    alpha_attract: f64,
    alpha_repulse: f64,
) -> VirtualForce {
    let sum = |fs: &[VirtualForce]| fs.iter().fold(Vec2::ZERO, |acc, f| acc + f.vector);
    VirtualForce {
        vector: sum(attractive) * alpha_attract + sum(repulsive) * alpha_repulse,
        kind: ForceKind::Resultant,
    }
}

/// Maps force magnitude onto `[0, max_speed)` through `atan`.
pub fn velocity_map(force: &VirtualForce, max_speed: f64) -> f64 {
    force.magnitude().atan() * (2.0 / std::f64::consts::PI) * max_speed
}
