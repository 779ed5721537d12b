//! Workspace, circular obstacles, threats and per-robot local sensing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bounds, Vec2};
use crate::grid::{Cell, GridSpec};
use crate::swarm::{Mode, RobotId, RobotState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("point ({x}, {y}) lies outside the workspace")]
    OutOfBounds { x: f64, y: f64 },
    #[error("unknown robot id {0}")]
    UnknownRobot(RobotId),
}

/// Circular obstacle; `size` is the squared radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub size: f64,
    pub velocity: Vec2,
}

impl Obstacle {
    pub fn fixed(center: Vec2, size: f64) -> Self {
        Self {
            center,
            size,
            velocity: Vec2::ZERO,
        }
    }

    pub fn radius(&self) -> f64 {
        self.size.sqrt()
    }

    /// Distance from `point` to the obstacle surface; negative inside.
    pub fn clearance(&self, point: Vec2) -> f64 {
        point.distance(self.center) - self.radius()
    }
}

/// Normalized squared distance to an obstacle center: `> 1` outside,
/// `== 1` on the surface, `< 1` inside.
pub fn gamma(point: Vec2, obstacle: &Obstacle) -> f64 {
    point.distance_squared(obstacle.center) / obstacle.size
}

/// A threat is stationary and, once it has appeared, never goes away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threat {
    pub position: Vec2,
    pub active_from: u64,
}

impl Threat {
    pub fn is_active(&self, tick: u64) -> bool {
        tick >= self.active_from
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub bounds: Bounds,
    pub grid: GridSpec,
    pub obstacles: Vec<Obstacle>,
    pub threats: Vec<Threat>,
    pub tick: u64,
    pub dt: f64,
}

impl WorldState {
    pub fn active_threats(&self) -> impl Iterator<Item = &Threat> {
        let tick = self.tick;
        self.threats.iter().filter(move |t| t.is_active(tick))
    }

    /// Smallest gamma over all obstacles, `None` in an obstacle-free world.
    pub fn min_gamma(&self, point: Vec2) -> Option<f64> {
        self.obstacles
            .iter()
            .map(|o| gamma(point, o))
            .min_by(f64::total_cmp)
    }

    /// Smallest surface distance over all obstacles.
    pub fn min_clearance(&self, point: Vec2) -> Option<f64> {
        self.obstacles
            .iter()
            .map(|o| o.clearance(point))
            .min_by(f64::total_cmp)
    }

    pub fn is_obstacle_point(&self, point: Vec2) -> bool {
        self.obstacles.iter().any(|o| gamma(point, o) <= 1.0)
    }

    pub fn world_to_grid(&self, point: Vec2) -> Result<Cell, WorldError> {
        world_to_grid(point, &self.bounds, &self.grid)
    }

    pub fn grid_to_world(&self, cell: Cell) -> Vec2 {
        grid_to_world(cell, &self.bounds, &self.grid)
    }

    /// Advances moving obstacles by one tick, reflecting them at the walls.
    pub fn step_obstacles(&mut self) {
        let dt = self.dt;
        let b = self.bounds;
        for o in &mut self.obstacles {
            let (x, vx) = reflect(o.center.x + o.velocity.x * dt, o.velocity.x, b.min.x, b.max.x);
            let (y, vy) = reflect(o.center.y + o.velocity.y * dt, o.velocity.y, b.min.y, b.max.y);
            o.center = Vec2::new(x, y);
            o.velocity = Vec2::new(vx, vy);
        }
        self.tick += 1;
    }

    /// Everything robot `who` can see within `range`.
    pub fn sense(
        &self,
        robots: &[RobotState],
        who: RobotId,
        range: f64,
    ) -> Result<Observation, WorldError> {
        let me = robots
            .iter()
            .find(|r| r.id == who)
            .ok_or(WorldError::UnknownRobot(who))?;
        let pose = me.position;
        let in_range = |p: Vec2| p.distance(pose) <= range;

        let neighbors = robots
            .iter()
            .filter(|r| r.id != who && in_range(r.position))
            .map(|r| NeighborSighting {
                id: r.id,
                position: r.position,
                mode: r.mode,
                hierarchy: r.hierarchy,
            })
            .collect();
        let threats_seen = self
            .active_threats()
            .map(|t| t.position)
            .filter(|&p| in_range(p))
            .collect();

        Ok(Observation {
            self_pose: pose,
            neighbors,
            obstacle_cells: self.obstacle_cells_near(pose, range),
            threats_seen,
        })
    }

    /// Lattice cells whose centers are within `range` of `center` and on
    /// or inside some obstacle; sorted.
    pub fn obstacle_cells_near(&self, center: Vec2, range: f64) -> Vec<Cell> {
        if self.obstacles.is_empty() {
            return Vec::new();
        }
        let spacing = self.grid.spacing;
        let lo = |v: f64, min: f64| (((v - range - min) / spacing).floor().max(0.0)) as usize;
        let hi = |v: f64, min: f64, n: usize| {
            (((v + range - min) / spacing).ceil().max(0.0) as usize).min(n - 1)
        };
        let (c0, c1) = (
            lo(center.x, self.bounds.min.x),
            hi(center.x, self.bounds.min.x, self.grid.width),
        );
        let (r0, r1) = (
            lo(center.y, self.bounds.min.y),
            hi(center.y, self.bounds.min.y, self.grid.height),
        );
        let mut cells = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                let cell = Cell::new(col, row);
                let p = self.grid_to_world(cell);
                if p.distance(center) <= range && self.is_obstacle_point(p) {
                    cells.push(cell);
                }
            }
        }
        cells.sort_unstable();
        cells
    }
}

fn reflect(pos: f64, vel: f64, min: f64, max: f64) -> (f64, f64) {
    if pos < min {
        ((2.0 * min - pos).min(max), -vel)
    } else if pos > max {
        ((2.0 * max - pos).max(min), -vel)
    } else {
        (pos, vel)
    }
}

/// Nearest neuron to `point`, clamped to the lattice.
pub fn world_to_grid(point: Vec2, bounds: &Bounds, spec: &GridSpec) -> Result<Cell, WorldError> {
    if !bounds.contains(point) {
        return Err(WorldError::OutOfBounds {
            x: point.x,
            y: point.y,
        });
    }
    let idx = |v: f64, min: f64, n: usize| {
        let i = ((v - min) / spec.spacing).round();
        (i.max(0.0) as usize).min(n - 1)
    };
    Ok(Cell::new(
        idx(point.x, bounds.min.x, spec.width),
        idx(point.y, bounds.min.y, spec.height),
    ))
}

pub fn grid_to_world(cell: Cell, bounds: &Bounds, spec: &GridSpec) -> Vec2 {
    Vec2::new(
        bounds.min.x + cell.col as f64 * spec.spacing,
        bounds.min.y + cell.row as f64 * spec.spacing,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSighting {
    pub id: RobotId,
    pub position: Vec2,
    pub mode: Mode,
    pub hierarchy: Option<u32>,
}

/// The strictly local sensor snapshot of one robot for one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub self_pose: Vec2,
    pub neighbors: Vec<NeighborSighting>,
    pub obstacle_cells: Vec<Cell>,
    pub threats_seen: Vec<Vec2>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldState {
        WorldState {
            bounds: Bounds::new(Vec2::ZERO, Vec2::new(69.0, 69.0)),
            grid: GridSpec::default(),
            obstacles: Vec::new(),
            threats: Vec::new(),
            tick: 0,
            dt: 1.0,
        }
    }

    #[test]
    fn gamma_values() {
        let o = Obstacle::fixed(Vec2::new(10.0, 10.0), 1.0);
        assert_eq!(gamma(Vec2::new(10.0, 10.0), &o), 0.0);
        assert_eq!(gamma(Vec2::new(11.0, 10.0), &o), 1.0);
        assert_eq!(gamma(Vec2::new(10.0, 12.0), &o), 4.0);
        let big = Obstacle::fixed(Vec2::new(3.0, 4.0), 6.25);
        assert!((gamma(Vec2::new(3.0, 6.5), &big) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn static_obstacles_do_not_move() {
        let mut w = world();
        w.obstacles.push(Obstacle::fixed(Vec2::new(5.0, 5.0), 2.0));
        w.step_obstacles();
        assert_eq!(w.obstacles[0].center, Vec2::new(5.0, 5.0));
        assert_eq!(w.tick, 1);
    }

    #[test]
    fn moving_obstacle_translates_and_reflects() {
        let mut w = world();
        w.obstacles.push(Obstacle {
            center: Vec2::new(5.0, 5.0),
            size: 1.0,
            velocity: Vec2::new(-1.0, 0.0),
        });
        w.obstacles.push(Obstacle {
            center: Vec2::new(0.5, 5.0),
            size: 1.0,
            velocity: Vec2::new(-1.0, 0.0),
        });
        w.step_obstacles();
        assert_eq!(w.obstacles[0].center, Vec2::new(4.0, 5.0));
        assert_eq!(w.obstacles[1].center, Vec2::new(0.5, 5.0));
        assert_eq!(w.obstacles[1].velocity, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn threats_appear_on_schedule() {
        let mut w = world();
        w.threats.push(Threat {
            position: Vec2::new(1.0, 1.0),
            active_from: 2,
        });
        assert_eq!(w.active_threats().count(), 0);
        w.step_obstacles();
        assert_eq!(w.active_threats().count(), 0);
        w.step_obstacles();
        assert_eq!(w.active_threats().count(), 1);
    }

    #[test]
    fn rounding_to_cells() {
        let w = world();
        assert_eq!(w.world_to_grid(Vec2::new(3.4, 6.6)).unwrap(), Cell::new(3, 7));
        assert_eq!(w.world_to_grid(Vec2::new(12.0, 40.0)).unwrap(), Cell::new(12, 40));
        assert!(w.world_to_grid(Vec2::new(-0.1, 3.0)).is_err());
        assert_eq!(w.grid_to_world(Cell::new(3, 7)), Vec2::new(3.0, 7.0));
    }

    #[test]
    fn round_trip_displacement_is_at_most_half_spacing() {
        for spacing in [1.0, 0.5] {
            let mut w = world();
            w.grid.spacing = spacing;
            w.bounds = Bounds::new(Vec2::new(-2.0, 1.0), Vec2::new(-2.0 + 69.0 * spacing, 1.0 + 69.0 * spacing));
            let n = (w.bounds.width() / 0.01).round() as usize;
            for i in (0..=n).step_by(7) {
                for j in (0..=n).step_by(13) {
                    let p = w.bounds.clamp(Vec2::new(
                        w.bounds.min.x + i as f64 * 0.01,
                        w.bounds.min.y + j as f64 * 0.01,
                    ));
                    let q = w.grid_to_world(w.world_to_grid(p).unwrap());
                    assert!((p.x - q.x).abs() <= spacing / 2.0 + 1e-12);
                    assert!((p.y - q.y).abs() <= spacing / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn obstacle_cells_match_gamma() {
        let mut w = world();
        w.obstacles.push(Obstacle::fixed(Vec2::new(10.3, 10.0), 4.0));
        w.obstacles.push(Obstacle::fixed(Vec2::new(14.0, 12.5), 2.0));
        let center = Vec2::new(12.0, 11.0);
        let cells = w.obstacle_cells_near(center, 8.0);
        assert!(!cells.is_empty());
        for row in 0..w.grid.height {
            for col in 0..w.grid.width {
                let cell = Cell::new(col, row);
                let p = w.grid_to_world(cell);
                if p.distance(center) > 8.0 {
                    continue;
                }
                let inside = w.obstacles.iter().any(|o| gamma(p, o) <= 1.0);
                assert_eq!(cells.contains(&cell), inside, "{cell}");
            }
        }
    }
}
