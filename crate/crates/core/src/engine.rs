//! Tick pipeline, termination, metrics and seeded batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forces::{
    adapt_with, attractive_force, build_local_field, close_neighbors, repulsive_force_escape,
    repulsive_force_follow, resultant_force, select_leader, velocity_map, AdaptationMode, FieldContext,
    FieldKind, ForceError, ForceParams, LocalField, VirtualForce,
};
use crate::geometry::{Bounds, Vec2};
use crate::grid::{ActivityGrid, Cell, GridError, GridSpec, ShuntingParams};
use crate::swarm::{
    assign_hierarchy, kinematic_step, transition_mode, Mode, ModeEvent, RobotId, RobotState, SwarmError,
    THREAT_MATCH_TOLERANCE,
};
use crate::world::{Obstacle, Observation, Threat, WorldError, WorldState};

/// Attempts allowed when sampling random robot positions.
pub const PLACEMENT_SAMPLE_LIMIT: usize = 10_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("tick {tick}: {source}")]
    Diverged { tick: u64, source: GridError },
    #[error("tick {tick}: {source}")]
    World { tick: u64, source: WorldError },
    #[error("tick {tick}: {source}")]
    Motion { tick: u64, source: SwarmError },
}

impl EngineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Scenario(_) => 3,
            EngineError::Diverged { .. } => 4,
            EngineError::World { .. } | EngineError::Motion { .. } => 4,
        }
    }

    fn grid(tick: u64, e: GridError) -> Self {
        match e {
            GridError::InvalidParam { .. } | GridError::OutOfGrid { .. } | GridError::SelfConnection(_) => {
                EngineError::Scenario(e.to_string())
            }
            other => EngineError::Diverged { tick, source: other },
        }
    }

    fn force(tick: u64, e: ForceError) -> Self {
        match e {
            ForceError::Grid(g) => Self::grid(tick, g),
            ForceError::World(w) => EngineError::World { tick, source: w },
            other => EngineError::Scenario(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RobotPlacement {
    Explicit {
        positions: Vec<Vec2>,
    },
    /// Uniform samples inside `region`, pairwise at least `min_spacing`
    /// apart, connected under the sensing range, with some robot in range
    /// of the first threat.
    Random {
        region: Bounds,
        count: usize,
        min_spacing: f64,
    },
}

impl RobotPlacement {
    pub fn count(&self) -> usize {
        match self {
            RobotPlacement::Explicit { positions } => positions.len(),
            RobotPlacement::Random { count, .. } => *count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: Vec2,
    /// Squared radius.
    pub size: f64,
    #[serde(default)]
    pub velocity: Vec2,
    /// Per-run uniform offset bound applied to each center coordinate.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatSpec {
    pub position: Vec2,
    #[serde(default)]
    pub appear_tick: u64,
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub bounds: Bounds,
    pub grid: GridSpec,
    /// Detection radius shared by robots, threats and obstacles.
    pub sensing_range: f64,
    pub max_speed: f64,
    pub robots: RobotPlacement,
    pub obstacles: Vec<ObstacleSpec>,
    pub threats: Vec<ThreatSpec>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            name: "unnamed".to_string(),
            bounds: Bounds::new(Vec2::ZERO, Vec2::new(69.0, 69.0)),
            grid: GridSpec::default(),
            sensing_range: 8.0,
            max_speed: 1.4,
            robots: RobotPlacement::Explicit { positions: Vec::new() },
            obstacles: Vec::new(),
            threats: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub shunting: ShuntingParams,
    pub forces: ForceParams,
    /// Seconds per tick.
    pub dt: f64,
    pub max_ticks: u64,
    pub seed: u64,
    pub adaptation: AdaptationMode,
    /// Runs per batch.
    pub n_runs: usize,
    /// Threads used for per-robot stages; results do not depend on it.
    pub workers: usize,
}

impl RunConfig {
    pub fn new(scenario: ScenarioSpec) -> Self {
        Self {
            scenario,
            shunting: ShuntingParams::default(),
            forces: ForceParams::default(),
            dt: 0.5,
            max_ticks: 400,
            seed: 0,
            adaptation: AdaptationMode::Neurodynamic,
            n_runs: 1,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Scenario(m));
        self.shunting.validate().map_err(|e| EngineError::Scenario(e.to_string()))?;
        let s = &self.scenario;
        s.grid.validate().map_err(|e| EngineError::Scenario(e.to_string()))?;
        let min_window = (s.sensing_range / s.grid.spacing).ceil() as usize;
        self.forces
            .validate(min_window)
            .map_err(|e| EngineError::Scenario(e.to_string()))?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if self.max_ticks < 1 {
            return bad("max_ticks must be at least 1".into());
        }
        if self.n_runs < 1 {
            return bad("n_runs must be at least 1".into());
        }
        if self.workers < 1 {
            return bad("workers must be at least 1".into());
        }
        if !(s.sensing_range > 0.0) {
            return bad(format!("sensing range R_s = {} must be positive", s.sensing_range));
        }
        if !(s.max_speed > 0.0) {
            return bad(format!("V_max = {} must be positive", s.max_speed));
        }
        let b = &s.bounds;
        if !(b.width() > 0.0 && b.height() > 0.0) {
            return bad("workspace bounds are empty".into());
        }
        let span_x = (s.grid.width - 1) as f64 * s.grid.spacing;
        let span_y = (s.grid.height - 1) as f64 * s.grid.spacing;
        if (span_x - b.width()).abs() > 1e-9 || (span_y - b.height()).abs() > 1e-9 {
            return bad(format!(
                "grid {}x{} at spacing {} spans {}x{}, workspace is {}x{}",
                s.grid.width,
                s.grid.height,
                s.grid.spacing,
                span_x,
                span_y,
                b.width(),
                b.height()
            ));
        }
        for o in &s.obstacles {
            if !(o.size > 0.0) || o.jitter < 0.0 || !b.contains(o.center) {
                return bad(format!("invalid obstacle at ({}, {})", o.center.x, o.center.y));
            }
        }
        for t in &s.threats {
            if t.jitter < 0.0 || !b.contains(t.position) {
                return bad(format!("invalid threat at ({}, {})", t.position.x, t.position.y));
            }
        }
        match &s.robots {
            RobotPlacement::Explicit { positions } => {
                if positions.is_empty() {
                    return bad("no robots".into());
                }
                if let Some(p) = positions.iter().find(|p| !b.contains(**p)) {
                    return bad(format!("robot at ({}, {}) lies outside the workspace", p.x, p.y));
                }
            }
            RobotPlacement::Random {
                region,
                count,
                min_spacing,
            } => {
                if *count == 0 {
                    return bad("no robots".into());
                }
                if !(b.contains(region.min) && b.contains(region.max)) || region.width() < 0.0 || region.height() < 0.0 {
                    return bad("robot region must lie inside the workspace".into());
                }
                if *min_spacing < 0.0 {
                    return bad(format!("min_spacing = {min_spacing} must be non-negative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Success,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Escape completed with no member lost and no obstacle contact.
    pub success: bool,
    pub reason: TerminationReason,
    pub ticks: u64,
    /// Seconds from the first threat's appearance to termination.
    pub escape_time: f64,
    /// Sum of `v^2 * dt` over robots and ticks.
    pub energy_proxy: f64,
    pub members_lost: usize,
    /// Smallest gamma over every robot and tick; `None` without obstacles.
    pub min_gamma: Option<f64>,
    /// Smallest distance to an obstacle surface over every robot and tick.
    pub min_clearance: Option<f64>,
    /// Smallest pairwise robot distance; `None` for a single robot.
    pub min_inter_robot: Option<f64>,
    pub mode_events: Vec<ModeEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub tick: u64,
    pub robot: RobotId,
    pub x: f64,
    pub y: f64,
    pub mode: Mode,
    pub hier: Option<u32>,
    pub v: f64,
    pub alpha_a: f64,
    pub gamma_min: Option<f64>,
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trajectory: Vec<TrajectoryRecord>,
    /// Obstacle states at each tick, index = tick.
    pub obstacle_history: Vec<Vec<Obstacle>>,
    pub threats: Vec<Threat>,
    pub bounds: Bounds,
}

/// Instantiates the world and robots for one seed.
pub fn instantiate(config: &RunConfig) -> Result<(WorldState, Vec<RobotState>), EngineError> {
    config.validate()?;
    let s = &config.scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut jitter = |p: Vec2, j: f64| {
        if j > 0.0 {
            s.bounds
                .clamp(p + Vec2::new(rng.gen_range(-j..=j), rng.gen_range(-j..=j)))
        } else {
            p
        }
    };
    let obstacles: Vec<Obstacle> = s
        .obstacles
        .iter()
        .map(|o| Obstacle {
            center: jitter(o.center, o.jitter),
            size: o.size,
            velocity: o.velocity,
        })
        .collect();
    let threats: Vec<Threat> = s
        .threats
        .iter()
        .map(|t| Threat {
            position: jitter(t.position, t.jitter),
            active_from: t.appear_tick,
        })
        .collect();
    let world = WorldState {
        bounds: s.bounds,
        grid: s.grid,
        obstacles,
        threats,
        tick: 0,
        dt: config.dt,
    };
    let positions = match &s.robots {
        RobotPlacement::Explicit { positions } => positions.clone(),
        RobotPlacement::Random {
            region,
            count,
            min_spacing,
        } => place_random(&mut rng, &world, region, *count, *min_spacing, s.sensing_range)?,
    };
    let robots = positions
        .into_iter()
        .enumerate()
        .map(|(i, p)| RobotState::new(RobotId(i), p))
        .collect();
    Ok((world, robots))
}

fn place_random(
    rng: &mut ChaCha8Rng,
    world: &WorldState,
    region: &Bounds,
    count: usize,
    min_spacing: f64,
    range: f64,
) -> Result<Vec<Vec2>, EngineError> {
    let mut samples = 0;
    loop {
        let mut placed: Vec<Vec2> = Vec::with_capacity(count);
        while placed.len() < count {
            samples += 1;
            if samples > PLACEMENT_SAMPLE_LIMIT {
                return Err(EngineError::Scenario(format!(
                    "no feasible placement for {count} robots after {PLACEMENT_SAMPLE_LIMIT} samples"
                )));
            }
            let p = Vec2::new(
                rng.gen_range(region.min.x..=region.max.x),
                rng.gen_range(region.min.y..=region.max.y),
            );
            let free = world.min_clearance(p).is_none_or(|c| c >= 1.0)
                && world.threats.iter().all(|t| t.position.distance(p) >= 1.0)
                && placed.iter().all(|q| q.distance(p) >= min_spacing);
            if free {
                placed.push(p);
            }
        }
        let contact = world
            .threats
            .first()
            .is_none_or(|t| placed.iter().any(|p| p.distance(t.position) <= range));
        if contact && connected(&placed, range) {
            return Ok(placed);
        }
    }
}

/// Whether the disk graph of radius `range` over `points` is connected.
pub fn connected(points: &[Vec2], range: f64) -> bool {
    if points.is_empty() {
        return true;
    }
    let mut seen = vec![false; points.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..points.len() {
            if !seen[j] && points[i].distance(points[j]) <= range {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Robots whose nearest other robot is farther than `range`.
pub fn members_lost(points: &[Vec2], range: f64) -> usize {
    if points.len() < 2 {
        return 0;
    }
    points
        .iter()
        .enumerate()
        .filter(|&(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .all(|(_, q)| q.distance(*p) > range)
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Plan {
    heading: f64,
    speed: f64,
    alpha_attract: f64,
    alpha_repulse: f64,
}

pub struct Simulation {
    config: RunConfig,
    world: WorldState,
    robots: Vec<RobotState>,
    events: Vec<ModeEvent>,
    trajectory: Option<Vec<TrajectoryRecord>>,
    obstacle_history: Vec<Vec<Obstacle>>,
    energy: f64,
    min_gamma: Option<f64>,
    min_clearance: Option<f64>,
    min_inter: Option<f64>,
    pool: Option<rayon::ThreadPool>,
}

fn fold_min(acc: Option<f64>, v: Option<f64>) -> Option<f64> {
    match (acc, v) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

impl Simulation {
    /// `record` keeps the per-tick trajectory log.
    pub fn new(config: RunConfig, record: bool) -> Result<Self, EngineError> {
        let (world, robots) = instantiate(&config)?;
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| EngineError::Scenario(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let mut sim = Self {
            config,
            world,
            robots,
            events: Vec::new(),
            trajectory: record.then(Vec::new),
            obstacle_history: Vec::new(),
            energy: 0.0,
            min_gamma: None,
            min_clearance: None,
            min_inter: None,
            pool,
        };
        sim.observe();
        Ok(sim)
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn robots(&self) -> &[RobotState] {
        &self.robots
    }

    pub fn events(&self) -> &[ModeEvent] {
        &self.events
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn ctx(&self) -> FieldContext<'_> {
        FieldContext {
            bounds: &self.world.bounds,
            grid: &self.world.grid,
            shunting: &self.config.shunting,
            forces: &self.config.forces,
        }
    }

    /// Updates running extrema and the trajectory log for the current tick.
    fn observe(&mut self) {
        let tick = self.world.tick;
        for (i, r) in self.robots.iter().enumerate() {
            let g = self.world.min_gamma(r.position);
            self.min_gamma = fold_min(self.min_gamma, g);
            self.min_clearance = fold_min(self.min_clearance, self.world.min_clearance(r.position));
            for q in &self.robots[i + 1..] {
                self.min_inter = fold_min(self.min_inter, Some(q.position.distance(r.position)));
            }
            if let Some(log) = self.trajectory.as_mut() {
                log.push(TrajectoryRecord {
                    tick,
                    robot: r.id,
                    x: r.position.x,
                    y: r.position.y,
                    mode: r.mode,
                    hier: r.hierarchy,
                    v: r.speed,
                    alpha_a: r.alpha_attract,
                    gamma_min: g,
                });
            }
        }
        if self.trajectory.is_some() {
            self.obstacle_history.push(self.world.obstacles.clone());
        }
    }

    /// `Some(reason)` once the run is over.
    pub fn terminated(&self) -> Option<TerminationReason> {
        let d_s = self.config.forces.safe_distance;
        let mut escapers = self.robots.iter().filter(|r| r.mode == Mode::Escape).peekable();
        if escapers.peek().is_some()
            && escapers.all(|r| r.known_threats.iter().all(|t| t.distance(r.position) > d_s))
        {
            return Some(TerminationReason::Success);
        }
        (self.world.tick >= self.config.max_ticks).then_some(TerminationReason::Timeout)
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), EngineError> {
        self.world.step_obstacles();
        let tick = self.world.tick;
        let range = self.config.scenario.sensing_range;
        let n = self.robots.len();

        let mut obs: Vec<Observation> = self
            .robots
            .iter()
            .map(|r| self.world.sense(&self.robots, r.id, range))
            .collect::<Result<_, _>>()
            .map_err(|source| EngineError::World { tick, source })?;

        let mut next = self.robots.clone();
        for (i, robot) in self.robots.iter().enumerate() {
            let t = transition_mode(robot, &obs[i], tick);
            let r = &mut next[i];
            r.mode = t.mode;
            r.known_threats.extend(t.new_threats);
            // Threat knowledge spreads to robots in view.
            for nb in &obs[i].neighbors {
                for &th in &self.robots[nb.id.0].known_threats {
                    if !r.knows_threat(th) {
                        r.known_threats.push(th);
                    }
                }
            }
            r.seen_modes = obs[i].neighbors.iter().map(|nb| (nb.id, nb.mode)).collect();
            r.seen_modes.sort_by_key(|&(id, _)| id);
            self.events.extend(t.events);
        }

        let hierarchy = assign_hierarchy(&next, &obs);
        for (r, h) in next.iter_mut().zip(&hierarchy) {
            r.hierarchy = *h;
        }
        for o in &mut obs {
            for nb in &mut o.neighbors {
                nb.mode = next[nb.id.0].mode;
                nb.hierarchy = next[nb.id.0].hierarchy;
            }
        }

        let ctx = self.ctx();
        let adaptation = self.config.adaptation;
        let dt = self.config.dt;
        let v_max = self.config.scenario.max_speed;
        let plan_one = |i: usize| plan_robot(&next[i], &obs[i], &ctx, adaptation, dt, v_max, tick);
        let plans: Vec<Result<Plan, EngineError>> = match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(plan_one).collect()),
            None => (0..n).map(plan_one).collect(),
        };

        let bounds = self.world.bounds;
        let mut moved = Vec::with_capacity(n);
        for (r, plan) in next.iter().zip(plans) {
            let plan = plan?;
            let mut m = kinematic_step(r, plan.heading, plan.speed, dt, v_max, &bounds)
                .map_err(|source| EngineError::Motion { tick, source })?;
            m.alpha_attract = plan.alpha_attract;
            m.alpha_repulse = plan.alpha_repulse;
            self.energy += plan.speed * plan.speed * dt;
            moved.push(m);
        }
        self.robots = moved;
        self.observe();
        Ok(())
    }

    /// Full-workspace field stamped with every known threat and every
    /// obstacle cell, relaxed for one tick.
    pub fn snapshot_field(&self) -> Result<ActivityGrid, EngineError> {
        let mut threats: Vec<Cell> = Vec::new();
        for r in &self.robots {
            for &t in &r.known_threats {
                let c = self
                    .world
                    .world_to_grid(t)
                    .map_err(|source| EngineError::World { tick: self.world.tick, source })?;
                threats.push(c);
            }
        }
        let b = &self.world.bounds;
        let obstacles = self
            .world
            .obstacle_cells_near(Vec2::new((b.min.x + b.max.x) / 2.0, (b.min.y + b.max.y) / 2.0), b.width().hypot(b.height()));
        let mut field = LocalField::new(&self.world.grid, Cell::new(0, 0), None);
        field
            .stamp(&threats, &obstacles, self.config.shunting.input_magnitude)
            .and_then(|_| field.relax(&self.config.shunting))
            .map_err(|e| EngineError::grid(self.world.tick, e))?;
        Ok(field.grid().clone())
    }

    pub fn metrics(&self) -> RunMetrics {
        let reason = self.terminated().unwrap_or(TerminationReason::Timeout);
        let start = self.world.threats.iter().map(|t| t.active_from).min().unwrap_or(0);
        let escape_ticks = self.world.tick.saturating_sub(start);
        let positions: Vec<Vec2> = self.robots.iter().map(|r| r.position).collect();
        let lost = members_lost(&positions, self.config.scenario.sensing_range);
        RunMetrics {
            success: reason == TerminationReason::Success && lost == 0 && self.min_gamma.is_none_or(|g| g > 1.0),
            reason,
            ticks: self.world.tick,
            escape_time: escape_ticks as f64 * self.config.dt,
            energy_proxy: self.energy,
            members_lost: lost,
            min_gamma: self.min_gamma,
            min_clearance: self.min_clearance,
            min_inter_robot: self.min_inter,
            mode_events: self.events.clone(),
        }
    }

    /// Steps until termination.
    pub fn run_to_end(&mut self) -> Result<RunMetrics, EngineError> {
        while self.terminated().is_none() {
            self.step()?;
        }
        Ok(self.metrics())
    }

    pub fn into_output(self) -> RunOutput {
        let metrics = self.metrics();
        RunOutput {
            metrics,
            trajectory: self.trajectory.unwrap_or_default(),
            obstacle_history: self.obstacle_history,
            threats: self.world.threats,
            bounds: self.world.bounds,
        }
    }
}

fn hold(robot: &RobotState) -> Plan {
    Plan {
        heading: robot.heading,
        speed: 0.0,
        alpha_attract: robot.alpha_attract,
        alpha_repulse: robot.alpha_repulse,
    }
}

/// Heading and speed for one robot; reads only the resolved observation.
fn plan_robot(
    robot: &RobotState,
    obs: &Observation,
    ctx: &FieldContext<'_>,
    adaptation: AdaptationMode,
    dt: f64,
    v_max: f64,
    tick: u64,
) -> Result<Plan, EngineError> {
    let fe = |e| EngineError::force(tick, e);
    let cell = ctx.cell_of(robot.position).map_err(|source| EngineError::World { tick, source })?;
    let p_c = ctx.world_of(cell);
    let params = ctx.forces;

    match robot.mode {
        Mode::Align => Ok(hold(robot)),
        Mode::Escape => {
            let d = robot
                .known_threats
                .iter()
                .map(|t| t.distance(robot.position))
                .min_by(f64::total_cmp)
                .unwrap_or(f64::INFINITY);
            if !(d > 0.0 && d <= params.safe_distance) {
                return Ok(hold(robot));
            }
            let field = build_local_field(obs, FieldKind::Repulsive, robot, ctx).map_err(fe)?;
            let target = match field.command_min(cell) {
                Ok(t) => t,
                Err(ForceError::BoxedIn(_)) => return Ok(hold(robot)),
                Err(e) => return Err(fe(e)),
            };
            let force = repulsive_force_escape(ctx.world_of(target), p_c, params.repulse_gain, d, params.safe_distance);
            let plan = Plan {
                heading: if force.magnitude() > 0.0 { force.vector.angle() } else { robot.heading },
                speed: velocity_map(&force, v_max),
                alpha_attract: robot.alpha_attract,
                alpha_repulse: robot.alpha_repulse,
            };
            Ok(guard_landing(robot, plan, &field, FieldKind::Repulsive, cell, ctx, dt, v_max / 2.0))
        }
        Mode::Follow => {
            let attract = match build_local_field(obs, FieldKind::Attractive, robot, ctx) {
                Ok(f) => Some(f),
                Err(ForceError::NoLeader) => None,
                Err(e) => return Err(fe(e)),
            };
            let close: Vec<_> = close_neighbors(robot, obs, params.desired_distance).collect();
            let repulse = if close.is_empty() {
                None
            } else {
                Some(build_local_field(obs, FieldKind::Repulsive, robot, ctx).map_err(fe)?)
            };

            let Some(att) = attract else {
                // Leader out of view: coast on the previous velocity.
                let field = match repulse {
                    Some(f) => f,
                    None => obstacle_field(obs, robot, ctx).map_err(fe)?,
                };
                let (a, r) = adapt_with(robot, obs, Some((&field, cell)), params, adaptation);
                let plan = Plan {
                    heading: robot.heading,
                    speed: robot.speed,
                    alpha_attract: a,
                    alpha_repulse: r,
                };
                return Ok(guard_landing(robot, plan, &field, FieldKind::Attractive, cell, ctx, dt, v_max / 2.0));
            };

            let own = robot.hierarchy.unwrap_or(u32::MAX);
            let n_lower = obs
                .neighbors
                .iter()
                .filter(|n| n.hierarchy.is_some_and(|h| h < own))
                .count();
            let leader = select_leader(robot, obs).expect("attractive field implies a leader");
            let leader_cell = ctx.cell_of(leader.position).map_err(|source| EngineError::World { tick, source })?;
            let f_a = if leader_cell == cell {
                VirtualForce::zero(crate::forces::ForceKind::Attractive)
            } else {
                match att.command_max(cell) {
                    Ok(t) => attractive_force(ctx.world_of(t), p_c, params.attract_gain),
                    Err(ForceError::BoxedIn(_)) => VirtualForce::zero(crate::forces::ForceKind::Attractive),
                    Err(e) => return Err(fe(e)),
                }
            };

            let f_r = match &repulse {
                None => VirtualForce::zero(crate::forces::ForceKind::RepulsiveFollow),
                Some(field) => {
                    let nearest = close
                        .iter()
                        .map(|n| n.position.distance(robot.position))
                        .min_by(f64::total_cmp)
                        .unwrap_or(f64::INFINITY);
                    match field.command_min(cell) {
                        Ok(t) => {
                            repulsive_force_follow(ctx.world_of(t), p_c, params.repulse_gain, nearest, params.desired_distance)
                        }
                        Err(ForceError::BoxedIn(_)) => VirtualForce::zero(crate::forces::ForceKind::RepulsiveFollow),
                        Err(e) => return Err(fe(e)),
                    }
                }
            };

            let (a, r) = adapt_with(robot, obs, Some((&att, cell)), params, adaptation);
            let force = resultant_force(&vec![f_a; n_lower], &vec![f_r; close.len()], a, r);
            let speed = velocity_map(&force, v_max);
            let plan = Plan {
                heading: if speed > 0.0 { force.vector.angle() } else { robot.heading },
                speed,
                alpha_attract: a,
                alpha_repulse: r,
            };
            Ok(guard_landing(robot, plan, &att, FieldKind::Attractive, cell, ctx, dt, v_max / 2.0))
        }
    }
}

fn obstacle_field(obs: &Observation, robot: &RobotState, ctx: &FieldContext<'_>) -> Result<LocalField, ForceError> {
    let center = ctx.cell_of(robot.position)?;
    let mut f = LocalField::new(ctx.grid, center, Some(ctx.forces.window_radius));
    f.stamp(&[], &obs.obstacle_cells, ctx.shunting.input_magnitude)?;
    f.relax(ctx.shunting)?;
    Ok(f)
}

/// Keeps a robot off cells its field marks as negative.
///
/// The planned step is taken from the cell center but the robot may sit
/// anywhere in its cell, so the landing cell is checked. If it is negative,
/// the remaining non-negative neighbors are tried in command-neuron order,
/// steering straight at each from the actual position. A robot that still
/// has no safe move, or is idle on a cell that has turned negative because
/// an obstacle moved in, backs out toward its least inhibited neighbor.
fn guard_landing(
    robot: &RobotState,
    plan: Plan,
    field: &LocalField,
    kind: FieldKind,
    cell: Cell,
    ctx: &FieldContext<'_>,
    dt: f64,
    retreat_speed: f64,
) -> Plan {
    let here = field.activity(cell).unwrap_or(0.0);
    if plan.speed <= 0.0 && here >= 0.0 {
        return plan;
    }
    let speed = if plan.speed > 0.0 { plan.speed } else { retreat_speed };
    let landing_activity = |heading: f64| {
        let landing = ctx.bounds.clamp(robot.position + Vec2::from_angle(heading) * (speed * dt));
        ctx.cell_of(landing).ok().and_then(|c| field.activity(c))
    };
    let safe = |heading: f64| landing_activity(heading).is_some_and(|x| x >= 0.0);
    if plan.speed > 0.0 && safe(plan.heading) {
        return plan;
    }
    let toward = |c: Cell| (ctx.world_of(c) - robot.position).normalized().map(|d| d.angle());
    for c in field.ranked(cell, kind).unwrap_or_default() {
        if let Some(h) = toward(c).filter(|&h| safe(h)) {
            return Plan { heading: h, speed, ..plan };
        }
    }
    if let Some(h) = field
        .least_inhibited(cell)
        .filter(|&(_, x)| x > here)
        .and_then(|(c, _)| toward(c))
    {
        return Plan { heading: h, speed, ..plan };
    }
    Plan { speed: 0.0, ..plan }
}

/// One complete run.
pub fn run(config: &RunConfig) -> Result<RunOutput, EngineError> {
    let mut sim = Simulation::new(config.clone(), true)?;
    sim.run_to_end()?;
    Ok(sim.into_output())
}

/// Metrics only, without the trajectory log.
pub fn run_metrics(config: &RunConfig) -> Result<RunMetrics, EngineError> {
    Simulation::new(config.clone(), false)?.run_to_end()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededRun {
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_escape_time: f64,
    pub std_escape_time: f64,
    pub mean_energy: f64,
    pub std_energy: f64,
    pub mean_members_lost: f64,
}

impl Aggregate {
    pub fn from_metrics<'a>(metrics: impl IntoIterator<Item = &'a RunMetrics>) -> Self {
        let ms: Vec<&RunMetrics> = metrics.into_iter().collect();
        let runs = ms.len();
        let successes = ms.iter().filter(|m| m.success).count();
        let (mt, st) = mean_std(ms.iter().map(|m| m.escape_time));
        let (me, se) = mean_std(ms.iter().map(|m| m.energy_proxy));
        let (ml, _) = mean_std(ms.iter().map(|m| m.members_lost as f64));
        Self {
            runs,
            successes,
            success_rate: if runs == 0 { 0.0 } else { successes as f64 / runs as f64 },
            mean_escape_time: mt,
            std_escape_time: st,
            mean_energy: me,
            std_energy: se,
            mean_members_lost: ml,
        }
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub adaptation: AdaptationMode,
    pub runs: Vec<SeededRun>,
    pub aggregate: Aggregate,
}

/// `n_runs` runs with seeds `base.seed + i`, in parallel across seeds.
pub fn run_batch(base: &RunConfig, n_runs: usize) -> Result<BatchReport, EngineError> {
    if n_runs < 1 {
        return Err(EngineError::Scenario("n_runs must be at least 1".into()));
    }
    base.validate()?;
    let one = |i: usize| {
        let seed = base.seed.wrapping_add(i as u64);
        let cfg = RunConfig {
            seed,
            workers: 1,
            ..base.clone()
        };
        run_metrics(&cfg).map(|metrics| SeededRun { seed, metrics })
    };
    let results: Vec<Result<SeededRun, EngineError>> = if base.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(base.workers)
            .build()
            .map_err(|e| EngineError::Scenario(format!("thread pool: {e}")))?;
        pool.install(|| (0..n_runs).into_par_iter().map(one).collect())
    } else {
        (0..n_runs).map(one).collect()
    };
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let aggregate = Aggregate::from_metrics(runs.iter().map(|r| &r.metrics));
    Ok(BatchReport {
        adaptation: base.adaptation,
        runs,
        aggregate,
    })
}

/// True when `p` lies within `d` of any threat in `threats`.
pub fn within_threat_disk(p: Vec2, threats: &[Vec2], d: f64) -> bool {
    threats.iter().any(|t| t.distance(p) <= d + THREAT_MATCH_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(robot: Vec2, threat: Option<Vec2>) -> RunConfig {
        RunConfig::new(ScenarioSpec {
            robots: RobotPlacement::Explicit { positions: vec![robot] },
            threats: threat
                .map(|position| ThreatSpec {
                    position,
                    appear_tick: 0,
                    jitter: 0.0,
                })
                .into_iter()
                .collect(),
            ..ScenarioSpec::default()
        })
    }

    #[test]
    fn quiescent_swarm_never_moves() {
        let mut cfg = single(Vec2::new(10.0, 10.0), None);
        cfg.scenario.robots = RobotPlacement::Explicit {
            positions: vec![Vec2::new(10.0, 10.0), Vec2::new(12.0, 10.0), Vec2::new(14.0, 11.0)],
        };
        cfg.max_ticks = 30;
        let mut sim = Simulation::new(cfg, true).unwrap();
        let start: Vec<Vec2> = sim.robots().iter().map(|r| r.position).collect();
        let m = sim.run_to_end().unwrap();
        assert_eq!(m.reason, TerminationReason::Timeout);
        assert!(m.mode_events.is_empty());
        assert_eq!(m.energy_proxy, 0.0);
        let end: Vec<Vec2> = sim.robots().iter().map(|r| r.position).collect();
        assert_eq!(start, end);
        assert_eq!(sim.world().tick, 30);
    }

    #[test]
    fn lone_escaper_flees_along_grid_direction() {
        let cfg = single(Vec2::new(30.0, 30.0), Some(Vec2::new(25.0, 30.0)));
        let mut sim = Simulation::new(cfg, true).unwrap();
        sim.step().unwrap();
        let r = &sim.robots()[0];
        assert_eq!(r.mode, Mode::Escape);
        // Away from the threat, on one of the two diagonal lattice moves.
        let d = r.position - Vec2::new(30.0, 30.0);
        assert!(d.x > 0.0);
        assert!((d.x.abs() - d.y.abs()).abs() < 1e-12, "{d:?}");
        assert!((d.norm() - 0.7 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn lone_escaper_terminates_beyond_safe_distance() {
        let cfg = single(Vec2::new(30.0, 30.0), Some(Vec2::new(25.0, 30.0)));
        let out = run(&cfg).unwrap();
        assert_eq!(out.metrics.reason, TerminationReason::Success);
        assert!(out.metrics.success);
        let last = out.trajectory.last().unwrap();
        assert!(Vec2::new(last.x, last.y).distance(Vec2::new(25.0, 30.0)) > 20.0);
        assert_eq!(out.trajectory.len() as u64, out.metrics.ticks + 1);
    }

    #[test]
    fn timeout_inside_safe_distance() {
        let mut cfg = single(Vec2::new(30.0, 30.0), Some(Vec2::new(25.0, 30.0)));
        cfg.max_ticks = 3;
        let m = run_metrics(&cfg).unwrap();
        assert_eq!(m.reason, TerminationReason::Timeout);
        assert!(!m.success);
        assert_eq!(m.escape_time, 1.5);
    }

    #[test]
    fn member_loss_counts_isolated_robots() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(3.0, 0.0), Vec2::new(30.0, 0.0), Vec2::new(33.0, 0.0)];
        assert_eq!(members_lost(&pts, 8.0), 0);
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(3.0, 0.0), Vec2::new(30.0, 0.0)];
        assert_eq!(members_lost(&pts, 8.0), 1);
        assert_eq!(members_lost(&pts[..1], 8.0), 0);
        assert!(!connected(&[Vec2::ZERO, Vec2::new(8.5, 0.0)], 8.0));
        assert!(connected(&[Vec2::ZERO, Vec2::new(8.0, 0.0)], 8.0));
    }

    #[test]
    fn random_placement_is_seeded_and_feasible() {
        let mut cfg = single(Vec2::ZERO, Some(Vec2::new(20.0, 20.0)));
        cfg.scenario.robots = RobotPlacement::Random {
            region: Bounds::new(Vec2::new(15.0, 15.0), Vec2::new(30.0, 30.0)),
            count: 13,
            min_spacing: 1.5,
        };
        cfg.seed = 7;
        let (_, a) = instantiate(&cfg).unwrap();
        let (_, b) = instantiate(&cfg).unwrap();
        assert_eq!(a, b);
        let pts: Vec<Vec2> = a.iter().map(|r| r.position).collect();
        assert!(connected(&pts, 8.0));
        for (i, p) in pts.iter().enumerate() {
            for q in &pts[i + 1..] {
                assert!(p.distance(*q) >= 1.5);
            }
        }
        cfg.seed = 8;
        assert_ne!(instantiate(&cfg).unwrap().1, a);
    }

    #[test]
    fn infeasible_placement_is_a_scenario_error() {
        let mut cfg = single(Vec2::ZERO, None);
        cfg.scenario.robots = RobotPlacement::Random {
            region: Bounds::new(Vec2::new(0.0, 0.0), Vec2::new(2.0, 2.0)),
            count: 20,
            min_spacing: 3.0,
        };
        let err = instantiate(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("10000"), "{err}");
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let mut cfg = single(Vec2::new(5.0, 5.0), None);
        cfg.scenario.grid.width = 60;
        assert!(matches!(cfg.validate(), Err(EngineError::Scenario(_))));
    }

    #[test]
    fn single_run_batch_matches_run() {
        let cfg = single(Vec2::new(30.0, 30.0), Some(Vec2::new(25.0, 30.0)));
        let report = run_batch(&cfg, 1).unwrap();
        let m = run_metrics(&cfg).unwrap();
        assert_eq!(report.runs[0].metrics, m);
        assert_eq!(report.aggregate.success_rate, 1.0);
        assert_eq!(report.aggregate.mean_escape_time, m.escape_time);
        assert_eq!(report.aggregate.std_escape_time, 0.0);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std([2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0].into_iter());
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }
}
