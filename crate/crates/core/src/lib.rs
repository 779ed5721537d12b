//! Neurodynamic collective escape for a simulated robot swarm.
//!
//! Each robot reads shunting-neuron activity fields over a lattice of the
//! workspace, switches between aligning, escaping and following, and turns
//! virtual forces from those fields into bounded speeds.

pub mod engine;
pub mod forces;
pub mod geometry;
pub mod output;
pub mod scenario;
pub mod grid;
pub mod swarm;
pub mod world;

pub use engine::{run, run_batch, BatchReport, RunConfig, RunMetrics, ScenarioSpec, Simulation};
pub use forces::{AdaptationMode, ForceError, ForceParams, LocalField, VirtualForce};
pub use geometry::{Bounds, Vec2};
pub use grid::{ActivityGrid, Cell, GridError, GridSpec, ShuntingParams};
pub use swarm::{Mode, RobotId, RobotState};
pub use world::{Obstacle, Observation, Threat, WorldState};
