//! Scenario files: strict TOML with defaults for every physical parameter.
//!
//! ```toml
//! version = 1
//!
//! [world]
//! name = "static"
//! dt = 0.5
//! R_s = 8.0
//!
//! [shunting]
//! sigma = -0.1
//!
//! [robots]
//! kind = "random"
//! count = 13
//! min_spacing = 1.5
//! region = { min = { x = 10.0, y = 10.0 }, max = { x = 22.0, y = 22.0 } }
//!
//! [[threats]]
//! position = { x = 8.0, y = 8.0 }
//!
//! [run]
//! max_ticks = 400
//! seed = 1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ObstacleSpec, RobotPlacement, RunConfig, ScenarioSpec, ThreatSpec};
use crate::forces::{AdaptationMode, ForceParams};
use crate::geometry::{Bounds, Vec2};
use crate::grid::{GridSpec, ShuntingParams};

pub const SCHEMA_VERSION: u32 = 1;

const REQUIRED: [&str; 2] = ["version", "robots"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("missing required keys: {}", .0.join(", "))]
    Missing(Vec<&'static str>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct WorldBlock {
    name: String,
    bounds: Bounds,
    grid: GridSpec,
    dt: f64,
    #[serde(rename = "R_s")]
    sensing_range: f64,
    #[serde(rename = "V_max")]
    max_speed: f64,
}

impl Default for WorldBlock {
    fn default() -> Self {
        let s = ScenarioSpec::default();
        Self {
            name: s.name,
            bounds: s.bounds,
            grid: s.grid,
            dt: 0.5,
            sensing_range: s.sensing_range,
            max_speed: s.max_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunBlock {
    max_ticks: u64,
    seed: u64,
    adaptation: AdaptationMode,
    n_runs: usize,
    workers: usize,
}

impl Default for RunBlock {
    fn default() -> Self {
        let c = RunConfig::new(ScenarioSpec::default());
        Self {
            max_ticks: c.max_ticks,
            seed: c.seed,
            adaptation: c.adaptation,
            n_runs: c.n_runs,
            workers: c.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    version: u32,
    #[serde(default)]
    world: WorldBlock,
    #[serde(default)]
    shunting: ShuntingParams,
    #[serde(default)]
    forces: ForceParams,
    #[serde(default)]
    run: RunBlock,
    robots: RobotPlacement,
    #[serde(default)]
    obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    threats: Vec<ThreatSpec>,
}

/// Parses and validates scenario text.
pub fn parse_str(text: &str) -> Result<RunConfig, ScenarioError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
    let missing: Vec<&'static str> = REQUIRED.into_iter().filter(|k| !table.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(ScenarioError::Missing(missing));
    }
    let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    if file.version != SCHEMA_VERSION {
        return Err(ScenarioError::Version(file.version));
    }
    let config = RunConfig {
        scenario: ScenarioSpec {
            name: file.world.name,
            bounds: file.world.bounds,
            grid: file.world.grid,
            sensing_range: file.world.sensing_range,
            max_speed: file.world.max_speed,
            robots: file.robots,
            obstacles: file.obstacles,
            threats: file.threats,
        },
        shunting: file.shunting,
        forces: file.forces,
        dt: file.world.dt,
        max_ticks: file.run.max_ticks,
        seed: file.run.seed,
        adaptation: file.run.adaptation,
        n_runs: file.run.n_runs,
        workers: file.run.workers,
    };
    config.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    Ok(config)
}

pub fn parse_scenario(path: &Path) -> Result<RunConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_str(&text)
}

/// Serializes a config as a complete scenario file.
pub fn to_toml(config: &RunConfig) -> String {
    let s = &config.scenario;
    let file = ScenarioFile {
        version: SCHEMA_VERSION,
        world: WorldBlock {
            name: s.name.clone(),
            bounds: s.bounds,
            grid: s.grid,
            dt: config.dt,
            sensing_range: s.sensing_range,
            max_speed: s.max_speed,
        },
        shunting: config.shunting,
        forces: config.forces,
        run: RunBlock {
            max_ticks: config.max_ticks,
            seed: config.seed,
            adaptation: config.adaptation,
            n_runs: config.n_runs,
            workers: config.workers,
        },
        robots: s.robots.clone(),
        obstacles: s.obstacles.clone(),
        threats: s.threats.clone(),
    };
    toml::to_string(&file).expect("scenario serializes to TOML")
}

/// Overrides one named parameter, as used by sweeps.
pub fn set_param(config: &mut RunConfig, name: &str, value: f64) -> Result<(), ScenarioError> {
    let sh = &mut config.shunting;
    let fo = &mut config.forces;
    match name {
        "A" => sh.decay = value,
        "B" => sh.upper = value,
        "D" => sh.lower = value,
        "mu" => sh.lateral_gain = value,
        "beta" => sh.inhibitory_gain = value,
        "sigma" => sh.inhibitory_threshold = value,
        "E" => sh.input_magnitude = value,
        "r0" => sh.receptive_radius = value,
        "C_A" => fo.attract_gain = value,
        "C_R" => fo.repulse_gain = value,
        "R_d" => fo.desired_distance = value,
        "d_s" => fo.safe_distance = value,
        "U" => fo.stride = value,
        "k_act" => fo.activity_scale = value,
        "R_s" => config.scenario.sensing_range = value,
        "V_max" => config.scenario.max_speed = value,
        "dt" => config.dt = value,
        other => {
            return Err(ScenarioError::Invalid(format!(
                "unknown sweep parameter '{other}'"
            )))
        }
    }
    config.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))
}

/// Convenience for tests and examples: explicit robot positions.
pub fn explicit(points: &[(f64, f64)]) -> RobotPlacement {
    RobotPlacement::Explicit {
        positions: points.iter().map(|&(x, y)| Vec2::new(x, y)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1

[robots]
kind = "explicit"
positions = [{ x = 10.0, y = 10.0 }, { x = 12.0, y = 10.0 }]
"#;

    #[test]
    fn empty_file_lists_required_keys() {
        let err = parse_str("").unwrap_err();
        assert_eq!(err.to_string(), "missing required keys: version, robots");
    }

    #[test]
    fn defaults_are_filled() {
        let c = parse_str(MINIMAL).unwrap();
        assert_eq!(c.shunting, ShuntingParams::default());
        assert_eq!(c.forces, ForceParams::default());
        assert_eq!(c.scenario.grid, GridSpec::default());
        assert_eq!(c.scenario.sensing_range, 8.0);
        assert_eq!(c.scenario.max_speed, 1.4);
        assert_eq!(c.dt, 0.5);
    }

    #[test]
    fn sigma_override_changes_only_sigma() {
        let c = parse_str(&format!("{MINIMAL}\n[shunting]\nsigma = -0.1\n")).unwrap();
        let base = parse_str(MINIMAL).unwrap();
        assert_eq!(c.shunting.inhibitory_threshold, -0.1);
        let mut reverted = c.clone();
        reverted.shunting.inhibitory_threshold = -0.5;
        assert_eq!(reverted, base);
    }

    #[test]
    fn beta_out_of_range_is_rejected() {
        let err = parse_str(&format!("{MINIMAL}\n[shunting]\nbeta = 1.5\n")).unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid(_)));
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_name() {
        let err = parse_str(&format!("{MINIMAL}\n[shunting]\nsigmaa = -0.1\n")).unwrap_err();
        assert!(err.to_string().contains("sigmaa"), "{err}");
        let err = parse_str(&format!("{MINIMAL}\nextra = 3\n")).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse_str("version = 1\n[robots\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn round_trip() {
        let text = format!(
            "{MINIMAL}\n[[obstacles]]\ncenter = {{ x = 30.0, y = 30.0 }}\nsize = 9.0\nvelocity = {{ x = -1.0, y = 0.0 }}\n\n\
             [[threats]]\nposition = {{ x = 5.0, y = 5.0 }}\nappear_tick = 3\n\n[run]\nseed = 42\nadaptation = \"distance_based\"\n"
        );
        let c = parse_str(&text).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.adaptation, AdaptationMode::DistanceBased);
        let again = parse_str(&to_toml(&c)).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = parse_str(&MINIMAL.replace("version = 1", "version = 2")).unwrap_err();
        assert!(matches!(err, ScenarioError::Version(2)));
    }

    #[test]
    fn sweep_parameters() {
        let mut c = parse_str(MINIMAL).unwrap();
        set_param(&mut c, "A", 40.0).unwrap();
        assert_eq!(c.shunting.decay, 40.0);
        set_param(&mut c, "mu", 5.0).unwrap();
        assert_eq!(c.shunting.lateral_gain, 5.0);
        assert!(set_param(&mut c, "nope", 1.0).is_err());
        assert!(set_param(&mut c, "beta", 2.0).is_err());
    }
}
