//! Run artifacts: trajectory and event CSVs, metrics JSON, SVG plot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{RunMetrics, RunOutput, TrajectoryRecord};
use crate::swarm::{Mode, ModeEvent};

pub const TRAJECTORY_HEADER: &str = "tick,robot,x,y,mode,hier,v,alpha_A,gamma_min";
pub const EVENTS_HEADER: &str = "tick,robot,from,to,cause";

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "NEUROSWARM_OUT";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("metrics JSON: {0}")]
    Json(String),
}

fn write_file(path: &Path, contents: &str) -> Result<(), OutputError> {
    fs::write(path, contents).map_err(|e| OutputError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trajectory_csv(records: &[TrajectoryRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.tick,
            r.robot,
            r.x,
            r.y,
            r.mode,
            opt(r.hier),
            r.v,
            r.alpha_a,
            opt(r.gamma_min)
        );
    }
    s
}

pub fn events_csv(events: &[ModeEvent]) -> String {
    let mut s = String::from(EVENTS_HEADER);
    s.push('\n');
    for e in events {
        let _ = writeln!(s, "{},{},{},{},{}", e.tick, e.robot, e.from, e.to, e.cause.as_str());
    }
    s
}

pub fn metrics_json(metrics: &RunMetrics) -> Result<String, OutputError> {
    serde_json::to_string_pretty(metrics).map_err(|e| OutputError::Json(e.to_string()))
}

pub fn parse_metrics(text: &str) -> Result<RunMetrics, OutputError> {
    serde_json::from_str(text).map_err(|e| OutputError::Json(e.to_string()))
}

fn mode_color(mode: Mode) -> &'static str {
    match mode {
        Mode::Align => "#7f7f7f",
        Mode::Escape => "#d62728",
        Mode::Follow => "#1f77b4",
    }
}

/// World box, obstacles (initial outline, final fill, center path),
/// threats, and per-robot paths colored by mode.
pub fn render_svg(out: &RunOutput) -> String {
    const SCALE: f64 = 10.0;
    const PAD: f64 = 20.0;
    let b = out.bounds;
    let w = b.width() * SCALE + 2.0 * PAD;
    let h = b.height() * SCALE + 2.0 * PAD;
    let px = |x: f64| PAD + (x - b.min.x) * SCALE;
    // SVG y grows downward.
    let py = |y: f64| PAD + (b.max.y - y) * SCALE;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="white" stroke="black"/>"#,
        b.width() * SCALE,
        b.height() * SCALE
    );

    if let (Some(first), Some(last)) = (out.obstacle_history.first(), out.obstacle_history.last()) {
        for (i, (o0, o1)) in first.iter().zip(last).enumerate() {
            let r = o0.radius() * SCALE;
            if o0.center != o1.center {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="none" stroke="#555" stroke-dasharray="4 3"/>"##,
                    px(o0.center.x),
                    py(o0.center.y)
                );
                let pts: Vec<String> = out
                    .obstacle_history
                    .iter()
                    .filter_map(|os| os.get(i))
                    .map(|o| format!("{:.2},{:.2}", px(o.center.x), py(o.center.y)))
                    .collect();
                let _ = writeln!(
                    s,
                    r##"<polyline points="{}" fill="none" stroke="#999" stroke-width="1"/>"##,
                    pts.join(" ")
                );
            }
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="#bbb" stroke="#555"/>"##,
                px(o1.center.x),
                py(o1.center.y)
            );
        }
    }

    for t in &out.threats {
        let (x, y) = (px(t.position.x), py(t.position.y));
        let _ = writeln!(
            s,
            r##"<path d="M {} {} L {} {} M {} {} L {} {}" stroke="#000" stroke-width="3"/>"##,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0
        );
    }

    let mut ids: Vec<_> = out.trajectory.iter().map(|r| r.robot).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let path: Vec<&TrajectoryRecord> = out.trajectory.iter().filter(|r| r.robot == id).collect();
        for pair in path.windows(2) {
            let (a, c) = (pair[0], pair[1]);
            if a.x == c.x && a.y == c.y {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="2"/>"#,
                px(a.x),
                py(a.y),
                px(c.x),
                py(c.y),
                mode_color(c.mode)
            );
        }
        if let (Some(first), Some(last)) = (path.first(), path.last()) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="none" stroke="{}"/>"#,
                px(first.x),
                py(first.y),
                mode_color(first.mode)
            );
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
                px(last.x),
                py(last.y),
                mode_color(last.mode)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `trajectory.csv`, `metrics.json`, `events.csv` and, if asked,
/// `run.svg` into `dir`, creating it as needed. Returns the paths written.
pub fn write_outputs(out: &RunOutput, dir: &Path, svg: bool) -> Result<Vec<PathBuf>, OutputError> {
    fs::create_dir_all(dir).map_err(|e| OutputError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut files = vec![
        (dir.join("trajectory.csv"), trajectory_csv(&out.trajectory)),
        (dir.join("metrics.json"), metrics_json(&out.metrics)?),
        (dir.join("events.csv"), events_csv(&out.metrics.mode_events)),
    ];
    if svg {
        files.push((dir.join("run.svg"), render_svg(out)));
    }
    for (path, contents) in &files {
        write_file(path, contents)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Output directory: explicit flag, else `NEUROSWARM_OUT`, else `out`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, RobotPlacement, RunConfig, ScenarioSpec, ThreatSpec};
    use crate::geometry::Vec2;

    fn small_run(max_ticks: u64, threat: bool) -> RunOutput {
        let mut cfg = RunConfig::new(ScenarioSpec {
            robots: RobotPlacement::Explicit {
                positions: vec![Vec2::new(30.0, 30.0), Vec2::new(32.0, 30.0), Vec2::new(34.0, 31.0)],
            },
            threats: if threat {
                vec![ThreatSpec {
                    position: Vec2::new(25.0, 30.0),
                    appear_tick: 0,
                    jitter: 0.0,
                }]
            } else {
                Vec::new()
            },
            ..ScenarioSpec::default()
        });
        cfg.max_ticks = max_ticks;
        run(&cfg).unwrap()
    }

    #[test]
    fn row_count_includes_initial_state() {
        let out = small_run(12, false);
        let csv = trajectory_csv(&out.trajectory);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_HEADER);
        assert_eq!(lines.len() - 1, 3 * 13);
        assert!(lines[1].starts_with("0,0,30,30,align,,0,0.5,"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn metrics_round_trip() {
        let out = small_run(400, true);
        assert!(!out.metrics.mode_events.is_empty());
        let text = metrics_json(&out.metrics).unwrap();
        assert_eq!(parse_metrics(&text).unwrap(), out.metrics);
    }

    #[test]
    fn files_are_written() {
        let out = small_run(400, true);
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&out, dir.path(), true).unwrap();
        assert_eq!(files.len(), 4);
        let svg = fs::read_to_string(dir.path().join("run.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("#d62728"));
        let events = fs::read_to_string(dir.path().join("events.csv")).unwrap();
        assert!(events.starts_with(EVENTS_HEADER));
        assert!(events.contains(",align,escape,threat_detected"));
    }

    #[test]
    fn unwritable_directory_names_path() {
        let out = small_run(1, false);
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_outputs(&out, &blocker.join("sub"), false).unwrap_err();
        assert!(err.to_string().contains("sub"), "{err}");
    }
}
