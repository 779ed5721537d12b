use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use neuroswarm::engine::{mean_std, run_batch, BatchReport, EngineError, RunConfig, Simulation, TerminationReason};
use neuroswarm::forces::AdaptationMode;
use neuroswarm::output::{resolve_out_dir, write_outputs};
use neuroswarm::scenario::{parse_scenario, set_param};

const EXIT_FAILED: u8 = 1;
const EXIT_TIMEOUT: u8 = 2;
const EXIT_SCENARIO: u8 = 3;
const EXIT_IO: u8 = 74;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "neuroswarm", version, about = "Collective escape simulator for robot swarms")]
struct Cli {
    /// Override the scenario's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its artifacts.
    Run {
        scenario: PathBuf,
        /// Output directory (default: $NEUROSWARM_OUT, else ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write run.svg.
        #[arg(long)]
        svg: bool,
        /// Comma-separated ticks at which to dump the workspace field.
        #[arg(long, value_delimiter = ',')]
        dump_activity: Vec<u64>,
    },
    /// Run seeds `seed..seed+N` and report aggregates.
    Batch {
        scenario: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        adaptation: Option<AdaptationMode>,
        /// Write the full report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Batch over each value of one parameter.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        adaptation: Option<AdaptationMode>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! esay {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

/// Failure carrying its own exit status.
struct Exit(u8, anyhow::Error);

fn engine_exit(e: EngineError) -> Exit {
    Exit(e.exit_code() as u8, e.into())
}

fn load(path: &Path, cli: &Cli) -> Result<RunConfig, Exit> {
    let mut config = parse_scenario(path).map_err(|e| Exit(EXIT_SCENARIO, e.into()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    config.validate().map_err(engine_exit)?;
    Ok(config)
}

fn io<T>(r: Result<T>) -> Result<T, Exit> {
    r.map_err(|e| Exit(EXIT_IO, e))
}

fn run_one(cli: &Cli, scenario: &Path, out: Option<&Path>, svg: bool, dumps: &[u64]) -> Result<u8, Exit> {
    let config = load(scenario, cli)?;
    let dir = resolve_out_dir(out);
    let dumps: BTreeSet<u64> = dumps.iter().copied().collect();
    io(std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())))?;

    let mut sim = Simulation::new(config, true).map_err(engine_exit)?;
    let dump = |sim: &Simulation| -> Result<(), Exit> {
        let tick = sim.world().tick;
        if dumps.contains(&tick) {
            let field = sim.snapshot_field().map_err(engine_exit)?;
            let path = dir.join(format!("activity_t{tick}.txt"));
            io(field.write_matrix(&path).map_err(anyhow::Error::from))?;
        }
        Ok(())
    };
    dump(&sim)?;
    while sim.terminated().is_none() {
        sim.step().map_err(engine_exit)?;
        dump(&sim)?;
    }
    let output = sim.into_output();
    let files = io(write_outputs(&output, &dir, svg).map_err(anyhow::Error::from))?;
    let m = &output.metrics;
    say!(
        "{} after {} ticks: escape_time={:.1}s energy={:.3} members_lost={} min_gamma={}",
        if m.success { "success" } else { "failure" },
        m.ticks,
        m.escape_time,
        m.energy_proxy,
        m.members_lost,
        m.min_gamma.map_or("n/a".to_string(), |g| format!("{g:.3}"))
    );
    for f in files {
        say!("wrote {}", f.display());
    }
    Ok(match (m.success, m.reason) {
        (true, _) => 0,
        (false, TerminationReason::Timeout) => EXIT_TIMEOUT,
        (false, TerminationReason::Success) => EXIT_FAILED,
    })
}

fn table_header() {
    say!(
        "{:>12} {:>10} {:>6} {:>9} {:>14} {:>12} {:>10}",
        "config", "adaptation", "runs", "success", "escape_time_s", "energy", "lost_mean"
    );
}

fn table_row(label: &str, r: &BatchReport) {
    let a = &r.aggregate;
    say!(
        "{:>12} {:>10} {:>6} {:>8.1}% {:>7.2}±{:<6.2} {:>12.3} {:>10.2}",
        label,
        r.adaptation.as_str(),
        a.runs,
        100.0 * a.success_rate,
        a.mean_escape_time,
        a.std_escape_time,
        a.mean_energy,
        a.mean_members_lost
    );
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<(), Exit> {
    if let Some(p) = path {
        let text = io(serde_json::to_string_pretty(value).context("serializing report"))?;
        io(std::fs::write(p, text).with_context(|| format!("writing {}", p.display())))?;
    }
    Ok(())
}

fn batch(cli: &Cli, scenario: &Path, runs: Option<usize>, adaptation: Option<AdaptationMode>, json: Option<&Path>) -> Result<u8, Exit> {
    let mut config = load(scenario, cli)?;
    if let Some(a) = adaptation {
        config.adaptation = a;
    }
    let n = runs.unwrap_or(config.n_runs);
    let report = run_batch(&config, n).map_err(engine_exit)?;
    table_header();
    table_row(&config.scenario.name, &report);
    write_json(json, &report)?;
    Ok(0)
}

fn sweep(
    cli: &Cli,
    scenario: &Path,
    param: &str,
    values: &[f64],
    runs: Option<usize>,
    adaptation: Option<AdaptationMode>,
    json: Option<&Path>,
) -> Result<u8, Exit> {
    let mut base = load(scenario, cli)?;
    if let Some(a) = adaptation {
        base.adaptation = a;
    }
    let n = runs.unwrap_or(base.n_runs);
    let mut reports = Vec::new();
    table_header();
    for &v in values {
        let mut config = base.clone();
        set_param(&mut config, param, v).map_err(|e| Exit(EXIT_SCENARIO, e.into()))?;
        let report = run_batch(&config, n).map_err(engine_exit)?;
        table_row(&format!("{param}={v}"), &report);
        reports.push((v, report));
    }
    let (mean, std) = mean_std(reports.iter().map(|(_, r)| r.aggregate.mean_escape_time));
    say!("escape time across {param} values: mean {mean:.2}s, std {std:.2}s");
    let value: Vec<serde_json::Value> = reports
        .iter()
        .map(|(v, r)| serde_json::json!({ "param": param, "value": v, "report": r }))
        .collect();
    write_json(json, &value)?;
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8, Exit> {
    match &cli.command {
        Command::Run {
            scenario,
            out,
            svg,
            dump_activity,
        } => run_one(cli, scenario, out.as_deref(), *svg, dump_activity),
        Command::Batch {
            scenario,
            runs,
            adaptation,
            json,
        } => batch(cli, scenario, *runs, *adaptation, json.as_deref()),
        Command::Sweep {
            scenario,
            param,
            values,
            runs,
            adaptation,
            json,
        } => sweep(cli, scenario, param, values, *runs, *adaptation, json.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            esay!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
