//! Command-line front end: run scenarios, sweep a knob, check configs, and
//! print the rack cost model. All simulation logic lives in the library;
//! this file only parses arguments and moves bytes to disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nicpool::capex::{capex, CostParams, DeploymentModel};
use nicpool::config::ScenarioConfig;
use nicpool::sim::{RunOutput, Simulator};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "nicpool", version, about = "Simulate a rack of pooled multi-tenant SmartNICs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write series.csv, summary.json and, when packet
    /// tracing is on, packets.csv.
    Run {
        /// Scenario TOML file.
        config: PathBuf,
        /// Directory the report files go to.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override a config key by dotted path, e.g. --set sim.seed=7.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the scenario once per value of one key, in parallel, and collect
    /// the headline numbers into sweep.csv.
    Sweep {
        /// Scenario TOML file.
        config: PathBuf,
        /// Swept key with its values, e.g. --over nic.credits_per_nt=1,2,4,8.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        over: String,
        /// Directory for sweep.csv and the per-value subdirectories.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Fixed overrides applied to every run.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the network build-out cost for a rack of endpoints.
    Capex {
        /// Endpoints in the rack.
        #[arg(long, default_value_t = 32)]
        endpoints: u32,
        /// One deployment model; omit to compare all of them.
        #[arg(long, value_enum)]
        model: Option<DeploymentModel>,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Parse and cross-check a scenario file without running it.
    Validate {
        /// Scenario TOML file.
        config: PathBuf,
    },
    /// Print the fully-defaulted example scenario as TOML.
    DumpDefaults,
}

/// Failures keep their exit-code class: 2 for anything wrong with the
/// configuration, 3 for failures while running or writing reports.
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(2),
            Failure::Runtime(_) => ExitCode::from(3),
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, out, set } => cmd_run(&config, &out, &set),
        Cmd::Sweep { config, over, out, set } => cmd_sweep(&config, &over, &out, &set),
        Cmd::Capex { endpoints, model, json } => cmd_capex(endpoints, model, json),
        Cmd::Validate { config } => cmd_validate(&config),
        Cmd::DumpDefaults => {
            print!("{}", ScenarioConfig::example().to_toml());
            Ok(())
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

/// Reads the file, applies `--set` overrides on the raw TOML tree, and
/// deserializes strictly so typos in override paths are rejected too.
fn load_config(path: &Path, sets: &[String]) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut tree = toml::Value::Table(table);
    for s in sets {
        apply_override(&mut tree, s)?;
    }
    tree.try_into().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Sets `a.b.c=value` inside a TOML tree. The value is parsed as a TOML
/// literal when possible and falls back to a plain string.
fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<(), Failure> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override '{spec}' is not KEY=VALUE")))?;
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    let (last, walk) = parts.split_last().unwrap();
    for part in walk {
        // Numeric segments index into arrays of tables: dag.0.requested_gbps.
        node = if let Ok(i) = part.parse::<usize>() {
            node.get_mut(i)
                .ok_or_else(|| Failure::Config(format!("no element {part} under '{path}'")))?
        } else {
            node.as_table_mut()
                .ok_or_else(|| Failure::Config(format!("'{part}' in '{path}' is not a table")))?
                .entry(part.to_string())
                .or_insert(toml::Value::Table(Default::default()))
        };
    }
    let value = parse_literal(raw);
    match node {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
            Ok(())
        }
        _ => Err(Failure::Config(format!("'{path}' does not name a table entry"))),
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let probe = format!("x = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(t) => t.get("x").cloned().unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn execute(cfg: &ScenarioConfig, base_dir: &Path) -> Result<RunOutput, Failure> {
    let sc = cfg.compile().map_err(|e| Failure::Config(e.to_string()))?;
    let sim = Simulator::with_base_dir(sc, &base_dir.to_string_lossy())
        .map_err(|e| Failure::Config(e.to_string()))?;
    sim.run().map_err(|e| Failure::Runtime(e.to_string()))
}

fn write_reports(out: &RunOutput, dir: &Path) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Runtime(format!("writing {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join("summary.json"), out.summary.to_json() + "\n").map_err(io)?;
    fs::write(dir.join("series.csv"), &out.series_csv).map_err(io)?;
    if let Some(t) = &out.trace_csv {
        fs::write(dir.join("packets.csv"), t).map_err(io)?;
    }
    Ok(())
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| ".".into(), Path::to_path_buf)
}

fn cmd_run(config: &Path, out_dir: &Path, sets: &[String]) -> Result<(), Failure> {
    let cfg = load_config(config, sets)?;
    let out = execute(&cfg, &base_dir(config))?;
    write_reports(&out, out_dir)?;
    let s = &out.summary;
    println!(
        "{}: {} packets delivered, {:.3} Gbps aggregate, {} events; reports in {}",
        s.scenario,
        s.delivered_packets,
        s.total_delivered_gbps,
        s.events,
        out_dir.display()
    );
    Ok(())
}

fn cmd_sweep(config: &Path, over: &str, out_dir: &Path, sets: &[String]) -> Result<(), Failure> {
    let (key, list) = over
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("--over '{over}' is not KEY=V1,V2,...")))?;
    let values: Vec<&str> = list.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Config(format!("--over '{over}' lists no values")));
    }
    // Validate every point up front so a bad value fails before any run.
    let mut points = Vec::new();
    for v in &values {
        let mut sets = sets.to_vec();
        sets.push(format!("{key}={v}"));
        points.push((v.to_string(), load_config(config, &sets)?));
    }
    let base = base_dir(config);
    let results: Vec<Result<(String, RunOutput), Failure>> = points
        .into_par_iter()
        .map(|(v, cfg)| execute(&cfg, &base).map(|out| (v, out)))
        .collect();

    let mut csv = String::from(
        "value,scenario,seed,generated_packets,delivered_packets,total_delivered_gbps,dropped_packets\n",
    );
    for res in results {
        let (v, out) = res?;
        let s = &out.summary;
        let dropped: u64 = s.drops.values().sum();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.6},{}",
            v,
            s.scenario,
            s.seed,
            s.generated_packets,
            s.delivered_packets,
            s.total_delivered_gbps,
            dropped
        );
        write_reports(&out, &out_dir.join(format!("{}-{}", key.replace('.', "-"), v)))?;
    }
    let io = |e: std::io::Error| Failure::Runtime(format!("writing {}: {e}", out_dir.display()));
    fs::create_dir_all(out_dir).map_err(io)?;
    fs::write(out_dir.join("sweep.csv"), csv).map_err(io)?;
    println!("swept {key} over {} values; results in {}", values.len(), out_dir.display());
    Ok(())
}

fn cmd_capex(endpoints: u32, model: Option<DeploymentModel>, json: bool) -> Result<(), Failure> {
    let params = CostParams::default();
    let models: Vec<DeploymentModel> = match model {
        Some(m) => vec![m],
        None => DeploymentModel::ALL.to_vec(),
    };
    let rows: Vec<_> = models.iter().map(|&m| capex(m, endpoints, &params)).collect();
    if json {
        let text = serde_json::to_string_pretty(&rows)
            .map_err(|e| Failure::Runtime(format!("serializing cost table: {e}")))?;
        println!("{text}");
        return Ok(());
    }
    println!(
        "{:<14} {:>9} {:>6} {:>12} {:>12} {:>12} {:>8}",
        "model", "endpoints", "pool", "endpoint $", "pool $", "total $", "saving"
    );
    for r in rows {
        println!(
            "{:<14} {:>9} {:>6} {:>12.2} {:>12.2} {:>12.2} {:>7.1}%",
            r.model,
            r.endpoints,
            r.pool_devices,
            r.endpoint_cost,
            r.pool_cost,
            r.total,
            r.saving_vs_traditional * 100.0
        );
    }
    Ok(())
}

fn cmd_validate(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, &[])?;
    let sc = cfg.compile().map_err(|e| Failure::Config(e.to_string()))?;
    println!(
        "ok: {} ({} tasks, {} dags, {} workloads, {} nics, {:.0} us)",
        sc.cfg.name,
        sc.catalog.len(),
        sc.dags.len(),
        sc.workloads.len(),
        sc.cfg.rack.nics,
        sc.cfg.sim.duration_us
    );
    Ok(())
}
