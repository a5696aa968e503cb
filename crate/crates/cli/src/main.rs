use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use fracbal::balancer::{run_balanced, run_baseline, RunOptions, Topology};
use fracbal::config::{parameter_file, PackConfig};
use fracbal::cycle::{
    derive_power_demand, ingest_cycle, read_log, summarize, write_cycle, write_metrics,
    write_trace, DriveCycle, SimTrace,
};
use fracbal::identify::{identify, initial_soc};
use fracbal::{ConfigError, CycleError, Error, ModelError};

#[derive(Parser)]
#[command(name = "fracbal", version, about = "Fractional-order pack simulation and active balancing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Common-current discharge to cut-off; writes the trace and the derived power demand.
    Simulate(Common),
    /// Balanced discharge against the common-current baseline.
    Balance {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "independent")]
        topology: TopologyArg,
    },
    /// Fits cell parameters to a `time_s,current_a,voltage_v` log.
    Identify(Common),
    /// Writes a seeded urban drive cycle.
    GenCycle(Common),
}

#[derive(Args)]
struct Common {
    /// Pack configuration (TOML). Defaults to the built-in reference pack.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cycle CSV (or measurement log for `identify`).
    #[arg(long)]
    cycle: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Independent,
    Differential,
    Baseline,
}

enum Failure {
    Input(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Model(_) | Error::Cycle(_) | Error::Config(_) => Failure::Input(e.to_string()),
            Error::Qp(_) | Error::Diverged { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<CycleError> for Failure {
    fn from(e: CycleError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => simulate(&c),
        Command::Balance { common, topology } => balance(&common, topology),
        Command::Identify(c) => identify_cmd(&c),
        Command::GenCycle(c) => gen_cycle(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(c: &Common) -> Result<PackConfig, Failure> {
    match &c.config {
        Some(path) => Ok(PackConfig::load(path)?),
        None => Ok(PackConfig::reference()),
    }
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Input(format!("cannot create {}: {e}", dir.display())))
}

fn run_options(cfg: &PackConfig, seed: u64) -> RunOptions {
    RunOptions {
        noise: cfg.noise,
        seed,
        ..RunOptions::default()
    }
}

/// Cycle from `--cycle`, or a generated one. Power demand is derived from a
/// full-length common-current run when the file has none.
fn load_cycle(c: &Common, cfg: &PackConfig) -> Result<DriveCycle, Failure> {
    let pm = cfg.pack_model()?;
    let cycle = match &c.cycle {
        Some(path) => ingest_cycle(path, cfg.ts)?,
        None => cfg.generator.generate(cfg.generator.duration, c.seed),
    };
    if cycle.power.is_some() {
        return Ok(cycle);
    }
    let full = RunOptions {
        stop_at_cutoff: false,
        ..run_options(cfg, c.seed)
    };
    let trace = run_baseline(&pm, &cycle, &cfg.initial_soc(), &full)?;
    Ok(cycle.with_power(derive_power_demand(&trace))?)
}

fn report(trace: &SimTrace) {
    match trace.cutoff {
        Some(cut) => println!(
            "{}: cut-off at step {} (cell {})",
            trace.label,
            cut.step,
            cut.cell + 1
        ),
        None => println!("{}: no cut-off within {} steps", trace.label, trace.len()),
    }
}

fn simulate(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let pm = cfg.pack_model()?;
    let cycle = load_cycle(c, &cfg)?;
    prepare_out(&c.out)?;
    let trace = run_baseline(&pm, &cycle, &cfg.initial_soc(), &run_options(&cfg, c.seed))?;
    write_trace(&c.out.join("trace_baseline.csv"), &trace)?;
    write_cycle(&c.out.join("demand.csv"), &cycle)?;
    report(&trace);
    Ok(())
}

fn balance(c: &Common, topology: TopologyArg) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let pm = cfg.pack_model()?;
    let cycle = load_cycle(c, &cfg)?;
    prepare_out(&c.out)?;
    let opts = run_options(&cfg, c.seed);
    let baseline = run_baseline(&pm, &cycle, &cfg.initial_soc(), &opts)?;
    let topology = match topology {
        TopologyArg::Baseline => {
            write_trace(&c.out.join("trace_baseline.csv"), &baseline)?;
            let metrics = summarize(&baseline, &baseline, &pm.limits);
            write_metrics(&c.out.join("metrics_baseline.json"), &metrics)?;
            report(&baseline);
            return Ok(());
        }
        TopologyArg::Independent => Topology::Independent,
        TopologyArg::Differential => Topology::Differential,
    };
    let trace = run_balanced(
        &pm,
        topology,
        &cycle,
        &cfg.initial_soc(),
        &cfg.soc_estimate(),
        &cfg.estimator,
        &opts,
    )?;
    let metrics = summarize(&trace, &baseline, &pm.limits);
    write_trace(&c.out.join(format!("trace_{topology}.csv")), &trace)?;
    write_metrics(&c.out.join(format!("metrics_{topology}.json")), &metrics)?;
    report(&baseline);
    report(&trace);
    println!(
        "extension {:+} steps ({:.2} %), SOC spread {:.4} -> {:.4}, power RMSE {:.4} W",
        metrics.extension_steps,
        metrics.extension_pct,
        metrics.baseline_soc_spread,
        metrics.balanced_soc_spread,
        metrics.balanced_power_rmse_w
    );
    let interior = trace.interior_fallbacks();
    if interior > 0 {
        warn!("{interior} step(s) fell back to the reference current");
        return Err(Failure::Runtime(format!(
            "allocation infeasible on {interior} step(s) before cut-off"
        )));
    }
    Ok(())
}

fn identify_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let path = c
        .cycle
        .as_ref()
        .ok_or_else(|| Failure::Input("identify needs --cycle with a measurement log".into()))?;
    let log = read_log(path, cfg.ts)?;
    let base = cfg
        .cell_params()
        .into_iter()
        .next()
        .ok_or_else(|| Failure::Input("config has no cells".into()))?;
    let z0 = initial_soc(&log, &base);
    let swarm = fracbal::identify::SwarmConfig {
        seed: c.seed,
        ..cfg.identify.swarm
    };
    info!("identifying from {} samples, initial SOC {z0}", log.len());
    let fit = identify(&log, &cfg.identify.search, &swarm, &base, z0)?;
    prepare_out(&c.out)?;
    let params = parameter_file(&fit.theta, &base)?;
    write_text(&c.out.join("params.toml"), &params)?;
    let mut history = String::from("generation,best_cost\n");
    for (g, cost) in fit.history.iter().enumerate() {
        history.push_str(&format!("{},{}\n", g + 1, cost));
    }
    write_text(&c.out.join("identify_history.csv"), &history)?;
    println!(
        "voltage RMSE {:.3} mV after {} evaluations",
        fit.rmse * 1e3,
        fit.evaluations
    );
    Ok(())
}

fn gen_cycle(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let cycle = cfg.generator.generate(cfg.generator.duration, c.seed);
    prepare_out(&c.out)?;
    write_cycle(&c.out.join("cycle.csv"), &cycle)?;
    println!("{} steps written", cycle.len());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}
