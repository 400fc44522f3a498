//! `mapcomm`: run Actor-Sensor map abstraction scenarios from a TOML config.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mapcomm::{
    percent_1dp, run_batch, run_scenario_observed, summarize, timing_study, DecoderKind, Framework,
    FrameworkSummary, Scenario, ScenarioConfig, SelectionLog, StepRecord, TimingRow,
};

use output::{write_atomic, write_lines, write_snapshot, LEGEND};

#[derive(Parser)]
#[command(
    name = "mapcomm",
    version,
    about = "Task-driven map abstraction between a Sensor and an Actor robot"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its step trace and metrics.
    Run(RunArgs),
    /// Paired runs of several frameworks over consecutive seeds.
    Batch(BatchArgs),
    /// Mean Actor decoder time per step for each Sensor horizon.
    TimingStudy(TimingArgs),
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (TOML).
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "MAPCOMM_OUT", default_value = "mapcomm-out")]
    out: PathBuf,
    /// Overrides the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Actor decoder: iterative or qp
    #[arg(long)]
    decoder: Option<DecoderKind>,
    /// Number of steps the Sensor senses and transmits.
    #[arg(long)]
    sensor_horizon: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// U, AS or FI
    #[arg(long)]
    framework: Option<Framework>,
    /// Emit an estimate heatmap every K steps (and after the last step).
    #[arg(long, value_name = "K")]
    snapshot_every: Option<usize>,
    /// Record decoder wall time in the trace and metrics (not reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, value_delimiter = ',', default_value = "U,AS,FI")]
    frameworks: Vec<Framework>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct TimingArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,80")]
    horizons: Vec<usize>,
    /// U, AS or FI
    #[arg(long)]
    framework: Option<Framework>,
}

/// Failures split by exit code: bad input exits 2, everything else 1.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<mapcomm::Error> for Failure {
    fn from(e: mapcomm::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Batch(a) => cmd_batch(a),
        Command::TimingStudy(a) => cmd_timing_study(a),
        Command::DefaultConfig => default_config(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read_config(path: &Path) -> anyhow::Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: ScenarioConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(dir) = path.parent() {
        cfg.rebase_paths(dir);
    }
    Ok(cfg)
}

fn configure(common: &Common, framework: Option<Framework>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = read_config(&common.config).map_err(Failure::Config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = common.decoder {
        cfg.decoder = d;
    }
    if let Some(h) = common.sensor_horizon {
        cfg.sensor.horizon = h;
    }
    if let Some(f) = framework {
        cfg.framework = f;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn load(cfg: ScenarioConfig) -> Result<Scenario, Failure> {
    Scenario::load(cfg).map_err(|e| Failure::Config(e.into()))
}

#[derive(Serialize)]
struct MetricsFile {
    framework: Framework,
    decoder: DecoderKind,
    seed: u64,
    cost: f64,
    bits: u64,
    steps: usize,
    reached: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_decoder_ms: Option<f64>,
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    if a.snapshot_every == Some(0) {
        return Err(Failure::Config(anyhow!(
            "--snapshot-every must be positive"
        )));
    }
    let cfg = configure(&a.common, a.framework)?;
    let scenario = load(cfg)?;
    let out = &a.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut snapshot_err = None;
    let mut last_snapshot = None;
    let result = run_scenario_observed(&scenario, &mut |v| {
        if let Some(k) = a.snapshot_every {
            if v.t % k == 0 && snapshot_err.is_none() {
                if let Err(e) = write_snapshot(
                    out,
                    v.t,
                    v.dims,
                    v.estimate,
                    v.actor_trajectory,
                    v.sensor_trajectory,
                ) {
                    snapshot_err = Some(e);
                }
            }
            last_snapshot = Some((
                v.t,
                v.estimate.to_vec(),
                v.actor_trajectory.to_vec(),
                v.sensor_trajectory.to_vec(),
            ));
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }
    if let Some((t, est, actor, sensor)) = last_snapshot {
        write_snapshot(out, t, scenario.map.dims(), &est, &actor, &sensor)?;
        write_atomic(&out.join("legend.txt"), LEGEND.as_bytes())?;
    }

    let m = &result.metrics;
    write_lines(
        &out.join("trace.csv"),
        StepRecord::CSV_HEADER,
        result.trace.iter().map(|r| r.to_csv(a.timings)),
    )?;
    if scenario.config.framework == Framework::AbstractionSelection {
        write_lines(
            &out.join("selections.csv"),
            SelectionLog::CSV_HEADER,
            result.selections.iter().map(SelectionLog::to_csv),
        )?;
    }
    let metrics = MetricsFile {
        framework: scenario.config.framework,
        decoder: scenario.config.decoder,
        seed: scenario.config.seed,
        cost: m.cost,
        bits: m.bits,
        steps: m.steps,
        reached: m.reached,
        mean_decoder_ms: a.timings.then(|| m.mean_decoder_ms()),
    };
    let text = toml::to_string(&metrics).context("serializing metrics")?;
    write_atomic(&out.join("metrics.toml"), text.as_bytes())?;
    let cfg_text = toml::to_string(&scenario.config).context("serializing config")?;
    write_atomic(&out.join("config.toml"), cfg_text.as_bytes())?;

    println!(
        "{} seed {}: cost {:.4}, bits {}, steps {}, {}",
        scenario.config.framework,
        scenario.config.seed,
        m.cost,
        m.bits,
        m.steps,
        if m.reached {
            "reached target"
        } else {
            "step cap hit"
        }
    );
    Ok(())
}

fn ratio_cell(r: Option<f64>) -> String {
    r.map_or_else(|| "-".to_string(), |r| format!("{}%", percent_1dp(r)))
}

fn summary_table(rows: &[FrameworkSummary]) -> String {
    let mut s = format!(
        "{:<4} {:>5} {:>22} {:>22} {:>8} {:>8}\n",
        "", "runs", "C (mean ± sd)", "B (mean ± sd)", "r_cost", "r_bits"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<4} {:>5} {:>22} {:>22} {:>8} {:>8}\n",
            r.framework.short(),
            r.runs,
            format!("{:.2} ± {:.2}", r.cost_mean, r.cost_sd),
            format!("{:.0} ± {:.0}", r.bits_mean, r.bits_sd),
            ratio_cell(r.cost_ratio),
            ratio_cell(r.bits_ratio),
        ));
    }
    s
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn cmd_batch(a: BatchArgs) -> Result<(), Failure> {
    if a.runs == 0 {
        return Err(Failure::Config(anyhow!("--runs must be positive")));
    }
    if a.frameworks.is_empty() {
        return Err(Failure::Config(anyhow!("--frameworks is empty")));
    }
    let mut frameworks = a.frameworks.clone();
    frameworks.dedup();
    let cfg = configure(&a.common, None)?;
    let seeds: Vec<u64> = (0..a.runs as u64).map(|i| cfg.seed + i).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .context("starting worker pool")?;
    let runs = pool
        .install(|| run_batch(&cfg, &seeds, &frameworks))
        .map_err(|e| match e {
            mapcomm::Error::Io { .. }
            | mapcomm::Error::Format { .. }
            | mapcomm::Error::Argument(_) => Failure::Config(e.into()),
            other => Failure::Run(other.into()),
        })?;
    let summary = summarize(&runs);

    let out = &a.common.out;
    write_lines(
        &out.join("runs.csv"),
        "seed,framework,cost,bits,steps,reached",
        runs.iter().map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.seed,
                r.framework,
                r.metrics.cost,
                r.metrics.bits,
                r.metrics.steps,
                r.metrics.reached
            )
        }),
    )?;
    write_lines(
        &out.join("summary.csv"),
        "framework,runs,cost_mean,cost_sd,bits_mean,bits_sd,r_cost,r_bits,reached",
        summary.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.framework,
                r.runs,
                r.cost_mean,
                r.cost_sd,
                r.bits_mean,
                r.bits_sd,
                opt_csv(r.cost_ratio),
                opt_csv(r.bits_ratio),
                r.reached
            )
        }),
    )?;
    print!("{}", summary_table(&summary));
    Ok(())
}

fn cmd_timing_study(a: TimingArgs) -> Result<(), Failure> {
    if a.horizons.is_empty() {
        return Err(Failure::Config(anyhow!("--horizons is empty")));
    }
    let cfg = configure(&a.common, a.framework)?;
    let scenario = load(cfg)?;
    let rows = timing_study(&scenario, &a.horizons)?;
    write_lines(
        &a.common.out.join("timing.csv"),
        TimingRow::CSV_HEADER,
        rows.iter().map(TimingRow::to_csv),
    )?;
    println!("{}", TimingRow::CSV_HEADER);
    for r in &rows {
        println!("{}", r.to_csv());
    }
    Ok(())
}

fn default_config() -> Result<(), Failure> {
    let text = toml::to_string(&ScenarioConfig::default()).context("serializing config")?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_is_idempotent() {
        let once = toml::to_string(&ScenarioConfig::default()).unwrap();
        let parsed: ScenarioConfig = toml::from_str(&once).unwrap();
        assert_eq!(parsed, ScenarioConfig::default());
        assert_eq!(toml::to_string(&parsed).unwrap(), once);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
