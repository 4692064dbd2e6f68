use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use llmperf::config::{Mode, OutputFormat, PresetLibrary, RunConfig};
use llmperf::dse::{self, HardwareContext, SweepAxes, Workload};
use llmperf::engine::{predict_inference, predict_training_step};
use llmperf::memory::{fits, training_footprint, DEFAULT_OPTIMIZER_BYTES_PER_PARAM};
use llmperf::parallelism::RecomputeMode;
use llmperf::validate::{run_fixtures, FixtureFile, FixtureSet};
use llmperf::Error;

mod render;

#[derive(Parser, Debug)]
#[command(name = "llmperf", version, about = "Analytical LLM training/inference performance model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict one training step.
    Train(RunArgs),
    /// Predict inference latency.
    Infer(RunArgs),
    /// Per-device memory footprint and fit verdict.
    Mem(RunArgs),
    /// Grid over technology nodes, DRAM and network presets.
    Sweep(RunArgs),
    /// Search area/power splits for the fastest design.
    Dse(RunArgs),
    /// Replay the bundled validation fixtures.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Override a config key, e.g. `parallelism.tp=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_enum)]
    output: Option<Format>,
    #[arg(long, value_name = "PATH")]
    out_file: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Fixture selection.
    #[arg(long, value_enum, default_value = "all")]
    fixtures: Selection,
    /// Fixture file to use instead of the bundled one.
    #[arg(long, value_name = "PATH")]
    fixture_file: Option<PathBuf>,
    /// Optional config supplying a utilization policy.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => OutputFormat::Table,
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Selection {
    Training,
    Inference,
    All,
}

impl From<Selection> for FixtureSet {
    fn from(s: Selection) -> Self {
        match s {
            Selection::Training => FixtureSet::Training,
            Selection::Inference => FixtureSet::Inference,
            Selection::All => FixtureSet::All,
        }
    }
}

fn load(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&args.config, &args.common.set)?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    if let Some(f) = args.common.output {
        cfg.output = f.into();
    }
    if let Some(d) = cfg.dse.as_mut() {
        d.search.seed = cfg.seed;
    }
    Ok(cfg)
}

fn emit(text: &str, out_file: Option<&Path>) -> Result<()> {
    match out_file {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn workload(cfg: &RunConfig, lib: &PresetLibrary, objective: Option<Mode>) -> Result<Workload> {
    let model = cfg.resolve_model(lib)?;
    Ok(match objective.unwrap_or(Mode::Train) {
        Mode::Infer => Workload::Inference {
            model,
            inference: cfg.inference.clone().context("`inference` section required for an inference objective")?,
            parallelism: cfg.parallelism.clone(),
        },
        _ => Workload::Training {
            model,
            parallelism: cfg.parallelism.clone(),
        },
    })
}

fn run(cli: Cli) -> Result<bool> {
    let lib = PresetLibrary::load()?;
    match cli.command {
        Command::Train(args) => {
            let cfg = load(&args)?;
            let model = cfg.resolve_model(&lib)?;
            let cluster = cfg.resolve_cluster(&lib)?;
            for w in cluster.warnings() {
                eprintln!("warning: {w}");
            }
            let report = predict_training_step(&model, &cfg.parallelism, &cluster, &cfg.policy)?;
            emit(&render::prediction(&report, cfg.output)?, args.common.out_file.as_deref())?;
        }
        Command::Infer(args) => {
            let cfg = load(&args)?;
            let model = cfg.resolve_model(&lib)?;
            let inf = cfg.inference.clone().context("config needs an `inference` section")?;
            let cluster = lib.resolve_cluster(&cfg.cluster)?;
            let report = predict_inference(&model, &inf, &cfg.parallelism, &cluster, &cfg.policy)?;
            emit(&render::prediction(&report, cfg.output)?, args.common.out_file.as_deref())?;
        }
        Command::Mem(args) => {
            let cfg = load(&args)?;
            let model = cfg.resolve_model(&lib)?;
            let cluster = cfg.resolve_cluster(&lib)?;
            let mut rows = Vec::new();
            for mode in [RecomputeMode::None, RecomputeMode::Selective, RecomputeMode::Full] {
                let par = llmperf::parallelism::ParallelismConfig {
                    recompute: mode,
                    ..cfg.parallelism.clone()
                };
                let footprint = training_footprint(&model, &par, DEFAULT_OPTIMIZER_BYTES_PER_PARAM)?;
                let fit = fits(&footprint, &cluster.device);
                rows.push(render::MemRow {
                    recompute: mode,
                    selected: mode == cfg.parallelism.recompute,
                    footprint,
                    capacity: cluster.device.dram_capacity().round() as u64,
                    fits: fit.fits,
                    headroom: fit.headroom,
                });
            }
            emit(&render::memory(&rows, cfg.output)?, args.common.out_file.as_deref())?;
        }
        Command::Sweep(args) => {
            let cfg = load(&args)?;
            let section = cfg.sweep.clone().context("config needs a `sweep` section")?;
            let axes = SweepAxes {
                nodes: section.nodes.clone(),
                dram: section.dram.iter().map(|d| lib.dram(d)).collect::<Result<_, _>>()?,
                network: section.network.iter().map(|n| lib.link(n)).collect::<Result<_, _>>()?,
            };
            let ctx = HardwareContext::anchored(cfg.resolve_cluster(&lib)?, cfg.policy.clone());
            let wl = workload(&cfg, &lib, section.objective)?;
            let optimize = cfg.dse.as_ref().map(|d| d.search.clone());
            let cells = dse::sweep(&wl, &ctx, &axes, optimize.as_ref());
            emit(&render::sweep(&cells, cfg.output)?, args.common.out_file.as_deref())?;
        }
        Command::Dse(args) => {
            let cfg = load(&args)?;
            let section = cfg.dse.clone().context("config needs a `dse` section")?;
            let ctx = HardwareContext::anchored(cfg.resolve_cluster(&lib)?, cfg.policy.clone());
            let mut budgets = ctx.budgets();
            budgets.area = section.area_budget.unwrap_or(budgets.area);
            budgets.power = section.power_budget.unwrap_or(budgets.power);
            let wl = workload(&cfg, &lib, section.objective)?;
            let result = dse::search(&wl, &ctx, section.node, budgets, &section.search)?;
            emit(&render::search(&result, cfg.output)?, args.common.out_file.as_deref())?;
        }
        Command::Validate(args) => {
            let file = match &args.fixture_file {
                Some(p) => FixtureFile::from_path(p)?,
                None => FixtureFile::bundled()?,
            };
            let policy = match &args.config {
                Some(p) => RunConfig::from_file(p, &args.common.set)?.policy,
                None => Default::default(),
            };
            let outcomes = run_fixtures(&lib, &file, args.fixtures.into(), &policy)?;
            let format = args.common.output.map(OutputFormat::from).unwrap_or_default();
            emit(&render::validation(&outcomes, format)?, args.common.out_file.as_deref())?;
            return Ok(outcomes.iter().all(|o| o.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            if let Some(Error::MemoryOverflow { footprint, capacity }) = err.downcast_ref::<Error>() {
                eprintln!("error: memory overflow ({} bytes needed, {capacity} available)", footprint.total);
                eprintln!("{}", render::footprint_json(footprint));
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(2)
        }
    }
}
