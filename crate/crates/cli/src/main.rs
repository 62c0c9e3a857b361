use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use itc_inventory::config::PipelineConfig;
use itc_inventory::evaluate::{pearson_r, table6};
use itc_inventory::pipeline::{run_pipeline, PipelineReport, Stage};
use itc_inventory::synth::{generate_scene, write_scene};
use itc_inventory::{Error, Result};

/// Tree-level forest inventory from LiDAR and hyperspectral imagery.
#[derive(Debug, Parser)]
#[command(name = "itc-inventory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and a config that points at it.
    Synth(SynthArgs),
    /// Build the canopy height model.
    Chm(RunArgs),
    /// Delineate tree crowns (runs the preceding stages).
    Crowns(RunArgs),
    /// Select bands by class separability (runs the preceding stages).
    SelectBands(RunArgs),
    /// Train the classifiers (runs the preceding stages).
    Train(RunArgs),
    /// Classify the image and label crowns (runs the preceding stages).
    Classify(RunArgs),
    /// Estimate DBH, biomass and volume per crown (runs the preceding stages).
    Inventory(RunArgs),
    /// Score classification and plot totals (runs the preceding stages).
    Evaluate(RunArgs),
    /// Run the full pipeline, or stop after `--stage`.
    Run(RunArgs),
    /// Correlate the published observed/predicted plot totals.
    Table6Check,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Last stage to run.
    #[arg(long)]
    stage: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene and pipeline settings; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn apply(cfg: &mut PipelineConfig, common: &Common) -> Result<()> {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    init_threads(common.threads)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    apply(&mut cfg, &args.common)?;
    let dir = args.common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let scene = generate_scene(&cfg)?;
    let path = write_scene(&scene, &cfg, &dir)?;
    println!("{} trees, {} plots", scene.trees.len(), scene.plots.len());
    println!("config: {}", path.display());
    Ok(())
}

fn run(args: &RunArgs, default_stage: Stage) -> Result<()> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    apply(&mut cfg, &args.common)?;
    let stage = match &args.stage {
        Some(s) => s.parse()?,
        None => default_stage,
    };
    let report = run_pipeline(&cfg, stage)?;
    print_report(&report, stage);
    Ok(())
}

fn print_report(report: &PipelineReport, stage: Stage) {
    info!("outputs in {}", report.output_dir.display());
    if report.summary.is_empty() {
        println!("completed through {}; outputs in {}", stage.name(), report.output_dir.display());
    } else {
        print!("{}", report.summary);
    }
}

fn table6_check() -> Result<()> {
    let rv = pearson_r(&table6::VOLUME_OBSERVED, &table6::VOLUME_PREDICTED)?;
    let ra = pearson_r(&table6::AGB_OBSERVED, &table6::AGB_PREDICTED)?;
    let verdict = |r: f64, reported: f64| if (r - reported).abs() <= 0.01 { "within 0.01" } else { "outside 0.01" };
    println!("{:<8}{:>10}{:>10}", "", "R", "reported");
    println!("{:<8}{:>10.4}{:>10.2}  {}", "volume", rv, table6::REPORTED_R_VOLUME, verdict(rv, table6::REPORTED_R_VOLUME));
    println!("{:<8}{:>10.4}{:>10.2}  {}", "AGB", ra, table6::REPORTED_R_AGB, verdict(ra, table6::REPORTED_R_AGB));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Chm(a) => run(a, Stage::Chm),
        Command::Crowns(a) => run(a, Stage::Crowns),
        Command::SelectBands(a) => run(a, Stage::SelectBands),
        Command::Train(a) => run(a, Stage::Train),
        Command::Classify(a) => run(a, Stage::Classify),
        Command::Inventory(a) => run(a, Stage::Inventory),
        Command::Evaluate(a) | Command::Run(a) => run(a, Stage::Evaluate),
        Command::Table6Check => table6_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
