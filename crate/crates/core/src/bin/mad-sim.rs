use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mad_sim::detect::MonitorConfig;
use mad_sim::experiment::{
    self, AllocatorChoice, ExperimentSpec, HeatmapSpec, Scenario, SweepGrid,
};
use mad_sim::MadConfig;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "mad-sim", version, about = "Diversified allocator simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment scenario and write its artifacts.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long, value_enum, default_value = "both")]
    allocator: AllocatorChoice,
    /// MAD configuration as JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    total_blocks: Option<u64>,
    #[arg(long)]
    max_order: Option<u8>,
    #[arg(long, default_value_t = 10_000_000)]
    allocs: u64,
    /// First seed; repetition i runs with seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    reps: u32,
    #[arg(long)]
    lb: Option<u32>,
    #[arg(long)]
    ub: Option<u32>,
    /// Fraction of memory allocated per spray round.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    spray_fraction: f64,
    #[arg(long, default_value_t = 1_000)]
    round_budget: u32,
    /// Request budget of a worst-case run.
    #[arg(long, default_value_t = 5_000_000)]
    budget: u64,
    /// Blocks the worst-case attacker keeps live on average.
    #[arg(long)]
    hold_blocks: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    alarm_threshold: Option<f64>,
    /// Sweep grid as JSON with cache_capacity, threshold_lower_range and
    /// threshold_upper_range lists.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Write heat-map frames of the first seed every N allocations.
    #[arg(long)]
    heatmap_stride: Option<u64>,
    #[arg(long, default_value_t = 256)]
    heatmap_width: usize,
    /// Check the full memory tiling after every MAD operation (slow).
    #[arg(long)]
    verify: bool,
    /// Evaluate the scenario's acceptance checks; exit 1 if any fails.
    #[arg(long)]
    check: bool,
    /// Output directory; falls back to MAD_OUTPUT_DIR, then ./mad-output.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec, String> {
        let mut mad_config = match &self.config {
            Some(path) => {
                MadConfig::from_file(path).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => MadConfig::default(),
        };
        if let Some(t) = self.total_blocks {
            mad_config.total_blocks = t;
        }
        if let Some(o) = self.max_order {
            mad_config.max_order = o;
        }
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os("MAD_OUTPUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("mad-output"));
        let defaults = MonitorConfig::default();
        let grid = self
            .grid
            .as_deref()
            .map(SweepGrid::from_file)
            .transpose()
            .map_err(|e| e.to_string())?;
        let mut spec = ExperimentSpec::new(self.scenario, out);
        spec.allocator = self.allocator;
        spec.mad_config = mad_config;
        spec.n_allocs = self.allocs;
        spec.repetitions = self.reps;
        spec.seed_base = self.seed;
        spec.lb = self.lb;
        spec.ub = self.ub;
        spec.spray_fraction = self.spray_fraction;
        spec.round_budget = self.round_budget;
        spec.worst_case_budget = self.budget;
        spec.hold_blocks = self.hold_blocks;
        spec.monitor = MonitorConfig {
            window: self.window.unwrap_or(defaults.window),
            alarm_threshold: self.alarm_threshold.unwrap_or(defaults.alarm_threshold),
        };
        spec.grid = grid;
        spec.heatmap = self.heatmap_stride.map(|stride| HeatmapSpec {
            stride,
            width: self.heatmap_width,
        });
        spec.verify = self.verify;
        Ok(spec)
    }
}

fn main() -> ExitCode {
    let Command::Run(args) = Cli::parse().command;
    let spec = match args.spec() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("mad-sim: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let report = match experiment::run(&spec) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("mad-sim: {e}");
            return ExitCode::from(if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            });
        }
    };
    println!(
        "wrote {} artifacts and manifest.json to {}",
        report.artifacts.len(),
        spec.output_dir.display()
    );
    for c in &report.checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{mark} {}: {}", c.name, c.detail);
    }
    if args.check && !report.passed() {
        return ExitCode::from(EXIT_CHECK_FAILED);
    }
    ExitCode::SUCCESS
}
