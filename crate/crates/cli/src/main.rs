use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod config;
mod output;

pub const EXIT_FAILED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_INCONCLUSIVE: u8 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(name = "hierperc", version, about = "Percolation experiments on the hierarchical lattice")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub run: RunArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Dimension.
    #[arg(long, global = true, default_value_t = 1)]
    pub d: u32,

    /// Side length of the blocks.
    #[arg(long = "L", global = true, default_value_t = 2)]
    pub l: u64,

    #[arg(long, global = true, default_value_t = 0.5)]
    pub alpha: f64,

    /// Coupling, or `auto` to use a cached or freshly bisected estimate of the critical point.
    #[arg(long, global = true, default_value = "auto")]
    pub beta: String,

    /// Relative bracket width for the critical-point search.
    #[arg(long, global = true, default_value_t = 0.05)]
    pub tolerance: f64,

    /// Work budget of the critical-point search, in revealed vertices.
    #[arg(long, global = true, default_value_t = 600_000_000)]
    pub budget: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Defaults to HIERPERC_SEED, then 1.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    /// Output directory, or `-` to write the CSV to stdout.
    #[arg(long, global = true, default_value = ".")]
    pub out: String,

    /// Config file of `key = value` lines; its values override flags.
    #[arg(long, global = true)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Explorer,
    Blocks,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Bracket the critical coupling by bisection on the scale flow.
    Betac {
        #[arg(long, default_value_t = 12)]
        n_start: u32,
        #[arg(long, default_value_t = 60)]
        n_max: u32,
        #[arg(long, default_value_t = 4)]
        window: u32,
        #[arg(long, default_value_t = 256)]
        reps_start: u64,
        #[arg(long, default_value_t = 4096)]
        reps_max: u64,
        #[arg(long, value_enum, default_value_t = Source::Explorer)]
        estimator: Source,
        /// Also locate the zero crossing of the flow slope at this scale.
        #[arg(long)]
        refine_n: Option<u32>,
        #[arg(long, default_value_t = 16384)]
        refine_reps: u64,
        #[arg(long, default_value_t = 5)]
        refine_points: usize,
    },
    /// Cluster sizes of whole blocks.
    Sample {
        #[arg(long)]
        n: u32,
        #[arg(long, default_value_t = 1)]
        reps: u64,
        /// Top-layer time as a fraction of t_n.
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// Use the periodic kernel.
        #[arg(long)]
        periodic: bool,
    },
    /// E|K_{n,t}|^p from whole-block samples.
    Moments {
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        p: Vec<u32>,
        /// Top-layer times as fractions of t_n.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        t: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        reps: u64,
    },
    /// Survival function of the origin's cluster size and its log-log slope.
    Tail {
        #[arg(long, default_value_t = 60)]
        n: u32,
        #[arg(long, default_value_t = 20000)]
        reps: u64,
        #[arg(long, default_value_t = 100_000)]
        cap: u64,
        #[arg(long, default_value_t = 4)]
        per_decade: u32,
        #[arg(long, value_enum, default_value_t = Source::Explorer)]
        source: Source,
    },
    /// Moments of the size-biased, mean-rescaled cluster size.
    Sizebias {
        #[arg(long)]
        n: u32,
        #[arg(long, default_value_t = 100_000)]
        reps: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        p: Vec<u32>,
        #[arg(long, value_enum, default_value_t = Source::Explorer)]
        source: Source,
    },
    /// E‖L^{-(d+α)n/2} X_n‖_p^p across scales.
    Lpnorm {
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        p: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        reps: u64,
    },
    /// Connection probability against distance L^h.
    Twopoint {
        #[arg(long)]
        n: u32,
        #[arg(long, default_value_t = 1000)]
        reps: u64,
    },
    /// A plain multiplicative coalescent from a mass list.
    Coalescent {
        #[arg(long, value_delimiter = ',', required = true)]
        masses: Vec<u64>,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 10000)]
        reps: u64,
    },
    /// Iterate the renormalization map from the Dirac law at √β.
    Renorm {
        #[arg(long, default_value_t = 6)]
        steps: u32,
        #[arg(long, default_value_t = 10000)]
        draws: usize,
        /// Compare every step with direct samples.
        #[arg(long)]
        bridge: bool,
    },
    /// Run the oracle and identity suite.
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Betac { .. } => "betac",
            Command::Sample { .. } => "sample",
            Command::Moments { .. } => "moments",
            Command::Tail { .. } => "tail",
            Command::Sizebias { .. } => "sizebias",
            Command::Lpnorm { .. } => "lpnorm",
            Command::Twopoint { .. } => "twopoint",
            Command::Coalescent { .. } => "coalescent",
            Command::Renorm { .. } => "renorm",
            Command::Verify => "verify",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os().collect()))
}

/// Parses `argv` (config file applied) and runs the command.
pub fn run(argv: Vec<OsString>) -> u8 {
    let argv = match config::apply_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
