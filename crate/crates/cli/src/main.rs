use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use layerprobe::eval::AggregationMode;

mod commands;
mod config;

use config::Overrides;

/// Layer-wise linear probes over frozen speech-model embeddings.
#[derive(Debug, Parser)]
#[command(name = "layerprobe", version)]
struct Cli {
    /// Worker threads (defaults to the number of processors).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a corpus manifest and report every violation.
    Validate {
        manifest: PathBuf,
        /// Also require every audio file to exist.
        #[arg(long)]
        check_audio: bool,
    },
    /// Write a balanced two-class synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        speakers: usize,
        #[arg(long, default_value_t = 11)]
        samples_per_speaker: usize,
        /// Distance between class means in units of the within-class std.
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Length of each recording in seconds.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Extract and pool embeddings for every recording into the cache.
    Extract {
        #[command(flatten)]
        run: RunArgs,
        /// Re-extract recordings that are already cached.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate one probe per (layer, fold).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Recompute even when the output directory is up to date.
        #[arg(long)]
        force: bool,
        /// Print the job plan and exit without touching anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Render tables and the plot from accuracy tables or prediction dumps.
    Report {
        /// `.json` tables and/or `.jsonl` prediction dumps; models are merged.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Aggregation used when re-voting prediction dumps.
        #[arg(long, value_enum)]
        aggregation: Option<Aggregation>,
    },
    /// Check the pretraining losses and their gradients numerically.
    #[command(name = "losses-selfcheck")]
    LossesSelfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Aggregation {
    PooledSpeakers,
    MeanOfFolds,
}

impl From<Aggregation> for AggregationMode {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::PooledSpeakers => AggregationMode::PooledSpeakers,
            Aggregation::MeanOfFolds => AggregationMode::MeanOfFolds,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Defaults to the config value, then $LAYERPROBE_CACHE.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// `synthetic:<seed>`
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Probe training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `all`, `13`, `1-4` or `1,5,9-12`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_enum)]
    aggregation: Option<Aggregation>,
}

impl RunArgs {
    fn split(self) -> (Option<PathBuf>, Overrides) {
        let overrides = Overrides {
            manifest: self.manifest,
            cache_dir: self.cache_dir,
            output_dir: self.output_dir,
            adapter: self.adapter,
            k: self.k,
            split_seed: self.split_seed,
            seed: self.seed,
            layers: self.layers,
            aggregation_mode: self.aggregation.map(Into::into),
        };
        (self.config, overrides)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }

    let result = match cli.command {
        Command::Validate { manifest, check_audio } => commands::validate(&manifest, check_audio),
        Command::Synth {
            out,
            speakers,
            samples_per_speaker,
            separation,
            seed,
            duration,
        } => commands::synth(
            &out,
            layerprobe::synth::SynthParams {
                n_speakers: speakers,
                samples_per_speaker,
                separation,
                seed,
                duration_s: duration,
            },
        ),
        Command::Extract { run, force } => {
            let (config, overrides) = run.split();
            commands::extract(config.as_deref(), overrides, force)
        }
        Command::Sweep { run, force, dry_run } => {
            let (config, overrides) = run.split();
            commands::sweep(config.as_deref(), overrides, force, dry_run)
        }
        Command::Report {
            inputs,
            output_dir,
            aggregation,
        } => commands::report(&inputs, output_dir.as_deref(), aggregation.map(Into::into).unwrap_or_default()),
        Command::LossesSelfcheck { seed } => commands::losses_selfcheck(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
