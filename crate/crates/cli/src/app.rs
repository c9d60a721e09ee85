//! Flag parsing and exit codes for the `rdm` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rdm_core::datakit::SynthConfig;
use rdm_core::Error;

use crate::commands::{
    bench_csv, cmd_bench_attn, cmd_eval, cmd_init_weights, cmd_register, cmd_synth_pairs, cmd_train_toy, loss_trend,
    metric_line, BenchArgs, EvalArgs, RegisterArgs, SynthArgs, TrainArgs,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ARGUMENT: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_PARSE: u8 = 4;
pub const EXIT_DATA: u8 = 5;
pub const EXIT_NUMERIC: u8 = 6;

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  2  invalid argument or configuration
  3  file could not be read or written
  4  malformed input file
  5  data problem (too few correspondences, degenerate geometry, empty report, ...)
  6  numeric failure (non-finite training loss)";

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => EXIT_ARGUMENT,
        Error::Io { .. } => EXIT_IO,
        Error::Parse { .. } => EXIT_PARSE,
        Error::InsufficientData(_)
        | Error::DegenerateConfiguration(_)
        | Error::UndefinedMetric(_)
        | Error::InvalidSupervision(_)
        | Error::EvaluationFailure(_)
        | Error::Generation(_) => EXIT_DATA,
        Error::TrainingFailure(_) => EXIT_NUMERIC,
    }
}

#[derive(Parser, Debug)]
#[command(name = "rdm", version, about = "Coarse-to-fine point cloud registration", after_help = EXIT_CODES_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigFlags {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }
}

#[derive(Args, Debug, Clone)]
pub struct SceneFlags {
    /// Target overlap of generated pairs.
    #[arg(long, default_value_t = 0.6)]
    pub overlap: f64,
    /// Per-point noise standard deviation in metres.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

impl SceneFlags {
    fn synth(&self) -> SynthConfig {
        SynthConfig {
            overlap_target: self.overlap,
            noise_sigma: self.noise,
            ..SynthConfig::default()
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Registers a source scan onto a target scan.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Directory for pose.txt, correspondences.txt and metrics.txt.
        #[arg(long)]
        out: PathBuf,
        /// Pose file with the ground-truth source-to-target pose.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Trains a model on generated scene pairs.
    TrainToy {
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out_weights: PathBuf,
        /// Loss log CSV; defaults to the weights path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
        #[command(flatten)]
        scene: SceneFlags,
    },
    /// Evaluates every pair of a manifest.
    Eval {
        /// Manifest: `source.bin target.bin` plus 12 ground-truth numbers per line.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Directory for pairs.csv, summary.txt and sweep.csv.
        #[arg(long)]
        report: PathBuf,
        /// Worker threads; defaults to RDM_THREADS, then all cores.
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Times the attention stack per embedding kind and node count.
    BenchAttn {
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<usize>,
        /// rotary, vanilla, absolute, geometric.
        #[arg(long, value_delimiter = ',', required = true)]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes generated scan pairs and their manifest.
    SynthPairs {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1_000_000)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scene: SceneFlags,
    },
    /// Writes untrained weights for the configured architecture.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
}

/// Runs one parsed command, printing its results; returns the exit code.
pub fn run(cli: Cli) -> u8 {
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command) -> rdm_core::Result<()> {
    match command {
        Command::Register { source, target, weights, out, gt, cfg } => {
            let res = cmd_register(&RegisterArgs {
                source,
                target,
                weights,
                config: cfg.config.clone(),
                overrides: cfg.overrides(),
                out: out.clone(),
                gt,
            })?;
            println!(
                "pose written to {}; {} dense matches, {} inliers",
                out.join("pose.txt").display(),
                res.dense_matches,
                res.inliers
            );
            if let Some(m) = res.metrics {
                println!("{}", metric_line(&m));
            }
        }
        Command::TrainToy { scenes, epochs, out_weights, log, cfg, scene } => {
            let args = TrainArgs {
                scenes,
                epochs,
                config: cfg.config.clone(),
                overrides: cfg.overrides(),
                out_weights,
                log,
                synth: scene.synth(),
            };
            let outcome = cmd_train_toy(&args)?;
            println!("{} steps, {} skipped; log at {}", outcome.log.len(), outcome.skipped, args.log_path().display());
            if let Some((first, last)) = loss_trend(&outcome) {
                println!("mean total loss: first epoch {first}, last epoch {last}");
            }
        }
        Command::Eval { pairs, weights, report, threads, cfg } => {
            let out = cmd_eval(&EvalArgs {
                pairs,
                weights,
                config: cfg.config.clone(),
                overrides: cfg.overrides(),
                report,
                threads,
            })?;
            for (id, msg) in &out.failures {
                eprintln!("pair {id} failed: {msg}");
            }
            print!("{}", out.summary.to_text());
        }
        Command::BenchAttn { nodes, kinds, repeats, dim, rounds, seed, out } => {
            let rows = cmd_bench_attn(&BenchArgs {
                nodes,
                kinds,
                repeats,
                dim,
                rounds,
                seed,
            })?;
            let csv = bench_csv(&rows);
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?,
                None => print!("{csv}"),
            }
        }
        Command::SynthPairs { count, seed, out, scene } => {
            let manifest = cmd_synth_pairs(&SynthArgs {
                count,
                seed,
                out,
                synth: scene.synth(),
            })?;
            println!("{}", manifest.display());
        }
        Command::InitWeights { out, cfg } => {
            cmd_init_weights(cfg.config.as_deref(), &cfg.overrides(), &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
