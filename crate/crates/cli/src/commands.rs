//! The subcommands as plain functions; [`crate::app`] maps flags onto them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rdm_core::config::Config;
use rdm_core::datakit::{read_pose_file, read_scan_bin, synth_scene_pair, write_pose_file, write_scan_bin, SynthConfig};
use rdm_core::evalkit::{
    inlier_ratio, pair_csv, relative_errors, summarize, threshold_sweep_csv, PairRecord, PairResult, Summary,
};
use rdm_core::geometry::{Point3, RigidTransform};
use rdm_core::matching::format_correspondences;
use rdm_core::model::{register, Model, ModelConfig, Registration};
use rdm_core::numerics::Matrix;
use rdm_core::roformer::{roformer_stack_streamed, AttentionWeights, EmbeddingKind};
use rdm_core::train::{epoch_means, train_to_files, TrainOutcome};
use rdm_core::{Error, Result};

use crate::alloc;
use crate::manifest::{manifest_line, read_manifest};

/// Rotation thresholds (degrees) of the recall sweep.
pub const SWEEP_ROTATION_DEG: [f64; 10] = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0];
/// Translation thresholds (metres) of the recall sweep.
pub const SWEEP_TRANSLATION_M: [f64; 10] = [0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0];

/// Environment variable capping the evaluation worker count.
pub const THREADS_ENV: &str = "RDM_THREADS";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Defaults, then the file, then `key=value` overrides, then validation.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text, path)?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override `{o}` is not key=value")))?;
        cfg.set(k, v).map_err(Error::InvalidArgument)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Model settings from `cfg` with the architecture taken from the weights.
pub fn model_config_for(cfg: &Config, model: &Model) -> ModelConfig {
    ModelConfig {
        arch: model.arch,
        ..cfg.model_config()
    }
}

pub fn pair_metrics(reg: &Registration, gt: &RigidTransform, cfg: &Config) -> Result<PairResult> {
    let m = &reg.matches;
    let ir = inlier_ratio(&m.dense, &m.fine_a, &m.fine_b, gt, cfg.inlier_threshold)?;
    let (rre, rte) = relative_errors(&reg.pose.transform, gt);
    Ok(PairResult::new(ir, rre, rte, cfg.rr_rotation_deg, cfg.rr_translation))
}

pub fn metric_line(r: &PairResult) -> String {
    format!("ir={} rre_deg={} rte_m={} registered={}", r.inlier_ratio, r.rre, r.rte, r.registered)
}

#[derive(Clone, Debug)]
pub struct RegisterArgs {
    pub source: PathBuf,
    pub target: PathBuf,
    pub weights: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Output directory for `pose.txt`, `correspondences.txt` and, with a
    /// ground truth, `metrics.txt`.
    pub out: PathBuf,
    /// Pose file whose first line is the ground-truth source-to-target pose.
    pub gt: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RegisterOutput {
    pub pose: RigidTransform,
    pub inliers: usize,
    pub dense_matches: usize,
    pub metrics: Option<PairResult>,
}

pub fn cmd_register(args: &RegisterArgs) -> Result<RegisterOutput> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let source = read_scan_bin(&args.source)?;
    let target = read_scan_bin(&args.target)?;
    let model = Model::load(&args.weights)?;
    let gt = match &args.gt {
        Some(p) => Some(*read_pose_file(p)?.first().ok_or_else(|| Error::Parse {
            path: p.clone(),
            line: 0,
            message: "ground-truth file holds no pose".into(),
        })?),
        None => None,
    };
    let reg = register(&model, &model_config_for(&cfg, &model), &cfg.estimator_config(), &source, &target)?;
    create_dir(&args.out)?;
    write_pose_file(&args.out.join("pose.txt"), &[reg.pose.transform])?;
    write(
        &args.out.join("correspondences.txt"),
        &format_correspondences(&reg.matches.coarse, &reg.matches.dense),
    )?;
    let metrics = match gt {
        Some(gt) => {
            let m = pair_metrics(&reg, &gt, &cfg)?;
            write(&args.out.join("metrics.txt"), &format!("{}\n", metric_line(&m)))?;
            Some(m)
        }
        None => None,
    };
    Ok(RegisterOutput {
        pose: reg.pose.transform,
        inliers: reg.pose.inlier_count,
        dense_matches: reg.matches.dense.len(),
        metrics,
    })
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub scenes: usize,
    pub epochs: usize,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out_weights: PathBuf,
    /// Loss log; defaults to the weights path with a `.csv` extension.
    pub log: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl TrainArgs {
    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| self.out_weights.with_extension("csv"))
    }
}

pub fn cmd_train_toy(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    train_to_files(&cfg, args.scenes, args.epochs, &args.synth, &args.out_weights, &args.log_path())
}

/// First and last epoch means of a finished run.
pub fn loss_trend(outcome: &TrainOutcome) -> Option<(f64, f64)> {
    let means = epoch_means(&outcome.log);
    Some((*means.first()?, *means.last()?))
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub pairs: PathBuf,
    pub weights: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Output directory for `pairs.csv`, `summary.txt` and `sweep.csv`.
    pub report: PathBuf,
    /// Worker cap; `None` reads the environment.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub records: Vec<PairRecord>,
    pub summary: Summary,
    /// `(pair id, message)` for every pair the pipeline failed on.
    pub failures: Vec<(String, String)>,
}

/// Worker count: explicit value, else the environment, else all cores.
pub fn worker_count(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return if n == 0 {
            Err(Error::InvalidArgument("thread count must be at least 1".into()))
        } else {
            Ok(n)
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidArgument(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let entries = read_manifest(&args.pairs)?;
    if entries.is_empty() {
        return Err(Error::UndefinedMetric(format!("{} lists no pairs", args.pairs.display())));
    }
    let model = Model::load(&args.weights)?;
    let model_cfg = model_config_for(&cfg, &model);
    let est = cfg.estimator_config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(args.threads)?)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<PairResult>> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let a = read_scan_bin(&e.source)?;
                let b = read_scan_bin(&e.target)?;
                let reg = register(&model, &model_cfg, &est, &a, &b)?;
                pair_metrics(&reg, &e.gt, &cfg)
            })
            .collect()
    });
    let mut records = Vec::with_capacity(entries.len());
    let mut failures = Vec::new();
    for (i, r) in outcomes.into_iter().enumerate() {
        let id = format!("{i:04}");
        match r {
            Ok(p) => records.push(PairRecord { id, result: Some(p) }),
            Err(e) => {
                failures.push((id.clone(), e.to_string()));
                records.push(PairRecord { id, result: None });
            }
        }
    }
    let summary = summarize(&records, cfg.fmr_threshold, cfg.rr_rotation_deg, cfg.rr_translation)?;
    // failed pairs count as misses at every threshold
    let swept: Vec<PairResult> = records
        .iter()
        .map(|r| {
            r.result.unwrap_or(PairResult {
                inlier_ratio: 0.0,
                rre: f64::INFINITY,
                rte: f64::INFINITY,
                registered: false,
            })
        })
        .collect();
    let sweep = threshold_sweep_csv(
        &swept,
        &SWEEP_ROTATION_DEG,
        &SWEEP_TRANSLATION_M,
        cfg.rr_rotation_deg,
        cfg.rr_translation,
    )?;
    create_dir(&args.report)?;
    write(&args.report.join("pairs.csv"), &pair_csv(&records))?;
    let mut summary_text = summary.to_text();
    for (id, msg) in &failures {
        let _ = writeln!(summary_text, "failure.{id} = {msg}");
    }
    write(&args.report.join("summary.txt"), &summary_text)?;
    write(&args.report.join("sweep.csv"), &sweep)?;
    Ok(EvalOutput {
        records,
        summary,
        failures,
    })
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub nodes: Vec<usize>,
    pub kinds: Vec<String>,
    pub repeats: usize,
    pub dim: usize,
    pub rounds: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: EmbeddingKind,
    pub nodes: usize,
    pub median_ms: f64,
    /// Peak bytes allocated above the starting level; `None` without the
    /// counting allocator.
    pub peak_aux_bytes: Option<usize>,
}

pub const BENCH_CSV_HEADER: &str = "kind,nodes,median_ms,peak_aux_bytes";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        let bytes = r.peak_aux_bytes.map_or("nan".to_string(), |b| b.to_string());
        let _ = writeln!(s, "{},{},{},{}", r.kind, r.nodes, r.median_ms, bytes);
    }
    s
}

fn random_cloud(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> (Matrix, Vec<Point3>) {
    use rand::Rng;
    let f = Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
    let p = (0..n)
        .map(|_| Point3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-2.0..4.0)))
        .collect();
    (f, p)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the inference stack of each kind on random clouds of each size
/// (both clouds of that size).
pub fn cmd_bench_attn(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let kinds: Vec<EmbeddingKind> = args.kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?;
    if args.nodes.is_empty() || args.nodes.contains(&0) {
        return Err(Error::InvalidArgument("node counts must be at least 1".into()));
    }
    if args.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &kind in &kinds {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let weights = AttentionWeights::random(kind, args.dim, args.rounds, 1, &mut rng)?;
        for &n in &args.nodes {
            let (fa, pa) = random_cloud(n, args.dim, &mut rng);
            let (fb, pb) = random_cloud(n, args.dim, &mut rng);
            let mut times = Vec::with_capacity(args.repeats);
            let mut peak = 0usize;
            for _ in 0..args.repeats {
                let start = Instant::now();
                let (out, bytes) = alloc::measure_peak(|| roformer_stack_streamed(&fa, &pa, &fb, &pb, &weights));
                times.push(start.elapsed().as_secs_f64() * 1e3);
                out?;
                peak = peak.max(bytes);
            }
            rows.push(BenchRow {
                kind,
                nodes: n,
                median_ms: median(times),
                peak_aux_bytes: alloc::is_active().then_some(peak),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub synth: SynthConfig,
}

/// Writes `count` generated pairs and `manifest.txt` into `out`; returns
/// the manifest path.
pub fn cmd_synth_pairs(args: &SynthArgs) -> Result<PathBuf> {
    create_dir(&args.out)?;
    let mut manifest = String::new();
    for i in 0..args.count {
        let pair = synth_scene_pair(args.seed.wrapping_add(i as u64), &args.synth)?;
        let (src, tgt) = (format!("pair{i:04}_src.bin"), format!("pair{i:04}_tgt.bin"));
        write_scan_bin(&args.out.join(&src), &pair.source.cloud)?;
        write_scan_bin(&args.out.join(&tgt), &pair.target.cloud)?;
        manifest.push_str(&manifest_line(&src, &tgt, &pair.gt_relative));
        manifest.push('\n');
    }
    let path = args.out.join("manifest.txt");
    write(&path, &manifest)?;
    Ok(path)
}

/// Writes freshly initialized weights for the configured architecture.
pub fn cmd_init_weights(config: Option<&Path>, overrides: &[String], out: &Path) -> Result<Model> {
    let cfg = load_config(config, overrides)?;
    let model = Model::random(cfg.model_config().arch, cfg.seed)?;
    model.save(out)?;
    Ok(model)
}
