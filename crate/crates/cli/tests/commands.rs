use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rdm_cli::app::{EXIT_ARGUMENT, EXIT_DATA, EXIT_IO, EXIT_NUMERIC, EXIT_PARSE};
use rdm_cli::commands::{cmd_eval, cmd_synth_pairs, EvalArgs, SynthArgs};
use rdm_cli::manifest::manifest_line;
use rdm_core::datakit::{read_pose_file, write_pose_file, SynthConfig};
use rdm_core::evalkit::{parse_pair_csv, relative_errors, summarize};
use rdm_core::geometry::RigidTransform;
use rdm_core::model::Model;
use rdm_core::config::Config;

fn rdm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rdm")).args(args).output().expect("binary runs")
}

fn code(out: &std::process::Output) -> u8 {
    out.status.code().expect("exited normally") as u8
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small architecture so the end-to-end runs stay quick.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.conf");
    fs::write(&path, "feature_dim = 16\nlayers = 1\nnum_coarse = 16\nmax_fine_pairs = 8\nsinkhorn_iters = 20\n").unwrap();
    path
}

fn synth_pairs(dir: &Path, count: usize) -> PathBuf {
    cmd_synth_pairs(&SynthArgs {
        count,
        seed: 77,
        out: dir.join("pairs"),
        synth: SynthConfig::default(),
    })
    .unwrap()
}

#[test]
fn self_registration_with_untrained_weights_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let weights = dir.path().join("w.ckpt");
    let out = rdm(&["init-weights", "--config", s(&cfg), "--out", s(&weights)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = synth_pairs(dir.path(), 1);
    let scan = manifest.parent().unwrap().join("pair0000_src.bin");
    let gt = dir.path().join("gt.txt");
    write_pose_file(&gt, &[RigidTransform::identity()]).unwrap();
    let res = dir.path().join("res");
    let out = rdm(&[
        "register", "--source", s(&scan), "--target", s(&scan), "--weights", s(&weights), "--config", s(&cfg),
        "--out", s(&res), "--gt", s(&gt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pose = read_pose_file(&res.join("pose.txt")).unwrap()[0];
    let (rre, rte) = relative_errors(&pose, &RigidTransform::identity());
    assert!(rte < 0.6 && rre < 1.0, "rre {rre} rte {rte}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("registered=true"), "{stdout}");
    assert!(fs::read_to_string(res.join("correspondences.txt")).unwrap().starts_with("# coarse"));
    assert!(fs::read_to_string(res.join("metrics.txt")).unwrap().starts_with("ir="));
}

#[test]
fn missing_input_exits_with_io_code_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.bin");
    let out = rdm(&[
        "register", "--source", s(&missing), "--target", s(&missing), "--weights", "w", "--out", s(dir.path()),
    ]);
    assert_eq!(code(&out), EXIT_IO);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.bin"));
}

#[test]
fn argument_and_parse_errors_have_distinct_codes() {
    assert_eq!(code(&rdm(&["register"])), EXIT_ARGUMENT);
    assert_eq!(code(&rdm(&["bench-attn", "--nodes", "10", "--kinds", "spiral"])), EXIT_ARGUMENT);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "feature_dim = 16\nthis line is wrong\n").unwrap();
    let out = rdm(&["init-weights", "--config", s(&bad), "--out", s(&dir.path().join("w"))]);
    assert_eq!(code(&out), EXIT_PARSE);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
    let help = String::from_utf8_lossy(&rdm(&["--help"]).stdout).to_string();
    assert!(help.contains("Exit codes"));
}

#[test]
fn train_toy_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str| {
        let w = dir.path().join(format!("{name}.ckpt"));
        let log = dir.path().join(format!("{name}.csv"));
        let out = rdm(&[
            "train-toy", "--scenes", "1", "--epochs", "1", "--config", s(&cfg), "--out-weights", s(&w), "--log",
            s(&log), "--seed", "5",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (fs::read_to_string(&log).unwrap(), fs::read(&w).unwrap())
    };
    let (log_a, w_a) = run("a");
    let (log_b, w_b) = run("b");
    assert_eq!(log_a, log_b);
    assert_eq!(w_a, w_b);
    let mut lines = log_a.lines();
    assert_eq!(lines.next(), Some("step,L_s1,L_s2,L_c,L_f,total,lr"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), 7);
    assert!(row.iter().all(|v| v.is_finite()));
}

#[test]
fn non_finite_loss_is_a_training_failure_that_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let w = dir.path().join("w.ckpt");
    // an enormous circle-loss scale overflows on the first step
    let out = rdm(&[
        "train-toy", "--scenes", "1", "--epochs", "2", "--config", s(&cfg), "--out-weights", s(&w), "--set",
        "gamma=1e308", "--seed", "3",
    ]);
    assert_eq!(code(&out), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    let mut c = Config::default();
    c.apply_text(&fs::read_to_string(&cfg).unwrap(), &cfg).unwrap();
    let kept = Model::load(&w).unwrap();
    let initial = Model::random(c.model_config().arch, 3).unwrap();
    assert_eq!(kept.to_tensors(), initial.to_tensors());
}

#[test]
fn eval_of_identical_pairs_and_reaggregation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let weights = dir.path().join("w.ckpt");
    let mut cfg = Config::default();
    cfg.apply_text(&fs::read_to_string(&cfg_path).unwrap(), &cfg_path).unwrap();
    Model::random(cfg.model_config().arch, 0).unwrap().save(&weights).unwrap();

    let manifest = synth_pairs(dir.path(), 3);
    // identical-cloud pairs: each source against itself, plus a missing file in the middle
    let pairs_dir = manifest.parent().unwrap();
    let id = RigidTransform::identity();
    let text = [
        manifest_line("pair0000_src.bin", "pair0000_src.bin", &id),
        manifest_line("gone.bin", "pair0001_src.bin", &id),
        manifest_line("pair0002_src.bin", "pair0002_src.bin", &id),
    ]
    .join("\n");
    let same = pairs_dir.join("same.txt");
    fs::write(&same, text).unwrap();
    let out = cmd_eval(&EvalArgs {
        pairs: same,
        weights: weights.clone(),
        config: Some(cfg_path.clone()),
        overrides: vec![],
        report: dir.path().join("same_report"),
        threads: Some(2),
    })
    .unwrap();
    assert_eq!(out.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["0000", "0001", "0002"]);
    assert!(out.records[1].result.is_none());
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.summary.failures, 1);
    for i in [0, 2] {
        let r = out.records[i].result.unwrap();
        assert!(r.registered && r.rre < 1.0 && r.rte < cfg.fine_voxel, "{r:?}");
    }

    // the summary is a pure function of the per-pair CSV
    let report = dir.path().join("report");
    let out = cmd_eval(&EvalArgs {
        pairs: manifest,
        weights,
        config: Some(cfg_path),
        overrides: vec![],
        report: report.clone(),
        threads: Some(1),
    })
    .unwrap();
    let parsed = parse_pair_csv(&fs::read_to_string(report.join("pairs.csv")).unwrap()).unwrap();
    let again = summarize(&parsed, cfg.fmr_threshold, cfg.rr_rotation_deg, cfg.rr_translation).unwrap();
    assert_eq!(again, out.summary);
    assert!(fs::read_to_string(report.join("summary.txt")).unwrap().contains("rr = "));
    assert!(fs::read_to_string(report.join("sweep.csv")).unwrap().starts_with("metric,threshold,recall"));
}

#[test]
fn empty_manifest_is_an_undefined_metric() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.txt");
    fs::write(&manifest, "# no pairs\n").unwrap();
    let out = rdm(&[
        "eval", "--pairs", s(&manifest), "--weights", "unused", "--report", s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&out), EXIT_DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("undefined metric"));
}

#[test]
fn bench_attn_writes_one_row_per_kind_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = rdm(&["bench-attn", "--nodes", "100", "--kinds", "rotary", "--repeats", "2", "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "kind,nodes,median_ms,peak_aux_bytes");
    assert_eq!(rows.len(), 2);
    let f: Vec<&str> = rows[1].split(',').collect();
    assert_eq!((f[0], f[1]), ("rotary", "100"));
    assert!(f[2].parse::<f64>().unwrap() > 0.0);
    // the binary installs the counting allocator
    assert!(f[3].parse::<usize>().unwrap() > 0);
}

#[test]
fn synth_pairs_writes_a_readable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = rdm(&["synth-pairs", "--count", "2", "--seed", "9", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let entries = rdm_cli::manifest::read_manifest(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(entries.len(), 2);
    assert!(entries.iter().all(|e| e.source.exists() && e.target.exists()));
    // same seed, same scene
    let again = rdm_core::datakit::synth_scene_pair(9, &SynthConfig::default()).unwrap();
    assert_eq!(entries[0].gt, again.gt_relative);
}
