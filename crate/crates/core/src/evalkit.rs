//! Registration metrics, trajectory error statistics and report formats.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::matching::DenseMatch;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairResult {
    pub inlier_ratio: f64,
    pub rre: f64,
    pub rte: f64,
    pub registered: bool,
}

impl PairResult {
    pub fn new(inlier_ratio: f64, rre: f64, rte: f64, rot_thr: f64, trans_thr: f64) -> Self {
        PairResult {
            inlier_ratio,
            rre,
            rte,
            registered: rre <= rot_thr && rte <= trans_thr,
        }
    }
}

/// Fraction of matches whose ground-truth residual `‖gt(a) − b‖` is within
/// `threshold`.
pub fn inlier_ratio(
    matches: &[DenseMatch],
    pa: &[Point3],
    pb: &[Point3],
    gt: &RigidTransform,
    threshold: f64,
) -> Result<f64> {
    if matches.is_empty() {
        return Err(Error::UndefinedMetric("inlier ratio of zero correspondences".into()));
    }
    let mut inliers = 0usize;
    for m in matches {
        let (Some(a), Some(b)) = (pa.get(m.a), pb.get(m.b)) else {
            return Err(Error::invalid("correspondence index out of range"));
        };
        if (gt.apply(a) - b).norm() <= threshold {
            inliers += 1;
        }
    }
    Ok(inliers as f64 / matches.len() as f64)
}

/// Fraction of pairs whose inlier ratio is strictly above `ir_threshold`.
pub fn feature_match_recall(irs: &[f64], ir_threshold: f64) -> Result<f64> {
    if irs.is_empty() {
        return Err(Error::UndefinedMetric("feature match recall of zero pairs".into()));
    }
    Ok(irs.iter().filter(|&&ir| ir > ir_threshold).count() as f64 / irs.len() as f64)
}

/// Rotation error (geodesic angle, degrees) and translation error (meters).
pub fn relative_errors(est: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let r = gt.rotation.transpose() * est.rotation;
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // Same angle as acos(c), but atan2 keeps full precision near 0° and 180°.
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    (s.atan2(c).to_degrees(), (est.translation - gt.translation).norm())
}

/// Fraction of pairs with `rre ≤ rot_thr` and `rte ≤ trans_thr`.
pub fn registration_recall(results: &[PairResult], rot_thr: f64, trans_thr: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("registration recall of zero pairs".into()));
    }
    let ok = results
        .iter()
        .filter(|r| r.rre <= rot_thr && r.rte <= trans_thr)
        .count();
    Ok(ok as f64 / results.len() as f64)
}

/// Absolute poses from relative ones: element 0 is the identity and element
/// `k` is `rel[0] ∘ … ∘ rel[k-1]`.
pub fn chain_trajectory(relative: &[RigidTransform]) -> Vec<RigidTransform> {
    let mut out = Vec::with_capacity(relative.len() + 1);
    let mut cur = RigidTransform::identity();
    out.push(cur);
    for r in relative {
        cur = cur.compose(r);
        out.push(cur);
    }
    out
}

/// Absolute pose error statistics: rotation in degrees, translation in cm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrajectoryStats {
    pub rot_rmse: f64,
    pub rot_mae: f64,
    pub rot_std: f64,
    pub trans_rmse: f64,
    pub trans_mae: f64,
    pub trans_std: f64,
}

fn moments(errs: &[f64]) -> (f64, f64, f64) {
    let n = errs.len() as f64;
    let mae = errs.iter().sum::<f64>() / n;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (errs.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n).sqrt();
    (rmse, mae, std)
}

pub fn trajectory_stats(est: &[RigidTransform], gt: &[RigidTransform]) -> Result<TrajectoryStats> {
    if est.len() != gt.len() {
        return Err(Error::invalid(format!(
            "trajectory lengths differ: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::UndefinedMetric("empty trajectory".into()));
    }
    let (rot, trans): (Vec<f64>, Vec<f64>) = est
        .iter()
        .zip(gt)
        .map(|(e, g)| {
            let (r, t) = relative_errors(e, g);
            (r, t * 100.0)
        })
        .unzip();
    let (rot_rmse, rot_mae, rot_std) = moments(&rot);
    let (trans_rmse, trans_mae, trans_std) = moments(&trans);
    Ok(TrajectoryStats {
        rot_rmse,
        rot_mae,
        rot_std,
        trans_rmse,
        trans_mae,
        trans_std,
    })
}

/// One evaluated pair; `result` is `None` when the pipeline failed on it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub result: Option<PairResult>,
}

pub const PAIR_CSV_HEADER: &str = "pair_id,ir,rre_deg,rte_m,registered";

/// Per-pair CSV. Failed pairs have `nan` metrics and `registered = false`.
pub fn pair_csv(records: &[PairRecord]) -> String {
    let mut s = String::from(PAIR_CSV_HEADER);
    s.push('\n');
    for r in records {
        match r.result {
            Some(p) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.id, p.inlier_ratio, p.rre, p.rte, p.registered
                );
            }
            None => {
                let _ = writeln!(s, "{},nan,nan,nan,false", r.id);
            }
        }
    }
    s
}

/// Parses [`pair_csv`] output.
pub fn parse_pair_csv(text: &str) -> std::result::Result<Vec<PairRecord>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PAIR_CSV_HEADER) {
        return Err("missing pair CSV header".into());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 5 {
                return Err(format!("line {}: expected 5 fields", i + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: bad number '{s}'", i + 2));
            let ir = num(f[1])?;
            let result = if ir.is_nan() {
                None
            } else {
                Some(PairResult {
                    inlier_ratio: ir,
                    rre: num(f[2])?,
                    rte: num(f[3])?,
                    registered: f[4] == "true",
                })
            };
            Ok(PairRecord {
                id: f[0].to_string(),
                result,
            })
        })
        .collect()
}

/// Aggregate over a report. Means run over the successful pairs; recalls
/// count failed pairs as misses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub pairs: usize,
    pub failures: usize,
    pub ir_mean: f64,
    pub fmr: f64,
    pub rr: f64,
    pub rre_mean: f64,
    pub rte_mean: f64,
}

pub fn summarize(records: &[PairRecord], fmr_threshold: f64, rot_thr: f64, trans_thr: f64) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no pairs to summarize".into()));
    }
    let ok: Vec<PairResult> = records.iter().filter_map(|r| r.result).collect();
    let n = records.len() as f64;
    let mean = |f: fn(&PairResult) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(f).sum::<f64>() / ok.len() as f64
        }
    };
    let fmr_hits = ok.iter().filter(|r| r.inlier_ratio > fmr_threshold).count() as f64;
    let rr_hits = ok
        .iter()
        .filter(|r| r.rre <= rot_thr && r.rte <= trans_thr)
        .count() as f64;
    Ok(Summary {
        pairs: records.len(),
        failures: records.len() - ok.len(),
        ir_mean: mean(|r| r.inlier_ratio),
        fmr: fmr_hits / n,
        rr: rr_hits / n,
        rre_mean: mean(|r| r.rre),
        rte_mean: mean(|r| r.rte),
    })
}

impl Summary {
    /// `key = value` block.
    pub fn to_text(&self) -> String {
        format!(
            "pairs = {}\nfailures = {}\nir_mean = {}\nfmr = {}\nrr = {}\nrre_mean_deg = {}\nrte_mean_m = {}\n",
            self.pairs, self.failures, self.ir_mean, self.fmr, self.rr, self.rre_mean, self.rte_mean
        )
    }
}

/// Recall curves: for each rotation threshold (translation fixed at
/// `trans_thr`) and each translation threshold (rotation fixed at `rot_thr`).
/// Rows are `metric,threshold,recall`.
pub fn threshold_sweep_csv(
    results: &[PairResult],
    rot_thresholds: &[f64],
    trans_thresholds: &[f64],
    rot_thr: f64,
    trans_thr: f64,
) -> Result<String> {
    let mut s = String::from("metric,threshold,recall\n");
    for &t in rot_thresholds {
        let _ = writeln!(s, "rre_deg,{t},{}", registration_recall(results, t, trans_thr)?);
    }
    for &t in trans_thresholds {
        let _ = writeln!(s, "rte_m,{t},{}", registration_recall(results, rot_thr, t)?);
    }
    Ok(s)
}
