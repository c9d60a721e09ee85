//! Rigid pose estimation from correspondences.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::matching::DenseMatch;

/// Weighted point pair `(a, b, w)` asking for `R a + t ≈ b`.
pub type WeightedPair = (Point3, Point3, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    pub inlier_count: usize,
    pub inlier_threshold: f64,
    pub converged: bool,
    /// Inlier count after the initial hypothesis and after each accepted
    /// refinement round.
    pub inlier_history: Vec<usize>,
}

/// Closed-form minimizer of `Σ w ‖R a + t − b‖²` with `det R = +1`.
pub fn weighted_svd(pairs: &[WeightedPair]) -> Result<RigidTransform> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "weighted SVD needs 3 correspondences, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|p| !(p.2 >= 0.0) || !p.2.is_finite()) {
        return Err(Error::DegenerateConfiguration("weights must be finite and nonnegative".into()));
    }
    let total: f64 = pairs.iter().map(|p| p.2).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateConfiguration("total weight is zero".into()));
    }
    let mut ca = Vector3::zeros();
    let mut cb = Vector3::zeros();
    for (a, b, w) in pairs {
        ca += a.coords * *w;
        cb += b.coords * *w;
    }
    ca /= total;
    cb /= total;
    let mut h = Matrix3::zeros();
    for (a, b, w) in pairs {
        h += (a.coords - ca) * (b.coords - cb).transpose() * (*w / total);
    }
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let mut sv = [s[0], s[1], s[2]];
    sv.sort_by(|x, y| y.total_cmp(x));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "correspondences are collinear or coincident".into(),
        ));
    }
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    // flip the axis of the smallest singular value when the fit is a reflection
    let k = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).expect("3 values");
    let mut flip = Vector3::new(1.0, 1.0, 1.0);
    flip[k] = d;
    let r = v * Matrix3::from_diagonal(&flip) * u.transpose();
    let t = cb - r * ca;
    Ok(RigidTransform {
        rotation: r,
        translation: t,
    })
}

fn residual_ok(t: &RigidTransform, a: &Point3, b: &Point3, thr2: f64) -> bool {
    (t.apply(a) - b).norm_squared() <= thr2
}

fn count_inliers(t: &RigidTransform, matches: &[DenseMatch], pa: &[Point3], pb: &[Point3], thr: f64) -> usize {
    let thr2 = thr * thr;
    matches
        .iter()
        .filter(|m| residual_ok(t, &pa[m.a], &pb[m.b], thr2))
        .count()
}

fn inlier_pairs(
    t: &RigidTransform,
    matches: &[DenseMatch],
    pa: &[Point3],
    pb: &[Point3],
    thr: f64,
) -> Vec<WeightedPair> {
    let thr2 = thr * thr;
    matches
        .iter()
        .filter(|m| residual_ok(t, &pa[m.a], &pb[m.b], thr2))
        .map(|m| (pa[m.a], pb[m.b], m.score))
        .collect()
}

fn check_indices(matches: &[DenseMatch], pa: &[Point3], pb: &[Point3]) -> Result<()> {
    if matches.iter().any(|m| m.a >= pa.len() || m.b >= pb.len()) {
        return Err(Error::invalid("correspondence index out of range"));
    }
    Ok(())
}

/// RANSAC over 3-point samples with a seeded generator, refit on the best
/// consensus set. Refits weight each inlier by its match score.
pub fn ransac_registration(
    matches: &[DenseMatch],
    pa: &[Point3],
    pb: &[Point3],
    iters: usize,
    threshold: f64,
    seed: u64,
) -> Result<PoseEstimate> {
    if matches.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "RANSAC needs 3 correspondences, got {}",
            matches.len()
        )));
    }
    check_indices(matches, pa, pb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(RigidTransform, usize)> = None;
    for _ in 0..iters {
        let idx = sample(&mut rng, matches.len(), 3);
        let pairs: Vec<WeightedPair> = idx
            .iter()
            .map(|i| (pa[matches[i].a], pb[matches[i].b], 1.0))
            .collect();
        let Ok(t) = weighted_svd(&pairs) else { continue };
        let n = count_inliers(&t, matches, pa, pb, threshold);
        if best.as_ref().is_none_or(|(_, b)| n > *b) {
            best = Some((t, n));
        }
    }
    let Some((mut t, mut n)) = best else {
        return Err(Error::DegenerateConfiguration("every RANSAC sample was degenerate".into()));
    };
    let mut history = vec![n];
    let consensus = inlier_pairs(&t, matches, pa, pb, threshold);
    if let Ok(refit) = weighted_svd(&consensus) {
        let rn = count_inliers(&refit, matches, pa, pb, threshold);
        if rn >= n {
            t = refit;
            n = rn;
            history.push(n);
        }
    }
    Ok(PoseEstimate {
        transform: t,
        inlier_count: n,
        inlier_threshold: threshold,
        converged: n >= 3,
        inlier_history: history,
    })
}

/// Local-to-global registration: one weighted-SVD candidate per patch
/// (matches grouped by `patch`), the candidate with the most global inliers
/// wins (lowest patch id on ties), then up to `refine_rounds` refits on the
/// global inlier set. A refit that would lose inliers ends refinement.
pub fn local_to_global_registration(
    matches: &[DenseMatch],
    pa: &[Point3],
    pb: &[Point3],
    threshold: f64,
    refine_rounds: usize,
) -> Result<PoseEstimate> {
    check_indices(matches, pa, pb)?;
    let mut patches: Vec<usize> = matches.iter().map(|m| m.patch).collect();
    patches.sort_unstable();
    patches.dedup();
    let mut best: Option<(RigidTransform, usize)> = None;
    for p in patches {
        let pairs: Vec<WeightedPair> = matches
            .iter()
            .filter(|m| m.patch == p)
            .map(|m| (pa[m.a], pb[m.b], m.score))
            .collect();
        if pairs.len() < 3 {
            continue;
        }
        let Ok(t) = weighted_svd(&pairs) else { continue };
        let n = count_inliers(&t, matches, pa, pb, threshold);
        if best.as_ref().is_none_or(|(_, b)| n > *b) {
            best = Some((t, n));
        }
    }
    let Some((mut t, mut n)) = best else {
        return Err(Error::InsufficientData(
            "no patch has 3 usable correspondences".into(),
        ));
    };
    let mut history = vec![n];
    for _ in 0..refine_rounds {
        let inliers = inlier_pairs(&t, matches, pa, pb, threshold);
        let Ok(refit) = weighted_svd(&inliers) else { break };
        let rn = count_inliers(&refit, matches, pa, pb, threshold);
        if rn < n {
            break;
        }
        let unchanged = refit == t;
        t = refit;
        n = rn;
        history.push(n);
        if unchanged {
            break;
        }
    }
    Ok(PoseEstimate {
        transform: t,
        inlier_count: n,
        inlier_threshold: threshold,
        converged: n >= 3,
        inlier_history: history,
    })
}

/// Weighted SVD over all matches (weights = scores).
pub fn svd_registration(matches: &[DenseMatch], pa: &[Point3], pb: &[Point3], threshold: f64) -> Result<PoseEstimate> {
    check_indices(matches, pa, pb)?;
    let pairs: Vec<WeightedPair> = matches.iter().map(|m| (pa[m.a], pb[m.b], m.score)).collect();
    let t = weighted_svd(&pairs)?;
    let n = count_inliers(&t, matches, pa, pb, threshold);
    Ok(PoseEstimate {
        transform: t,
        inlier_count: n,
        inlier_threshold: threshold,
        converged: n >= 3,
        inlier_history: vec![n],
    })
}
