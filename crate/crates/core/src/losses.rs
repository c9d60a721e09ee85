//! Training objectives and their ground-truth supervision.

use crate::error::{Error, Result};
use crate::geometry::{HashGrid, PatchPartition, Point3, RigidTransform};
use crate::numerics::{Graph, Matrix, Var};

/// Patch pairs sharing at least this overlap ratio are positives.
pub const POSITIVE_OVERLAP: f64 = 0.1;

/// Overlap between every pair of patches under the ground-truth transform.
#[derive(Clone, Debug)]
pub struct GroundTruthSupervision {
    pub gt: RigidTransform,
    pub tau: f64,
    /// `overlap[(i, j)]`: fraction of patch `i` of A with a point of patch
    /// `j` of B within `tau` after alignment.
    pub overlap: Matrix,
}

impl GroundTruthSupervision {
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.overlap.get(i, j) >= POSITIVE_OVERLAP
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.overlap.get(i, j) == 0.0
    }

    /// Positive pairs in row-major order.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        let (r, c) = self.overlap.shape();
        (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_positive(i, j))
            .collect()
    }
}

/// Patch overlap ratios for two partitioned clouds.
pub fn build_supervision(
    points_a: &[Point3],
    points_b: &[Point3],
    part_a: &PatchPartition,
    part_b: &PatchPartition,
    gt: &RigidTransform,
    tau: f64,
) -> Result<GroundTruthSupervision> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("match threshold must be positive, got {tau}")));
    }
    let (na, nb) = (part_a.num_patches(), part_b.num_patches());
    let mut overlap = Matrix::zeros(na, nb);
    if !points_b.is_empty() {
        let grid = HashGrid::build(points_b, tau)?;
        let mut hit = vec![usize::MAX; nb];
        for (i, patch) in part_a.patches.iter().enumerate() {
            if patch.is_empty() {
                continue;
            }
            let row = overlap.row_mut(i);
            for (k, &p) in patch.iter().enumerate() {
                let q = gt.apply(&points_a[p]);
                for n in grid.within(points_b, &q, tau) {
                    let j = part_b.patch_of_point[n];
                    // count each A point once per B patch
                    if hit[j] != k {
                        hit[j] = k;
                        row[j] += 1.0;
                    }
                }
            }
            hit.iter_mut().for_each(|h| *h = usize::MAX);
            row.iter_mut().for_each(|v| *v /= patch.len() as f64);
        }
    }
    Ok(GroundTruthSupervision {
        gt: *gt,
        tau,
        overlap,
    })
}

fn nearest_within(from: &Point3, to: &[Point3], tau: f64) -> Option<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, q) in to.iter().enumerate() {
        let d = (from - q).norm();
        if d <= tau && d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    best
}

/// Ground-truth assignment for one patch pair, shaped `(M+1) x (N+1)`.
///
/// `(m, n)` is marked when `b_n` is the nearest point to `gt(a_m)` within
/// `tau` and `gt(a_m)` is in turn the nearest to `b_n`; rows and columns left
/// without a partner are marked in their dustbin.
pub fn gt_match_matrix(
    patch_a: &[Point3],
    patch_b: &[Point3],
    gt: &RigidTransform,
    tau: f64,
) -> Matrix {
    let (m, n) = (patch_a.len(), patch_b.len());
    let aligned: Vec<Point3> = patch_a.iter().map(|p| gt.apply(p)).collect();
    let mut out = Matrix::zeros(m + 1, n + 1);
    let mut col_used = vec![false; n];
    for (r, a) in aligned.iter().enumerate() {
        match nearest_within(a, patch_b, tau) {
            Some(c) if nearest_within(&patch_b[c], &aligned, tau) == Some(r) => {
                out.set(r, c, 1.0);
                col_used[c] = true;
            }
            _ => out.set(r, n, 1.0),
        }
    }
    for (c, used) in col_used.iter().enumerate() {
        if !used {
            out.set(m, c, 1.0);
        }
    }
    out
}

fn nearest_index(q: &Point3, pts: &[Point3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = (q - p).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Nearest neighbour of each query among `pts`, via a grid when the set is
/// large.
fn nearest_indices(queries: &[Point3], pts: &[Point3]) -> Vec<usize> {
    if pts.len() < 64 {
        return queries.iter().map(|q| nearest_index(q, pts)).collect();
    }
    let grid = HashGrid::build(pts, 2.0).expect("positive cell");
    queries
        .iter()
        .map(|q| {
            let mut r = 2.0;
            loop {
                // The nearest point inside radius r is the global nearest.
                if let Some((i, _)) = grid.nearest_within(pts, q, r) {
                    return i;
                }
                if r > 1e4 {
                    return nearest_index(q, pts);
                }
                r *= 2.0;
            }
        })
        .collect()
}

fn points_of(g: &Graph, v: Var) -> Vec<Point3> {
    let m = g.value(v);
    (0..m.rows()).map(|i| Point3::new(m.get(i, 0), m.get(i, 1), m.get(i, 2))).collect()
}

fn sq_dist_sum(g: &mut Graph, x: Var, target: Var) -> Result<Var> {
    let d = g.sub(x, target)?;
    let s = g.square(d);
    Ok(g.sum(s))
}

/// Applies `gt` to the rows of an `n x 3` node.
pub fn transform_rows(g: &mut Graph, x: Var, gt: &RigidTransform) -> Result<Var> {
    let rt = g.constant(Matrix::from_fn(3, 3, |i, j| gt.rotation[(j, i)]));
    let t = g.constant(Matrix::from_fn(1, 3, |_, j| gt.translation[j]));
    let r = g.matmul(x, rt)?;
    g.add_row(r, t)
}

/// Mean squared nearest-neighbour distance between `gt(sa)` and `sb`,
/// summed over both directions.
pub fn proposal_alignment_loss(g: &mut Graph, sa: Var, sb: Var, gt: &RigidTransform) -> Result<Var> {
    check_proposals(g, sa)?;
    check_proposals(g, sb)?;
    let aligned = transform_rows(g, sa, gt)?;
    let (pa, pb) = (points_of(g, aligned), points_of(g, sb));
    let tb = g.gather_rows(sb, &nearest_indices(&pa, &pb))?;
    let ta = g.gather_rows(aligned, &nearest_indices(&pb, &pa))?;
    let ab = sq_dist_sum(g, aligned, tb)?;
    let ab = g.scale(ab, 1.0 / pa.len() as f64);
    let ba = sq_dist_sum(g, sb, ta)?;
    let ba = g.scale(ba, 1.0 / pb.len() as f64);
    g.add(ab, ba)
}

/// Mean squared distance from each proposal to the nearest measured point
/// of its own cloud.
pub fn proposal_surface_loss(g: &mut Graph, s: Var, cloud: &[Point3]) -> Result<Var> {
    check_proposals(g, s)?;
    if cloud.is_empty() {
        return Err(Error::invalid("surface loss needs measured points"));
    }
    let p = points_of(g, s);
    let nn = nearest_indices(&p, cloud);
    let c = g.constant(Matrix::from_fn(nn.len(), 3, |i, j| cloud[nn[i]][j]));
    let d = sq_dist_sum(g, s, c)?;
    Ok(g.scale(d, 1.0 / p.len() as f64))
}

fn check_proposals(g: &Graph, s: Var) -> Result<()> {
    match g.shape(s) {
        (0, _) => Err(Error::invalid("proposal set is empty")),
        (_, 3) => Ok(()),
        (_, c) => Err(Error::invalid(format!("proposals must be n x 3, got {c} columns"))),
    }
}

/// `(L_s1, L_s2)` for proposals `sa`, `sb` (`n x 3` nodes): the alignment
/// loss between both sets and the surface loss of each against its cloud.
pub fn superpoint_chamfer_losses(
    g: &mut Graph,
    sa: Var,
    sb: Var,
    cloud_a: &[Point3],
    cloud_b: &[Point3],
    gt: &RigidTransform,
) -> Result<(Var, Var)> {
    let l1 = proposal_alignment_loss(g, sa, sb, gt)?;
    let la = proposal_surface_loss(g, sa, cloud_a)?;
    let lb = proposal_surface_loss(g, sb, cloud_b)?;
    let l2 = g.add(la, lb)?;
    Ok((l1, l2))
}

/// Rows of `nodes` that, moved by `gt`, have a point of `other` within
/// `radius`.
pub fn overlapping_rows(nodes: &[Point3], other: &[Point3], gt: &RigidTransform, radius: f64) -> Result<Vec<usize>> {
    if other.is_empty() {
        return Ok(Vec::new());
    }
    let grid = HashGrid::build(other, radius)?;
    Ok((0..nodes.len())
        .filter(|&i| grid.nearest_within(other, &gt.apply(&nodes[i]), radius).is_some())
        .collect())
}

/// Circle-loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleParams {
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub gamma: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        CircleParams {
            pos_margin: 0.1,
            neg_margin: 1.4,
            gamma: 24.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CircleLoss {
    pub value: Var,
    pub anchors_a: usize,
    pub anchors_b: usize,
}

impl CircleLoss {
    /// No patch on either side had a positive partner.
    pub fn is_degenerate(&self) -> bool {
        self.anchors_a == 0 && self.anchors_b == 0
    }
}

/// Row-wise `log Σ_{mask} exp(e)`, stabilized by a constant per-row shift.
/// Rows with an empty mask are not meaningful and must be filtered by the
/// caller.
fn masked_lse_rows(g: &mut Graph, e: Var, mask: &Matrix) -> Result<Var> {
    let ev = g.value(e);
    let shift: Vec<f64> = (0..ev.rows())
        .map(|i| {
            ev.row(i)
                .iter()
                .zip(mask.row(i))
                .filter(|(_, &m)| m > 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .map(|s| if s.is_finite() { s } else { 0.0 })
        .collect();
    let neg_shift = g.constant(Matrix::from_vec(shift.len(), 1, shift.iter().map(|s| -s).collect())?);
    let shift = g.constant(Matrix::from_vec(shift.len(), 1, shift)?);
    let centered = g.add_col(e, neg_shift)?;
    let ex = g.exp(centered);
    let m = g.constant(mask.clone());
    let kept = g.mul(ex, m)?;
    let s = g.sum_rows(kept);
    let l = g.log(s);
    g.add(l, shift)
}

/// One side of the circle loss: anchors are the rows of `dist`.
fn circle_side(
    g: &mut Graph,
    dist: Var,
    overlap: &Matrix,
    p: &CircleParams,
) -> Result<(Option<Var>, usize)> {
    let (r, c) = overlap.shape();
    let pos = Matrix::from_fn(r, c, |i, j| (overlap.get(i, j) >= POSITIVE_OVERLAP) as u8 as f64);
    let neg = Matrix::from_fn(r, c, |i, j| (overlap.get(i, j) == 0.0) as u8 as f64);
    let anchors: Vec<usize> = (0..r).filter(|&i| pos.row(i).iter().any(|&v| v > 0.0)).collect();
    let active: Vec<usize> = anchors
        .iter()
        .copied()
        .filter(|&i| neg.row(i).iter().any(|&v| v > 0.0))
        .collect();
    if active.is_empty() {
        return Ok((None, anchors.len()));
    }
    // positive exponent: γ λ s(d − Δ⁺); negative exponent: γ s(Δ⁻ − d)
    let dp = g.add_scalar(dist, -p.pos_margin);
    let dp = g.signed_square(dp);
    let lam = g.constant(overlap.scale(p.gamma));
    let ep = g.mul(dp, lam)?;
    let dn = g.neg(dist);
    let dn = g.add_scalar(dn, p.neg_margin);
    let dn = g.signed_square(dn);
    let en = g.scale(dn, p.gamma);

    let ep = g.gather_rows(ep, &active)?;
    let en = g.gather_rows(en, &active)?;
    let lp = masked_lse_rows(g, ep, &pos.select_rows(&active))?;
    let ln = masked_lse_rows(g, en, &neg.select_rows(&active))?;
    let s = g.add(lp, ln)?;
    let per_anchor = g.softplus(s);
    let total = g.sum(per_anchor);
    Ok((Some(g.scale(total, 1.0 / anchors.len() as f64)), anchors.len()))
}

/// Pairwise Euclidean distances between rows of `a` and `b`.
pub fn feature_distances(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let sa = g.square(a);
    let na = g.sum_rows(sa);
    let sb = g.square(b);
    let nb = g.sum_rows(sb);
    let nb = g.transpose(nb);
    let dot = g.matmul_nt(a, b)?;
    let d2 = g.scale(dot, -2.0);
    let d2 = g.add_col(d2, na)?;
    let d2 = g.add_row(d2, nb)?;
    // keeps sqrt differentiable at coincident features
    let d2 = g.relu(d2);
    let d2 = g.add_scalar(d2, 1e-12);
    Ok(g.sqrt(d2))
}

/// Overlap-aware circle loss averaged over A-anchors and B-anchors.
///
/// For an anchor with positives `P` and negatives `N` the term is
/// `log(1 + Σ_P exp(γ λ s(d − Δ⁺)) · Σ_N exp(γ s(Δ⁻ − d)))` with
/// `s(x) = x|x|`; an empty `N` contributes zero.
pub fn overlap_circle_loss(
    g: &mut Graph,
    ha: Var,
    hb: Var,
    supervision: &GroundTruthSupervision,
    params: &CircleParams,
) -> Result<CircleLoss> {
    let (ra, rb) = (g.shape(ha).0, g.shape(hb).0);
    if supervision.overlap.shape() != (ra, rb) {
        return Err(Error::invalid(format!(
            "overlap is {:?}, features give {}x{}",
            supervision.overlap.shape(),
            ra,
            rb
        )));
    }
    let dist = feature_distances(g, ha, hb)?;
    circle_loss_from_distances(g, dist, &supervision.overlap, params)
}

/// Circle loss on a precomputed `|A| x |B|` feature-distance node.
pub fn circle_loss_from_distances(
    g: &mut Graph,
    dist: Var,
    overlap: &Matrix,
    params: &CircleParams,
) -> Result<CircleLoss> {
    if g.shape(dist) != overlap.shape() {
        return Err(Error::invalid("distance and overlap shapes differ"));
    }
    let (la, na) = circle_side(g, dist, overlap, params)?;
    let dist_t = g.transpose(dist);
    let (lb, nb) = circle_side(g, dist_t, &overlap.transpose(), params)?;
    let zero = g.constant(Matrix::scalar(0.0));
    let la = la.unwrap_or(zero);
    let lb = lb.unwrap_or(zero);
    let s = g.add(la, lb)?;
    Ok(CircleLoss {
        value: g.scale(s, 0.5),
        anchors_a: na,
        anchors_b: nb,
    })
}

fn check_assignment(m: &Matrix) -> Result<()> {
    for (i, s) in m.row_sums().iter().enumerate().take(m.rows() - 1) {
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSupervision(format!("match row {i} sums to {s}")));
        }
    }
    for (j, s) in m.col_sums().iter().enumerate().take(m.cols() - 1) {
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSupervision(format!("match column {j} sums to {s}")));
        }
    }
    Ok(())
}

/// Gap loss of one assignment `z` against its ground truth `m`, both
/// `(M+1) x (N+1)`:
/// `(1/M) Σ_m log Σ_n [(z_mn − r_m + η)₊ + 1] + (1/N) Σ_n log Σ_m [(z_mn − c_n + η)₊ + 1]`
/// where `r_m`, `c_n` are the assignment values at the true matches.
pub fn gap_loss(g: &mut Graph, z: Var, m: &Matrix, eta: f64) -> Result<Var> {
    if g.shape(z) != m.shape() || m.rows() < 2 || m.cols() < 2 {
        return Err(Error::invalid("gap loss: assignment and match matrix differ in shape"));
    }
    check_assignment(m)?;
    let (rows, cols) = (m.rows() - 1, m.cols() - 1);
    let mc = g.constant(m.clone());
    let picked = g.mul(z, mc)?;

    let r = g.sum_rows(picked);
    let nr = g.neg(r);
    let x = g.add_col(z, nr)?;
    let x = g.add_scalar(x, eta);
    let x = g.relu(x);
    let x = g.add_scalar(x, 1.0);
    let x = g.sum_rows(x);
    let x = g.log(x);
    let x = g.slice_rows(x, 0, rows)?;
    let row_term = g.sum(x);
    let row_term = g.scale(row_term, 1.0 / rows as f64);

    let c = g.sum_cols(picked);
    let nc = g.neg(c);
    let y = g.add_row(z, nc)?;
    let y = g.add_scalar(y, eta);
    let y = g.relu(y);
    let y = g.add_scalar(y, 1.0);
    let y = g.sum_cols(y);
    let y = g.log(y);
    let y = g.slice_cols(y, 0, cols)?;
    let col_term = g.sum(y);
    let col_term = g.scale(col_term, 1.0 / cols as f64);
    g.add(row_term, col_term)
}

/// Fine loss over several patch pairs: `Σ_i L_f^i / (2 |pairs|)`.
pub fn fine_loss(g: &mut Graph, per_pair: &[Var]) -> Result<Var> {
    if per_pair.is_empty() {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let mut total = per_pair[0];
    for &v in &per_pair[1..] {
        total = g.add(total, v)?;
    }
    Ok(g.scale(total, 1.0 / (2.0 * per_pair.len() as f64)))
}

/// Hyperparameters of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub circle: CircleParams,
    /// Gap-loss margin.
    pub gap_margin: f64,
    /// Radius for ground-truth point matches and patch overlap.
    pub match_radius: f64,
    /// Upper bound on patch pairs supervised by the fine loss per step.
    pub max_fine_pairs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            circle: CircleParams::default(),
            gap_margin: 0.5,
            match_radius: 0.6,
            max_fine_pairs: 128,
        }
    }
}

/// Logged values of the four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s1: f64,
    pub l_s2: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_s1: f64, l_s2: f64, l_c: f64, l_f: f64) -> Self {
        LossBreakdown {
            l_s1,
            l_s2,
            l_c,
            l_f,
            total: l_s1 + l_s2 + l_c + l_f,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_s1, self.l_s2, self.l_c, self.l_f, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Unit-weight sum of the terms on the graph, plus the logged values.
pub fn total_loss(g: &mut Graph, l_s1: Var, l_s2: Var, l_c: Var, l_f: Var) -> Result<(Var, LossBreakdown)> {
    let a = g.add(l_s1, l_s2)?;
    let b = g.add(l_c, l_f)?;
    let t = g.add(a, b)?;
    let bd = LossBreakdown {
        l_s1: g.scalar(l_s1),
        l_s2: g.scalar(l_s2),
        l_c: g.scalar(l_c),
        l_f: g.scalar(l_f),
        total: g.scalar(t),
    };
    Ok((t, bd))
}
