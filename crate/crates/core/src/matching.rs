//! Coarse superpoint matching and dustbin-Sinkhorn dense matching.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::sinkhorn::log_sinkhorn;
use crate::numerics::Matrix;

/// Superpoint pair `(a, b)` with its dual-normalized score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseMatch {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// Fine point pair with its transport value and the coarse match it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseMatch {
    pub a: usize,
    pub b: usize,
    pub score: f64,
    pub patch: usize,
}

fn unit_rows(m: &Matrix, which: &str) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid(format!("{which} feature row {i} has norm {n}")));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// `c_ij = exp(-‖h_i − h_j‖²)` between L2-normalized rows.
pub fn gaussian_correlation(ha: &Matrix, hb: &Matrix) -> Result<Matrix> {
    if ha.cols() != hb.cols() {
        return Err(Error::invalid(format!(
            "feature dims differ: {} vs {}",
            ha.cols(),
            hb.cols()
        )));
    }
    let a = unit_rows(ha, "source")?;
    let b = unit_rows(hb, "target")?;
    let dots = a.matmul_nt(&b);
    // ‖a − b‖² = 2 − 2 a·b for unit rows
    Ok(dots.map(|d| (-(2.0 - 2.0 * d).max(0.0)).exp()))
}

/// `ĉ_ij = (c_ij / Σ_k c_ik) · (c_ij / Σ_k c_kj)`.
pub fn dual_normalize(c: &Matrix) -> Result<Matrix> {
    if c.as_slice().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("dual normalization needs finite nonnegative entries"));
    }
    let rs = c.row_sums();
    let cs = c.col_sums();
    if let Some(i) = rs.iter().position(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("row {i} sums to zero")));
    }
    if let Some(j) = cs.iter().position(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("column {j} sums to zero")));
    }
    Ok(Matrix::from_fn(c.rows(), c.cols(), |i, j| {
        let v = c.get(i, j);
        (v / rs[i]) * (v / cs[j])
    }))
}

/// The `k` largest entries of the whole matrix, descending; equal scores are
/// ordered by `(row, col)`.
pub fn topk_correspondences(scores: &Matrix, k: usize) -> Vec<CoarseMatch> {
    let mut all: Vec<CoarseMatch> = (0..scores.rows())
        .flat_map(|a| {
            (0..scores.cols()).map(move |b| CoarseMatch {
                a,
                b,
                score: scores.get(a, b),
            })
        })
        .collect();
    all.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    all.truncate(k);
    all
}

/// `O = F_A F_Bᵀ / √d`.
pub fn patch_score_matrix(fa: &Matrix, fb: &Matrix) -> Result<Matrix> {
    if fa.cols() != fb.cols() {
        return Err(Error::invalid(format!(
            "patch feature dims differ: {} vs {}",
            fa.cols(),
            fb.cols()
        )));
    }
    let scale = 1.0 / (fa.cols().max(1) as f64).sqrt();
    Ok(fa.matmul_nt(fb).scale(scale))
}

/// Log-marginals for an `(m+1) x (n+1)` dustbin problem: rows
/// `(1, …, 1, n)`, columns `(1, …, 1, m)`.
pub fn dustbin_log_marginals(m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; m + 1];
    mu[m] = (n as f64).ln();
    let mut nu = vec![0.0; n + 1];
    nu[n] = (m as f64).ln();
    (mu, nu)
}

/// Appends the dustbin row and column filled with `alpha`.
pub fn augment_with_dustbin(scores: &Matrix, alpha: f64) -> Matrix {
    let (m, n) = scores.shape();
    Matrix::from_fn(m + 1, n + 1, |i, j| if i < m && j < n { scores.get(i, j) } else { alpha })
}

/// Soft assignment with dustbins, in the exp domain.
pub fn sinkhorn_with_dustbin(scores: &Matrix, alpha: f64, iters: usize) -> Result<Matrix> {
    if iters == 0 {
        return Err(Error::invalid("Sinkhorn needs at least one iteration"));
    }
    if !scores.is_finite() || !alpha.is_finite() {
        return Err(Error::invalid("Sinkhorn scores must be finite"));
    }
    let (m, n) = scores.shape();
    let (mu, nu) = dustbin_log_marginals(m, n);
    let (log_z, _) = log_sinkhorn(&augment_with_dustbin(scores, alpha), &mu, &nu, iters);
    Ok(log_z.map(f64::exp))
}

/// Largest deviation of the row and column sums of `z` from the dustbin
/// marginals.
pub fn marginal_residual(z: &Matrix) -> f64 {
    let (m, n) = (z.rows() - 1, z.cols() - 1);
    let (mu, nu) = dustbin_log_marginals(m, n);
    let r = z
        .row_sums()
        .iter()
        .zip(&mu)
        .map(|(s, l)| (s - l.exp()).abs())
        .fold(0.0, f64::max);
    let c = z
        .col_sums()
        .iter()
        .zip(&nu)
        .map(|(s, l)| (s - l.exp()).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Mutual-trust extraction: every interior row keeps its argmax column and
/// every interior column its argmax row, unless that argmax is a dustbin.
/// Row-side matches come first; duplicates are dropped.
///
/// `patch_a[m]` / `patch_b[n]` translate patch-local indices into point
/// indices of the full clouds.
pub fn extract_dense_matches(
    z: &Matrix,
    patch_a: &[usize],
    patch_b: &[usize],
    patch: usize,
) -> Result<Vec<DenseMatch>> {
    let (m, n) = (patch_a.len(), patch_b.len());
    if z.shape() != (m + 1, n + 1) {
        return Err(Error::invalid(format!(
            "assignment is {}x{}, expected {}x{}",
            z.rows(),
            z.cols(),
            m + 1,
            n + 1
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |r: usize, c: usize| {
        if seen.insert((r, c)) {
            out.push(DenseMatch {
                a: patch_a[r],
                b: patch_b[c],
                score: z.get(r, c),
                patch,
            });
        }
    };
    for r in 0..m {
        let c = argmax(z.row(r).iter().copied());
        if c < n {
            push(r, c);
        }
    }
    for c in 0..n {
        let r = argmax((0..=m).map(|r| z.get(r, c)));
        if r < m {
            push(r, c);
        }
    }
    Ok(out)
}

/// Text dump: `# coarse N`, N lines `a b score`, `# dense M`, M lines.
pub fn format_correspondences(coarse: &[CoarseMatch], dense: &[DenseMatch]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# coarse {}", coarse.len());
    for c in coarse {
        let _ = writeln!(s, "{} {} {:e}", c.a, c.b, c.score);
    }
    let _ = writeln!(s, "# dense {}", dense.len());
    for d in dense {
        let _ = writeln!(s, "{} {} {:e}", d.a, d.b, d.score);
    }
    s
}

/// Inverse of [`format_correspondences`]. Dense patch ids are not stored and
/// come back as 0.
pub fn parse_correspondences(text: &str) -> std::result::Result<(Vec<CoarseMatch>, Vec<DenseMatch>), String> {
    let mut coarse = Vec::new();
    let mut dense = Vec::new();
    let mut section = None;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            section = match it.next() {
                Some("coarse") => Some(true),
                Some("dense") => Some(false),
                other => return Err(format!("line {}: unknown section {other:?}", no + 1)),
            };
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(format!("line {}: expected 'a b score'", no + 1));
        }
        let bad = |_| format!("line {}: malformed number", no + 1);
        let a: usize = f[0].parse().map_err(|_| format!("line {}: bad index", no + 1))?;
        let b: usize = f[1].parse().map_err(|_| format!("line {}: bad index", no + 1))?;
        let score: f64 = f[2].parse().map_err(bad)?;
        match section {
            Some(true) => coarse.push(CoarseMatch { a, b, score }),
            Some(false) => dense.push(DenseMatch { a, b, score, patch: 0 }),
            None => return Err(format!("line {}: match before section header", no + 1)),
        }
    }
    Ok((coarse, dense))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    #[test]
    fn correlation_examples() {
        let e1 = Matrix::from_rows(&[[1.0, 0.0]]);
        let e2 = Matrix::from_rows(&[[0.0, 1.0]]);
        assert_eq!(gaussian_correlation(&e1, &e1).unwrap().get(0, 0), 1.0);
        let c = gaussian_correlation(&e1, &e2).unwrap().get(0, 0);
        assert!((c - (-2f64).exp()).abs() < 1e-15);
        assert!(gaussian_correlation(&Matrix::zeros(1, 2), &e1).is_err());
    }

    #[test]
    fn correlation_matches_per_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 4, 8, -1.0, 1.0);
        let b = rand_mat(&mut rng, 5, 8, -1.0, 1.0);
        let c = gaussian_correlation(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let na = a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
                let d2: f64 = (0..8).map(|k| (a.get(i, k) / na - b.get(j, k) / nb).powi(2)).sum();
                assert!((c.get(i, j) - (-d2).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_normalize_examples() {
        assert_eq!(dual_normalize(&Matrix::scalar(3.7)).unwrap().get(0, 0), 1.0);
        let u = dual_normalize(&Matrix::filled(2, 2, 0.3)).unwrap();
        assert!(u.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let d = dual_normalize(&Matrix::from_rows(&[[0.9, 0.1], [0.1, 0.9]])).unwrap();
        assert!((d.get(0, 0) - 0.81).abs() < 1e-12 && (d.get(0, 1) - 0.01).abs() < 1e-12);
        assert!(dual_normalize(&Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]])).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_correspondences(&Matrix::scalar(0.5), 5).len(), 1);
        let d = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]);
        let t = topk_correspondences(&d, 2);
        assert_eq!((t[0].a, t[0].b, t[1].a, t[1].b), (0, 0, 1, 1));
        let e = topk_correspondences(&Matrix::filled(2, 2, 1.0), 2);
        assert_eq!((e[0].a, e[0].b, e[1].a, e[1].b), (0, 0, 0, 1));
    }

    #[test]
    fn patch_scores() {
        let eye = Matrix::identity(4);
        let o = patch_score_matrix(&eye, &eye).unwrap();
        for i in 0..4 {
            assert_eq!(o.get(i, i), 0.5);
        }
        assert_eq!(patch_score_matrix(&Matrix::zeros(2, 3), &Matrix::zeros(3, 3)).unwrap().sum(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 16, -1.0, 1.0);
        let b = rand_mat(&mut rng, 5, 16, -1.0, 1.0);
        let o = patch_score_matrix(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..16).map(|k| a.get(i, k) * b.get(j, k)).sum::<f64>() / 4.0;
                assert!((o.get(i, j) - want).abs() < 1e-12);
            }
        }
        assert!(patch_score_matrix(&a, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn sinkhorn_examples() {
        let z = sinkhorn_with_dustbin(&Matrix::scalar(0.0), 0.0, 100).unwrap();
        for v in z.as_slice() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let z = sinkhorn_with_dustbin(&Matrix::filled(3, 3, 0.7), 1.0, 100).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((z.get(i, j) - z.get(0, 0)).abs() < 1e-9);
            }
        }
        assert!(sinkhorn_with_dustbin(&Matrix::scalar(f64::NAN), 1.0, 10).is_err());
        assert!(sinkhorn_with_dustbin(&Matrix::scalar(0.0), 1.0, 0).is_err());
    }

    #[test]
    fn sinkhorn_converges_to_long_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
        let z = sinkhorn_with_dustbin(&o, 1.0, 100).unwrap();
        let reference = sinkhorn_with_dustbin(&o, 1.0, 10_000).unwrap();
        assert!(marginal_residual(&z) < 1e-6);
        assert!(z.max_abs_diff(&reference) < 1e-6);
    }

    #[test]
    fn dense_extraction_respects_dustbin() {
        // row 0 prefers the dustbin, row 1 prefers column 0
        let z = Matrix::from_rows(&[[0.1, 0.2, 0.7], [0.6, 0.1, 0.3], [0.3, 0.7, 0.0]]);
        let m = extract_dense_matches(&z, &[10, 11], &[20, 21], 0).unwrap();
        let pairs: Vec<(usize, usize)> = m.iter().map(|d| (d.a, d.b)).collect();
        assert_eq!(pairs, vec![(11, 20)]);
        let one = Matrix::from_rows(&[[0.9, 0.1], [0.1, 0.0]]);
        assert_eq!(extract_dense_matches(&one, &[0], &[0], 3).unwrap().len(), 1);
    }

    #[test]
    fn dense_extraction_matches_argmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_mat(&mut rng, 5, 7, 0.0, 1.0);
        let pa: Vec<usize> = (0..4).collect();
        let pb: Vec<usize> = (0..6).collect();
        let got: HashSet<(usize, usize)> = extract_dense_matches(&z, &pa, &pb, 0)
            .unwrap()
            .iter()
            .map(|d| (d.a, d.b))
            .collect();
        let mut want = HashSet::new();
        for r in 0..4 {
            let c = (0..7).max_by(|&x, &y| z.get(r, x).total_cmp(&z.get(r, y))).unwrap();
            if c < 6 {
                want.insert((r, c));
            }
        }
        for c in 0..6 {
            let r = (0..5).max_by(|&x, &y| z.get(x, c).total_cmp(&z.get(y, c))).unwrap();
            if r < 4 {
                want.insert((r, c));
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn dump_round_trip() {
        let coarse = vec![CoarseMatch { a: 1, b: 2, score: 0.25 }];
        let dense = vec![DenseMatch { a: 7, b: 9, score: 0.123456789, patch: 0 }];
        let text = format_correspondences(&coarse, &dense);
        assert!(text.starts_with("# coarse 1\n"));
        let (c, d) = parse_correspondences(&text).unwrap();
        assert_eq!(c, coarse);
        assert_eq!(d, dense);
    }

    proptest! {
        #[test]
        fn dual_normalize_keeps_dominant_diagonal(n in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Matrix::from_fn(n, n, |i, j| {
                if i == j { rng.random_range(2.0..3.0) } else { rng.random_range(0.01..0.5) }
            });
            let d = dual_normalize(&c).unwrap();
            for i in 0..n {
                let row_max = (0..n).max_by(|&x, &y| d.get(i, x).total_cmp(&d.get(i, y))).unwrap();
                let col_max = (0..n).max_by(|&x, &y| d.get(x, i).total_cmp(&d.get(y, i))).unwrap();
                prop_assert_eq!(row_max, i);
                prop_assert_eq!(col_max, i);
            }
        }

        #[test]
        fn sinkhorn_marginals(m in 1usize..65, n in 1usize..65, seed in 0u64..1000, alpha in -1.0..2.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let o = rand_mat(&mut rng, m, n, -1.0, 1.0);
            let z = sinkhorn_with_dustbin(&o, alpha, 100).unwrap();
            prop_assert!(z.as_slice().iter().all(|&v| v >= 0.0));
            prop_assert!(marginal_residual(&z) < 1e-6);
        }

        #[test]
        fn extraction_has_no_duplicates_or_dustbins(m in 1usize..10, n in 1usize..10, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = rand_mat(&mut rng, m + 1, n + 1, 0.0, 1.0);
            let pa: Vec<usize> = (0..m).collect();
            let pb: Vec<usize> = (0..n).collect();
            let out = extract_dense_matches(&z, &pa, &pb, 0).unwrap();
            let set: HashSet<(usize, usize)> = out.iter().map(|d| (d.a, d.b)).collect();
            prop_assert_eq!(set.len(), out.len());
            prop_assert!(out.iter().all(|d| d.a < m && d.b < n));
        }
    }
}
