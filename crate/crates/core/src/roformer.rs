//! Rotary 3D attention (3D-RoFormer) and the comparison embeddings.
//!
//! Queries and keys are rotated pairwise by angles that are a linear
//! function of point position, so self-attention scores depend only on
//! relative position. Cross-attention between clouds carries no positional
//! term.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::numerics::graph::standardize_slice;
use crate::numerics::params::{ParamVisitor, ParamVisitorMut};
use crate::numerics::{mlp_forward, BoundMlp, Graph, Matrix, MlpWeights, Parameterized, Var};

/// Positional scheme used by the self-attention sublayers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    Rotary,
    Vanilla,
    AbsolutePosition,
    PairwiseGeometric,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 4] = [
        EmbeddingKind::Rotary,
        EmbeddingKind::Vanilla,
        EmbeddingKind::AbsolutePosition,
        EmbeddingKind::PairwiseGeometric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Rotary => "rotary",
            EmbeddingKind::Vanilla => "vanilla",
            EmbeddingKind::AbsolutePosition => "absolute",
            EmbeddingKind::PairwiseGeometric => "geometric",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rotary" | "rope" => Ok(EmbeddingKind::Rotary),
            "vanilla" | "none" => Ok(EmbeddingKind::Vanilla),
            "absolute" | "absolute-position" | "ape" => Ok(EmbeddingKind::AbsolutePosition),
            "geometric" | "pairwise-geometric" | "geo" => Ok(EmbeddingKind::PairwiseGeometric),
            other => Err(Error::invalid(format!("unknown embedding kind '{other}'"))),
        }
    }
}

/// Distance buckets of the pairwise-geometric embedding.
pub const GEO_BUCKETS: usize = 16;
/// Width of one distance bucket in meters.
pub const GEO_BUCKET_WIDTH: f64 = 1.2;

fn geo_bucket(d: f64) -> usize {
    ((d / GEO_BUCKET_WIDTH) as usize).min(GEO_BUCKETS - 1)
}

/// Projections and feed-forward block of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: MlpWeights,
    pub k: MlpWeights,
    pub v: MlpWeights,
    pub ffn: MlpWeights,
}

impl AttentionLayer {
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let q = MlpWeights::random(&[dim, dim], 0.5, rng);
        let k = MlpWeights::random(&[dim, dim], 0.5, rng);
        let mut v = MlpWeights::random(&[dim, dim], 1.0, rng);
        let mut ffn = MlpWeights::random(&[dim, 2 * dim, dim], 0.5, rng);
        // residual branches start small so a fresh stack stays near identity
        for m in [&mut v, &mut ffn] {
            let last = m.layers_mut().last_mut().expect("at least one layer");
            last.weight = last.weight.scale(RESIDUAL_INIT);
        }
        AttentionLayer { q, k, v, ffn }
    }

    pub fn dim(&self) -> usize {
        self.q.input_dim()
    }
}

/// Weights of an interleaved self/cross attention stack.
///
/// Sublayer `2t` is the self-attention of round `t`, sublayer `2t + 1` the
/// cross-attention. Both clouds share every sublayer.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub kind: EmbeddingKind,
    pub heads: usize,
    pub rot_map: MlpWeights,
    pub layers: Vec<AttentionLayer>,
    /// Absolute-position embedding `3 -> dim`.
    pub position: MlpWeights,
    /// Pairwise-geometric logit table, `GEO_BUCKETS x heads`.
    pub geo_table: Matrix,
}

impl AttentionWeights {
    /// Random stack with `rounds` self/cross interleavings.
    pub fn random(
        kind: EmbeddingKind,
        dim: usize,
        rounds: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!("feature dim must be even, got {dim}")));
        }
        if rounds == 0 {
            return Err(Error::invalid("attention stack needs at least one round"));
        }
        if heads == 0 || dim % heads != 0 || (dim / heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "{heads} heads do not split dim {dim} into even slices"
            )));
        }
        // Angular frequency per pair spans roughly 1/(2 m) .. 1/(20 m).
        let rot = Matrix::from_fn(3, dim / 2, |_, _| rng.random_range(-0.5..0.5));
        let layers = (0..2 * rounds).map(|_| AttentionLayer::random(dim, rng)).collect();
        Ok(AttentionWeights {
            kind,
            heads,
            rot_map: MlpWeights::pure_linear(rot),
            layers,
            position: MlpWeights::random(&[3, dim], 0.1, rng),
            geo_table: Matrix::from_fn(GEO_BUCKETS, heads, |_, _| rng.random_range(-0.5..0.5)),
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn rounds(&self) -> usize {
        self.layers.len() / 2
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> BoundAttention {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| BoundLayer {
                q: l.q.bind(g, &format!("{prefix}.layer{i}.q")),
                k: l.k.bind(g, &format!("{prefix}.layer{i}.k")),
                v: l.v.bind(g, &format!("{prefix}.layer{i}.v")),
                ffn: l.ffn.bind(g, &format!("{prefix}.layer{i}.ffn")),
            })
            .collect();
        let rot_map = match self.kind {
            EmbeddingKind::Rotary => Some(g.param(
                &format!("{prefix}.rot_map.0.weight"),
                &self.rot_map.layers()[0].weight,
            )),
            _ => None,
        };
        let position = match self.kind {
            EmbeddingKind::AbsolutePosition => Some(self.position.bind(g, &format!("{prefix}.position"))),
            _ => None,
        };
        let geo_table = match self.kind {
            EmbeddingKind::PairwiseGeometric => Some(g.param(&format!("{prefix}.geo_table"), &self.geo_table)),
            _ => None,
        };
        BoundAttention {
            kind: self.kind,
            heads: self.heads,
            rot_map,
            layers,
            position,
            geo_table,
        }
    }
}

impl Parameterized for AttentionWeights {
    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.q.visit_params(&format!("{prefix}.layer{i}.q"), f);
            l.k.visit_params(&format!("{prefix}.layer{i}.k"), f);
            l.v.visit_params(&format!("{prefix}.layer{i}.v"), f);
            l.ffn.visit_params(&format!("{prefix}.layer{i}.ffn"), f);
        }
        match self.kind {
            EmbeddingKind::Rotary => self.rot_map.visit_params(&format!("{prefix}.rot_map"), f),
            EmbeddingKind::AbsolutePosition => self.position.visit_params(&format!("{prefix}.position"), f),
            EmbeddingKind::PairwiseGeometric => f(&format!("{prefix}.geo_table"), &self.geo_table),
            EmbeddingKind::Vanilla => {}
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.q.visit_params_mut(&format!("{prefix}.layer{i}.q"), f);
            l.k.visit_params_mut(&format!("{prefix}.layer{i}.k"), f);
            l.v.visit_params_mut(&format!("{prefix}.layer{i}.v"), f);
            l.ffn.visit_params_mut(&format!("{prefix}.layer{i}.ffn"), f);
        }
        match self.kind {
            EmbeddingKind::Rotary => self.rot_map.visit_params_mut(&format!("{prefix}.rot_map"), f),
            EmbeddingKind::AbsolutePosition => {
                self.position.visit_params_mut(&format!("{prefix}.position"), f)
            }
            EmbeddingKind::PairwiseGeometric => f(&format!("{prefix}.geo_table"), &mut self.geo_table),
            EmbeddingKind::Vanilla => {}
        }
    }
}

#[derive(Clone, Debug)]
struct BoundLayer {
    q: BoundMlp,
    k: BoundMlp,
    v: BoundMlp,
    ffn: BoundMlp,
}

/// [`AttentionWeights`] registered on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundAttention {
    kind: EmbeddingKind,
    heads: usize,
    rot_map: Option<Var>,
    layers: Vec<BoundLayer>,
    position: Option<BoundMlp>,
    geo_table: Option<Var>,
}

pub fn positions_matrix(positions: &[Point3]) -> Matrix {
    Matrix::from_fn(positions.len(), 3, |i, j| positions[i][j])
}

/// Per-point rotary angles `Θ_i = rot_map(p_i)`, one row of `dim / 2` angles
/// per point. The map must be pure-linear so that angle differences depend
/// only on position differences.
pub fn rotary_angles(positions: &[Point3], rot_map: &MlpWeights) -> Result<Matrix> {
    if !rot_map.is_pure_linear() || rot_map.layers().len() != 1 {
        return Err(Error::invalid("rotary map must be a single pure-linear layer"));
    }
    if rot_map.input_dim() != 3 {
        return Err(Error::invalid(format!(
            "rotary map takes 3D positions, not {}",
            rot_map.input_dim()
        )));
    }
    rot_map.forward(&positions_matrix(positions))
}

/// Rotates each consecutive pair `(v[2k], v[2k+1])` by `angles[k]`.
pub fn apply_rotary(vec: &[f64], angles: &[f64]) -> Result<Vec<f64>> {
    if vec.len() != 2 * angles.len() {
        return Err(Error::invalid(format!(
            "rotary: vector of length {} needs {} angles, got {}",
            vec.len(),
            vec.len() / 2,
            angles.len()
        )));
    }
    let mut out = vec.to_vec();
    for (k, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let (x1, x2) = (vec[2 * k], vec[2 * k + 1]);
        out[2 * k] = x1 * c - x2 * s;
        out[2 * k + 1] = x1 * s + x2 * c;
    }
    Ok(out)
}

/// Graph form of [`apply_rotary`] for whole matrices: `x ⊙ cos + swap(x) ⊙ sin`.
fn rotate_rows(g: &mut Graph, x: Var, cos: Var, sin: Var) -> Result<Var> {
    let swapped = g.pair_swap(x)?;
    let a = g.mul(x, cos)?;
    let b = g.mul(swapped, sin)?;
    g.add(a, b)
}

fn rotary_tables(g: &mut Graph, rot_map: Var, positions: &[Point3]) -> Result<(Var, Var)> {
    let p = g.constant(positions_matrix(positions));
    let theta = g.matmul(p, rot_map)?;
    let full = g.repeat_pairs(theta);
    Ok((g.cos(full), g.sin(full)))
}

fn check_rows(g: &Graph, x: Var, positions: &[Point3]) -> Result<()> {
    let rows = g.shape(x).0;
    if rows == 0 {
        return Err(Error::invalid("attention on an empty point set"));
    }
    if rows != positions.len() {
        return Err(Error::invalid(format!(
            "{rows} feature rows for {} positions",
            positions.len()
        )));
    }
    Ok(())
}

fn geo_bias(g: &mut Graph, table: Var, head: usize, positions: &[Point3]) -> Result<Var> {
    let n = positions.len();
    let mut idx = Vec::with_capacity(n * n);
    for a in positions {
        for b in positions {
            idx.push(geo_bucket((a - b).norm()));
        }
    }
    g.lookup(table, head, &idx, n, n)
}

struct AttnOut {
    output: Var,
    scores: Vec<Var>,
}

/// Multi-head attention of `x` over `src`. `self_positions` is set for
/// self-attention and enables the rotary or geometric terms.
fn attend(
    g: &mut Graph,
    w: &BoundAttention,
    layer: usize,
    x: Var,
    src: Var,
    self_positions: Option<&[Point3]>,
) -> Result<AttnOut> {
    let l = &w.layers[layer];
    let (n, dim) = g.shape(x);
    if g.shape(src).1 != dim {
        return Err(Error::invalid(format!(
            "attention feature dims differ: {dim} vs {}",
            g.shape(src).1
        )));
    }
    if n == 0 || g.shape(src).0 == 0 {
        return Err(Error::invalid("attention on an empty point set"));
    }
    let mut q = mlp_forward(g, &l.q, x)?;
    let mut k = mlp_forward(g, &l.k, src)?;
    let v = mlp_forward(g, &l.v, src)?;
    if let (Some(pos), Some(rot)) = (self_positions, w.rot_map) {
        let (cos, sin) = rotary_tables(g, rot, pos)?;
        q = rotate_rows(g, q, cos, sin)?;
        k = rotate_rows(g, k, cos, sin)?;
    }
    let hd = dim / w.heads;
    let mut heads = Vec::with_capacity(w.heads);
    let mut scores = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (qh, kh, vh) = if w.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hd, hd)?,
                g.slice_cols(k, h * hd, hd)?,
                g.slice_cols(v, h * hd, hd)?,
            )
        };
        let mut logits = g.matmul_nt(qh, kh)?;
        if let (Some(pos), Some(table)) = (self_positions, w.geo_table) {
            let bias = geo_bias(g, table, h, pos)?;
            logits = g.add(logits, bias)?;
        }
        let a = g.softmax_rows(logits);
        heads.push(g.matmul(a, vh)?);
        scores.push(a);
    }
    let output = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok(AttnOut { output, scores })
}

/// Initial scale of the value and feed-forward output weights.
pub const RESIDUAL_INIT: f64 = 0.1;

/// Variance floor of the per-row normalization inside each block.
pub const NORM_EPS: f64 = 1e-5;

/// Residual attention followed by a residual feed-forward block, each sum
/// normalized per row.
fn block(
    g: &mut Graph,
    w: &BoundAttention,
    layer: usize,
    x: Var,
    src: Var,
    self_positions: Option<&[Point3]>,
) -> Result<Var> {
    let a = attend(g, w, layer, x, src, self_positions)?.output;
    let h = g.add(x, a)?;
    let h = g.standardize_rows(h, NORM_EPS);
    let f = mlp_forward(g, &w.layers[layer].ffn, h)?;
    let out = g.add(h, f)?;
    Ok(g.standardize_rows(out, NORM_EPS))
}

/// Runs the interleaved stack on the graph. Returns enhanced features for
/// both clouds, in input order.
pub fn stack_forward(
    g: &mut Graph,
    w: &BoundAttention,
    feat_a: Var,
    pos_a: &[Point3],
    feat_b: Var,
    pos_b: &[Point3],
) -> Result<(Var, Var)> {
    check_rows(g, feat_a, pos_a)?;
    check_rows(g, feat_b, pos_b)?;
    let (mut a, mut b) = (feat_a, feat_b);
    if let Some(pe) = &w.position {
        let pa = g.constant(positions_matrix(pos_a));
        let pb = g.constant(positions_matrix(pos_b));
        let ea = mlp_forward(g, pe, pa)?;
        let eb = mlp_forward(g, pe, pb)?;
        a = g.add(a, ea)?;
        b = g.add(b, eb)?;
    }
    let geometric = matches!(w.kind, EmbeddingKind::Rotary | EmbeddingKind::PairwiseGeometric);
    for t in 0..w.layers.len() / 2 {
        let (sa, sb) = if geometric { (Some(pos_a), Some(pos_b)) } else { (None, None) };
        a = block(g, w, 2 * t, a, a, sa)?;
        b = block(g, w, 2 * t, b, b, sb)?;
        let na = block(g, w, 2 * t + 1, a, b, None)?;
        let nb = block(g, w, 2 * t + 1, b, a, None)?;
        a = na;
        b = nb;
    }
    Ok((a, b))
}

/// Attention weights `α` of the self-attention sublayer `layer`, one matrix
/// per head.
pub fn self_attention_scores(
    features: &Matrix,
    positions: &[Point3],
    w: &AttentionWeights,
    layer: usize,
) -> Result<Vec<Matrix>> {
    let mut g = Graph::new();
    let bound = w.bind(&mut g, "roformer");
    let x = g.constant(features.clone());
    check_rows(&g, x, positions)?;
    let out = attend(&mut g, &bound, layer, x, x, Some(positions))?;
    Ok(out.scores.iter().map(|&s| g.value(s).clone()).collect())
}

/// One self-attention sublayer: `h_i = Σ_j α_ij v_j`, with the positional
/// term selected by `w.kind`. No residual or feed-forward.
pub fn rotary_self_attention(
    features: &Matrix,
    positions: &[Point3],
    w: &AttentionWeights,
    layer: usize,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let bound = w.bind(&mut g, "roformer");
    let x = g.constant(features.clone());
    check_rows(&g, x, positions)?;
    let out = attend(&mut g, &bound, layer, x, x, Some(positions))?;
    Ok(g.value(out.output).clone())
}

/// Plain attention of `query` rows over `source` rows with sublayer `layer`.
pub fn cross_attention(
    query: &Matrix,
    source: &Matrix,
    w: &AttentionWeights,
    layer: usize,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let bound = w.bind(&mut g, "roformer");
    let x = g.constant(query.clone());
    let s = g.constant(source.clone());
    let out = attend(&mut g, &bound, layer, x, s, None)?;
    Ok(g.value(out.output).clone())
}

/// Full stack on plain matrices.
pub fn roformer_stack(
    feat_a: &Matrix,
    pos_a: &[Point3],
    feat_b: &Matrix,
    pos_b: &[Point3],
    w: &AttentionWeights,
) -> Result<(Matrix, Matrix)> {
    let mut g = Graph::new();
    let bound = w.bind(&mut g, "roformer");
    let a = g.constant(feat_a.clone());
    let b = g.constant(feat_b.clone());
    let (oa, ob) = stack_forward(&mut g, &bound, a, pos_a, b, pos_b)?;
    Ok((g.value(oa).clone(), g.value(ob).clone()))
}

/// Features after the positional term of `kind` is applied, for the kinds
/// that act on features directly. `Vanilla` returns the input; the rotary and
/// pairwise kinds act inside attention and also return the input.
pub fn baseline_embedding(
    kind: EmbeddingKind,
    features: &Matrix,
    positions: &[Point3],
    w: &AttentionWeights,
) -> Result<Matrix> {
    match kind {
        EmbeddingKind::AbsolutePosition => {
            let e = w.position.forward(&positions_matrix(positions))?;
            if e.shape() != features.shape() {
                return Err(Error::invalid("position embedding shape mismatch"));
            }
            Ok(features.zip_map(&e, |a, b| a + b))
        }
        _ => Ok(features.clone()),
    }
}

/// Result of a streamed inference pass.
#[derive(Clone, Debug)]
pub struct StreamedStack {
    pub a: Matrix,
    pub b: Matrix,
}

fn dense(x: &Matrix, w: &MlpWeights) -> Matrix {
    w.forward(x).expect("dims validated by caller")
}

fn rotate_matrix(x: &Matrix, angles: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        for (k, &t) in angles.row(i).iter().enumerate() {
            let (s, c) = t.sin_cos();
            let (x1, x2) = (row[2 * k], row[2 * k + 1]);
            row[2 * k] = x1 * c - x2 * s;
            row[2 * k + 1] = x1 * s + x2 * c;
        }
    }
    out
}

/// Attention that visits one query row at a time, so only `O(n)` score
/// storage exists at any moment; the geometric kind still materializes its
/// `n x n` bias tables.
fn streamed_attention(
    w: &AttentionWeights,
    layer: usize,
    x: &Matrix,
    src: &Matrix,
    self_positions: Option<&[Point3]>,
) -> Matrix {
    let l = &w.layers[layer];
    let mut q = dense(x, &l.q);
    let mut k = dense(src, &l.k);
    let v = dense(src, &l.v);
    let (n, dim) = q.shape();
    let m = k.rows();
    let hd = dim / w.heads;
    let mut geo: Vec<Matrix> = Vec::new();
    if let Some(pos) = self_positions {
        match w.kind {
            EmbeddingKind::Rotary => {
                let theta = dense(&positions_matrix(pos), &w.rot_map);
                q = rotate_matrix(&q, &theta);
                k = rotate_matrix(&k, &theta);
            }
            EmbeddingKind::PairwiseGeometric => {
                let buckets: Vec<usize> = pos
                    .iter()
                    .flat_map(|a| pos.iter().map(move |b| geo_bucket((a - b).norm())))
                    .collect();
                for h in 0..w.heads {
                    let data = buckets.iter().map(|&b| w.geo_table.get(b, h)).collect();
                    geo.push(Matrix::from_vec(n, n, data).expect("square"));
                }
            }
            _ => {}
        }
    }
    let mut out = Matrix::zeros(n, dim);
    let mut row = vec![0.0; m];
    for i in 0..n {
        for h in 0..w.heads {
            let qi = &q.row(i)[h * hd..(h + 1) * hd];
            for (j, r) in row.iter_mut().enumerate() {
                *r = crate::numerics::matrix::dot(qi, &k.row(j)[h * hd..(h + 1) * hd]);
                if let Some(b) = geo.get(h) {
                    *r += b.get(i, j);
                }
            }
            crate::numerics::graph::softmax_in_place(&mut row);
            let o = &mut out.row_mut(i)[h * hd..(h + 1) * hd];
            for (j, &a) in row.iter().enumerate() {
                for (oc, vc) in o.iter_mut().zip(&v.row(j)[h * hd..(h + 1) * hd]) {
                    *oc += a * vc;
                }
            }
        }
    }
    out
}

fn streamed_block(
    w: &AttentionWeights,
    layer: usize,
    x: &Matrix,
    src: &Matrix,
    self_positions: Option<&[Point3]>,
) -> Matrix {
    let a = streamed_attention(w, layer, x, src, self_positions);
    let h = standardized_rows(x.zip_map(&a, |p, q| p + q));
    let f = dense(&h, &w.layers[layer].ffn);
    standardized_rows(h.zip_map(&f, |p, q| p + q))
}

fn standardized_rows(mut m: Matrix) -> Matrix {
    for i in 0..m.rows() {
        standardize_slice(m.row_mut(i), NORM_EPS);
    }
    m
}

/// Inference-only evaluation of [`roformer_stack`] without an autodiff
/// tape. Numerically equal to the taped version up to summation order.
pub fn roformer_stack_streamed(
    feat_a: &Matrix,
    pos_a: &[Point3],
    feat_b: &Matrix,
    pos_b: &[Point3],
    w: &AttentionWeights,
) -> Result<StreamedStack> {
    let dim = w.dim();
    for (f, p) in [(feat_a, pos_a), (feat_b, pos_b)] {
        if f.rows() == 0 || f.rows() != p.len() || f.cols() != dim {
            return Err(Error::invalid("streamed stack: feature/position shape mismatch"));
        }
    }
    let (mut a, mut b) = (feat_a.clone(), feat_b.clone());
    if w.kind == EmbeddingKind::AbsolutePosition {
        a = baseline_embedding(w.kind, &a, pos_a, w)?;
        b = baseline_embedding(w.kind, &b, pos_b, w)?;
    }
    let geometric = matches!(w.kind, EmbeddingKind::Rotary | EmbeddingKind::PairwiseGeometric);
    for t in 0..w.rounds() {
        let (sa, sb) = if geometric { (Some(pos_a), Some(pos_b)) } else { (None, None) };
        a = streamed_block(w, 2 * t, &a, &a, sa);
        b = streamed_block(w, 2 * t, &b, &b, sb);
        let na = streamed_block(w, 2 * t + 1, &a, &b, None);
        let nb = streamed_block(w, 2 * t + 1, &b, &a, None);
        a = na;
        b = nb;
    }
    Ok(StreamedStack { a, b })
}
