//! Superpoint detection: hierarchical voxel-pool encoding, offset voting,
//! radius filtering and point-to-node regrouping.
//!
//! The encoder runs four pooling levels at voxel sizes `v, 2v, 4v, 8v`. Each
//! level gathers the previous level's points within twice its own voxel size,
//! feeds `(dx, dy, dz, horizontal distance) / radius` together with the
//! neighbour's feature through a shared layer, max-pools, and applies a
//! feature MLP. The decoder climbs back from the nodes to the fine points in
//! two stages, concatenating encoder skips.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    point_to_node_partition, voxel_downsample_traced, HashGrid, PatchPartition, Point3, PointCloud,
};
use crate::numerics::params::{ParamVisitor, ParamVisitorMut};
use crate::numerics::{mlp_forward, BoundMlp, Graph, Matrix, MlpWeights, Parameterized, Var};
use crate::roformer::{stack_forward, AttentionWeights, BoundAttention};

/// Number of pooling levels; the last one yields the nodes.
pub const LEVELS: usize = 4;

/// Variance floor of the per-channel feature standardization.
pub const NORM_EPS: f64 = 1e-5;

/// Geometric inputs per neighbour.
const EDGE_INPUTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingLevel {
    /// Edge geometry to hidden, with bias.
    pub edge: MlpWeights,
    /// Neighbour feature to hidden; absent on the first level.
    pub neighbor: Option<MlpWeights>,
    /// Pooled hidden to output feature.
    pub feature: MlpWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub levels: Vec<PoolingLevel>,
}

impl EncoderWeights {
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let levels = (0..LEVELS)
            .map(|l| PoolingLevel {
                edge: MlpWeights::random(&[EDGE_INPUTS, dim], 1.0, rng),
                neighbor: (l > 0).then(|| {
                    let w = MlpWeights::random(&[dim, dim], 1.0, rng);
                    MlpWeights::pure_linear(w.layers()[0].weight.clone())
                }),
                feature: MlpWeights::random(&[dim, dim, dim], 1.0, rng),
            })
            .collect();
        EncoderWeights { levels }
    }

    pub fn dim(&self) -> usize {
        self.levels[0].feature.output_dim()
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> BoundEncoder {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| BoundLevel {
                edge: l.edge.bind(g, &format!("{prefix}.level{i}.edge")),
                neighbor: l.neighbor.as_ref().map(|n| n.bind(g, &format!("{prefix}.level{i}.neighbor"))),
                feature: l.feature.bind(g, &format!("{prefix}.level{i}.feature")),
            })
            .collect();
        BoundEncoder { levels }
    }
}

impl Parameterized for EncoderWeights {
    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.levels.iter().enumerate() {
            l.edge.visit_params(&format!("{prefix}.level{i}.edge"), f);
            if let Some(n) = &l.neighbor {
                n.visit_params(&format!("{prefix}.level{i}.neighbor"), f);
            }
            l.feature.visit_params(&format!("{prefix}.level{i}.feature"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (i, l) in self.levels.iter_mut().enumerate() {
            l.edge.visit_params_mut(&format!("{prefix}.level{i}.edge"), f);
            if let Some(n) = &mut l.neighbor {
                n.visit_params_mut(&format!("{prefix}.level{i}.neighbor"), f);
            }
            l.feature.visit_params_mut(&format!("{prefix}.level{i}.feature"), f);
        }
    }
}

#[derive(Clone, Debug)]
struct BoundLevel {
    edge: BoundMlp,
    neighbor: Option<BoundMlp>,
    feature: BoundMlp,
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    levels: Vec<BoundLevel>,
}

/// Two unpooling stages: nodes to the second level, then to the fine points.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub stages: Vec<MlpWeights>,
}

impl DecoderWeights {
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        DecoderWeights {
            stages: (0..2).map(|_| MlpWeights::random(&[2 * dim, dim, dim], 1.0, rng)).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> Vec<BoundMlp> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.bind(g, &format!("{prefix}.stage{i}")))
            .collect()
    }
}

impl Parameterized for DecoderWeights {
    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&format!("{prefix}.stage{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params_mut(&format!("{prefix}.stage{i}"), f);
        }
    }
}

/// Vote MLP `dim -> dim -> 3 + dim`, initialised with small outputs so that
/// proposals start near their nodes.
pub fn random_vote_weights(dim: usize, rng: &mut impl Rng) -> MlpWeights {
    let mut w = MlpWeights::random(&[dim, dim, 3 + dim], 1.0, rng);
    let last = w.layers_mut().last_mut().expect("two layers");
    last.weight = last.weight.scale(0.1);
    w
}

/// One pooling level on the tape.
#[derive(Clone, Debug)]
pub struct EncodedLevel {
    pub points: Vec<Point3>,
    pub features: Var,
    /// Index of each point's parent on the next level (empty on the last).
    pub parent: Vec<usize>,
}

/// Encoder result on the tape.
#[derive(Clone, Debug)]
pub struct EncodedCloud {
    /// Finest level first, nodes last.
    pub levels: Vec<EncodedLevel>,
}

impl EncodedCloud {
    pub fn fine_points(&self) -> &[Point3] {
        &self.levels[0].points
    }

    pub fn nodes(&self) -> &[Point3] {
        &self.levels[LEVELS - 1].points
    }

    pub fn node_features(&self) -> Var {
        self.levels[LEVELS - 1].features
    }

    /// Node index of every fine point, by composing the pooling parents.
    pub fn fine_to_node(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.levels[0].points.len()).collect();
        for l in &self.levels[..LEVELS - 1] {
            idx.iter_mut().for_each(|i| *i = l.parent[*i]);
        }
        idx
    }
}

/// Edge list for pooling `sources` onto `targets` within `radius`.
struct Edges {
    source: Vec<usize>,
    geometry: Matrix,
    groups: Vec<Vec<usize>>,
}

fn build_edges(targets: &[Point3], sources: &[Point3], radius: f64) -> Result<Edges> {
    let grid = HashGrid::build(sources, radius)?;
    let mut source = Vec::new();
    let mut geo = Vec::new();
    let mut groups = Vec::with_capacity(targets.len());
    for t in targets {
        let mut group = Vec::new();
        for s in grid.within(sources, t, radius) {
            let d = sources[s] - t;
            group.push(source.len());
            source.push(s);
            geo.extend_from_slice(&[d.x / radius, d.y / radius, d.z / radius, d.x.hypot(d.y) / radius]);
        }
        if group.is_empty() {
            return Err(Error::invalid("pooling target has no neighbours"));
        }
        groups.push(group);
    }
    let n = source.len();
    Ok(Edges {
        source,
        geometry: Matrix::from_vec(n, EDGE_INPUTS, geo)?,
        groups,
    })
}

fn pool(
    g: &mut Graph,
    w: &BoundLevel,
    targets: &[Point3],
    sources: &[Point3],
    source_features: Option<Var>,
    radius: f64,
) -> Result<Var> {
    let edges = build_edges(targets, sources, radius)?;
    let geo = g.constant(edges.geometry);
    let mut h = mlp_forward(g, &w.edge, geo)?;
    if let (Some(nb), Some(f)) = (&w.neighbor, source_features) {
        // project once per source point, then gather along edges
        let proj = mlp_forward(g, nb, f)?;
        let gathered = g.gather_rows(proj, &edges.source)?;
        h = g.add(h, gathered)?;
    }
    let h = g.leaky_relu(h, crate::numerics::mlp::LEAKY_SLOPE);
    let pooled = g.segment_max(h, &edges.groups)?;
    let f = mlp_forward(g, &w.feature, pooled)?;
    Ok(g.standardize_cols(f, NORM_EPS))
}

/// Encodes `cloud` on the tape. `fine_voxel` is the finest voxel size.
pub fn encode_on(g: &mut Graph, cloud: &PointCloud, w: &BoundEncoder, fine_voxel: f64) -> Result<EncodedCloud> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot encode an empty cloud"));
    }
    if !(fine_voxel > 0.0) {
        return Err(Error::invalid(format!("voxel size must be positive, got {fine_voxel}")));
    }
    let mut points = voxel_downsample_traced(&PointCloud::new(cloud.points().to_vec()), fine_voxel)?
        .cloud
        .into_points();
    let mut levels: Vec<EncodedLevel> = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let voxel = fine_voxel * (1 << l) as f64;
        let (sources, prev_features) = match levels.last() {
            Some(prev) => (prev.points.clone(), Some(prev.features)),
            None => (points.clone(), None),
        };
        let features = pool(g, &w.levels[l], &points, &sources, prev_features, 2.0 * voxel)?;
        let next = if l + 1 < LEVELS {
            let grouping = voxel_downsample_traced(&PointCloud::new(points.clone()), 2.0 * voxel)?;
            Some(grouping)
        } else {
            None
        };
        let (parent, next_points) = match next {
            Some(gr) => (gr.assignment, gr.cloud.into_points()),
            None => (Vec::new(), Vec::new()),
        };
        levels.push(EncodedLevel {
            points: std::mem::replace(&mut points, next_points),
            features,
            parent,
        });
    }
    Ok(EncodedCloud { levels })
}

/// Decodes per-fine-point features from node features `node_features`
/// (typically the attention-enhanced ones) and the encoder skips.
pub fn decode_on(g: &mut Graph, enc: &EncodedCloud, node_features: Var, stages: &[BoundMlp]) -> Result<Var> {
    // level-1 points climb two parents to reach the nodes
    let l1_to_node: Vec<usize> = enc.levels[1]
        .parent
        .iter()
        .map(|&p| enc.levels[2].parent[p])
        .collect();
    let up = g.gather_rows(node_features, &l1_to_node)?;
    let x = g.concat_cols(&[up, enc.levels[1].features])?;
    let mid = mlp_forward(g, &stages[0], x)?;
    let mid = g.standardize_cols(mid, NORM_EPS);
    let up = g.gather_rows(mid, &enc.levels[0].parent)?;
    let x = g.concat_cols(&[up, enc.levels[0].features])?;
    let out = mlp_forward(g, &stages[1], x)?;
    Ok(g.standardize_cols(out, NORM_EPS))
}

/// Plain-valued encoder result.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub nodes: Vec<Point3>,
    pub node_features: Matrix,
    pub fine_points: Vec<Point3>,
    pub fine_features: Matrix,
    /// Node index of every fine point.
    pub fine_to_node: Vec<usize>,
}

pub fn encode(cloud: &PointCloud, weights: &EncoderWeights, fine_voxel: f64) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let w = weights.bind(&mut g, "encoder");
    let enc = encode_on(&mut g, cloud, &w, fine_voxel)?;
    Ok(EncoderOutput {
        nodes: enc.nodes().to_vec(),
        node_features: g.value(enc.node_features()).clone(),
        fine_points: enc.fine_points().to_vec(),
        fine_features: g.value(enc.levels[0].features).clone(),
        fine_to_node: enc.fine_to_node(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutput {
    /// Per-node displacement, `n x 3`, each row no longer than the clamp.
    pub offsets: Matrix,
    /// Per-node feature displacement, `n x d`.
    pub feature_offsets: Matrix,
}

/// Vote on the tape: returns `(offsets, feature_offsets)`.
pub fn vote_on(g: &mut Graph, features: Var, vote: &BoundMlp, clamp_radius: f64) -> Result<(Var, Var)> {
    let d = g.shape(features).1;
    let out = mlp_forward(g, vote, features)?;
    if g.shape(out).1 != 3 + d {
        return Err(Error::invalid(format!(
            "vote output has {} columns, expected {}",
            g.shape(out).1,
            3 + d
        )));
    }
    let raw = g.slice_cols(out, 0, 3)?;
    let offsets = g.clamp_row_norm(raw, clamp_radius);
    let feature_offsets = g.slice_cols(out, 3, d)?;
    Ok((offsets, feature_offsets))
}

pub fn vote_offsets(features: &Matrix, nodes: &[Point3], vote: &MlpWeights, clamp_radius: f64) -> Result<VoteOutput> {
    if features.rows() != nodes.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} nodes",
            features.rows(),
            nodes.len()
        )));
    }
    if vote.input_dim() != features.cols() {
        return Err(Error::invalid("vote input width differs from feature width"));
    }
    let mut g = Graph::new();
    let w = vote.bind(&mut g, "vote");
    let f = g.constant(features.clone());
    let (o, fo) = vote_on(&mut g, f, &w, clamp_radius)?;
    Ok(VoteOutput {
        offsets: g.value(o).clone(),
        feature_offsets: g.value(fo).clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpointSet {
    pub superpoints: Vec<Point3>,
    pub features: Matrix,
    pub source_node: Vec<usize>,
}

/// Indices kept by the greedy radius filter: scanning in order, a proposal
/// survives unless an already kept one lies within `radius`.
pub fn radius_filter_indices(proposals: &[Point3], radius: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut grid: std::collections::HashMap<[i64; 3], Vec<usize>> = std::collections::HashMap::new();
    let key = |p: &Point3| [(p.x / radius).floor() as i64, (p.y / radius).floor() as i64, (p.z / radius).floor() as i64];
    for (i, p) in proposals.iter().enumerate() {
        let k = key(p);
        let mut clash = false;
        'search: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cell) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if cell.iter().any(|&j| (proposals[j] - p).norm() <= radius) {
                            clash = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !clash {
            grid.entry(k).or_default().push(i);
            kept.push(i);
        }
    }
    kept
}

pub fn radius_filter(proposals: &[Point3], features: &Matrix, radius: f64) -> Result<SuperpointSet> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("filter radius must be positive, got {radius}")));
    }
    if features.rows() != proposals.len() {
        return Err(Error::invalid("one feature row per proposal required"));
    }
    let kept = radius_filter_indices(proposals, radius);
    Ok(SuperpointSet {
        superpoints: kept.iter().map(|&i| proposals[i]).collect(),
        features: features.select_rows(&kept),
        source_node: kept,
    })
}

/// Detection settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub fine_voxel: f64,
    pub clamp_radius: f64,
    pub filter_radius: f64,
    pub voting: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            fine_voxel: 0.6,
            clamp_radius: 2.4,
            filter_radius: 2.4,
            voting: true,
        }
    }
}

/// Bound weights needed for detection.
#[derive(Clone, Debug)]
pub struct BoundDetector {
    pub encoder: BoundEncoder,
    pub attention: BoundAttention,
    pub vote: BoundMlp,
}

/// One cloud's detection on the tape.
#[derive(Clone, Debug)]
pub struct DetectedCloud {
    pub encoded: EncodedCloud,
    /// Node features after the first attention stack.
    pub enhanced: Var,
    /// Every proposal before filtering, `n x 3` (the nodes when voting is off).
    pub proposals: Var,
    /// Proposal rows kept by the filter.
    pub kept: Vec<usize>,
    pub superpoints: Vec<Point3>,
    pub superpoint_features: Var,
    pub partition: PatchPartition,
}

fn rows_to_points(m: &Matrix) -> Vec<Point3> {
    (0..m.rows()).map(|i| Point3::new(m.get(i, 0), m.get(i, 1), m.get(i, 2))).collect()
}

pub(crate) fn points_to_matrix(p: &[Point3]) -> Matrix {
    Matrix::from_fn(p.len(), 3, |i, j| p[i][j])
}

fn finish_side(
    g: &mut Graph,
    encoded: EncodedCloud,
    enhanced: Var,
    vote: &BoundMlp,
    cfg: &DetectorConfig,
) -> Result<DetectedCloud> {
    let nodes = g.constant(points_to_matrix(encoded.nodes()));
    let (proposals, features, kept) = if cfg.voting {
        let (dp, df) = vote_on(g, enhanced, vote, cfg.clamp_radius)?;
        let proposals = g.add(nodes, dp)?;
        let features = g.add(enhanced, df)?;
        let kept = radius_filter_indices(&rows_to_points(g.value(proposals)), cfg.filter_radius);
        (proposals, features, kept)
    } else {
        (nodes, enhanced, (0..encoded.nodes().len()).collect())
    };
    let kept_points = g.gather_rows(proposals, &kept)?;
    let superpoints = rows_to_points(g.value(kept_points));
    let superpoint_features = g.gather_rows(features, &kept)?;
    let partition = point_to_node_partition(encoded.fine_points(), &superpoints)?;
    Ok(DetectedCloud {
        encoded,
        enhanced,
        proposals,
        kept,
        superpoints,
        superpoint_features,
        partition,
    })
}

/// Encode, enhance with the first attention stack, vote, filter and regroup
/// both clouds on the tape.
pub fn detect_on(
    g: &mut Graph,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    w: &BoundDetector,
    cfg: &DetectorConfig,
) -> Result<(DetectedCloud, DetectedCloud)> {
    let ea = encode_on(g, cloud_a, &w.encoder, cfg.fine_voxel)?;
    let eb = encode_on(g, cloud_b, &w.encoder, cfg.fine_voxel)?;
    let (fa, fb) = stack_forward(g, &w.attention, ea.node_features(), ea.nodes(), eb.node_features(), eb.nodes())?;
    let a = finish_side(g, ea, fa, &w.vote, cfg)?;
    let b = finish_side(g, eb, fb, &w.vote, cfg)?;
    Ok((a, b))
}

/// Plain-valued detection for both clouds.
pub fn detect_superpoints(
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    encoder: &EncoderWeights,
    attention: &AttentionWeights,
    vote: &MlpWeights,
    cfg: &DetectorConfig,
) -> Result<(SuperpointSet, SuperpointSet, PatchPartition, PatchPartition)> {
    let mut g = Graph::new();
    let w = BoundDetector {
        encoder: encoder.bind(&mut g, "encoder"),
        attention: attention.bind(&mut g, "roformer"),
        vote: vote.bind(&mut g, "vote"),
    };
    let (a, b) = detect_on(&mut g, cloud_a, cloud_b, &w, cfg)?;
    let set = |g: &Graph, d: DetectedCloud| {
        (
            SuperpointSet {
                superpoints: d.superpoints,
                features: g.value(d.superpoint_features).clone(),
                source_node: d.kept,
            },
            d.partition,
        )
    };
    let (sa, pa) = set(&g, a);
    let (sb, pb) = set(&g, b);
    Ok((sa, sb, pa, pb))
}
