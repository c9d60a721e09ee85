//! The full registration network: weights, checkpoint I/O, the shared forward
//! pass, the training objective and inference.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datakit::RegistrationPair;
use crate::error::{Error, Result};
use crate::geometry::{PatchPartition, Point3, PointCloud, RigidTransform};
use crate::losses::{
    build_supervision, fine_loss, gap_loss, gt_match_matrix, overlap_circle_loss, overlapping_rows,
    proposal_alignment_loss, proposal_surface_loss,
    total_loss, LossBreakdown, LossConfig,
};
use crate::matching::{
    dual_normalize, dustbin_log_marginals, extract_dense_matches, gaussian_correlation, topk_correspondences,
    CoarseMatch, DenseMatch,
};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numerics::params::{ParamVisitor, ParamVisitorMut};
use crate::numerics::{BoundMlp, Graph, Matrix, MlpWeights, Parameterized, Var};
use crate::pose::{local_to_global_registration, ransac_registration, svd_registration, PoseEstimate};
use crate::roformer::{stack_forward, AttentionWeights, BoundAttention, EmbeddingKind};
use crate::superpoint::{
    decode_on, detect_on, random_vote_weights, BoundDetector, DecoderWeights, DetectedCloud, DetectorConfig,
    EncoderWeights,
};

/// Patches with fewer points are not matched.
pub const MIN_PATCH_POINTS: usize = 3;

/// Refinement rounds of the local-to-global estimator.
pub const LGR_REFINE_ROUNDS: usize = 5;

const ARCH_TENSOR: &str = "meta.architecture";
const DUSTBIN: &str = "matching.dustbin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub dim: usize,
    pub rounds: usize,
    pub heads: usize,
    pub kind: EmbeddingKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub detector: DetectorConfig,
    /// Coarse correspondences kept for fine matching.
    pub num_coarse: usize,
    pub sinkhorn_iters: usize,
    /// Each patch is cut to the points nearest its superpoint.
    pub max_patch_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Architecture {
                dim: 64,
                rounds: 3,
                heads: 1,
                kind: EmbeddingKind::Rotary,
            },
            detector: DetectorConfig::default(),
            num_coarse: 128,
            sinkhorn_iters: 100,
            max_patch_points: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub encoder: EncoderWeights,
    pub decoder: DecoderWeights,
    /// Node attention before voting.
    pub attention: AttentionWeights,
    pub vote: MlpWeights,
    /// Superpoint attention before coarse matching.
    pub matcher: AttentionWeights,
    /// `1 x 1` dustbin score.
    pub dustbin: Matrix,
}

impl Model {
    pub fn random(arch: Architecture, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.dim;
        Ok(Model {
            arch,
            encoder: EncoderWeights::random(d, &mut rng),
            decoder: DecoderWeights::random(d, &mut rng),
            attention: AttentionWeights::random(arch.kind, d, arch.rounds, arch.heads, &mut rng)?,
            vote: random_vote_weights(d, &mut rng),
            matcher: AttentionWeights::random(arch.kind, d, arch.rounds, arch.heads, &mut rng)?,
            dustbin: Matrix::scalar(1.0),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            detector: BoundDetector {
                encoder: self.encoder.bind(g, "encoder"),
                attention: self.attention.bind(g, "roformer"),
                vote: self.vote.bind(g, "vote"),
            },
            decoder: self.decoder.bind(g, "decoder"),
            matcher: self.matcher.bind(g, "roformer_match"),
            dustbin: g.param(DUSTBIN, &self.dustbin),
        }
    }

    /// Every tensor including the architecture record.
    pub fn to_tensors(&self) -> Vec<(String, Matrix)> {
        let kind = EmbeddingKind::ALL.iter().position(|k| *k == self.arch.kind).expect("listed kind");
        let mut out = vec![(
            ARCH_TENSOR.to_string(),
            Matrix::from_rows(&[[self.arch.dim as f64, self.arch.rounds as f64, self.arch.heads as f64, kind as f64]]),
        )];
        out.extend(self.named_tensors(""));
        out
    }

    pub fn from_tensors(tensors: &[(String, Matrix)]) -> Result<Model> {
        let meta = tensors
            .iter()
            .find(|(n, _)| n == ARCH_TENSOR)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::invalid("checkpoint lacks an architecture record"))?;
        if meta.shape() != (1, 4) {
            return Err(Error::invalid("malformed architecture record"));
        }
        let v = meta.as_slice();
        let as_count = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e6 {
                Ok(x as usize)
            } else {
                Err(Error::invalid(format!("bad architecture entry {x}")))
            }
        };
        let kind = *EmbeddingKind::ALL
            .get(as_count(v[3])?)
            .ok_or_else(|| Error::invalid("unknown embedding kind in checkpoint"))?;
        let arch = Architecture {
            dim: as_count(v[0])?,
            rounds: as_count(v[1])?,
            heads: as_count(v[2])?,
            kind,
        };
        let mut model = Model::random(arch, 0)?;
        model.load_tensors("", tensors).map_err(Error::invalid)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_tensors(&read_checkpoint(path)?).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::parse(path, 0, m),
            other => other,
        })
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for Model {
    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        self.attention.visit_params(&join(prefix, "roformer"), f);
        self.vote.visit_params(&join(prefix, "vote"), f);
        self.matcher.visit_params(&join(prefix, "roformer_match"), f);
        f(&join(prefix, DUSTBIN), &self.dustbin);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
        self.attention.visit_params_mut(&join(prefix, "roformer"), f);
        self.vote.visit_params_mut(&join(prefix, "vote"), f);
        self.matcher.visit_params_mut(&join(prefix, "roformer_match"), f);
        f(&join(prefix, DUSTBIN), &mut self.dustbin);
    }
}

/// [`Model`] registered on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub detector: BoundDetector,
    pub decoder: Vec<BoundMlp>,
    pub matcher: BoundAttention,
    pub dustbin: Var,
}

/// Shared forward pass for one pair.
#[derive(Clone, Debug)]
pub struct Forward {
    pub a: DetectedCloud,
    pub b: DetectedCloud,
    /// Unit-norm superpoint descriptors for coarse matching.
    pub coarse_a: Var,
    pub coarse_b: Var,
    /// Per-fine-point descriptors.
    pub fine_a: Var,
    pub fine_b: Var,
}

pub fn forward_on(
    g: &mut Graph,
    m: &BoundModel,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    cfg: &ModelConfig,
) -> Result<Forward> {
    let (a, b) = detect_on(g, cloud_a, cloud_b, &m.detector, &cfg.detector)?;
    let (ha, hb) = stack_forward(g, &m.matcher, a.superpoint_features, &a.superpoints, b.superpoint_features, &b.superpoints)?;
    let coarse_a = g.normalize_rows(ha, 1e-12)?;
    let coarse_b = g.normalize_rows(hb, 1e-12)?;
    let fine_a = decode_on(g, &a.encoded, a.enhanced, &m.decoder)?;
    let fine_b = decode_on(g, &b.encoded, b.enhanced, &m.decoder)?;
    Ok(Forward {
        a,
        b,
        coarse_a,
        coarse_b,
        fine_a,
        fine_b,
    })
}

/// Members of `patch`, cut to the `max` points nearest its superpoint
/// (ties broken by index).
pub fn capped_patch(partition: &PatchPartition, patch: usize, points: &[Point3], center: &Point3, max: usize) -> Vec<usize> {
    let mut members = partition.patches[patch].clone();
    if members.len() > max {
        members.sort_by(|&i, &j| {
            (points[i] - center)
                .norm_squared()
                .total_cmp(&(points[j] - center).norm_squared())
                .then(i.cmp(&j))
        });
        members.truncate(max);
        members.sort_unstable();
    }
    members
}

/// Log optimal-transport plan between two point subsets, `(M+1) x (N+1)`.
fn patch_log_plan(g: &mut Graph, fwd: &Forward, dustbin: Var, ia: &[usize], ib: &[usize], iters: usize) -> Result<Var> {
    let fa = g.gather_rows(fwd.fine_a, ia)?;
    let fb = g.gather_rows(fwd.fine_b, ib)?;
    let d = g.shape(fa).1;
    let o = g.matmul_nt(fa, fb)?;
    let o = g.scale(o, 1.0 / (d as f64).sqrt());
    let aug = g.dustbin_augment(o, dustbin)?;
    let (mu, nu) = dustbin_log_marginals(ia.len(), ib.len());
    g.log_sinkhorn(aug, &mu, &nu, iters)
}

/// Correspondences at both levels together with the geometry they index.
#[derive(Clone, Debug)]
pub struct MatchResult {
    pub fine_a: Vec<Point3>,
    pub fine_b: Vec<Point3>,
    pub superpoints_a: Vec<Point3>,
    pub superpoints_b: Vec<Point3>,
    pub coarse: Vec<CoarseMatch>,
    /// `patch` is the index into `coarse`.
    pub dense: Vec<DenseMatch>,
}

pub fn match_pair(model: &Model, cfg: &ModelConfig, cloud_a: &PointCloud, cloud_b: &PointCloud) -> Result<MatchResult> {
    let mut g = Graph::new();
    let m = model.bind(&mut g);
    let fwd = forward_on(&mut g, &m, cloud_a, cloud_b, cfg)?;
    let corr = gaussian_correlation(g.value(fwd.coarse_a), g.value(fwd.coarse_b))?;
    let coarse = topk_correspondences(&dual_normalize(&corr)?, cfg.num_coarse);
    let mut dense = Vec::new();
    for (k, c) in coarse.iter().enumerate() {
        let ia = capped_patch(&fwd.a.partition, c.a, fwd.a.encoded.fine_points(), &fwd.a.superpoints[c.a], cfg.max_patch_points);
        let ib = capped_patch(&fwd.b.partition, c.b, fwd.b.encoded.fine_points(), &fwd.b.superpoints[c.b], cfg.max_patch_points);
        if ia.len() < MIN_PATCH_POINTS || ib.len() < MIN_PATCH_POINTS {
            continue;
        }
        let log_z = patch_log_plan(&mut g, &fwd, m.dustbin, &ia, &ib, cfg.sinkhorn_iters)?;
        let z = g.value(log_z).map(f64::exp);
        dense.extend(extract_dense_matches(&z, &ia, &ib, k)?);
    }
    Ok(MatchResult {
        fine_a: fwd.a.encoded.fine_points().to_vec(),
        fine_b: fwd.b.encoded.fine_points().to_vec(),
        superpoints_a: fwd.a.superpoints.clone(),
        superpoints_b: fwd.b.superpoints.clone(),
        coarse,
        dense,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Svd,
    Ransac,
    Lgr,
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "svd" => Ok(Estimator::Svd),
            "ransac" => Ok(Estimator::Ransac),
            "lgr" => Ok(Estimator::Lgr),
            other => Err(Error::invalid(format!("unknown estimator '{other}'"))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Svd => "svd",
            Estimator::Ransac => "ransac",
            Estimator::Lgr => "lgr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub estimator: Estimator,
    pub inlier_threshold: f64,
    pub ransac_iters: usize,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            estimator: Estimator::Lgr,
            inlier_threshold: 0.6,
            ransac_iters: 1000,
            seed: 0,
        }
    }
}

pub fn estimate_pose(matches: &MatchResult, cfg: &EstimatorConfig) -> Result<PoseEstimate> {
    let (pa, pb, d) = (&matches.fine_a, &matches.fine_b, &matches.dense);
    match cfg.estimator {
        Estimator::Svd => svd_registration(d, pa, pb, cfg.inlier_threshold),
        Estimator::Ransac => ransac_registration(d, pa, pb, cfg.ransac_iters, cfg.inlier_threshold, cfg.seed),
        Estimator::Lgr => local_to_global_registration(d, pa, pb, cfg.inlier_threshold, LGR_REFINE_ROUNDS),
    }
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub pose: PoseEstimate,
    pub matches: MatchResult,
}

pub fn register(
    model: &Model,
    cfg: &ModelConfig,
    est: &EstimatorConfig,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
) -> Result<Registration> {
    let matches = match_pair(model, cfg, cloud_a, cloud_b)?;
    let pose = estimate_pose(&matches, est)?;
    Ok(Registration { pose, matches })
}

/// Diagnostics of one training step besides the losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub superpoints_a: usize,
    pub superpoints_b: usize,
    pub positive_pairs: usize,
    pub fine_pairs: usize,
    pub degenerate_circle: bool,
}

/// Builds the full training objective for `pair` on `g`.
pub fn training_loss(
    g: &mut Graph,
    m: &BoundModel,
    pair: &RegistrationPair,
    cfg: &ModelConfig,
    loss: &LossConfig,
) -> Result<(Var, LossBreakdown, StepStats)> {
    let (ca, cb) = (&pair.source.cloud, &pair.target.cloud);
    let gt = &pair.gt_relative;
    let fwd = forward_on(g, m, ca, cb, cfg)?;
    // alignment is only asked of proposals whose node lies in the shared region
    let rows_a = overlapping_rows(fwd.a.encoded.nodes(), cb.points(), gt, cfg.detector.filter_radius)?;
    let rows_b = overlapping_rows(fwd.b.encoded.nodes(), ca.points(), &gt.inverse(), cfg.detector.filter_radius)?;
    let l_s1 = if rows_a.is_empty() || rows_b.is_empty() {
        g.constant(Matrix::scalar(0.0))
    } else {
        let sa = g.gather_rows(fwd.a.proposals, &rows_a)?;
        let sb = g.gather_rows(fwd.b.proposals, &rows_b)?;
        proposal_alignment_loss(g, sa, sb, gt)?
    };
    let la = proposal_surface_loss(g, fwd.a.proposals, ca.points())?;
    let lb = proposal_surface_loss(g, fwd.b.proposals, cb.points())?;
    let l_s2 = g.add(la, lb)?;

    let (fa, fb) = (fwd.a.encoded.fine_points(), fwd.b.encoded.fine_points());
    let sup = build_supervision(fa, fb, &fwd.a.partition, &fwd.b.partition, gt, loss.match_radius)?;
    let circle = overlap_circle_loss(g, fwd.coarse_a, fwd.coarse_b, &sup, &loss.circle)?;

    let mut positives = sup.positive_pairs();
    positives.sort_by(|x, y| sup.overlap.get(y.0, y.1).total_cmp(&sup.overlap.get(x.0, x.1)).then(x.cmp(y)));
    let mut per_pair = Vec::new();
    for &(i, j) in positives.iter().take(cfg.num_coarse.min(loss.max_fine_pairs)) {
        let ia = capped_patch(&fwd.a.partition, i, fa, &fwd.a.superpoints[i], cfg.max_patch_points);
        let ib = capped_patch(&fwd.b.partition, j, fb, &fwd.b.superpoints[j], cfg.max_patch_points);
        if ia.len() < MIN_PATCH_POINTS || ib.len() < MIN_PATCH_POINTS {
            continue;
        }
        let pa: Vec<Point3> = ia.iter().map(|&k| fa[k]).collect();
        let pb: Vec<Point3> = ib.iter().map(|&k| fb[k]).collect();
        let target = gt_match_matrix(&pa, &pb, gt, loss.match_radius);
        let log_z = patch_log_plan(g, &fwd, m.dustbin, &ia, &ib, cfg.sinkhorn_iters)?;
        let z = g.exp(log_z);
        per_pair.push(gap_loss(g, z, &target, loss.gap_margin)?);
    }
    let l_f = fine_loss(g, &per_pair)?;
    let (total, breakdown) = total_loss(g, l_s1, l_s2, circle.value, l_f)?;
    let stats = StepStats {
        superpoints_a: fwd.a.superpoints.len(),
        superpoints_b: fwd.b.superpoints.len(),
        positive_pairs: positives.len(),
        fine_pairs: per_pair.len(),
        degenerate_circle: circle.is_degenerate(),
    };
    Ok((total, breakdown, stats))
}

/// Superpoints of both clouds without matching.
pub fn superpoints(model: &Model, cfg: &ModelConfig, cloud_a: &PointCloud, cloud_b: &PointCloud) -> Result<(Vec<Point3>, Vec<Point3>)> {
    let mut g = Graph::new();
    let m = model.bind(&mut g);
    let (a, b) = detect_on(&mut g, cloud_a, cloud_b, &m.detector, &cfg.detector)?;
    Ok((a.superpoints, b.superpoints))
}

/// Mean distance from each aligned superpoint to the nearest one of the
/// other cloud, averaged over both directions.
pub fn mean_nearest_superpoint_distance(sa: &[Point3], sb: &[Point3], gt: &RigidTransform) -> Result<f64> {
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric("no superpoints".into()));
    }
    let aligned: Vec<Point3> = sa.iter().map(|p| gt.apply(p)).collect();
    let nearest = |q: &Point3, set: &[Point3]| set.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
    let ab: f64 = aligned.iter().map(|p| nearest(p, sb)).sum::<f64>() / aligned.len() as f64;
    let ba: f64 = sb.iter().map(|p| nearest(p, &aligned)).sum::<f64>() / sb.len() as f64;
    Ok(0.5 * (ab + ba))
}
