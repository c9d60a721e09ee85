//! Scan and pose files, pair sampling, augmentation and the synthetic scene
//! generator.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Point3, RigidTransform};
use crate::numerics::Matrix;

/// Drift beyond which a parsed rotation is projected back onto SO(3).
pub const POSE_DRIFT_TOLERANCE: f64 = 1e-6;

/// Jitter applied by [`augment`].
pub const AUGMENT_JITTER: f64 = 0.01;

/// Reads a KITTI velodyne scan: little-endian `f32` quadruples
/// `(x, y, z, intensity)`. Intensity becomes a one-column feature matrix.
pub fn read_scan_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::parse(
            path,
            0,
            format!("size {} is not a multiple of 16 bytes", bytes.len()),
        ));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push(Point3::new(f(0), f(1), f(2)));
        intensity.push(f(3));
    }
    PointCloud::with_features(points, Matrix::from_vec(n, 1, intensity)?)
}

/// Writes a cloud in the KITTI scan layout. The first feature column, if
/// any, is stored as intensity; otherwise intensity is zero. Coordinates are
/// narrowed to `f32`.
pub fn write_scan_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let intensity = cloud.features().filter(|f| f.cols() > 0).map_or(0.0, |f| f.get(i, 0));
        for v in [p.x, p.y, p.z, intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parsed pose file plus the (1-based) lines whose rotation had to be
/// re-orthonormalized.
#[derive(Clone, Debug, Default)]
pub struct PoseList {
    pub poses: Vec<RigidTransform>,
    pub repaired_lines: Vec<usize>,
}

/// Parses KITTI pose text: 12 row-major numbers per nonempty line.
pub fn parse_poses(text: &str, path: &Path) -> Result<PoseList> {
    let mut out = PoseList::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 12 {
            return Err(Error::parse(path, lineno, format!("expected 12 numbers, found {}", tokens.len())));
        }
        let mut v = [0.0; 12];
        for (slot, tok) in v.iter_mut().zip(&tokens) {
            *slot = tok
                .parse::<f64>()
                .map_err(|_| Error::parse(path, lineno, format!("not a number: {tok:?}")))?;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(path, lineno, "non-finite pose entry"));
        }
        let mut pose = RigidTransform::from_row_major(&v);
        if !pose.is_valid(POSE_DRIFT_TOLERANCE) {
            pose = pose.orthonormalized();
            out.repaired_lines.push(lineno);
        }
        out.poses.push(pose);
    }
    Ok(out)
}

pub fn read_pose_file(path: &Path) -> Result<Vec<RigidTransform>> {
    Ok(read_pose_list(path)?.poses)
}

pub fn read_pose_list(path: &Path) -> Result<PoseList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, path)
}

/// One pose per line, 12 numbers in shortest round-trip form.
pub fn format_poses(poses: &[RigidTransform]) -> String {
    let mut s = String::new();
    for p in poses {
        let v = p.to_row_major();
        let line: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_pose_file(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct ScanRecord {
    pub cloud: PointCloud,
    pub sequence: String,
    pub frame: usize,
    /// Sensor-to-world.
    pub pose: RigidTransform,
}

impl ScanRecord {
    pub fn new(cloud: PointCloud, sequence: impl Into<String>, frame: usize, pose: RigidTransform) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::InsufficientData(format!("scan {frame} has no points")));
        }
        if !pose.is_valid(POSE_DRIFT_TOLERANCE) {
            return Err(Error::invalid(format!("scan {frame} has an invalid pose")));
        }
        Ok(ScanRecord {
            cloud,
            sequence: sequence.into(),
            frame,
            pose,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationPair {
    pub source: ScanRecord,
    pub target: ScanRecord,
    /// Maps source coordinates into the target frame.
    pub gt_relative: RigidTransform,
    /// Distance between the two sensor positions.
    pub distance: f64,
}

impl RegistrationPair {
    pub fn new(source: ScanRecord, target: ScanRecord) -> Self {
        let gt_relative = target.pose.inverse().compose(&source.pose);
        let distance = (target.pose.translation - source.pose.translation).norm();
        RegistrationPair {
            source,
            target,
            gt_relative,
            distance,
        }
    }
}

/// Greedy frame-skip pairing. Starting from the first frame, each anchor is
/// paired with the farthest later frame within `max_distance`, which then
/// becomes the next anchor. Anchors without a partner advance by one frame.
pub fn sample_pairs(records: &[ScanRecord], max_distance: f64) -> Vec<RegistrationPair> {
    let mut pairs = Vec::new();
    let mut i = 0;
    while i + 1 < records.len() {
        let anchor = records[i].pose.translation;
        let partner = (i + 1..records.len())
            .filter(|&j| (records[j].pose.translation - anchor).norm() <= max_distance)
            .max();
        match partner {
            Some(j) => {
                pairs.push(RegistrationPair::new(records[i].clone(), records[j].clone()));
                i = j;
            }
            None => i += 1,
        }
    }
    pairs
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    /// Boxes and poles scattered over the scene.
    pub num_objects: usize,
    /// Scene scale in meters; each view keeps a disk of radius `0.625 * extent`.
    pub extent: f64,
    /// Target fraction of shared surface between the two views.
    pub overlap_target: f64,
    pub noise_sigma: f64,
    /// Largest rotation about the vertical between views, radians.
    pub max_yaw: f64,
    /// Surface samples per square meter.
    pub density: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_objects: 40,
            extent: 27.0,
            overlap_target: 0.6,
            noise_sigma: 0.05,
            max_yaw: PI / 6.0,
            density: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn crop_radius(&self) -> f64 {
        0.625 * self.extent
    }

    fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::invalid(format!("extent must be positive, got {}", self.extent)));
        }
        if !(self.overlap_target > 0.0 && self.overlap_target <= 1.0) {
            return Err(Error::invalid(format!("overlap target must lie in (0, 1], got {}", self.overlap_target)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_yaw >= 0.0) || !(self.density > 0.0) {
            return Err(Error::invalid("noise, yaw and density must be non-negative (density positive)"));
        }
        Ok(())
    }
}

fn sample_count(rng: &mut ChaCha8Rng, expected: f64) -> usize {
    let base = expected.floor();
    base as usize + (rng.random::<f64>() < expected - base) as usize
}

fn sample_box(rng: &mut ChaCha8Rng, center: (f64, f64), density: f64, out: &mut Vec<Point3>) {
    let (w, l, h) = (
        rng.random_range(1.0..4.0),
        rng.random_range(1.0..4.0),
        rng.random_range(1.0..3.5),
    );
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..TAU));
    let local = |x: f64, y: f64, z: f64| {
        let v = rot * Vector3::new(x, y, z);
        Point3::new(center.0 + v.x, center.1 + v.y, v.z)
    };
    // four walls and the roof
    let faces: [(f64, f64, u8); 5] = [(w, h, 0), (w, h, 1), (l, h, 2), (l, h, 3), (w, l, 4)];
    for (a, b, face) in faces {
        for _ in 0..sample_count(rng, a * b * density) {
            let (u, v) = (rng.random_range(-0.5..0.5), rng.random_range(0.0..1.0));
            let p = match face {
                0 => local(u * w, -l / 2.0, v * h),
                1 => local(u * w, l / 2.0, v * h),
                2 => local(-w / 2.0, u * l, v * h),
                3 => local(w / 2.0, u * l, v * h),
                _ => local(u * w, (v - 0.5) * l, h),
            };
            out.push(p);
        }
    }
}

fn sample_pole(rng: &mut ChaCha8Rng, center: (f64, f64), density: f64, out: &mut Vec<Point3>) {
    let r = rng.random_range(0.1..0.35);
    let h = rng.random_range(3.0..7.0);
    // sampled more densely than walls so thin poles survive voxelization
    for _ in 0..sample_count(rng, TAU * r * h * density * 4.0) {
        let a = rng.random_range(0.0..TAU);
        out.push(Point3::new(
            center.0 + r * a.cos(),
            center.1 + r * a.sin(),
            rng.random_range(0.0..h),
        ));
    }
}

fn horizontal_distance(p: &Point3, c: &Vector3<f64>) -> f64 {
    (p.x - c.x).hypot(p.y - c.y)
}

/// Two cropped, noisy views of a random scene with their exact relative
/// transform. The source view sits at the world origin; the target sensor is
/// rotated about the vertical by up to `max_yaw` and displaced horizontally
/// by `extent * (1 - overlap_target)`.
pub fn synth_scene_pair(seed: u64, config: &SynthConfig) -> Result<RegistrationPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = config.crop_radius();
    let shift = config.extent * (1.0 - config.overlap_target);
    let heading = rng.random_range(0.0..TAU);
    let yaw = if config.max_yaw > 0.0 {
        rng.random_range(-config.max_yaw..=config.max_yaw)
    } else {
        0.0
    };
    let target_center = Vector3::new(shift * heading.cos(), shift * heading.sin(), 0.0);
    let target_pose = RigidTransform::yaw(yaw, target_center);
    let origin = Vector3::zeros();

    let (lo_x, hi_x) = (target_center.x.min(0.0) - radius, target_center.x.max(0.0) + radius);
    let (lo_y, hi_y) = (target_center.y.min(0.0) - radius, target_center.y.max(0.0) + radius);
    let in_either = |p: &Point3| horizontal_distance(p, &origin) <= radius || horizontal_distance(p, &target_center) <= radius;

    let mut world = Vec::new();
    let ground = sample_count(&mut rng, (hi_x - lo_x) * (hi_y - lo_y) * config.density);
    for _ in 0..ground {
        let p = Point3::new(rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y), 0.0);
        if in_either(&p) {
            world.push(p);
        }
    }
    let poles = config.num_objects / 3;
    for k in 0..config.num_objects {
        let c = (rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y));
        if k < poles {
            sample_pole(&mut rng, c, config.density, &mut world);
        } else {
            sample_box(&mut rng, c, config.density, &mut world);
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
    let to_target = target_pose.inverse();
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut shared = 0usize;
    for w in &world {
        let in_a = horizontal_distance(w, &origin) <= radius;
        let in_b = horizontal_distance(w, &target_center) <= radius;
        if in_a {
            src.push(*w);
        }
        if in_b {
            tgt.push(to_target.apply(w));
        }
        shared += (in_a && in_b) as usize;
    }
    if shared == 0 || src.is_empty() || tgt.is_empty() {
        return Err(Error::Generation(format!("seed {seed}: views do not overlap")));
    }
    if config.noise_sigma > 0.0 {
        for p in src.iter_mut().chain(tgt.iter_mut()) {
            *p += Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    let sequence = format!("synth-{seed}");
    let source = ScanRecord::new(PointCloud::new(src), sequence.clone(), 0, RigidTransform::identity())?;
    let target = ScanRecord::new(PointCloud::new(tgt), sequence, 1, target_pose)?;
    Ok(RegistrationPair::new(source, target))
}

fn jitter_and_shuffle(cloud: &PointCloud, rng: &mut ChaCha8Rng, rotation: Option<&RigidTransform>) -> PointCloud {
    let noise = Normal::new(0.0, AUGMENT_JITTER).expect("valid sigma");
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.shuffle(rng);
    let pts: Vec<Point3> = order
        .iter()
        .map(|&i| {
            let p = cloud.points()[i];
            let p = rotation.map_or(p, |r| r.apply(&p));
            p + Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
        })
        .collect();
    match cloud.features() {
        Some(f) => PointCloud::with_features(pts, f.select_rows(&order)).expect("row counts agree"),
        None => PointCloud::new(pts),
    }
}

/// Rotates the source about the vertical by a uniform angle in
/// `[-max_yaw, max_yaw]`, jitters both clouds by [`AUGMENT_JITTER`] and
/// shuffles their point order. Poses and `gt_relative` follow the rotation.
pub fn augment_with_yaw(pair: &RegistrationPair, seed: u64, max_yaw: f64) -> RegistrationPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = if max_yaw > 0.0 { rng.random_range(-max_yaw..=max_yaw) } else { 0.0 };
    let rot = RigidTransform::yaw(angle, Vector3::zeros());
    let src_cloud = jitter_and_shuffle(&pair.source.cloud, &mut rng, Some(&rot));
    let tgt_cloud = jitter_and_shuffle(&pair.target.cloud, &mut rng, None);
    let source = ScanRecord {
        cloud: src_cloud,
        pose: pair.source.pose.compose(&rot.inverse()),
        ..pair.source.clone()
    };
    let target = ScanRecord {
        cloud: tgt_cloud,
        ..pair.target.clone()
    };
    RegistrationPair {
        gt_relative: pair.gt_relative.compose(&rot.inverse()),
        source,
        target,
        distance: pair.distance,
    }
}

/// [`augment_with_yaw`] over the full circle.
pub fn augment(pair: &RegistrationPair, seed: u64) -> RegistrationPair {
    augment_with_yaw(pair, seed, PI)
}
