//! Seeded rigid multi-object scenes with exact ground-truth flow.
//!
//! Each object is a point sample of a simple surface, moved by one rigid
//! motion. The second cloud is the moved first cloud with a fraction of the
//! correspondents deleted (occlusion), optional isotropic noise, and a seeded
//! shuffle. All coordinates are rounded to `f32` so scenes round-trip through
//! the `.sfs` format bit-exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError, PointCloud, SceneMeta, ScenePair};

/// Minimum gap between object bounding boxes, one default voxel.
pub const PLACEMENT_GAP: f64 = 0.08;
const PLACEMENT_ATTEMPTS: usize = 2000;
/// Object centers are drawn from this box (x, y = height, z = depth).
const REGION_MIN: [f64; 3] = [-1.6, -0.6, 3.0];
const REGION_MAX: [f64; 3] = [1.6, 0.6, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Sphere,
    Plane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub points_per_object: usize,
    pub kinds: Vec<ObjectKind>,
    /// Translation magnitudes are uniform in `[0, translation_max]`.
    pub translation_max: f64,
    /// Rotation angles are uniform in `[-rotation_max, rotation_max]` radians.
    pub rotation_max: f64,
    pub occlusion: f64,
    pub noise_sigma: f64,
    /// Object size range (edge length / diameter).
    pub object_extent: [f64; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 2,
            points_per_object: 128,
            kinds: vec![ObjectKind::Box, ObjectKind::Sphere, ObjectKind::Plane],
            translation_max: 0.3,
            rotation_max: 0.1,
            occlusion: 0.05,
            noise_sigma: 0.0,
            object_extent: [0.3, 0.5],
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        let bad = |m: &str| Err(IoError::Invariant(format!("scene config: {m}")));
        if self.n_objects == 0 || self.points_per_object == 0 {
            return bad("scene would have zero points");
        }
        if self.kinds.is_empty() {
            return bad("no object kinds");
        }
        if self.translation_max < 0.0
            || self.rotation_max < 0.0
            || self.noise_sigma < 0.0
            || self.object_extent[0] <= 0.0
            || self.object_extent[1] < self.object_extent[0]
        {
            return bad("ranges must be nonnegative and ordered");
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return bad("occlusion fraction must be in [0, 1)");
        }
        Ok(())
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(r: &Mat3, p: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Rodrigues rotation about a unit axis.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidMotion {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotation: IDENTITY,
            translation: t,
        }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// `R p + t - p`.
    pub fn flow(&self, p: &[f64; 3]) -> [f64; 3] {
        let m = self.apply(p);
        [m[0] - p[0], m[1] - p[1], m[2] - p[2]]
    }

    /// Rotation by `rotation` about `center`, followed by `shift`; folded into
    /// the `R p + t` form.
    pub fn about(rotation: Mat3, center: [f64; 3], shift: [f64; 3]) -> Self {
        let rc = mat_vec(&rotation, &center);
        Self {
            rotation,
            translation: [
                center[0] - rc[0] + shift[0],
                center[1] - rc[1] + shift[1],
                center[2] - rc[2] + shift[2],
            ],
        }
    }
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let th: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * th.cos(), r * th.sin(), z]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Points on a centered surface of the given kind and size.
fn sample_surface(kind: ObjectKind, size: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    match kind {
        ObjectKind::Sphere => (0..n)
            .map(|_| {
                let u = unit_vector(rng);
                [u[0] * size / 2.0, u[1] * size / 2.0, u[2] * size / 2.0]
            })
            .collect(),
        ObjectKind::Plane => (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5) * size,
                    0.0,
                    rng.gen_range(-0.5..0.5) * size,
                ]
            })
            .collect(),
        ObjectKind::Box => {
            let dims: [f64; 3] = std::array::from_fn(|_| size * rng.gen_range(0.6..=1.0));
            let areas = [dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]];
            let total = 2.0 * (areas[0] + areas[1] + areas[2]);
            (0..n)
                .map(|_| {
                    let mut pick = rng.gen_range(0.0..total);
                    let mut axis = 2;
                    for (a, &area) in areas.iter().enumerate() {
                        if pick < 2.0 * area {
                            axis = a;
                            break;
                        }
                        pick -= 2.0 * area;
                    }
                    let side = if rng.gen_bool(0.5) { 0.5 } else { -0.5 };
                    std::array::from_fn(|k| {
                        if k == axis {
                            side * dims[k]
                        } else {
                            rng.gen_range(-0.5..0.5) * dims[k]
                        }
                    })
                })
                .collect()
        }
    }
}

fn aabb(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn boxes_clear(a: &([f64; 3], [f64; 3]), b: &([f64; 3], [f64; 3]), gap: f64) -> bool {
    (0..3).any(|k| a.0[k] - b.1[k] >= gap || b.0[k] - a.1[k] >= gap)
}

/// Samples and places the objects of one scene, rejecting placements whose
/// bounding boxes come closer than [`PLACEMENT_GAP`].
pub fn sample_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<[f64; 3]>>, IoError> {
    let mut placed: Vec<Vec<[f64; 3]>> = Vec::with_capacity(cfg.n_objects);
    let mut boxes = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let kind = *cfg.kinds.choose(rng).expect("validated non-empty");
        let size = rng.gen_range(cfg.object_extent[0]..=cfg.object_extent[1]);
        let local = sample_surface(kind, size, cfg.points_per_object, rng);
        let orient = axis_angle(unit_vector(rng), rng.gen_range(0.0..PI));
        let local: Vec<[f64; 3]> = local.iter().map(|p| mat_vec(&orient, p)).collect();
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c: [f64; 3] = std::array::from_fn(|k| rng.gen_range(REGION_MIN[k]..=REGION_MAX[k]));
            let pts: Vec<[f64; 3]> = local
                .iter()
                .map(|p| [f32r(p[0] + c[0]), f32r(p[1] + c[1]), f32r(p[2] + c[2])])
                .collect();
            let bb = aabb(&pts);
            if boxes.iter().all(|b| boxes_clear(&bb, b, PLACEMENT_GAP)) {
                ok = Some((pts, bb));
                break;
            }
        }
        let (pts, bb) = ok.ok_or_else(|| {
            IoError::Invariant(format!(
                "could not place {} objects without overlap",
                cfg.n_objects
            ))
        })?;
        placed.push(pts);
        boxes.push(bb);
    }
    Ok(placed)
}

/// Random rigid motion about the object's centroid.
pub fn sample_motion(cfg: &SceneConfig, object: &[[f64; 3]], rng: &mut ChaCha8Rng) -> RigidMotion {
    let n = object.len() as f64;
    let center: [f64; 3] = std::array::from_fn(|k| object.iter().map(|p| p[k]).sum::<f64>() / n);
    let angle = if cfg.rotation_max > 0.0 {
        rng.gen_range(-cfg.rotation_max..=cfg.rotation_max)
    } else {
        0.0
    };
    let axis = unit_vector(rng);
    let mag = if cfg.translation_max > 0.0 {
        rng.gen_range(0.0..=cfg.translation_max)
    } else {
        0.0
    };
    let dir = unit_vector(rng);
    RigidMotion::about(axis_angle(axis, angle), center, dir.map(|d| d * mag))
}

/// Builds a scene from placed objects and their motions: flow, occlusion,
/// noise and the shuffle of the second cloud.
pub fn assemble_scene(
    objects: &[Vec<[f64; 3]>],
    motions: &[RigidMotion],
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ScenePair, IoError> {
    if objects.len() != motions.len() {
        return Err(IoError::Invariant("one motion per object required".into()));
    }
    let mut p = Vec::new();
    let mut flow = Vec::new();
    for (obj, motion) in objects.iter().zip(motions) {
        for pt in obj {
            let pt = pt.map(f32r);
            p.push(pt);
            flow.push(motion.flow(&pt).map(f32r));
        }
    }
    let n = p.len();
    if n == 0 {
        return Err(IoError::Invariant("scene has zero points".into()));
    }
    let n_occluded = ((cfg.occlusion * n as f64).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mask = vec![1u8; n];
    for &i in &order[..n_occluded] {
        mask[i] = 0;
    }
    let mut q: Vec<[f64; 3]> = (0..n)
        .filter(|&i| mask[i] == 1)
        .map(|i| {
            std::array::from_fn(|k| {
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * gaussian(rng)
                } else {
                    0.0
                };
                f32r(p[i][k] + flow[i][k] + noise)
            })
        })
        .collect();
    q.shuffle(rng);
    ScenePair::new(
        PointCloud::new(p)?,
        PointCloud::new(q)?,
        flow,
        mask,
        SceneMeta { seed: cfg.seed },
    )
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<ScenePair, IoError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = sample_objects(cfg, &mut rng)?;
    let motions: Vec<RigidMotion> = objects.iter().map(|o| sample_motion(cfg, o, &mut rng)).collect();
    assemble_scene(&objects, &motions, cfg, &mut rng)
}

pub fn scene_file_name(i: usize) -> String {
    format!("scene_{i:05}.sfs")
}

/// Writes `count` scenes with seeds `cfg.seed + i` and a `manifest.txt`.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, dir: &Path) -> Result<(), IoError> {
    let wrap = |source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(wrap)?;
    let mut manifest = String::new();
    for i in 0..count {
        let scene_cfg = SceneConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let scene = generate_scene(&scene_cfg)?;
        let name = scene_file_name(i);
        io::save_scene(&scene, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|source| IoError::Io { path, source })
}
