//! Point clouds, scene pairs, the `.sfs` / `SFF1` binary formats, the
//! preprocessing filters, and error-colored PLY export.
//!
//! Coordinates follow one frame everywhere: `+z` is depth, `+y` is height.
//!
//! Scene file layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | `SFS1` |
//! | 4 + 4 | `u32 n_p`, `u32 n_q` |
//! | 12 n_p | `f32` P |
//! | 12 n_q | `f32` Q |
//! | 12 n_p | `f32` ground-truth flow |
//! | n_p | mask bytes, 0 or 1 |
//! | 8 | `u64` seed |
//!
//! Values are stored as `f32`; a scene whose coordinates are already
//! `f32`-representable (every generated scene is) round-trips bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const SCENE_MAGIC: &[u8; 4] = b"SFS1";
pub const FLOW_MAGIC: &[u8; 4] = b"SFF1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("{path}: truncated payload ({got} bytes, need {need})")]
    Truncated { path: PathBuf, got: usize, need: usize },
    #[error("{path}: non-finite value in {field}")]
    NonFinite { path: PathBuf, field: &'static str },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("preprocess: {survivors} points survive the filters, {requested} requested")]
    TooFewPoints { survivors: usize, requested: usize },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(IoError::Invariant("point cloud is empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IoError::Invariant("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SceneMeta {
    pub seed: u64,
}

/// Two clouds with ground-truth flow and non-occlusion mask for the first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub p: PointCloud,
    pub q: PointCloud,
    pub gt_flow: Vec<[f64; 3]>,
    pub mask: Vec<u8>,
    pub meta: SceneMeta,
}

impl ScenePair {
    pub fn new(
        p: PointCloud,
        q: PointCloud,
        gt_flow: Vec<[f64; 3]>,
        mask: Vec<u8>,
        meta: SceneMeta,
    ) -> Result<Self> {
        let scene = Self {
            p,
            q,
            gt_flow,
            mask,
            meta,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if self.gt_flow.len() != n {
            return Err(IoError::Invariant(format!(
                "gt_flow has {} rows, P has {n}",
                self.gt_flow.len()
            )));
        }
        if self.mask.len() != n {
            return Err(IoError::Invariant(format!(
                "mask has {} entries, P has {n}",
                self.mask.len()
            )));
        }
        if let Some(v) = self.mask.iter().find(|&&m| m > 1) {
            return Err(IoError::Invariant(format!("mask value {v} is not 0 or 1")));
        }
        if self.gt_flow.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IoError::Invariant("gt_flow has non-finite values".into()));
        }
        Ok(())
    }

    pub fn n_p(&self) -> usize {
        self.p.len()
    }

    pub fn n_q(&self) -> usize {
        self.q.len()
    }
}

/// Predicted per-point flow for the first cloud of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: Vec<[f64; 3]>,
}

impl FlowField {
    pub fn new(flow: Vec<[f64; 3]>) -> Result<Self> {
        if flow.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IoError::Invariant("flow has non-finite values".into()));
        }
        Ok(Self { flow })
    }

    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }
}

fn put_points(buf: &mut Vec<u8>, pts: &[[f64; 3]]) {
    for p in pts {
        for &v in p {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub fn encode_scene(scene: &ScenePair) -> Result<Vec<u8>> {
    scene.validate()?;
    let (np, nq) = (scene.n_p(), scene.n_q());
    let mut buf = Vec::with_capacity(16 + 12 * (2 * np + nq) + np + 8);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&(np as u32).to_le_bytes());
    buf.extend_from_slice(&(nq as u32).to_le_bytes());
    put_points(&mut buf, scene.p.points());
    put_points(&mut buf, scene.q.points());
    put_points(&mut buf, &scene.gt_flow);
    buf.extend_from_slice(&scene.mask);
    buf.extend_from_slice(&scene.meta.seed.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn points(&mut self, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for v in &mut p {
                    *v = f32::from_le_bytes(self.take(4).try_into().unwrap()) as f64;
                }
                p
            })
            .collect()
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    Ok(())
}

/// Parses `.sfs` bytes; `path` only labels errors.
pub fn decode_scene(bytes: &[u8], path: &Path) -> Result<ScenePair> {
    check_magic(bytes, SCENE_MAGIC, path)?;
    let truncated = |need| IoError::Truncated {
        path: path.to_path_buf(),
        got: bytes.len(),
        need,
    };
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let mut r = Reader { bytes, pos: 4 };
    let np = r.u32() as usize;
    let nq = r.u32() as usize;
    let need = 12 + 12 * (2 * np + nq) + np + 8;
    if bytes.len() < need {
        return Err(truncated(need));
    }
    if bytes.len() > need {
        return Err(IoError::Invariant(format!(
            "{}: payload is {} bytes, header implies {need} (mask length does not match n_p = {np})",
            path.display(),
            bytes.len()
        )));
    }
    let p = r.points(np);
    let q = r.points(nq);
    let gt_flow = r.points(np);
    let mask = r.take(np).to_vec();
    let seed = u64::from_le_bytes(r.take(8).try_into().unwrap());
    let non_finite = |field| IoError::NonFinite {
        path: path.to_path_buf(),
        field,
    };
    for (field, pts) in [("P", &p), ("Q", &q), ("gt_flow", &gt_flow)] {
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(non_finite(field));
        }
    }
    ScenePair::new(
        PointCloud::new(p)?,
        PointCloud::new(q)?,
        gt_flow,
        mask,
        SceneMeta { seed },
    )
}

pub fn save_scene(scene: &ScenePair, path: &Path) -> Result<()> {
    let bytes = encode_scene(scene)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_scene(path: &Path) -> Result<ScenePair> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_scene(&bytes, path)
}

/// Loads every scene listed in a newline-separated manifest; entries are
/// relative to the manifest's directory.
pub fn load_manifest(manifest: &Path) -> Result<Vec<(String, ScenePair)>> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let name = l.trim().to_string();
            let scene = load_scene(&dir.join(&name))?;
            Ok((name, scene))
        })
        .collect()
}

/// Accepts either a manifest file or a directory containing `manifest.txt`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.txt")
    } else {
        path.to_path_buf()
    }
}

pub fn save_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 12 * flow.len());
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.len() as u32).to_le_bytes());
    put_points(&mut buf, &flow.flow);
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    check_magic(&bytes, FLOW_MAGIC, path)?;
    if bytes.len() < 8 {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            need: 8,
        });
    }
    let mut r = Reader { bytes: &bytes, pos: 4 };
    let n = r.u32() as usize;
    let need = 8 + 12 * n;
    if bytes.len() != need {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            need,
        });
    }
    let flow = r.points(n);
    if flow.iter().flatten().any(|v| !v.is_finite()) {
        return Err(IoError::NonFinite {
            path: path.to_path_buf(),
            field: "flow",
        });
    }
    Ok(FlowField { flow })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub sample_n: usize,
    /// Points with depth (`z`) above this are dropped.
    pub max_depth: f64,
    /// Points with height (`y`) below this are dropped.
    pub min_height: f64,
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            sample_n: 8192,
            max_depth: 35.0,
            min_height: -1.4,
            seed: 0,
        }
    }
}

/// Output of [`preprocess`]: the kept rows, in sampled order.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub points: Vec<[f64; 3]>,
    pub flow: Option<Vec<[f64; 3]>>,
    pub mask: Option<Vec<u8>>,
    /// Source row of every kept point.
    pub indices: Vec<usize>,
}

/// Depth cut, ground cut, then seeded sampling without replacement.
pub fn preprocess(
    cloud: &PointCloud,
    flow: Option<&[[f64; 3]]>,
    mask: Option<&[u8]>,
    opts: &PreprocessOptions,
) -> Result<Preprocessed> {
    let n = cloud.len();
    if opts.sample_n == 0 {
        return Err(IoError::Invariant("sample_n must be at least 1".into()));
    }
    if flow.is_some_and(|f| f.len() != n) || mask.is_some_and(|m| m.len() != n) {
        return Err(IoError::Invariant(
            "aligned arrays must share the cloud's row count".into(),
        ));
    }
    let mut survivors: Vec<usize> = (0..n)
        .filter(|&i| {
            let p = cloud.points[i];
            p[2] <= opts.max_depth && p[1] >= opts.min_height
        })
        .collect();
    if survivors.len() < opts.sample_n {
        return Err(IoError::TooFewPoints {
            survivors: survivors.len(),
            requested: opts.sample_n,
        });
    }
    // Fisher-Yates prefix.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let len = survivors.len();
    for i in 0..opts.sample_n {
        let j = rng.gen_range(i..len);
        survivors.swap(i, j);
    }
    survivors.truncate(opts.sample_n);
    Ok(Preprocessed {
        points: survivors.iter().map(|&i| cloud.points[i]).collect(),
        flow: flow.map(|f| survivors.iter().map(|&i| f[i]).collect()),
        mask: mask.map(|m| survivors.iter().map(|&i| m[i]).collect()),
        indices: survivors,
    })
}

/// Error class boundaries for visualisation.
pub const SMALL_ERROR: f64 = 0.05;
pub const LARGE_ERROR: f64 = 0.3;

pub fn error_color(epe: f64) -> [u8; 3] {
    if epe < SMALL_ERROR {
        [128, 128, 128]
    } else if epe < LARGE_ERROR {
        [255, 0, 0]
    } else {
        [0, 0, 255]
    }
}

pub fn error_ply(scene: &ScenePair, pred: &FlowField) -> Result<String> {
    if pred.len() != scene.n_p() {
        return Err(IoError::Invariant(format!(
            "prediction has {} rows, scene has {}",
            pred.len(),
            scene.n_p()
        )));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", scene.n_p()));
    for axis in ["x", "y", "z"] {
        s.push_str(&format!("property float {axis}\n"));
    }
    for c in ["red", "green", "blue"] {
        s.push_str(&format!("property uchar {c}\n"));
    }
    s.push_str("end_header\n");
    for ((p, u), g) in scene.p.points().iter().zip(&pred.flow).zip(&scene.gt_flow) {
        let epe = ((u[0] - g[0]).powi(2) + (u[1] - g[1]).powi(2) + (u[2] - g[2]).powi(2)).sqrt();
        let [r, gc, b] = error_color(epe);
        s.push_str(&format!("{} {} {} {r} {gc} {b}\n", p[0], p[1], p[2]));
    }
    Ok(s)
}

pub fn export_error_ply(scene: &ScenePair, pred: &FlowField, path: &Path) -> Result<()> {
    let text = error_ply(scene, pred)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Seeded permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
