//! Supervised and feature-similarity consistency losses, plus evaluation
//! metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neighbors::knn_excluding_self;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("consistency loss needs more than {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("{what}: expected {expected} rows, got {got}")]
    Rows {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FscConfig {
    pub tau: f64,
    pub epsilon_g: f64,
    pub k_neighbors: usize,
    pub lambda: f64,
}

impl Default for FscConfig {
    fn default() -> Self {
        Self {
            tau: 0.39,
            epsilon_g: 19.0,
            k_neighbors: 8,
            lambda: 0.35,
        }
    }
}

impl FscConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.epsilon_g > 0.0) || self.k_neighbors == 0 || !(self.lambda >= 0.0) {
            return Err(LossError::Config(format!(
                "need tau > 0, epsilon_g > 0, k_neighbors >= 1, lambda >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_rows(what: &'static str, t: &Tensor, n: usize) -> Result<()> {
    if t.shape().len() != 2 || t.rows() != n {
        return Err(LossError::Rows {
            what,
            expected: n,
            got: t.shape().first().copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// `sum_i m_i |u_i - u*_i|_1`.
pub fn supervised_loss(tape: &mut Tape, u: &Tensor, u_star: &Tensor, mask: &[u8]) -> Result<Tensor> {
    check_rows("mask", u, mask.len())?;
    let d = tape.sub(u, u_star)?;
    let l1 = tape.l1_norm_rows(&d)?;
    let m = Tensor::raw(vec![mask.len(), 1], mask.iter().map(|&v| f64::from(v.min(1))).collect());
    let w = tape.mul(&l1, &m)?;
    Ok(tape.sum(&w))
}

/// `1 - exp(-a.b / tau)`.
pub fn fsc_similarity(fi: &[f64], fj: &[f64], tau: f64) -> f64 {
    let dot: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
    1.0 - (-dot / tau).exp()
}

/// `epsilon / (|u*|_1 + epsilon)`.
pub fn gamma_factor(u_star: &[f64; 3], epsilon_g: f64) -> f64 {
    let l1 = u_star.iter().map(|v| v.abs()).sum::<f64>();
    epsilon_g / (l1 + epsilon_g)
}

/// Directed neighbor pairs `(i, j)`, `j` in the k nearest neighbors of `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FscPairs {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl FscPairs {
    pub fn new(points: &[[f64; 3]], k: usize) -> Result<Self> {
        if points.len() <= k {
            return Err(LossError::TooFewPoints { n: points.len(), k });
        }
        let mut src = Vec::with_capacity(points.len() * k);
        let mut dst = Vec::with_capacity(points.len() * k);
        for (i, nb) in knn_excluding_self(points, k).into_iter().enumerate() {
            for j in nb {
                src.push(i);
                dst.push(j);
            }
        }
        Ok(Self { src, dst })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Per-pair similarity column. With `stop_gradient` the features are cut
/// from the tape first.
pub fn pair_similarity(
    tape: &mut Tape,
    f: &Tensor,
    pairs: &FscPairs,
    tau: f64,
    stop_gradient: bool,
) -> Result<Tensor> {
    let f = if stop_gradient { tape.stop_gradient(f) } else { f.clone() };
    let fi = tape.gather_rows(&f, pairs.src.clone())?;
    let fj = tape.gather_rows(&f, pairs.dst.clone())?;
    let prod = tape.mul(&fi, &fj)?;
    let dot = tape.sum_rows(&prod)?;
    let e = tape.scale(&dot, -1.0 / tau);
    let e = tape.exp(&e);
    let neg = tape.scale(&e, -1.0);
    Ok(tape.add_scalar(&neg, 1.0))
}

/// `sum over pairs of max(s, 0) |u_i - u_j|_1 Gamma_i` for a given
/// similarity column `s`.
pub fn fsc_loss_from_similarity(
    tape: &mut Tape,
    u: &Tensor,
    u_star: &Tensor,
    s: &Tensor,
    pairs: &FscPairs,
    epsilon_g: f64,
) -> Result<Tensor> {
    check_rows("ground-truth flow", u_star, u.rows())?;
    check_rows("similarity", s, pairs.len())?;
    let ui = tape.gather_rows(u, pairs.src.clone())?;
    let uj = tape.gather_rows(u, pairs.dst.clone())?;
    let d = tape.sub(&ui, &uj)?;
    let l1 = tape.l1_norm_rows(&d)?;
    let gamma = Tensor::raw(
        vec![pairs.len(), 1],
        pairs
            .src
            .iter()
            .map(|&i| {
                let r = u_star.row(i);
                gamma_factor(&[r[0], r[1], r[2]], epsilon_g)
            })
            .collect(),
    );
    let s = tape.relu(s);
    let w = tape.mul(&s, &l1)?;
    let w = tape.mul(&w, &gamma)?;
    Ok(tape.sum(&w))
}

/// Consistency loss. `stop_gradient = false` is the diagnostic variant in
/// which the similarity also pulls on the features.
pub fn fsc_loss(
    tape: &mut Tape,
    u: &Tensor,
    u_star: &Tensor,
    f: &Tensor,
    points: &[[f64; 3]],
    cfg: &FscConfig,
    stop_gradient: bool,
) -> Result<Tensor> {
    cfg.validate()?;
    check_rows("features", f, points.len())?;
    check_rows("flow", u, points.len())?;
    let pairs = FscPairs::new(points, cfg.k_neighbors)?;
    let s = pair_similarity(tape, f, &pairs, cfg.tau, stop_gradient)?;
    fsc_loss_from_similarity(tape, u, u_star, &s, &pairs, cfg.epsilon_g)
}

/// Mean of `max(s, 0)` over neighbor pairs on detached features, the
/// similarity as the consistency loss sees it. Raw `s` is unbounded below.
pub fn mean_similarity(f: &Tensor, pairs: &FscPairs, tau: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .src
        .iter()
        .zip(&pairs.dst)
        .map(|(&i, &j)| fsc_similarity(f.row(i), f.row(j), tau).max(0.0))
        .sum();
    total / pairs.len() as f64
}

pub fn total_loss(tape: &mut Tape, es: &Tensor, ec: &Tensor, lambda: f64) -> Result<Tensor> {
    let w = tape.scale(ec, lambda);
    Ok(tape.add(es, &w)?)
}

pub const ACC_STRICT: f64 = 0.05;
pub const ACC_RELAXED: f64 = 0.10;
pub const OUTLIER_ABS: f64 = 0.30;
pub const OUTLIER_REL: f64 = 0.10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epe3d: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub outliers: f64,
}

impl MetricsRecord {
    /// Unweighted mean of records.
    pub fn mean(records: &[MetricsRecord]) -> MetricsRecord {
        let n = records.len().max(1) as f64;
        let mut out = MetricsRecord::default();
        for r in records {
            out.epe3d += r.epe3d;
            out.acc3ds += r.acc3ds;
            out.acc3dr += r.acc3dr;
            out.outliers += r.outliers;
        }
        out.epe3d /= n;
        out.acc3ds /= n;
        out.acc3dr /= n;
        out.outliers /= n;
        out
    }
}

pub fn metrics(u: &[[f64; 3]], u_star: &[[f64; 3]]) -> Result<MetricsRecord> {
    if u.len() != u_star.len() {
        return Err(LossError::Rows {
            what: "metrics",
            expected: u_star.len(),
            got: u.len(),
        });
    }
    if u.is_empty() {
        return Ok(MetricsRecord::default());
    }
    let mut r = MetricsRecord::default();
    for (a, b) in u.iter().zip(u_star) {
        let e = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
        let gt = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = if gt > 0.0 {
            e / gt
        } else if e == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        r.epe3d += e;
        r.acc3ds += f64::from(u8::from(e < ACC_STRICT || rel < ACC_STRICT));
        r.acc3dr += f64::from(u8::from(e < ACC_RELAXED || rel < ACC_RELAXED));
        r.outliers += f64::from(u8::from(e > OUTLIER_ABS || rel > OUTLIER_REL));
    }
    let n = u.len() as f64;
    r.epe3d /= n;
    r.acc3ds /= n;
    r.acc3dr /= n;
    r.outliers /= n;
    Ok(r)
}

pub fn metrics_csv(rows: &[(String, MetricsRecord)]) -> String {
    let mut out = String::from("scene_id,epe3d,acc3ds,acc3dr,outliers\n");
    for (id, m) in rows {
        out.push_str(&format!(
            "{id},{:.6},{:.6},{:.6},{:.6}\n",
            m.epe3d, m.acc3ds, m.acc3dr, m.outliers
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supervised_cases() {
        let mut tape = Tape::new();
        let u = Tensor::from_points(&[[1.0, -2.0, 2.0]]).unwrap();
        let z = Tensor::zeros(vec![1, 3]);
        assert_eq!(supervised_loss(&mut tape, &u, &z, &[1]).unwrap().item(), 5.0);
        assert_eq!(supervised_loss(&mut tape, &u, &z, &[0]).unwrap().item(), 0.0);
        assert_eq!(supervised_loss(&mut tape, &u, &u, &[1]).unwrap().item(), 0.0);
        assert!(supervised_loss(&mut tape, &u, &z, &[1, 1]).is_err());
    }

    #[test]
    fn similarity_and_gamma() {
        assert_eq!(fsc_similarity(&[1.0, 0.0], &[0.0, 1.0], 0.39), 0.0);
        let s = fsc_similarity(&[0.39], &[1.0], 0.39);
        assert!((s - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((fsc_similarity(&[1e3], &[1e3], 0.39) - 1.0).abs() < 1e-15);
        assert_eq!(gamma_factor(&[0.0; 3], 19.0), 1.0);
        assert_eq!(gamma_factor(&[0.5, -0.25, 0.25], 19.0), 0.95);
        assert_eq!(gamma_factor(&[19.0, 0.0, 0.0], 19.0), 0.5);
    }

    #[test]
    fn single_pair_term() {
        // Two points, k = 1: both directions contribute.
        let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
        let tau: f64 = 0.39;
        let f = Tensor::matrix(2, 1, vec![tau.sqrt(), tau.sqrt()]).unwrap();
        let u = Tensor::from_points(&[[0.0; 3], [1.0, 1.0, 0.0]]).unwrap();
        let u_star = Tensor::from_points(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let cfg = FscConfig {
            k_neighbors: 1,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let ec = fsc_loss(&mut tape, &u, &u_star, &f, &pts, &cfg, true).unwrap();
        let term = (1.0 - (-1.0f64).exp()) * 2.0 * 0.95;
        assert!((ec.item() - 2.0 * term).abs() < 1e-12);
        assert!((term - 1.20103).abs() < 1e-5);
    }

    #[test]
    fn fsc_zero_cases() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let u = Tensor::full(vec![10, 3], 0.4);
        let f = Tensor::full(vec![10, 2], 1.0);
        let mut tape = Tape::new();
        let cfg = FscConfig::default();
        assert_eq!(fsc_loss(&mut tape, &u, &u, &f, &pts, &cfg, true).unwrap().item(), 0.0);
        let u2 = Tensor::raw(vec![10, 3], (0..30).map(|k| k as f64).collect());
        let z = Tensor::zeros(vec![10, 2]);
        assert_eq!(fsc_loss(&mut tape, &u2, &u, &z, &pts, &cfg, true).unwrap().item(), 0.0);
        assert!(matches!(
            fsc_loss(&mut tape, &u, &u, &f, &pts[..8], &cfg, true),
            Err(LossError::Rows { .. }) | Err(LossError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn too_few_points() {
        let pts: Vec<[f64; 3]> = (0..8).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(FscPairs::new(&pts, 8).unwrap_err(), LossError::TooFewPoints { n: 8, k: 8 });
    }

    #[test]
    fn total_loss_cases() {
        let mut tape = Tape::new();
        let l = total_loss(&mut tape, &Tensor::scalar(1.0), &Tensor::scalar(2.0), 0.35).unwrap();
        assert!((l.item() - 1.7).abs() < 1e-15);
        let l = total_loss(&mut tape, &Tensor::scalar(1.0), &Tensor::scalar(2.0), 0.0).unwrap();
        assert_eq!(l.item(), 1.0);
    }

    #[test]
    fn metric_fixture() {
        let errs = [0.01, 0.06, 0.2, 0.5];
        let gt: Vec<[f64; 3]> = (0..4).map(|_| [1.0, 0.0, 0.0]).collect();
        let u: Vec<[f64; 3]> = errs.iter().map(|e| [1.0, *e, 0.0]).collect();
        let m = metrics(&u, &gt).unwrap();
        assert!((m.epe3d - 0.1925).abs() < 1e-12);
        assert_eq!((m.acc3ds, m.acc3dr, m.outliers), (0.25, 0.5, 0.5));
        let p = metrics(&gt, &gt).unwrap();
        assert_eq!((p.epe3d, p.acc3ds, p.acc3dr, p.outliers), (0.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn zero_ground_truth_relative_error() {
        let m = metrics(&[[0.0; 3], [0.2, 0.0, 0.0]], &[[0.0; 3], [0.0; 3]]).unwrap();
        assert_eq!(m.acc3ds, 0.5);
        assert_eq!(m.outliers, 0.5);
        let m = metrics(&[[0.31, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        assert_eq!(m.outliers, 1.0);
    }

    #[test]
    fn csv_layout() {
        let s = metrics_csv(&[("a".into(), MetricsRecord { epe3d: 0.5, acc3ds: 1.0, acc3dr: 1.0, outliers: 0.0 })]);
        assert_eq!(s, "scene_id,epe3d,acc3ds,acc3dr,outliers\na,0.500000,1.000000,1.000000,0.000000\n");
    }

    #[test]
    fn mean_similarity_ignores_negative_pairs() {
        let f = Tensor::matrix(3, 1, vec![1.0, 1.0, -50.0]).unwrap();
        let pairs = FscPairs {
            src: vec![0, 0],
            dst: vec![1, 2],
        };
        let tau: f64 = 0.39;
        let want = (1.0 - (-1.0 / tau).exp()) / 2.0;
        assert!((mean_similarity(&f, &pairs, tau) - want).abs() < 1e-15);
    }
}
