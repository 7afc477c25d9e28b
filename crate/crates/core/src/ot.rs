//! Cosine correlation cost, entropic transport, barycentric flow and the
//! residual refinement head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neighbors::knn_excluding_self;
use crate::nn::{join, Linear, Module};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("sinkhorn needs at least one iteration")]
    Iterations,
    #[error("cost entry {index} is not finite ({value})")]
    NonFiniteCost { index: usize, value: f64 },
    #[error("transport row {row} sums to {sum:e}; cannot extract a flow")]
    ZeroRow { row: usize, sum: f64 },
    #[error("refinement needs at least one point")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, OtError>;

pub const NORM_GUARD: f64 = 1e-12;
pub const ROW_SUM_GUARD: f64 = 1e-12;
/// Above this spread of `-C / epsilon` within a row the stabilized kernel
/// could underflow, so iterations switch to per-step log-sum-exp.
pub const KERNEL_RANGE_LIMIT: f64 = 300.0;
pub const REFINE_HIDDEN: usize = 64;
pub const REFINE_NEIGHBORS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    pub epsilon: f64,
    pub iters: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.015,
            iters: 50,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(OtError::Epsilon(self.epsilon));
        }
        if self.iters == 0 {
            return Err(OtError::Iterations);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub t: Tensor,
    pub epsilon: f64,
    pub iters: usize,
}

impl TransportPlan {
    /// `<T, C>` on detached values.
    pub fn cost(&self, c: &Tensor) -> f64 {
        self.t.data().iter().zip(c.data()).map(|(t, c)| t * c).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.t.rows()).map(|i| self.t.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.t.cols();
        let mut out = vec![0.0; m];
        for i in 0..self.t.rows() {
            for (o, v) in out.iter_mut().zip(self.t.row(i)) {
                *o += v;
            }
        }
        out
    }
}

fn unit_rows(tape: &mut Tape, f: &Tensor) -> Result<Tensor> {
    let norms = tape.l2_norm_rows(f)?;
    let norms = tape.add_scalar(&norms, NORM_GUARD);
    Ok(tape.div_col(f, &norms)?)
}

/// `C_ij = 1 - cos(FP_i, FQ_j)`.
pub fn correlation_matrix(tape: &mut Tape, fp: &Tensor, fq: &Tensor) -> Result<Tensor> {
    if fp.shape().len() != 2 || fq.shape().len() != 2 || fp.cols() != fq.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "correlation_matrix",
            lhs: fp.shape().to_vec(),
            rhs: fq.shape().to_vec(),
        }
        .into());
    }
    let a = unit_rows(tape, fp)?;
    let b = unit_rows(tape, fq)?;
    let bt = tape.transpose(&b)?;
    let cos = tape.matmul(&a, &bt)?;
    let neg = tape.scale(&cos, -1.0);
    Ok(tape.add_scalar(&neg, 1.0))
}

fn row_max(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
        .collect()
}

fn max_of(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
}

/// Balanced entropic OT with uniform marginals, unrolled for `iters` rounds
/// of row then column updates on log-potentials.
pub fn sinkhorn(tape: &mut Tape, c: &Tensor, cfg: &OtConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    if let Some((index, &value)) = c.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(OtError::NonFiniteCost { index, value });
    }
    let (n, m) = (c.rows(), c.cols());
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let k = tape.scale(c, -1.0 / cfg.epsilon);
    let kmax = row_max(&k);
    let spread = (0..n)
        .map(|i| kmax[i] - k.row(i).iter().fold(f64::INFINITY, |a, &x| a.min(x)))
        .fold(0.0, f64::max);

    let (f, g) = if spread <= KERNEL_RANGE_LIMIT {
        stabilized_iterations(tape, &k, &kmax, log_a, log_b, cfg.iters)?
    } else {
        logsumexp_iterations(tape, &k, log_a, log_b, cfg.iters)?
    };
    let gt = tape.reshape(&g, vec![1, m])?;
    let logt = tape.add_col(&k, &f)?;
    let logt = tape.add_row(&logt, &gt)?;
    Ok(TransportPlan {
        t: tape.exp(&logt),
        epsilon: cfg.epsilon,
        iters: cfg.iters,
    })
}

/// Iterations on `E = exp(K - rowmax K)`, computed once. Shifts are
/// constants, so they cancel exactly in value and gradient.
fn stabilized_iterations(
    tape: &mut Tape,
    k: &Tensor,
    kmax: &[f64],
    log_a: f64,
    log_b: f64,
    iters: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, m) = (k.rows(), k.cols());
    let neg_kmax = Tensor::raw(vec![n, 1], kmax.iter().map(|v| -v).collect());
    let shifted = tape.add_col(k, &neg_kmax)?;
    let e = tape.exp(&shifted);
    let et = tape.transpose(&e)?;
    let mut f = Tensor::zeros(vec![n, 1]);
    let mut g = Tensor::zeros(vec![m, 1]);
    for _ in 0..iters {
        let gmax = max_of(&g);
        let w = tape.add_scalar(&g, -gmax);
        let w = tape.exp(&w);
        let s = tape.matmul(&e, &w)?;
        let s = tape.log(&s);
        let base = Tensor::raw(vec![n, 1], kmax.iter().map(|km| log_a - km - gmax).collect());
        f = tape.sub(&base, &s)?;

        let kcol = Tensor::raw(vec![n, 1], kmax.to_vec());
        let h = tape.add(&f, &kcol)?;
        let hmax = max_of(&h);
        let w = tape.add_scalar(&h, -hmax);
        let w = tape.exp(&w);
        let s = tape.matmul(&et, &w)?;
        let s = tape.log(&s);
        let base = Tensor::full(vec![m, 1], log_b - hmax);
        g = tape.sub(&base, &s)?;
    }
    Ok((f, g))
}

fn logsumexp_iterations(
    tape: &mut Tape,
    k: &Tensor,
    log_a: f64,
    log_b: f64,
    iters: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, m) = (k.rows(), k.cols());
    let kt = tape.transpose(k)?;
    let mut f = Tensor::zeros(vec![n, 1]);
    let mut g = Tensor::zeros(vec![m, 1]);
    for _ in 0..iters {
        let gt = tape.reshape(&g, vec![1, m])?;
        let z = tape.add_row(k, &gt)?;
        let l = tape.logsumexp_rows(&z)?;
        f = tape.sub(&Tensor::full(vec![n, 1], log_a), &l)?;

        let ft = tape.reshape(&f, vec![1, n])?;
        let z = tape.add_row(&kt, &ft)?;
        let l = tape.logsumexp_rows(&z)?;
        g = tape.sub(&Tensor::full(vec![m, 1], log_b), &l)?;
    }
    Ok((f, g))
}

/// `u_i = (sum_j T_ij q_j) / (sum_j T_ij) - p_i`.
pub fn extract_flow(tape: &mut Tape, t: &Tensor, p: &Tensor, q: &Tensor) -> Result<Tensor> {
    for i in 0..t.rows() {
        let sum: f64 = t.row(i).iter().sum();
        if !(sum.abs() >= ROW_SUM_GUARD) {
            return Err(OtError::ZeroRow { row: i, sum });
        }
    }
    let w = tape.row_normalize(t)?;
    let target = tape.matmul(&w, q)?;
    Ok(tape.sub(&target, p)?)
}

/// Residual head: `u + MLP([u, F, mean over neighbors of [u, F]])`.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Refiner {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let d = 2 * (3 + channels);
        Self {
            l1: Linear::new(rng, d, REFINE_HIDDEN, true),
            l2: Linear::new(rng, REFINE_HIDDEN, REFINE_HIDDEN, true),
            l3: Linear::zeros(REFINE_HIDDEN, 3, true),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let d = 2 * (3 + channels);
        Self {
            l1: Linear::zeros(d, REFINE_HIDDEN, true),
            l2: Linear::zeros(REFINE_HIDDEN, REFINE_HIDDEN, true),
            l3: Linear::zeros(REFINE_HIDDEN, 3, true),
        }
    }
}

impl Module for Refiner {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.l1.visit_params(&join(prefix, "l1"), f);
        self.l2.visit_params(&join(prefix, "l2"), f);
        self.l3.visit_params(&join(prefix, "l3"), f);
    }
}

/// Mean of `x` rows over each point's neighbor list; rows with no neighbors
/// get zeros.
pub fn neighbor_mean(tape: &mut Tape, x: &Tensor, neighbors: &[Vec<usize>]) -> Result<Tensor> {
    let n = neighbors.len();
    let mut flat = Vec::new();
    let mut owner = Vec::new();
    let mut inv = Vec::with_capacity(n);
    for (i, nb) in neighbors.iter().enumerate() {
        flat.extend_from_slice(nb);
        owner.extend(std::iter::repeat(i).take(nb.len()));
        inv.push(if nb.is_empty() { 0.0 } else { 1.0 / nb.len() as f64 });
    }
    if flat.is_empty() {
        return Ok(Tensor::zeros(vec![n, x.cols()]));
    }
    let g = tape.gather_rows(x, flat)?;
    let s = tape.scatter_add_rows(&g, owner, n)?;
    Ok(tape.mul_col(&s, &Tensor::raw(vec![n, 1], inv))?)
}

pub fn refine_flow(
    tape: &mut Tape,
    params: &Refiner,
    u: &Tensor,
    f: &Tensor,
    points: &[[f64; 3]],
) -> Result<Tensor> {
    if points.is_empty() {
        return Err(OtError::Empty);
    }
    let nb = knn_excluding_self(points, REFINE_NEIGHBORS);
    refine_flow_with_neighbors(tape, params, u, f, &nb)
}

/// [`refine_flow`] with a precomputed neighbor list.
pub fn refine_flow_with_neighbors(
    tape: &mut Tape,
    params: &Refiner,
    u: &Tensor,
    f: &Tensor,
    neighbors: &[Vec<usize>],
) -> Result<Tensor> {
    if neighbors.is_empty() {
        return Err(OtError::Empty);
    }
    let x = tape.concat_cols(&[u.clone(), f.clone()])?;
    let mean = neighbor_mean(tape, &x, neighbors)?;
    let x = tape.concat_cols(&[x, mean])?;
    let h = params.l1.forward(tape, &x)?;
    let h = tape.relu(&h);
    let h = params.l2.forward(tape, &h)?;
    let h = tape.relu(&h);
    let du = params.l3.forward(tape, &h)?;
    Ok(tape.add(u, &du)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use rand::SeedableRng;

    #[test]
    fn cosine_cost_cases() {
        let fp = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 2.0, -3.0, 0.0]).unwrap();
        let fq = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let c = correlation_matrix(&mut tape, &fp, &fq).unwrap();
        assert!(c.data()[0].abs() < 1e-10);
        assert!((c.data()[1] - 1.0).abs() < 1e-10);
        assert!((c.data()[2] - 2.0).abs() < 1e-10);
        assert!(correlation_matrix(&mut tape, &fp, &Tensor::zeros(vec![1, 3])).is_err());
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        let mut tape = Tape::new();
        let c = Tensor::full(vec![3, 4], 0.7);
        let plan = sinkhorn(&mut tape, &c, &OtConfig::default()).unwrap();
        for v in plan.t.data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    fn diag_cost(n: usize) -> Tensor {
        let data = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
        Tensor::matrix(n, n, data).unwrap()
    }

    #[test]
    fn diagonal_cost_recovers_permutation() {
        let mut tape = Tape::new();
        let cfg = OtConfig {
            epsilon: 0.01,
            iters: 100,
        };
        let plan = sinkhorn(&mut tape, &diag_cost(3), &cfg).unwrap();
        for (k, v) in plan.t.data().iter().enumerate() {
            let want = if k / 3 == k % 3 { 1.0 / 3.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-3, "{k}: {v}");
        }
    }

    #[test]
    fn both_iteration_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = uniform(&mut rng, vec![4, 6], 1.0);
        let mut tape = Tape::new();
        let k = tape.scale(&c, -1.0 / 0.05);
        let kmax = row_max(&k);
        let (f1, g1) = stabilized_iterations(&mut tape, &k, &kmax, -(4f64).ln(), -(6f64).ln(), 30).unwrap();
        let (f2, g2) = logsumexp_iterations(&mut tape, &k, -(4f64).ln(), -(6f64).ln(), 30).unwrap();
        for (a, b) in f1.data().iter().zip(f2.data()).chain(g1.data().iter().zip(g2.data())) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn wide_cost_range_uses_fallback_and_converges() {
        let mut tape = Tape::new();
        let cfg = OtConfig {
            epsilon: 1e-3,
            iters: 50,
        };
        let plan = sinkhorn(&mut tape, &diag_cost(4), &cfg).unwrap();
        assert!(plan.t.is_finite());
        for s in plan.row_sums() {
            assert!((s - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn random_marginals_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = uniform(&mut rng, vec![8, 8], 1.0);
        let mut tape = Tape::new();
        let plan = sinkhorn(&mut tape, &c, &OtConfig { epsilon: 0.1, iters: 500 }).unwrap();
        for s in plan.row_sums().into_iter().chain(plan.col_sums()) {
            assert!((s - 0.125).abs() < 1e-6);
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let mut tape = Tape::new();
        let c = Tensor::raw(vec![1, 2], vec![0.0, f64::NAN]);
        assert!(matches!(
            sinkhorn(&mut tape, &c, &OtConfig::default()),
            Err(OtError::NonFiniteCost { index: 1, .. })
        ));
        let ok = Tensor::zeros(vec![1, 1]);
        assert_eq!(
            sinkhorn(&mut tape, &ok, &OtConfig { epsilon: 0.0, iters: 1 }).unwrap_err(),
            OtError::Epsilon(0.0)
        );
        assert_eq!(
            sinkhorn(&mut tape, &ok, &OtConfig { epsilon: 0.1, iters: 0 }).unwrap_err(),
            OtError::Iterations
        );
    }

    #[test]
    fn barycentric_flow() {
        let mut tape = Tape::new();
        let q = Tensor::from_points(&[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let p = Tensor::from_points(&[[0.0, 1.0, 0.0]]).unwrap();
        let t = Tensor::matrix(1, 2, vec![0.75, 0.25]).unwrap();
        let u = extract_flow(&mut tape, &t, &p, &q).unwrap();
        assert_eq!(u.data(), &[1.0, -1.0, 0.0]);

        let t = Tensor::full(vec![1, 2], 0.1);
        let u = extract_flow(&mut tape, &t, &p, &q).unwrap();
        assert_eq!(u.data(), &[2.0, -1.0, 0.0]);

        let t = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(extract_flow(&mut tape, &t, &p, &q), Err(OtError::ZeroRow { row: 0, .. })));
    }

    #[test]
    fn identity_plan_gives_zero_flow() {
        let mut tape = Tape::new();
        let p = Tensor::from_points(&[[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]).unwrap();
        let t = tape.scale(&Tensor::identity(2), 0.5);
        let u = extract_flow(&mut tape, &t, &p, &p).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_final_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = Refiner::new(&mut rng, 4);
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * 0.1, 0.0, (i % 3) as f64]).collect();
        let u = uniform(&mut rng, vec![10, 3], 1.0);
        let f = uniform(&mut rng, vec![10, 4], 1.0);
        let mut tape = Tape::new();
        let out = refine_flow(&mut tape, &r, &u, &f, &pts).unwrap();
        assert_eq!(out, u);
        assert_eq!(
            refine_flow(&mut tape, &r, &Tensor::zeros(vec![0, 3]), &Tensor::zeros(vec![0, 4]), &[]).unwrap_err(),
            OtError::Empty
        );
    }

    #[test]
    fn neighbor_mean_averages() {
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let m = neighbor_mean(&mut tape, &x, &[vec![1, 2], vec![0], vec![]]).unwrap();
        assert_eq!(m.data(), &[4.0, 1.0, 0.0]);
    }
}
