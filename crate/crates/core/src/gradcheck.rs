//! Central-difference checks of every differentiable stage on small `f64`
//! instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::losses::{self, FscConfig, FscPairs};
use crate::model::match_features;
use crate::nn::{bind, uniform, Linear, Module};
use crate::ot::{self, OtConfig, Refiner};
use crate::tensor::{grad_check_many, Result, Tape, Tensor, TensorError};
use crate::transformer::{self, TransformerConfig, TransformerParams};
use crate::unet::{sparse_conv, SparseConvLayer, SparseLevel};
use crate::voxel;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
pub const MAX_POINTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_error: f64,
    pub passed: bool,
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
    let t = uniform(rng, vec![n, 3], scale);
    t.to_points()
}

/// `sum(R * y)` for a fixed random `R`, so every output entry matters.
fn probe(tape: &mut Tape, y: &Tensor, r: &Tensor) -> Result<Tensor> {
    let w = tape.mul(y, r)?;
    Ok(tape.sum(&w))
}

fn setup_failure(e: impl std::fmt::Display) -> TensorError {
    // Module errors inside a checked closure only arise from shape bugs.
    panic!("gradient check setup failed: {e}")
}

/// Rebinds module parameters from `inputs` in visiting order.
fn load_params<M: Module>(module: &mut M, inputs: &[Tensor]) {
    let mut k = 0;
    module.visit_params("", &mut |_, t| {
        *t = inputs[k].clone();
        k += 1;
    });
}

fn params_of<M: Module>(module: &mut M) -> Vec<Tensor> {
    let mut tape = Tape::new();
    bind(module, &mut tape).iter().map(Tensor::detach).collect()
}

fn check(name: &'static str, err: Result<f64>) -> GradCheck {
    let max_error = err.unwrap_or(f64::INFINITY);
    GradCheck {
        name,
        max_error,
        passed: max_error < TOLERANCE,
    }
}

pub fn check_devoxelize(rng: &mut ChaCha8Rng) -> GradCheck {
    let pts = random_points(rng, 12, 0.2);
    let grid = voxel::voxelize(&pts, 0.08).expect("finite points");
    let feats = uniform(rng, vec![grid.len(), 4], 1.0);
    let r = uniform(rng, vec![12, 4], 1.0);
    check(
        "devoxelize",
        grad_check_many(
            |t, x| {
                let y = voxel::devoxelize(t, &grid, &x[0], &pts, 3).map_err(setup_failure)?;
                probe(t, &y, &r)
            },
            &[feats],
            STEP,
            None,
        ),
    )
}

pub fn check_sparse_conv(rng: &mut ChaCha8Rng) -> GradCheck {
    let coords: Vec<[i32; 3]> = (0..10).map(|i| [i % 3, (i / 3) % 2, i / 6]).collect();
    let level = SparseLevel::new(coords);
    let layer = SparseConvLayer::new(rng, 2, 3, 2);
    let x = uniform(rng, vec![10, 2], 1.0);
    let mut inputs = vec![x];
    inputs.extend(layer.weights.iter().cloned());
    inputs.push(uniform(rng, vec![1, 3], 1.0));
    let out_rows = level.downsample().0.len();
    let r = uniform(rng, vec![out_rows, 3], 1.0);
    check(
        "sparse_conv",
        grad_check_many(
            |t, x| {
                let l = SparseConvLayer {
                    weights: x[1..28].to_vec(),
                    bias: x[28].clone(),
                    stride: 2,
                };
                let (_, y) = sparse_conv(t, &l, &level, &x[0]).map_err(setup_failure)?;
                probe(t, &y, &r)
            },
            &inputs,
            STEP,
            None,
        ),
    )
}

pub fn check_attention(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = TransformerConfig {
        channels: 4,
        c_a: 3,
        max_points: MAX_POINTS,
    };
    let mut params = TransformerParams::new(&cfg, rng).expect("valid config");
    let n = 8;
    let fs = uniform(rng, vec![n, 4], 1.0);
    let pts = Tensor::from_points(&random_points(rng, n, 1.0)).expect("finite");
    let r = uniform(rng, vec![n, 4], 1.0);
    let mut inputs = vec![fs];
    inputs.extend(params_of(&mut params));
    check(
        "attention_aggregate",
        grad_check_many(
            |t, x| {
                let mut p = params.clone();
                load_params(&mut p, &x[1..]);
                let g = transformer::encode_position(t, &p, &pts).map_err(setup_failure)?;
                let a = transformer::attention_matrix(t, &p, &x[0], &g).map_err(setup_failure)?;
                let fr = transformer::transformer_aggregate(t, &p, &x[0], &g, &a).map_err(setup_failure)?;
                let f = transformer::fuse_features(t, &x[0], &fr).map_err(setup_failure)?;
                probe(t, &f, &r)
            },
            &inputs,
            STEP,
            None,
        ),
    )
}

pub fn check_correlation(rng: &mut ChaCha8Rng) -> GradCheck {
    let fp = uniform(rng, vec![6, 5], 1.0);
    let fq = uniform(rng, vec![7, 5], 1.0);
    let r = uniform(rng, vec![6, 7], 1.0);
    check(
        "correlation",
        grad_check_many(
            |t, x| {
                let c = ot::correlation_matrix(t, &x[0], &x[1]).map_err(setup_failure)?;
                probe(t, &c, &r)
            },
            &[fp, fq],
            STEP,
            None,
        ),
    )
}

fn sinkhorn_flow_check(rng: &mut ChaCha8Rng, name: &'static str, cfg: OtConfig, cost_scale: f64) -> GradCheck {
    let (n, m) = (6, 7);
    let c = uniform(rng, vec![n, m], cost_scale);
    let p = Tensor::from_points(&random_points(rng, n, 1.0)).expect("finite");
    let q = Tensor::from_points(&random_points(rng, m, 1.0)).expect("finite");
    let r = uniform(rng, vec![n, 3], 1.0);
    check(
        name,
        grad_check_many(
            |t, x| {
                let plan = ot::sinkhorn(t, &x[0], &cfg).map_err(setup_failure)?;
                let u = ot::extract_flow(t, &plan.t, &p, &q).map_err(setup_failure)?;
                probe(t, &u, &r)
            },
            &[c],
            STEP,
            None,
        ),
    )
}

pub fn check_sinkhorn(rng: &mut ChaCha8Rng) -> GradCheck {
    sinkhorn_flow_check(rng, "sinkhorn_extract_flow", OtConfig { epsilon: 0.1, iters: 30 }, 1.0)
}

/// Exercises the per-iteration log-sum-exp path taken for wide cost ranges.
pub fn check_sinkhorn_wide(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = OtConfig {
        epsilon: 1.0 / 400.0,
        iters: 10,
    };
    sinkhorn_flow_check(rng, "sinkhorn_extract_flow_wide", cfg, 1.0)
}

/// Features through cost, transport, flow and the supervised loss.
pub fn check_matching_pipeline(rng: &mut ChaCha8Rng) -> GradCheck {
    let fp = uniform(rng, vec![6, 4], 1.0);
    let fq = uniform(rng, vec![6, 4], 1.0);
    let p = Tensor::from_points(&random_points(rng, 6, 1.0)).expect("finite");
    let q = Tensor::from_points(&random_points(rng, 6, 1.0)).expect("finite");
    let gt = uniform(rng, vec![6, 3], 1.0);
    let mask = [1, 1, 0, 1, 1, 1];
    let cfg = OtConfig { epsilon: 0.1, iters: 20 };
    check(
        "matching_supervised",
        grad_check_many(
            |t, x| {
                let (_, _, u) = match_features(t, &x[0], &x[1], &p, &q, &cfg).map_err(setup_failure)?;
                losses::supervised_loss(t, &u, &gt, &mask).map_err(setup_failure)
            },
            &[fp, fq],
            STEP,
            None,
        ),
    )
}

pub fn check_refine(rng: &mut ChaCha8Rng) -> GradCheck {
    let n = 6;
    let c = 3;
    let mut refiner = Refiner::new(rng, c);
    // Nonzero head so the MLP path is exercised.
    refiner.l3 = Linear::new(rng, ot::REFINE_HIDDEN, 3, true);
    let pts = random_points(rng, n, 1.0);
    let u = uniform(rng, vec![n, 3], 1.0);
    let f = uniform(rng, vec![n, c], 1.0);
    let r = uniform(rng, vec![n, 3], 1.0);
    let mut inputs = vec![u, f];
    inputs.extend(params_of(&mut refiner));
    check(
        "refine_flow",
        grad_check_many(
            |t, x| {
                let mut p = refiner.clone();
                load_params(&mut p, &x[2..]);
                let y = ot::refine_flow(t, &p, &x[0], &x[1], &pts).map_err(setup_failure)?;
                probe(t, &y, &r)
            },
            &inputs,
            STEP,
            None,
        ),
    )
}

pub fn check_supervised(rng: &mut ChaCha8Rng) -> GradCheck {
    let u = uniform(rng, vec![10, 3], 1.0);
    let gt = uniform(rng, vec![10, 3], 1.0);
    let mask: Vec<u8> = (0..10).map(|i| u8::from(i % 4 != 0)).collect();
    check(
        "supervised_loss",
        grad_check_many(
            |t, x| losses::supervised_loss(t, &x[0], &gt, &mask).map_err(setup_failure),
            &[u],
            STEP,
            None,
        ),
    )
}

fn fsc_setup(rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Tensor, Tensor, Tensor, FscConfig) {
    let n = 12;
    let pts = random_points(rng, n, 1.0);
    let u = uniform(rng, vec![n, 3], 1.0);
    let gt = uniform(rng, vec![n, 3], 1.0);
    // Positive-leaning features keep every similarity away from the clamp.
    let f = uniform(rng, vec![n, 4], 0.5);
    let f = Tensor::new(f.shape().to_vec(), f.data().iter().map(|v| v + 0.6).collect()).expect("finite");
    (pts, u, gt, f, FscConfig::default())
}

pub fn check_fsc(rng: &mut ChaCha8Rng) -> GradCheck {
    let (pts, u, gt, f, cfg) = fsc_setup(rng);
    check(
        "fsc_loss",
        grad_check_many(
            |t, x| losses::fsc_loss(t, &x[0], &gt, &f, &pts, &cfg, true).map_err(setup_failure),
            &[u],
            STEP,
            None,
        ),
    )
}

/// The diagnostic variant lets gradients reach the features as well.
pub fn check_fsc_through_features(rng: &mut ChaCha8Rng) -> GradCheck {
    let (pts, u, gt, f, cfg) = fsc_setup(rng);
    check(
        "fsc_loss_no_stop_gradient",
        grad_check_many(
            |t, x| losses::fsc_loss(t, &x[0], &gt, &x[1], &pts, &cfg, false).map_err(setup_failure),
            &[u, f],
            STEP,
            None,
        ),
    )
}

/// Similarity column for the given pairs, frozen as a constant.
pub fn frozen_similarity(f: &Tensor, pairs: &FscPairs, tau: f64) -> Tensor {
    let mut tape = Tape::new();
    losses::pair_similarity(&mut tape, &f.detach(), pairs, tau, false)
        .expect("valid pairs")
        .detach()
}

pub fn run_suite(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_devoxelize(&mut rng),
        check_sparse_conv(&mut rng),
        check_attention(&mut rng),
        check_correlation(&mut rng),
        check_sinkhorn(&mut rng),
        check_sinkhorn_wide(&mut rng),
        check_matching_pipeline(&mut rng),
        check_refine(&mut rng),
        check_supervised(&mut rng),
        check_fsc(&mut rng),
        check_fsc_through_features(&mut rng),
    ]
}
