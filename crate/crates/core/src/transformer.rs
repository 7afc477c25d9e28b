//! Single-head global self-attention with an absolute positional encoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{join, Linear, Module};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error("attention needs at least one point")]
    Empty,
    #[error("{n} points exceed the attention cap of {max}")]
    TooManyPoints { n: usize, max: usize },
    #[error("invalid transformer config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, TransformerError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub channels: usize,
    pub c_a: usize,
    pub max_points: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            c_a: 32,
            max_points: 2048,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.c_a == 0 || self.max_points == 0 {
            return Err(TransformerError::Config(
                "channels, c_a and max_points must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub phi1: Linear,
    pub phi2: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub c_a: usize,
    pub max_points: usize,
}

impl TransformerParams {
    pub fn new(cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            phi1: Linear::new(rng, 3, c, true),
            phi2: Linear::new(rng, c, c, true),
            wq: Linear::new(rng, c, cfg.c_a, false),
            wk: Linear::new(rng, c, cfg.c_a, false),
            wv: Linear::new(rng, c, c, false),
            c_a: cfg.c_a,
            max_points: cfg.max_points,
        })
    }

    pub fn zeros(cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            phi1: Linear::zeros(3, c, true),
            phi2: Linear::zeros(c, c, true),
            wq: Linear::zeros(c, cfg.c_a, false),
            wk: Linear::zeros(c, cfg.c_a, false),
            wv: Linear::zeros(c, c, false),
            c_a: cfg.c_a,
            max_points: cfg.max_points,
        })
    }

    pub fn channels(&self) -> usize {
        self.wv.output_dim()
    }

    fn check_size(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(TransformerError::Empty);
        }
        if n > self.max_points {
            return Err(TransformerError::TooManyPoints {
                n,
                max: self.max_points,
            });
        }
        Ok(())
    }
}

impl Module for TransformerParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.phi1.visit_params(&join(prefix, "phi1"), f);
        self.phi2.visit_params(&join(prefix, "phi2"), f);
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
    }
}

/// `G = phi(P)`, a two-layer MLP with ReLU in between.
pub fn encode_position(tape: &mut Tape, params: &TransformerParams, points: &Tensor) -> Result<Tensor> {
    let h = params.phi1.forward(tape, points)?;
    let h = tape.relu(&h);
    Ok(params.phi2.forward(tape, &h)?)
}

/// Row-softmax of `(X Wq)(X Wk)^T / c_a` with `X = FS + G`.
pub fn attention_matrix(tape: &mut Tape, params: &TransformerParams, fs: &Tensor, g: &Tensor) -> Result<Tensor> {
    params.check_size(fs.rows())?;
    let x = tape.add(fs, g)?;
    let q = params.wq.forward(tape, &x)?;
    let k = params.wk.forward(tape, &x)?;
    let kt = tape.transpose(&k)?;
    let logits = tape.matmul(&q, &kt)?;
    let logits = tape.scale(&logits, 1.0 / params.c_a as f64);
    Ok(tape.softmax_rows(&logits)?)
}

/// `F^R = A (FS + G) Wv`.
pub fn transformer_aggregate(
    tape: &mut Tape,
    params: &TransformerParams,
    fs: &Tensor,
    g: &Tensor,
    a: &Tensor,
) -> Result<Tensor> {
    let x = tape.add(fs, g)?;
    let v = params.wv.forward(tape, &x)?;
    Ok(tape.matmul(a, &v)?)
}

pub fn fuse_features(tape: &mut Tape, fs: &Tensor, fr: &Tensor) -> Result<Tensor> {
    Ok(tape.add(fs, fr)?)
}

/// Positional encoding, attention and fusion in one call; returns `F`.
pub fn transformer_forward(
    tape: &mut Tape,
    params: &TransformerParams,
    fs: &Tensor,
    points: &Tensor,
) -> Result<Tensor> {
    let g = encode_position(tape, params, points)?;
    let a = attention_matrix(tape, params, fs, &g)?;
    let fr = transformer_aggregate(tape, params, fs, &g, &a)?;
    fuse_features(tape, fs, &fr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use rand::SeedableRng;

    fn small(c: usize) -> TransformerConfig {
        TransformerConfig {
            channels: c,
            c_a: c,
            max_points: 64,
        }
    }

    #[test]
    fn zero_phi_gives_zero_encoding() {
        let p = TransformerParams::zeros(&small(4)).unwrap();
        let mut tape = Tape::new();
        let pts = Tensor::from_points(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]).unwrap();
        let g = encode_position(&mut tape, &p, &pts).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_points_encode_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TransformerParams::new(&small(5), &mut rng).unwrap();
        let mut tape = Tape::new();
        let pts = Tensor::from_points(&[[0.3, -0.2, 1.0], [0.3, -0.2, 1.0]]).unwrap();
        let g = encode_position(&mut tape, &p, &pts).unwrap();
        assert_eq!(g.row(0), g.row(1));
    }

    #[test]
    fn single_point_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = TransformerParams::new(&small(3), &mut rng).unwrap();
        let mut tape = Tape::new();
        let fs = uniform(&mut rng, vec![1, 3], 1.0);
        let a = attention_matrix(&mut tape, &p, &fs, &Tensor::zeros(vec![1, 3])).unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn identical_rows_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = TransformerParams::new(&small(3), &mut rng).unwrap();
        let mut tape = Tape::new();
        let fs = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap();
        let a = attention_matrix(&mut tape, &p, &fs, &Tensor::zeros(vec![2, 3])).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn identity_attention_passes_features_through() {
        let mut p = TransformerParams::zeros(&small(3)).unwrap();
        p.wv.weight = Tensor::identity(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fs = uniform(&mut rng, vec![4, 3], 1.0);
        let mut tape = Tape::new();
        let fr = transformer_aggregate(&mut tape, &p, &fs, &Tensor::zeros(vec![4, 3]), &Tensor::identity(4)).unwrap();
        assert_eq!(fr, fs);
    }

    #[test]
    fn uniform_attention_averages_values() {
        let mut p = TransformerParams::zeros(&small(2)).unwrap();
        p.wv.weight = Tensor::identity(2);
        let fs = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let a = Tensor::full(vec![2, 2], 0.5);
        let fr = transformer_aggregate(&mut tape, &p, &fs, &Tensor::zeros(vec![2, 2]), &a).unwrap();
        assert_eq!(fr.data(), &[2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn empty_and_oversized_inputs_fail() {
        let p = TransformerParams::zeros(&small(2)).unwrap();
        let mut tape = Tape::new();
        let z = Tensor::zeros(vec![0, 2]);
        assert_eq!(attention_matrix(&mut tape, &p, &z, &z).unwrap_err(), TransformerError::Empty);
        let big = Tensor::zeros(vec![65, 2]);
        assert!(matches!(
            attention_matrix(&mut tape, &p, &big, &big),
            Err(TransformerError::TooManyPoints { n: 65, max: 64 })
        ));
    }

    #[test]
    fn fuse_is_elementwise_sum() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        let mut tape = Tape::new();
        assert_eq!(fuse_features(&mut tape, &a, &b).unwrap().data(), &[1.5, 1.0]);
        assert_eq!(fuse_features(&mut tape, &a, &Tensor::zeros(vec![1, 2])).unwrap(), a);
        assert!(fuse_features(&mut tape, &a, &Tensor::zeros(vec![2, 1])).is_err());
    }
}
