//! Sparse 3x3x3 convolution over occupied voxel coordinates and a small
//! encoder-decoder built from it.
//!
//! Convolutions are evaluated through per-offset rulebooks: for every kernel
//! offset `o`, the list of `(output row, input row)` pairs with
//! `input coord == stride * output coord + o`. Each offset then costs one
//! gather, one matmul and one scatter on the tape.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{join, uniform, Linear, Module};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::voxel::Coord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UNetError {
    #[error("sparse tensor has no occupied voxels")]
    Empty,
    #[error("invalid U-Net config: {0}")]
    Config(String),
    #[error("stride must be 1 or 2, got {0}")]
    Stride(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, UNetError>;

/// Kernel offsets in lexicographic order; index `13` is the center.
pub const OFFSETS: [Coord; 27] = {
    let mut out = [[0; 3]; 27];
    let mut i = 0;
    while i < 27 {
        out[i] = [(i / 9) as i32 - 1, ((i / 3) % 3) as i32 - 1, (i % 3) as i32 - 1];
        i += 1;
    }
    out
};
pub const CENTER: usize = 13;

/// Occupied coordinates of one resolution level.
#[derive(Clone, Debug)]
pub struct SparseLevel {
    coords: Vec<Coord>,
    index: HashMap<Coord, usize>,
}

impl SparseLevel {
    pub fn new(coords: Vec<Coord>) -> Self {
        let mut index = HashMap::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            index.entry(*c).or_insert(i);
        }
        Self { coords, index }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn lookup(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// Parent level with coordinates `floor(c / 2)`, deduplicated in order of
    /// first appearance, plus the parent row of every coordinate.
    pub fn downsample(&self) -> (SparseLevel, Vec<usize>) {
        let mut coords = Vec::new();
        let mut index = HashMap::new();
        let parents = self
            .coords
            .iter()
            .map(|c| {
                let p = c.map(|k| k.div_euclid(2));
                *index.entry(p).or_insert_with(|| {
                    coords.push(p);
                    coords.len() - 1
                })
            })
            .collect();
        (SparseLevel { coords, index }, parents)
    }
}

#[derive(Clone, Debug)]
pub struct Rulebook {
    /// Per offset: (output rows, input rows).
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    n_out: usize,
}

impl Rulebook {
    pub fn build(input: &SparseLevel, output: &SparseLevel, stride: usize) -> Self {
        let s = stride as i32;
        let pairs = OFFSETS
            .iter()
            .map(|o| {
                let mut outs = Vec::new();
                let mut ins = Vec::new();
                for (r, c) in output.coords.iter().enumerate() {
                    let at = [s * c[0] + o[0], s * c[1] + o[1], s * c[2] + o[2]];
                    if let Some(i) = input.lookup(&at) {
                        outs.push(r);
                        ins.push(i);
                    }
                }
                (outs, ins)
            })
            .collect();
        Self {
            pairs,
            n_out: output.len(),
        }
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(|p| p.0.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct SparseConvLayer {
    /// One `C_in x C_out` matrix per entry of [`OFFSETS`].
    pub weights: Vec<Tensor>,
    pub bias: Tensor,
    pub stride: usize,
}

impl SparseConvLayer {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, stride: usize) -> Self {
        let bound = (6.0 / (c_in * 27 + c_out) as f64).sqrt();
        Self {
            weights: (0..27).map(|_| uniform(rng, vec![c_in, c_out], bound)).collect(),
            bias: Tensor::zeros(vec![1, c_out]),
            stride,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            weights: (0..27).map(|_| Tensor::zeros(vec![c_in, c_out])).collect(),
            bias: Tensor::zeros(vec![1, c_out]),
            stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn c_out(&self) -> usize {
        self.weights[0].cols()
    }

    /// Evaluates the layer along a prebuilt rulebook.
    pub fn apply(&self, tape: &mut Tape, rules: &Rulebook, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.c_in() {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_conv",
                lhs: x.shape().to_vec(),
                rhs: self.weights[0].shape().to_vec(),
            }
            .into());
        }
        let mut acc: Option<Tensor> = None;
        for ((outs, ins), w) in rules.pairs.iter().zip(&self.weights) {
            if outs.is_empty() {
                continue;
            }
            let g = tape.gather_rows(x, ins.clone())?;
            let y = tape.matmul(&g, w)?;
            let s = tape.scatter_add_rows(&y, outs.clone(), rules.n_out)?;
            acc = Some(match acc {
                Some(a) => tape.add(&a, &s)?,
                None => s,
            });
        }
        let base = acc.unwrap_or_else(|| Tensor::zeros(vec![rules.n_out, self.c_out()]));
        Ok(tape.add_row(&base, &self.bias)?)
    }
}

impl Module for SparseConvLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, w) in self.weights.iter_mut().enumerate() {
            f(join(prefix, &format!("w{i:02}")), w);
        }
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// One sparse convolution: stride 1 keeps the coordinates, stride 2 maps
/// them to `floor(c / 2)`.
pub fn sparse_conv(
    tape: &mut Tape,
    layer: &SparseConvLayer,
    input: &SparseLevel,
    x: &Tensor,
) -> Result<(SparseLevel, Tensor)> {
    if x.rows() != input.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sparse_conv",
            lhs: x.shape().to_vec(),
            rhs: vec![input.len()],
        }
        .into());
    }
    let output = match layer.stride {
        1 => input.clone(),
        2 => input.downsample().0,
        s => return Err(UNetError::Stride(s)),
    };
    let rules = Rulebook::build(input, &output, layer.stride);
    let y = layer.apply(tape, &rules, x)?;
    Ok((output, y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub convs_per_level: usize,
    pub input_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: vec![32, 48, 64],
            convs_per_level: 2,
            input_channels: crate::voxel::INPUT_CHANNELS,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(UNetError::Config(format!(
                "{} levels need {} channel entries, got {:?}",
                self.levels, self.levels, self.channels
            )));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(UNetError::Config(format!(
                "channels must strictly increase, got {:?}",
                self.channels
            )));
        }
        if self.convs_per_level == 0 || self.input_channels == 0 {
            return Err(UNetError::Config("convs_per_level and input_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.channels[0]
    }
}

/// Encoder: per level `convs_per_level` convolutions, then a stride-2
/// convolution to the next level. Decoder: nearest-parent upsampling, a
/// linear channel projection, additive skip, then `convs_per_level`
/// convolutions. ReLU follows every convolution except the last one.
#[derive(Clone, Debug)]
pub struct UNet {
    pub encoder: Vec<Vec<SparseConvLayer>>,
    pub down: Vec<SparseConvLayer>,
    pub up: Vec<Linear>,
    pub decoder: Vec<Vec<SparseConvLayer>>,
}

/// Coordinate hierarchy and rulebooks for one input grid.
#[derive(Clone, Debug)]
pub struct UNetPlan {
    pub levels: Vec<SparseLevel>,
    same: Vec<Rulebook>,
    down: Vec<Rulebook>,
    parents: Vec<Vec<usize>>,
}

impl UNetPlan {
    pub fn new(coords: &[Coord], levels: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(UNetError::Empty);
        }
        let mut lv = vec![SparseLevel::new(coords.to_vec())];
        let mut parents = Vec::new();
        for _ in 1..levels {
            let (next, par) = lv.last().unwrap().downsample();
            lv.push(next);
            parents.push(par);
        }
        let same = lv.iter().map(|l| Rulebook::build(l, l, 1)).collect();
        let down = lv.windows(2).map(|w| Rulebook::build(&w[0], &w[1], 2)).collect();
        Ok(Self {
            levels: lv,
            same,
            down,
            parents,
        })
    }
}

impl UNet {
    pub fn new(cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(cfg, |c_in, c_out, stride| SparseConvLayer::new(rng, c_in, c_out, stride), true)
    }

    /// All weights and biases zero.
    pub fn zeros(cfg: &UNetConfig) -> Result<Self> {
        Self::build(cfg, SparseConvLayer::zeros, false)
    }

    fn build(
        cfg: &UNetConfig,
        mut make: impl FnMut(usize, usize, usize) -> SparseConvLayer,
        random_up: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.levels {
            let c_in = if l == 0 { cfg.input_channels } else { ch[l] };
            let convs = (0..cfg.convs_per_level)
                .map(|j| make(if j == 0 { c_in } else { ch[l] }, ch[l], 1))
                .collect();
            encoder.push(convs);
            if l + 1 < cfg.levels {
                down.push(make(ch[l], ch[l + 1], 2));
            }
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        // Projection weights reuse the conv initializer's stream for determinism.
        for l in 0..cfg.levels - 1 {
            let proj = make(ch[l + 1], ch[l], 1);
            up.push(Linear {
                weight: if random_up {
                    proj.weights[CENTER].clone()
                } else {
                    Tensor::zeros(vec![ch[l + 1], ch[l]])
                },
                bias: Some(Tensor::zeros(vec![1, ch[l]])),
            });
            decoder.push((0..cfg.convs_per_level).map(|_| make(ch[l], ch[l], 1)).collect());
        }
        Ok(Self {
            encoder,
            down,
            up,
            decoder,
        })
    }

    pub fn forward(&self, tape: &mut Tape, coords: &[Coord], input: &Tensor) -> Result<Tensor> {
        let plan = UNetPlan::new(coords, self.encoder.len())?;
        self.forward_planned(tape, &plan, input)
    }

    pub fn forward_planned(&self, tape: &mut Tape, plan: &UNetPlan, input: &Tensor) -> Result<Tensor> {
        let levels = self.encoder.len();
        let mut skips = Vec::with_capacity(levels);
        let mut x = input.clone();
        for l in 0..levels {
            if l > 0 {
                let y = self.down[l - 1].apply(tape, &plan.down[l - 1], &x)?;
                x = tape.relu(&y);
            }
            for conv in &self.encoder[l] {
                let y = conv.apply(tape, &plan.same[l], &x)?;
                x = tape.relu(&y);
            }
            skips.push(x.clone());
        }
        if levels == 1 {
            return Ok(x);
        }
        for l in (0..levels - 1).rev() {
            let up = tape.gather_rows(&x, plan.parents[l].clone())?;
            let proj = self.up[l].forward(tape, &up)?;
            x = tape.add(&proj, &skips[l])?;
            let n = self.decoder[l].len();
            for (j, conv) in self.decoder[l].iter().enumerate() {
                let y = conv.apply(tape, &plan.same[l], &x)?;
                x = if l == 0 && j + 1 == n { y } else { tape.relu(&y) };
            }
        }
        Ok(x)
    }
}

impl Module for UNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, convs) in self.encoder.iter_mut().enumerate() {
            for (j, c) in convs.iter_mut().enumerate() {
                c.visit_params(&join(prefix, &format!("enc{l}.conv{j}")), f);
            }
        }
        for (l, c) in self.down.iter_mut().enumerate() {
            c.visit_params(&join(prefix, &format!("down{l}")), f);
        }
        for (l, u) in self.up.iter_mut().enumerate() {
            u.visit_params(&join(prefix, &format!("up{l}")), f);
        }
        for (l, convs) in self.decoder.iter_mut().enumerate() {
            for (j, c) in convs.iter_mut().enumerate() {
                c.visit_params(&join(prefix, &format!("dec{l}.conv{j}")), f);
            }
        }
    }
}
