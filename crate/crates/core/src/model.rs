//! The full scene-flow network: sparse voxel backbone, point attention,
//! optimal-transport matching and residual refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neighbors::knn_excluding_self;
use crate::nn::{join, Module};
use crate::ot::{self, OtConfig, OtError, Refiner, TransportPlan};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::transformer::{self, TransformerConfig, TransformerError, TransformerParams};
use crate::unet::{UNet, UNetConfig, UNetError, UNetPlan};
use crate::voxel::{self, VoxelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub voxel_size: f64,
    pub devox_k: usize,
    pub unet: UNetConfig,
    pub transformer: TransformerConfig,
    pub ot: OtConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            voxel_size: voxel::DEFAULT_VOXEL_SIZE,
            devox_k: voxel::DEFAULT_K,
            unet: UNetConfig::default(),
            transformer: TransformerConfig::default(),
            ot: OtConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(VoxelError::BadVoxelSize(self.voxel_size).into());
        }
        if self.devox_k == 0 {
            return Err(VoxelError::ZeroK.into());
        }
        self.unet.validate()?;
        self.transformer.validate()?;
        self.ot.validate()?;
        if self.unet.output_channels() != self.transformer.channels {
            return Err(ModelError::Config(format!(
                "U-Net outputs {} channels but the transformer expects {}",
                self.unet.output_channels(),
                self.transformer.channels
            )));
        }
        if self.unet.input_channels != voxel::INPUT_CHANNELS {
            return Err(ModelError::Config(format!(
                "U-Net input_channels must be {}",
                voxel::INPUT_CHANNELS
            )));
        }
        Ok(())
    }
}

/// Geometry-only structures for one cloud; independent of the weights, so
/// they can be built once per scene and reused.
#[derive(Clone, Debug)]
pub struct CloudPlan {
    pub points: Vec<[f64; 3]>,
    pub points_tensor: Tensor,
    pub voxel_input: Tensor,
    pub unet: UNetPlan,
    pub stencil: Vec<Vec<(usize, f64)>>,
    pub refine_neighbors: Vec<Vec<usize>>,
}

impl CloudPlan {
    pub fn new(points: &[[f64; 3]], cfg: &ModelConfig) -> Result<Self> {
        let grid = voxel::voxelize(points, cfg.voxel_size)?;
        Ok(Self {
            points: points.to_vec(),
            points_tensor: Tensor::from_points(points)?,
            voxel_input: voxel::initial_voxel_features(&grid, points),
            unet: UNetPlan::new(grid.coords(), cfg.unet.levels)?,
            stencil: voxel::devox_weights(&grid, points, cfg.devox_k)?,
            refine_neighbors: knn_excluding_self(points, ot::REFINE_NEIGHBORS),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Sctn {
    pub unet: UNet,
    pub transformer: TransformerParams,
    pub refiner: Refiner,
    pub cfg: ModelConfig,
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub fp: Tensor,
    pub fq: Tensor,
    pub cost: Tensor,
    pub plan: TransportPlan,
    /// Flow straight from the transport plan.
    pub coarse: Tensor,
    /// Refined flow.
    pub flow: Tensor,
}

impl Sctn {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = UNet::new(&cfg.unet, &mut rng)?;
        let transformer = TransformerParams::new(&cfg.transformer, &mut rng)?;
        let refiner = Refiner::new(&mut rng, cfg.transformer.channels);
        Ok(Self {
            unet,
            transformer,
            refiner,
            cfg: cfg.clone(),
        })
    }

    /// Per-point features `F = F^S + F^R`.
    pub fn features(&self, tape: &mut Tape, plan: &CloudPlan) -> Result<Tensor> {
        let fv = self.unet.forward_planned(tape, &plan.unet, &plan.voxel_input)?;
        let fs = voxel::apply_stencil(tape, &plan.stencil, &fv)?;
        Ok(transformer::transformer_forward(tape, &self.transformer, &fs, &plan.points_tensor)?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &CloudPlan, q: &CloudPlan) -> Result<Prediction> {
        let fp = self.features(tape, p)?;
        let fq = self.features(tape, q)?;
        self.match_and_refine(tape, fp, fq, p, q)
    }

    /// Matching and refinement on given features, bypassing the backbone.
    pub fn match_and_refine(
        &self,
        tape: &mut Tape,
        fp: Tensor,
        fq: Tensor,
        p: &CloudPlan,
        q: &CloudPlan,
    ) -> Result<Prediction> {
        let (cost, plan, coarse) = match_features(tape, &fp, &fq, &p.points_tensor, &q.points_tensor, &self.cfg.ot)?;
        let flow = ot::refine_flow_with_neighbors(tape, &self.refiner, &coarse, &fp, &p.refine_neighbors)?;
        Ok(Prediction {
            fp,
            fq,
            cost,
            plan,
            coarse,
            flow,
        })
    }

    pub fn predict(&self, p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<Prediction> {
        let pp = CloudPlan::new(p, &self.cfg)?;
        let qp = CloudPlan::new(q, &self.cfg)?;
        self.forward(&mut Tape::new(), &pp, &qp)
    }
}

/// Cost, transport plan and barycentric flow for feature sets `fp`, `fq`.
pub fn match_features(
    tape: &mut Tape,
    fp: &Tensor,
    fq: &Tensor,
    p: &Tensor,
    q: &Tensor,
    cfg: &OtConfig,
) -> Result<(Tensor, TransportPlan, Tensor)> {
    let cost = ot::correlation_matrix(tape, fp, fq)?;
    let plan = ot::sinkhorn(tape, &cost, cfg)?;
    let flow = ot::extract_flow(tape, &plan.t, p, q)?;
    Ok((cost, plan, flow))
}

impl Module for Sctn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.unet.visit_params(&join(prefix, "unet"), f);
        self.transformer.visit_params(&join(prefix, "transformer"), f);
        self.refiner.visit_params(&join(prefix, "refine"), f);
    }
}
