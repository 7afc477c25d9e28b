//! Adam, the two-stage schedule (supervised, then supervised plus
//! consistency), and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::io::{seeded_permutation, ScenePair};
use crate::losses::{self, FscConfig, FscPairs, LossError, MetricsRecord};
use crate::model::{CloudPlan, ModelError, Sctn};
use crate::nn::{bind, unbind, Module};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("scene {scene}: loss became non-finite at epoch {epoch} (Es {es}, Ec {ec})")]
    NonFinite {
        scene: String,
        epoch: usize,
        es: f64,
        ec: f64,
    },
    #[error("scene {scene}: {source}")]
    Scene { scene: String, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("adam: {0}")]
    Adam(String),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_drop_to: f64,
    pub drop_at_fraction: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_drop_to: 1e-4,
            drop_at_fraction: 50.0 / 60.0,
            epochs_stage1: 40,
            epochs_stage2: 20,
            batch: 1,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_initial > 0.0
            && self.lr_drop_to > 0.0
            && (0.0..=1.0).contains(&self.drop_at_fraction)
            && self.batch >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.clip_norm > 0.0;
        if !ok {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop = (self.drop_at_fraction * self.total_epochs() as f64).round() as usize;
        if epoch >= drop {
            self.lr_drop_to
        } else {
            self.lr_initial
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One bias-corrected update; `grads` follows the module's visiting order.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(TrainError::Adam(format!(
                "{} gradient arrays for {} moment slots",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        let mut err = None;
        module.visit_params("", &mut |name, p| {
            let (g, m, v) = (&grads[k], &mut self.m[k], &mut self.v[k]);
            k += 1;
            if g.len() != p.numel() || m.len() != p.numel() {
                err.get_or_insert(format!("{name}: gradient length {} for {} values", g.len(), p.numel()));
                return;
            }
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            *p = Tensor::new(p.shape().to_vec(), data).expect("finite update");
        });
        match err {
            Some(e) => Err(TrainError::Adam(e)),
            None => Ok(()),
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// A scene with its weight-independent structures precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: String,
    pub p: CloudPlan,
    pub q: CloudPlan,
    pub gt: Tensor,
    pub mask: Vec<u8>,
    pub pairs: Option<FscPairs>,
}

impl PreparedScene {
    pub fn new(id: &str, scene: &ScenePair, model: &Sctn, fsc_k: Option<usize>) -> Result<Self> {
        let wrap = |source: ModelError| TrainError::Scene {
            scene: id.to_string(),
            source,
        };
        let p = CloudPlan::new(scene.p.points(), &model.cfg).map_err(wrap)?;
        let q = CloudPlan::new(scene.q.points(), &model.cfg).map_err(wrap)?;
        let pairs = fsc_k.map(|k| FscPairs::new(scene.p.points(), k)).transpose()?;
        Ok(Self {
            id: id.to_string(),
            p,
            q,
            gt: Tensor::from_points(&scene.gt_flow)?,
            mask: scene.mask.clone(),
            pairs,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub es: f64,
    pub ec: f64,
    pub lr: f64,
    pub epe3d: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:e}\t{:.6}",
            self.epoch, self.stage, self.es, self.ec, self.lr, self.epe3d
        )
    }
}

/// Training state: model, optimizer, data and progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Sctn,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub fsc: FscConfig,
    pub scenes: Vec<PreparedScene>,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    /// Consistency-loss evaluations per stage (index 0 = stage 1).
    pub fsc_evaluations: [usize; 2],
    /// `false` lets the similarity gradient reach the features.
    pub stop_gradient: bool,
    pub best: Option<(f64, Sctn)>,
}

impl Trainer {
    pub fn new(model: Sctn, cfg: TrainConfig, fsc: FscConfig, data: &[(String, ScenePair)]) -> Result<Self> {
        cfg.validate()?;
        fsc.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let k = (cfg.epochs_stage2 > 0).then_some(fsc.k_neighbors);
        let scenes = data
            .iter()
            .map(|(id, s)| PreparedScene::new(id, s, &model, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adam: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            model,
            cfg,
            fsc,
            scenes,
            epoch: 0,
            log: Vec::new(),
            fsc_evaluations: [0, 0],
            stop_gradient: true,
            best: None,
        })
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.total_epochs()
    }

    pub fn stage(&self) -> u8 {
        if self.epoch < self.cfg.epochs_stage1 {
            1
        } else {
            2
        }
    }

    /// One pass over the data in a seeded order.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let stage = self.stage();
        let lr = self.cfg.lr_at(self.epoch);
        let order = seeded_permutation(self.scenes.len(), self.cfg.seed.wrapping_add(self.epoch as u64));
        let (mut es_sum, mut ec_sum, mut epe_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(self.cfg.batch) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &i in chunk {
                let (es, ec, epe, grads) = self.scene_gradients(i, stage)?;
                es_sum += es;
                ec_sum += ec;
                epe_sum += epe;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().flatten().zip(grads.iter().flatten()).for_each(|(x, y)| *x += y),
                }
            }
            let mut grads = acc.expect("non-empty chunk");
            if chunk.len() > 1 {
                let s = 1.0 / chunk.len() as f64;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
            clip_global_norm(&mut grads, self.cfg.clip_norm);
            self.adam.step(&mut self.model, &grads, lr)?;
        }
        let n = self.scenes.len() as f64;
        let entry = EpochLog {
            epoch: self.epoch + 1,
            stage,
            es: es_sum / n,
            ec: ec_sum / n,
            lr,
            epe3d: epe_sum / n,
        };
        if self.best.as_ref().map_or(true, |(b, _)| entry.epe3d < *b) {
            self.best = Some((entry.epe3d, self.model.clone()));
        }
        self.log.push(entry.clone());
        self.epoch += 1;
        Ok(entry)
    }

    fn scene_gradients(&mut self, i: usize, stage: u8) -> Result<(f64, f64, f64, Vec<Vec<f64>>)> {
        let scene = &self.scenes[i];
        let mut tape = Tape::new();
        let leaves = bind(&mut self.model, &mut tape);
        let out = (|| -> Result<_> {
            let pred = self.model.forward(&mut tape, &scene.p, &scene.q).map_err(|source| TrainError::Scene {
                scene: scene.id.clone(),
                source,
            })?;
            let es = losses::supervised_loss(&mut tape, &pred.flow, &scene.gt, &scene.mask)?;
            let (ec, loss) = if stage == 2 {
                self.fsc_evaluations[1] += 1;
                let pairs = scene.pairs.as_ref().expect("pairs prepared for stage 2");
                let s = losses::pair_similarity(&mut tape, &pred.fp, pairs, self.fsc.tau, self.stop_gradient)?;
                let ec = losses::fsc_loss_from_similarity(&mut tape, &pred.flow, &scene.gt, &s, pairs, self.fsc.epsilon_g)?;
                let loss = losses::total_loss(&mut tape, &es, &ec, self.fsc.lambda)?;
                (ec.item(), loss)
            } else {
                (0.0, es.clone())
            };
            if !loss.item().is_finite() {
                return Err(TrainError::NonFinite {
                    scene: scene.id.clone(),
                    epoch: self.epoch + 1,
                    es: es.item(),
                    ec,
                });
            }
            let grads = tape.backward(&loss)?;
            let g: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt(l).data().to_vec()).collect();
            let epe = losses::metrics(&pred.flow.to_points(), &scene.gt.to_points())?.epe3d;
            Ok((es.item(), ec, epe, g))
        })();
        unbind(&mut self.model);
        out
    }

    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while !self.done() {
            let e = self.run_epoch()?;
            on_epoch(&e);
        }
        Ok(())
    }

    /// Mean neighbor similarity of `P` features over all scenes.
    pub fn mean_similarity(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.scenes {
            let pairs = match &s.pairs {
                Some(p) => p.clone(),
                None => FscPairs::new(&s.p.points, self.fsc.k_neighbors)?,
            };
            let f = self.model.features(&mut Tape::new(), &s.p)?;
            total += losses::mean_similarity(&f, &pairs, self.fsc.tau);
        }
        Ok(total / self.scenes.len() as f64)
    }
}

pub fn log_text(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tstage\tEs\tEc\tlr\tepe3d\n");
    for e in log {
        s.push_str(&e.line());
        s.push('\n');
    }
    s
}

pub fn best_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

/// Writes the final and best checkpoints.
pub fn save_checkpoints(trainer: &mut Trainer, out: &Path) -> Result<()> {
    checkpoint::save(&mut trainer.model, out)?;
    if let Some((_, best)) = &mut trainer.best {
        checkpoint::save(best, &best_path(out))?;
    }
    Ok(())
}

/// Per-scene metrics in manifest order and their unweighted mean.
pub fn evaluate(model: &Sctn, data: &[(String, ScenePair)]) -> Result<(MetricsRecord, Vec<(String, MetricsRecord)>)> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(data.len());
    for (id, scene) in data {
        let pred = model
            .predict(scene.p.points(), scene.q.points())
            .map_err(|source| TrainError::Scene {
                scene: id.clone(),
                source,
            })?;
        rows.push((id.clone(), losses::metrics(&pred.flow.to_points(), &scene.gt_flow)?));
    }
    let recs: Vec<MetricsRecord> = rows.iter().map(|r| r.1).collect();
    Ok((MetricsRecord::mean(&recs), rows))
}
