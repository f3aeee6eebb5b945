//! Mini-batch SGD training of the detection head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AxisBox, Shape};
use crate::head::{branch_loss_grad, BranchGrad, DetectionHead, HeadConfig};
use crate::nn::{Sgd, SgdConfig};
use crate::omts::{branch_targets, match_proposals, omts_loss, sample_minibatch_indices, BranchTarget, LossConfig, MatchSet};
use crate::synthdata::{derive_seed, RoiRasterizer, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Each proposal keeps only its best groundtruth; other branches are
    /// background.
    OneToOne,
    Omts,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::OneToOne => "one_to_one",
            Scheme::Omts => "omts",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_to_one" | "baseline" => Ok(Scheme::OneToOne),
            "omts" => Ok(Scheme::Omts),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheme {other:?} (expected one_to_one or omts)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub head: HeadConfig,
    pub sgd: SgdConfig,
    pub scheme: Scheme,
    pub iters: usize,
    /// Proposals per iteration.
    pub batch: usize,
    pub fg_fraction: f64,
    pub iou_threshold: f64,
    pub grid: usize,
    pub loss: LossConfig<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            sgd: SgdConfig::default(),
            scheme: Scheme::Omts,
            iters: 2000,
            batch: 64,
            fg_fraction: 0.5,
            iou_threshold: crate::omts::DEFAULT_IOU_THRESHOLD,
            grid: crate::synthdata::DEFAULT_GRID,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.sgd.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::InvalidArgument("fg_fraction must lie in [0, 1]".into()));
        }
        if self.head.roi_dim != self.grid * self.grid {
            return Err(Error::InvalidArgument(format!(
                "roi_dim {} does not match a {}x{} grid",
                self.head.roi_dim, self.grid, self.grid
            )));
        }
        Ok(())
    }
}

/// One labelled proposal.
#[derive(Debug, Clone)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub targets: Vec<BranchTarget<f64>>,
    pub scene: usize,
    pub proposal: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub matches: Vec<MatchSet<f64>>,
}

impl TrainingSet {
    /// Matches and rasterizes every proposal. Under [`Scheme::OneToOne`]
    /// only the best match survives.
    pub fn build(
        scenes: &[Scene],
        proposals: &[Vec<AxisBox<f64>>],
        grid: usize,
        theta: f64,
        k: usize,
        scheme: Scheme,
    ) -> Result<Self> {
        if scenes.len() != proposals.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scenes but {} proposal lists",
                scenes.len(),
                proposals.len()
            )));
        }
        let mut samples = Vec::new();
        let mut matches = Vec::new();
        for (si, (scene, props)) in scenes.iter().zip(proposals).enumerate() {
            let gt_boxes: Vec<AxisBox<f64>> = scene.instances.iter().map(Shape::bbox).collect::<Result<_>>()?;
            let raster = RoiRasterizer::new(scene)?;
            for mut m in match_proposals(props, &gt_boxes, theta, k)? {
                if scheme == Scheme::OneToOne {
                    m = m.truncated(1, k);
                }
                let p = &props[m.proposal_index];
                samples.push(Sample {
                    feature: raster.rasterize(p, grid)?.values,
                    targets: branch_targets(&m, &scene.instances, &gt_boxes, p)?,
                    scene: si,
                    proposal: m.proposal_index,
                });
                matches.push(m);
            }
        }
        Ok(Self { samples, matches })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Batch-mean losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iter: usize,
    pub cls: f64,
    pub reg_box: f64,
    pub reg_curve: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub head: DetectionHead<f64>,
    pub losses: Vec<LossRecord>,
}

/// Trains a freshly initialized head. Every iteration samples a balanced
/// mini-batch, takes the assignment-minimizing loss per proposal, and
/// applies one SGD step on the batch-mean gradient.
pub fn train_head(config: &TrainConfig, data: &TrainingSet) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = data.samples.iter().find(|s| s.targets.len() != config.head.k) {
        return Err(Error::BranchCountMismatch {
            expected: config.head.k,
            got: s.targets.len(),
        });
    }
    let mut head = DetectionHead::<f64>::new(config.head, derive_seed(config.seed, 0))?;
    let mut opt = Sgd::new(config.sgd)?;
    let loss_cfg = config.loss;
    let mut losses = Vec::with_capacity(config.iters);
    let batch_seed = derive_seed(config.seed, 1);
    for iter in 0..config.iters {
        let idx = sample_minibatch_indices(&data.matches, config.fg_fraction, config.batch, derive_seed(batch_seed, iter as u64));
        let scale = 1.0 / idx.len().max(1) as f64;
        let mut grads = head.zeros_like();
        let mut rec = LossRecord {
            iter,
            cls: 0.0,
            reg_box: 0.0,
            reg_curve: 0.0,
            total: 0.0,
            lr: config.sgd.effective_lr(iter),
        };
        for &i in &idx {
            let s = &data.samples[i];
            let (out, cache) = head.forward_train(&s.feature)?;
            let l = omts_loss(&out.predictions(), &s.targets, &loss_cfg)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: iter,
                    proposal: i,
                });
            }
            rec.cls += l.cls * scale;
            rec.reg_box += l.reg_box * scale;
            rec.reg_curve += l.reg_curve * scale;
            rec.total += l.total * scale;
            let g: Vec<BranchGrad<f64>> = out
                .branches
                .iter()
                .zip(&l.chosen_permutation)
                .map(|(o, &j)| {
                    let mut g = branch_loss_grad(o, &s.targets[j], &loss_cfg);
                    g.logits.iter_mut().chain(&mut g.boxes).chain(&mut g.curve).for_each(|v| *v *= scale);
                    g
                })
                .collect();
            head.backward(&cache, &g, &mut grads)?;
        }
        opt.step(&mut head, &grads, iter);
        log::debug!("iter {iter} loss {:.6}", rec.total);
        losses.push(rec);
    }
    Ok(TrainOutput { head, losses })
}
