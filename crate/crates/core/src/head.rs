//! Second-stage detection head.
//!
//! A flattened ROI feature goes through two fully connected layers, each
//! optionally followed by a [`Pfam`] gate, and then into `K` independent
//! prediction branches. Every branch emits two class logits (background,
//! text), four box deltas and sixteen curve offsets. Inference reads branch
//! 0 only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{decode_box, decode_curve, BoxTarget, CurveTarget, BOX_TARGET_LEN, CURVE_TARGET_LEN};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, AxisBox, BezierText};
use crate::nn::{prefix_tensors, relu, relu_backward, softmax2, Dense, Parameters, Pfam, PfamCache, Tensor};
use crate::omts::{smooth_l1_grad, BranchPrediction, BranchTarget, LossConfig};
use crate::scalar::Real;

/// Where the attention gates sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfamMode {
    None,
    /// After the last fully connected layer only ("1fc").
    LastFc,
    /// After each of the two fully connected layers ("2fc").
    BothFc,
}

impl PfamMode {
    pub fn label(&self) -> &'static str {
        match self {
            PfamMode::None => "none",
            PfamMode::LastFc => "1fc",
            PfamMode::BothFc => "2fc",
        }
    }
}

impl std::str::FromStr for PfamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PfamMode::None),
            "1fc" | "last_fc" => Ok(PfamMode::LastFc),
            "2fc" | "both_fc" => Ok(PfamMode::BothFc),
            other => Err(Error::InvalidArgument(format!("unknown PFAM mode {other:?}"))),
        }
    }
}

/// Whether a gate acts on the ReLU output of its layer or on the raw layer
/// output (with the ReLU applied after gating).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PfamPlacement {
    #[default]
    AfterActivation,
    BeforeActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub roi_dim: usize,
    pub fc_dim: usize,
    pub k: usize,
    pub pfam_mode: PfamMode,
    pub pfam_hidden: usize,
    #[serde(default)]
    pub pfam_placement: PfamPlacement,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            roi_dim: 14 * 14,
            fc_dim: 256,
            k: 2,
            pfam_mode: PfamMode::BothFc,
            pfam_hidden: crate::nn::DEFAULT_PFAM_HIDDEN,
            pfam_placement: PfamPlacement::AfterActivation,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.roi_dim == 0 || self.fc_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "head dimensions must be positive (roi_dim {}, fc_dim {}, k {})",
                self.roi_dim, self.fc_dim, self.k
            )));
        }
        if self.pfam_mode != PfamMode::None && self.pfam_hidden == 0 {
            return Err(Error::InvalidArgument("PFAM hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// One prediction branch: class, box and curve regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub cls: Dense<T>,
    pub bbox: Dense<T>,
    pub curve: Dense<T>,
}

impl<T: Real> Branch<T> {
    fn zeros_like(&self) -> Self {
        Self {
            cls: self.cls.zeros_like(),
            bbox: self.bbox.zeros_like(),
            curve: self.curve.zeros_like(),
        }
    }

    fn macs(&self) -> usize {
        self.cls.macs() + self.bbox.macs() + self.curve.macs()
    }

    fn forward(&self, feat: &[T]) -> BranchOutput<T> {
        let z = self.cls.forward(feat);
        let logits = [z[0], z[1]];
        let probs = softmax2(logits);
        BranchOutput {
            logits,
            confidence: probs[1],
            boxes: BoxTarget::from_slice(&self.bbox.forward(feat)).expect("4 box outputs"),
            curve: CurveTarget::from_slice(&self.curve.forward(feat)).expect("16 curve outputs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchOutput<T> {
    /// `[background, text]`.
    pub logits: [T; 2],
    /// Text probability.
    pub confidence: T,
    pub boxes: BoxTarget<T>,
    pub curve: CurveTarget<T>,
}

impl<T: Real> BranchOutput<T> {
    pub fn prediction(&self) -> BranchPrediction<T> {
        BranchPrediction {
            confidence: self.confidence,
            boxes: self.boxes,
            curve: self.curve,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub branches: Vec<BranchOutput<T>>,
}

impl<T: Real> HeadOutput<T> {
    pub fn predictions(&self) -> Vec<BranchPrediction<T>> {
        self.branches.iter().map(BranchOutput::prediction).collect()
    }
}

/// Upstream gradient for one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchGrad<T> {
    pub logits: [T; 2],
    pub boxes: [T; BOX_TARGET_LEN],
    pub curve: [T; CURVE_TARGET_LEN],
}

impl<T: Real> BranchGrad<T> {
    pub fn zeros() -> Self {
        Self {
            logits: [T::zero(); 2],
            boxes: [T::zero(); BOX_TARGET_LEN],
            curve: [T::zero(); CURVE_TARGET_LEN],
        }
    }
}

/// Gradient of [`crate::omts::branch_loss`] with respect to a branch's raw
/// outputs. The clamped cross-entropy is flat where the clamp is active.
pub fn branch_loss_grad<T: Real>(out: &BranchOutput<T>, target: &BranchTarget<T>, cfg: &LossConfig<T>) -> BranchGrad<T> {
    let mut g = BranchGrad::zeros();
    let c = out.confidence;
    if c > cfg.eps && c < T::one() - cfg.eps {
        let p = [T::one() - c, c];
        let y = if target.is_text() { [T::zero(), T::one()] } else { [T::one(), T::zero()] };
        g.logits = [cfg.cls_weight * (p[0] - y[0]), cfg.cls_weight * (p[1] - y[1])];
    }
    if let BranchTarget::Text { boxes, curve } = target {
        for i in 0..BOX_TARGET_LEN {
            let sc = cfg.box_scale[i];
            g.boxes[i] = cfg.box_weight * sc * smooth_l1_grad(sc * (out.boxes.deltas[i] - boxes.deltas[i]), cfg.beta);
        }
        for i in 0..CURVE_TARGET_LEN {
            let sc = cfg.curve_scale;
            g.curve[i] = cfg.curve_weight * sc * smooth_l1_grad(sc * (out.curve.offsets[i] - curve.offsets[i]), cfg.beta);
        }
    }
    g
}

/// Fully connected layer plus optional gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub fc: Dense<T>,
    pub pfam: Option<Pfam<T>>,
}

#[derive(Debug, Clone)]
pub struct StageCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    /// Input of the gate, when present.
    gate_in: Vec<T>,
    gate: Option<PfamCache<T>>,
    /// Input of the trailing ReLU in `BeforeActivation` placement.
    relu_in: Vec<T>,
}

impl<T: Real> Stage<T> {
    fn zeros_like(&self) -> Self {
        Self {
            fc: self.fc.zeros_like(),
            pfam: self.pfam.as_ref().map(Pfam::zeros_like),
        }
    }

    fn macs(&self) -> usize {
        self.fc.macs() + self.pfam.as_ref().map_or(0, Pfam::macs)
    }

    fn forward(&self, x: &[T], placement: PfamPlacement) -> (Vec<T>, StageCache<T>) {
        let pre = self.fc.forward(x);
        let mut cache = StageCache {
            input: x.to_vec(),
            pre: pre.clone(),
            gate_in: Vec::new(),
            gate: None,
            relu_in: Vec::new(),
        };
        let Some(pfam) = &self.pfam else {
            return (relu(&pre), cache);
        };
        let out = match placement {
            PfamPlacement::AfterActivation => {
                let act = relu(&pre);
                let (gated, gc) = pfam.forward(&act);
                cache.gate_in = act;
                cache.gate = Some(gc);
                gated
            }
            PfamPlacement::BeforeActivation => {
                let (gated, gc) = pfam.forward(&pre);
                cache.gate_in = pre;
                cache.gate = Some(gc);
                cache.relu_in = gated.clone();
                relu(&gated)
            }
        };
        (out, cache)
    }

    fn backward(&self, cache: &StageCache<T>, grad_out: &[T], placement: PfamPlacement, grads: &mut Stage<T>) -> Vec<T> {
        let grad_pre = match (&self.pfam, &cache.gate) {
            (Some(pfam), Some(gc)) => {
                let gpfam = grads.pfam.as_mut().expect("gradient layout matches");
                match placement {
                    PfamPlacement::AfterActivation => {
                        let g_act = pfam.backward(&cache.gate_in, gc, grad_out, gpfam);
                        relu_backward(&cache.pre, &g_act)
                    }
                    PfamPlacement::BeforeActivation => {
                        let g_gated = relu_backward(&cache.relu_in, grad_out);
                        pfam.backward(&cache.gate_in, gc, &g_gated, gpfam)
                    }
                }
            }
            _ => relu_backward(&cache.pre, grad_out),
        };
        self.fc.backward(&cache.input, &grad_pre, &mut grads.fc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead<T> {
    pub config: HeadConfig,
    pub stage1: Stage<T>,
    pub stage2: Stage<T>,
    pub branches: Vec<Branch<T>>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    stage1: StageCache<T>,
    stage2: StageCache<T>,
    feature: Vec<T>,
}

impl<T: Real> StageCache<T> {
    fn relu_signs(&self, out: &mut Vec<bool>) {
        let inputs = if self.relu_in.is_empty() { &self.pre } else { &self.relu_in };
        out.extend(inputs.iter().map(|v| *v > T::zero()));
        if let Some(g) = &self.gate {
            out.extend(g.hidden_pre.iter().map(|v| *v > T::zero()));
        }
    }
}

impl<T: Real> HeadCache<T> {
    /// Sign of every ReLU input; a change between two nearby inputs means
    /// a finite difference straddles a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut v = Vec::new();
        self.stage1.relu_signs(&mut v);
        self.stage2.relu_signs(&mut v);
        v
    }
}

/// Multiply-accumulate and element-wise operation counts of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCount {
    pub macs: u64,
    pub elementwise: u64,
}

impl<T: Real> DetectionHead<T> {
    /// Glorot-initialized head; deterministic given `seed`.
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, hd) = (config.roi_dim, config.fc_dim, config.pfam_hidden);
        let fc1 = Dense::init(d, f, &mut rng);
        let pfam1 = (config.pfam_mode == PfamMode::BothFc).then(|| Pfam::init(f, hd, &mut rng));
        let fc2 = Dense::init(f, f, &mut rng);
        let pfam2 = (config.pfam_mode != PfamMode::None).then(|| Pfam::init(f, hd, &mut rng));
        let branches = (0..config.k)
            .map(|_| Branch {
                cls: Dense::init(f, 2, &mut rng),
                bbox: Dense::init(f, BOX_TARGET_LEN, &mut rng),
                curve: Dense::init(f, CURVE_TARGET_LEN, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            stage1: Stage { fc: fc1, pfam: pfam1 },
            stage2: Stage { fc: fc2, pfam: pfam2 },
            branches,
        })
    }

    /// Same layout with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            stage1: self.stage1.zeros_like(),
            stage2: self.stage2.zeros_like(),
            branches: self.branches.iter().map(Branch::zeros_like).collect(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.config.roi_dim {
            return Err(Error::ShapeMismatch(format!(
                "ROI feature has {} values, head expects {}",
                x.len(),
                self.config.roi_dim
            )));
        }
        Ok(())
    }

    fn trunk(&self, x: &[T]) -> (Vec<T>, StageCache<T>, StageCache<T>) {
        let p = self.config.pfam_placement;
        let (h1, c1) = self.stage1.forward(x, p);
        let (h2, c2) = self.stage2.forward(&h1, p);
        (h2, c1, c2)
    }

    pub fn forward(&self, x: &[T]) -> Result<HeadOutput<T>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &[T]) -> Result<(HeadOutput<T>, HeadCache<T>)> {
        self.check_input(x)?;
        let (feature, stage1, stage2) = self.trunk(x);
        let branches = self.branches.iter().map(|b| b.forward(&feature)).collect();
        Ok((HeadOutput { branches }, HeadCache { stage1, stage2, feature }))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &HeadCache<T>, grad_out: &[BranchGrad<T>], grads: &mut DetectionHead<T>) -> Result<Vec<T>> {
        if grad_out.len() != self.branches.len() {
            return Err(Error::BranchCountMismatch {
                expected: self.branches.len(),
                got: grad_out.len(),
            });
        }
        let mut g_feat = vec![T::zero(); self.config.fc_dim];
        for ((b, g), gb) in self.branches.iter().zip(grad_out).zip(grads.branches.iter_mut()) {
            let parts = [
                b.cls.backward(&cache.feature, &g.logits, &mut gb.cls),
                b.bbox.backward(&cache.feature, &g.boxes, &mut gb.bbox),
                b.curve.backward(&cache.feature, &g.curve, &mut gb.curve),
            ];
            for part in parts {
                for (acc, v) in g_feat.iter_mut().zip(part) {
                    *acc += v;
                }
            }
        }
        let p = self.config.pfam_placement;
        let g_h1 = self.stage2.backward(&cache.stage2, &g_feat, p, &mut grads.stage2);
        Ok(self.stage1.backward(&cache.stage1, &g_h1, p, &mut grads.stage1))
    }

    /// Branch-0 forward pass used at inference, with operation counting.
    pub fn forward_first_branch(&self, x: &[T], ops: &mut OpCount) -> Result<BranchOutput<T>> {
        self.check_input(x)?;
        let (feature, _, _) = self.trunk(x);
        let b = &self.branches[0];
        let f = self.config.fc_dim as u64;
        let gates = [&self.stage1.pfam, &self.stage2.pfam];
        let gate_elementwise: u64 = gates
            .iter()
            .filter_map(|g| g.as_ref())
            .map(|g| g.fc1.out_dim as u64 + 2 * f)
            .sum();
        ops.macs += (self.stage1.macs() + self.stage2.macs() + b.macs()) as u64;
        ops.elementwise += 2 * f + gate_elementwise + 2;
        Ok(b.forward(&feature))
    }

    /// Multiply-accumulates of the full `K`-branch forward pass.
    pub fn training_macs(&self) -> usize {
        self.stage1.macs() + self.stage2.macs() + self.branches.iter().map(Branch::macs).sum::<usize>()
    }
}

impl<T: Real> Parameters<T> for DetectionHead<T> {
    fn tensors(&self) -> Vec<Tensor<'_, T>> {
        let mut v = prefix_tensors("fc1", self.stage1.fc.tensors());
        if let Some(p) = &self.stage1.pfam {
            v.extend(prefix_tensors("pfam1", p.tensors()));
        }
        v.extend(prefix_tensors("fc2", self.stage2.fc.tensors()));
        if let Some(p) = &self.stage2.pfam {
            v.extend(prefix_tensors("pfam2", p.tensors()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            v.extend(prefix_tensors(&format!("branch{i}.cls"), b.cls.tensors()));
            v.extend(prefix_tensors(&format!("branch{i}.box"), b.bbox.tensors()));
            v.extend(prefix_tensors(&format!("branch{i}.curve"), b.curve.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.stage1.fc.tensors_mut();
        if let Some(p) = &mut self.stage1.pfam {
            v.extend(p.tensors_mut());
        }
        v.extend(self.stage2.fc.tensors_mut());
        if let Some(p) = &mut self.stage2.pfam {
            v.extend(p.tensors_mut());
        }
        for b in &mut self.branches {
            v.extend(b.cls.tensors_mut());
            v.extend(b.bbox.tensors_mut());
            v.extend(b.curve.tensors_mut());
        }
        v
    }
}

/// A decoded branch-0 prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub boxes: AxisBox<f64>,
    pub shape: BezierText<f64>,
    pub proposal_index: usize,
}

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Greedy NMS over `(score, box)` pairs; returns kept indices in descending
/// score order (ties to the lower index).
pub fn nms(boxes: &[AxisBox<f64>], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&j| box_iou(&boxes[i], &boxes[j]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Branch-0 inference: decode every proposal, drop scores below
/// `score_threshold`, then NMS on the decoded boxes.
pub fn infer(
    head: &DetectionHead<f64>,
    proposals: &[AxisBox<f64>],
    roi_features: &[Vec<f64>],
    score_threshold: f64,
    nms_iou: f64,
    ops: &mut OpCount,
) -> Result<Vec<Detection>> {
    if proposals.len() != roi_features.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} proposals but {} ROI features",
            proposals.len(),
            roi_features.len()
        )));
    }
    let mut cands = Vec::new();
    for (i, (p, x)) in proposals.iter().zip(roi_features).enumerate() {
        let out = head.forward_first_branch(x, ops)?;
        if !(out.confidence >= score_threshold) {
            continue;
        }
        let boxes = decode_box(&out.boxes, p);
        if boxes.validate().is_err() {
            continue;
        }
        cands.push(Detection {
            score: out.confidence,
            boxes,
            shape: decode_curve(&out.curve, p),
            proposal_index: i,
        });
    }
    let boxes: Vec<_> = cands.iter().map(|d| d.boxes).collect();
    let scores: Vec<_> = cands.iter().map(|d| d.score).collect();
    Ok(nms(&boxes, &scores, nms_iou).into_iter().map(|i| cands[i].clone()).collect())
}
