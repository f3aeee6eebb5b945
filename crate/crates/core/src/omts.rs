//! One-to-many training scheme.
//!
//! A proposal is matched to every groundtruth whose box overlaps it above a
//! threshold (keeping at most `K`, padded with background), the head emits
//! `K` prediction branches, and the per-proposal loss is the minimum over
//! all branch-to-target assignments of the summed branch losses. With one
//! text target and background padding the assignment is not searched: branch
//! 0 always takes the text, so inference can read branch 0 alone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::{encode_box, encode_curve, BoxTarget, CurveTarget, BOX_TARGET_LEN};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, AxisBox, BezierText};
use crate::scalar::Real;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_K: usize = 2;

/// Groundtruths matched to one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet<T> {
    pub proposal_index: usize,
    /// Groundtruth indices, highest IoU first.
    pub matched_gt: Vec<usize>,
    /// IoU of each entry of `matched_gt`.
    pub ious: Vec<T>,
    pub padded_background: usize,
}

impl<T: Real> MatchSet<T> {
    pub fn k(&self) -> usize {
        self.matched_gt.len() + self.padded_background
    }

    pub fn is_background(&self) -> bool {
        self.matched_gt.is_empty()
    }

    /// Keeps the `keep` best matches and re-pads to `k` slots.
    pub fn truncated(&self, keep: usize, k: usize) -> Self {
        let n = self.matched_gt.len().min(keep).min(k);
        Self {
            proposal_index: self.proposal_index,
            matched_gt: self.matched_gt[..n].to_vec(),
            ious: self.ious[..n].to_vec(),
            padded_background: k - n,
        }
    }
}

/// Matches each proposal to the groundtruth boxes with IoU strictly above
/// `theta`, sorted by IoU (ties to the lower index), truncated to `k`.
pub fn match_proposals<T: Real>(
    proposals: &[AxisBox<T>],
    gt_boxes: &[AxisBox<T>],
    theta: T,
    k: usize,
) -> Result<Vec<MatchSet<T>>> {
    if !(theta > T::zero() && theta < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1), got {theta}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(proposals
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let mut hits: Vec<(usize, T)> = gt_boxes
                .iter()
                .enumerate()
                .map(|(gi, g)| (gi, box_iou(p, g)))
                .filter(|&(_, iou)| iou > theta)
                .collect();
            hits.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite IoU").then(a.0.cmp(&b.0)));
            hits.truncate(k);
            MatchSet {
                proposal_index: pi,
                padded_background: k - hits.len(),
                matched_gt: hits.iter().map(|h| h.0).collect(),
                ious: hits.iter().map(|h| h.1).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchTarget<T> {
    Text {
        boxes: BoxTarget<T>,
        curve: CurveTarget<T>,
    },
    Background,
}

impl<T> BranchTarget<T> {
    pub fn is_text(&self) -> bool {
        matches!(self, BranchTarget::Text { .. })
    }
}

/// Regression targets for every slot of `m`, matched texts first.
pub fn branch_targets<T: Real>(
    m: &MatchSet<T>,
    gt_shapes: &[BezierText<T>],
    gt_boxes: &[AxisBox<T>],
    proposal: &AxisBox<T>,
) -> Result<Vec<BranchTarget<T>>> {
    let mut out = Vec::with_capacity(m.k());
    for &g in &m.matched_gt {
        let (shape, bx) = gt_shapes
            .get(g)
            .zip(gt_boxes.get(g))
            .ok_or_else(|| Error::InvalidArgument(format!("groundtruth index {g} out of range")))?;
        out.push(BranchTarget::Text {
            boxes: encode_box(bx, proposal)?,
            curve: encode_curve(shape, proposal)?,
        });
    }
    out.extend(std::iter::repeat_n(BranchTarget::Background, m.padded_background));
    Ok(out)
}

/// One branch's output: text confidence and regression deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchPrediction<T> {
    pub confidence: T,
    pub boxes: BoxTarget<T>,
    pub curve: CurveTarget<T>,
}

/// Component-loss settings. Defaults: cross-entropy clamp `1e-7`,
/// smooth-L1 `beta = 1`, unit weights, unit regression scales.
///
/// Each regression residual is multiplied by its scale before smooth-L1,
/// which is the same as regressing targets divided by a fixed spread.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig<T: Real> {
    pub eps: T,
    pub beta: T,
    pub cls_weight: T,
    pub box_weight: T,
    pub curve_weight: T,
    pub box_scale: [T; BOX_TARGET_LEN],
    pub curve_scale: T,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            eps: T::lit(1e-7),
            beta: T::one(),
            cls_weight: T::one(),
            box_weight: T::one(),
            curve_weight: T::one(),
            box_scale: [T::one(); BOX_TARGET_LEN],
            curve_scale: T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BranchLoss<T> {
    pub cls: T,
    pub reg_box: T,
    pub reg_curve: T,
}

impl<T: Real> BranchLoss<T> {
    pub fn total(&self) -> T {
        self.cls + self.reg_box + self.reg_curve
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub cls: T,
    pub reg_box: T,
    pub reg_curve: T,
    /// `cls + reg_box + reg_curve`.
    pub total: T,
    /// `chosen_permutation[k]` is the target index assigned to branch `k`.
    pub chosen_permutation: Vec<usize>,
}

#[inline]
pub fn smooth_l1<T: Real>(x: T, beta: T) -> T {
    let a = x.abs();
    if a < beta {
        T::lit(0.5) * a * a / beta
    } else {
        a - T::lit(0.5) * beta
    }
}

#[inline]
pub fn smooth_l1_grad<T: Real>(x: T, beta: T) -> T {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Two-class cross-entropy on the text confidence, clamped to `[eps, 1-eps]`.
#[inline]
pub fn classification_loss<T: Real>(confidence: T, is_text: bool, eps: T) -> T {
    let c = confidence.max(eps).min(T::one() - eps);
    if is_text {
        -c.ln()
    } else {
        -(T::one() - c).ln()
    }
}

pub fn branch_loss<T: Real>(
    pred: &BranchPrediction<T>,
    target: &BranchTarget<T>,
    cfg: &LossConfig<T>,
) -> BranchLoss<T> {
    let cls = cfg.cls_weight * classification_loss(pred.confidence, target.is_text(), cfg.eps);
    match target {
        BranchTarget::Background => BranchLoss {
            cls,
            reg_box: T::zero(),
            reg_curve: T::zero(),
        },
        BranchTarget::Text { boxes, curve } => {
            let reg_box = (0..BOX_TARGET_LEN).fold(T::zero(), |acc, i| {
                acc + smooth_l1(cfg.box_scale[i] * (pred.boxes.deltas[i] - boxes.deltas[i]), cfg.beta)
            });
            let reg_curve = pred.curve.offsets.iter().zip(&curve.offsets).fold(T::zero(), |acc, (&a, &b)| {
                acc + smooth_l1(cfg.curve_scale * (a - b), cfg.beta)
            });
            BranchLoss {
                cls,
                reg_box: cfg.box_weight * reg_box,
                reg_curve: cfg.curve_weight * reg_curve,
            }
        }
    }
}

fn check_counts<T>(preds: &[BranchPrediction<T>], targets: &[BranchTarget<T>]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::BranchCountMismatch {
            expected: targets.len(),
            got: preds.len(),
        });
    }
    Ok(())
}

/// Assignment used when exactly one target is text and the rest background:
/// branch 0 takes the text, the remaining branches take the backgrounds in
/// index order. `None` for any other composition.
pub fn forced_assignment<T>(targets: &[BranchTarget<T>]) -> Option<Vec<usize>> {
    let texts: Vec<usize> = (0..targets.len()).filter(|&j| targets[j].is_text()).collect();
    if targets.len() < 2 || texts.len() != 1 {
        return None;
    }
    let text = texts[0];
    Some(
        std::iter::once(text)
            .chain((0..targets.len()).filter(|&j| j != text))
            .collect(),
    )
}

fn accumulate<T: Real>(losses: impl Iterator<Item = BranchLoss<T>>, perm: Vec<usize>) -> LossBreakdown<T> {
    let (mut cls, mut reg_box, mut reg_curve) = (T::zero(), T::zero(), T::zero());
    for l in losses {
        cls += l.cls;
        reg_box += l.reg_box;
        reg_curve += l.reg_curve;
    }
    LossBreakdown {
        cls,
        reg_box,
        reg_curve,
        total: cls + reg_box + reg_curve,
        chosen_permutation: perm,
    }
}

/// Loss of one fixed assignment `perm` (branch `k` takes target `perm[k]`).
pub fn fixed_permutation_loss<T: Real>(
    preds: &[BranchPrediction<T>],
    targets: &[BranchTarget<T>],
    perm: &[usize],
    cfg: &LossConfig<T>,
) -> Result<LossBreakdown<T>> {
    check_counts(preds, targets)?;
    if perm.len() != preds.len() {
        return Err(Error::BranchCountMismatch {
            expected: preds.len(),
            got: perm.len(),
        });
    }
    Ok(accumulate(
        preds.iter().zip(perm).map(|(p, &j)| branch_loss(p, &targets[j], cfg)),
        perm.to_vec(),
    ))
}

/// Advances `perm` to the next permutation in lexicographic order.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let Some(i) = (0..n - 1).rev().find(|&i| perm[i] < perm[i + 1]) else {
        return false;
    };
    let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).expect("successor exists");
    perm.swap(i, j);
    perm[i + 1..].reverse();
    true
}

/// Minimum over branch-to-target assignments of the summed branch losses.
///
/// Assignments are scanned in lexicographic order and only a strictly lower
/// total replaces the incumbent, so ties resolve toward the identity.
pub fn omts_loss<T: Real>(
    preds: &[BranchPrediction<T>],
    targets: &[BranchTarget<T>],
    cfg: &LossConfig<T>,
) -> Result<LossBreakdown<T>> {
    check_counts(preds, targets)?;
    if let Some(perm) = forced_assignment(targets) {
        return fixed_permutation_loss(preds, targets, &perm, cfg);
    }
    let k = preds.len();
    let cost: Vec<Vec<BranchLoss<T>>> = preds
        .iter()
        .map(|p| targets.iter().map(|t| branch_loss(p, t, cfg)).collect())
        .collect();

    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = accumulate((0..k).map(|b| cost[b][perm[b]]), perm.clone());
    while next_permutation(&mut perm) {
        let cand = accumulate((0..k).map(|b| cost[b][perm[b]]), perm.clone());
        if cand.total < best.total {
            best = cand;
        }
    }
    Ok(best)
}

/// Exhaustive reference for [`omts_loss`]: generates every assignment with
/// Heap's algorithm, recomputes each branch loss per assignment, and picks
/// the lowest total with ties going to the lexicographically smallest
/// assignment. Applies the same forced first-branch rule.
pub fn brute_force_omts<T: Real>(
    preds: &[BranchPrediction<T>],
    targets: &[BranchTarget<T>],
    cfg: &LossConfig<T>,
) -> Result<LossBreakdown<T>> {
    check_counts(preds, targets)?;
    let k = preds.len();
    let all: Vec<Vec<usize>> = match forced_assignment(targets) {
        Some(perm) => vec![perm],
        None => {
            fn heap(n: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
                if n <= 1 {
                    out.push(a.clone());
                    return;
                }
                for i in 0..n - 1 {
                    heap(n - 1, a, out);
                    if n % 2 == 0 {
                        a.swap(i, n - 1);
                    } else {
                        a.swap(0, n - 1);
                    }
                }
                heap(n - 1, a, out);
            }
            let mut out = Vec::new();
            heap(k, &mut (0..k).collect(), &mut out);
            out
        }
    };
    all.into_iter()
        .map(|perm| {
            let losses: Vec<BranchLoss<T>> = (0..k)
                .map(|b| branch_loss(&preds[b], &targets[perm[b]], cfg))
                .collect();
            accumulate(losses.into_iter(), perm)
        })
        .min_by(|a, b| {
            a.total
                .partial_cmp(&b.total)
                .expect("finite loss")
                .then_with(|| a.chosen_permutation.cmp(&b.chosen_permutation))
        })
        .ok_or_else(|| Error::InvalidArgument("no assignments".into()))
}

/// Foreground/background balanced subsample of `matches`, returned as
/// ascending indices into `matches`. At most `floor(fg_fraction * batch)`
/// foreground entries; the rest of the batch is background.
pub fn sample_minibatch_indices<T: Real>(
    matches: &[MatchSet<T>],
    fg_fraction: f64,
    batch: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fg, mut bg): (Vec<usize>, Vec<usize>) =
        (0..matches.len()).partition(|&i| !matches[i].is_background());
    let fg_cap = (fg_fraction.clamp(0.0, 1.0) * batch as f64).floor() as usize;
    fg.shuffle(&mut rng);
    bg.shuffle(&mut rng);
    fg.truncate(fg_cap.min(batch));
    bg.truncate(batch - fg.len());
    let mut out: Vec<usize> = fg.into_iter().chain(bg).collect();
    out.sort_unstable();
    out
}

pub fn sample_minibatch<T: Real>(
    matches: &[MatchSet<T>],
    fg_fraction: f64,
    batch: usize,
    seed: u64,
) -> Vec<MatchSet<T>> {
    sample_minibatch_indices(matches, fg_fraction, batch, seed)
        .into_iter()
        .map(|i| matches[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> AxisBox<f64> {
        AxisBox::new(cx, cy, w, h).unwrap()
    }

    fn text(v: f64) -> BranchTarget<f64> {
        BranchTarget::Text {
            boxes: BoxTarget { deltas: [v; 4] },
            curve: CurveTarget { offsets: [v; 16] },
        }
    }

    fn pred(c: f64, v: f64) -> BranchPrediction<f64> {
        BranchPrediction {
            confidence: c,
            boxes: BoxTarget { deltas: [v; 4] },
            curve: CurveTarget { offsets: [v; 16] },
        }
    }

    #[test]
    fn match_two_gts_sorted_by_iou() {
        let p = bx(0.0, 0.0, 10.0, 10.0);
        // IoU 0.6 and 0.8 by horizontal shift: shift s gives (10-s)/(10+s)
        let g_low = bx(2.5, 0.0, 10.0, 10.0);
        let g_high = bx(10.0 / 9.0, 0.0, 10.0, 10.0);
        let m = match_proposals(&[p], &[g_low, g_high], 0.5, 2).unwrap();
        assert_eq!(m[0].matched_gt, vec![1, 0]);
        assert!((m[0].ious[0] - 0.8).abs() < 1e-12 && (m[0].ious[1] - 0.6).abs() < 1e-12);
        assert_eq!(m[0].padded_background, 0);
    }

    #[test]
    fn match_background_and_errors() {
        let p = bx(0.0, 0.0, 10.0, 10.0);
        let far = bx(7.0, 0.0, 10.0, 10.0);
        let m = match_proposals(&[p], &[far], 0.5, 2).unwrap();
        assert!(m[0].is_background());
        assert_eq!(m[0].padded_background, 2);
        assert!(match_proposals::<f64>(&[], &[far], 0.5, 2).unwrap().is_empty());
        assert!(match_proposals(&[p], &[far], 1.0, 2).is_err());
        assert!(match_proposals(&[p], &[far], 0.5, 0).is_err());
    }

    #[test]
    fn truncation_keeps_best() {
        let p = bx(0.0, 0.0, 10.0, 10.0);
        let gts = [bx(0.5, 0.0, 10.0, 10.0), bx(0.1, 0.0, 10.0, 10.0), bx(1.0, 0.0, 10.0, 10.0)];
        let m = match_proposals(&[p], &gts, 0.5, 2).unwrap();
        assert_eq!(m[0].matched_gt, vec![1, 0]);
        let one = m[0].truncated(1, 2);
        assert_eq!(one.matched_gt, vec![1]);
        assert_eq!(one.padded_background, 1);
    }

    #[test]
    fn half_confidence_gives_ln2() {
        let cfg = LossConfig::default();
        for t in [text(0.0), BranchTarget::Background] {
            let l = branch_loss(&pred(0.5, 0.0), &t, &cfg);
            assert!((l.cls - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_is_clamped_near_zero() {
        let cfg = LossConfig::default();
        let l = branch_loss(&pred(1.0, 0.3), &text(0.3), &cfg);
        assert!(l.total() >= 0.0 && l.total() < 1.1e-7);
        assert_eq!(l.reg_box, 0.0);
        let bg = branch_loss(&pred(0.0, 9.0), &BranchTarget::Background, &cfg);
        assert!(bg.total() < 1.1e-7);
        assert_eq!(bg.reg_curve, 0.0);
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
        assert_eq!(smooth_l1_grad(-2.0, 1.0), -1.0);
        assert_eq!(smooth_l1_grad(0.25, 1.0), 0.25);
    }

    #[test]
    fn forced_first_branch() {
        let targets = vec![BranchTarget::Background, text(0.0)];
        assert_eq!(forced_assignment(&targets), Some(vec![1, 0]));
        // branch 1 predicts the text perfectly, yet branch 0 is forced onto it
        let preds = [pred(0.0, 5.0), pred(1.0, 0.0)];
        let l = omts_loss(&preds, &targets, &LossConfig::default()).unwrap();
        assert_eq!(l.chosen_permutation, vec![1, 0]);
        assert!(l.total > 10.0);
    }

    #[test]
    fn lexicographic_permutations() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(
            seen,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
    }

    #[test]
    fn branch_count_contract() {
        let targets = vec![text(0.0), text(1.0)];
        let r = omts_loss(&[pred(0.5, 0.0)], &targets, &LossConfig::default());
        assert_eq!(r, Err(Error::BranchCountMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn minibatch_balance_and_determinism() {
        let ms: Vec<MatchSet<f64>> = (0..40)
            .map(|i| MatchSet {
                proposal_index: i,
                matched_gt: if i % 4 == 0 { vec![0] } else { vec![] },
                ious: if i % 4 == 0 { vec![0.7] } else { vec![] },
                padded_background: if i % 4 == 0 { 1 } else { 2 },
            })
            .collect();
        let a = sample_minibatch_indices(&ms, 0.25, 16, 7);
        let b = sample_minibatch_indices(&ms, 0.25, 16, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_eq!(a.iter().filter(|&&i| i % 4 == 0).count(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let fg_heavy = sample_minibatch_indices(&ms, 1.0, 16, 7);
        assert_eq!(fg_heavy.iter().filter(|&&i| i % 4 == 0).count(), 10);
    }
}
