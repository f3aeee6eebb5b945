//! Precision, recall and F-measure of polygonal detections.
//!
//! Matching is greedy in score order: each detection claims the unmatched
//! groundtruth with the highest polygon IoU if that IoU reaches the
//! threshold. Equal scores go to the lower detection index and equal IoUs to
//! the lower groundtruth index. A detection that lands on an ignore-flagged
//! instance is dropped from the detection count and does not consume the
//! instance.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polygon_iou, BezierText, Point2, DEFAULT_IOU_RESOLUTION};
use crate::synthdata::Scene;

/// Vertices per Bezier side when comparing shapes.
pub const EVAL_SAMPLES_PER_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub raster_resolution: usize,
    pub respect_ignore: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            raster_resolution: DEFAULT_IOU_RESOLUTION,
            respect_ignore: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "IoU threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// A scored detection belonging to one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetection {
    pub scene: usize,
    pub score: f64,
    pub shape: BezierText<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub scene: usize,
    /// Index within the scene's detections, in the order given.
    pub detection: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub detections: usize,
    pub groundtruths: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.detections)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.groundtruths)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }

    fn add(&mut self, o: &Counts) {
        self.true_positives += o.true_positives;
        self.detections += o.detections;
        self.groundtruths += o.groundtruths;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: usize,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub counts: Counts,
    pub matched_pairs: Vec<MatchedPair>,
    pub per_scene: Vec<SceneReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned P/R/F table with percentages.
    pub fn table(&self, label: &str) -> String {
        let mut s = String::new();
        let w = label.len().max(6);
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>6}  {:>6}", "Method", "P", "R", "F");
        let _ = writeln!(
            s,
            "{:<w$}  {:>6.2}  {:>6.2}  {:>6.2}",
            label,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f_measure
        );
        s
    }
}

/// Polygon outline used for IoU.
pub fn shape_polygon(bt: &BezierText<f64>) -> Vec<Point2<f64>> {
    let mut v = bt.top.sample(EVAL_SAMPLES_PER_SIDE);
    v.extend(bt.bottom.sample(EVAL_SAMPLES_PER_SIDE).into_iter().rev());
    v
}

fn extent(v: &[Point2<f64>]) -> [f64; 4] {
    v.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
        [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)]
    })
}

fn disjoint(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[2] <= b[0] || b[2] <= a[0] || a[3] <= b[1] || b[3] <= a[1]
}

fn evaluate_scene(
    scene_index: usize,
    scene: &Scene,
    dets: &[(usize, &SceneDetection)],
    config: &EvalConfig,
) -> Result<(Counts, Vec<MatchedPair>)> {
    let gts: Vec<_> = scene.instances.iter().map(shape_polygon).collect();
    let gt_extents: Vec<_> = gts.iter().map(|g| extent(g)).collect();
    let ignored = |g: usize| config.respect_ignore && scene.ignore.get(g).copied().unwrap_or(false);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1.score.partial_cmp(&dets[a].1.score).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut counts = Counts {
        groundtruths: (0..gts.len()).filter(|&g| !ignored(g)).count(),
        ..Default::default()
    };
    let mut pairs = Vec::new();
    for di in order {
        let poly = shape_polygon(&dets[di].1.shape);
        let ext = extent(&poly);
        let mut best: Option<(usize, f64)> = None;
        for (g, gp) in gts.iter().enumerate() {
            if taken[g] || disjoint(&ext, &gt_extents[g]) {
                continue;
            }
            let iou = polygon_iou(&poly, gp, config.raster_resolution)?;
            if iou >= config.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) if ignored(g) => {}
            Some((g, iou)) => {
                taken[g] = true;
                counts.true_positives += 1;
                counts.detections += 1;
                pairs.push(MatchedPair {
                    scene: scene_index,
                    detection: dets[di].0,
                    gt: g,
                    iou,
                });
            }
            None => counts.detections += 1,
        }
    }
    Ok((counts, pairs))
}

/// Evaluates detections against every scene. `detections` may be in any
/// order; each carries its scene index.
pub fn evaluate(detections: &[SceneDetection], scenes: &[Scene], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let mut by_scene: Vec<Vec<(usize, &SceneDetection)>> = vec![Vec::new(); scenes.len()];
    for d in detections {
        let bucket = by_scene.get_mut(d.scene).ok_or(Error::UnknownScene {
            scene: d.scene,
            n_scenes: scenes.len(),
        })?;
        bucket.push((bucket.len(), d));
    }
    let results: Vec<(Counts, Vec<MatchedPair>)> = scenes
        .par_iter()
        .zip(by_scene.par_iter())
        .enumerate()
        .map(|(i, (s, d))| evaluate_scene(i, s, d, config))
        .collect::<Result<_>>()?;
    let mut total = Counts::default();
    let mut matched_pairs = Vec::new();
    let mut per_scene = Vec::with_capacity(scenes.len());
    for (i, (c, p)) in results.into_iter().enumerate() {
        total.add(&c);
        matched_pairs.extend(p);
        per_scene.push(SceneReport { scene: i, counts: c });
    }
    Ok(EvalReport {
        precision: total.precision(),
        recall: total.recall(),
        f_measure: total.f_measure(),
        counts: total,
        matched_pairs,
        per_scene,
    })
}

/// Restricts evaluation to the instances selected by `keep`: every other
/// instance is flagged as ignore, so detections on it count neither way.
pub fn subset_scenes(scenes: &[Scene], keep: &[Vec<bool>]) -> Result<Vec<Scene>> {
    if keep.len() != scenes.len() {
        return Err(Error::ShapeMismatch(format!("{} masks for {} scenes", keep.len(), scenes.len())));
    }
    scenes
        .iter()
        .zip(keep)
        .map(|(s, k)| {
            if k.len() != s.instances.len() {
                return Err(Error::ShapeMismatch("mask length differs from instance count".into()));
            }
            let mut out = s.clone();
            out.ignore = s.ignore.iter().zip(k).map(|(&ig, &keep)| ig || !keep).collect();
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CubicBezier;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> BezierText<f64> {
        let p = Point2::new;
        let top = CubicBezier::new(p(x0, y0), p(x0 + (x1 - x0) / 3.0, y0), p(x0 + 2.0 * (x1 - x0) / 3.0, y0), p(x1, y0));
        BezierText {
            top,
            bottom: top.map(|q| q + p(0.0, y1 - y0)),
        }
    }

    fn scene(instances: Vec<BezierText<f64>>) -> Scene {
        Scene {
            width: 200.0,
            height: 200.0,
            ignore: vec![false; instances.len()],
            instances,
        }
    }

    fn det(scene: usize, score: f64, shape: BezierText<f64>) -> SceneDetection {
        SceneDetection { scene, score, shape }
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![rect(0.0, 0.0, 50.0, 10.0), rect(0.0, 40.0, 60.0, 60.0)];
        let s = scene(gts.clone());
        let d: Vec<_> = gts.iter().map(|g| det(0, 0.9, *g)).collect();
        let r = evaluate(&d, &[s], &EvalConfig::default()).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_detections() {
        let s = scene(vec![rect(0.0, 0.0, 50.0, 10.0)]);
        let r = evaluate(&[], &[s], &EvalConfig::default()).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_of_three_correct() {
        let a = rect(0.0, 0.0, 50.0, 10.0);
        let b = rect(0.0, 40.0, 60.0, 60.0);
        let s = scene(vec![a, b]);
        let d = vec![det(0, 0.9, a), det(0, 0.8, b), det(0, 0.7, rect(100.0, 100.0, 150.0, 120.0))];
        let r = evaluate(&d, &[s], &EvalConfig::default()).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.recall, 1.0);
        assert!((r.f_measure - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ignore_removes_from_both_sides() {
        let a = rect(0.0, 0.0, 50.0, 10.0);
        let b = rect(0.0, 40.0, 60.0, 60.0);
        let mut s = scene(vec![a, b]);
        s.ignore[1] = true;
        let d = vec![det(0, 0.9, a), det(0, 0.8, b)];
        let r = evaluate(&d, std::slice::from_ref(&s), &EvalConfig::default()).unwrap();
        assert_eq!(r.counts, Counts { true_positives: 1, detections: 1, groundtruths: 1 });
        let cfg = EvalConfig {
            respect_ignore: false,
            ..Default::default()
        };
        assert_eq!(evaluate(&d, &[s], &cfg).unwrap().counts.groundtruths, 2);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let a = rect(0.0, 0.0, 50.0, 10.0);
        let d = vec![det(0, 0.5, a), det(0, 0.5, a)];
        let r = evaluate(&d, &[scene(vec![a])], &EvalConfig::default()).unwrap();
        assert_eq!(r.matched_pairs.len(), 1);
        assert_eq!(r.matched_pairs[0].detection, 0);
        assert_eq!(r.precision, 0.5);
    }

    #[test]
    fn unknown_scene() {
        let a = rect(0.0, 0.0, 50.0, 10.0);
        let err = evaluate(&[det(3, 0.9, a)], &[scene(vec![a])], &EvalConfig::default()).unwrap_err();
        assert_eq!(err, Error::UnknownScene { scene: 3, n_scenes: 1 });
    }

    #[test]
    fn table_layout() {
        let a = rect(0.0, 0.0, 50.0, 10.0);
        let r = evaluate(&[det(0, 0.9, a)], &[scene(vec![a])], &EvalConfig::default()).unwrap();
        let t = r.table("Baseline");
        assert!(t.contains("100.00"));
        assert_eq!(t.lines().count(), 2);
    }
}
