//! End-to-end pipeline (synthesize, rasterize, train, detect, evaluate) and
//! the ablation grid over schemes and PFAM placements.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, subset_scenes, Counts, EvalConfig, SceneDetection};
use crate::geometry::AxisBox;
use crate::head::{infer, DetectionHead, OpCount, PfamMode, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use crate::synthdata::{
    augment_rotation, derive_seed, gen_proposals, gen_scenes, nearby_mask, rotate_dataset, ProposalConfig, RoiRasterizer,
    Scene, SynthConfig, NEARBY_MIN_IOU,
};
use crate::train::{train_head, Scheme, TrainConfig, TrainingSet};

/// Scenes with their proposals and ROI features.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenes: Vec<Scene>,
    pub proposals: Vec<Vec<AxisBox<f64>>>,
    pub features: Vec<Vec<Vec<f64>>>,
}

/// Proposals for scene `i` use `derive_seed(seed, i)`.
pub fn prepare(scenes: Vec<Scene>, pcfg: &ProposalConfig, grid: usize, seed: u64) -> Result<Prepared> {
    let per_scene: Vec<(Vec<AxisBox<f64>>, Vec<Vec<f64>>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let props = gen_proposals(s, pcfg, derive_seed(seed, i as u64))?;
            let raster = RoiRasterizer::new(s)?;
            let feats = props.iter().map(|p| Ok(raster.rasterize(p, grid)?.values)).collect::<Result<_>>()?;
            Ok((props, feats))
        })
        .collect::<Result<_>>()?;
    let (proposals, features) = per_scene.into_iter().unzip();
    Ok(Prepared {
        scenes,
        proposals,
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

/// Runs branch-0 inference on every scene.
pub fn detect(head: &DetectionHead<f64>, data: &Prepared, cfg: &InferConfig) -> Result<(Vec<SceneDetection>, OpCount)> {
    let mut ops = OpCount::default();
    let mut out = Vec::new();
    for (si, (props, feats)) in data.proposals.iter().zip(&data.features).enumerate() {
        for d in infer(head, props, feats, cfg.score_threshold, cfg.nms_iou, &mut ops)? {
            out.push(SceneDetection {
                scene: si,
                score: d.score,
                shape: d.shape,
            });
        }
    }
    Ok((out, ops))
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub k: usize,
    pub pfam: PfamMode,
    pub scheme: Scheme,
}

impl Variant {
    pub fn new(label: &str, k: usize, pfam: PfamMode, scheme: Scheme) -> Self {
        Self {
            label: label.to_string(),
            k,
            pfam,
            scheme,
        }
    }
}

/// Baseline with one and two branches, then every PFAM mode with and
/// without the one-to-many scheme.
pub fn default_variants() -> Vec<Variant> {
    use PfamMode::*;
    use Scheme::*;
    vec![
        Variant::new("Baseline (K=1)", 1, None, OneToOne),
        Variant::new("Baseline", 2, None, OneToOne),
        Variant::new("Baseline + PFAM(1fc)", 2, LastFc, OneToOne),
        Variant::new("Baseline + PFAM(2fc)", 2, BothFc, OneToOne),
        Variant::new("Baseline + OMTS", 2, None, Omts),
        Variant::new("Baseline + PFAM(1fc) + OMTS", 2, LastFc, Omts),
        Variant::new("Baseline + PFAM(2fc) + OMTS", 2, BothFc, Omts),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seeds: usize,
    pub master_seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub synth: SynthConfig,
    pub proposals: ProposalConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub variants: Vec<Variant>,
    /// Empty disables the rotated protocol.
    pub rotation_angles: Vec<f64>,
    pub rotation_augment_deg: (f64, f64),
    /// Trained with rotation augmentation and evaluated on rotated copies.
    pub rotation_variants: Vec<Variant>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut train = TrainConfig {
            iters: 3000,
            batch: 64,
            ..Default::default()
        };
        train.head.fc_dim = 128;
        train.sgd.lr = 0.003;
        train.sgd.warmup_iters = 100;
        train.loss.box_scale = [10.0, 10.0, 5.0, 5.0];
        train.loss.curve_scale = 10.0;
        Self {
            seeds: 5,
            master_seed: 0,
            train_scenes: 200,
            test_scenes: 200,
            synth: SynthConfig::default(),
            proposals: ProposalConfig::default(),
            train,
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            variants: default_variants(),
            rotation_angles: vec![30.0, 45.0, 60.0],
            rotation_augment_deg: (0.0, 90.0),
            rotation_variants: vec![
                Variant::new("Baseline + PFAM(2fc)", 2, PfamMode::BothFc, Scheme::OneToOne),
                Variant::new("Baseline + PFAM(2fc) + OMTS", 2, PfamMode::BothFc, Scheme::Omts),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl From<&Counts> for Prf {
    fn from(c: &Counts) -> Self {
        Self {
            precision: c.precision(),
            recall: c.recall(),
            f_measure: c.f_measure(),
        }
    }
}

/// Scores of one trained head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub seed: usize,
    pub all: Prf,
    pub nearby: Prf,
    pub inference_ops: OpCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub variant: Variant,
    pub runs: Vec<RunScore>,
    pub median_all: Prf,
    pub median_nearby: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotatedReport {
    pub variant: Variant,
    pub angle: f64,
    pub f_per_seed: Vec<f64>,
    pub median: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<RowReport>,
    pub rotated: Vec<RotatedReport>,
    /// Share of test proposals whose IoU exceeds the threshold for two or
    /// more groundtruth boxes.
    pub multi_match_fraction: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_prf(runs: &[Prf]) -> Prf {
    let pick = |f: fn(&Prf) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Prf {
        precision: pick(|p| p.precision),
        recall: pick(|p| p.recall),
        f_measure: pick(|p| p.f_measure),
    }
}

impl BenchReport {
    pub fn row(&self, label: &str) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.variant.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Median P/R/F per row, all instances and the nearby subset, in percent.
    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.variant.label.len()).chain(self.rotated.iter().map(|r| r.variant.label.len())).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>6}  {:>6}  {:>8}  {:>8}  {:>8}", "Method", "P", "R", "F", "P(near)", "R(near)", "F(near)");
        for r in &self.rows {
            let (a, n) = (&r.median_all, &r.median_nearby);
            let _ = writeln!(
                s,
                "{:<w$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>8.2}  {:>8.2}  {:>8.2}",
                r.variant.label,
                100.0 * a.precision,
                100.0 * a.recall,
                100.0 * a.f_measure,
                100.0 * n.precision,
                100.0 * n.recall,
                100.0 * n.f_measure
            );
        }
        if !self.rotated.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}", "Rotated", "Angle", "P", "R", "F");
            for r in &self.rotated {
                let m = &r.median;
                let _ = writeln!(
                    s,
                    "{:<w$}  {:>6.0}  {:>6.2}  {:>6.2}  {:>6.2}",
                    r.variant.label,
                    r.angle,
                    100.0 * m.precision,
                    100.0 * m.recall,
                    100.0 * m.f_measure
                );
            }
        }
        let _ = writeln!(s, "\nmulti-match proposals: {:.2}%", 100.0 * self.multi_match_fraction);
        s
    }
}

fn variant_config(base: &TrainConfig, v: &Variant, seed: u64) -> TrainConfig {
    let mut c = *base;
    c.head.k = v.k;
    c.head.pfam_mode = v.pfam;
    c.head.roi_dim = c.grid * c.grid;
    c.scheme = v.scheme;
    c.seed = seed;
    c
}

/// Trains one variant on `train` and returns the head.
pub fn train_variant(base: &TrainConfig, v: &Variant, train: &Prepared, seed: u64) -> Result<DetectionHead<f64>> {
    let cfg = variant_config(base, v, seed);
    let data = TrainingSet::build(&train.scenes, &train.proposals, cfg.grid, cfg.iou_threshold, cfg.head.k, cfg.scheme)?;
    Ok(train_head(&cfg, &data)?.head)
}

fn score(head: &DetectionHead<f64>, test: &Prepared, nearby: &[Scene], cfg: &BenchConfig, seed: usize) -> Result<RunScore> {
    let (dets, ops) = detect(head, test, &cfg.infer)?;
    let all = evaluate(&dets, &test.scenes, &cfg.eval)?;
    let near = evaluate(&dets, nearby, &cfg.eval)?;
    Ok(RunScore {
        seed,
        all: Prf::from(&all.counts),
        nearby: Prf::from(&near.counts),
        inference_ops: ops,
    })
}

fn synth(cfg: &BenchConfig, n: usize, seed: u64) -> Result<Vec<Scene>> {
    gen_scenes(&SynthConfig {
        n_scenes: n,
        rng_seed: seed,
        ..cfg.synth
    })
}

/// Runs every variant for every seed. Seed `s` draws its own training scenes
/// and initialization; the test scenes are shared by all runs. Cells run in
/// parallel and each is deterministic on its own.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let grid = cfg.train.grid;
    let m = cfg.master_seed;
    let test = prepare(synth(cfg, cfg.test_scenes, derive_seed(m, 1))?, &cfg.proposals, grid, derive_seed(m, 2))?;
    let masks = test.scenes.iter().map(|s| nearby_mask(s, NEARBY_MIN_IOU)).collect::<Result<Vec<_>>>()?;
    let nearby = subset_scenes(&test.scenes, &masks)?;

    let seed_of = |s: usize| derive_seed(m, 100 + s as u64);
    let trains: Vec<Prepared> = (0..cfg.seeds)
        .map(|s| {
            let sd = seed_of(s);
            prepare(synth(cfg, cfg.train_scenes, derive_seed(sd, 0))?, &cfg.proposals, grid, derive_seed(sd, 1))
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..cfg.variants.len()).flat_map(|v| (0..cfg.seeds).map(move |s| (v, s))).collect();
    let scores: Vec<RunScore> = cells
        .par_iter()
        .map(|&(v, s)| {
            let head = train_variant(&cfg.train, &cfg.variants[v], &trains[s], derive_seed(seed_of(s), 2))?;
            score(&head, &test, &nearby, cfg, s)
        })
        .collect::<Result<_>>()?;
    let rows = cfg
        .variants
        .iter()
        .enumerate()
        .map(|(v, variant)| {
            let runs: Vec<RunScore> = scores[v * cfg.seeds..(v + 1) * cfg.seeds].to_vec();
            RowReport {
                variant: variant.clone(),
                median_all: median_prf(&runs.iter().map(|r| r.all).collect::<Vec<_>>()),
                median_nearby: median_prf(&runs.iter().map(|r| r.nearby).collect::<Vec<_>>()),
                runs,
            }
        })
        .collect();

    let rotated = if cfg.rotation_angles.is_empty() { Vec::new() } else { run_rotated(cfg, &test, &trains, &seed_of)? };
    let gt_pairs: Vec<_> = test
        .scenes
        .iter()
        .zip(&test.proposals)
        .map(|(s, p)| Ok((p.clone(), s.gt_boxes()?)))
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        rows,
        rotated,
        multi_match_fraction: crate::synthdata::multi_match_fraction(&gt_pairs, cfg.proposals.iou_threshold),
    })
}

fn run_rotated(cfg: &BenchConfig, test: &Prepared, trains: &[Prepared], seed_of: &(dyn Fn(usize) -> u64 + Sync)) -> Result<Vec<RotatedReport>> {
    let grid = cfg.train.grid;
    let m = cfg.master_seed;
    let rotated_tests: Vec<Prepared> = cfg
        .rotation_angles
        .iter()
        .enumerate()
        .map(|(i, &a)| prepare(rotate_dataset(&test.scenes, a), &cfg.proposals, grid, derive_seed(m, 10 + i as u64)))
        .collect::<Result<_>>()?;
    let augmented: Vec<Prepared> = trains
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let sd = seed_of(s);
            prepare(augment_rotation(&t.scenes, cfg.rotation_augment_deg, derive_seed(sd, 3)), &cfg.proposals, grid, derive_seed(sd, 4))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..cfg.rotation_variants.len()).flat_map(|v| (0..cfg.seeds).map(move |s| (v, s))).collect();
    let per_cell: Vec<Vec<Prf>> = cells
        .par_iter()
        .map(|&(v, s)| {
            let head = train_variant(&cfg.train, &cfg.rotation_variants[v], &augmented[s], derive_seed(seed_of(s), 5))?;
            rotated_tests
                .iter()
                .map(|t| {
                    let (dets, _) = detect(&head, t, &cfg.infer)?;
                    Ok(Prf::from(&evaluate(&dets, &t.scenes, &cfg.eval)?.counts))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (v, variant) in cfg.rotation_variants.iter().enumerate() {
        for (ai, &angle) in cfg.rotation_angles.iter().enumerate() {
            let runs: Vec<Prf> = (0..cfg.seeds).map(|s| per_cell[v * cfg.seeds + s][ai]).collect();
            out.push(RotatedReport {
                variant: variant.clone(),
                angle,
                f_per_seed: runs.iter().map(|r| r.f_measure).collect(),
                median: median_prf(&runs),
            });
        }
    }
    Ok(out)
}
