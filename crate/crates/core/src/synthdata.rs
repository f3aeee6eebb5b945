//! Procedural scenes of curved text-like ribbons.
//!
//! Each ribbon is a random cubic spine whose control polygon is translated
//! by plus/minus half the thickness along the spine's normal, so the
//! groundtruth is an exact [`BezierText`]. A "nearby pair" duplicates a
//! ribbon along the same normal with a fixed edge-to-edge gap; proposals
//! jittered around either member then often overlap both groundtruth boxes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{box_iou, AxisBox, BezierText, CubicBezier, Point2, PolygonText, Shape};

/// Default ROI lattice size.
pub const DEFAULT_GRID: usize = 14;

/// Vertices per side when rasterizing ribbons.
const RASTER_SAMPLES_PER_SIDE: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub instances: Vec<BezierText<f64>>,
    pub ignore: Vec<bool>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Result<Vec<AxisBox<f64>>> {
        self.instances.iter().map(Shape::bbox).collect()
    }

    pub fn image_rect(&self) -> AxisBox<f64> {
        AxisBox {
            cx: self.width / 2.0,
            cy: self.height / 2.0,
            w: self.width,
            h: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub image_size: (f64, f64),
    /// Inclusive range of placement units per scene; a unit becomes a pair
    /// with probability `nearby_pair_probability`.
    pub instances_per_scene: (usize, usize),
    pub nearby_pair_probability: f64,
    /// Edge-to-edge distance between the members of a pair, pixels.
    pub pair_gap: f64,
    /// Vertical extent of the spine as a fraction of ribbon length.
    pub curvature: (f64, f64),
    pub thickness: (f64, f64),
    pub length: (f64, f64),
    /// Orientation of each ribbon in degrees.
    pub tilt_deg: (f64, f64),
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            image_size: (256.0, 256.0),
            instances_per_scene: (1, 3),
            nearby_pair_probability: 0.5,
            pair_gap: 2.0,
            curvature: (0.25, 0.45),
            thickness: (8.0, 14.0),
            length: (70.0, 150.0),
            tilt_deg: (-10.0, 10.0),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.nearby_pair_probability) {
            return bad("nearby_pair_probability must lie in [0, 1]");
        }
        if !(self.pair_gap >= 0.0) {
            return bad("pair_gap must be non-negative");
        }
        if self.instances_per_scene.0 > self.instances_per_scene.1 {
            return bad("instances_per_scene range is reversed");
        }
        for (name, (lo, hi)) in [
            ("curvature", self.curvature),
            ("thickness", self.thickness),
            ("length", self.length),
            ("tilt_deg", self.tilt_deg),
        ] {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("{name} range is reversed")));
            }
        }
        if !(self.thickness.0 > 0.0 && self.length.0 > 0.0) {
            return bad("thickness and length must be positive");
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return bad("image size must be positive");
        }
        Ok(())
    }
}

/// SplitMix64 mix of a master seed and a stream index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Ribbon centered at the origin in its own frame, then tilted and moved.
/// Returns the shape and its unit normal (pointing from top to bottom).
fn ribbon(rng: &mut impl Rng, cfg: &SynthConfig) -> (BezierText<f64>, Point2<f64>) {
    let len = uniform(rng, cfg.length);
    let extent = uniform(rng, cfg.curvature) * len * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let half = uniform(rng, cfg.thickness) / 2.0;
    // Arc: both interior control points lifted, peak deviation 3/4 of the
    // lift. Wave: opposite lifts, peak-to-peak deviation 0.577 of the lift.
    let (l1, l2) = if rng.gen_bool(0.7) {
        (extent / 0.75, extent / 0.75)
    } else {
        (extent / 0.577, -extent / 0.577)
    };
    let p = Point2::new;
    let spine = CubicBezier::new(
        p(-len / 2.0, 0.0),
        p(-len / 6.0, -l1),
        p(len / 6.0, -l2),
        p(len / 2.0, 0.0),
    );
    let tilt = uniform(rng, cfg.tilt_deg);
    let origin = p(0.0, 0.0);
    let normal = p(0.0, 1.0).rotated(tilt, origin);
    let top = spine.map(|q| (q + p(0.0, -half)).rotated(tilt, origin));
    let bottom = spine.map(|q| (q + p(0.0, half)).rotated(tilt, origin));
    (BezierText { top, bottom }, normal)
}

fn union_box(boxes: &[AxisBox<f64>]) -> AxisBox<f64> {
    let x0 = boxes.iter().map(AxisBox::x0).fold(f64::INFINITY, f64::min);
    let y0 = boxes.iter().map(AxisBox::y0).fold(f64::INFINITY, f64::min);
    let x1 = boxes.iter().map(AxisBox::x1).fold(f64::NEG_INFINITY, f64::max);
    let y1 = boxes.iter().map(AxisBox::y1).fold(f64::NEG_INFINITY, f64::max);
    AxisBox {
        cx: (x0 + x1) / 2.0,
        cy: (y0 + y1) / 2.0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

fn gen_scene(cfg: &SynthConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = cfg.image_size;
    let units = rng.gen_range(cfg.instances_per_scene.0..=cfg.instances_per_scene.1);
    let mut instances = Vec::new();
    let mut occupied: Vec<AxisBox<f64>> = Vec::new();
    const MARGIN: f64 = 4.0;
    for _ in 0..units {
        let (base, normal) = ribbon(&mut rng, cfg);
        let paired = rng.gen_bool(cfg.nearby_pair_probability);
        let mut members = vec![base];
        if paired {
            let thickness = base.bottom.control[0].distance(base.top.control[0]);
            members.push(base.translated(normal * (thickness + cfg.pair_gap)));
        }
        let boxes: Vec<_> = members.iter().map(|m| m.bbox().expect("ribbon has area")).collect();
        let ub = union_box(&boxes);
        if ub.w + 2.0 * MARGIN > w || ub.h + 2.0 * MARGIN > h {
            continue;
        }
        for _attempt in 0..50 {
            let cx = rng.gen_range(ub.w / 2.0 + MARGIN..w - ub.w / 2.0 - MARGIN + 1e-9);
            let cy = rng.gen_range(ub.h / 2.0 + MARGIN..h - ub.h / 2.0 - MARGIN + 1e-9);
            let shift = Point2::new(cx - ub.cx, cy - ub.cy);
            let placed = AxisBox {
                cx,
                cy,
                w: ub.w + 2.0 * MARGIN,
                h: ub.h + 2.0 * MARGIN,
            };
            if occupied.iter().all(|o| box_iou(o, &placed) == 0.0) {
                occupied.push(placed);
                instances.extend(members.iter().map(|m| m.translated(shift)));
                break;
            }
        }
    }
    Scene {
        width: w,
        height: h,
        ignore: vec![false; instances.len()],
        instances,
    }
}

/// Deterministic scene list; scene `i` uses `derive_seed(rng_seed, i)` so the
/// output does not depend on worker count.
pub fn gen_scenes(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| gen_scene(cfg, derive_seed(cfg.rng_seed, i as u64)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Relative center/size noise bound.
    pub jitter: f64,
    pub per_instance: usize,
    pub negatives_per_scene: usize,
    /// Negatives stay below this IoU with every groundtruth box.
    pub iou_threshold: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            jitter: 0.2,
            per_instance: 8,
            negatives_per_scene: 8,
            iou_threshold: 0.5,
        }
    }
}

/// Jittered groundtruth boxes followed by rejection-sampled negatives.
pub fn gen_proposals(scene: &Scene, cfg: &ProposalConfig, seed: u64) -> Result<Vec<AxisBox<f64>>> {
    let gts = scene.gt_boxes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(gts.len() * cfg.per_instance + cfg.negatives_per_scene);
    let j = cfg.jitter;
    for g in &gts {
        for _ in 0..cfg.per_instance {
            if j == 0.0 {
                out.push(*g);
                continue;
            }
            let mut u = || rng.gen_range(-j..=j);
            let cx = g.cx + u() * g.w;
            let cy = g.cy + u() * g.h;
            let bw = g.w * (1.0 + u());
            let bh = g.h * (1.0 + u());
            out.push(AxisBox::new(cx, cy, bw, bh)?);
        }
    }
    let (w, h) = (scene.width, scene.height);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.negatives_per_scene && attempts < 200 * cfg.negatives_per_scene.max(1) {
        attempts += 1;
        let bw = rng.gen_range(0.08 * w..0.5 * w);
        let bh = rng.gen_range(0.05 * h..0.3 * h);
        let cand = AxisBox {
            cx: rng.gen_range(bw / 2.0..=w - bw / 2.0),
            cy: rng.gen_range(bh / 2.0..=h - bh / 2.0),
            w: bw,
            h: bh,
        };
        if gts.iter().all(|g| box_iou(&cand, g) < cfg.iou_threshold) {
            out.push(cand);
            placed += 1;
        }
    }
    Ok(out)
}

/// ROI feature: coverage of text ribbons on a `grid x grid` lattice over the
/// proposal, row-major from the top-left cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub values: Vec<f64>,
    pub source_proposal: AxisBox<f64>,
}

/// Scene polygons prepared for repeated ROI sampling.
#[derive(Debug, Clone)]
pub struct RoiRasterizer {
    polygons: Vec<(PolygonText<f64>, AxisBox<f64>)>,
}

fn clip_axis(poly: &[Point2<f64>], axis_x: bool, bound: f64, keep_greater: bool) -> Vec<Point2<f64>> {
    let coord = |p: &Point2<f64>| if axis_x { p.x } else { p.y };
    let inside = |p: &Point2<f64>| if keep_greater { coord(p) >= bound } else { coord(p) <= bound };
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 4);
    for i in 0..n {
        let cur = poly[i];
        let prev = poly[(i + n - 1) % n];
        let (ci, pi) = (inside(&cur), inside(&prev));
        if ci != pi {
            let t = (bound - coord(&prev)) / (coord(&cur) - coord(&prev));
            out.push(prev + (cur - prev) * t);
        }
        if ci {
            out.push(cur);
        }
    }
    out
}

/// Part of `poly` inside the rectangle; exact area for any simple polygon.
fn clip_to_rect(poly: &[Point2<f64>], x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point2<f64>> {
    let mut v = clip_axis(poly, true, x0, true);
    v = clip_axis(&v, true, x1, false);
    v = clip_axis(&v, false, y0, true);
    clip_axis(&v, false, y1, false)
}

fn signed_area(v: &[Point2<f64>]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i].x * v[(i + 1) % n].y - v[(i + 1) % n].x * v[i].y).sum::<f64>() / 2.0
}

impl RoiRasterizer {
    pub fn new(scene: &Scene) -> Result<Self> {
        let polygons = scene
            .instances
            .iter()
            .map(|bt| {
                let poly = bt.to_polygon(RASTER_SAMPLES_PER_SIDE)?;
                let bb = poly.bbox()?;
                Ok((poly, bb))
            })
            .collect::<Result<_>>()?;
        Ok(Self { polygons })
    }

    /// Anti-aliased coverage: each cell holds the exact covered area fraction,
    /// summed over ribbons and capped at 1.
    pub fn rasterize(&self, proposal: &AxisBox<f64>, grid: usize) -> Result<RoiFeature> {
        proposal.validate()?;
        if grid == 0 {
            return Err(Error::InvalidArgument("grid must be positive".into()));
        }
        let mut values = vec![0.0; grid * grid];
        let cw = proposal.w / grid as f64;
        let ch = proposal.h / grid as f64;
        let cell_area = cw * ch;
        for (poly, bb) in &self.polygons {
            if box_iou(bb, proposal) == 0.0 {
                continue;
            }
            let local = clip_to_rect(&poly.vertices, proposal.x0(), proposal.y0(), proposal.x1(), proposal.y1());
            if local.len() < 3 {
                continue;
            }
            for r in 0..grid {
                let y0 = proposal.y0() + r as f64 * ch;
                let strip = clip_to_rect(&local, proposal.x0(), y0, proposal.x1(), y0 + ch);
                if strip.len() < 3 {
                    continue;
                }
                for c in 0..grid {
                    let x0 = proposal.x0() + c as f64 * cw;
                    let cell = clip_to_rect(&strip, x0, y0, x0 + cw, y0 + ch);
                    if cell.len() >= 3 {
                        values[r * grid + c] += signed_area(&cell).abs() / cell_area;
                    }
                }
            }
        }
        values.iter_mut().for_each(|v| *v = v.min(1.0));
        Ok(RoiFeature {
            values,
            source_proposal: *proposal,
        })
    }
}

pub fn rasterize_roi(scene: &Scene, proposal: &AxisBox<f64>, grid: usize) -> Result<RoiFeature> {
    RoiRasterizer::new(scene)?.rasterize(proposal, grid)
}

/// Rigid rotation of one scene about its center; the canvas grows to the
/// rotated image rectangle so nothing is clipped.
pub fn rotate_scene(scene: &Scene, angle_deg: f64) -> Scene {
    if angle_deg == 0.0 {
        return scene.clone();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (w, h) = (scene.width, scene.height);
    let nw = (w * c).abs() + (h * s).abs();
    let nh = (w * s).abs() + (h * c).abs();
    let center = Point2::new(w / 2.0, h / 2.0);
    let shift = Point2::new(nw / 2.0, nh / 2.0) - center;
    Scene {
        width: nw,
        height: nh,
        instances: scene
            .instances
            .iter()
            .map(|bt| bt.rotated(angle_deg, center).translated(shift))
            .collect(),
        ignore: scene.ignore.clone(),
    }
}

pub fn rotate_dataset(scenes: &[Scene], angle_deg: f64) -> Vec<Scene> {
    scenes.iter().map(|s| rotate_scene(s, angle_deg)).collect()
}

/// Rotates every scene by its own angle drawn uniformly from `range_deg`.
pub fn augment_rotation(scenes: &[Scene], range_deg: (f64, f64), seed: u64) -> Vec<Scene> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            rotate_scene(s, uniform(&mut rng, range_deg))
        })
        .collect()
}

/// Instances whose box overlaps another instance's box with IoU above
/// `min_iou`.
pub fn nearby_mask(scene: &Scene, min_iou: f64) -> Result<Vec<bool>> {
    let boxes = scene.gt_boxes()?;
    Ok((0..boxes.len())
        .map(|i| (0..boxes.len()).any(|j| j != i && box_iou(&boxes[i], &boxes[j]) > min_iou))
        .collect())
}

/// IoU above which two instances count as nearby.
pub const NEARBY_MIN_IOU: f64 = 0.1;

/// Fraction of proposals whose IoU exceeds `theta` for at least two
/// groundtruth boxes.
pub fn multi_match_fraction(scene_proposals: &[(Vec<AxisBox<f64>>, Vec<AxisBox<f64>>)], theta: f64) -> f64 {
    let mut total = 0usize;
    let mut multi = 0usize;
    for (props, gts) in scene_proposals {
        for p in props {
            total += 1;
            if gts.iter().filter(|g| box_iou(p, g) > theta).count() >= 2 {
                multi += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        multi as f64 / total as f64
    }
}
