//! Annotation parsers, JSONL interchange, checkpoints, loss logs and SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::SceneDetection;
use crate::geometry::{AxisBox, BezierText, CubicBezier, Point2, PolygonText};
use crate::head::{DetectionHead, HeadConfig};
use crate::nn::Parameters;
use crate::synthdata::Scene;
use crate::train::LossRecord;

/// Vertices per CTW1500 polygon: seven per long side.
pub const CTW1500_VERTICES: usize = 14;

fn format_err(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        line,
        message: message.into(),
    }
}

fn parse_number(tok: &str, line: usize, index: usize) -> Result<f64> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| format_err(line, format!("field {}: {:?} is not a number", index + 1, tok.trim())))?;
    if !v.is_finite() {
        return Err(format_err(line, format!("field {}: non-finite value", index + 1)));
    }
    Ok(v)
}

fn pairs(values: &[f64]) -> Vec<Point2<f64>> {
    values.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect()
}

fn strip_bom(line: &str) -> &str {
    line.strip_prefix('\u{feff}').unwrap_or(line)
}

/// `x1,y1,...,x14,y14`: the top side left to right, then the bottom side
/// right to left. Returns `None` for a blank line.
pub fn parse_ctw1500_line(text: &str, line: usize) -> Result<Option<PolygonText<f64>>> {
    let text = strip_bom(text).trim();
    if text.is_empty() {
        return Ok(None);
    }
    let values = text
        .split(',')
        .enumerate()
        .map(|(i, t)| parse_number(t, line, i))
        .collect::<Result<Vec<_>>>()?;
    if values.len() % 2 != 0 {
        return Err(format_err(line, format!("odd number of coordinates ({})", values.len())));
    }
    if values.len() != 2 * CTW1500_VERTICES {
        return Err(format_err(
            line,
            format!("expected {} coordinates, got {}", 2 * CTW1500_VERTICES, values.len()),
        ));
    }
    PolygonText::new(pairs(&values)).map(Some).map_err(|e| format_err(line, e.to_string()))
}

/// Parses a whole CTW1500 annotation file; blank lines are skipped with a
/// warning. Line numbers are 1-based.
pub fn parse_ctw1500(text: &str) -> Result<Vec<PolygonText<f64>>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        match parse_ctw1500_line(l, i + 1)? {
            Some(p) => out.push(p),
            None => log::warn!("line {}: empty, skipped", i + 1),
        }
    }
    Ok(out)
}

/// `x1,y1,...,x4,y4,transcription`; a transcription of `###` marks the
/// instance as ignored. The transcription may itself contain commas.
pub fn parse_icdar15_line(text: &str, line: usize) -> Result<Option<(PolygonText<f64>, bool)>> {
    let text = strip_bom(text).trim_end_matches(['\r', '\n']);
    if text.trim().is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = text.splitn(9, ',').collect();
    if fields.len() < 9 {
        return Err(format_err(
            line,
            format!("expected 8 coordinates and a transcription, got {} fields", fields.len()),
        ));
    }
    let values = fields[..8]
        .iter()
        .enumerate()
        .map(|(i, t)| parse_number(t, line, i))
        .collect::<Result<Vec<_>>>()?;
    let quad = PolygonText::new(pairs(&values)).map_err(|e| format_err(line, e.to_string()))?;
    Ok(Some((quad, fields[8].trim() == "###")))
}

pub fn parse_icdar15(text: &str) -> Result<Vec<(PolygonText<f64>, bool)>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        match parse_icdar15_line(l, i + 1)? {
            Some(p) => out.push(p),
            None => log::warn!("line {}: empty, skipped", i + 1),
        }
    }
    Ok(out)
}

/// Builds a scene from annotation shapes, dropping (with a warning) any
/// instance whose polygon has less than `min_area` square pixels.
pub fn scene_from_shapes(width: f64, height: f64, shapes: Vec<(BezierText<f64>, bool)>, min_area: f64) -> Result<Scene> {
    let mut instances = Vec::new();
    let mut ignore = Vec::new();
    for (i, (bt, ig)) in shapes.into_iter().enumerate() {
        let area = bt.to_polygon(16)?.area();
        if !(area >= min_area) {
            log::warn!("instance {i}: degenerate (area {area}), skipped");
            continue;
        }
        instances.push(bt);
        ignore.push(ig);
    }
    Ok(Scene {
        width,
        height,
        instances,
        ignore,
    })
}

/// Shortest decimal form that still carries 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_points(s: &mut String, pts: &[Point2<f64>]) {
    s.push('[');
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "[{},{}]", num(p.x), num(p.y));
    }
    s.push(']');
}

fn write_shape(s: &mut String, bt: &BezierText<f64>) {
    s.push_str("\"top\":");
    write_points(s, &bt.top.control);
    s.push_str(",\"bottom\":");
    write_points(s, &bt.bottom.control);
}

pub fn scene_to_json_line(scene: &Scene) -> String {
    let mut s = String::new();
    let _ = write!(s, "{{\"width\":{},\"height\":{},\"instances\":[", num(scene.width), num(scene.height));
    for (i, (bt, ig)) in scene.instances.iter().zip(&scene.ignore).enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push('{');
        write_shape(&mut s, bt);
        let _ = write!(s, ",\"ignore\":{ig}}}");
    }
    s.push_str("]}");
    s
}

pub fn write_jsonl_scenes(scenes: &[Scene]) -> String {
    scenes.iter().map(|s| scene_to_json_line(s) + "\n").collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    top: [[f64; 2]; 4],
    bottom: [[f64; 2]; 4],
    #[serde(default)]
    ignore: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    width: f64,
    height: f64,
    instances: Vec<RawInstance>,
}

fn curve(c: &[[f64; 2]; 4]) -> CubicBezier<f64> {
    CubicBezier {
        control: c.map(|[x, y]| Point2::new(x, y)),
    }
}

fn json_line<T: for<'de> Deserialize<'de>>(text: &str, line: usize) -> Result<T> {
    serde_json::from_str(text).map_err(|e| format_err(line, e.to_string()))
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l))
}

pub fn read_jsonl_scenes(text: &str) -> Result<Vec<Scene>> {
    non_blank_lines(text)
        .map(|(line, l)| {
            let raw: RawScene = json_line(l, line)?;
            if !(raw.width > 0.0 && raw.height > 0.0) {
                return Err(format_err(line, "image size must be positive"));
            }
            let mut instances = Vec::with_capacity(raw.instances.len());
            let mut ignore = Vec::with_capacity(raw.instances.len());
            for inst in &raw.instances {
                let bt = BezierText::new(curve(&inst.top), curve(&inst.bottom)).map_err(|e| format_err(line, e.to_string()))?;
                instances.push(bt);
                ignore.push(inst.ignore);
            }
            Ok(Scene {
                width: raw.width,
                height: raw.height,
                instances,
                ignore,
            })
        })
        .collect()
}

/// One line per scene: `{"scene": i, "proposals": [[cx, cy, w, h], ...]}`.
pub fn write_jsonl_proposals(proposals: &[Vec<AxisBox<f64>>]) -> String {
    let mut s = String::new();
    for (i, props) in proposals.iter().enumerate() {
        let _ = write!(s, "{{\"scene\":{i},\"proposals\":[");
        for (j, p) in props.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "[{},{},{},{}]", num(p.cx), num(p.cy), num(p.w), num(p.h));
        }
        s.push_str("]}\n");
    }
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProposals {
    scene: usize,
    proposals: Vec<[f64; 4]>,
}

/// Inverse of [`write_jsonl_proposals`]; scene indices must run 0, 1, 2, ...
pub fn read_jsonl_proposals(text: &str) -> Result<Vec<Vec<AxisBox<f64>>>> {
    non_blank_lines(text)
        .enumerate()
        .map(|(expected, (line, l))| {
            let raw: RawProposals = json_line(l, line)?;
            if raw.scene != expected {
                return Err(format_err(line, format!("expected scene {expected}, got {}", raw.scene)));
            }
            raw.proposals
                .iter()
                .map(|&[cx, cy, w, h]| AxisBox::new(cx, cy, w, h).map_err(|e| format_err(line, e.to_string())))
                .collect()
        })
        .collect()
}

/// One detection per line: scene index, score and control points.
pub fn write_jsonl_detections(dets: &[SceneDetection]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ = write!(s, "{{\"scene\":{},\"score\":{},", d.scene, num(d.score));
        write_shape(&mut s, &d.shape);
        s.push_str("}\n");
    }
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    scene: usize,
    score: f64,
    top: [[f64; 2]; 4],
    bottom: [[f64; 2]; 4],
}

pub fn read_jsonl_detections(text: &str) -> Result<Vec<SceneDetection>> {
    non_blank_lines(text)
        .map(|(line, l)| {
            let raw: RawDetection = json_line(l, line)?;
            if !raw.score.is_finite() {
                return Err(format_err(line, "score must be finite"));
            }
            Ok(SceneDetection {
                scene: raw.scene,
                score: raw.score,
                shape: BezierText::new(curve(&raw.top), curve(&raw.bottom)).map_err(|e| format_err(line, e.to_string()))?,
            })
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "curvetext-head";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: HeadConfig,
    tensors: Vec<CheckpointTensor>,
}

/// JSON checkpoint: head config plus every named tensor in layout order.
pub fn checkpoint_to_json(head: &DetectionHead<f64>) -> String {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: head.config,
        tensors: head
            .tensors()
            .into_iter()
            .map(|t| CheckpointTensor {
                name: t.name,
                shape: t.shape,
                data: t.data.to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&ck).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_json(text: &str) -> Result<DetectionHead<f64>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let format = value.get("format").and_then(Value::as_str);
    if format != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!("unrecognized format {format:?}")));
    }
    let ck: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
    }
    let mut head = DetectionHead::<f64>::new(ck.config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = head.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if expected.len() != ck.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            ck.tensors.len()
        )));
    }
    for ((name, shape), t) in expected.iter().zip(&ck.tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                t.name, t.shape, name, shape
            )));
        }
        if t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("tensor {} has {} values", t.name, t.data.len())));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {} holds a non-finite value", t.name)));
        }
    }
    for (dst, t) in head.tensors_mut().into_iter().zip(&ck.tensors) {
        dst.copy_from_slice(&t.data);
    }
    Ok(head)
}

pub const LOSS_CSV_HEADER: &str = "iter,cls,reg_box,reg_curve,total,lr";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iter,
            num(r.cls),
            num(r.reg_box),
            num(r.reg_curve),
            num(r.total),
            num(r.lr)
        );
    }
    s
}

pub const GT_STROKE: &str = "#1b9e3a";
pub const IGNORE_STROKE: &str = "#9a9a9a";
pub const DET_STROKE: &str = "#d62728";

fn svg_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn svg_pt(p: &Point2<f64>) -> String {
    format!("{} {}", svg_num(p.x), svg_num(p.y))
}

/// Closed outline with both long sides as native cubic segments.
pub fn svg_path(bt: &BezierText<f64>) -> String {
    let [t0, t1, t2, t3] = bt.top.control;
    let [b0, b1, b2, b3] = bt.bottom.control;
    format!(
        "M {} C {}, {}, {} L {} C {}, {}, {} Z",
        svg_pt(&t0),
        svg_pt(&t1),
        svg_pt(&t2),
        svg_pt(&t3),
        svg_pt(&b3),
        svg_pt(&b2),
        svg_pt(&b1),
        svg_pt(&b0)
    )
}

/// Groundtruth in green (ignored instances grey, dashed) and detections in
/// red with their scores.
pub fn render_svg(scene: &Scene, detections: Option<&[SceneDetection]>) -> String {
    let mut s = String::new();
    let (w, h) = (svg_num(scene.width), svg_num(scene.height));
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>");
    let _ = writeln!(s, "<g id=\"groundtruth\" fill=\"none\" stroke-width=\"1.5\">");
    for (bt, &ig) in scene.instances.iter().zip(&scene.ignore) {
        if ig {
            let _ = writeln!(s, "<path d=\"{}\" stroke=\"{IGNORE_STROKE}\" stroke-dasharray=\"4 2\"/>", svg_path(bt));
        } else {
            let _ = writeln!(s, "<path d=\"{}\" stroke=\"{GT_STROKE}\"/>", svg_path(bt));
        }
    }
    let _ = writeln!(s, "</g>");
    if let Some(dets) = detections {
        let _ = writeln!(s, "<g id=\"detections\" fill=\"none\" stroke=\"{DET_STROKE}\" stroke-width=\"1\">");
        for d in dets {
            let p0 = d.shape.top.control[0];
            let _ = writeln!(s, "<path d=\"{}\"/>", svg_path(&d.shape));
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"8\" fill=\"{DET_STROKE}\" stroke=\"none\">{:.2}</text>",
                svg_num(p0.x),
                svg_num(p0.y - 2.0),
                d.score
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
