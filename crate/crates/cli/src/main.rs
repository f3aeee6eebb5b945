use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use curvetext::bench::{detect, prepare, run_bench, BenchConfig, Prepared};
use curvetext::eval::{evaluate, EvalReport};
use curvetext::geometry::{fit_bezier_side, max_deviation, polygon_to_bezier, BezierText, Point2};
use curvetext::gradcheck;
use curvetext::head::PfamMode;
use curvetext::io;
use curvetext::synthdata::{gen_proposals, gen_scenes, multi_match_fraction, rotate_dataset, derive_seed, Scene};
use curvetext::train::{train_head, Scheme, TrainingSet};

const SCENES_FILE: &str = "scenes.jsonl";
const PROPOSALS_FILE: &str = "proposals.jsonl";

/// Curved-text detection toolkit: synthetic data, Bezier fitting, head
/// training, evaluation, gradient checks and the ablation benchmark.
#[derive(Parser, Debug)]
#[command(name = "curvetext", version)]
struct Cli {
    /// TOML settings file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes and proposals as JSONL.
    Gen(GenArgs),
    /// Fit Bezier sides to annotation polygons and report residuals.
    Fit(FitArgs),
    /// Train a detection head; writes a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Score detections (from a checkpoint or a file) against scenes.
    Eval(EvalArgs),
    /// Run every finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Draw scenes and detections as SVG, one file per scene.
    Render(RenderArgs),
    /// Run the ablation grid and report median P/R/F.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Master seed for scenes and proposals.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Probability that a placed ribbon gets a nearby twin.
    #[arg(long)]
    pair_probability: Option<f64>,
    /// Edge-to-edge gap between twins, pixels.
    #[arg(long)]
    pair_gap: Option<f64>,
    /// Relative proposal jitter.
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AnnotationFormat {
    Ctw1500,
    Icdar15,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Annotation file, one polygon per line.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = AnnotationFormat::Ctw1500)]
    format: AnnotationFormat,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory holding scenes.jsonl and proposals.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Training scheme: one_to_one or omts.
    #[arg(long)]
    scheme: Option<String>,
    /// Attention gates: none, 1fc or 2fc.
    #[arg(long)]
    pfam: Option<String>,
    /// Number of prediction branches.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; the loss log goes next to it with a .loss.csv suffix.
    #[arg(long)]
    out: PathBuf,
    /// Loss log path, overriding the default next to the checkpoint.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory holding scenes.jsonl (and proposals.jsonl for --checkpoint).
    #[arg(long)]
    data: PathBuf,
    /// Trained head to run on the scenes.
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    checkpoint: Option<PathBuf>,
    /// Detections JSONL to score instead of running a head.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// IoU needed for a match.
    #[arg(long)]
    iou: Option<f64>,
    /// Rotate the scenes by 0, 30, 45 or 60 degrees first. With --checkpoint
    /// fresh proposals are drawn for the rotated scenes.
    #[arg(long, default_value_t = 0)]
    rotate: u32,
    /// Seed for proposals on rotated scenes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the detections produced by --checkpoint here.
    #[arg(long)]
    save_detections: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest layer width drawn.
    #[arg(long, default_value_t = 32)]
    dims: usize,
    /// Random draws per suite.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Directory holding scenes.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Detections JSONL to overlay.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Output directory for scene_NNNN.svg files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Seeds per grid cell.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Skip the rotated-evaluation protocol.
    #[arg(long)]
    no_rotation: bool,
    /// Report JSON path; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a check, as opposed to bad input.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Invalid flag value caught after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(path: Option<&Path>) -> Result<BenchConfig> {
    let Some(path) = path else {
        return Ok(BenchConfig::default());
    };
    let text = io::read_to_string(path)?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_flag<T: std::str::FromStr>(value: &Option<String>) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .as_deref()
        .map(|v| v.parse::<T>().map_err(|e| Usage(e.to_string()).into()))
        .transpose()
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(io::write_string(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join(SCENES_FILE);
    io::read_jsonl_scenes(&io::read_to_string(&path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_prepared(dir: &Path, grid: usize) -> Result<Prepared> {
    let scenes = load_scenes(dir)?;
    let path = dir.join(PROPOSALS_FILE);
    let proposals = io::read_jsonl_proposals(&io::read_to_string(&path)?).with_context(|| format!("reading {}", path.display()))?;
    if proposals.len() != scenes.len() {
        bail!("{} scenes but {} proposal lines", scenes.len(), proposals.len());
    }
    let features = scenes
        .iter()
        .zip(&proposals)
        .map(|(s, props)| {
            let r = curvetext::synthdata::RoiRasterizer::new(s)?;
            props.iter().map(|p| Ok(r.rasterize(p, grid)?.values)).collect::<curvetext::Result<Vec<_>>>()
        })
        .collect::<curvetext::Result<Vec<_>>>()?;
    Ok(Prepared {
        scenes,
        proposals,
        features,
    })
}

fn cmd_gen(cfg: &mut BenchConfig, a: &GenArgs) -> Result<()> {
    if let Some(v) = a.seed {
        cfg.synth.rng_seed = v;
    }
    if let Some(v) = a.scenes {
        cfg.synth.n_scenes = v;
    }
    if let Some(v) = a.pair_probability {
        cfg.synth.nearby_pair_probability = v;
    }
    if let Some(v) = a.pair_gap {
        cfg.synth.pair_gap = v;
    }
    if let Some(v) = a.jitter {
        cfg.proposals.jitter = v;
    }
    cfg.synth.validate().map_err(|e| Usage(e.to_string()))?;
    let scenes = gen_scenes(&cfg.synth)?;
    let proposals = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| gen_proposals(s, &cfg.proposals, derive_seed(cfg.synth.rng_seed ^ 0x5052_4f50, i as u64)))
        .collect::<curvetext::Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    io::write_string(&a.out.join(SCENES_FILE), &io::write_jsonl_scenes(&scenes))?;
    io::write_string(&a.out.join(PROPOSALS_FILE), &io::write_jsonl_proposals(&proposals))?;
    let pairs = scenes
        .iter()
        .zip(&proposals)
        .map(|(s, p)| Ok((p.clone(), s.gt_boxes()?)))
        .collect::<curvetext::Result<Vec<_>>>()?;
    let n_inst: usize = scenes.iter().map(|s| s.instances.len()).sum();
    let n_props: usize = proposals.iter().map(Vec::len).sum();
    println!(
        "{} scenes, {} instances, {} proposals, {:.2}% matching two or more instances",
        scenes.len(),
        n_inst,
        n_props,
        100.0 * multi_match_fraction(&pairs, cfg.proposals.iou_threshold)
    );
    Ok(())
}

#[derive(Serialize)]
struct FitInstance {
    index: usize,
    top: [[f64; 2]; 4],
    bottom: [[f64; 2]; 4],
    residual_top: f64,
    residual_bottom: f64,
    ignore: bool,
}

#[derive(Serialize)]
struct FitReport {
    instances: Vec<FitInstance>,
    max_residual: f64,
}

fn control(bt: &BezierText<f64>) -> ([[f64; 2]; 4], [[f64; 2]; 4]) {
    (bt.top.control.map(|p| [p.x, p.y]), bt.bottom.control.map(|p| [p.x, p.y]))
}

const RESIDUAL_SAMPLES: usize = 512;

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let text = io::read_to_string(&a.input)?;
    let sides: Vec<(Vec<Point2<f64>>, Vec<Point2<f64>>, bool)> = match a.format {
        AnnotationFormat::Ctw1500 => io::parse_ctw1500(&text)?
            .into_iter()
            .map(|p| {
                let (t, b) = p.vertices.split_at(p.len() / 2);
                (t.to_vec(), b.iter().rev().copied().collect(), false)
            })
            .collect(),
        AnnotationFormat::Icdar15 => io::parse_icdar15(&text)?
            .into_iter()
            .map(|(q, ignore)| (q.vertices[..2].to_vec(), vec![q.vertices[3], q.vertices[2]], ignore))
            .collect(),
    };
    let mut instances = Vec::new();
    for (index, (top, bottom, ignore)) in sides.iter().enumerate() {
        let bt = if top.len() == 2 {
            BezierText::from_quad(&[top[0], top[1], bottom[1], bottom[0]])?
        } else {
            let poly = curvetext::geometry::PolygonText::new(top.iter().chain(bottom.iter().rev()).copied().collect())?;
            polygon_to_bezier(&poly).or_else(|_| -> curvetext::Result<_> {
                BezierText::new(fit_bezier_side(top)?, fit_bezier_side(bottom)?)
            })?
        };
        let (t, b) = control(&bt);
        instances.push(FitInstance {
            index,
            top: t,
            bottom: b,
            residual_top: max_deviation(&bt.top, top, RESIDUAL_SAMPLES),
            residual_bottom: max_deviation(&bt.bottom, bottom, RESIDUAL_SAMPLES),
            ignore: *ignore,
        });
    }
    let max_residual = instances.iter().map(|i| i.residual_top.max(i.residual_bottom)).fold(0.0, f64::max);
    let report = FitReport { instances, max_residual };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_or_print(a.out.as_deref(), &json)?;
    eprintln!("{} instances, max residual {:.6}", report.instances.len(), report.max_residual);
    Ok(())
}

fn cmd_train(cfg: &mut BenchConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(s) = parse_flag::<Scheme>(&a.scheme)? {
        t.scheme = s;
    }
    if let Some(p) = parse_flag::<PfamMode>(&a.pfam)? {
        t.head.pfam_mode = p;
    }
    if let Some(k) = a.k {
        t.head.k = k;
    }
    if let Some(v) = a.iters {
        t.iters = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    t.head.roi_dim = t.grid * t.grid;
    t.validate().map_err(|e| Usage(e.to_string()))?;
    let data = load_prepared(&a.data, t.grid)?;
    let set = TrainingSet::build(&data.scenes, &data.proposals, t.grid, t.iou_threshold, t.head.k, t.scheme)?;
    log::info!("{} training proposals", set.len());
    let out = train_head(t, &set)?;
    io::write_string(&a.out, &io::checkpoint_to_json(&out.head))?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    io::write_string(&csv_path, &io::loss_csv(&out.losses))?;
    if let Some(last) = out.losses.last() {
        println!("trained {} iterations, final loss {:.6}", out.losses.len(), last.total);
    }
    Ok(())
}

fn cmd_eval(cfg: &mut BenchConfig, a: &EvalArgs) -> Result<()> {
    if !matches!(a.rotate, 0 | 30 | 45 | 60) {
        return Err(Usage(format!("--rotate must be 0, 30, 45 or 60, got {}", a.rotate)).into());
    }
    if let Some(v) = a.iou {
        cfg.eval.iou_threshold = v;
    }
    cfg.eval.validate().map_err(|e| Usage(e.to_string()))?;
    let grid = cfg.train.grid;
    let (scenes, dets) = if let Some(ck) = &a.checkpoint {
        let head = io::checkpoint_from_json(&io::read_to_string(ck)?)?;
        let data = if a.rotate == 0 {
            load_prepared(&a.data, grid)?
        } else {
            let rotated = rotate_dataset(&load_scenes(&a.data)?, a.rotate as f64);
            prepare(rotated, &cfg.proposals, grid, a.seed)?
        };
        let (dets, ops) = detect(&head, &data, &cfg.infer)?;
        log::info!("inference: {} MACs, {} element-wise ops", ops.macs, ops.elementwise);
        if let Some(p) = &a.save_detections {
            io::write_string(p, &io::write_jsonl_detections(&dets))?;
        }
        (data.scenes, dets)
    } else {
        let path = a.detections.as_ref().expect("clap requires one source");
        let scenes = rotate_dataset(&load_scenes(&a.data)?, a.rotate as f64);
        (scenes, io::read_jsonl_detections(&io::read_to_string(path)?)?)
    };
    let report: EvalReport = evaluate(&dets, &scenes, &cfg.eval)?;
    if let Some(p) = &a.out {
        io::write_string(p, &(report.to_json() + "\n"))?;
    }
    let label = if a.rotate == 0 { "detections".to_string() } else { format!("rotated {}", a.rotate) };
    print!("{}", report.table(&label));
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_all(a.seed, a.dims, a.seeds);
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<12} {} checked {:>6}  skipped {:>5}  max abs err {:.3e}",
            r.suite,
            if r.passed() { "PASS" } else { "FAIL" },
            r.checked,
            r.skipped,
            r.max_abs_err
        );
        if !r.passed() {
            failed.push(format!("{}: {}", r.suite, r.first_failure.as_deref().unwrap_or("nothing checked")));
        }
    }
    if !failed.is_empty() {
        return Err(CheckFailed(failed.join("; ")).into());
    }
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let dets = a
        .detections
        .as_ref()
        .map(|p| -> Result<_> { Ok(io::read_jsonl_detections(&io::read_to_string(p)?)?) })
        .transpose()?;
    if let Some(d) = dets.as_ref().and_then(|d| d.iter().find(|d| d.scene >= scenes.len())) {
        return Err(curvetext::Error::UnknownScene {
            scene: d.scene,
            n_scenes: scenes.len(),
        }
        .into());
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, s) in scenes.iter().enumerate() {
        let own: Option<Vec<_>> = dets.as_ref().map(|d| d.iter().filter(|d| d.scene == i).cloned().collect());
        io::write_string(&a.out.join(format!("scene_{i:04}.svg")), &io::render_svg(s, own.as_deref()))?;
    }
    println!("wrote {} SVG files", scenes.len());
    Ok(())
}

fn cmd_bench(cfg: &mut BenchConfig, a: &BenchArgs) -> Result<()> {
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = a.train_scenes {
        cfg.train_scenes = v;
    }
    if let Some(v) = a.test_scenes {
        cfg.test_scenes = v;
    }
    if let Some(v) = a.iters {
        cfg.train.iters = v;
    }
    if a.no_rotation {
        cfg.rotation_angles.clear();
    }
    if cfg.seeds == 0 {
        return Err(Usage("--seeds must be positive".into()).into());
    }
    let report = run_bench(cfg)?;
    if let Some(p) = &a.out {
        io::write_string(p, &(report.to_json() + "\n"))?;
    }
    print!("{}", report.table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(&mut cfg, a),
        Command::Fit(a) => cmd_fit(a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Eval(a) => cmd_eval(&mut cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Render(a) => cmd_render(a),
        Command::Bench(a) => cmd_bench(&mut cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else if e.downcast_ref::<CheckFailed>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
