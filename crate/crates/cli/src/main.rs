use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use gc4dgs::consistency::{build_masks, check_consistency, fuse_point_cloud, ConsistencyConfig, FusionConfig};
use gc4dgs::dataset::{slot_name, Dataset};
use gc4dgs::image::{is_valid_depth, Mask, RgbImage};
use gc4dgs::io;
use gc4dgs::raster::{render_field, OverflowPolicy, RenderConfig};
use gc4dgs::synth::{frame_time, generate_scene, SceneSpec};
use gc4dgs::train::{ablate, ablation_csv, ablation_markdown, evaluate, evaluate_images, initialize, train, InitStrategy, TrainConfig, TrainingData};

const MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(name = "gc4d", version, about = "Geometry-consistent 4D Gaussian splatting on synthetic multi-view video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random draw of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON file overriding the built-in defaults; flags override it in turn.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Fuse frame-0 metric depth of the training views into a PLY point cloud.
    Fuse(FuseArgs),
    /// Run dynamic consistency checking and write masks, scores, a fused cloud and a report.
    Check(CheckArgs),
    /// Train a 4D Gaussian field.
    Train(TrainArgs),
    /// Render one view of a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint (or a directory of images) against a dataset.
    Eval(EvalArgs),
    /// Train the seven ablation configurations and tabulate held-out metrics.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Reference,
    Planes,
}

impl Preset {
    fn spec(self) -> SceneSpec {
        match self {
            Preset::Reference => SceneSpec::reference(),
            Preset::Planes => SceneSpec::planes(),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "reference")]
    preset: Preset,
    /// Training views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Focal length in pixels.
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long)]
    gaussians: Option<usize>,
    /// Multiplicative MVS depth noise.
    #[arg(long)]
    sigma_d: Option<f64>,
    /// Fraction of MVS outlier pixels.
    #[arg(long)]
    outlier_rate: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Default)]
struct ThresholdArgs {
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    prob_threshold: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    voxel: Option<f64>,
    #[arg(long)]
    max_points: Option<usize>,
}

#[derive(Args)]
struct FuseArgs {
    /// Dataset directory.
    dataset: PathBuf,
    /// Fuse every valid pixel instead of the consistency-checked ones.
    #[arg(long)]
    unmasked: bool,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CheckArgs {
    dataset: PathBuf,
    /// Fail when any mask comes out empty.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    FusedDownsampled,
    FusedMasked,
}

#[derive(Args)]
struct TrainArgs {
    dataset: PathBuf,
    /// Optimisation steps; 0 writes the initial field.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long)]
    lambda_rank: Option<f64>,
    #[arg(long)]
    lambda_patch: Option<f64>,
    #[arg(long)]
    lambda_struct: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    /// Dataset whose camera rig is rendered.
    #[arg(long)]
    dataset: PathBuf,
    /// View id as listed in scene.json.
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Also write the rendered depth as PFM.
    #[arg(long)]
    depth: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Heldout,
    Training,
    All,
}

#[derive(Args)]
struct EvalArgs {
    dataset: PathBuf,
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    checkpoint: Option<PathBuf>,
    /// Directory of `rgb_tTTTT_vVV.png` renders to score instead of a checkpoint.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "heldout")]
    split: Split,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory; without it a synthetic preset is generated.
    #[arg(long, conflicts_with = "preset")]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    common: Common,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults < JSON file`; flags are applied by the caller afterwards.
fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(defaults)?)?);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut value = serde_json::to_value(defaults)?;
    merge(&mut value, over);
    serde_json::from_value(value).with_context(|| format!("applying {}", path.display()))
}

fn print_config<T: Serialize>(command: &str, config: &T) -> Result<()> {
    eprintln!("{command}: effective config {}", serde_json::to_string(config)?);
    Ok(())
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, seed: u64, config: &T, outputs: &[String]) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "outputs": outputs,
    });
    io::write_json(&out.join(MANIFEST), &manifest)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Sorted file names under `dir`, recursively, excluding the manifest.
fn listing(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, acc)?;
            } else {
                let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
                if rel != MANIFEST {
                    acc.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(dir, dir, &mut acc)?;
    acc.sort();
    Ok(acc)
}

fn load(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let c = &args.common;
    let mut spec = layered(&args.preset.spec(), c.config.as_deref())?;
    if let Some(v) = c.seed {
        spec.seed = v;
    }
    if let Some(v) = args.views {
        spec.num_views = v;
    }
    if let Some(v) = args.heldout {
        spec.num_heldout = v;
    }
    if let Some(v) = args.frames {
        spec.num_frames = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    if let Some(v) = args.focal {
        spec.focal = v;
    }
    if let Some(v) = args.gaussians {
        spec.num_gaussians = v;
    }
    if let Some(v) = args.sigma_d {
        spec.mvs.sigma_d = v;
    }
    if let Some(v) = args.outlier_rate {
        spec.mvs.outlier_rate = v;
    }
    print_config("synth", &spec)?;
    spec.validate()?;
    let scene = generate_scene(&spec)?;
    scene.dataset.save(&c.out)?;
    let outputs = listing(&c.out)?;
    write_manifest(&c.out, "synth", spec.seed, &spec, &outputs)?;
    println!(
        "wrote {} files to {} ({} training + {} held-out views, {} frames)",
        outputs.len(),
        c.out.display(),
        scene.dataset.meta.training_views.len(),
        scene.dataset.meta.heldout_views.len(),
        scene.dataset.num_frames()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
struct CheckConfig {
    consistency: ConsistencyConfig,
    fusion: FusionConfig,
}

fn check_config(common: &Common, t: &ThresholdArgs) -> Result<CheckConfig> {
    let mut cfg = layered(&CheckConfig::default(), common.config.as_deref())?;
    if let Some(v) = common.seed {
        cfg.fusion.seed = v;
    }
    if let Some(v) = t.score_threshold {
        cfg.consistency.score_threshold = v;
    }
    if let Some(v) = t.prob_threshold {
        cfg.consistency.prob_threshold = v;
    }
    if let Some(v) = t.beta {
        cfg.consistency.beta = v;
    }
    if let Some(v) = t.voxel {
        cfg.fusion.voxel_size = v;
    }
    if let Some(v) = t.max_points {
        cfg.fusion.max_points = v;
    }
    Ok(cfg)
}

/// Frame-0 masks of the training views; masks are stored frame-major.
fn frame0_inputs(dataset: &Dataset, masks: &[Mask]) -> Vec<Mask> {
    masks[..dataset.meta.training_views.len()].to_vec()
}

fn fuse(args: FuseArgs) -> Result<()> {
    let cfg = check_config(&args.common, &args.thresholds)?;
    print_config("fuse", &cfg)?;
    let dataset = load(&args.dataset)?;
    let data = TrainingData::prepare(&dataset, &cfg.consistency)?;
    let mvs = dataset.mvs.subset(&data.positions);
    let masks = if args.unmasked {
        build_masks(&data.masks.scores, &mvs, f64::NEG_INFINITY, f64::NEG_INFINITY)
    } else {
        data.masks.clone()
    };
    let frame0 = frame0_inputs(&dataset, &masks.masks);
    let images: Vec<RgbImage> = data.positions.iter().map(|&n| dataset.image(0, n).clone()).collect();
    let cloud = fuse_point_cloud(&mvs, &frame0, &images, &data.rig, &cfg.fusion)?;
    create_dir(&args.common.out)?;
    io::write_ply(&args.common.out.join("fused.ply"), &cloud)?;
    write_manifest(&args.common.out, "fuse", cfg.fusion.seed, &cfg, &listing(&args.common.out)?)?;
    println!("fused {} points into {}", cloud.len(), args.common.out.join("fused.ply").display());
    Ok(())
}

/// Returns whether every mask is non-empty.
fn check(args: CheckArgs) -> Result<bool> {
    let cfg = check_config(&args.common, &args.thresholds)?;
    print_config("check", &cfg)?;
    let dataset = load(&args.dataset)?;
    let out = &args.common.out;
    create_dir(out)?;
    let positions = dataset.training_positions();
    let rig = dataset.rig.subset(&dataset.meta.training_views)?;
    let mvs = dataset.mvs.subset(&positions);
    let result = check_consistency(&mvs, &rig, &cfg.consistency)?;
    let views = &dataset.meta.training_views;
    for (i, &v) in views.iter().enumerate() {
        io::write_pfm(&out.join(format!("score_v{v:02}.pfm")), &result.scores[i])?;
        for t in 0..dataset.num_frames() {
            io::write_mask_png(&out.join(slot_name("mask", t, v, "png")), result.get(t, i))?;
        }
    }
    let kept = result.kept_fraction();
    let empty: Vec<(usize, usize)> = (0..dataset.num_frames())
        .flat_map(|t| (0..views.len()).map(move |i| (t, i)))
        .filter(|&(t, i)| !result.get(t, i).as_slice().iter().any(|m| *m))
        .map(|(t, i)| (t, views[i]))
        .collect();
    let frame0 = frame0_inputs(&dataset, &result.masks);
    let images: Vec<RgbImage> = positions.iter().map(|&n| dataset.image(0, n).clone()).collect();
    let fused_points = match fuse_point_cloud(&mvs, &frame0, &images, &rig, &cfg.fusion) {
        Ok(cloud) => {
            io::write_ply(&out.join("fused.ply"), &cloud)?;
            Some(cloud.len())
        }
        Err(e) => {
            eprintln!("warning: {e}");
            None
        }
    };
    let gt = dataset.depth_gt.as_ref().map(|gt| {
        let gt = gt.subset(&positions);
        let (mut outliers, mut rejected, mut inliers, mut retained) = (0usize, 0usize, 0usize, 0usize);
        for t in 0..dataset.num_frames() {
            for i in 0..views.len() {
                let (d, g, m) = (mvs.get(t, i), gt.get(t, i), result.get(t, i));
                for ((d, g), m) in d.as_slice().iter().zip(g.as_slice()).zip(m.as_slice()) {
                    if !(is_valid_depth(*d) && is_valid_depth(*g)) {
                        continue;
                    }
                    if (d / g - 1.0).abs() > 0.1 {
                        outliers += 1;
                        rejected += usize::from(!*m);
                    } else {
                        inliers += 1;
                        retained += usize::from(*m);
                    }
                }
            }
        }
        json!({
            "outlier_definition": "relative error against ground-truth depth above 0.1",
            "outlier_pixels": outliers,
            "outlier_rejected_fraction": rejected as f64 / outliers.max(1) as f64,
            "inlier_pixels": inliers,
            "inlier_retained_fraction": retained as f64 / inliers.max(1) as f64,
        })
    });
    let report = json!({
        "views": views.iter().zip(&kept).map(|(v, k)| json!({"view": v, "kept_fraction": k})).collect::<Vec<_>>(),
        "mean_kept_fraction": kept.iter().sum::<f64>() / kept.len().max(1) as f64,
        "empty_masks": empty.iter().map(|(t, v)| json!({"frame": t, "view": v})).collect::<Vec<_>>(),
        "fused_points": fused_points,
        "ground_truth": gt,
    });
    io::write_json(&out.join("report.json"), &report)?;
    write_manifest(out, "check", cfg.fusion.seed, &cfg, &listing(out)?)?;
    for (v, k) in views.iter().zip(&kept) {
        println!("view {v:2}: kept {:.2}%", 100.0 * k);
    }
    if !empty.is_empty() {
        eprintln!("warning: {} of {} masks are empty", empty.len(), dataset.num_frames() * views.len());
    }
    Ok(empty.is_empty())
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = layered(&TrainConfig::default(), common.config.as_deref())?;
    if let Some(v) = common.seed {
        cfg.seed = v;
        cfg.fusion.seed = v;
    }
    Ok(cfg)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = train_config(&args.common)?;
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.init {
        cfg.init.strategy = match v {
            InitArg::Random => InitStrategy::Random,
            InitArg::FusedDownsampled => InitStrategy::FusedDownsampled,
            InitArg::FusedMasked => InitStrategy::FusedMasked,
        };
    }
    if let Some(v) = args.lambda_rank {
        cfg.weights.rank = v;
    }
    if let Some(v) = args.lambda_patch {
        cfg.weights.patch = v;
    }
    if let Some(v) = args.lambda_struct {
        cfg.weights.structure = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    print_config("train", &cfg)?;
    cfg.validate()?;
    let dataset = load(&args.dataset)?;
    let out = &args.common.out;
    create_dir(out)?;
    let data = TrainingData::prepare(&dataset, &cfg.consistency)?;
    let init = initialize(&dataset, &data, &cfg)?;
    let initial = init.len();
    let result = train(&dataset, &data, init, &cfg, Some(out))?;
    write_manifest(out, "train", cfg.seed, &cfg, &listing(out)?)?;
    match result.log.last() {
        Some(last) => println!(
            "{} iterations: {} -> {} Gaussians, last training PSNR {:.3} dB",
            cfg.iterations,
            initial,
            last.num_gaussians,
            last.psnr
        ),
        None => println!("0 iterations: wrote the initial field ({initial} Gaussians)"),
    }
    Ok(())
}

/// Rendering for inspection drops overflowing fragments instead of failing.
fn display_render() -> RenderConfig {
    RenderConfig { overflow: OverflowPolicy::DropFarthest, ..RenderConfig::default() }
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let cfg = layered(&display_render(), args.common.config.as_deref())?;
    print_config("render", &cfg)?;
    let dataset = load(&args.dataset)?;
    let field = io::read_checkpoint(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let Some(n) = dataset.rig.position_of(args.view) else {
        bail!("view {} is not in the rig", args.view);
    };
    let nf = dataset.num_frames();
    if args.frame >= nf {
        bail!("frame {} out of range (the clip has {nf} frames)", args.frame);
    }
    let out = &args.common.out;
    create_dir(out)?;
    let cam = dataset.rig.get(args.frame, n);
    let rendered = render_field(&field, cam, frame_time(args.frame, nf), &cfg)?;
    io::write_rgb_png(&out.join(slot_name("rgb", args.frame, args.view, "png")), &rendered.output.color)?;
    if args.depth {
        io::write_pfm(&out.join(slot_name("depth", args.frame, args.view, "pfm")), &rendered.output.depth)?;
    }
    write_manifest(out, "render", args.common.seed.unwrap_or(0), &cfg, &listing(out)?)?;
    println!("rendered frame {} of view {} into {}", args.frame, args.view, out.display());
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let cfg = layered(&display_render(), args.common.config.as_deref())?;
    print_config("eval", &cfg)?;
    let dataset = load(&args.dataset)?;
    let positions = match args.split {
        Split::Heldout => dataset.heldout_positions(),
        Split::Training => dataset.training_positions(),
        Split::All => (0..dataset.rig.num_views()).collect(),
    };
    if positions.is_empty() {
        bail!("the selected split has no views");
    }
    let report = match (&args.checkpoint, &args.images) {
        (Some(ckpt), _) => {
            let field = io::read_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            evaluate(&field, &dataset, &positions, &cfg)?
        }
        (None, Some(dir)) => evaluate_images(&dataset, &positions, |t, n| {
            io::read_rgb_png(&dir.join(slot_name("rgb", t, dataset.rig.get(t, n).view, "png")))
        })?,
        (None, None) => bail!("pass --checkpoint or --images"),
    };
    let out = &args.common.out;
    create_dir(out)?;
    std::fs::write(out.join("eval.csv"), report.to_csv()).context("writing eval.csv")?;
    write_manifest(out, "eval", args.common.seed.unwrap_or(0), &cfg, &listing(out)?)?;
    println!("{:>6} {:>9} {:>7} {:>7}", "view", "PSNR", "SSIM", "AVGE-2");
    for r in &report.rows {
        println!("{:>6} {:>9.3} {:>7.4} {:>7.4}", r.view, r.metrics.psnr, r.metrics.ssim, r.metrics.avge2);
    }
    let m = report.mean;
    println!("{:>6} {:>9.3} {:>7.4} {:>7.4}", "mean", m.psnr, m.ssim, m.avge2);
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let mut cfg = train_config(&args.common)?;
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    print_config("ablate", &cfg)?;
    cfg.validate()?;
    let dataset = match &args.dataset {
        Some(dir) => load(dir)?,
        None => {
            let mut spec = args.preset.unwrap_or(Preset::Reference).spec();
            if let Some(v) = args.common.seed {
                spec.seed = v;
            }
            generate_scene(&spec)?.dataset
        }
    };
    let rows = ablate(&dataset, &cfg, |row| {
        eprintln!("{:>13}: held-out PSNR {:.3} dB ({} Gaussians)", row.name, row.heldout.psnr, row.final_gaussians);
    })?;
    let out = &args.common.out;
    create_dir(out)?;
    let table = ablation_markdown(&rows);
    std::fs::write(out.join("ablation.md"), &table).context("writing ablation.md")?;
    std::fs::write(out.join("ablation.csv"), ablation_csv(&rows)).context("writing ablation.csv")?;
    write_manifest(out, "ablate", cfg.seed, &cfg, &listing(out)?)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = match &cli.command {
        Command::Synth(a) => &a.common,
        Command::Fuse(a) => &a.common,
        Command::Check(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Render(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Ablate(a) => &a.common,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Command::Fuse(a) => fuse(a).map(|_| ExitCode::SUCCESS),
        Command::Check(a) => {
            let strict = a.strict;
            let complete = check(a)?;
            Ok(if complete || !strict { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Train(a) => train_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Render(a) => render_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Ablate(a) => ablate_cmd(a).map(|_| ExitCode::SUCCESS),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
