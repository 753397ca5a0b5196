use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deblursplat::alignment::{average_focal, estimate_focal_weiszfeld, global_align, view_poses, AlignConfig, Edge, ViewGraph};
use deblursplat::events::{bin_events, edi_decouple, simulate_events, EventStream, DEFAULT_LOG_EPS};
use deblursplat::io::{self, PlyFormat};
use deblursplat::metrics::{ate, psnr_capped, ssim, AteAlignment, MetricReport, TimedPose};
use deblursplat::pipeline::{run_experiment, ExperimentOutcome, InitConfig};
use deblursplat::sampling::{
    center_sample, confidence_balanced_sample, default_voxel_size, random_sample, spatial_sample, SamplingPlan,
};
use deblursplat::splat::rasterize;
use deblursplat::synthetic::{generate_synthetic_dataset, load_dataset, LoadedDataset, SyntheticDatasetSpec};
use deblursplat::training::{loss_log_csv, TrainConfig};
use deblursplat::Image;

/// Event-guided deblurring toolkit for Gaussian splatting.
#[derive(Parser)]
#[command(name = "deblursplat", version)]
struct Cli {
    /// Configuration file (dataset spec for `generate`, training config for `train` and `e2e`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: blurs, sharp latents, events, trajectories, scene and point cloud.
    Generate,
    /// Simulate events from a sequence of sharp frames.
    SimulateEvents(SimulateArgs),
    /// Recover latent sharp frames from a blurred frame and its events.
    Decouple(DecoupleArgs),
    /// Select seed points from a confidence point cloud.
    Sample(SampleArgs),
    /// Estimate focal length, edge scales and view poses from pairwise pointmaps.
    Align(AlignArgs),
    /// Train Gaussians and trajectories on a dataset.
    Train(TrainArgs),
    /// Report PSNR, SSIM and ATE.
    Evaluate(EvaluateArgs),
    /// Generate, decouple, sample, train and evaluate in one run.
    E2e(E2eArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory of frames (PFM or PNG, sorted by file name), one per timestamp.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 0.27)]
    theta: f64,
    /// Exposure length; frame k sits at k * exposure / (frames - 1).
    #[arg(long, default_value_t = 10_000)]
    exposure_us: u64,
    #[arg(long, default_value_t = DEFAULT_LOG_EPS)]
    log_eps: f64,
}

#[derive(Args)]
struct DecoupleArgs {
    /// Blurred frame (PFM or PNG).
    #[arg(long)]
    blur: PathBuf,
    /// Events (`.bin` or `.csv`).
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = 10)]
    u: usize,
    #[arg(long, default_value_t = 0.27)]
    theta: f64,
    #[arg(long, default_value_t = 0)]
    t_start_us: u64,
    #[arg(long, default_value_t = 10_000)]
    t_end_us: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Cbs,
    Random,
    Spatial,
    Center,
}

#[derive(Args)]
struct SampleArgs {
    /// Point cloud PLY with a confidence property.
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Cbs)]
    strategy: Strategy,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 40)]
    intervals: usize,
    /// Voxel edge for spatial sampling (defaults to a size derived from the cloud).
    #[arg(long)]
    voxel: Option<f64>,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct AlignArgs {
    /// Directory of pointmaps (`<stem>.pts.pfm`, `<stem>.conf.pfm`, `<stem>.txt`).
    #[arg(long)]
    pointmaps: PathBuf,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
}

#[derive(Args)]
struct InitArgs {
    /// Seed points drawn from the cloud.
    #[arg(long, default_value_t = 500)]
    points: usize,
    #[arg(long, default_value_t = 40)]
    intervals: usize,
    #[arg(long, default_value_t = 0.5)]
    init_opacity: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory as written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    init: InitArgs,
    /// Override the iteration count of the config.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory (TUM).
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Reference trajectory (TUM); defaults to the dataset ground truth with `--data`.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Alignment::Similarity)]
    alignment: Alignment,
    /// Rendered or restored image to score.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    reference_image: Option<PathBuf>,
    /// Dataset directory; with `--scene` and `--estimate`, renders every latent pose and scores it against the sharp frame.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "evaluation")]
    label: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alignment {
    None,
    Rigid,
    Similarity,
}

impl From<Alignment> for AteAlignment {
    fn from(a: Alignment) -> Self {
        match a {
            Alignment::None => AteAlignment::None,
            Alignment::Rigid => AteAlignment::Rigid,
            Alignment::Similarity => AteAlignment::Similarity,
        }
    }
}

#[derive(Args)]
struct E2eArgs {
    /// Dataset spec; defaults to the built-in desk scene.
    #[arg(long)]
    dataset_config: Option<PathBuf>,
    #[command(flatten)]
    init: InitArgs,
    /// Override the iteration count of the config.
    #[arg(long)]
    iters: Option<usize>,
    /// Also train without the event loss and report both rows.
    #[arg(long)]
    baseline: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Generate => generate(&cli),
        Command::SimulateEvents(a) => simulate(&cli, a),
        Command::Decouple(a) => decouple(&cli, a),
        Command::Sample(a) => sample(&cli, a),
        Command::Align(a) => align(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::E2e(a) => e2e(&cli, a),
    }
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn read_image(path: &Path) -> Result<Image> {
    let img = match extension(path).as_str() {
        "png" => io::read_png(path)?,
        "pfm" => io::read_pfm(path)?,
        other => bail!("unsupported image extension {other:?} for {}", path.display()),
    };
    Ok(img)
}

fn dataset_spec(path: Option<&Path>, seed: Option<u64>) -> Result<SyntheticDatasetSpec> {
    let mut spec = match path {
        Some(p) => SyntheticDatasetSpec::parse(&io::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => SyntheticDatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn train_config(cli: &Cli, iters: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = iters {
        cfg.iters = n;
    }
    Ok(cfg)
}

fn init_config(cli: &Cli, a: &InitArgs) -> InitConfig {
    InitConfig { points: a.points, intervals: a.intervals, opacity: a.init_opacity, seed: cli.seed.unwrap_or(0) }
}

fn generate(cli: &Cli) -> Result<()> {
    let spec = dataset_spec(cli.config.as_deref(), cli.seed)?;
    let out = out_or(cli, "dataset");
    let d = generate_synthetic_dataset(&spec, &out)?;
    let events: usize = d.views.iter().map(|v| v.events.events.len()).sum();
    println!(
        "wrote {} views of {}x{} with u = {}, {} events, {} Gaussians and {} cloud points to {}",
        spec.views,
        spec.width,
        spec.height,
        spec.u,
        events,
        d.scene.gaussians.len(),
        d.cloud.len(),
        out.display()
    );
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.frames)
        .with_context(|| format!("listing {}", a.frames.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(extension(p).as_str(), "pfm" | "png"));
    paths.sort();
    if paths.len() < 2 {
        bail!("need at least two frames in {}", a.frames.display());
    }
    let frames = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    let n = (frames.len() - 1) as u64;
    let stamps: Vec<u64> = (0..=n).map(|k| (k as u128 * a.exposure_us as u128 / n as u128) as u64).collect();
    let stream = simulate_events(&frames, &stamps, a.theta, a.log_eps)?;
    let out = out_or(cli, "events.bin");
    write_events(&out, &stream)?;
    println!("{} frames -> {} events (net polarity {}) in {}", frames.len(), stream.events.len(), stream.polarity_sum(), out.display());
    Ok(())
}

fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    if extension(path) == "csv" {
        io::write_events_csv(path, &stream.events)?;
    } else {
        io::write_events_bin(path, stream.width as u16, stream.height as u16, &stream.events)?;
    }
    Ok(())
}

fn decouple(cli: &Cli, a: &DecoupleArgs) -> Result<()> {
    let blur = read_image(&a.blur)?;
    let events = if extension(&a.events) == "csv" {
        io::read_events_csv(&a.events)?
    } else {
        let f = io::read_events_bin(&a.events)?;
        if (f.width as usize, f.height as usize) != (blur.width(), blur.height()) {
            bail!("events are {}x{} but the blur is {}x{}", f.width, f.height, blur.width(), blur.height());
        }
        f.events
    };
    let stream = EventStream::new(blur.width(), blur.height(), a.t_start_us, a.t_end_us, events)?;
    let bins = bin_events(&stream, a.u)?;
    let dec = edi_decouple(&blur, &bins, a.theta)?;
    let out = out_or(cli, "latents");
    for (k, img) in dec.all_frames().iter().enumerate() {
        io::write_pfm(out.join(format!("latent_{k:02}.pfm")), img)?;
    }
    println!("wrote {} latent frames to {}", a.u + 1, out.display());
    Ok(())
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let cloud = io::read_point_cloud_ply(&a.cloud)?;
    let seed = cli.seed.unwrap_or(0);
    let indices = match a.strategy {
        Strategy::Cbs => confidence_balanced_sample(&cloud, &SamplingPlan::new(a.count, a.intervals, seed)?)?,
        Strategy::Random => random_sample(&cloud, a.count, seed)?,
        Strategy::Spatial => spatial_sample(&cloud, a.count, a.voxel.unwrap_or_else(|| default_voxel_size(&cloud)))?,
        Strategy::Center => center_sample(&cloud, a.count, seed)?,
    };
    let out = out_or(cli, "sampled.ply");
    let format = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    io::write_point_cloud_ply(&out, &cloud.subset(&indices), format)?;
    println!("selected {} of {} points into {}", indices.len(), cloud.len(), out.display());
    Ok(())
}

fn align(cli: &Cli, a: &AlignArgs) -> Result<()> {
    let mut stems: Vec<PathBuf> = fs::read_dir(&a.pointmaps)
        .with_context(|| format!("listing {}", a.pointmaps.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| extension(p) == "txt")
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    let mut pairs: BTreeMap<(usize, usize), (Option<_>, Option<_>)> = BTreeMap::new();
    for stem in &stems {
        let r = io::read_pointmap(stem)?;
        let slot = pairs.entry((r.edge_n, r.edge_m)).or_default();
        if r.view == r.edge_n {
            slot.0 = Some(r.map);
        } else if r.view == r.edge_m {
            slot.1 = Some(r.map);
        } else {
            bail!("{}: view {} is not part of edge ({}, {})", stem.display(), r.view, r.edge_n, r.edge_m);
        }
    }
    let mut edges = Vec::new();
    for ((n, m), (map_n, map_m)) in pairs {
        match (map_n, map_m) {
            (Some(map_n), Some(map_m)) => edges.push(Edge { n, m, map_n, map_m }),
            _ => bail!("edge ({n}, {m}) is missing one of its two pointmaps"),
        }
    }
    let views = edges.iter().map(|e| e.n.max(e.m) + 1).max().unwrap_or(0);
    let graph = ViewGraph::new(views, edges)?;
    let focals = graph.edges.iter().map(|e| estimate_focal_weiszfeld(&e.map_n)).collect::<deblursplat::Result<Vec<_>>>()?;
    let focal = average_focal(&focals)?;
    let solution = global_align(&graph, &AlignConfig { iterations: a.iterations, learning_rate: a.learning_rate, ..Default::default() })?;
    let poses = view_poses(&graph, &solution, focal)?;

    let out = out_or(cli, "alignment");
    let trajectory: Vec<TimedPose> = poses.iter().enumerate().map(|(v, p)| TimedPose { timestamp: v as f64, pose: *p }).collect();
    io::write_tum(out.join("trajectory.tum"), &trajectory)?;
    let scales: Vec<(usize, usize, f64)> = graph.edges.iter().zip(&solution.scales).map(|(e, s)| (e.n, e.m, *s)).collect();
    io::write_scales(out.join("scales.txt"), &scales)?;
    println!(
        "focal {focal:.6}; {} edges over {views} views; objective {:.6e} after {} accepted steps ({:?}); wrote {}",
        graph.edges.len(),
        solution.objective,
        solution.history.len() - 1,
        solution.status,
        out.display()
    );
    Ok(())
}

fn write_outcome(out: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    io::write_scene_ply(out.join("scene.ply"), &outcome.output.scene, PlyFormat::BinaryLittleEndian)?;
    io::write_tum(out.join("trajectory.tum"), &outcome.estimated_trajectory)?;
    io::write_text(out.join("loss.csv"), &loss_log_csv(&outcome.output.history))?;
    Ok(())
}

fn print_reports(out: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut csv = format!("{}\n", MetricReport::CSV_HEADER);
    for r in rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    io::write_text(out.join("metrics.csv"), &csv)?;
    print!("{}", MetricReport::table(rows));
    print!("{csv}");
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(cli, a.iters)?;
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let out = out_or(cli, "trained");
    let outcome = run_experiment("train", &data, &init_config(cli, &a.init), &cfg)?;
    write_outcome(&out, &outcome)?;
    println!("trained {} iterations in {:.1} s; wrote {}", cfg.iters, outcome.seconds, out.display());
    if data.sharp.is_some() {
        print_reports(&out, &[outcome.report])?;
    }
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let dataset: Option<LoadedDataset> = a.data.as_ref().map(load_dataset).transpose()?;
    let estimate = a.estimate.as_ref().map(io::read_tum).transpose()?;
    let reference = match (&a.reference, &dataset) {
        (Some(p), _) => Some(io::read_tum(p)?),
        (None, Some(d)) => d.ground_truth_latents.clone(),
        (None, None) => None,
    };
    let ate_rmse = match (&estimate, &reference) {
        (Some(e), Some(r)) => Some(ate(e, r, a.alignment.into())?),
        (Some(_), None) => bail!("--estimate needs --reference or --data with a ground-truth trajectory"),
        _ => None,
    };

    let (mut psnr, mut ssim_value) = (f64::NAN, f64::NAN);
    if let (Some(img), Some(refimg)) = (&a.image, &a.reference_image) {
        let (x, y) = (read_image(img)?, read_image(refimg)?);
        psnr = psnr_capped(&x, &y, 1.0)?;
        ssim_value = ssim(&x, &y, 1.0)?;
    } else if let (Some(d), Some(scene_path)) = (&dataset, &a.scene) {
        let scene = io::read_scene_ply(scene_path)?;
        let sharp = d.sharp.as_ref().context("dataset has no sharp frames to compare against")?;
        let poses = estimate.as_ref().context("--scene needs --estimate with one pose per latent")?;
        let u = d.spec.u;
        if poses.len() != sharp.len() * u {
            bail!("{} poses for {} views with u = {u}", poses.len(), sharp.len());
        }
        let (mut ps, mut ss) = (0.0, 0.0);
        for (i, p) in poses.iter().enumerate() {
            let render = rasterize(&scene, &p.pose, &d.intrinsics)?.color;
            let target = &sharp[i / u][i % u + 1];
            ps += psnr_capped(&render, target, 1.0)?;
            ss += ssim(&render, target, 1.0)?;
        }
        psnr = ps / poses.len() as f64;
        ssim_value = ss / poses.len() as f64;
    } else if a.image.is_some() || a.reference_image.is_some() || a.scene.is_some() {
        bail!("image scoring needs --image with --reference-image, or --data with --scene and --estimate");
    }
    if ate_rmse.is_none() && psnr.is_nan() {
        bail!("nothing to evaluate: pass trajectories, images or a dataset with a scene");
    }
    let out = out_or(cli, ".");
    print_reports(&out, &[MetricReport { label: a.label.clone(), psnr, ssim: ssim_value, ate_rmse }])
}

fn e2e(cli: &Cli, a: &E2eArgs) -> Result<()> {
    let spec = dataset_spec(a.dataset_config.as_deref(), cli.seed)?;
    let cfg = train_config(cli, a.iters)?;
    let out = out_or(cli, "e2e");
    let root = out.join("dataset");
    generate_synthetic_dataset(&spec, &root)?;
    let data = load_dataset(&root)?;
    let init = init_config(cli, &a.init);
    let with_events = run_experiment("events", &data, &init, &cfg)?;
    write_outcome(&out, &with_events)?;
    let mut rows = vec![with_events.report.clone()];
    if let Some(initial) = with_events.initial_ate {
        rows.insert(0, MetricReport { label: "initial-poses".into(), psnr: f64::NAN, ssim: f64::NAN, ate_rmse: Some(initial) });
    }
    if a.baseline {
        let plain = run_experiment("no-events", &data, &init, &TrainConfig { lambda_e: 0.0, ..cfg })?;
        let dir = out.join("no_events");
        write_outcome(&dir, &plain)?;
        rows.push(plain.report);
    }
    eprintln!("e2e finished in {:.1} s; outputs in {}", with_events.seconds, out.display());
    print_reports(&out, &rows)
}
