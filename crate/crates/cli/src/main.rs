use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridbp::learning::{
    disparity_metrics, flow_epe, stereo_sample, train_toy, ModelParams, StereoInputOptions, TrainConfig, TrainSample,
};
use gridbp::matching::load_probability_volume;
use gridbp::pipeline::{
    default_params, estimate_disparity, estimate_flow, segment, Algo, FlowOptions, PairwiseKind, StereoOptions,
};
use gridbp::suites::{log_log_slope, run_check, time_messages, CHECK_SUITES};
use gridbp::{io, weights_from_image, CompatMatrix, Plane};
use log::info;

#[derive(Parser)]
#[command(name = "gridbp", version, about = "Max-product belief propagation on pixel grids")]
struct Cli {
    /// Worker threads for inference (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Disparity from a rectified PGM pair.
    Stereo(StereoArgs),
    /// Optical flow between two PGM frames.
    Flow(FlowArgs),
    /// Smooth a class-probability volume with a compatibility matrix.
    Segment(SegmentArgs),
    /// Fit temperature and pairwise parameters on a stereo dataset.
    Train(TrainArgs),
    /// Run a property suite; exit status 1 if it fails.
    Check(CheckArgs),
    /// Time one message pass against the number of labels.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Bp,
    Sgm,
    Wta,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Bp => Algo::Bp,
            AlgoArg::Sgm => Algo::Sgm,
            AlgoArg::Wta => Algo::Wta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PairwiseArg {
    Jump,
    Matrix,
}

impl From<PairwiseArg> for PairwiseKind {
    fn from(p: PairwiseArg) -> Self {
        match p {
            PairwiseArg::Jump => PairwiseKind::Jump,
            PairwiseArg::Matrix => PairwiseKind::Matrix,
        }
    }
}

/// Options shared by the stereo and flow commands.
#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "bp")]
    algo: AlgoArg,
    /// Pairwise model used when no --params file is given.
    #[arg(long, value_enum, default_value = "jump")]
    pairwise: PairwiseArg,
    /// Model parameters as JSON (temperature and one pairwise model per level).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Half-width of the refinement window around the argmax.
    #[arg(long, default_value_t = 3)]
    refine_tau: usize,
    #[arg(long, default_value_t = 5)]
    census_window: usize,
    /// Edge-aware weights exp(-beta |dI|) from the first image.
    #[arg(long)]
    beta: Option<f64>,
    /// Seed for randomized stages; inference itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StereoArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long, default_value_t = 15)]
    max_disp: usize,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[command(flatten)]
    model: ModelArgs,
    /// Disparity map (PFM).
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth disparity (PFM; non-finite entries are ignored).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// CSV with bad1, bad2, bad3 and MAE against --gt.
    #[arg(long, requires = "gt")]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long)]
    first: PathBuf,
    #[arg(long)]
    second: PathBuf,
    #[arg(long, default_value_t = 4)]
    radius: usize,
    #[command(flatten)]
    model: ModelArgs,
    /// Horizontal flow (PFM).
    #[arg(long)]
    out_u1: PathBuf,
    /// Vertical flow (PFM).
    #[arg(long)]
    out_u2: PathBuf,
    #[arg(long, requires = "gt_u2")]
    gt_u1: Option<PathBuf>,
    #[arg(long, requires = "gt_u1")]
    gt_u2: Option<PathBuf>,
    /// CSV with the endpoint error against --gt-u1/--gt-u2.
    #[arg(long, requires = "gt_u1")]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    /// Probability volume (CSV: "H,W,L" header then one row per pixel).
    #[arg(long)]
    probs: PathBuf,
    /// Compatibility matrices as JSON {"horizontal": [[..]], "vertical": [[..]]}.
    #[arg(long)]
    matrix: PathBuf,
    /// Grayscale image for edge-aware weights (PGM).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Label map (PGM, gray level = class index).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of NAME_left.pgm, NAME_right.pgm and NAME_disp.pfm triples.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial parameters (JSON); defaults per --pairwise otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "jump")]
    pairwise: PairwiseArg,
    #[arg(long, default_value_t = 15)]
    max_disp: usize,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[arg(long, default_value_t = 5)]
    census_window: usize,
    #[arg(long)]
    beta: Option<f64>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Trained parameters (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Loss per step (CSV).
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Suite to run, or "all".
    suite: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    labels: Vec<usize>,
    /// Grid side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, value_enum, default_value = "jump")]
    pairwise: PairwiseArg,
    #[arg(long, default_value_t = 7)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of labels and median seconds.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_params(path: Option<&Path>, kind: PairwiseKind, counts: &[usize]) -> anyhow::Result<ModelParams> {
    match path {
        Some(p) => Ok(ModelParams::load(p)?),
        None => Ok(default_params(kind, counts)),
    }
}

fn read_gt(path: &Path) -> anyhow::Result<Plane<f64>> {
    let gt = io::read_pfm(path)?;
    Ok(gt.map(|&v| if v.is_finite() { v as f64 } else { f64::NAN }))
}

fn write_map(path: &Path, map: &Plane<f64>) -> anyhow::Result<()> {
    io::write_pfm(path, &map.map(|&v| v as f32))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_stereo(a: StereoArgs) -> anyhow::Result<()> {
    let left = io::read_pgm(&a.left)?;
    let right = io::read_pgm(&a.right)?;
    let opts = StereoOptions {
        max_disp: a.max_disp,
        levels: a.levels,
        algo: a.model.algo.into(),
        refine_tau: a.model.refine_tau,
        census_window: a.model.census_window,
        beta: a.model.beta,
    };
    let params = load_params(
        a.model.params.as_deref(),
        a.model.pairwise.into(),
        &opts.label_counts()?,
    )?;
    let disp = estimate_disparity(&left, &right, &params, &opts)?;
    write_map(&a.out, &disp)?;
    if let Some(gt) = &a.gt {
        let m = disparity_metrics(&disp, &read_gt(gt)?)?;
        info!(
            "bad1 {:.2} bad2 {:.2} bad3 {:.2} mae {:.3}",
            m.bad1, m.bad2, m.bad3, m.mae
        );
        if let Some(out) = &a.metrics_out {
            write_text(
                out,
                &format!("bad1,bad2,bad3,mae\n{},{},{},{}\n", m.bad1, m.bad2, m.bad3, m.mae),
            )?;
        }
    }
    Ok(())
}

fn cmd_flow(a: FlowArgs) -> anyhow::Result<()> {
    let first = io::read_pgm(&a.first)?;
    let second = io::read_pgm(&a.second)?;
    let opts = FlowOptions {
        radius: a.radius,
        algo: a.model.algo.into(),
        refine_tau: a.model.refine_tau,
        census_window: a.model.census_window,
        beta: a.model.beta,
    };
    let params = load_params(a.model.params.as_deref(), a.model.pairwise.into(), &[2 * a.radius + 1])?;
    let [u1, u2] = estimate_flow(&first, &second, &params, &opts)?;
    write_map(&a.out_u1, &u1)?;
    write_map(&a.out_u2, &u2)?;
    if let (Some(g1), Some(g2)) = (&a.gt_u1, &a.gt_u2) {
        let epe = flow_epe([&u1, &u2], [&read_gt(g1)?, &read_gt(g2)?])?;
        info!("epe {epe:.4}");
        if let Some(out) = &a.metrics_out {
            write_text(out, &format!("epe\n{epe}\n"))?;
        }
    }
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> anyhow::Result<()> {
    let probs = load_probability_volume(&a.probs)?;
    let text = fs::read_to_string(&a.matrix).with_context(|| format!("cannot read {}", a.matrix.display()))?;
    let matrix: CompatMatrix =
        serde_json::from_str(&text).with_context(|| format!("{}: not a compatibility matrix", a.matrix.display()))?;
    let weights = match &a.image {
        Some(p) => Some(weights_from_image(&io::read_pgm(p)?, a.beta)),
        None => None,
    };
    let labels = segment(&probs, &matrix, a.temperature, weights)?;
    let top = (probs.shape().labels - 1).max(1) as u16;
    io::write_pgm(&a.out, &labels.map(|&l| l as u16), top)?;
    Ok(())
}

/// Sorted `(left, right, disparity)` triples of a dataset directory.
fn dataset_files(dir: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf, PathBuf)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_left.pgm"))
                .map(String::from)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("{}: no *_left.pgm files", dir.display());
    }
    names
        .into_iter()
        .map(|n| {
            let right = dir.join(format!("{n}_right.pgm"));
            let disp = dir.join(format!("{n}_disp.pfm"));
            for p in [&right, &disp] {
                if !p.is_file() {
                    bail!("{}: missing for sample {n}", p.display());
                }
            }
            Ok((dir.join(format!("{n}_left.pgm")), right, disp))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .with_context(|| format!("{}: bad training config", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let inputs = StereoInputOptions {
        max_disp: a.max_disp,
        levels: a.levels,
        census_window: a.census_window,
        beta: a.beta,
        ..StereoInputOptions::default()
    };
    let samples = dataset_files(&a.data)?
        .into_iter()
        .map(|(l, r, d)| -> anyhow::Result<TrainSample> {
            let gt = read_gt(&d)?;
            Ok(stereo_sample(
                &io::read_pgm(&l)?,
                &io::read_pgm(&r)?,
                Some(&gt),
                &inputs,
            )?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let counts = gridbp::pyramid::level_labels(a.max_disp + 1, a.levels)?;
    let init = load_params(a.params.as_deref(), a.pairwise.into(), &counts)?;
    gridbp::pipeline::check_params(&init, &counts)?;
    info!("training on {} samples for {} steps", samples.len(), cfg.steps);
    let out = train_toy(&init, &samples, &cfg)?;
    out.params.save(&a.out)?;
    if let Some(p) = &a.loss_out {
        let mut csv = String::from("step,loss\n");
        for (i, l) in out.losses.iter().enumerate() {
            writeln!(csv, "{i},{l}").expect("writing to a string");
        }
        write_text(p, &csv)?;
    }
    Ok(())
}

/// `Ok(false)` when a suite ran and failed.
fn cmd_check(a: CheckArgs) -> anyhow::Result<bool> {
    let names: Vec<&str> = if a.suite == "all" {
        CHECK_SUITES.to_vec()
    } else {
        vec![a.suite.as_str()]
    };
    for name in names {
        let line = run_check(name)?;
        if !line.passed {
            eprintln!("{name} FAIL: {}", line.detail);
            return Ok(false);
        }
        println!("{name} PASS: {}", line.detail);
    }
    Ok(true)
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.labels.len() < 2 {
        bail!("need at least two label counts to fit a slope");
    }
    let secs = time_messages(a.pairwise.into(), &a.labels, a.size, a.reps, a.seed)?;
    let xs: Vec<f64> = a.labels.iter().map(|&l| l as f64).collect();
    let slope = log_log_slope(&xs, &secs);
    let mut csv = String::from("labels,seconds\n");
    for (l, s) in a.labels.iter().zip(&secs) {
        writeln!(csv, "{l},{s}").expect("writing to a string");
    }
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    println!("slope {slope:.3}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Stereo(a) => cmd_stereo(a),
        Command::Flow(a) => cmd_flow(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Check(a) => match cmd_check(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
