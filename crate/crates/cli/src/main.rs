use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikeflow::events::{synth_scene, Pattern, SceneParams, SceneSampler};
use spikeflow::formats::{load_dataset, read_flo, save_scenes, write_flo, write_flow_ppm, SceneFiles};
use spikeflow::model::{Network, Neuron};
use spikeflow::objectives::FlowMetrics;
use spikeflow::profile::{measure_activity, EnergyReport};
use spikeflow::tensor::{DType, Scalar};
use spikeflow::train::{evaluate, fit_from, Checkpoint, FitOptions, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "spikeflow", version, about = "Spiking optical-flow networks for event cameras")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes: events, a grayscale pair and ground-truth flow.
    Synth(SynthArgs),
    /// Train a model from a config file on a scene dataset.
    Train(TrainArgs),
    /// Report AEE and 1/2/3-pixel outlier rates of a checkpoint.
    Eval(EvalArgs),
    /// Print the operation-count and energy report of a checkpoint.
    Profile(ProfileArgs),
    /// Render a flow file as a colour-wheel image.
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// bar, disc, checkerboard, grating or texture.
    #[arg(long)]
    pattern: Option<String>,
    /// Translation "u,v" in pixels per interval (single scene only).
    #[arg(long)]
    velocity: Option<String>,
    /// Rotation in radians per interval (single scene only).
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    /// Sensor size "HxW" or a single number for square frames.
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Background noise events per pixel per interval.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    /// Log-intensity contrast threshold.
    #[arg(long, default_value_t = 0.15)]
    theta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample this many randomized scenes into scene_NNNN subdirectories.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Scene directory or directory of scene directories.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.ckpt, train.log and config.txt.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of the data held out for validation (taken from the end).
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Continue from <out>/checkpoint.ckpt.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write predicted flows as FLO1 files into this directory.
    #[arg(long)]
    save_flow: Option<PathBuf>,
    /// Print a JSON record instead of key=value lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VizArgs {
    /// FLO1 flow file.
    #[arg(long)]
    flow: PathBuf,
    /// Output PPM image.
    #[arg(long)]
    out: PathBuf,
    /// Magnitude at full saturation.
    #[arg(long, default_value_t = 40.0)]
    max_magnitude: f64,
}

enum CliError {
    Usage(String),
    Core(spikeflow::Error),
}

impl From<spikeflow::Error> for CliError {
    fn from(e: spikeflow::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => e.exit_code() as u8,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let parsed = match s.split_once('x') {
        Some((h, w)) => h.parse().ok().zip(w.parse().ok()),
        None => s.parse().ok().map(|n| (n, n)),
    };
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => usage(format!("--size expects HxW or N, got {s:?}")),
    }
}

fn parse_velocity(s: &str) -> CliResult<(f64, f64)> {
    let parsed = s.split_once(',').and_then(|(u, v)| u.trim().parse().ok().zip(v.trim().parse().ok()));
    parsed.map_or_else(|| usage(format!("--velocity expects u,v, got {s:?}")), Ok)
}

fn parse_pattern(s: &str) -> CliResult<Pattern> {
    s.parse().or_else(|_| usage(format!("unknown pattern {s:?}")))
}

fn synth(a: &SynthArgs) -> CliResult {
    let (h, w) = parse_size(&a.size)?;
    println!("synth out={} size={h}x{w} rate={} theta={} seed={}", a.out.display(), a.rate, a.theta, a.seed);
    match a.count {
        Some(n) => {
            if a.velocity.is_some() || a.rotation != 0.0 {
                return usage("--velocity and --rotation apply to single scenes, not --count");
            }
            let mut sampler = SceneSampler::new(h, w, a.seed);
            sampler.noise_rate = a.rate;
            sampler.theta = a.theta;
            if let Some(p) = &a.pattern {
                sampler.patterns = vec![parse_pattern(p)?];
            }
            let scenes = sampler.scenes(n)?;
            save_scenes(&scenes, &a.out)?;
            let events: usize = scenes.iter().map(|s| s.stream.len()).sum();
            println!("scenes={n} events={events}");
        }
        None => {
            let pattern = parse_pattern(a.pattern.as_deref().unwrap_or("bar"))?;
            let velocity = parse_velocity(a.velocity.as_deref().unwrap_or("2,0"))?;
            let mut params = SceneParams::new(pattern, velocity, h, w, a.rate, a.theta, a.seed);
            params.rotation = a.rotation;
            println!("pattern={pattern} velocity={},{} rotation={}", velocity.0, velocity.1, a.rotation);
            let scene = synth_scene(&params)?;
            SceneFiles::from_scene(&scene).write(&a.out)?;
            println!("events={}", scene.stream.len());
            if scene.stream.is_empty() {
                eprintln!("warning: empty event stream; the pattern does not move across any pixel");
            }
        }
    }
    Ok(())
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Core(spikeflow::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(io_error(path))
}

fn train(a: &TrainArgs) -> CliResult {
    if !(0.0..1.0).contains(&a.val_fraction) {
        return usage("--val-fraction must be in [0, 1)");
    }
    let cfg = RunConfig::parse(&read_text(&a.config)?)?;
    match cfg.train.precision {
        DType::F64 => train_in::<f64>(a, &cfg),
        _ => train_in::<f32>(a, &cfg),
    }
}

fn train_in<S: Scalar>(a: &TrainArgs, cfg: &RunConfig) -> CliResult {
    std::fs::create_dir_all(&a.out).map_err(io_error(&a.out))?;
    let ckpt_path = a.out.join("checkpoint.ckpt");
    let trainer = if a.resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let saved = ckpt.run_config()?;
        if saved.model != cfg.model || saved.train.seed != cfg.train.seed {
            return Err(spikeflow::Error::Config("model or seed differs from the checkpoint being resumed".into()).into());
        }
        let mut t = ckpt.trainer::<S>()?;
        t.cfg = cfg.train.clone();
        t
    } else {
        Trainer::<S>::new(&cfg.model, &cfg.train)?
    };
    print!("{}", cfg.to_text());
    println!("data={} val_fraction={} resume={}", a.data.display(), a.val_fraction, a.resume);
    let config_path = a.out.join("config.txt");
    std::fs::write(&config_path, cfg.to_text()).map_err(io_error(&config_path))?;
    let (train, val) = load_dataset::<S>(&a.data, cfg.model.bins())?.split(a.val_fraction);
    println!("train_samples={} val_samples={}", train.len(), val.len());
    let opts = FitOptions {
        log_path: Some(a.out.join("train.log")),
        checkpoint_path: Some(ckpt_path.clone()),
    };
    let out = fit_from(trainer, &train, &val, &opts)?;
    if let Some(init) = &out.initial {
        println!("initial_aee={:.6}", init.metrics.aee);
    }
    for r in &out.log {
        let aee = r.val_aee.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        println!("epoch={} lr={:e} train_loss={:.6} val_aee={aee}", r.epoch, r.lr, r.train_loss);
    }
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

fn load_network(path: &Path) -> CliResult<(Checkpoint, DType)> {
    let ckpt = Checkpoint::load(path)?;
    let dtype = ckpt.precision()?;
    Ok((ckpt, dtype))
}

fn eval(a: &EvalArgs) -> CliResult {
    let (ckpt, dtype) = load_network(&a.checkpoint)?;
    match dtype {
        DType::F64 => eval_in(a, &ckpt.network::<f64>()?),
        _ => eval_in(a, &ckpt.network::<f32>()?),
    }
}

fn eval_in<S: Scalar>(a: &EvalArgs, net: &Network<S>) -> CliResult {
    let data = load_dataset::<S>(&a.data, net.spec().bins())?;
    if data.samples.iter().all(|s| s.gt_flow.is_none()) {
        return Err(spikeflow::Error::Mismatch("evaluation needs ground-truth flow".into()).into());
    }
    let report = evaluate(net, &data)?;
    if let Some(dir) = &a.save_flow {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        for (i, s) in data.samples.iter().enumerate() {
            let flow = net.predict(&s.volume, false)?.flow;
            write_flo(&flow.cast(), dir.join(format!("pred_{i:04}.flo")))?;
        }
    }
    if a.json {
        println!("{}", metrics_json(&report.metrics, &report.activity));
    } else {
        println!("model={}", net.spec());
        println!("{}", report.metrics);
        if !report.activity.is_empty() {
            let act: Vec<String> = report.activity.iter().map(|x| format!("{x:.6}")).collect();
            println!("activity={}", act.join(","));
        }
    }
    Ok(())
}

fn metrics_json(m: &FlowMetrics, activity: &[f64]) -> String {
    serde_json::json!({ "metrics": m, "activity": activity }).to_string()
}

fn profile(a: &ProfileArgs) -> CliResult {
    let (ckpt, dtype) = load_network(&a.checkpoint)?;
    match dtype {
        DType::F64 => profile_in(a, &ckpt.network::<f64>()?),
        _ => profile_in(a, &ckpt.network::<f32>()?),
    }
}

fn profile_in<S: Scalar>(a: &ProfileArgs, net: &Network<S>) -> CliResult {
    let data = load_dataset::<S>(&a.data, net.spec().bins())?;
    let first = &data.samples[0];
    let (h, w) = (first.height(), first.width());
    if data.samples.iter().any(|s| (s.height(), s.width()) != (h, w)) {
        return Err(spikeflow::Error::Mismatch("profiling needs samples of one size".into()).into());
    }
    let report = match net.spec().neuron {
        Neuron::Analog => EnergyReport::analog(net, h, w),
        Neuron::Spiking => {
            let volumes: Vec<_> = data.samples.iter().map(|s| s.volume.clone()).collect();
            EnergyReport::spiking(net, h, w, &measure_activity(net, &volumes)?)
        }
    };
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{report}");
    }
    Ok(())
}

fn viz(a: &VizArgs) -> CliResult {
    if !(a.max_magnitude > 0.0) {
        return usage("--max-magnitude must be positive");
    }
    let flow = read_flo(&a.flow)?;
    write_flow_ppm(&flow, a.max_magnitude, &a.out)?;
    println!("viz flow={} out={} size={}x{}", a.flow.display(), a.out.display(), flow.height(), flow.width());
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("SPIKEFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.parse() {
        Ok(n) if n > 0 => n,
        _ => return usage(format!("SPIKEFLOW_THREADS must be a positive integer, got {v:?}")),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .or_else(|e| usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: &Cli) -> CliResult {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
        Command::Viz(a) => viz(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
