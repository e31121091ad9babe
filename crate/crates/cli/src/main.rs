mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use mvs_core::sweep::DEFAULT_MEMORY_BUDGET;

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "mvs", version, about = "Plane-sweep multi-view stereo with a learned disparity network")]
struct Cli {
    /// Pipeline config file (TOML) [default: $MVS_CONFIG, else built-in defaults]
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Neighbor views per reference
    #[arg(short = 'n', long, default_value_t = 4)]
    neighbors: usize,
    /// Disparity levels D [default: 100; predict follows the checkpoint]
    #[arg(short = 'd', long)]
    levels: Option<usize>,
    /// Quantile of sparse-point disparities taken as the maximum disparity
    #[arg(long, default_value_t = 1.0)]
    quantile: f64,
    /// Maximum disparity, instead of the sparse-point estimate [default: estimated]
    #[arg(long)]
    max_disparity: Option<f64>,
    /// Largest plane-sweep volume allowed, bytes
    #[arg(long, default_value_t = DEFAULT_MEMORY_BUDGET)]
    memory_budget: u64,
}

#[derive(Args, Debug)]
struct CrfArgs {
    /// Mean-field iterations
    #[arg(long, default_value_t = 10)]
    crf_iterations: usize,
    /// Appearance kernel weight
    #[arg(long, default_value_t = 4.0)]
    w_app: f64,
    /// Appearance kernel spatial deviation, pixels
    #[arg(long, default_value_t = 30.0)]
    theta_alpha: f64,
    /// Appearance kernel color deviation
    #[arg(long, default_value_t = 0.1)]
    theta_beta: f64,
    /// Smoothness kernel weight
    #[arg(long, default_value_t = 1.0)]
    w_smooth: f64,
    /// Smoothness kernel spatial deviation, pixels
    #[arg(long, default_value_t = 3.0)]
    theta_gamma: f64,
    /// Truncation of the label compatibility, levels
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CurveMetric {
    Geometric,
    Photometric,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic sequence with ground truth and sparse points
    GenScene {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Scene description (TOML); replaces the built-in toy scene [default: toy scene]
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Image width of the toy scene
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Image height of the toy scene
        #[arg(long, default_value_t = 48)]
        height: usize,
        /// Number of views of the toy scene
        #[arg(long, default_value_t = 5)]
        views: usize,
        /// Scene seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the plane-sweep volume of one reference frame
    Sweep {
        /// Sequence manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Reference frame id
        #[arg(long = "ref")]
        ref_id: u32,
        /// Output volume archive
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Train the network (stage 1 reduced, stage 2 full)
    Train {
        /// Training sequence manifest; repeat for several sequences
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Training stage
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint whose matching layers seed stage 2 [default: none]
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Checkpoint to continue from [default: none]
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total optimizer steps, counting those of a resumed checkpoint
        #[arg(long, default_value_t = 320_000)]
        iterations: usize,
        /// Adam learning rate [default: 1e-5 in stage 1, 1e-6 in stage 2]
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Per-layer gradient norm bound [default: 1.0 in stage 1, 0.1 in stage 2]
        #[arg(long)]
        grad_clip: Option<f64>,
        /// Training patch size, pixels
        #[arg(long, default_value_t = 64)]
        patch: usize,
        /// Neighbor counts drawn per sample
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        n_range: Vec<usize>,
        /// Sampling and initialization seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the checkpoint every this many steps (0 = only at the end)
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Disparity levels D of a new network
        #[arg(short = 'd', long, default_value_t = 100)]
        levels: usize,
        /// Width multiplier of a new network
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Semantic extractor weights for a new network [default: seeded random]
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Loss trace, `step,loss` rows [default: <out>.trace.csv]
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Predict the disparity map of one reference frame
    Predict {
        /// Sequence manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Reference frame id
        #[arg(long = "ref")]
        ref_id: u32,
        /// Network checkpoint [default: paths.checkpoint of the config]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output disparity map (PFM)
        #[arg(long)]
        out: PathBuf,
        /// Also write the disparity distribution archive [default: not written]
        #[arg(long)]
        distribution: Option<PathBuf>,
        /// Skip CRF refinement [default: refine]
        #[arg(long)]
        no_refine: bool,
        /// Network window size, pixels
        #[arg(long, default_value_t = 128)]
        tile: usize,
        /// Centered part of each window kept in the output, pixels
        #[arg(long, default_value_t = 64)]
        core: usize,
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        crf: CrfArgs,
    },
    /// CRF-refine a saved disparity distribution
    Refine {
        /// Input distribution archive
        #[arg(long)]
        distribution: PathBuf,
        /// Sequence manifest providing the reference colors
        #[arg(long)]
        manifest: PathBuf,
        /// Reference frame id
        #[arg(long = "ref")]
        ref_id: u32,
        /// Output disparity map (PFM)
        #[arg(long)]
        out: PathBuf,
        /// Also write the refined distribution archive [default: not written]
        #[arg(long)]
        out_distribution: Option<PathBuf>,
        #[command(flatten)]
        crf: CrfArgs,
    },
    /// Geometric, photometric and completeness metrics of a prediction
    Evaluate {
        /// Predicted disparity map (PFM)
        #[arg(long)]
        pred: PathBuf,
        /// Sequence manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Reference frame id
        #[arg(long = "ref")]
        ref_id: u32,
        /// Ground-truth disparity map [default: the manifest's ground truth]
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Neighbor views used for rephotography
        #[arg(short = 'n', long, default_value_t = 4)]
        neighbors: usize,
        /// Metric report (JSON) [default: standard output]
        #[arg(long)]
        report: Option<PathBuf>,
        /// Completeness curve (CSV) [default: not written]
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Error whose completeness curve is computed [default: geometric with ground truth, else photometric]
        #[arg(long, value_enum)]
        curve_metric: Option<CurveMetric>,
        /// Number of curve thresholds
        #[arg(long, default_value_t = 100)]
        thresholds: usize,
        /// Largest curve threshold [default: largest error]
        #[arg(long)]
        max_threshold: Option<f64>,
    },
    /// Draw completeness curves into an SVG chart
    Plot {
        /// Curve files written by `evaluate`
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        /// Output SVG
        #[arg(long)]
        out: PathBuf,
        /// Chart title
        #[arg(long, default_value = "completeness")]
        title: String,
    },
}

/// Process exit status of a failed command.
pub enum Failure {
    Usage(String),
    Core(mvs_core::Error),
}

impl From<mvs_core::Error> for Failure {
    fn from(e: mvs_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(mvs_core::Error::Config(_)) => 1,
            Failure::Core(e) if e.is_numerical() => 3,
            Failure::Core(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

/// True when the user typed the flag, as opposed to clap filling its default.
fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn apply_sweep(m: &ArgMatches, a: &SweepArgs, cfg: &mut PipelineConfig) {
    let s = &mut cfg.sweep;
    if explicit(m, "neighbors") {
        s.neighbors = a.neighbors;
    }
    if let Some(d) = a.levels {
        s.levels = d;
        cfg.network.disparity_levels = d;
    }
    if explicit(m, "quantile") {
        s.quantile = a.quantile;
    }
    if a.max_disparity.is_some() {
        s.max_disparity = a.max_disparity;
    }
    if explicit(m, "memory_budget") {
        s.memory_budget = a.memory_budget;
    }
}

fn apply_crf(m: &ArgMatches, a: &CrfArgs, cfg: &mut PipelineConfig) {
    let c = &mut cfg.crf;
    let fields: [(&str, f64, &mut f64); 6] = [
        ("w_app", a.w_app, &mut c.w_app),
        ("theta_alpha", a.theta_alpha, &mut c.theta_alpha),
        ("theta_beta", a.theta_beta, &mut c.theta_beta),
        ("w_smooth", a.w_smooth, &mut c.w_smooth),
        ("theta_gamma", a.theta_gamma, &mut c.theta_gamma),
        ("tau", a.tau, &mut c.tau),
    ];
    for (id, v, slot) in fields {
        if explicit(m, id) {
            *slot = v;
        }
    }
    if explicit(m, "crf_iterations") {
        c.iterations = a.crf_iterations;
    }
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref())?;
    let (_, m) = matches.subcommand().expect("a subcommand is required");
    match cli.command {
        Command::GenScene { out, spec, width, height, views, seed } => {
            commands::gen_scene(&out, spec.as_deref(), width, height, views, seed)
        }
        Command::Sweep { manifest, ref_id, out, sweep } => {
            apply_sweep(m, &sweep, &mut cfg);
            cfg.validate()?;
            commands::sweep(&cfg, &manifest, ref_id, &out)
        }
        Command::Train {
            manifest,
            stage,
            out,
            init,
            resume,
            iterations,
            learning_rate,
            grad_clip,
            patch,
            n_range,
            seed,
            checkpoint_every,
            levels,
            scale,
            extractor,
            trace,
        } => {
            if explicit(m, "levels") {
                cfg.network.disparity_levels = levels;
                cfg.sweep.levels = levels;
            }
            if explicit(m, "scale") {
                cfg.network.scale = scale;
            }
            if extractor.is_some() {
                cfg.paths.extractor = extractor;
            }
            let mut tc = cfg.train_config(explicit(m, "stage").then_some(stage))?;
            if explicit(m, "iterations") {
                tc.iterations = iterations;
            }
            if let Some(lr) = learning_rate {
                tc.learning_rate = lr;
            }
            if let Some(c) = grad_clip {
                tc.grad_clip = c;
            }
            if explicit(m, "patch") {
                tc.patch = patch;
            }
            if explicit(m, "n_range") {
                tc.n_range = n_range;
            }
            if explicit(m, "seed") {
                tc.seed = seed;
            }
            if explicit(m, "checkpoint_every") {
                tc.checkpoint_every = checkpoint_every;
            }
            tc.validate()?;
            cfg.validate()?;
            if init.is_some() && tc.stage != 2 {
                return Err(Failure::Usage("--init transfers a stage-1 network and needs --stage 2".into()));
            }
            let trace = trace.unwrap_or_else(|| {
                let mut name = out.file_name().unwrap_or_default().to_os_string();
                name.push(".trace.csv");
                out.with_file_name(name)
            });
            let job = commands::TrainJob { manifests: &manifest, out: &out, init: init.as_deref(), resume: resume.as_deref(), trace: &trace };
            commands::train(&cfg, &tc, job)
        }
        Command::Predict { manifest, ref_id, checkpoint, out, distribution, no_refine, tile, core, sweep, crf } => {
            apply_sweep(m, &sweep, &mut cfg);
            apply_crf(m, &crf, &mut cfg);
            if explicit(m, "tile") {
                cfg.sweep.tile = tile;
            }
            if explicit(m, "core") {
                cfg.sweep.core = core;
            }
            let checkpoint = checkpoint
                .or_else(|| cfg.paths.checkpoint.clone())
                .ok_or_else(|| Failure::Usage("no checkpoint: pass --checkpoint or set paths.checkpoint".into()))?;
            let levels_fixed = sweep.levels.is_some() || cfg_sets_levels(cli.config.as_deref());
            let job = commands::PredictJob {
                manifest: &manifest,
                ref_id,
                checkpoint: &checkpoint,
                out: &out,
                distribution: distribution.as_deref(),
                refine: !no_refine,
                levels_fixed,
            };
            commands::predict(&mut cfg, job)
        }
        Command::Refine { distribution, manifest, ref_id, out, out_distribution, crf } => {
            apply_crf(m, &crf, &mut cfg);
            cfg.crf.validate()?;
            commands::refine(&cfg, &distribution, &manifest, ref_id, &out, out_distribution.as_deref())
        }
        Command::Evaluate {
            pred,
            manifest,
            ref_id,
            gt,
            neighbors,
            report,
            curve,
            curve_metric,
            thresholds,
            max_threshold,
        } => {
            if explicit(m, "neighbors") {
                cfg.sweep.neighbors = neighbors;
            }
            if thresholds == 0 {
                return Err(Failure::Usage("--thresholds must be at least 1".into()));
            }
            let job = commands::EvaluateJob {
                pred: &pred,
                manifest: &manifest,
                ref_id,
                gt: gt.as_deref(),
                report: report.as_deref(),
                curve: curve.as_deref(),
                photometric_curve: curve_metric.map(|c| c == CurveMetric::Photometric),
                thresholds,
                max_threshold,
            };
            commands::evaluate(&cfg, job)
        }
        Command::Plot { curves, out, title } => commands::plot(&curves, &out, &title),
    }
}

/// Whether the active config file pins D, in which case a checkpoint with a
/// different D is rejected rather than followed.
fn cfg_sets_levels(explicit_path: Option<&std::path::Path>) -> bool {
    let path = match explicit_path {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(config::CONFIG_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => return false,
        },
    };
    let Ok(text) = std::fs::read_to_string(path) else { return false };
    let doc: toml::Table = toml::from_str(&text).unwrap_or_default();
    let set = |t: &str, k: &str| doc.get(t).and_then(|v| v.get(k)).is_some();
    set("sweep", "levels") || set("network", "disparity_levels")
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mvs: error: {}", f.message().replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}
