use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use mvs_core::archive::Archive;
use mvs_core::dataio::{
    distribution_from_archive, distribution_to_archive, generate_scene, load_disparity, load_sequence, save_disparity,
    save_generated, volume_to_archive, SceneSpec, Sequence,
};
use mvs_core::eval::{
    completeness_curve, geometric_error_map, linear_thresholds, photometric_error_map, CompletenessCurve,
};
use mvs_core::geometry::CameraView;
use mvs_core::maps::{predict_raw, DisparityMap};
use mvs_core::network::{tile_predict, DisparityNet, SemanticExtractor};
use mvs_core::refine::crf_refine;
use mvs_core::sweep::{build_volume, estimate_max_disparity, make_disparity_grid, select_neighbors, DisparityGrid};
use mvs_core::training::{
    load_training_checkpoint, sample_batch, save_training_checkpoint, train_stage, transfer_to_stage2, Adam,
    TrainConfig, TrainSequence,
};
use mvs_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::plot::completeness_svg;
use crate::Failure;

type CmdResult = std::result::Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Neighbors ranked by shared sparse points, or by camera-center distance
/// when the sequence has no points.
fn neighbor_ids(seq: &Sequence, ref_id: u32, count: usize) -> Result<Vec<u32>> {
    let reference = seq.view(ref_id)?;
    match &seq.points {
        Some(points) => select_neighbors(&seq.views, points, ref_id, count),
        None => {
            let mut others: Vec<(f64, u32)> = seq
                .views
                .iter()
                .filter(|v| v.id != ref_id)
                .map(|v| ((v.pose.center() - reference.pose.center()).norm(), v.id))
                .collect();
            if others.len() < count {
                return Err(Error::InsufficientViews { needed: count, available: others.len() });
            }
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Ok(others.into_iter().take(count).map(|(_, id)| id).collect())
        }
    }
}

fn sweep_grid(cfg: &PipelineConfig, seq: &Sequence, reference: &CameraView) -> Result<DisparityGrid> {
    let d_max = match (cfg.sweep.max_disparity, &seq.points) {
        (Some(d), _) => d,
        (None, Some(points)) => estimate_max_disparity(points, reference, cfg.sweep.quantile)?,
        (None, None) => {
            return Err(Error::Config("the sequence has no sparse points; pass --max-disparity".into()));
        }
    };
    make_disparity_grid(d_max, cfg.sweep.levels)
}

fn reference_and_neighbors<'a>(
    cfg: &PipelineConfig,
    seq: &'a Sequence,
    ref_id: u32,
) -> Result<(&'a CameraView, Vec<&'a CameraView>)> {
    let reference = seq.view(ref_id)?;
    let ids = neighbor_ids(seq, ref_id, cfg.sweep.neighbors)?;
    let neighbors = ids.iter().map(|&id| seq.view(id)).collect::<Result<Vec<_>>>()?;
    Ok((reference, neighbors))
}

pub fn gen_scene(out: &Path, spec: Option<&Path>, width: usize, height: usize, views: usize, seed: u64) -> CmdResult {
    let spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str::<SceneSpec>(&text).map_err(|e| Error::Format {
                path: p.to_path_buf(),
                reason: e.to_string().trim_end().to_string(),
            })?
        }
        None => SceneSpec::toy(width, height, views, seed),
    };
    let scene = generate_scene(&spec)?;
    let manifest = save_generated(out, &scene)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn sweep(cfg: &PipelineConfig, manifest: &Path, ref_id: u32, out: &Path) -> CmdResult {
    let seq = load_sequence(manifest)?;
    let (reference, neighbors) = reference_and_neighbors(cfg, &seq, ref_id)?;
    let grid = sweep_grid(cfg, &seq, reference)?;
    let volume = build_volume(reference, &neighbors, &grid, cfg.sweep.memory_budget)?;
    volume_to_archive(&volume).save(out)?;
    println!("{}", out.display());
    Ok(())
}

pub struct TrainJob<'a> {
    pub manifests: &'a [std::path::PathBuf],
    pub out: &'a Path,
    pub init: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    pub trace: &'a Path,
}

/// Sweep grid covering the sequence's ground truth: D levels up to the
/// largest valid disparity of any frame.
fn training_sequence(path: &Path, levels: usize) -> Result<TrainSequence> {
    let seq = load_sequence(path)?;
    let mut gts = Vec::with_capacity(seq.views.len());
    for (v, gt) in seq.views.iter().zip(seq.ground_truth) {
        let gt = gt.ok_or_else(|| Error::Load { frame: v.id.to_string(), reason: "training frames need ground truth".into() })?;
        gts.push(gt);
    }
    let d_max = gts
        .iter()
        .flat_map(|g| g.values.iter().zip(&g.valid).filter(|(_, &ok)| ok).map(|(&d, _)| d as f64))
        .fold(0.0f64, f64::max);
    if !(d_max > 0.0) {
        return Err(Error::InvalidRange(format!("{}: ground truth has no positive disparity", path.display())));
    }
    let grid = make_disparity_grid(d_max, levels)?;
    TrainSequence::new(path.display().to_string(), seq.views, gts, grid)
}

pub fn train(cfg: &PipelineConfig, tc: &TrainConfig, job: TrainJob) -> CmdResult {
    // A loaded network keeps its own config, D included.
    let (mut net, mut adam) = match (job.resume, job.init) {
        (Some(path), _) => load_training_checkpoint(path, None, tc)?,
        (None, Some(path)) => {
            let (stage1, _) = DisparityNet::load(path, None)?;
            let (net, report) = transfer_to_stage2(&stage1, tc.seed)?;
            eprintln!("stage transfer: {} layers carried, {} initialized", report.carried.len(), report.fresh.len());
            (net, Adam::from_config(tc))
        }
        (None, None) => {
            let mut net = DisparityNet::new_random(cfg.network.clone(), tc.architecture(), tc.seed)?;
            if let Some(p) = &cfg.paths.extractor {
                let widths = cfg.network.extractor_widths.map(|w| cfg.network.width(w));
                net.set_extractor(SemanticExtractor::load(p, widths)?)?;
            }
            (net, Adam::from_config(tc))
        }
    };
    let levels = net.config.disparity_levels;
    let sequences = job.manifests.iter().map(|p| training_sequence(p, levels)).collect::<Result<Vec<_>>>()?;
    let done = adam.step as usize;
    let run = TrainConfig { iterations: tc.iterations.saturating_sub(done), ..tc.clone() };

    let fresh = job.resume.is_none() || !job.trace.exists();
    let file = if fresh {
        File::create(job.trace)
    } else {
        OpenOptions::new().append(true).open(job.trace)
    }
    .map_err(io_err(job.trace))?;
    let mut trace = BufWriter::new(file);
    if fresh {
        writeln!(trace, "step,loss").map_err(io_err(job.trace))?;
    }

    let every = (tc.iterations / 20).max(1);
    let seed = tc.seed;
    let sample = |step: usize| {
        // One stream per step, so a resumed run draws the samples an
        // uninterrupted run would have drawn.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64);
        sample_batch(&sequences, tc, &mut rng)
    };
    let on_step = |r: &mvs_core::training::StepReport, net: &DisparityNet, adam: &Adam| -> Result<()> {
        writeln!(trace, "{},{}", r.step, r.loss).map_err(io_err(job.trace))?;
        if (r.step + 1) % every == 0 {
            eprintln!("step {:>7}  loss {:.5}  N={}", r.step + 1, r.loss, r.neighbors);
        }
        if tc.checkpoint_every > 0 && (r.step + 1) % tc.checkpoint_every == 0 {
            trace.flush().map_err(io_err(job.trace))?;
            save_training_checkpoint(job.out, net, adam)?;
        }
        Ok(())
    };
    let result = train_stage(&mut net, &mut adam, &run, sample, on_step);
    trace.flush().map_err(io_err(job.trace))?;
    result?;
    save_training_checkpoint(job.out, &net, &adam)?;
    println!("{}", job.out.display());
    Ok(())
}

pub struct PredictJob<'a> {
    pub manifest: &'a Path,
    pub ref_id: u32,
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub distribution: Option<&'a Path>,
    pub refine: bool,
    /// D was set by flag or config file and must match the checkpoint.
    pub levels_fixed: bool,
}

pub fn predict(cfg: &mut PipelineConfig, job: PredictJob) -> CmdResult {
    let (net, _) = DisparityNet::<f32>::load(job.checkpoint, None)?;
    let d = net.config.disparity_levels;
    if job.levels_fixed && cfg.sweep.levels != d {
        return Err(Error::Config(format!(
            "{} levels requested but checkpoint {} has D = {d}",
            cfg.sweep.levels,
            job.checkpoint.display()
        ))
        .into());
    }
    cfg.sweep.levels = d;
    cfg.network = net.config.clone();
    cfg.validate()?;
    let seq = load_sequence(job.manifest)?;
    let (reference, neighbors) = reference_and_neighbors(cfg, &seq, job.ref_id)?;
    let grid = sweep_grid(cfg, &seq, reference)?;
    let volume = build_volume(reference, &neighbors, &grid, cfg.sweep.memory_budget)?;
    let mut dist = tile_predict(&net, &volume, &reference.image, cfg.sweep.tile, cfg.sweep.core)?;
    if job.refine {
        dist = crf_refine(&dist, &reference.image, &cfg.crf)?;
    }
    save_disparity(job.out, &predict_raw(&dist))?;
    if let Some(p) = job.distribution {
        distribution_to_archive(&dist).save(p)?;
    }
    println!("{}", job.out.display());
    Ok(())
}

pub fn refine(
    cfg: &PipelineConfig,
    distribution: &Path,
    manifest: &Path,
    ref_id: u32,
    out: &Path,
    out_distribution: Option<&Path>,
) -> CmdResult {
    let dist = distribution_from_archive(&Archive::load(distribution)?, distribution)?;
    let seq = load_sequence(manifest)?;
    let refined = crf_refine(&dist, &seq.view(ref_id)?.image, &cfg.crf)?;
    save_disparity(out, &predict_raw(&refined))?;
    if let Some(p) = out_distribution {
        distribution_to_archive(&refined).save(p)?;
    }
    println!("{}", out.display());
    Ok(())
}

pub struct EvaluateJob<'a> {
    pub pred: &'a Path,
    pub manifest: &'a Path,
    pub ref_id: u32,
    pub gt: Option<&'a Path>,
    pub report: Option<&'a Path>,
    pub curve: Option<&'a Path>,
    /// `None` picks geometric when ground truth exists.
    pub photometric_curve: Option<bool>,
    pub thresholds: usize,
    pub max_threshold: Option<f64>,
}

fn masked_mean(values: &[f64], mask: &[bool]) -> Option<f64> {
    let (s, n) = values.iter().zip(mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(cfg: &PipelineConfig, job: EvaluateJob) -> CmdResult {
    let pred = load_disparity(job.pred)?;
    let seq = load_sequence(job.manifest)?;
    let idx = seq.index_of(job.ref_id)?;
    let reference = &seq.views[idx];
    let gt: Option<DisparityMap> = match job.gt {
        Some(p) => Some(load_disparity(p)?),
        None => seq.ground_truth[idx].clone(),
    };
    let available = seq.views.len() - 1;
    let ids = neighbor_ids(&seq, job.ref_id, cfg.sweep.neighbors.min(available).max(1))?;
    let neighbors = ids.iter().map(|&id| seq.view(id)).collect::<Result<Vec<_>>>()?;

    let geometric = gt.as_ref().map(|g| geometric_error_map(&pred, g)).transpose()?;
    let photometric = photometric_error_map(&pred, reference, &neighbors)?;
    let geometric_mean = geometric.as_ref().map(|(e, m)| masked_mean(e, m).ok_or(Error::EmptyMetric)).transpose()?;
    let photometric_mean = masked_mean(&photometric.0, &photometric.1).ok_or(Error::EmptyMetric)?;

    let use_photometric = job.photometric_curve.unwrap_or(geometric.is_none());
    let (name, (errors, mask)) = match (&geometric, use_photometric) {
        (_, true) => ("photometric", &photometric),
        (Some(g), false) => ("geometric", g),
        (None, false) => {
            return Err(Failure::Usage("a geometric curve needs ground truth (--gt or the manifest)".into()));
        }
    };
    let max_threshold = job.max_threshold.unwrap_or_else(|| {
        let m = errors.iter().zip(mask).filter(|(_, &ok)| ok).map(|(&e, _)| e).fold(0.0f64, f64::max);
        // Just above the largest error so the last point reaches 1.
        if m > 0.0 {
            m * (1.0 + 1e-9) + f64::MIN_POSITIVE
        } else {
            1e-6
        }
    });
    if !(max_threshold > 0.0) || !max_threshold.is_finite() {
        return Err(Failure::Usage(format!("--max-threshold must be positive, got {max_threshold}")));
    }
    let curve = completeness_curve(errors, mask, &linear_thresholds(max_threshold, job.thresholds))?;

    let report = json!({
        "reference": job.ref_id,
        "neighbors": ids,
        "geometric_error": geometric_mean,
        "geometric_pixels": geometric.as_ref().map(|(_, m)| m.iter().filter(|&&v| v).count()),
        "photometric_error": photometric_mean,
        "photometric_pixels": photometric.1.iter().filter(|&&v| v).count(),
        "completeness": {
            "metric": name,
            "thresholds": curve.thresholds,
            "fractions": curve.fractions,
        },
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match job.report {
        Some(p) => write_file(p, text)?,
        None => print!("{text}"),
    }
    if let Some(p) = job.curve {
        write_file(p, curve.to_csv())?;
    }
    Ok(())
}

pub fn plot(curves: &[std::path::PathBuf], out: &Path, title: &str) -> CmdResult {
    let mut loaded = Vec::with_capacity(curves.len());
    for p in curves {
        let text = fs::read_to_string(p).map_err(io_err(p))?;
        let curve = CompletenessCurve::from_csv(&text, p)?;
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        loaded.push((label, curve));
    }
    write_file(out, completeness_svg(&loaded, title))?;
    println!("{}", out.display());
    Ok(())
}
