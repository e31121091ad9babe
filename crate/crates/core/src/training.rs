//! Labels from ground truth, seeded patch sampling, gradient clipping, Adam,
//! and the two training stages.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::image::Image;
use crate::maps::DisparityMap;
use crate::network::{init_layer, layer_specs, Architecture, DisparityNet, NetInput, Weights};
use crate::nn::{Gradients, Tensor};
use crate::sweep::{build_volume_region, DisparityGrid, PlaneSweepVolume, DEFAULT_MEMORY_BUDGET};

/// Level index per pixel (row-major) and which pixels carry a label.
/// Missing, negative or non-finite ground truth is invalid; values past the
/// last level clamp to it.
pub fn quantize_gt(gt: &DisparityMap, grid: &DisparityGrid) -> (Vec<usize>, Vec<bool>) {
    let last = grid.levels() - 1;
    gt.values
        .iter()
        .zip(&gt.valid)
        .map(|(&v, &ok)| {
            if ok && v.is_finite() && v >= 0.0 {
                let level = (v as f64 / grid.delta()).round();
                ((level as usize).min(last), true)
            } else {
                (0, false)
            }
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Per-layer bound on the gradient L2 norm.
    pub grad_clip: f64,
    pub patch: usize,
    /// Neighbor counts drawn uniformly for each sample.
    pub n_range: Vec<usize>,
    /// Relative sequence sampling weights; empty means uniform.
    pub sequence_weights: Vec<f64>,
    /// A patch needs at least this fraction of labeled pixels.
    pub min_valid_fraction: f64,
    pub max_retries: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            learning_rate: 1e-5,
            iterations: 320_000,
            grad_clip: 1.0,
            patch: 64,
            n_range: vec![1, 2, 3, 4],
            sequence_weights: Vec::new(),
            min_valid_fraction: 0.1,
            max_retries: 100,
            seed: 0,
            checkpoint_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }

    pub fn stage2() -> Self {
        Self { stage: 2, learning_rate: 1e-6, grad_clip: 0.1, ..Self::stage1() }
    }

    pub fn architecture(&self) -> Architecture {
        if self.stage == 1 {
            Architecture::Reduced
        } else {
            Architecture::Full
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.stage, 1 | 2) {
            return bad(format!("training stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be a finite value >= 0, got {}", self.learning_rate));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("gradient clip bound must be positive, got {}", self.grad_clip));
        }
        if self.patch == 0 {
            return bad("patch size must be positive".into());
        }
        if self.n_range.is_empty() || self.n_range.contains(&0) {
            return bad(format!("neighbor counts must be a non-empty set of positive values, got {:?}", self.n_range));
        }
        if self.sequence_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("sequence weights must be non-negative".into());
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

/// Frames of one scene with per-frame ground truth and the sweep grid used
/// for all of its samples.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub name: String,
    pub views: Vec<CameraView>,
    pub ground_truth: Vec<DisparityMap>,
    pub grid: DisparityGrid,
}

impl TrainSequence {
    pub fn new(name: impl Into<String>, views: Vec<CameraView>, ground_truth: Vec<DisparityMap>, grid: DisparityGrid) -> Result<Self> {
        let name = name.into();
        if views.len() != ground_truth.len() {
            return Err(Error::Shape(format!(
                "sequence {name}: {} views but {} ground-truth maps",
                views.len(),
                ground_truth.len()
            )));
        }
        for (v, g) in views.iter().zip(&ground_truth) {
            if (v.image.width(), v.image.height()) != (g.width, g.height) {
                return Err(Error::Shape(format!("sequence {name}: frame {} ground truth size differs", v.id)));
            }
        }
        Ok(Self { name, views, ground_truth, grid })
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub sequence: usize,
    pub frame: usize,
    /// Top-left corner of the patch in the reference frame.
    pub origin: (usize, usize),
    pub reference: Image,
    pub volume: PlaneSweepVolume,
    pub labels: Vec<usize>,
    pub valid: Vec<bool>,
}

impl LabeledSample {
    pub fn input(&self) -> Result<NetInput<f32>> {
        NetInput::from_volume(&self.volume, &self.reference)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// One training sample drawn from `rng`: sequence (by weight), reference
/// frame, neighbor count, neighbors, then patch position. Draws whose patch
/// has too few labeled pixels, or whose sequence is too small, are redrawn
/// up to `max_retries` times.
pub fn sample_batch(dataset: &[TrainSequence], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LabeledSample> {
    if dataset.is_empty() {
        return Err(Error::Sampling("training set is empty".into()));
    }
    let weights = if config.sequence_weights.is_empty() {
        vec![1.0; dataset.len()]
    } else if config.sequence_weights.len() == dataset.len() {
        config.sequence_weights.clone()
    } else {
        return Err(Error::Config(format!(
            "{} sequence weights for {} sequences",
            config.sequence_weights.len(),
            dataset.len()
        )));
    };
    let pick_seq = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("sequence weights: {e}")))?;
    let p = config.patch;
    for _ in 0..=config.max_retries {
        let s = pick_seq.sample(rng);
        let seq = &dataset[s];
        let frame = rng.random_range(0..seq.views.len().max(1));
        let n = *config.n_range.choose(rng).expect("validated non-empty");
        let Some(reference) = seq.views.get(frame) else { continue };
        let (w, h) = (reference.image.width(), reference.image.height());
        let others: Vec<usize> = (0..seq.views.len()).filter(|&i| i != frame).collect();
        if others.len() < n || w < p || h < p {
            continue;
        }
        let chosen: Vec<usize> = others.choose_multiple(rng, n).copied().collect();
        let x0 = rng.random_range(0..=w - p);
        let y0 = rng.random_range(0..=h - p);
        let gt = &seq.ground_truth[frame];
        let mut window = DisparityMap::filled(p, p, 0.0);
        for y in 0..p {
            for x in 0..p {
                let i = (y0 + y) * w + x0 + x;
                window.values[y * p + x] = gt.values[i];
                window.valid[y * p + x] = gt.valid[i];
            }
        }
        let (labels, valid) = quantize_gt(&window, &seq.grid);
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 || (count as f64) < config.min_valid_fraction * (p * p) as f64 {
            continue;
        }
        let nbrs: Vec<&CameraView> = chosen.iter().map(|&i| &seq.views[i]).collect();
        let volume = build_volume_region(reference, &nbrs, &seq.grid, (x0, y0, p, p), DEFAULT_MEMORY_BUDGET)?;
        return Ok(LabeledSample {
            sequence: s,
            frame,
            origin: (x0, y0),
            reference: reference.image.crop_reflect(x0 as isize, y0 as isize, p, p),
            volume,
            labels,
            valid,
        });
    }
    Err(Error::Sampling(format!(
        "no usable patch after {} attempts (patch {p}, neighbor counts {:?})",
        config.max_retries + 1,
        config.n_range
    )))
}

/// Layer a parameter tensor belongs to: its name without the `.weight` /
/// `.bias` suffix.
pub fn layer_of(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(layer, _)| layer)
}

/// Rescales each layer's gradient (weight and bias jointly) whose L2 norm
/// exceeds `bound` down to norm `bound`.
pub fn clip_gradients(grads: &mut Gradients<f32>, bound: f64) {
    let mut norms: BTreeMap<String, f64> = BTreeMap::new();
    for (name, g) in grads.iter() {
        *norms.entry(layer_of(name).to_string()).or_default() +=
            g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    for (name, g) in grads.iter_mut() {
        let norm = norms[layer_of(name)].sqrt();
        if norm > bound {
            let s = bound / norm;
            g.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * s) as f32);
        }
    }
}

/// Per-layer gradient L2 norms (weight and bias jointly).
pub fn layer_norms(grads: &Gradients<f32>) -> BTreeMap<String, f64> {
    let mut norms: BTreeMap<String, f64> = BTreeMap::new();
    for (name, g) in grads {
        *norms.entry(layer_of(name).to_string()).or_default() +=
            g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    norms.values_mut().for_each(|v| *v = v.sqrt());
    norms
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Weights,
    pub v: Weights,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { beta1, beta2, epsilon, step: 0, m: Weights::new(), v: Weights::new() }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.adam_epsilon)
    }

    /// One bias-corrected update. A zero learning rate leaves the weights
    /// untouched (the moments still advance).
    pub fn update(&mut self, weights: &mut Weights, grads: &Gradients<f32>, learning_rate: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(w) = weights.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((wi, &gi), mi), vi) in
                w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                if learning_rate != 0.0 {
                    let upd = learning_rate * (mn / c1) / ((vn / c2).sqrt() + self.epsilon);
                    *wi = (*wi as f64 - upd) as f32;
                }
            }
        }
    }
}

/// Reported after every optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub neighbors: usize,
    pub valid_pixels: usize,
}

/// First non-finite gradient tensor, by layer name.
fn non_finite_layer(grads: &Gradients<f32>) -> Option<String> {
    grads.iter().find(|(_, g)| !g.is_finite()).map(|(n, _)| layer_of(n).to_string())
}

/// Runs `config.iterations` optimizer steps on samples from `next_sample`
/// and returns the per-step loss trace. Steps are numbered from
/// `adam.step` so a resumed run continues its numbering.
pub fn train_stage<S, C>(
    net: &mut DisparityNet<f32>,
    adam: &mut Adam,
    config: &TrainConfig,
    mut next_sample: S,
    mut on_step: C,
) -> Result<Vec<f64>>
where
    S: FnMut(usize) -> Result<LabeledSample>,
    C: FnMut(&StepReport, &DisparityNet<f32>, &Adam) -> Result<()>,
{
    config.validate()?;
    if net.architecture != config.architecture() {
        return Err(Error::Config(format!(
            "stage {} trains the {:?} network, got {:?}",
            config.stage,
            config.architecture(),
            net.architecture
        )));
    }
    let mut trace = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let step = adam.step as usize;
        let sample = next_sample(step)?;
        let (loss, mut grads) = net.loss_and_gradients(&sample.input()?, &sample.labels, &sample.valid)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, layer: "loss".into() });
        }
        if let Some(layer) = non_finite_layer(&grads) {
            return Err(Error::NonFinite { step, layer });
        }
        clip_gradients(&mut grads, config.grad_clip);
        adam.update(&mut net.weights, &grads, config.learning_rate);
        if let Some((name, _)) = net.weights.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::NonFinite { step, layer: layer_of(name).to_string() });
        }
        trace.push(loss);
        let report =
            StepReport { step, loss, neighbors: sample.volume.num_neighbors(), valid_pixels: sample.valid_count() };
        on_step(&report, net, adam)?;
    }
    Ok(trace)
}

/// Which layers a stage transfer carried over and which were initialized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferReport {
    pub carried: Vec<String>,
    pub fresh: Vec<String>,
}

/// Full network whose layers take the stage-1 values wherever name and
/// shapes agree, and a fresh seeded initialization elsewhere.
pub fn transfer_to_stage2(stage1: &DisparityNet<f32>, seed: u64) -> Result<(DisparityNet<f32>, TransferReport)> {
    let config = stage1.config.clone();
    let mut weights = Weights::new();
    let mut report = TransferReport::default();
    for (name, spec) in layer_specs(&config, Architecture::Full) {
        let (wn, bn) = (format!("{name}.weight"), format!("{name}.bias"));
        let old = stage1.weights.get(&wn).zip(stage1.weights.get(&bn));
        match old {
            Some((w, b)) if w.shape() == spec.weight_shape() && b.shape() == [spec.out_channels] => {
                weights.insert(wn, w.clone());
                weights.insert(bn, b.clone());
                report.carried.push(name);
            }
            _ => {
                let (w, b) = init_layer(&name, &spec, seed);
                weights.insert(wn, w);
                weights.insert(bn, b);
                report.fresh.push(name);
            }
        }
    }
    let mut net = DisparityNet::from_weights(config, Architecture::Full, weights)?;
    net.set_extractor(stage1.extractor().clone())?;
    Ok((net, report))
}

/// Network checkpoint plus optimizer moments under `adam.m/` and `adam.v/`.
pub fn save_training_checkpoint(path: &Path, net: &DisparityNet<f32>, adam: &Adam) -> Result<()> {
    let mut a = net.to_archive(adam.step);
    if let Some(meta) = a.metadata.as_object_mut() {
        meta.insert(
            "adam".into(),
            serde_json::json!({"beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon}),
        );
    }
    for (prefix, moments) in [("adam.m", &adam.m), ("adam.v", &adam.v)] {
        for (name, t) in moments {
            a.insert(format!("{prefix}/{name}"), NamedArray::f32(t.shape(), t.data().to_vec()));
        }
    }
    a.save(path)
}

/// Restores a checkpoint written by [`save_training_checkpoint`] (or a plain
/// network checkpoint, which restarts the moments at zero).
pub fn load_training_checkpoint(
    path: &Path,
    expected: Option<&crate::network::NetworkConfig>,
    config: &TrainConfig,
) -> Result<(DisparityNet<f32>, Adam)> {
    let archive = Archive::load(path)?;
    let (net, step) = DisparityNet::from_archive(&archive, path, expected)?;
    let mut adam = Adam::from_config(config);
    let moments: Vec<(&str, &str)> = archive
        .arrays
        .keys()
        .filter_map(|k| k.split_once('/'))
        .filter(|(p, _)| *p == "adam.m" || *p == "adam.v")
        .collect();
    if !moments.is_empty() {
        adam.step = step;
        for (prefix, name) in moments {
            let (shape, data) = archive.get_f32(&format!("{prefix}/{name}"), path)?;
            let t = Tensor::from_vec(shape, data.to_vec())?;
            match prefix {
                "adam.m" => adam.m.insert(name.to_string(), t),
                _ => adam.v.insert(name.to_string(), t),
            };
        }
    }
    Ok((net, adam))
}

/// Fraction of valid pixels whose most probable level equals the label.
pub fn argmax_accuracy(net: &DisparityNet<f32>, sample: &LabeledSample) -> Result<f64> {
    let probs = net.forward_probs(&sample.input()?)?;
    let hw = sample.labels.len();
    let levels = probs.shape()[1];
    let (mut hit, mut total) = (0usize, 0usize);
    for p in 0..hw {
        if !sample.valid[p] {
            continue;
        }
        let mut best = 0;
        for d in 1..levels {
            if probs.data()[d * hw + p] > probs.data()[best * hw + p] {
                best = d;
            }
        }
        total += 1;
        hit += usize::from(best == sample.labels[p]);
    }
    if total == 0 {
        return Err(Error::EmptyMetric);
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::make_disparity_grid;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        let grid = make_disparity_grid(0.07, 8).unwrap();
        let gt = DisparityMap::new(4, 1, vec![0.034, 0.5, 0.02, -1.0], vec![true, true, false, true]).unwrap();
        let (labels, valid) = quantize_gt(&gt, &grid);
        assert_eq!(labels[..2], [3, 7]);
        assert_eq!(valid, vec![true, true, false, false]);
    }

    proptest! {
        #[test]
        fn dequantized_error_is_at_most_half_a_step(vals in proptest::collection::vec(0.0f32..1.0, 1..100), dmax in 0.05f64..2.0, levels in 2usize..64) {
            let grid = make_disparity_grid(dmax, levels).unwrap();
            let n = vals.len();
            let gt = DisparityMap::new(n, 1, vals.clone(), vec![true; n]).unwrap();
            let (labels, _) = quantize_gt(&gt, &grid);
            for (&v, &l) in vals.iter().zip(&labels) {
                if (v as f64) <= grid.max_disparity() {
                    prop_assert!((l as f64 * grid.delta() - v as f64).abs() <= grid.delta() / 2.0 + 1e-7);
                }
            }
        }
    }

    fn grads(pairs: &[(&str, Vec<f32>)]) -> Gradients<f32> {
        pairs.iter().map(|(n, v)| (n.to_string(), Tensor::from_vec(&[v.len()], v.clone()).unwrap())).collect()
    }

    #[test]
    fn clipping_examples() {
        let mut g = grads(&[("a.weight", vec![0.3, 0.4]), ("b.weight", vec![4.0, 0.0]), ("b.bias", vec![0.0])]);
        clip_gradients(&mut g, 1.0);
        assert_eq!(g["a.weight"].data(), &[0.3, 0.4]);
        assert!((layer_norms(&g)["b"] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut w: Weights = grads(&[("x.weight", vec![1.0, -2.0, 3.5])]);
        let before = w.clone();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.update(&mut w, &grads(&[("x.weight", vec![1.0, 1.0, -7.0])]), 0.0);
        assert_eq!(w, before);
        adam.update(&mut w, &grads(&[("x.weight", vec![1.0, 1.0, -7.0])]), 0.1);
        // First bias-corrected Adam step moves each weight by about lr.
        let moved: Vec<f32> = w["x.weight"].data().iter().zip(before["x.weight"].data()).map(|(a, b)| a - b).collect();
        for (m, s) in moved.iter().zip([-1.0f32, -1.0, 1.0]) {
            assert!((m - 0.1 * s).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_names_strip_suffix() {
        assert_eq!(layer_of("decoder.3.conv_a.weight"), "decoder.3.conv_a");
        assert_eq!(layer_of("x"), "x");
    }
}
