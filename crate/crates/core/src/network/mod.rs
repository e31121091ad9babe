//! The disparity network: patch matching, per-neighbor aggregation with
//! semantic features, set aggregation by element-wise max, and tiled
//! whole-image inference.
//!
//! Parameters live in a flat map keyed `<layer>.weight` / `<layer>.bias`.
//! Layer names:
//!
//! * `match.feature`, `match.fuse.{0,1,2}`: patch matching
//! * `encoder.{1..5}.{down,conv}`, `decoder.{0..4}.{conv_a,conv_b}`,
//!   `decoder.head`, `semantic.{0..4}`: full per-neighbor aggregation
//! * `stage1_intra.{0,1}`: reduced per-neighbor aggregation
//! * `aggregate.conv`, `aggregate.out`: set aggregation

mod config;
mod extractor;
mod tiling;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};
use crate::image::{reflect_index, Image};
use crate::maps::DisparityDistribution;
use crate::nn::ops::softmax_channels;
use crate::nn::{ConvSpec, Gradients, Graph, Scalar, Tensor, Var};
use crate::sweep::PlaneSweepVolume;

pub use config::NetworkConfig;
pub use extractor::SemanticExtractor;
pub use tiling::{tile_layout, tile_predict, TileSpan};

const SEMANTIC_SCALE: f64 = 0.01;
pub const CHECKPOINT_VERSION: u64 = 1;

/// Which per-neighbor aggregation the network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Encoder-decoder with semantic features.
    Full,
    /// Two plain 3×3 convolutions (first training stage).
    Reduced,
}

pub type Weights<T = f32> = BTreeMap<String, Tensor<T>>;

/// Every trainable convolution of the given architecture, in build order.
pub fn layer_specs(config: &NetworkConfig, arch: Architecture) -> Vec<(String, ConvSpec)> {
    let c = config;
    let d = c.disparity_levels;
    let cm = c.width(c.match_channels);
    let co = c.match_out_channels;
    let cv = c.width(c.volume_channels);
    let mut layers = vec![
        ("match.feature".to_string(), ConvSpec::new(3, cm, 3, 1)),
        ("match.fuse.0".to_string(), ConvSpec::new(2 * cm, cm, 3, 1)),
        ("match.fuse.1".to_string(), ConvSpec::new(cm, cm, 3, 1)),
        ("match.fuse.2".to_string(), ConvSpec::new(cm, co, 3, 1)),
    ];
    match arch {
        Architecture::Reduced => {
            layers.push(("stage1_intra.0".into(), ConvSpec::new(co * d, cv, 3, 1)));
            layers.push(("stage1_intra.1".into(), ConvSpec::new(cv, cv, 3, 1)));
        }
        Architecture::Full => {
            let enc: Vec<usize> = c.encoder_widths.iter().map(|&w| c.width(w)).collect();
            let dec: Vec<usize> = c.decoder_widths.iter().map(|&w| c.width(w)).collect();
            let sem = c.width(c.semantic_channels);
            let mut in_ch = co * d;
            for k in 1..=5 {
                layers.push((format!("encoder.{k}.down"), ConvSpec::new(in_ch, enc[k - 1], 3, 2)));
                layers.push((format!("encoder.{k}.conv"), ConvSpec::new(enc[k - 1], enc[k - 1], 3, 1)));
                in_ch = enc[k - 1];
            }
            for (k, &w) in c.extractor_widths.iter().enumerate() {
                layers.push((format!("semantic.{k}"), ConvSpec::new(c.width(w), sem, 1, 1)));
            }
            for k in (0..5).rev() {
                let up = if k == 4 { enc[4] } else { dec[k + 1] };
                let skip = if k == 0 { co * d } else { enc[k - 1] };
                layers.push((format!("decoder.{k}.conv_a"), ConvSpec::new(up + skip + sem, dec[k], 3, 1)));
                layers.push((format!("decoder.{k}.conv_b"), ConvSpec::new(dec[k], dec[k], 3, 1)));
            }
            layers.push(("decoder.head".into(), ConvSpec::new(dec[0], cv, 3, 1)));
        }
    }
    layers.push(("aggregate.conv".into(), ConvSpec::new(cv, cv, 3, 1)));
    layers.push(("aggregate.out".into(), ConvSpec::new(cv, d, 3, 1)));
    layers
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Weight and zero bias for one layer, N(0, 1/fan_in). The stream depends
/// only on `(seed, name)`, so a layer's initial value does not depend on
/// which other layers exist.
pub fn init_layer<T: Scalar>(name: &str, spec: &ConvSpec, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
    let normal = Normal::new(0.0, fan_in.recip().sqrt()).expect("positive std");
    let shape = spec.weight_shape();
    let n = shape.iter().product();
    let w = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
    (Tensor::from_vec(&shape, w).expect("sized"), Tensor::zeros(&[spec.out_channels]))
}

/// Network inputs on one spatial window.
#[derive(Debug, Clone)]
pub struct NetInput<T: Scalar = f32> {
    /// Reference colors, (1, 3, H, W) in [0, 1].
    pub reference: Tensor<T>,
    /// Swept neighbor colors, (N·D, 3, H, W) in [-0.5, 0.5], index n·D + d.
    pub swept: Tensor<T>,
    pub neighbors: usize,
}

impl<T: Scalar> NetInput<T> {
    /// Planar copy of a window of the volume and reference image. Windows
    /// reaching past the border are filled by reflection.
    pub fn from_volume_window(
        volume: &PlaneSweepVolume,
        reference: &Image,
        neighbors: &[usize],
        (x0, y0): (isize, isize),
        (w, h): (usize, usize),
    ) -> Result<Self> {
        if reference.width() != volume.width || reference.height() != volume.height || reference.channels() != 3 {
            return Err(Error::Shape(format!(
                "reference {}x{}x{} does not match volume {}x{}",
                reference.width(),
                reference.height(),
                reference.channels(),
                volume.width,
                volume.height
            )));
        }
        if let Some(&n) = neighbors.iter().find(|&&n| n >= volume.num_neighbors()) {
            return Err(Error::Shape(format!("neighbor {n} out of range ({})", volume.num_neighbors())));
        }
        let xs: Vec<usize> = (0..w).map(|x| reflect_index(x0 + x as isize, volume.width)).collect();
        let ys: Vec<usize> = (0..h).map(|y| reflect_index(y0 + y as isize, volume.height)).collect();
        let hw = w * h;
        let mut r = vec![T::zero(); 3 * hw];
        for (y, &sy) in ys.iter().enumerate() {
            for (x, &sx) in xs.iter().enumerate() {
                let px = reference.pixel(sx, sy);
                for c in 0..3 {
                    r[c * hw + y * w + x] = T::lit(px[c] as f64);
                }
            }
        }
        let levels = volume.levels();
        let mut s = vec![T::zero(); neighbors.len() * levels * 3 * hw];
        for (i, &n) in neighbors.iter().enumerate() {
            for d in 0..levels {
                let src = volume.slice(n, d);
                let dst = &mut s[(i * levels + d) * 3 * hw..(i * levels + d + 1) * 3 * hw];
                for (y, &sy) in ys.iter().enumerate() {
                    for (x, &sx) in xs.iter().enumerate() {
                        let o = (sy * volume.width + sx) * 3;
                        for c in 0..3 {
                            dst[c * hw + y * w + x] = T::lit(src[o + c] as f64);
                        }
                    }
                }
            }
        }
        Ok(Self {
            reference: Tensor::from_vec(&[1, 3, h, w], r)?,
            swept: Tensor::from_vec(&[neighbors.len() * levels, 3, h, w], s)?,
            neighbors: neighbors.len(),
        })
    }

    /// The whole volume with all its neighbors.
    pub fn from_volume(volume: &PlaneSweepVolume, reference: &Image) -> Result<Self> {
        let all: Vec<usize> = (0..volume.num_neighbors()).collect();
        Self::from_volume_window(volume, reference, &all, (0, 0), (volume.width, volume.height))
    }

    pub fn cast<U: Scalar>(&self) -> NetInput<U> {
        NetInput { reference: self.reference.cast(), swept: self.swept.cast(), neighbors: self.neighbors }
    }
}

#[derive(Debug, Clone)]
pub struct DisparityNet<T: Scalar = f32> {
    pub config: NetworkConfig,
    pub architecture: Architecture,
    pub weights: Weights<T>,
    specs: BTreeMap<String, ConvSpec>,
    extractor: SemanticExtractor<T>,
}

impl<T: Scalar> DisparityNet<T> {
    pub fn new_random(config: NetworkConfig, architecture: Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = Weights::new();
        for (name, spec) in layer_specs(&config, architecture) {
            let (w, b) = init_layer(&name, &spec, seed);
            weights.insert(format!("{name}.weight"), w);
            weights.insert(format!("{name}.bias"), b);
        }
        Self::from_weights(config, architecture, weights)
    }

    /// Wraps existing weights, checking that every expected tensor is
    /// present with the right shape and nothing else is.
    pub fn from_weights(config: NetworkConfig, architecture: Architecture, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        let specs: BTreeMap<String, ConvSpec> = layer_specs(&config, architecture).into_iter().collect();
        let expected = Self::expected_shapes(&specs);
        for (name, shape) in &expected {
            match weights.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!("weight {name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Config(format!("missing weight {name}"))),
            }
        }
        if let Some(extra) = weights.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected weight {extra}")));
        }
        let ex_widths = config.extractor_widths.map(|w| config.width(w));
        let extractor = SemanticExtractor::random(ex_widths, config.extractor_seed);
        Ok(Self { config, architecture, weights, specs, extractor })
    }

    fn expected_shapes(specs: &BTreeMap<String, ConvSpec>) -> BTreeMap<String, Vec<usize>> {
        specs
            .iter()
            .flat_map(|(name, s)| {
                [(format!("{name}.weight"), s.weight_shape().to_vec()), (format!("{name}.bias"), vec![s.out_channels])]
            })
            .collect()
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }

    pub fn extractor(&self) -> &SemanticExtractor<T> {
        &self.extractor
    }

    pub fn set_extractor(&mut self, extractor: SemanticExtractor<T>) -> Result<()> {
        let want = self.config.extractor_widths.map(|w| self.config.width(w));
        if extractor.widths() != want {
            return Err(Error::Config(format!(
                "extractor widths {:?} do not match network {want:?}",
                extractor.widths()
            )));
        }
        self.extractor = extractor;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DisparityNet<U> {
        DisparityNet {
            config: self.config.clone(),
            architecture: self.architecture,
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            specs: self.specs.clone(),
            extractor: self.extractor.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    fn bind(&self, g: &mut Graph<T>) -> Params {
        Params(self.weights.iter().map(|(k, v)| (k.clone(), g.param(k, v))).collect())
    }

    fn layer(&self, g: &mut Graph<T>, p: &Params, name: &str, x: Var, activate: bool) -> Result<Var> {
        let spec = *self.specs.get(name).ok_or_else(|| Error::Config(format!("layer {name} not in network")))?;
        let y = g.conv(x, p.get(&format!("{name}.weight")), p.get(&format!("{name}.bias")), spec)?;
        Ok(if activate { g.selu(y) } else { y })
    }

    fn match_graph(&self, g: &mut Graph<T>, p: &Params, reference: Var, swept: Var) -> Result<Var> {
        let fr = self.layer(g, p, "match.feature", reference, true)?;
        let fs = self.layer(g, p, "match.feature", swept, true)?;
        let mut x = g.concat(&[fr, fs])?;
        for i in 0..3 {
            x = self.layer(g, p, &format!("match.fuse.{i}"), x, true)?;
        }
        Ok(x)
    }

    fn pyramid_graph(&self, g: &mut Graph<T>, p: &Params, raw: Vec<Tensor<T>>) -> Result<Vec<Var>> {
        raw.into_iter()
            .enumerate()
            .map(|(k, t)| {
                let x = g.input(t);
                let x = g.scale(x, T::lit(SEMANTIC_SCALE));
                self.layer(g, p, &format!("semantic.{k}"), x, true)
            })
            .collect()
    }

    fn intra_graph(&self, g: &mut Graph<T>, p: &Params, volume: Var, pyramid: &[Var]) -> Result<Var> {
        match self.architecture {
            Architecture::Reduced => {
                let x = self.layer(g, p, "stage1_intra.0", volume, true)?;
                self.layer(g, p, "stage1_intra.1", x, true)
            }
            Architecture::Full => {
                let mut enc = vec![volume];
                for k in 1..=5 {
                    let x = self.layer(g, p, &format!("encoder.{k}.down"), enc[k - 1], true)?;
                    enc.push(self.layer(g, p, &format!("encoder.{k}.conv"), x, true)?);
                }
                let mut h = enc[5];
                for k in (0..5).rev() {
                    let shape = g.value(enc[k]).shape().to_vec();
                    let up = g.resize(h, shape[2], shape[3])?;
                    let x = g.concat(&[up, enc[k], pyramid[k]])?;
                    let x = self.layer(g, p, &format!("decoder.{k}.conv_a"), x, true)?;
                    h = self.layer(g, p, &format!("decoder.{k}.conv_b"), x, true)?;
                }
                self.layer(g, p, "decoder.head", h, true)
            }
        }
    }

    fn inter_graph(&self, g: &mut Graph<T>, p: &Params, volumes: Var) -> Result<Var> {
        let m = g.max_over_batch(volumes)?;
        let x = self.layer(g, p, "aggregate.conv", m, true)?;
        self.layer(g, p, "aggregate.out", x, false)
    }

    /// Records the whole forward pass and returns the logits node.
    fn logits_graph(&self, g: &mut Graph<T>, p: &Params, input: &NetInput<T>) -> Result<Var> {
        let (_, c, h, w) = input.reference.dims4()?;
        let (b, sc, sh, sw) = input.swept.dims4()?;
        let d = self.config.disparity_levels;
        if c != 3 || sc != 3 || (sh, sw) != (h, w) || b != input.neighbors * d || input.neighbors == 0 {
            return Err(Error::Shape(format!(
                "input reference {:?} / swept {:?} inconsistent with {} neighbors x {d} levels",
                input.reference.shape(),
                input.swept.shape(),
                input.neighbors
            )));
        }
        let centered = g.input(input.reference.map(|v| v - T::lit(0.5)));
        let swept = g.input(input.swept.clone());
        let feats = self.match_graph(g, p, centered, swept)?;
        let co = self.config.match_out_channels;
        let volume = g.reshape(feats, &[input.neighbors, d * co, h, w])?;
        let pyramid = match self.architecture {
            Architecture::Full => {
                let raw = self.extractor.extract(&input.reference)?;
                self.pyramid_graph(g, p, raw)?
            }
            Architecture::Reduced => Vec::new(),
        };
        let volumes = self.intra_graph(g, p, volume, &pyramid)?;
        self.inter_graph(g, p, volumes)
    }

    /// Four-channel (configurable) matching features for each swept patch
    /// against the reference patch. Inputs are (1|B, 3, H, W) in [-0.5, 0.5].
    pub fn patch_match_features(&self, reference: &Tensor<T>, swept: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = reference.dims4()?;
        let (_, _, sh, sw) = swept.dims4()?;
        if (h, w) != (sh, sw) {
            return Err(Error::Shape(format!("patch shapes {:?} and {:?} differ", reference.shape(), swept.shape())));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let (r, s) = (g.input(reference.clone()), g.input(swept.clone()));
        let out = self.match_graph(&mut g, &p, r, s)?;
        Ok(g.take(out))
    }

    /// Projected semantic features at scales 1 … 1/16 for a (1, 3, H, W)
    /// reference in [0, 1].
    pub fn semantic_pyramid(&self, reference: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.semantic_pyramid_from(self.extractor.extract(reference)?)
    }

    /// Projection half of [`Self::semantic_pyramid`], on precomputed
    /// extractor activations.
    pub fn semantic_pyramid_from(&self, raw: Vec<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        self.require_full("semantic_pyramid")?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let vars = self.pyramid_graph(&mut g, &p, raw)?;
        Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Per-neighbor feature volumes (N, c_volume, H, W) from matching features
    /// stacked as (N, 4·D, H, W). `pyramid` is ignored by the reduced network.
    pub fn intra_volume_aggregate(&self, match_features: &Tensor<T>, pyramid: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (_, c, _, _) = match_features.dims4()?;
        let want = self.config.match_out_channels * self.config.disparity_levels;
        if c != want {
            return Err(Error::Shape(format!("matching volume has {c} channels, expected {want}")));
        }
        if self.architecture == Architecture::Full && pyramid.len() != 5 {
            return Err(Error::Shape(format!("semantic pyramid needs 5 levels, got {}", pyramid.len())));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let v = g.input(match_features.clone());
        let pyr: Vec<Var> = pyramid.iter().map(|t| g.input(t.clone())).collect();
        let out = self.intra_graph(&mut g, &p, v, &pyr)?;
        Ok(g.take(out))
    }

    /// Logits (1, D, H, W) from a non-empty set of per-neighbor volumes.
    pub fn inter_volume_aggregate(&self, volumes: &[Tensor<T>]) -> Result<Tensor<T>> {
        if volumes.is_empty() {
            return Err(Error::EmptySet);
        }
        let parts: Vec<Tensor<T>> = volumes.to_vec();
        let mut data = Vec::new();
        let first = parts[0].dims4()?;
        for t in &parts {
            let d = t.dims4()?;
            if (d.1, d.2, d.3) != (first.1, first.2, first.3) {
                return Err(Error::Shape(format!("volume shapes {:?} and {:?} differ", parts[0].shape(), t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let batch: usize = parts.iter().map(|t| t.shape()[0]).sum();
        let stacked = Tensor::from_vec(&[batch, first.1, first.2, first.3], data)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let v = g.input(stacked);
        let out = self.inter_graph(&mut g, &p, v)?;
        Ok(g.take(out))
    }

    pub fn forward_logits(&self, input: &NetInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let out = self.logits_graph(&mut g, &p, input)?;
        Ok(g.take(out))
    }

    /// Per-pixel softmax probabilities, (1, D, H, W).
    pub fn forward_probs(&self, input: &NetInput<T>) -> Result<Tensor<T>> {
        softmax_channels(&self.forward_logits(input)?)
    }

    /// Mean cross-entropy over valid pixels and its gradient for every
    /// parameter. `labels` and `valid` are row-major H×W.
    pub fn loss_and_gradients(&self, input: &NetInput<T>, labels: &[usize], valid: &[bool]) -> Result<(f64, Gradients<T>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let logits = self.logits_graph(&mut g, &p, input)?;
        let loss = g.cross_entropy(logits, labels, valid)?;
        let value = g.value(loss).data()[0].as_f64();
        Ok((value, g.backward(loss)?))
    }

    pub fn loss(&self, input: &NetInput<T>, labels: &[usize], valid: &[bool]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let logits = self.logits_graph(&mut g, &p, input)?;
        let loss = g.cross_entropy(logits, labels, valid)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    fn require_full(&self, what: &str) -> Result<()> {
        match self.architecture {
            Architecture::Full => Ok(()),
            Architecture::Reduced => Err(Error::Config(format!("{what} needs the full architecture"))),
        }
    }

    fn check_volume(&self, volume: &PlaneSweepVolume) -> Result<()> {
        if volume.levels() != self.config.disparity_levels {
            return Err(Error::Config(format!(
                "volume has {} disparity levels, network expects {}",
                volume.levels(),
                self.config.disparity_levels
            )));
        }
        if volume.num_neighbors() == 0 {
            return Err(Error::EmptySet);
        }
        Ok(())
    }
}

impl DisparityNet<f32> {
    /// Distribution over the whole volume in a single pass.
    pub fn forward(&self, volume: &PlaneSweepVolume, reference: &Image) -> Result<DisparityDistribution> {
        self.check_volume(volume)?;
        let probs = self.forward_probs(&NetInput::from_volume(volume, reference)?)?;
        probs.check_finite("network output")?;
        DisparityDistribution::new(volume.width, volume.height, volume.grid, probs.into_vec())
    }

    /// Checkpoint archive: network config and architecture in the metadata,
    /// weights under `w/`, extractor weights under `extractor/`.
    pub fn to_archive(&self, step: u64) -> Archive {
        let mut a = Archive::new(serde_json::json!({
            "kind": "checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": self.config,
            "architecture": self.architecture,
            "step": step,
        }));
        for (name, t) in &self.weights {
            a.insert(format!("w/{name}"), NamedArray::f32(t.shape(), t.data().to_vec()));
        }
        for (name, arr) in self.extractor.to_archive().arrays {
            a.insert(format!("extractor/{name}"), arr);
        }
        a
    }

    /// Rebuilds a network from a checkpoint archive. With `expected` set,
    /// a differing embedded config is refused.
    pub fn from_archive(archive: &Archive, path: &Path, expected: Option<&NetworkConfig>) -> Result<(Self, u64)> {
        let meta = &archive.metadata;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("checkpoint") {
            return Err(Error::format(path, "not a network checkpoint"));
        }
        let version = meta.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION) {
            return Err(Error::format(path, format!("unsupported checkpoint version {version:?}")));
        }
        let config: NetworkConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(path, format!("network config: {e}")))?;
        let architecture: Architecture = serde_json::from_value(meta["architecture"].clone())
            .map_err(|e| Error::format(path, format!("architecture: {e}")))?;
        if let Some(want) = expected {
            if *want != config {
                return Err(Error::Config(format!(
                    "{} was trained with a different network config ({} levels, scale {}) than requested ({} levels, scale {})",
                    path.display(),
                    config.disparity_levels,
                    config.scale,
                    want.disparity_levels,
                    want.scale
                )));
            }
        }
        let step = meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut weights = Weights::new();
        for name in archive.arrays.keys().filter_map(|k| k.strip_prefix("w/")) {
            let (shape, data) = archive.get_f32(&format!("w/{name}"), path)?;
            weights.insert(name.to_string(), Tensor::from_vec(shape, data.to_vec())?);
        }
        let mut net = Self::from_weights(config, architecture, weights)?;
        let mut ex = Archive::new(serde_json::Value::Null);
        for (k, v) in &archive.arrays {
            if let Some(name) = k.strip_prefix("extractor/") {
                ex.insert(name, v.clone());
            }
        }
        if !ex.arrays.is_empty() {
            let widths = net.extractor.widths();
            net.extractor = SemanticExtractor::from_archive(&ex, path, widths)?;
        }
        Ok((net, step))
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        self.to_archive(step).save(path)
    }

    pub fn load(path: &Path, expected: Option<&NetworkConfig>) -> Result<(Self, u64)> {
        Self::from_archive(&Archive::load(path)?, path, expected)
    }
}

/// One sampled coordinate of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientSample {
    pub fn relative_error(&self) -> f64 {
        crate::nn::gradcheck::relative_error(self.analytic, self.numeric)
    }
}

impl DisparityNet<f64> {
    /// Compares the analytic loss gradient with central differences on
    /// `per_tensor` random coordinates of every parameter tensor.
    ///
    /// A coordinate whose forward and backward difference quotients disagree
    /// sits on or next to a kink (SELU at zero, a max tie) and is replaced
    /// by another draw, up to a bounded number of attempts.
    pub fn sampled_gradient_check(
        &self,
        input: &NetInput<f64>,
        labels: &[usize],
        valid: &[bool],
        per_tensor: usize,
        epsilon: f64,
        seed: u64,
    ) -> Result<Vec<GradientSample>> {
        use rand::Rng;
        let (_, grads) = self.loss_and_gradients(input, labels, valid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = self.clone();
        let base = self.loss(input, labels, valid)?;
        // (central, forward, backward) difference quotients.
        let mut quotients = |name: &str, i: usize| -> Result<(f64, f64, f64)> {
            let orig = probe.weights[name].data()[i];
            probe.weights.get_mut(name).unwrap().data_mut()[i] = orig + epsilon;
            let fp = probe.loss(input, labels, valid)?;
            probe.weights.get_mut(name).unwrap().data_mut()[i] = orig - epsilon;
            let fm = probe.loss(input, labels, valid)?;
            probe.weights.get_mut(name).unwrap().data_mut()[i] = orig;
            Ok(((fp - fm) / (2.0 * epsilon), (fp - base) / epsilon, (base - fm) / epsilon))
        };
        let mut out = Vec::new();
        for (name, t) in &self.weights {
            let mut taken = 0;
            for _ in 0..per_tensor * 8 {
                if taken == per_tensor {
                    break;
                }
                let i = rng.random_range(0..t.len());
                let (central, fwd, bwd) = quotients(name, i)?;
                if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) + 1e-8 {
                    continue;
                }
                out.push(GradientSample { tensor: name.clone(), index: i, analytic: grads[name].data()[i], numeric: central });
                taken += 1;
            }
        }
        Ok(out)
    }
}

struct Params(BTreeMap<String, Var>);

impl Params {
    fn get(&self, name: &str) -> Var {
        self.0[name]
    }
}
