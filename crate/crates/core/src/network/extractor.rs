//! Fixed multi-scale feature extractor with the VGG-19 layer geometry.
//!
//! The taps are the second convolution of each block (conv1_2 … conv5_2).
//! Weights are either seeded random (the default) or read from an array
//! archive holding `conv{b}_{i}.weight` / `conv{b}_{i}.bias` entries, e.g.
//! converted ImageNet weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};
use crate::nn::ops::{conv2d, ConvSpec};
use crate::nn::{Scalar, Tensor};

/// Convolutions per block in VGG-19.
const BLOCK_DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];
/// The tap is taken after this many convolutions of each block.
const TAP: usize = 2;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
struct FixedConv<T: Scalar> {
    name: String,
    spec: ConvSpec,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SemanticExtractor<T: Scalar = f32> {
    widths: [usize; 5],
    blocks: Vec<Vec<FixedConv<T>>>,
}

/// Layer names and specs actually evaluated: every convolution that feeds a
/// later tap. The last block stops at its tap.
fn layer_plan(widths: &[usize; 5]) -> Vec<Vec<(String, ConvSpec)>> {
    let mut in_ch = 3;
    let mut plan = Vec::new();
    for (b, (&width, &depth)) in widths.iter().zip(&BLOCK_DEPTHS).enumerate() {
        let used = if b == 4 { TAP } else { depth };
        let mut block = Vec::new();
        for i in 0..used {
            block.push((format!("conv{}_{}", b + 1, i + 1), ConvSpec::new(in_ch, width, 3, 1)));
            in_ch = width;
        }
        plan.push(block);
    }
    plan
}

impl<T: Scalar> SemanticExtractor<T> {
    /// He-initialized random weights from `seed`.
    pub fn random(widths: [usize; 5], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layer_plan(&widths)
            .into_iter()
            .map(|block| {
                block
                    .into_iter()
                    .map(|(name, spec)| {
                        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
                        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                        let n: usize = spec.weight_shape().iter().product();
                        let data = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
                        FixedConv {
                            name,
                            spec,
                            weight: Tensor::from_vec(&spec.weight_shape(), data).expect("sized"),
                            bias: Tensor::zeros(&[spec.out_channels]),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { widths, blocks }
    }

    pub fn widths(&self) -> [usize; 5] {
        self.widths
    }

    pub fn cast<U: Scalar>(&self) -> SemanticExtractor<U> {
        SemanticExtractor {
            widths: self.widths,
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|c| FixedConv {
                            name: c.name.clone(),
                            spec: c.spec,
                            weight: c.weight.cast(),
                            bias: c.bias.cast(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Five tapped feature maps for a (1, 3, H, W) image in [0, 1], at
    /// spatial sizes `ceil(H / 2^k)` for k = 0..5.
    pub fn extract(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("extractor needs RGB input, got {c} channels")));
        }
        let hw = h * w;
        let mut x = image.clone();
        for bi in 0..b {
            for ch in 0..3 {
                let (m, s) = (T::lit(IMAGENET_MEAN[ch]), T::lit(IMAGENET_STD[ch]));
                let plane = &mut x.data_mut()[(bi * 3 + ch) * hw..(bi * 3 + ch + 1) * hw];
                plane.iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        let mut taps = Vec::with_capacity(5);
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                x = max_pool2(&x)?;
            }
            for (i, conv) in block.iter().enumerate() {
                x = conv2d(&x, &conv.spec, &conv.weight, &conv.bias)?.map(|v| v.max(T::zero()));
                if i + 1 == TAP {
                    taps.push(x.clone());
                }
            }
        }
        Ok(taps)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(serde_json::json!({"kind": "extractor", "widths": self.widths}));
        for conv in self.blocks.iter().flatten() {
            let w: Vec<f32> = conv.weight.data().iter().map(|v| v.as_f64() as f32).collect();
            let b: Vec<f32> = conv.bias.data().iter().map(|v| v.as_f64() as f32).collect();
            a.insert(format!("{}.weight", conv.name), NamedArray::f32(conv.weight.shape(), w));
            a.insert(format!("{}.bias", conv.name), NamedArray::f32(conv.bias.shape(), b));
        }
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads weights for the given block widths; entries the extractor does
    /// not evaluate (e.g. conv5_3) are ignored.
    pub fn load(path: &Path, widths: [usize; 5]) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path, widths)
    }

    /// As [`Self::load`], from an archive already in memory; `path` is only
    /// used in error messages.
    pub fn from_archive(archive: &Archive, path: &Path, widths: [usize; 5]) -> Result<Self> {
        let blocks = layer_plan(&widths)
            .into_iter()
            .map(|block| {
                block
                    .into_iter()
                    .map(|(name, spec)| {
                        let (ws, wd) = archive.get_f32(&format!("{name}.weight"), path)?;
                        let (bs, bd) = archive.get_f32(&format!("{name}.bias"), path)?;
                        if ws != spec.weight_shape() || bs != [spec.out_channels] {
                            return Err(Error::Config(format!(
                                "{}: {name} has shapes {ws:?}/{bs:?}, expected {:?}/[{}]",
                                path.display(),
                                spec.weight_shape(),
                                spec.out_channels
                            )));
                        }
                        Ok(FixedConv {
                            name,
                            spec,
                            weight: Tensor::<f32>::from_vec(ws, wd.to_vec())?.cast(),
                            bias: Tensor::<f32>::from_vec(bs, bd.to_vec())?.cast(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { widths, blocks })
    }
}

/// 2×2 max pooling, stride 2, keeping a partial last row/column.
fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    for (dst, src) in out.data_mut().chunks_mut(ho * wo).zip(x.data().chunks(h * w)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = T::neg_infinity();
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        m = m.max(src[y * w + xx]);
                    }
                }
                dst[oy * wo + ox] = m;
            }
        }
    }
    Ok(out)
}
