//! Whole-image inference by overlapping windows whose centers tile the image.

use super::{DisparityNet, NetInput};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::maps::DisparityDistribution;
use crate::sweep::PlaneSweepVolume;

/// One window along an axis: the network sees `[window_start,
/// window_start + tile)` (reflected past the border) and the output keeps
/// `[keep_start, keep_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileSpan {
    pub window_start: isize,
    pub keep_start: usize,
    pub keep_end: usize,
}

/// Windows covering `0..n` so that the kept ranges partition it. Full cores
/// sit at multiples of `core`; a short remainder is taken from a core placed
/// flush with the far border. Windows are centered on their core and then
/// shifted inward, unless the image is narrower than a tile, in which case
/// the window is centered on the image and the excess is reflected.
pub fn tile_layout(n: usize, tile: usize, core: usize) -> Result<Vec<TileSpan>> {
    if core == 0 || tile < core || n == 0 {
        return Err(Error::InvalidRange(format!("tile {tile} / core {core} over extent {n}")));
    }
    let margin = ((tile - core) / 2) as isize;
    let (lo, hi) = {
        let slack = n as isize - tile as isize;
        (slack.min(0), slack.max(0))
    };
    let window = |core_start: isize| -> isize {
        if n >= tile {
            (core_start - margin).clamp(lo, hi)
        } else {
            // Center the image inside the window.
            -((tile - n) as isize / 2)
        }
    };
    let mut spans = Vec::new();
    let mut start = 0;
    while start + core <= n {
        spans.push(TileSpan { window_start: window(start as isize), keep_start: start, keep_end: start + core });
        start += core;
    }
    if start < n {
        let core_start = n.saturating_sub(core) as isize;
        spans.push(TileSpan { window_start: window(core_start), keep_start: start, keep_end: n });
    }
    Ok(spans)
}

/// Distribution over the whole reference image, assembled from per-window
/// forward passes.
pub fn tile_predict(
    net: &DisparityNet<f32>,
    volume: &PlaneSweepVolume,
    reference: &Image,
    tile: usize,
    core: usize,
) -> Result<DisparityDistribution> {
    net.check_volume(volume)?;
    let (w, h) = (volume.width, volume.height);
    let xs = tile_layout(w, tile, core)?;
    let ys = tile_layout(h, tile, core)?;
    let levels = volume.levels();
    let neighbors: Vec<usize> = (0..volume.num_neighbors()).collect();
    let mut probs = vec![0.0f32; levels * w * h];
    for ty in &ys {
        for tx in &xs {
            let input = NetInput::from_volume_window(
                volume,
                reference,
                &neighbors,
                (tx.window_start, ty.window_start),
                (tile, tile),
            )?;
            let out = net.forward_probs(&input)?;
            out.check_finite("network output")?;
            let plane = tile * tile;
            for d in 0..levels {
                for y in ty.keep_start..ty.keep_end {
                    let wy = (y as isize - ty.window_start) as usize;
                    for x in tx.keep_start..tx.keep_end {
                        let wx = (x as isize - tx.window_start) as usize;
                        probs[d * w * h + y * w + x] = out.data()[d * plane + wy * tile + wx];
                    }
                }
            }
        }
    }
    DisparityDistribution::new(w, h, volume.grid, probs)
}
