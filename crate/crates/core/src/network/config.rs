use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths and level count of the disparity network.
///
/// Every width except `match_out_channels` is multiplied by `scale` (rounded,
/// at least 1) when the layers are built, so a toy network is the full-size
/// layout with `scale < 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of disparity levels D.
    pub disparity_levels: usize,
    /// Features extracted from each patch before matching.
    pub match_channels: usize,
    /// Per-level matching features handed to the aggregation network.
    pub match_out_channels: usize,
    /// Channels of each per-neighbor aggregated volume.
    pub volume_channels: usize,
    /// Channels each semantic pyramid level is reduced to.
    pub semantic_channels: usize,
    /// Encoder outputs at scales 1/2 … 1/32.
    pub encoder_widths: [usize; 5],
    /// Decoder convolutions producing scales 1/32 … 1/2 before upsampling to
    /// 1/16 … 1, listed from the finest target scale (1) to the coarsest (1/16).
    pub decoder_widths: [usize; 5],
    /// Fixed extractor block widths at scales 1 … 1/16.
    pub extractor_widths: [usize; 5],
    pub scale: f64,
    /// Seed of the fixed extractor weights when no weight file is given.
    pub extractor_seed: u64,
}

impl NetworkConfig {
    pub fn full_size(disparity_levels: usize) -> Self {
        Self {
            disparity_levels,
            match_channels: 64,
            match_out_channels: 4,
            volume_channels: 800,
            semantic_channels: 64,
            encoder_widths: [128, 256, 512, 512, 512],
            decoder_widths: [128, 128, 256, 512, 512],
            extractor_widths: [64, 128, 256, 512, 512],
            scale: 1.0,
            extractor_seed: 0x5eed,
        }
    }

    /// Desk-scale defaults: D = 8 and every width divided by 8.
    pub fn toy() -> Self {
        Self { scale: 0.125, ..Self::full_size(8) }
    }

    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.disparity_levels < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 disparity levels, got {}",
                self.disparity_levels
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("width scale must be positive, got {}", self.scale)));
        }
        let all = [self.match_channels, self.match_out_channels, self.volume_channels, self.semantic_channels]
            .into_iter()
            .chain(self.encoder_widths)
            .chain(self.decoder_widths)
            .chain(self.extractor_widths);
        if all.into_iter().any(|c| c == 0) {
            return Err(Error::Config("all channel counts must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full_size(100)
    }
}
