//! Per-pixel disparity products: categorical distributions and scalar maps.

use crate::error::{Error, Result};
use crate::sweep::DisparityGrid;

/// Per-pixel probabilities over the disparity levels of `grid`, stored
/// planar as (level, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityDistribution {
    pub width: usize,
    pub height: usize,
    pub grid: DisparityGrid,
    pub probs: Vec<f32>,
}

impl DisparityDistribution {
    pub fn new(width: usize, height: usize, grid: DisparityGrid, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != width * height * grid.levels() {
            return Err(Error::Shape(format!(
                "distribution {}x{}x{} needs {} values, got {}",
                grid.levels(),
                height,
                width,
                width * height * grid.levels(),
                probs.len()
            )));
        }
        Ok(Self { width, height, grid, probs })
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.grid.levels()
    }

    #[inline]
    pub fn prob(&self, level: usize, pixel: usize) -> f32 {
        self.probs[level * self.width * self.height + pixel]
    }

    /// Largest deviation of a per-pixel sum from 1 (and whether any entry is
    /// negative or non-finite, reported as infinity).
    pub fn normalization_error(&self) -> f64 {
        let hw = self.width * self.height;
        let mut worst = 0.0f64;
        for p in 0..hw {
            let mut sum = 0.0f64;
            for d in 0..self.levels() {
                let v = self.probs[d * hw + p];
                if !(v >= 0.0) || !v.is_finite() {
                    return f64::INFINITY;
                }
                sum += v as f64;
            }
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Index of the most probable level per pixel, lowest index on ties.
    pub fn argmax_levels(&self) -> Vec<usize> {
        let hw = self.width * self.height;
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for d in 1..self.levels() {
                    if self.probs[d * hw + p] > self.probs[best * hw + p] {
                        best = d;
                    }
                }
                best
            })
            .collect()
    }
}

/// Scalar disparity per pixel with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} disparity map got {} values and {} flags",
                height,
                width,
                values.len(),
                valid.len()
            )));
        }
        Ok(Self { width, height, values, valid })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, values: vec![value; width * height], valid: vec![true; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn map_valid(&self, f: impl Fn(f32) -> f32) -> Self {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { f(v) } else { v })
            .collect();
        Self { values, ..self.clone() }
    }
}

/// Raw prediction: the grid disparity of each pixel's most probable level.
pub fn predict_raw(dist: &DisparityDistribution) -> DisparityMap {
    let values = dist.argmax_levels().into_iter().map(|d| dist.grid.value(d) as f32).collect();
    DisparityMap {
        width: dist.width,
        height: dist.height,
        values,
        valid: vec![true; dist.width * dist.height],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::make_disparity_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_and_uniform_predictions() {
        let grid = make_disparity_grid(0.07, 8).unwrap();
        let (w, h) = (3, 2);
        let mut probs = vec![0.0; 8 * w * h];
        for p in 0..w * h {
            probs[3 * w * h + p] = 1.0;
        }
        let dist = DisparityDistribution::new(w, h, grid, probs).unwrap();
        let map = predict_raw(&dist);
        assert!(map.values.iter().all(|&v| (v - 0.03).abs() < 1e-7));
        assert!(map.valid.iter().all(|&v| v));

        let uniform = DisparityDistribution::new(w, h, grid, vec![0.125; 8 * w * h]).unwrap();
        assert!(predict_raw(&uniform).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grid = make_disparity_grid(1.0, 6).unwrap();
        let (w, h) = (7, 5);
        let probs: Vec<f32> = (0..6 * w * h).map(|_| rng.random::<f32>()).collect();
        let dist = DisparityDistribution::new(w, h, grid, probs.clone()).unwrap();
        let map = predict_raw(&dist);
        for p in 0..w * h {
            let mut best = (0usize, f32::MIN);
            for d in 0..6 {
                if probs[d * w * h + p] > best.1 {
                    best = (d, probs[d * w * h + p]);
                }
            }
            assert_eq!(map.values[p], grid.value(best.0) as f32);
        }
    }
}
