//! Geometric and photometric error of a disparity prediction, and
//! completeness curves over per-pixel errors.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_into, CameraView};
use crate::image::Image;
use crate::maps::DisparityMap;

fn check_same(a: &DisparityMap, b: &DisparityMap) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!("maps are {}x{} and {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Per-pixel |pred - gt| and the mask of pixels valid in both.
pub fn geometric_error_map(pred: &DisparityMap, gt: &DisparityMap) -> Result<(Vec<f64>, Vec<bool>)> {
    check_same(pred, gt)?;
    Ok((0..pred.values.len())
        .map(|i| {
            let ok = pred.valid[i] && gt.valid[i];
            (if ok { (pred.values[i] as f64 - gt.values[i] as f64).abs() } else { 0.0 }, ok)
        })
        .unzip())
}

/// Mean absolute disparity difference over pixels valid in both maps.
pub fn geometric_error(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    let (err, mask) = geometric_error_map(pred, gt)?;
    masked_mean(&err, &mask)
}

fn masked_mean(values: &[f64], mask: &[bool]) -> Result<f64> {
    let (sum, n) = values.iter().zip(mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::EmptyMetric);
    }
    Ok(sum / n as f64)
}

/// Lower middle element of the sorted values.
pub fn lower_median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[(values.len() - 1) / 2]
}

/// Reference image rebuilt from neighbor colors: each pixel is lifted with
/// its predicted disparity (disparity 0 maps through rotation only),
/// projected into every neighbor, and the per-channel median of the
/// in-bounds samples is kept. Pixels without candidates are invalid.
pub fn rephotograph(pred: &DisparityMap, reference: &CameraView, neighbors: &[&CameraView]) -> Result<(Image, Vec<bool>)> {
    if neighbors.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, available: 0 });
    }
    let (w, h) = (reference.width(), reference.height());
    if (pred.width, pred.height) != (w, h) {
        return Err(Error::Shape(format!("prediction {}x{} vs reference {w}x{h}", pred.width, pred.height)));
    }
    let k_inv = reference.intrinsics.inverse_matrix();
    let r_ref_t = reference.pose.rotation().transpose();
    let t_ref = *reference.pose.translation();
    let rows: Vec<(Vec<f32>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut colors = vec![0.0f32; w * 3];
            let mut valid = vec![false; w];
            let mut cands: [Vec<f32>; 3] = Default::default();
            let mut px = [0.0f32; 3];
            for x in 0..w {
                let i = y * w + x;
                if !pred.valid[i] {
                    continue;
                }
                let d = pred.values[i] as f64;
                let ray = k_inv * Vector3::new(x as f64, y as f64, 1.0);
                cands.iter_mut().for_each(Vec::clear);
                for nb in neighbors {
                    let r_n = nb.pose.rotation();
                    // Homogeneous neighbor-camera point, scaled by d.
                    let pc = if d > 0.0 {
                        let world = r_ref_t * (ray / d - t_ref);
                        r_n * world + nb.pose.translation()
                    } else {
                        r_n * (r_ref_t * ray)
                    };
                    if pc.z <= 0.0 {
                        continue;
                    }
                    let k = &nb.intrinsics;
                    let (u, v) = (k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
                    if bilinear_sample_into(&nb.image, u, v, &mut px) {
                        for c in 0..3 {
                            cands[c].push(px[c]);
                        }
                    }
                }
                if cands[0].is_empty() {
                    continue;
                }
                for c in 0..3 {
                    colors[x * 3 + c] = lower_median(&mut cands[c]);
                }
                valid[x] = true;
            }
            (colors, valid)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * 3);
    let mut mask = Vec::with_capacity(w * h);
    for (c, v) in rows {
        data.extend(c);
        mask.extend(v);
    }
    Ok((Image::from_vec(w, h, 3, data)?, mask))
}

/// Per-pixel mean-over-channels L1 between reference and rephotograph, and
/// the rephotograph validity mask.
pub fn photometric_error_map(pred: &DisparityMap, reference: &CameraView, neighbors: &[&CameraView]) -> Result<(Vec<f64>, Vec<bool>)> {
    let (img, mask) = rephotograph(pred, reference, neighbors)?;
    let err = img
        .data()
        .chunks(3)
        .zip(reference.image.data().chunks(3))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / 3.0)
        .collect();
    Ok((err, mask))
}

pub fn photometric_error(pred: &DisparityMap, reference: &CameraView, neighbors: &[&CameraView]) -> Result<f64> {
    let (err, mask) = photometric_error_map(pred, reference, neighbors)?;
    masked_mean(&err, &mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletenessCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

/// Fraction of masked pixels whose error is strictly below each threshold.
pub fn completeness_curve(errors: &[f64], mask: &[bool], thresholds: &[f64]) -> Result<CompletenessCurve> {
    if errors.len() != mask.len() {
        return Err(Error::Shape(format!("{} errors but {} mask entries", errors.len(), mask.len())));
    }
    if thresholds.windows(2).any(|t| !(t[1] > t[0])) {
        return Err(Error::InvalidRange("thresholds must be strictly increasing".into()));
    }
    let mut vals: Vec<f64> = errors.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
    if vals.is_empty() {
        return Err(Error::EmptyMetric);
    }
    vals.sort_by(|a, b| a.total_cmp(b));
    let n = vals.len() as f64;
    let fractions = thresholds.iter().map(|&t| vals.partition_point(|&e| e < t) as f64 / n).collect();
    Ok(CompletenessCurve { thresholds: thresholds.to_vec(), fractions })
}

/// `count` evenly spaced thresholds in (0, max].
pub fn linear_thresholds(max: f64, count: usize) -> Vec<f64> {
    (1..=count).map(|i| max * i as f64 / count as f64).collect()
}

impl CompletenessCurve {
    /// `threshold,fraction` rows after a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            let _ = writeln!(s, "{t},{f}");
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut thresholds = Vec::new();
        let mut fractions = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("threshold")) {
                continue;
            }
            let bad = || Error::format(path, format!("line {}: expected threshold,fraction", n + 1));
            let (a, b) = line.split_once(',').ok_or_else(bad)?;
            thresholds.push(a.trim().parse::<f64>().map_err(|_| bad())?);
            fractions.push(b.trim().parse::<f64>().map_err(|_| bad())?);
        }
        if thresholds.is_empty() {
            return Err(Error::format(path, "curve has no rows"));
        }
        Ok(Self { thresholds, fractions })
    }
}
