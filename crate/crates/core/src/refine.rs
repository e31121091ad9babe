//! Fully-connected CRF over the disparity levels, solved by mean-field
//! iterations.
//!
//! Pairwise kernel between pixels i and j:
//!
//! ```text
//! w_app    * exp(-|p_i - p_j|^2 / 2 θα^2 - |c_i - c_j|^2 / 2 θβ^2)
//! w_smooth * exp(-|p_i - p_j|^2 / 2 θγ^2)
//! ```
//!
//! with truncated-linear label compatibility `min(|a - b|, τ) / τ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::maps::DisparityDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub w_app: f64,
    /// Spatial standard deviation of the appearance kernel, pixels.
    pub theta_alpha: f64,
    /// Color standard deviation of the appearance kernel, [0, 1] units.
    pub theta_beta: f64,
    pub w_smooth: f64,
    /// Spatial standard deviation of the smoothness kernel, pixels.
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Compatibility truncation in levels; 1 gives the Potts model.
    pub tau: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self { w_app: 4.0, theta_alpha: 30.0, theta_beta: 0.1, w_smooth: 1.0, theta_gamma: 3.0, iterations: 10, tau: 10.0 }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_app >= 0.0 && self.w_smooth >= 0.0) {
            return Err(Error::Config("CRF kernel weights must be >= 0".into()));
        }
        if !(self.theta_alpha > 0.0 && self.theta_beta > 0.0 && self.theta_gamma > 0.0) {
            return Err(Error::Config("CRF standard deviations must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("CRF compatibility truncation must be positive".into()));
        }
        Ok(())
    }

    pub fn compatibility(&self, a: usize, b: usize) -> f64 {
        (a.abs_diff(b) as f64).min(self.tau) / self.tau
    }
}

/// How the pairwise sums are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseMethod {
    /// Every pixel pair, O(P²). The reference semantics.
    BruteForce,
    /// Separable Gaussian filtering for the smoothness kernel and a window
    /// of radius 5θα for the appearance kernel. Equal to brute force when
    /// the image fits inside that window.
    Filtered,
}

/// Everything a mean-field step needs besides the current marginals.
pub struct PairwiseModel<'a> {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub colors: &'a Image,
    pub params: &'a CrfParams,
    pub method: PairwiseMethod,
}

impl PairwiseModel<'_> {
    fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Σ_{j≠i} k(i, j) q_j(l) for every pixel i and level l, stored (i, l).
    fn messages(&self, q: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; q.len()];
        if self.params.w_app > 0.0 {
            match self.method {
                PairwiseMethod::BruteForce => self.appearance(q, &mut m, usize::MAX),
                PairwiseMethod::Filtered => self.appearance(q, &mut m, (5.0 * self.params.theta_alpha).ceil() as usize),
            }
        }
        if self.params.w_smooth > 0.0 {
            match self.method {
                PairwiseMethod::BruteForce => self.smoothness_brute(q, &mut m),
                PairwiseMethod::Filtered => self.smoothness_separable(q, &mut m),
            }
        }
        m
    }

    fn appearance(&self, q: &[f64], m: &mut [f64], radius: usize) {
        let (w, h, d) = (self.width, self.height, self.levels);
        let p = self.params;
        let (sa, sb) = (0.5 / (p.theta_alpha * p.theta_alpha), 0.5 / (p.theta_beta * p.theta_beta));
        let c = self.colors.data();
        m.par_chunks_mut(d).enumerate().for_each(|(i, mi)| {
            let (xi, yi) = (i % w, i / w);
            let ci = &c[i * 3..i * 3 + 3];
            let (x0, x1) = (xi.saturating_sub(radius), xi.saturating_add(radius).min(w - 1));
            let (y0, y1) = (yi.saturating_sub(radius), yi.saturating_add(radius).min(h - 1));
            for yj in y0..=y1 {
                for xj in x0..=x1 {
                    let j = yj * w + xj;
                    if j == i {
                        continue;
                    }
                    let (dx, dy) = (xi as f64 - xj as f64, yi as f64 - yj as f64);
                    let cj = &c[j * 3..j * 3 + 3];
                    let dc: f64 = (0..3).map(|k| (ci[k] as f64 - cj[k] as f64).powi(2)).sum();
                    let k = p.w_app * (-(dx * dx + dy * dy) * sa - dc * sb).exp();
                    if k == 0.0 {
                        continue;
                    }
                    for (acc, &qj) in mi.iter_mut().zip(&q[j * d..(j + 1) * d]) {
                        *acc += k * qj;
                    }
                }
            }
        });
    }

    fn smoothness_brute(&self, q: &[f64], m: &mut [f64]) {
        let (w, d) = (self.width, self.levels);
        let p = self.params;
        let s = 0.5 / (p.theta_gamma * p.theta_gamma);
        let n = self.pixels();
        m.par_chunks_mut(d).enumerate().for_each(|(i, mi)| {
            let (xi, yi) = ((i % w) as f64, (i / w) as f64);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (dx, dy) = (xi - (j % w) as f64, yi - (j / w) as f64);
                let k = p.w_smooth * (-(dx * dx + dy * dy) * s).exp();
                for (acc, &qj) in mi.iter_mut().zip(&q[j * d..(j + 1) * d]) {
                    *acc += k * qj;
                }
            }
        });
    }

    /// Gaussian blur along x then y (radius 6θγ), minus each pixel's own
    /// contribution.
    fn smoothness_separable(&self, q: &[f64], m: &mut [f64]) {
        let (w, h, d) = (self.width, self.height, self.levels);
        let p = self.params;
        let r = (6.0 * p.theta_gamma).ceil() as isize;
        let taps: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * p.theta_gamma * p.theta_gamma)).exp()).collect();
        let mut tmp = vec![0.0; q.len()];
        tmp.par_chunks_mut(w * d).enumerate().for_each(|(y, row)| {
            for x in 0..w as isize {
                let out = &mut row[x as usize * d..(x as usize + 1) * d];
                for t in (-r).max(-x)..=r.min(w as isize - 1 - x) {
                    let k = taps[(t + r) as usize];
                    let j = y * w + (x + t) as usize;
                    for (o, &qj) in out.iter_mut().zip(&q[j * d..(j + 1) * d]) {
                        *o += k * qj;
                    }
                }
            }
        });
        m.par_chunks_mut(w * d).enumerate().for_each(|(y, row)| {
            let y = y as isize;
            for x in 0..w {
                let out = &mut row[x * d..(x + 1) * d];
                for t in (-r).max(-y)..=r.min(h as isize - 1 - y) {
                    let k = p.w_smooth * taps[(t + r) as usize];
                    let j = (y + t) as usize * w + x;
                    for (o, &v) in out.iter_mut().zip(&tmp[j * d..(j + 1) * d]) {
                        *o += k * v;
                    }
                }
                let i = y as usize * w + x;
                for (o, &qi) in out.iter_mut().zip(&q[i * d..(i + 1) * d]) {
                    *o -= p.w_smooth * qi;
                }
            }
        });
    }
}

/// One parallel mean-field update. `q` and `unaries` are stored per pixel,
/// levels contiguous: index `i * levels + l`.
pub fn mean_field_step(q: &[f64], unaries: &[f64], model: &PairwiseModel) -> Vec<f64> {
    let d = model.levels;
    let messages = model.messages(q);
    let compat: Vec<f64> = (0..d * d).map(|k| model.params.compatibility(k / d, k % d)).collect();
    let mut out = vec![0.0; q.len()];
    out.par_chunks_mut(d).enumerate().for_each(|(i, oi)| {
        let mi = &messages[i * d..(i + 1) * d];
        for (l, o) in oi.iter_mut().enumerate() {
            let pairwise: f64 = (0..d).map(|lp| compat[l * d + lp] * mi[lp]).sum();
            *o = -unaries[i * d + l] - pairwise;
        }
        softmax_in_place(oi);
    });
    out
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub fn crf_refine(dist: &DisparityDistribution, reference: &Image, params: &CrfParams) -> Result<DisparityDistribution> {
    crf_refine_with(dist, reference, params, PairwiseMethod::Filtered)
}

pub fn crf_refine_with(
    dist: &DisparityDistribution,
    reference: &Image,
    params: &CrfParams,
    method: PairwiseMethod,
) -> Result<DisparityDistribution> {
    params.validate()?;
    if (reference.width(), reference.height()) != (dist.width, dist.height) || reference.channels() != 3 {
        return Err(Error::Shape(format!(
            "reference {}x{}x{} does not match distribution {}x{}",
            reference.width(),
            reference.height(),
            reference.channels(),
            dist.width,
            dist.height
        )));
    }
    let (n, d) = (dist.width * dist.height, dist.levels());
    let mut unaries = vec![0.0; n * d];
    for l in 0..d {
        for i in 0..n {
            unaries[i * d + l] = -(dist.prob(l, i) as f64 + 1e-12).ln();
        }
    }
    let mut q = unaries.clone();
    for qi in q.chunks_mut(d) {
        qi.iter_mut().for_each(|v| *v = -*v);
        softmax_in_place(qi);
    }
    let model = PairwiseModel { width: dist.width, height: dist.height, levels: d, colors: reference, params, method };
    for _ in 0..params.iterations {
        q = mean_field_step(&q, &unaries, &model);
    }
    let mut probs = vec![0.0f32; n * d];
    for i in 0..n {
        for l in 0..d {
            probs[l * n + i] = q[i * d + l] as f32;
        }
    }
    DisparityDistribution::new(dist.width, dist.height, dist.grid, probs)
}
