//! Neighbor selection, disparity range estimation and plane-sweep volumes.

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{plane_homography, project, warp_region, CameraView};

/// Default budget for a single volume: 8 GiB.
pub const DEFAULT_MEMORY_BUDGET: u64 = 8 << 30;

/// A triangulated feature and the views that observed it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePoint {
    pub position: Vector3<f64>,
    pub observers: BTreeSet<u32>,
}

impl SparsePoint {
    pub fn new(position: Vector3<f64>, observers: impl IntoIterator<Item = u32>) -> Result<Self> {
        let observers: BTreeSet<u32> = observers.into_iter().collect();
        if observers.is_empty() {
            return Err(Error::Config("sparse point needs at least one observer".into()));
        }
        Ok(Self { position, observers })
    }
}

/// Picks the `count` views sharing the most sparse points with `ref_id`,
/// ordered by descending shared count with ascending id as tie-break.
pub fn select_neighbors(
    views: &[CameraView],
    points: &[SparsePoint],
    ref_id: u32,
    count: usize,
) -> Result<Vec<u32>> {
    if count == 0 {
        return Err(Error::Config("neighbor count must be at least 1".into()));
    }
    let mut shared: HashMap<u32, usize> =
        views.iter().filter(|v| v.id != ref_id).map(|v| (v.id, 0)).collect();
    if shared.len() < count {
        return Err(Error::InsufficientViews { needed: count, available: shared.len() });
    }
    for p in points.iter().filter(|p| p.observers.contains(&ref_id)) {
        for id in &p.observers {
            if let Some(c) = shared.get_mut(id) {
                *c += 1;
            }
        }
    }
    let mut ranked: Vec<(u32, usize)> = shared.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(count).map(|(id, _)| id).collect())
}

/// Disparity (1/depth) quantile of the sparse points observed by the
/// reference. `quantile = 1` is the maximum; ranks use the nearest-rank rule.
pub fn estimate_max_disparity(points: &[SparsePoint], ref_view: &CameraView, quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Config(format!("quantile must lie in (0, 1], got {quantile}")));
    }
    let mut disparities: Vec<f64> = points
        .iter()
        .filter(|p| p.observers.contains(&ref_view.id))
        .filter_map(|p| project(&p.position, ref_view).ok())
        .map(|(_, depth)| 1.0 / depth)
        .collect();
    if disparities.is_empty() {
        return Err(Error::InsufficientFeatures { view: ref_view.id });
    }
    disparities.sort_by(f64::total_cmp);
    let rank = ((quantile * disparities.len() as f64).ceil() as usize).clamp(1, disparities.len());
    Ok(disparities[rank - 1])
}

/// `levels` uniformly spaced disparity hypotheses `{0, δ, …, (levels-1)δ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityGrid {
    levels: usize,
    max_disparity: f64,
    delta: f64,
}

impl DisparityGrid {
    pub fn new(max_disparity: f64, levels: usize) -> Result<Self> {
        if !(max_disparity > 0.0) || !max_disparity.is_finite() {
            return Err(Error::InvalidRange(format!(
                "maximum disparity must be positive, got {max_disparity}"
            )));
        }
        if levels < 2 {
            return Err(Error::InvalidRange(format!("need at least 2 levels, got {levels}")));
        }
        Ok(Self { levels, max_disparity, delta: max_disparity / (levels - 1) as f64 })
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.levels
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn max_disparity(&self) -> f64 {
        self.max_disparity
    }

    /// The top level returns the stored maximum exactly.
    #[inline]
    pub fn value(&self, level: usize) -> f64 {
        if level + 1 == self.levels {
            self.max_disparity
        } else {
            level as f64 * self.delta
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.levels).map(|i| self.value(i)).collect()
    }
}

pub fn make_disparity_grid(max_disparity: f64, levels: usize) -> Result<DisparityGrid> {
    DisparityGrid::new(max_disparity, levels)
}

/// Stack of neighbor images warped onto the sweep planes, stored planar as
/// (n, d, y, x, c) with colors shifted to [-0.5, 0.5] and zeros where the
/// neighbor does not see the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSweepVolume {
    pub ref_id: u32,
    pub neighbor_ids: Vec<u32>,
    pub grid: DisparityGrid,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
}

impl PlaneSweepVolume {
    #[inline]
    pub fn num_neighbors(&self) -> usize {
        self.neighbor_ids.len()
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.grid.levels()
    }

    fn slice_index(&self, n: usize, d: usize) -> usize {
        n * self.levels() + d
    }

    pub fn slice(&self, n: usize, d: usize) -> &[f32] {
        let len = self.width * self.height * 3;
        let i = self.slice_index(n, d) * len;
        &self.data[i..i + len]
    }

    pub fn slice_mask(&self, n: usize, d: usize) -> &[bool] {
        let len = self.width * self.height;
        let i = self.slice_index(n, d) * len;
        &self.mask[i..i + len]
    }

    /// Volume restricted to the neighbors at the given positions, in order.
    pub fn select_neighbors(&self, positions: &[usize]) -> PlaneSweepVolume {
        let slab = self.levels() * self.width * self.height;
        let mut data = Vec::with_capacity(positions.len() * slab * 3);
        let mut mask = Vec::with_capacity(positions.len() * slab);
        for &n in positions {
            data.extend_from_slice(&self.data[n * slab * 3..(n + 1) * slab * 3]);
            mask.extend_from_slice(&self.mask[n * slab..(n + 1) * slab]);
        }
        PlaneSweepVolume {
            ref_id: self.ref_id,
            neighbor_ids: positions.iter().map(|&n| self.neighbor_ids[n]).collect(),
            grid: self.grid,
            width: self.width,
            height: self.height,
            data,
            mask,
        }
    }
}

/// Bytes needed to hold an N×D×H×W volume (colors plus mask).
pub fn volume_bytes(neighbors: usize, levels: usize, width: usize, height: usize) -> u64 {
    let pixels = (neighbors * levels * width * height) as u64;
    pixels * (3 * std::mem::size_of::<f32>() as u64 + 1)
}

pub fn build_volume(
    ref_view: &CameraView,
    neighbors: &[&CameraView],
    grid: &DisparityGrid,
    memory_budget: u64,
) -> Result<PlaneSweepVolume> {
    build_volume_region(ref_view, neighbors, grid, (0, 0, ref_view.width(), ref_view.height()), memory_budget)
}

/// Sweeps only the reference window `(x0, y0, width, height)`; pixel
/// coordinates stay those of the full reference image.
pub fn build_volume_region(
    ref_view: &CameraView,
    neighbors: &[&CameraView],
    grid: &DisparityGrid,
    window: (usize, usize, usize, usize),
    memory_budget: u64,
) -> Result<PlaneSweepVolume> {
    let (x0, y0, width, height) = window;
    if neighbors.is_empty() {
        return Err(Error::InsufficientViews { needed: 1, available: 0 });
    }
    if width == 0 || height == 0 {
        return Err(Error::Shape("sweep window is empty".into()));
    }
    let needed = volume_bytes(neighbors.len(), grid.levels(), width, height);
    if needed > memory_budget {
        return Err(Error::MemoryBudget { needed, budget: memory_budget });
    }
    log::debug!(
        "sweeping {} neighbors x {} levels over {}x{} ({} MiB)",
        neighbors.len(),
        grid.levels(),
        width,
        height,
        needed >> 20
    );

    let jobs: Vec<(usize, usize)> = (0..neighbors.len())
        .flat_map(|n| (0..grid.levels()).map(move |d| (n, d)))
        .collect();
    let slices = jobs
        .par_iter()
        .map(|&(n, d)| {
            let h = plane_homography(ref_view, neighbors[n], grid.value(d))?;
            let (mut img, mask) = warp_region(&neighbors[n].image, &h, x0, y0, width, height)?;
            for (px, &valid) in img.data_mut().chunks_exact_mut(3).zip(&mask) {
                for v in px {
                    *v = if valid { (*v - 0.5).clamp(-0.5, 0.5) } else { 0.0 };
                }
            }
            Ok((img.into_vec(), mask))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut data = Vec::with_capacity(jobs.len() * width * height * 3);
    let mut mask = Vec::with_capacity(jobs.len() * width * height);
    for (d, m) in slices {
        data.extend_from_slice(&d);
        mask.extend_from_slice(&m);
    }
    Ok(PlaneSweepVolume {
        ref_id: ref_view.id,
        neighbor_ids: neighbors.iter().map(|v| v.id).collect(),
        grid: *grid,
        width,
        height,
        data,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::image::Image;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blank_view(id: u32, pose: CameraPose) -> CameraView {
        let k = CameraIntrinsics::new(100.0, 100.0, 16.0, 16.0).unwrap();
        CameraView::new(id, Image::new(32, 32, 3), k, pose).unwrap()
    }

    fn point(z: f64, observers: &[u32]) -> SparsePoint {
        SparsePoint::new(Vector3::new(0.1, -0.1, z), observers.iter().copied()).unwrap()
    }

    #[test]
    fn neighbors_ranked_by_shared_points() {
        let views: Vec<_> = (0..4).map(|i| blank_view(i, CameraPose::identity())).collect();
        let mut pts = Vec::new();
        for (id, n) in [(1u32, 5usize), (2, 2), (3, 9)] {
            for _ in 0..n {
                pts.push(point(2.0, &[0, id]));
            }
        }
        // Points the reference does not see never count.
        pts.push(point(2.0, &[1, 2]));
        assert_eq!(select_neighbors(&views, &pts, 0, 2).unwrap(), vec![3, 1]);
    }

    #[test]
    fn zero_shared_points_break_ties_by_id() {
        let views: Vec<_> = [7u32, 0, 4, 2].iter().map(|&i| blank_view(i, CameraPose::identity())).collect();
        assert_eq!(select_neighbors(&views, &[], 7, 1).unwrap(), vec![0]);
    }

    #[test]
    fn too_few_candidates_is_an_error() {
        let views: Vec<_> = (0..3).map(|i| blank_view(i, CameraPose::identity())).collect();
        assert!(matches!(
            select_neighbors(&views, &[], 0, 3),
            Err(Error::InsufficientViews { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn max_disparity_examples() {
        let r = blank_view(0, CameraPose::identity());
        let pts: Vec<_> = [2.0, 4.0, 10.0].iter().map(|&z| point(z, &[0])).collect();
        assert_eq!(estimate_max_disparity(&pts, &r, 1.0).unwrap(), 0.5);
        let single = [point(5.0, &[0])];
        for q in [0.01, 0.5, 1.0] {
            assert_eq!(estimate_max_disparity(&single, &r, q).unwrap(), 0.2);
        }
    }

    #[test]
    fn max_disparity_quantile_matches_sort_oracle() {
        let r = blank_view(0, CameraPose::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..1000).map(|_| point(rng.random_range(1.0..50.0), &[0, 1])).collect();
        let mut disp: Vec<f64> = pts.iter().map(|p| 1.0 / p.position.z).collect();
        disp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // 990th smallest of 1000 is the 0.99 nearest-rank quantile.
        assert_eq!(estimate_max_disparity(&pts, &r, 0.99).unwrap(), disp[989]);
    }

    #[test]
    fn max_disparity_requires_visible_points() {
        let r = blank_view(0, CameraPose::identity());
        let behind = [point(-3.0, &[0])];
        assert!(matches!(
            estimate_max_disparity(&behind, &r, 1.0),
            Err(Error::InsufficientFeatures { view: 0 })
        ));
        let unobserved = [point(3.0, &[1])];
        assert!(estimate_max_disparity(&unobserved, &r, 1.0).is_err());
    }

    #[test]
    fn grid_examples() {
        let g = make_disparity_grid(0.99, 100).unwrap();
        assert!((g.delta() - 0.01).abs() < 1e-15);
        let v = g.values();
        assert_eq!(v.len(), 100);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[99], 0.99);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(make_disparity_grid(1.0, 2).unwrap().values(), vec![0.0, 1.0]);
        assert!(matches!(make_disparity_grid(0.0, 4), Err(Error::InvalidRange(_))));
        assert!(make_disparity_grid(-1.0, 4).is_err());
        assert!(make_disparity_grid(1.0, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn grid_top_level_is_exact(d_max in 1e-4f64..10.0, levels in 2usize..300) {
            let g = make_disparity_grid(d_max, levels).unwrap();
            proptest::prop_assert_eq!(g.value(levels - 1), d_max);
            proptest::prop_assert!((g.delta() * (levels - 1) as f64 - d_max).abs() <= 1e-9);
        }
    }

    fn textured_view(id: u32, pose: CameraPose) -> CameraView {
        let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5).unwrap();
        let img = Image::from_fn(32, 24, 3, |x, y, c| {
            0.5 + 0.4 * ((x as f32 * 0.3 + c as f32).sin() * (y as f32 * 0.2).cos())
        });
        CameraView::new(id, img, k, pose).unwrap()
    }

    #[test]
    fn identical_neighbor_reproduces_reference_on_every_level() {
        let r = textured_view(0, CameraPose::identity());
        let n = textured_view(1, CameraPose::identity());
        let grid = make_disparity_grid(0.8, 5).unwrap();
        let vol = build_volume(&r, &[&n], &grid, DEFAULT_MEMORY_BUDGET).unwrap();
        for d in 0..5 {
            assert!(vol.slice_mask(0, d).iter().all(|&m| m));
            for (a, b) in vol.slice(0, d).iter().zip(r.image.data()) {
                assert!((a - (b - 0.5)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn level_zero_ignores_pure_translation() {
        let r = textured_view(0, CameraPose::identity());
        let n = textured_view(1, CameraPose::new(Matrix3::identity(), Vector3::new(0.3, -0.1, 0.05)).unwrap());
        let grid = make_disparity_grid(0.5, 4).unwrap();
        let vol = build_volume(&r, &[&n], &grid, DEFAULT_MEMORY_BUDGET).unwrap();
        assert!(vol.slice_mask(0, 0).iter().all(|&m| m));
        for (a, b) in vol.slice(0, 0).iter().zip(n.image.data()) {
            assert!((a - (b - 0.5)).abs() <= 1e-6);
        }
    }

    #[test]
    fn values_bounded_and_zero_where_masked() {
        let r = textured_view(0, CameraPose::identity());
        let n = textured_view(1, CameraPose::new(Matrix3::identity(), Vector3::new(0.4, 0.0, 0.0)).unwrap());
        let grid = make_disparity_grid(1.0, 6).unwrap();
        let vol = build_volume(&r, &[&n, &r], &grid, DEFAULT_MEMORY_BUDGET).unwrap();
        assert!(vol.mask.iter().any(|&m| !m));
        for (px, &m) in vol.data.chunks_exact(3).zip(&vol.mask) {
            assert!(px.iter().all(|v| (-0.5..=0.5).contains(v)));
            if !m {
                assert_eq!(px, &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn neighbor_reordering_permutes_first_axis() {
        let r = textured_view(0, CameraPose::identity());
        let a = textured_view(1, CameraPose::new(Matrix3::identity(), Vector3::new(0.3, 0.0, 0.0)).unwrap());
        let b = textured_view(2, CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.2, 0.1)).unwrap());
        let grid = make_disparity_grid(0.5, 3).unwrap();
        let ab = build_volume(&r, &[&a, &b], &grid, DEFAULT_MEMORY_BUDGET).unwrap();
        let ba = build_volume(&r, &[&b, &a], &grid, DEFAULT_MEMORY_BUDGET).unwrap();
        assert_eq!(ab.select_neighbors(&[1, 0]), ba);
    }

    #[test]
    fn doubling_intervals_halves_step_and_keeps_end_slices() {
        let r = textured_view(0, CameraPose::identity());
        let n = textured_view(1, CameraPose::new(Matrix3::identity(), Vector3::new(0.3, 0.1, 0.0)).unwrap());
        let coarse = make_disparity_grid(0.6, 4).unwrap();
        let fine = make_disparity_grid(0.6, 7).unwrap();
        assert!((fine.delta() * 2.0 - coarse.delta()).abs() < 1e-15);
        let vc = build_volume(&r, &[&n], &coarse, DEFAULT_MEMORY_BUDGET).unwrap();
        let vf = build_volume(&r, &[&n], &fine, DEFAULT_MEMORY_BUDGET).unwrap();
        assert_eq!(vc.slice(0, 0), vf.slice(0, 0));
        assert_eq!(vc.slice(0, 3), vf.slice(0, 6));
    }

    #[test]
    fn memory_budget_is_enforced() {
        let r = textured_view(0, CameraPose::identity());
        let grid = make_disparity_grid(0.5, 4).unwrap();
        let err = build_volume(&r, &[&r], &grid, 1000).unwrap_err();
        assert!(matches!(err, Error::MemoryBudget { .. }));
    }
}
