//! Ray-cast synthetic scenes with exact ground truth.
//!
//! World coordinates are those of camera 0 (identity pose): x right, y down,
//! z forward. Deliberately self-contained: all vector math is on plain
//! `[f64; 3]`, and nothing here goes through the homography code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, CameraView};
use crate::image::Image;
use crate::maps::DisparityMap;
use crate::sweep::SparsePoint;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn mul(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn normalize(a: V3) -> V3 {
    mul(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SceneObject {
    /// Rectangle facing the cameras (normal along -z) at depth `center[2]`.
    Plane { center: V3, size: [f64; 2], texture_seed: u64 },
    /// Axis-aligned box.
    Box { min: V3, max: V3, texture_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// Cameras at `(i * baseline, 0, 0)`, all with identity rotation.
    Line { count: usize, baseline: f64 },
    /// Camera 0 at the origin; the others evenly spaced on a circle of
    /// `radius` in the z = 0 plane, each looking at `(0, 0, target_depth)`.
    Ring { count: usize, radius: f64, target_depth: f64 },
}

impl Trajectory {
    pub fn count(&self) -> usize {
        match *self {
            Trajectory::Line { count, .. } | Trajectory::Ring { count, .. } => count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; the principal point is the image center.
    pub focal: f64,
    pub trajectory: Trajectory,
    pub objects: Vec<SceneObject>,
    /// Shortest texture wavelength in world units.
    #[serde(default = "default_wavelength")]
    pub texture_wavelength: f64,
    /// Direction the light travels (towards the scene).
    #[serde(default = "default_light")]
    pub light: V3,
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    /// Color of rays that hit nothing (disparity 0).
    #[serde(default = "default_sky")]
    pub sky: V3,
    #[serde(default)]
    pub sparse_points: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_wavelength() -> f64 {
    0.5
}
fn default_light() -> V3 {
    [0.3, 0.5, 1.0]
}
fn default_ambient() -> f64 {
    0.4
}
fn default_sky() -> V3 {
    [0.55, 0.65, 0.8]
}

/// Minimum camera-space depth of any object corner.
const DEPTH_MARGIN: f64 = 0.05;

impl SceneSpec {
    /// A single fronto-parallel plane filling the view of every camera.
    pub fn single_plane(width: usize, height: usize, depth: f64, trajectory: Trajectory) -> Self {
        let focal = width as f64;
        let extent = 40.0 * depth;
        Self {
            width,
            height,
            focal,
            trajectory,
            objects: vec![SceneObject::Plane { center: [0.0, 0.0, depth], size: [extent, extent], texture_seed: 1 }],
            texture_wavelength: default_wavelength(),
            light: default_light(),
            ambient: default_ambient(),
            sky: default_sky(),
            sparse_points: 0,
            seed: 0,
        }
    }

    /// Background wall, a floating panel and two boxes seen from a ring.
    pub fn toy(width: usize, height: usize, views: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            focal: width as f64,
            trajectory: Trajectory::Ring { count: views, radius: 0.3, target_depth: 4.0 },
            objects: vec![
                SceneObject::Plane { center: [0.0, 0.0, 6.0], size: [60.0, 60.0], texture_seed: seed ^ 1 },
                SceneObject::Plane { center: [-0.9, -0.3, 3.0], size: [1.2, 1.4], texture_seed: seed ^ 2 },
                SceneObject::Box { min: [0.3, -0.2, 2.2], max: [1.1, 0.9, 2.9], texture_seed: seed ^ 3 },
                SceneObject::Box { min: [-0.5, 0.6, 4.0], max: [0.4, 1.4, 4.8], texture_seed: seed ^ 4 },
            ],
            texture_wavelength: 0.35,
            light: default_light(),
            ambient: default_ambient(),
            sky: default_sky(),
            sparse_points: 300,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::Scene("image size and focal length must be positive".into()));
        }
        if self.trajectory.count() == 0 {
            return Err(Error::Scene("trajectory needs at least one camera".into()));
        }
        if !(self.texture_wavelength > 0.0) || !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Scene("texture wavelength must be positive and ambient in [0, 1]".into()));
        }
        if dot(self.light, self.light) == 0.0 {
            return Err(Error::Scene("light direction is zero".into()));
        }
        if self.sky.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Scene("sky color outside [0, 1]".into()));
        }
        for obj in &self.objects {
            match obj {
                SceneObject::Plane { size, .. } if !(size[0] > 0.0 && size[1] > 0.0) => {
                    return Err(Error::Scene("plane sizes must be positive".into()))
                }
                SceneObject::Box { min, max, .. } if (0..3).any(|k| !(max[k] > min[k])) => {
                    return Err(Error::Scene("box max must exceed min on every axis".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// World-to-camera rotation rows and camera center.
#[derive(Debug, Clone, Copy)]
struct Cam {
    rows: [V3; 3],
    center: V3,
}

impl Cam {
    fn to_cam(&self, p: V3) -> V3 {
        let d = sub(p, self.center);
        [dot(self.rows[0], d), dot(self.rows[1], d), dot(self.rows[2], d)]
    }

    /// World direction of the ray through pixel (u, v).
    fn ray(&self, u: f64, v: f64, spec: &SceneSpec) -> V3 {
        let (cx, cy) = principal_point(spec);
        let dc = [(u - cx) / spec.focal, (v - cy) / spec.focal, 1.0];
        // Inverse rotation: columns of the row matrix.
        add(add(mul(self.rows[0], dc[0]), mul(self.rows[1], dc[1])), mul(self.rows[2], dc[2]))
    }
}

fn principal_point(spec: &SceneSpec) -> (f64, f64) {
    ((spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0)
}

fn cameras(t: &Trajectory) -> Vec<Cam> {
    let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    match *t {
        Trajectory::Line { count, baseline } => {
            (0..count).map(|i| Cam { rows: identity, center: [i as f64 * baseline, 0.0, 0.0] }).collect()
        }
        Trajectory::Ring { count, radius, target_depth } => {
            let mut cams = vec![Cam { rows: identity, center: [0.0; 3] }];
            let others = count.saturating_sub(1);
            for k in 0..others {
                let a = std::f64::consts::TAU * k as f64 / others as f64;
                let center = [radius * a.cos(), radius * a.sin(), 0.0];
                let z = normalize(sub([0.0, 0.0, target_depth], center));
                let x = normalize(cross([0.0, 1.0, 0.0], z));
                let y = cross(z, x);
                cams.push(Cam { rows: [x, y, z], center });
            }
            cams
        }
    }
}

/// Surface hit: ray parameter, point, outward normal and 2D texture coords.
struct Hit {
    t: f64,
    point: V3,
    normal: V3,
    uv: [f64; 2],
    object: usize,
}

fn intersect(obj: &SceneObject, origin: V3, dir: V3) -> Option<(f64, V3, [f64; 2])> {
    const EPS: f64 = 1e-9;
    match obj {
        SceneObject::Plane { center, size, .. } => {
            if dir[2].abs() < EPS {
                return None;
            }
            let t = (center[2] - origin[2]) / dir[2];
            if t <= EPS {
                return None;
            }
            let p = add(origin, mul(dir, t));
            let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
            (dx.abs() <= size[0] / 2.0 && dy.abs() <= size[1] / 2.0).then_some((t, [0.0, 0.0, -1.0], [dx, dy]))
        }
        SceneObject::Box { min, max, .. } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for k in 0..3 {
                if dir[k].abs() < EPS {
                    if origin[k] < min[k] || origin[k] > max[k] {
                        return None;
                    }
                    continue;
                }
                let (a, b) = ((min[k] - origin[k]) / dir[k], (max[k] - origin[k]) / dir[k]);
                let (near, far) = if a < b { (a, b) } else { (b, a) };
                if near > t0 {
                    t0 = near;
                    axis = k;
                }
                t1 = t1.min(far);
            }
            if t0 > t1 || t0 <= EPS {
                return None;
            }
            let p = add(origin, mul(dir, t0));
            let mut n = [0.0; 3];
            n[axis] = -dir[axis].signum();
            // Texture coordinates: the two in-face axes.
            let uv = match axis {
                0 => [p[2] - min[2], p[1] - min[1]],
                1 => [p[0] - min[0], p[2] - min[2]],
                _ => [p[0] - min[0], p[1] - min[1]],
            };
            Some((t0, n, uv))
        }
    }
}

fn cast(objects: &[SceneObject], origin: V3, dir: V3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, obj) in objects.iter().enumerate() {
        if let Some((t, normal, uv)) = intersect(obj, origin, dir) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, point: add(origin, mul(dir, t)), normal, uv, object: i });
            }
        }
    }
    best
}

/// Sum of three random sinusoids per channel.
#[derive(Debug, Clone)]
struct Texture {
    waves: [[(f64, f64, f64, f64); 3]; 3],
    base: V3,
}

impl Texture {
    fn new(seed: u64, wavelength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for channel in &mut waves {
            for w in channel.iter_mut() {
                let lambda = wavelength * rng.random_range(1.0..3.0);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / lambda;
                *w = (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.04..0.1));
            }
        }
        Self { waves, base }
    }

    fn albedo(&self, uv: [f64; 2]) -> V3 {
        let mut c = self.base;
        for (ch, waves) in self.waves.iter().enumerate() {
            for &(kx, ky, phase, amp) in waves {
                c[ch] += amp * (kx * uv[0] + ky * uv[1] + phase).sin();
            }
        }
        c
    }
}

/// Rendered views, ground truth per view, and sparse points.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub views: Vec<CameraView>,
    pub ground_truth: Vec<DisparityMap>,
    pub points: Vec<SparsePoint>,
}

/// Nearest 16-bit level, so that images survive a 16-bit PNG round trip.
pub fn quantize16(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 65535.0).round() as u16) as f32 / 65535.0
}

pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let cams = cameras(&spec.trajectory);
    for (i, cam) in cams.iter().enumerate() {
        for (j, obj) in spec.objects.iter().enumerate() {
            let corners: Vec<V3> = match obj {
                SceneObject::Plane { center, size, .. } => [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                    .iter()
                    .map(|&(sx, sy)| [center[0] + sx * size[0] / 2.0, center[1] + sy * size[1] / 2.0, center[2]])
                    .collect(),
                SceneObject::Box { min, max, .. } => (0..8)
                    .map(|b| {
                        [
                            if b & 1 == 0 { min[0] } else { max[0] },
                            if b & 2 == 0 { min[1] } else { max[1] },
                            if b & 4 == 0 { min[2] } else { max[2] },
                        ]
                    })
                    .collect(),
            };
            if let Some(z) = corners.iter().map(|&c| cam.to_cam(c)[2]).find(|&z| z <= DEPTH_MARGIN) {
                return Err(Error::Scene(format!(
                    "object {j} reaches depth {z:.3} in camera {i}; every object must lie at least {DEPTH_MARGIN} in front of every camera"
                )));
            }
        }
    }
    let textures: Vec<Texture> = spec
        .objects
        .iter()
        .map(|o| match o {
            SceneObject::Plane { texture_seed, .. } | SceneObject::Box { texture_seed, .. } => {
                Texture::new(*texture_seed, spec.texture_wavelength)
            }
        })
        .collect();
    let light = normalize(spec.light);
    let (cx, cy) = principal_point(spec);
    let intrinsics = CameraIntrinsics::new(spec.focal, spec.focal, cx, cy)?;

    let mut views = Vec::with_capacity(cams.len());
    let mut ground_truth = Vec::with_capacity(cams.len());
    for (i, cam) in cams.iter().enumerate() {
        let (w, h) = (spec.width, spec.height);
        let rows: Vec<(Vec<f32>, Vec<f32>, Vec<bool>)> = (0..h)
            .into_par_iter()
            .map(|v| {
                let mut color = Vec::with_capacity(w * 3);
                let mut disp = Vec::with_capacity(w);
                let mut valid = Vec::with_capacity(w);
                for u in 0..w {
                    let dir = cam.ray(u as f64, v as f64, spec);
                    match cast(&spec.objects, cam.center, dir) {
                        Some(hit) => {
                            let albedo = textures[hit.object].albedo(hit.uv);
                            let shade = spec.ambient + (1.0 - spec.ambient) * (-dot(hit.normal, light)).max(0.0);
                            color.extend(albedo.iter().map(|&a| quantize16(a * shade)));
                            disp.push((1.0 / cam.to_cam(hit.point)[2]) as f32);
                        }
                        None => {
                            color.extend(spec.sky.iter().map(|&s| quantize16(s)));
                            disp.push(0.0);
                        }
                    }
                    valid.push(true);
                }
                (color, disp, valid)
            })
            .collect();
        let mut color = Vec::with_capacity(w * h * 3);
        let mut disp = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for (c, d, m) in rows {
            color.extend(c);
            disp.extend(d);
            valid.extend(m);
        }
        let rotation = nalgebra::Matrix3::from_fn(|r, c| cam.rows[r][c]);
        let translation = -(rotation * nalgebra::Vector3::from(cam.center));
        let pose = CameraPose::new(rotation, translation)?;
        views.push(CameraView::new(i as u32, Image::from_vec(w, h, 3, color)?, intrinsics, pose)?);
        ground_truth.push(DisparityMap::new(w, h, disp, valid)?);
    }

    let points = sample_points(spec, &cams)?;
    Ok(GeneratedScene { views, ground_truth, points })
}

/// Surface points hit by random rays, each with every camera that sees it
/// unoccluded inside its image.
fn sample_points(spec: &SceneSpec, cams: &[Cam]) -> Result<Vec<SparsePoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e3779b97f4a7c15);
    let (cx, cy) = principal_point(spec);
    let mut points = Vec::with_capacity(spec.sparse_points);
    let mut attempts = 0;
    while points.len() < spec.sparse_points && attempts < spec.sparse_points * 20 {
        attempts += 1;
        let cam = &cams[rng.random_range(0..cams.len())];
        let u = rng.random_range(-0.5..spec.width as f64 - 0.5);
        let v = rng.random_range(-0.5..spec.height as f64 - 0.5);
        let Some(hit) = cast(&spec.objects, cam.center, cam.ray(u, v, spec)) else { continue };
        let mut observers = Vec::new();
        for (id, c) in cams.iter().enumerate() {
            let pc = c.to_cam(hit.point);
            if pc[2] <= 0.0 {
                continue;
            }
            let (pu, pv) = (spec.focal * pc[0] / pc[2] + cx, spec.focal * pc[1] / pc[2] + cy);
            if pu < -0.5 || pv < -0.5 || pu > spec.width as f64 - 0.5 || pv > spec.height as f64 - 0.5 {
                continue;
            }
            let to_point = sub(hit.point, c.center);
            let dist = dot(to_point, to_point).sqrt();
            let seen = cast(&spec.objects, c.center, mul(to_point, 1.0 / dist));
            if seen.is_some_and(|s| (s.t - dist).abs() <= 1e-6 * dist) {
                observers.push(id as u32);
            }
        }
        if observers.is_empty() {
            continue;
        }
        points.push(SparsePoint::new(nalgebra::Vector3::from(hit.point), observers)?);
    }
    Ok(points)
}
