//! Pinhole cameras, plane-induced homographies and bilinear warping.
//!
//! Conventions: poses map world to camera (`x_cam = R * x_world + t`), pixel
//! (0, 0) is the center of the top-left pixel, and disparity is reciprocal
//! depth measured along the camera z-axis.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Smallest camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-9;
const ORTHONORMAL_TOL: f64 = 1e-6;
const DEGENERATE_DET: f64 = 1e-12;
/// Sampling positions this close outside the image snap onto its border,
/// absorbing round-off from K·K⁻¹ products.
const BORDER_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    /// Rejects rotations that are not orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("pose contains non-finite values".into()));
        }
        let gram_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if gram_err > ORTHONORMAL_TOL {
            return Err(Error::Config(format!(
                "rotation is not orthonormal (|RᵀR - I| = {gram_err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Config(format!("rotation determinant is {det:.6}, expected 1")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Pose of a camera at world position `center` with the given
    /// world-to-camera rotation.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, -(rotation * center))
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Transform taking this camera's frame to `other`'s frame.
    pub fn relative_to(&self, other: &CameraPose) -> (Matrix3<f64>, Vector3<f64>) {
        let r = other.rotation * self.rotation.transpose();
        let t = other.translation - r * self.translation;
        (r, t)
    }
}

#[derive(Debug, Clone)]
pub struct CameraView {
    pub id: u32,
    pub image: Image,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl CameraView {
    pub fn new(id: u32, image: Image, intrinsics: CameraIntrinsics, pose: CameraPose) -> Result<Self> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Shape(format!("view {id} has an empty image")));
        }
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "view {id} must be RGB, got {} channels",
                image.channels()
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("view {id} has colors outside [0, 1]")));
        }
        intrinsics.validate()?;
        Ok(Self { id, image, intrinsics, pose })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.image.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// 3×3 map from reference pixel to neighbor pixel homogeneous coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    /// Pure shift of the sampling position by (dx, dy).
    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn check(&self) -> Result<()> {
        let det = self.0.determinant();
        if !det.is_finite() || det.abs() <= DEGENERATE_DET {
            return Err(Error::DegenerateConfiguration(format!(
                "homography determinant {det:.3e}"
            )));
        }
        Ok(())
    }

    /// Applies the map to pixel (x, y); `None` when the image point lies at
    /// or behind infinity (w ≤ 0).
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w <= 0.0 || !w.is_finite() {
            return None;
        }
        let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w;
        let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w;
        Some((u, v))
    }
}

/// Projects a world point into `view`, returning the pixel and the
/// camera-frame depth.
pub fn project(point: &Vector3<f64>, view: &CameraView) -> Result<(Vector2<f64>, f64)> {
    project_with(point, &view.intrinsics, &view.pose)
}

pub fn project_with(
    point: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<(Vector2<f64>, f64)> {
    let cam = pose.transform(point);
    let depth = cam.z;
    if !(depth > MIN_DEPTH) {
        return Err(Error::BehindCamera { depth });
    }
    let px = Vector2::new(
        intrinsics.fx * cam.x / depth + intrinsics.cx,
        intrinsics.fy * cam.y / depth + intrinsics.cy,
    );
    Ok((px, depth))
}

/// Homography induced by the reference-fronto-parallel plane at `disparity`.
/// Disparity 0 is the plane at infinity, where translation drops out.
pub fn plane_homography(ref_view: &CameraView, nbr: &CameraView, disparity: f64) -> Result<Homography> {
    plane_homography_with(
        &ref_view.intrinsics,
        &ref_view.pose,
        &nbr.intrinsics,
        &nbr.pose,
        disparity,
    )
}

pub fn plane_homography_with(
    ref_k: &CameraIntrinsics,
    ref_pose: &CameraPose,
    nbr_k: &CameraIntrinsics,
    nbr_pose: &CameraPose,
    disparity: f64,
) -> Result<Homography> {
    if !(disparity >= 0.0) || !disparity.is_finite() {
        return Err(Error::InvalidRange(format!("disparity must be >= 0, got {disparity}")));
    }
    let (r_rel, t_rel) = ref_pose.relative_to(nbr_pose);
    // Points on the plane satisfy d * z = 1, so x_n = (R + d t e_zᵀ) x_r.
    let normal = Vector3::z();
    let planar = r_rel + t_rel * normal.transpose() * disparity;
    let h = Homography(nbr_k.matrix() * planar * ref_k.inverse_matrix());
    h.check()?;
    Ok(h)
}

/// Bilinear lookup at (x, y). Writes zeros and returns `false` outside
/// `[0, W-1] × [0, H-1]`.
#[inline]
pub fn bilinear_sample_into(image: &Image, x: f64, y: f64, out: &mut [f32]) -> bool {
    let (w, h) = (image.width(), image.height());
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    if !(x >= -BORDER_SNAP && y >= -BORDER_SNAP && x <= xmax + BORDER_SNAP && y <= ymax + BORDER_SNAP) {
        out.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let p00 = image.pixel(x0, y0);
    let p10 = image.pixel(x1, y0);
    let p01 = image.pixel(x0, y1);
    let p11 = image.pixel(x1, y1);
    for (c, o) in out.iter_mut().enumerate() {
        let top = p00[c] + (p10[c] - p00[c]) * fx;
        let bottom = p01[c] + (p11[c] - p01[c]) * fx;
        *o = top + (bottom - top) * fy;
    }
    true
}

pub fn bilinear_sample(image: &Image, xy: Vector2<f64>) -> (Vec<f32>, bool) {
    let mut out = vec![0.0; image.channels()];
    let valid = bilinear_sample_into(image, xy.x, xy.y, &mut out);
    (out, valid)
}

/// Warps `nbr_image` into a `width`×`height` reference frame: each output
/// pixel p takes the neighbor sample at H·p.
pub fn warp_image(
    nbr_image: &Image,
    homography: &Homography,
    width: usize,
    height: usize,
) -> Result<(Image, Vec<bool>)> {
    warp_region(nbr_image, homography, 0, 0, width, height)
}

/// Like [`warp_image`] but only for the reference window whose top-left
/// pixel is (`x0`, `y0`).
pub fn warp_region(
    nbr_image: &Image,
    homography: &Homography,
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
) -> Result<(Image, Vec<bool>)> {
    homography.check()?;
    let channels = nbr_image.channels();
    let mut out = Image::new(width, height, channels);
    let mut mask = vec![false; width * height];
    let data = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let px = &mut data[i * channels..(i + 1) * channels];
            mask[i] = match homography.apply((x0 + x) as f64, (y0 + y) as f64) {
                Some((u, v)) => bilinear_sample_into(nbr_image, u, v, px),
                None => false,
            };
        }
    }
    Ok((out, mask))
}

/// Rotation about an arbitrary axis (Rodrigues), handy for synthetic rigs.
pub fn rotation_from_axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let axis = nalgebra::Unit::new_normalize(axis);
    *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(id: u32, k: CameraIntrinsics, pose: CameraPose) -> CameraView {
        CameraView::new(id, Image::new(4, 4, 3), k, pose).unwrap()
    }

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn projects_on_axis_and_off_axis_points() {
        let v = view(0, k100(), CameraPose::identity());
        let (px, depth) = project(&Vector3::new(0.0, 0.0, 2.0), &v).unwrap();
        assert_eq!((px.x, px.y, depth), (0.0, 0.0, 2.0));
        let (px, depth) = project(&Vector3::new(1.0, 0.0, 2.0), &v).unwrap();
        assert_eq!((px.x, px.y, depth), (50.0, 0.0, 2.0));
    }

    #[test]
    fn behind_camera_is_rejected() {
        let v = view(0, k100(), CameraPose::identity());
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &v),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project(&Vector3::new(0.0, 0.0, 0.0), &v).is_err());
    }

    fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        rotation_from_axis_angle(axis, rng.random_range(-max_angle..max_angle))
    }

    #[test]
    fn projection_matches_coordinatewise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let r = random_rotation(&mut rng, 0.5);
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pose = CameraPose::new(r, t).unwrap();
            let k = CameraIntrinsics::new(rng.random_range(50.0..500.0), rng.random_range(50.0..500.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)).unwrap();
            let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0));
            // Explicit row-by-row transform.
            let xc = r[(0, 0)] * p.x + r[(0, 1)] * p.y + r[(0, 2)] * p.z + t.x;
            let yc = r[(1, 0)] * p.x + r[(1, 1)] * p.y + r[(1, 2)] * p.z + t.y;
            let zc = r[(2, 0)] * p.x + r[(2, 1)] * p.y + r[(2, 2)] * p.z + t.z;
            let (px, depth) = project_with(&p, &k, &pose).unwrap();
            assert_abs_diff_eq!(depth, zc, epsilon = 1e-9);
            assert_abs_diff_eq!(px.x, k.fx * xc / zc + k.cx, epsilon = 1e-9);
            assert_abs_diff_eq!(px.y, k.fy * yc / zc + k.cy, epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_rejects_reflection_and_skew() {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        assert!(CameraPose::new(flip, Vector3::zeros()).is_err());
        let mut skew = Matrix3::identity();
        skew[(0, 1)] = 0.01;
        assert!(CameraPose::new(skew, Vector3::zeros()).is_err());
    }

    #[test]
    fn identical_cameras_give_identity_homography() {
        let v = view(0, CameraIntrinsics::new(120.0, 110.0, 3.0, 2.0).unwrap(), CameraPose::identity());
        for d in [0.0, 0.3, 2.0] {
            let h = plane_homography(&v, &v, d).unwrap();
            assert_abs_diff_eq!((h.0 - Matrix3::identity()).amax(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn translated_neighbor_shifts_by_focal_times_baseline_times_disparity() {
        let r = view(0, k100(), CameraPose::identity());
        let n = view(1, k100(), CameraPose::new(Matrix3::identity(), Vector3::new(-0.2, 0.0, 0.0)).unwrap());
        let h = plane_homography(&r, &n, 0.5).unwrap();
        for (u, v) in [(0.0, 0.0), (13.0, -4.0), (50.0, 20.0)] {
            let (un, vn) = h.apply(u, v).unwrap();
            assert_abs_diff_eq!(un, u - 10.0, epsilon = 1e-9);
            assert_abs_diff_eq!(vn, v, epsilon = 1e-9);
            // Oracle: lift the pixel onto the depth-2 plane and reproject.
            let x = Vector3::new(u / 100.0 * 2.0, v / 100.0 * 2.0, 2.0);
            let (px, _) = project(&x, &n).unwrap();
            assert_abs_diff_eq!(px.x, un, epsilon = 1e-9);
            assert_abs_diff_eq!(px.y, vn, epsilon = 1e-9);
        }
    }

    #[test]
    fn plane_at_infinity_ignores_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = view(0, k100(), CameraPose::identity());
        let rot = random_rotation(&mut rng, 0.3);
        let a = view(1, k100(), CameraPose::new(rot, Vector3::new(1.0, -2.0, 0.5)).unwrap());
        let b = view(2, k100(), CameraPose::new(rot, Vector3::new(-3.0, 0.1, 2.0)).unwrap());
        let ha = plane_homography(&r, &a, 0.0).unwrap();
        let hb = plane_homography(&r, &b, 0.0).unwrap();
        assert_abs_diff_eq!((ha.0 - hb.0).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn homography_matches_plane_projection_for_random_rigs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let kr = CameraIntrinsics::new(rng.random_range(80.0..200.0), rng.random_range(80.0..200.0), 32.0, 24.0).unwrap();
            let kn = CameraIntrinsics::new(rng.random_range(80.0..200.0), rng.random_range(80.0..200.0), 30.0, 20.0).unwrap();
            let rp = CameraPose::new(random_rotation(&mut rng, 0.2), Vector3::new(rng.random_range(-0.5..0.5), 0.1, 0.0)).unwrap();
            let np = CameraPose::new(random_rotation(&mut rng, 0.2), Vector3::new(rng.random_range(-0.5..0.5), -0.2, 0.3)).unwrap();
            let d = rng.random_range(0.05..0.5);
            let h = plane_homography_with(&kr, &rp, &kn, &np, d).unwrap();
            let (u, v) = (rng.random_range(0.0..64.0), rng.random_range(0.0..48.0));
            let cam = Vector3::new((u - kr.cx) / kr.fx / d, (v - kr.cy) / kr.fy / d, 1.0 / d);
            let world = rp.rotation().transpose() * (cam - rp.translation());
            let (px, _) = project_with(&world, &kn, &np).unwrap();
            let (un, vn) = h.apply(u, v).unwrap();
            assert_abs_diff_eq!(px.x, un, epsilon = 1e-7);
            assert_abs_diff_eq!(px.y, vn, epsilon = 1e-7);
        }
    }

    #[test]
    fn forward_and_backward_plane_homographies_compose_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = CameraIntrinsics::new(150.0, 140.0, 30.0, 25.0).unwrap();
            let rp = CameraPose::identity();
            // Pure translation keeps the plane fronto-parallel in both frames.
            let t = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.2..0.2), 0.1);
            let np_t = CameraPose::new(Matrix3::identity(), t).unwrap();
            let d = rng.random_range(0.1..0.6);
            let d_n = 1.0 / (1.0 / d + np_t.translation().z);
            let fwd = plane_homography_with(&k, &rp, &k, &np_t, d).unwrap();
            let back = plane_homography_with(&k, &np_t, &k, &rp, d_n).unwrap();
            let prod = back.0 * fwd.0;
            let prod = prod / prod[(2, 2)];
            assert_abs_diff_eq!((prod - Matrix3::identity()).amax(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_homography_is_an_error() {
        let k = k100();
        let r = view(0, k, CameraPose::identity());
        // Neighbor sits on the plane z = 1 looking along +z: the plane maps to a line.
        let n = view(1, k, CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0)).unwrap());
        assert!(matches!(plane_homography(&r, &n, 1.0), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn bilinear_sample_contract() {
        let img = Image::from_fn(3, 2, 2, |x, y, c| (x * 10 + y * 100 + c) as f32);
        let (v, ok) = bilinear_sample(&img, Vector2::new(1.0, 1.0));
        assert!(ok);
        assert_eq!(v, vec![110.0, 111.0]);
        let (v, ok) = bilinear_sample(&img, Vector2::new(1.5, 0.0));
        assert!(ok);
        assert_eq!(v, vec![15.0, 16.0]);
        let (v, ok) = bilinear_sample(&img, Vector2::new(-1.0, 0.0));
        assert!(!ok);
        assert_eq!(v, vec![0.0, 0.0]);
        let (_, ok) = bilinear_sample(&img, Vector2::new(2.0, 1.0));
        assert!(ok, "far corner is inside");
        let (_, ok) = bilinear_sample(&img, Vector2::new(2.0001, 1.0));
        assert!(!ok);
    }

    #[test]
    fn identity_warp_is_exact_and_shift_invalidates_border() {
        let img = Image::from_fn(16, 8, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 11.0);
        let (w, mask) = warp_image(&img, &Homography::identity(), 16, 8).unwrap();
        assert_eq!(w, img);
        assert!(mask.iter().all(|&m| m));

        let (w, mask) = warp_image(&img, &Homography::translation(10.0, 0.0), 16, 8).unwrap();
        for y in 0..8 {
            for x in 0..16 {
                if x < 6 {
                    assert!(mask[y * 16 + x]);
                    assert_eq!(w.pixel(x, y), img.pixel(x + 10, y));
                } else {
                    assert!(!mask[y * 16 + x]);
                    assert_eq!(w.pixel(x, y), &[0.0, 0.0, 0.0]);
                }
            }
        }
    }
}
