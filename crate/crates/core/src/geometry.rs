//! Calibrated multi-view camera geometry.
//!
//! Cameras follow the computer-vision convention: the rotation and
//! translation map world points into the camera frame (`x_c = R x_w + t`),
//! the camera looks along its local `+z` axis, `+x` points right and `+y`
//! points down in the image. Pixel coordinates are continuous; the pixel at
//! integer index `(i, j)` covers `[i, i + 1) x [j, j + 1)`, so its center is
//! at `(i + 0.5, j + 0.5)`.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (deviation {0:e})")]
    InvalidRotation(f64),
    #[error("non-finite camera parameter")]
    NonFinite,
    /// The two camera centers coincide, so epipolar geometry is undefined.
    #[error("camera centers coincide (baseline {0:e}); epipolar geometry is undefined")]
    CoincidentCameras(f64),
    #[error("key view set is empty")]
    EmptyKeySet,
    #[error("view {0} is itself a key view")]
    ViewIsKey(usize),
    #[error("view index {index} out of range for {count} cameras")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("camera file: {0}")]
    Io(#[from] std::io::Error),
    #[error("camera file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics for a `width x height` image with the given horizontal field of
    /// view (radians) and the principal point at the image center.
    pub fn from_fov(fov_x: T, width: usize, height: usize) -> Result<Self, GeometryError> {
        let two = T::lit(2.0);
        let f = T::of_usize(width) / (two * (fov_x / two).tan());
        Self::new(f, f, T::of_usize(width) / two, T::of_usize(height) / two, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let vals = [self.fx, self.fy, self.cx, self.cy];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be non-zero".into()));
        }
        if self.cx < T::zero()
            || self.cx >= T::of_usize(self.width)
            || self.cy < T::zero()
            || self.cy >= T::of_usize(self.height)
        {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image".into()));
        }
        Ok(())
    }

    /// The calibration matrix `K`.
    pub fn matrix(&self) -> Matrix3<T> {
        Matrix3::new(
            self.fx, T::zero(), self.cx,
            T::zero(), self.fy, self.cy,
            T::zero(), T::zero(), T::one(),
        )
    }

    /// Closed-form `K^-1`.
    pub fn inverse_matrix(&self) -> Matrix3<T> {
        Matrix3::new(
            T::one() / self.fx, T::zero(), -self.cx / self.fx,
            T::zero(), T::one() / self.fy, -self.cy / self.fy,
            T::zero(), T::zero(), T::one(),
        )
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// A calibrated camera with a world-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera<T: Real> {
    pub intrinsics: Intrinsics<T>,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

fn orthonormal_tolerance<T: Real>() -> f64 {
    (T::default_epsilon().as_f64() * 100.0).max(1e-9)
}

impl<T: Real> Camera<T> {
    pub fn new(
        intrinsics: Intrinsics<T>,
        rotation: Matrix3<T>,
        translation: Vector3<T>,
    ) -> Result<Self, GeometryError> {
        let cam = Self { intrinsics, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate world
    /// up direction (the image `-y` axis).
    pub fn look_at(
        intrinsics: Intrinsics<T>,
        eye: Vector3<T>,
        target: Vector3<T>,
        up: Vector3<T>,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let dev = (self.rotation * self.rotation.transpose() - Matrix3::identity()).norm().as_f64();
        let det = self.rotation.determinant().as_f64();
        if dev > orthonormal_tolerance::<T>() || det <= 0.0 {
            return Err(GeometryError::InvalidRotation(dev));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit camera `z` axis expressed in world coordinates.
    pub fn forward(&self) -> Vector3<T> {
        self.rotation.row(2).transpose().normalize()
    }

    pub fn world_to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Unit world-space direction of the ray through continuous pixel `(x, y)`.
    pub fn pixel_ray(&self, x: T, y: T) -> Vector3<T> {
        let k = &self.intrinsics;
        let local = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, T::one());
        (self.rotation.transpose() * local).normalize()
    }

    /// World point at camera-frame depth `z` along the ray through pixel `(x, y)`.
    pub fn unproject(&self, x: T, y: T, z: T) -> Vector3<T> {
        let k = &self.intrinsics;
        let local = Vector3::new((x - k.cx) / k.fx * z, (y - k.cy) / k.fy * z, z);
        self.rotation.transpose() * (local - self.translation)
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            intrinsics: self.intrinsics.cast(),
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

/// Pinhole projection of a world point. Returns `None` when the point lies
/// on or behind the camera plane (camera-frame depth `<= 0`).
pub fn project<T: Real>(camera: &Camera<T>, point: &Vector3<T>) -> Option<Vector2<T>> {
    let pc = camera.world_to_camera(point);
    if pc.z <= T::zero() {
        return None;
    }
    let k = &camera.intrinsics;
    Some(Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(), -v.z, v.y,
        v.z, T::zero(), -v.x,
        -v.y, v.x, T::zero(),
    )
}

/// Fundamental matrix mapping pixels of `cam_a` to epipolar lines in `cam_b`,
/// so that `v^T F u = 0` for corresponding homogeneous pixels `u` (in A) and
/// `v` (in B). Computed from the known calibration and relative pose.
pub fn fundamental_matrix<T: Real>(cam_a: &Camera<T>, cam_b: &Camera<T>) -> Result<Matrix3<T>, GeometryError> {
    let baseline = (cam_a.center() - cam_b.center()).norm();
    if baseline.as_f64() <= 1e-9 {
        return Err(GeometryError::CoincidentCameras(baseline.as_f64()));
    }
    let r_rel = cam_b.rotation * cam_a.rotation.transpose();
    let t_rel = cam_b.translation - r_rel * cam_a.translation;
    let essential = skew(&t_rel) * r_rel;
    Ok(cam_b.intrinsics.inverse_matrix().transpose() * essential * cam_a.intrinsics.inverse_matrix())
}

/// Line `a x + b y + c = 0` in pixel coordinates, normalized so `a^2 + b^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine<T: Real> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> EpipolarLine<T> {
    /// Normalizes raw coefficients; `None` if `(a, b)` vanishes.
    pub fn from_coefficients(a: T, b: T, c: T) -> Option<Self> {
        let n = (a * a + b * b).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return None;
        }
        Some(Self { a: a / n, b: b / n, c: c / n })
    }
}

/// Epipolar line `F u` in the target view for pixel `u` of the source view.
///
/// Returns `None` when `u` is (numerically) the epipole, where `F u`
/// vanishes and no line is defined.
pub fn epipolar_line<T: Real>(f: &Matrix3<T>, u: &Vector2<T>) -> Option<EpipolarLine<T>> {
    let uh = Vector3::new(u.x, u.y, T::one());
    let l = f * uh;
    let scale = f.norm() * uh.norm();
    let ab = (l.x * l.x + l.y * l.y).sqrt();
    if ab <= T::lit(1e3) * T::default_epsilon() * scale {
        return None;
    }
    EpipolarLine::from_coefficients(l.x, l.y, l.z)
}

/// Unsigned distance (pixels) between a normalized line and a pixel.
pub fn point_line_distance<T: Real>(line: &EpipolarLine<T>, v: &Vector2<T>) -> T {
    (line.a * v.x + line.b * v.y + line.c).abs()
}

/// Angle (radians) between the forward vectors of two cameras.
pub fn view_angle<T: Real>(a: &Camera<T>, b: &Camera<T>) -> T {
    let d = a.forward().dot(&b.forward());
    d.clamp(-T::one(), T::one()).acos()
}

fn cmp_angle_index<T: Real>(a: (T, usize), b: (T, usize)) -> Ordering {
    a.0.as_f64().total_cmp(&b.0.as_f64()).then(a.1.cmp(&b.1))
}

/// Orders cameras into a smooth trajectory.
///
/// The reference camera is the one whose center has the largest world `x`
/// coordinate; it comes first, and the rest follow by ascending angle between
/// their forward vector and the reference forward vector. Ties keep the
/// original index order.
pub fn sort_cameras<T: Real>(cameras: &[Camera<T>]) -> Vec<usize> {
    if cameras.is_empty() {
        return Vec::new();
    }
    let mut reference = 0;
    let mut best = cameras[0].center().x;
    for (i, cam) in cameras.iter().enumerate().skip(1) {
        let x = cam.center().x;
        if x > best {
            best = x;
            reference = i;
        }
    }
    let mut rest: Vec<(T, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != reference)
        .map(|(i, cam)| (view_angle(&cameras[reference], cam), i))
        .collect();
    rest.sort_by(|a, b| cmp_angle_index(*a, *b));
    std::iter::once(reference).chain(rest.into_iter().map(|(_, i)| i)).collect()
}

/// Key views ranked by forward-vector angle to view `t` (nearest first, ties
/// by index), paired with their angles.
pub fn rank_key_views<T: Real>(
    t: usize,
    keys: &[usize],
    cameras: &[Camera<T>],
) -> Result<Vec<(usize, T)>, GeometryError> {
    if keys.is_empty() {
        return Err(GeometryError::EmptyKeySet);
    }
    let count = cameras.len();
    for &i in keys.iter().chain(std::iter::once(&t)) {
        if i >= count {
            return Err(GeometryError::IndexOutOfRange { index: i, count });
        }
    }
    if keys.contains(&t) {
        return Err(GeometryError::ViewIsKey(t));
    }
    let mut ranked: Vec<(T, usize)> = keys.iter().map(|&k| (view_angle(&cameras[t], &cameras[k]), k)).collect();
    ranked.sort_by(|a, b| cmp_angle_index(*a, *b));
    ranked.dedup_by_key(|e| e.1);
    Ok(ranked.into_iter().map(|(a, k)| (k, a)).collect())
}

/// The two key views nearest to view `t` by forward-vector angle. With a
/// single key, that key is returned twice.
pub fn nearest_key_views<T: Real>(
    t: usize,
    keys: &[usize],
    cameras: &[Camera<T>],
) -> Result<(usize, usize), GeometryError> {
    let ranked = rank_key_views(t, keys, cameras)?;
    let first = ranked[0].0;
    let second = ranked.get(1).map_or(first, |e| e.0);
    Ok((first, second))
}

/// One camera as stored in a camera-set JSON document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraSet {
    pub cameras: Vec<CameraRecord>,
}

impl CameraRecord {
    pub fn from_camera<T: Real>(cam: &Camera<T>) -> Self {
        let k = &cam.intrinsics;
        let r = &cam.rotation;
        let mut rotation = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                rotation[row * 3 + col] = r[(row, col)].as_f64();
            }
        }
        Self {
            fx: k.fx.as_f64(),
            fy: k.fy.as_f64(),
            cx: k.cx.as_f64(),
            cy: k.cy.as_f64(),
            width: k.width,
            height: k.height,
            rotation,
            translation: [cam.translation.x.as_f64(), cam.translation.y.as_f64(), cam.translation.z.as_f64()],
        }
    }

    pub fn to_camera<T: Real>(&self) -> Result<Camera<T>, GeometryError> {
        let k = Intrinsics::new(
            T::lit(self.fx),
            T::lit(self.fy),
            T::lit(self.cx),
            T::lit(self.cy),
            self.width,
            self.height,
        )?;
        let r = Matrix3::from_row_slice(&self.rotation.map(T::lit));
        let t = Vector3::from_row_slice(&self.translation.map(T::lit));
        Camera::new(k, r, t)
    }
}

impl CameraSet {
    pub fn from_cameras<T: Real>(cameras: &[Camera<T>]) -> Self {
        Self { cameras: cameras.iter().map(CameraRecord::from_camera).collect() }
    }

    pub fn to_cameras<T: Real>(&self) -> Result<Vec<Camera<T>>, GeometryError> {
        self.cameras.iter().map(CameraRecord::to_camera).collect()
    }
}

pub fn load_cameras<T: Real>(path: &Path) -> Result<Vec<Camera<T>>, GeometryError> {
    let text = std::fs::read_to_string(path)?;
    let set: CameraSet = serde_json::from_str(&text)?;
    set.to_cameras()
}

pub fn save_cameras<T: Real>(path: &Path, cameras: &[Camera<T>]) -> Result<(), GeometryError> {
    let text = serde_json::to_string_pretty(&CameraSet::from_cameras(cameras))?;
    std::fs::write(path, text)?;
    Ok(())
}
