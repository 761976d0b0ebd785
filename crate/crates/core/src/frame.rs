//! RGB-D frames, pinhole back-projection, surface normals and keypoint lifting.

use alloc::vec::Vec;

use nalgebra::SymmetricEigen;

use crate::geom::{Mat3, Vec3};
use crate::math;
use crate::{Error, Result};

/// Default side of the square normal-estimation window, in pixels.
pub const DEFAULT_NORMAL_WINDOW: usize = 11;
/// Depth spread inside a window above which the fit is restricted to the
/// surface around the center pixel.
pub const DISCONTINUITY_RANGE: f64 = 50.0;
pub const DISCONTINUITY_BAND: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive"));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidArgument("principal point outside the image"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Nominal VGA intrinsics of a consumer RGB-D sensor.
    pub fn vga() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
        }
    }
}

pub fn backproject(intr: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(Vec3::new(
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        depth,
    ))
}

/// Perspective projection; the exact inverse of [`backproject`].
pub fn project(intr: &CameraIntrinsics, p: &Vec3) -> (f64, f64, f64) {
    (p.x * intr.fx / p.z + intr.cx, p.y * intr.fy / p.z + intr.cy, p.z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    /// Row-major RGB pixels.
    pub color: Vec<[u8; 3]>,
    /// Row-major depth in millimeters; 0 marks an invalid measurement.
    pub depth: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    pub fn new(color: Vec<[u8; 3]>, depth: Vec<f64>, intrinsics: CameraIntrinsics) -> Result<Self> {
        let n = intrinsics.width * intrinsics.height;
        if color.len() != n || depth.len() != n {
            return Err(Error::InvalidArgument("color/depth size differs from the intrinsics"));
        }
        Ok(Self {
            color,
            depth,
            intrinsics,
        })
    }

    /// Depth at integer pixel `(x, y)`, or `None` when outside the image or invalid.
    pub fn depth_at(&self, x: i64, y: i64) -> Option<f64> {
        let (w, h) = (self.intrinsics.width as i64, self.intrinsics.height as i64);
        if x < 0 || y < 0 || x >= w || y >= h {
            return None;
        }
        let d = self.depth[(y * w + x) as usize];
        (d > 0.0).then_some(d)
    }

    fn nearest_pixel(u: f64, v: f64) -> (i64, i64) {
        (math::round(u) as i64, math::round(v) as i64)
    }
}

/// Unit normal of the plane fitted to the back-projected pixels around
/// `(u, v)`, oriented toward the camera.
pub fn estimate_normal(frame: &RgbdFrame, u: f64, v: f64, window: usize) -> Result<Vec3> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument("normal window must be odd and >= 3"));
    }
    let (px, py) = RgbdFrame::nearest_pixel(u, v);
    let center_depth = frame.depth_at(px, py).ok_or(Error::InvalidDepth(0.0))?;
    let center = backproject(&frame.intrinsics, px as f64, py as f64, center_depth)?;

    let half = (window / 2) as i64;
    let mut samples: Vec<(f64, f64, f64)> = Vec::with_capacity(window * window);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in py - half..=py + half {
        for x in px - half..=px + half {
            if let Some(d) = frame.depth_at(x, y) {
                lo = lo.min(d);
                hi = hi.max(d);
                samples.push((x as f64, y as f64, d));
            }
        }
    }
    if hi - lo > DISCONTINUITY_RANGE {
        samples.retain(|&(_, _, d)| math::abs(d - center_depth) <= DISCONTINUITY_BAND);
    }
    if samples.len() < 3 {
        return Err(Error::InsufficientSupport { found: samples.len() });
    }

    let points: Vec<Vec3> = samples
        .iter()
        .map(|&(x, y, d)| backproject(&frame.intrinsics, x, y, d).expect("valid depth"))
        .collect();
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    let mut cov = Mat3::zeros();
    for p in &points {
        let c = p - mean;
        cov += c * c.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("three eigenvalues");
    let mut normal: Vec3 = eig.eigenvectors.column(idx).into_owned();
    let len = normal.norm();
    if !(len > 0.0) {
        return Err(Error::InsufficientSupport { found: samples.len() });
    }
    normal /= len;
    if normal.dot(&center) > 0.0 {
        normal = -normal;
    }
    Ok(normal)
}

/// A keypoint with a 3D position, surface normal and descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint3D {
    pub pixel: [f64; 2],
    pub position: Vec3,
    pub normal: Vec3,
    pub descriptor: Vec<f64>,
}

impl Keypoint3D {
    /// Unit normal within 1e-6 and positive depth.
    pub fn is_valid(&self) -> bool {
        math::abs(self.normal.norm() - 1.0) <= 1e-6 && self.position.z > 0.0
    }
}

/// An image keypoint before lifting.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint2D {
    pub u: f64,
    pub v: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftOutcome {
    pub keypoints: Vec<Keypoint3D>,
    pub dropped: usize,
}

/// Lifts image keypoints to 3D, dropping those on invalid depth or whose
/// normal cannot be estimated. Order is preserved.
pub fn lift_keypoints(frame: &RgbdFrame, kps: &[Keypoint2D], window: usize) -> LiftOutcome {
    let lifted = crate::par::map_range(kps.len(), |i| lift_one(frame, &kps[i], window));
    let total = lifted.len();
    let keypoints: Vec<Keypoint3D> = lifted.into_iter().flatten().collect();
    LiftOutcome {
        dropped: total - keypoints.len(),
        keypoints,
    }
}

fn lift_one(frame: &RgbdFrame, kp: &Keypoint2D, window: usize) -> Option<Keypoint3D> {
    let (px, py) = RgbdFrame::nearest_pixel(kp.u, kp.v);
    let depth = frame.depth_at(px, py)?;
    let position = backproject(&frame.intrinsics, kp.u, kp.v, depth).ok()?;
    let normal = estimate_normal(frame, kp.u, kp.v, window).ok()?;
    Some(Keypoint3D {
        pixel: [kp.u, kp.v],
        position,
        normal,
        descriptor: kp.descriptor.clone(),
    })
}
