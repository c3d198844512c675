//! Camera model and small geometric helpers.
//!
//! World frame is z-up. Camera frame follows the pinhole convention used by
//! most RGB-D pipelines: x right, y down, z forward. Pixel `(col, row)` has its
//! center at `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("image size must be non-zero")]
    EmptyImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square-pixel intrinsics for a given horizontal field of view (degrees),
    /// principal point at the image center.
    pub fn from_hfov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let fx = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Camera extrinsics plus intrinsics. `rotation` maps world to camera:
/// `p_cam = rotation * (p_world - position)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub rotation: Mat3,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(position: Vec3, rotation: Mat3, intrinsics: Intrinsics) -> Result<Self, CameraError> {
        let dev = (rotation * rotation.transpose() - Mat3::identity()).abs().max();
        if !(dev <= 1e-6) {
            return Err(CameraError::NotOrthonormal(dev));
        }
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(CameraError::BadFocal { fx: intrinsics.fx, fy: intrinsics.fy });
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(CameraError::EmptyImage);
        }
        Ok(Self { position, rotation, intrinsics })
    }

    /// Level camera at `position` looking along heading `yaw` (radians,
    /// counter-clockwise from +x) in the z-up world.
    pub fn level(position: Vec3, yaw: f64, intrinsics: Intrinsics) -> Self {
        Self {
            position,
            rotation: level_rotation(yaw),
            intrinsics,
        }
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.position)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * p + self.position
    }

    /// World-frame direction through pixel coordinates `(u, v)`, scaled so its
    /// camera-frame z component is 1 (so a ray parameter equals z-depth).
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.rotation.transpose() * d_cam
    }

    /// Back-project the center of pixel `(col, row)` at z-depth `depth`.
    pub fn unproject(&self, col: usize, row: usize, depth: f64) -> Vec3 {
        self.position + self.pixel_direction(col as f64 + 0.5, row as f64 + 0.5) * depth
    }

    /// Pixel coordinates and z-depth of a world point, `None` when behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }
}

/// World-to-camera rotation for a level camera with the given heading.
pub fn level_rotation(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    // rows: camera x (right), camera y (down), camera z (forward)
    Mat3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0)
}

/// Axis-aligned 3D box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn expanded_xy(&self, r: f64) -> Self {
        Self {
            min: [self.min[0] - r, self.min[1] - r, self.min[2]],
            max: [self.max[0] + r, self.max[1] + r, self.max[2]],
        }
    }

    /// Scale about the center by `f` along every axis.
    pub fn scaled(&self, f: f64) -> Self {
        let c = self.center();
        let mut out = *self;
        for i in 0..3 {
            let h = 0.5 * (self.max[i] - self.min[i]) * f;
            out.min[i] = c[i] - h;
            out.max[i] = c[i] + h;
        }
        out
    }

    /// Slab test. Returns the entry parameter `t >= t_min` (or the exit when
    /// the origin is inside) and the axis of the face that was hit.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<(f64, usize)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let mut axis0 = 0;
        let mut axis1 = 0;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            if a > t0 {
                t0 = a;
                axis0 = i;
            }
            if b < t1 {
                t1 = b;
                axis1 = i;
            }
            if t0 > t1 {
                return None;
            }
        }
        if t0 >= t_min {
            Some((t0, axis0))
        } else if t1 >= t_min {
            Some((t1, axis1))
        } else {
            None
        }
    }

    /// Positive-area overlap of the xy footprint with an axis-aligned rectangle.
    pub fn footprint_overlaps(&self, min: [f64; 2], max: [f64; 2]) -> bool {
        self.min[0] < max[0] && self.max[0] > min[0] && self.min[1] < max[1] && self.max[1] > min[1]
    }

    pub fn z_overlaps(&self, lo: f64, hi: f64) -> bool {
        self.min[2] < hi && self.max[2] > lo
    }

    /// Distance from a 2D point to the xy footprint (0 inside).
    pub fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.min[0] - x).max(0.0).max(x - self.max[0]);
        let dy = (self.min[1] - y).max(0.0).max(y - self.max[1]);
        (dx * dx + dy * dy).sqrt()
    }
}

/// Wrap an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = a.rem_euclid(tau);
    if r >= tau {
        0.0
    } else {
        r
    }
}
