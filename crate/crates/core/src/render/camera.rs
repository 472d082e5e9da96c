//! Pinhole camera with a y-up image plane.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Points closer than this along the optical axis are treated as behind.
pub const NEAR: f64 = 1e-6;

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Option<Vec3> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fov_y: f64,
    pub image_size: usize,
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
}

/// Pixel coordinates (column, row from the top-left corner) and the depth
/// along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
}

impl Camera {
    pub fn new(fov_y: f64, image_size: usize, position: Vec3, look_at: Vec3, up: Vec3) -> Result<Self> {
        let cam = Self {
            fov_y,
            image_size,
            position,
            look_at,
            up,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidConfig(format!("fov_y {} outside (0, pi)", self.fov_y)));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidConfig("camera image_size must be positive".into()));
        }
        let fwd = normalize(sub(self.look_at, self.position))
            .ok_or_else(|| Error::InvalidConfig("camera position equals look_at".into()))?;
        if normalize(cross(fwd, self.up)).is_none() {
            return Err(Error::InvalidConfig("camera up is parallel to the view direction".into()));
        }
        Ok(())
    }

    /// Rows are the camera's right, up and forward axes in world space.
    pub fn basis(&self) -> [Vec3; 3] {
        let fwd = normalize(sub(self.look_at, self.position)).expect("validated camera");
        let right = normalize(cross(fwd, self.up)).expect("validated camera");
        let up = cross(right, fwd);
        [right, up, fwd]
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.image_size as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.position);
        let b = self.basis();
        [dot(b[0], d), dot(b[1], d), dot(b[2], d)]
    }

    pub fn project(&self, p: Vec3) -> Result<Projection> {
        let [x, y, z] = self.to_camera(p);
        if z <= NEAR {
            return Err(Error::BehindCamera(z));
        }
        let (f, c) = (self.focal(), 0.5 * self.image_size as f64);
        Ok(Projection {
            pixel: [c + f * x / z, c - f * y / z],
            depth: z,
        })
    }

    /// Rows: d(column)/dp, d(row)/dp, d(depth)/dp.
    pub fn project_jacobian(&self, p: Vec3) -> Result<[Vec3; 3]> {
        let [x, y, z] = self.to_camera(p);
        if z <= NEAR {
            return Err(Error::BehindCamera(z));
        }
        let f = self.focal();
        let [r, u, w] = self.basis();
        let mut ju = [0.0; 3];
        let mut jv = [0.0; 3];
        for i in 0..3 {
            ju[i] = f * (r[i] / z - x * w[i] / (z * z));
            jv[i] = -f * (u[i] / z - y * w[i] / (z * z));
        }
        Ok([ju, jv, w])
    }
}
