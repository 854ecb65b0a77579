//! Pinhole cameras: ray generation and point projection.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surfel::{Ray, NEAR_PLANE};
use crate::{Vec2, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation (row-major when serialized).
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation: `x_cam = R x + t`.
    pub translation: Vec3,
}

impl Camera {
    /// Checks the intrinsics and that the transform is a proper rigid motion.
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::data("camera focal lengths must be positive"));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).norm() > 1e-6 {
            return Err(Error::data("camera rotation is not orthonormal"));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::data("camera rotation determinant is not +1"));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::z()
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Ray through a continuous image-plane coordinate. Pixel centers sit at
    /// integer + 0.5.
    pub fn generate_ray(&self, pixel: Vec2) -> Ray {
        let d_cam = Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        );
        let dir = (self.rotation.transpose() * d_cam).normalize();
        Ray {
            origin: self.center(),
            dir,
        }
    }

    /// Pinhole projection; depth is camera-frame z. `None` when the point is
    /// behind the near plane.
    pub fn project_point(&self, x: &Vec3) -> Option<(Vec2, f64)> {
        let xc = self.to_camera(x);
        if xc.z <= NEAR_PLANE {
            return None;
        }
        let pixel = Vec2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        );
        Some((pixel, xc.z))
    }

    /// Inverse of `project_point` for a given camera-frame depth.
    pub fn backproject_at_depth(&self, pixel: Vec2, z: f64) -> Vec3 {
        let xc = Vec3::new(
            (pixel.x - self.cx) / self.fx * z,
            (pixel.y - self.cy) / self.fy * z,
            z,
        );
        self.rotation.transpose() * (xc - self.translation)
    }

    /// Camera at `eye` looking toward `target`, `up` roughly up, with a
    /// horizontal field of view in degrees and a centered principal point.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        hfov_deg: f64,
        width: u32,
        height: u32,
    ) -> Camera {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right).normalize();
        // Rows of the world-to-camera rotation: camera x right, y down, z forward.
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            fwd.transpose(),
        ]);
        let translation = -(rotation * eye);
        let fx = width as f64 * 0.5 / (hfov_deg.to_radians() * 0.5).tan();
        Camera {
            fx,
            fy: fx,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
            rotation,
            translation,
        }
    }
}

/// JSON wire form: rotation is a row-major 9-float array.
#[derive(Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Camera> {
        let r = j.rotation;
        let cam = Camera {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
            rotation: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            translation: Vec3::new(j.translation[0], j.translation[1], j.translation[2]),
        };
        cam.validate()?;
        Ok(cam)
    }
}
