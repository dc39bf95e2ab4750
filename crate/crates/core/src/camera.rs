//! Pinhole cameras in the OpenCV convention (x right, y down, z forward).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform taking world points into camera space.
    pub world_to_camera: [f64; 16],
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` only fixes the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        focal: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidCamera("eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // up is parallel to the viewing direction; pick any orthogonal axis
            let alt = if forward.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 4 + c] = rot[(r, c)];
            }
            m[r * 4 + 3] = t[r];
        }
        m[15] = 1.0;
        Ok(Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: m,
        })
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[3], m[7], m[11])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates and camera depth of a world point, if it is in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
            pc.z,
        ))
    }

    /// Camera-space ray direction through pixel coordinate (x, y), scaled so its z is 1.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidCamera(format!(
                "width/height must be >= 1, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "fx, fy must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera("principal point must be finite".into()));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCamera("world_to_camera has non-finite entries".into()));
        }
        let m = &self.world_to_camera;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidCamera(
                "world_to_camera bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "world_to_camera rotation is not orthonormal (max deviation {err:.3e})"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(Error::InvalidCamera("world_to_camera rotation is a reflection".into()));
        }
        Ok(())
    }
}
