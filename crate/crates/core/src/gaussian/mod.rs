//! Oriented 2D Gaussian disks and their local tangent-plane math.

pub mod sh;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use sh::{sh_basis_with_grad, sh_coeff_count, MAX_SH_COEFFS, MAX_SH_DEGREE};

/// Length of the per-splat identity vector.
pub const ID_DIM: usize = 8;

const QUAT_TOL: f64 = 1e-6;

/// One oriented planar Gaussian.
///
/// `rotation` is a unit quaternion stored as (w, x, y, z); the columns of its
/// rotation matrix are the tangent axes t_u, t_v and the disk normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub center: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scales: Vector2<f64>,
    pub opacity_logit: f64,
    /// Color coefficients, `sh[k][channel]`. Only the first (degree+1)^2 are used.
    pub sh: [[f64; 3]; MAX_SH_COEFFS],
    pub identity: [f64; ID_DIM],
}

/// Gradient (or optimizer moment) laid out like a [`Splat`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrad {
    pub center: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scales: Vector2<f64>,
    pub opacity_logit: f64,
    pub sh: [[f64; 3]; MAX_SH_COEFFS],
    pub identity: [f64; ID_DIM],
}

impl Default for SplatGrad {
    fn default() -> Self {
        SplatGrad {
            center: Vector3::zeros(),
            rotation: Vector4::zeros(),
            log_scales: Vector2::zeros(),
            opacity_logit: 0.0,
            sh: [[0.0; 3]; MAX_SH_COEFFS],
            identity: [0.0; ID_DIM],
        }
    }
}

/// Parameter groups with their own learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Center,
    Rotation,
    Scale,
    Opacity,
    Sh,
    Identity,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Center,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Center => "center",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Scale => "log_scales",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
            ParamGroup::Identity => "identity",
        }
    }

    pub fn is_geometry(self) -> bool {
        matches!(
            self,
            ParamGroup::Center | ParamGroup::Rotation | ParamGroup::Scale | ParamGroup::Opacity
        )
    }
}

macro_rules! group_access {
    ($t:ty) => {
        impl $t {
            pub fn group(&self, g: ParamGroup) -> &[f64] {
                match g {
                    ParamGroup::Center => self.center.as_slice(),
                    ParamGroup::Rotation => self.rotation.as_slice(),
                    ParamGroup::Scale => self.log_scales.as_slice(),
                    ParamGroup::Opacity => std::slice::from_ref(&self.opacity_logit),
                    ParamGroup::Sh => self.sh.as_flattened(),
                    ParamGroup::Identity => &self.identity,
                }
            }

            pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
                match g {
                    ParamGroup::Center => self.center.as_mut_slice(),
                    ParamGroup::Rotation => self.rotation.as_mut_slice(),
                    ParamGroup::Scale => self.log_scales.as_mut_slice(),
                    ParamGroup::Opacity => std::slice::from_mut(&mut self.opacity_logit),
                    ParamGroup::Sh => self.sh.as_flattened_mut(),
                    ParamGroup::Identity => &mut self.identity,
                }
            }
        }
    };
}

group_access!(Splat);
group_access!(SplatGrad);

impl SplatGrad {
    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|g| self.group(*g).iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &SplatGrad) {
        for g in ParamGroup::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += b;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Standard 2D Gaussian in local (u, v) coordinates.
pub fn eval_kernel(u: f64, v: f64) -> f64 {
    (-(u * u + v * v) / 2.0).exp()
}

/// Rotation matrix of a (not necessarily normalized) quaternion (w, x, y, z).
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the raw quaternion,
/// including the normalization step.
pub fn quat_matrix_backward(q: &Vector4<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let qn = q / norm;
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let g = d_rot;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dqn = Vector4::new(dw, dx, dy, dz);
    (dqn - qn * qn.dot(&dqn)) / norm
}

/// Shortest-arc quaternion whose normal column equals `normal`.
pub fn quat_from_normal(normal: &Vector3<f64>) -> Vector4<f64> {
    let n = normal.normalize();
    let z = Vector3::z();
    let d = z.dot(&n);
    if d > 1.0 - 1e-12 {
        return Vector4::new(1.0, 0.0, 0.0, 0.0);
    }
    if d < -1.0 + 1e-12 {
        return Vector4::new(0.0, 1.0, 0.0, 0.0);
    }
    let axis = z.cross(&n);
    let q = Vector4::new(1.0 + d, axis.x, axis.y, axis.z);
    q / q.norm()
}

impl Splat {
    pub fn new(center: Vector3<f64>, rotation: Vector4<f64>, scales: Vector2<f64>, opacity: f64) -> Self {
        Splat {
            center,
            rotation: rotation / rotation.norm(),
            log_scales: Vector2::new(scales.x.ln(), scales.y.ln()),
            opacity_logit: logit(opacity),
            sh: [[0.0; 3]; MAX_SH_COEFFS],
            identity: [0.0; ID_DIM],
        }
    }

    /// Tangent frame as matrix columns (t_u, t_v, normal).
    pub fn frame(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.frame().column(2).into_owned()
    }

    pub fn scales(&self) -> Vector2<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Activated (scales, opacity).
    pub fn activated(&self) -> (Vector2<f64>, f64) {
        (self.scales(), self.opacity())
    }

    /// Point on the disk plane at local coordinates (u, v).
    pub fn local_to_world(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.frame();
        let s = self.scales();
        self.center + f.column(0) * (s.x * u) + f.column(1) * (s.y * v)
    }

    /// Homogeneous transform mapping (u, v, 1, 1) to the world point.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let f = self.frame();
        let s = self.scales();
        let mut h = Matrix4::zeros();
        for r in 0..3 {
            h[(r, 0)] = f[(r, 0)] * s.x;
            h[(r, 1)] = f[(r, 1)] * s.y;
            h[(r, 3)] = self.center[r];
        }
        h[(3, 3)] = 1.0;
        h
    }

    /// View-dependent color for a unit direction from the camera toward the splat.
    pub fn eval_color(&self, view_dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
        let (basis, _) = sh_basis_with_grad(view_dir, degree);
        let mut rgb = [0.5; 3];
        for (k, b) in basis.iter().enumerate().take(sh_coeff_count(degree)) {
            for (c, out) in rgb.iter_mut().enumerate() {
                *out += self.sh[k][c] * b;
            }
        }
        rgb.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let qn = self.rotation.norm();
        if (qn - 1.0).abs() > QUAT_TOL {
            return Err(Error::InvalidArgument(format!(
                "quaternion norm {qn} is not 1"
            )));
        }
        let all_finite = ParamGroup::ALL
            .iter()
            .all(|g| self.group(*g).iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::InvalidArgument("splat has non-finite parameters".into()));
        }
        let (s, a) = self.activated();
        if !(s.x > 0.0 && s.y > 0.0) {
            return Err(Error::InvalidArgument("splat scales must be positive".into()));
        }
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::InvalidArgument(format!("opacity {a} outside (0, 1)")));
        }
        Ok(())
    }

    pub fn renormalize(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 && n.is_finite() {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }
}

/// A full scene or object model.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatModel {
    pub splats: Vec<Splat>,
    /// Degree of the color expansion, 0..=3.
    pub sh_degree: usize,
}

impl SplatModel {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= MAX_SH_DEGREE);
        SplatModel {
            splats: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "sh degree {} exceeds {MAX_SH_DEGREE}",
                self.sh_degree
            )));
        }
        for (i, s) in self.splats.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::InvalidArgument(format!("splat {i}: {e}")))?;
        }
        Ok(())
    }

    /// Axis-aligned bounds of the splat centers, or `None` when empty.
    pub fn center_bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.splats.first()?.center;
        Some(self.splats.iter().fold((first, first), |(lo, hi), s| {
            (lo.inf(&s.center), hi.sup(&s.center))
        }))
    }

    /// Opacity-weighted centroid of the splat centers.
    pub fn weighted_centroid(&self) -> Option<Vector3<f64>> {
        let mut acc = Vector3::zeros();
        let mut wsum = 0.0;
        for s in &self.splats {
            let a = s.opacity();
            acc += s.center * a;
            wsum += a;
        }
        (wsum > 0.0).then(|| acc / wsum)
    }

    pub fn max_scale(&self) -> f64 {
        self.splats
            .iter()
            .map(|s| s.log_scales.max().exp())
            .fold(0.0, f64::max)
    }

    pub fn subset(&self, indices: &[usize]) -> SplatModel {
        SplatModel {
            splats: indices.iter().map(|&i| self.splats[i].clone()).collect(),
            sh_degree: self.sh_degree,
        }
    }
}
