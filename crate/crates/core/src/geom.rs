//! Rigid poses, pinhole cameras, oriented boxes and the projective
//! linearization of 3D covariances.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Screen-space low-pass added to the projected covariance diagonal, in px².
pub const DEFAULT_DILATION: f64 = 0.3;

/// Rigid transform: `x' = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, normalizing it
    /// unless it is already unit to 1e-12 (so stored poses reload bit-exact).
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        if q.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose has non-finite components"));
        }
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        if raw.norm() < 1e-12 {
            return Err(Error::invalid("pose quaternion has zero length"));
        }
        let rotation = if (raw.norm() - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::from_quaternion(raw)
        };
        Ok(Self::new(rotation, Vector3::from(translation)))
    }

    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
        )
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Linear translation and spherical-linear rotation blend, `s ∈ [0, 1]`.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, s, 1e-12)
            .unwrap_or(self.rotation);
        Pose {
            rotation,
            translation: self.translation.lerp(&other.translation, s),
        }
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRepr {
            rotation: self.wxyz(),
            translation: self.translation.into(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        Pose::from_wxyz(repr.rotation, repr.translation).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// `(w, x, y, z)`
    rotation: [f64; 4],
    translation: [f64; 3],
}

/// Pinhole intrinsics. Pixel centers sit at `index + 0.5`; `x` right,
/// `y` down, `z` forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near, self.far]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("camera has non-finite parameters"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera requires 0 < near < far"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Projection Jacobian of the pinhole model evaluated at `p`.
    pub fn jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Oriented box with yaw about the vertical (`z`) axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub center: [f64; 3],
    /// Length, width, height.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl BoundingBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self { center, size, yaw };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("bounding box size components must be positive"));
        }
        if self.center.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::invalid("bounding box has non-finite parameters"));
        }
        Ok(())
    }

    /// Box-to-frame pose (box frame centered at the box center).
    pub fn pose(&self) -> Pose {
        Pose::from_yaw(self.yaw, Vector3::from(self.center))
    }

    pub fn half_extents(&self, inflation: f64) -> Vector3<f64> {
        Vector3::from(self.size) * (0.5 * (1.0 + inflation))
    }

    /// Containment in the box's own frame; `inflation` scales every side.
    pub fn contains_local(&self, local: &Vector3<f64>, inflation: f64) -> bool {
        let h = self.half_extents(inflation);
        local.x.abs() <= h.x && local.y.abs() <= h.y && local.z.abs() <= h.z
    }

    pub fn contains(&self, p: &Vector3<f64>, inflation: f64) -> bool {
        let local = self.pose().inverse().transform_point(p);
        self.contains_local(&local, inflation)
    }

    /// The eight corners in the box's own frame.
    pub fn local_corners(&self) -> [Vector3<f64>; 8] {
        let h = self.half_extents(0.0);
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *c = Vector3::new(sx * h.x, sy * h.y, sz * h.z);
        }
        out
    }
}

/// Rotation matrix of a (not necessarily unit) `(w, x, y, z)` quaternion
/// after normalization.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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
pub fn quat_to_matrix_backward(q: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = grad_r;
    // dR/dw, dR/dx, dR/dy, dR/dz contracted with g.
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = [gw, gx, gy, gz];
    // Normalization: d(q/|q|)/dq = (I - u uᵀ) / |q|.
    let dot: f64 = gu.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (gu[i] - dot * u[i]) / n;
    }
    out
}

/// `R diag(s)² Rᵀ` for a unit quaternion `q` and positive scales.
pub fn build_covariance(q: &[f64; 4], scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if q.iter().any(|v| !v.is_finite()) || scale.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("covariance inputs must be finite"));
    }
    if scale.iter().any(|s| *s <= 0.0) {
        return Err(Error::invalid("covariance scales must be positive"));
    }
    let r = quat_to_matrix(q);
    Ok(covariance_from_rotation(&r, scale))
}

pub(crate) fn covariance_from_rotation(r: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = r * Matrix3::from_diagonal(scale);
    let mut cov = m * m.transpose();
    // exact symmetry
    for i in 0..3 {
        for j in (i + 1)..3 {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

/// Pinhole projection. Returns `None` when the point is at or in front of
/// the near plane.
pub fn project_point(p_cam: &Vector3<f64>, cam: &CameraModel) -> Option<(Vector2<f64>, f64)> {
    if !(p_cam.z > cam.near) {
        return None;
    }
    let iz = 1.0 / p_cam.z;
    Some((
        Vector2::new(cam.fx * p_cam.x * iz + cam.cx, cam.fy * p_cam.y * iz + cam.cy),
        p_cam.z,
    ))
}

/// Projects a world covariance to the image plane: `J W Σ Wᵀ Jᵀ + dilation·I`.
/// `view` is the world-to-camera transform.
pub fn camera_covariance(
    sigma_world: &Matrix3<f64>,
    p_cam: &Vector3<f64>,
    view: &Pose,
    cam: &CameraModel,
    dilation: f64,
) -> Option<Matrix2<f64>> {
    if !(p_cam.z > cam.near) {
        return None;
    }
    let t = cam.jacobian(p_cam) * view.rotation_matrix();
    Some(project_covariance(&t, sigma_world, dilation))
}

pub(crate) fn project_covariance(
    t: &Matrix2x3<f64>,
    sigma: &Matrix3<f64>,
    dilation: f64,
) -> Matrix2<f64> {
    let c = t * sigma * t.transpose();
    let off = 0.5 * (c[(0, 1)] + c[(1, 0)]);
    Matrix2::new(c[(0, 0)] + dilation, off, off, c[(1, 1)] + dilation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cam() -> CameraModel {
        CameraModel {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            near: 0.1,
            far: 100.0,
        }
    }

    fn quat_z(angle: f64) -> [f64; 4] {
        [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()]
    }

    #[test]
    fn covariance_identity_rotation() {
        let c = build_covariance(&[1.0, 0.0, 0.0, 0.0], &Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        let c = build_covariance(
            &quat_z(std::f64::consts::FRAC_PI_2),
            &Vector3::new(1.0, 2.0, 3.0),
        )
        .unwrap();
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 9.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(build_covariance(&[f64::NAN, 0.0, 0.0, 0.0], &Vector3::new(1.0, 1.0, 1.0)).is_err());
        assert!(build_covariance(&[1.0, 0.0, 0.0, 0.0], &Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn projection_examples() {
        let (px, d) = project_point(&Vector3::new(0.0, 0.0, 5.0), &cam()).unwrap();
        assert_eq!(px, Vector2::new(50.0, 50.0));
        assert_eq!(d, 5.0);
        let (px, _) = project_point(&Vector3::new(1.0, 0.0, 2.0), &cam()).unwrap();
        assert_eq!(px.x, 100.0);
        assert!(project_point(&Vector3::new(0.0, 0.0, 0.01), &cam()).is_none());
    }

    #[test]
    fn camera_covariance_unit_case() {
        let mut c = cam();
        c.fx = 1.0;
        c.fy = 1.0;
        let p = Vector3::new(0.0, 0.0, 1.0);
        let s = camera_covariance(&Matrix3::identity(), &p, &Pose::identity(), &c, 0.3).unwrap();
        assert_relative_eq!(s, Matrix2::identity() + Matrix2::identity() * 0.3);
        let z = camera_covariance(&Matrix3::zeros(), &p, &Pose::identity(), &c, 0.3).unwrap();
        assert_relative_eq!(z, Matrix2::identity() * 0.3);
    }

    #[test]
    fn camera_covariance_scales_with_inverse_depth_squared() {
        let near = camera_covariance(
            &Matrix3::identity(),
            &Vector3::new(0.0, 0.0, 2.0),
            &Pose::identity(),
            &cam(),
            0.0,
        )
        .unwrap();
        let far = camera_covariance(
            &Matrix3::identity(),
            &Vector3::new(0.0, 0.0, 4.0),
            &Pose::identity(),
            &cam(),
            0.0,
        )
        .unwrap();
        assert_relative_eq!(far * 4.0, near, epsilon = 1e-12);
    }

    #[test]
    fn box_containment() {
        let b = BoundingBox3D::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.0], 0.3).unwrap();
        assert!(b.contains(&Vector3::new(1.0, 2.0, 0.5), 0.0));
        assert!(!b.contains(&Vector3::new(10.0, 2.0, 0.5), 0.0));
        assert!(BoundingBox3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
    }

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_quat(), prop::array::uniform3(-10.0f64..10.0))
            .prop_map(|(q, t)| Pose::from_wxyz(q, t).unwrap())
    }

    proptest! {
        #[test]
        fn covariance_symmetric_with_squared_scale_spectrum(
            q in arb_quat(),
            s in prop::array::uniform3(0.05f64..5.0),
        ) {
            let s = Vector3::from(s);
            let c = build_covariance(&q, &s).unwrap();
            prop_assert_eq!(c, c.transpose());
            let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(want.iter()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }

        #[test]
        fn pose_algebra(a in arb_pose(), b in arb_pose(), c in arb_pose(), p in prop::array::uniform3(-5.0f64..5.0)) {
            let p = Vector3::from(p);
            let lhs = a.compose(&b).compose(&c).transform_point(&p);
            let rhs = a.compose(&b.compose(&c)).transform_point(&p);
            prop_assert!((lhs - rhs).norm() < 1e-9);
            let inv1 = a.compose(&b).inverse().transform_point(&p);
            let inv2 = b.inverse().compose(&a.inverse()).transform_point(&p);
            prop_assert!((inv1 - inv2).norm() < 1e-9);
            prop_assert!((a.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn unproject_inverts_project(p in prop::array::uniform3(-3.0f64..3.0), z in 0.2f64..50.0) {
            let p = Vector3::new(p[0], p[1], z);
            let (px, d) = project_point(&p, &cam()).unwrap();
            let back = cam().unproject(&px, d);
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn camera_covariance_rotation_consistency(
            q in arb_quat(),
            s in prop::array::uniform3(0.05f64..2.0),
            view in arb_pose(),
            p in prop::array::uniform3(-1.0f64..1.0),
            z in 1.0f64..20.0,
        ) {
            // Rotating Σ by R while the view absorbs Rᵀ leaves Σ' unchanged.
            let rot = quat_to_matrix(&q);
            let sigma = covariance_from_rotation(&quat_to_matrix(&[0.9, 0.1, -0.3, 0.2]), &Vector3::from(s));
            let p_cam = Vector3::new(p[0], p[1], z);
            let base = camera_covariance(&sigma, &p_cam, &view, &cam(), 0.3).unwrap();
            let rotated = rot * sigma * rot.transpose();
            let view2 = Pose::new(view.rotation * UnitQuaternion::from_matrix(&rot).inverse(), view.translation);
            let other = camera_covariance(&rotated, &p_cam, &view2, &cam(), 0.3).unwrap();
            prop_assert!((base - other).norm() <= 1e-8 * base.norm());
        }

        #[test]
        fn quat_backward_matches_finite_differences(q in arb_quat(), g in prop::array::uniform9(-1.0f64..1.0)) {
            let g = Matrix3::from_row_slice(&g);
            let ana = quat_to_matrix_backward(&q, &g);
            for k in 0..4 {
                let h = 1e-6;
                let mut qp = q; qp[k] += h;
                let mut qm = q; qm[k] -= h;
                let f = |q: &[f64; 4]| quat_to_matrix(q).component_mul(&g).sum();
                let fd = (f(&qp) - f(&qm)) / (2.0 * h);
                prop_assert!((fd - ana[k]).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
