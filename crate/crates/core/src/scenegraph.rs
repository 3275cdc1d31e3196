//! Composite scene: a static background node in the world frame plus rigid
//! object nodes carried along time-indexed trajectories.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{Appearance, TimeNormalization, TimeStamp};
use crate::error::{Error, Result};
use crate::geom::{covariance_from_rotation, quat_to_matrix, BoundingBox3D, Pose};

/// Node id of the background; object `i` of [`SceneGraph::objects`] has id `i + 1`.
pub const BACKGROUND_NODE: u32 = 0;

/// Columnar Gaussian parameters of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Raw `(w, x, y, z)`; normalized on use.
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub appearance: Appearance,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianSet {
    pub fn empty(appearance: Appearance) -> Self {
        Self {
            means: vec![],
            log_scales: vec![],
            rotations: vec![],
            opacity_logits: vec![],
            appearance: appearance.empty_like(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.appearance.len() != n
        {
            return Err(Error::shape("Gaussian set columns have different lengths"));
        }
        let finite = self.means.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.log_scales.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.rotations.iter().all(|q| q.iter().all(|v| v.is_finite()))
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.appearance.all_finite();
        if !finite {
            return Err(Error::invalid("Gaussian set has non-finite parameters"));
        }
        if self
            .rotations
            .iter()
            .any(|q| q.iter().map(|v| v * v).sum::<f64>() < 1e-24)
        {
            return Err(Error::invalid("Gaussian set has a zero-length rotation"));
        }
        Ok(())
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn rotation_matrix(&self, i: usize) -> Matrix3<f64> {
        quat_to_matrix(&self.rotations[i])
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        covariance_from_rotation(&self.rotation_matrix(i), &self.scale(i))
    }

    pub fn gather(&self, index: &[usize]) -> GaussianSet {
        GaussianSet {
            means: index.iter().map(|&i| self.means[i]).collect(),
            log_scales: index.iter().map(|&i| self.log_scales[i]).collect(),
            rotations: index.iter().map(|&i| self.rotations[i]).collect(),
            opacity_logits: index.iter().map(|&i| self.opacity_logits[i]).collect(),
            appearance: self.appearance.gather(index),
        }
    }

    pub fn append(&mut self, other: &GaussianSet) -> Result<()> {
        self.appearance.append(&other.appearance)?;
        self.means.extend_from_slice(&other.means);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        Ok(())
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Applies a rigid transform to geometry only; scales, opacities and
    /// appearance are left untouched.
    pub fn transformed(&self, pose: &Pose) -> GaussianSet {
        let q = pose.rotation;
        GaussianSet {
            means: self.means.iter().map(|m| pose.transform_point(m)).collect(),
            log_scales: self.log_scales.clone(),
            rotations: self
                .rotations
                .iter()
                .map(|r| {
                    let local = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                        r[0], r[1], r[2], r[3],
                    ));
                    let w = (q * local).into_inner();
                    [w.w, w.i, w.j, w.k]
                })
                .collect(),
            opacity_logits: self.opacity_logits.clone(),
            appearance: self.appearance.clone(),
        }
    }
}

/// Time-sorted pose samples of one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    samples: Vec<(TimeStamp, Pose)>,
}

/// Bracketing samples and blend factor for a query time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryLocation {
    pub lower: usize,
    pub upper: usize,
    pub blend: f64,
}

impl Trajectory {
    pub fn new(samples: Vec<(TimeStamp, Pose)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("trajectory needs at least one sample"));
        }
        if samples.iter().any(|(t, _)| !t.0.is_finite()) {
            return Err(Error::invalid("trajectory timestamps must be finite"));
        }
        if samples.windows(2).any(|w| !(w[0].0 .0 < w[1].0 .0)) {
            return Err(Error::invalid("trajectory timestamps must strictly increase"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(TimeStamp, Pose)] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [(TimeStamp, Pose)] {
        &mut self.samples
    }

    pub fn window(&self) -> (TimeStamp, TimeStamp) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }

    pub fn locate(&self, t: TimeStamp) -> Option<TrajectoryLocation> {
        let (start, end) = self.window();
        if !(t.0 >= start.0 && t.0 <= end.0) {
            return None;
        }
        let upper = self.samples.partition_point(|(s, _)| s.0 <= t.0);
        // upper ≥ 1 since t ≥ start
        let lower = upper - 1;
        if self.samples[lower].0 .0 == t.0 || upper == self.samples.len() {
            return Some(TrajectoryLocation {
                lower,
                upper: lower,
                blend: 0.0,
            });
        }
        let (t0, t1) = (self.samples[lower].0 .0, self.samples[upper].0 .0);
        Some(TrajectoryLocation {
            lower,
            upper,
            blend: (t.0 - t0) / (t1 - t0),
        })
    }

    /// Object-to-world pose at `t`, or `None` outside the visibility window.
    pub fn pose_at(&self, t: TimeStamp) -> Option<Pose> {
        let loc = self.locate(t)?;
        if loc.lower == loc.upper {
            return Some(self.samples[loc.lower].1);
        }
        Some(
            self.samples[loc.lower]
                .1
                .interpolate(&self.samples[loc.upper].1, loc.blend),
        )
    }

    pub fn shifted(&self, dt: f64) -> Trajectory {
        Trajectory {
            samples: self
                .samples
                .iter()
                .map(|(t, p)| (TimeStamp(t.0 + dt), *p))
                .collect(),
        }
    }

    /// Cumulative translation arc length at every sample.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = vec![0.0];
        for w in self.samples.windows(2) {
            acc += (w[1].1.translation - w[0].1.translation).norm();
            out.push(acc);
        }
        out
    }
}

/// Learnable SE(3) correction per trajectory sample: translation then
/// rotation vector.
pub type PoseDelta = [f64; 6];

/// Rotation-vector exponential as a unit quaternion `(w, x, y, z)`.
pub(crate) fn exp_so3(omega: &Vector3<f64>) -> [f64; 4] {
    let theta = omega.norm();
    let (w, f) = if theta < 1e-8 {
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    [w, f * omega.x, f * omega.y, f * omega.z]
}

/// Pulls a quaternion gradient back through [`exp_so3`].
pub(crate) fn exp_so3_backward(omega: &Vector3<f64>, grad_q: &[f64; 4]) -> Vector3<f64> {
    let theta = omega.norm();
    let gv = Vector3::new(grad_q[1], grad_q[2], grad_q[3]);
    let (f, df_over_theta, dw_coeff) = if theta < 1e-6 {
        (0.5 - theta * theta / 48.0, -1.0 / 24.0, -0.25)
    } else {
        let (s, c) = (0.5 * theta).sin_cos();
        let f = s / theta;
        let df = (0.5 * c * theta - s) / (theta * theta);
        (f, df / theta, -0.5 * s / theta)
    };
    // w = cos(θ/2): ∂w/∂ω = dw_coeff · ω
    // v = f(θ) ω:   ∂v/∂ω = f I + (f'/θ) ω ωᵀ
    omega * (grad_q[0] * dw_coeff) + gv * f + omega * (df_over_theta * omega.dot(&gv))
}

fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// How appearance time is derived from render time for one object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum AppearanceClock {
    /// Wavelets are evaluated at scene time.
    #[default]
    Scene,
    /// Piecewise-linear map from render time to appearance time.
    Remapped(Vec<(f64, f64)>),
}

impl AppearanceClock {
    pub fn apply(&self, t: TimeStamp) -> TimeStamp {
        match self {
            AppearanceClock::Scene => t,
            AppearanceClock::Remapped(knots) => TimeStamp(piecewise_linear(knots, t.0)),
        }
    }
}

fn piecewise_linear(knots: &[(f64, f64)], x: f64) -> f64 {
    match knots {
        [] => x,
        [(_, y)] => *y,
        _ => {
            if x <= knots[0].0 {
                return knots[0].1;
            }
            let last = knots[knots.len() - 1];
            if x >= last.0 {
                return last.1;
            }
            let i = knots.partition_point(|k| k.0 <= x);
            let (x0, y0) = knots[i - 1];
            let (x1, y1) = knots[i];
            if x1 == x0 {
                y0
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectNode {
    pub track_id: u32,
    pub class_label: String,
    /// Object-frame box centered at the origin.
    pub bbox: BoundingBox3D,
    pub gaussians: GaussianSet,
    pub trajectory: Trajectory,
    /// One delta per trajectory sample when pose refinement is enabled.
    pub pose_deltas: Option<Vec<PoseDelta>>,
    pub appearance_clock: AppearanceClock,
    /// Excluded from composition; kept so removal can be undone.
    pub hidden: bool,
}

impl ObjectNode {
    pub fn new(
        track_id: u32,
        class_label: impl Into<String>,
        bbox: BoundingBox3D,
        gaussians: GaussianSet,
        trajectory: Trajectory,
    ) -> Self {
        Self {
            track_id,
            class_label: class_label.into(),
            bbox,
            gaussians,
            trajectory,
            pose_deltas: None,
            appearance_clock: AppearanceClock::Scene,
            hidden: false,
        }
    }

    pub fn enable_pose_refinement(&mut self) {
        if self.pose_deltas.is_none() {
            self.pose_deltas = Some(vec![[0.0; 6]; self.trajectory.samples().len()]);
        }
    }

    /// Trajectory pose at `t` with the interpolated pose delta applied.
    pub fn pose_at(&self, t: TimeStamp) -> Option<Pose> {
        let loc = self.trajectory.locate(t)?;
        let base = self.trajectory.pose_at(t)?;
        Some(match &self.pose_deltas {
            None => base,
            Some(deltas) => apply_delta(&base, &blend_delta(deltas, &loc)),
        })
    }
}

pub(crate) fn blend_delta(deltas: &[PoseDelta], loc: &TrajectoryLocation) -> PoseDelta {
    let mut out = [0.0; 6];
    for k in 0..6 {
        out[k] = (1.0 - loc.blend) * deltas[loc.lower][k] + loc.blend * deltas[loc.upper][k];
    }
    out
}

pub(crate) fn apply_delta(base: &Pose, delta: &PoseDelta) -> Pose {
    let dq = exp_so3(&Vector3::new(delta[3], delta[4], delta[5]));
    let q = quat_mul(&dq, &base.wxyz());
    Pose::new(
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])),
        base.translation + Vector3::new(delta[0], delta[1], delta[2]),
    )
}

/// Gradient of a loss w.r.t. one object's blended pose delta, given the
/// gradient w.r.t. the refined rotation matrix and translation.
pub(crate) fn delta_backward(
    base: &Pose,
    delta: &PoseDelta,
    grad_rotation: &Matrix3<f64>,
    grad_translation: &Vector3<f64>,
) -> PoseDelta {
    let omega = Vector3::new(delta[3], delta[4], delta[5]);
    let base_r = base.rotation_matrix();
    // R = R_Δ R_base
    let grad_rdelta = grad_rotation * base_r.transpose();
    let dq = exp_so3(&omega);
    let gq = crate::geom::quat_to_matrix_backward(&dq, &grad_rdelta);
    let go = exp_so3_backward(&omega, &gq);
    [
        grad_translation.x,
        grad_translation.y,
        grad_translation.z,
        go.x,
        go.y,
        go.z,
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub background: GaussianSet,
    pub objects: Vec<ObjectNode>,
    pub time: TimeNormalization,
}

impl SceneGraph {
    pub fn new(background: GaussianSet, time: TimeNormalization) -> Self {
        Self {
            background,
            objects: vec![],
            time,
        }
    }

    pub fn add_object(&mut self, node: ObjectNode) -> Result<u32> {
        if self.objects.iter().any(|o| o.track_id == node.track_id) {
            return Err(Error::invalid(format!(
                "duplicate track id {}",
                node.track_id
            )));
        }
        self.objects.push(node);
        Ok(self.objects.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        self.background.validate()?;
        for (i, o) in self.objects.iter().enumerate() {
            o.gaussians.validate()?;
            o.bbox.validate()?;
            if self.objects[..i].iter().any(|p| p.track_id == o.track_id) {
                return Err(Error::invalid(format!("duplicate track id {}", o.track_id)));
            }
            if let Some(d) = &o.pose_deltas {
                if d.len() != o.trajectory.samples().len() {
                    return Err(Error::shape("pose delta count differs from trajectory"));
                }
            }
        }
        Ok(())
    }

    pub fn object_index(&self, track_id: u32) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o.track_id == track_id)
            .ok_or(Error::UnknownTrack(track_id))
    }

    pub fn node_count(&self) -> usize {
        self.objects.len() + 1
    }

    pub fn gaussian_count(&self) -> usize {
        self.background.len() + self.objects.iter().map(|o| o.gaussians.len()).sum::<usize>()
    }

    /// All nodes' sets, background first.
    pub fn node_sets(&self) -> impl Iterator<Item = &GaussianSet> {
        std::iter::once(&self.background).chain(self.objects.iter().map(|o| &o.gaussians))
    }

    pub fn node_set_mut(&mut self, node: u32) -> &mut GaussianSet {
        if node == BACKGROUND_NODE {
            &mut self.background
        } else {
            &mut self.objects[node as usize - 1].gaussians
        }
    }
}

/// World-frame set of object `node` at `t`; empty when not visible.
pub fn transform_node(node: &ObjectNode, t: TimeStamp) -> GaussianSet {
    match node.pose_at(t) {
        Some(pose) => node.gaussians.transformed(&pose),
        None => GaussianSet::empty(node.gaussians.appearance.clone()),
    }
}

/// One node's contribution to a composed scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub node_id: u32,
    pub set: GaussianSet,
    /// Node-to-world pose at the composition time (identity for background).
    pub pose: Pose,
    /// Time at which the node's appearance is evaluated.
    pub appearance_time: TimeStamp,
}

/// Concatenation of the background and all visible objects at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedScene {
    pub time: TimeStamp,
    pub segments: Vec<Segment>,
}

impl ComposedScene {
    pub fn from_segments(time: TimeStamp, segments: Vec<Segment>) -> Self {
        Self { time, segments }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.set.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node_ids(&self) -> Vec<u32> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat(s.node_id).take(s.set.len()))
            .collect()
    }

    /// Concatenation of every segment with the given node id.
    pub fn filter_node(&self, node_id: u32) -> Option<GaussianSet> {
        let mut out: Option<GaussianSet> = None;
        for s in self.segments.iter().filter(|s| s.node_id == node_id) {
            match &mut out {
                None => out = Some(s.set.clone()),
                Some(o) => o.append(&s.set).ok()?,
            }
        }
        out
    }
}

/// Background plus every visible, non-hidden object transformed to world.
pub fn compose(scene: &SceneGraph, t: TimeStamp) -> ComposedScene {
    let mut segments = vec![Segment {
        node_id: BACKGROUND_NODE,
        set: scene.background.clone(),
        pose: Pose::identity(),
        appearance_time: t,
    }];
    let objects: Vec<Option<Segment>> = scene
        .objects
        .par_iter()
        .enumerate()
        .map(|(i, o)| {
            if o.hidden {
                return None;
            }
            let pose = o.pose_at(t)?;
            Some(Segment {
                node_id: i as u32 + 1,
                set: o.gaussians.transformed(&pose),
                pose,
                appearance_time: o.appearance_clock.apply(t),
            })
        })
        .collect();
    segments.extend(objects.into_iter().flatten());
    ComposedScene { time: t, segments }
}
