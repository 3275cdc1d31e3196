//! Post-training scene edits. Edits only change which object nodes are
//! composed and where they go; Gaussian parameters are never touched.

use std::path::Path;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::appearance::TimeStamp;
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::scenegraph::{AppearanceClock, PoseDelta, SceneGraph, Trajectory};

pub const EDIT_SCRIPT_VERSION: u32 = 1;

/// One pose sample of a replacement trajectory, in scene seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSample {
    pub time: f64,
    pub translation: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    Remove {
        track_id: u32,
    },
    /// Brings a removed object back.
    Restore {
        track_id: u32,
    },
    Swap {
        a: u32,
        b: u32,
    },
    /// Moves trajectory samples whose time lies in `time_range` (seconds,
    /// inclusive): rotates by `yaw` about the motion-plane normal through
    /// the object position, then shifts by `translation`, which must lie in
    /// the motion plane.
    Transform {
        track_id: u32,
        translation: [f64; 3],
        #[serde(default)]
        yaw: f64,
        time_range: [f64; 2],
    },
    Retrajectory {
        track_id: u32,
        samples: Vec<PoseSample>,
        /// Key appearance to arc length along the path instead of time.
        #[serde(default)]
        rekey_appearance: bool,
    },
    /// Reverts the most recent operation that has not been undone.
    Undo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditScript {
    pub version: u32,
    /// Overrides the motion-plane normal passed to [`EditScript::apply`].
    #[serde(default)]
    pub motion_plane_normal: Option<[f64; 3]>,
    pub operations: Vec<EditOp>,
}

impl EditScript {
    pub fn new(operations: Vec<EditOp>) -> Self {
        Self {
            version: EDIT_SCRIPT_VERSION,
            motion_plane_normal: None,
            operations,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: EditScript = serde_json::from_str(text).map_err(|e| Error::invalid(format!("edit script: {e}")))?;
        if s.version != EDIT_SCRIPT_VERSION {
            return Err(Error::invalid(format!("edit script version {} is not supported", s.version)));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "edit script is not UTF-8"))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("edit script serializes")
    }

    /// Applies every operation in order to a copy of `scene`. Fails without
    /// partial results if any operation does.
    pub fn apply(&self, scene: &SceneGraph, default_normal: [f64; 3]) -> Result<SceneGraph> {
        let normal = self.motion_plane_normal.unwrap_or(default_normal);
        let mut ed = Editor::new(scene.clone(), normal)?;
        for (k, op) in self.operations.iter().enumerate() {
            ed.apply(op).map_err(|e| match e {
                Error::Invalid(m) => Error::invalid(format!("operation {k}: {m}")),
                other => other,
            })?;
        }
        Ok(ed.into_scene())
    }
}

/// Everything an edit may change on one object node.
#[derive(Clone, Debug, PartialEq)]
struct NodeMeta {
    trajectory: Trajectory,
    pose_deltas: Option<Vec<PoseDelta>>,
    appearance_clock: AppearanceClock,
    hidden: bool,
}

fn meta_of(scene: &SceneGraph, i: usize) -> NodeMeta {
    let o = &scene.objects[i];
    NodeMeta {
        trajectory: o.trajectory.clone(),
        pose_deltas: o.pose_deltas.clone(),
        appearance_clock: o.appearance_clock.clone(),
        hidden: o.hidden,
    }
}

fn restore_meta(scene: &mut SceneGraph, i: usize, m: NodeMeta) {
    let o = &mut scene.objects[i];
    o.trajectory = m.trajectory;
    o.pose_deltas = m.pose_deltas;
    o.appearance_clock = m.appearance_clock;
    o.hidden = m.hidden;
}

/// A scene plus the node state needed to undo each applied edit.
#[derive(Clone, Debug)]
pub struct Editor {
    scene: SceneGraph,
    normal: Unit<Vector3<f64>>,
    history: Vec<Vec<(usize, NodeMeta)>>,
}

impl Editor {
    pub fn new(scene: SceneGraph, motion_plane_normal: [f64; 3]) -> Result<Self> {
        let n = Vector3::from(motion_plane_normal);
        if !n.iter().all(|v| v.is_finite()) || n.norm() < 1e-9 {
            return Err(Error::invalid("motion-plane normal must be a finite non-zero vector"));
        }
        Ok(Self {
            scene,
            normal: Unit::new_normalize(n),
            history: vec![],
        })
    }

    pub fn scene(&self) -> &SceneGraph {
        &self.scene
    }

    pub fn into_scene(self) -> SceneGraph {
        self.scene
    }

    /// Number of operations that can still be undone.
    pub fn depth(&self) -> usize {
        self.history.len()
    }

    pub fn apply(&mut self, op: &EditOp) -> Result<()> {
        if let EditOp::Undo = op {
            return self.undo();
        }
        let touched: Vec<usize> = match op {
            EditOp::Remove { track_id } | EditOp::Restore { track_id } => vec![self.scene.object_index(*track_id)?],
            EditOp::Transform { track_id, .. } | EditOp::Retrajectory { track_id, .. } => {
                vec![self.scene.object_index(*track_id)?]
            }
            EditOp::Swap { a, b } => vec![self.scene.object_index(*a)?, self.scene.object_index(*b)?],
            EditOp::Undo => unreachable!(),
        };
        let saved: Vec<(usize, NodeMeta)> = touched.iter().map(|&i| (i, meta_of(&self.scene, i))).collect();
        match op {
            EditOp::Remove { track_id } => apply_removal(&mut self.scene, *track_id)?,
            EditOp::Restore { track_id } => apply_restore(&mut self.scene, *track_id)?,
            EditOp::Swap { a, b } => apply_swap(&mut self.scene, *a, *b)?,
            EditOp::Transform {
                track_id,
                translation,
                yaw,
                time_range,
            } => {
                let motion = PlaneMotion::new(self.normal, Vector3::from(*translation), *yaw)?;
                let range = [
                    self.scene.time.normalize(time_range[0]),
                    self.scene.time.normalize(time_range[1]),
                ];
                apply_transform(&mut self.scene, *track_id, &motion, range)?;
            }
            EditOp::Retrajectory {
                track_id,
                samples,
                rekey_appearance,
            } => {
                let traj = trajectory_from_samples(&self.scene, samples)?;
                apply_trajectory(&mut self.scene, *track_id, traj, *rekey_appearance)?;
            }
            EditOp::Undo => unreachable!(),
        }
        self.history.push(saved);
        Ok(())
    }

    pub fn undo(&mut self) -> Result<()> {
        let saved = self
            .history
            .pop()
            .ok_or_else(|| Error::invalid("nothing to undo"))?;
        // Restore in reverse so a node touched twice ends at its oldest state.
        for (i, m) in saved.into_iter().rev() {
            restore_meta(&mut self.scene, i, m);
        }
        Ok(())
    }
}

/// Converts script samples (seconds) to a trajectory in scene time.
pub fn trajectory_from_samples(scene: &SceneGraph, samples: &[PoseSample]) -> Result<Trajectory> {
    if samples.is_empty() {
        return Err(Error::invalid("replacement trajectory is empty"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if !s.time.is_finite() {
            return Err(Error::invalid("trajectory sample time must be finite"));
        }
        out.push((scene.time.normalize(s.time), Pose::from_wxyz(s.rotation, s.translation)?));
    }
    Trajectory::new(out)
}

/// Excludes the object from composition. Its node stays in the graph.
pub fn apply_removal(scene: &mut SceneGraph, track_id: u32) -> Result<()> {
    let i = scene.object_index(track_id)?;
    scene.objects[i].hidden = true;
    Ok(())
}

pub fn apply_restore(scene: &mut SceneGraph, track_id: u32) -> Result<()> {
    let i = scene.object_index(track_id)?;
    scene.objects[i].hidden = false;
    Ok(())
}

/// Exchanges the trajectories (and any pose corrections) of two objects.
pub fn apply_swap(scene: &mut SceneGraph, a: u32, b: u32) -> Result<()> {
    let ia = scene.object_index(a)?;
    let ib = scene.object_index(b)?;
    if ia == ib {
        return Ok(());
    }
    let (lo, hi) = (ia.min(ib), ia.max(ib));
    let (left, right) = scene.objects.split_at_mut(hi);
    let (x, y) = (&mut left[lo], &mut right[0]);
    std::mem::swap(&mut x.trajectory, &mut y.trajectory);
    std::mem::swap(&mut x.pose_deltas, &mut y.pose_deltas);
    Ok(())
}

/// Rigid motion in the motion plane: yaw about the plane normal and a
/// translation perpendicular to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneMotion {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl PlaneMotion {
    pub fn new(normal: Unit<Vector3<f64>>, translation: Vector3<f64>, yaw: f64) -> Result<Self> {
        if !yaw.is_finite() || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("transform values must be finite"));
        }
        let off_plane = translation.dot(&normal);
        if off_plane.abs() > 1e-9 * translation.norm().max(1.0) {
            return Err(Error::invalid(format!(
                "translation leaves the motion plane by {off_plane:.3e} along its normal"
            )));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_axis_angle(&normal, yaw),
            translation,
        })
    }

    /// New pose: rotated in place about its own position, then shifted.
    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose::new(self.rotation * pose.rotation, pose.translation + self.translation)
    }
}

/// Moves the trajectory samples whose time is in `range` (inclusive). An
/// empty range changes nothing.
pub fn apply_transform(scene: &mut SceneGraph, track_id: u32, motion: &PlaneMotion, range: [TimeStamp; 2]) -> Result<()> {
    let i = scene.object_index(track_id)?;
    let node = &mut scene.objects[i];
    let inside = |t: TimeStamp| t.0 >= range[0].0 && t.0 <= range[1].0;
    let hit: Vec<bool> = node.trajectory.samples().iter().map(|(t, _)| inside(*t)).collect();
    for ((_, pose), h) in node.trajectory.samples_mut().iter_mut().zip(&hit) {
        if *h {
            *pose = motion.apply(pose);
        }
    }
    // A correction R_δ applied before the yaw has to become R_y R_δ R_yᵀ
    // after it, which rotates its rotation vector by R_y.
    if let Some(deltas) = node.pose_deltas.as_mut() {
        for (d, h) in deltas.iter_mut().zip(&hit) {
            if *h {
                let w = motion.rotation * Vector3::new(d[3], d[4], d[5]);
                d[3..6].copy_from_slice(w.as_slice());
            }
        }
    }
    Ok(())
}

/// Replaces the object's trajectory. Pose corrections are dropped since
/// they belong to the old samples. With `rekey_appearance`, appearance is
/// looked up at the time the old path reached the same fraction of its
/// arc length; otherwise appearance stays keyed to scene time.
pub fn apply_trajectory(scene: &mut SceneGraph, track_id: u32, new: Trajectory, rekey_appearance: bool) -> Result<()> {
    let i = scene.object_index(track_id)?;
    let node = &mut scene.objects[i];
    if rekey_appearance {
        let knots = arc_length_knots(&node.trajectory, &new);
        // An identity map keeps the clock as is rather than resampling it.
        let identity = knots.iter().all(|(t, tau)| t == tau);
        let composed = knots
            .into_iter()
            .map(|(t, tau)| (t, node.appearance_clock.apply(TimeStamp(tau)).0))
            .collect();
        if !identity {
            node.appearance_clock = AppearanceClock::Remapped(composed);
        }
    }
    node.trajectory = new;
    node.pose_deltas = None;
    Ok(())
}

/// For every sample of `new`, the time at which `old` had covered the same
/// fraction of its total arc length. Paths that do not move fall back to
/// the fraction of the time window.
fn arc_length_knots(old: &Trajectory, new: &Trajectory) -> Vec<(f64, f64)> {
    let fractions = |t: &Trajectory| -> Vec<f64> {
        let s = t.arc_lengths();
        let total = s[s.len() - 1];
        let (a, b) = t.window();
        if total > 1e-9 {
            s.iter().map(|v| v / total).collect()
        } else if b.0 > a.0 {
            t.samples().iter().map(|(x, _)| (x.0 - a.0) / (b.0 - a.0)).collect()
        } else {
            vec![0.0; s.len()]
        }
    };
    let old_f = fractions(old);
    let old_t: Vec<f64> = old.samples().iter().map(|(t, _)| t.0).collect();
    let new_f = fractions(new);
    new.samples()
        .iter()
        .zip(new_f)
        .map(|((t, _), f)| (t.0, invert_monotone(&old_f, &old_t, f)))
        .collect()
}

/// Inverse of the piecewise-linear map `xs → ys` (xs non-decreasing),
/// clamped, taking the first point where a flat stretch reaches `x`.
fn invert_monotone(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let k = xs.partition_point(|v| *v < x);
    if k >= xs.len() {
        return ys[ys.len() - 1];
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    if x1 == x {
        return ys[k];
    }
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}
