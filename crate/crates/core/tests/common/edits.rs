//! Bit-exact edit invariants on rendered scenes, shared by the edit tests
//! and the acceptance run. Each check returns a description of the first
//! violation.

use wavesplat::edit::{apply_trajectory, EditOp, EditScript};
use wavesplat::geom::CameraModel;
use wavesplat::scenegraph::SceneGraph;

use super::{probe_times, render_bits};

const Z_UP: [f64; 3] = [0.0, 0.0, 1.0];

fn edited(scene: &SceneGraph, ops: Vec<EditOp>) -> Result<SceneGraph, String> {
    EditScript::new(ops).apply(scene, Z_UP).map_err(|e| e.to_string())
}

fn same_renders(a: &SceneGraph, b: &SceneGraph, cam: &CameraModel, what: &str) -> Result<(), String> {
    for t in probe_times() {
        if render_bits(a, t, cam) != render_bits(b, t, cam) {
            return Err(format!("{what}: renders differ at t = {}", t.0));
        }
    }
    Ok(())
}

fn same_gaussians(a: &SceneGraph, b: &SceneGraph, what: &str) -> Result<(), String> {
    let ok = a.background == b.background
        && a.objects.len() == b.objects.len()
        && a.objects.iter().zip(&b.objects).all(|(x, y)| x.gaussians == y.gaussians && x.track_id == y.track_id);
    if ok {
        Ok(())
    } else {
        Err(format!("{what}: Gaussian parameters changed"))
    }
}

/// Removal renders exactly like a scene built without the node; removing
/// everything leaves the background; undo restores the original.
pub fn removal(scene: &SceneGraph, cam: &CameraModel) -> Result<(), String> {
    for (i, o) in scene.objects.iter().enumerate() {
        let removed = edited(scene, vec![EditOp::Remove { track_id: o.track_id }])?;
        same_gaussians(scene, &removed, "removal")?;
        let mut without = scene.clone();
        without.objects.remove(i);
        same_renders(&removed, &without, cam, &format!("removal of {}", o.track_id))?;
        let undone = edited(scene, vec![EditOp::Remove { track_id: o.track_id }, EditOp::Undo])?;
        same_renders(&undone, scene, cam, "removal undo")?;
        if undone != *scene {
            return Err("removal undo: scene differs".into());
        }
    }
    let all = scene.objects.iter().map(|o| EditOp::Remove { track_id: o.track_id }).collect();
    let bg_only = SceneGraph::new(scene.background.clone(), scene.time);
    same_renders(&edited(scene, all)?, &bg_only, cam, "removing every object")
}

/// swap(a, a) and swap(a, b) twice leave renders unchanged.
pub fn swap_involution(scene: &SceneGraph, cam: &CameraModel) -> Result<(), String> {
    for a in &scene.objects {
        let id = edited(scene, vec![EditOp::Swap { a: a.track_id, b: a.track_id }])?;
        same_renders(&id, scene, cam, "self swap")?;
        for b in &scene.objects {
            let swap = EditOp::Swap { a: a.track_id, b: b.track_id };
            let once = edited(scene, vec![swap.clone()])?;
            same_gaussians(scene, &once, "swap")?;
            let twice = edited(scene, vec![swap.clone(), swap])?;
            same_renders(&twice, scene, cam, "double swap")?;
        }
    }
    Ok(())
}

/// A zero transform over the whole window, and over an empty range, is a no-op.
pub fn identity_transform(scene: &SceneGraph, cam: &CameraModel) -> Result<(), String> {
    let (t0, t1) = (scene.time.t_first, scene.time.t_last);
    for o in &scene.objects {
        for range in [[t0 - 1.0, t1 + 1.0], [t1 + 5.0, t1 + 6.0], [t1, t0]] {
            let op = EditOp::Transform {
                track_id: o.track_id,
                translation: [0.0; 3],
                yaw: 0.0,
                time_range: range,
            };
            let out = edited(scene, vec![op])?;
            same_renders(&out, scene, cam, "identity transform")?;
        }
        // A real transform in an empty range does nothing either.
        let op = EditOp::Transform {
            track_id: o.track_id,
            translation: [3.5, -1.0, 0.0],
            yaw: 1.0,
            time_range: [t1 + 5.0, t1 + 6.0],
        };
        same_renders(&edited(scene, vec![op])?, scene, cam, "transform over an empty range")?;
    }
    Ok(())
}

/// Replacing an unrefined trajectory with itself is a no-op, with or
/// without appearance re-keying.
pub fn self_retrajectory(scene: &SceneGraph, cam: &CameraModel) -> Result<(), String> {
    let mut plain = scene.clone();
    plain.objects.iter_mut().for_each(|o| o.pose_deltas = None);
    for o in &plain.objects {
        for rekey in [false, true] {
            let mut out = plain.clone();
            apply_trajectory(&mut out, o.track_id, o.trajectory.clone(), rekey).map_err(|e| e.to_string())?;
            same_gaussians(&plain, &out, "retrajectory")?;
            same_renders(&out, &plain, cam, &format!("self retrajectory (rekey {rekey})"))?;
        }
    }
    Ok(())
}

pub fn all(scene: &SceneGraph, cam: &CameraModel) -> Result<(), String> {
    removal(scene, cam)?;
    swap_involution(scene, cam)?;
    identity_transform(scene, cam)?;
    self_retrajectory(scene, cam)
}
