mod common;

use common::{camera, edits, random_scene, SceneShape};
use nalgebra::{Rotation3, Vector3};
use wavesplat::appearance::TimeStamp;
use wavesplat::edit::{EditOp, EditScript, PoseSample};
use wavesplat::geom::{project_point, Pose};
use wavesplat::ingest::{build_scene, Dataset};
use wavesplat::optim::TrainConfig;
use wavesplat::render::render;
use wavesplat::scenegraph::{compose, SceneGraph};

const Z_UP: [f64; 3] = [0.0, 0.0, 1.0];

fn apply(scene: &SceneGraph, ops: Vec<EditOp>) -> SceneGraph {
    EditScript::new(ops).apply(scene, Z_UP).unwrap()
}

fn shapes() -> Vec<SceneShape> {
    vec![
        SceneShape::default(),
        SceneShape {
            objects: 3,
            refine_poses: false,
            ..Default::default()
        },
    ]
}

#[test]
fn removal_matches_scene_without_node() {
    for seed in 0..4 {
        for shape in shapes() {
            let scene = random_scene(seed, shape);
            edits::removal(&scene, &camera(40, 32)).unwrap();
            // The objects are in view, so removing one must change the image.
            let removed = apply(&scene, vec![EditOp::Remove { track_id: 10 }]);
            let t = TimeStamp(0.5);
            assert_ne!(common::render_bits(&removed, t, &camera(40, 32)), common::render_bits(&scene, t, &camera(40, 32)));
        }
    }
}

#[test]
fn swap_is_an_involution() {
    for seed in 0..4 {
        for shape in shapes() {
            edits::swap_involution(&random_scene(seed, shape), &camera(40, 32)).unwrap();
        }
    }
}

#[test]
fn identity_transforms_change_nothing() {
    for seed in 0..4 {
        for shape in shapes() {
            edits::identity_transform(&random_scene(seed, shape), &camera(40, 32)).unwrap();
        }
    }
}

#[test]
fn self_retrajectory_changes_nothing() {
    for seed in 0..4 {
        for shape in shapes() {
            edits::self_retrajectory(&random_scene(seed, shape), &camera(40, 32)).unwrap();
        }
    }
}

#[test]
fn invariants_hold_on_an_initialized_fixture_scene() {
    let ds = Dataset::load(&common::fixture("synth_small/manifest.json")).unwrap();
    let scene = build_scene(&ds, &TrainConfig::default()).unwrap();
    let cam = ds.manifest.camera;
    // Render from the first frame's camera rather than the identity.
    let view = ds.manifest.camera_to_world(0);
    let moved = {
        let mut s = scene.clone();
        let inv = view.inverse();
        s.background = s.background.transformed(&inv);
        for o in &mut s.objects {
            let samples: Vec<_> = o.trajectory.samples().iter().map(|(t, p)| (*t, inv.compose(p))).collect();
            o.trajectory = wavesplat::scenegraph::Trajectory::new(samples).unwrap();
        }
        s
    };
    edits::all(&moved, &cam).unwrap();
}

#[test]
fn swapped_object_follows_the_other_annotation() {
    let scene = random_scene(7, SceneShape::default());
    let (a, b) = (scene.objects[0].track_id, scene.objects[1].track_id);
    let out = apply(&scene, vec![EditOp::Swap { a, b }]);
    for t in common::probe_times() {
        assert_eq!(out.objects[0].pose_at(t), scene.objects[1].pose_at(t), "t = {}", t.0);
        assert_eq!(out.objects[1].pose_at(t), scene.objects[0].pose_at(t), "t = {}", t.0);
    }
    // Appearance stays with the object.
    assert_eq!(out.objects[0].gaussians, scene.objects[0].gaussians);
    assert_eq!(out.objects[0].appearance_clock, scene.objects[0].appearance_clock);
}

#[test]
fn unknown_ids_are_errors() {
    let scene = random_scene(1, SceneShape::default());
    for op in [
        EditOp::Remove { track_id: 99 },
        EditOp::Swap { a: 10, b: 99 },
        EditOp::Transform {
            track_id: 99,
            translation: [0.0; 3],
            yaw: 0.0,
            time_range: [0.0, 1.0],
        },
    ] {
        let err = EditScript::new(vec![op]).apply(&scene, Z_UP).unwrap_err();
        assert_eq!(err.category(), "unknown-track");
    }
    let empty = EditOp::Retrajectory {
        track_id: 10,
        samples: vec![],
        rekey_appearance: false,
    };
    assert!(EditScript::new(vec![empty]).apply(&scene, Z_UP).is_err());
}

/// Means of object `i` in world at `t`, from the composition.
fn world_means(scene: &SceneGraph, i: usize, t: TimeStamp) -> Vec<Vector3<f64>> {
    let c = compose(scene, t);
    c.filter_node(i as u32 + 1).map(|s| s.means).unwrap_or_default()
}

#[test]
fn lane_shift_moves_means_by_the_offset() {
    let scene = random_scene(3, SceneShape::default());
    let id = scene.objects[0].track_id;
    // Affects samples at 0 and 0.5 but not 1.0.
    let out = apply(
        &scene,
        vec![EditOp::Transform {
            track_id: id,
            translation: [3.5, 0.0, 0.0],
            yaw: 0.0,
            time_range: [0.0, 0.5],
        }],
    );
    for t in [0.0, 0.25, 0.5] {
        let before = world_means(&scene, 0, TimeStamp(t));
        let after = world_means(&out, 0, TimeStamp(t));
        for (p, q) in before.iter().zip(&after) {
            assert!((q - p - Vector3::new(3.5, 0.0, 0.0)).norm() < 1e-9, "t = {t}");
        }
    }
    // Outside the range the samples are unchanged.
    assert_eq!(world_means(&scene, 0, TimeStamp(1.0)), world_means(&out, 0, TimeStamp(1.0)));
    assert_eq!(world_means(&scene, 1, TimeStamp(0.3)), world_means(&out, 1, TimeStamp(0.3)));
}

#[test]
fn half_turn_flips_heading_and_rotates_covariances() {
    let mut scene = random_scene(5, SceneShape::default());
    scene.objects[0].pose_deltas = None;
    let id = scene.objects[0].track_id;
    let out = apply(
        &scene,
        vec![EditOp::Transform {
            track_id: id,
            translation: [0.0; 3],
            yaw: std::f64::consts::PI,
            time_range: [-1.0, 2.0],
        }],
    );
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI).into_inner();
    for t in [0.0, 0.3, 0.5, 0.9] {
        let t = TimeStamp(t);
        let p0 = scene.objects[0].pose_at(t).unwrap();
        let p1 = out.objects[0].pose_at(t).unwrap();
        // Same position, heading reversed.
        assert!((p1.translation - p0.translation).norm() < 1e-12);
        let h0 = p0.rotation_matrix() * Vector3::x();
        let h1 = p1.rotation_matrix() * Vector3::x();
        assert!((h1 - rz * h0).norm() < 1e-9);
        let before = compose(&scene, t).filter_node(1).unwrap();
        let after = compose(&out, t).filter_node(1).unwrap();
        for g in 0..before.len() {
            let want = rz * before.covariance(g) * rz.transpose();
            assert!((after.covariance(g) - want).abs().max() < 1e-9);
            let off = before.means[g] - p0.translation;
            assert!((after.means[g] - p0.translation - rz * off).norm() < 1e-9);
        }
    }
}

#[test]
fn off_plane_translation_is_rejected() {
    let scene = random_scene(2, SceneShape::default());
    let op = EditOp::Transform {
        track_id: 10,
        translation: [1.0, 0.0, 0.5],
        yaw: 0.0,
        time_range: [0.0, 1.0],
    };
    assert!(EditScript::new(vec![op]).apply(&scene, Z_UP).is_err());
}

fn samples_of(scene: &SceneGraph, i: usize, shift_seconds: f64) -> Vec<PoseSample> {
    scene.objects[i]
        .trajectory
        .samples()
        .iter()
        .map(|(t, p)| PoseSample {
            time: scene.time.seconds(*t) + shift_seconds,
            translation: p.translation.into(),
            rotation: p.wxyz(),
        })
        .collect()
}

/// Objects-only view of a scene: background made invisible.
fn objects_only(scene: &SceneGraph) -> SceneGraph {
    wavesplat::cli::decompose(scene).1
}

#[test]
fn time_shifted_trajectory_reproduces_object_renders() {
    let shape = SceneShape {
        refine_poses: false,
        ..Default::default()
    };
    let scene = random_scene(11, shape);
    let cam = camera(40, 32);
    let shift = 0.25;
    let out = apply(
        &scene,
        vec![EditOp::Retrajectory {
            track_id: scene.objects[0].track_id,
            samples: samples_of(&scene, 0, shift),
            rekey_appearance: true,
        }],
    );
    let mut before = objects_only(&scene);
    before.objects[1].hidden = true;
    let mut after = objects_only(&out);
    after.objects[1].hidden = true;
    for t in [0.0, 0.2, 0.45, 0.7] {
        let a = render(&before, TimeStamp(t), &Pose::identity(), &cam, &Default::default()).unwrap().output;
        let b = render(&after, TimeStamp(t + shift), &Pose::identity(), &cam, &Default::default()).unwrap().output;
        let diff = a.color.iter().zip(&b.color).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "t = {t}: max color difference {diff}");
    }
}

#[test]
fn constant_velocity_path_moves_monotonically_in_the_image() {
    let shape = SceneShape {
        objects: 1,
        refine_poses: false,
        ..Default::default()
    };
    let scene = random_scene(4, shape);
    let cam = camera(64, 48);
    // Straight line left to right at constant speed, 5 m ahead.
    let samples: Vec<PoseSample> = (0..=4)
        .map(|i| {
            let s = i as f64 / 4.0;
            PoseSample {
                time: s,
                translation: [-1.2 + 2.4 * s, 0.0, 5.0],
                rotation: [1.0, 0.0, 0.0, 0.0],
            }
        })
        .collect();
    let out = objects_only(&apply(
        &scene,
        vec![EditOp::Retrajectory {
            track_id: scene.objects[0].track_id,
            samples,
            rekey_appearance: false,
        }],
    ));
    let mut last = f64::NEG_INFINITY;
    for k in 0..=8 {
        let t = TimeStamp(k as f64 / 8.0);
        let r = render(&out, t, &Pose::identity(), &cam, &Default::default()).unwrap().output;
        let (mut sum, mut wx) = (0.0, 0.0);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let a = r.accum[(y * cam.width + x) as usize];
                sum += a;
                wx += a * (x as f64 + 0.5);
            }
        }
        let cx = wx / sum;
        // Projected box center as an independent reference.
        let center = out.objects[0].pose_at(t).unwrap().translation;
        let (px, _) = project_point(&center, &cam).unwrap();
        assert!((cx - px.x).abs() < 4.0, "centroid {cx} vs projected center {}", px.x);
        assert!(cx > last, "centroid moved backwards at t = {}", t.0);
        last = cx;
    }
}

#[test]
fn edits_never_touch_gaussian_parameters() {
    let scene = random_scene(9, SceneShape { objects: 3, ..Default::default() });
    let ops = vec![
        EditOp::Remove { track_id: 10 },
        EditOp::Swap { a: 11, b: 12 },
        EditOp::Transform {
            track_id: 11,
            translation: [1.0, 2.0, 0.0],
            yaw: 0.7,
            time_range: [0.2, 0.8],
        },
        EditOp::Retrajectory {
            track_id: 12,
            samples: samples_of(&scene, 0, 0.1),
            rekey_appearance: true,
        },
        EditOp::Undo,
        EditOp::Restore { track_id: 10 },
    ];
    let out = apply(&scene, ops);
    assert_eq!(out.background, scene.background);
    for (a, b) in out.objects.iter().zip(&scene.objects) {
        assert_eq!(a.gaussians, b.gaussians);
        assert_eq!(a.track_id, b.track_id);
        assert_eq!(a.bbox, b.bbox);
    }
}
