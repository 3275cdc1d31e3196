#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavesplat::appearance::{Appearance, ShCoefficients, TimeNormalization, TimeStamp, WaveletBank};
use wavesplat::geom::{BoundingBox3D, CameraModel, Pose};
use wavesplat::scenegraph::{GaussianSet, ObjectNode, SceneGraph, Trajectory};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn camera(width: u32, height: u32) -> CameraModel {
    CameraModel {
        fx: 0.95 * width as f64,
        fy: 0.95 * width as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        near: 0.1,
        far: 100.0,
    }
}

pub fn random_set(rng: &mut ChaCha8Rng, n: usize, spread: f64, appearance: Appearance) -> GaussianSet {
    let mut s = GaussianSet::empty(appearance.empty_like());
    for _ in 0..n {
        s.means.push(Vector3::new(
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
            rng.gen_range(-0.5 * spread..0.5 * spread),
        ));
        s.log_scales.push(Vector3::from_fn(|_, _| rng.gen_range(-2.2..-1.2)));
        s.rotations.push([
            rng.gen_range(0.5..1.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ]);
        s.opacity_logits.push(rng.gen_range(-1.0..1.5));
    }
    s.appearance = appearance;
    s
}

pub fn static_sh(rng: &mut ChaCha8Rng, degree: u8, n: usize, amp: f64) -> Appearance {
    let mut sh = ShCoefficients::zeros(degree, n);
    sh.coeffs.iter_mut().for_each(|v| *v = rng.gen_range(-amp..amp));
    Appearance::Static(sh)
}

pub fn wavelets(rng: &mut ChaCha8Rng, dim: usize, n: usize, amp: f64) -> Appearance {
    let mut wb = WaveletBank::new(1, dim, n).unwrap();
    wb.weights.iter_mut().for_each(|v| *v = rng.gen_range(-amp..amp));
    wb.log_scales.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    wb.translations.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    Appearance::Wavelet(wb)
}

/// Shape of a random scene in front of an identity camera looking down +z.
#[derive(Clone, Copy, Debug)]
pub struct SceneShape {
    pub background: usize,
    pub per_object: usize,
    pub objects: usize,
    pub wavelet_dim: usize,
    pub refine_poses: bool,
}

impl Default for SceneShape {
    fn default() -> Self {
        Self {
            background: 10,
            per_object: 5,
            objects: 2,
            wavelet_dim: 2,
            refine_poses: true,
        }
    }
}

/// Static-SH background around z = 7 and wavelet objects moving near
/// z = 5 over the normalized window [0, 1].
pub fn random_scene(seed: u64, shape: SceneShape) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let app = static_sh(&mut rng, 1, shape.background, 0.15);
    let mut bg = random_set(&mut rng, shape.background, 0.9, app);
    bg.means.iter_mut().for_each(|m| m.z += 7.0);
    let mut g = SceneGraph::new(bg, TimeNormalization { t_first: 0.0, t_last: 1.0 });
    for k in 0..shape.objects {
        let app = wavelets(&mut rng, shape.wavelet_dim, shape.per_object, 0.15);
        let set = random_set(&mut rng, shape.per_object, 0.35, app);
        let x0 = -0.6 + 1.2 * k as f64 / shape.objects.max(1) as f64;
        let samples = (0..3)
            .map(|i| {
                let s = i as f64 / 2.0;
                (
                    TimeStamp(s),
                    Pose::from_yaw(
                        rng.gen_range(-0.5..0.5),
                        Vector3::new(x0 + 0.3 * s, rng.gen_range(-0.2..0.2), 5.0 + rng.gen_range(-0.3..0.3)),
                    ),
                )
            })
            .collect();
        let bbox = BoundingBox3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap();
        let mut node = ObjectNode::new(10 + k as u32, "car", bbox, set, Trajectory::new(samples).unwrap());
        if shape.refine_poses {
            node.enable_pose_refinement();
            for row in node.pose_deltas.as_mut().unwrap() {
                row.iter_mut().for_each(|v| *v = rng.gen_range(-0.03..0.03));
            }
        }
        g.add_object(node).unwrap();
    }
    g
}

pub mod edits;

/// Every pixel output of a render, for bit-exact comparisons.
pub fn render_bits(
    scene: &SceneGraph,
    t: TimeStamp,
    cam: &CameraModel,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = wavesplat::render::render(scene, t, &Pose::identity(), cam, &Default::default())
        .unwrap()
        .output;
    (r.color, r.depth, r.accum)
}

/// Normalized times spread over and slightly beyond the scene window.
pub fn probe_times() -> Vec<TimeStamp> {
    [-0.1, 0.0, 0.13, 0.37, 0.5, 0.81, 1.0, 1.2].into_iter().map(TimeStamp).collect()
}
