//! Scene-level rendering: compose at `t`, project, rasterize, and pull
//! image gradients back to node parameters and pose deltas.

use crate::appearance::TimeStamp;
use crate::error::Result;
use crate::geom::{CameraModel, Pose};
use crate::rasterizer::{
    box_hull_mask, cull_and_project, project_backward, rasterize_backward, rasterize_forward,
    rasterize_reference, BetaSupport, NodeGrads, Projection, RenderGrads, RenderOutput,
    RenderSettings,
};
use crate::scenegraph::{
    blend_delta, compose, delta_backward, ComposedScene, PoseDelta, SceneGraph, BACKGROUND_NODE,
};

/// Forward state retained for the backward pass.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub output: RenderOutput,
    pub composed: ComposedScene,
    pub projection: Projection,
    pub support: BetaSupport,
}

/// Gradients for every node, indexed like the scene graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGrads {
    pub background: NodeGrads,
    pub objects: Vec<NodeGrads>,
    /// Per object, one gradient per trajectory sample when refinement is on.
    pub pose_deltas: Vec<Option<Vec<PoseDelta>>>,
}

impl SceneGrads {
    pub fn zeros_like(scene: &SceneGraph) -> Self {
        Self {
            background: NodeGrads::zeros_like(&scene.background),
            objects: scene
                .objects
                .iter()
                .map(|o| NodeGrads::zeros_like(&o.gaussians))
                .collect(),
            pose_deltas: scene
                .objects
                .iter()
                .map(|o| o.pose_deltas.as_ref().map(|d| vec![[0.0; 6]; d.len()]))
                .collect(),
        }
    }

    pub fn node_mut(&mut self, node_id: u32) -> &mut NodeGrads {
        if node_id == BACKGROUND_NODE {
            &mut self.background
        } else {
            &mut self.objects[node_id as usize - 1]
        }
    }

    pub fn node(&self, node_id: u32) -> &NodeGrads {
        if node_id == BACKGROUND_NODE {
            &self.background
        } else {
            &self.objects[node_id as usize - 1]
        }
    }
}

/// Box-hull masks of every object segment in `composed`.
pub fn beta_support(
    scene: &SceneGraph,
    composed: &ComposedScene,
    view: &Pose,
    cam: &CameraModel,
) -> BetaSupport {
    let mut support = BetaSupport::default();
    for seg in composed.segments.iter().filter(|s| s.node_id != BACKGROUND_NODE) {
        let obj = &scene.objects[seg.node_id as usize - 1];
        support.insert(seg.node_id, box_hull_mask(&obj.bbox, &seg.pose, view, cam));
    }
    support
}

/// Renders `scene` at `t` from a camera with the given camera-to-world pose.
pub fn render(
    scene: &SceneGraph,
    t: TimeStamp,
    camera_to_world: &Pose,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Result<Rendered> {
    render_with_support(scene, t, camera_to_world, cam, settings, None)
}

/// As [`render`], optionally with fixed β supports instead of box hulls.
pub fn render_with_support(
    scene: &SceneGraph,
    t: TimeStamp,
    camera_to_world: &Pose,
    cam: &CameraModel,
    settings: &RenderSettings,
    support: Option<&BetaSupport>,
) -> Result<Rendered> {
    cam.validate()?;
    let view = camera_to_world.inverse();
    let composed = compose(scene, t);
    let support = match support {
        Some(s) => s.clone(),
        None => beta_support(scene, &composed, &view, cam),
    };
    let projection = cull_and_project(&composed, &view, cam, settings);
    let output = rasterize_forward(&projection.splats, cam, settings, &support);
    Ok(Rendered {
        output,
        composed,
        projection,
        support,
    })
}

/// Brute-force counterpart of [`render`] (no tiles, no cutoffs).
pub fn render_reference(
    scene: &SceneGraph,
    t: TimeStamp,
    camera_to_world: &Pose,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    cam.validate()?;
    let view = camera_to_world.inverse();
    let composed = compose(scene, t);
    let support = beta_support(scene, &composed, &view, cam);
    let projection = cull_and_project(&composed, &view, cam, settings);
    Ok(rasterize_reference(&projection.splats, cam, settings, &support))
}

/// Pulls output gradients back to every node parameter and pose delta.
pub fn render_backward(
    scene: &SceneGraph,
    rendered: &Rendered,
    cam: &CameraModel,
    settings: &RenderSettings,
    grads: &RenderGrads,
) -> SceneGrads {
    let splat_grads = rasterize_backward(
        &rendered.projection.splats,
        cam,
        settings,
        &rendered.support,
        &rendered.output,
        grads,
    );
    let (nodes, poses) = project_backward(
        scene,
        &rendered.composed,
        &rendered.projection,
        &splat_grads,
        cam,
    );
    let mut out = SceneGrads::zeros_like(scene);
    let t = rendered.composed.time;
    for ((seg, ng), pg) in rendered.composed.segments.iter().zip(&nodes).zip(&poses) {
        out.node_mut(seg.node_id).add_assign(ng);
        if seg.node_id == BACKGROUND_NODE {
            continue;
        }
        let k = seg.node_id as usize - 1;
        let obj = &scene.objects[k];
        let (Some(deltas), Some(loc), Some(base)) = (
            &obj.pose_deltas,
            obj.trajectory.locate(t),
            obj.trajectory.pose_at(t),
        ) else {
            continue;
        };
        let g = delta_backward(&base, &blend_delta(deltas, &loc), &pg.rotation, &pg.translation);
        if let Some(acc) = out.pose_deltas[k].as_mut() {
            for j in 0..6 {
                acc[loc.lower][j] += (1.0 - loc.blend) * g[j];
                if loc.upper != loc.lower {
                    acc[loc.upper][j] += loc.blend * g[j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::{Appearance, ShCoefficients, TimeNormalization, WaveletBank};
    use crate::geom::BoundingBox3D;
    use crate::rasterizer::AppearanceGrads;
    use crate::scenegraph::{GaussianSet, ObjectNode, Trajectory};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel {
            fx: 30.0,
            fy: 30.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
            near: 0.1,
            far: 100.0,
        }
    }

    fn set(rng: &mut ChaCha8Rng, n: usize, spread: f64, appearance: Appearance) -> GaussianSet {
        let mut s = GaussianSet::empty(appearance.empty_like());
        for _ in 0..n {
            s.means.push(Vector3::new(
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
                rng.gen_range(-0.5 * spread..0.5 * spread),
            ));
            s.log_scales.push(Vector3::new(
                rng.gen_range(-2.2f64..-1.2),
                rng.gen_range(-2.2f64..-1.2),
                rng.gen_range(-2.2f64..-1.2),
            ));
            let q: [f64; 4] = [
                rng.gen_range(0.5..1.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            s.rotations.push(q);
            s.opacity_logits.push(rng.gen_range(-1.0..1.5));
        }
        s.appearance = appearance;
        s
    }

    /// Background (static SH) plus one wavelet object with pose refinement,
    /// all comfortably inside a 32×32 view looking down +z.
    fn scene(seed: u64) -> SceneGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sh = ShCoefficients::zeros(1, 10);
        sh.coeffs.iter_mut().for_each(|v| *v = rng.gen_range(-0.15..0.15));
        let mut bg = set(&mut rng, 10, 0.8, Appearance::Static(sh));
        bg.means.iter_mut().for_each(|m| m.z += 7.0);
        let mut wb = WaveletBank::new(1, 3, 8).unwrap();
        wb.weights.iter_mut().for_each(|v| *v = rng.gen_range(-0.15..0.15));
        wb.log_scales.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        let obj_set = set(&mut rng, 8, 0.4, Appearance::Wavelet(wb));
        let mut g = SceneGraph::new(bg, TimeNormalization { t_first: 0.0, t_last: 1.0 });
        let traj = Trajectory::new(vec![
            (TimeStamp(0.0), Pose::from_yaw(0.1, Vector3::new(-0.3, 0.0, 5.0))),
            (TimeStamp(1.0), Pose::from_yaw(0.4, Vector3::new(0.3, 0.1, 5.5))),
        ])
        .unwrap();
        let bbox = BoundingBox3D::new([0.0; 3], [1.2, 1.2, 1.2], 0.0).unwrap();
        let mut node = ObjectNode::new(7, "car", bbox, obj_set, traj);
        node.enable_pose_refinement();
        if let Some(d) = node.pose_deltas.as_mut() {
            for row in d.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
        }
        g.add_object(node).unwrap();
        g
    }

    struct Probe {
        t: TimeStamp,
        cam_pose: Pose,
        grads: RenderGrads,
        support: BetaSupport,
    }

    fn loss(scene: &SceneGraph, p: &Probe) -> f64 {
        let settings = RenderSettings::oracle();
        let r = render_with_support(scene, p.t, &p.cam_pose, &cam(), &settings, Some(&p.support))
            .unwrap();
        let o = &r.output;
        let mut l = 0.0;
        l += o.color.iter().zip(&p.grads.color).map(|(a, b)| a * b).sum::<f64>();
        l += o.depth.iter().zip(&p.grads.depth).map(|(a, b)| a * b).sum::<f64>();
        l += o.accum.iter().zip(&p.grads.accum).map(|(a, b)| a * b).sum::<f64>();
        for (id, g) in &p.grads.beta {
            l += o.per_object_beta.get(id).copied().unwrap_or(0.0) * g;
        }
        l
    }

    fn probe(seed: u64, scene: &SceneGraph) -> Probe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cam().pixel_count();
        let mut grads = RenderGrads::zeros(n);
        grads.color.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        grads.depth.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
        grads.accum.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        grads.beta.insert(1, rng.gen_range(-20.0..20.0));
        let t = TimeStamp(rng.gen_range(0.2..0.8));
        let cam_pose = Pose::identity();
        let composed = compose(scene, t);
        let support = beta_support(scene, &composed, &cam_pose.inverse(), &cam());
        // Depth is only supervised where something was hit; at nearly empty
        // pixels N/A is a near-hard softmax that underflows to 0.
        let r = render_with_support(scene, t, &cam_pose, &cam(), &RenderSettings::oracle(), Some(&support))
            .unwrap();
        for (g, a) in grads.depth.iter_mut().zip(&r.output.accum) {
            if *a < 0.05 {
                *g = 0.0;
            }
        }
        Probe {
            t,
            cam_pose,
            grads,
            support,
        }
    }

    fn bank_mut(s: &mut SceneGraph, node: u32) -> &mut WaveletBank {
        match &mut s.node_set_mut(node).appearance {
            Appearance::Wavelet(w) => w,
            Appearance::Static(_) => panic!("static node"),
        }
    }

    fn assert_close(name: &str, fd: f64, ana: f64) {
        let err = (fd - ana).abs() / (fd.abs().max(ana.abs()) + 1e-6);
        assert!(err < 1e-3, "{name}: fd {fd} vs analytic {ana}");
    }

    /// Central differences with step 1e-4 for every parameter class.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let h = 1e-4;
        for seed in 0..3 {
            let scene = scene(seed);
            let p = probe(seed + 50, &scene);
            let settings = RenderSettings::oracle();
            let r = render_with_support(&scene, p.t, &p.cam_pose, &cam(), &settings, Some(&p.support))
                .unwrap();
            let ana = render_backward(&scene, &r, &cam(), &settings, &p.grads);
            let fd = |f: &dyn Fn(&mut SceneGraph, f64)| {
                let mut a = scene.clone();
                f(&mut a, h);
                let mut b = scene.clone();
                f(&mut b, -h);
                (loss(&a, &p) - loss(&b, &p)) / (2.0 * h)
            };
            for node in 0..2u32 {
                let n = if node == 0 { scene.background.len() } else { scene.objects[0].gaussians.len() };
                let g = ana.node(node);
                for i in 0..n {
                    for k in 0..3 {
                        let v = fd(&|s, h| s.node_set_mut(node).means[i][k] += h);
                        assert_close(&format!("node {node} mean {i}.{k}"), v, g.means[i][k]);
                        let v = fd(&|s, h| s.node_set_mut(node).log_scales[i][k] += h);
                        assert_close(&format!("node {node} log_scale {i}.{k}"), v, g.log_scales[i][k]);
                    }
                    for k in 0..4 {
                        let v = fd(&|s, h| s.node_set_mut(node).rotations[i][k] += h);
                        assert_close(&format!("node {node} rotation {i}.{k}"), v, g.rotations[i][k]);
                    }
                    let v = fd(&|s, h| s.node_set_mut(node).opacity_logits[i] += h);
                    assert_close(&format!("node {node} opacity {i}"), v, g.opacity_logits[i]);
                }
                match &g.appearance {
                    AppearanceGrads::Static(c) => {
                        for (j, want) in c.iter().enumerate() {
                            let v = fd(&|s, h| {
                                if let Appearance::Static(sh) = &mut s.node_set_mut(node).appearance {
                                    sh.coeffs[j] += h;
                                }
                            });
                            assert_close(&format!("node {node} sh {j}"), v, *want);
                        }
                    }
                    AppearanceGrads::Wavelet {
                        weights,
                        log_scales,
                        translations,
                    } => {
                        for j in 0..weights.len() {
                            let v = fd(&|s, h| bank_mut(s, node).weights[j] += h);
                            assert_close(&format!("wavelet w {j}"), v, weights[j]);
                            let v = fd(&|s, h| bank_mut(s, node).log_scales[j] += h);
                            assert_close(&format!("wavelet a {j}"), v, log_scales[j]);
                            let v = fd(&|s, h| bank_mut(s, node).translations[j] += h);
                            assert_close(&format!("wavelet b {j}"), v, translations[j]);
                        }
                    }
                }
            }
            let gd = ana.pose_deltas[0].as_ref().unwrap();
            for (si, row) in gd.iter().enumerate() {
                for k in 0..6 {
                    let v = fd(&|s, h| s.objects[0].pose_deltas.as_mut().unwrap()[si][k] += h);
                    assert_close(&format!("pose delta {si}.{k}"), v, row[k]);
                }
            }
        }
    }

    #[test]
    fn zero_output_gradients_give_zero_parameter_gradients() {
        let scene = scene(4);
        let settings = RenderSettings::default();
        let r = render(&scene, TimeStamp(0.5), &Pose::identity(), &cam(), &settings).unwrap();
        let g = render_backward(&scene, &r, &cam(), &settings, &RenderGrads::zeros(cam().pixel_count()));
        assert_eq!(g.background.max_abs(), 0.0);
        assert_eq!(g.objects[0].max_abs(), 0.0);
        assert!(g.pose_deltas[0].as_ref().unwrap().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn object_outside_window_is_not_rendered() {
        let scene = scene(5);
        let settings = RenderSettings::default();
        let r = render(&scene, TimeStamp(1.5), &Pose::identity(), &cam(), &settings).unwrap();
        assert!(r.output.per_object_beta.is_empty());
        assert_eq!(r.composed.segments.len(), 1);
    }
}
