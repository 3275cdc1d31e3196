use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{RenderSettings, Splat2D, SplatGrad, FRUSTUM_GUARD};
use crate::appearance::{
    ricker_with_grad, sh_basis_into, sh_basis_len, sh_basis_vjp, sh_raw_color, Appearance,
    COLOR_OFFSET,
};
use crate::geom::{project_covariance, quat_to_matrix, quat_to_matrix_backward, CameraModel, Pose};
use crate::scenegraph::{sigmoid, ComposedScene, GaussianSet, SceneGraph, BACKGROUND_NODE};

/// Splats plus what the backward pass needs to map them back.
#[derive(Clone, Debug)]
pub struct Projection {
    pub splats: Vec<Splat2D>,
    pub(crate) records: Vec<ProjRecord>,
    /// World-to-camera.
    pub view: Pose,
}

#[derive(Clone, Debug)]
pub(crate) struct ProjRecord {
    pub segment: usize,
    pub local: usize,
    pub p_cam: Vector3<f64>,
    pub raw_color: [f64; 3],
}

/// Projects every Gaussian of `composed` seen from `view` (world-to-camera).
/// Gaussians at or behind the near plane, beyond the far plane, centered
/// outside the guard band, or whose screen extent misses the image are
/// dropped.
pub fn cull_and_project(
    composed: &ComposedScene,
    view: &Pose,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Projection {
    let center = view.inverse().translation;
    let w_rot = view.rotation_matrix();
    let mut index = Vec::with_capacity(composed.len());
    for (si, seg) in composed.segments.iter().enumerate() {
        for li in 0..seg.set.len() {
            index.push((si, li));
        }
    }
    let projected: Vec<Option<(Splat2D, ProjRecord)>> = index
        .par_iter()
        .enumerate()
        .map(|(source, &(si, li))| {
            let seg = &composed.segments[si];
            let set = &seg.set;
            let mu = set.means[li];
            let p_cam = view.transform_point(&mu);
            if !(p_cam.z > cam.near) || p_cam.z > cam.far {
                return None;
            }
            let (u, v) = (
                cam.fx * p_cam.x / p_cam.z + cam.cx,
                cam.fy * p_cam.y / p_cam.z + cam.cy,
            );
            let (hw, hh) = (0.5 * cam.width as f64, 0.5 * cam.height as f64);
            if (u - hw).abs() > FRUSTUM_GUARD * hw || (v - hh).abs() > FRUSTUM_GUARD * hh {
                return None;
            }
            let t = cam.jacobian(&p_cam) * w_rot;
            let cov2d = project_covariance(&t, &set.covariance(li), settings.dilation);
            let dir_world = (mu - center).normalize();
            let dir = seg.pose.rotation.inverse() * dir_world;
            let degree = set.appearance.degree();
            let k = sh_basis_len(degree);
            let mut basis = [0.0; 16];
            sh_basis_into(&dir, degree, &mut basis);
            let mut coeffs = [0.0; 48];
            set.appearance
                .coefficients_at(li, seg.appearance_time, &mut coeffs[..3 * k]);
            let raw = sh_raw_color(&coeffs[..3 * k], &basis[..k]);
            let color = raw.map(|c| (c + COLOR_OFFSET).clamp(0.0, 1.0));
            let alpha = sigmoid(set.opacity_logits[li]);
            let splat = Splat2D::new(
                Vector2::new(u, v),
                cov2d,
                p_cam.z,
                color,
                alpha,
                seg.node_id,
                source,
                settings.cutoffs,
            )?;
            if !splat.overlaps(0.0, 0.0, cam.width as f64, cam.height as f64) {
                return None;
            }
            Some((
                splat,
                ProjRecord {
                    segment: si,
                    local: li,
                    p_cam,
                    raw_color: raw,
                },
            ))
        })
        .collect();
    let (splats, records) = projected.into_iter().flatten().unzip();
    Projection {
        splats,
        records,
        view: *view,
    }
}

/// Parameter gradients of one node, in the node's own frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGrads {
    pub means: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub appearance: AppearanceGrads,
    /// `‖∂L/∂mean2d‖` in normalized device coordinates (0 when not projected).
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AppearanceGrads {
    Static(Vec<f64>),
    Wavelet {
        weights: Vec<f64>,
        log_scales: Vec<f64>,
        translations: Vec<f64>,
    },
}

impl NodeGrads {
    pub fn zeros_like(set: &GaussianSet) -> Self {
        let n = set.len();
        let appearance = match &set.appearance {
            Appearance::Static(s) => AppearanceGrads::Static(vec![0.0; s.coeffs.len()]),
            Appearance::Wavelet(w) => AppearanceGrads::Wavelet {
                weights: vec![0.0; w.weights.len()],
                log_scales: vec![0.0; w.weights.len()],
                translations: vec![0.0; w.weights.len()],
            },
        };
        Self {
            means: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            appearance,
            mean2d_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn add_assign(&mut self, other: &NodeGrads) {
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += b;
        }
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *a += b;
        }
        for (a, b) in self.mean2d_norm.iter_mut().zip(&other.mean2d_norm) {
            *a += b;
        }
        for (a, b) in self.visible.iter_mut().zip(&other.visible) {
            *a |= b;
        }
        match (&mut self.appearance, &other.appearance) {
            (AppearanceGrads::Static(a), AppearanceGrads::Static(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
            }
            (
                AppearanceGrads::Wavelet {
                    weights,
                    log_scales,
                    translations,
                },
                AppearanceGrads::Wavelet {
                    weights: w2,
                    log_scales: l2,
                    translations: t2,
                },
            ) => {
                weights.iter_mut().zip(w2).for_each(|(x, y)| *x += y);
                log_scales.iter_mut().zip(l2).for_each(|(x, y)| *x += y);
                translations.iter_mut().zip(t2).for_each(|(x, y)| *x += y);
            }
            _ => {}
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        let mut upd = |v: f64| m = m.max(v.abs());
        self.means.iter().flat_map(|v| v.iter()).for_each(|v| upd(*v));
        self.log_scales.iter().flat_map(|v| v.iter()).for_each(|v| upd(*v));
        self.rotations.iter().flatten().for_each(|v| upd(*v));
        self.opacity_logits.iter().for_each(|v| upd(*v));
        match &self.appearance {
            AppearanceGrads::Static(c) => c.iter().for_each(|v| upd(*v)),
            AppearanceGrads::Wavelet {
                weights,
                log_scales,
                translations,
            } => weights
                .iter()
                .chain(log_scales)
                .chain(translations)
                .for_each(|v| upd(*v)),
        }
        m
    }
}

/// Gradient w.r.t. a segment's node-to-world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseGrad {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseGrad {
    fn default() -> Self {
        Self {
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
        }
    }
}

struct Contribution {
    mean: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: [f64; 4],
    opacity: f64,
    coeffs: Vec<f64>,
    pose_r: Matrix3<f64>,
    pose_t: Vector3<f64>,
    mean2d_norm: f64,
}

/// Pulls splat gradients back to node-frame parameters of every segment
/// and to each segment's pose.
pub fn project_backward(
    scene: &SceneGraph,
    composed: &ComposedScene,
    projection: &Projection,
    grads: &[SplatGrad],
    cam: &CameraModel,
) -> (Vec<NodeGrads>, Vec<PoseGrad>) {
    let view = &projection.view;
    let w_rot = view.rotation_matrix();
    let center = view.inverse().translation;
    let contributions: Vec<Contribution> = projection
        .records
        .par_iter()
        .zip(grads.par_iter())
        .zip(projection.splats.par_iter())
        .map(|((rec, g), splat)| {
            splat_backward(scene, composed, rec, splat, g, &w_rot, &center, cam)
        })
        .collect();

    let mut nodes: Vec<NodeGrads> = composed
        .segments
        .iter()
        .map(|s| NodeGrads::zeros_like(&s.set))
        .collect();
    let mut poses = vec![PoseGrad::default(); composed.segments.len()];
    for (rec, c) in projection.records.iter().zip(&contributions) {
        let ng = &mut nodes[rec.segment];
        let i = rec.local;
        ng.means[i] += c.mean;
        ng.log_scales[i] += c.log_scale;
        for k in 0..4 {
            ng.rotations[i][k] += c.rotation[k];
        }
        ng.opacity_logits[i] += c.opacity;
        ng.mean2d_norm[i] += c.mean2d_norm;
        ng.visible[i] = true;
        let seg = &composed.segments[rec.segment];
        match (&mut ng.appearance, &seg.set.appearance) {
            (AppearanceGrads::Static(out), Appearance::Static(sh)) => {
                let s = sh.stride();
                for (o, v) in out[i * s..(i + 1) * s].iter_mut().zip(&c.coeffs) {
                    *o += v;
                }
            }
            (
                AppearanceGrads::Wavelet {
                    weights,
                    log_scales,
                    translations,
                },
                Appearance::Wavelet(bank),
            ) => {
                let t = seg.appearance_time.0;
                let d = bank.dim;
                let base = i * bank.stride();
                for (j, dh) in c.coeffs.iter().enumerate() {
                    if *dh == 0.0 {
                        continue;
                    }
                    for q in 0..d {
                        let o = base + j * d + q;
                        let a = bank.log_scales[o].exp();
                        let (psi, dpsi_da, dpsi_db) = ricker_with_grad(t, a, bank.translations[o]);
                        let w = bank.weights[o];
                        weights[o] += dh * psi;
                        log_scales[o] += dh * w * dpsi_da * a;
                        translations[o] += dh * w * dpsi_db;
                    }
                }
            }
            _ => unreachable!("gradient layout follows the node appearance"),
        }
        poses[rec.segment].rotation += c.pose_r;
        poses[rec.segment].translation += c.pose_t;
    }
    (nodes, poses)
}

#[allow(clippy::too_many_arguments)]
fn splat_backward(
    scene: &SceneGraph,
    composed: &ComposedScene,
    rec: &ProjRecord,
    splat: &Splat2D,
    g: &SplatGrad,
    w_rot: &Matrix3<f64>,
    center: &Vector3<f64>,
    cam: &CameraModel,
) -> Contribution {
    let seg = &composed.segments[rec.segment];
    let set = &seg.set;
    let node = node_set(scene, seg.node_id);
    let i = rec.local;
    let r_pose = seg.pose.rotation_matrix();
    let mu_w = set.means[i];
    let mut d_mu_w = Vector3::zeros();
    let mut d_pose_r = Matrix3::zeros();

    // color
    let degree = set.appearance.degree();
    let k = sh_basis_len(degree);
    let mut draw = [0.0; 3];
    for c in 0..3 {
        let v = rec.raw_color[c] + COLOR_OFFSET;
        if v > 0.0 && v < 1.0 {
            draw[c] = g.color[c];
        }
    }
    let mut coeff_grads = vec![0.0; 3 * k];
    if draw.iter().any(|v| *v != 0.0) {
        let v = mu_w - center;
        let vn = v.norm();
        let u_w = v / vn;
        let dir = r_pose.transpose() * u_w;
        let mut basis = [0.0; 16];
        sh_basis_into(&dir, degree, &mut basis);
        let mut coeffs = [0.0; 48];
        set.appearance
            .coefficients_at(i, seg.appearance_time, &mut coeffs[..3 * k]);
        let mut dbasis = [0.0; 16];
        for kk in 0..k {
            for c in 0..3 {
                coeff_grads[3 * kk + c] = basis[kk] * draw[c];
                dbasis[kk] += coeffs[3 * kk + c] * draw[c];
            }
        }
        let g_dir = sh_basis_vjp(&dir, degree, &dbasis[..k]);
        let g_u = r_pose * g_dir;
        d_pose_r += u_w * g_dir.transpose();
        d_mu_w += (g_u - u_w * g_u.dot(&u_w)) / vn;
    }

    let alpha = splat.alpha;
    let d_logit = g.alpha * alpha * (1.0 - alpha);

    // screen position and depth
    let p = rec.p_cam;
    let iz = 1.0 / p.z;
    let mut dp = Vector3::new(
        g.mean2d[0] * cam.fx * iz,
        g.mean2d[1] * cam.fy * iz,
        g.depth - (g.mean2d[0] * cam.fx * p.x + g.mean2d[1] * cam.fy * p.y) * iz * iz,
    );

    // conic -> 2D covariance -> 3D covariance and Jacobian
    let kc = Matrix2::new(splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2]);
    let gk = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let gs = -(kc * gk * kc);
    let jac = cam.jacobian(&p);
    let t: Matrix2x3<f64> = jac * w_rot;
    let q_node = node.rotations[i];
    let r_node = quat_to_matrix(&q_node);
    let r_w = r_pose * r_node;
    let scale = set.scale(i);
    let s2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let sigma = r_w * s2 * r_w.transpose();
    let d_sigma = t.transpose() * gs * t;
    let d_t = 2.0 * gs * t * sigma;
    let d_j = d_t * w_rot.transpose();
    let fx = cam.fx;
    let fy = cam.fy;
    dp.x += d_j[(0, 2)] * (-fx * iz * iz);
    dp.y += d_j[(1, 2)] * (-fy * iz * iz);
    dp.z += d_j[(0, 0)] * (-fx * iz * iz)
        + d_j[(0, 2)] * (2.0 * fx * p.x * iz * iz * iz)
        + d_j[(1, 1)] * (-fy * iz * iz)
        + d_j[(1, 2)] * (2.0 * fy * p.y * iz * iz * iz);
    d_mu_w += w_rot.transpose() * dp;

    let d_rw = 2.0 * d_sigma * r_w * s2;
    let inner = r_w.transpose() * d_sigma * r_w;
    let d_ls = Vector3::new(
        2.0 * scale.x * scale.x * inner[(0, 0)],
        2.0 * scale.y * scale.y * inner[(1, 1)],
        2.0 * scale.z * scale.z * inner[(2, 2)],
    );
    let d_rnode = r_pose.transpose() * d_rw;
    d_pose_r += d_rw * r_node.transpose();
    let d_q = quat_to_matrix_backward(&q_node, &d_rnode);

    // μ_w = R_p μ_o + t_p
    let mu_o = node.means[i];
    let d_mu_o = r_pose.transpose() * d_mu_w;
    d_pose_r += d_mu_w * mu_o.transpose();

    Contribution {
        mean: d_mu_o,
        log_scale: d_ls,
        rotation: d_q,
        opacity: d_logit,
        coeffs: coeff_grads,
        pose_r: d_pose_r,
        pose_t: d_mu_w,
        mean2d_norm: {
            let gx = g.mean2d[0] * 0.5 * cam.width as f64;
            let gy = g.mean2d[1] * 0.5 * cam.height as f64;
            (gx * gx + gy * gy).sqrt()
        },
    }
}

fn node_set(scene: &SceneGraph, node_id: u32) -> &GaussianSet {
    if node_id == BACKGROUND_NODE {
        &scene.background
    } else {
        &scene.objects[node_id as usize - 1].gaussians
    }
}
