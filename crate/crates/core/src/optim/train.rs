use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;
use super::density::{density_control, DensityReport, GradStats, NodeRemap};
use super::loss::{total_loss, FrameTarget};
use super::metrics::{psnr, ssim};
use crate::appearance::{Appearance, TimeStamp};
use crate::error::{Error, Result};
use crate::geom::{CameraModel, Pose};
use crate::image::{DepthMap, RgbImage};
use crate::rasterizer::{AppearanceGrads, NodeGrads, RenderSettings};
use crate::render::{render, render_backward};
use crate::scenegraph::{GaussianSet, SceneGraph};

/// One posed, timestamped camera view with its ground truth.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub frame: usize,
    pub time: TimeStamp,
    pub camera_to_world: Pose,
    pub image: RgbImage,
    pub depth: Option<DepthMap>,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub cam: CameraModel,
    pub views: Vec<TrainView>,
}

impl TrainData {
    /// Every frame of a dataset with its image and (stored or projected) depth.
    pub fn from_dataset(ds: &crate::ingest::Dataset) -> Result<Self> {
        let m = &ds.manifest;
        let views = (0..m.frames.len())
            .map(|k| {
                Ok(TrainView {
                    frame: m.frames[k].index,
                    time: m.frame_time(k),
                    camera_to_world: m.camera_to_world(k),
                    image: ds.image(k)?,
                    depth: ds.depth(k)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cam: m.camera, views })
    }
}

/// Train and held-out frame indices for a training fraction.
///
/// 0.75 holds out every fourth frame, 0.5 every second, 0.25 trains on
/// every fourth frame only; 1.0 trains and evaluates on all frames.
pub fn split_frames(n: usize, split: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let held_out = |i: usize| -> Result<bool> {
        Ok(match split {
            s if s == 0.75 => i % 4 == 3,
            s if s == 0.5 => i % 2 == 1,
            s if s == 0.25 => i % 4 != 0,
            s if s == 1.0 => false,
            _ => {
                return Err(Error::Config(format!(
                    "split must be one of 0.25, 0.5, 0.75, 1.0, got {split}"
                )))
            }
        })
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        if held_out(i)? {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    if split == 1.0 {
        test = train.clone();
    }
    Ok((train, test))
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u32,
    /// Means over the iterations since the previous record.
    pub loss: f64,
    pub color_loss: f64,
    pub depth_loss: f64,
    pub accum_loss: f64,
    pub train_psnr: f64,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
    pub gaussians: usize,
    pub skipped_updates: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub enum TrainEvent<'a> {
    Metric(&'a MetricRecord),
    Checkpoint { iteration: u32, scene: &'a SceneGraph },
}

#[derive(Clone, Debug)]
struct NodeState {
    means: AdamState,
    log_scales: AdamState,
    rotations: AdamState,
    opacity: AdamState,
    /// One state for static SH; weights, scales, translations for wavelets.
    appearance: Vec<AdamState>,
    stats: GradStats,
}

fn appearance_width(a: &Appearance) -> (usize, usize) {
    match a {
        Appearance::Static(s) => (1, s.stride()),
        Appearance::Wavelet(w) => (3, w.stride()),
    }
}

impl NodeState {
    fn new(set: &GaussianSet) -> Self {
        let n = set.len();
        let (k, w) = appearance_width(&set.appearance);
        Self {
            means: AdamState::new(3 * n),
            log_scales: AdamState::new(3 * n),
            rotations: AdamState::new(4 * n),
            opacity: AdamState::new(n),
            appearance: (0..k).map(|_| AdamState::new(w * n)).collect(),
            stats: GradStats::new(n),
        }
    }

    fn remap(&mut self, remap: &NodeRemap, set: &GaussianSet) {
        let (_, aw) = appearance_width(&set.appearance);
        let fix = |s: &AdamState, width: usize| {
            let mut out = s.gather(&remap.index, width);
            for (k, f) in remap.fresh.iter().enumerate() {
                if *f {
                    out.m[k * width..(k + 1) * width].fill(0.0);
                    out.v[k * width..(k + 1) * width].fill(0.0);
                }
            }
            out
        };
        self.means = fix(&self.means, 3);
        self.log_scales = fix(&self.log_scales, 3);
        self.rotations = fix(&self.rotations, 4);
        self.opacity = fix(&self.opacity, 1);
        self.appearance = self.appearance.iter().map(|s| fix(s, aw)).collect();
        self.stats = GradStats::new(set.len());
    }
}

fn step_vec3(p: &mut [Vector3<f64>], g: &[Vector3<f64>], st: &mut AdamState, lr: f64, eps: f64) -> usize {
    let mut flat: Vec<f64> = p.iter().flat_map(|v| v.iter().copied()).collect();
    let grads: Vec<f64> = g.iter().flat_map(|v| v.iter().copied()).collect();
    let skipped = adam_step(&mut flat, &grads, st, lr, eps);
    for (v, c) in p.iter_mut().zip(flat.chunks_exact(3)) {
        *v = Vector3::new(c[0], c[1], c[2]);
    }
    skipped
}

/// Radius of the camera centers around their centroid, padded by 10%.
pub fn scene_extent(data: &TrainData) -> f64 {
    if data.views.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = data.views.iter().map(|v| v.camera_to_world.translation).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    (1.1 * r).max(1.0)
}

/// Sums of per-iteration values between two metric records.
#[derive(Clone, Copy, Debug, Default)]
struct Window {
    n: usize,
    loss: f64,
    color: f64,
    depth: f64,
    accum: f64,
    psnr: f64,
    density: DensityReport,
}

/// Loss terms of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub accum: f64,
    pub psnr: f64,
}

/// Stateful optimizer over a scene graph and a set of training views.
pub struct Trainer<'a> {
    pub scene: SceneGraph,
    data: &'a TrainData,
    cfg: TrainConfig,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    nodes: Vec<NodeState>,
    poses: Vec<Option<AdamState>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iteration: u32,
    extent: f64,
    settings: RenderSettings,
    skipped: usize,
    window: Window,
}

impl<'a> Trainer<'a> {
    pub fn new(mut scene: SceneGraph, data: &'a TrainData, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        data.cam.validate()?;
        for v in &data.views {
            if v.image.width != data.cam.width || v.image.height != data.cam.height {
                return Err(Error::shape(format!(
                    "frame {} image is {}×{}, camera is {}×{}",
                    v.frame, v.image.width, v.image.height, data.cam.width, data.cam.height
                )));
            }
        }
        let (train_idx, test_idx) = split_frames(data.views.len(), cfg.split)?;
        if train_idx.is_empty() {
            return Err(Error::invalid("no training frames"));
        }
        if cfg.pose_refinement {
            scene.objects.iter_mut().for_each(|o| o.enable_pose_refinement());
        }
        let nodes = scene.node_sets().map(NodeState::new).collect();
        let poses = scene
            .objects
            .iter()
            .map(|o| o.pose_deltas.as_ref().map(|d| AdamState::new(6 * d.len())))
            .collect();
        let settings = RenderSettings {
            tile_size: cfg.tile_size,
            background: cfg.background,
            ..RenderSettings::default()
        };
        Ok(Self {
            extent: scene_extent(data),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            scene,
            data,
            train_idx,
            test_idx,
            nodes,
            poses,
            order: vec![],
            cursor: 0,
            iteration: 0,
            settings,
            skipped: 0,
            window: Window::default(),
            cfg,
        })
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn test_frames(&self) -> &[usize] {
        &self.test_idx
    }

    pub fn train_frames(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn settings(&self) -> &RenderSettings {
        &self.settings
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = self.train_idx.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let v = self.order[self.cursor];
        self.cursor += 1;
        v
    }

    fn means_lr(&self) -> f64 {
        let s = (self.iteration as f64 / self.cfg.iterations as f64).clamp(0.0, 1.0);
        let lr = (self.cfg.lr.means.ln() * (1.0 - s) + self.cfg.lr.means_final.ln() * s).exp();
        lr * self.extent
    }

    /// Renders one training view, backpropagates and updates every parameter.
    pub fn step(&mut self) -> Result<StepLoss> {
        let vi = self.next_view();
        let view = &self.data.views[vi];
        let cam = &self.data.cam;
        let rendered = render(&self.scene, view.time, &view.camera_to_world, cam, &self.settings)?;
        let target = FrameTarget {
            image: &view.image,
            depth: if self.cfg.loss.lambda_d > 0.0 { view.depth.as_ref() } else { None },
        };
        let loss = total_loss(&rendered.output, &target, &self.cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration as usize,
                detail: format!(
                    "frame {}: color {} depth {} accum {} betas {:?}",
                    view.frame, loss.color, loss.depth, loss.accum, rendered.output.per_object_beta
                ),
            });
        }
        let pred = RgbImage::new(cam.width, cam.height, rendered.output.color.clone())?;
        let step_psnr = psnr(&pred, &view.image)?;
        let grads = render_backward(&self.scene, &rendered, cam, &self.settings, &loss.grads);
        drop(rendered);

        let lr = self.cfg.lr;
        let means_lr = self.means_lr();
        let track = self.cfg.density.enabled && self.iteration < self.cfg.density.stop;
        let mut skipped = 0;
        for node in 0..self.scene.node_count() as u32 {
            let g = grads.node(node);
            let st = &mut self.nodes[node as usize];
            if track {
                st.stats.record(g);
            }
            let set = self.scene.node_set_mut(node);
            skipped += step_node(set, g, st, &lr, means_lr);
        }
        for (k, obj) in self.scene.objects.iter_mut().enumerate() {
            if let (Some(d), Some(g), Some(st)) = (
                obj.pose_deltas.as_mut(),
                grads.pose_deltas[k].as_ref(),
                self.poses[k].as_mut(),
            ) {
                skipped += adam_step(d.as_flattened_mut(), g.as_flattened(), st, lr.pose_deltas, lr.eps);
            }
        }
        self.skipped += skipped;
        self.iteration += 1;

        let dc = &self.cfg.density;
        if dc.enabled
            && self.iteration >= dc.start
            && self.iteration < dc.stop
            && dc.interval > 0
            && self.iteration % dc.interval == 0
        {
            self.densify();
        }

        let out = StepLoss {
            total: loss.total,
            color: loss.color,
            depth: loss.depth,
            accum: loss.accum,
            psnr: step_psnr,
        };
        let w = &mut self.window;
        w.n += 1;
        w.loss += out.total;
        w.color += out.color;
        w.depth += out.depth;
        w.accum += out.accum;
        w.psnr += out.psnr;
        Ok(out)
    }

    fn densify(&mut self) {
        for node in 0..self.scene.node_count() as u32 {
            let st = &mut self.nodes[node as usize];
            let set = self.scene.node_set_mut(node);
            let (remap, report) = density_control(set, &st.stats, &self.cfg.density, self.extent, &mut self.rng);
            st.remap(&remap, set);
            self.window.density.cloned += report.cloned;
            self.window.density.split += report.split;
            self.window.density.pruned += report.pruned;
        }
    }

    /// Mean PSNR and SSIM over the given views.
    pub fn evaluate(&self, views: &[usize]) -> Result<(f64, f64)> {
        evaluate(&self.scene, self.data, views, &self.settings)
    }

    fn record(&mut self) -> Result<MetricRecord> {
        let (test_psnr, test_ssim) = if self.test_idx.is_empty() {
            (None, None)
        } else {
            let (p, s) = self.evaluate(&self.test_idx.clone())?;
            (Some(p), Some(s))
        };
        let w = std::mem::take(&mut self.window);
        let n = w.n.max(1) as f64;
        Ok(MetricRecord {
            iteration: self.iteration,
            loss: w.loss / n,
            color_loss: w.color / n,
            depth_loss: w.depth / n,
            accum_loss: w.accum / n,
            train_psnr: w.psnr / n,
            test_psnr,
            test_ssim,
            gaussians: self.scene.gaussian_count(),
            skipped_updates: std::mem::take(&mut self.skipped),
            cloned: w.density.cloned,
            split: w.density.split,
            pruned: w.density.pruned,
        })
    }

    /// Runs the configured number of iterations, reporting metrics and
    /// checkpoints through `sink`.
    pub fn run(mut self, mut sink: impl FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainOutcome> {
        let mut log = Vec::new();
        while self.iteration < self.cfg.iterations {
            self.step()?;
            let it = self.iteration;
            let last = it == self.cfg.iterations;
            if last || (self.cfg.eval_every > 0 && it % self.cfg.eval_every == 0) {
                let rec = self.record()?;
                log::info!(
                    "iter {it}: loss {:.5} train PSNR {:.2} test PSNR {:?}",
                    rec.loss,
                    rec.train_psnr,
                    rec.test_psnr
                );
                sink(TrainEvent::Metric(&rec))?;
                log.push(rec);
            }
            if last || (self.cfg.checkpoint_every > 0 && it % self.cfg.checkpoint_every == 0) {
                sink(TrainEvent::Checkpoint {
                    iteration: it,
                    scene: &self.scene,
                })?;
            }
        }
        Ok(TrainOutcome {
            scene: self.scene,
            log,
            train_frames: self.train_idx,
            test_frames: self.test_idx,
        })
    }
}

pub struct TrainOutcome {
    pub scene: SceneGraph,
    pub log: Vec<MetricRecord>,
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
}

/// Trains `scene` on `data` with `cfg`.
pub fn train(
    scene: SceneGraph,
    data: &TrainData,
    cfg: TrainConfig,
    sink: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    Trainer::new(scene, data, cfg)?.run(sink)
}

/// Mean PSNR and SSIM of `scene` over the given views.
pub fn evaluate(
    scene: &SceneGraph,
    data: &TrainData,
    views: &[usize],
    settings: &RenderSettings,
) -> Result<(f64, f64)> {
    if views.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for &i in views {
        let v = data.views.get(i).ok_or(Error::UnknownFrame(i))?;
        let r = render(scene, v.time, &v.camera_to_world, &data.cam, settings)?;
        let img = RgbImage::new(data.cam.width, data.cam.height, r.output.color)?;
        p += psnr(&img, &v.image)?;
        s += ssim(&img, &v.image)?;
    }
    Ok((p / views.len() as f64, s / views.len() as f64))
}

fn step_node(
    set: &mut GaussianSet,
    g: &NodeGrads,
    st: &mut NodeState,
    lr: &super::config::LearningRates,
    means_lr: f64,
) -> usize {
    let eps = lr.eps;
    let mut skipped = 0;
    skipped += step_vec3(&mut set.means, &g.means, &mut st.means, means_lr, eps);
    skipped += step_vec3(&mut set.log_scales, &g.log_scales, &mut st.log_scales, lr.scales, eps);
    skipped += adam_step(
        set.rotations.as_flattened_mut(),
        g.rotations.as_flattened(),
        &mut st.rotations,
        lr.rotations,
        eps,
    );
    skipped += adam_step(&mut set.opacity_logits, &g.opacity_logits, &mut st.opacity, lr.opacities, eps);
    match (&mut set.appearance, &g.appearance) {
        (Appearance::Static(sh), AppearanceGrads::Static(gs)) => {
            skipped += adam_step(&mut sh.coeffs, gs, &mut st.appearance[0], lr.sh, eps);
        }
        (
            Appearance::Wavelet(bank),
            AppearanceGrads::Wavelet {
                weights,
                log_scales,
                translations,
            },
        ) => {
            let weps = lr.wavelet_eps;
            let [sw, sa, sb] = &mut st.appearance[..] else {
                unreachable!("wavelet nodes carry three optimizer states")
            };
            skipped += adam_step(&mut bank.weights, weights, sw, lr.wavelet_weights, weps);
            skipped += adam_step(&mut bank.log_scales, log_scales, sa, lr.wavelet_scales, weps);
            skipped += adam_step(&mut bank.translations, translations, sb, lr.wavelet_translations, weps);
        }
        _ => unreachable!("gradient layout follows the node appearance"),
    }
    skipped
}
