//! Synthetic driving scenes with known ground truth: a textured road
//! between two building facades, and box-shaped vehicles whose colors
//! follow a time program.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Conventions, Dataset, FrameRecord, Observation, SceneManifest, MANIFEST_VERSION};
use super::points::unproject_pixels;
use crate::appearance::{rgb_to_dc, Appearance, ShCoefficients, TimeNormalization, TimeStamp};
use crate::error::{Error, Result};
use crate::geom::{BoundingBox3D, CameraModel, Pose};
use crate::image::RgbImage;
use crate::io::ply::PointCloud;
use crate::rasterizer::{RenderOutput, RenderSettings};
use crate::render::render_reference;
use crate::scenegraph::{logit, GaussianSet, ObjectNode, SceneGraph, Trajectory};

/// Minimum accumulated opacity for a simulated LiDAR return.
pub const LIDAR_MIN_ACCUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColorProgram {
    Constant { rgb: [f64; 3] },
    /// Hue moves linearly from `hue_start` to `hue_end` (turns) over `[0, 1]`.
    HueRamp {
        hue_start: f64,
        hue_end: f64,
        saturation: f64,
        value: f64,
    },
}

impl ColorProgram {
    pub fn at(&self, t: TimeStamp) -> [f64; 3] {
        match *self {
            ColorProgram::Constant { rgb } => rgb,
            ColorProgram::HueRamp {
                hue_start,
                hue_end,
                saturation,
                value,
            } => hsv_to_rgb(hue_start + (hue_end - hue_start) * t.0, saturation, value),
        }
    }
}

pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, r) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, r, p],
        1 => [q, v, p],
        2 => [p, v, r],
        3 => [p, q, v],
        4 => [r, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthObject {
    pub track_id: u32,
    pub class: String,
    /// Length, width, height.
    pub size: [f64; 3],
    /// Ground-plane position of the box center at the first frame.
    pub start: [f64; 2],
    /// m/s in the ground plane; the box heading follows it.
    pub velocity: [f64; 2],
    pub color: ColorProgram,
    /// First and last frame the object is annotated in (inclusive).
    #[serde(default)]
    pub frames: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub frame_dt: f64,
    pub ego_speed: f64,
    pub camera_height: f64,
    /// Downward camera pitch, radians.
    pub camera_pitch: f64,
    /// LiDAR rays are cast through every `lidar_stride`-th pixel.
    pub lidar_stride: u32,
    /// Spacing of the ground-truth Gaussians on the road and facades.
    pub surface_spacing: f64,
    /// Spacing of the ground-truth Gaussians on vehicles.
    pub object_spacing: f64,
    pub road_half_width: f64,
    pub facade_height: f64,
    pub seed: u64,
    pub objects: Vec<SynthObject>,
}

impl SynthSpec {
    /// 30 frames at 128×128 with one vehicle cycling through hues.
    pub fn fixture() -> Self {
        Self {
            frames: 30,
            width: 128,
            height: 128,
            fx: 72.0,
            frame_dt: 0.1,
            ego_speed: 5.0,
            camera_height: 1.6,
            camera_pitch: 0.08,
            lidar_stride: 2,
            surface_spacing: 0.5,
            object_spacing: 0.2,
            road_half_width: 7.0,
            facade_height: 5.0,
            seed: 7,
            objects: vec![SynthObject {
                track_id: 1,
                class: "Van".into(),
                size: [4.5, 2.0, 1.8],
                start: [8.5, -2.2],
                velocity: [4.0, 0.1],
                color: ColorProgram::HueRamp {
                    hue_start: 0.0,
                    hue_end: 0.7,
                    saturation: 0.75,
                    value: 0.9,
                },
                frames: None,
            }],
        }
    }

    /// A 5-frame, 48×48 variant for quick checks.
    pub fn small() -> Self {
        Self {
            frames: 5,
            width: 48,
            height: 48,
            fx: 28.0,
            surface_spacing: 1.0,
            object_spacing: 0.4,
            ..Self::fixture()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("synthetic scenes need at least two frames"));
        }
        if self.width < 11 || self.height < 11 {
            return Err(Error::invalid("synthetic images must be at least 11×11"));
        }
        let positive = [self.fx, self.frame_dt, self.surface_spacing, self.object_spacing, self.road_half_width, self.facade_height];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.lidar_stride == 0 {
            return Err(Error::invalid("synthetic spec has non-positive sizes"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.track_id) {
                return Err(Error::invalid(format!("duplicate synthetic track {}", o.track_id)));
            }
            BoundingBox3D::new([0.0; 3], o.size, 0.0)?;
            if let Some([a, b]) = o.frames {
                if a > b || b >= self.frames {
                    return Err(Error::invalid(format!("track {} frame range out of bounds", o.track_id)));
                }
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel {
            fx: self.fx,
            fy: self.fx,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
            near: 0.1,
            far: 200.0,
        }
    }

    /// LiDAR-style sensor frame (x forward, y left, z up) to camera frame.
    pub fn camera_from_sensor(&self) -> Pose {
        let axes = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let pitch = Rotation3::from_axis_angle(&Vector3::x_axis(), self.camera_pitch);
        let r = pitch * Rotation3::from_matrix_unchecked(axes);
        Pose::new(UnitQuaternion::from_rotation_matrix(&r), Vector3::zeros())
    }

    pub fn sensor_pose(&self, k: usize) -> Pose {
        Pose::new(
            UnitQuaternion::identity(),
            Vector3::new(self.ego_speed * self.frame_dt * k as f64, 0.0, self.camera_height),
        )
    }

    fn time(&self, k: usize) -> TimeStamp {
        TimeStamp(k as f64 / (self.frames - 1) as f64)
    }

    fn object_box(&self, o: &SynthObject, k: usize) -> BoundingBox3D {
        let s = self.frame_dt * k as f64;
        let yaw = o.velocity[1].atan2(o.velocity[0]);
        BoundingBox3D {
            center: [o.start[0] + o.velocity[0] * s, o.start[1] + o.velocity[1] * s, o.size[2] / 2.0],
            size: o.size,
            yaw,
        }
    }

    fn object_frames(&self, o: &SynthObject) -> std::ops::RangeInclusive<usize> {
        let [a, b] = o.frames.unwrap_or([0, self.frames - 1]);
        a..=b
    }
}

fn flat_gaussian(set: &mut GaussianSet, mean: Vector3<f64>, scale: Vector3<f64>, opacity: f64) {
    set.means.push(mean);
    set.log_scales.push(scale.map(f64::ln));
    set.rotations.push([1.0, 0.0, 0.0, 0.0]);
    set.opacity_logits.push(logit(opacity));
}

fn with_colors(mut set: GaussianSet, colors: &[[f64; 3]]) -> GaussianSet {
    let mut sh = ShCoefficients::zeros(0, colors.len());
    for (i, c) in colors.iter().enumerate() {
        sh.row_mut(i).copy_from_slice(&rgb_to_dc(*c));
    }
    set.appearance = Appearance::Static(sh);
    set
}

/// Ground-truth scene whose object colors depend on time.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub background: GaussianSet,
    /// Object-frame Gaussians, per-Gaussian shade, program and track.
    pub objects: Vec<(ObjectNode, Vec<f64>, ColorProgram)>,
    pub time: TimeNormalization,
}

impl GroundTruth {
    /// Scene graph with static colors frozen at `t`.
    pub fn scene_at(&self, t: TimeStamp) -> SceneGraph {
        let mut scene = SceneGraph::new(self.background.clone(), self.time);
        for (node, shade, program) in &self.objects {
            let base = program.at(t);
            let colors: Vec<[f64; 3]> = shade.iter().map(|s| base.map(|c| c * s)).collect();
            let mut n = node.clone();
            n.gaussians = with_colors(n.gaussians, &colors);
            scene.add_object(n).expect("synthetic track ids are unique");
        }
        scene
    }
}

fn build_truth(spec: &SynthSpec) -> Result<GroundTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase: [f64; 4] = [0; 4].map(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let s = spec.surface_spacing;
    let jitter = 0.15 * s;
    let thin = 0.02;
    let x_end = spec.ego_speed * spec.frame_dt * spec.frames as f64 + 45.0;
    let mut bg = GaussianSet::empty(Appearance::Static(ShCoefficients::zeros(0, 0)));
    let mut colors = vec![];

    let nx = ((x_end + 4.0) / s).ceil() as usize;
    let ny = (2.0 * spec.road_half_width / s).ceil() as usize;
    for i in 0..=nx {
        for j in 0..=ny {
            let x = -4.0 + i as f64 * s + rng.gen_range(-jitter..jitter);
            let y = -spec.road_half_width + j as f64 * s + rng.gen_range(-jitter..jitter);
            flat_gaussian(&mut bg, Vector3::new(x, y, 0.0), Vector3::new(0.6 * s, 0.6 * s, thin), 0.97);
            let g = 0.36 + 0.07 * (0.45 * x + phase[0]).sin() * (0.6 * y + phase[1]).cos();
            let lane = (-((y.abs() - 1.2) / 0.35).powi(2)).exp() * 0.25;
            colors.push([g + lane, g + lane, g + 0.02 + lane]);
        }
    }
    let nz = (spec.facade_height / s).ceil() as usize;
    for side in [-1.0, 1.0] {
        for i in 0..=nx {
            for k in 0..=nz {
                let x = -4.0 + i as f64 * s + rng.gen_range(-jitter..jitter);
                let z = k as f64 * s + rng.gen_range(-jitter..jitter).abs();
                let y = side * spec.road_half_width;
                flat_gaussian(&mut bg, Vector3::new(x, y, z), Vector3::new(0.6 * s, thin, 0.6 * s), 0.97);
                let w = 0.5 + 0.5 * (0.8 * x + phase[2] + side).sin() * (1.1 * z + phase[3]).sin();
                let base = if side < 0.0 { [0.62, 0.48, 0.36] } else { [0.45, 0.52, 0.6] };
                colors.push(base.map(|c| c * (0.75 + 0.3 * w)));
            }
        }
    }
    let background = with_colors(bg, &colors);

    let mut objects = vec![];
    for o in &spec.objects {
        let h = Vector3::from(o.size) / 2.0;
        let os = spec.object_spacing;
        let mut set = GaussianSet::empty(Appearance::Static(ShCoefficients::zeros(0, 0)));
        let mut shade = vec![];
        // Each face as a grid of thin discs.
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let nu = (2.0 * h[u] / os).ceil() as usize;
            let nv = (2.0 * h[v] / os).ceil() as usize;
            for sign in [-1.0, 1.0] {
                for a in 0..nu {
                    for b in 0..nv {
                        let mut p = Vector3::zeros();
                        p[axis] = sign * h[axis];
                        p[u] = -h[u] + (a as f64 + 0.5) * 2.0 * h[u] / nu as f64;
                        p[v] = -h[v] + (b as f64 + 0.5) * 2.0 * h[v] / nv as f64;
                        let mut sc = Vector3::repeat(0.6 * os);
                        sc[axis] = thin;
                        flat_gaussian(&mut set, p, sc, 0.98);
                        // Darker glass band on the upper part of the sides.
                        let glass = p.z > 0.15 * o.size[2] && axis != 2;
                        shade.push(if glass { 0.5 } else { 1.0 });
                    }
                }
            }
        }
        let samples = spec
            .object_frames(o)
            .map(|k| (spec.time(k), spec.object_box(o, k).pose()))
            .collect();
        let bbox = BoundingBox3D::new([0.0; 3], o.size, 0.0)?;
        let node = ObjectNode::new(o.track_id, o.class.clone(), bbox, set, Trajectory::new(samples)?);
        objects.push((node, shade, o.color.clone()));
    }
    Ok(GroundTruth {
        background,
        objects,
        time: TimeNormalization {
            t_first: 0.0,
            t_last: spec.frame_dt * (spec.frames - 1) as f64,
        },
    })
}

/// Everything a synthetic run produces, in memory.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: SceneManifest,
    pub images: Vec<RgbImage>,
    /// Sensor-frame LiDAR returns per frame.
    pub clouds: Vec<PointCloud>,
    /// Reference renders the images and clouds were taken from.
    pub renders: Vec<RenderOutput>,
    pub truth: GroundTruth,
}

/// Renders every frame of `spec` with the reference rasterizer and casts
/// LiDAR rays through a pixel grid, returning the rendered depth where the
/// ray is (almost) fully occluded.
pub fn synth_scene_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let truth = build_truth(spec)?;
    let cam = spec.camera();
    let c_from_s = spec.camera_from_sensor();
    let settings = RenderSettings::oracle();
    let frames: Vec<(RenderOutput, PointCloud)> = (0..spec.frames)
        .into_par_iter()
        .map(|k| {
            let t = spec.time(k);
            let c2w = spec.sensor_pose(k).compose(&c_from_s.inverse());
            let out = render_reference(&truth.scene_at(t), t, &c2w, &cam, &settings)?;
            let mut hits = vec![];
            for y in (0..cam.height).step_by(spec.lidar_stride as usize) {
                for x in (0..cam.width).step_by(spec.lidar_stride as usize) {
                    let g = y as usize * cam.width as usize + x as usize;
                    if out.accum[g] >= LIDAR_MIN_ACCUM {
                        hits.push((x, y, out.depth[g]));
                    }
                }
            }
            let s_from_c = c_from_s.inverse();
            let positions = unproject_pixels(&cam, &hits).iter().map(|p| s_from_c.transform_point(p)).collect();
            Ok((out, PointCloud::new(positions, None)?))
        })
        .collect::<Result<_>>()?;

    let mut frame_records = vec![];
    for k in 0..spec.frames {
        let observations = spec
            .objects
            .iter()
            .filter(|o| spec.object_frames(o).contains(&k))
            .map(|o| Observation {
                track_id: o.track_id,
                class: o.class.clone(),
                bbox: spec.object_box(o, k),
            })
            .collect();
        frame_records.push(FrameRecord {
            index: k,
            timestamp: spec.frame_dt * k as f64,
            sensor_pose: spec.sensor_pose(k),
            image: format!("images/{k:06}.png"),
            cloud: Some(format!("clouds/{k:06}.ply")),
            depth: None,
            observations,
        });
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        camera: cam,
        camera_from_sensor: c_from_s,
        conventions: Conventions::default(),
        motion_plane_normal: [0.0, 0.0, 1.0],
        frames: frame_records,
    };
    manifest.validate()?;
    let (renders, clouds): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
    let images = renders
        .iter()
        .map(|r| RgbImage::new(cam.width, cam.height, r.color.clone()))
        .collect::<Result<_>>()?;
    Ok(SynthOutput {
        manifest,
        images,
        clouds,
        renders,
        truth,
    })
}

/// Writes the manifest, PNG images, PLY clouds and the spec to `dir`.
pub fn write_synth(dir: &Path, spec: &SynthSpec) -> Result<Dataset> {
    let out = synth_scene_generate(spec)?;
    for (k, f) in out.manifest.frames.iter().enumerate() {
        crate::io::png::write_png(&dir.join(&f.image), &out.images[k])?;
        if let Some(c) = &f.cloud {
            crate::io::ply::write_ply(&dir.join(c), &out.clouds[k])?;
        }
    }
    let spec_json = serde_json::to_string_pretty(spec).expect("spec serializes");
    crate::io::atomic_write(&dir.join("synth_spec.json"), spec_json.as_bytes())?;
    let ds = Dataset::new(out.manifest, dir)?;
    ds.save(&dir.join("manifest.json"))?;
    Ok(ds)
}
