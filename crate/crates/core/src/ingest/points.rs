use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::manifest::Dataset;
use crate::error::{Error, Result};
use crate::geom::{project_point, CameraModel, Pose};
use crate::image::{DepthMap, RgbImage};
use crate::io::ply::PointCloud;

/// Color used when a point does not project into its frame's image.
pub const FALLBACK_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

/// Averages points (and colors) per cubic voxel of side `voxel`. Output is
/// ordered by voxel key, so it only depends on the input order through
/// floating-point summation order within a voxel.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    if !(voxel > 0.0) {
        return cloud.clone();
    }
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, [f64; 3], usize)> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = [p.x, p.y, p.z].map(|v| (v / voxel).floor() as i64);
        let e = cells.entry(key).or_insert((Vector3::zeros(), [0.0; 3], 0));
        e.0 += p;
        if let Some(c) = &cloud.colors {
            for k in 0..3 {
                e.1[k] += c[i][k];
            }
        }
        e.2 += 1;
    }
    let mut positions = Vec::with_capacity(cells.len());
    let mut colors = cloud.colors.as_ref().map(|_| Vec::with_capacity(cells.len()));
    for (sum, csum, n) in cells.into_values() {
        let n = n as f64;
        positions.push(sum / n);
        if let Some(c) = colors.as_mut() {
            c.push(csum.map(|v| v / n));
        }
    }
    PointCloud { positions, colors }
}

/// Color of the pixel `world` projects to, if it lands inside the image.
pub fn sample_color(world: &Vector3<f64>, camera_to_world: &Pose, cam: &CameraModel, image: &RgbImage) -> Option<[f64; 3]> {
    let p = camera_to_world.inverse().transform_point(world);
    if p.z <= cam.near {
        return None;
    }
    let (px, _) = project_point(&p, cam)?;
    let (x, y) = (px.x.floor(), px.y.floor());
    if x < 0.0 || y < 0.0 || x >= image.width as f64 || y >= image.height as f64 {
        return None;
    }
    Some(image.pixel(x as u32, y as u32))
}

/// Sparse depth from world points: nearest depth per pixel wins.
pub fn lidar_to_depth(world: &[Vector3<f64>], camera_to_world: &Pose, cam: &CameraModel) -> DepthMap {
    let mut out = DepthMap::empty(cam.width, cam.height);
    let view = camera_to_world.inverse();
    for w in world {
        let p = view.transform_point(w);
        if !(p.z > cam.near && p.z < cam.far) {
            continue;
        }
        let Some((px, z)) = project_point(&p, cam) else {
            continue;
        };
        let (x, y) = (px.x.floor(), px.y.floor());
        if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
            continue;
        }
        let g = y as usize * cam.width as usize + x as usize;
        if !out.mask[g] || z < out.depth[g] {
            out.depth[g] = z;
            out.mask[g] = true;
        }
    }
    out
}

/// World-frame points of frame `k` with colors sampled from its image.
/// `None` when the frame has no cloud or it could not be read.
fn frame_points(ds: &Dataset, k: usize) -> Option<(Vec<Vector3<f64>>, Vec<[f64; 3]>)> {
    let f = &ds.manifest.frames[k];
    let cloud = match ds.cloud(k) {
        Ok(Some(c)) => c,
        Ok(None) => return None,
        Err(e) => {
            log::warn!("frame {}: skipping unreadable cloud: {e}", f.index);
            return None;
        }
    };
    let image = ds
        .image(k)
        .map_err(|e| log::warn!("frame {}: no colors, image unreadable: {e}", f.index))
        .ok();
    let c2w = ds.manifest.camera_to_world(k);
    let world: Vec<Vector3<f64>> = cloud.positions.iter().map(|p| f.sensor_pose.transform_point(p)).collect();
    let colors = world
        .iter()
        .map(|w| {
            image
                .as_ref()
                .and_then(|img| sample_color(w, &c2w, &ds.manifest.camera, img))
                .unwrap_or(FALLBACK_GRAY)
        })
        .collect();
    Some((world, colors))
}

/// Frames in canonical order (by frame index), independent of listing order.
fn canonical_frames(ds: &Dataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ds.manifest.frames.len()).collect();
    order.sort_by_key(|&k| ds.manifest.frames[k].index);
    order
}

/// All frames' points in world coordinates, minus those inside any box
/// observed in the same frame (inflated by `margin`), voxel-downsampled.
pub fn accumulate_background_points(ds: &Dataset, margin: f64, voxel: f64) -> PointCloud {
    let per_frame: Vec<_> = canonical_frames(ds)
        .into_par_iter()
        .map(|k| {
            let Some((world, colors)) = frame_points(ds, k) else {
                return (vec![], vec![]);
            };
            let boxes = &ds.manifest.frames[k].observations;
            world
                .into_iter()
                .zip(colors)
                .filter(|(p, _)| !boxes.iter().any(|o| o.bbox.contains(p, margin)))
                .unzip::<_, _, Vec<_>, Vec<_>>()
        })
        .collect();
    let (positions, colors): (Vec<_>, Vec<_>) = per_frame.into_iter().flat_map(|(p, c)| p.into_iter().zip(c)).unzip();
    voxel_downsample(
        &PointCloud {
            positions,
            colors: Some(colors),
        },
        voxel,
    )
}

/// In-box points of every frame observing `track_id`, moved into the
/// object frame and concatenated in frame-index order; downsampled when
/// `voxel` is given.
pub fn densify_object_points(ds: &Dataset, track_id: u32, margin: f64, voxel: Option<f64>) -> Result<PointCloud> {
    if !ds.manifest.track_ids().contains(&track_id) {
        return Err(Error::UnknownTrack(track_id));
    }
    let per_frame: Vec<_> = canonical_frames(ds)
        .into_par_iter()
        .map(|k| {
            let Some(obs) = ds.manifest.frames[k].observations.iter().find(|o| o.track_id == track_id) else {
                return (vec![], vec![]);
            };
            let Some((world, colors)) = frame_points(ds, k) else {
                return (vec![], vec![]);
            };
            let to_object = obs.bbox.pose().inverse();
            world
                .into_iter()
                .zip(colors)
                .map(|(p, c)| (to_object.transform_point(&p), c))
                .filter(|(l, _)| obs.bbox.contains_local(l, margin))
                .unzip::<_, _, Vec<_>, Vec<_>>()
        })
        .collect();
    let (positions, colors): (Vec<_>, Vec<_>) = per_frame.into_iter().flat_map(|(p, c)| p.into_iter().zip(c)).unzip();
    let cloud = PointCloud {
        positions,
        colors: Some(colors),
    };
    Ok(match voxel {
        Some(v) => voxel_downsample(&cloud, v),
        None => cloud,
    })
}

/// Back-projects the pixel centers in `pixels` at the given camera depths.
pub fn unproject_pixels(cam: &CameraModel, pixels: &[(u32, u32, f64)]) -> Vec<Vector3<f64>> {
    pixels
        .iter()
        .map(|&(x, y, z)| cam.unproject(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5), z))
        .collect()
}
