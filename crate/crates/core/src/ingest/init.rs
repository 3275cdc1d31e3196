use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::Dataset;
use super::points::{accumulate_background_points, densify_object_points, FALLBACK_GRAY};
use crate::appearance::{rgb_to_dc, sh_basis_len, Appearance, ShCoefficients, TimeStamp, WaveletBank};
use crate::error::{Error, Result};
use crate::geom::BoundingBox3D;
use crate::io::ply::PointCloud;
use crate::optim::{ObjectAppearance, TrainConfig};
use crate::scenegraph::{logit, GaussianSet, ObjectNode, SceneGraph, Trajectory};

pub const INITIAL_OPACITY: f64 = 0.1;
/// Scale of a lone point with no neighbours.
pub const ISOLATED_SCALE: f64 = 0.1;
const MIN_SCALE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppearanceInit {
    Static { degree: u8 },
    Wavelet { degree: u8, dim: usize },
}

/// Mean distance from each point to its (up to) three nearest neighbours.
pub fn neighbour_scales(points: &[Vector3<f64>]) -> Vec<f64> {
    if points.len() < 2 {
        return vec![ISOLATED_SCALE; points.len()];
    }
    let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&raw);
    let k = 3.min(points.len() - 1);
    raw.iter()
        .enumerate()
        .map(|(i, q)| {
            let found = tree.nearest_n::<SquaredEuclidean>(q, k + 1);
            // The point itself may tie with duplicates, so drop one hit with
            // its own index when present and otherwise the closest.
            let mut d: Vec<f64> = Vec::with_capacity(k);
            let mut skipped = false;
            for n in &found {
                if !skipped && n.item as usize == i {
                    skipped = true;
                    continue;
                }
                d.push(n.distance.sqrt());
            }
            if !skipped {
                d.remove(0);
            }
            d.truncate(k);
            (d.iter().sum::<f64>() / d.len() as f64).max(MIN_SCALE)
        })
        .collect()
}

/// One isotropic Gaussian per point, sized by its neighbour spacing, with
/// the degree-0 SH set to the point color.
pub fn initialize_node_gaussians(cloud: &PointCloud, init: AppearanceInit) -> Result<GaussianSet> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot initialize Gaussians from an empty cloud"));
    }
    let n = cloud.len();
    let scales = neighbour_scales(&cloud.positions);
    let colors: Vec<[f64; 3]> = match &cloud.colors {
        Some(c) => c.clone(),
        None => vec![FALLBACK_GRAY; n],
    };
    let stride = match init {
        AppearanceInit::Static { degree } | AppearanceInit::Wavelet { degree, .. } => 3 * sh_basis_len(degree),
    };
    let mut static_coeffs = vec![0.0; n * stride];
    for (i, c) in colors.iter().enumerate() {
        static_coeffs[i * stride..i * stride + 3].copy_from_slice(&rgb_to_dc(*c));
    }
    let appearance = match init {
        AppearanceInit::Static { degree } => Appearance::Static(ShCoefficients {
            degree,
            coeffs: static_coeffs,
        }),
        AppearanceInit::Wavelet { degree, dim } => {
            let mut bank = WaveletBank::new(degree, dim, n)?;
            for i in 0..n {
                bank.fit_static(i, &static_coeffs[i * stride..(i + 1) * stride]);
            }
            Appearance::Wavelet(bank)
        }
    };
    let set = GaussianSet {
        means: cloud.positions.clone(),
        log_scales: scales.iter().map(|s| Vector3::repeat(s.ln())).collect(),
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
        opacity_logits: vec![logit(INITIAL_OPACITY); n],
        appearance,
    };
    set.validate()?;
    Ok(set)
}

/// `count` uniform points inside `bbox` (object frame), gray.
pub fn fallback_cloud(bbox: &BoundingBox3D, count: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let h = bbox.half_extents(0.0);
    let positions: Vec<_> = (0..count.max(1))
        .map(|_| Vector3::new(rng.gen_range(-h.x..=h.x), rng.gen_range(-h.y..=h.y), rng.gen_range(-h.z..=h.z)))
        .collect();
    let colors = vec![FALLBACK_GRAY; positions.len()];
    PointCloud {
        positions,
        colors: Some(colors),
    }
}

/// Initial scene graph from a dataset: background from the accumulated
/// cloud, one node per track from its densified in-box points.
pub fn build_scene(ds: &Dataset, cfg: &TrainConfig) -> Result<SceneGraph> {
    let m = &ds.manifest;
    let bg_cloud = accumulate_background_points(ds, cfg.box_margin, cfg.background_voxel);
    log::info!("background: {} points after downsampling", bg_cloud.len());
    let background = if bg_cloud.is_empty() {
        log::warn!("no background points; the background node starts empty");
        GaussianSet::empty(Appearance::Static(ShCoefficients::zeros(cfg.sh_degree, 0)))
    } else {
        initialize_node_gaussians(&bg_cloud, AppearanceInit::Static { degree: cfg.sh_degree })?
    };
    let mut scene = SceneGraph::new(background, m.time_normalization());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0b1e);
    let object_init = match cfg.object_appearance {
        ObjectAppearance::Wavelet => AppearanceInit::Wavelet {
            degree: cfg.object_sh_degree,
            dim: cfg.wavelet_dim,
        },
        ObjectAppearance::Static => AppearanceInit::Static {
            degree: cfg.object_sh_degree,
        },
    };
    for track in m.track_ids() {
        let mut samples: Vec<(TimeStamp, crate::geom::Pose)> = vec![];
        let mut size = [0.0f64; 3];
        let mut class = String::new();
        for (k, f) in m.frames.iter().enumerate() {
            if let Some(o) = f.observations.iter().find(|o| o.track_id == track) {
                samples.push((m.frame_time(k), o.bbox.pose()));
                for a in 0..3 {
                    size[a] = size[a].max(o.bbox.size[a]);
                }
                class = o.class.clone();
            }
        }
        let bbox = BoundingBox3D::new([0.0; 3], size, 0.0)?;
        let mut cloud = densify_object_points(ds, track, cfg.box_margin, Some(cfg.object_voxel))?;
        if cloud.is_empty() {
            log::warn!("track {track}: no in-box points, seeding {} random points", cfg.empty_object_points);
            cloud = fallback_cloud(&bbox, cfg.empty_object_points, &mut rng);
        }
        log::info!("track {track}: {} points", cloud.len());
        let set = initialize_node_gaussians(&cloud, object_init)?;
        scene.add_object(ObjectNode::new(track, class, bbox, set, Trajectory::new(samples)?))?;
    }
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::eval_color;

    #[test]
    fn colinear_points_scale_by_spacing() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        let s = neighbour_scales(&pts);
        // The middle point sees two neighbours at 1 m; the ends at 1 and 2 m.
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!((s[0] - 1.5).abs() < 1e-12);
        assert!((s[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn grid_points_get_their_spacing() {
        let mut pts = vec![];
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Vector3::new(i as f64 * 0.5, j as f64 * 0.5, 0.0));
            }
        }
        let s = neighbour_scales(&pts);
        assert!((s[5 * 10 + 5] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gray_points_get_zero_dc() {
        let cloud = PointCloud::new(vec![Vector3::zeros(), Vector3::x()], Some(vec![[0.5; 3]; 2])).unwrap();
        let set = initialize_node_gaussians(&cloud, AppearanceInit::Static { degree: 1 }).unwrap();
        assert_eq!(set.len(), 2);
        let Appearance::Static(sh) = &set.appearance else { panic!() };
        assert!(sh.coeffs.iter().all(|c| *c == 0.0));
        assert!((crate::scenegraph::sigmoid(set.opacity_logits[0]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn initial_colors_match_points() {
        let cloud = PointCloud::new(vec![Vector3::zeros(), Vector3::x()], Some(vec![[0.2, 0.6, 0.9], [0.8, 0.1, 0.4]])).unwrap();
        for init in [AppearanceInit::Static { degree: 3 }, AppearanceInit::Wavelet { degree: 1, dim: 7 }] {
            let set = initialize_node_gaussians(&cloud, init).unwrap();
            for t in [0.0, 0.5, 1.0] {
                let c = eval_color(&set.appearance, 1, &Vector3::z(), TimeStamp(t)).unwrap();
                // Ricker wavelets integrate to zero, so a constant is only approximated.
                let tol = if matches!(init, AppearanceInit::Static { .. }) { 1e-12 } else { 0.08 };
                for k in 0..3 {
                    assert!((c[k] - [0.8, 0.1, 0.4][k]).abs() < tol, "{init:?} t={t} {c:?}");
                }
            }
        }
    }

    #[test]
    fn empty_cloud_is_rejected_and_fallback_fills_box() {
        let empty = PointCloud::default();
        assert!(initialize_node_gaussians(&empty, AppearanceInit::Static { degree: 0 }).is_err());
        let b = BoundingBox3D::new([0.0; 3], [4.0, 2.0, 1.0], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = fallback_cloud(&b, 50, &mut rng);
        assert_eq!(c.len(), 50);
        assert!(c.positions.iter().all(|p| b.contains_local(p, 0.0)));
    }
}
