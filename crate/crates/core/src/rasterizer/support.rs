use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::geom::{project_point, BoundingBox3D, CameraModel, Pose};

/// Pixel sets over which each object's occupancy β is averaged. Objects
/// without a mask fall back to the pixels they contributed to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BetaSupport {
    masks: BTreeMap<u32, Vec<bool>>,
}

impl BetaSupport {
    pub fn insert(&mut self, node: u32, mask: Vec<bool>) {
        self.masks.insert(node, mask);
    }

    pub fn mask(&self, node: u32) -> Option<&[bool]> {
        self.masks.get(&node).map(Vec::as_slice)
    }

    pub fn masks(&self) -> impl Iterator<Item = (&u32, &Vec<bool>)> {
        self.masks.iter()
    }
}

/// Pixels whose centers fall inside the convex hull of the projected box
/// corners. Corners at or behind the near plane are dropped; fewer than
/// three remaining corners yield an empty mask.
pub fn box_hull_mask(
    bbox: &BoundingBox3D,
    object_to_world: &Pose,
    view: &Pose,
    cam: &CameraModel,
) -> Vec<bool> {
    let to_cam = view.compose(object_to_world).compose(&bbox.pose());
    let pts: Vec<Vector2<f64>> = bbox
        .local_corners()
        .iter()
        .filter_map(|c| project_point(&to_cam.transform_point(c), cam).map(|(p, _)| p))
        .collect();
    let mut mask = vec![false; cam.pixel_count()];
    let hull = convex_hull(pts);
    if hull.len() < 3 {
        return mask;
    }
    let (mut lo, mut hi) = (hull[0], hull[0]);
    for p in &hull {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let x0 = lo.x.floor().max(0.0) as i64;
    let y0 = lo.y.floor().max(0.0) as i64;
    let x1 = (hi.x.ceil() as i64).min(cam.width as i64 - 1);
    let y1 = (hi.y.ceil() as i64).min(cam.height as i64 - 1);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            if inside_convex(&hull, &p) {
                mask[py as usize * cam.width as usize + px as usize] = true;
            }
        }
    }
    mask
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise hull (monotone chain).
fn convex_hull(mut pts: Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_convex(hull: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
    (0..hull.len()).all(|i| cross(&hull[i], &hull[(i + 1) % hull.len()], p) >= 0.0)
}
