//! Tile-based forward rendering of composed Gaussian sets, a brute-force
//! reference renderer, and the analytic backward pass.

mod backward;
mod forward;
mod project;
mod reference;
mod support;

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

pub use backward::{rasterize_backward, RenderGrads, SplatGrad};
pub use forward::rasterize_forward;
pub use project::{
    cull_and_project, project_backward, AppearanceGrads, NodeGrads, PoseGrad, Projection,
};
pub use reference::rasterize_reference;
pub use support::{box_hull_mask, BetaSupport};

/// Contributions with effective opacity below this are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Gaussians whose projected center lies further than this many image
/// half-widths (or half-heights) from the image center are culled. Close to
/// the camera, off-screen Gaussians otherwise project to huge splats.
pub const FRUSTUM_GUARD: f64 = 1.3;
/// Blending stops once transmittance would fall below this.
pub const TRANSMITTANCE_EARLY_OUT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub tile_size: u32,
    /// px² added to the projected covariance diagonal.
    pub dilation: f64,
    /// Enables the 1/255 skip and transmittance early-out. Disabled, the
    /// renderer runs in "oracle mode" with every splat binned to every tile.
    pub cutoffs: bool,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            dilation: crate::geom::DEFAULT_DILATION,
            cutoffs: true,
            background: [0.0; 3],
        }
    }
}

impl RenderSettings {
    pub fn oracle() -> Self {
        Self {
            cutoffs: false,
            ..Self::default()
        }
    }
}

/// A projected Gaussian ready for blending.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse covariance `(a, b, c)` for `a dx² + 2b dx dy + c dy²`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub node_id: u32,
    /// Index in the composed set; breaks depth ties.
    pub source: usize,
    /// Half widths of the screen-space bounding box used for binning.
    pub extent: Vector2<f64>,
}

impl Splat2D {
    /// Builds a splat from its covariance, deriving the conic and a
    /// binning extent consistent with `settings`.
    pub fn new(
        mean2d: Vector2<f64>,
        cov2d: Matrix2<f64>,
        depth: f64,
        color: [f64; 3],
        alpha: f64,
        node_id: u32,
        source: usize,
        cutoffs: bool,
    ) -> Option<Self> {
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let inv = 1.0 / det;
        let conic = [cov2d[(1, 1)] * inv, -cov2d[(0, 1)] * inv, cov2d[(0, 0)] * inv];
        let k2 = if cutoffs {
            // Outside this ellipse alpha·G < 1/255 and would be skipped anyway.
            let r = 2.0 * (alpha / ALPHA_SKIP).ln();
            if !(r > 0.0) {
                return None;
            }
            r
        } else {
            9.0
        };
        let extent = Vector2::new((k2 * cov2d[(0, 0)]).sqrt(), (k2 * cov2d[(1, 1)]).sqrt());
        Some(Self {
            mean2d,
            cov2d,
            conic,
            depth,
            color,
            alpha,
            node_id,
            source,
            extent,
        })
    }

    #[inline(always)]
    pub(crate) fn falloff(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        (-0.5 * q).exp()
    }

    pub(crate) fn overlaps(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        self.mean2d.x + self.extent.x >= x0
            && self.mean2d.x - self.extent.x <= x1
            && self.mean2d.y + self.extent.y >= y0
            && self.mean2d.y - self.extent.y <= y1
    }
}

/// Front-to-back order: depth, then source index.
pub(crate) fn depth_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].source.cmp(&splats[b].source))
    });
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB.
    pub color: Vec<f64>,
    /// Alpha-weighted expected depth; 0 where nothing was accumulated.
    pub depth: Vec<f64>,
    /// `1 − T_final`.
    pub accum: Vec<f64>,
    /// Mean accumulated object opacity over each object's support.
    pub per_object_beta: BTreeMap<u32, f64>,
    /// Pixel count of each object's support.
    pub beta_support_size: BTreeMap<u32, usize>,
    /// Per-pixel accumulated opacity of each object node.
    pub object_alpha: BTreeMap<u32, Vec<f64>>,
}

impl RenderOutput {
    pub(crate) fn blank(width: u32, height: u32, background: [f64; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut color = Vec::with_capacity(n * 3);
        for _ in 0..n {
            color.extend_from_slice(&background);
        }
        Self {
            width,
            height,
            color,
            depth: vec![0.0; n],
            accum: vec![0.0; n],
            per_object_beta: BTreeMap::new(),
            beta_support_size: BTreeMap::new(),
            object_alpha: BTreeMap::new(),
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }

    /// Averages each object's per-pixel opacity over its support.
    pub(crate) fn finish_beta(&mut self, support: &BetaSupport) {
        let n = self.width as usize * self.height as usize;
        for (&node, alpha) in &self.object_alpha {
            let mask = support.mask(node);
            let mut sum = 0.0;
            let mut count = 0usize;
            for p in 0..n {
                let inside = match mask {
                    Some(m) => m[p],
                    None => alpha[p] > 0.0,
                };
                if inside {
                    sum += alpha[p];
                    count += 1;
                }
            }
            if count > 0 {
                self.per_object_beta.insert(node, sum / count as f64);
                self.beta_support_size.insert(node, count);
            }
        }
        // objects with a support mask but no splats still report β = 0
        for (node, mask) in support.masks() {
            if !self.object_alpha.contains_key(node) {
                let count = mask.iter().filter(|&&m| m).count();
                if count > 0 {
                    self.per_object_beta.insert(*node, 0.0);
                    self.beta_support_size.insert(*node, count);
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn camera(size: u32) -> crate::geom::CameraModel {
        crate::geom::CameraModel {
            fx: size as f64,
            fy: size as f64,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
            near: 0.1,
            far: 100.0,
        }
    }

    /// Random splats with moderate sizes and opacities.
    pub fn random_splats(seed: u64, n: usize, size: u32, cutoffs: bool) -> Vec<Splat2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        (0..n)
            .filter_map(|i| {
                let sx: f64 = rng.gen_range(0.7..5.0);
                let sy: f64 = rng.gen_range(0.7..5.0);
                let rho: f64 = rng.gen_range(-0.8..0.8);
                let cov = Matrix2::new(sx * sx, rho * sx * sy, rho * sx * sy, sy * sy);
                Splat2D::new(
                    Vector2::new(rng.gen_range(-4.0..s + 4.0), rng.gen_range(-4.0..s + 4.0)),
                    cov,
                    rng.gen_range(1.0..20.0),
                    [rng.gen(), rng.gen(), rng.gen()],
                    rng.gen_range(0.02..0.99),
                    rng.gen_range(0..3),
                    i,
                    cutoffs,
                )
            })
            .collect()
    }
}
