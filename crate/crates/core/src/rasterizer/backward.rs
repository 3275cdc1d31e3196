use std::collections::BTreeMap;

use rayon::prelude::*;

use super::forward::{bin_splats, object_slots};
use super::{
    BetaSupport, RenderOutput, RenderSettings, Splat2D, ALPHA_SKIP, TRANSMITTANCE_EARLY_OUT,
};
use crate::geom::CameraModel;

/// Loss gradients w.r.t. the rendered maps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderGrads {
    /// Row-major RGB, same layout as [`RenderOutput::color`].
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub accum: Vec<f64>,
    /// `∂L/∂β` per object node.
    pub beta: BTreeMap<u32, f64>,
}

impl RenderGrads {
    pub fn zeros(pixels: usize) -> Self {
        Self {
            color: vec![0.0; 3 * pixels],
            depth: vec![0.0; pixels],
            accum: vec![0.0; pixels],
            beta: BTreeMap::new(),
        }
    }
}

/// Gradient w.r.t. one splat's blending inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    /// Same `(a, b, c)` convention as [`Splat2D::conic`].
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.alpha += o.alpha;
        self.depth += o.depth;
    }
}

/// Adjoint of [`super::rasterize_forward`]. Each pixel's blend is
/// recomputed front to back, then walked back to front; per-tile buffers
/// are merged in tile order so the result does not depend on scheduling.
pub fn rasterize_backward(
    splats: &[Splat2D],
    cam: &CameraModel,
    settings: &RenderSettings,
    support: &BetaSupport,
    forward: &RenderOutput,
    grads: &RenderGrads,
) -> Vec<SplatGrad> {
    let (grid, bins) = bin_splats(splats, cam, settings);
    let (ids, slot) = object_slots(splats);
    let slot_of: Vec<usize> = splats
        .iter()
        .map(|s| slot.get(&s.node_id).copied().unwrap_or(usize::MAX))
        .collect();
    let width = cam.width as usize;
    // per object: (∂L/∂β / |support|, mask)
    let beta_seed: Vec<(f64, Option<&[bool]>, Option<&Vec<f64>>)> = ids
        .iter()
        .map(|id| {
            let g = grads.beta.get(id).copied().unwrap_or(0.0);
            let count = forward.beta_support_size.get(id).copied().unwrap_or(0);
            let seed = if count > 0 { g / count as f64 } else { 0.0 };
            (seed, support.mask(*id), forward.object_alpha.get(id))
        })
        .collect();
    let bg = settings.background;

    let tiles: Vec<Vec<SplatGrad>> = (0..grid.count())
        .into_par_iter()
        .map(|ti| {
            let list = &bins[ti];
            let mut local = vec![SplatGrad::default(); list.len()];
            let (x0, x1, y0, y1) = grid.bounds(ti, cam);
            let mut scratch: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(list.len());
            let mut object_seed = vec![0.0; ids.len()];
            for py in y0..y1 {
                for px in x0..x1 {
                    let g = py as usize * width + px as usize;
                    let gc = [grads.color[3 * g], grads.color[3 * g + 1], grads.color[3 * g + 2]];
                    let gd = grads.depth[g];
                    let ga = grads.accum[g];
                    let mut any_object = false;
                    for (k, (seed, mask, alpha)) in beta_seed.iter().enumerate() {
                        let inside = match mask {
                            Some(m) => m[g],
                            None => alpha.is_some_and(|a| a[g] > 0.0),
                        };
                        object_seed[k] = if inside { *seed } else { 0.0 };
                        any_object |= object_seed[k] != 0.0;
                    }
                    if gc == [0.0; 3] && gd == 0.0 && ga == 0.0 && !any_object {
                        continue;
                    }
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    scratch.clear();
                    let mut t = 1.0;
                    for (pos, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let falloff = s.falloff(x, y);
                        let a = s.alpha * falloff;
                        if settings.cutoffs {
                            if a < ALPHA_SKIP {
                                continue;
                            }
                            if t * (1.0 - a) < TRANSMITTANCE_EARLY_OUT {
                                break;
                            }
                        }
                        scratch.push((pos, falloff, a, t));
                        t *= 1.0 - a;
                    }
                    let acc = 1.0 - t;
                    let (gdn, depth_bg) = if acc > 0.0 {
                        (gd / acc, gd * forward.depth[g] / acc)
                    } else {
                        (0.0, 0.0)
                    };
                    // value "behind" the current splat, normalized by its transmittance
                    let mut behind = gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2] - ga + depth_bg;
                    for &(pos, falloff, a, t_before) in scratch.iter().rev() {
                        let s = &splats[list[pos] as usize];
                        let k = slot_of[list[pos] as usize];
                        let go = if k == usize::MAX { 0.0 } else { object_seed[k] };
                        let q = gc[0] * s.color[0]
                            + gc[1] * s.color[1]
                            + gc[2] * s.color[2]
                            + gdn * s.depth
                            + go;
                        let da = t_before * (q - behind);
                        behind = q * a + (1.0 - a) * behind;
                        let w = a * t_before;
                        let lg = &mut local[pos];
                        lg.color[0] += gc[0] * w;
                        lg.color[1] += gc[1] * w;
                        lg.color[2] += gc[2] * w;
                        lg.depth += gdn * w;
                        lg.alpha += falloff * da;
                        let dq = -0.5 * falloff * s.alpha * da;
                        let dx = x - s.mean2d.x;
                        let dy = y - s.mean2d.y;
                        lg.conic[0] += dq * dx * dx;
                        lg.conic[1] += dq * 2.0 * dx * dy;
                        lg.conic[2] += dq * dy * dy;
                        lg.mean2d[0] -= dq * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                        lg.mean2d[1] -= dq * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
                    }
                }
            }
            local
        })
        .collect();

    let mut out = vec![SplatGrad::default(); splats.len()];
    for (ti, local) in tiles.iter().enumerate() {
        for (pos, g) in local.iter().enumerate() {
            out[bins[ti][pos] as usize].add(g);
        }
    }
    out
}
