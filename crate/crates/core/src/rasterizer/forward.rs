use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{
    depth_order, BetaSupport, RenderOutput, RenderSettings, Splat2D, ALPHA_SKIP,
    TRANSMITTANCE_EARLY_OUT,
};
use crate::geom::CameraModel;
use crate::scenegraph::BACKGROUND_NODE;

pub(crate) struct TileGrid {
    pub tile: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
}

impl TileGrid {
    pub fn new(cam: &CameraModel, tile: u32) -> Self {
        let tile = tile.max(1);
        Self {
            tile,
            tiles_x: cam.width.div_ceil(tile),
            tiles_y: cam.height.div_ceil(tile),
        }
    }

    pub fn count(&self) -> usize {
        (self.tiles_x * self.tiles_y) as usize
    }

    /// Pixel bounds `[x0, x1) × [y0, y1)` of tile `i`.
    pub fn bounds(&self, i: usize, cam: &CameraModel) -> (u32, u32, u32, u32) {
        let tx = i as u32 % self.tiles_x;
        let ty = i as u32 / self.tiles_x;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (
            x0,
            (x0 + self.tile).min(cam.width),
            y0,
            (y0 + self.tile).min(cam.height),
        )
    }
}

/// Per-tile lists of splat indices in front-to-back order.
pub(crate) fn bin_splats(
    splats: &[Splat2D],
    cam: &CameraModel,
    settings: &RenderSettings,
) -> (TileGrid, Vec<Vec<u32>>) {
    let grid = TileGrid::new(cam, settings.tile_size);
    let order = depth_order(splats);
    let mut bins = vec![Vec::new(); grid.count()];
    if !settings.cutoffs {
        let all: Vec<u32> = order.iter().map(|&i| i as u32).collect();
        bins.iter_mut().for_each(|b| *b = all.clone());
        return (grid, bins);
    }
    let t = grid.tile as f64;
    for &i in &order {
        let s = &splats[i];
        let lo_x = ((s.mean2d.x - s.extent.x) / t).floor().max(0.0);
        let hi_x = ((s.mean2d.x + s.extent.x) / t).floor();
        let lo_y = ((s.mean2d.y - s.extent.y) / t).floor().max(0.0);
        let hi_y = ((s.mean2d.y + s.extent.y) / t).floor();
        if hi_x < 0.0 || hi_y < 0.0 || !lo_x.is_finite() || !hi_x.is_finite() {
            continue;
        }
        let hi_x = hi_x.min(grid.tiles_x as f64 - 1.0);
        let hi_y = hi_y.min(grid.tiles_y as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        for ty in lo_y as u32..=hi_y as u32 {
            for tx in lo_x as u32..=hi_x as u32 {
                bins[(ty * grid.tiles_x + tx) as usize].push(i as u32);
            }
        }
    }
    (grid, bins)
}

/// Dense index of object node ids appearing in `splats`.
pub(crate) fn object_slots(splats: &[Splat2D]) -> (Vec<u32>, BTreeMap<u32, usize>) {
    let mut ids: Vec<u32> = splats
        .iter()
        .map(|s| s.node_id)
        .filter(|&n| n != BACKGROUND_NODE)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let slot = ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    (ids, slot)
}

struct TilePixels {
    color: Vec<f64>,
    depth: Vec<f64>,
    accum: Vec<f64>,
    objects: Vec<f64>,
}

/// Tile renderer: per tile, per pixel front-to-back alpha blending.
pub fn rasterize_forward(
    splats: &[Splat2D],
    cam: &CameraModel,
    settings: &RenderSettings,
    support: &BetaSupport,
) -> RenderOutput {
    let mut out = RenderOutput::blank(cam.width, cam.height, settings.background);
    let (grid, bins) = bin_splats(splats, cam, settings);
    let (ids, slot) = object_slots(splats);
    let slot_of: Vec<usize> = splats
        .iter()
        .map(|s| slot.get(&s.node_id).copied().unwrap_or(usize::MAX))
        .collect();
    let n_obj = ids.len();
    let bg = settings.background;

    let tiles: Vec<TilePixels> = (0..grid.count())
        .into_par_iter()
        .map(|ti| {
            let (x0, x1, y0, y1) = grid.bounds(ti, cam);
            let np = ((x1 - x0) * (y1 - y0)) as usize;
            let mut tp = TilePixels {
                color: vec![0.0; np * 3],
                depth: vec![0.0; np],
                accum: vec![0.0; np],
                objects: vec![0.0; np * n_obj],
            };
            let list = &bins[ti];
            let mut p = 0;
            for py in y0..y1 {
                for px in x0..x1 {
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    let mut dn = 0.0;
                    let obj = &mut tp.objects[p * n_obj..(p + 1) * n_obj];
                    for &si in list {
                        let s = &splats[si as usize];
                        let a = s.alpha * s.falloff(x, y);
                        if settings.cutoffs {
                            if a < ALPHA_SKIP {
                                continue;
                            }
                            if t * (1.0 - a) < TRANSMITTANCE_EARLY_OUT {
                                break;
                            }
                        }
                        let w = a * t;
                        c[0] += s.color[0] * w;
                        c[1] += s.color[1] * w;
                        c[2] += s.color[2] * w;
                        dn += s.depth * w;
                        let k = slot_of[si as usize];
                        if k != usize::MAX {
                            obj[k] += w;
                        }
                        t *= 1.0 - a;
                    }
                    let acc = 1.0 - t;
                    tp.color[3 * p] = c[0] + bg[0] * t;
                    tp.color[3 * p + 1] = c[1] + bg[1] * t;
                    tp.color[3 * p + 2] = c[2] + bg[2] * t;
                    tp.accum[p] = acc;
                    tp.depth[p] = if acc > 0.0 { dn / acc } else { 0.0 };
                    p += 1;
                }
            }
            tp
        })
        .collect();

    let w = cam.width as usize;
    let mut object_alpha: Vec<Vec<f64>> = vec![vec![0.0; cam.pixel_count()]; n_obj];
    for (ti, tp) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = grid.bounds(ti, cam);
        let mut p = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                let g = py as usize * w + px as usize;
                out.color[3 * g..3 * g + 3].copy_from_slice(&tp.color[3 * p..3 * p + 3]);
                out.depth[g] = tp.depth[p];
                out.accum[g] = tp.accum[p];
                for (k, oa) in object_alpha.iter_mut().enumerate() {
                    oa[g] = tp.objects[p * n_obj + k];
                }
                p += 1;
            }
        }
    }
    out.object_alpha = ids.into_iter().zip(object_alpha).collect();
    out.finish_beta(support);
    out
}
