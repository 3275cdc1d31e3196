use super::{BetaSupport, RenderOutput, RenderSettings, Splat2D};
use crate::geom::CameraModel;
use crate::scenegraph::BACKGROUND_NODE;

/// Brute-force renderer: one global front-to-back order, every splat
/// evaluated at every pixel, no cutoffs and no tiling.
pub fn rasterize_reference(
    splats: &[Splat2D],
    cam: &CameraModel,
    settings: &RenderSettings,
    support: &BetaSupport,
) -> RenderOutput {
    let mut sorted: Vec<&Splat2D> = splats.iter().collect();
    sorted.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then_with(|| a.source.cmp(&b.source))
    });
    let mut objects: Vec<u32> = sorted
        .iter()
        .map(|s| s.node_id)
        .filter(|&n| n != BACKGROUND_NODE)
        .collect();
    objects.sort_unstable();
    objects.dedup();

    let mut out = RenderOutput::blank(cam.width, cam.height, settings.background);
    let mut object_alpha = vec![vec![0.0; cam.pixel_count()]; objects.len()];
    let bg = settings.background;
    for py in 0..cam.height {
        for px in 0..cam.width {
            let g = py as usize * cam.width as usize + px as usize;
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut dn = 0.0;
            for s in &sorted {
                let a = s.alpha * s.falloff(x, y);
                let w = a * t;
                c[0] += s.color[0] * w;
                c[1] += s.color[1] * w;
                c[2] += s.color[2] * w;
                dn += s.depth * w;
                if let Ok(k) = objects.binary_search(&s.node_id) {
                    object_alpha[k][g] += w;
                }
                t *= 1.0 - a;
            }
            let acc = 1.0 - t;
            out.color[3 * g] = c[0] + bg[0] * t;
            out.color[3 * g + 1] = c[1] + bg[1] * t;
            out.color[3 * g + 2] = c[2] + bg[2] * t;
            out.accum[g] = acc;
            out.depth[g] = if acc > 0.0 { dn / acc } else { 0.0 };
        }
    }
    out.object_alpha = objects.into_iter().zip(object_alpha).collect();
    out.finish_beta(support);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::rasterize_forward;
    use crate::rasterizer::test_support::{camera, random_splats};

    #[test]
    fn matches_tile_renderer_without_cutoffs() {
        let cam = camera(40);
        for seed in 0..5 {
            let splats = random_splats(seed, 120, 40, false);
            let settings = RenderSettings::oracle();
            let a = rasterize_forward(&splats, &cam, &settings, &BetaSupport::default());
            let b = rasterize_reference(&splats, &cam, &settings, &BetaSupport::default());
            assert_eq!(a.color, b.color);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.accum, b.accum);
            assert_eq!(a.per_object_beta, b.per_object_beta);
        }
    }

    /// Dropping a layer of opacity a moves a blend by at most a, and
    /// truncating at transmittance T moves it by at most T, so per pixel
    /// |tile − reference| ≤ Σ skipped α·G + T at the early-out.
    #[test]
    fn cutoff_error_within_skipped_mass() {
        let cam = camera(40);
        let settings = RenderSettings::default();
        for seed in 0..5 {
            let splats = random_splats(seed, 200, 40, true);
            let a = rasterize_forward(&splats, &cam, &settings, &BetaSupport::default());
            let b = rasterize_reference(&splats, &cam, &settings, &BetaSupport::default());
            let order = crate::rasterizer::depth_order(&splats);
            for py in 0..40u32 {
                for px in 0..40u32 {
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    let mut bound = 0.0;
                    let mut t = 1.0;
                    for &i in &order {
                        let al = splats[i].alpha * splats[i].falloff(x, y);
                        if al < crate::rasterizer::ALPHA_SKIP {
                            bound += al;
                            continue;
                        }
                        if t * (1.0 - al) < crate::rasterizer::TRANSMITTANCE_EARLY_OUT {
                            bound += t;
                            break;
                        }
                        t *= 1.0 - al;
                    }
                    let (pa, pb) = (a.pixel(px, py), b.pixel(px, py));
                    for c in 0..3 {
                        assert!((pa[c] - pb[c]).abs() <= bound + 1e-12, "seed {seed} ({px},{py})");
                    }
                }
            }
        }
    }
}
