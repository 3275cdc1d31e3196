use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::ssim_with_grad;
use crate::error::{Error, Result};
use crate::image::{DepthMap, RgbImage};
use crate::rasterizer::{RenderGrads, RenderOutput};

/// β is clamped to `[ε, 1 − ε]` before the entropy.
pub const BETA_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// SSIM share of the color loss.
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.2,
            lambda_d: 0.05,
            lambda_a: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(Error::Config(format!("lambda_c must lie in [0, 1], got {}", self.lambda_c)));
        }
        if !(self.lambda_d >= 0.0) || !(self.lambda_a >= 0.0) {
            return Err(Error::Config("lambda_d and lambda_a must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference over pixels and channels.
pub fn l1_loss(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    pred.same_shape(gt)?;
    Ok(pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / pred.data.len().max(1) as f64)
}

pub fn ssim_loss(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    Ok(1.0 - super::metrics::ssim(pred, gt)?)
}

/// `(1 − λ_c)·L1 + λ_c·(1 − SSIM)`.
pub fn color_loss(pred: &RgbImage, gt: &RgbImage, lambda_c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_c) {
        return Err(Error::invalid(format!("lambda_c must lie in [0, 1], got {lambda_c}")));
    }
    Ok((1.0 - lambda_c) * l1_loss(pred, gt)? + lambda_c * ssim_loss(pred, gt)?)
}

/// `λ_d` times the mean absolute depth error over the mask.
pub fn depth_loss(pred: &[f64], gt: &DepthMap, lambda_d: f64) -> Result<f64> {
    if pred.len() != gt.depth.len() || gt.mask.len() != gt.depth.len() {
        return Err(Error::shape("depth map sizes differ"));
    }
    let n = gt.valid_count();
    if n == 0 {
        log::warn!("depth loss: empty LiDAR mask, contributing 0");
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(&gt.depth)
        .zip(&gt.mask)
        .filter(|(_, m)| **m)
        .map(|((p, g), _)| (g - p).abs())
        .sum();
    Ok(lambda_d * sum / n as f64)
}

/// Binary entropy of a clamped occupancy.
pub fn occupancy_entropy(beta: f64) -> f64 {
    let b = beta.clamp(BETA_EPS, 1.0 - BETA_EPS);
    -(b * b.ln() + (1.0 - b) * (1.0 - b).ln())
}

/// `λ_a` times the mean entropy over objects; 0 without objects.
pub fn accum_loss(betas: &[f64], lambda_a: f64) -> f64 {
    if betas.is_empty() {
        return 0.0;
    }
    lambda_a * betas.iter().map(|b| occupancy_entropy(*b)).sum::<f64>() / betas.len() as f64
}

/// Ground truth for one training view.
#[derive(Clone, Debug)]
pub struct FrameTarget<'a> {
    pub image: &'a RgbImage,
    pub depth: Option<&'a DepthMap>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub accum: f64,
    /// Seeds for the rasterizer backward pass.
    pub grads: RenderGrads,
}

/// Subgradient of |x| with 0 at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Composite loss on a render and its gradient w.r.t. color, depth and β.
pub fn total_loss(render: &RenderOutput, target: &FrameTarget<'_>, w: &LossWeights) -> Result<LossOutput> {
    w.validate()?;
    let pred = RgbImage::new(render.width, render.height, render.color.clone())?;
    let gt = target.image;
    pred.same_shape(gt)?;
    let n = pred.pixel_count();
    let mut grads = RenderGrads::zeros(n);

    let nc = pred.data.len() as f64;
    let l1 = l1_loss(&pred, gt)?;
    let (s, ds) = ssim_with_grad(&pred, gt)?;
    let color = (1.0 - w.lambda_c) * l1 + w.lambda_c * (1.0 - s);
    for (i, g) in grads.color.iter_mut().enumerate() {
        *g = (1.0 - w.lambda_c) * sign(pred.data[i] - gt.data[i]) / nc - w.lambda_c * ds[i];
    }

    let depth = match target.depth {
        Some(gt_d) => {
            let v = depth_loss(&render.depth, gt_d, w.lambda_d)?;
            let count = gt_d.valid_count();
            if count > 0 {
                for (i, g) in grads.depth.iter_mut().enumerate() {
                    if gt_d.mask[i] {
                        *g = w.lambda_d * sign(render.depth[i] - gt_d.depth[i]) / count as f64;
                    }
                }
            }
            v
        }
        None => 0.0,
    };

    let betas: Vec<f64> = render.per_object_beta.values().copied().collect();
    let accum = accum_loss(&betas, w.lambda_a);
    let mut beta_grads = BTreeMap::new();
    if !betas.is_empty() {
        let k = betas.len() as f64;
        for (id, b) in &render.per_object_beta {
            let g = if *b > BETA_EPS && *b < 1.0 - BETA_EPS {
                w.lambda_a * ((1.0 - b) / b).ln() / k
            } else {
                0.0
            };
            beta_grads.insert(*id, g);
        }
    }
    grads.beta = beta_grads;

    Ok(LossOutput {
        total: color + depth + accum,
        color,
        depth,
        accum,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::metrics::tests::texture;

    #[test]
    fn l1_examples() {
        let a = RgbImage::filled(4, 3, [0.2; 3]);
        let b = RgbImage::filled(4, 3, [0.5; 3]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!((l1_loss(&a, &b).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(l1_loss(&a, &b).unwrap(), l1_loss(&b, &a).unwrap());
        assert!(l1_loss(&a, &RgbImage::filled(3, 3, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_loss_examples() {
        let gt = texture(24, 20);
        assert!(ssim_loss(&gt, &gt).unwrap().abs() < 1e-12);
        let mut inv = gt.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let l = ssim_loss(&inv, &gt).unwrap();
        assert!(l > 1.0 && l <= 2.0);
    }

    #[test]
    fn color_loss_mixes() {
        let gt = texture(16, 16);
        let mut pred = gt.clone();
        pred.data.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 7) as f64 - 3.0));
        let l1 = l1_loss(&pred, &gt).unwrap();
        let s = ssim_loss(&pred, &gt).unwrap();
        assert_eq!(color_loss(&pred, &gt, 0.0).unwrap(), l1);
        assert_eq!(color_loss(&pred, &gt, 1.0).unwrap(), s);
        assert!((color_loss(&pred, &gt, 0.2).unwrap() - (0.8 * l1 + 0.2 * s)).abs() < 1e-15);
        assert!(color_loss(&pred, &gt, 1.5).is_err());
    }

    #[test]
    fn depth_loss_examples() {
        let mut gt = DepthMap::empty(3, 2);
        gt.depth = vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        gt.mask = vec![true, true, false, true, false, false];
        assert_eq!(depth_loss(&gt.depth, &gt, 0.05).unwrap(), 0.0);
        let pred: Vec<f64> = gt.depth.iter().map(|d| d + 1.0).collect();
        assert!((depth_loss(&pred, &gt, 0.05).unwrap() - 0.05).abs() < 1e-12);
        let mut wild = pred.clone();
        wild[2] = 1e6;
        wild[5] = -1e6;
        assert_eq!(depth_loss(&wild, &gt, 0.05).unwrap(), depth_loss(&pred, &gt, 0.05).unwrap());
        assert_eq!(depth_loss(&pred, &DepthMap::empty(3, 2), 0.05).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        assert!((occupancy_entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(occupancy_entropy(0.0) < 2e-5);
        assert!(occupancy_entropy(1.0) < 2e-5);
        assert_eq!(accum_loss(&[], 0.01), 0.0);
        assert!((accum_loss(&[0.5, 0.5], 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn render_like(seed: u64, w: u32, h: u32) -> RenderOutput {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = (w * h) as usize;
        RenderOutput {
            width: w,
            height: h,
            color: (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            depth: (0..n).map(|_| rng.gen_range(1.0..20.0)).collect(),
            accum: vec![1.0; n],
            per_object_beta: [(1, 0.3), (2, 0.85)].into_iter().collect(),
            beta_support_size: [(1, 10), (2, 20)].into_iter().collect(),
            object_alpha: Default::default(),
        }
    }

    #[test]
    fn total_is_sum_of_parts() {
        let r = render_like(1, 16, 14);
        let gt = texture(16, 14);
        let mut d = DepthMap::empty(16, 14);
        for i in (0..d.depth.len()).step_by(3) {
            d.mask[i] = true;
            d.depth[i] = 4.0 + (i % 5) as f64;
        }
        let w = LossWeights::default();
        let out = total_loss(&r, &FrameTarget { image: &gt, depth: Some(&d) }, &w).unwrap();
        let pred = RgbImage::new(16, 14, r.color.clone()).unwrap();
        let c = color_loss(&pred, &gt, w.lambda_c).unwrap();
        let dl = depth_loss(&r.depth, &d, w.lambda_d).unwrap();
        let a = accum_loss(&[0.3, 0.85], w.lambda_a);
        assert_eq!(out.color, c);
        assert_eq!(out.depth, dl);
        assert_eq!(out.accum, a);
        assert_eq!(out.total, c + dl + a);
        let zero = LossWeights { lambda_d: 0.0, lambda_a: 0.0, ..w };
        let out = total_loss(&r, &FrameTarget { image: &gt, depth: Some(&d) }, &zero).unwrap();
        assert_eq!(out.total, c);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let gt = texture(12, 12);
        let mut r = render_like(2, 12, 12);
        r.color = gt.data.clone();
        r.per_object_beta = [(1, 1.0), (2, 0.0)].into_iter().collect();
        let mut d = DepthMap::empty(12, 12);
        d.mask[5] = true;
        d.depth[5] = r.depth[5];
        let out = total_loss(&r, &FrameTarget { image: &gt, depth: Some(&d) }, &LossWeights::default()).unwrap();
        // clamped entropy at β ∈ {0, 1} is ~1.4e-5 before weighting
        assert!(out.total.abs() < 1e-6, "{}", out.total);
    }

    #[test]
    fn gradient_seeds_match_finite_differences() {
        let r = render_like(3, 16, 13);
        let gt = texture(16, 13);
        let mut d = DepthMap::empty(16, 13);
        for i in (0..d.depth.len()).step_by(2) {
            d.mask[i] = true;
            d.depth[i] = 3.0 + (i % 11) as f64;
        }
        let w = LossWeights::default();
        let target = FrameTarget { image: &gt, depth: Some(&d) };
        let out = total_loss(&r, &target, &w).unwrap();
        let f = |r: &RenderOutput| total_loss(r, &target, &w).unwrap().total;
        let h = 1e-7;
        for i in (0..r.color.len()).step_by(5) {
            let mut p = r.clone();
            p.color[i] += h;
            let mut m = r.clone();
            m.color[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - out.grads.color[i]).abs() < 1e-6, "color {i}");
        }
        for i in 0..r.depth.len() {
            let mut p = r.clone();
            p.depth[i] += h;
            let mut m = r.clone();
            m.depth[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - out.grads.depth[i]).abs() < 1e-6, "depth {i}");
        }
        for id in [1u32, 2] {
            let mut p = r.clone();
            *p.per_object_beta.get_mut(&id).unwrap() += h;
            let mut m = r.clone();
            *m.per_object_beta.get_mut(&id).unwrap() -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - out.grads.beta[&id]).abs() < 1e-6, "beta {id}");
        }
    }
}
