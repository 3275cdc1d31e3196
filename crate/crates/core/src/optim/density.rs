use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use nalgebra::Vector3;

use super::config::DensityConfig;
use crate::rasterizer::NodeGrads;
use crate::scenegraph::{sigmoid, GaussianSet};

/// Running positional-gradient statistics for one node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn record(&mut self, g: &NodeGrads) {
        for i in 0..self.sum.len() {
            if g.visible[i] {
                self.sum[i] += g.mean2d_norm[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// How the rows of a node were rearranged. `index[k]` is the source row of
/// new row `k`; `fresh[k]` marks rows created by cloning or splitting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeRemap {
    pub index: Vec<usize>,
    pub fresh: Vec<bool>,
}

impl NodeRemap {
    pub fn is_identity(&self, n: usize) -> bool {
        self.index.len() == n && self.index.iter().enumerate().all(|(k, &i)| k == i) && !self.fresh.iter().any(|f| *f)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensityReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large Gaussians with a high mean positional
/// gradient, then prunes nearly transparent ones. Works in the node frame,
/// so object Gaussians stay in their node.
pub fn density_control(
    set: &mut GaussianSet,
    stats: &GradStats,
    cfg: &DensityConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> (NodeRemap, DensityReport) {
    let n = set.len();
    let mut report = DensityReport::default();
    let mut index: Vec<usize> = Vec::with_capacity(n);
    let mut fresh = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    let room = cfg.max_gaussians.saturating_sub(n);
    let mut added = 0usize;
    for i in 0..n {
        let hot = stats.count.get(i).copied().unwrap_or(0) > 0 && stats.mean(i) >= cfg.grad_threshold;
        let big = set.scale(i).max() > cfg.percent_dense * extent;
        if hot && big && added < room {
            splits.push(i);
            added += 1;
        } else {
            index.push(i);
            fresh.push(false);
            if hot && !big && added < room {
                clones.push(i);
                added += 1;
            }
        }
    }
    for &i in &clones {
        index.push(i);
        fresh.push(true);
    }
    for &i in &splits {
        index.push(i);
        index.push(i);
        fresh.push(true);
        fresh.push(true);
    }
    report.cloned = clones.len();
    report.split = splits.len();
    let mut out = set.gather(&index);
    let first_child = index.len() - 2 * splits.len();
    let shrink = cfg.split_scale_divisor.ln();
    for k in first_child..index.len() {
        let parent = index[k];
        let z = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let offset = set.rotation_matrix(parent) * set.scale(parent).component_mul(&z);
        out.means[k] = set.means[parent] + offset;
        out.log_scales[k] = set.log_scales[parent].add_scalar(-shrink);
    }

    let keep: Vec<usize> = (0..out.len())
        .filter(|&k| sigmoid(out.opacity_logits[k]) >= cfg.min_opacity)
        .collect();
    report.pruned = out.len() - keep.len();
    if keep.len() != out.len() {
        out = out.gather(&keep);
        index = keep.iter().map(|&k| index[k]).collect();
        fresh = keep.iter().map(|&k| fresh[k]).collect();
    }
    *set = out;
    (NodeRemap { index, fresh }, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::{Appearance, ShCoefficients};
    use crate::scenegraph::logit;
    use nalgebra::Matrix3;
    use rand::SeedableRng;

    fn set(n: usize, opacity: f64, log_scale: f64) -> GaussianSet {
        let mut s = GaussianSet::empty(Appearance::Static(ShCoefficients::zeros(0, 0)));
        for i in 0..n {
            s.means.push(Vector3::new(i as f64, 0.0, 0.0));
            s.log_scales.push(Vector3::repeat(log_scale));
            s.rotations.push([1.0, 0.0, 0.0, 0.0]);
            s.opacity_logits.push(logit(opacity));
        }
        s.appearance = Appearance::Static(ShCoefficients::zeros(0, n));
        s
    }

    fn stats(n: usize, g: f64) -> GradStats {
        GradStats {
            sum: vec![g; n],
            count: vec![1; n],
        }
    }

    #[test]
    fn quiet_scene_is_unchanged() {
        let mut s = set(5, 0.5, -2.0);
        let before = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (remap, report) = density_control(&mut s, &stats(5, 0.0), &DensityConfig::default(), 10.0, &mut rng);
        assert_eq!(s, before);
        assert!(remap.is_identity(5));
        assert_eq!(report, DensityReport::default());
    }

    #[test]
    fn transparent_gaussian_is_pruned() {
        let mut s = set(4, 0.5, -2.0);
        s.opacity_logits[2] = logit(0.001);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (remap, report) = density_control(&mut s, &stats(4, 0.0), &DensityConfig::default(), 10.0, &mut rng);
        assert_eq!(s.len(), 3);
        assert_eq!(remap.index, vec![0, 1, 3]);
        assert_eq!(report.pruned, 1);
    }

    #[test]
    fn small_hot_gaussians_clone_and_large_ones_split() {
        let cfg = DensityConfig::default();
        let mut s = set(2, 0.5, (0.05f64).ln());
        s.log_scales[1] = Vector3::repeat((0.5f64).ln());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (remap, report) = density_control(&mut s, &stats(2, 1.0), &cfg, 10.0, &mut rng);
        assert_eq!(report.cloned, 1);
        assert_eq!(report.split, 1);
        assert_eq!(remap.index, vec![0, 0, 1, 1]);
        assert_eq!(remap.fresh, vec![false, true, true, true]);
        let child = (0.5f64 / 1.6).ln();
        assert!((s.log_scales[2].x - child).abs() < 1e-12);
        assert!((s.log_scales[3].y - child).abs() < 1e-12);
    }

    /// Two children drawn from N(μ, Σ) with covariances Σ/1.6² have an
    /// expected mixture covariance of Σ/2.56 + Σ/2 ≈ 0.89 Σ.
    #[test]
    fn split_roughly_preserves_extent() {
        let cfg = DensityConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ratio = 0.0;
        let trials = 4000;
        for _ in 0..trials {
            let mut s = set(1, 0.5, 0.0);
            s.log_scales[0] = Vector3::new(0.3f64.ln(), 0.6f64.ln(), 1.0f64.ln());
            s.rotations[0] = [0.9, 0.1, -0.3, 0.2];
            let parent = s.covariance(0);
            density_control(&mut s, &stats(1, 1.0), &cfg, 1.0, &mut rng);
            assert_eq!(s.len(), 2);
            let mid = (s.means[0] + s.means[1]) / 2.0;
            let mut mix = Matrix3::zeros();
            for k in 0..2 {
                let d = s.means[k] - mid;
                mix += 0.5 * (s.covariance(k) + d * d.transpose());
            }
            ratio += mix.trace() / parent.trace();
        }
        ratio /= trials as f64;
        let expected = 1.0 / 2.56 + 0.5;
        assert!((ratio - expected).abs() < 0.03, "{ratio}");
    }

    #[test]
    fn respects_gaussian_ceiling() {
        let cfg = DensityConfig {
            max_gaussians: 6,
            ..Default::default()
        };
        let mut s = set(5, 0.5, -4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        density_control(&mut s, &stats(5, 1.0), &cfg, 10.0, &mut rng);
        assert_eq!(s.len(), 6);
    }
}
