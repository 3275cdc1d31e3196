//! View-dependent color from real spherical harmonics, with per-Gaussian
//! time modulation of SH coefficients by Ricker-wavelet expansions.
//!
//! Static nodes store coefficients `h_uv` directly. Wavelet nodes store, for
//! every SH coefficient of every Gaussian, `d` triples `(w, a, b)` and the
//! coefficient at scene time `t` is `Σ w ψ(t; a, b)`. The directional basis
//! `Y_uv` is always evaluated analytically.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SH_DEGREE: u8 = 3;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Added to the raw SH sum before clamping to `[0, 1]`.
pub const COLOR_OFFSET: f64 = 0.5;

/// Normalized scene time.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeStamp(pub f64);

impl TimeStamp {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Maps sensor timestamps (seconds) onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeNormalization {
    pub t_first: f64,
    pub t_last: f64,
}

impl TimeNormalization {
    pub fn normalize(&self, seconds: f64) -> TimeStamp {
        let span = self.t_last - self.t_first;
        if span <= 0.0 {
            TimeStamp(0.0)
        } else {
            TimeStamp((seconds - self.t_first) / span)
        }
    }

    pub fn seconds(&self, t: TimeStamp) -> f64 {
        self.t_first + t.0 * (self.t_last - self.t_first)
    }
}

pub const fn sh_basis_len(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1)
}

/// Real SH basis values for a unit direction, `(l, m)` flattened.
pub fn eval_sh_basis(direction: &Vector3<f64>, degree: u8) -> Result<Vec<f64>> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::invalid(format!("SH degree {degree} exceeds 3")));
    }
    let n = direction.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::invalid("SH direction must be non-zero and finite"));
    }
    let mut out = vec![0.0; sh_basis_len(degree)];
    sh_basis_into(&(direction / n), degree, &mut out);
    Ok(out)
}

pub(crate) fn sh_basis_into(d: &Vector3<f64>, degree: u8, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = SH_C0;
    if degree < 1 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Accumulates `Σ_k g_k ∇Y_k(d)` where `∇` treats `d` as an unconstrained
/// 3-vector (the basis polynomials above).
pub(crate) fn sh_basis_vjp(d: &Vector3<f64>, degree: u8, g: &[f64]) -> Vector3<f64> {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut out = Vector3::zeros();
    if degree < 1 {
        return out;
    }
    out.y -= SH_C1 * g[1];
    out.z += SH_C1 * g[2];
    out.x -= SH_C1 * g[3];
    if degree < 2 {
        return out;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out += Vector3::new(y, x, 0.0) * (SH_C2[0] * g[4]);
    out += Vector3::new(0.0, z, y) * (SH_C2[1] * g[5]);
    out += Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z) * (SH_C2[2] * g[6]);
    out += Vector3::new(z, 0.0, x) * (SH_C2[3] * g[7]);
    out += Vector3::new(2.0 * x, -2.0 * y, 0.0) * (SH_C2[4] * g[8]);
    if degree < 3 {
        return out;
    }
    out += Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0) * (SH_C3[0] * g[9]);
    out += Vector3::new(y * z, x * z, x * y) * (SH_C3[1] * g[10]);
    out += Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z) * (SH_C3[2] * g[11]);
    out += Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy)
        * (SH_C3[3] * g[12]);
    out += Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z) * (SH_C3[4] * g[13]);
    out += Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy) * (SH_C3[5] * g[14]);
    out += Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0) * (SH_C3[6] * g[15]);
    out
}

fn ricker_norm(a: f64) -> f64 {
    2.0 / ((3.0 * a).sqrt() * std::f64::consts::PI.powf(0.25))
}

/// Ricker ("mexican hat") child wavelet with scale `a` and translation `b`.
pub fn ricker(t: TimeStamp, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::invalid("Ricker scale must be positive"));
    }
    Ok(ricker_unchecked(t.0, a, b))
}

#[inline]
pub(crate) fn ricker_unchecked(t: f64, a: f64, b: f64) -> f64 {
    let u = (t - b) / a;
    let u2 = u * u;
    ricker_norm(a) * (1.0 - u2) * (-0.5 * u2).exp()
}

/// `(ψ, ∂ψ/∂a, ∂ψ/∂b)`.
#[inline]
pub(crate) fn ricker_with_grad(t: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let u = (t - b) / a;
    let u2 = u * u;
    let k = ricker_norm(a);
    let e = (-0.5 * u2).exp();
    let psi = k * (1.0 - u2) * e;
    // dψ/dτ = k/a · u(u² − 3) e^{−u²/2}
    let dpsi_dtau = k / a * u * (u2 - 3.0) * e;
    let dpsi_da = -psi / (2.0 * a) - dpsi_dtau * u;
    (psi, dpsi_da, -dpsi_dtau)
}

/// Static SH coefficients for `n` Gaussians, laid out `[gaussian][basis][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShCoefficients {
    pub degree: u8,
    pub coeffs: Vec<f64>,
}

impl ShCoefficients {
    pub fn zeros(degree: u8, n: usize) -> Self {
        Self {
            degree,
            coeffs: vec![0.0; n * 3 * sh_basis_len(degree)],
        }
    }

    pub fn stride(&self) -> usize {
        3 * sh_basis_len(self.degree)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn row(&self, g: usize) -> &[f64] {
        let s = self.stride();
        &self.coeffs[g * s..(g + 1) * s]
    }

    pub fn row_mut(&mut self, g: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.coeffs[g * s..(g + 1) * s]
    }
}

/// One Gaussian's wavelet triples: for each SH coefficient index, `dim`
/// consecutive entries. Scales are stored as `ln a`.
#[derive(Clone, Copy, Debug)]
pub struct WaveletPack<'a> {
    pub dim: usize,
    pub weights: &'a [f64],
    pub log_scales: &'a [f64],
    pub translations: &'a [f64],
}

impl WaveletPack<'_> {
    pub fn coeff_count(&self) -> usize {
        self.weights.len() / self.dim
    }
}

/// `Σᵢ wᵢ ψ(t; aᵢ, bᵢ)` for one coefficient.
pub fn eval_time_coefficient(pack: &WaveletPack<'_>, coeff_index: usize, t: TimeStamp) -> f64 {
    let r = coeff_index * pack.dim..(coeff_index + 1) * pack.dim;
    pack.weights[r.clone()]
        .iter()
        .zip(&pack.log_scales[r.clone()])
        .zip(&pack.translations[r])
        .map(|((w, la), b)| w * ricker_unchecked(t.0, la.exp(), *b))
        .sum()
}

/// Wavelet-modulated SH for `n` Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveletBank {
    pub degree: u8,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub translations: Vec<f64>,
}

/// Initial wavelet scale.
pub const DEFAULT_WAVELET_SCALE: f64 = 0.3;
pub const DEFAULT_WAVELET_DIM: usize = 7;

impl WaveletBank {
    /// Translations evenly spread over `[0, 1]`, scales at the default and
    /// zero weights.
    pub fn new(degree: u8, dim: usize, n: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("wavelet dimension must be at least 1"));
        }
        let per = 3 * sh_basis_len(degree) * dim;
        let mut translations = Vec::with_capacity(n * per);
        for _ in 0..n * per / dim {
            translations.extend(default_translations(dim));
        }
        Ok(Self {
            degree,
            dim,
            weights: vec![0.0; n * per],
            log_scales: vec![DEFAULT_WAVELET_SCALE.ln(); n * per],
            translations,
        })
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        3 * sh_basis_len(self.degree)
    }

    pub fn stride(&self) -> usize {
        self.coeffs_per_gaussian() * self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn pack(&self, g: usize) -> WaveletPack<'_> {
        let s = self.stride();
        let r = g * s..(g + 1) * s;
        WaveletPack {
            dim: self.dim,
            weights: &self.weights[r.clone()],
            log_scales: &self.log_scales[r.clone()],
            translations: &self.translations[r],
        }
    }

    /// Sets the weights of Gaussian `g` so every coefficient starts close
    /// to the given static values in the least-squares sense over `[0, 1]`.
    pub fn fit_static(&mut self, g: usize, coeffs: &[f64]) {
        let s = self.stride();
        let dim = self.dim;
        for (j, &c) in coeffs.iter().enumerate() {
            let off = g * s + j * dim;
            let unit = fit_constant(
                &self.log_scales[off..off + dim],
                &self.translations[off..off + dim],
            );
            for i in 0..dim {
                self.weights[off + i] = c * unit[i];
            }
        }
    }
}

pub(crate) fn default_translations(dim: usize) -> impl Iterator<Item = f64> {
    (0..dim).map(move |i| {
        if dim == 1 {
            0.5
        } else {
            i as f64 / (dim - 1) as f64
        }
    })
}

/// Ridge least-squares weights making `Σ wᵢψᵢ(t) ≈ 1` on a grid over `[0, 1]`.
fn fit_constant(log_scales: &[f64], translations: &[f64]) -> Vec<f64> {
    const SAMPLES: usize = 65;
    const RIDGE: f64 = 1e-3;
    let dim = log_scales.len();
    let a = DMatrix::from_fn(SAMPLES, dim, |r, c| {
        let t = r as f64 / (SAMPLES - 1) as f64;
        ricker_unchecked(t, log_scales[c].exp(), translations[c])
    });
    let mut normal = a.transpose() * &a;
    for i in 0..dim {
        normal[(i, i)] += RIDGE * SAMPLES as f64;
    }
    let rhs = a.transpose() * DVector::from_element(SAMPLES, 1.0);
    match normal.cholesky() {
        Some(ch) => ch.solve(&rhs).iter().copied().collect(),
        None => vec![0.0; dim],
    }
}

/// Per-node appearance model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Appearance {
    Static(ShCoefficients),
    Wavelet(WaveletBank),
}

impl Appearance {
    pub fn degree(&self) -> u8 {
        match self {
            Appearance::Static(s) => s.degree,
            Appearance::Wavelet(w) => w.degree,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Appearance::Static(s) => s.len(),
            Appearance::Wavelet(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn empty_like(&self) -> Appearance {
        match self {
            Appearance::Static(s) => Appearance::Static(ShCoefficients::zeros(s.degree, 0)),
            Appearance::Wavelet(w) => Appearance::Wavelet(WaveletBank {
                degree: w.degree,
                dim: w.dim,
                weights: vec![],
                log_scales: vec![],
                translations: vec![],
            }),
        }
    }

    /// SH coefficients of Gaussian `g` at time `t`, `[basis][channel]`.
    pub fn coefficients_at(&self, g: usize, t: TimeStamp, out: &mut [f64]) {
        match self {
            Appearance::Static(s) => out.copy_from_slice(s.row(g)),
            Appearance::Wavelet(w) => {
                let pack = w.pack(g);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = eval_time_coefficient(&pack, j, t);
                }
            }
        }
    }

    /// Keeps rows at `index` (duplicates allowed), in order.
    pub fn gather(&self, index: &[usize]) -> Appearance {
        match self {
            Appearance::Static(s) => Appearance::Static(ShCoefficients {
                degree: s.degree,
                coeffs: gather_rows(&s.coeffs, s.stride(), index),
            }),
            Appearance::Wavelet(w) => {
                let st = w.stride();
                Appearance::Wavelet(WaveletBank {
                    degree: w.degree,
                    dim: w.dim,
                    weights: gather_rows(&w.weights, st, index),
                    log_scales: gather_rows(&w.log_scales, st, index),
                    translations: gather_rows(&w.translations, st, index),
                })
            }
        }
    }

    pub fn append(&mut self, other: &Appearance) -> Result<()> {
        match (self, other) {
            (Appearance::Static(a), Appearance::Static(b)) if a.degree == b.degree => {
                a.coeffs.extend_from_slice(&b.coeffs);
                Ok(())
            }
            (Appearance::Wavelet(a), Appearance::Wavelet(b))
                if a.degree == b.degree && a.dim == b.dim =>
            {
                a.weights.extend_from_slice(&b.weights);
                a.log_scales.extend_from_slice(&b.log_scales);
                a.translations.extend_from_slice(&b.translations);
                Ok(())
            }
            _ => Err(Error::invalid("cannot concatenate mismatched appearance models")),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Appearance::Static(s) => s.coeffs.iter().all(|v| v.is_finite()),
            Appearance::Wavelet(w) => w
                .weights
                .iter()
                .chain(&w.log_scales)
                .chain(&w.translations)
                .all(|v| v.is_finite()),
        }
    }
}

pub(crate) fn gather_rows(v: &[f64], stride: usize, index: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(index.len() * stride);
    for &i in index {
        out.extend_from_slice(&v[i * stride..(i + 1) * stride]);
    }
    out
}

/// Raw color `Σ_k h_k Y_k(dir)` per channel, before offset and clamp.
pub(crate) fn sh_raw_color(coeffs: &[f64], basis: &[f64]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (k, y) in basis.iter().enumerate() {
        for ch in 0..3 {
            c[ch] += coeffs[3 * k + ch] * y;
        }
    }
    c
}

/// Final color `clamp(raw + 0.5, 0, 1)` for Gaussian `g` of `appearance`
/// seen along unit `direction` (already in the node's frame) at `t`.
pub fn eval_color(
    appearance: &Appearance,
    g: usize,
    direction: &Vector3<f64>,
    t: TimeStamp,
) -> Result<[f64; 3]> {
    let degree = appearance.degree();
    let basis = eval_sh_basis(direction, degree)?;
    let mut coeffs = vec![0.0; 3 * basis.len()];
    appearance.coefficients_at(g, t, &mut coeffs);
    let raw = sh_raw_color(&coeffs, &basis);
    Ok(raw.map(|v| (v + COLOR_OFFSET).clamp(0.0, 1.0)))
}

/// Inverse of the color offset for degree-0 initialization.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - COLOR_OFFSET) / SH_C0)
}
