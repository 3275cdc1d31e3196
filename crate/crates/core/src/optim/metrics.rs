use crate::error::{Error, Result};
use crate::image::RgbImage;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `10·log₁₀(1/MSE)` on unit range, capped at [`PSNR_CAP`].
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    pred.same_shape(gt)?;
    let mse = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data.len().max(1) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_taps() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" correlation: `w×h` → `(w−10)×(h−10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                s += t * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                tmp[(y + k) * ow + x] += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                out[y * w + x + k] += t * v;
            }
        }
    }
    out
}

fn plane(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

fn check_ssim_input(pred: &RgbImage, gt: &RgbImage) -> Result<()> {
    pred.same_shape(gt)?;
    if (pred.width as usize) < WINDOW || (pred.height as usize) < WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {WINDOW}×{WINDOW} pixels, got {}×{}",
            pred.width, pred.height
        )));
    }
    Ok(())
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5) and channels.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    ssim_impl(pred, gt, false).map(|(s, _)| s)
}

/// SSIM and its gradient w.r.t. `pred` (interleaved like `pred.data`).
pub fn ssim_with_grad(pred: &RgbImage, gt: &RgbImage) -> Result<(f64, Vec<f64>)> {
    ssim_impl(pred, gt, true)
}

fn ssim_impl(pred: &RgbImage, gt: &RgbImage, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    check_ssim_input(pred, gt)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    let taps = gaussian_taps();
    let n_win = ((w - WINDOW + 1) * (h - WINDOW + 1)) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; pred.data.len()] } else { vec![] };
    for c in 0..3 {
        let x = plane(pred, c);
        let y = plane(gt, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, w, h, &taps);
        let my = filter_valid(&y, w, h, &taps);
        let exx = filter_valid(&xx, w, h, &taps);
        let eyy = filter_valid(&yy, w, h, &taps);
        let exy = filter_valid(&xy, w, h, &taps);
        let m = mx.len();
        let mut d_mx = vec![0.0; if want_grad { m } else { 0 }];
        let mut d_exx = d_mx.clone();
        let mut d_exy = d_mx.clone();
        for i in 0..m {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mx[i] = s * (2.0 * uy / a1 - 2.0 * ux / b1 - 2.0 * uy / a2 + 2.0 * ux / b2);
                d_exx[i] = -s / b2;
                d_exy[i] = 2.0 * s / a2;
            }
        }
        if want_grad {
            let g_mx = filter_valid_adjoint(&d_mx, w, h, &taps);
            let g_exx = filter_valid_adjoint(&d_exx, w, h, &taps);
            let g_exy = filter_valid_adjoint(&d_exy, w, h, &taps);
            let norm = 1.0 / (3.0 * n_win);
            for p in 0..w * h {
                grad[3 * p + c] = norm * (g_mx[p] + 2.0 * x[p] * g_exx[p] + y[p] * g_exy[p]);
            }
        }
    }
    Ok((total / (3.0 * n_win), grad))
}
