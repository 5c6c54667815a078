//! Full-reference video metrics.
//!
//! Inputs are `[frames, H, W, C]` or a single `[H, W, C]` frame. MSE and
//! SSIM are computed per frame and averaged; PSNR is derived from that mean
//! MSE so the two always agree.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn frames_of(a: &Tensor<f32>, b: &Tensor<f32>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    match *a.shape() {
        [f, h, w, c] => Ok((f, h, w, c)),
        [h, w, c] => Ok((1, h, w, c)),
        _ => Err(Error::invalid(format!("{op}: expected [frames, H, W, C] or [H, W, C], got {:?}", a.shape()))),
    }
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (f, h, w, c) = frames_of(a, b, "mse")?;
    let n = h * w * c;
    let per_frame = a.data().chunks_exact(n).zip(b.data().chunks_exact(n)).map(|(x, y)| {
        x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / n as f64
    });
    Ok(per_frame.sum::<f64>() / f as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Mean SSIM over 7×7 uniform windows (valid positions), channels, and
/// frames. Frames smaller than the window use one window covering the frame.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (f, h, w, c) = frames_of(a, b, "ssim")?;
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = h * w * c;
    let mut total = 0.0;
    for fi in 0..f {
        let x = &a.data()[fi * n..(fi + 1) * n];
        let y = &b.data()[fi * n..(fi + 1) * n];
        let mut acc = 0.0;
        let mut count = 0usize;
        for ch in 0..c {
            for y0 in 0..=h - wh {
                for x0 in 0..=w - ww {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for yy in y0..y0 + wh {
                        for xx in x0..x0 + ww {
                            let i = (yy * w + xx) * c + ch;
                            let (p, q) = (x[i] as f64, y[i] as f64);
                            sx += p;
                            sy += q;
                            sxx += p * p;
                            syy += q * q;
                            sxy += p * q;
                        }
                    }
                    let m = (wh * ww) as f64;
                    let (mx, my) = (sx / m, sy / m);
                    let vx = (sxx / m - mx * mx).max(0.0);
                    let vy = (syy / m - my * my).max(0.0);
                    let cov = sxy / m - mx * my;
                    acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    count += 1;
                }
            }
        }
        total += acc / count as f64;
    }
    Ok(total / f as f64)
}

/// Summary of per-chunk wall times in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingSummary {
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
}

/// Nearest-rank percentile of an unsorted sample, `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn summarize(times_ms: &[f64], frames_per_chunk: usize) -> Result<TimingSummary> {
    if times_ms.is_empty() {
        return Err(Error::invalid("no timed chunks"));
    }
    let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    Ok(TimingSummary {
        samples: times_ms.len(),
        mean_ms: mean,
        median_ms: percentile(times_ms, 0.5),
        p95_ms: percentile(times_ms, 0.95),
        max_ms: times_ms.iter().copied().fold(f64::MIN, f64::max),
        fps: frames_per_chunk as f64 / (mean / 1000.0),
    })
}
