//! Full-reference quality metrics on `[0, 1]` images.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::synthdata::luminance;
use crate::tensor::ImageTensor;

/// Value reported when the two images are numerically identical.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &ImageTensor<f32>, b: &ImageTensor<f32>) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse < 1e-12 {
        cap
    } else {
        (10.0 * (1.0 / mse).log10()).min(cap)
    }
}

pub fn psnr(a: &ImageTensor<f32>, b: &ImageTensor<f32>, cap: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, cap))
}

/// PSNR after rounding both images to 8-bit levels, for comparison with tools
/// that read the written PNGs.
pub fn psnr_quantized(a: &ImageTensor<f32>, b: &ImageTensor<f32>, cap: f64) -> Result<f64> {
    let q = |img: &ImageTensor<f32>| img.map(|v| crate::pngio::quantize(v) as f32 / 255.0);
    psnr(&q(a), &q(b), cap)
}

pub fn rgb_to_y(img: &ImageTensor<f32>) -> Result<ImageTensor<f32>> {
    luminance(img)
}

fn ssim_window() -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Gaussian-weighted mean over every fully contained window ("valid" mode).
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * rows[(y + i) * ow + x])
                .sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, oh, ow) = filter_valid(a, h, w, g);
    let (mu_b, ..) = filter_valid(b, h, w, g);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, g);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, g);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, g);
    let n = oh * ow;
    let mut sum = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        sum += num / den;
    }
    sum / n as f64
}

/// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), channels averaged.
pub fn ssim(a: &ImageTensor<f32>, b: &ImageTensor<f32>) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    let k = 2 * SSIM_RADIUS + 1;
    if a.height() < k || a.width() < k {
        return Err(Error::InvalidShape(format!(
            "SSIM needs at least {k}x{k} pixels, got {}",
            a.shape()
        )));
    }
    let g = ssim_window();
    let (h, w) = (a.height(), a.width());
    let total: f64 = (0..a.channels())
        .map(|c| {
            let pa: Vec<f64> = a.channel(c).iter().map(|&v| v as f64).collect();
            let pb: Vec<f64> = b.channel(c).iter().map(|&v| v as f64).collect();
            ssim_plane(&pa, &pb, h, w, &g)
        })
        .sum();
    Ok((total / a.channels() as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_rgb: f64,
    pub psnr_y: Option<f64>,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricsReport {
    /// `psnr_y` is filled for RGB inputs.
    pub fn compute(pred: &ImageTensor<f32>, target: &ImageTensor<f32>) -> Result<Self> {
        let mse = mse(pred, target)?;
        let psnr_y = if pred.channels() == 3 {
            Some(psnr(&rgb_to_y(pred)?, &rgb_to_y(target)?, PSNR_CAP)?)
        } else {
            None
        };
        Ok(Self {
            psnr_rgb: psnr_from_mse(mse, PSNR_CAP),
            psnr_y,
            ssim: ssim(pred, target)?,
            mse,
        })
    }

    /// Arithmetic mean of each field; `psnr_y` only if every report has it.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::config("cannot average an empty set of metrics"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let psnr_y = reports
            .iter()
            .map(|r| r.psnr_y)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Ok(Self {
            psnr_rgb: avg(|r| r.psnr_rgb),
            psnr_y,
            ssim: avg(|r| r.ssim),
            mse: avg(|r| r.mse),
        })
    }
}

pub const METRICS_CSV_HEADER: &str = "id,task,variant,N,psnr,psnr_y,ssim,lpips";

/// One row of the metrics CSV. The `lpips` column is always empty.
pub fn metrics_csv_row(
    id: &str,
    task: &str,
    variant: &str,
    steps: usize,
    m: &MetricsReport,
) -> String {
    let psnr_y = m.psnr_y.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!(
        "{id},{task},{variant},{steps},{:.6},{psnr_y},{:.6},",
        m.psnr_rgb, m.ssim
    )
}
