//! Image quality scores (PSNR, SSIM) and whole-set evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{fixed_pairs, stack, unstack, CorruptionSpec, Image, ImageSet};
use crate::error::{Error, Result};
use crate::nn::Restorer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const EVAL_BATCH: usize = 16;

fn check_shapes(x: &Image, y: &Image) -> Result<()> {
    if (x.channels, x.height, x.width) != (y.channels, y.height, y.width) {
        return Err(Error::Shape(format!(
            "cannot compare {}x{}x{} with {}x{}x{}",
            x.channels, x.height, x.width, y.channels, y.height, y.width
        )));
    }
    Ok(())
}

pub fn mse(x: &[f32], y: &[f32]) -> f64 {
    let sum: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    sum / x.len() as f64
}

/// Peak signal-to-noise ratio in dB; identical images score `+∞`.
pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<f64> {
    check_shapes(x, y)?;
    Ok(psnr_from_mse(mse(&x.data, &y.data), peak))
}

/// PSNR over raw `f64` intensities, for inputs not representable in `f32`.
pub fn psnr_f64(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("cannot compare {} values with {}", x.len(), y.len())));
    }
    let sum: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(psnr_from_mse(sum / x.len() as f64, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ssim {
    pub value: f64,
    /// The image was smaller than the window, so global statistics were used.
    pub global: bool,
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn ssim_plane(x: &[f32], y: &[f32], h: usize, w: usize, c1: f64, c2: f64, window: &[f64]) -> f64 {
    let px = |i: usize| (f64::from(x[i]), f64::from(y[i]));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..h * w {
            let (a, b) = px(i);
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
        let (mx, my) = (sx / n, sy / n);
        return ssim_term(mx, my, sxx / n - mx * mx, syy / n - my * my, sxy / n - mx * my, c1, c2);
    }
    let mut total = 0.0;
    let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let g = window[dy * SSIM_WINDOW + dx];
                    let (a, b) = px((top + dy) * w + left + dx);
                    mx += g * a;
                    my += g * b;
                    exx += g * a * a;
                    eyy += g * b * b;
                    exy += g * a * b;
                }
            }
            total += ssim_term(mx, my, exx - mx * mx, eyy - my * my, exy - mx * my, c1, c2);
        }
    }
    total / positions as f64
}

/// Gaussian-windowed SSIM averaged over window positions and then over channels.
pub fn ssim(x: &Image, y: &Image, peak: f64) -> Result<Ssim> {
    check_shapes(x, y)?;
    let (c1, c2) = ((SSIM_K1 * peak).powi(2), (SSIM_K2 * peak).powi(2));
    let window = gaussian_window();
    let plane = x.plane();
    let sum: f64 = (0..x.channels)
        .map(|c| {
            let r = c * plane..(c + 1) * plane;
            ssim_plane(&x.data[r.clone()], &y.data[r], x.height, x.width, c1, c2, &window)
        })
        .sum();
    Ok(Ssim {
        value: sum / x.channels as f64,
        global: x.height < SSIM_WINDOW || x.width < SSIM_WINDOW,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub labels: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
    pub ssim_global_fallback: bool,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

impl QualityReport {
    /// One row per image (`image,psnr_db,ssim`) followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "psnr_db", "ssim"]).expect("writing to memory");
        let mut row = |a: &str, p: f64, s: f64| {
            w.write_record([a, &fmt_db(p), &format!("{s:.6}")])
                .expect("writing to memory")
        };
        for ((l, &p), &s) in self.labels.iter().zip(&self.psnr).zip(&self.ssim) {
            row(l, p, s);
        }
        row("mean", self.mean_psnr, self.mean_ssim);
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 input")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores restored images against clean ones, batching the restorer calls.
pub fn evaluate_pairs(
    restorer: &(impl Restorer + ?Sized),
    pairs: &[(Image, Image)],
    labels: &[String],
) -> Result<QualityReport> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut psnrs = Vec::with_capacity(pairs.len());
    let mut ssims = Vec::with_capacity(pairs.len());
    let mut fallback = false;
    for chunk in pairs.chunks(EVAL_BATCH) {
        let input = stack(&chunk.iter().map(|(_, c)| c).collect::<Vec<_>>())?;
        let restored = restorer.restore(&input)?;
        if restored.dims() != input.dims() {
            return Err(Error::Shape(format!(
                "restorer mapped {:?} to {:?}",
                input.dims(),
                restored.dims()
            )));
        }
        for ((clean, _), out) in chunk.iter().zip(unstack(&restored)) {
            psnrs.push(psnr(&out, clean, 1.0)?);
            let s = ssim(&out, clean, 1.0)?;
            fallback |= s.global;
            ssims.push(s.value);
        }
    }
    Ok(QualityReport {
        labels: labels.to_vec(),
        mean_psnr: mean(&psnrs),
        mean_ssim: mean(&ssims),
        count: psnrs.len(),
        psnr: psnrs,
        ssim: ssims,
        ssim_global_fallback: fallback,
    })
}

/// Corrupts each image deterministically (seeded by its index), restores it and scores
/// the whole image against the clean original.
pub fn evaluate_set(
    restorer: &(impl Restorer + ?Sized),
    set: &ImageSet,
    corruption: &CorruptionSpec,
    seed: u64,
) -> Result<QualityReport> {
    let first = set
        .images
        .first()
        .ok_or_else(|| Error::Data("evaluation set is empty".into()))?;
    let pairs = fixed_pairs(set, (first.height, first.width), corruption, seed)?;
    evaluate_pairs(restorer, &pairs, &set.labels)
}
