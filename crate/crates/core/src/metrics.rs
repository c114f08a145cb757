//! Full-reference image quality: PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::{Image, Plane};

/// Peak signal-to-noise ratio in dB over all pixels and channels.
///
/// Identical images have zero error and give `f64::INFINITY`.
pub fn psnr(reference: &Image, test: &Image, peak: f64) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(DehazeError::invalid(format!(
            "psnr of {:?} against {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(DehazeError::invalid(format!("peak must be positive, got {peak}")));
    }
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let mse = sum / reference.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    fn check(&self) -> Result<()> {
        if self.window == 0
            || !(self.sigma > 0.0)
            || !(self.k1 > 0.0)
            || !(self.k2 > 0.0)
            || !(self.dynamic_range > 0.0)
        {
            return Err(DehazeError::invalid(format!("bad ssim parameters {self:?}")));
        }
        Ok(())
    }

    /// Separable 1-D Gaussian taps, normalized to sum one.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window - 1) as f64 / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Gaussian-weighted mean over every window that lies entirely inside the plane.
fn filter_valid(p: &Plane, taps: &[f64]) -> Vec<f64> {
    let (h, w) = p.dims();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * p.get(y, x + i)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &Plane, b: &Plane, params: &SsimParams) -> Result<f64> {
    let taps = params.taps();
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&a.zip_map(a, |x, y| x * y)?, &taps);
    let bb = filter_valid(&b.zip_map(b, |x, y| x * y)?, &taps);
    let ab = filter_valid(&a.zip_map(b, |x, y| x * y)?, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean structural similarity, computed per channel over valid Gaussian
/// windows and averaged over channels.
pub fn ssim(reference: &Image, test: &Image, params: &SsimParams) -> Result<f64> {
    params.check()?;
    if reference.dims() != test.dims() {
        return Err(DehazeError::invalid(format!(
            "ssim of {:?} against {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    let (h, w) = reference.dims();
    if h < params.window || w < params.window {
        return Err(DehazeError::invalid(format!(
            "{h}x{w} image is smaller than the {0}x{0} ssim window",
            params.window
        )));
    }
    if reference == test {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for c in 0..Image::CHANNELS {
        sum += ssim_plane(&reference.channel(c), &test.channel(c), params)?;
    }
    Ok(sum / Image::CHANNELS as f64)
}
