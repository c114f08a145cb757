//! Guided filtering and residual-based halo suppression.

use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::{Image, Plane};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilterParams {
    /// Window half-extent; windows are `(2r + 1) x (2r + 1)`.
    pub radius: usize,
    pub epsilon: f64,
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        Self {
            radius: 8,
            epsilon: 1e-3,
        }
    }
}

impl GuidedFilterParams {
    pub fn new(radius: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(DehazeError::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        let p = Self { radius, epsilon };
        p.check()?;
        Ok(p)
    }

    /// Looser than [`GuidedFilterParams::new`]: `epsilon = 0` passes, which
    /// the filter handles by zeroing the slope of flat windows.
    fn check(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(DehazeError::invalid("radius must be at least 1"));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(DehazeError::invalid(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Mean over the `(2r + 1)^2` window around each pixel, clipped to the image
/// and normalized by the number of pixels actually covered.
pub fn box_mean(plane: &Plane, radius: usize) -> Result<Plane> {
    if radius == 0 {
        return Err(DehazeError::invalid("radius must be at least 1"));
    }
    let (h, w) = plane.dims();
    // (h + 1) x (w + 1) summed-area table
    let stride = w + 1;
    let mut sat = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane.get(y, x);
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    Plane::from_fn(h, w, |y, x| {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
        let sum = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0] + sat[y0 * stride + x0];
        sum / ((y1 - y0) * (x1 - x0)) as f64
    })
}

fn product(a: &Plane, b: &Plane) -> Result<Plane> {
    a.zip_map(b, |x, y| x * y)
}

/// Edge-preserving filter whose output is locally affine in `guide`.
///
/// Each window `k` fits `p ~ a_k * I + b_k` by ridge-regularized least
/// squares; every pixel then averages the fits of all windows covering it.
pub fn guided_filter(guide: &Plane, input: &Plane, params: &GuidedFilterParams) -> Result<Plane> {
    params.check()?;
    if guide.dims() != input.dims() {
        return Err(DehazeError::invalid(format!(
            "guide is {:?} but input is {:?}",
            guide.dims(),
            input.dims()
        )));
    }
    let r = params.radius;
    let mean_i = box_mean(guide, r)?;
    let mean_p = box_mean(input, r)?;
    let corr_ip = box_mean(&product(guide, input)?, r)?;
    let corr_ii = box_mean(&product(guide, guide)?, r)?;

    let (h, w) = guide.dims();
    let mut a = Plane::filled(h, w, 0.0)?;
    let mut b = Plane::filled(h, w, 0.0)?;
    for i in 0..h * w {
        let mi = mean_i.data()[i];
        let mp = mean_p.data()[i];
        let var = (corr_ii.data()[i] - mi * mi).max(0.0);
        let cov = corr_ip.data()[i] - mi * mp;
        let denom = var + params.epsilon;
        let ak = if denom > 0.0 { cov / denom } else { 0.0 };
        a.data_mut()[i] = ak;
        b.data_mut()[i] = mp - ak * mi;
    }
    let mean_a = box_mean(&a, r)?;
    let mean_b = box_mean(&b, r)?;
    let mut q = mean_a.zip_map(guide, |ma, g| ma * g)?;
    for (qv, mb) in q.data_mut().iter_mut().zip(mean_b.data()) {
        *qv += mb;
    }
    Ok(q)
}

/// Refines a dehazed estimate by smoothing its residual under the guidance of
/// the hazy observation: `r1 = hazy - dehazed`, `r2 = GF(luma(hazy), r1)`
/// per channel, result `clamp(hazy - r2)`.
pub fn halo_suppress(hazy: &Image, dehazed: &Image, params: &GuidedFilterParams) -> Result<Image> {
    if hazy.dims() != dehazed.dims() {
        return Err(DehazeError::invalid(format!(
            "hazy is {:?} but dehazed is {:?}",
            hazy.dims(),
            dehazed.dims()
        )));
    }
    let guide = hazy.luma();
    let refined = (0..Image::CHANNELS)
        .map(|c| {
            let residual = hazy.channel(c).zip_map(&dehazed.channel(c), |a, b| a - b)?;
            guided_filter(&guide, &residual, params)
        })
        .collect::<Result<Vec<Plane>>>()?;
    let (h, w) = hazy.dims();
    Image::from_fn_clamped(h, w, |y, x, c| hazy.get(y, x, c) - refined[c].get(y, x))
}
