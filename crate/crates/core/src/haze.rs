//! Atmospheric scattering image formation.
//!
//! A hazy observation is `I = J t + A (1 - t)` with transmission
//! `t = exp(-beta d)`. The same model is written as `I = J + r` with the
//! structured residual `r = (A - J)(1 - t)`; [`synthesize_haze`] is computed
//! through that residual so both forms agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::{Image, Plane};

/// Default lower bound on transmission used by [`invert_haze`].
pub const DEFAULT_T_MIN: f64 = 0.01;

/// Per-pixel scene depth, nonnegative and finite, in arbitrary units.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Plane);

impl DepthMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(bad) = plane.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(DehazeError::invalid(format!(
                "depth must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Self(plane))
    }

    pub fn filled(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(Plane::filled(height, width, depth)?)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }
}

/// Per-pixel transmission in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap(Plane);

impl TransmissionMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(bad) = plane.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(DehazeError::invalid(format!(
                "transmission must lie in (0, 1], found {bad}"
            )));
        }
        Ok(Self(plane))
    }

    pub fn filled(height: usize, width: usize, t: f64) -> Result<Self> {
        Self::new(Plane::filled(height, width, t)?)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }

    pub fn min(&self) -> f64 {
        self.0.data().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Global atmospheric light, one component per color channel, each in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct AtmosphericLight([f64; 3]);

impl AtmosphericLight {
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if let Some(bad) = rgb.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(DehazeError::invalid(format!(
                "atmospheric light components must lie in (0, 1], found {bad}"
            )));
        }
        Ok(Self(rgb))
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new([v; 3])
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }
}

impl TryFrom<[f64; 3]> for AtmosphericLight {
    type Error = DehazeError;

    fn try_from(rgb: [f64; 3]) -> Result<Self> {
        Self::new(rgb)
    }
}

impl From<AtmosphericLight> for [f64; 3] {
    fn from(a: AtmosphericLight) -> Self {
        a.0
    }
}

/// Scattering coefficient and airlight of one synthesized observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: AtmosphericLight,
}

/// The haze-induced difference between observation and radiance, `(A - J)(1 - t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ResidualMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * Image::CHANNELS + c]
    }

    /// `J + r`, the single arithmetic path through which hazy images are formed.
    pub fn add_to(&self, radiance: &Image) -> Result<Image> {
        if radiance.dims() != self.dims() {
            return Err(DehazeError::dims(format!(
                "residual {}x{} vs radiance {}x{}",
                self.height,
                self.width,
                radiance.height(),
                radiance.width()
            )));
        }
        let data = radiance
            .data()
            .iter()
            .zip(&self.data)
            .map(|(&j, &r)| (j + r).clamp(0.0, 1.0))
            .collect();
        Image::new(self.height, self.width, data)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(DehazeError::invalid(format!(
            "scattering coefficient must be positive and finite, got {beta}"
        )));
    }
    Ok(())
}

/// `t(x) = exp(-beta d(x))`, floored at the smallest positive normal so that
/// extreme optical depths stay inside `(0, 1]`.
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    check_beta(beta)?;
    let (h, w) = depth.dims();
    let mut data = Vec::with_capacity(h * w);
    for &d in depth.plane().data() {
        if !d.is_finite() || d < 0.0 {
            return Err(DehazeError::invalid(format!("rejected depth value {d}")));
        }
        data.push((-beta * d).exp().max(f64::MIN_POSITIVE));
    }
    Ok(TransmissionMap(Plane::new(h, w, data)?))
}

fn check_pair(radiance: &Image, t: &TransmissionMap) -> Result<()> {
    if radiance.dims() != t.dims() {
        let (th, tw) = t.dims();
        return Err(DehazeError::dims(format!(
            "image {}x{} vs transmission {th}x{tw}",
            radiance.height(),
            radiance.width()
        )));
    }
    Ok(())
}

/// `r(x) = (A - J(x)) (1 - t(x))` per pixel and channel.
pub fn haze_residual(radiance: &Image, t: &TransmissionMap, a: &AtmosphericLight) -> Result<ResidualMap> {
    check_pair(radiance, t)?;
    let airlight = a.rgb();
    let (h, w) = radiance.dims();
    let tvals = t.plane().data();
    let data = radiance
        .data()
        .chunks_exact(Image::CHANNELS)
        .zip(tvals)
        .flat_map(|(px, &tx)| {
            let attenuation = 1.0 - tx;
            [0, 1, 2].map(|c| (airlight[c] - px[c]) * attenuation)
        })
        .collect();
    Ok(ResidualMap {
        height: h,
        width: w,
        data,
    })
}

/// Forms the hazy observation `I = J t + A (1 - t)`, evaluated as `J + r`.
pub fn synthesize_haze(radiance: &Image, t: &TransmissionMap, a: &AtmosphericLight) -> Result<Image> {
    haze_residual(radiance, t, a)?.add_to(radiance)
}

/// Algebraic inverse of the scattering model with transmission floored at `t_min`;
/// the result is clamped to `[0, 1]`.
pub fn invert_haze(hazy: &Image, t: &TransmissionMap, a: &AtmosphericLight, t_min: f64) -> Result<Image> {
    if !(t_min.is_finite() && t_min > 0.0) {
        return Err(DehazeError::invalid(format!("t_min must be positive, got {t_min}")));
    }
    check_pair(hazy, t)?;
    let airlight = a.rgb();
    let (h, w) = hazy.dims();
    Image::from_fn_clamped(h, w, |y, x, c| {
        let tx = t.get(y, x).max(t_min);
        (hazy.get(y, x, c) - airlight[c] * (1.0 - tx)) / tx
    })
}
