//! Pixel containers shared by every stage of the pipeline.

use crate::error::{DehazeError, Result};
use crate::tensor::Tensor;

/// An RGB image with channel-interleaved samples in `[0, 1]`.
///
/// Samples are stored as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DehazeError::invalid(format!(
                "image extent must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(DehazeError::dims(format!(
                "{height}x{width}x3 image needs {} samples, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DehazeError::invalid(format!("image sample {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from a per-sample function; values are clamped to `[0, 1]`.
    pub fn from_fn_clamped(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    let v = f(y, x, c);
                    if !v.is_finite() {
                        return Err(DehazeError::NonFinite(format!(
                            "pixel ({y}, {x}, {c}) evaluated to {v}"
                        )));
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(DehazeError::dims(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// One color channel as a single-channel map.
    pub fn channel(&self, c: usize) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().skip(c).step_by(Self::CHANNELS).copied().collect(),
        }
    }

    /// Rec. 601 luma, `0.299 R + 0.587 G + 0.114 B`.
    pub fn luma(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .chunks_exact(Self::CHANNELS)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(DehazeError::invalid(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in top..top + height {
            let start = (y * self.width + left) * Self::CHANNELS;
            data.extend_from_slice(&self.data[start..start + width * Self::CHANNELS]);
        }
        Ok(Image { height, width, data })
    }

    /// Packs images of equal size into an `N x 3 x H x W` tensor.
    pub fn batch_to_tensor(images: &[Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| DehazeError::invalid("empty image batch"))?;
        let (h, w) = first.dims();
        let plane = h * w;
        let mut data = vec![0.0; images.len() * Self::CHANNELS * plane];
        for (n, img) in images.iter().enumerate() {
            first.same_dims(img, "image batch")?;
            for (i, px) in img.data.chunks_exact(Self::CHANNELS).enumerate() {
                for (c, &v) in px.iter().enumerate() {
                    data[(n * Self::CHANNELS + c) * plane + i] = v;
                }
            }
        }
        Tensor::new(vec![images.len(), Self::CHANNELS, h, w], data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self))
    }

    /// Unpacks sample `n` of an `N x 3 x H x W` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let (batch, c, h, w) = t.dims4()?;
        if c != Self::CHANNELS || n >= batch {
            return Err(DehazeError::dims(format!(
                "cannot take image {n} from tensor of shape {:?}",
                t.shape()
            )));
        }
        let plane = h * w;
        let src = &t.data()[n * c * plane..(n + 1) * c * plane];
        Image::from_fn_clamped(h, w, |y, x, ch| src[ch * plane + y * w + x])
    }
}

/// A single-channel map of `f64` values with no range restriction.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DehazeError::invalid(format!(
                "map extent must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(DehazeError::dims(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Result<Plane> {
        if self.dims() != other.dims() {
            return Err(DehazeError::dims(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
