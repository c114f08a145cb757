//! 8-bit RGB images and 16-bit grayscale depth maps as PNG files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{DehazeError, Result};
use crate::haze::DepthMap;
use crate::image::{Image, Plane};

/// Depth represented by the largest 16-bit code unless a manifest says otherwise.
pub const DEFAULT_DEPTH_SCALE: f64 = 10.0;

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| DehazeError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let malformed = |e: png::DecodingError| DehazeError::MalformedPng {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(malformed)?;
    let size = reader.output_buffer_size().ok_or_else(|| DehazeError::MalformedPng {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(malformed)?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| DehazeError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let failed = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => DehazeError::io(path, source),
        other => DehazeError::invalid(format!("cannot encode {}: {other}", path.display())),
    };
    let mut writer = encoder.write_header().map_err(failed)?;
    writer.write_image_data(bytes).map_err(failed)?;
    writer.finish().map_err(failed)
}

/// Reads an 8-bit RGB PNG, mapping each sample `v` to `v / 255`.
pub fn read_image(path: &Path) -> Result<Image> {
    let d = decode(path)?;
    if d.color != ColorType::Rgb || d.depth != BitDepth::Eight {
        return Err(DehazeError::ChannelLayout {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit RGB, found {:?} at {:?}", d.color, d.depth),
        });
    }
    Image::new(d.height, d.width, d.bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Nearest 8-bit code of a sample in `[0, 1]`.
pub fn quantize_sample(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image as it will read back after an 8-bit round trip.
pub fn quantize_image(image: &Image) -> Image {
    let (h, w) = image.dims();
    Image::new(
        h,
        w,
        image
            .data()
            .iter()
            .map(|&v| quantize_sample(v) as f64 / 255.0)
            .collect(),
    )
    .expect("dimensions already valid")
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize_sample(v)).collect();
    let (h, w) = image.dims();
    encode(path, w, h, ColorType::Rgb, BitDepth::Eight, &bytes)
}

fn check_scale(depth_scale: f64) -> Result<()> {
    if !(depth_scale.is_finite() && depth_scale > 0.0) {
        return Err(DehazeError::invalid(format!(
            "depth scale must be positive, got {depth_scale}"
        )));
    }
    Ok(())
}

/// Reads a 16-bit grayscale PNG, mapping each code `v` to `v / 65535 * depth_scale`.
pub fn read_depth(path: &Path, depth_scale: f64) -> Result<DepthMap> {
    check_scale(depth_scale)?;
    let d = decode(path)?;
    if d.color != ColorType::Grayscale || d.depth != BitDepth::Sixteen {
        return Err(DehazeError::ChannelLayout {
            path: path.to_path_buf(),
            reason: format!("expected 16-bit grayscale, found {:?} at {:?}", d.color, d.depth),
        });
    }
    let data = d
        .bytes
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0 * depth_scale)
        .collect();
    DepthMap::new(Plane::new(d.height, d.width, data)?)
}

fn depth_code(d: f64, depth_scale: f64) -> Result<u16> {
    if d > depth_scale {
        return Err(DehazeError::invalid(format!(
            "depth {d} exceeds the representable range [0, {depth_scale}]"
        )));
    }
    Ok((d / depth_scale * 65535.0).round() as u16)
}

/// The depth map as it will read back after a 16-bit round trip.
pub fn quantize_depth(depth: &DepthMap, depth_scale: f64) -> Result<DepthMap> {
    check_scale(depth_scale)?;
    let (h, w) = depth.dims();
    let data = depth
        .plane()
        .data()
        .iter()
        .map(|&d| Ok(depth_code(d, depth_scale)? as f64 / 65535.0 * depth_scale))
        .collect::<Result<Vec<f64>>>()?;
    DepthMap::new(Plane::new(h, w, data)?)
}

pub fn write_depth(depth: &DepthMap, path: &Path, depth_scale: f64) -> Result<()> {
    check_scale(depth_scale)?;
    let mut bytes = Vec::with_capacity(depth.plane().data().len() * 2);
    for &d in depth.plane().data() {
        bytes.extend_from_slice(&depth_code(d, depth_scale)?.to_be_bytes());
    }
    let (h, w) = depth.dims();
    encode(path, w, h, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}
