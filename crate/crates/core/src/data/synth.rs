//! Synthetic depth maps and scenes for desk-scale data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::haze::DepthMap;
use crate::image::{Image, Plane};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthKind {
    /// Linear in the column index, `min` at the left edge and `max` at the right.
    Ramp {
        min: f64,
        max: f64,
    },
    /// `near` for columns before `column`, `far` from it on.
    Step {
        column: usize,
        near: f64,
        far: f64,
    },
    Constant {
        value: f64,
    },
    /// `min` at the center rising to `max` at the corners.
    Radial {
        min: f64,
        max: f64,
    },
}

fn check_depth(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(DehazeError::invalid(format!(
            "{name} depth must be finite and nonnegative, got {v}"
        )));
    }
    Ok(())
}

pub fn generate_depth(kind: &DepthKind, height: usize, width: usize) -> Result<DepthMap> {
    if height == 0 || width == 0 {
        return Err(DehazeError::invalid(format!(
            "depth map must be nonempty, got {height}x{width}"
        )));
    }
    let plane = match *kind {
        DepthKind::Ramp { min, max } => {
            check_depth("min", min)?;
            check_depth("max", max)?;
            let span = (width.max(2) - 1) as f64;
            Plane::from_fn(height, width, |_, x| min + (max - min) * x as f64 / span)?
        }
        DepthKind::Step { column, near, far } => {
            check_depth("near", near)?;
            check_depth("far", far)?;
            if column > width {
                return Err(DehazeError::invalid(format!(
                    "step column {column} beyond width {width}"
                )));
            }
            Plane::from_fn(height, width, |_, x| if x < column { near } else { far })?
        }
        DepthKind::Constant { value } => {
            check_depth("constant", value)?;
            Plane::filled(height, width, value)?
        }
        DepthKind::Radial { min, max } => {
            check_depth("min", min)?;
            check_depth("max", max)?;
            let cy = (height - 1) as f64 / 2.0;
            let cx = (width - 1) as f64 / 2.0;
            let reach = (cy * cy + cx * cx).sqrt();
            Plane::from_fn(height, width, |y, x| {
                if reach == 0.0 {
                    return min;
                }
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                min + (max - min) * (dy * dy + dx * dx).sqrt() / reach
            })?
        }
    };
    DepthMap::new(plane)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

/// A smooth colored background with a few flat rectangles and discs.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = random_color(&mut rng);
    let bottom = random_color(&mut rng);
    let tilt: f64 = rng.random_range(-0.3..0.3);

    enum Shape {
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
        Disc { cy: f64, cx: f64, r: f64 },
    }
    let (h, w) = (height as f64, width as f64);
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
                let (dy, dx) = (rng.random_range(0.15..0.5) * h, rng.random_range(0.15..0.5) * w);
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + dy,
                    x1: x0 + dx,
                }
            } else {
                Shape::Disc {
                    cy: rng.random_range(0.0..h),
                    cx: rng.random_range(0.0..w),
                    r: rng.random_range(0.1..0.3) * h.min(w),
                }
            };
            (shape, random_color(&mut rng))
        })
        .collect();

    Image::from_fn_clamped(height, width, |y, x, c| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = None;
        for (shape, col) in shapes.iter().rev() {
            let inside = match *shape {
                Shape::Rect { y0, x0, y1, x1 } => fy >= y0 && fy < y1 && fx >= x0 && fx < x1,
                Shape::Disc { cy, cx, r } => (fy - cy).powi(2) + (fx - cx).powi(2) < r * r,
            };
            if inside {
                v = Some(col[c]);
                break;
            }
        }
        v.unwrap_or_else(|| {
            let s = (fy / h + tilt * (fx / w - 0.5)).clamp(0.0, 1.0);
            top[c] * (1.0 - s) + bottom[c] * s
        })
    })
}
