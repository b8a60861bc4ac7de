//! Flow rendering: colour-wheel images and per-cell arrow overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hue segments of the wheel: red→yellow, yellow→green, green→cyan,
/// cyan→blue, blue→magenta, magenta→red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];
pub const WHEEL_BINS: usize = 55;

/// The 55-entry piecewise-linear colour wheel. Entry 0 is the colour of
/// rightward motion; indices grow clockwise on screen (y down).
pub fn color_wheel() -> Vec<[u8; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_BINS);
    // (channel that ramps, ramp up?) per segment; the other two are fixed
    let ramps: [([u8; 3], usize, bool); 6] = [
        ([255, 0, 0], 1, true),
        ([255, 255, 0], 0, false),
        ([0, 255, 0], 2, true),
        ([0, 255, 255], 1, false),
        ([0, 0, 255], 0, true),
        ([255, 0, 255], 2, false),
    ];
    for (&n, &(base, ch, up)) in SEGMENTS.iter().zip(&ramps) {
        for i in 0..n {
            let mut c = base;
            let f = (255 * i / n) as u8;
            c[ch] = if up { f } else { 255 - f };
            wheel.push(c);
        }
    }
    wheel
}

/// Normalisation for [`flow_to_rgb`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaxMagnitude {
    /// Largest magnitude in the field (zero fields stay white).
    Auto,
    Fixed(f32),
}

fn flow_hw(flow: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match flow.chw() {
        Some((2, h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::shape(op, format!("expected 2xHxW flow, got {:?}", flow.shape()))),
    }
}

/// Colour of a flow vector already divided by the normalising magnitude.
pub fn flow_color(wheel: &[[u8; 3]], u: f64, v: f64) -> [u8; 3] {
    let rad = (u * u + v * v).sqrt();
    if rad == 0.0 {
        return [255; 3];
    }
    let n = wheel.len();
    // angle measured clockwise from +x, mapped onto [0, n)
    let a = v.atan2(u).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
    let fk = a * n as f64;
    let k0 = (fk.floor() as usize) % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let col = ((1.0 - f) * wheel[k0][c] as f64 + f * wheel[k1][c] as f64) / 255.0;
        // saturation grows with magnitude; beyond the maximum the colour darkens
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        *o = (255.0 * col).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn flow_to_rgb(flow: &Tensor, max_magnitude: MaxMagnitude) -> Result<RgbImage> {
    let (h, w) = flow_hw(flow, "flow_to_rgb")?;
    let (u, v) = (flow.channel(0), flow.channel(1));
    let max = match max_magnitude {
        MaxMagnitude::Fixed(m) if m > 0.0 && m.is_finite() => m as f64,
        MaxMagnitude::Fixed(m) => {
            return Err(Error::InvalidArgument(format!(
                "max magnitude must be positive, got {m}"
            )))
        }
        MaxMagnitude::Auto => u
            .iter()
            .zip(v)
            .map(|(&a, &b)| (a as f64).hypot(b as f64))
            .fold(0.0, f64::max),
    };
    let wheel = color_wheel();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let c = if max > 0.0 {
            flow_color(&wheel, u[i] as f64 / max, v[i] as f64 / max)
        } else {
            [255; 3]
        };
        *px = Rgb(c);
    }
    Ok(img)
}

/// Strongest flow vector of one grid cell, anchored at the cell centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arrow {
    pub x: f32,
    pub y: f32,
    pub u: f32,
    pub v: f32,
}

/// One arrow per `cell`×`cell` block holding its largest-magnitude vector;
/// blocks without motion get none.
pub fn cell_arrows(flow: &Tensor, cell: usize) -> Result<Vec<Arrow>> {
    let (h, w) = flow_hw(flow, "cell_arrows")?;
    if cell == 0 {
        return Err(Error::InvalidArgument("arrow cell size must be positive".into()));
    }
    let (u, v) = (flow.channel(0), flow.channel(1));
    let mut arrows = Vec::new();
    for cy in (0..h).step_by(cell) {
        for cx in (0..w).step_by(cell) {
            let (y1, x1) = ((cy + cell).min(h), (cx + cell).min(w));
            let mut best = (0.0f32, 0.0f32, 0.0f32);
            for y in cy..y1 {
                for x in cx..x1 {
                    let (a, b) = (u[y * w + x], v[y * w + x]);
                    let m = a.hypot(b);
                    if m > best.0 {
                        best = (m, a, b);
                    }
                }
            }
            if best.0 > 0.0 {
                arrows.push(Arrow {
                    x: (cx + x1 - 1) as f32 / 2.0,
                    y: (cy + y1 - 1) as f32 / 2.0,
                    u: best.1,
                    v: best.2,
                });
            }
        }
    }
    Ok(arrows)
}

/// Bresenham line, clipped to the image.
fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = from;
    let (dx, dy) = ((to.0 - x).abs(), -(to.1 - y).abs());
    let (sx, sy) = (if x < to.0 { 1 } else { -1 }, if y < to.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws the [`cell_arrows`] of `flow` over `image`. Arrow length equals the
/// flow magnitude in pixels.
pub fn arrow_grid_overlay(image: &RgbImage, flow: &Tensor, cell: usize) -> Result<RgbImage> {
    let (h, w) = flow_hw(flow, "arrow_grid_overlay")?;
    if (image.width() as usize, image.height() as usize) != (w, h) {
        return Err(Error::shape(
            "arrow_grid_overlay",
            format!("image {}x{} vs flow {w}x{h}", image.width(), image.height()),
        ));
    }
    let mut out = image.clone();
    let ink = Rgb([0, 0, 0]);
    for a in cell_arrows(flow, cell)? {
        let start = (a.x.round() as i64, a.y.round() as i64);
        let tip_f = (a.x + a.u, a.y + a.v);
        let tip = (tip_f.0.round() as i64, tip_f.1.round() as i64);
        draw_line(&mut out, start, tip, ink);
        // two barbs at ±30° from the reversed direction, a third of the length
        let len = a.u.hypot(a.v);
        let barb = (len / 3.0).clamp(1.0, cell as f32 / 2.0);
        let back = (-a.u / len, -a.v / len);
        for s in [-1.0f32, 1.0] {
            let (c, sn) = (30f32.to_radians().cos(), s * 30f32.to_radians().sin());
            let d = (back.0 * c - back.1 * sn, back.0 * sn + back.1 * c);
            let end = (
                (tip_f.0 + barb * d.0).round() as i64,
                (tip_f.1 + barb * d.1).round() as i64,
            );
            draw_line(&mut out, tip, end, ink);
        }
    }
    Ok(out)
}

pub fn save_png(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Image(other.to_string()),
        })
}
