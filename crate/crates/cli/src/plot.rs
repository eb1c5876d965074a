//! Minimal raster charts. No text rendering; series colors follow
//! [`PALETTE`] in order and are listed in the accompanying log output.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
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

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing plot {}", path.display()))
}

/// One polyline per series over a shared, auto-scaled frame.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let mut img = canvas();
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        return save(&img, path);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = ((W - MARGIN - MARGIN / 2) as f64, (H - MARGIN - MARGIN / 2) as f64);
    let map = |(x, y): (f64, f64)| {
        (
            MARGIN as i64 + ((x - x0) / (x1 - x0) * pw).round() as i64,
            (H - MARGIN) as i64 - ((y - y0) / (y1 - y0) * ph).round() as i64,
        )
    };
    if y0 < 0.0 && y1 > 0.0 {
        let (_, zy) = map((x0, 0.0));
        line(&mut img, (MARGIN as i64, zy), ((W - MARGIN / 2) as i64, zy), Rgb([200, 200, 200]));
    }
    for (i, (_, s)) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let finite: Vec<_> = s.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        for w in finite.windows(2) {
            line(&mut img, map(w[0]), map(w[1]), color);
        }
        if let [p] = finite[..] {
            let (x, y) = map(p);
            line(&mut img, (x - 2, y), (x + 2, y), color);
        }
    }
    save(&img, path)
}

/// Bars for values in `[0, 1]` with gridlines at quarters.
pub fn bar_chart(values: &[(String, f64)], path: &Path) -> Result<()> {
    let mut img = canvas();
    let ph = (H - MARGIN - MARGIN / 2) as f64;
    for q in 1..=4 {
        let y = (H - MARGIN) as i64 - (q as f64 / 4.0 * ph) as i64;
        line(&mut img, (MARGIN as i64 + 1, y), ((W - MARGIN / 2) as i64, y), Rgb([220, 220, 220]));
    }
    let n = values.len().max(1) as u32;
    let slot = (W - MARGIN - MARGIN / 2) / n;
    for (i, (_, v)) in values.iter().enumerate() {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let top = (H - MARGIN) - (v * ph) as u32;
        let left = MARGIN + i as u32 * slot + slot / 5;
        let right = MARGIN + (i as u32 + 1) * slot - slot / 5;
        for x in left..right {
            for y in top..H - MARGIN {
                img.put_pixel(x, y, Rgb(PALETTE[i % PALETTE.len()]));
            }
        }
    }
    save(&img, path)
}
