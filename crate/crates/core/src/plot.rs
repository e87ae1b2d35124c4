//! Minimal PNG line plots (axes + polylines + legend swatches). Side
//! artifacts for human inspection only; nothing parses these back.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: i64 = 48;

const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    // Bresenham
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

// 5x7 digit/letter subset sufficient for axis tick numbers and titles.
fn glyph(ch: char) -> Option<[u8; 7]> {
    // each byte is one row, low 5 bits used, MSB-left
    let g: [u8; 7] = match ch.to_ascii_lowercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        'e' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'a' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'b' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'c' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'f' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'g' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'h' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'i' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'k' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'l' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'm' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'n' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'o' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'r' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        's' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        't' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'u' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'v' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'x' => [0x11, 0x0A, 0x04, 0x04, 0x04, 0x0A, 0x11],
        'y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        'j' => [0x01, 0x01, 0x01, 0x01, 0x11, 0x11, 0x0E],
        ' ' => [0; 7],
        _ => return None,
    };
    Some(g)
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, c: [u8; 3]) {
    let mut cx = x;
    for ch in s.chars() {
        if let Some(g) = glyph(ch) {
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (1 << (4 - col)) != 0 {
                        put(img, cx + col as i64, y + row as i64, c);
                    }
                }
            }
        }
        cx += 6;
    }
}

/// One line plot: categorical/numeric x labels, multiple named series.
/// NaN points are skipped (the polyline breaks around them).
pub fn line_plot(
    path: &Path,
    title: &str,
    x_labels: &[String],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    if x_labels.is_empty() || series.is_empty() {
        return Err(Error::State("empty plot".into()));
    }
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let black = [0u8, 0, 0];
    let (x0, y0) = (MARGIN, H as i64 - MARGIN);
    let (x1, y1) = (W as i64 - MARGIN, MARGIN);
    line(&mut img, x0, y0, x1, y0, black);
    line(&mut img, x0, y0, x0, y1, black);
    text(&mut img, x0, 8, title, black);

    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() || lo == hi { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) } else { (lo, hi) };
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);

    let px = |i: usize| -> i64 {
        if x_labels.len() == 1 {
            (x0 + x1) / 2
        } else {
            x0 + (x1 - x0) * i as i64 / (x_labels.len() - 1) as i64
        }
    };
    let py = |v: f64| -> i64 { y0 - ((v - lo) / (hi - lo) * (y0 - y1) as f64) as i64 };

    let tick_every = x_labels.len().div_ceil(8);
    for (i, lab) in x_labels.iter().enumerate() {
        if i % tick_every != 0 && i != x_labels.len() - 1 {
            continue;
        }
        let x = px(i);
        line(&mut img, x, y0, x, y0 + 4, black);
        text(&mut img, x - 3 * lab.len() as i64, y0 + 8, lab, black);
    }
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = py(v);
        line(&mut img, x0 - 4, y, x0, y, black);
        text(&mut img, 2, y - 3, &format!("{v:.3}"), black);
    }

    for (si, (name, vals)) in series.iter().enumerate() {
        let c = PALETTE[si % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in vals.iter().enumerate().take(x_labels.len()) {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = (px(i), py(v));
            if let Some(q) = prev {
                line(&mut img, q.0, q.1, p.0, p.1, c);
            }
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    put(&mut img, p.0 + dx, p.1 + dy, c);
                }
            }
            prev = Some(p);
        }
        let ly = y1 + 12 * si as i64;
        line(&mut img, x1 - 90, ly + 3, x1 - 70, ly + 3, c);
        text(&mut img, x1 - 64, ly, name, black);
    }
    img.save(path).map_err(|e| Error::State(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.png");
        line_plot(
            &p,
            "loss vs step",
            &["0".into(), "10".into(), "20".into()],
            &[("seed 0".into(), vec![1.0, 0.5, 0.25]), ("seed 1".into(), vec![1.2, f64::NAN, 0.3])],
        )
        .unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!(img.width(), 640);
    }

    #[test]
    fn empty_plot_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(line_plot(&dir.path().join("x.png"), "t", &[], &[]).is_err());
    }
}
