//! EDSR decay-curve rendering: y = DSR·e^(−OT) per record, with the
//! measured (OT, EDSR) point marked on each curve.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::DefenseReport;
use crate::error::{MadError, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;

const PALETTE: [[u8; 3]; 8] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [140, 86, 75],
    [23, 190, 207],
    [127, 127, 127],
];

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Render one PNG of DSR-vs-OT decay curves for every record in the report
/// and return the written paths.
pub fn plot_edsr_curves(report: &DefenseReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.records.is_empty() {
        return Err(MadError::Data("cannot plot an empty defense report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let max_dsr = report.records.iter().map(|r| r.dsr).fold(0.0f64, f64::max).max(1.0);
    let max_ot = report.records.iter().map(|r| r.ot_hours).fold(0.0f64, f64::max).max(1.0) * 1.5;

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let to_px = |ot: f64, v: f64| -> (i64, i64) {
        let x = MARGIN as f64 + (ot / max_ot) * plot_w;
        let y = (HEIGHT - MARGIN) as f64 - (v / max_dsr) * plot_h;
        (x.round() as i64, y.round() as i64)
    };

    // Axes.
    for x in MARGIN..=WIDTH - MARGIN {
        put(&mut img, x as i64, (HEIGHT - MARGIN) as i64, [0, 0, 0]);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        put(&mut img, MARGIN as i64, y as i64, [0, 0, 0]);
    }

    for (i, rec) in report.records.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // Decay curve sampled per pixel column.
        let mut prev: Option<(i64, i64)> = None;
        for px in 0..=(plot_w as u32) {
            let ot = (px as f64 / plot_w) * max_ot;
            let v = rec.dsr * (-ot).exp();
            let (x, y) = to_px(ot, v);
            if let Some((px0, py0)) = prev {
                // Fill vertical gaps so the curve is connected.
                let (lo, hi) = if py0 < y { (py0, y) } else { (y, py0) };
                for yy in lo..=hi {
                    put(&mut img, px0, yy, color);
                }
            }
            put(&mut img, x, y, color);
            prev = Some((x, y));
        }
        // Measured operating point.
        let (cx, cy) = to_px(rec.ot_hours, rec.edsr);
        for dx in -2..=2i64 {
            for dy in -2..=2i64 {
                put(&mut img, cx + dx, cy + dy, color);
            }
        }
    }

    let path = dir.join(format!("edsr_curves_{}.png", report.method));
    img.save(&path).map_err(|e| MadError::Io(format!("{}: {e}", path.display())))?;
    Ok(vec![path])
}
