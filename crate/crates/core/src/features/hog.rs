//! 31-channel HOG: 18 contrast-sensitive orientation bins, 9
//! contrast-insensitive bins and 4 texture (gradient energy) channels.
//!
//! Gradients use central differences on the color channel with the largest
//! magnitude. Each pixel votes into its snapped orientation bin with bilinear
//! spatial weights over the four nearest cells. Cells are normalized against
//! the four 2x2 cell blocks that contain them and truncated at 0.2.

use image::RgbImage;

use super::{FeatureStack, WindowGeometry};
use crate::error::{OtrError, Result};
use crate::grid::Grid;

pub const HOG_CHANNELS: usize = 31;
const ORIENTS: usize = 9;
const CLIP: f64 = 0.2;
const EPS: f64 = 1e-4;

/// Unit vectors of the nine undirected orientation bins.
fn bin_dirs() -> [(f64, f64); ORIENTS] {
    let mut d = [(0.0, 0.0); ORIENTS];
    for (i, v) in d.iter_mut().enumerate() {
        let a = i as f64 * std::f64::consts::PI / ORIENTS as f64;
        *v = (a.cos(), a.sin());
    }
    d
}

/// Snap a gradient to one of 18 directed bins (bin `o` and `o + 9` point in
/// opposite directions).
pub(crate) fn orientation_bin(dx: f64, dy: f64) -> usize {
    let mut best = 0.0;
    let mut bin = 0;
    for (o, (c, s)) in bin_dirs().iter().enumerate() {
        let dot = c * dx + s * dy;
        if dot > best {
            best = dot;
            bin = o;
        } else if -dot > best {
            best = -dot;
            bin = o + ORIENTS;
        }
    }
    bin
}

pub fn extract_hog(patch: &RgbImage, cell_size: usize) -> Result<FeatureStack> {
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    if cell_size == 0 || w < cell_size || h < cell_size {
        return Err(OtrError::PatchTooSmall(format!(
            "{w}x{h} with cell size {cell_size}"
        )));
    }
    if w % cell_size != 0 || h % cell_size != 0 {
        return Err(OtrError::InvalidArgument(format!(
            "patch {w}x{h} not divisible by cell size {cell_size}"
        )));
    }
    let (cw, ch) = (w / cell_size, h / cell_size);
    let hist = cell_histograms(patch, cell_size, cw, ch);

    // Gradient energy of each cell from the undirected histogram.
    let mut energy = vec![0.0; cw * ch];
    for (i, e) in energy.iter_mut().enumerate() {
        let cell = &hist[i * 2 * ORIENTS..(i + 1) * 2 * ORIENTS];
        *e = (0..ORIENTS).map(|o| (cell[o] + cell[o + ORIENTS]).powi(2)).sum();
    }
    let e_at = |x: isize, y: isize| -> f64 {
        let xi = x.clamp(0, cw as isize - 1) as usize;
        let yi = y.clamp(0, ch as isize - 1) as usize;
        energy[yi * cw + xi]
    };

    let mut channels = vec![Grid::zeros(cw, ch); HOG_CHANNELS];
    for y in 0..ch {
        for x in 0..cw {
            let (xi, yi) = (x as isize, y as isize);
            let mut norms = [0.0; 4];
            for (k, (dx, dy)) in [(-1, -1), (1, -1), (-1, 1), (1, 1)].iter().enumerate() {
                let s = e_at(xi, yi) + e_at(xi + dx, yi) + e_at(xi, yi + dy) + e_at(xi + dx, yi + dy);
                norms[k] = 1.0 / (s + EPS).sqrt();
            }
            let cell = &hist[(y * cw + x) * 2 * ORIENTS..(y * cw + x + 1) * 2 * ORIENTS];
            let mut texture = [0.0; 4];
            for (o, &v) in cell.iter().enumerate() {
                let mut sum = 0.0;
                for (k, n) in norms.iter().enumerate() {
                    let t = (v * n).min(CLIP);
                    sum += t;
                    texture[k] += t;
                }
                channels[o].set(x, y, 0.5 * sum);
            }
            for o in 0..ORIENTS {
                let v = cell[o] + cell[o + ORIENTS];
                let sum: f64 = norms.iter().map(|n| (v * n).min(CLIP)).sum();
                channels[2 * ORIENTS + o].set(x, y, 0.5 * sum);
            }
            for k in 0..4 {
                channels[3 * ORIENTS + k].set(x, y, 0.2357 * texture[k]);
            }
        }
    }
    FeatureStack::new(channels, cell_size, WindowGeometry::for_patch(w, h, cell_size))
}

/// Per-cell 18-bin magnitude histograms, laid out cell-major.
fn cell_histograms(patch: &RgbImage, cell: usize, cw: usize, ch: usize) -> Vec<f64> {
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    let px = |x: usize, y: usize, c: usize| patch.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0;
    let mut hist = vec![0.0; cw * ch * 2 * ORIENTS];
    let cs = cell as f64;
    for y in 0..h {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (mut gx, mut gy, mut best) = (0.0, 0.0, -1.0);
            for c in 0..3 {
                let dx = px(xp, y, c) - px(xm, y, c);
                let dy = px(x, yp, c) - px(x, ym, c);
                let m = dx * dx + dy * dy;
                if m > best {
                    best = m;
                    gx = dx;
                    gy = dy;
                }
            }
            let mag = best.sqrt();
            if mag == 0.0 {
                continue;
            }
            let bin = orientation_bin(gx, gy);
            // Bilinear spatial vote; cell centers sit at (i + 0.5) * cell.
            let fx = (x as f64 + 0.5) / cs - 0.5;
            let fy = (y as f64 + 0.5) / cs - 0.5;
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                let cy = y0 as isize + dy;
                if cy < 0 || cy >= ch as isize || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                    let cx = x0 as isize + dx;
                    if cx < 0 || cx >= cw as isize || wx == 0.0 {
                        continue;
                    }
                    let idx = (cy as usize * cw + cx as usize) * 2 * ORIENTS + bin;
                    hist[idx] += wx * wy * mag;
                }
            }
        }
    }
    hist
}
