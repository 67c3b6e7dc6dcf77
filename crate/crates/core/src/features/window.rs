use image::{Rgb, RgbImage};

use crate::error::{OtrError, Result};

/// Resample the image region of `size * scale` pixels centered at `center`
/// into an `out` sized patch. Samples outside the image replicate the
/// nearest edge pixel.
pub fn extract_window(
    img: &RgbImage,
    center: (f64, f64),
    size: (f64, f64),
    scale: f64,
    out: (usize, usize),
) -> Result<RgbImage> {
    if !(size.0 > 0.0 && size.1 > 0.0 && scale > 0.0) || out.0 == 0 || out.1 == 0 {
        return Err(OtrError::InvalidArgument(format!(
            "window size {size:?} scale {scale} out {out:?}"
        )));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(center.0 > -0.5 && center.0 < w - 0.5 && center.1 > -0.5 && center.1 < h - 0.5) {
        return Err(OtrError::OutsideImage);
    }
    let step_x = size.0 * scale / out.0 as f64;
    let step_y = size.1 * scale / out.1 as f64;
    let x0 = center.0 - (out.0 as f64 - 1.0) / 2.0 * step_x;
    let y0 = center.1 - (out.1 as f64 - 1.0) / 2.0 * step_y;
    let xs: Vec<(usize, usize, f64)> = (0..out.0).map(|i| taps(x0 + i as f64 * step_x, img.width())).collect();
    let ys: Vec<(usize, usize, f64)> = (0..out.1).map(|j| taps(y0 + j as f64 * step_y, img.height())).collect();

    let mut patch = RgbImage::new(out.0 as u32, out.1 as u32);
    for (j, &(ya, yb, fy)) in ys.iter().enumerate() {
        for (i, &(xa, xb, fx)) in xs.iter().enumerate() {
            let p00 = img.get_pixel(xa as u32, ya as u32).0;
            let p10 = img.get_pixel(xb as u32, ya as u32).0;
            let p01 = img.get_pixel(xa as u32, yb as u32).0;
            let p11 = img.get_pixel(xb as u32, yb as u32).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bot = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                px[c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            patch.put_pixel(i as u32, j as u32, Rgb(px));
        }
    }
    Ok(patch)
}

/// Bilinear taps for coordinate `x` with clamp-to-edge.
fn taps(x: f64, n: u32) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let x = x.clamp(0.0, max);
    let a = x.floor();
    let f = x - a;
    let a = a as usize;
    let b = (a + 1).min(n as usize - 1);
    (a, b, f)
}
