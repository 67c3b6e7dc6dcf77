//! Dense multi-channel features: HOG (31 channels) plus color names
//! (10 channels), computed on a cell grid.

mod colornames;
mod hog;
mod window;

use std::sync::Arc;

use image::RgbImage;

use crate::error::{OtrError, Result};
use crate::grid::Grid;

pub use colornames::{extract_colornames, ColorNameTable, COLOR_NAMES, NAMES as COLOR_NAME_LABELS};
pub use hog::{extract_hog, HOG_CHANNELS};
pub use window::extract_window;

/// Where a feature window sits in the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowGeometry {
    /// Window center in image pixels.
    pub center: (f64, f64),
    /// Image-pixel extent covered by the window.
    pub size: (f64, f64),
    /// Feature grid dimensions.
    pub cells: (usize, usize),
    pub cell_size: usize,
}

impl WindowGeometry {
    /// Geometry of a patch taken as-is (one image pixel per patch pixel).
    pub fn for_patch(width: usize, height: usize, cell_size: usize) -> Self {
        WindowGeometry {
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            size: (width as f64, height as f64),
            cells: (width / cell_size.max(1), height / cell_size.max(1)),
            cell_size,
        }
    }

    /// Image pixels spanned by one feature cell, per axis.
    pub fn px_per_cell(&self) -> (f64, f64) {
        (
            self.size.0 / self.cells.0 as f64,
            self.size.1 / self.cells.1 as f64,
        )
    }

    /// Image position of a displacement measured in cells from the center.
    pub fn offset_to_image(&self, dx_cells: f64, dy_cells: f64) -> (f64, f64) {
        let (sx, sy) = self.px_per_cell();
        (self.center.0 + dx_cells * sx, self.center.1 + dy_cells * sy)
    }

    /// Image position of the center of cell `(x, y)`.
    pub fn cell_center(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.px_per_cell();
        let x0 = self.center.0 - (self.size.0 - sx) / 2.0;
        let y0 = self.center.1 - (self.size.1 - sy) / 2.0;
        (x0 + x * sx, y0 + y * sy)
    }
}

/// Fixed learning window: a padded region around the target, resampled to
/// an odd number of cells so the target center falls on a cell center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Template {
    /// Target extent in image pixels at scale 1.
    pub target: (f64, f64),
    /// Window extent in image pixels at scale 1.
    pub window: (f64, f64),
    /// Resampled patch size in pixels.
    pub patch: (usize, usize),
    pub cell_size: usize,
}

impl Template {
    /// `padding` widens each axis by `padding * sqrt(w * h)`; the window is
    /// then resampled so its square-root area is about `template_size`.
    pub fn new(target: (f64, f64), padding: f64, template_size: f64, cell_size: usize) -> Result<Self> {
        if !(target.0 > 0.0 && target.1 > 0.0 && padding >= 0.0 && template_size > 0.0) || cell_size == 0 {
            return Err(OtrError::InvalidArgument(format!(
                "template target {target:?} padding {padding} size {template_size}"
            )));
        }
        let pad = padding * (target.0 * target.1).sqrt();
        let window = (target.0 + pad, target.1 + pad);
        let k = template_size / (window.0 * window.1).sqrt();
        let odd_cells = |v: f64| -> usize {
            let c = ((v * k) / cell_size as f64).round().max(3.0) as usize;
            if c.is_multiple_of(2) {
                c + 1
            } else {
                c
            }
        };
        let cells = (odd_cells(window.0), odd_cells(window.1));
        Ok(Template {
            target,
            window,
            patch: (cells.0 * cell_size, cells.1 * cell_size),
            cell_size,
        })
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.patch.0 / self.cell_size, self.patch.1 / self.cell_size)
    }

    /// Image pixels per patch pixel at scale 1, per axis.
    pub fn resolution(&self) -> (f64, f64) {
        (self.window.0 / self.patch.0 as f64, self.window.1 / self.patch.1 as f64)
    }

    /// Target extent in cells.
    pub fn target_cells(&self) -> (f64, f64) {
        let (rx, ry) = self.resolution();
        let c = self.cell_size as f64;
        (self.target.0 / rx / c, self.target.1 / ry / c)
    }

    pub fn geometry(&self, center: (f64, f64), scale: f64) -> WindowGeometry {
        WindowGeometry {
            center,
            size: (self.window.0 * scale, self.window.1 * scale),
            cells: self.cells(),
            cell_size: self.cell_size,
        }
    }

    /// Features of the window at `center` and `scale`, optionally tapered by
    /// the cosine window.
    pub fn sample(
        &self,
        img: &RgbImage,
        extractor: &FeatureExtractor,
        center: (f64, f64),
        scale: f64,
        taper: bool,
    ) -> Result<FeatureStack> {
        let patch = extract_window(img, center, self.window, scale, self.patch)?;
        let mut stack = extractor.extract(&patch, self.geometry(center, scale))?;
        if taper {
            apply_cosine_window(&mut stack);
        }
        Ok(stack)
    }

    /// Features over an arbitrary region (image pixels at `scale`) sampled
    /// at the template resolution. The region is rounded to whole cells, at
    /// least the template's own cell grid.
    pub fn sample_region(
        &self,
        img: &RgbImage,
        extractor: &FeatureExtractor,
        center: (f64, f64),
        region: (f64, f64),
        scale: f64,
    ) -> Result<FeatureStack> {
        let (rx, ry) = self.resolution();
        let c = self.cell_size as f64;
        let (tw, th) = self.cells();
        let cells = (
            ((region.0 / scale / rx / c).round() as usize).max(tw),
            ((region.1 / scale / ry / c).round() as usize).max(th),
        );
        let out = (cells.0 * self.cell_size, cells.1 * self.cell_size);
        let size = (out.0 as f64 * rx, out.1 as f64 * ry);
        let patch = extract_window(img, center, size, scale, out)?;
        let geo = WindowGeometry {
            center,
            size: (size.0 * scale, size.1 * scale),
            cells,
            cell_size: self.cell_size,
        };
        extractor.extract(&patch, geo)
    }
}

/// A set of equally sized feature channels over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub channels: Vec<Grid>,
    pub cell_size: usize,
    pub origin: WindowGeometry,
}

impl FeatureStack {
    pub fn new(channels: Vec<Grid>, cell_size: usize, origin: WindowGeometry) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| OtrError::InvalidArgument("feature stack needs a channel".into()))?;
        let dims = first.dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(OtrError::DimensionMismatch("feature channels differ in size".into()));
        }
        Ok(FeatureStack {
            channels,
            cell_size,
            origin,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(Grid::is_finite)
    }

    pub fn scaled(&self, c: f64) -> FeatureStack {
        FeatureStack {
            channels: self.channels.iter().map(|g| g.map(|v| v * c)).collect(),
            ..self.clone()
        }
    }
}

/// Separable Hann window: zero on the border rows and columns, one at the
/// center cell of odd-sized grids.
pub fn cosine_window(width: usize, height: usize) -> Grid {
    let hann = |n: usize| -> Vec<f64> {
        if n < 2 {
            return vec![1.0; n];
        }
        (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    0.0
                } else {
                    (std::f64::consts::PI * i as f64 / (n - 1) as f64).sin().powi(2)
                }
            })
            .collect()
    };
    let wx = hann(width);
    let wy = hann(height);
    Grid::from_fn(width, height, |x, y| wx[x] * wy[y])
}

pub fn apply_cosine_window(stack: &mut FeatureStack) {
    let (w, h) = stack.dims();
    let win = cosine_window(w, h);
    for ch in &mut stack.channels {
        *ch = ch.zip_map(&win, |a, b| a * b);
    }
}

/// HOG plus color names (or a plain intensity channel for monochrome input).
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub table: Arc<ColorNameTable>,
    pub cell_size: usize,
}

impl FeatureExtractor {
    pub fn new(table: Arc<ColorNameTable>, cell_size: usize) -> Self {
        FeatureExtractor { table, cell_size }
    }

    pub fn with_builtin_table(cell_size: usize) -> Self {
        Self::new(ColorNameTable::builtin(), cell_size)
    }

    pub fn extract(&self, patch: &RgbImage, origin: WindowGeometry) -> Result<FeatureStack> {
        let hog = extract_hog(patch, self.cell_size)?;
        let mut channels = hog.channels;
        if is_monochrome(patch) {
            channels.push(intensity_channel(patch, self.cell_size));
        } else {
            channels.extend(extract_colornames(patch, &self.table, self.cell_size)?.channels);
        }
        FeatureStack::new(channels, self.cell_size, origin)
    }

    pub fn num_channels(&self, monochrome: bool) -> usize {
        HOG_CHANNELS + if monochrome { 1 } else { COLOR_NAMES - 1 }
    }
}

fn is_monochrome(patch: &RgbImage) -> bool {
    patch.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2])
}

/// Cell-averaged intensity centered on zero.
fn intensity_channel(patch: &RgbImage, cell: usize) -> Grid {
    let (w, h) = (patch.width() as usize / cell, patch.height() as usize / cell);
    let norm = 1.0 / (cell * cell) as f64;
    Grid::from_fn(w, h, |cx, cy| {
        let mut s = 0.0;
        for y in cy * cell..(cy + 1) * cell {
            for x in cx * cell..(cx + 1) * cell {
                s += patch.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0;
            }
        }
        s * norm - 0.5
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn hann_border_zero_center_one() {
        let w = cosine_window(9, 7);
        for x in 0..9 {
            assert_eq!(w.get(x, 0), 0.0);
            assert_eq!(w.get(x, 6), 0.0);
        }
        for y in 0..7 {
            assert_eq!(w.get(0, y), 0.0);
            assert_eq!(w.get(8, y), 0.0);
        }
        assert!((w.get(4, 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn extractor_channel_counts() {
        let fx = FeatureExtractor::with_builtin_table(4);
        let color = RgbImage::from_fn(32, 24, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, 90]));
        let geo = WindowGeometry::for_patch(32, 24, 4);
        let s = fx.extract(&color, geo).unwrap();
        assert_eq!(s.num_channels(), 41);
        assert_eq!(s.dims(), (8, 6));

        let gray = RgbImage::from_fn(32, 24, |x, _| Rgb([(x * 7) as u8; 3]));
        let s = fx.extract(&gray, geo).unwrap();
        assert_eq!(s.num_channels(), 32);
    }

    #[test]
    fn extraction_is_bit_reproducible() {
        let fx = FeatureExtractor::with_builtin_table(4);
        let patch = RgbImage::from_fn(40, 40, |x, y| Rgb([(x * y % 251) as u8, (x * 3) as u8, (y * 11) as u8]));
        let geo = WindowGeometry::for_patch(40, 40, 4);
        assert_eq!(fx.extract(&patch, geo).unwrap(), fx.extract(&patch, geo).unwrap());
    }

    #[test]
    fn template_cells_are_odd() {
        let t = Template::new((60.0, 20.0), 1.5, 200.0, 4).unwrap();
        let (cw, ch) = t.cells();
        assert!(cw % 2 == 1 && ch % 2 == 1);
        let pad = 1.5 * (1200f64).sqrt();
        assert!((t.window.0 - (60.0 + pad)).abs() < 1e-12);
        let (rx, ry) = t.resolution();
        assert!(((t.patch.0 as f64 * t.patch.1 as f64).sqrt() - 200.0).abs() < 12.0);
        assert!((t.target_cells().0 - 60.0 / rx / 4.0).abs() < 1e-12 && ry > 0.0);
    }

    #[test]
    fn geometry_offsets() {
        let g = WindowGeometry {
            center: (100.0, 50.0),
            size: (80.0, 40.0),
            cells: (20, 10),
            cell_size: 4,
        };
        assert_eq!(g.offset_to_image(2.0, -1.0), (108.0, 46.0));
        let (x, y) = g.cell_center(0.0, 0.0);
        assert_eq!((x, y), (62.0, 32.0));
    }
}
