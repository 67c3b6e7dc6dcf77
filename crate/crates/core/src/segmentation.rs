//! Foreground segmentation from color and depth histograms.
//!
//! Per-pixel posteriors come from Bayes' rule over the product of a color
//! and a depth likelihood, are smoothed by repeated 3x3 averaging and then
//! thresholded.

use crate::error::{OtrError, Result};
use crate::grid::Grid;
use crate::ingest::{BBox, Frame, PixelRect};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegParams {
    /// Bins per RGB axis.
    pub color_bins: usize,
    pub depth_bin_mm: f64,
    pub depth_max_mm: f64,
    pub fg_prior: f64,
    pub smoothing_iters: usize,
    pub update_rate: f64,
}

impl Default for SegParams {
    fn default() -> Self {
        SegParams {
            color_bins: 16,
            depth_bin_mm: 50.0,
            depth_max_mm: 8000.0,
            fg_prior: 0.5,
            smoothing_iters: 4,
            update_rate: 0.05,
        }
    }
}

impl SegParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (1..=256).contains(&self.color_bins)
            && self.depth_bin_mm > 0.0
            && self.depth_max_mm >= self.depth_bin_mm
            && self.fg_prior > 0.0
            && self.fg_prior < 1.0
            && (0.0..=1.0).contains(&self.update_rate);
        if ok {
            Ok(())
        } else {
            Err(OtrError::Config(format!("invalid segmentation parameters {self:?}")))
        }
    }

    fn depth_bins(&self) -> usize {
        (self.depth_max_mm / self.depth_bin_mm).ceil() as usize
    }

    fn color_index(&self, rgb: [u8; 3]) -> usize {
        let q = |v: u8| v as usize * self.color_bins / 256;
        (q(rgb[0]) * self.color_bins + q(rgb[1])) * self.color_bins + q(rgb[2])
    }

    fn depth_index(&self, mm: u16) -> Option<usize> {
        if mm == 0 || mm as f64 >= self.depth_max_mm {
            return None;
        }
        Some(((mm as f64 / self.depth_bin_mm) as usize).min(self.depth_bins() - 1))
    }
}

/// Normalized foreground and background histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorDepthModel {
    pub params: SegParams,
    pub fg_color: Vec<f64>,
    pub bg_color: Vec<f64>,
    /// `None` when no valid depth was available; segmentation is then color-only.
    pub fg_depth: Option<Vec<f64>>,
    pub bg_depth: Option<Vec<f64>>,
}

impl ColorDepthModel {
    pub fn depth_usable(&self) -> bool {
        self.fg_depth.is_some() && self.bg_depth.is_some()
    }
}

/// Binary mask over an image region plus the posterior it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    /// Region in image pixels; `mask` and `prob` are indexed relative to it.
    pub region: PixelRect,
    pub mask: Grid,
    pub prob: Grid,
}

impl SegMask {
    pub fn new(region: PixelRect, mask: Grid, prob: Grid) -> Result<Self> {
        let dims = (region.width(), region.height());
        if mask.dims() != dims || prob.dims() != dims {
            return Err(OtrError::DimensionMismatch(format!(
                "mask {:?} for region {dims:?}",
                mask.dims()
            )));
        }
        Ok(SegMask { region, mask, prob })
    }

    pub fn empty(region: PixelRect) -> Self {
        let (w, h) = (region.width(), region.height());
        SegMask {
            region,
            mask: Grid::zeros(w, h),
            prob: Grid::zeros(w, h),
        }
    }

    /// Whether image pixel `(x, y)` is foreground.
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.region.contains(x, y) && self.mask.get(x - self.region.x0, y - self.region.y0) > 0.5
    }

    pub fn area(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&v| v > 0.5).count()
    }

    /// Foreground pixels inside `rect`.
    pub fn area_within(&self, rect: &PixelRect) -> usize {
        let mut n = 0;
        for y in rect.y0.max(self.region.y0)..rect.y1.min(self.region.y1) {
            for x in rect.x0.max(self.region.x0)..rect.x1.min(self.region.x1) {
                if self.at(x, y) {
                    n += 1;
                }
            }
        }
        n
    }
}

fn normalized(mut h: Vec<f64>) -> Option<Vec<f64>> {
    let s: f64 = h.iter().sum();
    if s <= 0.0 {
        return None;
    }
    h.iter_mut().for_each(|v| *v /= s);
    Some(h)
}

struct Samples {
    color: Vec<f64>,
    depth: Vec<f64>,
}

impl Samples {
    fn new(p: &SegParams) -> Self {
        Samples {
            color: vec![0.0; p.color_bins.pow(3)],
            depth: vec![0.0; p.depth_bins()],
        }
    }

    fn add(&mut self, p: &SegParams, frame: &Frame, x: usize, y: usize) {
        self.color[p.color_index(frame.rgb.get_pixel(x as u32, y as u32).0)] += 1.0;
        if let Some(d) = p.depth_index(frame.depth_mm(x, y)) {
            self.depth[d] += 1.0;
        }
    }
}

/// Sample the foreground from `bbox` shrunk by 10% per side and the
/// background from the surrounding ring of equal area.
pub fn init_model(frame: &Frame, bbox: &BBox, params: &SegParams) -> Result<ColorDepthModel> {
    params.validate()?;
    let (w, h) = (frame.width(), frame.height());
    let outer = bbox
        .pixel_rect(w, h)
        .filter(|r| r.width() >= 4 && r.height() >= 4)
        .ok_or_else(|| OtrError::PatchTooSmall(format!("segmentation box {bbox:?}")))?;
    let inner = bbox.scaled(0.8, 0.8).pixel_rect(w, h).unwrap_or(outer);
    let ring = bbox.scaled(std::f64::consts::SQRT_2, std::f64::consts::SQRT_2).pixel_rect(w, h).unwrap_or(outer);

    let mut fg = Samples::new(params);
    let mut bg = Samples::new(params);
    for y in ring.y0..ring.y1 {
        for x in ring.x0..ring.x1 {
            if inner.contains(x, y) {
                fg.add(params, frame, x, y);
            } else if !outer.contains(x, y) {
                bg.add(params, frame, x, y);
            }
        }
    }
    let fg_color = normalized(fg.color).ok_or_else(|| OtrError::PatchTooSmall("empty foreground".into()))?;
    let n = params.color_bins.pow(3);
    let bg_color = normalized(bg.color).unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let (fg_depth, bg_depth) = match (normalized(fg.depth), normalized(bg.depth)) {
        (Some(f), Some(b)) => (Some(f), Some(b)),
        _ => (None, None),
    };
    Ok(ColorDepthModel {
        params: *params,
        fg_color,
        bg_color,
        fg_depth,
        bg_depth,
    })
}

/// Posterior for one pixel. An all-zero evidence term yields the prior.
fn posterior(model: &ColorDepthModel, prior: f64, rgb: [u8; 3], depth_mm: u16) -> f64 {
    let p = &model.params;
    posterior_bins(model, prior, p.color_index(rgb), p.depth_index(depth_mm))
}

fn posterior_bins(model: &ColorDepthModel, prior: f64, ci: usize, di: Option<usize>) -> f64 {
    let (mut lf, mut lb) = (model.fg_color[ci], model.bg_color[ci]);
    // A depth bin neither histogram has seen carries no evidence.
    if let (Some(fd), Some(bd), Some(di)) = (&model.fg_depth, &model.bg_depth, di) {
        if fd[di] > 0.0 || bd[di] > 0.0 {
            lf *= fd[di];
            lb *= bd[di];
        }
    }
    let num = prior * lf;
    let den = num + (1.0 - prior) * lb;
    if den > 0.0 {
        num / den
    } else {
        prior
    }
}

/// 3x3 mean over in-bounds neighbors.
pub(crate) fn box_smooth(g: &Grid) -> Grid {
    let (w, h) = g.dims();
    Grid::from_fn(w, h, |x, y| {
        let mut s = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                s += g.get(xx, yy);
                n += 1.0;
            }
        }
        s / n
    })
}

pub fn segment(frame: &Frame, region: &BBox, model: &ColorDepthModel) -> Result<SegMask> {
    segment_with_prior(frame, region, model, model.params.fg_prior)
}

pub fn segment_with_prior(frame: &Frame, region: &BBox, model: &ColorDepthModel, prior: f64) -> Result<SegMask> {
    let rect = region
        .pixel_rect(frame.width(), frame.height())
        .ok_or(OtrError::OutsideImage)?;
    let mut prob = Grid::from_fn(rect.width(), rect.height(), |x, y| {
        let (ix, iy) = (x + rect.x0, y + rect.y0);
        posterior(model, prior, frame.rgb.get_pixel(ix as u32, iy as u32).0, frame.depth_mm(ix, iy))
    });
    for _ in 0..model.params.smoothing_iters {
        prob = box_smooth(&prob);
    }
    let mask = prob.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
    SegMask::new(rect, mask, prob)
}

/// Blend the model toward histograms sampled from `mask` (foreground) and
/// the rest of its region (background).
pub fn update_model(model: &ColorDepthModel, frame: &Frame, mask: &SegMask, rate: f64) -> Result<ColorDepthModel> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(OtrError::InvalidArgument(format!("histogram rate {rate}")));
    }
    if mask.area() == 0 {
        return Ok(model.clone());
    }
    let p = &model.params;
    let r = mask.region;
    let mut fg = Samples::new(p);
    let mut bg = Samples::new(p);
    for y in r.y0..r.y1.min(frame.height()) {
        for x in r.x0..r.x1.min(frame.width()) {
            if mask.at(x, y) {
                fg.add(p, frame, x, y);
            } else {
                bg.add(p, frame, x, y);
            }
        }
    }
    let blend = |old: &[f64], new: Option<Vec<f64>>| -> Vec<f64> {
        match new {
            Some(n) => normalized(old.iter().zip(&n).map(|(a, b)| (1.0 - rate) * a + rate * b).collect())
                .unwrap_or(n),
            None => old.to_vec(),
        }
    };
    let fg_color = blend(&model.fg_color, normalized(fg.color));
    let bg_color = blend(&model.bg_color, normalized(bg.color));
    let (fg_depth, bg_depth) = match (&model.fg_depth, &model.bg_depth, normalized(fg.depth), normalized(bg.depth)) {
        (Some(of), Some(ob), nf, nb) => (Some(blend(of, nf)), Some(blend(ob, nb))),
        (_, _, Some(nf), Some(nb)) => (Some(nf), Some(nb)),
        _ => (model.fg_depth.clone(), model.bg_depth.clone()),
    };
    Ok(ColorDepthModel {
        params: *p,
        fg_color,
        bg_color,
        fg_depth,
        bg_depth,
    })
}

/// True iff the foreground inside `bbox` covers at least `tau_a` of the
/// box (both clipped to the image of size `image_dims`).
pub fn mask_area_test(mask: &SegMask, bbox: &BBox, image_dims: (usize, usize), tau_a: f64) -> bool {
    match bbox.pixel_rect(image_dims.0, image_dims.1) {
        Some(rect) => mask.area_within(&rect) as f64 / rect.area() as f64 >= tau_a,
        None => false,
    }
}
