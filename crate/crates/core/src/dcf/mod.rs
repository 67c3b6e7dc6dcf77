//! Discriminative correlation filters with a spatial support constraint.
//!
//! Correlation convention: `r[x] = sum_y f[x + y] h[y]` (circular), so in the
//! Fourier domain `r^ = f^ . conj(h^)`. Filters are learned against a label
//! whose peak sits at the origin; the filter then lives in window
//! coordinates and a response peak at displacement `d` means the target
//! moved by `d` cells.

mod scale;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{OtrError, Result};
use crate::features::FeatureStack;
use crate::fft::{correlate_spectra, fft2, ifft2, Spectrum};
use crate::grid::Grid;

pub use scale::{ScaleFilter, ScaleParams};

/// Desired correlation output: a Gaussian peaking at the grid center.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLabel {
    pub map: Grid,
    pub sigma: f64,
}

impl GaussianLabel {
    pub fn center(&self) -> (usize, usize) {
        (self.map.width() / 2, self.map.height() / 2)
    }

    /// The label rolled so that its peak sits at the origin.
    pub fn at_origin(&self) -> Grid {
        let (w, h) = self.map.dims();
        let (cx, cy) = self.center();
        Grid::from_fn(w, h, |x, y| self.map.get((x + cx) % w, (y + cy) % h))
    }
}

/// Gaussian label with `sigma = sigma_factor * sqrt(w * h)` cells.
pub fn make_label(dims: (usize, usize), sigma_factor: f64) -> Result<GaussianLabel> {
    let (w, h) = dims;
    if w < 3 || h < 3 {
        return Err(OtrError::InvalidArgument(format!("label dims {w}x{h} below 3x3")));
    }
    let sigma = sigma_factor * ((w * h) as f64).sqrt();
    let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
    let map = Grid::from_fn(w, h, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    });
    Ok(GaussianLabel { map, sigma })
}

/// ADMM settings for constrained learning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnParams {
    /// Ridge weight.
    pub lambda: f64,
    pub iterations: usize,
    pub mu0: f64,
    pub beta: f64,
    pub mu_max: f64,
    /// Smallest admissible mask area, in cells.
    pub min_mask_area: usize,
}

impl Default for LearnParams {
    fn default() -> Self {
        LearnParams {
            lambda: 0.01,
            iterations: 4,
            mu0: 5.0,
            beta: 3.0,
            mu_max: 20.0,
            min_mask_area: 1,
        }
    }
}

/// A multi-channel correlation filter with per-channel reliability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    channels: Vec<Grid>,
    spectra: Vec<Spectrum>,
    weights: Vec<f64>,
    mask: Grid,
    sigma: f64,
}

impl Filter {
    /// Build a filter from spatial channels. Weights are normalized to sum
    /// to one; an all-zero weight vector becomes uniform.
    pub fn from_parts(channels: Vec<Grid>, weights: Vec<f64>, mask: Grid, sigma: f64) -> Result<Self> {
        if channels.is_empty() || channels.len() != weights.len() {
            return Err(OtrError::DimensionMismatch(format!(
                "{} channels, {} weights",
                channels.len(),
                weights.len()
            )));
        }
        let dims = mask.dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(OtrError::DimensionMismatch("filter channel dims".into()));
        }
        if channels.iter().any(|c| !c.is_finite()) || weights.iter().any(|w| !w.is_finite()) {
            return Err(OtrError::NonFinite("filter"));
        }
        let spectra = channels.iter().map(fft2).collect();
        Ok(Filter {
            channels,
            spectra,
            weights: normalize_weights(weights),
            mask,
            sigma,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Grid] {
        &self.channels
    }

    pub fn spectra(&self) -> &[Spectrum] {
        &self.spectra
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mask(&self) -> &Grid {
        &self.mask
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Largest deviation from the support constraint `h = m . h`.
    pub fn constraint_violation(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.zip_map(&self.mask, |h, m| h - m * h).max_abs())
            .fold(0.0, f64::max)
    }

    /// Copy with replaced channel weights (normalized).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Filter> {
        if weights.len() != self.channels.len() {
            return Err(OtrError::DimensionMismatch("weight count".into()));
        }
        Ok(Filter {
            weights: normalize_weights(weights),
            ..self.clone()
        })
    }
}

fn normalize_weights(mut w: Vec<f64>) -> Vec<f64> {
    w.iter_mut().for_each(|v| *v = v.max(0.0));
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        let n = w.len() as f64;
        w.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    w
}

/// Number of foreground cells in a binary mask.
pub fn mask_area(mask: &Grid) -> usize {
    mask.as_slice().iter().filter(|&&v| v > 0.5).count()
}

/// Closed-form full-support ridge solution for one channel, in the Fourier
/// domain: `h^ = f^ . conj(g^) / (|f^|^2 + lambda)`.
pub fn ridge_spectrum(f: &Spectrum, g: &Spectrum, lambda: f64) -> Spectrum {
    Spectrum {
        width: f.width,
        height: f.height,
        data: f
            .data
            .iter()
            .zip(&g.data)
            .map(|(fk, gk)| fk * gk.conj() / (fk.norm_sqr() + lambda))
            .collect(),
    }
}

/// Learn one channel under the support constraint by ADMM.
fn learn_channel(f: &Grid, g_hat: &Spectrum, mask: &Grid, p: &LearnParams) -> Grid {
    let f_hat = fft2(f);
    let numer: Vec<Complex64> = f_hat
        .data
        .iter()
        .zip(&g_hat.data)
        .map(|(fk, gk)| fk * gk.conj())
        .collect();
    let energy: Vec<f64> = f_hat.data.iter().map(|c| c.norm_sqr()).collect();

    // Masked unconstrained solution as the starting point.
    let init = ifft2(&ridge_spectrum(&f_hat, g_hat, p.lambda));
    let mut h_m = init.zip_map(mask, |h, m| h * m);
    let mut dual = Grid::zeros(f.width(), f.height());
    let mut mu = p.mu0;

    for _ in 0..p.iterations {
        let hm_hat = fft2(&h_m);
        let l_hat = fft2(&dual);
        let hc_hat = Spectrum {
            width: f.width(),
            height: f.height(),
            data: (0..numer.len())
                .map(|k| (numer[k] + hm_hat.data[k] * mu - l_hat.data[k]) / (energy[k] + mu))
                .collect(),
        };
        let h_c = ifft2(&hc_hat);
        let denom = p.lambda + mu;
        h_m = Grid::from_fn(f.width(), f.height(), |x, y| {
            mask.get(x, y) * (dual.get(x, y) + mu * h_c.get(x, y)) / denom
        });
        dual = Grid::from_fn(f.width(), f.height(), |x, y| {
            dual.get(x, y) + mu * (h_c.get(x, y) - h_m.get(x, y))
        });
        mu = (p.beta * mu).min(p.mu_max);
    }
    h_m
}

/// Learn a filter whose support is confined to `mask`.
///
/// Each channel alternates a closed-form Fourier update over the full
/// support, a spatial projection onto the mask and a dual ascent step. The
/// channel weight is the peak response of the channel's filter on its own
/// training features.
pub fn learn_constrained(
    features: &FeatureStack,
    label: &GaussianLabel,
    mask: &Grid,
    params: &LearnParams,
) -> Result<Filter> {
    let dims = features.dims();
    if mask.dims() != dims || label.map.dims() != dims {
        return Err(OtrError::DimensionMismatch(format!(
            "features {:?}, mask {:?}, label {:?}",
            dims,
            mask.dims(),
            label.map.dims()
        )));
    }
    if !features.is_finite() {
        return Err(OtrError::NonFinite("features"));
    }
    let area = mask_area(mask);
    if area < params.min_mask_area.max(1) {
        return Err(OtrError::MaskTooSmall {
            area,
            min: params.min_mask_area.max(1),
        });
    }
    let binary = mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let g_hat = fft2(&label.at_origin());

    let learned: Vec<(Grid, f64)> = features
        .channels
        .par_iter()
        .map(|f| {
            let h = learn_channel(f, &g_hat, &binary, params);
            let r = correlate_spectra(&fft2(f), &fft2(&h));
            let (_, _, peak) = r.argmax();
            (h, peak)
        })
        .collect();
    let (channels, weights): (Vec<Grid>, Vec<f64>) = learned.into_iter().unzip();
    Filter::from_parts(channels, weights, binary, label.sigma)
}

/// Output of [`localize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Raw circular response; index `(x, y)` is displacement `(x, y)` mod size.
    pub response: Grid,
    /// Integer peak cell in the raw response.
    pub peak_cell: (usize, usize),
    /// Signed sub-cell displacement of the peak.
    pub displacement: (f64, f64),
    /// Peak response value.
    pub value: f64,
    /// Peak position in image pixels.
    pub position: (f64, f64),
}

/// Weighted multi-channel response `sum_d w_d (f_d * h_d)`.
pub fn response(filter: &Filter, features: &FeatureStack) -> Result<Grid> {
    if features.dims() != filter.dims() || features.num_channels() != filter.num_channels() {
        return Err(OtrError::DimensionMismatch(format!(
            "features {:?}x{} vs filter {:?}x{}",
            features.dims(),
            features.num_channels(),
            filter.dims(),
            filter.num_channels()
        )));
    }
    let (w, h) = filter.dims();
    let mut acc = Spectrum::zeros(w, h);
    for ((f, hs), &wt) in features.channels.iter().zip(&filter.spectra).zip(&filter.weights) {
        if wt == 0.0 {
            continue;
        }
        let fs = fft2(f);
        for ((a, fk), hk) in acc.data.iter_mut().zip(&fs.data).zip(&hs.data) {
            *a += fk * hk.conj() * wt;
        }
    }
    Ok(ifft2(&acc))
}

fn wrap(i: usize, n: usize) -> f64 {
    if i > n / 2 {
        i as f64 - n as f64
    } else {
        i as f64
    }
}

/// One-dimensional parabola vertex offset through three samples.
fn parabola_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    }
}

pub fn localize(filter: &Filter, features: &FeatureStack) -> Result<Localization> {
    let r = response(filter, features)?;
    Ok(peak_of(r, features))
}

pub(crate) fn peak_of(r: Grid, features: &FeatureStack) -> Localization {
    let (w, h) = r.dims();
    let (px, py, value) = r.argmax();
    let (xi, yi) = (px as isize, py as isize);
    let ox = parabola_offset(r.get_wrapped(xi - 1, yi), value, r.get_wrapped(xi + 1, yi));
    let oy = parabola_offset(r.get_wrapped(xi, yi - 1), value, r.get_wrapped(xi, yi + 1));
    let displacement = (wrap(px, w) + ox, wrap(py, h) + oy);
    let position = features.origin.offset_to_image(displacement.0, displacement.1);
    Localization {
        response: r,
        peak_cell: (px, py),
        displacement,
        value,
        position,
    }
}

/// Temporal update `h <- (1 - eta) h + eta h_fresh`; channel weights blend
/// the same way and are renormalized. The support becomes the union of both
/// masks.
pub fn update(current: &Filter, fresh: &Filter, eta: f64) -> Result<Filter> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(OtrError::InvalidArgument(format!("update rate {eta}")));
    }
    if current.dims() != fresh.dims() || current.num_channels() != fresh.num_channels() {
        return Err(OtrError::DimensionMismatch("filter geometry differs".into()));
    }
    if eta == 0.0 {
        return Ok(current.clone());
    }
    if eta == 1.0 {
        return Ok(fresh.clone());
    }
    let channels = current
        .channels
        .iter()
        .zip(&fresh.channels)
        .map(|(a, b)| a.zip_map(b, |x, y| (1.0 - eta) * x + eta * y))
        .collect();
    let weights = current
        .weights
        .iter()
        .zip(&fresh.weights)
        .map(|(a, b)| (1.0 - eta) * a + eta * b)
        .collect();
    let mask = current.mask.zip_map(&fresh.mask, f64::max);
    Filter::from_parts(channels, weights, mask, fresh.sigma)
}

/// Response of `filter` zero-padded to the (larger) region grid. Entry
/// `(x, y)` is the correlation with the filter window's top-left corner at
/// cell `(x, y)`; offsets with `x <= W_r - W_f` and `y <= H_r - H_f` do not
/// wrap and equal the plain sliding-window correlation.
pub fn padded_response(filter: &Filter, region: &FeatureStack) -> Result<Grid> {
    let (fw, fh) = filter.dims();
    let (rw, rh) = region.dims();
    if rw < fw || rh < fh || region.num_channels() != filter.num_channels() {
        return Err(OtrError::DimensionMismatch(format!(
            "region {:?}x{} smaller than filter {:?}x{}",
            region.dims(),
            region.num_channels(),
            filter.dims(),
            filter.num_channels()
        )));
    }
    let mut acc = Spectrum::zeros(rw, rh);
    for ((f, h), &wt) in region.channels.iter().zip(&filter.channels).zip(&filter.weights) {
        if wt == 0.0 {
            continue;
        }
        let fs = fft2(f);
        let hs = fft2(&h.zero_pad(rw, rh));
        for ((a, fk), hk) in acc.data.iter_mut().zip(&fs.data).zip(&hs.data) {
            *a += fk * hk.conj() * wt;
        }
    }
    Ok(ifft2(&acc))
}

/// Best admissible (non-wrapping) offset of a padded response.
pub fn valid_peak(response: &Grid, filter_dims: (usize, usize)) -> (usize, usize, f64) {
    let (rw, rh) = response.dims();
    let (mx, my) = (rw - filter_dims.0, rh - filter_dims.1);
    let mut best = (0, 0, f64::NEG_INFINITY);
    for y in 0..=my {
        for x in 0..=mx {
            let v = response.get(x, y);
            if v > best.2 {
                best = (x, y, v);
            }
        }
    }
    best
}
