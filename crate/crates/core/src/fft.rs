//! 2-D and 1-D discrete Fourier transforms over [`Grid`] values.
//!
//! Transforms are unnormalized in the forward direction; the inverse divides
//! by the element count, so `ifft2(fft2(g)) == g` up to rounding.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::Grid;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Complex spectrum with the same row-major layout as [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(width: usize, height: usize) -> Self {
        Spectrum {
            width,
            height,
            data: vec![Complex64::new(0.0, 0.0); width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn conj(&self) -> Spectrum {
        Spectrum {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|c| c.conj()).collect(),
        }
    }
}

fn transform_2d(width: usize, height: usize, data: &mut [Complex64], inverse: bool) {
    let row = plan(width, inverse);
    for chunk in data.chunks_exact_mut(width) {
        row.process(chunk);
    }
    let col = plan(height, inverse);
    let mut buf = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            buf[y] = data[y * width + x];
        }
        col.process(&mut buf);
        for y in 0..height {
            data[y * width + x] = buf[y];
        }
    }
}

pub fn fft2(grid: &Grid) -> Spectrum {
    let (w, h) = grid.dims();
    let mut data: Vec<Complex64> = grid
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    transform_2d(w, h, &mut data, false);
    Spectrum {
        width: w,
        height: h,
        data,
    }
}

/// Inverse transform, keeping the real part.
pub fn ifft2(spec: &Spectrum) -> Grid {
    let mut data = spec.data.clone();
    transform_2d(spec.width, spec.height, &mut data, true);
    let n = (spec.width * spec.height) as f64;
    Grid::from_vec(
        spec.width,
        spec.height,
        data.into_iter().map(|c| c.re / n).collect(),
    )
}

pub fn fft1(values: &[Complex64]) -> Vec<Complex64> {
    let mut data = values.to_vec();
    plan(data.len(), false).process(&mut data);
    data
}

pub fn ifft1(values: &[Complex64]) -> Vec<Complex64> {
    let mut data = values.to_vec();
    let n = data.len() as f64;
    plan(data.len(), true).process(&mut data);
    data.iter_mut().for_each(|c| *c /= n);
    data
}

/// Circular cross-correlation `r[x] = sum_y f[x + y] h[y]` evaluated via the
/// correlation theorem, with both inputs given as spectra.
pub fn correlate_spectra(f: &Spectrum, h: &Spectrum) -> Grid {
    assert_eq!(f.dims(), h.dims(), "spectrum dims");
    let prod = Spectrum {
        width: f.width,
        height: f.height,
        data: f.data.iter().zip(&h.data).map(|(a, b)| a * b.conj()).collect(),
    };
    ifft2(&prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let g = Grid::from_fn(6, 5, |x, y| (x as f64 * 0.3 - y as f64).sin());
        let back = ifft2(&fft2(&g));
        for (a, b) in g.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_term_is_sum() {
        let g = Grid::from_fn(4, 4, |x, y| (x + y) as f64);
        let s = fft2(&g);
        assert!((s.data[0].re - g.sum()).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_round_trip() {
        let v: Vec<Complex64> = (0..17).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let back = ifft1(&fft1(&v));
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
