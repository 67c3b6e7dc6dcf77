//! One-dimensional correlation filter over a pyramid of scale levels.

use image::RgbImage;
use rustfft::num_complex::Complex64;

use crate::error::{OtrError, Result};
use crate::features::{extract_hog, extract_window};
use crate::fft::{fft1, ifft1};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    /// Number of scale levels; odd so the identity scale is the middle one.
    pub levels: usize,
    /// Geometric step between levels.
    pub step: f64,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Label standard deviation in levels, per square root of `levels`.
    pub sigma_factor: f64,
    /// Upper bound on the pixel area of each resampled scale sample.
    pub model_max_area: f64,
    pub cell_size: usize,
}

impl Default for ScaleParams {
    fn default() -> Self {
        ScaleParams {
            levels: 17,
            step: 1.02,
            learning_rate: 0.025,
            lambda: 0.01,
            sigma_factor: 0.25,
            model_max_area: 512.0,
            cell_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFilter {
    params: ScaleParams,
    factors: Vec<f64>,
    window: Vec<f64>,
    label_hat: Vec<Complex64>,
    model_size: Option<(usize, usize)>,
    num: Vec<Vec<Complex64>>,
    den: Vec<f64>,
}

impl ScaleFilter {
    /// `base_size` is the target size in pixels at scale 1.
    pub fn new(params: ScaleParams, base_size: (f64, f64)) -> Result<Self> {
        if params.levels == 0 || params.levels.is_multiple_of(2) {
            return Err(OtrError::InvalidArgument(format!(
                "scale levels must be odd, got {}",
                params.levels
            )));
        }
        if !(params.step > 1.0) || params.cell_size == 0 {
            return Err(OtrError::InvalidArgument(format!("scale step {}", params.step)));
        }
        let n = params.levels;
        let mid = (n / 2) as f64;
        let factors = (0..n).map(|k| params.step.powf(k as f64 - mid)).collect();
        let window = if n == 1 {
            vec![1.0]
        } else {
            // Periodic-free Hann with nonzero ends so outer levels still count.
            (0..n)
                .map(|k| (std::f64::consts::PI * (k as f64 + 1.0) / (n as f64 + 1.0)).sin().powi(2))
                .collect()
        };
        let sigma = (params.sigma_factor * (n as f64).sqrt()).max(1e-3);
        let label: Vec<Complex64> = (0..n)
            .map(|k| Complex64::new((-0.5 * ((k as f64 - mid) / sigma).powi(2)).exp(), 0.0))
            .collect();
        let cell = params.cell_size as f64;
        let model_size = if base_size.0 < cell || base_size.1 < cell {
            None
        } else {
            let area = base_size.0 * base_size.1;
            let shrink = (params.model_max_area / area).sqrt().min(1.0);
            let snap = |v: f64| ((v * shrink / cell).round().max(2.0) as usize) * params.cell_size;
            Some((snap(base_size.0), snap(base_size.1)))
        };
        Ok(ScaleFilter {
            params,
            factors,
            window,
            label_hat: fft1(&label),
            model_size,
            num: Vec::new(),
            den: Vec::new(),
        })
    }

    pub fn params(&self) -> &ScaleParams {
        &self.params
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    /// Scale is frozen when the filter is degenerate: one level or a target
    /// smaller than a feature cell.
    pub fn is_frozen(&self) -> bool {
        self.params.levels == 1 || self.model_size.is_none()
    }

    pub fn is_trained(&self) -> bool {
        !self.num.is_empty()
    }

    /// Feature spectra per dimension, taken over the scale axis.
    fn sample(
        &self,
        img: &RgbImage,
        center: (f64, f64),
        base_size: (f64, f64),
        scale: f64,
    ) -> Result<Vec<Vec<Complex64>>> {
        let model = self.model_size.expect("sample on frozen scale filter");
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(self.params.levels);
        for (k, f) in self.factors.iter().enumerate() {
            let patch = extract_window(img, center, base_size, scale * f, model)?;
            let hog = extract_hog(&patch, self.params.cell_size)?;
            let wk = self.window[k];
            columns.push(
                hog.channels
                    .iter()
                    .flat_map(|c| c.as_slice().iter().map(move |v| v * wk))
                    .collect(),
            );
        }
        let dims = columns[0].len();
        Ok((0..dims)
            .map(|d| {
                let row: Vec<Complex64> = columns.iter().map(|c| Complex64::new(c[d], 0.0)).collect();
                fft1(&row)
            })
            .collect())
    }

    /// Scale multiplier relative to `scale`: the best-responding level,
    /// refined between its neighbors. Returns 1 when frozen or untrained.
    pub fn localize(
        &self,
        img: &RgbImage,
        center: (f64, f64),
        base_size: (f64, f64),
        scale: f64,
    ) -> Result<f64> {
        if self.is_frozen() || !self.is_trained() {
            return Ok(1.0);
        }
        let z = self.sample(img, center, base_size, scale)?;
        let n = self.params.levels;
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        for (a, zd) in self.num.iter().zip(&z) {
            for k in 0..n {
                acc[k] += a[k].conj() * zd[k];
            }
        }
        for (v, d) in acc.iter_mut().zip(&self.den) {
            *v /= d + self.params.lambda;
        }
        let resp: Vec<f64> = ifft1(&acc).iter().map(|c| c.re).collect();
        let mut best = 0;
        for k in 1..n {
            if resp[k] > resp[best] {
                best = k;
            }
        }
        // Parabolic refinement between neighboring levels.
        let mut offset = 0.0;
        if best > 0 && best + 1 < n {
            let (l, c, r) = (resp[best - 1], resp[best], resp[best + 1]);
            let d = l - 2.0 * c + r;
            if d < 0.0 {
                offset = (0.5 * (l - r) / d).clamp(-0.5, 0.5);
            }
        }
        let mid = (n / 2) as f64;
        Ok(self.params.step.powf(best as f64 + offset - mid))
    }

    /// Blend the model toward samples taken at `scale`.
    pub fn learn(
        &mut self,
        img: &RgbImage,
        center: (f64, f64),
        base_size: (f64, f64),
        scale: f64,
    ) -> Result<()> {
        if self.is_frozen() {
            return Ok(());
        }
        let x = self.sample(img, center, base_size, scale)?;
        let n = self.params.levels;
        let num: Vec<Vec<Complex64>> = x
            .iter()
            .map(|xd| (0..n).map(|k| self.label_hat[k].conj() * xd[k]).collect())
            .collect();
        let mut den = vec![0.0; n];
        for xd in &x {
            for k in 0..n {
                den[k] += xd[k].norm_sqr();
            }
        }
        if self.num.is_empty() {
            self.num = num;
            self.den = den;
        } else {
            let lr = self.params.learning_rate;
            for (old, new) in self.num.iter_mut().zip(&num) {
                for (o, v) in old.iter_mut().zip(new) {
                    *o = *o * (1.0 - lr) + v * lr;
                }
            }
            for (o, v) in self.den.iter_mut().zip(&den) {
                *o = *o * (1.0 - lr) + v * lr;
            }
        }
        Ok(())
    }
}
