//! Oracle suites shared by the test targets and the `selftest` command:
//! constrained learning against the closed-form ridge solution, FFT
//! correlation against brute force, and ICP pose recovery.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;

use crate::dcf::{learn_constrained, make_label, response, Filter, LearnParams};
use crate::error::Result;
use crate::features::{FeatureStack, WindowGeometry};
use crate::grid::Grid;
use crate::ingest::synth::ray_box;
use crate::ingest::CameraIntrinsics;
use crate::preimage::{backproject_depth, icp_align, IcpParams, PointCloud, Pose, PreImageParams, Surfel};

/// Depth (meters, 0 = miss) of an oriented box with half extents `half`
/// seen through `intr`.
pub fn render_box_depth(pose: &Pose, half: &Vector3<f64>, intr: &CameraIntrinsics, dims: (usize, usize)) -> Grid {
    let inv = pose.inverse();
    let o = inv.translation;
    let h = [half.x, half.y, half.z];
    Grid::from_fn(dims.0, dims.1, |x, y| {
        let d = Vector3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
        let dir = inv.rotation * d;
        // With a unit-z camera ray the hit parameter equals camera depth.
        ray_box(&o, &dir, &h).map_or(0.0, |(t, _, _)| t)
    })
}

fn cloud_from_depth(depth: &Grid, intr: &CameraIntrinsics) -> Result<PointCloud> {
    let (w, h) = depth.dims();
    let params = PreImageParams::default();
    backproject_depth(w, h, |x, y| depth.get(x, y), |_, _| [128.0; 3], |_, _| true, intr, &params)
}

/// Surfels in object coordinates from a noiseless rendering at `pose`.
pub fn box_model(pose: &Pose, half: &Vector3<f64>, intr: &CameraIntrinsics, dims: (usize, usize)) -> Result<Vec<Surfel>> {
    let cloud = cloud_from_depth(&render_box_depth(pose, half, intr, dims), intr)?;
    Ok((0..cloud.len())
        .map(|i| {
            let q = cloud.points[i];
            Surfel {
                position: pose.apply_inverse(&q),
                normal: pose.rotation.transpose() * cloud.normals[i],
                color: cloud.colors[i],
                radius: q.z / intr.fx * std::f64::consts::SQRT_2,
                confidence: 1.0,
                last_seen: 0,
            }
        })
        .collect())
}

/// A box turned so that three faces are visible, one meter ahead.
pub fn corner_pose() -> Pose {
    let r = Matrix3::from(nalgebra::Rotation3::from_euler_angles(0.45, 0.6, 0.1));
    Pose::new(r, Vector3::new(0.0, 0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpTrial {
    pub rotation_error_deg: f64,
    pub translation_error_m: f64,
    pub icp_error: f64,
}

/// Perturb the corner scene by 3 degrees and 1 cm, add 1 mm depth noise and
/// recover the pose by ICP from the unperturbed estimate.
pub fn icp_trial(seed: u64) -> Result<IcpTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = (320, 240);
    let intr = CameraIntrinsics::default_for(dims.0, dims.1);
    let half = Vector3::new(0.1, 0.1, 0.1);
    let start = corner_pose();
    let model = box_model(&start, &half, &intr, dims)?;

    let axis = Unit::new_normalize(random_unit(&mut rng));
    let rot = Matrix3::from(nalgebra::Rotation3::from_axis_angle(&axis, 3f64.to_radians()));
    let shift = random_unit(&mut rng) * 0.01;
    // Rotate about the object center, then shift.
    let truth = Pose::new(rot * start.rotation, start.translation + shift);

    let noise = Normal::new(0.0, 0.001).expect("valid sigma");
    let depth = render_box_depth(&truth, &half, &intr, dims).map(|z| if z > 0.0 { z + noise.sample(&mut rng) } else { 0.0 });
    let cloud = cloud_from_depth(&depth, &intr)?;
    let res = icp_align(&model, &cloud, &start, &intr, &IcpParams::default())?;
    let diff = res.pose.compose(&truth.inverse());
    Ok(IcpTrial {
        rotation_error_deg: diff.angle_deg(),
        translation_error_m: (res.pose.translation - truth.translation).norm(),
        icp_error: res.error,
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn naive_dft2(g: &Grid) -> Vec<Complex64> {
    let (w, h) = g.dims();
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![Complex64::new(0.0, 0.0); w * h];
    for ky in 0..h {
        for kx in 0..w {
            let mut s = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -tau * ((kx * x % w) as f64 / w as f64 + (ky * y % h) as f64 / h as f64);
                    s += Complex64::from_polar(g.get(x, y), a);
                }
            }
            out[ky * w + kx] = s;
        }
    }
    out
}

/// Relative L2 distance between the full-mask ADMM filter spectrum and the
/// closed-form ridge spectrum, both computed with a direct DFT.
pub fn ridge_trial(seed: u64, size: usize, iterations: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Grid::from_fn(size, size, |_, _| rng.random_range(-1.0..1.0));
    let label = make_label((size, size), 1.0 / 16.0)?;
    let params = LearnParams {
        iterations,
        ..LearnParams::default()
    };
    let stack = FeatureStack::new(vec![f.clone()], 4, WindowGeometry::for_patch(size * 4, size * 4, 4))?;
    let filt = learn_constrained(&stack, &label, &Grid::filled(size, size, 1.0), &params)?;
    let fh = naive_dft2(&f);
    let gh = naive_dft2(&label.at_origin());
    let hh = naive_dft2(&filt.channels()[0]);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..fh.len() {
        let oracle = fh[k] * gh[k].conj() / (fh[k].norm_sqr() + params.lambda);
        num += (hh[k] - oracle).norm_sqr();
        den += oracle.norm_sqr();
    }
    Ok((num / den).sqrt())
}

/// Relative error of the FFT response against direct circular correlation.
pub fn correlation_trial(seed: u64, size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Grid::from_fn(size, size, |_, _| rng.random_range(-1.0..1.0));
    let h = Grid::from_fn(size, size, |_, _| rng.random_range(-1.0..1.0));
    let filt = Filter::from_parts(vec![h.clone()], vec![1.0], Grid::filled(size, size, 1.0), 1.0)?;
    let stack = FeatureStack::new(vec![f.clone()], 4, WindowGeometry::for_patch(size * 4, size * 4, 4))?;
    let r = response(&filt, &stack)?;
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let mut s = 0.0;
            for v in 0..size {
                for u in 0..size {
                    s += f.get((x + u) % size, (y + v) % size) * h.get(u, v);
                }
            }
            num += (r.get(x, y) - s).powi(2);
            den += s * s;
        }
    }
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

pub fn ridge_suite() -> SuiteResult {
    let t = Instant::now();
    let res = ridge_trial(1, 32, 20);
    let (passed, detail) = match res {
        Ok(e) => (e <= 1e-4, format!("relative L2 {e:.3e} (limit 1e-4)")),
        Err(e) => (false, e.to_string()),
    };
    SuiteResult {
        name: "admm-vs-ridge",
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

pub fn correlation_suite() -> SuiteResult {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for seed in 0..100 {
        match correlation_trial(seed, 16) {
            Ok(e) => worst = worst.max(e),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    let (passed, detail) = match failure {
        Some(e) => (false, e),
        None => (worst <= 1e-6, format!("100 instances, worst relative error {worst:.3e} (limit 1e-6)")),
    };
    SuiteResult {
        name: "correlation-equivalence",
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

pub fn icp_suite() -> SuiteResult {
    let t = Instant::now();
    let (mut rot, mut trans) = (0.0f64, 0.0f64);
    let mut failure = None;
    for seed in 0..20 {
        match icp_trial(seed) {
            Ok(r) => {
                rot = rot.max(r.rotation_error_deg);
                trans = trans.max(r.translation_error_m);
            }
            Err(e) => failure = Some(format!("seed {seed}: {e}")),
        }
    }
    let (passed, detail) = match failure {
        Some(e) => (false, e),
        None => (
            rot <= 0.5 && trans <= 0.002,
            format!("20 clouds, worst {rot:.3} deg / {:.2} mm (limits 0.5 deg / 2 mm)", trans * 1000.0),
        ),
    };
    SuiteResult {
        name: "icp-pose-recovery",
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

pub fn run_all() -> Vec<SuiteResult> {
    vec![ridge_suite(), correlation_suite(), icp_suite()]
}
