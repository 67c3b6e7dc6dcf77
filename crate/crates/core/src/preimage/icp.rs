//! Point-to-plane ICP with projective data association.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use rayon::prelude::*;

use super::{PointCloud, Pose, Surfel};
use crate::error::{OtrError, Result};
use crate::ingest::CameraIntrinsics;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Correspondence gate on point distance, meters.
    pub max_distance: f64,
    /// Correspondence gate on normal angle, degrees.
    pub max_normal_angle_deg: f64,
    /// Correspondence gate on RGB L2 distance (0-255 scale).
    pub max_color_distance: f64,
    pub min_pairs: usize,
    /// Stop once the pose increment norm falls below this.
    pub tolerance: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            max_iterations: 10,
            max_distance: 0.05,
            max_normal_angle_deg: 30.0,
            max_color_distance: 100.0,
            min_pairs: 30,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    /// Mean squared point-to-plane residual over accepted pairs, m^2.
    pub error: f64,
    pub pairs: usize,
    pub iterations: usize,
    /// Error at the start of each iteration followed by the final error.
    pub history: Vec<f64>,
    /// Norm of the last applied pose increment.
    pub last_step: f64,
}

/// Rodrigues exponential of a rotation vector.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

struct Pair {
    /// Model point and normal in camera coordinates.
    p: Vector3<f64>,
    n: Vector3<f64>,
    /// Observed point.
    q: Vector3<f64>,
}

const CHUNK: usize = 2048;

fn associate(
    surfels: &[Surfel],
    pose: &Pose,
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    p: &IcpParams,
) -> Vec<Pair> {
    let cos_max = p.max_normal_angle_deg.to_radians().cos();
    let color2 = p.max_color_distance * p.max_color_distance;
    let d2 = p.max_distance * p.max_distance;
    let chunks: Vec<Vec<Pair>> = surfels
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .filter_map(|s| {
                    let pc = pose.apply(&s.position);
                    let (u, v) = intr.project(&pc)?;
                    let j = cloud.at_pixel(u.round(), v.round())?;
                    let q = cloud.points[j];
                    let n = pose.rotation * s.normal;
                    if (pc - q).norm_squared() > d2 || n.dot(&cloud.normals[j]) < cos_max {
                        return None;
                    }
                    let c = cloud.colors[j];
                    let dc: f64 = (0..3).map(|k| (c[k] - s.color[k]).powi(2)).sum();
                    if dc > color2 {
                        return None;
                    }
                    Some(Pair { p: pc, n, q })
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

fn pair_error(pairs: &[Pair], delta: &Pose) -> f64 {
    let s: f64 = pairs
        .iter()
        .map(|pr| {
            let p = delta.apply(&pr.p);
            let n = delta.rotation * pr.n;
            ((p - pr.q).dot(&n)).powi(2)
        })
        .sum();
    s / pairs.len() as f64
}

fn centroid(pairs: &[Pair]) -> Vector3<f64> {
    pairs.iter().fold(Vector3::zeros(), |acc, pr| acc + pr.q) / pairs.len() as f64
}

/// Gauss-Newton system for a twist whose rotation acts about `center`.
fn normal_equations(pairs: &[Pair], center: &Vector3<f64>) -> (Matrix6<f64>, Vector6<f64>) {
    let parts: Vec<(Matrix6<f64>, Vector6<f64>)> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut a = Matrix6::zeros();
            let mut b = Vector6::zeros();
            for pr in chunk {
                let r = (pr.p - pr.q).dot(&pr.n);
                let c = (pr.q - center).cross(&pr.n);
                let j = Vector6::new(c.x, c.y, c.z, pr.n.x, pr.n.y, pr.n.z);
                a += j * j.transpose();
                b += j * r;
            }
            (a, b)
        })
        .collect();
    parts
        .into_iter()
        .fold((Matrix6::zeros(), Vector6::zeros()), |(a, b), (pa, pb)| (a + pa, b + pb))
}

/// Per-pair Tikhonov weights on the rotation (m^2) and translation blocks of
/// the increment. Near-planar targets leave in-plane sliding and spin about
/// the normal almost unconstrained; the prior keeps those steps small.
const ROTATION_PRIOR: f64 = 1e-4;
const TRANSLATION_PRIOR: f64 = 1e-2;
const DAMPING_BOOST: [f64; 4] = [1.0, 10.0, 100.0, 1e4];

fn solve6(sys: &Matrix6<f64>, b: &Vector6<f64>) -> Option<Vector6<f64>> {
    match sys.cholesky() {
        Some(ch) => Some(ch.solve(&(-b))),
        None => sys.lu().solve(&(-b)),
    }
}

/// Pose of a twist `(omega, v)` rotating about `center` rather than the origin.
fn centered_twist(xi: &Vector6<f64>, center: &Vector3<f64>) -> Pose {
    let r = exp_so3(&Vector3::new(xi[0], xi[1], xi[2]));
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    Pose::new(r, center - r * center + v)
}

/// Align the surfel model to `cloud`, starting from `init`.
///
/// Each iteration re-associates, solves the regularized 6x6 Gauss-Newton
/// system for a left-multiplied increment about the pair centroid, raising the
/// damping and halving the step until the error over the current pairs does
/// not increase. An iteration whose re-associated
/// error exceeds the previous one ends the search at the previous pose.
pub fn icp_align(
    surfels: &[Surfel],
    cloud: &PointCloud,
    init: &Pose,
    intr: &CameraIntrinsics,
    params: &IcpParams,
) -> Result<IcpResult> {
    let mut pose = init.clone();
    let mut pairs = associate(surfels, &pose, cloud, intr, params);
    if pairs.len() < params.min_pairs {
        return Err(OtrError::InsufficientCorrespondences(pairs.len()));
    }
    let mut error = pair_error(&pairs, &Pose::identity());
    let mut history = vec![error];
    let mut iterations = 0;
    let mut last_step = 0.0;

    while iterations < params.max_iterations {
        iterations += 1;
        let center = centroid(&pairs);
        let (a, b) = normal_equations(&pairs, &center);
        let n = pairs.len() as f64;
        let mut accepted = None;
        'damping: for boost in DAMPING_BOOST {
            let mut sys = a;
            for k in 0..6 {
                let prior = if k < 3 { ROTATION_PRIOR } else { TRANSLATION_PRIOR };
                sys[(k, k)] += boost * prior * n;
            }
            let Some(xi) = solve6(&sys, &b) else { continue };
            let mut t = 1.0;
            for _ in 0..4 {
                let step = xi * t;
                let delta = centered_twist(&step, &center);
                if pair_error(&pairs, &delta) <= error {
                    accepted = Some((delta, step.norm()));
                    break 'damping;
                }
                t *= 0.5;
            }
        }
        let Some((delta, step_norm)) = accepted else {
            break;
        };
        let candidate = delta.compose(&pose);
        let new_pairs = associate(surfels, &candidate, cloud, intr, params);
        if new_pairs.len() < params.min_pairs {
            break;
        }
        let new_error = pair_error(&new_pairs, &Pose::identity());
        if new_error > error {
            break;
        }
        pose = candidate;
        pairs = new_pairs;
        error = new_error;
        history.push(error);
        last_step = step_norm;
        if step_norm < params.tolerance {
            break;
        }
    }
    Ok(IcpResult {
        pose,
        error,
        pairs: pairs.len(),
        iterations,
        history,
        last_step,
    })
}
