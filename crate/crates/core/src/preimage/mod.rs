//! Surfel reconstruction of the target: backprojection, ICP alignment,
//! fusion, occupancy projection and aspect measurement.

mod icp;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::error::{OtrError, Result};
use crate::grid::Grid;
use crate::ingest::{BBox, CameraIntrinsics, Frame, PixelRect};
use crate::segmentation::SegMask;

pub use icp::{exp_so3, icp_align, IcpParams, IcpResult};

/// Rigid transform mapping object coordinates to camera coordinates,
/// `p_cam = R p_obj + T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    /// `exp` of a twist `(omega, v)` in the left-perturbation convention
    /// used by ICP: rotation `exp(omega)`, translation `v`.
    pub fn from_twist(xi: &Vector6<f64>) -> Self {
        Pose {
            rotation: exp_so3(&Vector3::new(xi[0], xi[1], xi[2])),
            translation: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest entry of `R^T R - I` together with `|det R - 1|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Project the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    /// Object coordinates, meters.
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// RGB on a 0-255 scale.
    pub color: [f64; 3],
    pub radius: f64,
    pub confidence: f64,
    /// Accepted-update counter value when last fused.
    pub last_seen: usize,
}

/// Points observed in one frame, in camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub pixels: Vec<(usize, usize)>,
    width: usize,
    height: usize,
    index: Vec<u32>,
}

const NO_POINT: u32 = u32::MAX;

impl PointCloud {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        colors: Vec<[f64; 3]>,
        pixels: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n = points.len();
        if normals.len() != n || colors.len() != n || pixels.len() != n {
            return Err(OtrError::DimensionMismatch("point cloud attribute lengths".into()));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(OtrError::NonFinite("point cloud"));
        }
        let mut index = vec![NO_POINT; width * height];
        for (i, &(x, y)) in pixels.iter().enumerate() {
            if x >= width || y >= height {
                return Err(OtrError::InvalidArgument(format!("cloud pixel ({x}, {y}) outside {width}x{height}")));
            }
            index[y * width + x] = i as u32;
        }
        Ok(PointCloud {
            points,
            normals,
            colors,
            pixels,
            width,
            height,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Point observed at a pixel (coordinates already rounded).
    pub fn at_pixel(&self, u: f64, v: f64) -> Option<usize> {
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        let i = self.index[v as usize * self.width + u as usize];
        (i != NO_POINT).then_some(i as usize)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let s = self.points.iter().fold(Vector3::zeros(), |a, p| a + p);
        s / self.points.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreImageParams {
    pub icp: IcpParams,
    /// Acceptance threshold on the ICP error, m^2.
    pub tau_icp: f64,
    pub min_points: usize,
    /// Depth jump that invalidates a pixel's normal, meters.
    pub max_discontinuity: f64,
    pub max_surfels: usize,
    /// Accepted updates without observation before a weak surfel is pruned.
    pub stale_updates: usize,
    pub stale_confidence: f64,
}

impl Default for PreImageParams {
    fn default() -> Self {
        PreImageParams {
            icp: IcpParams::default(),
            tau_icp: 5e-4,
            min_points: 50,
            max_discontinuity: 0.05,
            max_surfels: 50_000,
            stale_updates: 30,
            stale_confidence: 3.0,
        }
    }
}

/// Surfel model with its current pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PreImage {
    pub surfels: Vec<Surfel>,
    pub pose: Pose,
    /// Aspect at the last snapshot, if any.
    pub reference_aspect: Option<f64>,
    /// Number of accepted updates so far.
    pub updates: usize,
    /// Coarse target position at the last accepted update.
    last_coarse: Option<Vector3<f64>>,
}

impl Default for PreImage {
    fn default() -> Self {
        PreImage::empty()
    }
}

impl PreImage {
    pub fn empty() -> Self {
        PreImage {
            surfels: Vec::new(),
            pose: Pose::identity(),
            reference_aspect: None,
            updates: 0,
            last_coarse: None,
        }
    }

    pub fn from_surfels(surfels: Vec<Surfel>, pose: Pose) -> Self {
        PreImage {
            surfels,
            pose,
            ..PreImage::empty()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }
}

/// Backproject a depth map (meters, 0 = invalid) restricted to pixels for
/// which `include` holds.
pub fn backproject_depth(
    width: usize,
    height: usize,
    depth: impl Fn(usize, usize) -> f64,
    color: impl Fn(usize, usize) -> [f64; 3],
    include: impl Fn(usize, usize) -> bool,
    intr: &CameraIntrinsics,
    params: &PreImageParams,
) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut pixels = Vec::new();
    let lift = |x: usize, y: usize, z: f64| intr.backproject(x as f64, y as f64, z);
    for y in 1..height.saturating_sub(1) {
        for x in 1..width.saturating_sub(1) {
            if !include(x, y) {
                continue;
            }
            let z = depth(x, y);
            if z <= 0.0 {
                continue;
            }
            let (zl, zr, zu, zd) = (depth(x - 1, y), depth(x + 1, y), depth(x, y - 1), depth(x, y + 1));
            let jump = params.max_discontinuity;
            if [zl, zr, zu, zd].iter().any(|&n| n <= 0.0 || (n - z).abs() > jump) {
                continue;
            }
            let dx = lift(x + 1, y, zr) - lift(x - 1, y, zl);
            let dy = lift(x, y + 1, zd) - lift(x, y - 1, zu);
            let Some(mut n) = dx.cross(&dy).try_normalize(1e-12) else {
                continue;
            };
            let p = lift(x, y, z);
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            points.push(p);
            normals.push(n);
            colors.push(color(x, y));
            pixels.push((x, y));
        }
    }
    if points.len() < params.min_points {
        return Err(OtrError::InsufficientGeometry(points.len()));
    }
    PointCloud::new(width, height, points, normals, colors, pixels)
}

pub fn backproject(frame: &Frame, intr: &CameraIntrinsics, mask: &SegMask, params: &PreImageParams) -> Result<PointCloud> {
    backproject_depth(
        frame.width(),
        frame.height(),
        |x, y| frame.depth_mm(x, y) as f64 / 1000.0,
        |x, y| {
            let p = frame.rgb.get_pixel(x as u32, y as u32).0;
            [p[0] as f64, p[1] as f64, p[2] as f64]
        },
        |x, y| mask.at(x, y),
        intr,
        params,
    )
}

/// Outcome of one [`update_preimage`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub accepted: bool,
    pub error: Option<f64>,
    pub reason: Option<String>,
}

fn new_surfel(q: &Vector3<f64>, n: &Vector3<f64>, c: [f64; 3], pose: &Pose, intr: &CameraIntrinsics, stamp: usize) -> Surfel {
    Surfel {
        position: pose.apply_inverse(q),
        normal: pose.rotation.transpose() * n,
        color: c,
        radius: q.z / intr.fx * std::f64::consts::SQRT_2,
        confidence: 1.0,
        last_seen: stamp,
    }
}

/// Per-pixel owner of the nearest splat, with splat depths.
struct SplatMap {
    width: usize,
    depth: Vec<f64>,
    owner: Vec<u32>,
}

/// Visible surfels: camera-facing and not hidden behind a nearer splat.
fn splat(surfels: &[Surfel], pose: &Pose, intr: &CameraIntrinsics, dims: (usize, usize)) -> (SplatMap, Vec<bool>) {
    let (w, h) = dims;
    let mut map = SplatMap {
        width: w,
        depth: vec![f64::INFINITY; w * h],
        owner: vec![NO_POINT; w * h],
    };
    let mut discs = Vec::with_capacity(surfels.len());
    for (i, s) in surfels.iter().enumerate() {
        let p = pose.apply(&s.position);
        let n = pose.rotation * s.normal;
        let Some((u, v)) = intr.project(&p) else {
            discs.push(None);
            continue;
        };
        if n.dot(&p) > 0.0 {
            discs.push(None);
            continue;
        }
        let r = s.radius * intr.fx / p.z;
        discs.push(Some((u, v, r, p.z)));
        let (x0, x1) = ((u - r).ceil().max(0.0), (u + r).floor().min(w as f64 - 1.0));
        let (y0, y1) = ((v - r).ceil().max(0.0), (v + r).floor().min(h as f64 - 1.0));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if (x as f64 - u).powi(2) + (y as f64 - v).powi(2) > r * r {
                    continue;
                }
                let k = y * w + x;
                if p.z < map.depth[k] {
                    map.depth[k] = p.z;
                    map.owner[k] = i as u32;
                }
            }
        }
    }
    // A surfel whose own center pixel is covered by a clearly nearer splat is occluded.
    let visible = discs
        .iter()
        .map(|d| match d {
            Some((u, v, _, z)) => {
                let (x, y) = (u.round(), v.round());
                if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                    return false;
                }
                let k = y as usize * w + x as usize;
                map.depth[k] >= z - OCCLUSION_TOLERANCE
            }
            None => false,
        })
        .collect();
    (map, visible)
}

const OCCLUSION_TOLERANCE: f64 = 0.01;

/// Align the model to `cloud` and fuse it when the alignment error is
/// below `tau_icp`; otherwise return the model unchanged.
pub fn update_preimage(
    pre: &PreImage,
    cloud: &PointCloud,
    coarse_position: &Vector3<f64>,
    intr: &CameraIntrinsics,
    params: &PreImageParams,
) -> (PreImage, UpdateOutcome) {
    let reject = |reason: String, error: Option<f64>| {
        (
            pre.clone(),
            UpdateOutcome {
                accepted: false,
                error,
                reason: Some(reason),
            },
        )
    };
    if cloud.len() < params.min_points {
        return reject(OtrError::InsufficientGeometry(cloud.len()).to_string(), None);
    }
    if pre.is_empty() {
        let pose = Pose::new(Matrix3::identity(), cloud.centroid());
        let surfels = (0..cloud.len())
            .map(|i| new_surfel(&cloud.points[i], &cloud.normals[i], cloud.colors[i], &pose, intr, 1))
            .collect();
        let mut out = PreImage {
            surfels,
            pose,
            reference_aspect: pre.reference_aspect,
            updates: 1,
            last_coarse: Some(*coarse_position),
        };
        cap_surfels(&mut out, params.max_surfels);
        return (
            out,
            UpdateOutcome {
                accepted: true,
                error: Some(0.0),
                reason: None,
            },
        );
    }

    let shift = pre.last_coarse.map_or(Vector3::zeros(), |c| coarse_position - c);
    let init = Pose::new(pre.pose.rotation, pre.pose.translation + shift);
    let result = match icp_align(&pre.surfels, cloud, &init, intr, &params.icp) {
        Ok(r) => r,
        Err(e) => return reject(e.to_string(), None),
    };
    if !(result.error < params.tau_icp) {
        return reject(format!("icp error {:e} above threshold", result.error), Some(result.error));
    }

    let pose = result.pose.orthonormalized();
    let stamp = pre.updates + 1;
    let mut surfels = pre.surfels.clone();
    let (map, visible) = splat(&surfels, &pose, intr, cloud.dims());
    let cos_max = params.icp.max_normal_angle_deg.to_radians().cos();
    let gate2 = params.icp.max_distance * params.icp.max_distance;

    // Fuse each visible surfel with the observation at its center pixel.
    let mut fused = vec![false; surfels.len()];
    for (i, s) in surfels.iter_mut().enumerate() {
        if !visible[i] {
            continue;
        }
        let p = pose.apply(&s.position);
        let Some((u, v)) = intr.project(&p) else { continue };
        let Some(j) = cloud.at_pixel(u.round(), v.round()) else { continue };
        let q = cloud.points[j];
        let nq = cloud.normals[j];
        if (p - q).norm_squared() > gate2 || (pose.rotation * s.normal).dot(&nq) < cos_max {
            continue;
        }
        let c = s.confidence;
        let q_obj = pose.apply_inverse(&q);
        let n_obj = pose.rotation.transpose() * nq;
        s.position = (s.position * c + q_obj) / (c + 1.0);
        s.normal = (s.normal * c + n_obj).try_normalize(1e-12).unwrap_or(s.normal);
        for k in 0..3 {
            s.color[k] = (s.color[k] * c + cloud.colors[j][k]) / (c + 1.0);
        }
        s.radius = s.radius.min(q.z / intr.fx * std::f64::consts::SQRT_2);
        s.confidence = c + 1.0;
        s.last_seen = stamp;
        fused[i] = true;
    }

    // Observations not explained by an existing splat become new surfels.
    for j in 0..cloud.len() {
        let (x, y) = cloud.pixels[j];
        let k = y * map.width + x;
        let owner = map.owner[k];
        let covered = owner != NO_POINT && (map.depth[k] - cloud.points[j].z).abs() <= params.icp.max_distance;
        if !covered {
            surfels.push(new_surfel(&cloud.points[j], &cloud.normals[j], cloud.colors[j], &pose, intr, stamp));
        }
    }

    surfels.retain(|s| !(stamp - s.last_seen.min(stamp) > params.stale_updates && s.confidence < params.stale_confidence));
    let mut out = PreImage {
        surfels,
        pose,
        reference_aspect: pre.reference_aspect,
        updates: stamp,
        last_coarse: Some(*coarse_position),
    };
    cap_surfels(&mut out, params.max_surfels);
    (
        out,
        UpdateOutcome {
            accepted: true,
            error: Some(result.error),
            reason: None,
        },
    )
}

/// Keep the `cap` most confident surfels (stable on ties).
fn cap_surfels(pre: &mut PreImage, cap: usize) {
    if pre.surfels.len() <= cap {
        return;
    }
    let mut order: Vec<usize> = (0..pre.surfels.len()).collect();
    order.sort_by(|&a, &b| {
        pre.surfels[b]
            .confidence
            .total_cmp(&pre.surfels[a].confidence)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; pre.surfels.len()];
    order.iter().take(cap).for_each(|&i| keep[i] = true);
    let mut i = 0;
    pre.surfels.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

/// Binary map of the visible splats inside `region` (clipped to the image).
pub fn project_occupancy(pre: &PreImage, intr: &CameraIntrinsics, region: &BBox, image_dims: (usize, usize)) -> Result<SegMask> {
    let rect = region
        .pixel_rect(image_dims.0, image_dims.1)
        .ok_or(OtrError::OutsideImage)?;
    Ok(occupancy_in(pre, intr, rect, image_dims))
}

fn occupancy_in(pre: &PreImage, intr: &CameraIntrinsics, rect: PixelRect, image_dims: (usize, usize)) -> SegMask {
    let (w, _) = image_dims;
    let (map, visible) = splat(&pre.surfels, &pre.pose, intr, image_dims);
    let occ = Grid::from_fn(rect.width(), rect.height(), |x, y| {
        let owner = map.owner[(y + rect.y0) * w + x + rect.x0];
        if owner != NO_POINT && visible[owner as usize] {
            1.0
        } else {
            0.0
        }
    });
    SegMask::new(rect, occ.clone(), occ).expect("occupancy dims follow the region")
}

/// Dilate twice with a 3x3 element and keep the largest 8-connected
/// component.
pub fn make_filter_mask(occupancy: &SegMask) -> SegMask {
    let mut m = occupancy.mask.clone();
    for _ in 0..2 {
        m = dilate3(&m);
    }
    let m = largest_component(&m);
    SegMask::new(occupancy.region, m.clone(), m).expect("same dims")
}

pub(crate) fn dilate3(g: &Grid) -> Grid {
    let (w, h) = g.dims();
    Grid::from_fn(w, h, |x, y| {
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                if g.get(xx, yy) > 0.5 {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

pub(crate) fn largest_component(g: &Grid) -> Grid {
    let (w, h) = g.dims();
    let mut label = vec![0u32; w * h];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if g.as_slice()[start] <= 0.5 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(k) = stack.pop() {
            size += 1;
            let (x, y) = (k % w, k / w);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let kk = yy * w + xx;
                    if label[kk] == 0 && g.as_slice()[kk] > 0.5 {
                        label[kk] = next;
                        stack.push(kk);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Grid::from_vec(
        w,
        h,
        label.iter().map(|&l| if l != 0 && l == best.0 { 1.0 } else { 0.0 }).collect(),
    )
}

/// Width over height of the tight box around the projected model.
pub fn aspect(pre: &PreImage, intr: &CameraIntrinsics, image_dims: (usize, usize)) -> Result<f64> {
    projected_bounds(pre, intr, image_dims)
        .map(|r| r.width() as f64 / r.height() as f64)
        .ok_or(OtrError::AspectUnavailable)
}

/// Tight pixel box of the occupancy over the whole image.
pub fn projected_bounds(pre: &PreImage, intr: &CameraIntrinsics, image_dims: (usize, usize)) -> Option<PixelRect> {
    if pre.is_empty() {
        return None;
    }
    let full = PixelRect {
        x0: 0,
        y0: 0,
        x1: image_dims.0,
        y1: image_dims.1,
    };
    let occ = occupancy_in(pre, intr, full, image_dims);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..image_dims.1 {
        for x in 0..image_dims.0 {
            if occ.mask.get(x, y) > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some(PixelRect { x0, y0, x1, y1 })
}

/// ASCII export, one surfel per line in object coordinates:
/// `x y z nx ny nz r g b radius confidence`.
pub fn write_surfels(pre: &PreImage, path: &Path) -> Result<()> {
    let mut s = String::with_capacity(pre.len() * 96);
    for sf in &pre.surfels {
        let p = sf.position;
        let n = sf.normal;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {}",
            p.x,
            p.y,
            p.z,
            n.x,
            n.y,
            n.z,
            sf.color[0].round() as u8,
            sf.color[1].round() as u8,
            sf.color[2].round() as u8,
            sf.radius,
            sf.confidence
        );
    }
    std::fs::write(path, s).map_err(|e| OtrError::io(path, e))
}

#[cfg(test)]
mod tests;
