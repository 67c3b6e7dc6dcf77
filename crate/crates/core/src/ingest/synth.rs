//! Deterministic synthetic RGB-D sequences.
//!
//! A textured rigid cuboid is ray cast through a pinhole camera in front of a
//! textured background plane. Depth is the analytic z-buffer in millimeters
//! and the ground-truth box is the axis-aligned bound of the projected cuboid
//! corners. Textures are procedural checkers whose cell colors come from a
//! seeded hash, so the same parameters always produce the same pixels.

use std::path::Path;
use std::str::FromStr;

use image::{Luma, Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};

use super::{write_sequence, BBox, CameraIntrinsics, DepthImage, Frame, FrameSource, Sequence};
use crate::error::{OtrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// The target yaws from 0 to 90 degrees about its vertical axis.
    Rotation,
    /// A planar occluder slides over the static target and away again.
    Occlusion,
    /// The target drifts laterally (and optionally in depth).
    Translation,
}

impl FromStr for Scenario {
    type Err = OtrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(Scenario::Rotation),
            "occlusion" => Ok(Scenario::Occlusion),
            "translation" => Ok(Scenario::Translation),
            other => Err(OtrError::InvalidArgument(format!("unknown scenario '{other}'"))),
        }
    }
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Rotation => "rotation",
            Scenario::Occlusion => "occlusion",
            Scenario::Translation => "translation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Option<CameraIntrinsics>,
    pub seed: u64,
    /// Cuboid width, height and thickness in meters.
    pub target_size: [f64; 3],
    /// Depth of the front face at frame 0, meters.
    pub distance: f64,
    /// Front-face depth at the last frame (translation only).
    pub end_distance: f64,
    pub background_depth: f64,
    /// Peak lateral offset of the target (translation only), meters.
    pub lateral_amplitude: f64,
    pub vertical_amplitude: f64,
    /// Final yaw (rotation only), degrees.
    pub yaw_end_deg: f64,
    pub occluder_depth: f64,
    pub occluder_size: [f64; 2],
    /// Frames during which the occluder hides the target completely.
    pub occlusion_frames: usize,
    /// Peak-to-peak amplitude of per-pixel intensity noise.
    pub noise: u8,
}

impl SynthParams {
    pub fn for_scenario(scenario: Scenario) -> Self {
        let base = SynthParams {
            width: 640,
            height: 480,
            intrinsics: None,
            seed: 7,
            target_size: [0.20, 0.20, 0.10],
            distance: 1.0,
            end_distance: 1.0,
            background_depth: 2.5,
            lateral_amplitude: 0.0,
            vertical_amplitude: 0.0,
            yaw_end_deg: 0.0,
            occluder_depth: 0.7,
            occluder_size: [0.5, 0.8],
            occlusion_frames: 20,
            noise: 6,
        };
        match scenario {
            Scenario::Translation => SynthParams {
                lateral_amplitude: 0.20,
                vertical_amplitude: 0.05,
                ..base
            },
            Scenario::Rotation => SynthParams {
                target_size: [0.30, 0.10, 0.01],
                yaw_end_deg: 90.0,
                ..base
            },
            Scenario::Occlusion => SynthParams {
                distance: 1.2,
                end_distance: 1.2,
                ..base
            },
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
            .unwrap_or_else(|| CameraIntrinsics::default_for(self.width, self.height))
    }
}

/// Rigid pose of the cuboid centroid in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPose {
    pub center: Vector3<f64>,
    pub yaw: f64,
}

impl TargetPose {
    pub fn rotation(&self) -> Matrix3<f64> {
        yaw_matrix(self.yaw)
    }
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Occluder {
    center_x: f64,
    depth: f64,
    half_w: f64,
    half_h: f64,
}

/// In-memory result of [`generate`].
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub scenario: Scenario,
    pub frames: Vec<Frame>,
    pub gt: Vec<Option<BBox>>,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<TargetPose>,
    /// Number of pixels where the target is the nearest surface.
    pub visible_pixels: Vec<usize>,
    /// Projected (unoccluded) bounds, present even on occluded frames.
    pub projected: Vec<BBox>,
}

impl SynthSequence {
    pub fn init_bbox(&self) -> BBox {
        self.gt[0].expect("target visible in frame 0")
    }

    pub fn into_sequence(self, name: &str) -> Sequence {
        let init_bbox = self.init_bbox();
        Sequence {
            name: name.to_string(),
            frames: FrameSource::Memory(self.frames),
            init_bbox,
            gt: Some(self.gt),
            intrinsics: self.intrinsics,
        }
    }

    /// First frame index at which the target is completely hidden.
    pub fn first_full_occlusion(&self) -> Option<usize> {
        self.gt.iter().position(|g| g.is_none())
    }

    /// First visible frame after the hidden stretch.
    pub fn reappearance(&self) -> Option<usize> {
        let start = self.first_full_occlusion()?;
        (start..self.gt.len()).find(|&i| self.gt[i].is_some())
    }
}

pub fn target_pose(scenario: Scenario, p: &SynthParams, t: usize, frames: usize) -> TargetPose {
    let u = if frames > 1 {
        t as f64 / (frames - 1) as f64
    } else {
        0.0
    };
    let half_depth = p.target_size[2] / 2.0;
    match scenario {
        Scenario::Translation => {
            let phase = 2.0 * std::f64::consts::PI * u;
            let z = p.distance + (p.end_distance - p.distance) * u;
            TargetPose {
                center: Vector3::new(
                    p.lateral_amplitude * phase.sin(),
                    p.vertical_amplitude * (1.0 - phase.cos()) / 2.0,
                    z + half_depth,
                ),
                yaw: 0.0,
            }
        }
        Scenario::Rotation => TargetPose {
            center: Vector3::new(0.0, 0.0, p.distance + half_depth),
            yaw: p.yaw_end_deg.to_radians() * u,
        },
        Scenario::Occlusion => TargetPose {
            center: Vector3::new(0.0, 0.0, p.distance + half_depth),
            yaw: 0.0,
        },
    }
}

/// Occluder x-position keyframes: enters quickly, drifts while covering the
/// target for `occlusion_frames`, leaves quickly.
fn occluder_at(p: &SynthParams, t: usize, frames: usize) -> Option<Occluder> {
    let k = p.intrinsics();
    let start = frames / 3;
    let len = p.occlusion_frames;
    let half_w = p.occluder_size[0] / 2.0;
    // Largest |x| (meters, at the occluder plane) that still covers the
    // target's projected half-width plus a two pixel margin.
    let target_half_px = k.fx * (p.target_size[0] / 2.0) / p.distance + 2.0;
    let cover = half_w - target_half_px * p.occluder_depth / k.fx;
    let away = half_w + (k.cx + 8.0) * p.occluder_depth / k.fx;
    let keys = [
        (start as f64 - 4.0, -away),
        (start as f64, -cover),
        ((start + len - 1) as f64, cover),
        ((start + len + 3) as f64, away),
    ];
    let t = t as f64;
    if t < keys[0].0 || t > keys[3].0 {
        return None;
    }
    let x = keys
        .windows(2)
        .find(|w| t >= w[0].0 && t <= w[1].0)
        .map(|w| {
            let a = (t - w[0].0) / (w[1].0 - w[0].0).max(1e-9);
            w[0].1 + a * (w[1].1 - w[0].1)
        })
        .unwrap_or(away);
    Some(Occluder {
        center_x: x,
        depth: p.occluder_depth,
        half_w,
        half_h: p.occluder_size[1] / 2.0,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash(a: i64, b: i64, c: u64) -> u64 {
    splitmix(splitmix(splitmix(a as u64) ^ b as u64) ^ c)
}

const FRONT: [[u8; 3]; 4] = [[220, 40, 40], [250, 200, 30], [240, 120, 20], [180, 20, 90]];
const BACK: [[u8; 3]; 3] = [[120, 40, 200], [200, 80, 220], [60, 20, 120]];
const SIDE: [[u8; 3]; 2] = [[30, 200, 200], [20, 120, 160]];
const CAP: [[u8; 3]; 2] = [[200, 200, 60], [150, 150, 40]];
const BACKGROUND: [[u8; 3]; 4] = [[90, 100, 120], [140, 150, 160], [70, 80, 90], [110, 120, 140]];
const OCCLUDER: [[u8; 3]; 3] = [[40, 160, 60], [20, 100, 40], [90, 200, 90]];

fn checker(palette: &[[u8; 3]], a: f64, b: f64, cell: f64, salt: u64) -> [f64; 3] {
    let i = (a / cell).floor() as i64;
    let j = (b / cell).floor() as i64;
    let c = palette[(hash(i, j, salt) % palette.len() as u64) as usize];
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

enum Hit {
    Target { t: f64, color: [f64; 3] },
    Other { t: f64, color: [f64; 3] },
}

/// Slab test against the cuboid in its local frame. Returns the entry
/// distance, the entered axis and the outward face sign.
pub(crate) fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, half: &[f64; 3]) -> Option<(f64, usize, f64)> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for i in 0..3 {
        if d[i].abs() < 1e-12 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let t1 = (-half[i] - o[i]) / d[i];
        let t2 = (half[i] - o[i]) / d[i];
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if near > tmin {
            tmin = near;
            axis = i;
            sign = -d[i].signum();
        }
        tmax = tmax.min(far);
    }
    (tmax >= tmin && tmin > 0.0).then_some((tmin, axis, sign))
}

struct Renderer<'a> {
    p: &'a SynthParams,
    k: CameraIntrinsics,
}

impl Renderer<'_> {
    fn render(&self, pose: &TargetPose, occ: Option<Occluder>, index: usize) -> (Frame, usize) {
        let (w, h) = (self.p.width as u32, self.p.height as u32);
        let rot = pose.rotation();
        let rot_t = rot.transpose();
        let half = [
            self.p.target_size[0] / 2.0,
            self.p.target_size[1] / 2.0,
            self.p.target_size[2] / 2.0,
        ];
        let origin_local = rot_t * (-pose.center);
        let seed = self.p.seed;
        let mut rgb = RgbImage::new(w, h);
        let mut depth = DepthImage::new(w, h);
        let mut visible = 0;

        for v in 0..h {
            for u in 0..w {
                let d = Vector3::new(
                    (u as f64 - self.k.cx) / self.k.fx,
                    (v as f64 - self.k.cy) / self.k.fy,
                    1.0,
                );
                let bg_t = self.p.background_depth;
                let bx = d.x * bg_t;
                let by = d.y * bg_t;
                let mut hit = Hit::Other {
                    t: bg_t,
                    color: checker(&BACKGROUND, bx, by, 0.15, seed ^ 0xB6),
                };

                let dl = rot_t * d;
                if let Some((t, axis, sign)) = ray_box(&origin_local, &dl, &half) {
                    if t < hit_t(&hit) {
                        let q = origin_local + dl * t;
                        let (palette, a, b, salt): (&[[u8; 3]], f64, f64, u64) = match (axis, sign > 0.0) {
                            (2, false) => (&FRONT, q.x, q.y, 1),
                            (2, true) => (&BACK, q.x, q.y, 2),
                            (0, pos) => (&SIDE, q.z, q.y, 3 + pos as u64),
                            (_, pos) => (&CAP, q.x, q.z, 5 + pos as u64),
                        };
                        let mut color = checker(palette, a, b, 0.025, seed ^ salt);
                        let mut normal = Vector3::zeros();
                        normal[axis] = sign;
                        let cos = (rot * normal).dot(&d.normalize()).abs();
                        let shade = 0.55 + 0.45 * cos;
                        color.iter_mut().for_each(|c| *c *= shade);
                        hit = Hit::Target { t, color };
                    }
                }

                if let Some(o) = occ {
                    let t = o.depth;
                    let ox = d.x * t - o.center_x;
                    let oy = d.y * t;
                    if t < hit_t(&hit) && ox.abs() <= o.half_w && oy.abs() <= o.half_h {
                        hit = Hit::Other {
                            t,
                            color: checker(&OCCLUDER, ox, oy, 0.05, seed ^ 0x0C),
                        };
                    }
                }

                let (t, color) = match hit {
                    Hit::Target { t, color } => {
                        visible += 1;
                        (t, color)
                    }
                    Hit::Other { t, color } => (t, color),
                };
                let noise = if self.p.noise > 0 {
                    let n = hash(u as i64, v as i64, seed ^ (index as u64) << 20);
                    (n % (self.p.noise as u64 + 1)) as f64 - self.p.noise as f64 / 2.0
                } else {
                    0.0
                };
                let px = [
                    (color[0] + noise).round().clamp(0.0, 255.0) as u8,
                    (color[1] + noise).round().clamp(0.0, 255.0) as u8,
                    (color[2] + noise).round().clamp(0.0, 255.0) as u8,
                ];
                rgb.put_pixel(u, v, Rgb(px));
                depth.put_pixel(u, v, Luma([(t * 1000.0).round().clamp(0.0, 65535.0) as u16]));
            }
        }
        let frame = Frame::new(rgb, depth, index).expect("renderer dims are consistent");
        (frame, visible)
    }
}

fn hit_t(h: &Hit) -> f64 {
    match h {
        Hit::Target { t, .. } | Hit::Other { t, .. } => *t,
    }
}

/// Axis-aligned bounds of the projected cuboid corners.
pub fn projected_bounds(pose: &TargetPose, size: &[f64; 3], k: &CameraIntrinsics) -> BBox {
    let rot = pose.rotation();
    let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                let c = pose.center + rot * Vector3::new(sx * size[0], sy * size[1], sz * size[2]);
                if let Some((u, v)) = k.project(&c) {
                    u0 = u0.min(u);
                    u1 = u1.max(u);
                    v0 = v0.min(v);
                    v1 = v1.max(v);
                }
            }
        }
    }
    BBox::new(u0, v0, u1 - u0, v1 - v0)
}

/// Render a scenario into memory.
pub fn generate(scenario: Scenario, frames: usize, params: &SynthParams) -> Result<SynthSequence> {
    if frames < 10 {
        return Err(OtrError::InvalidArgument(format!(
            "need at least 10 frames, got {frames}"
        )));
    }
    if scenario == Scenario::Occlusion && frames < frames / 3 + params.occlusion_frames + 8 {
        return Err(OtrError::InvalidArgument(format!(
            "{frames} frames cannot fit a {}-frame occlusion",
            params.occlusion_frames
        )));
    }
    let k = params.intrinsics();
    k.validate_for(params.width, params.height)?;
    let renderer = Renderer { p: params, k };

    let mut out = SynthSequence {
        scenario,
        frames: Vec::with_capacity(frames),
        gt: Vec::with_capacity(frames),
        intrinsics: k,
        poses: Vec::with_capacity(frames),
        visible_pixels: Vec::with_capacity(frames),
        projected: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let pose = target_pose(scenario, params, t, frames);
        let occ = match scenario {
            Scenario::Occlusion => occluder_at(params, t, frames),
            _ => None,
        };
        let (frame, visible) = renderer.render(&pose, occ, t);
        let bounds = projected_bounds(&pose, &params.target_size, &k);
        out.gt.push((visible > 0).then_some(bounds));
        out.frames.push(frame);
        out.poses.push(pose);
        out.visible_pixels.push(visible);
        out.projected.push(bounds);
    }
    if out.gt[0].is_none() {
        return Err(OtrError::InvalidArgument(
            "target not visible in the first frame".into(),
        ));
    }
    Ok(out)
}

/// Render a scenario and write it in the generic layout under `out`.
pub fn synth_generate(
    scenario: Scenario,
    frames: usize,
    params: &SynthParams,
    out: &Path,
) -> Result<SynthSequence> {
    let seq = generate(scenario, frames, params)?;
    write_sequence(out, &seq.frames, &seq.gt, &seq.intrinsics)?;
    Ok(seq)
}
