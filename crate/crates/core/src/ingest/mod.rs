//! Frames, sequences and depth utilities.
//!
//! Pixel coordinates follow the pinhole convention: pixel `(u, v)` has its
//! center at the continuous coordinate `(u, v)`. Bounding boxes live in the
//! same coordinate system, so the center of `BBox { x, y, w, h }` is
//! `(x + w / 2, y + h / 2)`.

mod io;
pub mod synth;

use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{OtrError, Result};

pub use io::{
    format_gt_line, load_sequence, parse_gt_file, parse_gt_line, read_intrinsics, write_gt_file,
    write_intrinsics, write_sequence, FrameSource, Layout, Prefetcher,
};

/// Depth map in millimeters; zero marks an invalid measurement.
pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

pub const MIN_FRAME_SIDE: u32 = 32;

/// One registered RGB-D observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub index: usize,
}

impl Frame {
    pub fn new(rgb: RgbImage, depth: DepthImage, index: usize) -> Result<Self> {
        if rgb.dimensions() != depth.dimensions() {
            return Err(OtrError::DimensionMismatch(format!(
                "rgb {:?} vs depth {:?}",
                rgb.dimensions(),
                depth.dimensions()
            )));
        }
        let (w, h) = rgb.dimensions();
        if w < MIN_FRAME_SIDE || h < MIN_FRAME_SIDE {
            return Err(OtrError::InvalidArgument(format!(
                "frame {w}x{h} smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        Ok(Frame { rgb, depth, index })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.rgb.width() as usize
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.rgb.height() as usize
    }

    #[inline]
    pub fn depth_mm(&self, x: usize, y: usize) -> u16 {
        self.depth.get_pixel(x as u32, y as u32).0[0]
    }

    pub fn has_valid_depth(&self) -> bool {
        self.depth.as_raw().iter().any(|&d| d > 0)
    }

    /// True when every pixel has equal red, green and blue values.
    pub fn is_monochrome(&self) -> bool {
        self.rgb.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2])
    }
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub const DEFAULT_FOCAL: f64 = 525.0;

    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(OtrError::InvalidArgument(format!(
                "intrinsics fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Structured-light sensor defaults: focal 525 px, principal point at the
    /// image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        CameraIntrinsics {
            fx: Self::DEFAULT_FOCAL,
            fy: Self::DEFAULT_FOCAL,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.cx < 0.0 || self.cx >= width as f64 || self.cy < 0.0 || self.cy >= height as f64 {
            return Err(OtrError::InvalidArgument(format!(
                "principal point ({}, {}) outside {width}x{height}",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Lift pixel `(u, v)` at depth `z` meters into camera coordinates.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 1e-9 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Axis-aligned box: top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)`, already clipped to an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            0.0
        } else {
            ix * iy
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Same center, extent multiplied per axis.
    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        let (cx, cy) = self.center();
        BBox::from_center(cx, cy, self.w * sx, self.h * sy)
    }

    /// Pixels whose centers fall inside the box, clipped to the image.
    /// `None` when the intersection is empty.
    pub fn pixel_rect(&self, width: usize, height: usize) -> Option<PixelRect> {
        let clamp = |v: f64, hi: usize| -> usize { v.round().clamp(0.0, hi as f64) as usize };
        let r = PixelRect {
            x0: clamp(self.x, width),
            y0: clamp(self.y, height),
            x1: clamp(self.x + self.w, width),
            y1: clamp(self.y + self.h, height),
        };
        (r.x1 > r.x0 && r.y1 > r.y0).then_some(r)
    }

    /// True when the box lies fully inside a `width x height` image.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= -0.5
            && self.y >= -0.5
            && self.x + self.w <= width as f64 + 0.5
            && self.y + self.h <= height as f64 + 0.5
    }
}

/// An RGB-D sequence with optional per-frame ground truth.
#[derive(Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: FrameSource,
    pub init_bbox: BBox,
    pub gt: Option<Vec<Option<BBox>>>,
    pub intrinsics: CameraIntrinsics,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.len() == 0
    }

    pub fn frame(&self, index: usize) -> Result<Frame> {
        self.frames.frame(index)
    }

    /// Frames in index order, decoded on demand.
    pub fn iter(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (0..self.len()).map(move |i| self.frame(i))
    }

    /// Ground truth, or the explicit "no GT" error evaluation mode needs.
    pub fn require_gt(&self) -> Result<&[Option<BBox>]> {
        self.gt.as_deref().ok_or(OtrError::NoGroundTruth)
    }
}

/// Median of the valid (nonzero) depth values inside `bbox`, in millimeters.
/// An even count yields the mean of the two middle values.
pub fn median_depth(frame: &Frame, bbox: &BBox) -> Result<f64> {
    let rect = bbox
        .pixel_rect(frame.width(), frame.height())
        .ok_or(OtrError::DepthUnavailable)?;
    let mut values: Vec<u16> = Vec::with_capacity(rect.area());
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let d = frame.depth_mm(x, y);
            if d > 0 {
                values.push(d);
            }
        }
    }
    median_of(&mut values).ok_or(OtrError::DepthUnavailable)
}

fn median_of(values: &mut [u16]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable(mid);
    let upper = *upper as f64;
    if n % 2 == 1 {
        Some(upper)
    } else {
        let lower_max = *lower.iter().max().expect("even count has a lower half") as f64;
        Some((lower_max + upper) / 2.0)
    }
}
