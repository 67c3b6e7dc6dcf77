use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;

use image::{DynamicImage, ImageBuffer, Luma};

use super::{BBox, CameraIntrinsics, DepthImage, Frame, Sequence};
use crate::error::{OtrError, Result};

/// On-disk directory conventions understood by [`load_sequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `rgb/%08d.png`, `depth/%08d.png`, `groundtruth.txt`.
    Generic,
    /// Princeton-style: `rgb/r-<ts>-<id>.png`, `depth/d-<ts>-<id>.png`,
    /// `<name>.txt` ground truth and/or `init.txt`; depth stored bit-rotated.
    Ptb,
    /// STC-style: `rgb/` (or `color/`) and `depth/` paired in sorted order,
    /// `groundtruth.txt`.
    Stc,
}

impl FromStr for Layout {
    type Err = OtrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(Layout::Generic),
            "ptb" | "ptb_style" => Ok(Layout::Ptb),
            "stc" | "stc_style" => Ok(Layout::Stc),
            other => Err(OtrError::InvalidArgument(format!("unknown layout '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DepthCodec {
    Millimeters,
    /// Princeton toolkit encoding: the stored value is the depth rotated left
    /// by three bits.
    RotatedBy3,
}

/// Ordered frame provider. File-backed sources decode lazily.
#[derive(Debug)]
pub enum FrameSource {
    Files {
        rgb: Vec<PathBuf>,
        depth: Vec<PathBuf>,
        codec: DepthCodecTag,
    },
    Memory(Vec<Frame>),
}

/// Opaque wrapper so the codec stays private to this module.
#[derive(Debug, Clone, Copy)]
pub struct DepthCodecTag(DepthCodec);

impl FrameSource {
    pub fn len(&self) -> usize {
        match self {
            FrameSource::Files { rgb, .. } => rgb.len(),
            FrameSource::Memory(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, index: usize) -> Result<Frame> {
        match self {
            FrameSource::Memory(frames) => frames
                .get(index)
                .cloned()
                .ok_or_else(|| OtrError::InvalidArgument(format!("frame {index} out of range"))),
            FrameSource::Files { rgb, depth, codec } => {
                let rp = rgb
                    .get(index)
                    .ok_or_else(|| OtrError::InvalidArgument(format!("frame {index} out of range")))?;
                let dp = &depth[index];
                let color = decode_rgb(rp)?;
                let d = decode_depth(dp, codec.0)?;
                if color.dimensions() != d.dimensions() {
                    return Err(OtrError::DimensionMismatch(format!(
                        "{} is {:?} but {} is {:?}",
                        rp.display(),
                        color.dimensions(),
                        dp.display(),
                        d.dimensions()
                    )));
                }
                Frame::new(color, d, index)
            }
        }
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| OtrError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn decode_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(open_image(path)?.to_rgb8())
}

fn decode_depth(path: &Path, codec: DepthCodec) -> Result<DepthImage> {
    let img = match open_image(path)? {
        DynamicImage::ImageLuma16(d) => d,
        other => {
            return Err(OtrError::Decode {
                path: path.to_path_buf(),
                reason: format!("depth must be 16-bit grayscale, got {:?}", other.color()),
            })
        }
    };
    Ok(match codec {
        DepthCodec::Millimeters => img,
        DepthCodec::RotatedBy3 => {
            let (w, h) = img.dimensions();
            ImageBuffer::from_fn(w, h, |x, y| Luma([img.get_pixel(x, y).0[0].rotate_right(3)]))
        }
    })
}

pub fn parse_gt_line(line: &str) -> Result<Option<BBox>> {
    let vals: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if vals.len() != 4 {
        return Err(OtrError::InvalidArgument(format!(
            "ground-truth line needs 4 values: '{line}'"
        )));
    }
    let mut nums = [0.0; 4];
    for (n, s) in nums.iter_mut().zip(&vals) {
        *n = s
            .parse::<f64>()
            .map_err(|_| OtrError::InvalidArgument(format!("bad number '{s}' in '{line}'")))?;
    }
    if nums.iter().any(|v| v.is_nan()) {
        return Ok(None);
    }
    let b = BBox::new(nums[0], nums[1], nums[2], nums[3]);
    if !b.is_valid() {
        // Zero-sized boxes are how some datasets spell "absent".
        return Ok(None);
    }
    Ok(Some(b))
}

pub fn format_gt_line(b: Option<&BBox>) -> String {
    match b {
        Some(b) => format!("{},{},{},{}", b.x, b.y, b.w, b.h),
        None => "NaN,NaN,NaN,NaN".to_string(),
    }
}

pub fn parse_gt_file(path: &Path) -> Result<Vec<Option<BBox>>> {
    let text = fs::read_to_string(path).map_err(|e| OtrError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_gt_line)
        .collect()
}

pub fn write_gt_file(path: &Path, boxes: &[Option<BBox>]) -> Result<()> {
    let mut out = String::with_capacity(boxes.len() * 32);
    for b in boxes {
        out.push_str(&format_gt_line(b.as_ref()));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| OtrError::io(path, e))
}

/// `fx fy cx cy` on one line.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| OtrError::io(path, e))?;
    let v: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| OtrError::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if v.len() != 4 {
        return Err(OtrError::Decode {
            path: path.to_path_buf(),
            reason: "expected 'fx fy cx cy'".into(),
        });
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3])
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    fs::write(path, format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy))
        .map_err(|e| OtrError::io(path, e))
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| OtrError::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort_by_key(|p| natural_key(p));
    Ok(files)
}

/// Sort key that orders embedded integers numerically ("f2" < "f10").
fn natural_key(p: &Path) -> Vec<(u64, String)> {
    let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut key = Vec::new();
    let mut text = String::new();
    let mut num = String::new();
    for c in name.chars() {
        if c.is_ascii_digit() {
            num.push(c);
        } else {
            if !num.is_empty() {
                key.push((num.parse().unwrap_or(u64::MAX), std::mem::take(&mut text)));
                num.clear();
            }
            text.push(c);
        }
    }
    key.push((num.parse().unwrap_or(0), text));
    key
}

/// PTB names frames `r-<timestamp>-<id>.png`; order by the trailing id.
fn ptb_frame_id(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_string_lossy();
    stem.rsplit('-').next()?.parse().ok()
}

fn load_generic_frames(dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    loop {
        let i = rgb.len();
        let rp = dir.join("rgb").join(format!("{i:08}.png"));
        if !rp.exists() {
            break;
        }
        let dp = dir.join("depth").join(format!("{i:08}.png"));
        if !dp.exists() {
            return Err(OtrError::Decode {
                path: dp,
                reason: "missing depth image".into(),
            });
        }
        rgb.push(rp);
        depth.push(dp);
    }
    Ok((rgb, depth))
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into())
}

/// Load a sequence directory. Frames are decoded lazily, in index order.
///
/// The first ground-truth line gives the initial box. For PTB-style
/// sequences whose ground truth is withheld, `init.txt` supplies it and
/// [`Sequence::gt`] is `None`.
pub fn load_sequence(dir: &Path, layout: Layout) -> Result<Sequence> {
    if !dir.is_dir() {
        return Err(OtrError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let name = dir_name(dir);
    let (rgb, depth, codec, gt_path) = match layout {
        Layout::Generic => {
            let (r, d) = load_generic_frames(dir)?;
            (r, d, DepthCodec::Millimeters, dir.join("groundtruth.txt"))
        }
        Layout::Ptb => {
            let mut r = sorted_pngs(&dir.join("rgb"))?;
            let mut d = sorted_pngs(&dir.join("depth"))?;
            r.sort_by_key(|p| ptb_frame_id(p));
            d.sort_by_key(|p| ptb_frame_id(p));
            (r, d, DepthCodec::RotatedBy3, dir.join(format!("{name}.txt")))
        }
        Layout::Stc => {
            let color_dir = if dir.join("rgb").is_dir() {
                dir.join("rgb")
            } else {
                dir.join("color")
            };
            let r = sorted_pngs(&color_dir)?;
            let d = sorted_pngs(&dir.join("depth"))?;
            (r, d, DepthCodec::Millimeters, dir.join("groundtruth.txt"))
        }
    };
    if rgb.is_empty() {
        return Err(OtrError::Decode {
            path: dir.to_path_buf(),
            reason: "no frames found".into(),
        });
    }
    if rgb.len() != depth.len() {
        return Err(OtrError::DimensionMismatch(format!(
            "{} rgb frames vs {} depth frames",
            rgb.len(),
            depth.len()
        )));
    }

    let gt = if gt_path.exists() {
        Some(parse_gt_file(&gt_path)?)
    } else {
        None
    };
    let init_path = dir.join("init.txt");
    let init_bbox = if init_path.exists() {
        parse_gt_file(&init_path)?.into_iter().next().flatten()
    } else {
        gt.as_ref().and_then(|g| g.first().copied().flatten())
    }
    .ok_or(OtrError::NoGroundTruth)?;

    if let Some(g) = &gt {
        if g.len() != rgb.len() {
            return Err(OtrError::DimensionMismatch(format!(
                "{} ground-truth lines for {} frames",
                g.len(),
                rgb.len()
            )));
        }
    }

    // Dimensions come from frame 0; later frames are checked as they decode.
    let frames = FrameSource::Files {
        rgb,
        depth,
        codec: DepthCodecTag(codec),
    };
    let first = frames.frame(0)?;
    let intr_path = dir.join("intrinsics.txt");
    let intrinsics = if intr_path.exists() {
        read_intrinsics(&intr_path)?
    } else {
        CameraIntrinsics::default_for(first.width(), first.height())
    };
    intrinsics.validate_for(first.width(), first.height())?;

    Ok(Sequence {
        name,
        frames,
        init_bbox,
        gt,
        intrinsics,
    })
}

/// Write frames in the generic layout, plus ground truth and intrinsics.
pub fn write_sequence(
    dir: &Path,
    frames: &[Frame],
    gt: &[Option<BBox>],
    intrinsics: &CameraIntrinsics,
) -> Result<()> {
    for sub in ["rgb", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| OtrError::io(&p, e))?;
    }
    for (i, f) in frames.iter().enumerate() {
        let rp = dir.join("rgb").join(format!("{i:08}.png"));
        f.rgb.save(&rp).map_err(|e| OtrError::Decode {
            path: rp.clone(),
            reason: e.to_string(),
        })?;
        let dp = dir.join("depth").join(format!("{i:08}.png"));
        f.depth.save(&dp).map_err(|e| OtrError::Decode {
            path: dp.clone(),
            reason: e.to_string(),
        })?;
    }
    write_gt_file(&dir.join("groundtruth.txt"), gt)?;
    write_intrinsics(&dir.join("intrinsics.txt"), intrinsics)?;
    let readme = dir.join("README.txt");
    let mut f = fs::File::create(&readme).map_err(|e| OtrError::io(&readme, e))?;
    writeln!(f, "generic layout: rgb/%08d.png depth/%08d.png (uint16 mm) groundtruth.txt")
        .map_err(|e| OtrError::io(&readme, e))?;
    Ok(())
}

/// Decodes frames on a background thread, delivering them strictly in
/// index order through a bounded channel.
pub struct Prefetcher {
    rx: Option<mpsc::Receiver<Result<Frame>>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(seq: std::sync::Arc<Sequence>, depth: usize) -> Self {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            for i in 0..seq.len() {
                if tx.send(seq.frame(i)).is_err() {
                    break;
                }
            }
        });
        Prefetcher {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Closing the receiver makes the producer's next send fail.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write_frame(dir: &Path, i: usize, rgb: (u32, u32), depth: (u32, u32)) {
        fs::create_dir_all(dir.join("rgb")).unwrap();
        fs::create_dir_all(dir.join("depth")).unwrap();
        RgbImage::new(rgb.0, rgb.1)
            .save(dir.join("rgb").join(format!("{i:08}.png")))
            .unwrap();
        DepthImage::from_pixel(depth.0, depth.1, Luma([1000]))
            .save(dir.join("depth").join(format!("{i:08}.png")))
            .unwrap();
    }

    #[test]
    fn sentinel_line_is_absent() {
        assert_eq!(parse_gt_line("NaN,NaN,NaN,NaN").unwrap(), None);
        assert_eq!(
            parse_gt_line("1,2,3,4").unwrap(),
            Some(BBox::new(1.0, 2.0, 3.0, 4.0))
        );
        assert!(parse_gt_line("1,2,3").is_err());
    }

    #[test]
    fn loads_generic_sequence() {
        let tmp = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_frame(tmp.path(), i, (64, 48), (64, 48));
        }
        fs::write(
            tmp.path().join("groundtruth.txt"),
            "10,10,20,20\nNaN,NaN,NaN,NaN\n11,10,20,20\n",
        )
        .unwrap();
        let seq = load_sequence(tmp.path(), Layout::Generic).unwrap();
        assert_eq!(seq.len(), 3);
        let gt = seq.require_gt().unwrap();
        assert_eq!(gt.len(), 3);
        assert_eq!(gt[1], None);
        assert_eq!(seq.init_bbox, BBox::new(10.0, 10.0, 20.0, 20.0));
        let f = seq.frame(2).unwrap();
        assert_eq!(f.index, 2);
        assert_eq!(f.depth_mm(5, 5), 1000);
    }

    #[test]
    fn mismatched_depth_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_frame(tmp.path(), 0, (640, 480), (320, 240));
        fs::write(tmp.path().join("groundtruth.txt"), "10,10,20,20\n").unwrap();
        let err = load_sequence(tmp.path(), Layout::Generic).unwrap_err();
        assert!(matches!(err, OtrError::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn missing_ground_truth_is_explicit() {
        let tmp = tempfile::tempdir().unwrap();
        write_frame(tmp.path(), 0, (64, 48), (64, 48));
        let err = load_sequence(tmp.path(), Layout::Generic).unwrap_err();
        assert!(matches!(err, OtrError::NoGroundTruth));
    }

    #[test]
    fn undecodable_image_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_frame(tmp.path(), 0, (64, 48), (64, 48));
        fs::write(tmp.path().join("rgb").join("00000000.png"), b"not a png").unwrap();
        fs::write(tmp.path().join("groundtruth.txt"), "1,1,5,5\n").unwrap();
        let err = load_sequence(tmp.path(), Layout::Generic).unwrap_err();
        assert!(err.to_string().contains("00000000.png"), "{err}");
    }

    #[test]
    fn ptb_depth_is_rotated_back() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("bear_front");
        fs::create_dir_all(dir.join("rgb")).unwrap();
        fs::create_dir_all(dir.join("depth")).unwrap();
        for (i, ts) in [(1u32, 100u32), (2, 50)] {
            RgbImage::new(40, 40)
                .save(dir.join("rgb").join(format!("r-{ts}-{i}.png")))
                .unwrap();
            let stored = (1234u16 + i as u16).rotate_left(3);
            DepthImage::from_pixel(40, 40, Luma([stored]))
                .save(dir.join("depth").join(format!("d-{ts}-{i}.png")))
                .unwrap();
        }
        fs::write(dir.join("init.txt"), "5,5,10,10\n").unwrap();
        let seq = load_sequence(&dir, Layout::Ptb).unwrap();
        assert!(seq.gt.is_none());
        assert_eq!(seq.frame(0).unwrap().depth_mm(0, 0), 1235);
        assert_eq!(seq.frame(1).unwrap().depth_mm(0, 0), 1236);
        assert!(matches!(seq.require_gt(), Err(OtrError::NoGroundTruth)));
    }

    #[test]
    fn prefetcher_preserves_order() {
        let frames: Vec<Frame> = (0..5)
            .map(|i| Frame::new(RgbImage::new(32, 32), DepthImage::new(32, 32), i).unwrap())
            .collect();
        let seq = Sequence {
            name: "mem".into(),
            frames: FrameSource::Memory(frames),
            init_bbox: BBox::new(1.0, 1.0, 4.0, 4.0),
            gt: None,
            intrinsics: CameraIntrinsics::default_for(32, 32),
        };
        let idx: Vec<usize> = Prefetcher::spawn(std::sync::Arc::new(seq), 2)
            .map(|f| f.unwrap().index)
            .collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }
}
