//! Overlap metrics, reports and overlays.
//!
//! Absent boxes follow the long-term convention: agreeing on absence scores
//! a full overlap, any disagreement scores zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{OtrError, Result};
use crate::ingest::{write_gt_file, BBox};
use crate::tracker::{Mode, TrackResult};

/// Overlap thresholds of the success curve: 0.00, 0.05, ..., 1.00.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Center-error thresholds of the precision curve, 0 to 50 pixels.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

pub const PRECISION_RADIUS: f64 = 20.0;

pub fn overlap(pred: Option<&BBox>, gt: Option<&BBox>) -> f64 {
    match (pred, gt) {
        (Some(p), Some(g)) => p.iou(g),
        (None, None) => 1.0,
        _ => 0.0,
    }
}

/// Distance between box centers; infinite when exactly one box is absent
/// and zero when both are.
pub fn center_error(pred: Option<&BBox>, gt: Option<&BBox>) -> f64 {
    match (pred, gt) {
        (Some(p), Some(g)) => {
            let (a, b) = (p.center(), g.center());
            (a.0 - b.0).hypot(a.1 - b.1)
        }
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

pub fn success_rate(overlaps: &[f64]) -> Result<f64> {
    if overlaps.is_empty() {
        return Err(OtrError::InvalidArgument("success rate of an empty sequence".into()));
    }
    Ok(overlaps.iter().sum::<f64>() / overlaps.len() as f64)
}

/// Fraction of `values` passing `pass` for each threshold.
fn curve(values: &[f64], thresholds: &[f64], pass: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| values.iter().filter(|&&v| pass(v, t)).count() as f64 / values.len() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    pub success_thresholds: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub precision_thresholds: Vec<f64>,
    pub precision_curve: Vec<f64>,
    pub precision_at_20: f64,
    pub overlaps: Vec<f64>,
    /// Per-frame center errors; `None` stands for an infinite error.
    pub center_errors: Vec<Option<f64>>,
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| OtrError::Report(e.to_string()))
    }
}

pub fn stc_metrics(pred: &[Option<BBox>], gt: &[Option<BBox>]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(OtrError::DimensionMismatch(format!(
            "{} predicted boxes for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| overlap(p.as_ref(), g.as_ref())).collect();
    let errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| center_error(p.as_ref(), g.as_ref()))
        .collect();
    let sr = success_rate(&overlaps)?;
    let st = success_thresholds();
    let success_curve = curve(&overlaps, &st, |o, t| o >= t);
    let auc = success_curve.iter().sum::<f64>() / success_curve.len() as f64;
    let pt = precision_thresholds();
    let precision_curve = curve(&errors, &pt, |e, t| e <= t);
    let p20 = errors.iter().filter(|&&e| e <= PRECISION_RADIUS).count() as f64 / errors.len() as f64;
    Ok(Metrics {
        success_rate: sr,
        success_thresholds: st,
        success_curve,
        auc,
        precision_thresholds: pt,
        precision_curve,
        precision_at_20: p20,
        overlaps,
        center_errors: errors.into_iter().map(|e| e.is_finite().then_some(e)).collect(),
    })
}

/// One tracked frame as stored in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub bbox: Option<BBox>,
    pub confidence: f64,
    /// `tracking` or `redetect`.
    pub mode: String,
    pub source: Option<String>,
    pub uncertainty: Option<f64>,
    pub aspect: Option<f64>,
    pub snapshot_created: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FrameRecord {
    pub fn from_result(r: &TrackResult) -> Self {
        FrameRecord {
            frame: r.frame,
            bbox: r.bbox,
            confidence: r.confidence,
            mode: match r.mode {
                Mode::Tracking => "tracking".into(),
                Mode::Redetect { .. } => "redetect".into(),
            },
            source: r.info.source.clone(),
            uncertainty: r.info.uncertainty,
            aspect: r.info.aspect,
            snapshot_created: r.info.snapshot_created,
            error: r.info.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub absent_frames: usize,
    pub snapshots: usize,
    pub surfels: usize,
    pub success_rate: Option<f64>,
    pub auc: Option<f64>,
    pub precision_at_20: Option<f64>,
}

/// Everything written to `report.json`. Contains no timing so that reports
/// of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sequence: String,
    pub config: BTreeMap<String, String>,
    pub summary: Summary,
    pub frames: Vec<FrameRecord>,
    pub metrics: Option<Metrics>,
    /// `threshold,success` rows for external plotting.
    pub success_csv: Option<String>,
    /// `threshold,precision` rows for external plotting.
    pub precision_csv: Option<String>,
}

fn csv(thresholds: &[f64], values: &[f64], header: &str) -> String {
    let mut s = format!("threshold,{header}\n");
    for (t, v) in thresholds.iter().zip(values) {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

impl Report {
    pub fn new(
        sequence: &str,
        config: BTreeMap<String, String>,
        results: &[TrackResult],
        gt: Option<&[Option<BBox>]>,
        snapshots: usize,
        surfels: usize,
    ) -> Result<Self> {
        let pred: Vec<Option<BBox>> = results.iter().map(|r| r.bbox).collect();
        let metrics = gt.map(|g| stc_metrics(&pred, g)).transpose()?;
        let summary = Summary {
            frames: results.len(),
            absent_frames: pred.iter().filter(|b| b.is_none()).count(),
            snapshots,
            surfels,
            success_rate: metrics.as_ref().map(|m| m.success_rate),
            auc: metrics.as_ref().map(|m| m.auc),
            precision_at_20: metrics.as_ref().map(|m| m.precision_at_20),
        };
        Ok(Report {
            sequence: sequence.to_string(),
            config,
            summary,
            frames: results.iter().map(FrameRecord::from_result).collect(),
            success_csv: metrics
                .as_ref()
                .map(|m| csv(&m.success_thresholds, &m.success_curve, "success")),
            precision_csv: metrics
                .as_ref()
                .map(|m| csv(&m.precision_thresholds, &m.precision_curve, "precision")),
            metrics,
        })
    }

    pub fn boxes(&self) -> Vec<Option<BBox>> {
        self.frames.iter().map(|f| f.bbox).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| OtrError::Report(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| OtrError::Report(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| OtrError::io(path, e))?)
    }

    /// Write `report.json` and `boxes.txt` into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OtrError::io(dir, e))?;
        let path = dir.join("report.json");
        fs::write(&path, self.to_json()? + "\n").map_err(|e| OtrError::io(&path, e))?;
        write_gt_file(&dir.join("boxes.txt"), &self.boxes())
    }
}

pub const PRED_COLOR: Rgb<u8> = Rgb([255, 40, 40]);
pub const GT_COLOR: Rgb<u8> = Rgb([40, 255, 40]);
const DASH: usize = 6;

fn draw_rect(img: &mut RgbImage, b: &BBox, color: Rgb<u8>, dashed: bool) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.x.round() as i64;
    let y0 = b.y.round() as i64;
    let x1 = (b.x + b.w).round() as i64 - 1;
    let y1 = (b.y + b.h).round() as i64 - 1;
    let mut put = |x: i64, y: i64, k: usize| {
        if dashed && (k / DASH) % 2 == 1 {
            return;
        }
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for (k, x) in (x0..=x1).enumerate() {
        put(x, y0, k);
        put(x, y1, k);
    }
    for (k, y) in (y0..=y1).enumerate() {
        put(x0, y, k);
        put(x1, y, k);
    }
}

/// The frame with the predicted box drawn solid and the ground truth dashed.
pub fn draw_overlay(rgb: &RgbImage, pred: Option<&BBox>, gt: Option<&BBox>) -> RgbImage {
    let mut img = rgb.clone();
    if let Some(g) = gt {
        draw_rect(&mut img, g, GT_COLOR, true);
    }
    if let Some(p) = pred {
        draw_rect(&mut img, p, PRED_COLOR, false);
    }
    img
}

pub fn write_overlay(path: &Path, rgb: &RgbImage, pred: Option<&BBox>, gt: Option<&BBox>) -> Result<()> {
    draw_overlay(rgb, pred, gt)
        .save(path)
        .map_err(|e| OtrError::Report(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h)
    }

    #[test]
    fn overlap_cases() {
        assert_eq!(overlap(None, None), 1.0);
        let a = b(3.0, 4.0, 10.0, 20.0);
        assert_eq!(overlap(Some(&a), Some(&a)), 1.0);
        assert!((overlap(Some(&b(0.0, 0.0, 10.0, 10.0)), Some(&b(5.0, 0.0, 10.0, 10.0))) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(overlap(Some(&a), None), 0.0);
        assert_eq!(overlap(None, Some(&a)), 0.0);
    }

    #[test]
    fn success_rate_means() {
        assert_eq!(success_rate(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(success_rate(&[1.0, 0.0]).unwrap(), 0.5);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn perfect_tracking_scores_one() {
        let gt: Vec<Option<BBox>> = (0..10).map(|i| Some(b(i as f64, 2.0, 30.0, 40.0))).collect();
        let m = stc_metrics(&gt, &gt).unwrap();
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.success_curve.len(), 21);
        assert!(m.success_curve.iter().all(|&v| v == 1.0));
        assert_eq!(m.precision_at_20, 1.0);
    }

    #[test]
    fn all_absent_scores_one() {
        let none = vec![None; 5];
        let m = stc_metrics(&none, &none).unwrap();
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.precision_at_20, 1.0);
        assert!(m.center_errors.iter().all(|e| *e == Some(0.0)));
    }

    #[test]
    fn one_sided_absence_is_infinite_error() {
        let p = vec![Some(b(0.0, 0.0, 5.0, 5.0)), None];
        let g = vec![None, Some(b(0.0, 0.0, 5.0, 5.0))];
        let m = stc_metrics(&p, &g).unwrap();
        assert_eq!(m.center_errors, vec![None, None]);
        assert_eq!(m.precision_at_20, 0.0);
        assert_eq!(m.success_rate, 0.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(stc_metrics(&[None], &[None, None]).is_err());
    }

    #[test]
    fn precision_counts_radius_inclusive() {
        let g = vec![Some(b(0.0, 0.0, 10.0, 10.0)); 2];
        let p = vec![Some(b(20.0, 0.0, 10.0, 10.0)), Some(b(21.0, 0.0, 10.0, 10.0))];
        let m = stc_metrics(&p, &g).unwrap();
        assert_eq!(m.precision_at_20, 0.5);
        assert_eq!(m.precision_curve[20], 0.5);
        assert_eq!(m.precision_curve[21], 1.0);
    }

    fn result(frame: usize, bbox: Option<BBox>) -> TrackResult {
        TrackResult {
            frame,
            bbox,
            confidence: 0.25 + frame as f64 / 7.0,
            mode: if bbox.is_some() { Mode::Tracking } else { Mode::Redetect { dt: 1 } },
            info: Default::default(),
        }
    }

    #[test]
    fn report_round_trip_and_files() {
        let results = vec![
            result(0, Some(b(1.5, 2.25, 10.0, 11.0))),
            result(1, None),
            result(2, Some(b(0.1, 0.2, 0.3 + 1e-9, 7.0))),
        ];
        let gt = vec![Some(b(1.0, 2.0, 10.0, 11.0)), None, None];
        let mut cfg = BTreeMap::new();
        cfg.insert("eta".to_string(), "0.02".to_string());
        let r = Report::new("seq", cfg, &results, Some(&gt), 2, 100).unwrap();
        assert_eq!(Report::from_json(&r.to_json().unwrap()).unwrap(), r);

        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(Report::read(&dir.path().join("report.json")).unwrap(), r);
        let boxes = fs::read_to_string(dir.path().join("boxes.txt")).unwrap();
        let lines: Vec<&str> = boxes.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "NaN,NaN,NaN,NaN");
        let parsed = crate::ingest::parse_gt_file(&dir.path().join("boxes.txt")).unwrap();
        assert_eq!(parsed, r.boxes());
    }

    #[test]
    fn overlay_draws_both_boxes() {
        let img = RgbImage::new(40, 30);
        let out = draw_overlay(&img, Some(&b(2.0, 2.0, 10.0, 10.0)), Some(&b(20.0, 5.0, 15.0, 20.0)));
        assert_eq!(*out.get_pixel(2, 2), PRED_COLOR);
        assert_eq!(*out.get_pixel(11, 11), PRED_COLOR);
        assert_eq!(*out.get_pixel(20, 5), GT_COLOR);
        // Dashed: the second dash segment along the top edge is left blank.
        assert_eq!(*out.get_pixel(20 + DASH as u32, 5), Rgb([0, 0, 0]));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn overlap_symmetric_and_translation_invariant(p in arb_box(), g in arb_box(), dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
            let o = overlap(Some(&p), Some(&g));
            prop_assert!((o - overlap(Some(&g), Some(&p))).abs() < 1e-12);
            let shift = |a: &BBox| b(a.x + dx, a.y + dy, a.w, a.h);
            prop_assert!((o - overlap(Some(&shift(&p)), Some(&shift(&g)))).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&o));
        }

        #[test]
        fn curve_monotone_and_auc_is_mean(
            frames in prop::collection::vec((prop::option::of(arb_box()), prop::option::of(arb_box())), 1..30)
        ) {
            let (p, g): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
            let m = stc_metrics(&p, &g).unwrap();
            for w in m.success_curve.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            for w in m.precision_curve.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            let mean = m.success_curve.iter().sum::<f64>() / 21.0;
            prop_assert_eq!(m.auc, mean);
            for v in m.success_curve.iter().chain(&m.precision_curve).chain([&m.auc, &m.success_rate, &m.precision_at_20]) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn report_round_trips(vals in prop::collection::vec((prop::option::of(arb_box()), -1e3..1e3f64), 1..20)) {
            let results: Vec<TrackResult> = vals.iter().enumerate().map(|(i, (bb, c))| {
                let mut r = result(i, *bb);
                r.confidence = *c;
                r
            }).collect();
            let gt: Vec<Option<BBox>> = vals.iter().map(|v| v.0).rev().collect();
            let r = Report::new("p", BTreeMap::new(), &results, Some(&gt), 0, 0).unwrap();
            prop_assert_eq!(Report::from_json(&r.to_json().unwrap()).unwrap(), r);
        }
    }
}
