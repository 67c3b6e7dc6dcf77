//! The per-frame tracking loop.
//!
//! Each step localizes the target with the current filter (and, every
//! `n_r` frames, with all stored views), estimates scale and runs the
//! presence test. Only frames that pass update the models. A failure
//! switches to re-detection, which searches a growing region until a
//! candidate passes the same test.

mod config;

use std::sync::Arc;

use serde::Serialize;

use crate::dcf::{learn_constrained, localize, make_label, mask_area, update, Filter, GaussianLabel, ScaleFilter};
use crate::error::{OtrError, Result};
use crate::features::{ColorNameTable, FeatureExtractor, FeatureStack, Template, WindowGeometry};
use crate::grid::Grid;
use crate::ingest::{median_depth, BBox, CameraIntrinsics, Frame, Sequence};
use crate::multiview::{
    evaluate_all, maybe_snapshot, presence_test, redetect, Hypothesis, PresenceDecision, PresenceStats, RedetectInput,
    SnapshotSet, Source,
};
use crate::preimage::{aspect, backproject, make_filter_mask, project_occupancy, update_preimage, PreImage};
use crate::segmentation::{init_model, segment, update_model, ColorDepthModel, SegMask};

pub use config::TrackerConfig;

/// Accumulated scale is kept within this range of the first frame.
const MIN_SCALE: f64 = 0.1;
const MAX_SCALE: f64 = 10.0;
/// The learning mask is limited to the target box grown by this factor.
const MASK_BOX_GROWTH: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Mode {
    Tracking,
    /// Re-detecting, `dt` frames after the last confident one.
    Redetect { dt: usize },
}

/// Where the learning mask of a frame came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    PreImage,
    Segmentation,
    BBox,
}

/// Per-frame diagnostics. None of these feed back into tracking.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct StepInfo {
    /// `current` or `snapshot:<i>` for the filter that produced the position.
    pub source: Option<String>,
    pub uncertainty: Option<f64>,
    pub area_ok: Option<bool>,
    pub preimage_accepted: Option<bool>,
    pub icp_error: Option<f64>,
    pub aspect: Option<f64>,
    pub snapshot_created: bool,
    pub mask_origin: Option<MaskOrigin>,
    pub redetect_region: Option<BBox>,
    /// Internal failure that was absorbed instead of ending the sequence.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackResult {
    pub frame: usize,
    pub bbox: Option<BBox>,
    /// Peak response of the filter that produced the position.
    pub confidence: f64,
    pub mode: Mode,
    pub info: StepInfo,
}

/// Everything carried from one frame to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    /// Last confident target center and scale.
    pub center: (f64, f64),
    pub scale: f64,
    pub filter: Filter,
    pub snapshots: SnapshotSet,
    pub preimage: PreImage,
    pub seg_model: ColorDepthModel,
    pub stats: PresenceStats,
    pub scale_filter: ScaleFilter,
    pub mode: Mode,
    /// Median target depth in the first frame, mm.
    pub initial_depth: Option<f64>,
    /// Reference aspect for snapshot creation.
    pub rho0: f64,
    pub frames_seen: usize,
}

pub struct Tracker {
    cfg: TrackerConfig,
    extractor: FeatureExtractor,
    intr: CameraIntrinsics,
    template: Template,
    label: GaussianLabel,
    dims: (usize, usize),
    state: TrackerState,
}

fn source_name(s: Source) -> String {
    match s {
        Source::Current => "current".into(),
        Source::Snapshot(i) => format!("snapshot:{i}"),
    }
}

fn in_box(b: &BBox, x: f64, y: f64) -> bool {
    x >= b.x && x <= b.x + b.w && y >= b.y && y <= b.y + b.h
}

/// Cell mask from an image-space predicate, limited to the grown target box.
fn cell_mask(geo: &WindowGeometry, target: &BBox, dims: (usize, usize), fg: impl Fn(usize, usize) -> bool) -> Grid {
    let limit = target.scaled(MASK_BOX_GROWTH, MASK_BOX_GROWTH);
    Grid::from_fn(geo.cells.0, geo.cells.1, |i, j| {
        let (x, y) = geo.cell_center(i as f64, j as f64);
        let (px, py) = (x.round(), y.round());
        let ok = in_box(&limit, x, y)
            && px >= 0.0
            && py >= 0.0
            && px < dims.0 as f64
            && py < dims.1 as f64
            && fg(px as usize, py as usize);
        if ok {
            1.0
        } else {
            0.0
        }
    })
}

fn bbox_cell_mask(geo: &WindowGeometry, target: &BBox) -> Grid {
    Grid::from_fn(geo.cells.0, geo.cells.1, |i, j| {
        let (x, y) = geo.cell_center(i as f64, j as f64);
        if in_box(target, x, y) {
            1.0
        } else {
            0.0
        }
    })
}

/// Segmentation restricted to the target box.
fn restrict_to_box(seg: &SegMask, bbox: &BBox) -> SegMask {
    let mut m = seg.clone();
    let r = seg.region;
    for y in 0..r.height() {
        for x in 0..r.width() {
            if !in_box(bbox, (x + r.x0) as f64, (y + r.y0) as f64) {
                m.mask.set(x, y, 0.0);
            }
        }
    }
    m
}

impl Tracker {
    /// Initialize on the first frame. Loads the color-name table named in
    /// the config, or the built-in one.
    pub fn new(frame: &Frame, bbox: BBox, intr: CameraIntrinsics, cfg: TrackerConfig) -> Result<Self> {
        let table = match &cfg.colornames_table {
            Some(p) => Arc::new(ColorNameTable::load(p)?),
            None => ColorNameTable::builtin(),
        };
        Self::with_table(frame, bbox, intr, cfg, table)
    }

    pub fn with_table(
        frame: &Frame,
        bbox: BBox,
        intr: CameraIntrinsics,
        cfg: TrackerConfig,
        table: Arc<ColorNameTable>,
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = (frame.width(), frame.height());
        if !bbox.is_valid() || !bbox.within(dims.0, dims.1) {
            return Err(OtrError::InvalidArgument(format!(
                "initial box {bbox:?} does not lie inside the {}x{} image",
                dims.0, dims.1
            )));
        }
        let intr = cfg.intrinsics(intr)?;
        let template = Template::new((bbox.w, bbox.h), cfg.padding, cfg.template_size, cfg.cell_size)?;
        let label = make_label(template.cells(), cfg.sigma_factor)?;
        let center = bbox.center();

        let seg_model = init_model(frame, &bbox, &cfg.seg_params())?;
        let window = BBox::from_center(center.0, center.1, template.window.0, template.window.1);
        let seg = segment(frame, &window, &seg_model)?;

        let initial_depth = median_depth(frame, &bbox).ok();
        let mut preimage = PreImage::empty();
        let mut accepted = false;
        if cfg.enable_preimage {
            if let Some(d) = initial_depth {
                let cloud = backproject(frame, &intr, &restrict_to_box(&seg, &bbox), &cfg.preimage_params());
                if let Ok(cloud) = cloud {
                    let coarse = intr.backproject(center.0, center.1, d / 1000.0);
                    let (pre, out) = update_preimage(&preimage, &cloud, &coarse, &intr, &cfg.preimage_params());
                    accepted = out.accepted;
                    preimage = pre;
                }
            }
        }
        let rho0 = bbox.aspect();
        preimage.reference_aspect = Some(rho0);

        let mut scale_filter = ScaleFilter::new(cfg.scale_params(), template.target)?;
        scale_filter.learn(&frame.rgb, center, template.target, 1.0)?;

        let extractor = FeatureExtractor::new(table, cfg.cell_size);
        let features = template.sample(&frame.rgb, &extractor, center, 1.0, true)?;
        let mut tracker = Tracker {
            extractor,
            intr,
            template,
            label,
            dims,
            state: TrackerState {
                center,
                scale: 1.0,
                filter: Filter::from_parts(vec![Grid::zeros(3, 3)], vec![1.0], Grid::zeros(3, 3), 1.0)?,
                snapshots: SnapshotSet::new(cfg.s_max),
                preimage,
                seg_model,
                stats: PresenceStats::new(cfg.n_q),
                scale_filter,
                mode: Mode::Tracking,
                initial_depth,
                rho0,
                frames_seen: 1,
            },
            cfg,
        };
        let occupancy = accepted.then_some(&tracker.state.preimage);
        let (filter, _) = tracker.learn(&features, &bbox, &seg, occupancy)?;
        tracker.state.filter = filter;
        Ok(tracker)
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intr
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    /// Last confident target box.
    pub fn bbox(&self) -> BBox {
        self.box_at(self.state.center, self.state.scale)
    }

    fn box_at(&self, c: (f64, f64), scale: f64) -> BBox {
        BBox::from_center(c.0, c.1, self.template.target.0 * scale, self.template.target.1 * scale)
    }

    fn window_at(&self, c: (f64, f64), scale: f64) -> BBox {
        BBox::from_center(c.0, c.1, self.template.window.0 * scale, self.template.window.1 * scale)
    }

    fn clamp_center(&self, c: (f64, f64)) -> (f64, f64) {
        (c.0.clamp(0.0, self.dims.0 as f64 - 1.0), c.1.clamp(0.0, self.dims.1 as f64 - 1.0))
    }

    /// Learn a fresh filter. The mask is the first of pre-image occupancy,
    /// segmentation and target box that covers enough cells.
    fn learn(
        &self,
        features: &FeatureStack,
        target: &BBox,
        seg: &SegMask,
        occupancy: Option<&PreImage>,
    ) -> Result<(Filter, MaskOrigin)> {
        let geo = &features.origin;
        let (tw, th) = self.template.target_cells();
        let min_area = ((self.cfg.min_mask_fraction * tw * th).ceil() as usize).max(1);
        let mut params = self.cfg.learn_params();
        params.min_mask_area = min_area;

        let mut masks: Vec<(MaskOrigin, Grid)> = Vec::with_capacity(3);
        if let Some(pre) = occupancy {
            let window = BBox::from_center(geo.center.0, geo.center.1, geo.size.0, geo.size.1);
            if let Ok(occ) = project_occupancy(pre, &self.intr, &window, self.dims) {
                let m = make_filter_mask(&occ);
                masks.push((MaskOrigin::PreImage, cell_mask(geo, target, self.dims, |x, y| m.at(x, y))));
            }
        }
        masks.push((MaskOrigin::Segmentation, cell_mask(geo, target, self.dims, |x, y| seg.at(x, y))));
        for (origin, mask) in masks {
            if mask_area(&mask) < min_area {
                continue;
            }
            match learn_constrained(features, &self.label, &mask, &params) {
                Ok(f) => return Ok((f, origin)),
                Err(OtrError::MaskTooSmall { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        // The box is the fallback of last resort, whatever its size.
        params.min_mask_area = 1;
        let f = learn_constrained(features, &self.label, &bbox_cell_mask(geo, target), &params)?;
        Ok((f, MaskOrigin::BBox))
    }

    /// Process the next frame.
    pub fn step(&mut self, frame: &Frame) -> Result<TrackResult> {
        if (frame.width(), frame.height()) != self.dims {
            return Err(OtrError::DimensionMismatch(format!(
                "frame {} is {}x{}, tracker was initialized on {}x{}",
                frame.index,
                frame.width(),
                frame.height(),
                self.dims.0,
                self.dims.1
            )));
        }
        let t = self.state.frames_seen;
        self.state.frames_seen += 1;
        let mode = self.state.mode;
        let out = match mode {
            Mode::Tracking => self.track(frame, t),
            Mode::Redetect { dt } => self.redetect(frame, dt),
        };
        // A frame the models cannot process counts as a failed presence test.
        out.or_else(|e| {
            let dt = match mode {
                Mode::Tracking => 1,
                Mode::Redetect { dt } => dt + 1,
            };
            self.state.mode = Mode::Redetect { dt };
            Ok(TrackResult {
                frame: frame.index,
                bbox: None,
                confidence: 0.0,
                mode: self.state.mode,
                info: StepInfo {
                    error: Some(e.to_string()),
                    ..StepInfo::default()
                },
            })
        })
    }

    fn track(&mut self, frame: &Frame, t: usize) -> Result<TrackResult> {
        let st = &self.state;
        let features = self.template.sample(&frame.rgb, &self.extractor, st.center, st.scale, true)?;
        let use_views = self.cfg.enable_view_specific && !st.snapshots.is_empty() && t.is_multiple_of(self.cfg.n_r);
        let hyp = if use_views {
            evaluate_all(&st.filter, &st.snapshots, &features)?
        } else {
            Hypothesis {
                localization: localize(&st.filter, &features)?,
                source: Source::Current,
            }
        };
        let center = self.clamp_center(hyp.localization.position);
        let r_t = hyp.localization.value;
        let mult = st
            .scale_filter
            .localize(&frame.rgb, center, self.template.target, st.scale)?;
        let scale = (st.scale * mult).clamp(MIN_SCALE, MAX_SCALE);
        let bbox = self.box_at(center, scale);
        let window = self.window_at(center, scale);
        let seg = segment(frame, &window, &st.seg_model)?;
        let decision = presence_test(r_t, &st.stats, &seg, &bbox, self.dims, self.cfg.tau_q, self.cfg.tau_a);

        let mut info = StepInfo {
            source: Some(source_name(hyp.source)),
            uncertainty: decision.uncertainty,
            area_ok: Some(decision.area_ok),
            ..StepInfo::default()
        };
        if !decision.passed() {
            self.state.mode = Mode::Redetect { dt: 1 };
            return Ok(TrackResult {
                frame: frame.index,
                bbox: None,
                confidence: r_t,
                mode: self.state.mode,
                info,
            });
        }
        let base = match hyp.source {
            Source::Current => st.filter.clone(),
            Source::Snapshot(i) => st.snapshots.entries()[i].filter.clone(),
        };
        if let Err(e) = self.commit(frame, center, scale, base, r_t, &seg, decision, &mut info) {
            // Keep the position; the models stay as they were.
            self.state.center = center;
            self.state.scale = scale;
            info.error = Some(e.to_string());
        }
        Ok(TrackResult {
            frame: frame.index,
            bbox: Some(bbox),
            confidence: r_t,
            mode: self.state.mode,
            info,
        })
    }

    /// Update every model after a confident frame. The new state is built
    /// first and swapped in only when all steps succeed.
    #[allow(clippy::too_many_arguments)]
    fn commit(
        &mut self,
        frame: &Frame,
        center: (f64, f64),
        scale: f64,
        base: Filter,
        r_t: f64,
        seg: &SegMask,
        decision: PresenceDecision,
        info: &mut StepInfo,
    ) -> Result<()> {
        let st = &self.state;
        let bbox = self.box_at(center, scale);

        let mut preimage = st.preimage.clone();
        let mut accepted = false;
        if self.cfg.enable_preimage {
            if let Ok(d) = median_depth(frame, &bbox) {
                let params = self.cfg.preimage_params();
                if let Ok(cloud) = backproject(frame, &self.intr, &restrict_to_box(seg, &bbox), &params) {
                    let coarse = self.intr.backproject(center.0, center.1, d / 1000.0);
                    let (pre, out) = update_preimage(&preimage, &cloud, &coarse, &self.intr, &params);
                    accepted = out.accepted;
                    info.icp_error = out.error;
                    preimage = pre;
                }
            }
            info.preimage_accepted = Some(accepted);
        }

        let features = self.template.sample(&frame.rgb, &self.extractor, center, scale, true)?;
        let (fresh, origin) = self.learn(&features, &bbox, seg, accepted.then_some(&preimage))?;
        info.mask_origin = Some(origin);
        let filter = update(&base, &fresh, self.cfg.eta)?;
        let seg_model = update_model(&st.seg_model, frame, seg, self.cfg.seg_update_rate)?;
        let mut scale_filter = st.scale_filter.clone();
        scale_filter.learn(&frame.rgb, center, self.template.target, scale)?;

        let mut stats = st.stats.clone();
        stats.record(r_t);

        let rho_t = if accepted { aspect(&preimage, &self.intr, self.dims).ok() } else { None };
        info.aspect = rho_t;
        let mut snapshots = st.snapshots.clone();
        let mut rho0 = st.rho0;
        if let (Some(rho_t), true) = (rho_t, self.cfg.enable_view_specific) {
            let gates = (decision.passed(), accepted);
            let (next, r) = maybe_snapshot(&snapshots, &filter, rho0, rho_t, gates, self.cfg.tau_rho, frame.index);
            info.snapshot_created = r != rho0;
            snapshots = next;
            rho0 = r;
            preimage.reference_aspect = Some(rho0);
        }

        let st = &mut self.state;
        st.center = center;
        st.scale = scale;
        st.filter = filter;
        st.snapshots = snapshots;
        st.preimage = preimage;
        st.seg_model = seg_model;
        st.stats = stats;
        st.scale_filter = scale_filter;
        st.rho0 = rho0;
        st.mode = Mode::Tracking;
        Ok(())
    }

    fn redetect(&mut self, frame: &Frame, dt: usize) -> Result<TrackResult> {
        let st = &self.state;
        let input = RedetectInput {
            frame,
            extractor: &self.extractor,
            template: &self.template,
            last_center: st.center,
            last_scale: st.scale,
            dt,
            alpha: self.cfg.alpha_s,
            initial_depth: st.initial_depth,
        };
        let mut decision: Option<(PresenceDecision, SegMask)> = None;
        let outcome = redetect(&st.snapshots, &st.filter, &input, |cand| {
            let window = self.window_at(cand.center, cand.scale);
            let Ok(seg) = segment(frame, &window, &st.seg_model) else {
                return false;
            };
            let d = presence_test(cand.response, &st.stats, &seg, &cand.bbox, self.dims, self.cfg.tau_q, self.cfg.tau_a);
            let ok = d.passed();
            decision = Some((d, seg));
            ok
        })?;

        let mut info = StepInfo {
            redetect_region: Some(outcome.region),
            ..StepInfo::default()
        };
        let confidence = outcome.hypothesis.as_ref().map_or(0.0, |c| c.response);
        if let Some(c) = &outcome.hypothesis {
            info.source = Some(source_name(c.source));
        }
        if let Some((d, _)) = &decision {
            info.uncertainty = d.uncertainty;
            info.area_ok = Some(d.area_ok);
        }
        match (outcome.confirmed, outcome.hypothesis) {
            (true, Some(c)) => {
                let filter = c.filter(&st.filter, &st.snapshots).clone();
                let st = &mut self.state;
                st.filter = filter;
                st.center = c.center;
                st.scale = c.scale.clamp(MIN_SCALE, MAX_SCALE);
                st.stats.record(c.response);
                st.mode = Mode::Tracking;
                Ok(TrackResult {
                    frame: frame.index,
                    bbox: Some(self.bbox()),
                    confidence,
                    mode: Mode::Tracking,
                    info,
                })
            }
            _ => {
                self.state.mode = Mode::Redetect { dt: dt + 1 };
                Ok(TrackResult {
                    frame: frame.index,
                    bbox: None,
                    confidence,
                    mode: self.state.mode,
                    info,
                })
            }
        }
    }
}

/// Track a whole sequence from its initial box. Frame 0 reports the
/// initial box with confidence 1.
pub fn track_sequence(seq: &Sequence, cfg: &TrackerConfig) -> Result<(Vec<TrackResult>, Tracker)> {
    track_frames(seq.iter(), seq.init_bbox, seq.intrinsics, cfg)
}

/// [`track_sequence`] over any frame iterator.
pub fn track_frames(
    mut frames: impl Iterator<Item = Result<Frame>>,
    init: BBox,
    intr: CameraIntrinsics,
    cfg: &TrackerConfig,
) -> Result<(Vec<TrackResult>, Tracker)> {
    let first = frames
        .next()
        .ok_or_else(|| OtrError::InvalidArgument("sequence has no frames".into()))??;
    let mut tracker = Tracker::new(&first, init, intr, cfg.clone())?;
    let mut out = vec![TrackResult {
        frame: first.index,
        bbox: Some(init),
        confidence: 1.0,
        mode: Mode::Tracking,
        info: StepInfo::default(),
    }];
    for f in frames {
        out.push(tracker.step(&f?)?);
    }
    Ok((out, tracker))
}
