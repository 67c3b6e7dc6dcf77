//! View-specific snapshots, the presence test and re-detection.

use std::collections::VecDeque;

use crate::dcf::{localize, padded_response, valid_peak, Filter, Localization};
use crate::error::{OtrError, Result};
use crate::features::{FeatureExtractor, FeatureStack, Template};
use crate::ingest::{median_depth, BBox, Frame};
use crate::segmentation::{mask_area_test, SegMask};

/// A stored filter for one observed view.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub filter: Filter,
    pub frame: usize,
    pub aspect: f64,
}

/// Bounded list of snapshots. The first entry is the initial view and is
/// never evicted; when full, the oldest later entry makes room.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    entries: Vec<Snapshot>,
    cap: usize,
}

impl SnapshotSet {
    pub fn new(cap: usize) -> Self {
        SnapshotSet {
            entries: Vec::new(),
            cap,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn entries(&self) -> &[Snapshot] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> Option<&Snapshot> {
        self.entries.get(i)
    }

    /// Append, evicting the oldest non-initial entry when at the cap.
    /// Returns false when nothing could be stored (cap 0, or cap 1 with the
    /// initial entry present).
    pub fn push(&mut self, s: Snapshot) -> bool {
        if self.cap == 0 {
            return false;
        }
        if self.entries.len() >= self.cap {
            if self.entries.len() < 2 {
                return false;
            }
            self.entries.remove(1);
        }
        self.entries.push(s);
        true
    }
}

/// Recent peak responses on frames where the target was present.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceStats {
    buf: VecDeque<f64>,
    cap: usize,
}

impl PresenceStats {
    pub fn new(cap: usize) -> Self {
        PresenceStats {
            buf: VecDeque::with_capacity(cap),
            cap: cap.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.buf.is_empty()).then(|| self.buf.iter().sum::<f64>() / self.buf.len() as f64)
    }

    pub fn record(&mut self, r: f64) {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(r);
    }
}

/// Which filter produced a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Current,
    Snapshot(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub localization: Localization,
    pub source: Source,
}

/// Localize with the current filter and every snapshot; the highest peak
/// wins, ties going to the current filter and then to earlier snapshots.
pub fn evaluate_all(current: &Filter, snaps: &SnapshotSet, features: &FeatureStack) -> Result<Hypothesis> {
    let mut best = Hypothesis {
        localization: localize(current, features)?,
        source: Source::Current,
    };
    for (i, s) in snaps.entries().iter().enumerate() {
        let loc = localize(&s.filter, features)?;
        if loc.value > best.localization.value {
            best = Hypothesis {
                localization: loc,
                source: Source::Snapshot(i),
            };
        }
    }
    Ok(best)
}

/// Store the current filter as a new view when the aspect has drifted more
/// than `tau_rho` from the reference and both gates hold. Returns the
/// (possibly) updated set and reference aspect.
pub fn maybe_snapshot(
    snaps: &SnapshotSet,
    current: &Filter,
    rho0: f64,
    rho_t: f64,
    gates: (bool, bool),
    tau_rho: f64,
    frame: usize,
) -> (SnapshotSet, f64) {
    let (presence_ok, preimage_ok) = gates;
    if !(presence_ok && preimage_ok) || !((rho0 - rho_t).abs() > tau_rho) {
        return (snaps.clone(), rho0);
    }
    let mut next = snaps.clone();
    next.push(Snapshot {
        filter: current.clone(),
        frame,
        aspect: rho_t,
    });
    (next, rho_t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresenceDecision {
    /// `R_mean / R_t`, when a history exists.
    pub uncertainty: Option<f64>,
    pub response_ok: bool,
    pub area_ok: bool,
}

impl PresenceDecision {
    pub fn passed(&self) -> bool {
        self.response_ok && self.area_ok
    }
}

/// Response-ratio test `R_mean / R_t <= tau_q` combined with the mask-area
/// test. With no history the response test passes. Does not touch `stats`;
/// callers record `R_t` only on a pass.
pub fn presence_test(
    r_t: f64,
    stats: &PresenceStats,
    mask: &SegMask,
    bbox: &BBox,
    image_dims: (usize, usize),
    tau_q: f64,
    tau_a: f64,
) -> PresenceDecision {
    let (uncertainty, response_ok) = match stats.mean() {
        None => (None, r_t.is_finite()),
        Some(_) if !(r_t > 0.0) => (None, false),
        Some(m) => {
            let q = m / r_t;
            (Some(q), q <= tau_q)
        }
    };
    PresenceDecision {
        uncertainty,
        response_ok,
        area_ok: mask_area_test(mask, bbox, image_dims, tau_a),
    }
}

/// Search region for re-detection after `dt` frames: the base region grown
/// by `alpha^dt` per side, no larger than the image unless the base already
/// is.
pub fn redetect_region(center: (f64, f64), base: (f64, f64), dt: usize, alpha: f64, image_dims: (usize, usize)) -> BBox {
    let g = alpha.powi(dt as i32);
    let clamp = |b: f64, lim: usize| (b * g).min((lim as f64).max(b));
    BBox::from_center(center.0, center.1, clamp(base.0, image_dims.0), clamp(base.1, image_dims.1))
}

/// Central fraction of the target box whose median depth sets the
/// re-detection scale.
const DEPTH_PROBE: f64 = 0.5;
/// A depth-derived scale further than this factor from the last confident
/// scale is taken to be background and ignored.
const MAX_SCALE_JUMP: f64 = 1.5;

/// Target scale relative to the first frame from the depth ratio `D0 / Dt`.
pub fn depth_scale(initial_mm: f64, current_mm: f64) -> Option<f64> {
    (initial_mm > 0.0 && current_mm > 0.0).then(|| initial_mm / current_mm)
}

/// A confirmed-or-rejected re-detection hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub center: (f64, f64),
    pub scale: f64,
    pub bbox: BBox,
    pub response: f64,
    pub source: Source,
    /// Features of the stage-two window, for the caller's follow-up learning.
    pub localization: Localization,
}

impl Candidate {
    pub fn filter<'a>(&self, current: &'a Filter, snaps: &'a SnapshotSet) -> &'a Filter {
        match self.source {
            Source::Current => current,
            Source::Snapshot(i) => &snaps.entries()[i].filter,
        }
    }
}

pub struct RedetectInput<'a> {
    pub frame: &'a Frame,
    pub extractor: &'a FeatureExtractor,
    pub template: &'a Template,
    pub last_center: (f64, f64),
    /// Scale at the last confident frame.
    pub last_scale: f64,
    pub dt: usize,
    pub alpha: f64,
    /// Median target depth in the first frame, mm.
    pub initial_depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedetectOutcome {
    pub region: BBox,
    /// Best stage-two hypothesis, before the presence decision.
    pub hypothesis: Option<Candidate>,
    pub confirmed: bool,
}

/// Two-stage re-detection.
///
/// Stage one correlates every filter, zero-padded, over a region grown with
/// the time since the last confident frame and keeps the best admissible
/// offset. Stage two sets the scale from the depth ratio to the first
/// frame, re-localizes the winning filter in a standard window there, and
/// asks `presence` for confirmation.
pub fn redetect(
    snaps: &SnapshotSet,
    current: &Filter,
    input: &RedetectInput<'_>,
    presence: impl FnOnce(&Candidate) -> bool,
) -> Result<RedetectOutcome> {
    let t = input.template;
    let img = &input.frame.rgb;
    let dims = (input.frame.width(), input.frame.height());
    let base = (t.window.0 * input.last_scale, t.window.1 * input.last_scale);
    let region = redetect_region(input.last_center, base, input.dt, input.alpha, dims);
    let feats = t.sample_region(img, input.extractor, region.center(), (region.w, region.h), input.last_scale)?;

    let (fw, fh) = current.dims();
    let mut best: Option<(f64, (usize, usize), Source)> = None;
    let filters = std::iter::once((Source::Current, current))
        .chain(snaps.entries().iter().enumerate().map(|(i, s)| (Source::Snapshot(i), &s.filter)));
    for (src, f) in filters {
        let r = padded_response(f, &feats)?;
        let (x, y, v) = valid_peak(&r, (fw, fh));
        if best.is_none_or(|b| v > b.0) {
            best = Some((v, (x, y), src));
        }
    }
    let Some((_, (ox, oy), source)) = best else {
        return Err(OtrError::InvalidArgument("no filters to re-detect with".into()));
    };
    let stage1 = feats
        .origin
        .cell_center(ox as f64 + (fw - 1) as f64 / 2.0, oy as f64 + (fh - 1) as f64 / 2.0);
    let clamp_center = |c: (f64, f64)| {
        (
            c.0.clamp(0.0, dims.0 as f64 - 1.0),
            c.1.clamp(0.0, dims.1 as f64 - 1.0),
        )
    };
    let stage1 = clamp_center(stage1);

    let probe = BBox::from_center(
        stage1.0,
        stage1.1,
        t.target.0 * input.last_scale * DEPTH_PROBE,
        t.target.1 * input.last_scale * DEPTH_PROBE,
    );
    let scale = match (input.initial_depth, median_depth(input.frame, &probe)) {
        (Some(d0), Ok(dt)) => depth_scale(d0, dt)
            .filter(|s| (s / input.last_scale).max(input.last_scale / s) <= MAX_SCALE_JUMP)
            .unwrap_or(input.last_scale),
        _ => input.last_scale,
    };

    let filter = match source {
        Source::Current => current,
        Source::Snapshot(i) => &snaps.entries()[i].filter,
    };
    let window = t.sample(img, input.extractor, stage1, scale, true)?;
    let loc = localize(filter, &window)?;
    let center = clamp_center(loc.position);
    let cand = Candidate {
        center,
        scale,
        bbox: BBox::from_center(center.0, center.1, t.target.0 * scale, t.target.1 * scale),
        response: loc.value,
        source,
        localization: loc,
    };
    let confirmed = presence(&cand);
    Ok(RedetectOutcome {
        region,
        hypothesis: Some(cand),
        confirmed,
    })
}
