//! Shared inputs for the benchmarks: one synthetic 640x480 frame with the
//! tracker's default template around the target.

use otr_core::dcf::{make_label, GaussianLabel, LearnParams};
use otr_core::features::{ColorNameTable, FeatureExtractor, FeatureStack, Template};
use otr_core::ingest::synth::{generate, Scenario, SynthParams, SynthSequence};
use otr_core::segmentation::{init_model, ColorDepthModel};
use otr_core::{BBox, Grid, TrackerConfig};

pub struct Fixture {
    pub seq: SynthSequence,
    pub cfg: TrackerConfig,
    pub template: Template,
    pub extractor: FeatureExtractor,
    pub features: FeatureStack,
    pub label: GaussianLabel,
    pub mask: Grid,
    pub learn: LearnParams,
    pub seg_model: ColorDepthModel,
    pub window: BBox,
}

impl Fixture {
    pub fn new(scenario: Scenario, frames: usize) -> Self {
        let seq = generate(scenario, frames, &SynthParams::for_scenario(scenario)).expect("synthetic sequence");
        let cfg = TrackerConfig::default();
        let init = seq.init_bbox();
        let template =
            Template::new((init.w, init.h), cfg.padding, cfg.template_size, cfg.cell_size).expect("template");
        let extractor = FeatureExtractor::new(ColorNameTable::builtin(), cfg.cell_size);
        let features = template
            .sample(&seq.frames[0].rgb, &extractor, init.center(), 1.0, true)
            .expect("features");
        let label = make_label(template.cells(), cfg.sigma_factor).expect("label");
        let (w, h) = template.cells();
        let (tw, th) = template.target_cells();
        let (x0, y0) = ((w as f64 - tw) / 2.0, (h as f64 - th) / 2.0);
        let mask = Grid::from_fn(w, h, |i, j| {
            let inside = (i as f64) >= x0 && (i as f64) < x0 + tw && (j as f64) >= y0 && (j as f64) < y0 + th;
            if inside {
                1.0
            } else {
                0.0
            }
        });
        let seg_model = init_model(&seq.frames[0], &init, &cfg.seg_params()).expect("segmentation model");
        let (cx, cy) = init.center();
        let window = BBox::from_center(cx, cy, template.window.0, template.window.1);
        Fixture {
            learn: cfg.learn_params(),
            seq,
            cfg,
            template,
            extractor,
            features,
            label,
            mask,
            seg_model,
            window,
        }
    }
}
