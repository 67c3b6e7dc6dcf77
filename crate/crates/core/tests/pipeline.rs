use otr_core::dcf::{ScaleFilter, ScaleParams};
use otr_core::eval::Report;
use otr_core::ingest::synth::{generate, synth_generate, Scenario, SynthParams};
use otr_core::ingest::{load_sequence, parse_gt_file, Layout};
use otr_core::tracker::track_sequence;
use otr_core::{CameraIntrinsics, TrackerConfig};

fn small(scenario: Scenario) -> SynthParams {
    SynthParams {
        width: 320,
        height: 240,
        intrinsics: Some(CameraIntrinsics::new(262.5, 262.5, 160.0, 120.0).unwrap()),
        ..SynthParams::for_scenario(scenario)
    }
}

#[test]
fn synthetic_sequence_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = SynthParams {
        occlusion_frames: 8,
        ..small(Scenario::Occlusion)
    };
    let s = synth_generate(Scenario::Occlusion, 40, &p, dir.path()).unwrap();
    assert!(s.gt.iter().any(|g| g.is_none()));
    let seq = load_sequence(dir.path(), Layout::Generic).unwrap();
    assert_eq!(seq.len(), s.frames.len());
    assert_eq!(seq.intrinsics, s.intrinsics);
    assert_eq!(seq.init_bbox, s.init_bbox());
    let gt = seq.require_gt().unwrap();
    assert_eq!(gt.len(), s.gt.len());
    for (a, b) in gt.iter().zip(&s.gt) {
        match (a, b) {
            (Some(a), Some(b)) => {
                assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
                assert!((a.w - b.w).abs() < 1e-6 && (a.h - b.h).abs() < 1e-6);
            }
            (None, None) => {}
            other => panic!("presence differs: {other:?}"),
        }
    }
    for (i, f) in seq.iter().enumerate() {
        assert_eq!(f.unwrap(), s.frames[i]);
    }
}

#[test]
fn scale_filter_follows_a_zoom() {
    // Depth halves over the ramp, so the projected size doubles.
    let p = SynthParams {
        distance: 1.6,
        end_distance: 0.8,
        lateral_amplitude: 0.0,
        vertical_amplitude: 0.0,
        ..SynthParams::for_scenario(Scenario::Translation)
    };
    let s = generate(Scenario::Translation, 60, &p).unwrap();
    let target = (s.gt[0].unwrap().w, s.gt[0].unwrap().h);
    let mut sf = ScaleFilter::new(ScaleParams::default(), target).unwrap();
    let c0 = s.gt[0].unwrap().center();
    sf.learn(&s.frames[0].rgb, c0, target, 1.0).unwrap();
    let mut scale = 1.0;
    let last = s.frames.len() - 1;
    let frames = (1..=last).chain(std::iter::repeat_n(last, 30));
    for i in frames {
        let c = s.gt[i].unwrap().center();
        scale *= sf.localize(&s.frames[i].rgb, c, target, scale).unwrap();
        sf.learn(&s.frames[i].rgb, c, target, scale).unwrap();
    }
    let truth = s.gt[last].unwrap().w / s.gt[0].unwrap().w;
    assert!((truth - 2.0).abs() < 0.05, "{truth}");
    assert!((scale / 2.0 - 1.0).abs() <= 0.1, "scale {scale:.3}");
}

#[test]
fn tracking_a_loaded_sequence_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    synth_generate(Scenario::Translation, 30, &small(Scenario::Translation), dir.path()).unwrap();
    let seq = load_sequence(dir.path(), Layout::Generic).unwrap();
    let cfg = TrackerConfig::default();
    let (results, tracker) = track_sequence(&seq, &cfg).unwrap();
    assert_eq!(results.len(), seq.len());
    let st = tracker.state();
    let report = Report::new(
        &seq.name,
        cfg.to_map(),
        &results,
        seq.gt.as_deref(),
        st.snapshots.len(),
        st.preimage.len(),
    )
    .unwrap();
    report.write(out.path()).unwrap();
    let boxes = parse_gt_file(&out.path().join("boxes.txt")).unwrap();
    assert_eq!(boxes.len(), seq.len());
    let back = Report::read(&out.path().join("report.json")).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.config.get("tau_icp").map(String::as_str), Some("0.0005"));
    assert!(report.summary.success_rate.unwrap() > 0.6);
}
