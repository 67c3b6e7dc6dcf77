use super::*;
use crate::ingest::DepthImage;
use crate::selftest::{box_model, corner_pose, icp_trial, render_box_depth};
use image::{Luma, Rgb, RgbImage};
use proptest::prelude::*;

fn intr(w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::default_for(w, h)
}

fn full_mask(w: usize, h: usize) -> SegMask {
    let rect = PixelRect { x0: 0, y0: 0, x1: w, y1: h };
    SegMask::new(rect, Grid::filled(w, h, 1.0), Grid::filled(w, h, 1.0)).unwrap()
}

fn cloud_of(depth: &Grid, k: &CameraIntrinsics) -> PointCloud {
    let (w, h) = depth.dims();
    backproject_depth(w, h, |x, y| depth.get(x, y), |_, _| [100.0; 3], |_, _| true, k, &PreImageParams::default()).unwrap()
}

/// Surfels tiling a rectangle on a plane: `spacing` apart, radius half the spacing.
fn face(center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, n: Vector3<f64>, eu: f64, ev: f64, spacing: f64) -> Vec<Surfel> {
    let (nu, nv) = ((eu / spacing).round() as usize, (ev / spacing).round() as usize);
    let mut out = Vec::new();
    for j in 0..nv {
        for i in 0..nu {
            let a = -eu / 2.0 + spacing * (i as f64 + 0.5);
            let b = -ev / 2.0 + spacing * (j as f64 + 0.5);
            out.push(Surfel {
                position: center + u * a + v * b,
                normal: n,
                color: [200.0, 50.0, 50.0],
                radius: spacing / 2.0,
                confidence: 1.0,
                last_seen: 0,
            });
        }
    }
    out
}

fn cube(edge: f64, spacing: f64) -> Vec<Surfel> {
    let e = edge / 2.0;
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    let mut s = Vec::new();
    for (c, u, v, n) in [
        (-z * e, x, y, -z),
        (z * e, x, y, z),
        (-x * e, y, z, -x),
        (x * e, y, z, x),
        (-y * e, x, z, -y),
        (y * e, x, z, y),
    ] {
        s.extend(face(c, u, v, n, edge, edge, spacing));
    }
    s
}

#[test]
fn axis_pixel_backprojects_to_axis() {
    let (w, h) = (64, 48);
    let rgb = RgbImage::from_pixel(w as u32, h as u32, Rgb([90, 90, 90]));
    let depth = DepthImage::from_pixel(w as u32, h as u32, Luma([1000]));
    let frame = Frame::new(rgb, depth, 0).unwrap();
    let k = intr(w, h);
    let cloud = backproject(&frame, &k, &full_mask(w, h), &PreImageParams::default()).unwrap();
    let i = cloud.at_pixel(k.cx, k.cy).unwrap();
    assert!((cloud.points[i] - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    for n in &cloud.normals {
        assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
    }
}

#[test]
fn tilted_plane_normals() {
    let (w, h) = (80, 60);
    let k = intr(w, h);
    let t = 30f64.to_radians();
    let n = Vector3::new(t.sin(), 0.0, -t.cos());
    let offset = n.dot(&Vector3::new(0.0, 0.0, 1.0));
    let depth = Grid::from_fn(w, h, |x, y| {
        let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
        offset / n.dot(&d)
    });
    let cloud = cloud_of(&depth, &k);
    for m in &cloud.normals {
        assert!(m.dot(&n).clamp(-1.0, 1.0).acos().to_degrees() < 3.0);
    }
}

#[test]
fn discontinuities_and_sparse_masks() {
    let (w, h) = (40, 30);
    let k = intr(w, h);
    let depth = Grid::from_fn(w, h, |x, _| if x < 20 { 1.0 } else { 1.5 });
    let cloud = cloud_of(&depth, &k);
    assert!(cloud.pixels.iter().all(|&(x, _)| x != 19 && x != 20));
    let few = backproject_depth(w, h, |x, y| depth.get(x, y), |_, _| [0.0; 3], |x, y| x < 5 && y < 5, &k, &PreImageParams::default());
    assert!(matches!(few, Err(OtrError::InsufficientGeometry(_))));
}

#[test]
fn icp_fixed_point() {
    let dims = (160, 120);
    let k = intr(dims.0, dims.1);
    let half = Vector3::new(0.1, 0.1, 0.1);
    let pose = corner_pose();
    let model = box_model(&pose, &half, &k, dims).unwrap();
    let cloud = cloud_of(&render_box_depth(&pose, &half, &k, dims), &k);
    let r = icp_align(&model, &cloud, &pose, &k, &IcpParams::default()).unwrap();
    assert!(r.error <= 1e-10, "{}", r.error);
    assert!(r.last_step <= 1e-6);
    assert!((r.pose.translation - pose.translation).norm() <= 1e-6);
}

#[test]
fn icp_recovers_small_motion() {
    for seed in 0..3 {
        let t = icp_trial(seed).unwrap();
        assert!(t.rotation_error_deg <= 0.5, "{t:?}");
        assert!(t.translation_error_m <= 0.002, "{t:?}");
    }
}

#[test]
fn icp_error_non_increasing() {
    let dims = (160, 120);
    let k = intr(dims.0, dims.1);
    let half = Vector3::new(0.1, 0.1, 0.1);
    let start = corner_pose();
    let model = box_model(&start, &half, &k, dims).unwrap();
    let moved = Pose::new(exp_so3(&Vector3::new(0.0, 0.04, 0.02)) * start.rotation, start.translation + Vector3::new(0.01, -0.005, 0.0));
    let cloud = cloud_of(&render_box_depth(&moved, &half, &k, dims), &k);
    let r = icp_align(&model, &cloud, &start, &k, &IcpParams::default()).unwrap();
    assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    assert!(r.history.len() > 1);
}

#[test]
fn icp_follows_a_turning_board() {
    let dims = (320, 240);
    let k = intr(dims.0, dims.1);
    let half = Vector3::new(0.15, 0.05, 0.005);
    let start = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0));
    let model = box_model(&start, &half, &k, dims).unwrap();
    let yaw = 2f64.to_radians();
    let turned = Pose::new(exp_so3(&Vector3::new(0.0, yaw, 0.0)), start.translation);
    let cloud = cloud_of(&render_box_depth(&turned, &half, &k, dims), &k);
    let r = icp_align(&model, &cloud, &start, &k, &IcpParams::default()).unwrap();
    let est = r.pose.compose(&start.inverse());
    assert!((est.angle_deg() - 2.0).abs() < 0.2, "yaw {:.3}", est.angle_deg());
    assert!((r.pose.translation - turned.translation).norm() < 0.003, "{:?}", r.pose.translation);
}

#[test]
fn icp_disjoint_clouds_fail() {
    let dims = (160, 120);
    let k = intr(dims.0, dims.1);
    let half = Vector3::new(0.1, 0.1, 0.1);
    let pose = corner_pose();
    let model = box_model(&pose, &half, &k, dims).unwrap();
    let far = Pose::new(pose.rotation, pose.translation + Vector3::new(0.0, 0.0, 1.0));
    let cloud = cloud_of(&render_box_depth(&far, &half, &k, dims), &k);
    let r = icp_align(&model, &cloud, &pose, &k, &IcpParams::default());
    assert!(matches!(r, Err(OtrError::InsufficientCorrespondences(_))));
}

fn plane_cloud(k: &CameraIntrinsics, dims: (usize, usize), z: impl Fn(usize, usize) -> f64) -> PointCloud {
    let depth = Grid::from_fn(dims.0, dims.1, |x, y| {
        if (40..120).contains(&x) && (30..90).contains(&y) {
            z(x, y)
        } else {
            0.0
        }
    });
    cloud_of(&depth, k)
}

#[test]
fn first_update_initializes_model() {
    let dims = (160, 120);
    let k = intr(dims.0, dims.1);
    let cloud = plane_cloud(&k, dims, |_, _| 1.0);
    let (pre, out) = update_preimage(&PreImage::empty(), &cloud, &Vector3::new(0.0, 0.0, 1.0), &k, &PreImageParams::default());
    assert!(out.accepted);
    assert_eq!(pre.len(), cloud.len());
    assert!(pre.surfels.iter().all(|s| (s.normal.norm() - 1.0).abs() < 1e-6 && s.radius > 0.0));
    assert!((pre.pose.translation - cloud.centroid()).norm() < 1e-12);
}

#[test]
fn high_icp_error_is_rejected_bit_identically() {
    let dims = (160, 120);
    let k = intr(dims.0, dims.1);
    let base = plane_cloud(&k, dims, |_, _| 1.0);
    let (pre, _) = update_preimage(&PreImage::empty(), &base, &Vector3::new(0.0, 0.0, 1.0), &k, &PreImageParams::default());

    // Checkerboard offsets of +-sqrt(1e-3) m along the normal: the
    // point-to-plane error stays at 1e-3 whatever the pose.
    let a = 1e-3f64.sqrt();
    let points: Vec<Vector3<f64>> = base
        .points
        .iter()
        .zip(&base.pixels)
        .map(|(p, &(x, y))| p + Vector3::new(0.0, 0.0, if (x + y) % 2 == 0 { a } else { -a }))
        .collect();
    let bumpy = PointCloud::new(dims.0, dims.1, points, base.normals.clone(), base.colors.clone(), base.pixels.clone()).unwrap();
    let snapshot = pre.clone();
    let (after, out) = update_preimage(&pre, &bumpy, &Vector3::new(0.0, 0.0, 1.0), &k, &PreImageParams::default());
    assert!(!out.accepted);
    let e = out.error.unwrap();
    assert!((e - 1e-3).abs() < 1e-4, "{e}");
    assert_eq!(after, snapshot);
}

#[test]
fn repeated_static_updates_saturate() {
    let dims = (160, 120);
    let k = intr(dims.0, dims.1);
    let half = Vector3::new(0.08, 0.08, 0.08);
    let pose = corner_pose();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    let noise = rand_distr::Normal::new(0.0, 0.001).unwrap();
    let mut pre = PreImage::empty();
    let mut counts = Vec::new();
    for _ in 0..20 {
        let depth = render_box_depth(&pose, &half, &k, dims).map(|z| {
            if z > 0.0 {
                z + rand_distr::Distribution::sample(&noise, &mut rng)
            } else {
                0.0
            }
        });
        let (next, out) = update_preimage(&pre, &cloud_of(&depth, &k), &pose.translation, &k, &PreImageParams::default());
        assert!(out.accepted, "{out:?}");
        assert!(next.pose.orthonormality_defect() <= 1e-6);
        pre = next;
        counts.push(pre.len() as f64);
    }
    for w in counts[10..].windows(2) {
        assert!(w[1] <= w[0] * 1.01, "{counts:?}");
    }
}

#[test]
fn occupancy_axis_surfel() {
    let (w, h) = (64, 48);
    let k = intr(w, h);
    let s = Surfel {
        position: Vector3::zeros(),
        normal: -Vector3::z(),
        color: [0.0; 3],
        radius: 0.001,
        confidence: 1.0,
        last_seen: 0,
    };
    let pre = PreImage::from_surfels(vec![s], Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)));
    let occ = project_occupancy(&pre, &k, &BBox::new(0.0, 0.0, w as f64, h as f64), (w, h)).unwrap();
    assert!(occ.at(k.cx as usize, k.cy as usize));
    assert_eq!(occ.area(), 1);
}

#[test]
fn occupancy_cube_bounds() {
    let (w, h) = (200, 160);
    let k = CameraIntrinsics::new(500.0, 500.0, 100.0, 80.0).unwrap();
    let pre = PreImage::from_surfels(cube(0.1, 0.005), Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)));
    let b = projected_bounds(&pre, &k, (w, h)).unwrap();
    // Front face at 0.95 m: 0.1 * 500 / 0.95 px.
    let expected = 0.1 * 500.0 / 0.95;
    assert!((b.width() as f64 - expected).abs() <= 3.0, "{b:?}");
    assert!((b.height() as f64 - expected).abs() <= 3.0, "{b:?}");
    assert!((aspect(&pre, &k, (w, h)).unwrap() - 1.0).abs() <= 0.05);
}

#[test]
fn empty_model_projects_nothing() {
    let k = intr(64, 48);
    let occ = project_occupancy(&PreImage::empty(), &k, &BBox::new(0.0, 0.0, 64.0, 48.0), (64, 48)).unwrap();
    assert_eq!(occ.area(), 0);
    assert!(matches!(aspect(&PreImage::empty(), &k, (64, 48)), Err(OtrError::AspectUnavailable)));
    assert_eq!(make_filter_mask(&occ).area(), 0);
}

#[test]
fn board_aspect() {
    let (w, h) = (320, 240);
    let k = intr(w, h);
    let board = |yaw_deg: f64| {
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        let mut s = face(-z * 0.005, x, y, -z, 0.3, 0.1, 0.005);
        s.extend(face(z * 0.005, x, y, z, 0.3, 0.1, 0.005));
        s.extend(face(-x * 0.15, z, y, -x, 0.01, 0.1, 0.005));
        s.extend(face(x * 0.15, z, y, x, 0.01, 0.1, 0.005));
        let r = exp_so3(&Vector3::new(0.0, yaw_deg.to_radians(), 0.0));
        PreImage::from_surfels(s, Pose::new(r, Vector3::new(0.0, 0.0, 1.0)))
    };
    let a0 = aspect(&board(0.0), &k, (w, h)).unwrap();
    assert!((a0 - 3.0).abs() <= 0.1, "{a0}");
    let a90 = aspect(&board(90.0), &k, (w, h)).unwrap();
    assert!(a90 < 1.0, "{a90}");
}

#[test]
fn filter_mask_closes_holes_and_keeps_largest() {
    let rect = PixelRect { x0: 0, y0: 0, x1: 40, y1: 30 };
    let mut g = Grid::zeros(40, 30);
    for y in 5..15 {
        for x in 5..15 {
            g.set(x, y, 1.0);
        }
    }
    g.set(9, 9, 0.0);
    g.set(10, 9, 0.0);
    for y in 22..24 {
        for x in 30..32 {
            g.set(x, y, 1.0);
        }
    }
    g.set(32, 24, 1.0);
    let m = make_filter_mask(&SegMask::new(rect, g.clone(), g).unwrap());
    assert!(m.at(9, 9) && m.at(10, 9));
    assert!(!m.at(30, 22));
    assert!(m.at(5, 5) && m.at(3, 3) && !m.at(2, 2));
}

#[test]
fn surfel_export_format() {
    let dims = (160, 120);
    let k = intr(dims.0, dims.1);
    let (pre, _) = update_preimage(&PreImage::empty(), &plane_cloud(&k, dims, |_, _| 1.0), &Vector3::new(0.0, 0.0, 1.0), &k, &PreImageParams::default());
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("s.txt");
    write_surfels(&pre, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), pre.len());
    for line in text.lines().take(5) {
        let v: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(v.len(), 11);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn occluded_surfel_adds_nothing(x in -0.05f64..0.05, y in -0.05f64..0.05, ra in 0.003f64..0.02, rb in 0.003f64..0.04, dz in 0.05f64..1.0, jitter in 0.0f64..0.4) {
        let k = intr(160, 120);
        let mk = |p: Vector3<f64>, r: f64| Surfel { position: p, normal: -Vector3::z(), color: [0.0; 3], radius: r, confidence: 1.0, last_seen: 0 };
        let za = 1.0;
        // B sits behind A; its center ray passes within A's disc.
        let b_center = Vector3::new(x + jitter * ra * 0.5, y, za) * ((za + dz) / za);
        let a = mk(Vector3::new(x, y, za), ra);
        let b = mk(b_center, rb);
        let region = BBox::new(0.0, 0.0, 160.0, 120.0);
        let only_a = project_occupancy(&PreImage::from_surfels(vec![a.clone()], Pose::identity()), &k, &region, (160, 120)).unwrap();
        let both = project_occupancy(&PreImage::from_surfels(vec![a, b], Pose::identity()), &k, &region, (160, 120)).unwrap();
        prop_assume!(only_a.area() > 0);
        prop_assert_eq!(only_a.mask, both.mask);
    }
}
