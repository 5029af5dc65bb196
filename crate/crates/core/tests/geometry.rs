mod common;

use std::f64::consts::FRAC_PI_2;

use skyalign_core::geometry::{build_grid, project_pixel};
use skyalign_core::synthdata::{render_ground, Texture};
use skyalign_core::{CameraModel, Config, Pose3DoF, SatelliteMeta};
use skyalign_tensor::FeatureMap;

fn spec_camera() -> (CameraModel, SatelliteMeta) {
    let cam = CameraModel::new(256.0, 256.0, 512.0, 128.0, 1024, 256, 1.65).unwrap();
    let sat = SatelliteMeta::new(0.2, 256.0, 256.0, 512, 512).unwrap();
    (cam, sat)
}

#[test]
fn matches_world_frame_oracle() {
    let s = common::geometry_oracle_run(2_000, 11);
    assert!(s.compared > 500);
    assert!(s.max_abs_in_image < 1e-9, "abs {}", s.max_abs_in_image);
    assert!(s.max_rel < 1e-9, "rel {}", s.max_rel);
    assert_eq!(s.max_du_over_h, 0.0);
}

#[test]
fn point_ten_meters_ahead() {
    let (cam, sat) = spec_camera();
    // 50 pixels along u at 0.2 m/px is 10 m straight ahead at θ = 0.
    let p = project_pixel(&Pose3DoF::identity(), &cam, &sat, 306.0, 256.0, 1.65);
    assert_eq!(p.u_g, 512.0);
    assert!((p.v_g - (128.0 + 256.0 * 1.65 / 10.0)).abs() < 1e-12);
    let q = common::pinhole_oracle(&Pose3DoF::identity(), &cam, &sat, 306.0, 256.0, 1.65).unwrap();
    assert!((q.0 - p.u_g).abs() < 1e-9 && (q.1 - p.v_g).abs() < 1e-9);
}

#[test]
fn quarter_turn_equivalence() {
    let (cam, sat) = spec_camera();
    let a = project_pixel(&Pose3DoF::identity(), &cam, &sat, 306.0, 256.0, 1.65);
    let b = project_pixel(&Pose3DoF::new(FRAC_PI_2, 0.0, 0.0), &cam, &sat, 256.0, 306.0, 1.65);
    assert!((a.u_g - b.u_g).abs() < 1e-9 && (a.v_g - b.v_g).abs() < 1e-9);
}

#[test]
fn translation_shifts_by_alpha_scaled_pixels() {
    let (cam, sat) = spec_camera();
    let pose = Pose3DoF::new(0.3, 0.0, 0.0);
    let moved = Pose3DoF::new(0.3, 1.0, -2.0);
    // t_x = +1 m equals moving the query 5 px along v; t_z = -2 m is -10 px along u.
    let a = project_pixel(&moved, &cam, &sat, 300.0, 280.0, 1.65);
    let b = project_pixel(&pose, &cam, &sat, 290.0, 285.0, 1.65);
    assert!((a.u_g - b.u_g).abs() < 1e-9 && (a.v_g - b.v_g).abs() < 1e-9);
}

#[test]
fn level_grids_follow_the_stride_two_convention() {
    let cfg = Config::default();
    let (cam, sat) = (cfg.camera().unwrap(), cfg.satellite().unwrap());
    let pose = Pose3DoF::new(0.4, 2.0, -3.0);
    let full = build_grid(&pose, &cam, &sat, 0).unwrap();
    let l2 = build_grid(&pose, &cam, &sat, 2).unwrap();
    // Level pixel i sits on full pixel 4i; ground coordinates scale by 1/4.
    for (us, vs) in [(40usize, 70usize), (64, 64), (100, 20)] {
        let i = l2.index(us, vs);
        let j = full.index(4 * us, 4 * vs);
        if full.valid[j] {
            assert!((l2.u[i] * 4.0 - full.u[j]).abs() < 1e-9);
            assert!((l2.v[i] * 4.0 - full.v[j]).abs() < 1e-9);
        }
    }
}

/// Rotating the world texture by 90° and the pose by +90° renders the same
/// ground image.
#[test]
fn render_is_equivariant_under_quarter_turns() {
    let n = 161;
    let c = (n - 1) as f64 / 2.0;
    let tex = Texture::generate(5, 0.5, (n - 1) / 2, 0, (c, c));
    let t = &tex.map;
    assert_eq!(t.width, n - 1);
    let n = t.width;
    let c = (n - 1) as f64 / 2.0;
    let mut rot = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            rot[i * n + j] = t.data[(n - 1 - j) * n + i];
        }
    }
    let mk = |data: Vec<f64>| Texture {
        map: FeatureMap {
            channels: 1,
            height: n,
            width: n,
            data,
            level: 0,
        },
        u0: c,
        v0: c,
        alpha: 0.5,
        blocks: vec![],
    };
    let (a, b) = (mk(t.data.clone()), mk(rot));
    let cam = CameraModel::new(64.0, 64.0, 64.0, 16.0, 128, 32, 1.65).unwrap();
    let pose = Pose3DoF::new(0.7, 3.0, -5.0);
    let pose2 = Pose3DoF::new(0.7 + FRAC_PI_2, pose.t_z, -pose.t_x);
    let ga = render_ground(&a, &cam, &pose, 25.0).unwrap();
    let gb = render_ground(&b, &cam, &pose2, 25.0).unwrap();
    let diff = ga.data.iter().zip(&gb.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "max diff {diff}");
}
