//! Shared oracles and configurations for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyalign_core::geometry::{bilinear_sample, build_grid_at, project_pixel};
use skyalign_core::synthdata::{masked_ncc, plan_dataset, render_row, visible_wedge, NoiseSpec};
use skyalign_core::{CameraModel, Config, Pose3DoF, SatelliteMeta};

/// World-frame pinhole projection built from explicit matrices. World axes:
/// X along satellite columns, Y along satellite rows, Z up; the camera sits
/// at `(-t_z, -t_x, 0)` looking along `(cos θ, sin θ, 0)` with image x to its
/// right and image y down.
pub fn pinhole_oracle(pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta, u_s: f64, v_s: f64, h: f64) -> Option<(f64, f64)> {
    let (s, c) = pose.theta().sin_cos();
    let world = [sat.alpha * (u_s - sat.u_s0), sat.alpha * (v_s - sat.v_s0), -h];
    let center = [-pose.t_z, -pose.t_x, 0.0];
    let rot = [[-s, c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
    let k = [[cam.f_x, 0.0, cam.u_g0], [0.0, cam.f_y, cam.v_g0], [0.0, 0.0, 1.0]];
    let rel = [world[0] - center[0], world[1] - center[1], world[2] - center[2]];
    let pc: Vec<f64> = rot.iter().map(|r| r.iter().zip(&rel).map(|(a, b)| a * b).sum()).collect();
    if pc[2] <= 1e-3 {
        return None;
    }
    let p: Vec<f64> = k.iter().map(|r| r.iter().zip(&pc).map(|(a, b)| a * b).sum()).collect();
    Some((p[0] / p[2], p[1] / p[2]))
}

pub struct OracleStats {
    /// Absolute pixel error over projections landing in the image.
    pub max_abs_in_image: f64,
    /// Error relative to `max(1, |coordinate|)` over every point in front of
    /// the camera (coordinates grow without bound as depth approaches zero).
    pub max_rel: f64,
    /// Largest change of `u_g` over a sweep of `h`.
    pub max_du_over_h: f64,
    pub compared: usize,
}

/// Oracle deviation over `n` random (pose, pixel, h) configurations.
pub fn geometry_oracle_run(n: usize, seed: u64) -> OracleStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_err, mut max_abs, mut max_du, mut compared) = (0.0f64, 0.0f64, 0.0f64, 0);
    for _ in 0..n {
        let f = rng.gen_range(100.0..800.0);
        let (w, hgt) = (1024, 256);
        let cam = CameraModel::new(f, f * rng.gen_range(0.9..1.1), rng.gen_range(400.0..600.0), rng.gen_range(100.0..150.0), w, hgt, 1.65).unwrap();
        let sat = SatelliteMeta::new(rng.gen_range(0.1..1.0), 256.0, 256.0, 512, 512).unwrap();
        let pose = Pose3DoF::new(rng.gen_range(-3.2..3.2), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let (u_s, v_s) = (rng.gen_range(0.0..512.0), rng.gen_range(0.0..512.0));
        let h = rng.gen_range(0.5..5.0);
        let p = project_pixel(&pose, &cam, &sat, u_s, v_s, h);
        match pinhole_oracle(&pose, &cam, &sat, u_s, v_s, h) {
            Some((u, v)) => {
                assert!(p.depth > 1e-3, "oracle sees a point the projection rejects");
                let scale = 1.0f64.max(u.abs()).max(v.abs());
                let (du, dv) = ((p.u_g - u).abs(), (p.v_g - v).abs());
                max_err = max_err.max(du / scale).max(dv / scale);
                if p.valid {
                    max_abs = max_abs.max(du).max(dv);
                }
                compared += 1;
            }
            None => assert!(p.depth <= 1e-3 && !p.valid),
        }
        if p.depth > 1e-3 {
            for k in 0..8 {
                let q = project_pixel(&pose, &cam, &sat, u_s, v_s, 0.1 + k as f64 * 1.7);
                max_du = max_du.max((q.u_g - p.u_g).abs());
            }
        }
    }
    OracleStats {
        max_abs_in_image: max_abs,
        max_rel: max_err,
        max_du_over_h: max_du,
        compared,
    }
}

/// Config of the round-trip oracle: well-sampled ground renders.
pub fn round_trip_config() -> Config {
    Config {
        sat_size: 128,
        sat_alpha: 0.5,
        ground_width: 512,
        ground_height: 128,
        focal: 256.0,
        render_range_m: 30.0,
        ..Config::default()
    }
}

/// Worst NCC between the GP projection of the rendered ground image and the
/// satellite patch over the visible wedge, for `n` planar scenes.
pub fn round_trip_run(n: usize, seed: u64) -> f64 {
    let cfg = round_trip_config();
    let cam = cfg.camera().unwrap();
    let sat = cfg.satellite().unwrap();
    let rows = plan_dataset(n, NoiseSpec { theta_deg: 20.0, t_m: 10.0 }, seed);
    rows.iter()
        .map(|r| {
            let rec = render_row(&cfg, r).unwrap();
            let grid = build_grid_at(&rec.gt, &cam, &sat, cam.cam_height);
            let proj = bilinear_sample(&rec.ground, &grid);
            let mask = visible_wedge(&rec.gt, &cam, &sat, cfg.render_range_m - 2.0);
            masked_ncc(&proj.data, &rec.satellite.data, &mask)
        })
        .fold(1.0, f64::min)
}

/// Config of the raw-pixel localization benchmark.
pub fn identity_config() -> Config {
    Config {
        sat_size: 160,
        sat_alpha: 0.5,
        ground_width: 512,
        ground_height: 128,
        focal: 128.0,
        render_range_m: 60.0,
        search_range_m: 40.0,
        template_m: 40.0,
        noise_t_m: 20.0,
        identity_encoder: true,
        ..Config::default()
    }
}

/// Small network for gradient and training tests.
pub fn tiny_config() -> Config {
    Config {
        sat_size: 64,
        sat_alpha: 1.0,
        ground_width: 64,
        ground_height: 16,
        focal: 32.0,
        render_range_m: 30.0,
        pyramid_channels: [8, 4, 4],
        heads: 2,
        window: 2,
        optimizer_hidden: 8,
        search_range_m: 16.0,
        template_m: 16.0,
        noise_theta_deg: 10.0,
        noise_t_m: 6.0,
        batch_size: 2,
        max_steps: 3,
        train_samples: 4,
        ..Config::default()
    }
}

/// Desk configuration for the overfit criterion.
pub fn overfit_config() -> Config {
    Config {
        sat_size: 128,
        sat_alpha: 0.5,
        ground_width: 256,
        ground_height: 64,
        focal: 128.0,
        render_range_m: 40.0,
        pyramid_channels: [16, 16, 8],
        heads: 4,
        optimizer_hidden: 32,
        noise_theta_deg: 10.0,
        noise_t_m: 10.0,
        train_samples: 16,
        max_steps: 2000,
        batch_size: 3,
        lr_start: 1e-4,
        lr_end: 1e-5,
        gamma: 10.0,
        lambda1_init: -5.0,
        lambda2_init: -3.0,
        ..Config::default()
    }
}
