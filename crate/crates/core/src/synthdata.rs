//! Procedural planar scenes with exact ground-truth poses.
//!
//! A scene is an overhead texture (multi-octave value noise with painted road
//! bands, optionally with elevated blocks). The satellite image is a crop of
//! the texture; the ground image is rendered by intersecting each camera ray
//! with the ground plane (or a block facade) and sampling the texture there,
//! which is the exact inverse of the ground-plane projection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skyalign_tensor::FeatureMap;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, CameraModel, Pose3DoF, SatelliteMeta};
use crate::imageio;

/// Fill value for sky and for ground beyond the render range.
pub const SKY: f64 = 0.5;

/// Value-noise lattice spacings (meters) and amplitudes.
const OCTAVES: [(f64, f64); 4] = [(16.0, 0.3), (8.0, 0.5), (4.0, 0.8), (2.0, 0.8)];
const ROAD_WIDTH_M: f64 = 6.0;
const ROAD_GRAY: f64 = 0.22;

/// Uniform noise envelope of prior poses around ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub theta_deg: f64,
    pub t_m: f64,
}

impl NoiseSpec {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            theta_deg: cfg.noise_theta_deg,
            t_m: cfg.noise_t_m,
        }
    }

    pub fn contains(&self, gt: &Pose3DoF, prior: &Pose3DoF) -> bool {
        let eps = 1e-9;
        angle_diff(prior.theta(), gt.theta()).to_degrees().abs() <= self.theta_deg + eps
            && (prior.t_x - gt.t_x).abs() <= self.t_m + eps
            && (prior.t_z - gt.t_z).abs() <= self.t_m + eps
    }
}

/// Axis-aligned footprint in texture pixels, extruded to `height_m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
    pub height_m: f64,
    pub facade: f64,
}

impl Block {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u <= self.u1 && v >= self.v0 && v <= self.v1
    }
}

/// Overhead texture. `(u0, v0)` is the texture pixel under the satellite
/// patch center.
#[derive(Clone, Debug)]
pub struct Texture {
    pub map: FeatureMap,
    pub u0: f64,
    pub v0: f64,
    pub alpha: f64,
    pub blocks: Vec<Block>,
}

impl Texture {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.map.data[v * self.map.width + u]
    }

    /// Bilinear lookup; `None` outside the texture.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (w, h) = (self.map.width, self.map.height);
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    /// Procedural texture with `half` pixels on each side of the center.
    pub fn generate(seed: u64, alpha: f64, half: usize, n_blocks: usize, keep_clear: (f64, f64)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half;
        let c = half as f64;
        let mut data = vec![0.0; n * n];

        for &(spacing_m, amp) in &OCTAVES {
            let spacing = spacing_m / alpha;
            let cells = (n as f64 / spacing).ceil() as usize + 2;
            let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for v in 0..n {
                let fy = v as f64 / spacing;
                let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
                for u in 0..n {
                    let fx = u as f64 / spacing;
                    let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                    let l = |x: usize, y: usize| lattice[y * cells + x];
                    let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                    let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                    data[v * n + u] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
        let total: f64 = OCTAVES.iter().map(|o| o.1).sum();
        for d in &mut data {
            *d = 0.5 + 0.4 * (*d / total).clamp(-1.0, 1.0) * 1.6;
            *d = d.clamp(0.05, 0.95);
        }

        // Road bands through points near the center.
        let roads = rng.gen_range(1..=2);
        for _ in 0..roads {
            let px = c + rng.gen_range(-0.3..0.3) * c;
            let py = c + rng.gen_range(-0.3..0.3) * c;
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, co) = ang.sin_cos();
            let half_w = ROAD_WIDTH_M / alpha / 2.0;
            for v in 0..n {
                for u in 0..n {
                    let d = ((u as f64 - px) * s - (v as f64 - py) * co).abs();
                    if d < half_w + 2.0 {
                        let m = if d <= half_w { 1.0 } else { 1.0 - smooth((d - half_w) / 2.0) };
                        let i = v * n + u;
                        data[i] = data[i] * (1.0 - 0.8 * m) + ROAD_GRAY * 0.8 * m;
                    }
                }
            }
        }

        let mut blocks = Vec::with_capacity(n_blocks);
        let (cam_u, cam_v) = keep_clear;
        let mut attempts = 0;
        while blocks.len() < n_blocks && attempts < 200 * n_blocks.max(1) {
            attempts += 1;
            let wm = rng.gen_range(4.0..9.0) / alpha;
            let hm = rng.gen_range(4.0..9.0) / alpha;
            let bu = c + rng.gen_range(-0.45..0.45) * c;
            let bv = c + rng.gen_range(-0.45..0.45) * c;
            let b = Block {
                u0: bu,
                v0: bv,
                u1: bu + wm,
                v1: bv + hm,
                height_m: rng.gen_range(4.0..10.0),
                facade: rng.gen_range(0.7..0.95),
            };
            // Keep a clear disk around the camera so it never starts inside.
            let du = cam_u.clamp(b.u0, b.u1) - cam_u;
            let dv = cam_v.clamp(b.v0, b.v1) - cam_v;
            if (du * du + dv * dv).sqrt() * alpha < 8.0 {
                continue;
            }
            let roof = rng.gen_range(0.75..0.95);
            for v in (b.v0.floor() as usize)..=(b.v1.ceil() as usize).min(n - 1) {
                for u in (b.u0.floor() as usize)..=(b.u1.ceil() as usize).min(n - 1) {
                    if b.contains(u as f64, v as f64) {
                        data[v * n + u] = roof;
                    }
                }
            }
            blocks.push(b);
        }

        Self {
            map: FeatureMap {
                channels: 1,
                height: n,
                width: n,
                data,
                level: 0,
            },
            u0: c,
            v0: c,
            alpha,
            blocks,
        }
    }

    /// Square satellite crop centered on the texture center.
    pub fn crop(&self, sat: &SatelliteMeta) -> Result<FeatureMap> {
        let ou = self.u0 - sat.u_s0;
        let ov = self.v0 - sat.v_s0;
        if ou.fract() != 0.0 || ov.fract() != 0.0 || ou < 0.0 || ov < 0.0 {
            return Err(Error::Scene("satellite crop not aligned with texture grid".into()));
        }
        let (ou, ov) = (ou as usize, ov as usize);
        if ou + sat.width_s > self.map.width || ov + sat.height_s > self.map.height {
            return Err(Error::Scene("satellite patch exceeds texture".into()));
        }
        let mut data = Vec::with_capacity(sat.width_s * sat.height_s);
        for v in 0..sat.height_s {
            let row = (ov + v) * self.map.width + ou;
            data.extend_from_slice(&self.map.data[row..row + sat.width_s]);
        }
        Ok(FeatureMap {
            channels: 1,
            height: sat.height_s,
            width: sat.width_s,
            data,
            level: 0,
        })
    }
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Renders the ground view of `tex` from `pose`. Ground hits farther than
/// `range_m` and rays above the horizon read [`SKY`].
pub fn render_ground(tex: &Texture, cam: &CameraModel, pose: &Pose3DoF, range_m: f64) -> Result<FeatureMap> {
    let (s, c) = pose.theta().sin_cos();
    let h = cam.cam_height;
    let mut data = vec![SKY; cam.width_g * cam.height_g];
    let to_tex = |x: f64, z: f64| -> (f64, f64) {
        let a = x * c + z * s;
        let b = -x * s + z * c;
        (tex.u0 + (b - pose.t_z) / tex.alpha, tex.v0 + (a - pose.t_x) / tex.alpha)
    };
    for v in 0..cam.height_g {
        let dy = (v as f64 - cam.v_g0) / cam.f_y;
        for u in 0..cam.width_g {
            let dx = (u as f64 - cam.u_g0) / cam.f_x;
            let horiz = (1.0 + dx * dx).sqrt();
            let ground_lambda = if dy > 0.0 { h / dy } else { f64::INFINITY };
            let max_lambda = ground_lambda.min(range_m / horiz);

            if !tex.blocks.is_empty() {
                if let Some(val) = march_blocks(tex, dx, dy, h, max_lambda, horiz, &to_tex) {
                    data[v * cam.width_g + u] = val;
                    continue;
                }
            }
            if ground_lambda * horiz > range_m {
                continue;
            }
            let (ut, vt) = to_tex(dx * ground_lambda, ground_lambda);
            data[v * cam.width_g + u] = tex.sample(ut, vt).ok_or_else(|| {
                Error::Scene(format!("ground ray at pixel ({u}, {v}) leaves the texture"))
            })?;
        }
    }
    Ok(FeatureMap {
        channels: 1,
        height: cam.height_g,
        width: cam.width_g,
        data,
        level: 0,
    })
}

/// First facade hit along a ray, stepping a quarter texel horizontally.
fn march_blocks(
    tex: &Texture,
    dx: f64,
    dy: f64,
    h: f64,
    max_lambda: f64,
    horiz: f64,
    to_tex: &impl Fn(f64, f64) -> (f64, f64),
) -> Option<f64> {
    let step = 0.25 * tex.alpha / horiz;
    let mut lambda = step;
    while lambda <= max_lambda {
        let (ut, vt) = to_tex(dx * lambda, lambda);
        let height = h - dy * lambda;
        for b in &tex.blocks {
            if b.contains(ut, vt) && height <= b.height_m {
                // Horizontal banding by height gives the facade some texture.
                let band = ((height / 1.5).floor() as i64).rem_euclid(2) as f64;
                return Some(b.facade - 0.1 * band);
            }
        }
        lambda += step;
    }
    None
}

/// Satellite pixels whose ground-plane point is imaged (valid projection)
/// and lies within `range_m` of the camera: the region where the ground
/// image carries texture.
pub fn visible_wedge(pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta, range_m: f64) -> Vec<bool> {
    let grid = crate::geometry::build_grid_at(pose, cam, sat, cam.cam_height);
    let (cu, cv) = sat.camera_pixel(pose);
    let mut mask = grid.valid.clone();
    for v in 0..sat.height_s {
        for u in 0..sat.width_s {
            let d = sat.alpha * ((u as f64 - cu).powi(2) + (v as f64 - cv).powi(2)).sqrt();
            if d > range_m {
                mask[v * sat.width_s + u] = false;
            }
        }
    }
    mask
}

/// Pearson correlation of two single-channel maps over `mask`.
pub fn masked_ncc(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|m| **m).count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let pick = |x: &[f64]| -> f64 { x.iter().zip(mask).filter(|p| *p.1).map(|p| p.0).sum::<f64>() / n };
    let (ma, mb) = (pick(a), pick(b));
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..mask.len() {
        if mask[i] {
            let (x, y) = (a[i] - ma, b[i] - mb);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

/// Everything needed to render one sample.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub texture_seed: u64,
    pub camera: CameraModel,
    pub sat: SatelliteMeta,
    pub gt: Pose3DoF,
    /// Prior handed to the estimator; ground truth when `None`.
    pub prior: Option<Pose3DoF>,
    pub noise: NoiseSpec,
    pub render_range_m: f64,
    pub blocks: usize,
}

impl SceneSpec {
    pub fn from_config(cfg: &Config, texture_seed: u64, gt: Pose3DoF) -> Result<Self> {
        Ok(Self {
            texture_seed,
            camera: cfg.camera()?,
            sat: cfg.satellite()?,
            gt,
            prior: None,
            noise: NoiseSpec::from_config(cfg),
            render_range_m: cfg.render_range_m,
            blocks: cfg.blocks,
        })
    }

    /// Texture large enough to hold the satellite patch and every ground hit
    /// within the render range.
    pub fn texture(&self) -> Texture {
        let a = self.sat.alpha;
        let reach = self.gt.t_x.abs().max(self.gt.t_z.abs()) + self.render_range_m;
        let sat_half = (self.sat.width_s.max(self.sat.height_s) as f64) / 2.0;
        let half = ((reach / a).ceil().max(sat_half) as usize) + 2;
        let cam = (half as f64 - self.gt.t_z / a, half as f64 - self.gt.t_x / a);
        Texture::generate(self.texture_seed, a, half, self.blocks, cam)
    }
}

/// One ground/satellite pair with its poses.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub ground: FeatureMap,
    pub satellite: FeatureMap,
    pub gt: Pose3DoF,
    pub prior: Pose3DoF,
    pub noise: NoiseSpec,
    pub scene_seed: u64,
}

pub fn render_pair(spec: &SceneSpec) -> Result<SampleRecord> {
    let tex = spec.texture();
    let satellite = tex.crop(&spec.sat)?;
    let ground = render_ground(&tex, &spec.camera, &spec.gt, spec.render_range_m)?;
    Ok(SampleRecord {
        ground,
        satellite,
        gt: spec.gt,
        prior: spec.prior.unwrap_or(spec.gt),
        noise: spec.noise,
        scene_seed: spec.texture_seed,
    })
}

/// Manifest line: poses in degrees/meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub scene_seed: u64,
    pub gt_theta_deg: f64,
    pub gt_tx_m: f64,
    pub gt_tz_m: f64,
    pub prior_theta_deg: f64,
    pub prior_tx_m: f64,
    pub prior_tz_m: f64,
}

impl ManifestRow {
    pub fn gt(&self) -> Pose3DoF {
        Pose3DoF::from_degrees(self.gt_theta_deg, self.gt_tx_m, self.gt_tz_m)
    }

    pub fn prior(&self) -> Pose3DoF {
        Pose3DoF::from_degrees(self.prior_theta_deg, self.prior_tx_m, self.prior_tz_m)
    }
}

/// Draws poses for `n` samples. The satellite patch is centered on the prior
/// location, so priors carry zero translation and the ground-truth offset is
/// the negated translation noise.
pub fn plan_dataset(n: usize, noise: NoiseSpec, seed: u64) -> Vec<ManifestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|index| {
            let gt_theta = 180.0 - rng.gen_range(0.0..360.0);
            let d_theta = if noise.theta_deg > 0.0 {
                rng.gen_range(-noise.theta_deg..=noise.theta_deg)
            } else {
                0.0
            };
            let mut dt = || if noise.t_m > 0.0 { rng.gen_range(-noise.t_m..=noise.t_m) } else { 0.0 };
            let (dtx, dtz) = (dt(), dt());
            let scene_seed = rng.gen();
            let gt = Pose3DoF::from_degrees(gt_theta, -dtx, -dtz);
            let prior = Pose3DoF::new(gt.theta() + d_theta.to_radians(), 0.0, 0.0);
            ManifestRow {
                index,
                scene_seed,
                gt_theta_deg: gt.theta_deg(),
                gt_tx_m: gt.t_x,
                gt_tz_m: gt.t_z,
                prior_theta_deg: prior.theta_deg(),
                prior_tx_m: prior.t_x,
                prior_tz_m: prior.t_z,
            }
        })
        .collect()
}

pub fn render_row(cfg: &Config, row: &ManifestRow) -> Result<SampleRecord> {
    let mut spec = SceneSpec::from_config(cfg, row.scene_seed, row.gt())?;
    spec.prior = Some(row.prior());
    render_pair(&spec)
}

/// Plans and renders `n` samples.
pub fn make_dataset(cfg: &Config, n: usize, noise: NoiseSpec, seed: u64) -> Result<(Vec<SampleRecord>, Vec<ManifestRow>)> {
    let rows = plan_dataset(n, noise, seed);
    let mut cfg = cfg.clone();
    cfg.noise_theta_deg = noise.theta_deg;
    cfg.noise_t_m = noise.t_m;
    let records = rows.iter().map(|r| render_row(&cfg, r)).collect::<Result<Vec<_>>>()?;
    Ok((records, rows))
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `manifest.csv` plus `ground_NNNN.pgm` and `satellite_NNNN.pgm`
/// per sample into `dir`. Images are quantized to 8 bits.
pub fn save_dataset(dir: impl AsRef<Path>, records: &[SampleRecord], rows: &[ManifestRow]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (r, row) in records.iter().zip(rows) {
        let put = |name: String, m: &FeatureMap| imageio::write_pgm(dir.join(name), m.width, m.height, &imageio::unit_to_bytes(&m.data));
        put(format!("ground_{:04}.pgm", row.index), &r.ground)?;
        put(format!("satellite_{:04}.pgm", row.index), &r.satellite)?;
    }
    write_manifest(dir.join("manifest.csv"), rows)
}

/// Reads a directory written by [`save_dataset`]; image sizes must match
/// `cfg`.
pub fn load_dataset(dir: impl AsRef<Path>, cfg: &Config) -> Result<(Vec<SampleRecord>, Vec<ManifestRow>)> {
    let dir = dir.as_ref();
    let rows = read_manifest(dir.join("manifest.csv"))?;
    let noise = NoiseSpec::from_config(cfg);
    let mut records = Vec::with_capacity(rows.len());
    for row in &rows {
        let ground = imageio::read_pgm(dir.join(format!("ground_{:04}.pgm", row.index)))?;
        let satellite = imageio::read_pgm(dir.join(format!("satellite_{:04}.pgm", row.index)))?;
        if (ground.width, ground.height) != (cfg.ground_width, cfg.ground_height)
            || (satellite.width, satellite.height) != (cfg.sat_size, cfg.sat_size)
        {
            return Err(Error::Invalid(format!(
                "sample {}: images {}x{} / {}x{} do not match the config",
                row.index, ground.width, ground.height, satellite.width, satellite.height
            )));
        }
        records.push(SampleRecord {
            ground,
            satellite,
            gt: row.gt(),
            prior: row.prior(),
            noise,
            scene_seed: row.scene_seed,
        });
    }
    Ok((records, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> Config {
        Config {
            sat_size: 64,
            sat_alpha: 0.5,
            ground_width: 128,
            ground_height: 32,
            focal: 64.0,
            render_range_m: 40.0,
            ..Config::default()
        }
    }

    #[test]
    fn empty_plan_is_empty() {
        assert!(plan_dataset(0, NoiseSpec { theta_deg: 20.0, t_m: 20.0 }, 1).is_empty());
    }

    #[test]
    fn plans_are_reproducible() {
        let noise = NoiseSpec { theta_deg: 20.0, t_m: 20.0 };
        assert_eq!(plan_dataset(50, noise, 9), plan_dataset(50, noise, 9));
        assert_ne!(plan_dataset(5, noise, 9), plan_dataset(5, noise, 10));
    }

    #[test]
    fn priors_respect_envelope() {
        let noise = NoiseSpec { theta_deg: 20.0, t_m: 20.0 };
        for r in plan_dataset(500, noise, 3) {
            assert!(noise.contains(&r.gt(), &r.prior()));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small_cfg();
        let spec = SceneSpec::from_config(&cfg, 42, Pose3DoF::from_degrees(30.0, 3.0, -2.0)).unwrap();
        let a = render_pair(&spec).unwrap();
        let b = render_pair(&spec).unwrap();
        assert_eq!(a.ground.data, b.ground.data);
        assert_eq!(a.satellite.data, b.satellite.data);
    }

    #[test]
    fn texture_is_not_flat() {
        let tex = Texture::generate(5, 0.5, 64, 0, (64.0, 64.0));
        let m = tex.map.data.iter().sum::<f64>() / tex.map.data.len() as f64;
        let var = tex.map.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / tex.map.data.len() as f64;
        assert!(var > 1e-3, "variance {var}");
    }

    #[test]
    fn blocks_keep_clear_of_camera() {
        let tex = Texture::generate(8, 0.5, 100, 6, (100.0, 100.0));
        for b in &tex.blocks {
            assert!(!b.contains(100.0, 100.0));
        }
    }
}
