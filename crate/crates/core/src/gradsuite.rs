//! Finite-difference checks of every hand-written backward pass in the
//! pipeline, run on a small configuration with randomized weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyalign_tensor::{ops, GradCheck, Tape, Tensor, TensorError, Var};

use crate::config::Config;
use crate::correlation::{self, Region};
use crate::error::Result;
use crate::geometry::{self, Pose3DoF};
use crate::model::Model;
use crate::optimizer;
use crate::synthesis;
use crate::training;

/// Relative error bound for a passing check.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one check for one seed: the largest relative error over its
/// inputs.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: &'static str,
    pub seed: u64,
    pub rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

/// Small architecture used by the suite.
pub fn suite_config() -> Config {
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
        ..Config::default()
    }
}

fn lift<T>(r: Result<T>) -> skyalign_tensor::Result<T> {
    r.map_err(|e| TensorError::Internal(e.to_string()))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Smooth random image so bilinear kinks stay small.
fn smooth(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        let k: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.0..6.3),
                    rng.gen_range(0.2..1.0),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                d[ch * h * w + y * w + x] = k.iter().map(|(a, b, p, s)| s * (a * x as f64 + b * y as f64 + p).sin()).sum();
            }
        }
    }
    Tensor::new(vec![c, h, w], d).expect("shape")
}

fn pose_tensor(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(vec![rng.gen_range(-3.0..3.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)])
}

/// Fixed pseudo-random weights so every output element has its own gradient.
fn weighted_sum(tape: &mut Tape, y: Var) -> skyalign_tensor::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = ops::mul(tape, y, w)?;
    Ok(ops::sum(tape, p))
}

/// Model with every parameter redrawn in `[-0.3, 0.3]`, so zero-initialized
/// branches carry gradient.
fn random_model(cfg: &Config, rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut m = Model::new(cfg)?;
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for v in m.store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    Ok(m)
}

fn check<F>(name: &'static str, seed: u64, step: f64, inputs: &[Tensor], f: F) -> Result<CheckRow>
where
    F: Fn(&mut Tape, &[Var]) -> skyalign_tensor::Result<Var>,
{
    let res = GradCheck { step, max_coords: 48 }.run(inputs, f)?;
    Ok(CheckRow {
        name,
        seed,
        rel_error: res.max_rel_error(),
    })
}

/// Runs every check for every seed.
pub fn run(seeds: &[u64]) -> Result<Vec<CheckRow>> {
    let cfg = suite_config();
    let cam = cfg.camera()?;
    let sat = cfg.satellite()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Projection and bilinear sampling, with respect to the source and pose.
        let (cam1, sat1) = (cam.at_level(1)?, sat.at_level(1)?);
        let src = smooth(&mut rng, 2, cam1.height_g, cam1.width_g);
        rows.push(check("bilinear_pose", seed, 1e-7, &[src, pose_tensor(&mut rng)], |t, v| {
            let grid = lift(geometry::grid_from_pose(t, v[1], &cam1, &sat1, cam.cam_height))?;
            let y = lift(geometry::bilinear_sample_var(t, v[0], grid))?;
            weighted_sum(t, y)
        })?);

        // NCC over a region, with respect to map and template.
        let map = random(&mut rng, &[3, 14, 12]);
        let tpl = random(&mut rng, &[3, 6, 5]);
        let region = Region::full((14, 12), (6, 5))?;
        rows.push(check("ncc", seed, 1e-5, &[map, tpl], |t, v| {
            let y = lift(correlation::ncc_var(t, v[0], v[1], region.clone()))?;
            weighted_sum(t, y)
        })?);

        // Template fill outside the visible mask.
        let x = random(&mut rng, &[2, 5, 6]);
        let mask: Vec<bool> = (0..30).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
        rows.push(check("fill_outside", seed, 1e-5, &[x], |t, v| {
            let y = lift(correlation::fill_outside_var(t, v[0], mask.clone()))?;
            weighted_sum(t, y)
        })?);

        // Pose loss over a three-entry trace.
        let gt = Pose3DoF::new(rng.gen_range(-3.0..3.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let trace: Vec<Tensor> = (0..3).map(|_| pose_tensor(&mut rng)).collect();
        rows.push(check("loss_pose", seed, 1e-6, &trace, |t, v| lift(training::loss_pose(t, v, &gt, true)))?);

        // Location loss on a probability map.
        let p = random(&mut rng, &[5, 7]);
        let gt_idx = rng.gen_range(0..35);
        rows.push(check("loss_location", seed, 1e-6, &[p], |t, v| {
            lift(training::loss_location(t, v[0], gt_idx, 10.0, false))
        })?);

        // Uncertainty-weighted total.
        let scal = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| Tensor::from_vec(vec![rng.gen_range(lo..hi)]);
        let tot = [scal(&mut rng, 0.0, 50.0), scal(&mut rng, 0.0, 2.0), scal(&mut rng, -6.0, 1.0), scal(&mut rng, -4.0, 1.0)];
        rows.push(check("loss_total", seed, 1e-6, &tot, |t, v| lift(training::loss_total(t, v[0], v[1], v[2], v[3])))?);

        let model = random_model(&cfg, &mut rng)?;

        // Optimizer head, with respect to the feature difference at every level.
        for e in [1usize, 2, 3] {
            let s = sat.at_level(e)?;
            let diff = random(&mut rng, &[cfg.channels_at(e), s.height_s, s.width_s]);
            rows.push(check(["pose_delta_l1", "pose_delta_l2", "pose_delta_l3"][e - 1], seed, 1e-6, &[diff], |t, v| {
                let d = lift(optimizer::pose_delta(t, &model.store, &model.opt, e, v[0]))?;
                weighted_sum(t, d)
            })?);
        }

        // Encoders, with respect to the images.
        let g_img = smooth(&mut rng, 1, cam.height_g, cam.width_g);
        rows.push(check("ground_encoder", seed, 1e-6, &[g_img.clone()], |t, v| {
            let f = lift(synthesis::encode_ground(t, &model.store, &model.synth, v[0]))?;
            let a = weighted_sum(t, f[0])?;
            let b = weighted_sum(t, f[2])?;
            ops::add(t, a, b)
        })?);
        let s_img = smooth(&mut rng, 1, sat.height_s, sat.width_s);
        rows.push(check("satellite_encoder", seed, 1e-6, &[s_img], |t, v| {
            let (f, u) = lift(synthesis::encode_satellite(t, &model.store, &model.synth, v[0]))?;
            let a = weighted_sum(t, f[1])?;
            let b = weighted_sum(t, u[0])?;
            ops::add(t, a, b)
        })?);

        // Full synthesis path, with respect to the pose and finest ground features.
        let mut tape = Tape::inference();
        let gv = tape.constant(g_img);
        let feats = synthesis::encode_ground(&mut tape, &model.store, &model.synth, gv)?;
        let feats: Vec<Tensor> = feats.iter().map(|&f| tape.value(f).clone()).collect();
        let pose = Tensor::from_vec(vec![rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        // The pose path crosses bilinear kinks and needs a tiny step; the
        // feature path is smooth and a tiny step would only add rounding.
        let consts = feats.clone();
        rows.push(check("synthesis_pose", seed, 1e-7, &[pose.clone()], |t, v| {
            let g: Vec<Var> = consts.iter().map(|f| t.constant(f.clone())).collect();
            let f = lift(synthesis::synthesize(t, &model.store, &model.synth, &model.geom, &[g[0], g[1], g[2]], v[0], 1))?;
            weighted_sum(t, f)
        })?);
        rows.push(check("synthesis_features", seed, 1e-5, &feats, |t, v| {
            let p = t.constant(pose.clone());
            let f = lift(synthesis::synthesize(t, &model.store, &model.synth, &model.geom, &[v[0], v[1], v[2]], p, 1))?;
            weighted_sum(t, f)
        })?);
    }
    Ok(rows)
}
