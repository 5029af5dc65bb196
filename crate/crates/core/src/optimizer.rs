//! Neural pose optimizer and the coarse-to-fine refinement loop.
//!
//! Each level owns two windowed self-attention blocks (the second with its
//! windows shifted by half a window) over the tokens of `F_g2s - F_s`,
//! followed by average pooling and a two-layer head emitting a bounded
//! `(Δθ, Δt_x, Δt_z)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use skyalign_tensor::ops::{self, AttentionParams, KeyPools};
use skyalign_tensor::{Backward, FeatureMap, ParamId, ParamStore, Tape, Tensor, Var};

use crate::config::Config;
use crate::correlation::{self, ProbabilityMap, SearchGeometry};
use crate::error::{Error, Result};
use crate::geometry::{self, wrap_angle, Pose3DoF};
use crate::model::Model;
use crate::synthesis::{self, apply_linear, apply_ln, layer_norm_params, Encoded};

#[derive(Clone, Debug)]
struct SwinBlock {
    ln1: (ParamId, ParamId),
    attn: AttentionParams,
    ln2: (ParamId, ParamId),
    mlp1: (ParamId, ParamId),
    mlp2: (ParamId, ParamId),
    pools: KeyPools,
}

#[derive(Clone, Debug)]
struct OptimizerLevel {
    pos: ParamId,
    blocks: Vec<SwinBlock>,
    fc1: (ParamId, ParamId),
    /// Zero-initialized: the optimizer starts as the identity on poses.
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct OptimizerParams {
    /// Indexed by exponent - 1.
    levels: Vec<OptimizerLevel>,
    /// Output bounds `(radians, meters, meters)`.
    pub max_step: [f64; 3],
}

/// Pools grouping `h x w` tokens into `window`-sized squares whose grid is
/// offset by `shift` (edge windows are truncated, not wrapped).
pub fn window_pools(h: usize, w: usize, window: usize, shift: usize) -> KeyPools {
    let id = |i: usize| (i + shift) / window;
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<u32>> = Default::default();
    for y in 0..h {
        for x in 0..w {
            groups.entry((id(y), id(x))).or_default().push((y * w + x) as u32);
        }
    }
    let mut pools = vec![Vec::new(); h * w];
    for members in groups.values() {
        for &m in members {
            pools[m as usize] = members.clone();
        }
    }
    KeyPools::lists(pools)
}

fn linear_params<R: Rng>(store: &mut ParamStore, name: &str, i: usize, o: usize, zero: bool, rng: &mut R) -> Result<(ParamId, ParamId)> {
    let w = if zero {
        store.add_zeros(format!("{name}.w"), &[i, o])?
    } else {
        store.add_xavier(format!("{name}.w"), &[i, o], i, o, rng)?
    };
    Ok((w, store.add_zeros(format!("{name}.b"), &[o])?))
}

impl OptimizerParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Result<Self> {
        let sat = cfg.satellite()?;
        let mut levels = Vec::new();
        for e in synthesis::EXPONENTS {
            let c = cfg.channels_at(e);
            let s = sat.at_level(e)?;
            let (h, w) = (s.height_s, s.width_s);
            let mut blocks = Vec::new();
            for (b, shift) in [0, cfg.window / 2].into_iter().enumerate() {
                let p = format!("opt.l{e}.b{b}");
                blocks.push(SwinBlock {
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), c)?,
                    attn: AttentionParams::new(store, &format!("{p}.attn"), c, c, c, c, cfg.heads, rng)?,
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), c)?,
                    mlp1: linear_params(store, &format!("{p}.mlp1"), c, 2 * c, false, rng)?,
                    mlp2: linear_params(store, &format!("{p}.mlp2"), 2 * c, c, false, rng)?,
                    pools: window_pools(h, w, cfg.window, shift),
                });
            }
            levels.push(OptimizerLevel {
                pos: store.add_zeros(format!("opt.l{e}.pos"), &[h * w, c])?,
                blocks,
                fc1: linear_params(store, &format!("opt.l{e}.fc1"), c, cfg.optimizer_hidden, false, rng)?,
                fc2: linear_params(store, &format!("opt.l{e}.fc2"), cfg.optimizer_hidden, 3, true, rng)?,
            });
        }
        Ok(Self {
            levels,
            max_step: [cfg.max_step_deg.to_radians(), cfg.max_step_m, cfg.max_step_m],
        })
    }
}

struct WrapTheta;

impl Backward for WrapTheta {
    fn name(&self) -> &'static str {
        "wrap_theta"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> skyalign_tensor::Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone())])
    }
}

/// Re-normalizes θ of a `[3]` pose var into `(-π, π]`; the gradient passes
/// through unchanged.
pub fn wrap_pose(tape: &mut Tape, pose: Var) -> Var {
    let mut v = tape.value(pose).clone();
    v.data_mut()[0] = wrap_angle(v.data()[0]);
    tape.push(v, &[pose], WrapTheta)
}

/// Bounded update `(Δθ rad, Δt_x, Δt_z)` from a feature difference `[C, H, W]`.
pub fn pose_delta(tape: &mut Tape, store: &ParamStore, params: &OptimizerParams, e: usize, diff: Var) -> Result<Var> {
    let lvl = params
        .levels
        .get(e.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("no optimizer for level exponent {e}")))?;
    let x = ops::to_tokens(tape, diff)?;
    let pos = tape.param(store, lvl.pos);
    if tape.value(pos).shape() != tape.value(x).shape() {
        return Err(Error::Invalid(format!(
            "optimizer level {e} expects tokens {:?}, got {:?}",
            tape.value(pos).shape(),
            tape.value(x).shape()
        )));
    }
    let mut x = ops::add(tape, x, pos)?;
    for b in &lvl.blocks {
        let h = apply_ln(tape, store, x, b.ln1)?;
        let h = ops::mha(tape, store, &b.attn, h, h, h, b.pools.clone())?;
        x = ops::add(tape, x, h)?;
        let h = apply_ln(tape, store, x, b.ln2)?;
        let h = apply_linear(tape, store, h, b.mlp1)?;
        let h = ops::relu(tape, h);
        let h = apply_linear(tape, store, h, b.mlp2)?;
        x = ops::add(tape, x, h)?;
    }
    let (n, _) = tape.value(x).matrix()?;
    // Token mean as a [1, n] x [n, c] product.
    let ones = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let pooled = ops::matmul(tape, ones, x)?;
    let h = apply_linear(tape, store, pooled, lvl.fc1)?;
    let h = ops::relu(tape, h);
    let d = apply_linear(tape, store, h, lvl.fc2)?;
    let d = ops::tanh(tape, d);
    let d = ops::reshape(tape, d, &[3])?;
    let bound = tape.constant(Tensor::from_vec(params.max_step.to_vec()));
    Ok(ops::mul(tape, d, bound)?)
}

/// One optimizer update: `pose ⊕ Δ` with θ re-normalized.
pub fn pose_step(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OptimizerParams,
    e: usize,
    f_g2s: Var,
    f_s: Var,
    pose: Var,
) -> Result<Var> {
    let (a, b) = (tape.value(f_g2s).shape().to_vec(), tape.value(f_s).shape().to_vec());
    if a != b {
        return Err(Error::Invalid(format!("feature maps differ: {a:?} vs {b:?}")));
    }
    let diff = ops::sub(tape, f_g2s, f_s)?;
    let d = pose_delta(tape, store, params, e, diff)?;
    let p = ops::add(tape, pose, d)?;
    Ok(wrap_pose(tape, p))
}

/// Levels (exponents, coarse → fine) and iteration count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefineSchedule {
    pub levels: Vec<usize>,
    pub iterations: usize,
}

impl RefineSchedule {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            levels: cfg.level_exponents(),
            iterations: cfg.iterations,
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len() * self.iterations
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pose after one update; `level` counts 1 = coarsest, `iter` from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub iter: usize,
    pub theta_deg: f64,
    pub tx_m: f64,
    pub tz_m: f64,
}

impl TraceEntry {
    pub fn pose(&self) -> Pose3DoF {
        Pose3DoF::from_degrees(self.theta_deg, self.tx_m, self.tz_m)
    }
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in trace {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|t| t.map_err(Error::from)).collect()
}

/// Differentiable location stage of one forward pass.
#[derive(Clone, Debug)]
pub struct LocationPass {
    pub search: SearchGeometry,
    /// `[Hr, Wr]` NCC (divided by the uncertainty when enabled).
    pub prob: Var,
    pub ncc: Var,
}

/// Recorded forward pass of the full pipeline.
#[derive(Clone, Debug)]
pub struct Pass {
    pub encoded: Encoded,
    /// `(level, iter, pose var)` per update.
    pub trace: Vec<(usize, usize, Var)>,
    pub location: Option<LocationPass>,
}

impl Pass {
    pub fn trace_entries(&self, tape: &Tape) -> Result<Vec<TraceEntry>> {
        self.trace
            .iter()
            .map(|&(level, iter, v)| {
                let p = Pose3DoF::from_tensor(tape.value(v))?;
                Ok(TraceEntry {
                    level,
                    iter,
                    theta_deg: p.theta_deg(),
                    tx_m: p.t_x,
                    tz_m: p.t_z,
                })
            })
            .collect()
    }
}

/// Records encoding, the update schedule and (optionally) the correlation
/// stage. Poses are detached between updates; the correlation uses the final
/// rotation, detached, with zero translation.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    ground: &FeatureMap,
    satellite: &FeatureMap,
    prior: &Pose3DoF,
    schedule: &RefineSchedule,
    with_location: bool,
) -> Result<Pass> {
    let store = &model.store;
    let g = synthesis::image_var(tape, ground);
    let s = synthesis::image_var(tape, satellite);
    let enc = synthesis::encode_pair(tape, store, &model.synth, g, s)?;

    let mut pose = *prior;
    let mut trace = Vec::with_capacity(schedule.len());
    for n in 0..schedule.iterations {
        for (li, &e) in schedule.levels.iter().enumerate() {
            let pv = tape.constant(pose.to_tensor());
            let f = synthesis::synthesize(tape, store, &model.synth, &model.geom, &enc.ground, pv, e)?;
            let next = pose_step(tape, store, &model.opt, e, f, enc.satellite[e - 1], pv)?;
            pose = Pose3DoF::from_tensor(tape.value(next))?;
            if !pose.theta().is_finite() || !pose.t_x.is_finite() || !pose.t_z.is_finite() {
                return Err(Error::Numeric(format!("non-finite pose at level {} iteration {}", li + 1, n + 1)));
            }
            trace.push((li + 1, n + 1, next));
        }
    }

    let location = if with_location {
        Some(location_pass(tape, model, &enc, pose.theta(), prior)?)
    } else {
        None
    };
    Ok(Pass {
        encoded: enc,
        trace,
        location,
    })
}

fn location_pass(tape: &mut Tape, model: &Model, enc: &Encoded, theta: f64, prior: &Pose3DoF) -> Result<LocationPass> {
    let cfg = &model.cfg;
    let e = cfg.correlation_level().max(1);
    let search = model.search_geometry(prior)?;
    let pv = tape.constant(Pose3DoF::new(theta, 0.0, 0.0).to_tensor());
    let f = synthesis::synthesize(tape, &model.store, &model.synth, &model.geom, &enc.ground, pv, e)?;
    let t = ops::crop(tape, f, search.c0_v, search.c0_u, search.template_h, search.template_w)?;
    let t = correlation::fill_outside_var(tape, t, template_mask(model, e, theta, &search)?)?;
    let ncc = correlation::ncc_var(tape, enc.satellite[e - 1], t, search.region)?;
    let prob = if cfg.use_uncertainty {
        let r = search.region;
        let u = ops::crop(
            tape,
            enc.uncertainty[e - 1],
            r.v0 + search.template_h / 2,
            r.u0 + search.template_w / 2,
            r.height,
            r.width,
        )?;
        let u = ops::reshape(tape, u, &[r.height, r.width])?;
        ops::div(tape, ncc, u)?
    } else {
        ncc
    };
    Ok(LocationPass { search, prob, ncc })
}

/// Template pixels that the ground camera sees at rotation `theta`.
fn template_mask(model: &Model, e: usize, theta: f64, search: &SearchGeometry) -> Result<Vec<bool>> {
    let (cam, sat) = model.geom.level(e)?;
    let grid = geometry::build_grid_at(&Pose3DoF::new(theta, 0.0, 0.0), &cam, &sat, cam.cam_height);
    let mut mask = Vec::with_capacity(search.template_h * search.template_w);
    for y in 0..search.template_h {
        let row = (search.c0_v + y) * sat.width_s + search.c0_u;
        mask.extend_from_slice(&grid.valid[row..row + search.template_w]);
    }
    Ok(mask)
}

/// Result of one refinement call.
#[derive(Clone, Debug)]
pub struct RefineOutput {
    /// Optimizer rotation with correlation translation.
    pub pose: Pose3DoF,
    pub trace: Vec<TraceEntry>,
    pub prob: ProbabilityMap,
}

/// Estimates the pose of `ground` within `satellite` starting from `prior`.
pub fn refine(
    model: &Model,
    ground: &FeatureMap,
    satellite: &FeatureMap,
    prior: &Pose3DoF,
    schedule: &RefineSchedule,
) -> Result<RefineOutput> {
    let mut tape = Tape::inference();
    let pass = forward(&mut tape, model, ground, satellite, prior, schedule, true)?;
    let trace = pass.trace_entries(&tape)?;
    let loc = pass.location.expect("location requested");
    let r = loc.search.region;
    let values = tape.value(loc.prob).data().to_vec();
    let ncc = tape.value(loc.ncc).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite probability map".into()));
    }
    let mut prob = ProbabilityMap::new(r.height, r.width, ncc, None)?;
    let (i, peak) = correlation::argmax(&values);
    prob.values = values;
    prob.argmax = (i % r.width, i / r.width);
    prob.peak = peak;
    let (u, v) = prob.peak_position(model.cfg.subpixel_peak);
    let (t_x, t_z) = loc.search.translation_at(u, v);
    let theta = trace.last().map(|t| t.theta_deg.to_radians()).unwrap_or(prior.theta());
    Ok(RefineOutput {
        pose: Pose3DoF::new(theta, t_x, t_z),
        trace,
        prob,
    })
}
