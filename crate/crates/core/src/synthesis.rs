//! Ground-to-overhead feature synthesis.
//!
//! Both images go through a three-level conv encoder (1/2, 1/4, 1/8). Every
//! level's last channel is a fixed binomial blur-subsample of the image, so
//! raw intensity survives into the features. At the coarsest level the
//! ground features are projected onto the satellite grid through the ground
//! plane, refined by self-attention, and cross-attend into the ground columns
//! each overhead pixel can see. Finer levels are decoded from the coarser
//! result plus their own ground-plane projection.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use skyalign_tensor::ops::{self, AttentionParams, KeyPools};
use skyalign_tensor::{FeatureMap, ParamId, ParamStore, Tape, Tensor, Var};

use crate::config::Config;
use crate::correlation::EPS_U;
use crate::error::{Error, Result};
use crate::geometry::{self, CameraModel, Pose3DoF, SatelliteMeta, DEPTH_EPS};

/// Level exponents, fine to coarse.
pub const EXPONENTS: [usize; 3] = [1, 2, 3];

/// Registers a conv kernel `[co, ci, k, k]` and bias.
fn conv_params<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
    zero: bool,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = if zero {
        store.add_zeros(format!("{name}.w"), &[co, ci, k, k])?
    } else {
        store.add_xavier(format!("{name}.w"), &[co, ci, k, k], ci * k * k, co * k * k, rng)?
    };
    Ok((w, store.add_zeros(format!("{name}.b"), &[co])?))
}

fn linear_params<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = if zero {
        store.add_zeros(format!("{name}.w"), &[fan_in, fan_out])?
    } else {
        store.add_xavier(format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, rng)?
    };
    Ok((w, store.add_zeros(format!("{name}.b"), &[fan_out])?))
}

pub(crate) fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        store.add_full(format!("{name}.g"), &[d], 1.0)?,
        store.add_zeros(format!("{name}.b"), &[d])?,
    ))
}

pub(crate) fn apply_conv(tape: &mut Tape, store: &ParamStore, x: Var, p: (ParamId, ParamId), stride: usize) -> Result<Var> {
    let (w, b) = (tape.param(store, p.0), tape.param(store, p.1));
    let k = store.get(p.0).shape()[2];
    Ok(ops::conv2d(tape, x, w, b, stride, k / 2)?)
}

pub(crate) fn apply_linear(tape: &mut Tape, store: &ParamStore, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (tape.param(store, p.0), tape.param(store, p.1));
    Ok(ops::linear(tape, x, w, Some(b))?)
}

pub(crate) fn apply_ln(tape: &mut Tape, store: &ParamStore, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let (g, b) = (tape.param(store, p.0), tape.param(store, p.1));
    Ok(ops::layer_norm(tape, x, Some((g, b)))?)
}

/// Binomial `[1 2 1]^2 / 16` blur with stride 2, so output pixel `i` sits on
/// input pixel `2i`.
fn blur_down(tape: &mut Tape, x: Var) -> Result<Var> {
    let k = [1.0, 2.0, 1.0];
    let kernel: Vec<f64> = (0..9).map(|i| k[i / 3] * k[i % 3] / 16.0).collect();
    let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], kernel)?);
    let b = tape.constant(Tensor::zeros(&[1]));
    Ok(ops::conv2d(tape, x, w, b, 2, 1)?)
}

/// One encoder level: stride-2 conv + relu, then a conv to `c - 1` learned
/// channels; the pass-through channel is appended.
#[derive(Clone, Debug)]
struct EncoderLevel {
    down: (ParamId, ParamId),
    feat: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    levels: Vec<EncoderLevel>,
}

impl Encoder {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &Config, rng: &mut R) -> Result<Self> {
        let mut levels = Vec::new();
        let mut ci = 1;
        for e in EXPONENTS {
            let c = cfg.channels_at(e);
            levels.push(EncoderLevel {
                down: conv_params(store, &format!("{prefix}.l{e}.down"), ci, c, 3, false, rng)?,
                feat: conv_params(store, &format!("{prefix}.l{e}.feat"), c, c - 1, 3, false, rng)?,
            });
            ci = c;
        }
        Ok(Self { levels })
    }

    /// `[1, H, W]` image → vars at exponents 1, 2, 3.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, img: Var) -> Result<[Var; 3]> {
        let mut x = img;
        let mut raw = img;
        let mut out = Vec::with_capacity(3);
        for lvl in &self.levels {
            let h = apply_conv(tape, store, x, lvl.down, 2)?;
            let h = ops::relu(tape, h);
            let f = apply_conv(tape, store, h, lvl.feat, 1)?;
            raw = blur_down(tape, raw)?;
            x = ops::concat_channels(tape, &[f, raw])?;
            out.push(x);
        }
        Ok([out[0], out[1], out[2]])
    }
}

/// Column-restricted key pools for the coarse cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnPool {
    pub radius: usize,
    /// Ground feature column per overhead pixel; `None` when the pixel is
    /// not in front of the camera or its column falls outside the image.
    pub columns: Vec<Option<usize>>,
    pub ground_height: usize,
    pub ground_width: usize,
}

/// Rounds `u_g` to a column, ties away from the principal column.
pub fn round_column(u_g: f64, u_g0: f64) -> f64 {
    if u_g >= u_g0 {
        (u_g + 0.5).floor()
    } else {
        (u_g - 0.5).ceil()
    }
}

/// Ground column seen by overhead pixel `(u_s, v_s)` at level-scaled geometry.
pub fn column_index(u_s: f64, v_s: f64, pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta) -> Option<usize> {
    let p = geometry::project_pixel(pose, cam, sat, u_s, v_s, cam.cam_height);
    if p.depth <= DEPTH_EPS {
        return None;
    }
    let col = round_column(p.u_g, cam.u_g0);
    (col >= 0.0 && col <= (cam.width_g - 1) as f64).then_some(col as usize)
}

impl ColumnPool {
    pub fn build(pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta, radius: usize) -> Self {
        let mut columns = Vec::with_capacity(sat.width_s * sat.height_s);
        for v in 0..sat.height_s {
            for u in 0..sat.width_s {
                columns.push(column_index(u as f64, v as f64, pose, cam, sat));
            }
        }
        Self {
            radius,
            columns,
            ground_height: cam.height_g,
            ground_width: cam.width_g,
        }
    }

    /// Token indices (row-major `row * W + col`) visible to overhead pixel `i`.
    pub fn pool(&self, i: usize) -> Vec<u32> {
        let Some(c) = self.columns[i] else {
            return Vec::new();
        };
        let lo = c.saturating_sub(self.radius);
        let hi = (c + self.radius).min(self.ground_width - 1);
        let mut out = Vec::with_capacity((hi - lo + 1) * self.ground_height);
        for row in 0..self.ground_height {
            for col in lo..=hi {
                out.push((row * self.ground_width + col) as u32);
            }
        }
        out
    }

    pub fn key_pools(&self) -> KeyPools {
        KeyPools::lists((0..self.columns.len()).map(|i| self.pool(i)).collect())
    }
}

#[derive(Clone, Debug)]
struct CrossView {
    row_emb: ParamId,
    ln: (ParamId, ParamId),
    mhsa: AttentionParams,
    mhca: AttentionParams,
    mlp1: (ParamId, ParamId),
    /// Zero-initialized, so the block starts as the identity on the
    /// ground-plane projection.
    mlp2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    c1: (ParamId, ParamId),
    /// Zero-initialized residual branch.
    c2: (ParamId, ParamId),
}

/// Weights of the whole synthesis path.
#[derive(Clone, Debug)]
pub struct SynthesisParams {
    pub ground: Encoder,
    pub satellite: Encoder,
    /// 1x1 uncertainty heads, one per level (fine → coarse).
    uncertainty: Vec<(ParamId, ParamId)>,
    cross: CrossView,
    /// Decoders for exponents 2 and 1.
    decoders: Vec<DecoderLevel>,
}

impl SynthesisParams {
    pub fn new<R: Rng + Clone>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Result<Self> {
        // Ground and satellite encoders start from the same weights.
        let mut enc_rng = rng.clone();
        let ground = Encoder::new(store, "enc_g", cfg, &mut enc_rng)?;
        let satellite = Encoder::new(store, "enc_s", cfg, rng)?;
        let mut uncertainty = Vec::new();
        for e in EXPONENTS {
            uncertainty.push(conv_params(store, &format!("unc.l{e}"), cfg.channels_at(e), 1, 1, true, rng)?);
        }
        let c3 = cfg.channels_at(3);
        let hg3 = cfg.ground_height / 8;
        let cross = CrossView {
            row_emb: store.add_zeros("cvt.row_emb", &[hg3, c3])?,
            ln: layer_norm_params(store, "cvt.ln", c3)?,
            mhsa: AttentionParams::new(store, "cvt.mhsa", c3, c3, c3, c3, cfg.heads, rng)?,
            mhca: AttentionParams::new(store, "cvt.mhca", c3, c3, c3, c3, cfg.heads, rng)?,
            mlp1: linear_params(store, "cvt.mlp1", c3, c3, false, rng)?,
            mlp2: linear_params(store, "cvt.mlp2", c3, c3, true, rng)?,
        };
        let mut decoders = Vec::new();
        for e in [2, 1] {
            let (c, cp) = (cfg.channels_at(e), cfg.channels_at(e + 1));
            decoders.push(DecoderLevel {
                c1: conv_params(store, &format!("dec.l{e}.c1"), c + cp, c, 3, false, rng)?,
                c2: conv_params(store, &format!("dec.l{e}.c2"), c, c, 3, true, rng)?,
            });
        }
        Ok(Self {
            ground,
            satellite,
            uncertainty,
            cross,
            decoders,
        })
    }
}

/// Geometry shared by every synthesis call of one configuration.
#[derive(Debug)]
pub struct SynthesisGeometry {
    pub cam: CameraModel,
    pub sat: SatelliteMeta,
    pub radius: usize,
    pub heads: usize,
    /// Levels by exponent (index `e`), `None` at 0.
    levels: Vec<Option<(CameraModel, SatelliteMeta)>>,
    /// Row-embedding broadcast matrix `[Hg3 * Wg3, Hg3]`.
    row_select: Tensor,
    pools: Mutex<HashMap<Vec<Option<usize>>, KeyPools>>,
}

impl SynthesisGeometry {
    pub fn new(cfg: &Config) -> Result<Self> {
        let cam = cfg.camera()?;
        let sat = cfg.satellite()?;
        let mut levels = vec![None];
        for e in EXPONENTS {
            levels.push(Some((cam.at_level(e)?, sat.at_level(e)?)));
        }
        let (hg, wg) = (cam.height_g / 8, cam.width_g / 8);
        let mut sel = vec![0.0; hg * wg * hg];
        for r in 0..hg {
            for c in 0..wg {
                sel[(r * wg + c) * hg + r] = 1.0;
            }
        }
        Ok(Self {
            cam,
            sat,
            radius: cfg.radius,
            heads: cfg.heads,
            levels,
            row_select: Tensor::new(vec![hg * wg, hg], sel)?,
            pools: Mutex::new(HashMap::new()),
        })
    }

    pub fn level(&self, e: usize) -> Result<(CameraModel, SatelliteMeta)> {
        self.levels
            .get(e)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Config(format!("no pyramid level with exponent {e}")))
    }

    /// Cached key pools for a pose's column assignment.
    fn key_pools(&self, pose: &Pose3DoF) -> Result<KeyPools> {
        let (cam, sat) = self.level(3)?;
        let pool = ColumnPool::build(pose, &cam, &sat, self.radius);
        let mut cache = self.pools.lock().expect("pool cache");
        if cache.len() > 256 {
            cache.clear();
        }
        Ok(cache
            .entry(pool.columns.clone())
            .or_insert_with(|| pool.key_pools())
            .clone())
    }
}

/// Encoded pyramids of one ground/satellite pair.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Ground features at exponents 1, 2, 3.
    pub ground: [Var; 3],
    pub satellite: [Var; 3],
    /// `[1, H, W]` uncertainty at exponents 1, 2, 3.
    pub uncertainty: [Var; 3],
}

pub fn encode_ground(tape: &mut Tape, store: &ParamStore, p: &SynthesisParams, img: Var) -> Result<[Var; 3]> {
    p.ground.forward(tape, store, img)
}

/// Satellite pyramid plus uncertainty maps in `[EPS_U, 1 - EPS_U]`.
pub fn encode_satellite(tape: &mut Tape, store: &ParamStore, p: &SynthesisParams, img: Var) -> Result<([Var; 3], [Var; 3])> {
    let feats = p.satellite.forward(tape, store, img)?;
    let mut unc = Vec::with_capacity(3);
    for (i, &f) in feats.iter().enumerate() {
        let u = apply_conv(tape, store, f, p.uncertainty[i], 1)?;
        let u = ops::sigmoid(tape, u);
        unc.push(ops::clamp(tape, u, EPS_U, 1.0 - EPS_U));
    }
    Ok((feats, [unc[0], unc[1], unc[2]]))
}

pub fn encode_pair(tape: &mut Tape, store: &ParamStore, p: &SynthesisParams, ground: Var, satellite: Var) -> Result<Encoded> {
    let g = encode_ground(tape, store, p, ground)?;
    let (s, u) = encode_satellite(tape, store, p, satellite)?;
    Ok(Encoded {
        ground: g,
        satellite: s,
        uncertainty: u,
    })
}

/// Ground-plane projection of `f_g` onto the satellite grid at exponent `e`
/// (0 = full resolution); differentiable in features and pose.
pub fn gp_project(tape: &mut Tape, geom: &SynthesisGeometry, f_g: Var, pose: Var, e: usize) -> Result<Var> {
    let (cam, sat) = if e == 0 { (geom.cam, geom.sat) } else { geom.level(e)? };
    let grid = geometry::grid_from_pose(tape, pose, &cam, &sat, geom.cam.cam_height)?;
    geometry::bilinear_sample_var(tape, f_g, grid)
}

/// Coarse-level synthesis: self-attention on the projected map, then
/// column-restricted cross-attention into the ground tokens, added back
/// through a zero-initialized MLP.
pub fn cross_view_transform(
    tape: &mut Tape,
    store: &ParamStore,
    p: &SynthesisParams,
    geom: &SynthesisGeometry,
    f_g: Var,
    pose: Var,
) -> Result<Var> {
    let (_, sat3) = geom.level(3)?;
    let f_gp = gp_project(tape, geom, f_g, pose, 3)?;
    let x = ops::to_tokens(tape, f_gp)?;
    let cv = &p.cross;

    let xn = apply_ln(tape, store, x, cv.ln)?;
    let sa = ops::mha(tape, store, &cv.mhsa, xn, xn, xn, KeyPools::Full)?;
    let q = ops::add(tape, x, sa)?;

    let g = ops::to_tokens(tape, f_g)?;
    let sel = tape.constant(geom.row_select.clone());
    let emb = tape.param(store, cv.row_emb);
    let emb = ops::matmul(tape, sel, emb)?;
    let g = ops::add(tape, g, emb)?;

    let pose_val = Pose3DoF::from_tensor(tape.value(pose))?;
    let pools = geom.key_pools(&pose_val)?;
    let ca = ops::mha(tape, store, &cv.mhca, q, g, g, pools)?;
    let m = apply_linear(tape, store, ca, cv.mlp1)?;
    let m = ops::relu(tape, m);
    let m = apply_linear(tape, store, m, cv.mlp2)?;
    let out = ops::add(tape, x, m)?;
    Ok(ops::from_tokens(tape, out, sat3.height_s, sat3.width_s)?)
}

/// Synthesized overhead features at exponent `target` (1..=3) for `pose`.
pub fn synthesize(
    tape: &mut Tape,
    store: &ParamStore,
    p: &SynthesisParams,
    geom: &SynthesisGeometry,
    ground: &[Var; 3],
    pose: Var,
    target: usize,
) -> Result<Var> {
    if !(1..=3).contains(&target) {
        return Err(Error::Config(format!("synthesis level exponent {target} outside 1..=3")));
    }
    let mut f = cross_view_transform(tape, store, p, geom, ground[2], pose)?;
    for e in (target..3).rev() {
        let dec = &p.decoders[2 - e];
        let gp = gp_project(tape, geom, ground[e - 1], pose, e)?;
        let up = ops::upsample2x(tape, f)?;
        let cat = ops::concat_channels(tape, &[up, gp])?;
        let h = apply_conv(tape, store, cat, dec.c1, 1)?;
        let h = ops::relu(tape, h);
        let r = apply_conv(tape, store, h, dec.c2, 1)?;
        f = ops::add(tape, gp, r)?;
    }
    Ok(f)
}

/// Image as a `[1, H, W]` constant.
pub fn image_var(tape: &mut Tape, img: &FeatureMap) -> Var {
    tape.constant(img.to_tensor())
}

/// Ground-plane projection of raw pixels at full resolution.
pub fn gp_project_image(img: &FeatureMap, pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta) -> FeatureMap {
    let grid = geometry::build_grid_at(pose, cam, sat, cam.cam_height);
    geometry::bilinear_sample(img, &grid)
}
