//! Overhead ↔ ground pixel correspondence for a level, forward-looking
//! pinhole camera on a flat ground plane.
//!
//! Satellite pixel offsets from the patch center are converted to meters with
//! the ground resolution `alpha` before the translation is added, so a
//! translation of one meter equals a shift of `1/alpha` satellite pixels.
//! Row offsets (`v`) pair with `t_x`, column offsets (`u`) with `t_z`.
//!
//! In the camera frame a satellite point at metric offset
//! `(a, b) = (alpha*(v_s - v_s0) + t_x, alpha*(u_s - u_s0) + t_z)` has
//!
//! ```text
//! x = a cos θ - b sin θ        (image right)
//! z = a sin θ + b cos θ        (depth)
//! u_g = f_x x / z + u_g0
//! v_g = f_y h / z + v_g0
//! ```
//!
//! where `h` is how far the point lies below the optical center. The column
//! `u_g` does not depend on `h`.

use std::f64::consts::PI;

use skyalign_tensor::{Backward, FeatureMap, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Points whose depth is at or below this many meters are invalid.
pub const DEPTH_EPS: f64 = 1e-3;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Shortest signed angular difference `a - b`, in `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Azimuth plus planar translation of the ground camera relative to the
/// satellite patch center. The vertical offset is always zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3DoF {
    theta: f64,
    /// Meters along the satellite `v` (row) direction.
    pub t_x: f64,
    /// Meters along the satellite `u` (column) direction.
    pub t_z: f64,
}

impl Pose3DoF {
    pub fn new(theta: f64, t_x: f64, t_z: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            t_x,
            t_z,
        }
    }

    pub fn from_degrees(theta_deg: f64, t_x: f64, t_z: f64) -> Self {
        Self::new(theta_deg.to_radians(), t_x, t_z)
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Azimuth in radians, counterclockwise positive, in `(-π, π]`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    pub fn set_theta(&mut self, theta: f64) {
        self.theta = wrap_angle(theta);
    }

    /// Additive update, re-normalizing the angle.
    pub fn compose(&self, d_theta: f64, d_tx: f64, d_tz: f64) -> Self {
        Self::new(self.theta + d_theta, self.t_x + d_tx, self.t_z + d_tz)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.theta, self.t_x, self.t_z])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            [th, tx, tz] => Ok(Self::new(*th, *tx, *tz)),
            _ => Err(Error::Invalid(format!("pose tensor needs 3 values, got {:?}", t.shape()))),
        }
    }
}

/// Pinhole intrinsics of the ground camera (full-resolution pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub f_x: f64,
    pub f_y: f64,
    pub u_g0: f64,
    pub v_g0: f64,
    pub width_g: usize,
    pub height_g: usize,
    /// Height of the optical center above the ground plane, meters.
    pub cam_height: f64,
}

impl CameraModel {
    pub fn new(f_x: f64, f_y: f64, u_g0: f64, v_g0: f64, width_g: usize, height_g: usize, cam_height: f64) -> Result<Self> {
        let cam = Self {
            f_x,
            f_y,
            u_g0,
            v_g0,
            width_g,
            height_g,
            cam_height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_x > 0.0 && self.f_y > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got {} {}", self.f_x, self.f_y)));
        }
        if !(self.u_g0 >= 0.0 && self.u_g0 <= self.width_g as f64 && self.v_g0 >= 0.0 && self.v_g0 <= self.height_g as f64) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.u_g0, self.v_g0, self.width_g, self.height_g
            )));
        }
        if !(self.cam_height > 0.0) {
            return Err(Error::Config(format!("camera height must be positive, got {}", self.cam_height)));
        }
        Ok(())
    }

    /// Intrinsics of a feature map downsampled by `2^level`.
    pub fn at_level(&self, level: usize) -> Result<Self> {
        let s = 1usize << level;
        if self.width_g % s != 0 || self.height_g % s != 0 {
            return Err(Error::Config(format!(
                "ground image {}x{} not divisible by 2^{level}",
                self.width_g, self.height_g
            )));
        }
        let sf = s as f64;
        Ok(Self {
            f_x: self.f_x / sf,
            f_y: self.f_y / sf,
            u_g0: self.u_g0 / sf,
            v_g0: self.v_g0 / sf,
            width_g: self.width_g / s,
            height_g: self.height_g / s,
            cam_height: self.cam_height,
        })
    }
}

/// Satellite patch geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SatelliteMeta {
    /// Ground resolution, meters per pixel.
    pub alpha: f64,
    pub u_s0: f64,
    pub v_s0: f64,
    pub width_s: usize,
    pub height_s: usize,
}

impl SatelliteMeta {
    pub fn new(alpha: f64, u_s0: f64, v_s0: f64, width_s: usize, height_s: usize) -> Result<Self> {
        let sat = Self {
            alpha,
            u_s0,
            v_s0,
            width_s,
            height_s,
        };
        sat.validate()?;
        Ok(sat)
    }

    /// Square patch of `size` pixels centered at `size / 2`.
    pub fn centered(alpha: f64, size: usize) -> Result<Self> {
        Self::new(alpha, size as f64 / 2.0, size as f64 / 2.0, size, size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.u_s0 >= 0.0 && self.u_s0 <= self.width_s as f64 && self.v_s0 >= 0.0 && self.v_s0 <= self.height_s as f64) {
            return Err(Error::Config(format!(
                "satellite center ({}, {}) outside {}x{}",
                self.u_s0, self.v_s0, self.width_s, self.height_s
            )));
        }
        Ok(())
    }

    pub fn at_level(&self, level: usize) -> Result<Self> {
        let s = 1usize << level;
        if self.width_s % s != 0 || self.height_s % s != 0 {
            return Err(Error::Config(format!(
                "satellite {}x{} not divisible by 2^{level}",
                self.width_s, self.height_s
            )));
        }
        let sf = s as f64;
        Ok(Self {
            alpha: self.alpha * sf,
            u_s0: self.u_s0 / sf,
            v_s0: self.v_s0 / sf,
            width_s: self.width_s / s,
            height_s: self.height_s / s,
        })
    }

    /// Satellite pixel under the camera for a pose.
    pub fn camera_pixel(&self, pose: &Pose3DoF) -> (f64, f64) {
        (self.u_s0 - pose.t_z / self.alpha, self.v_s0 - pose.t_x / self.alpha)
    }
}

/// Result of projecting one overhead pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u_g: f64,
    pub v_g: f64,
    /// Camera-frame depth, meters.
    pub depth: f64,
    pub valid: bool,
}

/// Camera-frame `(x, z)` in meters of a satellite pixel.
#[inline]
fn camera_xz(pose: &Pose3DoF, sat: &SatelliteMeta, u_s: f64, v_s: f64) -> (f64, f64) {
    let a = sat.alpha * (v_s - sat.v_s0) + pose.t_x;
    let b = sat.alpha * (u_s - sat.u_s0) + pose.t_z;
    let (s, c) = pose.theta.sin_cos();
    (a * c - b * s, a * s + b * c)
}

/// Maps overhead pixel `(u_s, v_s)` to ground pixel `(u_g, v_g)` for a point
/// `h` meters below the optical center. Invalid when the point is not in
/// front of the camera or lands outside the ground image.
pub fn project_pixel(pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta, u_s: f64, v_s: f64, h: f64) -> Projection {
    let (x, z) = camera_xz(pose, sat, u_s, v_s);
    if z <= DEPTH_EPS {
        return Projection {
            u_g: f64::NAN,
            v_g: f64::NAN,
            depth: z,
            valid: false,
        };
    }
    let u_g = cam.f_x * x / z + cam.u_g0;
    let v_g = cam.f_y * h / z + cam.v_g0;
    let inside = u_g >= 0.0 && u_g <= (cam.width_g - 1) as f64 && v_g >= 0.0 && v_g <= (cam.height_g - 1) as f64;
    Projection {
        u_g,
        v_g,
        depth: z,
        valid: inside,
    }
}

/// Per-overhead-pixel ground coordinates, row-major over `(v_s, u_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SamplingGrid {
    #[inline]
    pub fn index(&self, u_s: usize, v_s: usize) -> usize {
        v_s * self.width + u_s
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Packs into a `[3, H, W]` tensor: `u_g`, `v_g`, validity (1/0).
    /// Invalid cells hold `-1` coordinates so the tensor stays finite.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            if self.valid[i] {
                data[i] = self.u[i];
                data[n + i] = self.v[i];
                data[2 * n + i] = 1.0;
            } else {
                data[i] = -1.0;
                data[n + i] = -1.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("grid dims")
    }
}

/// Evaluates [`project_pixel`] over the satellite grid at pyramid `level`
/// (downsampling `2^level`), with the ground-plane convention
/// `h = cam.cam_height`. `cam` and `sat` are full-resolution.
pub fn build_grid(pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta, level: usize) -> Result<SamplingGrid> {
    let cam_l = cam.at_level(level)?;
    let sat_l = sat.at_level(level)?;
    Ok(build_grid_at(pose, &cam_l, &sat_l, cam.cam_height))
}

/// Grid for already level-scaled geometry and an explicit `h`.
pub fn build_grid_at(pose: &Pose3DoF, cam: &CameraModel, sat: &SatelliteMeta, h: f64) -> SamplingGrid {
    let (w, ht) = (sat.width_s, sat.height_s);
    let n = w * ht;
    let mut grid = SamplingGrid {
        width: w,
        height: ht,
        u: vec![0.0; n],
        v: vec![0.0; n],
        valid: vec![false; n],
    };
    for v_s in 0..ht {
        for u_s in 0..w {
            let p = project_pixel(pose, cam, sat, u_s as f64, v_s as f64, h);
            let i = v_s * w + u_s;
            grid.u[i] = p.u_g;
            grid.v[i] = p.v_g;
            grid.valid[i] = p.valid;
        }
    }
    grid
}

struct GridFromPose {
    cam: CameraModel,
    sat: SatelliteMeta,
    h: f64,
}

impl Backward for GridFromPose {
    fn name(&self) -> &'static str {
        "grid_from_pose"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> skyalign_tensor::Result<Vec<Option<Tensor>>> {
        let pose = Pose3DoF::from_tensor(inputs[0]).map_err(|e| skyalign_tensor::TensorError::Internal(e.to_string()))?;
        let (s, c) = pose.theta.sin_cos();
        let (w, ht) = (self.sat.width_s, self.sat.height_s);
        let n = w * ht;
        let valid = &output.data()[2 * n..];
        let (gu, gv) = (&grad.data()[..n], &grad.data()[n..2 * n]);
        let (mut dth, mut dtx, mut dtz) = (0.0, 0.0, 0.0);
        for v_s in 0..ht {
            for u_s in 0..w {
                let i = v_s * w + u_s;
                if valid[i] == 0.0 {
                    continue;
                }
                let (x, z) = camera_xz(&pose, &self.sat, u_s as f64, v_s as f64);
                let dx = gu[i] * self.cam.f_x / z;
                let dz = -gu[i] * self.cam.f_x * x / (z * z) - gv[i] * self.cam.f_y * self.h / (z * z);
                dth += dx * (-z) + dz * x;
                dtx += dx * c + dz * s;
                dtz += -dx * s + dz * c;
            }
        }
        Ok(vec![Some(Tensor::from_vec(vec![dth, dtx, dtz]))])
    }
}

/// Differentiable grid construction: `pose` is a `[3]` var holding
/// `(θ, t_x, t_z)`; the result is a `[3, H, W]` grid (see
/// [`SamplingGrid::to_tensor`]) for level-scaled `cam`/`sat`.
pub fn grid_from_pose(tape: &mut Tape, pose: Var, cam: &CameraModel, sat: &SatelliteMeta, h: f64) -> Result<Var> {
    let p = Pose3DoF::from_tensor(tape.value(pose))?;
    let grid = build_grid_at(&p, cam, sat, h).to_tensor();
    Ok(tape.push(
        grid,
        &[pose],
        GridFromPose {
            cam: *cam,
            sat: *sat,
            h,
        },
    ))
}

/// Bilinear weights of `(u, v)`; neighbours outside the map read as zero.
#[inline]
fn taps(u: f64, v: f64, w: usize, h: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let idx = |x: isize, y: isize| -> Option<usize> {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
    };
    // (index, weight, d weight / du, d weight / dv)
    [
        (idx(x0, y0), (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (idx(x0 + 1, y0), fx * (1.0 - fy), 1.0 - fy, -fx),
        (idx(x0, y0 + 1), (1.0 - fx) * fy, -fy, 1.0 - fx),
        (idx(x0 + 1, y0 + 1), fx * fy, fy, fx),
    ]
}

fn sample_forward(src: &[f64], c: usize, hs: usize, ws: usize, grid: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * n];
    let plane = hs * ws;
    for i in 0..n {
        if grid[2 * n + i] == 0.0 {
            continue;
        }
        let t = taps(grid[i], grid[n + i], ws, hs);
        for ch in 0..c {
            let sp = &src[ch * plane..(ch + 1) * plane];
            let mut acc = 0.0;
            for &(j, wgt, _, _) in &t {
                if let Some(j) = j {
                    acc += wgt * sp[j];
                }
            }
            out[ch * n + i] = acc;
        }
    }
    out
}

struct BilinearSample;

impl Backward for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> skyalign_tensor::Result<Vec<Option<Tensor>>> {
        let (src, grid) = (inputs[0], inputs[1]);
        let (c, hs, ws) = src.chw()?;
        let (_, h, w) = grid.chw()?;
        let n = h * w;
        let plane = hs * ws;
        let (sd, gd, g) = (src.data(), grid.data(), grad.data());
        let mut dsrc = Tensor::zeros(src.shape());
        let mut dgrid = Tensor::zeros(grid.shape());
        {
            let ds = dsrc.data_mut();
            let dg = dgrid.data_mut();
            for i in 0..n {
                if gd[2 * n + i] == 0.0 {
                    continue;
                }
                let t = taps(gd[i], gd[n + i], ws, hs);
                let (mut du, mut dv) = (0.0, 0.0);
                for ch in 0..c {
                    let go = g[ch * n + i];
                    if go == 0.0 {
                        continue;
                    }
                    for &(j, wgt, dwu, dwv) in &t {
                        if let Some(j) = j {
                            ds[ch * plane + j] += go * wgt;
                            let val = sd[ch * plane + j];
                            du += go * dwu * val;
                            dv += go * dwv * val;
                        }
                    }
                }
                dg[i] = du;
                dg[n + i] = dv;
            }
        }
        Ok(vec![Some(dsrc), Some(dgrid)])
    }
}

/// Differentiable bilinear sampling of `src: [C, Hs, Ws]` at `grid: [3, H, W]`
/// → `[C, H, W]`. Invalid cells give zero features.
pub fn bilinear_sample_var(tape: &mut Tape, src: Var, grid: Var) -> Result<Var> {
    let (ts, tg) = (tape.value(src), tape.value(grid));
    let (c, hs, ws) = ts.chw()?;
    let (three, h, w) = tg.chw()?;
    if three != 3 {
        return Err(Error::Invalid(format!("grid must have 3 channels, got {three}")));
    }
    let out = sample_forward(ts.data(), c, hs, ws, tg.data(), h * w);
    let out = Tensor::new(vec![c, h, w], out)?;
    Ok(tape.push(out, &[src, grid], BilinearSample))
}

/// Plain bilinear sampling. The output takes the grid's dimensions and the
/// source level.
pub fn bilinear_sample(src: &FeatureMap, grid: &SamplingGrid) -> FeatureMap {
    let n = grid.width * grid.height;
    let g = grid.to_tensor();
    let data = sample_forward(&src.data, src.channels, src.height, src.width, g.data(), n);
    FeatureMap {
        channels: src.channels,
        height: grid.height,
        width: grid.width,
        data,
        level: src.level,
    }
}
