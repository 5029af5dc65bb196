//! Dense translation search by normalized cross-correlation, divided by a
//! satellite uncertainty map.
//!
//! A correlation position `(pu, pv)` places the template's top-left corner at
//! satellite pixel `(pu, pv)`. Each channel is centered on its own mean; the
//! norms are joint over all channels. Windows (or templates) with no
//! variance score 0.

use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use skyalign_tensor::{Backward, FeatureMap, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::SatelliteMeta;
use crate::imageio;

/// Lower clamp of the uncertainty map (upper is `1 - EPS_U`).
pub const EPS_U: f64 = 1e-3;

/// Relative variance below which a window counts as flat.
const FLAT: f64 = 1e-10;

/// Rectangle of correlation positions, inclusive start, exclusive end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    /// All positions where the template fits inside the search map.
    pub fn full(map: (usize, usize), template: (usize, usize)) -> Result<Self> {
        let ((mh, mw), (th, tw)) = (map, template);
        if th > mh || tw > mw || th == 0 || tw == 0 {
            return Err(Error::Invalid(format!(
                "template {th}x{tw} does not fit search map {mh}x{mw}"
            )));
        }
        Ok(Self {
            u0: 0,
            v0: 0,
            width: mw - tw + 1,
            height: mh - th + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-pixel uncertainty in `[EPS_U, 1 - EPS_U]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl UncertaintyMap {
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_map(map: &FeatureMap) -> Result<Self> {
        if map.channels != 1 {
            return Err(Error::Invalid(format!("uncertainty needs 1 channel, got {}", map.channels)));
        }
        Ok(Self {
            height: map.height,
            width: map.width,
            data: map.data.iter().map(|v| v.clamp(EPS_U, 1.0 - EPS_U)).collect(),
        })
    }

    /// Values at the camera pixel of each position in `region`: the template
    /// center at that position.
    pub fn at_positions(&self, region: &Region, template: (usize, usize)) -> Result<Self> {
        let (cv, cu) = (template.0 / 2, template.1 / 2);
        if region.v0 + region.height + cv > self.height + 1 || region.u0 + region.width + cu > self.width + 1 {
            return Err(Error::Invalid("region exceeds uncertainty map".into()));
        }
        let mut data = Vec::with_capacity(region.len());
        for v in 0..region.height {
            for u in 0..region.width {
                data.push(self.data[(region.v0 + v + cv) * self.width + region.u0 + u + cu]);
            }
        }
        Ok(Self {
            height: region.height,
            width: region.width,
            data,
        })
    }
}

fn check_channels(map: &FeatureMap, template: &FeatureMap) -> Result<()> {
    if map.channels != template.channels {
        return Err(Error::Invalid(format!(
            "channel mismatch: map {} vs template {}",
            map.channels, template.channels
        )));
    }
    Ok(())
}

/// Subtracts each channel's mean from `data` (`c` equal planes).
fn center_channels(data: &mut [f64], c: usize) {
    let plane = data.len() / c.max(1);
    for ch in data.chunks_mut(plane.max(1)) {
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        for v in ch {
            *v -= mean;
        }
    }
}

/// Per-channel centered template and its joint norm.
fn center(template: &FeatureMap) -> (Vec<f64>, f64) {
    let mut tc = template.data.clone();
    center_channels(&mut tc, template.channels);
    let norm = tc.iter().map(|v| v * v).sum::<f64>().sqrt();
    (tc, norm)
}

/// `var` is the summed per-channel window variance (times the pixel count),
/// `sum_sq` the raw second moment used to detect flat windows.
#[inline]
fn finish(cross: f64, var: f64, sum_sq: f64, t_norm: f64, t_sq: f64) -> f64 {
    if var <= FLAT * sum_sq.max(1e-300) || t_norm * t_norm <= FLAT * t_sq.max(1e-300) || var <= 0.0 {
        return 0.0;
    }
    (cross / (var.sqrt() * t_norm)).clamp(-1.0, 1.0)
}

/// Correlation at one position by explicit summation.
fn ncc_at(map: &FeatureMap, tc: &[f64], t_norm: f64, t_sq: f64, th: usize, tw: usize, pu: usize, pv: usize) -> f64 {
    let (plane, tplane) = (map.height * map.width, th * tw);
    let (mut cross, mut var, mut total_sq) = (0.0, 0.0, 0.0);
    for c in 0..map.channels {
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for y in 0..th {
            let row = c * plane + (pv + y) * map.width + pu;
            let f = &map.data[row..row + tw];
            let t = &tc[c * tplane + y * tw..c * tplane + (y + 1) * tw];
            for x in 0..tw {
                cross += f[x] * t[x];
                sum += f[x];
                sum_sq += f[x] * f[x];
            }
        }
        var += sum_sq - sum * sum / tplane as f64;
        total_sq += sum_sq;
    }
    finish(cross, var, total_sq, t_norm, t_sq)
}

/// Direct NCC over `region`, single-threaded.
pub fn ncc_direct_region(map: &FeatureMap, template: &FeatureMap, region: &Region) -> Result<Vec<f64>> {
    check_channels(map, template)?;
    let (tc, t_norm) = center(template);
    let t_sq = template.data.iter().map(|v| v * v).sum::<f64>();
    let mut out = Vec::with_capacity(region.len());
    for v in 0..region.height {
        for u in 0..region.width {
            out.push(ncc_at(map, &tc, t_norm, t_sq, template.height, template.width, region.u0 + u, region.v0 + v));
        }
    }
    Ok(out)
}

/// Direct NCC over every valid position.
pub fn ncc_direct(map: &FeatureMap, template: &FeatureMap) -> Result<Vec<f64>> {
    let region = Region::full((map.height, map.width), (template.height, template.width))?;
    ncc_direct_region(map, template, &region)
}

/// Direct NCC with rows of positions spread over the rayon pool. Every
/// position is summed in the same order as [`ncc_direct`], so results are
/// bitwise identical.
pub fn ncc_direct_par(map: &FeatureMap, template: &FeatureMap) -> Result<Vec<f64>> {
    check_channels(map, template)?;
    let region = Region::full((map.height, map.width), (template.height, template.width))?;
    let (tc, t_norm) = center(template);
    let t_sq = template.data.iter().map(|v| v * v).sum::<f64>();
    let rows: Vec<Vec<f64>> = (0..region.height)
        .into_par_iter()
        .map(|v| {
            (0..region.width)
                .map(|u| ncc_at(map, &tc, t_norm, t_sq, template.height, template.width, u, v))
                .collect()
        })
        .collect();
    Ok(rows.concat())
}

/// Summed-area table with a zero first row and column.
fn integral(plane: &[f64], h: usize, w: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(plane[y * w + x]);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

#[inline]
fn box_sum(s: &[f64], w: usize, y: usize, x: usize, bh: usize, bw: usize) -> f64 {
    let ws = w + 1;
    s[(y + bh) * ws + x + bw] - s[y * ws + x + bw] - s[(y + bh) * ws + x] + s[y * ws + x]
}

fn fft2(planner: &mut FftPlanner<f64>, buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(buf);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// NCC over every valid position with FFT cross terms and integral-image
/// window statistics.
pub fn ncc_fft(map: &FeatureMap, template: &FeatureMap) -> Result<Vec<f64>> {
    check_channels(map, template)?;
    let region = Region::full((map.height, map.width), (template.height, template.width))?;
    let (h, w) = (map.height, map.width);
    let (th, tw) = (template.height, template.width);
    let (tc, t_norm) = center(template);
    let t_sq = template.data.iter().map(|v| v * v).sum::<f64>();

    let mut planner = FftPlanner::new();
    let mut acc = vec![Complex::new(0.0, 0.0); h * w];
    let mut vars = vec![0.0; region.len()];
    let mut sums_sq = vec![0.0; region.len()];
    let tn = (th * tw) as f64;
    for c in 0..map.channels {
        let plane = map.plane(c);
        let mut fm: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut ft = vec![Complex::new(0.0, 0.0); h * w];
        for y in 0..th {
            for x in 0..tw {
                ft[y * w + x].re = tc[c * th * tw + y * tw + x];
            }
        }
        fft2(&mut planner, &mut fm, h, w, false);
        fft2(&mut planner, &mut ft, h, w, false);
        for (a, (m, t)) in acc.iter_mut().zip(fm.iter().zip(ft.iter())) {
            *a += m * t.conj();
        }

        let s1 = integral(plane, h, w, |v| v);
        let s2 = integral(plane, h, w, |v| v * v);
        for v in 0..region.height {
            for u in 0..region.width {
                let (a, b) = (box_sum(&s1, w, v, u, th, tw), box_sum(&s2, w, v, u, th, tw));
                vars[v * region.width + u] += b - a * a / tn;
                sums_sq[v * region.width + u] += b;
            }
        }
    }
    fft2(&mut planner, &mut acc, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(region.len());
    for v in 0..region.height {
        for u in 0..region.width {
            let i = v * region.width + u;
            out.push(finish(acc[v * w + u].re * scale, vars[i], sums_sq[i], t_norm, t_sq));
        }
    }
    Ok(out)
}

struct NccOp {
    template_shape: (usize, usize, usize),
    region: Region,
}

impl Backward for NccOp {
    fn name(&self) -> &'static str {
        "ncc"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> skyalign_tensor::Result<Vec<Option<Tensor>>> {
        let (map, tmpl) = (inputs[0], inputs[1]);
        let (c, h, w) = map.chw()?;
        let (_, th, tw) = self.template_shape;
        let (md, td, g, out) = (map.data(), tmpl.data(), grad.data(), output.data());
        let mut tc = td.to_vec();
        center_channels(&mut tc, c);
        let t_norm = tc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (plane, tplane) = (h * w, th * tw);

        let mut dmap = vec![0.0; md.len()];
        // Accumulated against the (uncentered) window; centered at the end.
        let mut dt = vec![0.0; td.len()];
        let mut win = vec![0.0; td.len()];
        for v in 0..self.region.height {
            for u in 0..self.region.width {
                let i = v * self.region.width + u;
                if g[i] == 0.0 || out[i] == 0.0 {
                    continue;
                }
                let (pu, pv) = (self.region.u0 + u, self.region.v0 + v);
                for ch in 0..c {
                    for y in 0..th {
                        let row = ch * plane + (pv + y) * w + pu;
                        win[ch * tplane + y * tw..ch * tplane + (y + 1) * tw].copy_from_slice(&md[row..row + tw]);
                    }
                }
                center_channels(&mut win, c);
                let f_norm = win.iter().map(|f| f * f).sum::<f64>().sqrt();
                let r = out[i];
                let k = g[i] / (f_norm * t_norm);
                for ch in 0..c {
                    for y in 0..th {
                        let row = ch * plane + (pv + y) * w + pu;
                        for x in 0..tw {
                            let j = ch * tplane + y * tw + x;
                            let fc = win[j];
                            dmap[row + x] += k * tc[j] - g[i] * r * fc / (f_norm * f_norm);
                            dt[j] += k * fc - g[i] * r * tc[j] / (t_norm * t_norm);
                        }
                    }
                }
            }
        }
        center_channels(&mut dt, c);
        Ok(vec![
            Some(Tensor::new(map.shape().to_vec(), dmap)?),
            Some(Tensor::new(tmpl.shape().to_vec(), dt)?),
        ])
    }
}

/// Differentiable NCC of `map: [C, H, W]` against `template: [C, h, w]` over
/// `region`; result `[region.height, region.width]`.
pub fn ncc_var(tape: &mut Tape, map: Var, template: Var, region: Region) -> Result<Var> {
    let m = FeatureMap::from_tensor(tape.value(map), 0)?;
    let t = FeatureMap::from_tensor(tape.value(template), 0)?;
    if region.u0 + region.width + t.width > m.width + 1 || region.v0 + region.height + t.height > m.height + 1 {
        return Err(Error::Invalid("correlation region exceeds map".into()));
    }
    let out = ncc_direct_region(&m, &t, &region)?;
    let out = Tensor::new(vec![region.height, region.width], out)?;
    Ok(tape.push(
        out,
        &[map, template],
        NccOp {
            template_shape: (t.channels, t.height, t.width),
            region,
        },
    ))
}

/// Replaces, per channel, the entries outside `mask` (one flag per pixel)
/// with the channel's mean inside it. Filled pixels then add nothing to the
/// correlation numerator or the template norm.
pub fn fill_outside(values: &mut [f64], mask: &[bool]) {
    for ch in values.chunks_mut(mask.len().max(1)) {
        let (sum, n) = ch
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        for (v, m) in ch.iter_mut().zip(mask) {
            if !m {
                *v = mean;
            }
        }
    }
}

struct FillOutside {
    mask: Vec<bool>,
}

impl Backward for FillOutside {
    fn name(&self) -> &'static str {
        "fill_outside"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> skyalign_tensor::Result<Vec<Option<Tensor>>> {
        let inside = self.mask.iter().filter(|m| **m).count();
        let mut d = Vec::with_capacity(grad.len());
        for ch in grad.data().chunks(self.mask.len().max(1)) {
            let outside: f64 = ch.iter().zip(&self.mask).filter(|(_, m)| !**m).map(|(g, _)| g).sum();
            let share = if inside == 0 { 0.0 } else { outside / inside as f64 };
            d.extend(ch.iter().zip(&self.mask).map(|(g, m)| if *m { g + share } else { 0.0 }));
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

/// Differentiable [`fill_outside`] on a `[C, H, W]` variable.
pub fn fill_outside_var(tape: &mut Tape, x: Var, mask: Vec<bool>) -> Result<Var> {
    let t = tape.value(x);
    let (_, h, w) = t.chw()?;
    if mask.len() != h * w {
        return Err(Error::Invalid(format!("mask of {} pixels for a {h}x{w} map", mask.len())));
    }
    let mut data = t.data().to_vec();
    fill_outside(&mut data, &mask);
    let out = Tensor::new(t.shape().to_vec(), data)?;
    Ok(tape.push(out, &[x], FillOutside { mask }))
}

/// Template placement and search window at one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchGeometry {
    pub alpha: f64,
    /// Template side, pixels.
    pub template_h: usize,
    pub template_w: usize,
    /// Template top-left in the satellite map at zero offset.
    pub c0_u: usize,
    pub c0_v: usize,
    pub region: Region,
}

impl SearchGeometry {
    /// Template of `template_m` meters around the patch center, searched over
    /// a `search_m` square centered on `prior_offset_px` (pixel offset of the
    /// prior camera location from the center).
    pub fn new(sat: &SatelliteMeta, template_m: f64, search_m: f64, prior_offset_px: (isize, isize)) -> Result<Self> {
        let side = |extent: usize| -> usize {
            let s = 2 * ((template_m / sat.alpha / 2.0).round() as usize);
            s.clamp(2, extent - extent % 2)
        };
        let (tw, th) = (side(sat.width_s), side(sat.height_s));
        let c0_u = sat.u_s0 - (tw / 2) as f64;
        let c0_v = sat.v_s0 - (th / 2) as f64;
        if c0_u < 0.0 || c0_v < 0.0 || c0_u.fract() != 0.0 || c0_v.fract() != 0.0 {
            return Err(Error::Config(format!(
                "template {tw}x{th} cannot be centered on ({}, {})",
                sat.u_s0, sat.v_s0
            )));
        }
        let (c0_u, c0_v) = (c0_u as usize, c0_v as usize);
        let r = (search_m / 2.0 / sat.alpha).floor() as isize;
        let clip = |c0: usize, off: isize, max_pos: usize| -> (usize, usize) {
            let lo = (c0 as isize + off - r).max(0) as usize;
            let hi = ((c0 as isize + off + r).max(-1) as usize).min(max_pos);
            (lo, hi)
        };
        let (u_lo, u_hi) = clip(c0_u, prior_offset_px.0, sat.width_s - tw);
        let (v_lo, v_hi) = clip(c0_v, prior_offset_px.1, sat.height_s - th);
        if u_lo > u_hi || v_lo > v_hi {
            return Err(Error::Config("search window lies outside the satellite map".into()));
        }
        Ok(Self {
            alpha: sat.alpha,
            template_h: th,
            template_w: tw,
            c0_u,
            c0_v,
            region: Region {
                u0: u_lo,
                v0: v_lo,
                width: u_hi - u_lo + 1,
                height: v_hi - v_lo + 1,
            },
        })
    }

    /// Pixel offset of position `(u, v)` in the region from the zero offset.
    pub fn offset(&self, u: usize, v: usize) -> (isize, isize) {
        (
            (self.region.u0 + u) as isize - self.c0_u as isize,
            (self.region.v0 + v) as isize - self.c0_v as isize,
        )
    }

    /// Translation `(t_x, t_z)` implied by a position. A map synthesized at
    /// zero translation equals the satellite map shifted by `-t / alpha`.
    pub fn translation(&self, u: usize, v: usize) -> (f64, f64) {
        self.translation_at(u as f64, v as f64)
    }

    /// Translation at a fractional region position.
    pub fn translation_at(&self, u: f64, v: f64) -> (f64, f64) {
        let du = self.region.u0 as f64 + u - self.c0_u as f64;
        let dv = self.region.v0 as f64 + v - self.c0_v as f64;
        (-self.alpha * dv, -self.alpha * du)
    }

    /// Region position matching a translation, if inside the window.
    pub fn position_of(&self, t_x: f64, t_z: f64) -> Option<(usize, usize)> {
        let u = self.c0_u as isize + (-t_z / self.alpha).round() as isize - self.region.u0 as isize;
        let v = self.c0_v as isize + (-t_x / self.alpha).round() as isize - self.region.v0 as isize;
        (u >= 0 && v >= 0 && (u as usize) < self.region.width && (v as usize) < self.region.height)
            .then(|| (u as usize, v as usize))
    }
}

/// Location likelihood over a search region.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    /// NCC divided by uncertainty.
    pub values: Vec<f64>,
    pub ncc: Vec<f64>,
    /// `(u, v)` of the maximum.
    pub argmax: (usize, usize),
    pub peak: f64,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, ncc: Vec<f64>, u: Option<&UncertaintyMap>) -> Result<Self> {
        if ncc.len() != height * width {
            return Err(Error::Invalid("ncc length does not match map".into()));
        }
        let values = match u {
            Some(u) => {
                if (u.height, u.width) != (height, width) {
                    return Err(Error::Invalid(format!(
                        "uncertainty {}x{} does not match positions {height}x{width}",
                        u.height, u.width
                    )));
                }
                ncc.iter().zip(&u.data).map(|(n, u)| n / u).collect()
            }
            None => ncc.clone(),
        };
        let (i, peak) = argmax(&values);
        Ok(Self {
            height,
            width,
            values,
            ncc,
            argmax: (i % width, i / width),
            peak,
        })
    }

    /// Maximum refined per axis by a parabola through it and its two
    /// neighbours; stays on the integer position at the region border or
    /// when the neighbourhood is not concave.
    pub fn subpixel_peak(&self) -> (f64, f64) {
        let (u, v) = self.argmax;
        let at = |u: usize, v: usize| self.values[v * self.width + u];
        let fit = |l: f64, c: f64, r: f64| {
            let den = l - 2.0 * c + r;
            if den < 0.0 {
                (0.5 * (l - r) / den).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let du = if u > 0 && u + 1 < self.width {
            fit(at(u - 1, v), at(u, v), at(u + 1, v))
        } else {
            0.0
        };
        let dv = if v > 0 && v + 1 < self.height {
            fit(at(u, v - 1), at(u, v), at(u, v + 1))
        } else {
            0.0
        };
        (u as f64 + du, v as f64 + dv)
    }

    /// Integer maximum, or its sub-pixel refinement.
    pub fn peak_position(&self, subpixel: bool) -> (f64, f64) {
        if subpixel {
            self.subpixel_peak()
        } else {
            (self.argmax.0 as f64, self.argmax.1 as f64)
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("map dims")
    }
}

/// First maximum in row-major order, so ties go to the smallest `(v, u)`.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Centered template crop of a synthesized map.
pub fn template_of(synth: &FeatureMap, geom: &SearchGeometry) -> FeatureMap {
    let mut data = Vec::with_capacity(synth.channels * geom.template_h * geom.template_w);
    for c in 0..synth.channels {
        for y in 0..geom.template_h {
            let row = c * synth.height * synth.width + (geom.c0_v + y) * synth.width + geom.c0_u;
            data.extend_from_slice(&synth.data[row..row + geom.template_w]);
        }
    }
    FeatureMap {
        channels: synth.channels,
        height: geom.template_h,
        width: geom.template_w,
        data,
        level: synth.level,
    }
}

/// Correlates the template of `synth` (synthesized at zero translation) with
/// `sat` inside the search window, divides by `u` (satellite-sized, optional)
/// and returns the map with the translation at its maximum, refined to
/// sub-pixel precision when `subpixel` is set.
pub fn locate(
    sat: &FeatureMap,
    synth: &FeatureMap,
    u: Option<&UncertaintyMap>,
    geom: &SearchGeometry,
    subpixel: bool,
) -> Result<(ProbabilityMap, (f64, f64))> {
    let template = template_of(synth, geom);
    let ncc = ncc_direct_region(sat, &template, &geom.region)?;
    let u_pos = match u {
        Some(u) => Some(u.at_positions(&geom.region, (geom.template_h, geom.template_w))?),
        None => None,
    };
    let p = ProbabilityMap::new(geom.region.height, geom.region.width, ncc, u_pos.as_ref())?;
    let (u, v) = p.peak_position(subpixel);
    Ok((p, geom.translation_at(u, v)))
}

/// Writes a min-max normalized heatmap (PGM, or PNG by extension).
pub fn emit_heatmap(p: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    imageio::write_gray(path, p.width, p.height, &imageio::normalize_to_bytes(&p.values))
}
