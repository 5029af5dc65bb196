//! Spatial ops on `[C, H, W]` feature maps.

use crate::error::{invalid, shape_mismatch, Result};
use crate::gemm::gemm;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox*stride + kx - pad` lands inside `[0, w)`.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        axis_range(kx, self.pad, self.stride, self.w, self.wo)
    }

    #[inline]
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        axis_range(ky, self.pad, self.stride, self.h, self.ho)
    }
}

#[inline]
fn axis_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` into `[ci * k * k, ho * wo]` patch columns (zero padded).
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut col = vec![0.0; g.ci * g.k * g.k * p];
    for ci in 0..g.ci {
        let xplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.oy_range(ky);
            for kx in 0..g.k {
                let (ox0, ox1) = g.ox_range(kx);
                let r = (ci * g.k + ky) * g.k + kx;
                let crow = &mut col[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let base = (oy * g.stride + ky - g.pad) * g.w + kx;
                    let dst = &mut crow[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        dst[ox0..ox1].copy_from_slice(&xplane[base + ox0 - g.pad..base + ox1 - g.pad]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = xplane[base + ox * g.stride - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates patch columns back into `[ci, h, w]`.
fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    for ci in 0..g.ci {
        let dplane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.oy_range(ky);
            for kx in 0..g.k {
                let (ox0, ox1) = g.ox_range(kx);
                let r = (ci * g.k + ky) * g.k + kx;
                let crow = &col[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let base = (oy * g.stride + ky - g.pad) * g.w + kx;
                    let src = &crow[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        for (d, &v) in dplane[base + ox0 - g.pad..base + ox1 - g.pad].iter_mut().zip(&src[ox0..ox1]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dplane[base + ox * g.stride - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    g: ConvGeom,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = self.g;
        let (p, r) = (g.ho * g.wo, g.ci * g.k * g.k);
        let gd = grad.data();
        let col = im2col(inputs[0].data(), &g);
        // dw = grad * col^T
        let mut dw = Tensor::zeros(inputs[1].shape());
        gemm(g.co, p, r, gd, (p, 1), &col, (1, p), 0.0, dw.data_mut(), (r, 1));
        // dcol = w^T * grad
        let mut dcol = col;
        gemm(r, g.co, p, inputs[1].data(), (1, r), gd, (p, 1), 0.0, &mut dcol, (p, 1));
        let mut dx = Tensor::zeros(inputs[0].shape());
        col2im(&dcol, &g, dx.data_mut());
        let db: Vec<f64> = gd.chunks(p).map(|c| c.iter().sum()).collect();
        Ok(vec![Some(dx), Some(dw), Some(Tensor::new(vec![g.co], db)?)])
    }
}

/// 2-D cross-correlation with zero padding.
/// `x: [Ci, H, W]`, `kernel: [Co, Ci, k, k]`, `bias: [Co]`.
pub fn conv2d(tape: &mut Tape, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
    let (tx, tk, tb) = (tape.value(x), tape.value(kernel), tape.value(bias));
    let (ci, h, w) = tx.chw()?;
    let &[co, ci2, k, k2] = tk.shape() else {
        return Err(invalid("conv2d", format!("kernel must be rank 4, got {:?}", tk.shape())));
    };
    if ci != ci2 || k != k2 {
        return Err(shape_mismatch("conv2d", tx.shape(), tk.shape()));
    }
    if tb.shape() != [co] {
        return Err(shape_mismatch("conv2d bias", tk.shape(), tb.shape()));
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(invalid("conv2d", format!("kernel {k} stride {stride} does not fit {h}x{w} with pad {pad}")));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let g = ConvGeom { ci, h, w, co, k, stride, pad, ho, wo };

    let p = ho * wo;
    let col = im2col(tx.data(), &g);
    let mut out = vec![0.0; co * p];
    for (plane, &b) in out.chunks_mut(p).zip(tb.data()) {
        plane.fill(b);
    }
    gemm(co, ci * k * k, p, tk.data(), (ci * k * k, 1), &col, (p, 1), 1.0, &mut out, (p, 1));
    let out = Tensor::new(vec![co, ho, wo], out)?;
    Ok(tape.push(out, &[x, kernel, bias], Conv2d { g }))
}

struct Upsample2x;

impl Backward for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (c, h, w) = inputs[0].chw()?;
        let mut dx = Tensor::zeros(inputs[0].shape());
        let (h2, w2) = (2 * h, 2 * w);
        let gd = grad.data();
        let dxd = dx.data_mut();
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    dxd[(ch * h + y / 2) * w + x / 2] += gd[(ch * h2 + y) * w2 + x];
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(tape: &mut Tape, x: Var) -> Result<Var> {
    let tx = tape.value(x);
    let (c, h, w) = tx.chw()?;
    let (h2, w2) = (2 * h, 2 * w);
    let xd = tx.data();
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(ch * h2 + y) * w2 + x] = xd[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    let out = Tensor::new(vec![c, h2, w2], out)?;
    Ok(tape.push(out, &[x], Upsample2x))
}

struct GlobalAvgPool;

impl Backward for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (c, h, w) = inputs[0].chw()?;
        let n = (h * w) as f64;
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (ch, plane) in dx.data_mut().chunks_mut(h * w).enumerate().take(c) {
            plane.fill(grad.data()[ch] / n);
        }
        Ok(vec![Some(dx)])
    }
}

/// Per-channel spatial mean: `[C, H, W]` → `[C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let tx = tape.value(x);
    let (_, h, w) = tx.chw()?;
    let n = (h * w) as f64;
    let out: Vec<f64> = tx.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    Ok(tape.push(Tensor::from_vec(out), &[x], GlobalAvgPool))
}

struct ConcatChannels(Vec<usize>);

impl Backward for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &n) in inputs.iter().zip(&self.0) {
            let g = Tensor::new(t.shape().to_vec(), grad.data()[offset..offset + n].to_vec())?;
            offset += n;
            out.push(Some(g));
        }
        Ok(out)
    }
}

/// Stacks `[Ci, H, W]` maps along the channel axis.
pub fn concat_channels(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let first = tape.value(xs[0]);
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    let mut data = Vec::new();
    let mut sizes = Vec::with_capacity(xs.len());
    for &x in xs {
        let t = tape.value(x);
        let (c, h2, w2) = t.chw()?;
        if (h2, w2) != (h, w) {
            return Err(shape_mismatch("concat_channels", first.shape(), t.shape()));
        }
        channels += c;
        sizes.push(t.len());
        data.extend_from_slice(t.data());
    }
    let out = Tensor::new(vec![channels, h, w], data)?;
    Ok(tape.push(out, xs, ConcatChannels(sizes)))
}

struct Crop {
    y0: usize,
    x0: usize,
}

impl Backward for Crop {
    fn name(&self) -> &'static str {
        "crop"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (c, h, w) = inputs[0].chw()?;
        let (_, ch, cw) = output.chw()?;
        let mut dx = Tensor::zeros(inputs[0].shape());
        let dxd = dx.data_mut();
        for k in 0..c {
            for y in 0..ch {
                let src = &grad.data()[(k * ch + y) * cw..(k * ch + y + 1) * cw];
                let dst = (k * h + y + self.y0) * w + self.x0;
                dxd[dst..dst + cw].copy_from_slice(src);
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Window `[y0, y0+height) x [x0, x0+width)` of every channel.
pub fn crop(tape: &mut Tape, x: Var, y0: usize, x0: usize, height: usize, width: usize) -> Result<Var> {
    let tx = tape.value(x);
    let (c, h, w) = tx.chw()?;
    if y0 + height > h || x0 + width > w {
        return Err(invalid("crop", format!("window {height}x{width} at ({y0},{x0}) exceeds {h}x{w}")));
    }
    let mut out = Vec::with_capacity(c * height * width);
    for k in 0..c {
        for y in y0..y0 + height {
            let row = (k * h + y) * w;
            out.extend_from_slice(&tx.data()[row + x0..row + x0 + width]);
        }
    }
    let out = Tensor::new(vec![c, height, width], out)?;
    Ok(tape.push(out, &[x], Crop { y0, x0 }))
}

#[derive(Clone, Copy)]
enum Layout {
    ToTokens,
    FromTokens,
}

struct Transpose(Layout);

impl Backward for Transpose {
    fn name(&self) -> &'static str {
        match self.0 {
            Layout::ToTokens => "to_tokens",
            Layout::FromTokens => "from_tokens",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let shape = inputs[0].shape();
        let g = match self.0 {
            Layout::ToTokens => {
                let (c, h, w) = inputs[0].chw()?;
                transpose_data(grad.data(), h * w, c)
            }
            Layout::FromTokens => {
                let (n, c) = inputs[0].matrix()?;
                transpose_data(grad.data(), c, n)
            }
        };
        Ok(vec![Some(Tensor::new(shape.to_vec(), g)?)])
    }
}

/// Transposes a row-major `[rows, cols]` buffer.
fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

/// `[C, H, W]` → `[H*W, C]` token matrix (row-major pixel order).
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let tx = tape.value(x);
    let (c, h, w) = tx.chw()?;
    let out = Tensor::new(vec![h * w, c], transpose_data(tx.data(), c, h * w))?;
    Ok(tape.push(out, &[x], Transpose(Layout::ToTokens)))
}

/// `[H*W, C]` → `[C, H, W]`.
pub fn from_tokens(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let tx = tape.value(x);
    let (n, c) = tx.matrix()?;
    if n != h * w {
        return Err(invalid("from_tokens", format!("{n} tokens cannot form {h}x{w}")));
    }
    let out = Tensor::new(vec![c, h, w], transpose_data(tx.data(), n, c))?;
    Ok(tape.push(out, &[x], Transpose(Layout::FromTokens)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_range_covers_exactly_the_in_bounds_outputs() {
        for len in 1..9 {
            for k in 1..4 {
                for pad in 0..2 {
                    for stride in 1..3 {
                        if len + 2 * pad < k {
                            continue;
                        }
                        let out_len = (len + 2 * pad - k) / stride + 1;
                        for kk in 0..k {
                            let (lo, hi) = axis_range(kk, pad, stride, len, out_len);
                            for o in 0..out_len {
                                let i = (o * stride + kk) as isize - pad as isize;
                                let inside = i >= 0 && (i as usize) < len;
                                assert_eq!(inside, o >= lo && o < hi, "len {len} k {k} pad {pad} s {stride} kk {kk} o {o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 4 * 5).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new(vec![2, 4, 5], data.clone()).unwrap());
        let mut k = Tensor::zeros(&[2, 2, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[9 + 9 + 9 + 4] = 1.0;
        let k = tape.constant(k);
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = conv2d(&mut tape, x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn token_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let t = to_tokens(&mut tape, x).unwrap();
        assert_eq!(tape.value(t).shape(), &[12, 2]);
        assert_eq!(tape.value(t).data()[..4], [0.0, 12.0, 1.0, 13.0]);
        let back = from_tokens(&mut tape, t, 3, 4).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}
