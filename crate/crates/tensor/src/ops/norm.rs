use crate::error::{invalid, shape_mismatch, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

fn last_dim(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let d = *t.shape().last().ok_or_else(|| invalid(op, "rank-0 tensor"))?;
    if d == 0 {
        return Err(invalid(op, "empty last dimension"));
    }
    Ok((t.len() / d, d))
}

struct LayerNorm {
    affine: bool,
}

impl Backward for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (rows, d) = last_dim(x, "layer_norm")?;
        let gamma = if self.affine { Some(inputs[1].data()) } else { None };
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut gh = vec![0.0; d];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let gr = &grad.data()[r * d..(r + 1) * d];
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..d {
                xhat[i] = (xr[i] - mu) * rstd;
                gh[i] = gr[i] * gamma.map_or(1.0, |g| g[i]);
                dgamma[i] += gr[i] * xhat[i];
                dbeta[i] += gr[i];
            }
            let mean_gh = gh.iter().sum::<f64>() / d as f64;
            let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let dxr = &mut dx.data_mut()[r * d..(r + 1) * d];
            for i in 0..d {
                dxr[i] = rstd * (gh[i] - mean_gh - xhat[i] * mean_ghx);
            }
        }
        let mut out = vec![Some(dx)];
        if self.affine {
            out.push(Some(Tensor::from_vec(dgamma)));
            out.push(Some(Tensor::from_vec(dbeta)));
        }
        Ok(out)
    }
}

/// Normalizes over the last dimension, then applies `gamma * x + beta` when
/// both are given.
pub fn layer_norm(tape: &mut Tape, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
    let tx = tape.value(x);
    let (rows, d) = last_dim(tx, "layer_norm")?;
    let (gamma, beta) = match affine {
        Some((g, b)) => {
            let (tg, tb) = (tape.value(g), tape.value(b));
            if tg.shape() != [d] || tb.shape() != [d] {
                return Err(shape_mismatch("layer_norm affine", tx.shape(), tg.shape()));
            }
            (Some(tg.data()), Some(tb.data()))
        }
        None => (None, None),
    };
    let mut out = vec![0.0; tx.len()];
    for r in 0..rows {
        let xr = &tx.data()[r * d..(r + 1) * d];
        let mu = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            let mut y = (xr[i] - mu) * rstd;
            if let (Some(g), Some(b)) = (gamma, beta) {
                y = y * g[i] + b[i];
            }
            out[r * d + i] = y;
        }
    }
    let out = Tensor::new(tx.shape().to_vec(), out)?;
    Ok(match affine {
        Some((g, b)) => tape.push(out, &[x, g, b], LayerNorm { affine: true }),
        None => tape.push(out, &[x], LayerNorm { affine: false }),
    })
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

struct Softmax;

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (rows, d) = last_dim(output, "softmax")?;
        let mut dx = Tensor::zeros(output.shape());
        for r in 0..rows {
            let y = &output.data()[r * d..(r + 1) * d];
            let g = &grad.data()[r * d..(r + 1) * d];
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for (i, o) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = y[i] * (g[i] - dot);
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Softmax over the last axis.
pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    let mut out = tape.value(x).clone();
    let (_, d) = last_dim(&out, "softmax")?;
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    Ok(tape.push(out, &[x], Softmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let y = softmax(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.7));
        let y = layer_norm(&mut tape, x, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 * 3.1 - 12.0).collect();
        let x = tape.constant(Tensor::new(vec![5, 6], data).unwrap());
        let y = softmax(&mut tape, x).unwrap();
        for row in tape.value(y).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
