use crate::error::{shape_mismatch, Result};
use crate::gemm::gemm;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// `out += x * w` for row-major `x: [rows, k]`, `w: [k, cols]`.
pub(crate) fn matmul_into(x: &[f64], w: &[f64], out: &mut [f64], rows: usize, k: usize, cols: usize) {
    gemm(rows, k, cols, x, (k, 1), w, (cols, 1), 1.0, out, (cols, 1));
}

struct Linear {
    has_bias: bool,
}

impl Backward for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, k) = x.matrix()?;
        let (_, cols) = w.matrix()?;
        let g = grad.data();

        // dx = g * w^T
        let mut dx = Tensor::zeros(x.shape());
        gemm(rows, cols, k, g, (cols, 1), w.data(), (1, cols), 0.0, dx.data_mut(), (k, 1));
        // dw = x^T * g
        let mut dw = Tensor::zeros(w.shape());
        gemm(k, rows, cols, x.data(), (1, k), g, (cols, 1), 0.0, dw.data_mut(), (cols, 1));
        let mut out = vec![Some(dx), Some(dw)];
        if self.has_bias {
            let mut db = Tensor::zeros(&[cols]);
            for n in 0..rows {
                for (d, &gv) in db.data_mut().iter_mut().zip(&g[n * cols..(n + 1) * cols]) {
                    *d += gv;
                }
            }
            out.push(Some(db));
        }
        Ok(out)
    }
}

/// `x: [rows, k]`, `w: [k, cols]`, optional `b: [cols]` → `[rows, cols]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (tx, tw) = (tape.value(x), tape.value(w));
    let (rows, k) = tx.matrix()?;
    let (k2, cols) = tw.matrix()?;
    if k != k2 {
        return Err(shape_mismatch("linear", tx.shape(), tw.shape()));
    }
    let mut out = vec![0.0; rows * cols];
    if let Some(b) = b {
        let tb = tape.value(b);
        if tb.shape() != [cols] {
            return Err(shape_mismatch("linear bias", tw.shape(), tb.shape()));
        }
        for row in out.chunks_mut(cols) {
            row.copy_from_slice(tb.data());
        }
    }
    matmul_into(tx.data(), tw.data(), &mut out, rows, k, cols);
    let out = Tensor::new(vec![rows, cols], out)?;
    Ok(match b {
        Some(b) => tape.push(out, &[x, w, b], Linear { has_bias: true }),
        None => tape.push(out, &[x, w], Linear { has_bias: false }),
    })
}

pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    linear(tape, a, b, None)
}
