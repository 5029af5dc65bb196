//! Multi-head scaled dot-product attention with optional per-query key pools.

use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, shape_mismatch, Result};
use crate::ops::linear::linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Which keys each query may attend to.
#[derive(Clone, Debug)]
pub enum KeyPools {
    /// Every query sees every key.
    Full,
    /// `pools[i]` lists the key indices visible to query `i`. An empty pool
    /// yields a zero output row.
    Lists(Arc<Vec<Vec<u32>>>),
}

impl KeyPools {
    pub fn lists(pools: Vec<Vec<u32>>) -> Self {
        KeyPools::Lists(Arc::new(pools))
    }

    /// Builds pools from a row-major `n_query x n_key` boolean mask where
    /// `true` means "may attend".
    pub fn from_mask(mask: &[bool], n_query: usize, n_key: usize) -> Result<Self> {
        if mask.len() != n_query * n_key {
            return Err(invalid(
                "KeyPools::from_mask",
                format!("mask has {} entries, expected {n_query}x{n_key}", mask.len()),
            ));
        }
        let pools = mask
            .chunks(n_key)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(j, _)| j as u32)
                    .collect()
            })
            .collect();
        Ok(KeyPools::lists(pools))
    }

    fn pool_len(&self, i: usize, n_key: usize) -> usize {
        match self {
            KeyPools::Full => n_key,
            KeyPools::Lists(p) => p[i].len(),
        }
    }

    #[inline]
    fn key(&self, i: usize, slot: usize) -> usize {
        match self {
            KeyPools::Full => slot,
            KeyPools::Lists(p) => p[i][slot] as usize,
        }
    }
}

struct AttentionCore {
    heads: usize,
    pools: KeyPools,
    /// Softmax weights, laid out per query then per head over its pool.
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

impl Backward for AttentionCore {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (nq, d) = q.matrix()?;
        let (nk, _) = k.matrix()?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), grad.data());
        let mut dq = Tensor::zeros(q.shape());
        let mut dk = Tensor::zeros(k.shape());
        let mut dv = Tensor::zeros(v.shape());
        let mut dp = Vec::new();
        for i in 0..nq {
            let m = self.pools.pool_len(i, nk);
            if m == 0 {
                continue;
            }
            dp.resize(m, 0.0);
            for h in 0..self.heads {
                let p = &self.probs[self.offsets[i] + h * m..self.offsets[i] + (h + 1) * m];
                let go = &gd[i * d + h * dh..i * d + (h + 1) * dh];
                let mut dot = 0.0;
                for s in 0..m {
                    let j = self.pools.key(i, s);
                    let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    let dps: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dp[s] = dps;
                    dot += p[s] * dps;
                    let dvj = &mut dv.data_mut()[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &g) in dvj.iter_mut().zip(go) {
                        *o += p[s] * g;
                    }
                }
                let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                for s in 0..m {
                    let ds = p[s] * (dp[s] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let j = self.pools.key(i, s);
                    let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                    let dqi = &mut dq.data_mut()[i * d + h * dh..i * d + (h + 1) * dh];
                    for (o, &kv) in dqi.iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    let dkj = &mut dk.data_mut()[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &qv) in dkj.iter_mut().zip(qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

/// Per-head `softmax(q k^T / sqrt(d_head)) v` on already-projected tokens,
/// heads concatenated along the feature axis.
///
/// `q: [Nq, D]`, `k, v: [Nk, D]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, pools: KeyPools) -> Result<Var> {
    let (tq, tk, tv) = (tape.value(q), tape.value(k), tape.value(v));
    let (nq, d) = tq.matrix()?;
    let (nk, dk) = tk.matrix()?;
    if dk != d || tv.shape() != tk.shape() {
        return Err(shape_mismatch("attention", tq.shape(), tk.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(invalid("attention", format!("model dim {d} not divisible by {heads} heads")));
    }
    if let KeyPools::Lists(p) = &pools {
        if p.len() != nq {
            return Err(invalid("attention", format!("{} pools for {nq} queries", p.len())));
        }
        if p.iter().flatten().any(|&j| j as usize >= nk) {
            return Err(invalid("attention", format!("pool index out of {nk} keys")));
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
    let mut out = vec![0.0; nq * d];
    let mut offsets = Vec::with_capacity(nq);
    let mut probs = Vec::new();
    for i in 0..nq {
        offsets.push(probs.len());
        let m = pools.pool_len(i, nk);
        if m == 0 {
            continue;
        }
        for h in 0..heads {
            let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
            let start = probs.len();
            for s in 0..m {
                let j = pools.key(i, s);
                let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                probs.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
            }
            crate::ops::norm::softmax_in_place(&mut probs[start..]);
            let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for s in 0..m {
                let p = probs[start + s];
                let j = pools.key(i, s);
                for (o, &vv) in oi.iter_mut().zip(&vd[j * d + h * dh..j * d + (h + 1) * dh]) {
                    *o += p * vv;
                }
            }
        }
    }
    let out = Tensor::new(vec![nq, d], out)?;
    Ok(tape.push(out, &[q, k, v], AttentionCore { heads, pools, probs, offsets }))
}

/// Projection weights of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub model_dim: usize,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    /// Output projection. No bias, so a query with an empty pool maps to zero.
    pub w_o: ParamId,
}

impl AttentionParams {
    /// Registers the layer's tensors under `prefix`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(invalid(
                "AttentionParams::new",
                format!("model dim {model_dim} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            heads,
            model_dim,
            w_q: store.add_xavier(format!("{prefix}.w_q"), &[query_dim, model_dim], query_dim, model_dim, rng)?,
            b_q: store.add_zeros(format!("{prefix}.b_q"), &[model_dim])?,
            w_k: store.add_xavier(format!("{prefix}.w_k"), &[kv_dim, model_dim], kv_dim, model_dim, rng)?,
            b_k: store.add_zeros(format!("{prefix}.b_k"), &[model_dim])?,
            w_v: store.add_xavier(format!("{prefix}.w_v"), &[kv_dim, model_dim], kv_dim, model_dim, rng)?,
            b_v: store.add_zeros(format!("{prefix}.b_v"), &[model_dim])?,
            w_o: store.add_xavier(format!("{prefix}.w_o"), &[model_dim, out_dim], model_dim, out_dim, rng)?,
        })
    }

    /// Rebinds to tensors already present in `store` under `prefix`.
    pub fn lookup(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let w_q = store.id(&format!("{prefix}.w_q"))?;
        let model_dim = store.get(w_q).shape()[1];
        if heads == 0 || model_dim % heads != 0 {
            return Err(invalid("AttentionParams::lookup", format!("model dim {model_dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            model_dim,
            w_q,
            b_q: store.id(&format!("{prefix}.b_q"))?,
            w_k: store.id(&format!("{prefix}.w_k"))?,
            b_k: store.id(&format!("{prefix}.b_k"))?,
            w_v: store.id(&format!("{prefix}.w_v"))?,
            b_v: store.id(&format!("{prefix}.b_v"))?,
            w_o: store.id(&format!("{prefix}.w_o"))?,
        })
    }
}

/// Projects queries, keys and values, attends per head, and applies the
/// output projection.
pub fn mha(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    query_tokens: Var,
    key_tokens: Var,
    value_tokens: Var,
    pools: KeyPools,
) -> Result<Var> {
    let (nk, _) = tape.value(key_tokens).matrix()?;
    let (nv, _) = tape.value(value_tokens).matrix()?;
    if nk != nv {
        return Err(shape_mismatch(
            "mha key/value",
            tape.value(key_tokens).shape(),
            tape.value(value_tokens).shape(),
        ));
    }
    let p = |tape: &mut Tape, id| tape.param(store, id);
    let (wq, bq, wk, bk, wv, bv, wo) = (
        p(tape, params.w_q),
        p(tape, params.b_q),
        p(tape, params.w_k),
        p(tape, params.b_k),
        p(tape, params.w_v),
        p(tape, params.b_v),
        p(tape, params.w_o),
    );
    let q = linear(tape, query_tokens, wq, Some(bq))?;
    let k = linear(tape, key_tokens, wk, Some(bk))?;
    let v = linear(tape, value_tokens, wv, Some(bv))?;
    let a = attention(tape, q, k, v, params.heads, pools)?;
    linear(tape, a, wo, None)
}
