//! ReLU linear attention.
//!
//! For queries, keys and values `q_i, k_j, v_j ∈ R^d` and feature map
//! `φ = ReLU`, each output row is
//!
//! ```text
//!         φ(q_i) · Σ_j φ(k_j)ᵀ v_j
//! o_i = ----------------------------
//!        φ(q_i) · Σ_j φ(k_j)ᵀ  +  ε
//! ```
//!
//! [`linear_attention_forward`] evaluates it right-to-left: the `d×d` value
//! summary and the `d` key summary ([`AttentionState`]) are built in one pass
//! over the keys, then each query reads them. Work is `Θ(N·d²)` and no `N×N`
//! buffer exists. [`naive_attention_forward`] evaluates the same expression
//! left-to-right through the explicit similarity matrix `S = φ(Q)φ(K)ᵀ`, in
//! `Θ(N²·d)` work and `N²` memory. The two agree up to rounding and serve as
//! each other's oracle.
//!
//! Conventions:
//! - `ε` sits in the denominator only (default [`DEFAULT_EPSILON`]). With ReLU
//!   features the bare denominator is exactly zero whenever `φ(q_i) = 0`, and
//!   `ε` keeps the output defined (it is then `0`).
//! - The ReLU subgradient at `0` is `0`.
//! - Summaries accumulate in ascending token order, in `f64`, for both input
//!   widths.
//! - Multi-head inputs are `N×(h·d)` with `[N, h, d]` layout: head `h`
//!   occupies columns `h·d .. (h+1)·d`.

use crate::error::{shape_err, Error, Result};
use crate::nn::{param_tree, Linear};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Default cap on the similarity matrix of the naive path (bytes).
pub const DEFAULT_NAIVE_BUDGET: usize = 4 << 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub epsilon: f64,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize, epsilon: f64) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Domain(format!("heads ({num_heads}) and head_dim ({head_dim}) must be positive")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be a positive finite number, got {epsilon}")));
        }
        Ok(AttentionConfig { num_heads, head_dim, epsilon })
    }

    pub fn single_head(head_dim: usize) -> Self {
        AttentionConfig { num_heads: 1, head_dim, epsilon: DEFAULT_EPSILON }
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Validates `q`, `k`, `v` against this config; returns `N`.
    fn check<T: Scalar>(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<usize> {
        let [n, width] = q.as_matrix()?;
        if width != self.model_dim() {
            return Err(shape_err!(
                "attention width {width} != heads {} × head_dim {}",
                self.num_heads,
                self.head_dim
            ));
        }
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(shape_err!("q {:?}, k {:?}, v {:?} must agree", q.shape(), k.shape(), v.shape()));
        }
        q.ensure_finite("q")?;
        k.ensure_finite("k")?;
        v.ensure_finite("v")?;
        Ok(n)
    }
}

/// Global summary of one head: `Σ φ(k_j)ᵀ v_j` and `Σ φ(k_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    /// `d×d`, row `a` = Σ_j φ(k_j)[a] · v_j.
    pub kv_summary: Tensor,
    /// `d`, entries ≥ 0.
    pub k_summary: Tensor,
    pub tokens: usize,
}

impl AttentionState {
    /// Summarize one head (`k`, `v`: `N×d`).
    pub fn summarize<T: Scalar>(k: &Tensor<T>, v: &Tensor<T>) -> Result<Self> {
        let [n, d] = k.as_matrix()?;
        if v.shape() != k.shape() {
            return Err(shape_err!("k {:?} vs v {:?}", k.shape(), v.shape()));
        }
        let mut kv = vec![0.0; d * d];
        let mut ks = vec![0.0; d];
        accumulate_summary(k.data(), v.data(), n, d, d, 0, &mut kv, &mut ks);
        Ok(AttentionState {
            kv_summary: Tensor::new(vec![d, d], kv)?,
            k_summary: Tensor::new(vec![d], ks)?,
            tokens: n,
        })
    }
}

/// Adds tokens of one head into `kv` (`d×d`) and `ks` (`d`), ascending order.
#[allow(clippy::too_many_arguments)]
fn accumulate_summary<T: Scalar>(
    k: &[T],
    v: &[T],
    n: usize,
    stride: usize,
    d: usize,
    col: usize,
    kv: &mut [f64],
    ks: &mut [f64],
) {
    for j in 0..n {
        let krow = &k[j * stride + col..j * stride + col + d];
        let vrow = &v[j * stride + col..j * stride + col + d];
        for a in 0..d {
            let fk = krow[a].as_f64();
            if fk <= 0.0 {
                continue;
            }
            ks[a] += fk;
            for (slot, vb) in kv[a * d..(a + 1) * d].iter_mut().zip(vrow) {
                *slot += fk * vb.as_f64();
            }
        }
    }
}

/// Linear-time evaluation. Returns `N×(h·d)`.
pub fn linear_attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let n = cfg.check(q, k, v)?;
    let (h, d) = (cfg.num_heads, cfg.head_dim);
    let width = h * d;
    let mut out = vec![T::zero(); n * width];
    let mut kv = vec![0.0; d * d];
    let mut ks = vec![0.0; d];
    let mut num = vec![0.0; d];
    for head in 0..h {
        let col = head * d;
        kv.fill(0.0);
        ks.fill(0.0);
        accumulate_summary(k.data(), v.data(), n, width, d, col, &mut kv, &mut ks);
        for i in 0..n {
            let qrow = &q.data()[i * width + col..i * width + col + d];
            num.fill(0.0);
            let mut den = cfg.epsilon;
            for a in 0..d {
                let fq = qrow[a].as_f64();
                if fq <= 0.0 {
                    continue;
                }
                den += fq * ks[a];
                for (acc, &s) in num.iter_mut().zip(&kv[a * d..(a + 1) * d]) {
                    *acc += fq * s;
                }
            }
            for (o, &x) in out[i * width + col..i * width + col + d].iter_mut().zip(&num) {
                *o = T::of_f64(x / den);
            }
        }
    }
    Tensor::new(vec![n, width], out)
}

/// Quadratic-time evaluation through the explicit similarity matrix.
pub fn naive_attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    naive_attention_forward_with_budget(q, k, v, cfg, DEFAULT_NAIVE_BUDGET)
}

/// As [`naive_attention_forward`], refusing with `OutOfMemory` when the
/// `N×N` similarity matrix would exceed `budget_bytes` or cannot be allocated.
pub fn naive_attention_forward_with_budget<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    budget_bytes: usize,
) -> Result<Tensor<T>> {
    let n = cfg.check(q, k, v)?;
    let (h, d) = (cfg.num_heads, cfg.head_dim);
    let width = h * d;
    let cells = n.checked_mul(n).ok_or_else(|| Error::OutOfMemory(format!("{n}² overflows")))?;
    let bytes = cells.saturating_mul(std::mem::size_of::<T>());
    if bytes > budget_bytes {
        return Err(Error::OutOfMemory(format!(
            "similarity matrix needs {bytes} bytes, budget is {budget_bytes}"
        )));
    }
    let mut sim: Vec<T> = Vec::new();
    sim.try_reserve_exact(cells)
        .map_err(|e| Error::OutOfMemory(format!("similarity matrix of {bytes} bytes: {e}")))?;
    sim.resize(cells, T::zero());

    let mut out = vec![T::zero(); n * width];
    let mut acc = vec![0.0; d];
    let mut fq = vec![0.0; n * d];
    let mut fk = vec![0.0; n * d];
    for head in 0..h {
        let col = head * d;
        for i in 0..n {
            for a in 0..d {
                fq[i * d + a] = q.data()[i * width + col + a].as_f64().max(0.0);
                fk[i * d + a] = k.data()[i * width + col + a].as_f64().max(0.0);
            }
        }
        // S = φ(Q) φ(K)ᵀ
        for i in 0..n {
            let qrow = &fq[i * d..(i + 1) * d];
            for j in 0..n {
                sim[i * n + j] = T::of_f64(dot(qrow, &fk[j * d..(j + 1) * d]));
            }
        }
        // o_i = (S V)_i / (Σ_j S_ij + ε)
        for i in 0..n {
            acc.fill(0.0);
            let mut den = 0.0;
            for j in 0..n {
                let s = sim[i * n + j].as_f64();
                if s == 0.0 {
                    continue;
                }
                den += s;
                let vrow = &v.data()[j * width + col..j * width + col + d];
                for (a, vb) in acc.iter_mut().zip(vrow) {
                    *a += s * vb.as_f64();
                }
            }
            den += cfg.epsilon;
            for (o, &x) in out[i * width + col..i * width + col + d].iter_mut().zip(&acc) {
                *o = T::of_f64(x / den);
            }
        }
    }
    Tensor::new(vec![n, width], out)
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Gradients of [`linear_attention_forward`] (`f64`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

/// Reverse-mode product of the linear attention Jacobian with `upstream`.
///
/// Per head, with `a_i = φ(q_i)`, `b_j = φ(k_j)`, `den_i = a_i·s + ε`:
/// `dnum_i = g_i / den_i`, `dden_i = −(g_i·o_i) / den_i`,
/// `dKV = Σ a_iᵀ dnum_i`, `ds = Σ dden_i a_i`, then
/// `da_i = KV·dnum_i + dden_i s`, `db_j = dKV·v_j + ds`, `dv_j = b_j·dKV`,
/// and the ReLU masks. Everything stays `O(N·d²)`.
pub fn linear_attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    upstream: &Tensor,
    cfg: &AttentionConfig,
) -> Result<AttentionGrads> {
    let n = cfg.check(q, k, v)?;
    if upstream.shape() != q.shape() {
        return Err(shape_err!("upstream {:?} vs output {:?}", upstream.shape(), q.shape()));
    }
    let (h, d) = (cfg.num_heads, cfg.head_dim);
    let width = h * d;
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), upstream.data());
    let mut dq = vec![0.0; n * width];
    let mut dk = vec![0.0; n * width];
    let mut dv = vec![0.0; n * width];

    let mut kv = vec![0.0; d * d];
    let mut ks = vec![0.0; d];
    let mut dkv = vec![0.0; d * d];
    let mut dks = vec![0.0; d];
    let mut num = vec![0.0; d];
    let mut dnum = vec![0.0; d];
    for head in 0..h {
        let col = head * d;
        kv.fill(0.0);
        ks.fill(0.0);
        dkv.fill(0.0);
        dks.fill(0.0);
        accumulate_summary(kd, vd, n, width, d, col, &mut kv, &mut ks);

        for i in 0..n {
            let base = i * width + col;
            let qrow = &qd[base..base + d];
            let g = &gd[base..base + d];
            num.fill(0.0);
            let mut den = cfg.epsilon;
            for a in 0..d {
                let fq = qrow[a].max(0.0);
                if fq == 0.0 {
                    continue;
                }
                den += fq * ks[a];
                for (acc, &s) in num.iter_mut().zip(&kv[a * d..(a + 1) * d]) {
                    *acc += fq * s;
                }
            }
            // g·o = g·num / den
            let g_dot_num: f64 = g.iter().zip(&num).map(|(x, y)| x * y).sum();
            let dden = -g_dot_num / (den * den);
            for (dn, &gb) in dnum.iter_mut().zip(g) {
                *dn = gb / den;
            }
            for a in 0..d {
                let fq = qrow[a].max(0.0);
                if fq > 0.0 {
                    for (slot, &dn) in dkv[a * d..(a + 1) * d].iter_mut().zip(&dnum) {
                        *slot += fq * dn;
                    }
                    dks[a] += dden * fq;
                }
                if qrow[a] > 0.0 {
                    let row = &kv[a * d..(a + 1) * d];
                    let da: f64 = row.iter().zip(&dnum).map(|(x, y)| x * y).sum::<f64>() + dden * ks[a];
                    dq[base + a] = da;
                }
            }
        }

        for j in 0..n {
            let base = j * width + col;
            let krow = &kd[base..base + d];
            let vrow = &vd[base..base + d];
            for a in 0..d {
                let fk = krow[a].max(0.0);
                if krow[a] > 0.0 {
                    let row = &dkv[a * d..(a + 1) * d];
                    let db: f64 = row.iter().zip(vrow).map(|(x, y)| x * y).sum::<f64>() + dks[a];
                    dk[base + a] = db;
                }
                if fk > 0.0 {
                    for (b, slot) in dv[base..base + d].iter_mut().enumerate() {
                        *slot += fk * dkv[a * d + b];
                    }
                }
            }
        }
    }
    let shape = vec![n, width];
    Ok(AttentionGrads {
        dq: Tensor::new(shape.clone(), dq)?,
        dk: Tensor::new(shape.clone(), dk)?,
        dv: Tensor::new(shape, dv)?,
    })
}

// --- multi-head wrapper -------------------------------------------------------

/// Projections around the attention kernel: `q = xWq`, `k = xWk`, `v = xWv`,
/// output `attn(q, k, v)·Wo + bo`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}
param_tree!(MultiHeadAttention { query, key, value, output });

/// Intermediates kept for [`MultiHeadAttention::backward`].
#[derive(Clone, Debug)]
pub struct MhaCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
}

impl MhaCache {
    /// Pre-activation queries and keys; their signs fix the ReLU pattern.
    pub fn feature_inputs(&self) -> (&Tensor, &Tensor) {
        (&self.q, &self.k)
    }
}

impl MultiHeadAttention {
    pub fn init(cfg: &AttentionConfig, rng: &mut SeededRng) -> Self {
        let dim = cfg.model_dim();
        let lin = |r: &mut SeededRng| Linear::init(dim, dim, r);
        MultiHeadAttention { query: lin(rng), key: lin(rng), value: lin(rng), output: lin(rng) }
    }

    pub fn forward(&self, x: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
        Ok(self.forward_cached(x, cfg)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, cfg: &AttentionConfig) -> Result<(Tensor, MhaCache)> {
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let attn = linear_attention_forward(&q, &k, &v, cfg)?;
        let out = self.output.forward(&attn)?;
        Ok((out, MhaCache { x: x.clone(), q, k, v, attn }))
    }

    pub fn backward(
        &self,
        cache: &MhaCache,
        dy: &Tensor,
        cfg: &AttentionConfig,
        grad: &mut MultiHeadAttention,
    ) -> Result<Tensor> {
        let dattn = self.output.backward(&cache.attn, dy, &mut grad.output)?;
        let g = linear_attention_vjp(&cache.q, &cache.k, &cache.v, &dattn, cfg)?;
        let mut dx = self.query.backward(&cache.x, &g.dq, &mut grad.query)?;
        let dxk = self.key.backward(&cache.x, &g.dk, &mut grad.key)?;
        let dxv = self.value.backward(&cache.x, &g.dv, &mut grad.value)?;
        for ((a, b), c) in dx.data_mut().iter_mut().zip(dxk.data()).zip(dxv.data()) {
            *a += b + c;
        }
        Ok(dx)
    }
}

/// Split heads, run linear attention on each, merge, project.
pub fn multi_head_wrap(x: &Tensor, params: &MultiHeadAttention, cfg: &AttentionConfig) -> Result<Tensor> {
    let [_, width] = x.as_matrix()?;
    if width % cfg.num_heads != 0 || width != cfg.model_dim() {
        return Err(shape_err!("model dim {width} not {} heads × {}", cfg.num_heads, cfg.head_dim));
    }
    params.forward(x, cfg)
}
