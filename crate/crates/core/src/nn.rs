//! Layer primitives with hand-written reverse passes, plus the
//! [`ParamTree`] trait that lets optimizers, checkpoints and gradient checks
//! walk every trainable tensor in a fixed order.

use crate::error::{shape_err, Result};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::Tensor;

/// A structure of named trainable tensors.
///
/// `visit` and `visit_mut` must enumerate tensors in the same order. Gradients
/// are stored in a value of the same type, so a parameter and its gradient
/// line up by position.
pub trait ParamTree: Clone {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// `self += other`, elementwise over every tensor.
    fn accumulate(&mut self, other: &Self) {
        let src: Vec<&[f64]> = other.named_tensors().into_iter().map(|(_, t)| t.data()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.data_mut().iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    /// Replace tensors from a name→tensor lookup. Every tensor must be present
    /// with a matching shape.
    fn load_named(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let t = lookup(name).ok_or_else(|| shape_err!("missing tensor `{name}`"))?;
            if t.shape() != slot.shape() {
                return Err(shape_err!("tensor `{name}`: expected {:?}, got {:?}", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`ParamTree`] for a struct whose fields are tensors or other trees.
macro_rules! param_tree {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::ParamTree for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::tensor::Tensor)>) {
                $( $crate::nn::VisitField::visit_field(&self.$field, &$crate::nn::join(prefix, stringify!($field)), out); )*
            }
            fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut $crate::tensor::Tensor>) {
                $( $crate::nn::VisitField::visit_field_mut(&mut self.$field, out); )*
            }
        }
    };
}
pub(crate) use param_tree;

/// Field adapter used by [`param_tree!`].
pub trait VisitField {
    fn visit_field<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_field_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);
}

impl VisitField for Tensor {
    fn visit_field<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((name.to_string(), self));
    }
    fn visit_field_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(self);
    }
}

impl<P: ParamTree> VisitField for P {
    fn visit_field<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.visit(name, out);
    }
    fn visit_field_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.visit_mut(out);
    }
}

impl<P: ParamTree> ParamTree for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for p in self.iter_mut() {
            p.visit_mut(out);
        }
    }
}

impl<P: ParamTree> ParamTree for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(p) = self {
            p.visit(prefix, out);
        }
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        if let Some(p) = self {
            p.visit_mut(out);
        }
    }
}

// --- dense kernels on row-major f64 slices -------------------------------

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// --- Linear ----------------------------------------------------------------

/// Affine map `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}
param_tree!(Linear { weight, bias });

impl Linear {
    /// Normal init with std `1/sqrt(fan_in)`; zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        Self::init_scaled(fan_in, fan_out, 1.0, rng)
    }

    pub fn init_scaled(fan_in: usize, fan_out: usize, gain: f64, rng: &mut SeededRng) -> Self {
        Linear {
            weight: normal_tensor(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]).expect("positive extents"),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]).expect("positive extents"),
            bias: Tensor::zeros(&[fan_out]).expect("positive extents"),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x: [rows×in]` → `[rows×out]`. A rank-1 `x` is treated as one row.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols(x)?;
        let (fi, fo) = (self.fan_in(), self.fan_out());
        if cols != fi {
            return Err(shape_err!("linear: input width {cols}, weight expects {fi}"));
        }
        let mut out = Vec::with_capacity(rows * fo);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.data());
        }
        gemm_acc(x.data(), self.weight.data(), &mut out, rows, fi, fo);
        let shape = if x.rank() == 1 { vec![fo] } else { vec![rows, fo] };
        Tensor::new(shape, out)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Result<Tensor> {
        let (rows, _) = rows_cols(x)?;
        let (fi, fo) = (self.fan_in(), self.fan_out());
        if dy.numel() != rows * fo {
            return Err(shape_err!("linear backward: upstream has {} elements, expected {}", dy.numel(), rows * fo));
        }
        gemm_tn_acc(x.data(), dy.data(), grad.weight.data_mut(), rows, fi, fo);
        let gb = grad.bias.data_mut();
        for r in 0..rows {
            for (g, &d) in gb.iter_mut().zip(&dy.data()[r * fo..(r + 1) * fo]) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; rows * fi];
        gemm_nt_acc(dy.data(), self.weight.data(), &mut dx, rows, fo, fi);
        Tensor::new(x.shape().to_vec(), dx)
    }
}

fn rows_cols(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [c] => Ok((1, *c)),
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err!("expected rank 1 or 2, got {s:?}")),
    }
}

// --- LayerNorm -------------------------------------------------------------

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}
param_tree!(LayerNorm { gain, shift });

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[dim], 1.0).expect("positive extents"),
            shift: Tensor::zeros(&[dim]).expect("positive extents"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let [rows, dim] = x.as_matrix()?;
        if dim != self.gain.numel() {
            return Err(shape_err!("layer norm: width {dim}, params {}", self.gain.numel()));
        }
        let (g, b) = (self.gain.data(), self.shift.data());
        let mut out = vec![0.0; rows * dim];
        let mut xhat = vec![0.0; rows * dim];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..dim {
                let h = (row[c] - mean) * rs;
                xhat[r * dim + c] = h;
                out[r * dim + c] = h * g[c] + b[c];
            }
        }
        Ok((Tensor::new(vec![rows, dim], out)?, LayerNormCache { xhat, rstd }))
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor, grad: &mut LayerNorm) -> Result<Tensor> {
        let [rows, dim] = dy.as_matrix()?;
        let g = self.gain.data();
        let mut dx = vec![0.0; rows * dim];
        for r in 0..rows {
            let dyr = &dy.data()[r * dim..(r + 1) * dim];
            let xh = &cache.xhat[r * dim..(r + 1) * dim];
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for c in 0..dim {
                grad.gain.data_mut()[c] += dyr[c] * xh[c];
                grad.shift.data_mut()[c] += dyr[c];
                let d = dyr[c] * g[c];
                mean_d += d;
                mean_dx += d * xh[c];
            }
            mean_d /= dim as f64;
            mean_dx /= dim as f64;
            for c in 0..dim {
                dx[r * dim + c] = cache.rstd[r] * (dyr[c] * g[c] - mean_d - xh[c] * mean_dx);
            }
        }
        Tensor::new(vec![rows, dim], dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) {
        let h = 1e-5;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()) + 1e-9, "entry {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = SeededRng::new(9);
        let mut lin = Linear::init(5, 3, &mut rng);
        lin.bias = normal_tensor(&[3], 1.0, &mut rng);
        let x = normal_tensor(&[4, 5], 1.0, &mut rng);
        let w = normal_tensor(&[4, 3], 1.0, &mut rng);
        let loss = |l: &Linear, x: &Tensor| l.forward(x).unwrap().mul(&w).unwrap().sum();
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &w, &mut g).unwrap();
        fd_check(&|x| loss(&lin, x), &x, &dx);
        let wt = lin.weight.clone();
        fd_check(
            &|wt2| {
                let mut l = lin.clone();
                l.weight = wt2.clone();
                loss(&l, &x)
            },
            &wt,
            &g.weight,
        );
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let mut rng = SeededRng::new(4);
        let mut ln = LayerNorm::new(6);
        ln.gain = normal_tensor(&[6], 1.0, &mut rng);
        ln.shift = normal_tensor(&[6], 1.0, &mut rng);
        let x = normal_tensor(&[3, 6], 2.0, &mut rng);
        let w = normal_tensor(&[3, 6], 1.0, &mut rng);
        let (_, cache) = ln.forward(&x).unwrap();
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g).unwrap();
        fd_check(&|x| ln.forward(x).unwrap().0.mul(&w).unwrap().sum(), &x, &dx);
    }

    #[test]
    fn param_tree_names_are_stable() {
        let mut rng = SeededRng::new(1);
        let v = vec![Linear::init(2, 2, &mut rng), Linear::init(2, 2, &mut rng)];
        let names: Vec<String> = v.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["0.weight", "0.bias", "1.weight", "1.bias"]);
        assert_eq!(v.num_params(), 12);
    }
}
