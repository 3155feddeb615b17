//! Forward and reverse passes of the transformer building blocks.
//!
//! Every `*_fwd` returns its output plus whatever the matching `*_bwd` needs.
//! Reverse passes accumulate parameter gradients into a `BlockParams` of the
//! same shape and return the gradient with respect to the input.

use rand::{Rng, RngCore};

use super::{BlockParams, LayerNormParams};
use crate::tensor::{gemm, Scalar, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Source of dropout masks; `rate == 0` or no rng disables dropout.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    /// Applies inverted dropout in place and returns the scale mask.
    pub fn apply<T: Scalar>(&mut self, x: &mut Tensor<T>) -> Option<Vec<T>> {
        let rate = self.rate;
        let rng = self.rng.as_mut().filter(|_| rate > 0.0)?;
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random_bool(rate) {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        x.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        Some(mask)
    }
}

pub(crate) fn dropout_bwd<T: Scalar>(dy: &mut Tensor<T>, mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        dy.data.iter_mut().zip(m).for_each(|(g, &s)| *g *= s);
    }
}

pub(crate) struct LnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

pub(crate) fn layer_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerNormParams<T>,
) -> (Tensor<T>, LnCache<T>) {
    let d = x.cols;
    let dn = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Tensor::zeros(x.rows, d);
    let mut y = Tensor::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat.data[i * d + j] = h;
            y.data[i * d + j] = h * p.gain.data[j] + p.bias.data[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_bwd<T: Scalar>(
    dy: &Tensor<T>,
    p: &LayerNormParams<T>,
    cache: &LnCache<T>,
    grad: &mut LayerNormParams<T>,
) -> Tensor<T> {
    let d = dy.cols;
    let dn = T::from_f64(d as f64);
    let mut dx = Tensor::zeros(dy.rows, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..dy.rows {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            grad.gain.data[j] += g[j] * xh[j];
            grad.bias.data[j] += g[j];
            dxhat[j] = g[j] * p.gain.data[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// `x W + b` with `W: in × out`.
pub(crate) fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        y.row_mut(i).copy_from_slice(&b.data);
    }
    gemm(T::one(), x.view(), w.view(), T::one(), y.view_mut());
    y
}

pub(crate) fn linear_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Tensor<T> {
    gemm(T::one(), x.view().t(), dy.view(), T::one(), dw.view_mut());
    for i in 0..dy.rows {
        db.data
            .iter_mut()
            .zip(dy.row(i))
            .for_each(|(a, &g)| *a += g);
    }
    let mut dx = Tensor::zeros(dy.rows, w.rows);
    gemm(T::one(), dy.view(), w.view().t(), T::zero(), dx.view_mut());
    dx
}

/// Row-wise softmax over valid columns only; invalid columns get exactly 0.
pub(crate) fn masked_softmax_rows<T: Scalar>(s: &mut Tensor<T>, valid: &[bool]) {
    let any_valid = valid.iter().any(|&ok| ok);
    for i in 0..s.rows {
        let row = s.row_mut(i);
        if !any_valid {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        // NaN scores are skipped by `max` but still poison the row below,
        // which is what the divergence check relies on
        let max = row
            .iter()
            .zip(valid)
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (v, &ok) in row.iter_mut().zip(valid) {
            *v = if ok { (*v - max).exp() } else { T::zero() };
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

pub(crate) struct AttnCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Per-head attention weights, `n × n` each.
    pub probs: Vec<Tensor<T>>,
    ctx: Tensor<T>,
}

pub(crate) fn attention_fwd<T: Scalar>(
    p: &BlockParams<T>,
    x: Tensor<T>,
    valid: &[bool],
    heads: usize,
) -> (Tensor<T>, AttnCache<T>) {
    let n = x.rows;
    let d = x.cols;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let q = linear_fwd(&x, &p.wq, &p.bq);
    let k = linear_fwd(&x, &p.wk, &p.bk);
    let v = linear_fwd(&x, &p.wv, &p.bv);
    let mut ctx = Tensor::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut s = Tensor::zeros(n, n);
        gemm(
            scale,
            q.view().cols(h * dh, dh),
            k.view().cols(h * dh, dh).t(),
            T::zero(),
            s.view_mut(),
        );
        masked_softmax_rows(&mut s, valid);
        gemm(
            T::one(),
            s.view(),
            v.view().cols(h * dh, dh),
            T::zero(),
            ctx.view_mut().cols(h * dh, dh),
        );
        probs.push(s);
    }
    let out = linear_fwd(&ctx, &p.wo, &p.bo);
    (
        out,
        AttnCache {
            x,
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

pub(crate) fn attention_bwd<T: Scalar>(
    p: &BlockParams<T>,
    g: &mut BlockParams<T>,
    dout: &Tensor<T>,
    c: &AttnCache<T>,
    heads: usize,
) -> Tensor<T> {
    let n = dout.rows;
    let d = dout.cols;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let dctx = linear_bwd(&c.ctx, &p.wo, dout, &mut g.wo, &mut g.bo);
    let mut dq = Tensor::zeros(n, d);
    let mut dk = Tensor::zeros(n, d);
    let mut dv = Tensor::zeros(n, d);
    let mut ds = Tensor::zeros(n, n);
    for h in 0..heads {
        let pr = &c.probs[h];
        // dP = dctx_h V_h^T
        gemm(
            T::one(),
            dctx.view().cols(h * dh, dh),
            c.v.view().cols(h * dh, dh).t(),
            T::zero(),
            ds.view_mut(),
        );
        // dV_h = P^T dctx_h
        gemm(
            T::one(),
            pr.view().t(),
            dctx.view().cols(h * dh, dh),
            T::zero(),
            dv.view_mut().cols(h * dh, dh),
        );
        for i in 0..n {
            let prow = pr.row(i);
            let drow = ds.row_mut(i);
            let dot = prow
                .iter()
                .zip(drow.iter())
                .map(|(&a, &b)| a * b)
                .sum::<T>();
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - dot) * scale;
            }
        }
        gemm(
            T::one(),
            ds.view(),
            c.k.view().cols(h * dh, dh),
            T::zero(),
            dq.view_mut().cols(h * dh, dh),
        );
        gemm(
            T::one(),
            ds.view().t(),
            c.q.view().cols(h * dh, dh),
            T::zero(),
            dk.view_mut().cols(h * dh, dh),
        );
    }
    let mut dx = linear_bwd(&c.x, &p.wq, &dq, &mut g.wq, &mut g.bq);
    dx.add_assign(&linear_bwd(&c.x, &p.wk, &dk, &mut g.wk, &mut g.bk));
    dx.add_assign(&linear_bwd(&c.x, &p.wv, &dv, &mut g.wv, &mut g.bv));
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) struct MlpCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

pub(crate) fn mlp_fwd<T: Scalar>(p: &BlockParams<T>, x: Tensor<T>) -> (Tensor<T>, MlpCache<T>) {
    let pre = linear_fwd(&x, &p.w1, &p.b1);
    let act = Tensor::from_vec(
        pre.rows,
        pre.cols,
        pre.data.iter().map(|&v| gelu(v)).collect(),
    );
    let out = linear_fwd(&act, &p.w2, &p.b2);
    (out, MlpCache { x, pre, act })
}

pub(crate) fn mlp_bwd<T: Scalar>(
    p: &BlockParams<T>,
    g: &mut BlockParams<T>,
    dout: &Tensor<T>,
    c: &MlpCache<T>,
) -> Tensor<T> {
    let mut dact = linear_bwd(&c.act, &p.w2, dout, &mut g.w2, &mut g.b2);
    dact.data
        .iter_mut()
        .zip(&c.pre.data)
        .for_each(|(d, &x)| *d *= gelu_grad(x));
    linear_bwd(&c.x, &p.w1, &dact, &mut g.w1, &mut g.b1)
}

pub(crate) struct BlockCache<T> {
    ln1: LnCache<T>,
    pub attn: AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    mlp: MlpCache<T>,
    drop2: Option<Vec<T>>,
}

pub(crate) fn block_fwd<T: Scalar>(
    p: &BlockParams<T>,
    x: Tensor<T>,
    valid: &[bool],
    heads: usize,
    drop: &mut Dropout<'_>,
) -> (Tensor<T>, BlockCache<T>) {
    let (a, ln1) = layer_norm_fwd(&x, &p.ln1);
    let (mut att, attn) = attention_fwd(p, a, valid, heads);
    let drop1 = drop.apply(&mut att);
    let mut x1 = x;
    x1.add_assign(&att);
    let (b, ln2) = layer_norm_fwd(&x1, &p.ln2);
    let (mut m, mlp) = mlp_fwd(p, b);
    let drop2 = drop.apply(&mut m);
    x1.add_assign(&m);
    (
        x1,
        BlockCache {
            ln1,
            attn,
            drop1,
            ln2,
            mlp,
            drop2,
        },
    )
}

pub(crate) fn block_bwd<T: Scalar>(
    p: &BlockParams<T>,
    g: &mut BlockParams<T>,
    dy: Tensor<T>,
    c: &BlockCache<T>,
    heads: usize,
) -> Tensor<T> {
    let mut dm = dy.clone();
    dropout_bwd(&mut dm, &c.drop2);
    let db = mlp_bwd(p, g, &dm, &c.mlp);
    let mut dx1 = dy;
    dx1.add_assign(&layer_norm_bwd(&db, &p.ln2, &c.ln2, &mut g.ln2));
    let mut datt = dx1.clone();
    dropout_bwd(&mut datt, &c.drop1);
    let da = attention_bwd(p, g, &datt, &c.attn, heads);
    dx1.add_assign(&layer_norm_bwd(&da, &p.ln1, &c.ln1, &mut g.ln1));
    dx1
}

pub(crate) struct StackCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    norm: LnCache<T>,
}

/// Blocks followed by the final LayerNorm.
pub(crate) fn stack_fwd<T: Scalar>(
    blocks: &[BlockParams<T>],
    norm: &LayerNormParams<T>,
    mut x: Tensor<T>,
    valid: &[bool],
    heads: usize,
    drop: &mut Dropout<'_>,
) -> (Tensor<T>, StackCache<T>) {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = block_fwd(b, x, valid, heads, drop);
        caches.push(c);
        x = y;
    }
    let (out, nc) = layer_norm_fwd(&x, norm);
    (
        out,
        StackCache {
            blocks: caches,
            norm: nc,
        },
    )
}

pub(crate) fn stack_bwd<T: Scalar>(
    blocks: &[BlockParams<T>],
    norm: &LayerNormParams<T>,
    gblocks: &mut [BlockParams<T>],
    gnorm: &mut LayerNormParams<T>,
    dy: &Tensor<T>,
    c: &StackCache<T>,
    heads: usize,
) -> Tensor<T> {
    let mut dx = layer_norm_bwd(dy, norm, &c.norm, gnorm);
    for i in (0..blocks.len()).rev() {
        dx = block_bwd(&blocks[i], &mut gblocks[i], dx, &c.blocks[i], heads);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_masks_invalid_columns() {
        let mut s = Tensor::from_vec(2, 3, vec![1.0f64, 2.0, 50.0, -1.0, 0.0, 3.0]);
        masked_softmax_rows(&mut s, &[true, true, false]);
        for i in 0..2 {
            assert_eq!(s.get(i, 2), 0.0);
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
