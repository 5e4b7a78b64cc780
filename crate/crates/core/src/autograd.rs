//! Reverse-mode automatic differentiation over dynamic-dimension arrays.
//!
//! A [`Tape`] records operations as they execute (define-by-run). Values are
//! evaluated eagerly; [`Tape::backward`] replays the recording in reverse to
//! accumulate gradients of a scalar root with respect to every grad-tracked
//! leaf. Gradients are only computed along paths that can reach such a leaf,
//! so binding network weights as constants skips their weight-gradient GEMMs.
//!
//! The trait bound [`Scalar`] is satisfied by `f32` (training, inference) and
//! `f64` (finite-difference verification).

use ndarray::prelude::*;
use ndarray::{concatenate, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::cell::RefCell;
use std::sync::Arc;

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<(usize, ArrayD<T>)>>;

struct Node<T> {
    value: Arc<ArrayD<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradient of the backward root with respect to each tape node.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`, or `None` when no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: ArrayD<T>, requires_grad: bool, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Value that gradients flow *through* but never *into*.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn constant_shared(&self, value: Arc<ArrayD<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: false,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Grad-tracked leaf (an optimization variable or network weight).
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        self.push(value, true, None)
    }

    pub fn leaf_shared(&self, value: Arc<ArrayD<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: true,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<ArrayD<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Extracts the single element of a zero-dimensional (scalar) node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() called on non-scalar node");
        *val.iter().next().expect("empty node value")
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary<F>(&self, a: Var, value: ArrayD<T>, backward: F) -> Var
    where
        F: Fn(&ArrayD<T>) -> ArrayD<T> + 'static,
    {
        let req = self.requires_grad(a);
        let back: Option<BackwardFn<T>> = if req {
            let pid = a.0;
            Some(Box::new(move |gout| vec![(pid, backward(gout))]))
        } else {
            None
        };
        self.push(value, req, back)
    }

    // ---- arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let value = &*va + &*vb;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackwardFn<T>> = if ra || rb {
            let (pa, pb) = (a.0, b.0);
            Some(Box::new(move |gout| {
                let mut out = Vec::new();
                if ra {
                    out.push((pa, gout.clone()));
                }
                if rb {
                    out.push((pb, gout.clone()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ra || rb, back)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let value = &*va - &*vb;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackwardFn<T>> = if ra || rb {
            let (pa, pb) = (a.0, b.0);
            Some(Box::new(move |gout| {
                let mut out = Vec::new();
                if ra {
                    out.push((pa, gout.clone()));
                }
                if rb {
                    out.push((pb, gout.mapv(|g| -g)));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ra || rb, back)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let value = &*va * &*vb;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackwardFn<T>> = if ra || rb {
            let (pa, pb) = (a.0, b.0);
            Some(Box::new(move |gout| {
                let mut out = Vec::new();
                if ra {
                    out.push((pa, gout * &*vb));
                }
                if rb {
                    out.push((pb, gout * &*va));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ra || rb, back)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.unary(a, value, move |gout| gout.mapv(|g| g * c))
    }

    /// `1 - a`, used by the GRU convex combination.
    pub fn one_minus(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| T::one() - x);
        self.unary(a, value, |gout| gout.mapv(|g| -g))
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = arr0(va.iter().copied().sum::<T>()).into_dyn();
        let shape = va.shape().to_vec();
        self.unary(a, value, move |gout| {
            let g = gout[[]];
            ArrayD::from_elem(IxDyn(&shape), g)
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = T::from_usize(va.len()).expect("count fits scalar");
        let value = arr0(va.iter().copied().sum::<T>() / n).into_dyn();
        let shape = va.shape().to_vec();
        self.unary(a, value, move |gout| {
            let g = gout[[]] / n;
            ArrayD::from_elem(IxDyn(&shape), g)
        })
    }

    /// Per-sample mean over channel and spatial axes: `[N,C,H,W] -> [N]`.
    pub fn mean_per_sample(&self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 4, "mean_per_sample expects [N,C,H,W]");
        let n = va.shape()[0];
        let per = T::from_usize(va.len() / n).expect("count fits scalar");
        let mut value = Array1::<T>::zeros(n);
        for (i, sample) in va.axis_iter(Axis(0)).enumerate() {
            value[i] = sample.iter().copied().sum::<T>() / per;
        }
        let shape = va.shape().to_vec();
        self.unary(a, value.into_dyn(), move |gout| {
            let mut g = ArrayD::<T>::zeros(IxDyn(&shape));
            for (i, mut sample) in g.axis_iter_mut(Axis(0)).enumerate() {
                sample.fill(gout[[i]] / per);
            }
            g
        })
    }

    // ---- activations ----

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        let out = Arc::new(value);
        let cap = out.clone();
        let req = self.requires_grad(a);
        let back: Option<BackwardFn<T>> = if req {
            let pid = a.0;
            Some(Box::new(move |gout| {
                let mut g = gout.clone();
                azip!((g in &mut g, &s in &*cap) *g = *g * s * (T::one() - s));
                vec![(pid, g)]
            }))
        } else {
            None
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: out,
            requires_grad: req,
            backward: back,
        });
        Var(nodes.len() - 1)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        let out = Arc::new(value);
        let cap = out.clone();
        let req = self.requires_grad(a);
        let back: Option<BackwardFn<T>> = if req {
            let pid = a.0;
            Some(Box::new(move |gout| {
                let mut g = gout.clone();
                azip!((g in &mut g, &t in &*cap) *g = *g * (T::one() - t * t));
                vec![(pid, g)]
            }))
        } else {
            None
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: out,
            requires_grad: req,
            backward: back,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        let va = self.value(a);
        let value = va.mapv(|x| if x >= T::zero() { x } else { x * slope });
        self.unary(a, value, move |gout| {
            let mut g = gout.clone();
            azip!((g in &mut g, &x in &*va) if x < T::zero() { *g = *g * slope });
            g
        })
    }

    // ---- clamping and straight-through ----

    /// Elementwise clamp to `[lo, hi]`; gradient is passed through inside the
    /// interval and zero outside (the clamp subgradient). NaN propagates so
    /// divergence stays observable downstream.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let va = self.value(a);
        let value = va.mapv(|x| if x.is_nan() { x } else { x.max(lo).min(hi) });
        self.unary(a, value, move |gout| {
            let mut g = gout.clone();
            azip!((g in &mut g, &x in &*va) if x < lo || x > hi { *g = T::zero() });
            g
        })
    }

    /// Clamp with per-element bounds, same subgradient convention as [`Tape::clamp`].
    pub fn clamp_bounds(&self, a: Var, lo: &ArrayD<T>, hi: &ArrayD<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), lo.shape(), "clamp_bounds: lo shape");
        assert_eq!(va.shape(), hi.shape(), "clamp_bounds: hi shape");
        let mut value = (*va).clone();
        azip!((v in &mut value, &l in lo, &h in hi) if !v.is_nan() { *v = (*v).max(l).min(h) });
        let lo = lo.clone();
        let hi = hi.clone();
        self.unary(a, value, move |gout| {
            let mut g = gout.clone();
            azip!((g in &mut g, &x in &*va, &l in &lo, &h in &hi)
                if x < l || x > h { *g = T::zero() });
            g
        })
    }

    /// Straight-through estimator: the forward value is `f(a)`, the backward
    /// pass is the identity (upstream gradient handed through unchanged).
    pub fn straight_through<F>(&self, a: Var, f: F) -> Var
    where
        F: Fn(&ArrayD<T>) -> ArrayD<T>,
    {
        let va = self.value(a);
        let value = f(&va);
        assert_eq!(
            va.shape(),
            value.shape(),
            "straight_through must preserve shape"
        );
        self.unary(a, value, |gout| gout.clone())
    }

    // ---- structure ----

    /// Concatenates `[N,C_i,H,W]` blocks along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Arc<ArrayD<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_channels: incompatible shapes");
        let reqs: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let any = reqs.iter().any(|&r| r);
        let back: Option<BackwardFn<T>> = if any {
            let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
            let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
            Some(Box::new(move |gout| {
                let mut out = Vec::new();
                let mut offset = 0;
                for ((&id, &w), &req) in ids.iter().zip(&widths).zip(&reqs) {
                    if req {
                        let piece = gout
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + w))
                            .to_owned();
                        out.push((id, piece));
                    }
                    offset += w;
                }
                out
            }))
        } else {
            None
        };
        self.push(value, any, back)
    }

    // ---- convolution ----

    /// 2-D convolution with odd square kernels, stride 1 and zero "same"
    /// padding. `x` is `[N,Cin,H,W]`, `w` is `[Cout,Cin,k,k]`, `b` is `[Cout]`.
    pub fn conv2d_same(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let xs = vx.shape();
        let ws = vw.shape();
        assert_eq!(xs.len(), 4, "conv2d_same: input must be [N,Cin,H,W]");
        assert_eq!(ws.len(), 4, "conv2d_same: weight must be [Cout,Cin,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d_same: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d_same: kernel must be square");
        assert_eq!(ws[2] % 2, 1, "conv2d_same: kernel must be odd");
        let (n, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);

        let w2 = vw
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("weights contiguous")
            .to_owned();
        let vb = b.map(|bv| self.value(bv));
        if let Some(ref bb) = vb {
            assert_eq!(bb.len(), cout, "conv2d_same: bias length");
        }

        // One batch-wide GEMM: [Cout, Cin*k*k] x [Cin*k*k, N*H*W].
        let x4 = vx
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv input is 4d");
        let col = im2col_batch(&x4, k);
        let out2 = w2.dot(&col);
        drop(col);
        let out4 = out2
            .into_shape_with_order((cout, n, h, wid))
            .expect("gemm output reshape");
        let mut value = out4
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        if let Some(ref bb) = vb {
            for c in 0..cout {
                let beta = bb[[c]];
                value
                    .index_axis_mut(Axis(1), c)
                    .mapv_inplace(|v| v + beta);
            }
        }

        let (rx, rw) = (self.requires_grad(x), self.requires_grad(w));
        let rb = b.map(|bv| self.requires_grad(bv)).unwrap_or(false);
        let any = rx || rw || rb;
        let back: Option<BackwardFn<T>> = if any {
            let (px, pw) = (x.0, w.0);
            let pb = b.map(|bv| bv.0);
            Some(Box::new(move |gout| {
                let g = gout
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("conv grad is 4d");
                let mut out = Vec::new();
                if rw || rx {
                    // [Cout, N*H*W] contiguous copy of the upstream gradient.
                    let g2 = g
                        .permuted_axes([1, 0, 2, 3])
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((cout, n * h * wid))
                        .expect("grad reshape");
                    if rw {
                        let x4 = vx
                            .view()
                            .into_dimensionality::<Ix4>()
                            .expect("conv input is 4d");
                        let col = im2col_batch(&x4, k);
                        let dw = g2.dot(&col.t());
                        out.push((
                            pw,
                            dw.into_shape_with_order((cout, cin, k, k))
                                .expect("dw reshape")
                                .into_dyn(),
                        ));
                    }
                    if rx {
                        let dcol = w2.t().dot(&g2);
                        let dx = col2im_batch(&dcol, k, n, cin, h, wid);
                        out.push((px, dx.into_dyn()));
                    }
                }
                if rb {
                    let mut db = Array1::<T>::zeros(cout);
                    for c in 0..cout {
                        db[c] = g.index_axis(Axis(1), c).iter().copied().sum::<T>();
                    }
                    out.push((pb.expect("bias id"), db.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), any, back)
    }

    // ---- batch normalization ----

    /// Batch statistics mode. Returns the normalized output plus the biased
    /// per-channel batch mean and variance so callers can update running
    /// estimates.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, Array1<T>, Array1<T>) {
        let vx = self.value(x);
        let xs = vx.shape().to_vec();
        assert_eq!(xs.len(), 4, "batchnorm expects [N,C,H,W]");
        let (nb, c) = (xs[0], xs[1]);
        let count = T::from_usize(xs[0] * xs[2] * xs[3]).expect("count");
        let x4 = vx
            .view()
            .into_dimensionality::<Ix4>()
            .expect("batchnorm input is 4d");

        // Contiguous per-sample lanes keep the passes cache-friendly.
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ch in 0..c {
            let mut sum = T::zero();
            for i in 0..nb {
                sum = sum
                    + x4.index_axis(Axis(0), i)
                        .index_axis(Axis(0), ch)
                        .iter()
                        .copied()
                        .sum::<T>();
            }
            let m = sum / count;
            let mut acc = T::zero();
            for i in 0..nb {
                acc = acc
                    + x4.index_axis(Axis(0), i)
                        .index_axis(Axis(0), ch)
                        .iter()
                        .map(|&x| (x - m) * (x - m))
                        .sum::<T>();
            }
            mean[ch] = m;
            var[ch] = acc / count;
        }

        let vg = self.value(gamma);
        let vb = self.value(beta);
        assert_eq!(vg.len(), c, "batchnorm: gamma length");
        assert_eq!(vb.len(), c, "batchnorm: beta length");

        let mut xhat = (*vx).clone();
        let mut value = (*vx).clone();
        for i in 0..nb {
            for ch in 0..c {
                let inv = T::one() / (var[ch] + eps).sqrt();
                let m = mean[ch];
                let (g, b) = (vg[[ch]], vb[[ch]]);
                let mut xh = xhat.index_axis_mut(Axis(0), i);
                let mut xh = xh.index_axis_mut(Axis(0), ch);
                xh.mapv_inplace(|x| (x - m) * inv);
                let mut out = value.index_axis_mut(Axis(0), i);
                let mut out = out.index_axis_mut(Axis(0), ch);
                out.assign(&xh);
                out.mapv_inplace(|x| x * g + b);
            }
        }
        let xhat = Arc::new(xhat);

        let (rx, rg, rb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let any = rx || rg || rb;
        let back: Option<BackwardFn<T>> = if any {
            let (px, pg, pb) = (x.0, gamma.0, beta.0);
            let var = var.clone();
            let xhat = xhat.clone();
            Some(Box::new(move |gout| {
                let mut out = Vec::new();
                let (nb, cdim) = (xhat.shape()[0], xhat.shape()[1]);
                let mut dgamma = Array1::<T>::zeros(cdim);
                let mut dbeta = Array1::<T>::zeros(cdim);
                for i in 0..nb {
                    let gi = gout.index_axis(Axis(0), i);
                    let xi = xhat.index_axis(Axis(0), i);
                    for ch in 0..cdim {
                        let go = gi.index_axis(Axis(0), ch);
                        let xh = xi.index_axis(Axis(0), ch);
                        dbeta[ch] = dbeta[ch] + go.iter().copied().sum::<T>();
                        dgamma[ch] = dgamma[ch]
                            + go.iter().zip(xh.iter()).map(|(&g, &h)| g * h).sum::<T>();
                    }
                }
                if rx {
                    let mut dx = gout.clone();
                    for i in 0..nb {
                        for ch in 0..cdim {
                            let inv = T::one() / (var[ch] + eps).sqrt();
                            let g = vg[[ch]];
                            let mdy = dbeta[ch] / count;
                            let mdyx = dgamma[ch] / count;
                            let xi = xhat.index_axis(Axis(0), i);
                            let xh = xi.index_axis(Axis(0), ch);
                            let mut di = dx.index_axis_mut(Axis(0), i);
                            let mut d = di.index_axis_mut(Axis(0), ch);
                            azip!((d in &mut d, &h in &xh) {
                                *d = g * inv * (*d - mdy - h * mdyx);
                            });
                        }
                    }
                    out.push((px, dx));
                }
                if rg {
                    out.push((pg, dgamma.into_dyn()));
                }
                if rb {
                    out.push((pb, dbeta.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        let var_out = var.clone();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad: any,
            backward: back,
        });
        (Var(nodes.len() - 1), mean, var_out)
    }

    /// Frozen-statistics mode: per-channel affine map using running estimates.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        rmean: &Array1<T>,
        rvar: &Array1<T>,
        eps: T,
    ) -> Var {
        let vx = self.value(x);
        let xs = vx.shape().to_vec();
        assert_eq!(xs.len(), 4, "batchnorm expects [N,C,H,W]");
        let c = xs[1];
        assert_eq!(rmean.len(), c);
        assert_eq!(rvar.len(), c);
        let vg = self.value(gamma);
        let vb = self.value(beta);

        let inv: Array1<T> = rvar.mapv(|v| T::one() / (v + eps).sqrt());
        let nb = xs[0];
        let mut value = (*vx).clone();
        for i in 0..nb {
            let mut vi = value.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                let (m, iv, g, b) = (rmean[ch], inv[ch], vg[[ch]], vb[[ch]]);
                vi.index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|x| (x - m) * iv * g + b);
            }
        }

        let (rx, rg, rb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let any = rx || rg || rb;
        let back: Option<BackwardFn<T>> = if any {
            let (px, pg, pb) = (x.0, gamma.0, beta.0);
            let rmean = rmean.clone();
            Some(Box::new(move |gout| {
                let mut out = Vec::new();
                let (nb, cdim) = (vx.shape()[0], vx.shape()[1]);
                if rx {
                    let mut dx = gout.clone();
                    for i in 0..nb {
                        let mut di = dx.index_axis_mut(Axis(0), i);
                        for ch in 0..cdim {
                            let a = vg[[ch]] * inv[ch];
                            di.index_axis_mut(Axis(0), ch).mapv_inplace(|d| d * a);
                        }
                    }
                    out.push((px, dx));
                }
                if rg {
                    let mut dgamma = Array1::<T>::zeros(cdim);
                    for i in 0..nb {
                        let gi = gout.index_axis(Axis(0), i);
                        let xi = vx.index_axis(Axis(0), i);
                        for ch in 0..cdim {
                            let go = gi.index_axis(Axis(0), ch);
                            let xv = xi.index_axis(Axis(0), ch);
                            let (m, iv) = (rmean[ch], inv[ch]);
                            dgamma[ch] = dgamma[ch]
                                + go.iter()
                                    .zip(xv.iter())
                                    .map(|(&g, &x)| g * (x - m) * iv)
                                    .sum::<T>();
                        }
                    }
                    out.push((pg, dgamma.into_dyn()));
                }
                if rb {
                    let mut dbeta = Array1::<T>::zeros(cdim);
                    for i in 0..nb {
                        let gi = gout.index_axis(Axis(0), i);
                        for ch in 0..cdim {
                            dbeta[ch] =
                                dbeta[ch] + gi.index_axis(Axis(0), ch).iter().copied().sum::<T>();
                        }
                    }
                    out.push((pb, dbeta.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, any, back)
    }

    // ---- dense head ----

    /// Global average pool `[N,C,H,W] -> [N,C]`.
    pub fn global_mean_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let xs = vx.shape().to_vec();
        assert_eq!(xs.len(), 4, "global_mean_pool expects [N,C,H,W]");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let per = T::from_usize(h * w).expect("count");
        let mut value = Array2::<T>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                value[[i, ch]] = vx
                    .index_axis(Axis(0), i)
                    .index_axis(Axis(0), ch)
                    .iter()
                    .copied()
                    .sum::<T>()
                    / per;
            }
        }
        self.unary(x, value.into_dyn(), move |gout| {
            let mut dx = ArrayD::<T>::zeros(IxDyn(&xs));
            for i in 0..n {
                for ch in 0..c {
                    let g = gout[[i, ch]] / per;
                    dx.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), ch)
                        .fill(g);
                }
            }
            dx
        })
    }

    /// Fully connected layer: `x` is `[N,F]`, `w` is `[O,F]`, `b` is `[O]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x2 = vx
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear input [N,F]");
        let w2 = vw
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight [O,F]");
        let mut value = x2.dot(&w2.t());
        for mut row in value.rows_mut() {
            azip!((r in &mut row, &bb in &vb.view().into_dimensionality::<Ix1>().expect("bias [O]")) *r = *r + bb);
        }
        let (rx, rw, rb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        let any = rx || rw || rb;
        let back: Option<BackwardFn<T>> = if any {
            let (px, pw, pb) = (x.0, w.0, b.0);
            Some(Box::new(move |gout| {
                let g2 = gout
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("linear grad [N,O]");
                let mut out = Vec::new();
                if rx {
                    let w2 = vw.view().into_dimensionality::<Ix2>().expect("w [O,F]");
                    out.push((px, g2.dot(&w2).into_dyn()));
                }
                if rw {
                    let x2 = vx.view().into_dimensionality::<Ix2>().expect("x [N,F]");
                    out.push((pw, g2.t().dot(&x2).into_dyn()));
                }
                if rb {
                    let db = g2.sum_axis(Axis(0));
                    out.push((pb, db.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), any, back)
    }

    // ---- losses ----

    /// Mean binary cross entropy between probabilities and 0/1 targets.
    /// Probabilities are clamped to `[eps, 1-eps]`; outside the clamp the
    /// gradient is zero, matching the clamp subgradient.
    pub fn bce_mean(&self, probs: Var, targets: &ArrayD<T>, eps: T) -> Var {
        let vp = self.value(probs);
        assert_eq!(vp.shape(), targets.shape(), "bce_mean: shape mismatch");
        let m = T::from_usize(vp.len()).expect("count");
        let one = T::one();
        let mut total = T::zero();
        azip!((&p in &*vp, &t in targets) {
            let pc = if p.is_nan() { p } else { p.max(eps).min(one - eps) };
            total = total - (t * pc.ln() + (one - t) * (one - pc).ln());
        });
        let value = arr0(total / m).into_dyn();
        let targets = targets.clone();
        self.unary(probs, value, move |gout| {
            let g = gout[[]] / m;
            let mut dp = ArrayD::<T>::zeros(vp.raw_dim());
            azip!((d in &mut dp, &p in &*vp, &t in &targets) {
                if p >= eps && p <= one - eps {
                    let pc = p.max(eps).min(one - eps);
                    *d = g * (pc - t) / (pc * (one - pc));
                }
            });
            dp
        })
    }

    /// Mean squared error over all elements.
    pub fn mse_mean(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mse_mean: shape mismatch");
        let n = T::from_usize(va.len()).expect("count");
        let mut total = T::zero();
        azip!((&x in &*va, &y in &*vb) { let d = x - y; total = total + d * d; });
        let value = arr0(total / n).into_dyn();
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackwardFn<T>> = if ra || rb {
            let (pa, pb) = (a.0, b.0);
            let two = T::from_f64(2.0).expect("2");
            Some(Box::new(move |gout| {
                let g = gout[[]] * two / n;
                let mut out = Vec::new();
                if ra {
                    let mut d = ArrayD::<T>::zeros(va.raw_dim());
                    azip!((d in &mut d, &x in &*va, &y in &*vb) *d = g * (x - y));
                    out.push((pa, d));
                }
                if rb {
                    let mut d = ArrayD::<T>::zeros(va.raw_dim());
                    azip!((d in &mut d, &x in &*va, &y in &*vb) *d = g * (y - x));
                    out.push((pb, d));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ra || rb, back)
    }

    /// Mean softmax cross entropy for `[N,K]` logits against class indices.
    pub fn cross_entropy_mean(&self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value(logits);
        let l2 = vl
            .view()
            .into_dimensionality::<Ix2>()
            .expect("logits [N,K]");
        let (n, k) = l2.dim();
        assert_eq!(labels.len(), n, "cross_entropy_mean: label count");
        let nf = T::from_usize(n).expect("count");
        let mut total = T::zero();
        let mut softmax = Array2::<T>::zeros((n, k));
        for i in 0..n {
            let row = l2.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for j in 0..k {
                let e = (row[j] - mx).exp();
                softmax[[i, j]] = e;
                denom = denom + e;
            }
            for j in 0..k {
                softmax[[i, j]] = softmax[[i, j]] / denom;
            }
            total = total + denom.ln() + mx - row[labels[i]];
        }
        let value = arr0(total / nf).into_dyn();
        let labels = labels.to_vec();
        self.unary(logits, value, move |gout| {
            let g = gout[[]] / nf;
            let mut d = softmax.clone();
            for (i, &y) in labels.iter().enumerate() {
                d[[i, y]] = d[[i, y]] - T::one();
            }
            d.mapv_inplace(|v| v * g);
            d.into_dyn()
        })
    }

    /// Detection penalty from `[N,2]` (cover, stego) logits: the stego logit
    /// summed over samples where it exceeds the cover logit, else zero. The
    /// undetected branch is constant, so its gradient is zero.
    pub fn detection_penalty(&self, logits: Var) -> Var {
        let vl = self.value(logits);
        let l2 = vl
            .view()
            .into_dimensionality::<Ix2>()
            .expect("logits [N,2]");
        let (n, k) = l2.dim();
        assert_eq!(k, 2, "detection_penalty expects 2 logits");
        let mut total = T::zero();
        let mut detected = vec![false; n];
        for i in 0..n {
            if l2[[i, 1]] > l2[[i, 0]] {
                detected[i] = true;
                total = total + l2[[i, 1]];
            }
        }
        let value = arr0(total).into_dyn();
        self.unary(logits, value, move |gout| {
            let g = gout[[]];
            let mut d = Array2::<T>::zeros((n, 2));
            for (i, &hit) in detected.iter().enumerate() {
                if hit {
                    d[[i, 1]] = g;
                }
            }
            d.into_dyn()
        })
    }

    // ---- backward ----

    /// Backpropagates from a scalar root, returning gradients for every node
    /// that required them.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), T::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &nodes[id].backward {
                for (pid, contrib) in back(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc = &*acc + &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Unrolls a `[N,C,H,W]` batch into a `[C*k*k, N*H*W]` patch matrix for
/// stride-1 same-padding convolution, one GEMM per conv. Works on the raw
/// slices; every cell is written exactly once (copy or explicit zero).
fn im2col_batch<T: Scalar>(x: &ArrayView4<T>, k: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let p = k / 2;
    let hw = h * w;
    let cols = n * hw;
    let std;
    let xs: &[T] = match x.as_slice() {
        Some(s) => s,
        None => {
            std = x.as_standard_layout().into_owned();
            std.as_slice().expect("standard layout")
        }
    };
    let len = c * k * k * cols;
    let mut buf: Vec<T> = Vec::with_capacity(len);
    let out = buf.as_mut_ptr();
    // Every cell of the buffer is written exactly once below (interior runs
    // are copied, padding gaps are zeroed), after which set_len is sound.
    unsafe {
        let zero_run = |off: usize, count: usize| {
            for j in 0..count {
                out.add(off + j).write(T::zero());
            }
        };
        for i in 0..n {
            let img = &xs[i * c * hw..(i + 1) * c * hw];
            let base = i * hw;
            for ch in 0..c {
                let plane = &img[ch * hw..(ch + 1) * hw];
                for dy in 0..k {
                    for dx in 0..k {
                        let row = (ch * k + dy) * k + dx;
                        let seg = row * cols + base;
                        let x0 = p.saturating_sub(dx);
                        let x1 = (w + p - dx).min(w).max(x0);
                        for y in 0..h {
                            let iy = y as isize + dy as isize - p as isize;
                            let dst = seg + y * w;
                            if iy < 0 || iy >= h as isize || x0 == x1 {
                                zero_run(dst, w);
                                continue;
                            }
                            zero_run(dst, x0);
                            let src_off = iy as usize * w + x0 + dx - p;
                            std::ptr::copy_nonoverlapping(
                                plane.as_ptr().add(src_off),
                                out.add(dst + x0),
                                x1 - x0,
                            );
                            zero_run(dst + x1, w - x1);
                        }
                    }
                }
            }
        }
        buf.set_len(len);
    }
    Array2::from_shape_vec((c * k * k, cols), buf).expect("buffer sized to shape")
}

/// Adjoint of [`im2col_batch`]: folds a patch-matrix gradient back onto a
/// `[N,C,H,W]` input gradient. The center tap covers every cell, so it
/// initializes the output and the shifted taps accumulate onto it.
fn col2im_batch<T: Scalar>(dcol: &Array2<T>, k: usize, n: usize, c: usize, h: usize, w: usize) -> Array4<T> {
    let p = k / 2;
    let hw = h * w;
    let cols = n * hw;
    let src_all = dcol.as_slice().expect("gemm output is standard layout");
    let len = n * c * hw;
    let mut buf: Vec<T> = Vec::with_capacity(len);
    // Initialize from the center tap: its source segment is a full plane.
    unsafe {
        let out = buf.as_mut_ptr();
        for i in 0..n {
            let base = i * hw;
            for ch in 0..c {
                let row = (ch * k + p) * k + p;
                std::ptr::copy_nonoverlapping(
                    src_all.as_ptr().add(row * cols + base),
                    out.add(i * c * hw + ch * hw),
                    hw,
                );
            }
        }
        buf.set_len(len);
    }
    for i in 0..n {
        let base = i * hw;
        let dimg = &mut buf[i * c * hw..(i + 1) * c * hw];
        for ch in 0..c {
            let plane = &mut dimg[ch * hw..(ch + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    if dy == p && dx == p {
                        continue;
                    }
                    let row = (ch * k + dy) * k + dx;
                    let src = &src_all[row * cols + base..row * cols + base + hw];
                    let x0 = p.saturating_sub(dx);
                    let x1 = (w + p - dx).min(w);
                    for y in 0..h {
                        let iy = y as isize + dy as isize - p as isize;
                        if iy < 0 || iy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let dst_off = iy as usize * w + x0 + dx - p;
                        let s = &src[y * w + x0..y * w + x1];
                        let d = &mut plane[dst_off..dst_off + (x1 - x0)];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv = *dv + *sv;
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), buf).expect("buffer sized to shape")
}
