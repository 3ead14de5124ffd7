//! Differentiable op builders.
//!
//! Each builder runs the forward kernel from [`crate::tensor::ops`], then
//! records an adjoint closure. Closures receive (grad_out, out, parents,
//! parent_needs_grad) and skip gradients nobody asked for.

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{self as k, Activation, ConvSpec, PoolKind};
use crate::tensor::Tensor;

/// Zero tensor of `shape` with `g` pasted at `[from, from+len)` along `axis`.
fn unslice<T: Scalar>(
    g: &Tensor<T>,
    shape: &[usize],
    axis: usize,
    from: usize,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(shape.to_vec());
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let n_axis = shape[axis];
    let len = g.shape()[axis];
    let gd = g.data();
    let od = out.data_mut();
    for o in 0..outer {
        let src = o * len * inner;
        let dst = (o * n_axis + from) * inner;
        od[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    Ok(out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])),
        ))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, _, inp, needs| {
                let ga = if needs[0] { Some(g.mul(inp[1])?) } else { None };
                let gb = if needs[1] { Some(g.mul(inp[0])?) } else { None };
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).zip(self.value(b), |x, y| x / y)?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g, out, inp, needs| {
                let ga = if needs[0] {
                    Some(g.zip(inp[1], |gv, bv| gv / bv)?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    let t = g.mul(out)?;
                    Some(t.zip(inp[1], |gv, bv| -gv / bv)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Elementwise y = mul * x + add.
    pub fn affine(&mut self, x: Value, mul: T, add: T) -> Value {
        let out = self.value(x).map(|v| mul * v + add);
        self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _, _| Ok(vec![Some(g.scale(mul))])),
        )
    }

    pub fn neg(&mut self, x: Value) -> Value {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn exp(&mut self, x: Value) -> Value {
        let out = self.value(x).map(|v| v.exp());
        self.push_op(
            out,
            vec![x],
            Box::new(|g, out, _, _| Ok(vec![Some(g.mul(out)?)])),
        )
    }

    pub fn activation(&mut self, x: Value, kind: Activation) -> Value {
        let out = k::activation(self.value(x), kind);
        self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, inp, _| {
                Ok(vec![Some(g.zip(inp[0], |gv, xv| {
                    gv * k::activation_deriv_scalar(kind, xv)
                })?)])
            }),
        )
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.activation(x, Activation::Relu)
    }
    pub fn gelu(&mut self, x: Value) -> Value {
        self.activation(x, Activation::Gelu)
    }
    pub fn silu(&mut self, x: Value) -> Value {
        self.activation(x, Activation::Silu)
    }
    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.activation(x, Activation::Sigmoid)
    }
    pub fn softplus(&mut self, x: Value) -> Value {
        self.activation(x, Activation::Softplus)
    }

    /// Reduce all elements to a rank-1 scalar.
    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(|g, _, inp, _| {
                let seed = g.data()[0];
                Ok(vec![Some(Tensor::full(inp[0].shape().to_vec(), seed))])
            }),
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Value,
        w: Value,
        b: Option<Value>,
        spec: &ConvSpec,
    ) -> Result<Value> {
        let out = k::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let spec = spec.clone();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push_op(
            out,
            parents,
            Box::new(move |g, _, inp, needs| {
                let want_bias = needs.len() > 2 && needs[2];
                let (gx, gw, gb) = k::conv2d_backward(inp[0], inp[1], &spec, g, want_bias)?;
                let mut grads = vec![
                    if needs[0] { Some(gx) } else { None },
                    if needs[1] { Some(gw) } else { None },
                ];
                if needs.len() > 2 {
                    grads.push(gb);
                }
                Ok(grads)
            }),
        ))
    }

    pub fn pool2d(
        &mut self,
        x: Value,
        kind: PoolKind,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let (out, argmax) = k::pool2d(self.value(x), kind, ksize, stride, pad)?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, inp, _| {
                Ok(vec![Some(k::pool2d_backward(
                    inp[0],
                    kind,
                    ksize,
                    stride,
                    pad,
                    argmax.as_deref(),
                    g,
                )?)])
            }),
        ))
    }

    pub fn upsample2x(&mut self, x: Value) -> Result<Value> {
        let out = k::upsample2x(self.value(x))?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(|g, _, inp, _| {
                Ok(vec![Some(k::upsample2x_backward(inp[0].shape(), g)?)])
            }),
        ))
    }

    pub fn linear(&mut self, x: Value, w: Value, b: Option<Value>) -> Result<Value> {
        let out = k::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push_op(
            out,
            parents,
            Box::new(move |g, _, inp, needs| {
                let want_bias = needs.len() > 2 && needs[2];
                let (gx, gw, gb) = k::linear_backward(inp[0], inp[1], g, want_bias)?;
                let mut grads = vec![
                    if needs[0] { Some(gx) } else { None },
                    if needs[1] { Some(gw) } else { None },
                ];
                if needs.len() > 2 {
                    grads.push(gb);
                }
                Ok(grads)
            }),
        ))
    }

    /// Layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: T) -> Result<Value> {
        let (out, xhat, inv_std) =
            k::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, _, inp, _| {
                let (gx, ggamma, gbeta) = k::layer_norm_backward(&xhat, &inv_std, inp[1], g)?;
                Ok(vec![Some(gx), Some(ggamma), Some(gbeta)])
            }),
        ))
    }

    /// Batch norm with batch statistics; also returns the batch mean/var so
    /// the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        eps: T,
    ) -> Result<(Value, Tensor<T>, Tensor<T>)> {
        let (out, xhat, inv_std, mean, var) =
            k::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, _, inp, _| {
                let (gx, ggamma, gbeta) =
                    k::batch_norm_train_backward(&xhat, &inv_std, inp[1], g)?;
                Ok(vec![Some(gx), Some(ggamma), Some(gbeta)])
            }),
        );
        Ok((v, mean, var))
    }

    /// Batch norm with frozen running statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Value> {
        let out = k::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let rm = running_mean.clone();
        let rv = running_var.clone();
        Ok(self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, _, inp, _| {
                let (n, c, h, w) = inp[0].dims4()?;
                let inv: Vec<T> = rv.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
                let gd = inp[1].data();
                let xd = inp[0].data();
                let gyd = g.data();
                let mut gx = vec![T::zero(); inp[0].numel()];
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for o in 0..h * w {
                            let xh = (xd[base + o] - rm.data()[ci]) * inv[ci];
                            gx[base + o] = gyd[base + o] * gd[ci] * inv[ci];
                            ggamma[ci] += gyd[base + o] * xh;
                            gbeta[ci] += gyd[base + o];
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(inp[0].shape().to_vec(), gx)?),
                    Some(Tensor::new(vec![c], ggamma)?),
                    Some(Tensor::new(vec![c], gbeta)?),
                ])
            }),
        ))
    }

    /// Global average pool [N,C,H,W] -> [N,C].
    pub fn gap(&mut self, x: Value) -> Result<Value> {
        let out = k::global_avg_pool(self.value(x))?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(|g, _, inp, _| {
                let (n, c, h, w) = inp[0].dims4()?;
                let inv = T::from_usize(h * w).recip();
                let scaled = g.scale(inv);
                let mut gx = Tensor::zeros(vec![n, c, h, w]);
                for p in 0..n * c {
                    let v = scaled.data()[p];
                    for o in &mut gx.data_mut()[p * h * w..(p + 1) * h * w] {
                        *o = v;
                    }
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }

    /// Global max pool [N,C,H,W] -> [N,C].
    pub fn gmp(&mut self, x: Value) -> Result<Value> {
        let (out, argmax) = k::global_max_pool(self.value(x))?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, inp, _| {
                let (n, c, h, w) = inp[0].dims4()?;
                let mut gx = Tensor::zeros(vec![n, c, h, w]);
                for p in 0..n * c {
                    gx.data_mut()[p * h * w + argmax[p] as usize] = g.data()[p];
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }

    /// Same-padded 1-D convolution along channels of [N,C].
    pub fn conv1d_channels(&mut self, x: Value, kernel: Value) -> Result<Value> {
        let out = k::conv1d_channels(self.value(x), self.value(kernel))?;
        Ok(self.push_op(
            out,
            vec![x, kernel],
            Box::new(|g, _, inp, _| {
                let (gx, gk) = k::conv1d_channels_backward(inp[0], inp[1], g)?;
                Ok(vec![Some(gx), Some(gk)])
            }),
        ))
    }

    /// [N,C] -> [N,C,H,W].
    pub fn broadcast_nc(&mut self, s: Value, h: usize, w: usize) -> Result<Value> {
        let out = k::broadcast_nc(self.value(s), h, w)?;
        Ok(self.push_op(
            out,
            vec![s],
            Box::new(|g, _, _, _| Ok(vec![Some(k::reduce_spatial(g)?)])),
        ))
    }

    /// [N,1,H,W] -> [N,C,H,W].
    pub fn broadcast_spatial_map(&mut self, m: Value, c: usize) -> Result<Value> {
        let out = k::broadcast_spatial_map(self.value(m), c)?;
        Ok(self.push_op(
            out,
            vec![m],
            Box::new(|g, _, _, _| Ok(vec![Some(k::reduce_channels(g)?)])),
        ))
    }

    /// [C] -> [N,C,H,W].
    pub fn broadcast_channel_vec(
        &mut self,
        v: Value,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<Value> {
        let out = k::broadcast_channel_vec(self.value(v), n, h, w)?;
        Ok(self.push_op(
            out,
            vec![v],
            Box::new(|g, _, _, _| Ok(vec![Some(k::reduce_to_channel_vec(g)?)])),
        ))
    }

    /// [.., 1] -> [.., k].
    pub fn expand_last(&mut self, x: Value, k_: usize) -> Result<Value> {
        let out = k::expand_last(self.value(x), k_)?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(|g, _, _, _| Ok(vec![Some(k::sum_last(g)?)])),
        ))
    }

    /// [D] -> [prefix.., D].
    pub fn broadcast_vec_rows(&mut self, v: Value, prefix: &[usize]) -> Result<Value> {
        let out = k::broadcast_vec_rows(self.value(v), prefix)?;
        Ok(self.push_op(
            out,
            vec![v],
            Box::new(|g, _, _, _| Ok(vec![Some(k::reduce_vec_rows(g)?)])),
        ))
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors, axis)?;
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.push_op(
            out,
            parts.to_vec(),
            Box::new(move |g, _, _, needs| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for (i, &sz) in sizes.iter().enumerate() {
                    grads.push(if needs[i] {
                        Some(g.slice_axis(axis, off, off + sz)?)
                    } else {
                        None
                    });
                    off += sz;
                }
                Ok(grads)
            }),
        ))
    }

    pub fn slice(&mut self, x: Value, axis: usize, from: usize, to: usize) -> Result<Value> {
        let out = self.value(x).slice_axis(axis, from, to)?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, inp, _| {
                Ok(vec![Some(unslice(g, inp[0].shape(), axis, from)?)])
            }),
        ))
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(|g, _, inp, _| Ok(vec![Some(g.reshape(inp[0].shape().to_vec())?)])),
        ))
    }

    pub fn permute(&mut self, x: Value, perm: &[usize]) -> Result<Value> {
        let out = self.value(x).permute(perm)?;
        let inv = inverse_perm(perm);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _, _| Ok(vec![Some(g.permute(&inv)?)])),
        ))
    }

    pub fn reverse_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        let out = self.value(x).reverse_axis(axis)?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _, _| Ok(vec![Some(g.reverse_axis(axis)?)])),
        ))
    }

    /// Mean over the channel axis: [N,C,H,W] -> [N,1,H,W].
    pub fn channel_mean(&mut self, x: Value) -> Result<Value> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let reduced = k::reduce_channels(self.value(x))?;
        let out = reduced.scale(T::from_usize(c).recip());
        let _ = (n, h, w);
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, inp, _| {
                let (_, c, _, _) = inp[0].dims4()?;
                let scaled = g.scale(T::from_usize(c).recip());
                Ok(vec![Some(k::broadcast_spatial_map(&scaled, c)?)])
            }),
        ))
    }

    /// Max over the channel axis: [N,C,H,W] -> [N,1,H,W].
    pub fn channel_max(&mut self, x: Value) -> Result<Value> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![T::neg_infinity(); n * h * w];
        let mut arg = vec![0u32; n * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for o in 0..h * w {
                    let v = xd[base + o];
                    if v > out[ni * h * w + o] {
                        out[ni * h * w + o] = v;
                        arg[ni * h * w + o] = ci as u32;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, inp, _| {
                let (n, c, h, w) = inp[0].dims4()?;
                let mut gx = Tensor::zeros(vec![n, c, h, w]);
                let gd = g.data();
                for ni in 0..n {
                    for o in 0..h * w {
                        let ci = arg[ni * h * w + o] as usize;
                        gx.data_mut()[(ni * c + ci) * h * w + o] = gd[ni * h * w + o];
                    }
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }

    /// NCHW -> [N, H*W, C] token view (row-major spatial flattening).
    pub fn to_tokens(&mut self, x: Value) -> Result<Value> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let p = self.permute(x, &[0, 2, 3, 1])?;
        self.reshape(p, &[n, h * w, c])
    }

    /// [N, H*W, C] token view -> NCHW.
    pub fn from_tokens(&mut self, t: Value, h: usize, w: usize) -> Result<Value> {
        let (n, l, c) = self.value(t).dims3()?;
        if l != h * w {
            return Err(Error::ShapeMismatch(format!(
                "token count {l} != {h}x{w}"
            )));
        }
        let r = self.reshape(t, &[n, h, w, c])?;
        self.permute(r, &[0, 3, 1, 2])
    }
}
