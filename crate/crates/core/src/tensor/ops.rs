//! Forward and backward kernels for the neural-network primitives.
//!
//! Accumulation order is fixed everywhere (input-channel outer, then kernel
//! row-major, then spatial) so results are bit-reproducible and match the
//! brute-force oracles used in tests. Backward kernels mirror their forward
//! loop nests. Heavy convolution loops parallelize over disjoint output
//! planes; per-element accumulation order does not depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    /// Stride-1 convolution with per-side padding `dilation*(k-1)/2`, which
    /// preserves spatial dims for odd kernels.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "same-padding requires odd kernels, got {kernel_h}x{kernel_w}"
            )));
        }
        let spec = Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride: 1,
            dilation,
            groups,
            pad_h: dilation * (kernel_h - 1) / 2,
            pad_w: dilation * (kernel_w - 1) / 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 1x1 convolution (channel mixing only).
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            dilation: 1,
            groups: 1,
            pad_h: 0,
            pad_w: 0,
        }
    }

    /// Depthwise same-padding convolution (groups == channels).
    pub fn depthwise_same(
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::same(channels, channels, kernel_h, kernel_w, dilation, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(
                "stride, dilation, groups must be positive".into(),
            ));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArgument("kernel dims must be positive".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Output spatial dims for an input of `h x w`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let eff_h = self.dilation * (self.kernel_h - 1) + 1;
        let eff_w = self.dilation * (self.kernel_w - 1) + 1;
        if h + 2 * self.pad_h < eff_h || w + 2 * self.pad_w < eff_w {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} too small for kernel {}x{} dilation {} pad {}x{}",
                self.kernel_h, self.kernel_w, self.dilation, self.pad_h, self.pad_w
            )));
        }
        Ok((
            (h + 2 * self.pad_h - eff_h) / self.stride + 1,
            (w + 2 * self.pad_w - eff_w) / self.stride + 1,
        ))
    }

    fn check_tensors<T: Scalar>(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
    ) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let (_, cin, h, win) = x.dims4()?;
        if cin != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {cin} channels, spec expects {}",
                self.in_channels
            )));
        }
        let wshape = w.shape();
        let expect = [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ];
        if wshape != expect {
            return Err(Error::ShapeMismatch(format!(
                "weight shape {wshape:?}, spec expects {expect:?}"
            )));
        }
        if let Some(b) = b {
            if b.shape() != [self.out_channels] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?}, expected [{}]",
                    b.shape(),
                    self.out_channels
                )));
            }
        }
        let (oh, ow) = self.out_hw(h, win)?;
        Ok((h, oh.max(1), ow.max(1)))
    }
}

/// Valid output range along one spatial axis for a fixed kernel tap.
/// Returns `(lo, hi)` with `lo > hi` meaning empty.
#[inline]
fn tap_range(out_n: usize, in_n: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let off = tap as isize - pad as isize; // input index at out 0
    let lo = if off >= 0 {
        0
    } else {
        (((-off) as usize) + stride - 1) / stride
    };
    let max_in = in_n as isize - 1 - off;
    if max_in < 0 {
        return (1, 0);
    }
    let hi = ((max_in as usize) / stride).min(out_n.saturating_sub(1));
    (lo, hi)
}

/// 2-D cross-correlation with stride, dilation, and groups.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.check_tensors(x, w, b)?;
    let (n, _, h, win) = x.dims4()?;
    let (oh, ow) = spec.out_hw(h, win)?;
    let cout = spec.out_channels;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = cout / spec.groups;
    let (s, d, ph, pw) = (spec.stride, spec.dilation, spec.pad_h, spec.pad_w);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); n * cout * oh * ow];

    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pi, plane)| {
        let ni = pi / cout;
        let oc = pi % cout;
        let g = oc / cout_g;
        if let Some(b) = b {
            let bv = b.data()[oc];
            for v in plane.iter_mut() {
                *v = bv;
            }
        }
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            let xp = &xd[(ni * spec.in_channels + ic) * h * win..][..h * win];
            let wrow = &wd[((oc * cin_g + icg) * kh) * kw..][..kh * kw];
            for ki in 0..kh {
                let (oh_lo, oh_hi) = tap_range(oh, h, s, ph, ki * d);
                if oh_lo > oh_hi {
                    continue;
                }
                for kj in 0..kw {
                    let wv = wrow[ki * kw + kj];
                    let (ow_lo, ow_hi) = tap_range(ow, win, s, pw, kj * d);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    let off_w = (kj * d) as isize - pw as isize;
                    for oi in oh_lo..=oh_hi {
                        let ih = oi * s + ki * d - ph;
                        let xrow = &xp[ih * win..][..win];
                        let orow = &mut plane[oi * ow..][..ow];
                        if s == 1 {
                            let x0 = (ow_lo as isize + off_w) as usize;
                            let len = ow_hi - ow_lo + 1;
                            let xs = &xrow[x0..x0 + len];
                            let os = &mut orow[ow_lo..=ow_hi];
                            for (o, &xv) in os.iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for oj in ow_lo..=ow_hi {
                                let iw = (oj * s) as isize + off_w;
                                *unsafe { orow.get_unchecked_mut(oj) } +=
                                    wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    let y = Tensor::new(vec![n, cout, oh, ow], out)?;
    debug_assert!(y.is_finite(), "conv2d produced non-finite values");
    Ok(y)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    gy: &Tensor<T>,
    want_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, cin, h, win) = x.dims4()?;
    let (_, cout, oh, ow) = gy.dims4()?;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let (s, d, ph, pw) = (spec.stride, spec.dilation, spec.pad_h, spec.pad_w);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();

    // d/dx: one task per (n, ic) input plane.
    let mut gx = vec![T::zero(); n * cin * h * win];
    gx.par_chunks_mut(h * win).enumerate().for_each(|(pi, plane)| {
        let ni = pi / cin;
        let ic = pi % cin;
        let g = ic / cin_g;
        let icg = ic % cin_g;
        for ocg in 0..cout_g {
            let oc = g * cout_g + ocg;
            let gp = &gyd[(ni * cout + oc) * oh * ow..][..oh * ow];
            let wrow = &wd[((oc * cin_g + icg) * kh) * kw..][..kh * kw];
            for ki in 0..kh {
                let (oh_lo, oh_hi) = tap_range(oh, h, s, ph, ki * d);
                if oh_lo > oh_hi {
                    continue;
                }
                for kj in 0..kw {
                    let wv = wrow[ki * kw + kj];
                    let (ow_lo, ow_hi) = tap_range(ow, win, s, pw, kj * d);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    let off_w = (kj * d) as isize - pw as isize;
                    for oi in oh_lo..=oh_hi {
                        let ih = oi * s + ki * d - ph;
                        let grow = &gp[oi * ow..][..ow];
                        let prow = &mut plane[ih * win..][..win];
                        if s == 1 {
                            let x0 = (ow_lo as isize + off_w) as usize;
                            let len = ow_hi - ow_lo + 1;
                            let ps = &mut prow[x0..x0 + len];
                            let gs = &grow[ow_lo..=ow_hi];
                            for (p, &gv) in ps.iter_mut().zip(gs) {
                                *p += wv * gv;
                            }
                        } else {
                            for oj in ow_lo..=ow_hi {
                                let iw = ((oj * s) as isize + off_w) as usize;
                                prow[iw] += wv * grow[oj];
                            }
                        }
                    }
                }
            }
        }
    });

    // d/dw: one task per output-channel row of the weight. The inner dot
    // product uses four fixed accumulator lanes (deterministic order,
    // SIMD-friendly).
    let mut gw = vec![T::zero(); cout * cin_g * kh * kw];
    gw.par_chunks_mut(cin_g * kh * kw).enumerate().for_each(|(oc, wgrad)| {
        let g = oc / cout_g;
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            for ki in 0..kh {
                let (oh_lo, oh_hi) = tap_range(oh, h, s, ph, ki * d);
                if oh_lo > oh_hi {
                    continue;
                }
                for kj in 0..kw {
                    let (ow_lo, ow_hi) = tap_range(ow, win, s, pw, kj * d);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    let off_w = (kj * d) as isize - pw as isize;
                    let mut lanes = [T::zero(); 4];
                    let mut tail = T::zero();
                    for ni in 0..n {
                        let xp = &xd[(ni * cin + ic) * h * win..][..h * win];
                        let gp = &gyd[(ni * cout + oc) * oh * ow..][..oh * ow];
                        for oi in oh_lo..=oh_hi {
                            let ih = oi * s + ki * d - ph;
                            let xrow = &xp[ih * win..][..win];
                            let grow = &gp[oi * ow..][..ow];
                            if s == 1 {
                                let x0 = (ow_lo as isize + off_w) as usize;
                                let len = ow_hi - ow_lo + 1;
                                let gs = &grow[ow_lo..ow_lo + len];
                                let xs = &xrow[x0..x0 + len];
                                let mut j = 0;
                                while j + 4 <= len {
                                    lanes[0] += gs[j] * xs[j];
                                    lanes[1] += gs[j + 1] * xs[j + 1];
                                    lanes[2] += gs[j + 2] * xs[j + 2];
                                    lanes[3] += gs[j + 3] * xs[j + 3];
                                    j += 4;
                                }
                                while j < len {
                                    tail += gs[j] * xs[j];
                                    j += 1;
                                }
                            } else {
                                for oj in ow_lo..=ow_hi {
                                    let iw = ((oj * s) as isize + off_w) as usize;
                                    tail += grow[oj] * xrow[iw];
                                }
                            }
                        }
                    }
                    wgrad[(icg * kh + ki) * kw + kj] =
                        ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + tail;
                }
            }
        }
    });

    let gb = if want_bias {
        let mut gb = vec![T::zero(); cout];
        for ni in 0..n {
            for (oc, gbv) in gb.iter_mut().enumerate() {
                let gp = &gyd[(ni * cout + oc) * oh * ow..][..oh * ow];
                for &v in gp {
                    *gbv += v;
                }
            }
        }
        Some(Tensor::new(vec![cout], gb)?)
    } else {
        None
    };

    Ok((
        Tensor::new(vec![n, cin, h, win], gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        gb,
    ))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// 2-D pooling. Average pooling divides by the count of in-bounds window
/// elements; max pooling ignores padded positions entirely. For max pooling
/// the returned index vector holds, per output element, the flat offset of
/// the winning input element within its (n, c) plane.
pub fn pool2d<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Option<Vec<u32>>)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool kernel/stride must be positive".into()));
    }
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::InvalidArgument(format!(
            "pool window {k} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    if pad >= k {
        return Err(Error::InvalidArgument("pool padding must be < window".into()));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = if matches!(kind, PoolKind::Max) {
        vec![0u32; n * c * oh * ow]
    } else {
        Vec::new()
    };

    for p in 0..n * c {
        let xp = &xd[p * h * w..][..h * w];
        let op_base = p * oh * ow;
        for oi in 0..oh {
            for oj in 0..ow {
                let ih0 = (oi * stride) as isize - pad as isize;
                let iw0 = (oj * stride) as isize - pad as isize;
                match kind {
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0u32;
                        for ki in 0..k {
                            let ih = ih0 + ki as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = iw0 + kj as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let idx = ih as usize * w + iw as usize;
                                let v = xp[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        out[op_base + oi * ow + oj] = best;
                        argmax[op_base + oi * ow + oj] = best_idx;
                    }
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        let mut count = 0usize;
                        for ki in 0..k {
                            let ih = ih0 + ki as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = iw0 + kj as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += xp[ih as usize * w + iw as usize];
                                count += 1;
                            }
                        }
                        out[op_base + oi * ow + oj] = acc / T::from_usize(count);
                    }
                }
            }
        }
    }
    let y = Tensor::new(vec![n, c, oh, ow], out)?;
    Ok((y, if argmax.is_empty() { None } else { Some(argmax) }))
}

pub fn pool2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    pad: usize,
    argmax: Option<&[u32]>,
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (_, _, oh, ow) = gy.dims4()?;
    let gyd = gy.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let gxp = &mut gx[p * h * w..][..h * w];
        let gp = &gyd[p * oh * ow..][..oh * ow];
        match kind {
            PoolKind::Max => {
                let am = &argmax.expect("max pool backward needs saved argmax")
                    [p * oh * ow..][..oh * ow];
                for (o, &g) in gp.iter().enumerate() {
                    gxp[am[o] as usize] += g;
                }
            }
            PoolKind::Avg => {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ih0 = (oi * stride) as isize - pad as isize;
                        let iw0 = (oj * stride) as isize - pad as isize;
                        let mut count = 0usize;
                        for ki in 0..k {
                            let ih = ih0 + ki as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = iw0 + kj as isize;
                                if iw >= 0 && iw < w as isize {
                                    count += 1;
                                }
                            }
                        }
                        let share = gp[oi * ow + oj] / T::from_usize(count);
                        for ki in 0..k {
                            let ih = ih0 + ki as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = iw0 + kj as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                gxp[ih as usize * w + iw as usize] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gx)
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling (half-pixel centers, clamped source indices)
// ---------------------------------------------------------------------------

/// Source taps for one output coordinate at 2x scaling.
#[inline]
fn up2_taps(o: usize, in_n: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let f = src.floor();
    let wfrac = src - f;
    let i0 = (f.max(0.0) as usize).min(in_n - 1);
    let i1 = ((f + 1.0).max(0.0) as usize).min(in_n - 1);
    (i0, i1, wfrac)
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let xp = &xd[p * h * w..][..h * w];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for oi in 0..oh {
            let (y0, y1, wy) = up2_taps(oi, h);
            let wy = T::from_f64(wy);
            for oj in 0..ow {
                let (x0, x1, wx) = up2_taps(oj, w);
                let wx = T::from_f64(wx);
                let a = xp[y0 * w + x0];
                let b = xp[y0 * w + x1];
                let cc = xp[y1 * w + x0];
                let d = xp[y1 * w + x1];
                let top = a + wx * (b - a);
                let bot = cc + wx * (d - cc);
                op[oi * ow + oj] = top + wy * (bot - top);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2x_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x_shape else {
        return Err(Error::ShapeMismatch("upsample backward needs rank-4".into()));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    let (_, _, oh, ow) = gy.dims4()?;
    let gyd = gy.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let gxp = &mut gx[p * h * w..][..h * w];
        let gp = &gyd[p * oh * ow..][..oh * ow];
        for oi in 0..oh {
            let (y0, y1, wy) = up2_taps(oi, h);
            let wy = T::from_f64(wy);
            for oj in 0..ow {
                let (x0, x1, wx) = up2_taps(oj, w);
                let wx = T::from_f64(wx);
                let g = gp[oi * ow + oj];
                let one = T::one();
                gxp[y0 * w + x0] += (one - wy) * (one - wx) * g;
                gxp[y0 * w + x1] += (one - wy) * wx * g;
                gxp[y1 * w + x0] += wy * (one - wx) * g;
                gxp[y1 * w + x1] += wy * wx * g;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gx)
}

// ---------------------------------------------------------------------------
// Linear (affine map over the last dimension)
// ---------------------------------------------------------------------------

pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (dout, din) = w.dims2()?;
    let last = *x.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("linear on rank-0 tensor".into())
    })?;
    if last != din {
        return Err(Error::ShapeMismatch(format!(
            "linear: input last dim {last} != weight in dim {din}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias shape {:?}, expected [{dout}]",
                b.shape()
            )));
        }
    }
    let rows = x.numel() / din;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); rows * dout];
    for r in 0..rows {
        let xr = &xd[r * din..][..din];
        let or = &mut out[r * dout..][..dout];
        for (o, ov) in or.iter_mut().enumerate() {
            let wr = &wd[o * din..][..din];
            let mut acc = match b {
                Some(b) => b.data()[o],
                None => T::zero(),
            };
            for (&xv, &wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            *ov = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    want_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (dout, din) = w.dims2()?;
    let rows = x.numel() / din;
    let xd = x.data();
    let wd = w.data();
    let gd = gy.data();
    let mut gx = vec![T::zero(); rows * din];
    let mut gw = vec![T::zero(); dout * din];
    let mut gb = vec![T::zero(); dout];
    for r in 0..rows {
        let xr = &xd[r * din..][..din];
        let gr = &gd[r * dout..][..dout];
        let gxr = &mut gx[r * din..][..din];
        for (o, &gv) in gr.iter().enumerate() {
            let wr = &wd[o * din..][..din];
            let gwr = &mut gw[o * din..][..din];
            for i in 0..din {
                gxr[i] += gv * wr[i];
                gwr[i] += gv * xr[i];
            }
            gb[o] += gv;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(vec![dout, din], gw)?,
        if want_bias {
            Some(Tensor::new(vec![dout], gb)?)
        } else {
            None
        },
    ))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Layer norm over the last dimension with population variance.
/// Returns (y, xhat, inv_std) where inv_std has one entry per token row; a
/// zero-variance row yields xhat == 0 so the output degenerates to beta.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm affine shapes {:?}/{:?}, expected [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.numel() / c;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let cn = T::from_usize(c);
    for r in 0..rows {
        let xr = &xd[r * c..][..c];
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean = mean / cn;
        let mut var = T::zero();
        for &v in xr {
            let dv = v - mean;
            var += dv * dv;
        }
        var = var / cn;
        let inv = (var + eps).sqrt().recip();
        inv_std[r] = inv;
        for i in 0..c {
            let xh = (xr[i] - mean) * inv;
            xhat[r * c + i] = xh;
            y[r * c + i] = gd[i] * xh + bd[i];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
    ))
}

pub fn layer_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = *xhat.shape().last().unwrap();
    let rows = xhat.numel() / c;
    let xh = xhat.data();
    let gd = gamma.data();
    let gyd = gy.data();
    let mut gx = vec![T::zero(); xhat.numel()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let cn = T::from_usize(c);
    for r in 0..rows {
        let xr = &xh[r * c..][..c];
        let gr = &gyd[r * c..][..c];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..c {
            let gxh = gr[i] * gd[i];
            m1 += gxh;
            m2 += gxh * xr[i];
            ggamma[i] += gr[i] * xr[i];
            gbeta[i] += gr[i];
        }
        m1 = m1 / cn;
        m2 = m2 / cn;
        let inv = inv_std[r];
        for i in 0..c {
            let gxh = gr[i] * gd[i];
            gx[r * c + i] = inv * (gxh - m1 - xr[i] * m2);
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// Batch norm in training mode: per-channel batch statistics (population
/// variance). Returns (y, xhat, inv_std, mean, var); mean/var feed the
/// running-statistics update performed by the caller.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::InvalidArgument(
            "batch norm training requires at least 2 values per channel".into(),
        ));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mn = T::from_usize(m);
    for ni in 0..n {
        for ci in 0..c {
            let xp = &xd[(ni * c + ci) * h * w..][..h * w];
            let mut acc = T::zero();
            for &v in xp {
                acc += v;
            }
            mean[ci] += acc;
        }
    }
    for mv in mean.iter_mut() {
        *mv = *mv / mn;
    }
    for ni in 0..n {
        for ci in 0..c {
            let xp = &xd[(ni * c + ci) * h * w..][..h * w];
            let mu = mean[ci];
            let mut acc = T::zero();
            for &v in xp {
                let dv = v - mu;
                acc += dv * dv;
            }
            var[ci] += acc;
        }
    }
    for vv in var.iter_mut() {
        *vv = *vv / mn;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, inv, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
            for o in 0..h * w {
                let xh = (xd[base + o] - mu) * inv;
                xhat[base + o] = xh;
                y[base + o] = ga * xh + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        Tensor::new(vec![c], mean)?,
        Tensor::new(vec![c], var)?,
    ))
}

pub fn batch_norm_train_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = xhat.dims4()?;
    let m = n * h * w;
    let mn = T::from_usize(m);
    let xh = xhat.data();
    let gd = gamma.data();
    let gyd = gy.data();
    let mut m1 = vec![T::zero(); c];
    let mut m2 = vec![T::zero(); c];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for o in 0..h * w {
                let gxh = gyd[base + o] * gd[ci];
                m1[ci] += gxh;
                m2[ci] += gxh * xh[base + o];
                ggamma[ci] += gyd[base + o] * xh[base + o];
                gbeta[ci] += gyd[base + o];
            }
        }
    }
    for ci in 0..c {
        m1[ci] = m1[ci] / mn;
        m2[ci] = m2[ci] / mn;
    }
    let mut gx = vec![T::zero(); xhat.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let inv = inv_std[ci];
            for o in 0..h * w {
                let gxh = gyd[base + o] * gd[ci];
                gx[base + o] = inv * (gxh - m1[ci] - xh[base + o] * m2[ci]);
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// Batch norm in eval mode, normalizing with the provided running stats.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch("batch_norm running stats shape".into()));
    }
    let xd = x.data();
    let mut y = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let inv = (running_var.data()[ci] + eps).sqrt().recip();
            let mu = running_mean.data()[ci];
            let ga = gamma.data()[ci];
            let be = beta.data()[ci];
            for o in 0..h * w {
                y[base + o] = ga * (xd[base + o] - mu) * inv + be;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
    Softplus,
}

/// sqrt(2/pi), the scale inside the tanh-form GELU.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn activation_scalar<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => sigmoid_scalar(x),
        Activation::Silu => x * sigmoid_scalar(x),
        Activation::Softplus => softplus_scalar(x),
        Activation::Gelu => {
            let c = T::from_f64(GELU_SCALE);
            let a = T::from_f64(GELU_CUBIC);
            let half = T::from_f64(0.5);
            let u = c * (x + a * x * x * x);
            half * x * (T::one() + u.tanh())
        }
    }
}

/// Derivative of the activation at pre-activation value `x`.
#[inline]
pub fn activation_deriv_scalar<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => {
            let s = sigmoid_scalar(x);
            s * (T::one() - s)
        }
        Activation::Silu => {
            let s = sigmoid_scalar(x);
            s * (T::one() + x * (T::one() - s))
        }
        Activation::Softplus => sigmoid_scalar(x),
        Activation::Gelu => {
            let c = T::from_f64(GELU_SCALE);
            let a = T::from_f64(GELU_CUBIC);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            let u = c * (x + a * x * x * x);
            let t = u.tanh();
            let du = c * (T::one() + three * a * x * x);
            half * (T::one() + t) + half * x * (T::one() - t * t) * du
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| activation_scalar(kind, v))
}

// ---------------------------------------------------------------------------
// Global pooling and channel-wise 1-D convolution (attention helpers)
// ---------------------------------------------------------------------------

/// Global average pool: [N,C,H,W] -> [N,C].
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = T::from_usize(h * w).recip();
    let xd = x.data();
    let mut out = vec![T::zero(); n * c];
    for (p, o) in out.iter_mut().enumerate() {
        let xp = &xd[p * h * w..][..h * w];
        let mut acc = T::zero();
        for &v in xp {
            acc += v;
        }
        *o = acc * inv;
    }
    Tensor::new(vec![n, c], out)
}

/// Global max pool: [N,C,H,W] -> [N,C] plus per-plane argmax offsets.
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c];
    let mut arg = vec![0u32; n * c];
    for p in 0..n * c {
        let xp = &xd[p * h * w..][..h * w];
        let mut best = T::neg_infinity();
        let mut bi = 0u32;
        for (i, &v) in xp.iter().enumerate() {
            if v > best {
                best = v;
                bi = i as u32;
            }
        }
        out[p] = best;
        arg[p] = bi;
    }
    Ok((Tensor::new(vec![n, c], out)?, arg))
}

/// Same-padded 1-D convolution along the channel axis of a [N,C] tensor.
pub fn conv1d_channels<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    let k = kernel.numel();
    if k % 2 == 0 {
        return Err(Error::InvalidArgument("conv1d kernel must be odd".into()));
    }
    let half = (k / 2) as isize;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); n * c];
    for ni in 0..n {
        let xr = &xd[ni * c..][..c];
        let or = &mut out[ni * c..][..c];
        for ci in 0..c {
            let mut acc = T::zero();
            for (j, &kv) in kd.iter().enumerate() {
                let src = ci as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    acc += kv * xr[src as usize];
                }
            }
            or[ci] = acc;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn conv1d_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c) = x.dims2()?;
    let k = kernel.numel();
    let half = (k / 2) as isize;
    let xd = x.data();
    let kd = kernel.data();
    let gd = gy.data();
    let mut gx = vec![T::zero(); n * c];
    let mut gk = vec![T::zero(); k];
    for ni in 0..n {
        for ci in 0..c {
            let g = gd[ni * c + ci];
            for (j, &kv) in kd.iter().enumerate() {
                let src = ci as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    gx[ni * c + src as usize] += kv * g;
                    gk[j] += xd[ni * c + src as usize] * g;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c], gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
    ))
}

// ---------------------------------------------------------------------------
// Broadcasts (explicit, with summation adjoints handled by callers)
// ---------------------------------------------------------------------------

/// [N,C] -> [N,C,H,W] by repeating over the spatial plane.
pub fn broadcast_nc<T: Scalar>(s: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = s.dims2()?;
    let sd = s.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let v = sd[p];
        for o in &mut out[p * h * w..(p + 1) * h * w] {
            *o = v;
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Adjoint of [`broadcast_nc`]: sum over the spatial plane.
pub fn reduce_spatial<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = g.dims4()?;
    let gd = g.data();
    let mut out = vec![T::zero(); n * c];
    for (p, o) in out.iter_mut().enumerate() {
        let gp = &gd[p * h * w..][..h * w];
        let mut acc = T::zero();
        for &v in gp {
            acc += v;
        }
        *o = acc;
    }
    Tensor::new(vec![n, c], out)
}

/// [N,1,H,W] -> [N,C,H,W] by repeating over channels.
pub fn broadcast_spatial_map<T: Scalar>(m: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let (n, c1, h, w) = m.dims4()?;
    if c1 != 1 {
        return Err(Error::ShapeMismatch("spatial map must have 1 channel".into()));
    }
    let md = m.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        let src = &md[ni * h * w..][..h * w];
        for ci in 0..c {
            out[(ni * c + ci) * h * w..][..h * w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Adjoint of [`broadcast_spatial_map`]: sum over channels -> [N,1,H,W].
pub fn reduce_channels<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = g.dims4()?;
    let gd = g.data();
    let mut out = vec![T::zero(); n * h * w];
    for ni in 0..n {
        let op = &mut out[ni * h * w..][..h * w];
        for ci in 0..c {
            let gp = &gd[(ni * c + ci) * h * w..][..h * w];
            for (o, &v) in op.iter_mut().zip(gp) {
                *o += v;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// [C] -> [N,C,H,W].
pub fn broadcast_channel_vec<T: Scalar>(
    v: &Tensor<T>,
    n: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let c = v.numel();
    let vd = v.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let val = vd[ci];
            for o in &mut out[(ni * c + ci) * h * w..][..h * w] {
                *o = val;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Adjoint of [`broadcast_channel_vec`]: sum over batch and space -> [C].
pub fn reduce_to_channel_vec<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = g.dims4()?;
    let gd = g.data();
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let gp = &gd[(ni * c + ci) * h * w..][..h * w];
            for &v in gp {
                *o += v;
            }
        }
    }
    Tensor::new(vec![c], out)
}

/// [.., 1] -> [.., k] by repeating the last axis.
pub fn expand_last<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if *x.shape().last().unwrap() != 1 {
        return Err(Error::ShapeMismatch("expand_last needs trailing dim 1".into()));
    }
    let rows = x.numel();
    let xd = x.data();
    let mut out = vec![T::zero(); rows * k];
    for r in 0..rows {
        for o in &mut out[r * k..(r + 1) * k] {
            *o = xd[r];
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Tensor::new(shape, out)
}

/// Adjoint of [`expand_last`]: sum the last axis back to size 1.
pub fn sum_last<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *g.shape().last().unwrap();
    let rows = g.numel() / k;
    let gd = g.data();
    let mut out = vec![T::zero(); rows];
    for (r, o) in out.iter_mut().enumerate() {
        let gr = &gd[r * k..][..k];
        let mut acc = T::zero();
        for &v in gr {
            acc += v;
        }
        *o = acc;
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::new(shape, out)
}

/// [D] -> [rows.., D], repeating the vector for every leading row.
pub fn broadcast_vec_rows<T: Scalar>(v: &Tensor<T>, prefix: &[usize]) -> Result<Tensor<T>> {
    let d = v.numel();
    let rows: usize = prefix.iter().product();
    let mut out = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        out.extend_from_slice(v.data());
    }
    let mut shape = prefix.to_vec();
    shape.push(d);
    Tensor::new(shape, out)
}

/// Adjoint of [`broadcast_vec_rows`]: sum over all leading rows -> [D].
pub fn reduce_vec_rows<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *g.shape().last().unwrap();
    let rows = g.numel() / d;
    let gd = g.data();
    let mut out = vec![T::zero(); d];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
            *o += v;
        }
    }
    Tensor::new(vec![d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    /// Direct 6-loop summation oracle: per output element accumulate over
    /// input channel (outer), then kernel rows, then kernel cols.
    fn conv2d_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        spec: &ConvSpec,
    ) -> Tensor<f64> {
        let (n, cin, h, win) = x.dims4().unwrap();
        let (oh, ow) = spec.out_hw(h, win).unwrap();
        let cout = spec.out_channels;
        let cin_g = cin / spec.groups;
        let cout_g = cout / spec.groups;
        let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
        for ni in 0..n {
            for oc in 0..cout {
                let g = oc / cout_g;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for icg in 0..cin_g {
                            let ic = g * cin_g + icg;
                            for ki in 0..spec.kernel_h {
                                for kj in 0..spec.kernel_w {
                                    let ih = (oi * spec.stride + ki * spec.dilation) as isize
                                        - spec.pad_h as isize;
                                    let iw = (oj * spec.stride + kj * spec.dilation) as isize
                                        - spec.pad_w as isize;
                                    if ih < 0
                                        || iw < 0
                                        || ih >= h as isize
                                        || iw >= win as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ni * cin + ic) * h + ih as usize) * win
                                        + iw as usize;
                                    let wi = ((oc * cin_g + icg) * spec.kernel_h + ki)
                                        * spec.kernel_w
                                        + kj;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        let o = ((ni * cout + oc) * oh + oi) * ow + oj;
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_counts_overlap() {
        // 3x3 ones kernel over 3x3 ones input, same padding: each output
        // counts the in-bounds taps. Center 9, corners 4, edge-centers 6.
        let x = t4(1, 1, 3, 3, vec![1.0; 9]);
        let w = t4(1, 1, 3, 3, vec![1.0; 9]);
        let spec = ConvSpec::same(1, 1, 3, 3, 1, 1).unwrap();
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(
            y.data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_depthwise_dirac_is_identity() {
        let c = 3;
        let x = Tensor::<f64>::from_fn(vec![1, c, 4, 4], |i| (i as f64) * 0.37 - 2.0);
        let mut w = Tensor::zeros(vec![c, 1, 3, 3]);
        for ch in 0..c {
            w.data_mut()[ch * 9 + 4] = 1.0;
        }
        let spec = ConvSpec::depthwise_same(c, 3, 3, 1).unwrap();
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_dilated_one_hot_hits_grid() {
        // Hot pixel at (2,2) of a 5x5 input; 3x3 ones kernel at dilation 2,
        // pad 2 lights exactly the 9 positions {0,2,4} x {0,2,4}.
        let mut x = Tensor::zeros(vec![1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let w = t4(1, 1, 3, 3, vec![1.0; 9]);
        let spec = ConvSpec::same(1, 1, 3, 3, 2, 1).unwrap();
        let y = conv2d(&x, &w, None, &spec).unwrap();
        let expect = conv2d_oracle(&x, &w, None, &spec);
        assert_eq!(y, expect);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i % 2 == 0 && j % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(y.data()[i * 5 + j], want, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn conv_matches_oracle_bitwise_on_random_shapes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(n, cin, cout, h, w, k, s, d, grp) in &[
            (2usize, 3usize, 4usize, 8usize, 7usize, 3usize, 1usize, 1usize, 1usize),
            (1, 2, 2, 6, 6, 3, 2, 1, 1),
            (1, 4, 4, 5, 5, 3, 1, 2, 4),
            (2, 4, 6, 8, 8, 1, 1, 1, 2),
            (1, 1, 1, 8, 8, 5, 1, 1, 1),
        ] {
            let x = Tensor::from_fn(vec![n, cin, h, w], |_| rng.gen_range(-1.0..1.0));
            let wt = Tensor::from_fn(vec![cout, cin / grp, k, k], |_| rng.gen_range(-1.0..1.0));
            let b = Tensor::from_fn(vec![cout], |_| rng.gen_range(-1.0..1.0));
            let spec = ConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel_h: k,
                kernel_w: k,
                stride: s,
                dilation: d,
                groups: grp,
                pad_h: d * (k - 1) / 2,
                pad_w: d * (k - 1) / 2,
            };
            let fast = conv2d(&x, &wt, Some(&b), &spec).unwrap();
            let slow = conv2d_oracle(&x, &wt, Some(&b), &spec);
            assert_eq!(fast, slow, "bitwise mismatch for {:?}", (n, cin, cout, k, s, d, grp));
        }
    }

    #[test]
    fn conv_rejects_even_kernel_same_padding() {
        assert!(ConvSpec::same(1, 1, 2, 2, 1, 1).is_err());
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let spec = ConvSpec {
            in_channels: 3,
            out_channels: 4,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            dilation: 1,
            groups: 2,
            pad_h: 0,
            pad_w: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn avg_pool_constant_map_stays_constant() {
        let x = t4(1, 2, 5, 5, vec![3.25; 50]);
        let (y, _) = pool2d(&x, PoolKind::Avg, 3, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 5]);
        for &v in y.data() {
            assert_eq!(v, 3.25);
        }
    }

    #[test]
    fn max_pool_one_hot_spreads_block() {
        let mut x = Tensor::zeros(vec![1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let (y, _) = pool2d(&x, PoolKind::Max, 3, 1, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(y.data()[i * 5 + j], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn max_pool_ramp_2x2_stride2() {
        let x = t4(1, 1, 4, 4, (0..16).map(|i| i as f64).collect());
        let (y, _) = pool2d(&x, PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn pool_rejects_oversize_window() {
        let x = t4(1, 1, 3, 3, vec![0.0; 9]);
        assert!(pool2d(&x, PoolKind::Max, 7, 1, 1).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = t4(1, 1, 3, 3, vec![0.7; 9]);
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        for &v in y.data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_two_pixel_row() {
        // Half-pixel sampling with clamped source indices.
        let x = t4(1, 1, 1, 2, vec![0.0, 1.0]);
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        let row = &y.data()[..4];
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, e) in row.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn upsample_shape_only() {
        let x = Tensor::<f64>::zeros(vec![1, 4, 7, 7]);
        assert_eq!(upsample2x(&x).unwrap().shape(), &[1, 4, 14, 14]);
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = Tensor::zeros(vec![2]);
        assert_eq!(linear(&x, &id, Some(&zero_b)).unwrap().data(), x.data());

        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_batched_shape() {
        let x = Tensor::<f64>::zeros(vec![2, 5, 3]);
        let w = Tensor::<f64>::zeros(vec![7, 3]);
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[2, 5, 7]);
    }

    #[test]
    fn layer_norm_closed_forms() {
        let g = Tensor::<f64>::ones(vec![2]);
        let b = Tensor::zeros(vec![2]);
        // [1,3] normalizes to [-1,1] under population variance.
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let (y, _, _) = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);

        // Constant token collapses to beta.
        let x = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let (y, _, _) = layer_norm(&x, &g, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());

        // gamma = 0 leaves only beta.
        let g0 = Tensor::zeros(vec![2]);
        let x = Tensor::new(vec![1, 2], vec![2.0, 9.0]).unwrap();
        let (y, _, _) = layer_norm(&x, &g0, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn batch_norm_train_and_eval() {
        let g = Tensor::<f64>::ones(vec![1]);
        let b = Tensor::zeros(vec![1]);
        // [0,2] in one channel -> [-1,1] under population variance.
        let x = t4(2, 1, 1, 1, vec![0.0, 2.0]);
        let (y, _, _, mean, var) = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
        assert_eq!(mean.data(), &[1.0]);
        assert_eq!(var.data(), &[1.0]);

        // Eval with fresh stats (mean 0, var 1) is the identity up to eps.
        let rm = Tensor::zeros(vec![1]);
        let rv = Tensor::ones(vec![1]);
        let x = t4(1, 1, 2, 2, vec![0.5, -1.0, 2.0, 0.0]);
        let y = batch_norm_eval(&x, &g, &b, &rm, &rv, 1e-5).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-4);
        }

        // Constant per channel normalizes to zero in train mode.
        let x = t4(1, 1, 2, 2, vec![7.0; 4]);
        let (y, _, _, _, _) = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn batch_norm_train_rejects_single_value() {
        let x = t4(1, 2, 1, 1, vec![1.0, 2.0]);
        let g = Tensor::ones(vec![2]);
        let b = Tensor::zeros(vec![2]);
        assert!(batch_norm_train(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn activation_reference_values() {
        assert_eq!(activation_scalar(Activation::Silu, 0.0), 0.0);
        assert_eq!(activation_scalar(Activation::Sigmoid, 0.0), 0.5);
        assert_eq!(activation_scalar(Activation::Relu, -1.0), 0.0);
        assert!((activation_scalar(Activation::Softplus, 0.0) - 2f64.ln()).abs() < 1e-12);
        // tanh-form GELU at 1.
        let g1: f64 = activation_scalar(Activation::Gelu, 1.0);
        let u = GELU_SCALE * (1.0 + GELU_CUBIC);
        let expect = 0.5 * (1.0 + u.tanh());
        assert!((g1 - expect).abs() < 1e-12);
        assert!((g1 - 0.8412).abs() < 5e-4);
    }

    #[test]
    fn conv1d_channels_same_padding() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = conv1d_channels(&x, &k).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn broadcast_reduce_pairs_are_adjoint_shapes() {
        let s = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let b = broadcast_nc(&s, 4, 5).unwrap();
        assert_eq!(b.shape(), &[2, 3, 4, 5]);
        let r = reduce_spatial(&b).unwrap();
        assert_eq!(r.data(), &[0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
    }
}
