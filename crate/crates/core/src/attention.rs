//! Attention submodules: efficient channel attention (ECA), channel and
//! spatial attention (CAM/SAM), their composite recalibration block (FFRM),
//! and the additive attention gate used on skip connections.

use rand::Rng;

use crate::autodiff::{Tape, Value};
use crate::error::Result;
use crate::net::sample_normal;
use crate::scalar::Scalar;
use crate::tensor::ops::ConvSpec;
use crate::tensor::Tensor;

/// Channel-attention MLP bottleneck reduction.
pub const CAM_REDUCTION: usize = 4;

/// Adaptive ECA kernel size: nearest odd to log2(C)/2 + 1/2 (gamma=2, b=1),
/// truncating then bumping even values up.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).floor() as usize;
    let t = if t % 2 == 1 { t } else { t + 1 };
    t.max(1)
}

/// Shared-MLP channel attention over pooled descriptors.
#[derive(Clone, Debug)]
pub struct CamParams<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Scalar> CamParams<T> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / CAM_REDUCTION).max(1);
        let s1 = 1.0 / (channels as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Tensor::from_fn(vec![hidden, channels], |_| {
                T::from_f64(sample_normal(rng) * s1)
            }),
            w2: Tensor::from_fn(vec![channels, hidden], |_| {
                T::from_f64(sample_normal(rng) * s2)
            }),
        }
    }
}

/// 7x7 convolution over stacked channel-mean/channel-max maps.
#[derive(Clone, Debug)]
pub struct SamParams<T> {
    pub conv7: Tensor<T>,
}

impl<T: Scalar> SamParams<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let std = 1.0 / (2.0 * 49.0f64).sqrt();
        Self {
            conv7: Tensor::from_fn(vec![1, 2, 7, 7], |_| T::from_f64(sample_normal(rng) * std)),
        }
    }
}

/// Additive attention gate weights (1x1 convolutions with biases).
#[derive(Clone, Debug)]
pub struct AgParams<T> {
    pub wg: Tensor<T>,
    pub bg: Tensor<T>,
    pub wx: Tensor<T>,
    pub bx: Tensor<T>,
    pub psi: Tensor<T>,
    pub bpsi: Tensor<T>,
}

impl<T: Scalar> AgParams<T> {
    /// Intermediate width is half the skip channels, minimum 1.
    pub fn inter_channels(skip_channels: usize) -> usize {
        (skip_channels / 2).max(1)
    }

    pub fn init(skip_channels: usize, gate_channels: usize, rng: &mut impl Rng) -> Self {
        let ci = Self::inter_channels(skip_channels);
        let sg = 1.0 / (gate_channels as f64).sqrt();
        let sx = 1.0 / (skip_channels as f64).sqrt();
        let sp = 1.0 / (ci as f64).sqrt();
        Self {
            wg: Tensor::from_fn(vec![ci, gate_channels, 1, 1], |_| {
                T::from_f64(sample_normal(rng) * sg)
            }),
            bg: Tensor::zeros(vec![ci]),
            wx: Tensor::from_fn(vec![ci, skip_channels, 1, 1], |_| {
                T::from_f64(sample_normal(rng) * sx)
            }),
            bx: Tensor::zeros(vec![ci]),
            psi: Tensor::from_fn(vec![1, ci, 1, 1], |_| T::from_f64(sample_normal(rng) * sp)),
            bpsi: Tensor::zeros(vec![1]),
        }
    }
}

/// Tape handles for CAM weights.
#[derive(Clone, Copy, Debug)]
pub struct CamParamsV {
    pub w1: Value,
    pub w2: Value,
}

/// Tape handles for the attention-gate weights.
#[derive(Clone, Copy, Debug)]
pub struct AgParamsV {
    pub wg: Value,
    pub bg: Value,
    pub wx: Value,
    pub bx: Value,
    pub psi: Value,
    pub bpsi: Value,
}

impl<T: Scalar> Tape<T> {
    /// ECA: sigmoid of a 1-D convolution over globally pooled channels,
    /// applied as a per-channel scale.
    pub fn eca_forward(&mut self, x: Value, k1d: Value) -> Result<Value> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let pooled = self.gap(x)?;
        let mixed = self.conv1d_channels(pooled, k1d)?;
        let scales = self.sigmoid(mixed);
        let b = self.broadcast_nc(scales, h, w)?;
        self.mul(x, b)
    }

    /// Channel attention: shared MLP over average- and max-pooled channel
    /// descriptors, summed, squashed, applied per channel.
    pub fn cam_forward(&mut self, x: Value, p: &CamParamsV) -> Result<Value> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let avg = self.gap(x)?;
        let max = self.gmp(x)?;
        let mlp = |tape: &mut Self, v: Value| -> Result<Value> {
            let h1 = tape.linear(v, p.w1, None)?;
            let r1 = tape.relu(h1);
            tape.linear(r1, p.w2, None)
        };
        let a1 = mlp(self, avg)?;
        let a2 = mlp(self, max)?;
        let sum = self.add(a1, a2)?;
        let attn = self.sigmoid(sum);
        let b = self.broadcast_nc(attn, h, w)?;
        self.mul(x, b)
    }

    /// Spatial attention: 7x7 convolution over stacked channel mean/max
    /// maps, squashed, applied per spatial location.
    pub fn sam_forward(&mut self, x: Value, conv7: Value) -> Result<Value> {
        let (_, c, _, _) = self.value(x).dims4()?;
        let mean = self.channel_mean(x)?;
        let max = self.channel_max(x)?;
        let stacked = self.concat(&[mean, max], 1)?;
        let spec = ConvSpec::same(2, 1, 7, 7, 1, 1)?;
        let conv = self.conv2d(stacked, conv7, None, &spec)?;
        let m = self.sigmoid(conv);
        let b = self.broadcast_spatial_map(m, c)?;
        self.mul(x, b)
    }

    /// FFRM: channel and spatial recalibrations fused by addition, a second
    /// sigmoid selection, and a residual connection.
    pub fn ffrm_forward(&mut self, x: Value, cam: &CamParamsV, sam_conv7: Value) -> Result<Value> {
        let c = self.cam_forward(x, cam)?;
        let s = self.sam_forward(x, sam_conv7)?;
        let fused = self.add(c, s)?;
        let select = self.sigmoid(fused);
        let gated = self.mul(x, select)?;
        self.add(gated, x)
    }

    /// Attention gate: alpha = sigmoid(psi * relu(Wg*gate + Wx*skip)),
    /// broadcast over the skip's channels.
    pub fn attention_gate(&mut self, skip: Value, gate: Value, p: &AgParamsV) -> Result<Value> {
        let (_, cx, h, w) = self.value(skip).dims4()?;
        let (_, cg, hg, wg_) = self.value(gate).dims4()?;
        if (h, w) != (hg, wg_) {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "attention gate spatial mismatch: skip {h}x{w} vs gate {hg}x{wg_}"
            )));
        }
        let ci = self.value(p.bg).numel();
        let g_spec = ConvSpec::pointwise(cg, ci);
        let x_spec = ConvSpec::pointwise(cx, ci);
        let p_spec = ConvSpec::pointwise(ci, 1);
        let g_proj = self.conv2d(gate, p.wg, Some(p.bg), &g_spec)?;
        let x_proj = self.conv2d(skip, p.wx, Some(p.bx), &x_spec)?;
        let sum = self.add(g_proj, x_proj)?;
        let act = self.relu(sum);
        let logits = self.conv2d(act, p.psi, Some(p.bpsi), &p_spec)?;
        let alpha = self.sigmoid(logits);
        let b = self.broadcast_spatial_map(alpha, cx)?;
        self.mul(skip, b)
    }
}
