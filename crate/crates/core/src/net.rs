//! Network assembly: configuration, the named parameter store, the QSEME
//! stem, MSDAM and DAVSSM blocks, the attention-gated U-shaped
//! encoder/decoder, and parameter counting.
//!
//! Parameters live in a [`ParamStore`] under hierarchical names (for
//! example `enc1.block.msdam.entry.w`); forward code binds them onto the
//! tape on demand. All convolutions are bias-free except the final head,
//! so zero weights propagate zeros end to end.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    eca_kernel_size, AgParams, AgParamsV, CamParams, CamParamsV, SamParams, CAM_REDUCTION,
};
use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scan::{SsmParams, SsmParamsV};
use crate::tensor::ops::{ConvSpec, PoolKind};
use crate::tensor::Tensor;
use crate::wavelet::WtConvParams;

/// Standard normal draw taken in f64 so f32 and f64 models consume
/// identical RNG streams.
pub fn sample_normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub ssm_state: usize,
    pub image_size: usize,
    pub gelu_kind: String,
    pub use_qseme: bool,
    pub use_msdam: bool,
    pub use_ffrm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            ssm_state: 8,
            image_size: 224,
            gelu_kind: "tanh".into(),
            use_qseme: true,
            use_msdam: true,
            use_ffrm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArgument("depth must be >= 1".into()));
        }
        if self.image_size % (1 << self.depth) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} must be divisible by 2^depth = {}",
                self.image_size,
                1 << self.depth
            )));
        }
        if self.base_channels < CAM_REDUCTION || self.base_channels % CAM_REDUCTION != 0 {
            return Err(Error::InvalidArgument(format!(
                "base_channels {} must be a positive multiple of {CAM_REDUCTION}",
                self.base_channels
            )));
        }
        if self.ssm_state == 0 {
            return Err(Error::InvalidArgument("ssm_state must be >= 1".into()));
        }
        if self.gelu_kind != "tanh" {
            return Err(Error::InvalidArgument(format!(
                "gelu_kind {:?} unsupported (only \"tanh\")",
                self.gelu_kind
            )));
        }
        Ok(())
    }

    /// Channels entering encoder/decoder level `i` (1-based).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Named, ordered collection of tensors: trainable weights plus
/// non-trainable running statistics. Iteration follows insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entries[self.index_of(name)?].value)
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<T> {
        &self.entries[idx]
    }

    /// Mutable access to a stored tensor (finite-difference probing).
    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Replace a value, keeping shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self.index_of(name)?;
        if self.entries[idx].value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: stored shape {:?} vs new {:?}",
                self.entries[idx].value.shape(),
                value.shape()
            )));
        }
        self.entries[idx].value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Accumulate (`+=`) a gradient for the entry at `idx`.
    pub fn accumulate_grad(&mut self, idx: usize, g: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[idx];
        match &mut entry.grad {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Total element count of trainable tensors.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Momentum update of running statistics after a training step.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: T) -> Result<()> {
        let keep = T::one() - momentum;
        for u in updates {
            for (name, batch) in [(&u.mean_name, &u.mean), (&u.var_name, &u.var)] {
                let idx = self.index_of(name)?;
                let running = &mut self.entries[idx].value;
                let updated = running
                    .zip(batch, |r, b| keep * r + momentum * b)?;
                *running = updated;
            }
        }
        Ok(())
    }
}

/// Batch statistics captured by one batch-norm application in train mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

fn conv_std(cin_per_group: usize, kh: usize, kw: usize) -> f64 {
    1.0 / ((cin_per_group * kh * kw) as f64).sqrt()
}

struct InitCtx<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> InitCtx<'_, T, R> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            T::from_f64(sample_normal(self.rng) * std)
        });
        self.store.insert(name, t, true)
    }

    fn conv_w(&mut self, name: &str, cout: usize, cin_g: usize, kh: usize, kw: usize) -> Result<()> {
        self.normal(name, &[cout, cin_g, kh, kw], conv_std(cin_g, kh, kw))
    }

    fn const_(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> Result<()> {
        self.store
            .insert(name, Tensor::full(shape.to_vec(), T::from_f64(v)), trainable)
    }

    fn norm_affine(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.const_(&format!("{prefix}.gamma"), &[c], 1.0, true)?;
        self.const_(&format!("{prefix}.beta"), &[c], 0.0, true)
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.norm_affine(prefix, c)?;
        self.const_(&format!("{prefix}.mean"), &[c], 0.0, false)?;
        self.const_(&format!("{prefix}.var"), &[c], 1.0, false)
    }

    fn cam(&mut self, prefix: &str, c: usize) -> Result<()> {
        let p = CamParams::<T>::init(c, self.rng);
        self.store.insert(&format!("{prefix}.w1"), p.w1, true)?;
        self.store.insert(&format!("{prefix}.w2"), p.w2, true)
    }

    fn ssm(&mut self, prefix: &str, c: usize, n_state: usize) -> Result<()> {
        let p = SsmParams::<T>::init(c, n_state, self.rng);
        self.store.insert(&format!("{prefix}.a_log"), p.a_log, true)?;
        self.store.insert(&format!("{prefix}.d_skip"), p.d_skip, true)?;
        self.store.insert(&format!("{prefix}.proj"), p.proj_bcdt, true)?;
        self.store.insert(&format!("{prefix}.dt_bias"), p.dt_bias, true)
    }

    fn block(&mut self, prefix: &str, c: usize, cfg: &ModelConfig) -> Result<()> {
        self.norm_affine(&format!("{prefix}.ln"), c)?;
        if cfg.use_msdam {
            self.conv_w(&format!("{prefix}.msdam.entry.w"), c, c, 1, 1)?;
            for i in [3usize, 5, 7] {
                self.conv_w(&format!("{prefix}.msdam.scale{i}.dw_a"), c, 1, 1, i)?;
                self.conv_w(&format!("{prefix}.msdam.scale{i}.dw_b"), c, 1, i, 1)?;
                self.conv_w(&format!("{prefix}.msdam.scale{i}.dw_c"), c, 1, 3, 3)?;
            }
            let k = eca_kernel_size(c);
            self.normal(&format!("{prefix}.msdam.eca.k"), &[k], 1.0 / (k as f64).sqrt())?;
            self.conv_w(&format!("{prefix}.msdam.exit.w"), c, 3 * c, 3, 3)?;
        }
        self.norm_affine(&format!("{prefix}.davssm.ln_in"), c)?;
        self.normal(&format!("{prefix}.davssm.proj_in.w"), &[2 * c, c], conv_std(c, 1, 1))?;
        self.const_(&format!("{prefix}.davssm.proj_in.b"), &[2 * c], 0.0, true)?;
        self.conv_w(&format!("{prefix}.davssm.dw.w"), c, 1, 3, 3)?;
        for dir in 0..4 {
            self.ssm(&format!("{prefix}.davssm.ssm{dir}"), c, cfg.ssm_state)?;
        }
        self.norm_affine(&format!("{prefix}.davssm.ln_out"), c)?;
        if cfg.use_ffrm {
            self.cam(&format!("{prefix}.davssm.ffrm.cam"), c)?;
            let p = SamParams::<T>::init(self.rng);
            self.store
                .insert(&format!("{prefix}.davssm.ffrm.sam.w"), p.conv7, true)?;
        }
        self.normal(&format!("{prefix}.davssm.proj_out.w"), &[c, c], conv_std(c, 1, 1))?;
        self.const_(&format!("{prefix}.davssm.proj_out.b"), &[c], 0.0, true)?;
        self.const_(&format!("{prefix}.scale"), &[c], 1.0, true)
    }
}

/// Build a freshly initialized parameter store for the configuration.
/// Uses the config seed; identical configs produce identical stores.
pub fn init_params<T: Scalar>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let mut ctx = InitCtx {
        store: &mut store,
        rng: &mut rng,
    };
    let c0 = cfg.base_channels;

    // Stem.
    ctx.conv_w("stem.pw_in.w", c0, 1, 1, 1)?;
    if cfg.use_qseme {
        ctx.conv_w("stem.wtpf.pw1.w", c0, c0, 1, 1)?;
        let wt = WtConvParams::<T>::init(c0, ctx.rng);
        ctx.store.insert("stem.wtpf.wt.base", wt.base_dw, true)?;
        ctx.store.insert("stem.wtpf.wt.sub", wt.subband_dw, true)?;
        ctx.conv_w("stem.wtpf.pw2.w", c0, c0, 1, 1)?;
        ctx.conv_w("stem.merge.w", c0, 4 * c0, 1, 1)?;
        ctx.cam("stem.cam", c0)?;
    }

    // Encoder.
    for i in 1..=cfg.depth {
        let c = cfg.channels_at(i);
        ctx.block(&format!("enc{i}.block"), c, cfg)?;
        ctx.bn(&format!("enc{i}.bn"), c)?;
        ctx.conv_w(&format!("enc{i}.expand.w"), 2 * c, c, 1, 1)?;
    }

    // Decoder (deepest level first).
    for i in (1..=cfg.depth).rev() {
        let c = cfg.channels_at(i);
        ctx.conv_w(&format!("dec{i}.reduce.w"), c, 2 * c, 1, 1)?;
        let ag = AgParams::<T>::init(c, c, ctx.rng);
        ctx.store.insert(&format!("dec{i}.ag.wg"), ag.wg, true)?;
        ctx.store.insert(&format!("dec{i}.ag.bg"), ag.bg, true)?;
        ctx.store.insert(&format!("dec{i}.ag.wx"), ag.wx, true)?;
        ctx.store.insert(&format!("dec{i}.ag.bx"), ag.bx, true)?;
        ctx.store.insert(&format!("dec{i}.ag.psi"), ag.psi, true)?;
        ctx.store.insert(&format!("dec{i}.ag.bpsi"), ag.bpsi, true)?;
        ctx.conv_w(&format!("dec{i}.merge.w"), c, 2 * c, 1, 1)?;
        ctx.bn(&format!("dec{i}.bn"), c)?;
        ctx.block(&format!("dec{i}.block"), c, cfg)?;
    }

    // Head (the only biased convolution).
    ctx.conv_w("head.w", 1, c0, 1, 1)?;
    ctx.const_("head.b", &[1], 0.0, true)?;

    // Input standardization constants, fitted on the training split.
    ctx.const_("input_norm.mean", &[1], 0.0, false)?;
    ctx.const_("input_norm.std", &[1], 1.0, false)?;

    Ok(store)
}

use rand::SeedableRng;

// ---------------------------------------------------------------------------
// Forward context
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus on-demand bindings from the store.
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<usize, Value>,
    pub mode: Mode,
    grads: bool,
    pub bn_updates: Vec<BnUpdate<T>>,
    eps: T,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            mode,
            grads: matches!(mode, Mode::Train),
            bn_updates: Vec::new(),
            eps: T::from_f64(1e-5),
        }
    }

    /// Bind a named parameter as a (cached) tape leaf.
    pub fn p(&mut self, name: &str) -> Result<Value> {
        let idx = self.store.index_of(name)?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let e = self.store.entry(idx);
        let v = self.tape.leaf(e.value.clone(), self.grads && e.trainable);
        self.bound.insert(idx, v);
        Ok(v)
    }

    fn stat(&self, name: &str) -> Result<&Tensor<T>> {
        self.store.get(name)
    }

    /// Batch norm dispatching on mode; train mode records the batch stats
    /// for the caller's running-statistics update.
    pub fn batch_norm(&mut self, x: Value, prefix: &str) -> Result<Value> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                self.bn_updates.push(BnUpdate {
                    mean_name: format!("{prefix}.mean"),
                    var_name: format!("{prefix}.var"),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.stat(&format!("{prefix}.mean"))?.clone();
                let var = self.stat(&format!("{prefix}.var"))?.clone();
                self.tape.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }

    pub fn layer_norm(&mut self, x: Value, prefix: &str) -> Result<Value> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, gamma, beta, self.eps)
    }

    fn cam_v(&mut self, prefix: &str) -> Result<CamParamsV> {
        Ok(CamParamsV {
            w1: self.p(&format!("{prefix}.w1"))?,
            w2: self.p(&format!("{prefix}.w2"))?,
        })
    }

    fn ssm_v(&mut self, prefix: &str) -> Result<SsmParamsV> {
        Ok(SsmParamsV {
            a_log: self.p(&format!("{prefix}.a_log"))?,
            d_skip: self.p(&format!("{prefix}.d_skip"))?,
            proj_bcdt: self.p(&format!("{prefix}.proj"))?,
            dt_bias: self.p(&format!("{prefix}.dt_bias"))?,
        })
    }

    fn ag_v(&mut self, prefix: &str) -> Result<AgParamsV> {
        Ok(AgParamsV {
            wg: self.p(&format!("{prefix}.wg"))?,
            bg: self.p(&format!("{prefix}.bg"))?,
            wx: self.p(&format!("{prefix}.wx"))?,
            bx: self.p(&format!("{prefix}.bx"))?,
            psi: self.p(&format!("{prefix}.psi"))?,
            bpsi: self.p(&format!("{prefix}.bpsi"))?,
        })
    }

    /// Release the tape and the (store index, tape value) bindings so the
    /// caller can route gradients back into the store.
    pub fn finish(self) -> (Tape<T>, Vec<(usize, Value)>, Vec<BnUpdate<T>>) {
        let mut bindings: Vec<(usize, Value)> = self.bound.into_iter().collect();
        bindings.sort_by_key(|(idx, _)| *idx);
        (self.tape, bindings, self.bn_updates)
    }
}

// ---------------------------------------------------------------------------
// Module forwards
// ---------------------------------------------------------------------------

/// Quad-stream stem: pointwise channel lift, then wavelet / max-pool /
/// avg-pool / residual streams, concatenated, merged, and channel-attended.
pub fn qseme_forward<T: Scalar>(fw: &mut Forward<T>, x: Value) -> Result<Value> {
    let (_, cin, _, _) = fw.tape.value(x).dims4()?;
    if cin != 1 {
        return Err(Error::ShapeMismatch(format!(
            "stem expects a single input channel, got {cin}"
        )));
    }
    let w_in = fw.p("stem.pw_in.w")?;
    let c = fw.tape.value(w_in).shape()[0];
    let f = fw.tape.conv2d(x, w_in, None, &ConvSpec::pointwise(1, c))?;

    // Wavelet stream.
    let w1 = fw.p("stem.wtpf.pw1.w")?;
    let t = fw.tape.conv2d(f, w1, None, &ConvSpec::pointwise(c, c))?;
    let base = fw.p("stem.wtpf.wt.base")?;
    let sub = fw.p("stem.wtpf.wt.sub")?;
    let t = fw.tape.wtconv_forward(t, base, sub)?;
    let w2 = fw.p("stem.wtpf.pw2.w")?;
    let wtpf = fw.tape.conv2d(t, w2, None, &ConvSpec::pointwise(c, c))?;

    let mppf = fw.tape.pool2d(f, PoolKind::Max, 3, 1, 1)?;
    let appf = fw.tape.pool2d(f, PoolKind::Avg, 3, 1, 1)?;
    let rpf = f;

    let cat = fw.tape.concat(&[wtpf, mppf, appf, rpf], 1)?;
    let wm = fw.p("stem.merge.w")?;
    let merged = fw
        .tape
        .conv2d(cat, wm, None, &ConvSpec::pointwise(4 * c, c))?;
    let cam = fw.cam_v("stem.cam")?;
    fw.tape.cam_forward(merged, &cam)
}

/// Six-branch multi-scale block: three asymmetric dilated depthwise scales,
/// a twice-used ECA retention, a residual, grouped products, and a 3x3
/// merge back to the input width.
pub fn msdam_forward<T: Scalar>(fw: &mut Forward<T>, x: Value, prefix: &str) -> Result<Value> {
    let (_, c, _, _) = fw.tape.value(x).dims4()?;
    let we = fw.p(&format!("{prefix}.entry.w"))?;
    let x1 = fw.tape.conv2d(x, we, None, &ConvSpec::pointwise(c, c))?;

    let mut scales = Vec::new();
    for i in [3usize, 5, 7] {
        let wa = fw.p(&format!("{prefix}.scale{i}.dw_a"))?;
        let wb = fw.p(&format!("{prefix}.scale{i}.dw_b"))?;
        let wc = fw.p(&format!("{prefix}.scale{i}.dw_c"))?;
        let a = fw
            .tape
            .conv2d(x1, wa, None, &ConvSpec::depthwise_same(c, 1, i, 1)?)?;
        let b = fw
            .tape
            .conv2d(a, wb, None, &ConvSpec::depthwise_same(c, i, 1, 1)?)?;
        let s = fw
            .tape
            .conv2d(b, wc, None, &ConvSpec::depthwise_same(c, 3, 3, i)?)?;
        scales.push(s);
    }

    // Retention computed once, used in both groups.
    let k1d = fw.p(&format!("{prefix}.eca.k"))?;
    let retention = fw.tape.eca_forward(x1, k1d)?;

    let g1a = fw.tape.mul(scales[0], retention)?;
    let g1 = fw.tape.mul(g1a, scales[1])?;
    let g2a = fw.tape.mul(scales[1], retention)?;
    let g2 = fw.tape.mul(g2a, scales[2])?;

    let cat = fw.tape.concat(&[g1, g2, x1], 1)?;
    let wx = fw.p(&format!("{prefix}.exit.w"))?;
    fw.tape
        .conv2d(cat, wx, None, &ConvSpec::same(3 * c, c, 3, 3, 1, 1)?)
}

/// Dual-branch visual state-space block: token projection split into an
/// SS2D extraction branch and a recalibration (or SiLU-gated) selection
/// branch, recombined and residually connected.
pub fn davssm_forward<T: Scalar>(
    fw: &mut Forward<T>,
    x: Value,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Value> {
    let (_, c, h, w) = fw.tape.value(x).dims4()?;
    let tok = fw.tape.to_tokens(x)?;
    let t = fw.layer_norm(tok, &format!("{prefix}.ln_in"))?;
    let wp = fw.p(&format!("{prefix}.proj_in.w"))?;
    let bp = fw.p(&format!("{prefix}.proj_in.b"))?;
    let proj = fw.tape.linear(t, wp, Some(bp))?;
    let f1 = fw.tape.slice(proj, 2, 0, c)?;
    let f2 = fw.tape.slice(proj, 2, c, 2 * c)?;

    // Extraction branch: depthwise conv in spatial layout, SiLU, SS2D, LN.
    let f1s = fw.tape.from_tokens(f1, h, w)?;
    let wd = fw.p(&format!("{prefix}.dw.w"))?;
    let d = fw
        .tape
        .conv2d(f1s, wd, None, &ConvSpec::depthwise_same(c, 3, 3, 1)?)?;
    let d = fw.tape.silu(d);
    let ssm = [
        fw.ssm_v(&format!("{prefix}.ssm0"))?,
        fw.ssm_v(&format!("{prefix}.ssm1"))?,
        fw.ssm_v(&format!("{prefix}.ssm2"))?,
        fw.ssm_v(&format!("{prefix}.ssm3"))?,
    ];
    let scanned = fw.tape.ss2d_forward(d, &ssm)?;
    let scanned_tok = fw.tape.to_tokens(scanned)?;
    let extract = fw.layer_norm(scanned_tok, &format!("{prefix}.ln_out"))?;

    // Selection branch.
    let select = if cfg.use_ffrm {
        let f2s = fw.tape.from_tokens(f2, h, w)?;
        let cam = fw.cam_v(&format!("{prefix}.ffrm.cam"))?;
        let sam = fw.p(&format!("{prefix}.ffrm.sam.w"))?;
        let sel = fw.tape.ffrm_forward(f2s, &cam, sam)?;
        fw.tape.to_tokens(sel)?
    } else {
        fw.tape.silu(f2)
    };

    let prod = fw.tape.mul(extract, select)?;
    let wo = fw.p(&format!("{prefix}.proj_out.w"))?;
    let bo = fw.p(&format!("{prefix}.proj_out.b"))?;
    let out_tok = fw.tape.linear(prod, wo, Some(bo))?;
    let out = fw.tape.from_tokens(out_tok, h, w)?;
    fw.tape.add(out, x)
}

/// Pre-normalized block: LN and GELU on tokens, MSDAM (unless ablated),
/// DAVSSM, plus a per-channel learnable-scale residual.
pub fn octa_mamba_block<T: Scalar>(
    fw: &mut Forward<T>,
    x: Value,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Value> {
    let (n, _, h, w) = fw.tape.value(x).dims4()?;
    let tok = fw.tape.to_tokens(x)?;
    let t = fw.layer_norm(tok, &format!("{prefix}.ln"))?;
    let t = fw.tape.gelu(t);
    let t_sp = fw.tape.from_tokens(t, h, w)?;

    let m = if cfg.use_msdam {
        msdam_forward(fw, t_sp, &format!("{prefix}.msdam"))?
    } else {
        t_sp
    };
    let dv = davssm_forward(fw, m, &format!("{prefix}.davssm"), cfg)?;

    let s = fw.p(&format!("{prefix}.scale"))?;
    let sb = fw.tape.broadcast_channel_vec(s, n, h, w)?;
    let scaled = fw.tape.mul(sb, x)?;
    fw.tape.add(dv, scaled)
}

/// Full network: stem, three encoder stages (block, BN, ReLU, pool,
/// channel doubling), mirrored attention-gated decoder, pointwise head,
/// sigmoid output in (0,1).
pub fn network_forward<T: Scalar>(fw: &mut Forward<T>, x: Value, cfg: &ModelConfig) -> Result<Value> {
    let (_, cin, h, w) = fw.tape.value(x).dims4()?;
    if cin != 1 {
        return Err(Error::ShapeMismatch(format!(
            "network expects 1 input channel, got {cin}"
        )));
    }
    if h != w || h % (1 << cfg.depth) != 0 {
        return Err(Error::InvalidArgument(format!(
            "input {h}x{w} must be square with size divisible by {}",
            1 << cfg.depth
        )));
    }

    let c0 = cfg.base_channels;
    let mut cur = if cfg.use_qseme {
        qseme_forward(fw, x)?
    } else {
        let w_in = fw.p("stem.pw_in.w")?;
        fw.tape.conv2d(x, w_in, None, &ConvSpec::pointwise(1, c0))?
    };

    // Encoder; remember each stage's pre-pool feature for the skips.
    let mut skips = Vec::with_capacity(cfg.depth);
    for i in 1..=cfg.depth {
        let c = cfg.channels_at(i);
        let b = octa_mamba_block(fw, cur, &format!("enc{i}.block"), cfg)?;
        let bn = fw.batch_norm(b, &format!("enc{i}.bn"))?;
        let u = fw.tape.relu(bn);
        skips.push(u);
        let pooled = fw.tape.pool2d(u, PoolKind::Max, 2, 2, 0)?;
        let we = fw.p(&format!("enc{i}.expand.w"))?;
        cur = fw
            .tape
            .conv2d(pooled, we, None, &ConvSpec::pointwise(c, 2 * c))?;
    }

    // Decoder, deepest stage first.
    for i in (1..=cfg.depth).rev() {
        let c = cfg.channels_at(i);
        let up = fw.tape.upsample2x(cur)?;
        let wr = fw.p(&format!("dec{i}.reduce.w"))?;
        let gate = fw
            .tape
            .conv2d(up, wr, None, &ConvSpec::pointwise(2 * c, c))?;
        let ag = fw.ag_v(&format!("dec{i}.ag"))?;
        let gated = fw.tape.attention_gate(skips[i - 1], gate, &ag)?;
        let cat = fw.tape.concat(&[gated, gate], 1)?;
        let wm = fw.p(&format!("dec{i}.merge.w"))?;
        let merged = fw
            .tape
            .conv2d(cat, wm, None, &ConvSpec::pointwise(2 * c, c))?;
        let bn = fw.batch_norm(merged, &format!("dec{i}.bn"))?;
        let act = fw.tape.relu(bn);
        cur = octa_mamba_block(fw, act, &format!("dec{i}.block"), cfg)?;
    }

    let wh = fw.p("head.w")?;
    let bh = fw.p("head.b")?;
    let logits = fw
        .tape
        .conv2d(cur, wh, Some(bh), &ConvSpec::pointwise(c0, 1))?;
    Ok(fw.tape.sigmoid(logits))
}

/// Total trainable parameter count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(init_params::<f32>(cfg)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            depth: 2,
            ssm_state: 2,
            image_size: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            image_size: 100,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            base_channels: 6,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            gelu_kind: "erf".into(),
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn store_rejects_duplicates_and_reports_missing() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a.w", Tensor::zeros(vec![2]), true).unwrap();
        assert!(s.insert("a.w", Tensor::zeros(vec![2]), true).is_err());
        assert!(matches!(
            s.get("nope"),
            Err(Error::MissingParameter(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_ordered() {
        let cfg = tiny_cfg();
        let a = init_params::<f32>(&cfg).unwrap();
        let b = init_params::<f32>(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value.data(), eb.value.data());
        }
    }

    #[test]
    fn qseme_shape_and_zero_input() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval);
        let x = fw.tape.constant(Tensor::zeros(vec![1, 1, 16, 16]));
        let y = qseme_forward(&mut fw, x).unwrap();
        assert_eq!(fw.tape.shape(y), &[1, 4, 16, 16]);
        // Bias-free convolutions: zero input stays exactly zero.
        for &v in fw.tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn qseme_rejects_multichannel_input() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval);
        let x = fw.tape.constant(Tensor::zeros(vec![1, 2, 16, 16]));
        assert!(qseme_forward(&mut fw, x).is_err());
    }

    #[test]
    fn msdam_preserves_shape_and_zero_input() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval);
        let x = fw.tape.constant(Tensor::zeros(vec![1, 4, 8, 8]));
        let y = msdam_forward(&mut fw, x, "enc1.block.msdam").unwrap();
        assert_eq!(fw.tape.shape(y), &[1, 4, 8, 8]);
        for &v in fw.tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn msdam_matches_composition_oracle() {
        use crate::gradcheck::rand_tensor;
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg).unwrap();
        let mut r = rng(60);
        let x = rand_tensor(&mut r, &[1, 4, 6, 6]);

        let mut fw = Forward::new(&store, Mode::Eval);
        let xv = fw.tape.constant(x.clone());
        let y = msdam_forward(&mut fw, xv, "enc1.block.msdam").unwrap();
        let got = fw.tape.value(y).clone();

        // Composition oracle from already-tested tape pieces, assembled
        // independently of msdam_forward's internal wiring.
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = |t: &mut Tape<f64>, n: &str| t.constant(store.get(n).unwrap().clone());
        let we = g(&mut tape, "enc1.block.msdam.entry.w");
        let x1 = tape.conv2d(xv, we, None, &ConvSpec::pointwise(4, 4)).unwrap();
        let mut scales = Vec::new();
        for i in [3usize, 5, 7] {
            let wa = g(&mut tape, &format!("enc1.block.msdam.scale{i}.dw_a"));
            let wb = g(&mut tape, &format!("enc1.block.msdam.scale{i}.dw_b"));
            let wc = g(&mut tape, &format!("enc1.block.msdam.scale{i}.dw_c"));
            let a = tape
                .conv2d(x1, wa, None, &ConvSpec::depthwise_same(4, 1, i, 1).unwrap())
                .unwrap();
            let b = tape
                .conv2d(a, wb, None, &ConvSpec::depthwise_same(4, i, 1, 1).unwrap())
                .unwrap();
            let s = tape
                .conv2d(b, wc, None, &ConvSpec::depthwise_same(4, 3, 3, i).unwrap())
                .unwrap();
            scales.push(s);
        }
        let k1 = g(&mut tape, "enc1.block.msdam.eca.k");
        let ret = tape.eca_forward(x1, k1).unwrap();
        let g1a = tape.mul(scales[0], ret).unwrap();
        let g1 = tape.mul(g1a, scales[1]).unwrap();
        let g2a = tape.mul(scales[1], ret).unwrap();
        let g2 = tape.mul(g2a, scales[2]).unwrap();
        let cat = tape.concat(&[g1, g2, x1], 1).unwrap();
        let wx = g(&mut tape, "enc1.block.msdam.exit.w");
        let want = tape
            .conv2d(cat, wx, None, &ConvSpec::same(12, 4, 3, 3, 1, 1).unwrap())
            .unwrap();
        assert_eq!(got.data(), tape.value(want).data());
    }

    #[test]
    fn davssm_zero_weights_is_residual_identity() {
        use crate::gradcheck::rand_tensor;
        let cfg = tiny_cfg();
        let mut store = init_params::<f64>(&cfg).unwrap();
        // Zero every davssm weight of enc1 (biases are already zero).
        let names: Vec<String> = store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("enc1.block.davssm."))
            .map(|e| e.name.clone())
            .collect();
        for n in names {
            // Keep LN affine intact: gamma stays 1 so shapes flow, but the
            // product with the zeroed out-projection still vanishes.
            if n.ends_with("proj_out.w") || n.ends_with("proj_out.b") {
                let shape = store.get(&n).unwrap().shape().to_vec();
                store.set_value(&n, Tensor::zeros(shape)).unwrap();
            }
        }
        let mut r = rng(61);
        let x = rand_tensor(&mut r, &[1, 4, 4, 4]);
        let mut fw = Forward::new(&store, Mode::Eval);
        let xv = fw.tape.constant(x.clone());
        let y = davssm_forward(&mut fw, xv, "enc1.block.davssm", &cfg).unwrap();
        assert_eq!(fw.tape.value(y).data(), x.data());
    }

    #[test]
    fn block_scale_zero_removes_residual() {
        use crate::gradcheck::rand_tensor;
        let cfg = tiny_cfg();
        let mut store = init_params::<f64>(&cfg).unwrap();
        store
            .set_value("enc1.block.scale", Tensor::zeros(vec![4]))
            .unwrap();
        let mut r = rng(62);
        let x = rand_tensor(&mut r, &[1, 4, 4, 4]);

        let mut fw = Forward::new(&store, Mode::Eval);
        let xv = fw.tape.constant(x.clone());
        let y = octa_mamba_block(&mut fw, xv, "enc1.block", &cfg).unwrap();
        let with_zero_scale = fw.tape.value(y).clone();

        // Independent route: block without its residual term.
        let mut fw2 = Forward::new(&store, Mode::Eval);
        let xv2 = fw2.tape.constant(x.clone());
        let tok = fw2.tape.to_tokens(xv2).unwrap();
        let t = fw2.layer_norm(tok, "enc1.block.ln").unwrap();
        let t = fw2.tape.gelu(t);
        let t_sp = fw2.tape.from_tokens(t, 4, 4).unwrap();
        let m = msdam_forward(&mut fw2, t_sp, "enc1.block.msdam").unwrap();
        let dv = davssm_forward(&mut fw2, m, "enc1.block.davssm", &cfg).unwrap();
        assert_eq!(with_zero_scale.data(), fw2.tape.value(dv).data());
    }

    #[test]
    fn network_shapes_ranges_and_determinism() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg).unwrap();
        let mut r = rng(63);
        let x = Tensor::from_fn(vec![1, 1, 16, 16], |_| r.gen_range(0.0..1.0));

        let run = |store: &ParamStore<f64>| {
            let mut fw = Forward::new(store, Mode::Eval);
            let xv = fw.tape.constant(x.clone());
            let y = network_forward(&mut fw, xv, &cfg).unwrap();
            fw.tape.value(y).clone()
        };
        let y1 = run(&store);
        let y2 = run(&store);
        assert_eq!(y1.shape(), &[1, 1, 16, 16]);
        for &v in y1.data() {
            assert!(v > 0.0 && v < 1.0);
        }
        assert_eq!(y1.data(), y2.data(), "two identical passes must agree bitwise");
    }

    #[test]
    fn network_rejects_indivisible_size() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval);
        let x = fw.tape.constant(Tensor::zeros(vec![1, 1, 10, 10]));
        assert!(network_forward(&mut fw, x, &cfg).is_err());
    }

    #[test]
    fn ablation_flags_strictly_reduce_param_count() {
        let full = ModelConfig {
            base_channels: 8,
            image_size: 32,
            ..ModelConfig::default()
        };
        let all = param_count(&full).unwrap();
        for (q, m, f) in [
            (false, true, true),
            (true, false, true),
            (true, true, false),
        ] {
            let cfg = ModelConfig {
                use_qseme: q,
                use_msdam: m,
                use_ffrm: f,
                ..full.clone()
            };
            assert!(param_count(&cfg).unwrap() < all, "flag combo {:?}", (q, m, f));
        }
        let none = ModelConfig {
            use_qseme: false,
            use_msdam: false,
            use_ffrm: false,
            ..full
        };
        assert!(param_count(&none).unwrap() < all);
    }

    #[test]
    fn param_count_small_examples() {
        // A single depthwise 3x3 kernel over 8 channels, no bias.
        let mut s = ParamStore::<f32>::new();
        s.insert("dw", Tensor::zeros(vec![8, 1, 3, 3]), true).unwrap();
        assert_eq!(s.param_count(), 72);
        // Linear 4 -> 8 with bias.
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(vec![8, 4]), true).unwrap();
        s.insert("b", Tensor::zeros(vec![8]), true).unwrap();
        assert_eq!(s.param_count(), 40);
        // Running stats are excluded.
        let mut s = ParamStore::<f32>::new();
        s.insert("bn.mean", Tensor::zeros(vec![8]), false).unwrap();
        assert_eq!(s.param_count(), 0);
    }
}
