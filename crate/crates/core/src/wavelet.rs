//! Single-level orthonormal Haar decomposition and the wavelet convolution
//! built on it: per-subband depthwise 3x3 filtering inside a DWT/IDWT
//! sandwich, plus a parallel depthwise path on the full-resolution input.
//!
//! Band convention for a 2x2 block `[[a, b], [c, d]]`, all scaled by 1/2:
//! `LL = a+b+c+d`, `LH = a-b+c-d` (detail along width),
//! `HL = a+b-c-d` (detail along height), `HH = a-b-c+d`.
//! The 4x4 transform matrix is symmetric and orthogonal, so the inverse is
//! the same filter bank and energy is preserved exactly.

use rand::Rng;

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::ConvSpec;
use crate::tensor::Tensor;

/// Decomposition levels used by the wavelet convolution.
pub const WT_LEVELS: usize = 1;

/// Parameters of one wavelet convolution layer: a depthwise 3x3 kernel on
/// the input plus one depthwise 3x3 kernel per subband (LL, LH, HL, HH).
#[derive(Clone, Debug)]
pub struct WtConvParams<T> {
    pub base_dw: Tensor<T>,
    pub subband_dw: Tensor<T>,
    pub levels: usize,
}

impl<T: Scalar> WtConvParams<T> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / 3.0; // fan-in 9 for a depthwise 3x3 tap
        Self {
            base_dw: Tensor::from_fn(vec![channels, 1, 3, 3], |_| {
                T::from_f64(crate::net::sample_normal(rng) * std)
            }),
            subband_dw: Tensor::from_fn(vec![4, channels, 1, 3, 3], |_| {
                T::from_f64(crate::net::sample_normal(rng) * std)
            }),
            levels: WT_LEVELS,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.levels != WT_LEVELS {
            return Err(Error::InvalidArgument(format!(
                "wavelet levels {} unsupported (fixed at {WT_LEVELS})",
                self.levels
            )));
        }
        if self.base_dw.shape() != [channels, 1, 3, 3]
            || self.subband_dw.shape() != [4, channels, 1, 3, 3]
        {
            return Err(Error::ShapeMismatch("wavelet kernel shapes".into()));
        }
        Ok(())
    }
}

/// Replicate-pad the bottom/right edge so both spatial dims are even.
fn pad_to_even<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (hp, wp) = (h + h % 2, w + w % 2);
    if (hp, wp) == (h, w) {
        return Ok(x.clone());
    }
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * hp * wp];
    for p in 0..n * c {
        let src = &xd[p * h * w..][..h * w];
        let dst = &mut out[p * hp * wp..][..hp * wp];
        for i in 0..hp {
            let si = i.min(h - 1);
            for j in 0..wp {
                dst[i * wp + j] = src[si * w + j.min(w - 1)];
            }
        }
    }
    Tensor::new(vec![n, c, hp, wp], out)
}

/// Fold gradients of replicated cells back onto their source cells.
fn pad_to_even_backward<T: Scalar>(g: &Tensor<T>, orig: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = orig else {
        return Err(Error::ShapeMismatch("pad backward needs rank-4".into()));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    let (_, _, hp, wp) = g.dims4()?;
    if (hp, wp) == (h, w) {
        return Ok(g.clone());
    }
    let gd = g.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &gd[p * hp * wp..][..hp * wp];
        let dst = &mut out[p * h * w..][..h * w];
        for i in 0..hp {
            let si = i.min(h - 1);
            for j in 0..wp {
                dst[si * w + j.min(w - 1)] += src[i * wp + j];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Forward Haar split of an even-sized map into a band stack
/// [N, 4C, H/2, W/2], bands ordered LL, LH, HL, HH (each C channels).
fn haar_split<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (h2, w2) = (h / 2, w / 2);
    let half = T::from_f64(0.5);
    let xd = x.data();
    let mut out = vec![T::zero(); n * 4 * c * h2 * w2];
    let plane = h2 * w2;
    for ni in 0..n {
        for ci in 0..c {
            let src = &xd[(ni * c + ci) * h * w..][..h * w];
            let base = ni * 4 * c * plane;
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[(2 * i) * w + 2 * j];
                    let b = src[(2 * i) * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    let o = i * w2 + j;
                    out[base + ci * plane + o] = (a + b + cc + d) * half;
                    out[base + (c + ci) * plane + o] = (a - b + cc - d) * half;
                    out[base + (2 * c + ci) * plane + o] = (a + b - cc - d) * half;
                    out[base + (3 * c + ci) * plane + o] = (a - b - cc + d) * half;
                }
            }
        }
    }
    Tensor::new(vec![n, 4 * c, h2, w2], out)
}

/// Inverse of [`haar_split`] (the same orthogonal filter bank transposed).
fn haar_merge<T: Scalar>(bands: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, h2, w2) = bands.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "band stack channels {c4} not divisible by 4"
        )));
    }
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::from_f64(0.5);
    let bd = bands.data();
    let plane = h2 * w2;
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let base = ni * 4 * c * plane;
            let dst = &mut out[(ni * c + ci) * h * w..][..h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = i * w2 + j;
                    let ll = bd[base + ci * plane + o];
                    let lh = bd[base + (c + ci) * plane + o];
                    let hl = bd[base + (2 * c + ci) * plane + o];
                    let hh = bd[base + (3 * c + ci) * plane + o];
                    dst[(2 * i) * w + 2 * j] = (ll + lh + hl + hh) * half;
                    dst[(2 * i) * w + 2 * j + 1] = (ll - lh + hl - hh) * half;
                    dst[(2 * i + 1) * w + 2 * j] = (ll + lh - hl - hh) * half;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Value-level Haar decomposition (replicate-pads odd inputs). Returns the
/// band stack [N, 4C, ceil(H/2), ceil(W/2)].
pub fn haar_dwt<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    haar_split(&pad_to_even(x)?)
}

/// Value-level inverse Haar; exact inverse of [`haar_dwt`] for even sizes.
pub fn haar_idwt<T: Scalar>(bands: &Tensor<T>) -> Result<Tensor<T>> {
    haar_merge(bands)
}

impl<T: Scalar> Tape<T> {
    /// Differentiable Haar split into a [N,4C,H/2,W/2] band stack.
    pub fn dwt(&mut self, x: Value) -> Result<Value> {
        let orig = self.value(x).shape().to_vec();
        let out = haar_dwt(self.value(x))?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _, _| {
                // Orthonormal transform: the adjoint is the inverse bank,
                // composed with the pad adjoint for odd inputs.
                let gpad = haar_merge(g)?;
                Ok(vec![Some(pad_to_even_backward(&gpad, &orig)?)])
            }),
        ))
    }

    /// Differentiable inverse Haar from a band stack.
    pub fn idwt(&mut self, bands: Value) -> Result<Value> {
        let out = haar_merge(self.value(bands))?;
        Ok(self.push_op(
            out,
            vec![bands],
            Box::new(|g, _, _, _| Ok(vec![Some(haar_split(g)?)])),
        ))
    }

    /// Wavelet convolution: depthwise path on the input plus per-subband
    /// depthwise 3x3 filtering reconstructed through the inverse transform.
    /// `base_dw` is [C,1,3,3]; `subband_dw` is [4,C,1,3,3] (LL,LH,HL,HH).
    pub fn wtconv_forward(
        &mut self,
        x: Value,
        base_dw: Value,
        subband_dw: Value,
    ) -> Result<Value> {
        let (_, c, h, w) = self.value(x).dims4()?;
        let base_spec = ConvSpec::depthwise_same(c, 3, 3, 1)?;
        let band_spec = ConvSpec::depthwise_same(4 * c, 3, 3, 1)?;

        let base = self.conv2d(x, base_dw, None, &base_spec)?;
        let bands = self.dwt(x)?;
        let sub_w = self.reshape(subband_dw, &[4 * c, 1, 3, 3])?;
        let filtered = self.conv2d(bands, sub_w, None, &band_spec)?;
        let recon = self.idwt(filtered)?;
        // Odd inputs were replicate-padded before the split; crop back.
        let (_, _, rh, rw) = self.value(recon).shape()[..]
            .try_into()
            .map(|[n, c, h, w]: [usize; 4]| (n, c, h, w))
            .map_err(|_| Error::ShapeMismatch("wtconv reconstruction rank".into()))?;
        let recon = if rh != h { self.slice(recon, 2, 0, h)? } else { recon };
        let recon = if rw != w { self.slice(recon, 3, 0, w)? } else { recon };
        self.add(base, recon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, project_to_scalar, rand_tensor, rng};

    #[test]
    fn constant_map_concentrates_in_ll() {
        let c = 0.75;
        let x = Tensor::full(vec![1, 2, 4, 4], c);
        let bands = haar_dwt(&x).unwrap();
        assert_eq!(bands.shape(), &[1, 8, 2, 2]);
        for ch in 0..8 {
            for &v in &bands.data()[ch * 4..(ch + 1) * 4] {
                let want = if ch < 2 { 2.0 * c } else { 0.0 };
                assert!((v - want as f64).abs() < 1e-15, "channel {ch}");
            }
        }
    }

    #[test]
    fn one_hot_splits_into_half_magnitude_bands() {
        let mut x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        x.data_mut()[0] = 1.0;
        let bands = haar_dwt(&x).unwrap();
        assert_eq!(bands.shape(), &[1, 4, 1, 1]);
        for &v in bands.data() {
            assert!((v.abs() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_filter_signs() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bands = haar_dwt(&x).unwrap();
        // [a,b;c,d] = [1,2;3,4]: LL=5, LH=-1, HL=-2, HH=0.
        assert_eq!(bands.data(), &[5.0, -1.0, -2.0, 0.0]);
    }

    #[test]
    fn perfect_reconstruction_and_energy() {
        let mut r = rng(30);
        let x = rand_tensor(&mut r, &[2, 3, 6, 8]);
        let bands = haar_dwt(&x).unwrap();
        let back = haar_idwt(&bands).unwrap();
        let mut max = 0.0f64;
        for (a, b) in x.data().iter().zip(back.data()) {
            max = max.max((a - b).abs());
        }
        assert!(max <= 1e-12, "reconstruction error {max}");

        let energy_in: f64 = x.data().iter().map(|v| v * v).sum();
        let energy_bands: f64 = bands.data().iter().map(|v| v * v).sum();
        assert!((energy_in - energy_bands).abs() <= 1e-10);
    }

    #[test]
    fn band_impulse_matches_transpose_bank() {
        // Reconstructing a single-band impulse writes exactly the transposed
        // filter into the corresponding 2x2 block.
        for (band, signs) in [
            (0usize, [1.0, 1.0, 1.0, 1.0]),
            (1, [1.0, -1.0, 1.0, -1.0]),
            (2, [1.0, 1.0, -1.0, -1.0]),
            (3, [1.0, -1.0, -1.0, 1.0]),
        ] {
            let mut bands = Tensor::<f64>::zeros(vec![1, 4, 1, 1]);
            bands.data_mut()[band] = 1.0;
            let back = haar_idwt(&bands).unwrap();
            for (v, s) in back.data().iter().zip(&signs) {
                assert!((v - 0.5 * s).abs() < 1e-15, "band {band}");
            }
        }
    }

    fn dirac_depthwise(c: usize) -> Tensor<f64> {
        let mut w = Tensor::zeros(vec![c, 1, 3, 3]);
        for ch in 0..c {
            w.data_mut()[ch * 9 + 4] = 1.0;
        }
        w
    }

    #[test]
    fn wtconv_dirac_subbands_is_identity() {
        let mut r = rng(31);
        let c = 2;
        let x = rand_tensor(&mut r, &[1, c, 4, 4]);
        let base = Tensor::zeros(vec![c, 1, 3, 3]);
        let sub = dirac_depthwise(4 * c).reshape(vec![4, c, 1, 3, 3]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bv = tape.constant(base);
        let sv = tape.constant(sub);
        let y = tape.wtconv_forward(xv, bv, sv).unwrap();
        let yd = tape.value(y);
        for (a, b) in yd.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn wtconv_dirac_base_is_identity() {
        let mut r = rng(32);
        let c = 2;
        let x = rand_tensor(&mut r, &[1, c, 4, 4]);
        let base = dirac_depthwise(c);
        let sub = Tensor::zeros(vec![4, c, 1, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bv = tape.constant(base);
        let sv = tape.constant(sub);
        let y = tape.wtconv_forward(xv, bv, sv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn wtconv_matches_composition_oracle() {
        use crate::tensor::ops as k;
        let mut r = rng(33);
        let c = 3;
        let x = rand_tensor(&mut r, &[2, c, 4, 6]);
        let p = WtConvParams::<f64>::init(c, &mut r);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bv = tape.constant(p.base_dw.clone());
        let sv = tape.constant(p.subband_dw.clone());
        let y = tape.wtconv_forward(xv, bv, sv).unwrap();
        let got = tape.value(y).clone();

        // Independent composition from value-level pieces: per-band conv on
        // each split band, merge, add the base depthwise path.
        let base_spec = ConvSpec::depthwise_same(c, 3, 3, 1).unwrap();
        let base = k::conv2d(&x, &p.base_dw, None, &base_spec).unwrap();
        let bands = haar_dwt(&x).unwrap();
        let mut filtered_parts = Vec::new();
        for band in 0..4 {
            let slice = bands.slice_axis(1, band * c, (band + 1) * c).unwrap();
            let w = p
                .subband_dw
                .slice_axis(0, band, band + 1)
                .unwrap()
                .reshape(vec![c, 1, 3, 3])
                .unwrap();
            filtered_parts.push(k::conv2d(&slice, &w, None, &base_spec).unwrap());
        }
        let refs: Vec<&Tensor<f64>> = filtered_parts.iter().collect();
        let filtered = Tensor::concat(&refs, 1).unwrap();
        let want = base.add(&haar_idwt(&filtered).unwrap()).unwrap();

        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn odd_input_roundtrips_through_wtconv() {
        let mut r = rng(34);
        let c = 2;
        let x = rand_tensor(&mut r, &[1, c, 5, 7]);
        let base = Tensor::zeros(vec![c, 1, 3, 3]);
        let sub = dirac_depthwise(4 * c).reshape(vec![4, c, 1, 3, 3]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bv = tape.constant(base);
        let sv = tape.constant(sub);
        let y = tape.wtconv_forward(xv, bv, sv).unwrap();
        let yd = tape.value(y);
        assert_eq!(yd.shape(), x.shape());
        for (a, b) in yd.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dwt_idwt_wtconv_grads_match_fd() {
        let mut r = rng(35);
        let c = 2;
        let x = rand_tensor(&mut r, &[1, c, 4, 4]);
        let p = WtConvParams::<f64>::init(c, &mut r);
        let err = check_gradients(&[x, p.base_dw, p.subband_dw], &|tape, v| {
            let y = tape.wtconv_forward(v[0], v[1], v[2])?;
            project_to_scalar(tape, y, 35)
        })
        .unwrap();
        assert!(err <= 1e-5, "wtconv fd error {err}");
    }

    #[test]
    fn odd_input_dwt_grads_match_fd() {
        let mut r = rng(36);
        let x = rand_tensor(&mut r, &[1, 1, 3, 5]);
        let err = check_gradients(&[x], &|tape, v| {
            let bands = tape.dwt(v[0])?;
            project_to_scalar(tape, bands, 36)
        })
        .unwrap();
        assert!(err <= 1e-6, "odd dwt fd error {err}");
    }
}
