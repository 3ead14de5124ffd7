//! Binary PGM (P5, maxval 255) reading and writing.
//!
//! Values map to [0,1] on read; writes clamp to [0,1] and quantize with
//! round-half-up, so a write/read round trip moves a value by at most 1/510.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PgmError, Result};
use crate::tensor::Tensor;

/// Read a P5 PGM into a [1,H,W] tensor scaled to [0,1]. Comment lines
/// (`# ...`) between header tokens are tolerated.
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PgmError::BadMagic(got).into());
    }
    let mut pos = 2;
    let mut token = |pos: &mut usize| -> Result<usize> {
        // Skip whitespace and comment lines.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(PgmError::BadHeader("expected integer".into()).into());
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::BadHeader("unparsable integer".into()).into())
    };
    let w = token(&mut pos)?;
    let h = token(&mut pos)?;
    let maxval = token(&mut pos)?;
    if maxval != 255 {
        return Err(PgmError::BadMaxval(maxval as u32).into());
    }
    if w == 0 || h == 0 {
        return Err(PgmError::BadHeader(format!("degenerate size {w}x{h}")).into());
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PgmError::BadHeader("missing separator before payload".into()).into());
    }
    pos += 1;
    let need = w * h;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(PgmError::Truncated {
            expected: need,
            got: payload.len(),
        }
        .into());
    }
    let data: Vec<f32> = payload[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Write a [1,H,W] (or [H,W]) tensor as P5 with maxval 255.
pub fn write_pgm(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "write_pgm expects [1,H,W] or [H,W], got {other:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in t.data() {
        let q = (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
        out.push(q);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Bilinear resize of a [1,H,W] image to [1,S,S] with the same half-pixel,
/// clamped-source convention as the 2x upsampler. Returns a copy when the
/// size already matches.
pub fn resize_to(t: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = t.dims3()?;
    if (h, w) == (s, s) {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = vec![0f32; s * s];
    let ry = h as f64 / s as f64;
    let rx = w as f64 / s as f64;
    for oy in 0..s {
        let sy = (oy as f64 + 0.5) * ry - 0.5;
        let y0f = sy.floor();
        let wy = (sy - y0f) as f32;
        let y0 = (y0f.max(0.0) as usize).min(h - 1);
        let y1 = ((y0f + 1.0).max(0.0) as usize).min(h - 1);
        for ox in 0..s {
            let sx = (ox as f64 + 0.5) * rx - 0.5;
            let x0f = sx.floor();
            let wx = (sx - x0f) as f32;
            let x0 = (x0f.max(0.0) as usize).min(w - 1);
            let x1 = ((x0f + 1.0).max(0.0) as usize).min(w - 1);
            let a = src[y0 * w + x0];
            let b = src[y0 * w + x1];
            let c = src[y1 * w + x0];
            let d = src[y1 * w + x1];
            let top = a + wx * (b - a);
            let bot = c + wx * (d - c);
            out[oy * s + ox] = top + wy * (bot - top);
        }
    }
    Tensor::new(vec![1, s, s], out)
}

/// Nearest-neighbor resize for masks, re-binarized at 0.5.
pub fn resize_mask_nearest(t: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = t.dims3()?;
    if (h, w) == (s, s) {
        return Ok(t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    }
    let src = t.data();
    let mut out = vec![0f32; s * s];
    for oy in 0..s {
        let sy = (((oy as f64 + 0.5) * h as f64 / s as f64).floor() as usize).min(h - 1);
        for ox in 0..s {
            let sx = (((ox as f64 + 0.5) * w as f64 / s as f64).floor() as usize).min(w - 1);
            out[oy * s + ox] = if src[sy * w + sx] >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Tensor::new(vec![1, s, s], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};

    #[test]
    fn golden_header_and_payload() {
        let dir = std::env::temp_dir().join("octamamba_pgm_golden");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.pgm");
        // 3 wide, 2 tall with known bytes.
        let vals = [0.0f32, 1.0, 0.5, 0.2, 0.8, 1.0];
        let t = Tensor::new(vec![1, 2, 3], vals.to_vec()).unwrap();
        write_pgm(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(&bytes[11..], &[0u8, 255, 128, 51, 204, 255]);
    }

    #[test]
    fn all_zero_payload() {
        let dir = std::env::temp_dir().join("octamamba_pgm_zero");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("z.pgm");
        write_pgm(&Tensor::zeros(vec![1, 4, 5]), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 20..];
        assert!(payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn roundtrip_error_bounded_by_quantization() {
        let dir = std::env::temp_dir().join("octamamba_pgm_rt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.pgm");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::from_fn(vec![1, 9, 7], |_| rng.gen_range(0.0f32..1.0));
        write_pgm(&t, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn distinct_error_kinds() {
        assert!(matches!(
            parse_pgm(b"P6\n1 1\n255\n\0"),
            Err(Error::Pgm(PgmError::BadMagic(_)))
        ));
        assert!(matches!(
            parse_pgm(b"P5\n1 1\n127\n\0"),
            Err(Error::Pgm(PgmError::BadMaxval(127)))
        ));
        assert!(matches!(
            parse_pgm(b"P5\n4 4\n255\n\0\0"),
            Err(Error::Pgm(PgmError::Truncated { expected: 16, got: 2 }))
        ));
    }

    #[test]
    fn comments_in_header_are_tolerated() {
        let t = parse_pgm(b"P5\n# made by hand\n2 1\n# another\n255\n\x40\x80").unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::full(vec![1, 5, 5], 0.37f32);
        let same = resize_to(&t, 5).unwrap();
        assert_eq!(same.data(), t.data());
        let up = resize_to(&t, 8).unwrap();
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_2x_matches_upsample_op() {
        use crate::tensor::ops::upsample2x;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::from_fn(vec![1, 6, 6], |_| rng.gen_range(0.0f32..1.0));
        let via_resize = resize_to(&t, 12).unwrap();
        let t4 = t.reshape(vec![1, 1, 6, 6]).unwrap();
        let via_up = upsample2x(&t4).unwrap();
        for (a, b) in via_resize.data().iter().zip(via_up.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_resize_stays_binary() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::from_fn(vec![1, 10, 10], |_| {
            if rng.gen_bool(0.4) {
                1.0f32
            } else {
                0.0
            }
        });
        let r = resize_mask_nearest(&m, 7).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
