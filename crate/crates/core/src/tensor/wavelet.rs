//! Single-level separable orthonormal 3-D Haar transform.
//!
//! For each 2×2×2 block the eight coefficients are the normalised Walsh–Hadamard
//! transform of the block: subband `s` (bits `d h w`, 1 = high-pass) is
//! `(1/√2)³ Σ_δ (-1)^{popcount(s & δ)} x[2i + δ]`. Low-pass is `(a + b)/√2`,
//! high-pass `(a - b)/√2` with `a` the even sample.

use super::{dims5, Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

pub const SUBBAND_NAMES: [&str; 8] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

/// The eight half-resolution subbands of a `[B, C, D, H, W]` tensor, ordered as
/// [`SUBBAND_NAMES`] (letters refer to the D, H, W axes).
#[derive(Clone, Debug, PartialEq)]
pub struct HaarSubbands<T> {
    pub bands: [Tensor<T>; 8],
}

impl<T: Real> HaarSubbands<T> {
    pub fn energy(&self) -> f64 {
        self.bands.iter().map(Tensor::sq_norm).sum()
    }

    pub fn band(&self, name: &str) -> Option<&Tensor<T>> {
        SUBBAND_NAMES.iter().position(|&n| n == name).map(|i| &self.bands[i])
    }
}

#[inline]
fn hadamard8<T: Real>(v: &mut [T; 8]) {
    for bit in [1usize, 2, 4] {
        for i in 0..8 {
            if i & bit == 0 {
                let (a, b) = (v[i], v[i | bit]);
                v[i] = a + b;
                v[i | bit] = a - b;
            }
        }
    }
    let s = T::from_f64_lossy(0.5 / std::f64::consts::SQRT_2);
    v.iter_mut().for_each(|x| *x *= s);
}

/// Analysis over `planes` volumes of extent `full`; writes subband-major output
/// `out[s][plane][half voxel]`.
fn analyze<T: Real>(x: &[T], planes: usize, full: [usize; 3], out: &mut [T]) {
    let [d, h, w] = full;
    let half = [d / 2, h / 2, w / 2];
    let nh = half[0] * half[1] * half[2];
    let band_stride = planes * nh;
    for p in 0..planes {
        let xp = &x[p * d * h * w..(p + 1) * d * h * w];
        for i in 0..half[0] {
            for j in 0..half[1] {
                for k in 0..half[2] {
                    let mut v = [T::zero(); 8];
                    for (delta, slot) in v.iter_mut().enumerate() {
                        let (a, b, c) = (delta >> 2, (delta >> 1) & 1, delta & 1);
                        *slot = xp[((2 * i + a) * h + 2 * j + b) * w + 2 * k + c];
                    }
                    hadamard8(&mut v);
                    let o = p * nh + (i * half[1] + j) * half[2] + k;
                    for (s, &c) in v.iter().enumerate() {
                        out[s * band_stride + o] = c;
                    }
                }
            }
        }
    }
}

fn synthesize<T: Real>(coef: &[T], planes: usize, full: [usize; 3], out: &mut [T]) {
    let [d, h, w] = full;
    let half = [d / 2, h / 2, w / 2];
    let nh = half[0] * half[1] * half[2];
    let band_stride = planes * nh;
    for p in 0..planes {
        let xp = &mut out[p * d * h * w..(p + 1) * d * h * w];
        for i in 0..half[0] {
            for j in 0..half[1] {
                for k in 0..half[2] {
                    let o = p * nh + (i * half[1] + j) * half[2] + k;
                    let mut v = [T::zero(); 8];
                    for (s, slot) in v.iter_mut().enumerate() {
                        *slot = coef[s * band_stride + o];
                    }
                    hadamard8(&mut v);
                    for (delta, &c) in v.iter().enumerate() {
                        let (a, b, cc) = (delta >> 2, (delta >> 1) & 1, delta & 1);
                        xp[((2 * i + a) * h + 2 * j + b) * w + 2 * k + cc] = c;
                    }
                }
            }
        }
    }
}

fn check_even(op: &'static str, shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    let (b, c, ext) = dims5(op, shape)?;
    if ext.iter().any(|&n| n % 2 != 0 || n == 0) {
        return arg_err(op, format!("spatial extents {ext:?} must be even (reflect-pad first)"));
    }
    Ok((b, c, ext))
}

/// Forward transform of a `[B, C, D, H, W]` tensor with even spatial extents.
pub fn haar3d<T: Real>(x: &Tensor<T>) -> Result<HaarSubbands<T>> {
    let (b, c, ext) = check_even("haar3d", x.shape())?;
    let half_shape = [b, c, ext[0] / 2, ext[1] / 2, ext[2] / 2];
    let mut out = vec![T::zero(); x.numel()];
    analyze(x.data(), b * c, ext, &mut out);
    let n = x.numel() / 8;
    let bands = std::array::from_fn(|s| Tensor::new(half_shape, out[s * n..(s + 1) * n].to_vec()).expect("band shape"));
    Ok(HaarSubbands { bands })
}

/// Inverse transform; exact inverse of [`haar3d`] up to rounding.
pub fn haar3d_inverse<T: Real>(sb: &HaarSubbands<T>) -> Result<Tensor<T>> {
    let shape = sb.bands[0].shape().to_vec();
    if sb.bands.iter().any(|t| t.shape() != shape.as_slice()) {
        return shape_err("haar3d_inverse", "subbands differ in shape");
    }
    let (b, c, half) = dims5("haar3d_inverse", &shape)?;
    let full = [half[0] * 2, half[1] * 2, half[2] * 2];
    let coef: Vec<T> = sb.bands.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut out = vec![T::zero(); coef.len()];
    synthesize(&coef, b * c, full, &mut out);
    Tensor::new([b, c, full[0], full[1], full[2]], out)
}

impl<'t, T: Real> Var<'t, T> {
    /// Haar analysis with the 8 subbands concatenated along channels
    /// (subband-major: channel `s·C + c`). Output is `[B, 8C, D/2, H/2, W/2]`.
    pub fn haar3d(self) -> Result<Self> {
        let x = self.value();
        let (b, c, ext) = check_even("haar3d", x.shape())?;
        let half = [ext[0] / 2, ext[1] / 2, ext[2] / 2];
        let nh = half.iter().product::<usize>();
        let mut coef = vec![T::zero(); x.numel()];
        analyze(x.data(), b * c, ext, &mut coef);
        // coef is [s][b][c][vox]; reorder to [b][s][c][vox]
        let mut y = vec![T::zero(); x.numel()];
        for s in 0..8 {
            for bi in 0..b {
                let src = &coef[(s * b + bi) * c * nh..(s * b + bi + 1) * c * nh];
                y[(bi * 8 + s) * c * nh..(bi * 8 + s + 1) * c * nh].copy_from_slice(src);
            }
        }
        let y = Tensor::new([b, 8 * c, half[0], half[1], half[2]], y)?;
        self.tape.push("haar3d", y, &[self], move |g, _| {
            let mut coef = vec![T::zero(); g.len()];
            for s in 0..8 {
                for bi in 0..b {
                    let src = &g[(bi * 8 + s) * c * nh..(bi * 8 + s + 1) * c * nh];
                    coef[(s * b + bi) * c * nh..(s * b + bi + 1) * c * nh].copy_from_slice(src);
                }
            }
            // orthonormal: the adjoint of analysis is synthesis
            let mut dx = vec![T::zero(); g.len()];
            synthesize(&coef, b * c, ext, &mut dx);
            vec![Some(dx)]
        })
    }
}
