use std::rc::Rc;

use super::{dims5, strides, Real, Tensor, Var};
use crate::error::{arg_err, Result};

/// Interpolation taps `(i0, i1, λ)` for upsampling `n` samples by `factor`
/// under the half-pixel (align-corners = false) convention:
/// `src = (dst + 0.5) / factor - 0.5`, clamped to `[0, n - 1]`.
pub fn linear_upsample_weights(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let lam = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lam)
        })
        .collect()
}

impl<'t, T: Real> Var<'t, T> {
    /// Linear upsampling of one axis by an integer factor.
    pub fn upsample_linear_axis(self, axis: usize, factor: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return arg_err("upsample", format!("axis {axis} for rank {}", shape.len()));
        }
        if factor < 2 {
            return arg_err("upsample", format!("factor {factor} < 2"));
        }
        let n = shape[axis];
        if n == 0 {
            return arg_err("upsample", "empty axis");
        }
        let taps: Rc<Vec<(usize, usize, T)>> = Rc::new(
            linear_upsample_weights(n, factor).into_iter().map(|(a, b, l)| (a, b, T::from_f64_lossy(l))).collect(),
        );
        let inner = strides(&shape)[axis];
        let outer: usize = shape[..axis].iter().product();
        let m = n * factor;
        let mut y = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            let src = &x.data()[o * n * inner..(o + 1) * n * inner];
            let dst = &mut y[o * m * inner..(o + 1) * m * inner];
            for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
                let (a, b) = (&src[i0 * inner..(i0 + 1) * inner], &src[i1 * inner..(i1 + 1) * inner]);
                for ((d, &va), &vb) in dst[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                    *d = va + lam * (vb - va);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = m;
        let y = Tensor::new(out_shape, y)?;
        self.tape.push("upsample", y, &[self], move |g, _| {
            let mut dx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let gs = &g[o * m * inner..(o + 1) * m * inner];
                let dst = &mut dx[o * n * inner..(o + 1) * n * inner];
                for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
                    let gj = &gs[j * inner..(j + 1) * inner];
                    let w0 = T::one() - lam;
                    for (k, &gv) in gj.iter().enumerate() {
                        dst[i0 * inner + k] += w0 * gv;
                        dst[i1 * inner + k] += lam * gv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Trilinear upsampling of the three spatial axes of a `[B, C, D, H, W]` tensor.
    pub fn upsample_trilinear(self, factor: usize) -> Result<Self> {
        dims5("upsample_trilinear", &self.shape())?;
        self.upsample_linear_axis(2, factor)?.upsample_linear_axis(3, factor)?.upsample_linear_axis(4, factor)
    }
}
