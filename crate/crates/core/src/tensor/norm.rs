use std::rc::Rc;

use super::{Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

/// Normalisation epsilon used by every norm layer in the networks.
pub const NORM_EPS: f64 = 1e-5;

/// Normalises each contiguous group of `n` values; returns `(xhat, inv_std)`.
fn standardize<T: Real>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let nt = T::from_usize(n).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / n);
    for (src, dst) in x.chunks(n).zip(xhat.chunks_mut(n)) {
        let mean = src.iter().copied().sum::<T>() / nt;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let is = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

/// `dx` for a group given `dxhat`, the normalised values and `1/σ`.
fn standardize_backward<T: Real>(dxhat: &[T], xhat: &[T], inv: T, out: &mut [T]) {
    let nt = T::from_usize(dxhat.len()).unwrap();
    let m1 = dxhat.iter().copied().sum::<T>() / nt;
    let m2 = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() / nt;
    for ((o, &d), &xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv * (d - m1 - xh * m2);
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Per-(sample, channel) normalisation over all spatial positions of a
    /// `[B, C, ...]` tensor, followed by a per-channel affine map.
    pub fn instance_norm(self, scale: Self, shift: Self, eps: f64) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 3 {
            return shape_err("instance_norm", format!("expected [B, C, spatial..], got {shape:?}"));
        }
        let c = shape[1];
        let n: usize = shape[2..].iter().product();
        if n < 2 {
            return arg_err("instance_norm", format!("spatial volume {n} leaves the variance undefined"));
        }
        let (sc, sh) = (scale.value(), shift.value());
        if sc.shape() != [c] || sh.shape() != [c] {
            return shape_err("instance_norm", format!("affine params {:?}/{:?} for {c} channels", sc.shape(), sh.shape()));
        }
        let (xhat, inv) = standardize(x.data(), n, T::from_f64_lossy(eps));
        let mut y = xhat.clone();
        for (g, chunk) in y.chunks_mut(n).enumerate() {
            let (a, b) = (sc.data()[g % c], sh.data()[g % c]);
            chunk.iter_mut().for_each(|v| *v = *v * a + b);
        }
        let y = Tensor::new(shape, y)?;
        let xhat = Rc::new(xhat);
        self.tape.push("instance_norm", y, &[self, scale, shift], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let mut dxhat = vec![T::zero(); n];
                for (grp, ((gc, xc), dc)) in g.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let a = sc.data()[grp % c];
                    dxhat.iter_mut().zip(gc).for_each(|(d, &v)| *d = v * a);
                    standardize_backward(&dxhat, xc, inv[grp], dc);
                }
                dx
            });
            let gs = needs[1].then(|| {
                let mut d = vec![T::zero(); c];
                for (grp, (gc, xc)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    d[grp % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                }
                d
            });
            let gb = needs[2].then(|| {
                let mut d = vec![T::zero(); c];
                for (grp, gc) in g.chunks(n).enumerate() {
                    d[grp % c] += gc.iter().copied().sum::<T>();
                }
                d
            });
            vec![gx, gs, gb]
        })
    }

    /// Normalisation over the last axis with elementwise affine parameters.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: f64) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let Some(&n) = shape.last() else {
            return arg_err("layer_norm", "scalar input");
        };
        let (ga, be) = (gamma.value(), beta.value());
        if ga.shape() != [n] || be.shape() != [n] {
            return shape_err("layer_norm", format!("affine params {:?}/{:?} for width {n}", ga.shape(), be.shape()));
        }
        let (xhat, inv) = standardize(x.data(), n, T::from_f64_lossy(eps));
        let mut y = xhat.clone();
        for chunk in y.chunks_mut(n) {
            for ((v, &a), &b) in chunk.iter_mut().zip(ga.data()).zip(be.data()) {
                *v = *v * a + b;
            }
        }
        let y = Tensor::new(shape, y)?;
        let xhat = Rc::new(xhat);
        self.tape.push("layer_norm", y, &[self, gamma, beta], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let mut dxhat = vec![T::zero(); n];
                for (row, ((gc, xc), dc)) in g.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    dxhat.iter_mut().zip(gc).zip(ga.data()).for_each(|((d, &v), &a)| *d = v * a);
                    standardize_backward(&dxhat, xc, inv[row], dc);
                }
                dx
            });
            let gg = needs[1].then(|| {
                let mut d = vec![T::zero(); n];
                for (gc, xc) in g.chunks(n).zip(xhat.chunks(n)) {
                    d.iter_mut().zip(gc).zip(xc).for_each(|((a, &v), &xh)| *a += v * xh);
                }
                d
            });
            let gb = needs[2].then(|| {
                let mut d = vec![T::zero(); n];
                for gc in g.chunks(n) {
                    d.iter_mut().zip(gc).for_each(|(a, &v)| *a += v);
                }
                d
            });
            vec![gx, gg, gb]
        })
    }
}
