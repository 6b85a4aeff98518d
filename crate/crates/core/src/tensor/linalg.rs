use super::{Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

impl<'t, T: Real> Var<'t, T> {
    /// `y = x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(self, weight: Self, bias: Option<Self>) -> Result<Self> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let Some(&k) = xs.last() else {
            return arg_err("linear", "scalar input");
        };
        let &[n, wk] = w.shape() else {
            return shape_err("linear", format!("weight must be 2-D, got {:?}", w.shape()));
        };
        if wk != k {
            return shape_err("linear", format!("input features {k} vs weight {:?}", w.shape()));
        }
        if let Some(b) = &bias {
            if b.shape() != [n] {
                return shape_err("linear", format!("bias {:?} for {n} outputs", b.shape()));
            }
        }
        let m = x.numel() / k.max(1);
        let mut y = vec![T::zero(); m * n];
        T::gemm(m, k, n, x.data(), false, w.data(), true, &mut y, false);
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            for row in y.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(v, &c)| *v += c);
            }
        }
        let mut ys = xs;
        *ys.last_mut().unwrap() = n;
        let y = Tensor::new(ys, y)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.push("linear", y, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, w.data(), false, &mut d, false);
                d
            });
            let gw = needs[1].then(|| {
                let mut d = vec![T::zero(); n * k];
                T::gemm(n, m, k, g, true, x.data(), false, &mut d, false);
                d
            });
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    d
                }));
            }
            out
        })
    }

    /// Batched matrix product `[B, M, K] · [B, K, N]`, or `[B, M, K] · [B, N, K]ᵀ`
    /// when `transpose_rhs`.
    pub fn bmm(self, rhs: Self, transpose_rhs: bool) -> Result<Self> {
        let a = self.value();
        let b = rhs.value();
        let (&[bs, m, k], &[bs2, r1, r2]) = (a.shape(), b.shape()) else {
            return shape_err("bmm", format!("expected 3-D operands, got {:?} and {:?}", a.shape(), b.shape()));
        };
        let (kb, n) = if transpose_rhs { (r2, r1) } else { (r1, r2) };
        if bs != bs2 || kb != k {
            return shape_err("bmm", format!("{:?} x {:?} (transpose_rhs = {transpose_rhs})", a.shape(), b.shape()));
        }
        let mut y = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            T::gemm(m, k, n, &a.data()[i * m * k..], false, &b.data()[i * k * n..], transpose_rhs, &mut y[i * m * n..], false);
        }
        let y = Tensor::new([bs, m, n], y)?;
        self.tape.push("bmm", y, &[self, rhs], move |g, needs| {
            let ga = needs[0].then(|| {
                // dA = dC · op(B)ᵀ
                let mut d = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    T::gemm(m, n, k, &g[i * m * n..], false, &b.data()[i * k * n..], !transpose_rhs, &mut d[i * m * k..], false);
                }
                d
            });
            let gb = needs[1].then(|| {
                let mut d = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    if transpose_rhs {
                        // dB = dCᵀ · A  ([n, k])
                        T::gemm(n, m, k, &g[i * m * n..], true, &a.data()[i * m * k..], false, &mut d[i * k * n..], false);
                    } else {
                        // dB = Aᵀ · dC  ([k, n])
                        T::gemm(k, m, n, &a.data()[i * m * k..], true, &g[i * m * n..], false, &mut d[i * k * n..], false);
                    }
                }
                d
            });
            vec![ga, gb]
        })
    }
}
