use std::rc::Rc;

use super::{Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

impl<'t, T: Real> Var<'t, T> {
    /// Pointwise map with derivative `df(x, y)` evaluated from input and output.
    fn unary(self, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Result<Self> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = Rc::new(y.data().to_vec());
        self.tape.push(op, y, &[self], move |g, _| {
            let d = g.iter().zip(x.data()).zip(y_saved.iter()).map(|((&g, &x), &y)| g * df(x, y)).collect();
            vec![Some(d)]
        })
    }

    pub fn relu(self) -> Result<Self> {
        self.unary("relu", |x| if x > T::zero() { x } else { T::zero() }, |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Self> {
        let s = T::from_f64_lossy(slope);
        self.unary("leaky_relu", move |x| if x > T::zero() { x } else { x * s }, move |x, _| if x > T::zero() { T::one() } else { s })
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn abs(self) -> Result<Self> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// `ln(1 + e^x)` in the overflow-free form `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(self) -> Result<Self> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        let c = T::from_f64_lossy(c);
        let x = self.value();
        let y = x.map(|v| v * c);
        self.tape.push("scale", y, &[self], move |g, _| vec![Some(g.iter().map(|&g| g * c).collect())])
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        let c = T::from_f64_lossy(c);
        let y = self.value().map(|v| v + c);
        self.tape.push("add_scalar", y, &[self], |g, _| vec![Some(g.to_vec())])
    }

    fn binary_check(&self, other: &Self, op: &'static str) -> Result<()> {
        if !self.same_tape(other) {
            return arg_err(op, "operands live on different tapes");
        }
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return shape_err(op, format!("{a:?} vs {b:?}"));
        }
        Ok(())
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary_check(&other, "add")?;
        let (a, b) = (self.value(), other.value());
        let y = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())?;
        self.tape.push("add", y, &[self, other], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())])
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary_check(&other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let y = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect())?;
        self.tape.push("sub", y, &[self, other], |g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())])
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary_check(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let y = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect())?;
        self.tape.push("mul", y, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect());
            let gb = needs[1].then(|| g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect());
            vec![ga, gb]
        })
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s shape.
    pub fn add_broadcast(self, other: Self) -> Result<Self> {
        if !self.same_tape(&other) {
            return arg_err("add_broadcast", "operands live on different tapes");
        }
        let (sa, sb) = (self.shape(), other.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return shape_err("add_broadcast", format!("{sb:?} is not a suffix of {sa:?}"));
        }
        let (a, b) = (self.value(), other.value());
        let inner = b.numel();
        let mut y = a.data().to_vec();
        for chunk in y.chunks_mut(inner) {
            chunk.iter_mut().zip(b.data()).for_each(|(v, &w)| *v += w);
        }
        let y = Tensor::new(sa, y)?;
        self.tape.push("add_broadcast", y, &[self, other], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); inner];
                for chunk in g.chunks(inner) {
                    acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        })
    }

    pub fn sum(self) -> Result<Self> {
        let x = self.value();
        let n = x.numel();
        let s = x.data().iter().copied().sum::<T>();
        self.tape.push("sum", Tensor::scalar(s), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.value().numel();
        if n == 0 {
            return arg_err("mean", "empty tensor");
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(self) -> Result<Self> {
        let x = self.value();
        let Some(&n) = x.shape().last() else {
            return arg_err("softmax_lastdim", "scalar input");
        };
        if n == 0 {
            return arg_err("softmax_lastdim", "last extent is zero");
        }
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(n) {
            softmax_row(row);
        }
        let y = Tensor::new(x.shape(), y)?;
        let ys = Rc::new(y.data().to_vec());
        self.tape.push("softmax_lastdim", y, &[self], move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(ys.chunks(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        })
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
