//! Data-movement ops: reshape, permute, slicing, padding, rolling, gathering, concatenation.

use std::rc::Rc;

use super::{strides, Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

const PAD: usize = usize::MAX;

/// Flat input offsets for every output element, given per-output-axis offset
/// tables (already multiplied by the input stride). `PAD` marks zero fill.
fn build_index(maps: &[Vec<usize>]) -> Vec<usize> {
    let n: usize = maps.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(n);
    fn rec(maps: &[Vec<usize>], base: usize, out: &mut Vec<usize>) {
        match maps {
            [] => out.push(base),
            [last] => {
                if base == PAD {
                    out.extend(std::iter::repeat_n(PAD, last.len()));
                } else {
                    out.extend(last.iter().map(|&m| if m == PAD { PAD } else { base + m }));
                }
            }
            [first, rest @ ..] => {
                for &m in first {
                    let b = if base == PAD || m == PAD { PAD } else { base + m };
                    rec(rest, b, out);
                }
            }
        }
    }
    rec(maps, 0, &mut out);
    out
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", x.shape()));
        }
        let y = Tensor::new(shape, x.data().to_vec())?;
        self.tape.push("reshape", y, &[self], |g, _| vec![Some(g.to_vec())])
    }

    /// `out[i] = x[index[i]]`, with `usize::MAX` producing zero. Gradient scatters back.
    pub fn gather(self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Self> {
        let x = self.value();
        if out_shape.iter().product::<usize>() != index.len() {
            return shape_err("gather", format!("index of length {} for shape {out_shape:?}", index.len()));
        }
        let n_in = x.numel();
        if index.iter().any(|&i| i != PAD && i >= n_in) {
            return arg_err("gather", "index out of range");
        }
        let src = x.data();
        let y: Vec<T> = index.iter().map(|&i| if i == PAD { T::zero() } else { src[i] }).collect();
        let y = Tensor::new(out_shape, y)?;
        self.tape.push("gather", y, &[self], move |g, _| {
            let mut dx = vec![T::zero(); n_in];
            for (&i, &gv) in index.iter().zip(g) {
                if i != PAD {
                    dx[i] += gv;
                }
            }
            vec![Some(dx)]
        })
    }

    fn gather_maps(self, op: &'static str, out_shape: Vec<usize>, maps: Vec<Vec<usize>>) -> Result<Self> {
        debug_assert!(maps.iter().map(Vec::len).eq(out_shape.iter().copied()));
        let index = build_index(&maps);
        self.gather(Rc::new(index), &out_shape).map_err(|e| match e {
            crate::Error::Shape { detail, .. } => crate::Error::Shape { op, detail },
            other => other,
        })
    }

    /// Reorders axes: output axis `a` is input axis `axes[a]`.
    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return arg_err("permute", format!("{axes:?} is not a permutation of {} axes", shape.len()));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let maps = axes.iter().map(|&a| (0..shape[a]).map(|i| i * st[a]).collect()).collect();
        self.gather_maps("permute", out_shape, maps)
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return arg_err("slice_axis", format!("axis {axis} range {start}..{} of {shape:?}", start + len));
        }
        let mut ranges: Vec<(usize, usize)> = shape.iter().map(|&n| (0, n)).collect();
        ranges[axis] = (start, len);
        self.narrow(&ranges)
    }

    /// Crops every axis to `(start, len)`.
    pub fn narrow(self, ranges: &[(usize, usize)]) -> Result<Self> {
        let shape = self.shape();
        if ranges.len() != shape.len() || ranges.iter().zip(&shape).any(|(&(s, l), &n)| s + l > n) {
            return arg_err("narrow", format!("ranges {ranges:?} for shape {shape:?}"));
        }
        if ranges.iter().zip(&shape).all(|(&(s, l), &n)| s == 0 && l == n) {
            return Ok(self);
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.1).collect();
        let maps = ranges.iter().zip(&st).map(|(&(s, l), &stride)| (s..s + l).map(|i| i * stride).collect()).collect();
        self.gather_maps("narrow", out_shape, maps)
    }

    /// Zero padding, `(before, after)` per axis.
    pub fn pad(self, pads: &[(usize, usize)]) -> Result<Self> {
        let shape = self.shape();
        if pads.len() != shape.len() {
            return arg_err("pad", format!("{} pad pairs for {} axes", pads.len(), shape.len()));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self);
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = pads.iter().zip(&shape).map(|(&(a, b), &n)| a + n + b).collect();
        let maps = pads
            .iter()
            .zip(&shape)
            .zip(&st)
            .map(|((&(before, after), &n), &stride)| {
                let mut m = vec![PAD; before];
                m.extend((0..n).map(|i| i * stride));
                m.extend(std::iter::repeat_n(PAD, after));
                m
            })
            .collect();
        self.gather_maps("pad", out_shape, maps)
    }

    /// Edge padding: the `before` leading and `after` trailing samples of each
    /// axis repeat the first and last sample.
    pub fn pad_replicate(self, pads: &[(usize, usize)]) -> Result<Self> {
        let shape = self.shape();
        if pads.len() != shape.len() {
            return arg_err("pad_replicate", format!("{} pad pairs for {} axes", pads.len(), shape.len()));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self);
        }
        if shape.contains(&0) {
            return arg_err("pad_replicate", format!("cannot replicate edges of empty shape {shape:?}"));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = pads.iter().zip(&shape).map(|(&(a, b), &n)| a + n + b).collect();
        let maps = pads
            .iter()
            .zip(&shape)
            .zip(&st)
            .map(|((&(before, after), &n), &stride)| {
                (0..before + n + after).map(|i| i.saturating_sub(before).min(n - 1) * stride).collect()
            })
            .collect();
        self.gather_maps("pad_replicate", out_shape, maps)
    }

    /// Pads odd extents of the listed axes by one trailing sample mirrored about
    /// the last sample (`x[n] = x[n-2]`).
    pub fn pad_reflect_to_even(self, axes: &[usize]) -> Result<Self> {
        let shape = self.shape();
        if axes.iter().all(|&a| a < shape.len() && shape[a] % 2 == 0) {
            return Ok(self);
        }
        let st = strides(&shape);
        let mut out_shape = shape.clone();
        let mut maps: Vec<Vec<usize>> = shape.iter().zip(&st).map(|(&n, &s)| (0..n).map(|i| i * s).collect()).collect();
        for &a in axes {
            if a >= shape.len() {
                return arg_err("pad_reflect_to_even", format!("axis {a} out of range"));
            }
            let n = shape[a];
            if n % 2 == 1 {
                let src = if n >= 2 { n - 2 } else { 0 };
                maps[a].push(src * st[a]);
                out_shape[a] += 1;
            }
        }
        self.gather_maps("pad_reflect_to_even", out_shape, maps)
    }

    /// Cyclic roll: `out[(i + shift) mod n] = x[i]` per axis.
    pub fn roll(self, shifts: &[isize]) -> Result<Self> {
        let shape = self.shape();
        if shifts.len() != shape.len() {
            return arg_err("roll", format!("{} shifts for {} axes", shifts.len(), shape.len()));
        }
        if shifts.iter().zip(&shape).all(|(&s, &n)| n == 0 || s.rem_euclid(n as isize) == 0) {
            return Ok(self);
        }
        let st = strides(&shape);
        let maps = shifts
            .iter()
            .zip(&shape)
            .zip(&st)
            .map(|((&s, &n), &stride)| {
                (0..n).map(|o| ((o as isize - s).rem_euclid(n as isize)) as usize * stride).collect()
            })
            .collect();
        self.gather_maps("roll", shape, maps)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let Some(first) = parts.first() else {
            return arg_err("concat", "no inputs");
        };
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return arg_err("concat", format!("axis {axis} for rank {}", shape0.len()));
        }
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            let s = v.shape();
            if !p.same_tape(first) {
                return arg_err("concat", "operands live on different tapes");
            }
            if s.len() != shape0.len() || s.iter().zip(&shape0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return shape_err("concat", format!("{s:?} vs {shape0:?} along axis {axis}"));
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                y.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = shape0.clone();
        out_shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let y = Tensor::new(out_shape, y)?;
        first.tape.push("concat", y, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = needs.iter().zip(&widths).map(|(&n, &w)| n.then(|| Vec::with_capacity(outer * w))).collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gr, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(gr) = gr {
                        gr.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        })
    }
}
