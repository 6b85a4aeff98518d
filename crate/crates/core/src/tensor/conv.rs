//! 3-D convolution through im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::{dims5, Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

/// Stride, dilation and zero padding per spatial axis `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOpts {
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self { stride: [1; 3], dilation: [1; 3], padding: [0; 3] }
    }
}

impl ConvOpts {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self { stride: [stride; 3], dilation: [dilation; 3], padding: [padding; 3] }
    }

    /// Stride-1 options that keep the spatial shape for a cubic kernel of odd extent `k`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self::new(1, dilation, dilation * (k - 1) / 2)
    }

    /// Output extents; `None` if any extent would be non-positive.
    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Some(out)
    }
}

struct Geometry {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    opts: ConvOpts,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.opts.stride == [1; 3] && self.opts.padding == [0; 3]
    }

    /// Input coordinate for output index `o` and tap `t` along `axis`, if inside.
    fn src(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let pos = (o * self.opts.stride[axis] + t * self.opts.dilation[axis]) as isize - self.opts.padding[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Range of output `w` indices whose source lies inside the input for tap `t`.
    fn valid_w(&self, t: usize) -> (usize, usize) {
        let (s, d, p, n) = (self.opts.stride[2], self.opts.dilation[2], self.opts.padding[2], self.input[2]);
        let off = t * d;
        // need p <= o*s + off < n + p
        let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
        let hi = if n + p <= off { 0 } else { ((n + p - off - 1) / s + 1).min(self.output[2]) };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let [kd, kh, kw] = self.kernel;
        let [od_n, oh_n, ow_n] = self.output;
        let [_, h, w] = self.input;
        let plane = oh_n * ow_n;
        let sw = self.opts.stride[2];
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * self.in_voxels()..(c + 1) * self.in_voxels()];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * self.out_voxels()..(row + 1) * self.out_voxels()];
                        let (lo, hi) = self.valid_w(e);
                        for od in 0..od_n {
                            let Some(id) = self.src(0, od, a) else {
                                dst[od * plane..(od + 1) * plane].iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            };
                            for oh in 0..oh_n {
                                let seg = &mut dst[od * plane + oh * ow_n..od * plane + (oh + 1) * ow_n];
                                let Some(ih) = self.src(1, oh, b) else {
                                    seg.iter_mut().for_each(|v| *v = T::zero());
                                    continue;
                                };
                                let base = (id * h + ih) * w;
                                seg[..lo].iter_mut().for_each(|v| *v = T::zero());
                                seg[hi..].iter_mut().for_each(|v| *v = T::zero());
                                if lo < hi {
                                    let iw0 = lo * sw + e * self.opts.dilation[2] - self.opts.padding[2];
                                    if sw == 1 {
                                        seg[lo..hi].copy_from_slice(&xc[base + iw0..base + iw0 + (hi - lo)]);
                                    } else {
                                        for (k, v) in seg[lo..hi].iter_mut().enumerate() {
                                            *v = xc[base + iw0 + k * sw];
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let [kd, kh, kw] = self.kernel;
        let [od_n, oh_n, ow_n] = self.output;
        let [_, h, w] = self.input;
        let plane = oh_n * ow_n;
        let sw = self.opts.stride[2];
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &mut dx[c * self.in_voxels()..(c + 1) * self.in_voxels()];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * self.out_voxels()..(row + 1) * self.out_voxels()];
                        row += 1;
                        let (lo, hi) = self.valid_w(e);
                        if lo >= hi {
                            continue;
                        }
                        for od in 0..od_n {
                            let Some(id) = self.src(0, od, a) else { continue };
                            for oh in 0..oh_n {
                                let Some(ih) = self.src(1, oh, b) else { continue };
                                let seg = &src[od * plane + oh * ow_n..od * plane + (oh + 1) * ow_n];
                                let base = (id * h + ih) * w;
                                let iw0 = lo * sw + e * self.opts.dilation[2] - self.opts.padding[2];
                                for (k, &v) in seg[lo..hi].iter().enumerate() {
                                    xc[base + iw0 + k * sw] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// 3-D cross-correlation. `weight` is `[Cout, Cin, kd, kh, kw]`, `bias` is `[Cout]`.
    pub fn conv3d(self, weight: Self, bias: Option<Self>, opts: ConvOpts) -> Result<Self> {
        let x = self.value();
        let w = weight.value();
        let (batch, cin, input) = dims5("conv3d", x.shape())?;
        let &[cout, wcin, kd, kh, kw] = w.shape() else {
            return shape_err("conv3d", format!("weight must be 5-D, got {:?}", w.shape()));
        };
        if wcin != cin {
            return shape_err("conv3d", format!("input has {cin} channels, weight expects {wcin}"));
        }
        if opts.dilation.contains(&0) || opts.stride.contains(&0) {
            return arg_err("conv3d", "stride and dilation must be >= 1");
        }
        let kernel = [kd, kh, kw];
        let Some(output) = opts.output_extents(input, kernel) else {
            return arg_err("conv3d", format!("non-positive output extent for input {input:?}, kernel {kernel:?}, {opts:?}"));
        };
        if let Some(b) = &bias {
            if b.shape() != [cout] {
                return shape_err("conv3d", format!("bias {:?} for {cout} outputs", b.shape()));
            }
        }
        let geo = Geometry { cin, input, kernel, output, opts };
        let (rows, n_out, n_in) = (geo.rows(), geo.out_voxels(), geo.in_voxels());
        let mut y = vec![T::zero(); batch * cout * n_out];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * n_out] };
        for bi in 0..batch {
            let xb = &x.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
            let colsb: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            T::gemm(cout, rows, n_out, w.data(), false, colsb, false, &mut y[bi * cout * n_out..], false);
        }
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            for (i, plane) in y.chunks_mut(n_out).enumerate() {
                let c = b.data()[i % cout];
                plane.iter_mut().for_each(|v| *v += c);
            }
        }
        let y = Tensor::new([batch, cout, output[0], output[1], output[2]], y)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.push("conv3d", y, &parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); batch * cin * n_in]);
            let mut gw = needs[1].then(|| vec![T::zero(); w.numel()]);
            let mut cols = vec![T::zero(); rows * n_out];
            let mut dcols = if gx.is_some() && !geo.is_pointwise() { vec![T::zero(); rows * n_out] } else { Vec::new() };
            for bi in 0..batch {
                let gb = &g[bi * cout * n_out..(bi + 1) * cout * n_out];
                if let Some(gw) = gw.as_mut() {
                    let xb = &x.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
                    let colsb: &[T] = if geo.is_pointwise() {
                        xb
                    } else {
                        geo.im2col(xb, &mut cols);
                        &cols
                    };
                    T::gemm(cout, n_out, rows, gb, false, colsb, true, gw, bi > 0);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[bi * cin * n_in..(bi + 1) * cin * n_in];
                    if geo.is_pointwise() {
                        T::gemm(rows, cout, n_out, w.data(), true, gb, false, dst, false);
                    } else {
                        T::gemm(rows, cout, n_out, w.data(), true, gb, false, &mut dcols, false);
                        geo.col2im(&dcols, dst);
                    }
                }
            }
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); cout];
                    for (i, plane) in g.chunks(n_out).enumerate() {
                        d[i % cout] += plane.iter().copied().sum::<T>();
                    }
                    d
                }));
            }
            out
        })
    }
}
