//! Loop-level reference implementations used as oracles. Batch size is 1 and
//! everything runs in f64 on plain vectors.
#![allow(dead_code)]

use med2t::nn::ParamStore;
use med2t::tensor::Tensor;

/// A `[C, D, H, W]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub c: usize,
    pub ext: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(c: usize, ext: [usize; 3]) -> Self {
        Grid { c, ext, data: vec![0.0; c * ext[0] * ext[1] * ext[2]] }
    }

    /// From a `[1, C, D, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], 1);
        Grid { c: s[1], ext: [s[2], s[3], s[4]], data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new([1, self.c, self.ext[0], self.ext[1], self.ext[2]], self.data.clone()).unwrap()
    }

    pub fn voxels(&self) -> usize {
        self.ext.iter().product()
    }

    pub fn at(&self, c: usize, p: [usize; 3]) -> f64 {
        self.data[((c * self.ext[0] + p[0]) * self.ext[1] + p[1]) * self.ext[2] + p[2]]
    }

    pub fn set(&mut self, c: usize, p: [usize; 3], v: f64) {
        let i = ((c * self.ext[0] + p[0]) * self.ext[1] + p[1]) * self.ext[2] + p[2];
        self.data[i] = v;
    }

    pub fn positions(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.ext;
        let mut v = Vec::with_capacity(d * h * w);
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    v.push([i, j, k]);
                }
            }
        }
        v
    }

    pub fn token(&self, p: [usize; 3]) -> Vec<f64> {
        (0..self.c).map(|c| self.at(c, p)).collect()
    }

    pub fn add(&self, other: &Grid) -> Grid {
        assert_eq!((self.c, self.ext), (other.c, other.ext));
        Grid { c: self.c, ext: self.ext, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn relu(&self) -> Grid {
        Grid { c: self.c, ext: self.ext, data: self.data.iter().map(|v| v.max(0.0)).collect() }
    }

    pub fn concat(&self, other: &Grid) -> Grid {
        assert_eq!(self.ext, other.ext);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Grid { c: self.c + other.c, ext: self.ext, data }
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.numel(), self.data.len());
        self.data.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Direct summation convolution with zero padding.
pub fn conv(x: &Grid, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, dil: usize, pad: usize) -> Grid {
    conv_impl(x, w, b, stride, dil, pad, false)
}

/// Like [`conv`] but out-of-range taps read the nearest edge sample.
pub fn conv_edge(x: &Grid, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, dil: usize, pad: usize) -> Grid {
    conv_impl(x, w, b, stride, dil, pad, true)
}

fn conv_impl(x: &Grid, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, dil: usize, pad: usize, edge: bool) -> Grid {
    let &[co, ci, k, _, _] = w.shape() else { panic!("kernel rank") };
    assert_eq!(ci, x.c);
    let span = dil * (k - 1) + 1;
    let out_ext = x.ext.map(|n| (n + 2 * pad - span) / stride + 1);
    let mut y = Grid::zeros(co, out_ext);
    for o in 0..co {
        for p in y.positions() {
            let mut s = b.map_or(0.0, |b| b.data()[o]);
            for c in 0..ci {
                for a in 0..k {
                    for bb in 0..k {
                        for cc in 0..k {
                            let q = [p[0] * stride + a * dil, p[1] * stride + bb * dil, p[2] * stride + cc * dil];
                            let inside = (0..3).all(|ax| q[ax] >= pad && q[ax] - pad < x.ext[ax]);
                            if !inside && !edge {
                                continue;
                            }
                            let src: [usize; 3] = std::array::from_fn(|ax| q[ax].saturating_sub(pad).min(x.ext[ax] - 1));
                            s += w.at(&[o, c, a, bb, cc]) * x.at(c, src);
                        }
                    }
                }
            }
            y.set(o, p, s);
        }
    }
    y
}

pub fn instance_norm(x: &Grid, scale: &[f64], shift: &[f64], eps: f64) -> Grid {
    let n = x.voxels();
    let mut y = x.clone();
    for c in 0..x.c {
        let ch = &x.data[c * n..(c + 1) * n];
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, v) in y.data[c * n..(c + 1) * n].iter_mut().zip(ch) {
            *o = (v - mean) * inv * scale[c] + shift[c];
        }
    }
    y
}

pub fn layer_norm(v: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter().enumerate().map(|(i, x)| (x - mean) * inv * gamma[i] + beta[i]).collect()
}

/// `W x + b` with `W` stored `[out, in]`.
pub fn affine(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let &[o, i] = w.shape() else { panic!("linear rank") };
    assert_eq!(i, x.len());
    (0..o).map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>()).collect()
}

/// Trilinear ×2 upsampling, half-pixel convention, evaluated per output voxel.
pub fn upsample2(x: &Grid) -> Grid {
    let ext = x.ext.map(|n| 2 * n);
    let mut y = Grid::zeros(x.c, ext);
    let taps = |o: usize, n: usize| -> [(usize, f64); 2] {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = src - i0 as f64;
        [(i0, 1.0 - f), (i1, f)]
    };
    for c in 0..x.c {
        for p in y.positions() {
            let mut s = 0.0;
            for (a, wa) in taps(p[0], x.ext[0]) {
                for (b, wb) in taps(p[1], x.ext[1]) {
                    for (cc, wc) in taps(p[2], x.ext[2]) {
                        s += wa * wb * wc * x.at(c, [a, b, cc]);
                    }
                }
            }
            y.set(c, p, s);
        }
    }
    y
}

/// Swin block parameters looked up by name.
pub struct BlockParams<'a> {
    pub store: &'a ParamStore<f64>,
    pub prefix: String,
}

impl BlockParams<'_> {
    pub fn get(&self, name: &str) -> &Tensor<f64> {
        let full = format!("{}.{name}", self.prefix);
        self.store.get(self.store.id(&full).unwrap_or_else(|| panic!("no parameter {full}")))
    }
}

/// Pre-norm Swin block evaluated token by token. `window` is the configured
/// window; on axes where the map is not larger than it, the window shrinks to
/// the map and the shift is dropped. Extents must be divisible by the
/// effective window.
pub fn swin_block(x: &Grid, p: &BlockParams, heads: usize, window: [usize; 3], shifted: bool) -> Grid {
    let c = x.c;
    let hd = c / heads;
    let eff: [usize; 3] = std::array::from_fn(|a| window[a].min(x.ext[a]));
    let shift: [usize; 3] = std::array::from_fn(|a| if shifted && x.ext[a] > window[a] { window[a] / 2 } else { 0 });
    assert!((0..3).all(|a| x.ext[a] % eff[a] == 0), "naive block needs divisible extents");
    let positions = x.positions();
    let lin = |q: [usize; 3]| (q[0] * x.ext[1] + q[1]) * x.ext[2] + q[2];
    let (g1, b1) = (p.get("norm1.gamma").data(), p.get("norm1.beta").data());
    let normed: Vec<Vec<f64>> = positions.iter().map(|&q| layer_norm(&x.token(q), g1, b1, 1e-5)).collect();
    let (wqkv, bqkv) = (p.get("qkv.weight"), p.get("qkv.bias"));
    let qkv: Vec<Vec<f64>> = normed.iter().map(|t| affine(wqkv, bqkv, t)).collect();
    let table = p.get("rel_bias");
    let span = window.map(|w| 2 * w - 1);

    // rolled position r holds the token originally at (r + shift) mod n
    let orig = |r: [usize; 3]| -> [usize; 3] { std::array::from_fn(|a| (r[a] + shift[a]) % x.ext[a]) };
    let wrapped = |r: [usize; 3]| -> [bool; 3] { std::array::from_fn(|a| shift[a] > 0 && r[a] + shift[a] >= x.ext[a]) };

    let mut attn_out = vec![vec![0.0; c]; positions.len()];
    let nwin: [usize; 3] = std::array::from_fn(|a| x.ext[a] / eff[a]);
    for wd in 0..nwin[0] {
        for wh in 0..nwin[1] {
            for ww in 0..nwin[2] {
                let mut toks = Vec::new();
                for a in 0..eff[0] {
                    for b in 0..eff[1] {
                        for cc in 0..eff[2] {
                            toks.push(([a, b, cc], [wd * eff[0] + a, wh * eff[1] + b, ww * eff[2] + cc]));
                        }
                    }
                }
                let mut merged = vec![vec![0.0; c]; toks.len()];
                for h in 0..heads {
                    for (i, &(ci, ri)) in toks.iter().enumerate() {
                        let qi = &qkv[lin(orig(ri))][h * hd..(h + 1) * hd];
                        let mut logits = Vec::with_capacity(toks.len());
                        for &(cj, rj) in &toks {
                            let kj = &qkv[lin(orig(rj))][c + h * hd..c + (h + 1) * hd];
                            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt();
                            let o: [usize; 3] = std::array::from_fn(|a| (ci[a] as isize - cj[a] as isize + window[a] as isize - 1) as usize);
                            let row = (o[0] * span[1] + o[1]) * span[2] + o[2];
                            let masked = wrapped(ri) != wrapped(rj);
                            logits.push(if masked { f64::NEG_INFINITY } else { dot + table.at(&[row, h]) });
                        }
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for (j, &(_, rj)) in toks.iter().enumerate() {
                            let vj = &qkv[lin(orig(rj))][2 * c + h * hd..2 * c + (h + 1) * hd];
                            for t in 0..hd {
                                merged[i][h * hd + t] += e[j] / z * vj[t];
                            }
                        }
                    }
                }
                for (i, &(_, ri)) in toks.iter().enumerate() {
                    attn_out[lin(orig(ri))] = affine(p.get("proj.weight"), p.get("proj.bias"), &merged[i]);
                }
            }
        }
    }

    let (g2, b2) = (p.get("norm2.gamma").data(), p.get("norm2.beta").data());
    let mut y = Grid::zeros(c, x.ext);
    for (idx, &q) in positions.iter().enumerate() {
        let x1: Vec<f64> = x.token(q).iter().zip(&attn_out[idx]).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = affine(p.get("fc1.weight"), p.get("fc1.bias"), &layer_norm(&x1, g2, b2, 1e-5))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let mlp = affine(p.get("fc2.weight"), p.get("fc2.bias"), &hidden);
        for ch in 0..c {
            y.set(ch, q, x1[ch] + mlp[ch]);
        }
    }
    y
}
