//! 3-D (shifted-)window multi-head self-attention blocks.
//!
//! Blocks work on channels-last token grids internally. A block whose spec has
//! a non-zero shift rolls the grid by `-shift` before partitioning and masks
//! attention between tokens that were not neighbours before the roll.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::tensor::{dims5, Real, Tensor, Var};

/// Additive logit penalty for token pairs from different pre-shift regions.
pub const MASK_PENALTY: f64 = -1e9;

/// Window extents and cyclic shift along `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowSpec {
    /// Regular (unshifted) windows.
    pub fn new(window: [usize; 3]) -> Self {
        Self { window, shift: [0; 3] }
    }

    /// Windows shifted by half their extent.
    pub fn shifted(window: [usize; 3]) -> Self {
        Self { window, shift: window.map(|w| w / 2) }
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.contains(&0) {
            return arg_err("window_spec", format!("zero window extent in {:?}", self.window));
        }
        if self.shift.iter().zip(&self.window).any(|(&s, &w)| s != 0 && s != w / 2) {
            return arg_err("window_spec", format!("shift {:?} must be 0 or half of {:?}", self.shift, self.window));
        }
        Ok(())
    }

    /// Spec actually used on a feature map: axes no longer than the window
    /// collapse to a single window of the map's extent with no shift.
    pub fn fit_to(&self, extents: [usize; 3]) -> Self {
        let mut out = *self;
        for a in 0..3 {
            if extents[a] <= self.window[a] {
                out.window[a] = extents[a];
                out.shift[a] = 0;
            }
        }
        out
    }

    /// Extents rounded up to whole windows.
    pub fn padded(&self, extents: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| extents[a].div_ceil(self.window[a]) * self.window[a])
    }

    pub fn num_windows(&self, extents: [usize; 3]) -> usize {
        (0..3).map(|a| extents[a] / self.window[a]).product()
    }

    fn check_divides(&self, op: &'static str, extents: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| extents[a] % self.window[a] != 0) {
            return shape_err(op, format!("extents {extents:?} not divisible by window {:?}", self.window));
        }
        Ok(())
    }
}

/// `[B, D, H, W, C]` → `[B·nW, tokens, C]`.
fn partition_cl<'t, T: Real>(x: Var<'t, T>, spec: &WindowSpec) -> Result<Var<'t, T>> {
    let &[b, d, h, w, c] = x.shape().as_slice() else {
        return shape_err("window_partition", "expected channels-last 5-D input");
    };
    spec.check_divides("window_partition", [d, h, w])?;
    let [wd, wh, ww] = spec.window;
    let (nd, nh, nw) = (d / wd, h / wh, w / ww);
    x.reshape(&[b, nd, wd, nh, wh, nw, ww, c])?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[b * nd * nh * nw, wd * wh * ww, c])
}

/// Inverse of [`partition_cl`].
fn reverse_cl<'t, T: Real>(win: Var<'t, T>, spec: &WindowSpec, batch: usize, extents: [usize; 3]) -> Result<Var<'t, T>> {
    spec.check_divides("window_reverse", extents)?;
    let &[n, t, c] = win.shape().as_slice() else {
        return shape_err("window_reverse", "expected [windows, tokens, C]");
    };
    let [d, h, w] = extents;
    let [wd, wh, ww] = spec.window;
    let (nd, nh, nw) = (d / wd, h / wh, w / ww);
    if n != batch * nd * nh * nw || t != spec.tokens() {
        return shape_err("window_reverse", format!("{n} windows of {t} tokens for batch {batch}, extents {extents:?}"));
    }
    win.reshape(&[batch, nd, nh, nw, wd, wh, ww, c])?.permute(&[0, 1, 4, 2, 5, 3, 6, 7])?.reshape(&[batch, d, h, w, c])
}

/// Splits `[B, C, D, H, W]` into windows: `[B·nW, wd·wh·ww, C]`, windows in
/// `(d, h, w)` raster order per batch item, tokens in raster order per window.
pub fn window_partition<'t, T: Real>(x: Var<'t, T>, spec: &WindowSpec) -> Result<Var<'t, T>> {
    dims5("window_partition", &x.shape())?;
    partition_cl(x.permute(&[0, 2, 3, 4, 1])?, spec)
}

/// Reassembles windows produced by [`window_partition`].
pub fn window_reverse<'t, T: Real>(windows: Var<'t, T>, spec: &WindowSpec, batch: usize, extents: [usize; 3]) -> Result<Var<'t, T>> {
    reverse_cl(windows, spec, batch, extents)?.permute(&[0, 4, 1, 2, 3])
}

/// Rolls the spatial axes of `[B, C, D, H, W]` by `-shift` (or `+shift` when `inverse`).
pub fn cyclic_shift<'t, T: Real>(x: Var<'t, T>, spec: &WindowSpec, inverse: bool) -> Result<Var<'t, T>> {
    dims5("cyclic_shift", &x.shape())?;
    let sign = if inverse { 1 } else { -1 };
    let s = spec.shift.map(|v| sign * v as isize);
    x.roll(&[0, 0, s[0], s[1], s[2]])
}

fn shift_cl<'t, T: Real>(x: Var<'t, T>, spec: &WindowSpec, inverse: bool) -> Result<Var<'t, T>> {
    let sign = if inverse { 1 } else { -1 };
    let s = spec.shift.map(|v| sign * v as isize);
    x.roll(&[0, s[0], s[1], s[2], 0])
}

/// Region label of every voxel of the rolled grid: tokens share a label iff
/// they were contiguous before the roll.
fn region_labels(spec: &WindowSpec, extents: [usize; 3]) -> Vec<usize> {
    let region = |a: usize, i: usize| {
        let (n, w, s) = (extents[a], spec.window[a], spec.shift[a]);
        if s == 0 || i < n - w {
            0
        } else if i < n - s {
            1
        } else {
            2
        }
    };
    let [d, h, w] = extents;
    let mut labels = Vec::with_capacity(d * h * w);
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                labels.push((region(0, i) * 3 + region(1, j)) * 3 + region(2, k));
            }
        }
    }
    labels
}

/// Shifted-window attention mask `[nW, T, T]`: 0 for token pairs from the same
/// pre-shift region, [`MASK_PENALTY`] otherwise.
pub fn attention_mask<T: Real>(spec: &WindowSpec, extents: [usize; 3]) -> Result<Tensor<T>> {
    spec.validate()?;
    if !spec.is_shifted() {
        return arg_err("attention_mask", "mask requested for an unshifted window spec");
    }
    spec.check_divides("attention_mask", extents)?;
    let labels = region_labels(spec, extents);
    let [_, h, w] = extents;
    let [wd, wh, ww] = spec.window;
    let t = spec.tokens();
    let nw = spec.num_windows(extents);
    let (nh, nww) = (h / wh, w / ww);
    let mut mask = vec![T::zero(); nw * t * t];
    let penalty = T::from_f64_lossy(MASK_PENALTY);
    for win in 0..nw {
        let (bd, bh, bw) = (win / (nh * nww), (win / nww) % nh, win % nww);
        let tok_label: Vec<usize> = (0..t)
            .map(|tok| {
                let (td, th, tw) = (tok / (wh * ww), (tok / ww) % wh, tok % ww);
                labels[((bd * wd + td) * h + bh * wh + th) * w + bw * ww + tw]
            })
            .collect();
        for i in 0..t {
            for j in 0..t {
                if tok_label[i] != tok_label[j] {
                    mask[(win * t + i) * t + j] = penalty;
                }
            }
        }
    }
    Tensor::new([nw, t, t], mask)
}

/// Table row for every ordered token pair `(i, j)` of a window, for a table
/// sized for `table_window`. Offsets are `coord(i) - coord(j)`.
pub fn relative_position_index(window: [usize; 3], table_window: [usize; 3]) -> Vec<usize> {
    let t: usize = window.iter().product();
    let coords: Vec<[isize; 3]> = (0..t)
        .map(|tok| {
            let (d, h, w) = (tok / (window[1] * window[2]), (tok / window[2]) % window[1], tok % window[2]);
            [d as isize, h as isize, w as isize]
        })
        .collect();
    let span = table_window.map(|w| 2 * w - 1);
    let mut idx = Vec::with_capacity(t * t);
    for ci in &coords {
        for cj in &coords {
            let o: [usize; 3] = std::array::from_fn(|a| (ci[a] - cj[a] + table_window[a] as isize - 1) as usize);
            idx.push((o[0] * span[1] + o[1]) * span[2] + o[2]);
        }
    }
    idx
}

pub fn relative_table_rows(window: [usize; 3]) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

/// Attention output together with the post-softmax weights `[B, nW, heads, T, T]`.
pub struct WindowAttention<'t, T> {
    pub output: Var<'t, T>,
    pub weights: Var<'t, T>,
}

/// Pre-norm Swin block: `x + WMSA(LN(x))`, then `+ MLP(LN(·))` with a ReLU MLP
/// of expansion ratio 4.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub channels: usize,
    pub heads: usize,
    pub spec: WindowSpec,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub rel_bias: ParamId,
}

pub const MLP_RATIO: usize = 4;

impl SwinBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        spec: WindowSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if heads == 0 || channels % heads != 0 {
            return arg_err("swin_block", format!("{heads} heads do not divide {channels} channels"));
        }
        let hidden = MLP_RATIO * channels;
        Ok(Self {
            channels,
            heads,
            spec,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels, rng),
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels, rng),
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            rel_bias: store.init(
                format!("{name}.rel_bias"),
                &[relative_table_rows(spec.window), heads],
                Init::TruncatedNormal { std: 0.02 },
                rng,
            ),
        })
    }

    /// Analytic parameter count.
    pub fn param_count(channels: usize, heads: usize, window: [usize; 3]) -> usize {
        let c = channels;
        let h = MLP_RATIO * c;
        4 * c + (3 * c * c + 3 * c) + (c * c + c) + (h * c + h) + (c * h + c) + relative_table_rows(window) * heads
    }

    /// Every parameter id of the block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.norm1.gamma, self.norm1.beta, self.norm2.gamma, self.norm2.beta, self.rel_bias];
        for l in [&self.qkv, &self.proj, &self.fc1, &self.fc2] {
            v.extend([l.weight, l.bias]);
        }
        v
    }

    /// Multi-head attention within windows `[N, T, C]` (`N = batch · nW`).
    pub fn window_attention<'t, T: Real>(
        &self,
        s: &Session<'t, T>,
        windows: Var<'t, T>,
        batch: usize,
        eff: &WindowSpec,
        mask: Option<&Tensor<T>>,
    ) -> Result<WindowAttention<'t, T>> {
        let &[n, t, c] = windows.shape().as_slice() else {
            return shape_err("window_attention", "expected [windows, tokens, C]");
        };
        if c != self.channels || t != eff.tokens() || n % batch != 0 {
            return shape_err("window_attention", format!("[{n}, {t}, {c}] for {} channels, window {:?}", self.channels, eff.window));
        }
        let nw = n / batch;
        let (heads, hd) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(s, windows)?.reshape(&[n, t, 3, heads, hd])?.permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.slice_axis(0, i, 1)?.reshape(&[n * heads, t, hd]);
        let (q, k, v) = (part(0)?.scale(1.0 / (hd as f64).sqrt())?, part(1)?, part(2)?);

        let index = relative_position_index(eff.window, self.spec.window);
        // bias[h, i, j] = table[index[i * t + j], h]
        let flat: Vec<usize> = (0..heads).flat_map(|h| index.iter().map(move |&r| r * heads + h)).collect();
        let bias = s.param(self.rel_bias).gather(Rc::new(flat), &[heads, t, t])?;

        let mut logits = q.bmm(k, true)?.reshape(&[batch, nw, heads, t, t])?.add_broadcast(bias)?;
        if let Some(mask) = mask {
            if mask.shape() != [nw, t, t] {
                return shape_err("window_attention", format!("mask {:?} for {nw} windows of {t} tokens", mask.shape()));
            }
            let expanded: Vec<T> = mask.data().chunks(t * t).flat_map(|m| (0..heads).flat_map(move |_| m.iter().copied())).collect();
            logits = logits.add_broadcast(s.input(Tensor::new([nw, heads, t, t], expanded)?))?;
        }
        let weights = logits.softmax_lastdim()?;
        let out = weights
            .reshape(&[n * heads, t, t])?
            .bmm(v, false)?
            .reshape(&[n, heads, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, t, c])?;
        Ok(WindowAttention { output: self.proj.forward(s, out)?, weights })
    }

    /// Block forward on `[B, C, D, H, W]`; shape preserving.
    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, c, ext) = dims5("swin_block", &x.shape())?;
        if c != self.channels {
            return shape_err("swin_block", format!("input has {c} channels, block expects {}", self.channels));
        }
        let eff = self.spec.fit_to(ext);
        let padded = eff.padded(ext);
        let xcl = x.permute(&[0, 2, 3, 4, 1])?;

        let mut h = self.norm1.forward(s, xcl)?;
        h = h.pad(&[(0, 0), (0, padded[0] - ext[0]), (0, padded[1] - ext[1]), (0, padded[2] - ext[2]), (0, 0)])?;
        let mask = if eff.is_shifted() {
            h = shift_cl(h, &eff, false)?;
            Some(attention_mask::<T>(&eff, padded)?)
        } else {
            None
        };
        let win = partition_cl(h, &eff)?;
        let attn = self.window_attention(s, win, b, &eff, mask.as_ref())?.output;
        let mut h = reverse_cl(attn, &eff, b, padded)?;
        if eff.is_shifted() {
            h = shift_cl(h, &eff, true)?;
        }
        let h = h.narrow(&[(0, b), (0, ext[0]), (0, ext[1]), (0, ext[2]), (0, c)])?;
        let x1 = xcl.add(h)?;

        let m = self.norm2.forward(s, x1)?;
        let m = self.fc2.forward(s, self.fc1.forward(s, m)?.relu()?)?;
        x1.add(m)?.permute(&[0, 4, 1, 2, 3])
    }
}
