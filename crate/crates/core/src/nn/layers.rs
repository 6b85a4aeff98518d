use rand::Rng;

use super::{Init, ParamId, ParamStore, Session};
use crate::error::Result;
use crate::tensor::NORM_EPS;
use crate::tensor::{ConvOpts, Real, Var};

/// 3-D convolution with a cubic kernel.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: ConvOpts,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad_mode: PadMode,
}

/// How a [`Conv3d`] fills samples outside the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Repeat the edge sample, so spatially constant inputs give constant outputs.
    Replicate,
}

impl Conv3d {
    /// Kaiming fan-in weights, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        opts: ConvOpts,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, (cin, cout, k), opts, Init::KaimingNormal { fan_in: cin * k * k * k }, rng)
    }

    pub fn with_init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        opts: ConvOpts,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), &[cout, cin, k, k, k], init, rng);
        let bias = store.init(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self { weight, bias, opts, in_channels: cin, out_channels: cout, kernel: k, pad_mode: PadMode::Zeros }
    }

    pub fn replicate(mut self) -> Self {
        self.pad_mode = PadMode::Replicate;
        self
    }

    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (w, b) = (s.param(self.weight), Some(s.param(self.bias)));
        match self.pad_mode {
            PadMode::Replicate if self.opts.padding != [0; 3] => {
                let [pd, ph, pw] = self.opts.padding;
                let x = x.pad_replicate(&[(0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)])?;
                x.conv3d(w, b, ConvOpts { padding: [0; 3], ..self.opts })
            }
            _ => x.conv3d(w, b, self.opts),
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3) + self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Truncated-normal (σ = 0.02) weights, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.init(format!("{name}.weight"), &[fan_out, fan_in], Init::TruncatedNormal { std: 0.02 }, rng);
        let bias = store.init(format!("{name}.bias"), &[fan_out], Init::Zeros, rng);
        Self { weight, bias }
    }

    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(s.param(self.weight), Some(s.param(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        let gamma = store.init(format!("{name}.gamma"), &[width], Init::Ones, rng);
        let beta = store.init(format!("{name}.beta"), &[width], Init::Zeros, rng);
        Self { gamma, beta }
    }

    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(s.param(self.gamma), s.param(self.beta), NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let scale = store.init(format!("{name}.scale"), &[channels], Init::Ones, rng);
        let shift = store.init(format!("{name}.shift"), &[channels], Init::Zeros, rng);
        Self { scale, shift }
    }

    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.instance_norm(s.param(self.scale), s.param(self.shift), NORM_EPS)
    }
}
