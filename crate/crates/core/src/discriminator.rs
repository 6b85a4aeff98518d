//! Two-path patch discriminator: a strided 3-D conv stack next to a conv stack
//! over single-level Haar subbands, joined at matching resolution and reduced
//! to a one-channel logit map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv3d, InstanceNorm, ParamStore, Session};
use crate::tensor::{dims5, ConvOpts, Real, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Output widths of the conv path.
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    /// Output widths of the conv stack applied to the Haar subbands.
    pub wavelet_channels: Vec<usize>,
    pub wavelet_strides: Vec<usize>,
    pub fusion_channels: usize,
    /// Instance norm after every conv except the first of each path.
    pub norm: bool,
    /// Feed `[MRI, CT]` instead of CT alone.
    pub conditional: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64],
            conv_strides: vec![2, 2, 1],
            wavelet_channels: vec![16, 32, 64],
            wavelet_strides: vec![1, 2, 1],
            fusion_channels: 64,
            norm: true,
            conditional: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn in_channels(&self) -> usize {
        if self.conditional {
            2
        } else {
            1
        }
    }

    /// Input voxels per logit along each axis.
    pub fn output_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::Config(format!("discriminator: {d}")));
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            return bad("conv_channels and conv_strides must be non-empty and equally long");
        }
        if self.wavelet_channels.is_empty() || self.wavelet_channels.len() != self.wavelet_strides.len() {
            return bad("wavelet_channels and wavelet_strides must be non-empty and equally long");
        }
        let all = self.conv_channels.iter().chain(&self.wavelet_channels).chain([&self.fusion_channels]);
        if all.into_iter().any(|&c| c == 0) {
            return bad("channel widths must be positive");
        }
        if self.conv_strides.iter().chain(&self.wavelet_strides).any(|&s| s == 0 || s > 2) {
            return bad("strides must be 1 or 2");
        }
        if self.output_stride() != 2 * self.wavelet_strides.iter().product::<usize>() {
            return bad("conv path stride must equal 2 x wavelet path stride so the paths meet at one resolution");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    conv: Conv3d,
    norm: Option<InstanceNorm>,
}

impl Layer {
    fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = self.conv.forward(s, x)?;
        if let Some(n) = &self.norm {
            h = n.forward(s, h)?;
        }
        h.leaky_relu(LEAKY_SLOPE)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    conv_path: Vec<Layer>,
    wavelet_path: Vec<Layer>,
    fusion: Layer,
    out: Conv3d,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

fn stack<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    mut cin: usize,
    widths: &[usize],
    strides: &[usize],
    norm: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Layer> {
    let mut layers = Vec::new();
    for (i, (&c, &st)) in widths.iter().zip(strides).enumerate() {
        let n = format!("{name}{i}");
        let conv = Conv3d::new(store, &format!("{n}.conv"), (cin, c, 3), ConvOpts::new(st, 1, 1), rng);
        let norm = (norm && i > 0).then(|| InstanceNorm::new(store, &format!("{n}.norm"), c, rng));
        layers.push(Layer { conv, norm });
        cin = c;
    }
    layers
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cin = config.in_channels();
        let conv_path = stack(&mut store, "conv", cin, &config.conv_channels, &config.conv_strides, config.norm, &mut rng);
        let wavelet_path =
            stack(&mut store, "wave", 8 * cin, &config.wavelet_channels, &config.wavelet_strides, config.norm, &mut rng);
        let joined = config.conv_channels.last().unwrap() + config.wavelet_channels.last().unwrap();
        let fusion = Layer {
            conv: Conv3d::new(&mut store, "fusion.conv", (joined, config.fusion_channels, 3), ConvOpts::same(3, 1), &mut rng),
            norm: config.norm.then(|| InstanceNorm::new(&mut store, "fusion.norm", config.fusion_channels, &mut rng)),
        };
        let out = Conv3d::new(&mut store, "out", (config.fusion_channels, 1, 3), ConvOpts::same(3, 1), &mut rng);
        Ok(Self { config, params: store, layout: Layout { conv_path, wavelet_path, fusion, out } })
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Logit map extents for a given input.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = self.config.output_stride();
        if input.iter().any(|&n| n < k || n % k != 0) {
            return shape_err("discriminator", format!("input extents {input:?} must be positive multiples of {k}"));
        }
        Ok(input.map(|n| n / k))
    }

    /// Raw logits `[B, 1, D/s, H/s, W/s]` with `s` the output stride.
    pub fn forward<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, ext) = dims5("discriminator", &x.shape())?;
        if c != self.config.in_channels() {
            return shape_err("discriminator", format!("expected {} input channels, got {c}", self.config.in_channels()));
        }
        self.output_extents(ext)?;
        let mut a = x;
        for l in &self.layout.conv_path {
            a = l.forward(s, a)?;
        }
        let mut b = x.pad_reflect_to_even(&[2, 3, 4])?.haar3d()?;
        for l in &self.layout.wavelet_path {
            b = l.forward(s, b)?;
        }
        let h = self.layout.fusion.forward(s, Var::concat(&[a, b], 1)?)?;
        self.layout.out.forward(s, h)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.params, false);
        let y = self.forward(&s, s.input(x.clone()))?;
        Ok((*y.value()).clone())
    }

    /// Weight of the first conv-path layer.
    pub fn first_conv(&self) -> &Conv3d {
        &self.layout.conv_path[0].conv
    }
}
