//! Adversarial, voxel-wise and perceptual objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv3d, Init, PadMode, ParamStore};
use crate::tensor::{dims5, ConvOpts, Real, Tape, Var};

/// Coefficients of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_l1: f64,
    pub lambda_perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_gan: 1.0, lambda_l1: 20.0, lambda_perc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_gan, self.lambda_l1, self.lambda_perc];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {all:?}")));
        }
        Ok(())
    }

    /// `λ_gan·gan + λ_l1·l1 + λ_perc·perc` on plain numbers.
    pub fn combine(&self, gan: f64, l1: f64, perc: f64) -> f64 {
        self.lambda_gan * gan + self.lambda_l1 * l1 + self.lambda_perc * perc
    }
}

/// Mean BCE-with-logits against a constant 0/1 target, via softplus.
pub fn bce_with_logits<'t, T: Real>(logits: Var<'t, T>, target_real: bool) -> Result<Var<'t, T>> {
    let z = if target_real { logits.neg()? } else { logits };
    z.softplus()?.mean()
}

/// Non-saturating generator objective: `mean softplus(-D(fake))`.
pub fn gan_loss_generator<'t, T: Real>(fake_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    bce_with_logits(fake_logits, true)
}

/// `½·[BCE(real, 1) + BCE(fake, 0)]`.
pub fn gan_loss_discriminator<'t, T: Real>(real_logits: Var<'t, T>, fake_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    bce_with_logits(real_logits, true)?.add(bce_with_logits(fake_logits, false)?)?.scale(0.5)
}

pub fn l1_loss<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return shape_err("l1_loss", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    pred.sub(target)?.abs()?.mean()
}

/// Fixed 2-D feature network applied to batches of slices.
///
/// Slices arrive as `[N, C, 1, H, W]`; each returned tap is a feature tensor of
/// the same layout. Implementations must not expose trainable parameters.
pub trait FeatureExtractor<T: Real> {
    fn in_channels(&self) -> usize;
    fn tap_names(&self) -> Vec<String>;
    fn features<'t>(&self, tape: &'t Tape<T>, slices: Var<'t, T>) -> Result<Vec<Var<'t, T>>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceNetConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub seed: u64,
}

impl Default for SliceNetConfig {
    fn default() -> Self {
        Self { in_channels: 3, channels: vec![8, 16, 32, 32], strides: vec![1, 2, 2, 2], seed: 19 }
    }
}

/// Default extractor: seeded strided 3×3 conv layers with LeakyReLU, tapped
/// after every layer.
#[derive(Clone, Debug)]
pub struct SliceConvNet<T> {
    pub config: SliceNetConfig,
    params: ParamStore<T>,
    layers: Vec<Conv3d>,
}

impl<T: Real> SliceConvNet<T> {
    pub fn new(config: SliceNetConfig) -> Result<Self> {
        if config.channels.is_empty() || config.channels.len() != config.strides.len() || config.in_channels == 0 {
            return Err(Error::Config("perceptual extractor: channels and strides must be non-empty and equally long".into()));
        }
        if config.channels.contains(&0) || config.strides.contains(&0) {
            return Err(Error::Config("perceptual extractor: widths and strides must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = config.in_channels;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            let opts = ConvOpts { stride: [1, s, s], dilation: [1; 3], padding: [0, 1, 1] };
            let name = format!("fx{i}");
            let weight = params.init(format!("{name}.weight"), &[c, cin, 1, 3, 3], Init::KaimingNormal { fan_in: cin * 9 }, &mut rng);
            let bias = params.init(format!("{name}.bias"), &[c], Init::Zeros, &mut rng);
            layers.push(Conv3d { weight, bias, opts, in_channels: cin, out_channels: c, kernel: 3, pad_mode: PadMode::Zeros });
            cin = c;
        }
        Ok(Self { config, params, layers })
    }
}

impl<T: Real> FeatureExtractor<T> for SliceConvNet<T> {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn tap_names(&self) -> Vec<String> {
        (0..self.layers.len()).map(|i| format!("fx{i}")).collect()
    }

    fn features<'t>(&self, tape: &'t Tape<T>, slices: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut h = slices;
        let mut taps = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.constant(self.params.get(l.weight).clone());
            let b = tape.constant(self.params.get(l.bias).clone());
            h = h.conv3d(w, Some(b), l.opts)?.leaky_relu(0.2)?;
            taps.push(h);
        }
        Ok(taps)
    }
}

/// `[B, C, D, H, W]` → `[B·D, C', 1, H, W]` with single channels replicated to `channels`.
pub fn axial_slices<'t, T: Real>(vol: Var<'t, T>, channels: usize) -> Result<Var<'t, T>> {
    let (b, c, [d, h, w]) = dims5("axial_slices", &vol.shape())?;
    let slices = vol.permute(&[0, 2, 1, 3, 4])?.reshape(&[b * d, c, 1, h, w])?;
    if c == channels {
        Ok(slices)
    } else if c == 1 {
        Var::concat(&vec![slices; channels], 1)
    } else {
        shape_err("perceptual_loss", format!("volume has {c} channels, extractor expects {channels}"))
    }
}

/// Mean over taps of the mean absolute feature difference over all axial slices.
pub fn perceptual_loss<'t, T: Real>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    fx: &dyn FeatureExtractor<T>,
) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return shape_err("perceptual_loss", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    let tape = pred.tape();
    let fa = fx.features(tape, axial_slices(pred, fx.in_channels())?)?;
    let fb = fx.features(tape, axial_slices(target, fx.in_channels())?)?;
    if fa.is_empty() {
        return Err(Error::Config("feature extractor produced no taps".into()));
    }
    let n = fa.len();
    let mut total: Option<Var<'t, T>> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let term = a.sub(b)?.abs()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.expect("non-empty taps").scale(1.0 / n as f64)
}

/// Generator objective terms on one tape.
#[derive(Clone, Copy)]
pub struct GeneratorLossTerms<'t, T> {
    pub gan: Var<'t, T>,
    pub l1: Var<'t, T>,
    pub perc: Var<'t, T>,
}

/// `λ_gan·gan + λ_l1·l1 + λ_perc·perc`.
pub fn total_generator_loss<'t, T: Real>(terms: &GeneratorLossTerms<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    terms.gan.scale(w.lambda_gan)?.add(terms.l1.scale(w.lambda_l1)?)?.add(terms.perc.scale(w.lambda_perc)?)
}
