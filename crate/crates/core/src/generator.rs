//! Encoder–bottleneck–decoder generator with parallel convolution and
//! shifted-window transformer branches.
//!
//! Each encoder stage runs a convolutional stream `f_c` and a transformer branch
//! `f_t` side by side and fuses them as
//! `f = Conv1×1×1([f_c, f_t]) + f_c`. The transformer branch sums one path per
//! dilation rate: a dilated 3×3×3 convolution of the stage input followed by a
//! stack of alternating W-MSA / SW-MSA blocks. Stages are separated by stride-2
//! convolutions; the decoder upsamples trilinearly, concatenates the fused skip
//! features and applies two conv–IN–ReLU layers per level. A 1×1×1 convolution
//! with `tanh` produces the normalised sCT.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::{Conv3d, Init, InstanceNorm, ParamId, ParamStore, Session};
use crate::swin::{SwinBlock, WindowSpec};
use crate::tensor::{dims5, ConvOpts, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: [usize; 3],
    /// Dilation rates of the convolutions feeding the transformer paths.
    pub dilations: Vec<usize>,
    /// Swin blocks per transformer path (alternating unshifted/shifted).
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckConfig {
    pub heads: usize,
    pub window: [usize; 3],
    /// One transformer path (dilated conv + one Swin block) per rate.
    pub dilations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub bottleneck: BottleneckConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let stage = |channels, heads| StageConfig { channels, heads, window: [4; 3], dilations: vec![1, 2], blocks: 2 };
        Self {
            in_channels: 1,
            out_channels: 1,
            stem_channels: 16,
            stages: vec![stage(16, 2), stage(32, 4), stage(64, 4)],
            bottleneck: BottleneckConfig { heads: 4, window: [4; 3], dilations: vec![1, 2] },
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("generator: {d}")));
        if self.stages.is_empty() {
            return bad("at least one encoder stage is required".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.stem_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels == 0 || st.heads == 0 || st.channels % st.heads != 0 {
                return bad(format!("stage {i}: {} heads must divide {} channels", st.heads, st.channels));
            }
            if i > 0 && st.channels < self.stages[i - 1].channels {
                return bad(format!("stage {i}: channels must be non-decreasing"));
            }
            if st.dilations.is_empty() || st.dilations.contains(&0) || st.blocks == 0 || st.window.contains(&0) {
                return bad(format!("stage {i}: needs dilations >= 1, at least one block and non-zero windows"));
            }
        }
        let c = self.bottleneck_channels();
        let b = &self.bottleneck;
        if b.heads == 0 || c % b.heads != 0 || b.dilations.is_empty() || b.dilations.contains(&0) || b.window.contains(&0) {
            return bad(format!("bottleneck: {} heads / dilations {:?} invalid for {c} channels", b.heads, b.dilations));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    pub fn check_extents(&self, extents: [usize; 3]) -> Result<()> {
        let k = self.divisor();
        if extents.iter().any(|&n| n == 0 || n % k != 0) {
            let pad = extents.map(|n| n.div_ceil(k).max(1) * k - n);
            return shape_err(
                "generator",
                format!("spatial extents {extents:?} must be multiples of {k}; pad by {pad:?}"),
            );
        }
        Ok(())
    }
}

/// Outputs of one encoder stage; all three share one shape.
pub struct StageFeatures<'t, T> {
    pub f_c: Var<'t, T>,
    pub f_t: Var<'t, T>,
    pub f: Var<'t, T>,
}

#[derive(Clone, Debug)]
struct TransformerPath {
    conv: Conv3d,
    blocks: Vec<SwinBlock>,
}

impl TransformerPath {
    fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = self.conv.forward(s, x)?;
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv3d,
    norm: InstanceNorm,
}

impl ConvUnit {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv3d::new(store, &format!("{name}.conv"), (cin, cout, 3), ConvOpts::same(3, 1), rng).replicate(),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout, rng),
        }
    }

    fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.norm.forward(s, self.conv.forward(s, x)?)?.relu()
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv: [ConvUnit; 2],
    paths: Vec<TransformerPath>,
    fusion: Conv3d,
    down: Option<Conv3d>,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    paths: Vec<TransformerPath>,
    fusion: Conv3d,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv3d,
    stages: Vec<EncoderStage>,
    bottleneck: Bottleneck,
    decoder: Vec<[ConvUnit; 2]>,
    head: Conv3d,
}

/// The generator network together with its parameters.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// `Conv1×1×1(concat(f_c, f_t)) + f_c`.
pub fn fuse_features<'t, T: Real>(s: &Session<'t, T>, f_c: Var<'t, T>, f_t: Var<'t, T>, proj: &Conv3d) -> Result<Var<'t, T>> {
    if f_c.shape() != f_t.shape() {
        return shape_err("fuse_features", format!("f_c {:?} vs f_t {:?}", f_c.shape(), f_t.shape()));
    }
    proj.forward(s, Var::concat(&[f_c, f_t], 1)?)?.add(f_c)
}

fn fusion_conv<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Conv3d {
    Conv3d::with_init(store, name, (2 * c, c, 1), ConvOpts::default(), Init::Zeros, rng)
}

impl<T: Real> Generator<T> {
    /// Builds the network with seeded initialisation.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let same = ConvOpts::same(3, 1);
        let stem = Conv3d::new(&mut store, "stem", (config.in_channels, config.stem_channels, 3), same, &mut rng).replicate();

        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        let n_stages = config.stages.len();
        for (i, sc) in config.stages.iter().enumerate() {
            let name = format!("enc{i}");
            let c = sc.channels;
            let conv = [
                ConvUnit::new(&mut store, &format!("{name}.conv0"), cin, c, &mut rng),
                ConvUnit::new(&mut store, &format!("{name}.conv1"), c, c, &mut rng),
            ];
            let mut paths = Vec::new();
            for &d in &sc.dilations {
                let pname = format!("{name}.path_d{d}");
                let conv = Conv3d::new(&mut store, &format!("{pname}.conv"), (cin, c, 3), ConvOpts::same(3, d), &mut rng).replicate();
                let mut blocks = Vec::new();
                for j in 0..sc.blocks {
                    let spec = if j % 2 == 1 { WindowSpec::shifted(sc.window) } else { WindowSpec::new(sc.window) };
                    blocks.push(SwinBlock::new(&mut store, &format!("{pname}.swin{j}"), c, sc.heads, spec, &mut rng)?);
                }
                paths.push(TransformerPath { conv, blocks });
            }
            let fusion = fusion_conv(&mut store, &format!("{name}.fusion"), c, &mut rng);
            let down = (i + 1 < n_stages)
                .then(|| Conv3d::new(&mut store, &format!("{name}.down"), (c, c, 3), ConvOpts::new(2, 1, 1), &mut rng).replicate());
            stages.push(EncoderStage { conv, paths, fusion, down });
            cin = c;
        }

        let bc = config.bottleneck_channels();
        let bcfg = &config.bottleneck;
        let mut paths = Vec::new();
        for (j, &d) in bcfg.dilations.iter().enumerate() {
            let pname = format!("bottleneck.path_d{d}");
            let conv = Conv3d::new(&mut store, &format!("{pname}.conv"), (bc, bc, 3), ConvOpts::same(3, d), &mut rng).replicate();
            let spec = if j % 2 == 1 { WindowSpec::shifted(bcfg.window) } else { WindowSpec::new(bcfg.window) };
            let block = SwinBlock::new(&mut store, &format!("{pname}.swin"), bc, bcfg.heads, spec, &mut rng)?;
            paths.push(TransformerPath { conv, blocks: vec![block] });
        }
        let bottleneck = Bottleneck { paths, fusion: fusion_conv(&mut store, "bottleneck.fusion", bc, &mut rng) };

        let mut decoder = Vec::new();
        let mut cur = bc;
        for i in (0..n_stages - 1).rev() {
            let skip = config.stages[i].channels;
            decoder.push([
                ConvUnit::new(&mut store, &format!("dec{i}.conv0"), cur + skip, skip, &mut rng),
                ConvUnit::new(&mut store, &format!("dec{i}.conv1"), skip, skip, &mut rng),
            ]);
            cur = skip;
        }
        let head = Conv3d::new(&mut store, "head", (cur, config.out_channels, 1), ConvOpts::default(), &mut rng);
        Ok(Self { config, params: store, layout: Layout { stem, stages, bottleneck, decoder, head } })
    }

    /// Same network and values in another precision.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Stem: a single 3×3×3 convolution to `stem_channels`.
    pub fn stem<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.layout.stem.forward(s, x)
    }

    /// Runs encoder stage `index`; returns its features and, for all but the
    /// last stage, the stride-2 downsampled fused output.
    pub fn encoder_stage<'t>(&self, s: &Session<'t, T>, index: usize, x: Var<'t, T>) -> Result<(StageFeatures<'t, T>, Option<Var<'t, T>>)> {
        let Some(stage) = self.layout.stages.get(index) else {
            return arg_err("encoder_stage", format!("no stage {index}"));
        };
        let expect = if index == 0 { self.config.stem_channels } else { self.config.stages[index - 1].channels };
        let (_, c, _) = dims5("encoder_stage", &x.shape())?;
        if c != expect {
            return shape_err("encoder_stage", format!("stage {index} expects {expect} channels, got {c}"));
        }
        let f_c = stage.conv[1].forward(s, stage.conv[0].forward(s, x)?)?;
        let mut f_t: Option<Var<'t, T>> = None;
        for p in &stage.paths {
            let h = p.forward(s, x)?;
            f_t = Some(match f_t {
                Some(acc) => acc.add(h)?,
                None => h,
            });
        }
        let f_t = f_t.expect("validated non-empty dilation set");
        let f = fuse_features(s, f_c, f_t, &stage.fusion)?;
        let down = stage.down.as_ref().map(|d| d.forward(s, f)).transpose()?;
        Ok((StageFeatures { f_c, f_t, f }, down))
    }

    /// `Conv1×1×1([x, Σ_d Swin(DilatedConv_d(x))]) + x`.
    pub fn bottleneck<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, _) = dims5("bottleneck", &x.shape())?;
        if c != self.config.bottleneck_channels() {
            return shape_err("bottleneck", format!("expected {} channels, got {c}", self.config.bottleneck_channels()));
        }
        let mut f_t: Option<Var<'t, T>> = None;
        for p in &self.layout.bottleneck.paths {
            let h = p.forward(s, x)?;
            f_t = Some(match f_t {
                Some(acc) => acc.add(h)?,
                None => h,
            });
        }
        fuse_features(s, x, f_t.expect("validated non-empty dilation set"), &self.layout.bottleneck.fusion)
    }

    /// Decoder over skips ordered deepest-first, then the tanh head.
    pub fn decoder_and_head<'t>(&self, s: &Session<'t, T>, bottleneck_out: Var<'t, T>, skips: &[&StageFeatures<'t, T>]) -> Result<Var<'t, T>> {
        if skips.len() != self.layout.decoder.len() {
            return shape_err("decoder", format!("{} skips for {} decoder levels", skips.len(), self.layout.decoder.len()));
        }
        let mut h = bottleneck_out;
        for (level, skip) in self.layout.decoder.iter().zip(skips) {
            let up = h.upsample_trilinear(2)?;
            let (us, ss) = (up.shape(), skip.f.shape());
            if us[0] != ss[0] || us[2..] != ss[2..] {
                return shape_err("decoder", format!("upsampled {us:?} vs skip {ss:?}"));
            }
            let cat = Var::concat(&[up, skip.f], 1)?;
            h = level[1].forward(s, level[0].forward(s, cat)?)?;
        }
        self.layout.head.forward(s, h)?.tanh()
    }

    /// Full forward: `[B, in, D, H, W]` → `[B, out, D, H, W]` in `(-1, 1)`.
    pub fn forward<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, ext) = dims5("generator", &x.shape())?;
        if c != self.config.in_channels {
            return shape_err("generator", format!("expected {} input channels, got {c}", self.config.in_channels));
        }
        self.config.check_extents(ext)?;
        let mut h = self.stem(s, x)?;
        let mut feats = Vec::with_capacity(self.layout.stages.len());
        for i in 0..self.layout.stages.len() {
            let (f, down) = self.encoder_stage(s, i, h)?;
            h = down.unwrap_or(f.f);
            feats.push(f);
        }
        let b = self.bottleneck(s, h)?;
        let skips: Vec<&StageFeatures<'t, T>> = feats[..feats.len() - 1].iter().rev().collect();
        self.decoder_and_head(s, b, &skips)
    }

    /// Untracked forward on a plain tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.params, false);
        let y = self.forward(&s, s.input(x.clone()))?;
        Ok((*y.value()).clone())
    }

    /// Parameters of every transformer path (dilated convs and Swin blocks).
    pub fn transformer_param_ids(&self) -> Vec<ParamId> {
        let paths = self.layout.stages.iter().flat_map(|s| &s.paths).chain(&self.layout.bottleneck.paths);
        let mut ids = Vec::new();
        for p in paths {
            ids.extend([p.conv.weight, p.conv.bias]);
            for b in &p.blocks {
                ids.extend(b.param_ids());
            }
        }
        ids
    }

    /// Fusion projections of every stage and of the bottleneck.
    pub fn fusion_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .stages
            .iter()
            .map(|s| &s.fusion)
            .chain([&self.layout.bottleneck.fusion])
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    pub fn fusion_projection(&self, stage: usize) -> Option<&Conv3d> {
        self.layout.stages.get(stage).map(|s| &s.fusion)
    }

    pub fn head(&self) -> &Conv3d {
        &self.layout.head
    }
}
