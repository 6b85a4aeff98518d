//! Alternating adversarial training: one discriminator update on the real
//! patch and a detached fake, then one generator update on the weighted sum of
//! adversarial, L1 and perceptual terms.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{self, GeneratorLossTerms, LossWeights, SliceConvNet, SliceNetConfig};
use crate::nn::Session;
use crate::optim::{clip_grad_norm, global_norm, lr_at, AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume::{body_mask, crop_pair, normalize_hu, normalize_mri, PatchSampler, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Patch extents (D, H, W).
    pub patch: [usize; 3],
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Global L2 gradient-norm limit per network.
    pub grad_clip: Option<f64>,
    pub perceptual: SliceNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 2e-4,
            epochs: 100,
            steps_per_epoch: 20,
            patch: [16, 16, 16],
            batch_size: 2,
            seed: 0,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            grad_clip: None,
            perceptual: SliceNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, gen: &GeneratorConfig, disc: &DiscriminatorConfig) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("train: epochs, steps_per_epoch and batch_size must be positive".into()));
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return Err(Error::Config(format!("train: max_lr must be positive, got {}", self.max_lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("train: grad_clip must be positive, got {c}")));
            }
        }
        gen.check_extents(self.patch).map_err(|e| Error::Config(format!("train: patch {:?}: {e}", self.patch)))?;
        let k = disc.output_stride();
        if self.patch.iter().any(|&n| n % k != 0) {
            return Err(Error::Config(format!("train: patch {:?} must be a multiple of the discriminator stride {k}", self.patch)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild the networks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
}

/// A batch of paired patches, `[B, 1, D, H, W]` each, normalised to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mri: Tensor<f32>,
    pub ct: Tensor<f32>,
    pub origins: Vec<(usize, [usize; 3])>,
}

/// One normalised training pair with its patch sampler.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub mri: Volume,
    pub ct: Volume,
    pub mask: Volume,
    sampler: PatchSampler,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<TrainingPair>,
    pub patch: [usize; 3],
}

impl Dataset {
    pub fn new(patch: [usize; 3]) -> Self {
        Self { pairs: Vec::new(), patch }
    }

    /// Adds a raw pair: MRI is percentile-normalised, CT (HU) clip-normalised;
    /// the body mask is derived from the CT when absent.
    pub fn push_raw(&mut self, mri: &Volume, ct: &Volume, mask: Option<Volume>) -> Result<()> {
        mri.same_grid(ct)?;
        let mask = match mask {
            Some(m) => {
                m.same_grid(ct)?;
                m
            }
            None => body_mask(ct)?,
        };
        let sampler = PatchSampler::new(&mask, self.patch)?;
        self.pairs.push(TrainingPair { mri: normalize_mri(mri)?, ct: normalize_hu(ct)?, mask, sampler });
        Ok(())
    }

    pub fn sample_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        use rand::Rng;
        if self.pairs.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let [d, h, w] = self.patch;
        let (mut mri, mut ct, mut origins) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..batch {
            let i = rng.random_range(0..self.pairs.len());
            let p = &self.pairs[i];
            let origin = p.sampler.sample(rng);
            let pp = crop_pair(&p.mri, &p.ct, origin, self.patch)?;
            mri.extend(pp.mri);
            ct.extend(pp.ct);
            origins.push((i, origin));
        }
        Ok(Batch { mri: Tensor::new([batch, 1, d, h, w], mri)?, ct: Tensor::new([batch, 1, d, h, w], ct)?, origins })
    }
}

/// Losses and gradient norms of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub d_loss: f64,
    pub g_gan: f64,
    pub g_l1: f64,
    pub g_perc: f64,
    pub g_total: f64,
    pub g_grad_norm: f64,
    pub d_grad_norm: f64,
}

pub struct Trainer {
    pub config: ModelConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub extractor: SliceConvNet<f32>,
    pub opt_g: AdamState<f32>,
    pub opt_d: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

fn numerical(step: u64, phase: &str, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical { step, detail: format!("{phase}: {op} produced a non-finite value") },
        other => other,
    }
}

impl Trainer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.generator.validate()?;
        config.discriminator.validate()?;
        config.train.validate(&config.generator, &config.discriminator)?;
        let seed = config.train.seed;
        let generator = Generator::new(config.generator.clone(), seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), seed.wrapping_add(1))?;
        let extractor = SliceConvNet::new(config.train.perceptual.clone())?;
        let opt_g = AdamState::new(config.train.adam, &generator.params);
        let opt_d = AdamState::new(config.train.adam, &discriminator.params);
        Ok(Self { config, generator, discriminator, extractor, opt_g, opt_d, epoch: 0, step: 0 })
    }

    /// Generator input for the discriminator: CT alone, or `[MRI, CT]` when conditional.
    fn disc_input<'t>(&self, mri: Var<'t, f32>, ct: Var<'t, f32>) -> Result<Var<'t, f32>> {
        if self.config.discriminator.conditional {
            Var::concat(&[mri, ct], 1)
        } else {
            Ok(ct)
        }
    }

    /// Discriminator update followed by a generator update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepReport> {
        let step = self.step + 1;
        let w = self.config.train.weights;
        let clip = self.config.train.grad_clip;

        let tape_g = Tape::new();
        let sg = Session::new(&tape_g, &self.generator.params, true);
        let mri = sg.input(batch.mri.clone());
        let fake = self.generator.forward(&sg, mri).map_err(|e| numerical(step, "generator forward", e))?;

        let (d_loss, d_grad_norm) = {
            let tape = Tape::new();
            let sd = Session::new(&tape, &self.discriminator.params, true);
            let m = sd.input(batch.mri.clone());
            let real = self.disc_input(m, sd.input(batch.ct.clone()))?;
            let fake_in = self.disc_input(m, sd.input((*fake.value()).clone()))?;
            let loss = (|| {
                let r = self.discriminator.forward(&sd, real)?;
                let f = self.discriminator.forward(&sd, fake_in)?;
                losses::gan_loss_discriminator(r, f)
            })()
            .map_err(|e| numerical(step, "discriminator loss", e))?;
            let value = loss.value().item() as f64;
            let grads = tape.backward(loss)?;
            let mut g = sd.param_grads(&grads);
            let norm = match clip {
                Some(c) => clip_grad_norm(&mut g, c),
                None => global_norm(&g),
            };
            if !norm.is_finite() {
                return Err(Error::Numerical { step, detail: "discriminator gradient is non-finite".into() });
            }
            self.opt_d.step(&mut self.discriminator.params, &g, lr)?;
            (value, norm)
        };

        let sdg = Session::new(&tape_g, &self.discriminator.params, false);
        let ct = sg.input(batch.ct.clone());
        let terms = (|| {
            let logits = self.discriminator.forward(&sdg, self.disc_input(mri, fake)?)?;
            Ok(GeneratorLossTerms {
                gan: losses::gan_loss_generator(logits)?,
                l1: losses::l1_loss(fake, ct)?,
                perc: losses::perceptual_loss(fake, ct, &self.extractor)?,
            })
        })()
        .map_err(|e| numerical(step, "generator loss", e))?;
        let total = losses::total_generator_loss(&terms, &w).map_err(|e| numerical(step, "generator loss", e))?;
        let item = |v: Var<'_, f32>| v.value().item() as f64;
        let (g_gan, g_l1, g_perc, g_total) = (item(terms.gan), item(terms.l1), item(terms.perc), item(total));
        let grads = tape_g.backward(total)?;
        let mut g = sg.param_grads(&grads);
        let g_grad_norm = match clip {
            Some(c) => clip_grad_norm(&mut g, c),
            None => global_norm(&g),
        };
        if !g_grad_norm.is_finite() {
            return Err(Error::Numerical { step, detail: "generator gradient is non-finite".into() });
        }
        self.opt_g.step(&mut self.generator.params, &g, lr)?;
        self.step = step;
        Ok(StepReport { epoch: self.epoch, step, lr, d_loss, g_gan, g_l1, g_perc, g_total, g_grad_norm, d_grad_norm })
    }

    /// Patch-sampling RNG of an epoch; depends only on the seed and the epoch index.
    pub fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Runs the next epoch, passing each report to `on_step`.
    pub fn run_epoch(&mut self, data: &Dataset, on_step: &mut dyn FnMut(&StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
        let t = &self.config.train;
        if data.patch != t.patch {
            return Err(Error::Config(format!("dataset patch {:?} differs from train patch {:?}", data.patch, t.patch)));
        }
        let lr = lr_at(self.epoch, t.epochs, t.max_lr);
        let (steps, batch) = (t.steps_per_epoch, t.batch_size);
        let mut rng = self.epoch_rng(self.epoch);
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let b = data.sample_batch(batch, &mut rng)?;
            let r = self.train_step(&b, lr)?;
            on_step(&r)?;
            reports.push(r);
        }
        self.epoch += 1;
        Ok(reports)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = json!({
            "kind": "training",
            "config": serde_json::to_value(&self.config)?,
            "epoch": self.epoch,
            "step": self.step,
            "adam_g_step": self.opt_g.step,
            "adam_d_step": self.opt_d.step,
        });
        let mut ck = Checkpoint::new(meta);
        ck.push_store("g/", &self.generator.params);
        ck.push_store("d/", &self.discriminator.params);
        for (prefix, opt, store) in [("adam_g", &self.opt_g, &self.generator.params), ("adam_d", &self.opt_d, &self.discriminator.params)] {
            for (id, (m, v)) in store.ids().zip(opt.m.iter().zip(&opt.v)) {
                ck.arrays.push((format!("{prefix}/m/{}", store.name(id)), m.clone()));
                ck.arrays.push((format!("{prefix}/v/{}", store.name(id)), v.clone()));
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = model_config(ck)?;
        let mut t = Trainer::new(config)?;
        t.generator.params.load(ck.with_prefix("g/"))?;
        t.discriminator.params.load(ck.with_prefix("d/"))?;
        let get = |k: &str| ck.meta.get(k).and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")));
        t.epoch = get("epoch")? as usize;
        t.step = get("step")?;
        for (prefix, opt, store) in [("adam_g", &mut t.opt_g, &t.generator.params), ("adam_d", &mut t.opt_d, &t.discriminator.params)] {
            let mut ms = store.cast::<f32>();
            ms.load(ck.with_prefix(&format!("{prefix}/m/")))?;
            let mut vs = store.cast::<f32>();
            vs.load(ck.with_prefix(&format!("{prefix}/v/")))?;
            opt.m = ms.values().to_vec();
            opt.v = vs.values().to_vec();
            opt.step = get(&format!("{prefix}_step"))?;
        }
        Ok(t)
    }
}

/// Model configuration stored in a checkpoint.
pub fn model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    let cfg = ck.meta.get("config").ok_or_else(|| Error::Format("checkpoint metadata lacks config".into()))?;
    serde_json::from_value(cfg.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
}

/// Rebuilds the generator stored in a checkpoint.
pub fn load_generator(ck: &Checkpoint) -> Result<Generator<f32>> {
    let cfg = model_config(ck)?;
    let mut g = Generator::new(cfg.generator, 0)?;
    g.params.load(ck.with_prefix("g/"))?;
    Ok(g)
}

#[derive(Serialize)]
struct EpochSummary {
    kind: &'static str,
    epoch: usize,
    step: u64,
    lr: f64,
    d_loss: f64,
    g_gan: f64,
    g_l1: f64,
    g_perc: f64,
    g_total: f64,
}

fn summarize(epoch: usize, reports: &[StepReport]) -> EpochSummary {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&StepReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    EpochSummary {
        kind: "epoch",
        epoch,
        step: reports.last().map_or(0, |r| r.step),
        lr: reports.first().map_or(0.0, |r| r.lr),
        d_loss: mean(|r| r.d_loss),
        g_gan: mean(|r| r.g_gan),
        g_l1: mean(|r| r.g_l1),
        g_perc: mean(|r| r.g_perc),
        g_total: mean(|r| r.g_total),
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const NAN_SNAPSHOT: &str = "nan_snapshot.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains until `config.train.epochs`, writing the JSON-lines log, periodic
/// checkpoints and a final checkpoint into `out_dir`. On a numerical failure the
/// pre-step state is saved as a snapshot before the error is returned.
pub fn train(trainer: &mut Trainer, data: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    if data.pairs.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out_dir.join(LOG_FILE))?;
    let every = trainer.config.train.checkpoint_every;
    while trainer.epoch < trainer.config.train.epochs {
        let epoch = trainer.epoch;
        let snapshot = trainer.to_checkpoint()?;
        let mut sink = |r: &StepReport| -> Result<()> {
            let mut v = serde_json::to_value(r)?;
            v["kind"] = json!("step");
            writeln!(log, "{v}")?;
            Ok(())
        };
        let reports = match trainer.run_epoch(data, &mut sink) {
            Ok(r) => r,
            Err(e @ Error::Numerical { .. }) => {
                snapshot.write(out_dir.join(NAN_SNAPSHOT))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", serde_json::to_string(&summarize(epoch, &reports))?)?;
        if every > 0 && trainer.epoch % every == 0 {
            trainer.to_checkpoint()?.write(out_dir.join(epoch_checkpoint_name(trainer.epoch)))?;
        }
    }
    let path = out_dir.join(FINAL_CHECKPOINT);
    trainer.to_checkpoint()?.write(&path)?;
    Ok(path)
}
