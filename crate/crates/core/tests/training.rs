//! Training loop behaviour: loss scale at initialisation, determinism,
//! learning on a single pair, checkpoint resume and numerical aborts.

use med2t::checkpoint::Checkpoint;
use med2t::error::Error;
use med2t::generator::{BottleneckConfig, GeneratorConfig, StageConfig};
use med2t::train::{train, Dataset, ModelConfig, StepReport, Trainer, FINAL_CHECKPOINT, LOG_FILE, NAN_SNAPSHOT};
use med2t::volume::{make_phantom_pair, PhantomSpec};
use std::fs;

fn tiny_config() -> ModelConfig {
    let stage = |c| StageConfig { channels: c, heads: 2, window: [2; 3], dilations: vec![1, 2], blocks: 2 };
    let mut cfg = ModelConfig::default();
    cfg.generator = GeneratorConfig {
        in_channels: 1,
        out_channels: 1,
        stem_channels: 4,
        stages: vec![stage(4), stage(8)],
        bottleneck: BottleneckConfig { heads: 2, window: [2; 3], dilations: vec![1, 2] },
    };
    cfg.train.patch = [8; 3];
    cfg.train.epochs = 4;
    cfg.train.steps_per_epoch = 3;
    cfg.train.seed = 5;
    cfg
}

fn dataset(cfg: &ModelConfig) -> Dataset {
    let (mri, ct) = make_phantom_pair(&PhantomSpec::desk([16, 16, 16], 2)).unwrap();
    let mut data = Dataset::new(cfg.train.patch);
    data.push_raw(&mri, &ct, None).unwrap();
    data
}

fn run(t: &mut Trainer, data: &Dataset, epochs: usize) -> Vec<StepReport> {
    (0..epochs).flat_map(|_| t.run_epoch(data, &mut |_| Ok(())).unwrap()).collect()
}

#[test]
fn discriminator_loss_starts_near_ln2() {
    let cfg = ModelConfig { train: med2t::train::TrainConfig { steps_per_epoch: 1, ..Default::default() }, ..Default::default() };
    let data = {
        let (mri, ct) = make_phantom_pair(&PhantomSpec::desk([16, 32, 32], 1)).unwrap();
        let mut d = Dataset::new(cfg.train.patch);
        d.push_raw(&mri, &ct, None).unwrap();
        d
    };
    let mut t = Trainer::new(cfg).unwrap();
    let r = &run(&mut t, &data, 1)[0];
    assert!((r.d_loss - std::f64::consts::LN_2).abs() < 0.2, "initial D loss {}", r.d_loss);
    assert!(r.g_total.is_finite() && r.g_grad_norm > 0.0 && r.d_grad_norm > 0.0);
}

#[test]
fn same_seed_gives_identical_reports() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let a = run(&mut Trainer::new(cfg.clone()).unwrap(), &data, 2);
    let b = run(&mut Trainer::new(cfg.clone()).unwrap(), &data, 2);
    assert_eq!(a, b);
    let mut other = cfg;
    other.train.seed += 1;
    assert_ne!(a, run(&mut Trainer::new(other).unwrap(), &data, 2));
}

#[test]
fn pure_l1_training_reduces_l1() {
    let mut cfg = tiny_config();
    cfg.train.weights.lambda_gan = 0.0;
    cfg.train.weights.lambda_perc = 0.0;
    cfg.train.epochs = 10;
    cfg.train.steps_per_epoch = 20;
    cfg.train.max_lr = 1e-3;
    let data = dataset(&cfg);
    let reports = run(&mut Trainer::new(cfg).unwrap(), &data, 10);
    assert_eq!(reports.len(), 200);
    let mean = |r: &[StepReport]| r.iter().map(|r| r.g_l1).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&reports[..20]), mean(&reports[180..]));
    assert!(last < 0.7 * first, "L1 {first:.4} -> {last:.4}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let all = run(&mut straight, &data, 4);

    let mut first = Trainer::new(cfg).unwrap();
    let head = run(&mut first, &data, 2);
    let bytes = first.to_checkpoint().unwrap().to_bytes().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!((resumed.epoch, resumed.step), (2, 6));
    let tail = run(&mut resumed, &data, 2);

    assert_eq!([head, tail].concat(), all);
    assert_eq!(resumed.to_checkpoint().unwrap().to_bytes().unwrap(), straight.to_checkpoint().unwrap().to_bytes().unwrap());
}

#[test]
fn train_resumes_from_its_own_checkpoint() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let whole = tempfile::tempdir().unwrap();
    train(&mut Trainer::new(cfg.clone()).unwrap(), &data, whole.path()).unwrap();

    let mut half = cfg;
    half.train.epochs = 2;
    let ck = train(&mut Trainer::new(half).unwrap(), &data, dir.path()).unwrap();
    let (ck, _) = Checkpoint::read(ck).unwrap();
    let mut t = Trainer::from_checkpoint(&ck).unwrap();
    t.config.train.epochs = 4;
    train(&mut t, &data, dir.path()).unwrap();

    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    let final_a = Checkpoint::from_bytes(&read(dir.path(), FINAL_CHECKPOINT)).unwrap();
    let final_b = Checkpoint::from_bytes(&read(whole.path(), FINAL_CHECKPOINT)).unwrap();
    assert_eq!(final_a.arrays, final_b.arrays);
    assert_eq!(read(dir.path(), LOG_FILE), read(whole.path(), LOG_FILE));
}

#[test]
fn log_has_one_line_per_step_and_epoch() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    train(&mut Trainer::new(cfg).unwrap(), &data, dir.path()).unwrap();
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.len(), 4 * (3 + 1));
    assert_eq!(kinds.iter().filter(|k| *k == "epoch").count(), 4);
    assert_eq!(kinds[3], "epoch");
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    run(&mut t, &data, 1);
    let ck = t.to_checkpoint().unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.arrays, ck.arrays);
    let t2 = Trainer::from_checkpoint(&back).unwrap();
    assert_eq!(t2.generator.params.values(), t.generator.params.values());
    assert_eq!(t2.opt_g.m, t.opt_g.m);
    assert_eq!(t2.opt_d.v, t.opt_d.v);
    assert_eq!(t2.config, t.config);
}

#[test]
fn divergence_aborts_with_snapshot() {
    let mut cfg = tiny_config();
    cfg.train.max_lr = 1e30;
    let data = dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&mut Trainer::new(cfg).unwrap(), &data, dir.path()).unwrap_err();
    let Error::Numerical { step, .. } = err else { panic!("expected a numerical error, got {err}") };
    assert!(step >= 1);
    assert!(!dir.path().join(FINAL_CHECKPOINT).exists());
    let (snap, _) = Checkpoint::read(dir.path().join(NAN_SNAPSHOT)).unwrap();
    let t = Trainer::from_checkpoint(&snap).unwrap();
    assert!(t.generator.params.values().iter().all(|p| p.data().iter().all(|v| v.is_finite())));
}
