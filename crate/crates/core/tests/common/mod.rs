//! Finite-difference gradient checking and small fixtures shared by the
//! integration tests.
#![allow(dead_code)]

pub mod naive;
pub mod suite;
pub mod volumes;

use med2t::nn::{ParamId, ParamStore};
use med2t::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step and pass criterion.
#[derive(Clone, Copy, Debug)]
pub struct FdSpec {
    pub h: f64,
    pub rel: f64,
    /// Differences at or below this pass regardless of scale (rounding floor).
    pub abs: f64,
}

impl FdSpec {
    pub const fn new(h: f64, rel: f64, abs: f64) -> Self {
        Self { h, rel, abs }
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Default, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.passed as f64 / self.checked as f64
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.failures.extend(other.failures);
    }

    pub fn record(&mut self, label: String, analytic: f64, numeric: f64, spec: FdSpec) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        self.checked += 1;
        let pass = rel <= spec.rel || diff <= spec.abs;
        if !pass {
            self.worst_rel = self.worst_rel.max(rel);
        }
        if pass {
            self.passed += 1;
        } else if self.failures.len() < 20 {
            self.failures.push(format!("{label}: analytic {analytic:.6e}, numeric {numeric:.6e}, rel {rel:.3e}"));
        }
    }
}

pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Checks `d sum(w ⊙ f(inputs)) / d inputs` for a random weighting `w`.
pub fn check_op(
    inputs: &[Tensor<f64>],
    seed: u64,
    spec: FdSpec,
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> med2t::Result<Var<'t, f64>>,
) -> FdReport {
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = f(&vars).expect("forward").shape();
        rand_tensor(&shape, seed ^ 0xfeed, 1.0)
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&vars).expect("forward");
        y.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&vars).expect("forward");
    let loss = y.mul(tape.constant(weights.clone())).unwrap().sum().unwrap();
    let grads = tape.backward(loss).expect("backward");
    let mut report = FdReport::default();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get_or_zero(*v);
        for i in 0..inputs[k].numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += spec.h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * spec.h;
            let down = eval(&xs);
            report.record(format!("input {k}[{i}]"), g.data()[i], (up - down) / (2.0 * spec.h), spec);
        }
    }
    report
}

/// Picks up to `per_tensor` random entries of every parameter tensor, plus a
/// uniform `fraction` of all scalars.
pub fn sample_params(store: &ParamStore<f64>, per_tensor: usize, fraction: f64, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        for _ in 0..per_tensor.min(n) {
            out.push((id, rng.random_range(0..n)));
        }
        for i in 0..n {
            if rng.random::<f64>() < fraction {
                out.push((id, i));
            }
        }
    }
    out.sort_by_key(|&(id, i)| (id.index(), i));
    out.dedup();
    out
}

/// Central differences of `loss(store)` for each sampled scalar, compared
/// against `analytic` (one tensor per parameter, in store order).
pub fn check_params(
    store: &mut ParamStore<f64>,
    samples: &[(ParamId, usize)],
    analytic: &[Tensor<f64>],
    spec: FdSpec,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> FdReport {
    let mut report = FdReport::default();
    for &(id, i) in samples {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + spec.h;
        let up = loss(store);
        store.get_mut(id).data_mut()[i] = orig - spec.h;
        let down = loss(store);
        store.get_mut(id).data_mut()[i] = orig;
        let label = format!("{}[{i}]", store.name(id));
        report.record(label, analytic[id.index()].data()[i], (up - down) / (2.0 * spec.h), spec);
    }
    report
}
