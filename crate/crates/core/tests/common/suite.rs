//! Gradient checks shared by the gradient tests and the acceptance run.

use super::{check_op, check_params, rand_tensor, sample_params, FdReport, FdSpec};
use med2t::discriminator::{Discriminator, DiscriminatorConfig};
use med2t::generator::{Generator, GeneratorConfig};
use med2t::nn::{ParamId, ParamStore, Session};
use med2t::swin::{SwinBlock, WindowSpec};
use med2t::tensor::{ConvOpts, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

type OpFn = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> med2t::Result<Var<'t, f64>>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    f: OpFn,
}

fn case(
    name: &'static str,
    inputs: &[&[usize]],
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> med2t::Result<Var<'t, f64>> + 'static,
) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|s| s.to_vec()).collect(), f: Box::new(f) }
}

fn op_cases() -> Vec<OpCase> {
    let v5: &[usize] = &[1, 2, 4, 4, 4];
    vec![
        case("relu", &[&[3, 7]], |x| x[0].relu()),
        case("leaky_relu", &[&[3, 7]], |x| x[0].leaky_relu(0.2)),
        case("tanh", &[&[3, 7]], |x| x[0].tanh()),
        case("abs", &[&[3, 7]], |x| x[0].abs()),
        case("softplus", &[&[3, 7]], |x| x[0].scale(8.0)?.softplus()),
        case("neg", &[&[3, 7]], |x| x[0].neg()),
        case("scale", &[&[3, 7]], |x| x[0].scale(-2.5)),
        case("add_scalar", &[&[3, 7]], |x| x[0].add_scalar(0.7)?.mul(x[0])),
        case("add", &[&[3, 7], &[3, 7]], |x| x[0].add(x[1])),
        case("sub", &[&[3, 7], &[3, 7]], |x| x[0].sub(x[1])),
        case("mul", &[&[3, 7], &[3, 7]], |x| x[0].mul(x[1])),
        case("add_broadcast", &[&[2, 3, 4], &[3, 4]], |x| x[0].add_broadcast(x[1])),
        case("sum", &[&[3, 7]], |x| x[0].mul(x[0])?.sum()),
        case("mean", &[&[3, 7]], |x| x[0].mul(x[0])?.mean()),
        case("softmax_lastdim", &[&[4, 6]], |x| x[0].scale(3.0)?.softmax_lastdim()),
        case("reshape", &[&[2, 6]], |x| x[0].reshape(&[3, 4])?.mul(x[0].reshape(&[3, 4])?)),
        case("gather", &[&[2, 5]], |x| x[0].gather(Rc::new(vec![9, 0, usize::MAX, 3, 3, 7]), &[2, 3])),
        case("permute", &[&[2, 3, 4]], |x| x[0].permute(&[2, 0, 1])),
        case("slice_axis", &[&[3, 5, 2]], |x| x[0].slice_axis(1, 1, 3)),
        case("narrow", &[&[4, 5]], |x| x[0].narrow(&[(1, 2), (2, 3)])),
        case("pad", &[&[2, 3]], |x| x[0].pad(&[(1, 0), (2, 1)])),
        case("pad_replicate", &[&[2, 3]], |x| x[0].pad_replicate(&[(1, 2), (2, 1)])),
        case("pad_reflect_to_even", &[&[3, 5]], |x| x[0].pad_reflect_to_even(&[0, 1])),
        case("roll", &[&[3, 4]], |x| x[0].roll(&[1, -3])),
        case("concat", &[&[2, 3, 2], &[2, 1, 2]], |x| Var::concat(&[x[0], x[1]], 1)),
        case("upsample_linear_axis", &[&[2, 3, 4]], |x| x[0].upsample_linear_axis(2, 2)),
        case("upsample_trilinear", &[&[1, 2, 2, 3, 2]], |x| x[0].upsample_trilinear(2)),
        case("linear", &[&[3, 5], &[4, 5], &[4]], |x| x[0].linear(x[1], Some(x[2]))),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |x| x[0].bmm(x[1], false)),
        case("bmm_transposed", &[&[2, 3, 4], &[2, 5, 4]], |x| x[0].bmm(x[1], true)),
        case("conv3d", &[v5, &[3, 2, 3, 3, 3], &[3]], |x| x[0].conv3d(x[1], Some(x[2]), ConvOpts::same(3, 1))),
        case("conv3d_dilated", &[v5, &[2, 2, 3, 3, 3]], |x| x[0].conv3d(x[1], None, ConvOpts::same(3, 2))),
        case("conv3d_strided", &[&[1, 2, 5, 4, 6], &[3, 2, 3, 3, 3], &[3]], |x| {
            x[0].conv3d(x[1], Some(x[2]), ConvOpts::new(2, 1, 1))
        }),
        case("instance_norm", &[v5, &[2], &[2]], |x| x[0].instance_norm(x[1], x[2], 1e-5)),
        case("layer_norm", &[&[3, 8], &[8], &[8]], |x| x[0].layer_norm(x[1], x[2], 1e-5)),
        case("haar3d", &[&[1, 2, 4, 2, 6]], |x| x[0].haar3d()),
    ]
}

/// Central-difference check of every tensor op with step `h`.
pub fn op_reports(spec: FdSpec) -> Vec<(&'static str, FdReport)> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let inputs: Vec<Tensor<f64>> =
                c.inputs.iter().enumerate().map(|(j, s)| rand_tensor(s, 1000 + 10 * k as u64 + j as u64, 1.0)).collect();
            (c.name, check_op(&inputs, k as u64, spec, &c.f))
        })
        .collect()
}

/// Swin block gradients with respect to its input and all of its parameters.
pub fn swin_block_report(spec: FdSpec, shifted: bool) -> FdReport {
    let window = if shifted { WindowSpec::shifted([2; 3]) } else { WindowSpec::new([2; 3]) };
    let mut store = ParamStore::<f64>::new();
    let block = SwinBlock::new(&mut store, "b", 4, 2, window, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_tensor(&shape, 50 + k as u64, 0.5);
    }
    let x = rand_tensor(&[1, 4, 4, 2, 4], 6, 1.0);
    let w = weights_for(&x, 8);
    let mut report = check_input(&store, &x, &w, spec, |s, v| block.forward(s, v));
    let loss = |p: &ParamStore<f64>| {
        let tape = Tape::new();
        let s = Session::new(&tape, p, false);
        weighted(block.forward(&s, s.input(x.clone())).unwrap(), &w)
    };
    let analytic = {
        let tape = Tape::new();
        let s = Session::new(&tape, &store, true);
        let y = block.forward(&s, s.input(x.clone())).unwrap();
        let l = y.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
        s.param_grads(&tape.backward(l).unwrap())
    };
    let samples: Vec<(ParamId, usize)> = store.ids().flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i))).collect();
    report.merge(check_params(&mut store, &samples, &analytic, spec, loss));
    report
}

/// Gradient of `sum(w ⊙ f(x))` with respect to every entry of `x`.
pub fn check_input(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    spec: FdSpec,
    f: impl for<'t> Fn(&Session<'t, f64>, Var<'t, f64>) -> med2t::Result<Var<'t, f64>>,
) -> FdReport {
    let eval = |x: Tensor<f64>| {
        let tape = Tape::new();
        let s = Session::new(&tape, store, false);
        weighted(f(&s, s.input(x)).unwrap(), w)
    };
    let tape = Tape::new();
    let s = Session::new(&tape, store, false);
    let xv = tape.leaf(x.clone(), true);
    let l = f(&s, xv).unwrap().mul(tape.constant(w.clone())).unwrap().sum().unwrap();
    let g = tape.backward(l).unwrap().get_or_zero(xv);
    let mut report = FdReport::default();
    for i in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[i] += spec.h;
        let mut down = x.clone();
        down.data_mut()[i] -= spec.h;
        report.record(format!("input[{i}]"), g.data()[i], (eval(up) - eval(down)) / (2.0 * spec.h), spec);
    }
    report
}

fn weights_for(like: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    rand_tensor(like.shape(), seed, 1.0)
}

fn weighted(y: Var<'_, f64>, w: &Tensor<f64>) -> f64 {
    y.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Sampled parameter gradients of `sum(w ⊙ G(x))` for the default generator
/// on a `1×1×8×8×8` input. The fusion projections start at zero, which would
/// leave every transformer parameter with an exactly zero gradient, so they
/// are replaced by small random values first.
pub fn generator_report(per_tensor: usize, fraction: f64, spec: FdSpec) -> FdReport {
    let g = Generator::<f64>::new(GeneratorConfig::default(), 21).unwrap();
    let mut store = g.params.clone();
    for id in g.fusion_param_ids() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_tensor(&shape, 2100 + id.index() as u64, 0.1);
    }
    let x = rand_tensor(&[1, 1, 8, 8, 8], 22, 1.0);
    let w = weights_for(&x, 23);
    let analytic = {
        let tape = Tape::new();
        let s = Session::new(&tape, &store, true);
        let y = g.forward(&s, s.input(x.clone())).unwrap();
        let l = y.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
        s.param_grads(&tape.backward(l).unwrap())
    };
    let samples = sample_params(&store, per_tensor, fraction, 24);
    check_params(&mut store, &samples, &analytic, spec, |p| {
        let tape = Tape::new();
        let s = Session::new(&tape, p, false);
        weighted(g.forward(&s, s.input(x.clone())).unwrap(), &w)
    })
}

/// Sampled parameter and input gradients of `sum(w ⊙ D(x))` for the default
/// discriminator on a `1×1×8×8×8` input.
pub fn discriminator_report(per_tensor: usize, fraction: f64, spec: FdSpec) -> FdReport {
    let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 31).unwrap();
    let mut store = d.params.clone();
    let x = rand_tensor(&[1, 1, 8, 8, 8], 32, 1.0);
    let out_shape = d.predict(&x).unwrap().shape().to_vec();
    let w = rand_tensor(&out_shape, 33, 1.0);
    let analytic = {
        let tape = Tape::new();
        let s = Session::new(&tape, &store, true);
        let y = d.forward(&s, s.input(x.clone())).unwrap();
        let l = y.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
        s.param_grads(&tape.backward(l).unwrap())
    };
    let samples = sample_params(&store, per_tensor, fraction, 34);
    let mut report = check_params(&mut store, &samples, &analytic, spec, |p| {
        let tape = Tape::new();
        let s = Session::new(&tape, p, false);
        weighted(d.forward(&s, s.input(x.clone())).unwrap(), &w)
    });
    report.merge(check_input(&store, &x, &w, spec, |s, v| d.forward(s, v)));
    report
}
