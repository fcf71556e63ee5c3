//! Finite-difference oracle shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use ctss::autograd::{Tape, Var};
use ctss::nn::{build_mini_resnet1d, ModelConfig};
use ctss::ops::softmax_cross_entropy;
use ctss::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const PROBES: usize = 24;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `d <out, proj> / d inputs[k]` at `PROBES` random coordinates
/// spread over all inputs; returns the worst relative error.
pub fn check_op<F>(inputs: &[Tensor], build: F, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |xs: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs);
    let proj = random(tape.value(out).shape(), &mut rng);
    let grads = tape.backward(out, &proj).unwrap();

    let mut worst: f64 = 0.0;
    for probe in 0..PROBES {
        let k = probe % inputs.len();
        let i = rng.gen_range(0..inputs[k].len());
        let analytic = grads.wrt(vars[k]).map_or(0.0, |g| g.data()[i]);
        let eval = |delta: f64| {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += delta;
            let (t, _, o) = run(&xs);
            dot(t.value(o), &proj)
        };
        let numeric = (eval(H) - eval(-H)) / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Worst relative error per primitive (or small composite) on the tape.
pub fn primitive_suite() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();
    for (stride, padding) in [(1, 0), (2, 1), (2, 3)] {
        let inputs = [random(&[2, 3, 17], &mut rng), random(&[4, 3, 5], &mut rng), random(&[4], &mut rng)];
        let err = check_op(&inputs, |t, v| t.conv1d(v[0], v[1], v[2], stride, padding), 10 + stride as u64);
        out.push((format!("conv1d stride {stride} pad {padding}"), err));
    }
    let x = [random(&[3, 2, 9], &mut rng)];
    out.push(("elu".into(), check_op(&x, |t, v| t.elu(v[0], 1.0), 20)));
    let x = [random(&[2, 3, 16], &mut rng)];
    out.push(("maxpool1d".into(), check_op(&x, |t, v| t.maxpool1d(v[0], 4, 4), 30)));
    for out_len in [1, 3] {
        let x = [random(&[2, 3, 10], &mut rng)];
        let err = check_op(&x, |t, v| t.adaptive_avg_pool1d(v[0], out_len), 40);
        out.push((format!("adaptive_avg_pool1d to {out_len}"), err));
    }
    let inputs = [
        random(&[3, 2, 4], &mut rng),
        random(&[3, 2, 4], &mut rng),
        random(&[5, 8], &mut rng),
        random(&[5], &mut rng),
    ];
    let err = check_op(
        &inputs,
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let f = t.flatten(s)?;
            t.linear(f, v[2], v[3])
        },
        50,
    );
    out.push(("add/flatten/linear".into(), err));
    out.push(("sum".into(), check_op(&inputs[..1], |t, v| t.sum(v[0]), 51)));
    let inputs = [
        random(&[2, 2, 12], &mut rng),
        random(&[3, 2, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[3, 3, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[3, 2, 1], &mut rng),
        random(&[3], &mut rng),
    ];
    let err = check_op(
        &inputs,
        |t, v| {
            let a = t.conv1d(v[0], v[1], v[2], 2, 1)?;
            let a = t.elu(a, 1.0)?;
            let a = t.conv1d(a, v[3], v[4], 1, 1)?;
            let s = t.conv1d(v[0], v[5], v[6], 2, 0)?;
            t.add(a, s)
        },
        60,
    );
    out.push(("residual block".into(), err));
    out.push(("softmax cross-entropy".into(), cross_entropy_error(&mut rng)));
    out
}

fn cross_entropy_error(rng: &mut ChaCha8Rng) -> f64 {
    let logits = random(&[6, 4], rng).map(|v| 3.0 * v);
    let labels = [0, 3, 1, 2, 2, 0];
    let total = |l: &Tensor| softmax_cross_entropy(l, &labels).unwrap().0.sum();
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p.data_mut()[i] += H;
        let mut m = logits.clone();
        m.data_mut()[i] -= H;
        let numeric = (total(&p) - total(&m)) / (2.0 * H);
        worst = worst.max(rel_err(grad.data()[i], numeric));
    }
    worst
}

/// Mean cross-entropy of a three-stage Mini-ResNet1D against its parameter
/// gradients; returns the worst relative error and the probe count.
pub fn model_end_to_end() -> (f64, usize) {
    let cfg = ModelConfig {
        n_electrodes: 2,
        n_timesteps: 128,
        n_classes: 3,
        width_base: 2,
        n_blocks: 3,
        seed: 11,
    };
    let model = build_mini_resnet1d(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 2, 128], &mut rng);
    let labels = [0, 2, 1];
    let (_, grads) = model.mean_loss_and_grads(&x, &labels).unwrap();

    let mut probes = 0;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        // every tensor, plus extra coordinates in the larger ones
        let picks = if g.len() > 8 { 3 } else { 1 };
        for _ in 0..picks {
            let i = rng.gen_range(0..g.len());
            let loss_at = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[k].data_mut()[i] += delta;
                m.mean_loss_and_grads(&x, &labels).unwrap().0
            };
            let numeric = (loss_at(H) - loss_at(-H)) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[i], numeric));
            probes += 1;
        }
    }
    (worst, probes)
}
