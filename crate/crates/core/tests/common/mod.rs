//! Finite-difference gradient cases shared by the gradient tests and the acceptance target.

#![allow(dead_code)]

use diffseg::autodiff::{Tape, Var};
use diffseg::config::RunConfig;
use diffseg::diffusion::{corrupt, loss_total, loss_total_grad_log, smooth_boundaries, LabelSequence, LossWeights};
use diffseg::gradcheck::{check, relative_error, STEP};
use diffseg::masking::{sample_random_mask, ConditionMask};
use diffseg::model::Model;
use diffseg::nn::Session;
use diffseg::{Result, SeqTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;

type Case = fn(&mut ChaCha8Rng) -> f64;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(2..=7), rng.random_range(1..=5))
}

fn run(inputs: &[SeqTensor], rng: &mut ChaCha8Rng, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    check(inputs, f, rng).expect("op evaluates")
}

fn linear(rng: &mut ChaCha8Rng) -> f64 {
    let (l, cin) = dims(rng);
    let cout = rng.random_range(1..=4);
    let bias = rng.random_bool(0.5);
    let xs = [
        SeqTensor::randn(&[l, cin], rng),
        SeqTensor::randn(&[cin, cout], rng),
        SeqTensor::randn(&[cout], rng),
    ];
    run(&xs, rng, |t, v| t.linear(v[0], v[1], bias.then_some(v[2])))
}

fn depthwise_conv(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    let w = [1, 3, 5][rng.random_range(0..3)];
    let dilation = rng.random_range(1..=4);
    let xs = [SeqTensor::randn(&[l, c], rng), SeqTensor::randn(&[w, c], rng)];
    run(&xs, rng, |t, v| t.depthwise_conv1d(v[0], v[1], dilation))
}

fn maxpool(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    let w = [1, 3, 5][rng.random_range(0..3)];
    run(&[SeqTensor::randn(&[l, c], rng)], rng, |t, v| t.maxpool1d_same(v[0], w))
}

fn mean_broadcast(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    run(&[SeqTensor::randn(&[l, c], rng)], rng, |t, v| {
        let m = t.mean_time(v[0])?;
        t.broadcast_time(m, l + 1)
    })
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    run(&[SeqTensor::randn(&[l, c], rng)], rng, |t, v| Ok(t.relu(v[0])))
}

fn add_mul(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    let xs = [SeqTensor::randn(&[l, c], rng), SeqTensor::randn(&[l, c], rng)];
    run(&xs, rng, |t, v| {
        let s = t.add(v[0], v[1])?;
        t.mul(s, v[1])
    })
}

fn frame_mask(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    let mask: Vec<f64> = (0..l).map(|_| f64::from(u8::from(rng.random_bool(0.6)))).collect();
    run(&[SeqTensor::randn(&[l, c], rng)], rng, move |t, v| {
        t.frame_mask(v[0], &mask)
    })
}

fn instance_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    let xs = [
        SeqTensor::randn(&[l, c], rng),
        SeqTensor::randn(&[c], rng),
        SeqTensor::randn(&[c], rng),
    ];
    run(&xs, rng, |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5))
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    run(&[SeqTensor::randn(&[l, c], rng)], rng, |t, v| t.softmax(v[0]))
}

fn log_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = dims(rng);
    run(&[SeqTensor::randn(&[l, c], rng)], rng, |t, v| t.log_softmax(v[0]))
}

fn attention(rng: &mut ChaCha8Rng) -> f64 {
    let heads = rng.random_range(1..=2);
    let h = heads * rng.random_range(1..=3);
    let (lq, lk) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let xs = [
        SeqTensor::randn(&[lq, h], rng),
        SeqTensor::randn(&[lk, h], rng),
        SeqTensor::randn(&[lk, h], rng),
    ];
    run(&xs, rng, |t, v| t.attention(v[0], v[1], v[2], heads))
}

fn concat(rng: &mut ChaCha8Rng) -> f64 {
    let (l, a) = dims(rng);
    let b = rng.random_range(1..=4);
    let xs = [SeqTensor::randn(&[l, a], rng), SeqTensor::randn(&[l, b], rng)];
    run(&xs, rng, |t, v| t.concat_channels(v[0], v[1]))
}

fn random_labels(l: usize, c: usize, rng: &mut ChaCha8Rng) -> LabelSequence {
    let mut ids = Vec::with_capacity(l);
    let mut cur = rng.random_range(0..c);
    for _ in 0..l {
        if rng.random_bool(0.25) {
            cur = rng.random_range(0..c);
        }
        ids.push(cur);
    }
    LabelSequence::new(ids, c).unwrap()
}

/// Weighted objective against its log-space gradient, away from every clamp.
fn training_loss(rng: &mut ChaCha8Rng) -> f64 {
    let (l, c) = (rng.random_range(2..=10), rng.random_range(2..=5));
    let y = random_labels(l, c, rng);
    let b = smooth_boundaries(&y.boundaries(), rng.random_range(0.0..2.0));
    let w = LossWeights {
        ce: rng.random_range(0.1..5.0),
        smooth: rng.random_range(0.1..2.0),
        boundary: rng.random_range(0.1..2.0),
    };
    let mut tape = Tape::new();
    let z = tape.leaf(SeqTensor::randn(&[l, c], rng));
    let lp = tape.log_softmax(z).unwrap();
    let logp = tape.value(lp).clone();
    let (parts, seed) = loss_total_grad_log(&logp, &y, &b, None, &w).unwrap();
    let objective = |lp: &SeqTensor| {
        let p = loss_total(&lp.map(f64::exp), &y, &b).unwrap();
        w.ce * p.ce + w.smooth * p.smooth + w.boundary * p.boundary
    };
    assert!((objective(&logp) - parts.total).abs() < 1e-12);
    let mut numeric = vec![0.0; logp.len()];
    for (j, n) in numeric.iter_mut().enumerate() {
        let mut up = logp.clone();
        up.data_mut()[j] += STEP;
        let mut down = logp.clone();
        down.data_mut()[j] -= STEP;
        *n = (objective(&up) - objective(&down)) / (2.0 * STEP);
    }
    relative_error(seed.data(), &numeric)
}

fn tiny_model(rng: &mut ChaCha8Rng) -> Model {
    let cfg = RunConfig {
        seed: rng.random(),
        hidden: 4 * rng.random_range(1..=2),
        encoder_layers: rng.random_range(1..=3),
        decoder_blocks: rng.random_range(1..=2),
        heads: rng.random_range(1..=2),
        diffusion_steps: 100,
        delta_init: 10,
        delta_max: 20,
        instance_norm: rng.random_bool(0.5),
        ..RunConfig::default()
    };
    Model::new(cfg, 3, 3).unwrap()
}

/// Encoder, mask and decoder chained into the weighted loss; one sampled entry per parameter tensor.
fn end_to_end(rng: &mut ChaCha8Rng) -> f64 {
    let mut m = tiny_model(rng);
    let l = rng.random_range(4..=10);
    let f = SeqTensor::randn(&[l, 3], rng);
    let y = random_labels(l, 3, rng);
    let mask = if rng.random_bool(0.5) {
        sample_random_mask(&y, 2, rng).unwrap()
    } else {
        ConditionMask::ones(l)
    };
    let s = rng.random_range(1..=100);
    let ys = corrupt(
        &m.codec.encode_labels(&y),
        s,
        &m.schedule,
        &SeqTensor::randn(&[l, 3], rng),
    )
    .unwrap();
    let b = smooth_boundaries(&y.boundaries(), 1.0);
    let w = LossWeights {
        ce: 5.0,
        ..LossWeights::default()
    };
    let eval = |m: &Model, grads: bool| {
        let mut sess = Session::new(&m.store, grads);
        let fi = sess.input(f.clone());
        let h = m.encoder.forward(&mut sess, fi).unwrap();
        let yi = sess.input(ys.clone());
        let lp = m.decoder.decode(&mut sess, yi, s, h, &mask).unwrap();
        let (parts, seed) = loss_total_grad_log(sess.value(lp), &y, &b, None, &w).unwrap();
        let g = grads.then(|| {
            let mut g = sess.tape.backward(lp, seed).unwrap();
            sess.param_grads(&mut g)
        });
        (parts.total, g)
    };
    let grads = eval(&m, true).1.unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for i in 0..m.store.len() {
        let k = rng.random_range(0..m.store.tensors()[i].len());
        let orig = m.store.tensors()[i].data()[k];
        m.store.tensors_mut()[i].data_mut()[k] = orig + STEP;
        let up = eval(&m, false).0;
        m.store.tensors_mut()[i].data_mut()[k] = orig - STEP;
        let down = eval(&m, false).0;
        m.store.tensors_mut()[i].data_mut()[k] = orig;
        analytic.push(grads[i].data()[k]);
        numeric.push((up - down) / (2.0 * STEP));
    }
    relative_error(&analytic, &numeric)
}

pub const CASES: [(&str, Case); 14] = [
    ("linear", linear),
    ("depthwise_conv1d", depthwise_conv),
    ("maxpool1d_same", maxpool),
    ("mean_time+broadcast_time", mean_broadcast),
    ("relu", relu),
    ("add+mul", add_mul),
    ("frame_mask", frame_mask),
    ("instance_norm", instance_norm),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("attention", attention),
    ("concat_channels", concat),
    ("training_loss", training_loss),
    ("end_to_end", end_to_end),
];

/// Worst relative error of a case over all random instances.
pub fn worst_error(case: Case, base_seed: u64) -> f64 {
    (0..INSTANCES)
        .map(|i| {
            case(&mut ChaCha8Rng::seed_from_u64(
                base_seed.wrapping_mul(1000).wrapping_add(i),
            ))
        })
        .fold(0.0, f64::max)
}
