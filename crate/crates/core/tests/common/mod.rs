//! Finite-difference gradient harness shared by the test targets.

#![allow(dead_code)]

use modir::model::{loss_dice, loss_ncc, loss_smooth, warp, ModelParams};
use modir::pair::RegistrationPair;
use modir::train::ForwardPass;
use modir::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Contracts the op output with a fixed random tensor and returns the worst
/// relative error between its analytic gradient and central differences,
/// over every element of small inputs and a sample of large ones.
pub fn gradient_error(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let forward = |values: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        (tape, vars, out)
    };
    let (mut tape, vars, out) = forward(inputs);
    let seed: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.backward_seeded(&[(out, &seed)]).unwrap();
    let contract = |values: &[Tensor]| -> f64 {
        let (t, _, o) = forward(values);
        t.value(o).data().iter().zip(&seed).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).unwrap().to_vec();
        let picks: Vec<usize> = if input.len() <= 60 {
            (0..input.len()).collect()
        } else {
            (0..60).map(|_| rng.random_range(0..input.len())).collect()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (contract(&plus) - contract(&minus)) / (2.0 * H);
            worst = worst.max(relative(analytic[j], numeric, 1e-3));
        }
    }
    worst
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(3..8),
        rng.random_range(3..8),
    ]
}

/// Coordinates strictly inside the image and away from integer positions,
/// where bilinear sampling is smooth.
pub fn smooth_coords(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, h, w, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h };
        let base = rng.random_range(0..extent - 1) as f64;
        base + rng.random_range(0.05..0.95)
    })
}

/// Worst gradient error of every tape op and loss on one randomized shape.
pub fn every_op(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let s = random_shape(rng);
    let [n, _, h, w] = s;
    let a = random(&s, -2.0, 2.0, rng);
    let b = random(&s, -2.0, 2.0, rng);
    let pos = random(&s, 0.5, 2.0, rng);
    let x = away_from_zero(&s, rng);
    let bias = random(&[s[1]], -1.0, 1.0, rng);
    let other = random(&[n, 2, h, w], -1.0, 1.0, rng);
    let flow = random(&[n, 2, h, w], -2.0, 2.0, rng);
    let coords = smooth_coords(n, h, w, rng);
    let kernel = random(&[2, s[1], 3, 3], -1.0, 1.0, rng);
    let mut out = vec![
        ("add", gradient_error(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), rng)),
        ("sub", gradient_error(&[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]), rng)),
        ("mul", gradient_error(&[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]), rng)),
        ("div", gradient_error(&[a.clone(), pos], &|t, v| t.div(v[0], v[1]), rng)),
        ("square", gradient_error(std::slice::from_ref(&a), &|t, v| Ok(t.square(v[0])), rng)),
        ("scale", gradient_error(std::slice::from_ref(&a), &|t, v| Ok(t.scale(v[0], -1.7)), rng)),
        ("offset", gradient_error(std::slice::from_ref(&a), &|t, v| Ok(t.offset(v[0], 0.3)), rng)),
        ("sum", gradient_error(std::slice::from_ref(&a), &|t, v| Ok(t.sum(v[0])), rng)),
        ("mean", gradient_error(std::slice::from_ref(&a), &|t, v| Ok(t.mean(v[0])), rng)),
        ("leaky_relu", gradient_error(&[x], &|t, v| Ok(t.leaky_relu(v[0], 0.2)), rng)),
        ("conv2d", gradient_error(&[a.clone(), kernel.clone()], &|t, v| t.conv2d(v[0], v[1], 1, 1), rng)),
        ("conv2d stride 2", gradient_error(&[a.clone(), kernel], &|t, v| t.conv2d(v[0], v[1], 2, 1), rng)),
        ("bias_add", gradient_error(&[a.clone(), bias], &|t, v| t.bias_add(v[0], v[1]), rng)),
        ("channel_sum", gradient_error(std::slice::from_ref(&a), &|t, v| t.channel_sum(v[0]), rng)),
        ("concat", gradient_error(&[a.clone(), other], &|t, v| t.concat(v[0], v[1]), rng)),
        ("upsample_bilinear", gradient_error(std::slice::from_ref(&a), &|t, v| t.upsample_bilinear(v[0], 2), rng)),
        ("diff", gradient_error(std::slice::from_ref(&a), &|t, v| t.diff(v[0], 3), rng)),
        ("box_sum", gradient_error(std::slice::from_ref(&a), &|t, v| t.box_sum(v[0], 3), rng)),
        ("flow_to_coords", gradient_error(&[flow], &|t, v| t.flow_to_coords(v[0]), rng)),
        ("grid_sample", gradient_error(&[a, coords], &|t, v| t.grid_sample(v[0], v[1]), rng)),
    ];
    out.extend(loss_errors(rng));
    out
}

/// Gradient errors of the three losses, each evaluated through a warp.
pub fn loss_errors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let src = random(&[1, 1, 14, 14], 0.0, 1.0, rng);
    let tgt = random(&[1, 1, 14, 14], 0.0, 1.0, rng);
    let mask = random(&[1, 2, 14, 14], 0.0, 1.0, rng);
    let mask_t = random(&[1, 2, 14, 14], 0.0, 1.0, rng);
    // Non-integer displacements keep the sampling points off the kinks.
    let flow = Tensor::from_fn(&[1, 2, 14, 14], |_| {
        rng.random_range(0..3) as f64 - 1.0 + rng.random_range(0.05..0.95)
    });
    let ncc = gradient_error(
        &[src, flow.clone()],
        &move |t, v| {
            let target = t.constant(tgt.clone());
            let warped = warp(t, v[0], v[1])?;
            loss_ncc(t, warped, target)
        },
        rng,
    );
    let dice = gradient_error(
        &[mask, flow.clone()],
        &move |t, v| {
            let target = t.constant(mask_t.clone());
            let warped = warp(t, v[0], v[1])?;
            loss_dice(t, warped, target)
        },
        rng,
    );
    let smooth = gradient_error(&[flow], &|t, v| loss_smooth(t, v[0]), rng);
    vec![("ncc", ncc), ("dice", dice), ("smooth", smooth)]
}

/// Worst relative error between the weighted multi-head gradient and
/// central differences, at one random element of every parameter tensor.
pub fn model_gradient_error(params: &ModelParams, pair: &RegistrationPair, weights: &[Vec<f64>], seed: u64) -> f64 {
    let loss = |p: &ModelParams| -> f64 {
        let pass = ForwardPass::new(p, pair, true).unwrap();
        pass.loss_values()
            .iter()
            .zip(weights)
            .map(|(l, w)| l.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let grads = ForwardPass::new(params, pair, true).unwrap().backward(weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for ti in 0..params.tensors().len() {
        let j = rng.random_range(0..params.tensors()[ti].len());
        let mut plus = params.clone();
        plus.tensors_mut()[ti].data_mut()[j] += H;
        let mut minus = params.clone();
        minus.tensors_mut()[ti].data_mut()[j] -= H;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * H);
        worst = worst.max(relative(grads[ti][j], fd, 1e-6));
    }
    worst
}
